//! Minimal CNN building blocks with hand-written backward passes.
//!
//! Layers are stateless descriptors that address a slice of a component's
//! flat parameter buffer through an offset, so a whole component (encoder or
//! head) is one `Vec<f64>` for the optimizer, checkpoints and gradient checks.
//! Activations are channel-first [`Volume`]s.

use rand::Rng;

use crate::data::DataCube;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// Channel-first copy of a `height × width × bands` cube.
    pub fn from_cube(cube: &DataCube) -> Self {
        Self::from_hwc(&cube.values, cube.height, cube.width, cube.bands)
    }

    pub fn from_hwc(values: &[f64], height: usize, width: usize, channels: usize) -> Self {
        let mut v = Self::zeros(channels, height, width);
        let plane = height * width;
        for (p, px) in values.chunks_exact(channels).enumerate() {
            for (c, &x) in px.iter().enumerate() {
                v.data[c * plane + p] = x;
            }
        }
        v
    }

    /// Back to `height × width × channels` order.
    pub fn to_hwc(&self) -> Vec<f64> {
        let plane = self.plane_len();
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Volume) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stride-1 convolution with zero "same" padding (cross-correlation, as is
/// usual for learned filters). `kernel` is 1 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, offset: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        Self {
            in_channels,
            out_channels,
            kernel,
            offset,
        }
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.taps()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_len()
    }

    fn weights<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let w = &params[self.offset..self.offset + self.weight_len()];
        let b = &params[self.offset + self.weight_len()..self.end()];
        (w, b)
    }

    /// Uniform in `±gain·sqrt(3 / fan_in)`, zero bias.
    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut impl Rng) {
        let bound = gain * (3.0 / self.taps() as f64).sqrt();
        let (w, b) = params[self.offset..self.end()].split_at_mut(self.weight_len());
        w.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        b.fill(0.0);
    }

    /// Unfolds the input into `taps × (h·w)` rows.
    fn im2col(&self, x: &Volume) -> Vec<f64> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let mut col = vec![0.0; self.taps() * hw];
        for ci in 0..self.in_channels {
            let src = x.plane(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (x_lo, x_hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                        let dst = &mut row[y * w + x_lo..y * w + x_hi];
                        let s0 = (sy as usize) * w + (x_lo as isize + dx) as usize;
                        dst.copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
        col
    }

    /// Folds column gradients back onto the input grid.
    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Volume {
        if self.kernel == 1 {
            return Volume {
                channels: self.in_channels,
                height: h,
                width: w,
                data: col.to_vec(),
            };
        }
        let hw = h * w;
        let mut out = Volume::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let dst = out.plane_mut(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (x_lo, x_hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                        let s0 = (sy as usize) * w + (x_lo as isize + dx) as usize;
                        let d = &mut dst[s0..s0 + (x_hi - x_lo)];
                        for (a, b) in d.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                            *a += b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f64], x: &Volume) -> Volume {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let hw = x.plane_len();
        let col = self.im2col(x);
        let (wts, bias) = self.weights(params);
        let mut out = Volume::zeros(self.out_channels, x.height, x.width);
        let taps = self.taps();
        for co in 0..self.out_channels {
            let o = out.plane_mut(co);
            o.fill(bias[co]);
            for (k, &wk) in wts[co * taps..(co + 1) * taps].iter().enumerate() {
                if wk != 0.0 {
                    axpy(o, wk, &col[k * hw..(k + 1) * hw]);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// input gradient when requested.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Volume,
        grad_out: &Volume,
        grad_params: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Volume> {
        let hw = x.plane_len();
        let taps = self.taps();
        let col = self.im2col(x);
        let (wts, _) = self.weights(params);
        {
            let (gw, gb) = grad_params[self.offset..self.end()].split_at_mut(self.weight_len());
            for co in 0..self.out_channels {
                let g = grad_out.plane(co);
                gb[co] += g.iter().sum::<f64>();
                for k in 0..taps {
                    gw[co * taps + k] += dot(g, &col[k * hw..(k + 1) * hw]);
                }
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut gcol = vec![0.0; taps * hw];
        for co in 0..self.out_channels {
            let g = grad_out.plane(co);
            for k in 0..taps {
                let wk = wts[co * taps + k];
                if wk != 0.0 {
                    axpy(&mut gcol[k * hw..(k + 1) * hw], wk, g);
                }
            }
        }
        Some(self.col2im(&gcol, x.height, x.width))
    }
}

/// Fully connected layer on flat vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, offset: usize) -> Self {
        Self {
            inputs,
            outputs,
            offset,
        }
    }

    pub fn param_len(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_len()
    }

    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut impl Rng) {
        let bound = gain * (3.0 / self.inputs as f64).sqrt();
        let wl = self.outputs * self.inputs;
        let (w, b) = params[self.offset..self.end()].split_at_mut(wl);
        w.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        b.fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let wl = self.outputs * self.inputs;
        let w = &params[self.offset..self.offset + wl];
        let b = &params[self.offset + wl..self.end()];
        (0..self.outputs)
            .map(|o| b[o] + dot(&w[o * self.inputs..(o + 1) * self.inputs], x))
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let wl = self.outputs * self.inputs;
        let w = &params[self.offset..self.offset + wl];
        let mut gx = vec![0.0; self.inputs];
        let (gw, gb) = grad_params[self.offset..self.end()].split_at_mut(wl);
        for (o, &g) in grad_out.iter().enumerate() {
            gb[o] += g;
            axpy(&mut gw[o * self.inputs..(o + 1) * self.inputs], g, x);
            axpy(&mut gx, g, &w[o * self.inputs..(o + 1) * self.inputs]);
        }
        gx
    }
}

pub fn relu(x: &mut Volume) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the post-activation values of a ReLU.
pub fn relu_backward(grad: &mut Volume, activated: &Volume) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 average pooling (spatial dims must be even).
pub fn avg_pool2(x: &Volume) -> Volume {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Volume::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let s = x.at(c, 2 * y, 2 * xx)
                    + x.at(c, 2 * y, 2 * xx + 1)
                    + x.at(c, 2 * y + 1, 2 * xx)
                    + x.at(c, 2 * y + 1, 2 * xx + 1);
                out.data[(c * h + y) * w + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Volume) -> Volume {
    let (h, w) = (grad.height * 2, grad.width * 2);
    let mut out = Volume::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = 0.25 * grad.at(c, y / 2, x / 2);
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Volume) -> Volume {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Volume::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Volume) -> Volume {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Volume::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                out.data[(c * h + y / 2) * w + x / 2] += grad.at(c, y, x);
            }
        }
    }
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Volume, b: &Volume) -> Volume {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Volume {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split_channels(grad: &Volume, first: usize) -> (Volume, Volume) {
    let n = first * grad.plane_len();
    let mk = |channels, data: &[f64]| Volume {
        channels,
        height: grad.height,
        width: grad.width,
        data: data.to_vec(),
    };
    (
        mk(first, &grad.data[..n]),
        mk(grad.channels - first, &grad.data[n..]),
    )
}

/// Averages each channel over a `rows × cols` grid of equal cells.
/// Output order is `[channel][cell_row][cell_col]`.
pub fn grid_pool(x: &Volume, rows: usize, cols: usize) -> Vec<f64> {
    let (ch, cw) = (x.height / rows, x.width / cols);
    let norm = 1.0 / (ch * cw) as f64;
    let mut out = vec![0.0; x.channels * rows * cols];
    for c in 0..x.channels {
        for y in 0..x.height {
            for xx in 0..x.width {
                out[(c * rows + y / ch) * cols + xx / cw] += x.at(c, y, xx);
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

pub fn grid_pool_backward(grad: &[f64], channels: usize, height: usize, width: usize, rows: usize, cols: usize) -> Volume {
    let (ch, cw) = (height / rows, width / cols);
    let norm = 1.0 / (ch * cw) as f64;
    let mut out = Volume::zeros(channels, height, width);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                out.data[(c * height + y) * width + x] = norm * grad[(c * rows + y / ch) * cols + x / cw];
            }
        }
    }
    out
}

/// Decoupled weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, opt: &AdamW, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let decay = 1.0 - opt.learning_rate * opt.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *p *= decay;
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= opt.learning_rate * mhat / (vhat.sqrt() + opt.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_volume(c: usize, h: usize, w: usize, seed: u64) -> Volume {
        let mut rng = crate::seed::Rng::seed_from_u64(seed);
        Volume {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct-loop 3x3 convolution oracle.
    fn conv_oracle(conv: &Conv2d, params: &[f64], x: &Volume) -> Volume {
        let k = conv.kernel as isize;
        let half = k / 2;
        let mut out = Volume::zeros(conv.out_channels, x.height, x.width);
        for co in 0..conv.out_channels {
            for y in 0..x.height as isize {
                for xx in 0..x.width as isize {
                    let mut s = params[conv.offset + conv.weight_len() + co];
                    for ci in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - half, xx + kx - half);
                                if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                    continue;
                                }
                                let wi = conv.offset
                                    + ((co * conv.in_channels + ci) * conv.kernel + ky as usize) * conv.kernel
                                    + kx as usize;
                                s += params[wi] * x.at(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.data[(co * x.height + y as usize) * x.width + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for kernel in [1, 3] {
            let conv = Conv2d::new(3, 4, kernel, 5);
            let mut params = vec![0.0; conv.end()];
            let mut rng = crate::seed::Rng::seed_from_u64(11);
            conv.init(&mut params, 1.0, &mut rng);
            params[conv.offset + conv.weight_len()..conv.end()]
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| *b = 0.1 * i as f64);
            let x = random_volume(3, 5, 6, 2);
            let a = conv.forward(&params, &x);
            let b = conv_oracle(&conv, &params, &x);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv2d::new(2, 3, 3, 0);
        let mut params = vec![0.0; conv.end()];
        let mut rng = crate::seed::Rng::seed_from_u64(5);
        conv.init(&mut params, 1.0, &mut rng);
        let x = random_volume(2, 4, 4, 6);
        let gout = random_volume(3, 4, 4, 7);
        let loss = |p: &[f64], x: &Volume| dot(&conv.forward(p, x).data, &gout.data);

        let mut gp = vec![0.0; params.len()];
        let gx = conv.backward(&params, &x, &gout, &mut gp, true).unwrap();
        let eps = 1e-6;
        for i in [0, 7, 20, conv.end() - 1] {
            let mut p = params.clone();
            p[i] += eps;
            let up = loss(&p, &x);
            p[i] -= 2.0 * eps;
            let down = loss(&p, &x);
            assert!(((up - down) / (2.0 * eps) - gp[i]).abs() < 1e-6);
        }
        for i in [0, 9, 31] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let up = loss(&params, &xp);
            xp.data[i] -= 2.0 * eps;
            let down = loss(&params, &xp);
            assert!(((up - down) / (2.0 * eps) - gx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let x = random_volume(2, 4, 4, 1);
        let g = random_volume(2, 2, 2, 2);
        // <pool(x), g> == <x, pool^T(g)>
        let lhs = dot(&avg_pool2(&x).data, &g.data);
        let rhs = dot(&x.data, &avg_pool2_backward(&g).data);
        assert!((lhs - rhs).abs() < 1e-12);
        let y = random_volume(2, 2, 2, 3);
        let h = random_volume(2, 4, 4, 4);
        let lhs = dot(&upsample2(&y).data, &h.data);
        let rhs = dot(&y.data, &upsample2_backward(&h).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn grid_pool_adjoint() {
        let x = random_volume(3, 4, 6, 8);
        let g: Vec<f64> = (0..3 * 2 * 3).map(|i| i as f64 * 0.3 - 1.0).collect();
        let lhs = dot(&grid_pool(&x, 2, 3), &g);
        let rhs = dot(&x.data, &grid_pool_backward(&g, 3, 4, 6, 2, 3).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn hwc_round_trip() {
        let cube = DataCube::from_fn(3, 4, 5, |r, c, b| (r * 100 + c * 10 + b) as f64);
        let v = Volume::from_cube(&cube);
        assert_eq!(v.at(4, 2, 3), cube.get(2, 3, 4));
        assert_eq!(v.to_hwc(), cube.values);
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        state.step(&opt, &mut p, &[3.0, -0.5]);
        assert!((p[0] - (1.0 - 5e-4)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 5e-4)).abs() < 1e-9);
    }
}
