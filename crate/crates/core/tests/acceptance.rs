//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 3 7`.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use cmtssl::config::RunConfig;
use cmtssl::curriculum::CurriculumSchedule;
use cmtssl::data::DataCube;
use cmtssl::difficulty::{self, Aggregation};
use cmtssl::evaluation::{metrics, ConfusionMatrix};
use cmtssl::experiment;
use cmtssl::model::{build_model, pretext_heads, Component, EncoderSpec, MultiTaskModel};
use cmtssl::pretext::{self, MaskingConfig, SpatialJigsawConfig, SpectralJigsawConfig};
use cmtssl::seed;
use cmtssl::training::{
    self, bce_with_logits, generate_pretext, loss_mim, pretext_gradients, pretext_losses, LossWeights,
    PretextConfig, PretextSet, Strategy, TrainConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_cube(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> DataCube {
    DataCube::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// 1. Difficulty oracle

/// Dense-loop gradient magnitude: explicit replicate-padded copy, Scharr
/// correlation written out term by term, forward band difference.
fn oracle_difficulty(cube: &DataCube) -> f64 {
    let (h, w, c) = (cube.height, cube.width, cube.bands);
    let mut padded = vec![vec![vec![0.0; c]; w + 2]; h + 2];
    for (r, plane) in padded.iter_mut().enumerate() {
        for (q, px) in plane.iter_mut().enumerate() {
            let rr = r.saturating_sub(1).min(h - 1);
            let qq = q.saturating_sub(1).min(w - 1);
            for (b, v) in px.iter_mut().enumerate() {
                *v = cube.get(rr, qq, b);
            }
        }
    }
    let p = |r: usize, q: usize, b: usize| padded[r][q][b];
    let mut sum = 0.0;
    for r in 1..=h {
        for q in 1..=w {
            for b in 0..c {
                let gx = 3.0 * (p(r - 1, q + 1, b) - p(r - 1, q - 1, b))
                    + 10.0 * (p(r, q + 1, b) - p(r, q - 1, b))
                    + 3.0 * (p(r + 1, q + 1, b) - p(r + 1, q - 1, b));
                let gy = 3.0 * (p(r + 1, q - 1, b) - p(r - 1, q - 1, b))
                    + 10.0 * (p(r + 1, q, b) - p(r - 1, q, b))
                    + 3.0 * (p(r + 1, q + 1, b) - p(r - 1, q + 1, b));
                let gz = if b + 1 < c { p(r, q, b + 1) - p(r, q, b) } else { 0.0 };
                sum += (gx * gx + gy * gy + gz * gz).sqrt();
            }
        }
    }
    sum / (h * w * c) as f64
}

fn c1_difficulty_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let cube = random_cube(&mut rng, 8, 8, 4);
        let got = difficulty::difficulty(&cube, Aggregation::Average).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(got, oracle_difficulty(&cube)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && secs < 10.0,
        format!("200 cubes, worst relative error {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. Homogeneity

fn c2_homogeneity() -> Outcome {
    let mut rng = seed::rng(2, &[]);
    let (mut worst_scale, mut worst_shift): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let cube = random_cube(&mut rng, 8, 8, 4);
        let base = difficulty::difficulty(&cube, Aggregation::Average).map_err(|e| e.to_string())?;
        for lambda in [0.5, 2.0, 10.0] {
            let scaled = cube.with_values(cube.values.iter().map(|v| v * lambda).collect());
            let s = difficulty::difficulty(&scaled, Aggregation::Average).map_err(|e| e.to_string())?;
            worst_scale = worst_scale.max(rel_err(s, lambda * base));
        }
        let shift = rng.gen_range(-5.0..5.0);
        let shifted = cube.with_values(cube.values.iter().map(|v| v + shift).collect());
        let s = difficulty::difficulty(&shifted, Aggregation::Average).map_err(|e| e.to_string())?;
        worst_shift = worst_shift.max((s - base).abs());
    }
    check(
        worst_scale <= 1e-6 && worst_shift < 1e-9,
        format!("scale error {worst_scale:.2e} (rel), shift change {worst_shift:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Curriculum schedule

/// `round_half_up(K · (f/10)^(k-1))` in exact integer arithmetic, at least 1.
fn oracle_epochs(k0: usize, f_tenths: u32, k: u32) -> usize {
    let num = k0 as u128 * (f_tenths as u128).pow(k - 1);
    let den = 10u128.pow(k - 1);
    (((2 * num + den) / (2 * den)) as usize).max(1)
}

fn c3_schedule() -> Outcome {
    let mut rng = seed::rng(3, &[]);
    for draw in 0..100 {
        let s = *[3usize, 4, 5].choose(&mut rng).unwrap();
        let k0 = rng.gen_range(10..=40);
        let f_tenths: u32 = rng.gen_range(10..=20);
        let n = rng.gen_range(s..=3000);
        let f = f_tenths as f64 / 10.0;
        let sched = CurriculumSchedule::new(n, s, k0, f).map_err(|e| e.to_string())?;
        let batches = sched.batches();
        let ctx = format!("draw {draw}: N={n} S={s} K={k0} F={f}");
        if batches.len() != s {
            return Err(format!("{ctx}: {} stages", batches.len()));
        }
        let mut prev = 0..0;
        for (i, b) in batches.iter().enumerate() {
            let k = i + 1;
            if b.size != n * k / s {
                return Err(format!("{ctx}: stage {k} size {} != {}", b.size, n * k / s));
            }
            let ids = b.cube_ids();
            if ids.start != 0 || ids.end < prev.end {
                return Err(format!("{ctx}: stage {k} does not contain stage {}", k - 1));
            }
            prev = ids;
            let expect = oracle_epochs(k0, f_tenths, k as u32);
            if b.epochs != expect {
                return Err(format!("{ctx}: stage {k} epochs {} != {expect}", b.epochs));
            }
        }
        if prev.end != n {
            return Err(format!("{ctx}: final stage covers {} of {n}", prev.end));
        }
    }
    let fig = CurriculumSchedule::new(300, 3, 32, 1.5).map_err(|e| e.to_string())?;
    let epochs: Vec<usize> = fig.batches().iter().map(|b| b.epochs).collect();
    check(
        epochs == [32, 48, 72],
        format!("100 draws exact; K=32 F=1.5 S=3 gives {epochs:?}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Jigsaw round trip

fn is_permutation_matrix(target: &[f64], n: usize, perm: &[usize]) -> bool {
    if target.len() != n * n || target.iter().any(|&v| v != 0.0 && v != 1.0) {
        return false;
    }
    let rows_ok = (0..n).all(|i| (0..n).map(|j| target[i * n + j]).sum::<f64>() == 1.0);
    let cols_ok = (0..n).all(|j| (0..n).map(|i| target[i * n + j]).sum::<f64>() == 1.0);
    let matches = perm.iter().enumerate().all(|(i, &p)| target[i * n + p] == 1.0);
    rows_ok && cols_ok && matches
}

fn c4_jigsaw() -> Outcome {
    let mut rng = seed::rng(4, &[]);
    let spatial_cfgs = [(8, 8), (4, 4), (4, 8)];
    let mut checked = 0;
    for i in 0..500 {
        let cube = random_cube(&mut rng, 16, 16, 8);
        if i % 2 == 0 {
            let (ph, pw) = spatial_cfgs[i / 2 % spatial_cfgs.len()];
            let cfg = SpatialJigsawConfig {
                patch_height: ph,
                patch_width: pw,
            };
            let s = pretext::spatial_jigsaw(&cube, &cfg, &mut rng).map_err(|e| e.to_string())?;
            let n = s.permutation.len();
            let cols = 16 / pw;
            // Slot i holds the patch from position perm[i].
            for (slot, &orig) in s.permutation.iter().enumerate() {
                let (dr, dc) = (slot / cols * ph, slot % cols * pw);
                let (sr, sc) = (orig / cols * ph, orig % cols * pw);
                for r in 0..ph {
                    for c in 0..pw {
                        for b in 0..8 {
                            if s.shuffled.get(dr + r, dc + c, b).to_bits() != cube.get(sr + r, sc + c, b).to_bits() {
                                return Err(format!("pair {i}: slot {slot} content mismatch"));
                            }
                        }
                    }
                }
            }
            if !is_permutation_matrix(&s.target, n, &s.permutation) {
                return Err(format!("pair {i}: spatial target is not a permutation matrix"));
            }
            let back = pretext::restore_spatial(&s.shuffled, &cfg, &s.permutation).map_err(|e| e.to_string())?;
            if back.values.iter().zip(&cube.values).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("pair {i}: spatial restore is not bit-exact"));
            }
        } else {
            let blocks = [2, 4, 8][i / 2 % 3];
            let cfg = SpectralJigsawConfig { blocks };
            let s = pretext::spectral_jigsaw(&cube, &cfg, &mut rng).map_err(|e| e.to_string())?;
            let depth = 8 / blocks;
            for r in 0..16 {
                for c in 0..16 {
                    for (slot, &orig) in s.permutation.iter().enumerate() {
                        for d in 0..depth {
                            if s.shuffled.get(r, c, slot * depth + d).to_bits()
                                != cube.get(r, c, orig * depth + d).to_bits()
                            {
                                return Err(format!("pair {i}: block {slot} content mismatch"));
                            }
                        }
                    }
                }
            }
            if !is_permutation_matrix(&s.target, blocks, &s.permutation) {
                return Err(format!("pair {i}: spectral target is not a permutation matrix"));
            }
            let back = pretext::restore_spectral(&s.shuffled, &cfg, &s.permutation).map_err(|e| e.to_string())?;
            if back.values.iter().zip(&cube.values).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("pair {i}: spectral restore is not bit-exact"));
            }
        }
        checked += 1;
    }
    Ok(format!("{checked} pairs (250 spatial, 250 spectral) round-trip bit-exactly"))
}

// ---------------------------------------------------------------------------
// 5. Masking

fn c5_masking() -> Outcome {
    let cfg = MaskingConfig {
        patch_height: 8,
        patch_width: 8,
        band_groups: 4,
        ratio: 0.6,
    };
    let mut data_rng = seed::rng(5, &[]);
    let cube = random_cube(&mut data_rng, 16, 16, 8);
    let geo = cfg.geometry(16, 16, 8).map_err(|e| e.to_string())?;
    if geo.total() != 16 {
        return Err(format!("geometry has {} patches", geo.total()));
    }
    let mut covered = [0usize; 16];
    for s in 0..500u64 {
        let mut rng = seed::rng(s, &[55]);
        let m = pretext::mask_cube(&cube, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let mut distinct = m.masked_patches.clone();
        distinct.dedup();
        if m.masked_patches.len() != 10 || distinct.len() != 10 {
            return Err(format!("seed {s}: {} patches masked", m.masked_patches.len()));
        }
        let voxels = m.mask.iter().filter(|&&b| b).count();
        if voxels != 10 * geo.patch_volume() || m.target.len() != voxels {
            return Err(format!("seed {s}: {voxels} masked voxels"));
        }
        if m.mask.iter().zip(&m.visible.values).any(|(&b, &v)| b && v != 0.0) {
            return Err(format!("seed {s}: masked voxel left visible"));
        }
        let re = m.reassemble();
        if re.iter().zip(&cube.values).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("seed {s}: reassembly is not bit-exact"));
        }
        for &p in &m.masked_patches {
            covered[p] += 1;
        }
    }
    check(
        covered.iter().all(|&c| c > 0),
        format!("500 seeds: M = 10 of 16 every time, bit-exact reassembly, per-patch hits {covered:?}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Loss oracles

fn c6_losses() -> Outcome {
    let mut rng = seed::rng(6, &[]);
    let mut worst_bce: f64 = 0.0;
    let mut worst_mae: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let target: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let reference = target
            .iter()
            .zip(&logits)
            .map(|(&y, &x)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n as f64;
        let got = bce_with_logits(&target, &logits).map_err(|e| e.to_string())?;
        worst_bce = worst_bce.max((got - reference).abs());

        let (h, w, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..5));
        let orig: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rec: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut mask: Vec<bool> = (0..h * w * c).map(|_| rng.gen_bool(0.5)).collect();
        mask[0] = true;
        let (mut sum, mut count) = (0.0, 0);
        for r in 0..h {
            for q in 0..w {
                for b in 0..c {
                    let i = (r * w + q) * c + b;
                    if mask[i] {
                        sum += (orig[i] - rec[i]).abs();
                        count += 1;
                    }
                }
            }
        }
        let got = loss_mim(&orig, &rec, &mask).map_err(|e| e.to_string())?;
        worst_mae = worst_mae.max((got - sum / count as f64).abs());
    }
    let zeros = vec![0.0; 12];
    let mixed: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    let ln2 = bce_with_logits(&mixed, &zeros).map_err(|e| e.to_string())?;
    let ln2_err = (ln2 - std::f64::consts::LN_2).abs();
    check(
        worst_bce <= 1e-9 && worst_mae <= 1e-9 && ln2_err <= 1e-12,
        format!("BCE error {worst_bce:.2e}, masked MAE error {worst_mae:.2e}, zero-logit loss - ln 2 = {ln2_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Gradient routing

fn small_model(seed: u64) -> MultiTaskModel {
    build_model(EncoderSpec::new(16, 16, 8), &pretext_heads(8, (2, 2), 4), seed, None).unwrap()
}

fn small_pretext() -> PretextConfig {
    PretextConfig {
        spatial: SpatialJigsawConfig {
            patch_height: 8,
            patch_width: 8,
        },
        spectral: SpectralJigsawConfig { blocks: 4 },
        masking: MaskingConfig::default(),
    }
}

fn small_batch(weights: &LossWeights, n: usize) -> (Vec<DataCube>, Vec<PretextSet>) {
    let mut rng = seed::rng(7, &[]);
    let cubes: Vec<DataCube> = (0..n).map(|_| random_cube(&mut rng, 16, 16, 8)).collect();
    let sets = cubes
        .iter()
        .enumerate()
        .map(|(i, c)| generate_pretext(c, &small_pretext(), weights, 7, 1, 0, i).unwrap())
        .collect();
    (cubes, sets)
}

fn one_step(weights: LossWeights) -> Result<(MultiTaskModel, MultiTaskModel), String> {
    let before = small_model(11);
    let (cubes, _) = small_batch(&weights, 4);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 1,
        strategy: Strategy::Mtssl,
        seed: 11,
        pretext: small_pretext(),
        ..TrainConfig::default()
    };
    let schedule = CurriculumSchedule::flat(cubes.len(), 1).map_err(|e| e.to_string())?;
    let (after, log) = training::pretrain(before.clone(), &cubes, &schedule, weights, &cfg).map_err(|e| e.to_string())?;
    if log.optimizer_steps() != 1 {
        return Err(format!("{} optimizer steps", log.optimizer_steps()));
    }
    Ok((before, after))
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn c7_routing() -> Outcome {
    let (before, after) = one_step(LossWeights::new(1.0, 0.0, 0.0).unwrap())?;
    let p = |m: &MultiTaskModel, c| m.params(c).unwrap().to_vec();
    let frozen_ok = same_bits(&p(&before, Component::Spectral), &p(&after, Component::Spectral))
        && same_bits(&p(&before, Component::Mim), &p(&after, Component::Mim));
    let spa_moved = !same_bits(&p(&before, Component::Spatial), &p(&after, Component::Spatial));
    let (before_full, after_full) = one_step(LossWeights::default())?;
    let theta_moved = !same_bits(&p(&before_full, Component::Encoder), &p(&after_full, Component::Encoder));
    if !frozen_ok || !spa_moved || !theta_moved {
        return Err(format!(
            "spatial-only step: beta/gamma unchanged {frozen_ok}, phi moved {spa_moved}; full step moved theta {theta_moved}"
        ));
    }

    // Finite differences: encoder against the weighted total, each head
    // against its own loss.
    let weights = LossWeights::default();
    let model = small_model(13);
    let (_, batch) = small_batch(&weights, 2);
    let analytic = pretext_gradients(&model, &batch, &weights).map_err(|e| e.to_string())?.grads;
    let mut rng = seed::rng(77, &[]);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for comp in [Component::Encoder, Component::Spatial, Component::Spectral, Component::Mim] {
        let loss_of = |m: &MultiTaskModel| -> f64 {
            let l = pretext_losses(m, &batch, &weights).unwrap();
            match comp {
                Component::Encoder => l.total,
                Component::Spatial => l.spatial.unwrap(),
                Component::Spectral => l.spectral.unwrap(),
                _ => l.mim.unwrap(),
            }
        };
        let g = analytic.get(comp);
        let len = model.component_param_count(comp);
        let mut done = 0;
        let mut tries = 0;
        while done < 6 && tries < 200 {
            tries += 1;
            let i = rng.gen_range(0..len);
            // Skip parameters behind dead units; their gradient is exactly zero.
            if g[i].abs() < 1e-7 {
                continue;
            }
            let mut plus = model.clone();
            plus.params_mut(comp).unwrap()[i] += eps;
            let mut minus = model.clone();
            minus.params_mut(comp).unwrap()[i] -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let err = rel_err(g[i], numeric);
            if err > 1e-3 {
                return Err(format!("{comp:?} parameter {i}: analytic {:.6e} numeric {numeric:.6e}", g[i]));
            }
            worst = worst.max(err);
            done += 1;
        }
        if done < 4 {
            return Err(format!("{comp:?}: only {done} probes with a non-zero gradient"));
        }
        probes += done;
    }
    Ok(format!(
        "spatial-only step leaves beta and gamma bit-identical; full step moves theta; {probes} probes, worst relative error {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 8. Metric oracles

fn c8_metrics() -> Outcome {
    let cm = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).map_err(|e| e.to_string())?;
    let m = metrics(&cm).map_err(|e| e.to_string())?;
    if (m.oa, m.aa, m.kappa) != (0.7, 0.7, 0.4) {
        return Err(format!("hand example gives {} {} {}", m.oa, m.aa, m.kappa));
    }
    let mut rng = seed::rng(8, &[]);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..7);
        let sparse = rng.gen_bool(0.3);
        let rows: Vec<Vec<u64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if sparse && rng.gen_bool(0.6) { 0 } else { rng.gen_range(0..50) })
                    .collect()
            })
            .collect();
        let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        if cm.total() == 0 {
            continue;
        }
        let m = metrics(&cm).map_err(|e| e.to_string())?;
        if m.kappa > m.oa {
            violations += 1;
        }
    }
    let perfect = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 9, 0], vec![0, 0, 2]]).map_err(|e| e.to_string())?;
    let p = metrics(&perfect).map_err(|e| e.to_string())?;
    check(
        violations == 0 && (p.oa, p.aa, p.kappa) == (1.0, 1.0, 1.0),
        format!("hand example exact; kappa > OA in {violations} of 10^4 random matrices; perfect gives ({}, {}, {})", p.oa, p.aa, p.kappa),
    )
}

// ---------------------------------------------------------------------------
// 9. Difficulty / MIM-loss correlation

fn c9_correlation() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let levels = &cfg.synthetic.texture_levels;
    let data = experiment::prepare_data(&cfg).map_err(|e| e.to_string())?;
    let cubes = &data.pretrain;
    if cubes.len() < 200 || levels.len() < 5 || cfg.synthetic.regions < levels.len() {
        return Err(format!("{} cubes over {} texture levels", cubes.len(), levels.len()));
    }
    let model = experiment::brief_model(&cfg, cubes, data.bands, 2, cfg.seed).map_err(|e| e.to_string())?;
    let mim_only = LossWeights::new(0.0, 0.0, 1.0).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = training::per_cube_losses(&model, cubes, &mim_only, &cfg.pretext(), cfg.seed)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|l| l.mim.unwrap())
        .collect();
    let scores = cubes
        .iter()
        .map(|c| difficulty::difficulty(c, Aggregation::Average))
        .collect::<cmtssl::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let r = difficulty::pearson(&scores, &losses).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        r > 0.3 && secs < 300.0,
        format!("{} cubes, {} texture levels, Pearson r = {r:.3}, {secs:.1}s", cubes.len(), levels.len()),
    )
}

// ---------------------------------------------------------------------------
// 10. End-to-end trend

fn c10_trend() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let s = &cfg.synthetic;
    let data = experiment::prepare_data(&cfg).map_err(|e| e.to_string())?;
    if (s.height, s.width, s.bands, s.num_classes) != (128, 128, 32, 3) || data.pretrain.len() < 500 {
        return Err(format!(
            "scene {}x{}x{} with {} classes and {} pretraining tiles",
            s.height, s.width, s.bands, s.num_classes, data.pretrain.len()
        ));
    }
    let plan = experiment::plan_budget(&cfg, data.pretrain.len()).map_err(|e| e.to_string())?;
    let mut diffs = Vec::new();
    let (mut scratch_aa, mut cmtssl_aa) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let a = experiment::run_strategy(&cfg, &data, Strategy::Scratch, seed, None).map_err(|e| e.to_string())?;
        let b = experiment::run_strategy(&cfg, &data, Strategy::Cmtssl, seed, None).map_err(|e| e.to_string())?;
        if b.pretrain_steps != plan.curriculum_steps {
            return Err(format!("cmtssl ran {} steps, plan says {}", b.pretrain_steps, plan.curriculum_steps));
        }
        scratch_aa.push(a.test.aa);
        cmtssl_aa.push(b.test.aa);
        diffs.push(100.0 * (b.test.aa - a.test.aa));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let per_seed_ok = diffs.iter().all(|&d| d >= -0.5);
    let mean_ok = mean(&cmtssl_aa) >= mean(&scratch_aa);
    let fmt: Vec<String> = diffs.iter().map(|d| format!("{d:+.2}")).collect();
    check(
        per_seed_ok && mean_ok && secs < 1200.0,
        format!(
            "{} pretraining tiles, {} steps; AA cmtssl - scratch per seed [{}] pp; mean {:.2}% vs {:.2}%; {secs:.0}s",
            data.pretrain.len(),
            plan.curriculum_steps,
            fmt.join(", "),
            100.0 * mean(&cmtssl_aa),
            100.0 * mean(&scratch_aa)
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Budget fairness

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synthetic.height = 32;
    cfg.synthetic.width = 64;
    cfg.synthetic.bands = 8;
    cfg.synthetic.regions = 6;
    cfg.data.extra_pretrain_scenes = 1;
    cfg.data.pretrain_stride = 8;
    cfg.curriculum.initial_epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

fn c11_budget() -> Outcome {
    let cfg = tiny_config();
    let data = experiment::prepare_data(&cfg).map_err(|e| e.to_string())?;
    let plan = experiment::plan_budget(&cfg, data.pretrain.len()).map_err(|e| e.to_string())?;
    let (_, cur) = experiment::run_pretrain(&cfg, &data, Strategy::Cmtssl, 0, None).map_err(|e| e.to_string())?;
    let (_, flat) = experiment::run_pretrain(&cfg, &data, Strategy::Mtssl, 0, None).map_err(|e| e.to_string())?;
    let (a, b) = (cur.optimizer_steps(), flat.optimizer_steps());
    if a.abs_diff(b) > plan.steps_per_epoch {
        return Err(format!("harness runs: {a} vs {b} steps, epoch = {}", plan.steps_per_epoch));
    }
    let mut rng = seed::rng(11, &[]);
    for _ in 0..500 {
        let mut c = RunConfig::default();
        c.curriculum.stages = *[3usize, 4, 5].choose(&mut rng).unwrap();
        c.curriculum.initial_epochs = rng.gen_range(10..=40);
        c.curriculum.growth = rng.gen_range(10..=20) as f64 / 10.0;
        c.train.batch_size = rng.gen_range(1..=64);
        let n = rng.gen_range(c.curriculum.stages..=3000);
        let p = experiment::plan_budget(&c, n).map_err(|e| e.to_string())?;
        let flat_steps = CurriculumSchedule::flat(n, p.baseline_epochs)
            .map_err(|e| e.to_string())?
            .match_budget(c.train.batch_size);
        if flat_steps.abs_diff(p.curriculum_steps) > p.steps_per_epoch {
            return Err(format!("plan for N={n}: {} vs {flat_steps} steps", p.curriculum_steps));
        }
    }
    Ok(format!(
        "harness runs {a} vs {b} steps (epoch = {}); 500 random plans within one epoch",
        plan.steps_per_epoch
    ))
}

// ---------------------------------------------------------------------------
// 12. Determinism

fn c12_determinism() -> Outcome {
    let cfg = tiny_config();
    let data = experiment::prepare_data(&cfg).map_err(|e| e.to_string())?;
    let run = || experiment::run_pretrain(&cfg, &data, Strategy::Cmtssl, 5, None).map(|r| r.1);
    let (a, b) = (run().map_err(|e| e.to_string())?, run().map_err(|e| e.to_string())?);
    let key = |l: &training::TrainLog| -> Vec<[Option<u64>; 4]> {
        l.steps
            .iter()
            .map(|s| {
                [
                    s.spatial.map(f64::to_bits),
                    s.spectral.map(f64::to_bits),
                    s.mim.map(f64::to_bits),
                    Some(s.total.to_bits()),
                ]
            })
            .collect()
    };
    let other = experiment::run_pretrain(&cfg, &data, Strategy::Cmtssl, 6, None)
        .map_err(|e| e.to_string())?
        .1;
    check(
        !a.steps.is_empty() && key(&a) == key(&b) && key(&a) != key(&other),
        format!("{} step records bit-identical across runs; another seed differs", a.steps.len()),
    )
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "difficulty oracle equivalence", c1_difficulty_oracle),
    (2, "gradient-score homogeneity", c2_homogeneity),
    (3, "curriculum schedule exactness", c3_schedule),
    (4, "jigsaw round-trip", c4_jigsaw),
    (5, "masking coverage", c5_masking),
    (6, "loss oracles", c6_losses),
    (7, "gradient routing", c7_routing),
    (8, "metric oracles", c8_metrics),
    (9, "difficulty/loss correlation", c9_correlation),
    (10, "end-to-end trend", c10_trend),
    (11, "budget fairness", c11_budget),
    (12, "determinism", c12_determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        total += took;
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {failed} failed, total {:.1}s", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
