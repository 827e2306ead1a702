//! Cumulative easy-to-hard curriculum stages.
//!
//! Stage `k` (1-based) trains on the `⌊N·k/S⌋` easiest cubes for
//! `round(K·F^(k-1))` epochs (half rounds up, never below one epoch).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub dataset_size: usize,
    pub stages: usize,
    pub initial_epochs: usize,
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumBatch {
    /// 1-based stage index.
    pub index: usize,
    /// Number of easiest cubes in the stage (a prefix of the sorted data).
    pub size: usize,
    pub epochs: usize,
}

impl CurriculumBatch {
    /// Indices into the difficulty-sorted dataset.
    pub fn cube_ids(&self) -> std::ops::Range<usize> {
        0..self.size
    }
}

impl CurriculumSchedule {
    pub fn new(dataset_size: usize, stages: usize, initial_epochs: usize, growth: f64) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("curriculum needs at least one stage".into()));
        }
        if stages > dataset_size {
            return Err(Error::Config(format!(
                "{stages} stages exceed dataset size {dataset_size}"
            )));
        }
        if initial_epochs == 0 {
            return Err(Error::Config("initial epoch count must be positive".into()));
        }
        if !(growth > 0.0 && growth.is_finite()) {
            return Err(Error::Config(format!("growth factor must be > 0, got {growth}")));
        }
        Ok(Self {
            dataset_size,
            stages,
            initial_epochs,
            growth,
        })
    }

    /// Plain training over the full set for `epochs` epochs.
    pub fn flat(dataset_size: usize, epochs: usize) -> Result<Self> {
        Self::new(dataset_size, 1, epochs, 1.0)
    }

    pub fn stage_size(&self, k: usize) -> usize {
        self.dataset_size * k / self.stages
    }

    pub fn stage_epochs(&self, k: usize) -> usize {
        stage_epochs(self.initial_epochs, self.growth, k)
    }

    pub fn batches(&self) -> Vec<CurriculumBatch> {
        (1..=self.stages)
            .map(|k| CurriculumBatch {
                index: k,
                size: self.stage_size(k),
                epochs: self.stage_epochs(k),
            })
            .collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.batches().iter().map(|b| b.epochs).sum()
    }

    /// Optimizer steps consumed with mini-batches of `batch_size`.
    pub fn match_budget(&self, batch_size: usize) -> usize {
        self.batches()
            .iter()
            .map(|b| b.epochs * b.size.div_ceil(batch_size.max(1)))
            .sum()
    }
}

/// `round(K·F^(k-1))`, halves rounded up, at least 1.
pub fn stage_epochs(initial_epochs: usize, growth: f64, k: usize) -> usize {
    let exact = initial_epochs as f64 * growth.powi(k as i32 - 1);
    // Snap first so decimal growth factors (1.7 is stored below 1.7) still
    // round exact halves up.
    let snapped = (exact * 1e9).round() / 1e9;
    ((snapped + 0.5).floor() as usize).max(1)
}

pub fn build_schedule(n: usize, s: usize, k: usize, f: f64) -> Result<Vec<CurriculumBatch>> {
    Ok(CurriculumSchedule::new(n, s, k, f)?.batches())
}

/// Epoch count for a non-curriculum run over `n` cubes whose step total
/// comes closest to `budget` (ties round up, at least one epoch).
pub fn baseline_epochs(n: usize, batch_size: usize, budget: usize) -> usize {
    let per_epoch = n.div_ceil(batch_size.max(1)).max(1);
    ((budget + per_epoch / 2) / per_epoch).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_schedule() {
        let b = build_schedule(100, 4, 10, 2.0).unwrap();
        assert_eq!(b.iter().map(|b| b.size).collect::<Vec<_>>(), vec![25, 50, 75, 100]);
        assert_eq!(b.iter().map(|b| b.epochs).collect::<Vec<_>>(), vec![10, 20, 40, 80]);
    }

    #[test]
    fn decimal_growth_halves_round_up() {
        assert_eq!(stage_epochs(15, 1.7, 2), 26);
        assert_eq!(stage_epochs(10, 1.1, 3), 12);
        assert_eq!(stage_epochs(5, 1.3, 2), 7);
    }

    #[test]
    fn single_stage_is_plain_training() {
        let b = build_schedule(37, 1, 12, 1.7).unwrap();
        assert_eq!(
            b,
            vec![CurriculumBatch {
                index: 1,
                size: 37,
                epochs: 12
            }]
        );
    }

    #[test]
    fn sensitivity_base_values() {
        let b = build_schedule(1653, 3, 32, 1.5).unwrap();
        assert_eq!(b.iter().map(|b| b.epochs).collect::<Vec<_>>(), vec![32, 48, 72]);
    }

    #[test]
    fn too_many_stages() {
        assert!(matches!(build_schedule(2, 3, 1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn budget_examples() {
        assert_eq!(CurriculumSchedule::new(100, 1, 10, 1.0).unwrap().match_budget(10), 100);
        assert_eq!(CurriculumSchedule::new(100, 4, 10, 1.0).unwrap().match_budget(25), 100);
    }

    #[test]
    fn fractional_epochs_round_half_up() {
        assert_eq!(stage_epochs(11, 1.5, 2), 17);
        assert_eq!(stage_epochs(1, 0.1, 3), 1);
    }

    #[test]
    fn baseline_matches_budget_within_an_epoch() {
        let s = CurriculumSchedule::new(6364, 3, 32, 1.5).unwrap();
        let budget = s.match_budget(16);
        let e = baseline_epochs(6364, 16, budget);
        let steps = e * 6364usize.div_ceil(16);
        assert!(steps.abs_diff(budget) <= 6364usize.div_ceil(16));
    }
}
