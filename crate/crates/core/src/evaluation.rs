//! Pixel-wise classification metrics: overall accuracy, average accuracy and
//! Cohen's kappa, plus mean / sample-std aggregation over seeds.
//!
//! All values are fractions in `[0, 1]`; reports multiply by 100 only when
//! rendering.

use serde::{Deserialize, Serialize};

use crate::data::DataCube;
use crate::model::{Encoder, MultiTaskModel};
use crate::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub ignore_id: Option<i32>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_id: Option<i32>) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignore_id,
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
            ignore_id: None,
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class * self.num_classes..(class + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    /// Counts one pixel. Ignored truth ids are skipped.
    pub fn record(&mut self, truth: i32, pred: usize) -> Result<()> {
        if Some(truth) == self.ignore_id {
            return Ok(());
        }
        let n = self.num_classes;
        if truth < 0 || truth as usize >= n || pred >= n {
            return Err(Error::Data(format!(
                "class pair (truth {truth}, prediction {pred}) outside 0..{n}"
            )));
        }
        self.counts[truth as usize * n + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Counts `(truth, pred)` pairs over pixels whose truth is not `ignore_id`.
pub fn confusion(
    pred: &[usize],
    truth: &[i32],
    num_classes: usize,
    ignore_id: Option<i32>,
) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes, ignore_id);
    for (&p, &t) in pred.iter().zip(truth) {
        cm.record(t, p)?;
    }
    if cm.total() == 0 && !truth.is_empty() {
        log::warn!("every pixel carries the ignore id; confusion matrix is empty");
    }
    Ok(cm)
}

/// Confusion counts of a model's arg-max predictions over labelled cubes.
pub fn evaluate_cubes<E: Encoder>(
    model: &MultiTaskModel<E>,
    cubes: &[DataCube],
    num_classes: usize,
    ignore_id: Option<i32>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore_id);
    for cube in cubes {
        let truth = cube
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("cube {} has no labels", cube.id())))?;
        let pred = model.predict(cube)?;
        cm.merge(&confusion(&pred, truth, num_classes, ignore_id)?)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// `None` for classes without ground-truth support.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub seeds: usize,
    pub oa_std: f64,
    pub aa_std: f64,
    pub kappa_std: f64,
}

/// `(N·Σc_ii − Σr_i·c_i) / (N² − Σr_i·c_i)` with integer sums, so a single
/// rounding happens in the final division. Falls back to floating point if
/// the sums overflow.
fn kappa_from_counts(cm: &ConfusionMatrix, oa: f64) -> f64 {
    let exact = || -> Option<(i128, i128)> {
        let n = i128::from(cm.total());
        let mut chance: i128 = 0;
        for i in 0..cm.num_classes {
            let rc = i128::from(cm.row_sum(i)).checked_mul(i128::from(cm.col_sum(i)))?;
            chance = chance.checked_add(rc)?;
        }
        let num = n.checked_mul(i128::from(cm.trace()))?.checked_sub(chance)?;
        let den = n.checked_mul(n)?.checked_sub(chance)?;
        Some((num, den))
    };
    let (num, den) = match exact() {
        Some((num, den)) => (num as f64, den as f64),
        None => {
            let t = cm.total() as f64;
            let pe = (0..cm.num_classes)
                .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
                .sum::<f64>()
                / (t * t);
            (oa - pe, 1.0 - pe)
        }
    };
    if den <= 0.0 {
        // Chance agreement is 1: every pixel in one class on both sides.
        return if oa >= 1.0 { 1.0 } else { 0.0 };
    }
    num / den
}

/// OA, AA (over classes with support) and kappa. When chance agreement is 1
/// kappa is defined as 1 for a perfect matrix and 0 otherwise.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Degenerate("confusion matrix is empty".into()));
    }
    let t = total as f64;
    let oa = cm.trace() as f64 / t;
    let per_class: Vec<Option<f64>> = (0..cm.num_classes)
        .map(|i| match cm.row_sum(i) {
            0 => None,
            row => Some(cm.get(i, i) as f64 / row as f64),
        })
        .collect();
    let supported: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = supported.iter().sum::<f64>() / supported.len() as f64;
    let kappa = kappa_from_counts(cm, oa);
    Ok(MetricReport {
        oa,
        aa,
        kappa,
        per_class_accuracy: per_class,
        seeds: 1,
        oa_std: 0.0,
        aa_std: 0.0,
        kappa_std: 0.0,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-metric mean and sample standard deviation across runs.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Degenerate("no reports to aggregate".into()))?;
    let classes = first.per_class_accuracy.len();
    if reports.iter().any(|r| r.per_class_accuracy.len() != classes) {
        return Err(Error::Shape("reports cover different class sets".into()));
    }
    let pick = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (oa, oa_std) = pick(|r| r.oa);
    let (aa, aa_std) = pick(|r| r.aa);
    let (kappa, kappa_std) = pick(|r| r.kappa);
    let per_class_accuracy = (0..classes)
        .map(|i| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class_accuracy[i]).collect();
            (!vals.is_empty()).then(|| mean_std(&vals).0)
        })
        .collect();
    Ok(MetricReport {
        oa,
        aa,
        kappa,
        per_class_accuracy,
        seeds: reports.iter().map(|r| r.seeds).sum(),
        oa_std,
        aa_std,
        kappa_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_hand_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.oa - 0.7).abs() < 1e-12);
        assert!((m.aa - 0.7).abs() < 1e-12);
        assert_eq!(m.kappa, 0.4);
    }

    #[test]
    fn identical_prediction_is_diagonal() {
        let truth = [0, 1, 2, 2, 1];
        let pred = [0, 1, 2, 2, 1];
        let cm = confusion(&pred, &truth, 3, None).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        let m = metrics(&cm).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_ignored_gives_zero_matrix() {
        let cm = confusion(&[1, 2], &[0, 0], 3, Some(0)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(metrics(&cm), Err(Error::Degenerate(_))));
    }

    #[test]
    fn out_of_range_class() {
        assert!(matches!(confusion(&[3], &[0], 3, None), Err(Error::Data(_))));
        assert!(matches!(confusion(&[0], &[5], 3, None), Err(Error::Data(_))));
    }

    #[test]
    fn zero_support_excluded_from_average() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 5], vec![0, 0]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.per_class_accuracy, vec![Some(0.5), None]);
        assert_eq!(m.aa, 0.5);
    }

    #[test]
    fn single_class_convention() {
        let cm = ConfusionMatrix::from_rows(&[vec![7, 0], vec![0, 0]]).unwrap();
        assert_eq!(metrics(&cm).unwrap().kappa, 1.0);
    }

    #[test]
    fn aggregate_examples() {
        let base = metrics(&ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap()).unwrap();
        let single = aggregate_runs(std::slice::from_ref(&base)).unwrap();
        assert_eq!(single.oa_std, 0.0);
        let runs: Vec<MetricReport> = [0.6, 0.7, 0.8]
            .iter()
            .map(|&oa| MetricReport { oa, ..base.clone() })
            .collect();
        let agg = aggregate_runs(&runs).unwrap();
        assert!((agg.oa - 0.7).abs() < 1e-12);
        assert!((agg.oa_std - 0.1).abs() < 1e-12);
        assert_eq!(agg.seeds, 3);
    }
}
