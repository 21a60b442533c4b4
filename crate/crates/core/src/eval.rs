//! Confusion matrices and mean intersection-over-union.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::data::{Label, IGNORE};
use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(Self {
            n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per element whose ground truth is not IGNORE.
    pub fn accumulate(&mut self, gt: &[Label], pred: &[Label]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(format!(
                "{} ground-truth labels against {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let n = self.n;
        let bad = |l: Label| l as usize >= n;
        if let Some((g, p)) = gt
            .iter()
            .zip(pred)
            .find(|&(&g, &p)| g != IGNORE && (bad(g) || bad(p)))
        {
            return Err(Error::Data(format!(
                "label pair ({g}, {p}) out of range for {n} classes"
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g != IGNORE {
                self.counts[g as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n, other.n
            )));
        }
        *self += other;
        Ok(())
    }

    /// Per-class IoU; `None` where `TP + FP + FN = 0`.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.n).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.n).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over defined classes.
    pub fn miou(&self) -> Result<MiouReport> {
        self.report(false)
    }

    /// Mean over all classes, undefined ones counting as 0.
    pub fn miou_strict(&self) -> Result<MiouReport> {
        self.report(true)
    }

    fn report(&self, strict: bool) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(Error::EmptyEval);
        }
        let per_class = self.iou();
        let mean = if strict {
            per_class.iter().map(|x| x.unwrap_or(0.0)).sum::<f64>() / self.n as f64
        } else {
            let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Ok(MiouReport { per_class, mean })
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n, "class counts differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` marks an undefined class.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// mIoU of one prediction against ground truth.
pub fn miou(gt: &[Label], pred: &[Label], num_classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(gt, pred)?;
    cm.miou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tallies() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(&[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]).unwrap());
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, IGNORE], &[0, 1, 1]).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.total()), (1, 1, 2));
        assert!(matches!(cm.accumulate(&[2], &[0]), Err(Error::Data(_))));
    }

    #[test]
    fn hand_computed_iou() {
        let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![0, 2]]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(r.mean, (0.5 + 2.0 / 3.0) / 2.0);
        assert!((r.mean - 0.583333).abs() < 1e-6);
    }

    #[test]
    fn undefined_classes_are_excluded() {
        let cm = ConfusionMatrix::from_counts(&[vec![2, 0, 0], vec![0, 0, 0], vec![0, 0, 3]]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(r.mean, 1.0);
        assert!((cm.miou_strict().unwrap().mean - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(ConfusionMatrix::new(3).miou(), Err(Error::EmptyEval)));
    }

    proptest! {
        #[test]
        fn chunked_accumulation_matches_one_shot(
            pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..60),
            cut in 0usize..60,
        ) {
            let (gt, pred): (Vec<Label>, Vec<Label>) = pairs.into_iter().unzip();
            let cut = cut.min(gt.len());
            let mut whole = ConfusionMatrix::new(4);
            whole.accumulate(&gt, &pred).unwrap();
            let mut a = ConfusionMatrix::new(4);
            a.accumulate(&gt[..cut], &pred[..cut]).unwrap();
            let mut b = ConfusionMatrix::new(4);
            b.accumulate(&gt[cut..], &pred[cut..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, whole);
        }

        #[test]
        fn permutation_invariance(pairs in proptest::collection::vec((0u32..3, 0u32..3), 1..40)) {
            let perm = [2u32, 0, 1];
            let (gt, pred): (Vec<Label>, Vec<Label>) = pairs.into_iter().unzip();
            let r = miou(&gt, &pred, 3).unwrap();
            let pg: Vec<Label> = gt.iter().map(|&l| perm[l as usize]).collect();
            let pp: Vec<Label> = pred.iter().map(|&l| perm[l as usize]).collect();
            let q = miou(&pg, &pp, 3).unwrap();
            for (c, &pc) in perm.iter().enumerate() {
                prop_assert_eq!(r.per_class[c], q.per_class[pc as usize]);
            }
            prop_assert!((r.mean - q.mean).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.mean));
            prop_assert_eq!(r.mean == 1.0, gt == pred);
        }
    }
}
