//! Confusion counts, Dice and IoU, and their aggregation over images and runs.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Tallies two binary masks of equal length (row-major, any 2-D shape).
pub fn confusion_counts(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "confusion_counts",
            format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `tp / (tp + fp + fn)`; 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// Scores of one image or one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub dsc: f64,
    pub iou: f64,
}

impl RunMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        RunMetrics {
            dsc: dsc(c),
            iou: iou(c),
        }
    }
}

/// How per-image counts become one score for a test set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Score each image, then average the scores.
    #[default]
    PerImage,
    /// Sum counts over the set, then score once.
    Pooled,
}

/// Set-level score of per-image confusion counts.
pub fn set_metrics(per_image: &[ConfusionCounts], mode: Averaging) -> Result<RunMetrics> {
    if per_image.is_empty() {
        return Err(Error::Config("cannot score an empty set".into()));
    }
    Ok(match mode {
        Averaging::PerImage => {
            let n = per_image.len() as f64;
            let (d, i) = per_image.iter().fold((0.0, 0.0), |(d, i), c| (d + dsc(c), i + iou(c)));
            RunMetrics { dsc: d / n, iou: i / n }
        }
        Averaging::Pooled => {
            let total = per_image.iter().fold(ConfusionCounts::default(), |a, &c| a.merge(c));
            RunMetrics::from_counts(&total)
        }
    })
}

/// Mean and sample standard deviation over runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mdsc: f64,
    pub dsc_std: f64,
    pub miou: f64,
    pub iou_std: f64,
    pub runs: usize,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mDSC {:.4}±{:.4} mIoU {:.4}±{:.4}",
            self.mdsc, self.dsc_std, self.miou, self.iou_std
        )
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::Config("cannot aggregate zero runs".into()));
    }
    let d: Vec<f64> = runs.iter().map(|r| r.dsc).collect();
    let i: Vec<f64> = runs.iter().map(|r| r.iou).collect();
    let (mdsc, dsc_std) = mean_std(&d);
    let (miou, iou_std) = mean_std(&i);
    Ok(Aggregate {
        mdsc,
        dsc_std,
        miou,
        iou_std,
        runs: runs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_cases() {
        let ones = vec![true; 16];
        let zeros = vec![false; 16];
        let c = confusion_counts(&ones, &ones).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 16,
                ..Default::default()
            }
        );
        assert_eq!((dsc(&c), iou(&c)), (1.0, 1.0));
        let c = confusion_counts(&zeros, &ones).unwrap();
        assert_eq!(c.fn_, 16);
        let c = confusion_counts(&zeros, &zeros).unwrap();
        assert_eq!((dsc(&c), iou(&c)), (1.0, 1.0));
        assert!(confusion_counts(&ones[..4], &ones).is_err());
    }

    #[test]
    fn left_half_against_full() {
        let pred: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let c = confusion_counts(&pred, &[true; 16]).unwrap();
        assert!((dsc(&c) - 2.0 / 3.0).abs() < 1e-15);
        assert!((iou(&c) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let b: Vec<bool> = a.iter().map(|v| !v).collect();
        let c = confusion_counts(&a, &b).unwrap();
        assert_eq!((dsc(&c), iou(&c)), (0.0, 0.0));
    }

    #[test]
    fn aggregation() {
        let one = RunMetrics { dsc: 0.7, iou: 0.6 };
        let a = aggregate_runs(&[one]).unwrap();
        assert_eq!((a.mdsc, a.dsc_std), (0.7, 0.0));
        let a = aggregate_runs(&[RunMetrics { dsc: 0.8, iou: 0.7 }, RunMetrics { dsc: 0.9, iou: 0.8 }]).unwrap();
        assert!((a.mdsc - 0.85).abs() < 1e-15);
        assert!((a.dsc_std - (0.005f64).sqrt()).abs() < 1e-12);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn pooled_differs_from_per_image() {
        let a = ConfusionCounts {
            tp: 1,
            fp: 1,
            fn_: 0,
            tn: 2,
        };
        let b = ConfusionCounts {
            tp: 10,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        let per = set_metrics(&[a, b], Averaging::PerImage).unwrap();
        let pooled = set_metrics(&[a, b], Averaging::Pooled).unwrap();
        assert!((per.dsc - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((pooled.dsc - 22.0 / 23.0).abs() < 1e-15);
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..50, 0u64..50, 0u64..50, 0u64..50).prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
    }

    proptest! {
        #[test]
        fn iou_never_exceeds_dsc(c in counts()) {
            let (d, i) = (dsc(&c), iou(&c));
            prop_assert!((0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&d));
            prop_assert!(i <= d);
            if i == d {
                prop_assert!(d == 0.0 || d == 1.0);
            }
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }

        #[test]
        fn scores_ignore_true_negatives(c in counts(), extra in 0u64..1000) {
            let more = ConfusionCounts { tn: c.tn + extra, ..c };
            prop_assert_eq!(dsc(&c), dsc(&more));
            prop_assert_eq!(iou(&c), iou(&more));
        }
    }
}
