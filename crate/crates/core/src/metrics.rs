//! Segmentation accuracy (DSC) and annotation-effort (RAC) metrics.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction has {pred} pixels but ground truth has {truth}")]
    DimensionMismatch { pred: usize, truth: usize },
    #[error("ground truth has no foreground pixels; RAC is undefined")]
    EmptyRoi,
}

/// Per-class true-positive / false-positive / false-negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    /// Tally counts for labels in `0..=classes` (index 0 = background).
    pub fn tally(prediction: &[u8], truth: &[u8], classes: u8) -> Result<Self, MetricError> {
        if prediction.len() != truth.len() {
            return Err(MetricError::DimensionMismatch {
                pred: prediction.len(),
                truth: truth.len(),
            });
        }
        let n = classes as usize + 1;
        let mut counts = ConfusionCounts {
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
        };
        for (&p, &t) in prediction.iter().zip(truth) {
            if p == t {
                counts.tp[p as usize] += 1;
            } else {
                counts.fp[p as usize] += 1;
                counts.fn_[t as usize] += 1;
            }
        }
        Ok(counts)
    }

    /// Pool counts from another region of the same volume.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.tp.iter_mut().zip(&other.tp) {
            *a += b;
        }
        for (a, b) in self.fp.iter_mut().zip(&other.fp) {
            *a += b;
        }
        for (a, b) in self.fn_.iter_mut().zip(&other.fn_) {
            *a += b;
        }
    }

    pub fn dice(&self, class: u8) -> f64 {
        let c = class as usize;
        let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
        if denom == 0 {
            // Class absent from both prediction and truth.
            1.0
        } else {
            2.0 * self.tp[c] as f64 / denom as f64
        }
    }
}

/// Dice similarity coefficient for one class: 2·TP/(2·TP+FP+FN), defined as
/// 1 when the class is absent from both masks.
pub fn dice(prediction: &[u8], truth: &[u8], class: u8, classes: u8) -> Result<f64, MetricError> {
    Ok(ConfusionCounts::tally(prediction, truth, classes)?.dice(class))
}

/// Unweighted mean Dice over the foreground classes 1..=C.
pub fn mean_dice(prediction: &[u8], truth: &[u8], classes: u8) -> Result<f64, MetricError> {
    let counts = ConfusionCounts::tally(prediction, truth, classes)?;
    let sum: f64 = (1..=classes).map(|c| counts.dice(c)).sum();
    Ok(sum / classes as f64)
}

/// Reduced annotation cost: 1 − |revised| / |ROI|.
///
/// |ROI| counts non-background ground-truth pixels. A pixel needs revision
/// when prediction and truth disagree and either side is foreground, so both
/// missed structure pixels and spurious foreground predictions count.
/// The value is reported raw and may go negative under heavy false positives.
pub fn rac(prediction: &[u8], truth: &[u8]) -> Result<f64, MetricError> {
    if prediction.len() != truth.len() {
        return Err(MetricError::DimensionMismatch {
            pred: prediction.len(),
            truth: truth.len(),
        });
    }
    let roi = truth.iter().filter(|&&t| t != 0).count();
    if roi == 0 {
        return Err(MetricError::EmptyRoi);
    }
    let revised = prediction
        .iter()
        .zip(truth)
        .filter(|&(&p, &t)| p != t && (p != 0 || t != 0))
        .count();
    Ok(1.0 - revised as f64 / roi as f64)
}
