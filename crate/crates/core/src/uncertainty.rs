//! Class-wise Bayesian uncertainty from MC-dropout predictive samples and
//! candidate-pool ranking.
//!
//! The per-class score is the pixel-averaged population variance of the
//! class probability across the T stochastic passes. The scalar ranking
//! score averages the foreground classes only; background dominates pixel
//! counts and would mask structure-level uncertainty.

use thiserror::Error;

use crate::data::{AcquisitionRule, PoolState, SampleKey};
use crate::model::PredictiveSamples;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("acquisition size {k} exceeds unlabeled pool of {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("got {scores} scores for {pool} unlabeled units")]
    ScoreLenMismatch { scores: usize, pool: usize },
    #[error("candidate factor must be >= 1, got {0}")]
    BadFactor(f64),
}

/// Per-unit uncertainty: one value per class plus the scalar ranking score.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScore {
    pub key: SampleKey,
    pub per_class: Vec<f64>,
    pub scalar: f64,
}

/// Pixel-averaged population variance of each class probability over the T
/// passes: m_unc(y=l) = (1/N)·Σ_n var_t[p(y=l|x)_n].
pub fn class_uncertainty(samples: &PredictiveSamples) -> Vec<f64> {
    let plane = samples.classes_out * samples.pixels;
    let mut sum = vec![0.0f64; plane];
    let mut sum_sq = vec![0.0f64; plane];
    for t in 0..samples.passes {
        let pass = samples.pass(t);
        for ((s, sq), &p) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(pass) {
            *s += p;
            *sq += p * p;
        }
    }
    let t = samples.passes as f64;
    let n = samples.pixels as f64;
    (0..samples.classes_out)
        .map(|l| {
            let mut acc = 0.0;
            for px in 0..samples.pixels {
                let i = l * samples.pixels + px;
                let mean = sum[i] / t;
                acc += (sum_sq[i] / t - mean * mean).max(0.0);
            }
            acc / n
        })
        .collect()
}

/// Scalar ranking score: mean of the foreground per-class values.
pub fn scalar_score(per_class: &[f64]) -> f64 {
    let foreground = &per_class[1..];
    foreground.iter().sum::<f64>() / foreground.len() as f64
}

/// Collapse per-slice scalars into one unit score: the slice itself under
/// slice-wise acquisition, the unweighted mean of a volume's slices under
/// volume-wise.
pub fn aggregate_unit_score(slice_scalars: &[f64], rule: AcquisitionRule) -> f64 {
    assert!(!slice_scalars.is_empty());
    match rule {
        AcquisitionRule::SliceWise => {
            debug_assert_eq!(slice_scalars.len(), 1);
            slice_scalars[0]
        }
        AcquisitionRule::VolumeWise => {
            slice_scalars.iter().sum::<f64>() / slice_scalars.len() as f64
        }
    }
}

/// Top ⌈factor·k⌉ unlabeled units by descending scalar score, capped at the
/// pool size. `unit_scores` aligns with `pools.unlabeled`; ties break toward
/// the smaller pool ordinal.
pub fn select_candidates(
    pools: &PoolState,
    unit_scores: &[f64],
    candidate_factor: f64,
    k: usize,
) -> Result<Vec<SampleKey>, UncertaintyError> {
    let pool = pools.unlabeled.len();
    if k > pool {
        return Err(UncertaintyError::KTooLarge { k, pool });
    }
    if unit_scores.len() != pool {
        return Err(UncertaintyError::ScoreLenMismatch {
            scores: unit_scores.len(),
            pool,
        });
    }
    if !(candidate_factor >= 1.0) {
        return Err(UncertaintyError::BadFactor(candidate_factor));
    }
    let target = ((candidate_factor * k as f64).ceil() as usize).min(pool);
    let mut order: Vec<usize> = (0..pool).collect();
    order.sort_by(|&a, &b| {
        unit_scores[b]
            .partial_cmp(&unit_scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order[..target]
        .iter()
        .map(|&i| pools.unlabeled[i].clone())
        .collect())
}
