//! Representativeness machinery: pairwise cosine similarity and mutual
//! information between acquisition units, min-max matrix normalization, and
//! the greedy hybrid selector.
//!
//! The hybrid objective balances coverage of the unlabeled pool (density,
//! via cosine similarity) against redundancy with the training pool
//! (diversity, via mutual information):
//!
//!   score(S) = (1/|D_u|)·Σ_j max_{i∈S} sim(i,j)
//!            − λ·(1/|S|)·Σ_{i∈S} max_{t∈D_t} mi(i,t)
//!
//! maximized greedily one candidate at a time.

use std::collections::HashMap;

use thiserror::Error;

use crate::data::{SampleKey, Volume};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("mutual information needs equal-length units, got {0} and {1}")]
    ResolutionMismatch(usize, usize),
    #[error("mutual information needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("batch size {k} exceeds candidate set of {candidates}")]
    KTooLarge { k: usize, candidates: usize },
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("matrix rows do not match the candidate keys")]
    RowMismatch,
    #[error("unknown sample key {0}")]
    UnknownKey(SampleKey),
}

/// Flattened, downsampled view of one acquisition unit: raw intensities in
/// [0,1] (for mutual information) and their zero-mean form (for cosine
/// similarity).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorVector {
    pub key: SampleKey,
    pub intensities: Vec<f64>,
    pub centered: Vec<f64>,
}

/// Area-average a 1-D index range partition: cell i covers source indices
/// [i·src/target, (i+1)·src/target).
fn cell_bounds(src: usize, target: usize, i: usize) -> (usize, usize) {
    (i * src / target, ((i + 1) * src / target).max(i * src / target + 1))
}

fn downsample_volume(
    data: &[f32],
    depth: usize,
    height: usize,
    width: usize,
    tz: usize,
    ty: usize,
    tx: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(tz * ty * tx);
    for z in 0..tz {
        let (z0, z1) = cell_bounds(depth, tz, z);
        for y in 0..ty {
            let (y0, y1) = cell_bounds(height, ty, y);
            for x in 0..tx {
                let (x0, x1) = cell_bounds(width, tx, x);
                let mut acc = 0.0f64;
                let mut count = 0usize;
                for zz in z0..z1 {
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += data[(zz * height + yy) * width + xx] as f64;
                            count += 1;
                        }
                    }
                }
                out.push(acc / count as f64);
            }
        }
    }
    out
}

/// Compute the descriptor of one unit: slices downsample to 32x32, volumes
/// to 32x32x8 (smaller inputs keep their own size). Deterministic.
pub fn descriptor(volume: &Volume, key: &SampleKey) -> DescriptorVector {
    let ty = volume.height.min(32);
    let tx = volume.width.min(32);
    let intensities = match key.slice {
        Some(z) => downsample_volume(volume.slice_intensities(z), 1, volume.height, volume.width, 1, ty, tx),
        None => {
            let tz = volume.depth.min(8);
            downsample_volume(&volume.intensities, volume.depth, volume.height, volume.width, tz, ty, tx)
        }
    };
    let mean = intensities.iter().sum::<f64>() / intensities.len() as f64;
    let centered = intensities.iter().map(|v| v - mean).collect();
    DescriptorVector {
        key: key.clone(),
        intensities,
        centered,
    }
}

/// Cosine similarity of two vectors; 0 by convention when either norm is
/// (numerically) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mutual information of co-located intensities over a bins×bins joint
/// histogram with equal-width bins on [0,1]; natural log, zero-mass terms
/// contribute 0.
pub fn mutual_information(a: &[f64], b: &[f64], bins: usize) -> Result<f64, ReprError> {
    if a.len() != b.len() {
        return Err(ReprError::ResolutionMismatch(a.len(), b.len()));
    }
    if bins < 2 {
        return Err(ReprError::TooFewBins(bins));
    }
    let bin = |v: f64| -> usize { ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1) };
    let mut joint = vec![0u64; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[bin(x) * bins + bin(y)] += 1;
    }
    let n = a.len() as f64;
    let mut px = vec![0.0f64; bins];
    let mut py = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            px[i] += p;
            py[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Global min-max normalization to [0,1]; a constant input maps to all
/// zeros.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in raw {
        min = min.min(v);
        max = max.max(v);
    }
    if raw.is_empty() || max - min < NORM_EPS {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|v| (v - min) / (max - min)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Similarity,
    MutualInformation,
}

/// Dense candidate×pool matrix holding both raw and min-max normalized
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    pub kind: MatrixKind,
    pub rows: Vec<SampleKey>,
    pub cols: Vec<SampleKey>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl PairwiseMatrix {
    pub fn new(kind: MatrixKind, rows: Vec<SampleKey>, cols: Vec<SampleKey>, raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), rows.len() * cols.len());
        let normalized = normalize(&raw);
        PairwiseMatrix {
            kind,
            rows,
            cols,
            raw,
            normalized,
        }
    }

    pub fn normalized_row(&self, i: usize) -> &[f64] {
        &self.normalized[i * self.cols.len()..(i + 1) * self.cols.len()]
    }
}

/// Build the D_c×D_u cosine-similarity matrix and the D_c×D_t mutual-
/// information matrix. Descriptors are computed once per distinct key.
pub fn pairwise_matrices<'a>(
    volume_of: impl Fn(&str) -> Option<&'a Volume>,
    candidates: &[SampleKey],
    unlabeled: &[SampleKey],
    training: &[SampleKey],
    bins: usize,
) -> Result<(PairwiseMatrix, PairwiseMatrix), ReprError> {
    if candidates.is_empty() {
        return Err(ReprError::EmptyCandidates);
    }
    let mut cache: HashMap<SampleKey, DescriptorVector> = HashMap::new();
    for key in candidates.iter().chain(unlabeled).chain(training) {
        if !cache.contains_key(key) {
            let volume = volume_of(&key.volume).ok_or_else(|| ReprError::UnknownKey(key.clone()))?;
            cache.insert(key.clone(), descriptor(volume, key));
        }
    }
    let mut sim_raw = Vec::with_capacity(candidates.len() * unlabeled.len());
    for c in candidates {
        let dc = &cache[c];
        for u in unlabeled {
            sim_raw.push(cosine_similarity(&dc.centered, &cache[u].centered));
        }
    }
    let mut mi_raw = Vec::with_capacity(candidates.len() * training.len());
    for c in candidates {
        let dc = &cache[c];
        for t in training {
            mi_raw.push(mutual_information(&dc.intensities, &cache[t].intensities, bins)?);
        }
    }
    Ok((
        PairwiseMatrix::new(MatrixKind::Similarity, candidates.to_vec(), unlabeled.to_vec(), sim_raw),
        PairwiseMatrix::new(MatrixKind::MutualInformation, candidates.to_vec(), training.to_vec(), mi_raw),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Coverage minus λ-weighted redundancy.
    Hybrid,
    /// Coverage only (λ forced to 0); the density-based baseline.
    DensityOnly,
    /// Minimize redundancy only; the diversity-based baseline.
    DiversityOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    pub lambda: f64,
    pub k: usize,
    pub mode: SelectionMode,
}

/// Greedily pick k candidates maximizing coverage of the unlabeled pool
/// minus λ times the mean worst-case redundancy with the training pool.
/// Ties break toward the smaller candidate ordinal. Deterministic.
pub fn greedy_hybrid_select(
    sim: &PairwiseMatrix,
    mi: &PairwiseMatrix,
    config: &HybridConfig,
) -> Result<Vec<SampleKey>, ReprError> {
    if config.lambda < 0.0 {
        return Err(ReprError::NegativeLambda(config.lambda));
    }
    let n_candidates = sim.rows.len();
    if n_candidates == 0 {
        return Err(ReprError::EmptyCandidates);
    }
    if config.k > n_candidates {
        return Err(ReprError::KTooLarge {
            k: config.k,
            candidates: n_candidates,
        });
    }
    if mi.rows != sim.rows {
        return Err(ReprError::RowMismatch);
    }
    let n_unlabeled = sim.cols.len();
    let lambda = match config.mode {
        SelectionMode::Hybrid => config.lambda,
        SelectionMode::DensityOnly | SelectionMode::DiversityOnly => 0.0,
    };

    // Worst-case redundancy of each candidate against the training pool.
    let redundancy: Vec<f64> = (0..n_candidates)
        .map(|i| {
            mi.normalized_row(i)
                .iter()
                .fold(0.0f64, |acc, &v| acc.max(v))
        })
        .collect();

    let mut cover = vec![0.0f64; n_unlabeled];
    let mut selected: Vec<usize> = Vec::with_capacity(config.k);
    let mut remaining: Vec<usize> = (0..n_candidates).collect();
    let mut redundancy_sum = 0.0f64;
    for _ in 0..config.k {
        let next_size = (selected.len() + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for &i in &remaining {
            let r = (redundancy_sum + redundancy[i]) / next_size;
            let score = match config.mode {
                SelectionMode::DiversityOnly => -r,
                SelectionMode::Hybrid | SelectionMode::DensityOnly => {
                    let mut coverage = 0.0;
                    for (c, &s) in cover.iter().zip(sim.normalized_row(i)) {
                        coverage += c.max(s);
                    }
                    let f = if n_unlabeled > 0 { coverage / n_unlabeled as f64 } else { 0.0 };
                    f - lambda * r
                }
            };
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("candidates remain");
        for (c, &s) in cover.iter_mut().zip(sim.normalized_row(pick)) {
            *c = c.max(s);
        }
        redundancy_sum += redundancy[pick];
        selected.push(pick);
        remaining.retain(|&i| i != pick);
    }
    Ok(selected.into_iter().map(|i| sim.rows[i].clone()).collect())
}
