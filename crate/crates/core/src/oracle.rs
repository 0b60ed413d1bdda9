//! Independent reference implementations used to cross-check the optimized
//! production code paths.
//!
//! Everything here favours obviousness over speed: explicit loops, from-
//! scratch objective evaluation, and no shared helpers with the production
//! modules beyond the public types being checked. `run_all` executes a
//! compact battery of these cross-checks for the `oracle-check` command.

use rand::Rng;

use crate::data::SampleKey;
use crate::metrics::{dice, rac};
use crate::model::{focal_loss_term, PredictiveSamples};
use crate::repr::{
    greedy_hybrid_select, mutual_information, HybridConfig, MatrixKind, PairwiseMatrix,
    SelectionMode,
};
use crate::rng::substream;
use crate::uncertainty::class_uncertainty;

/// Eq.-style class uncertainty the slow way: explicit mean then explicit
/// variance per pixel, averaged per class.
pub fn naive_class_uncertainty(samples: &PredictiveSamples) -> Vec<f64> {
    let t = samples.passes;
    let n = samples.pixels;
    let mut out = Vec::with_capacity(samples.classes_out);
    for class in 0..samples.classes_out {
        let mut class_acc = 0.0f64;
        for px in 0..n {
            let mut mean = 0.0f64;
            for pass in 0..t {
                mean += samples.pass(pass)[class * n + px];
            }
            mean /= t as f64;
            let mut var = 0.0f64;
            for pass in 0..t {
                let d = samples.pass(pass)[class * n + px] - mean;
                var += d * d;
            }
            class_acc += var / t as f64;
        }
        out.push(class_acc / n as f64);
    }
    out
}

/// Min-max normalization written independently of the production version.
pub fn naive_normalize(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return vec![];
    }
    let mut lo = raw[0];
    let mut hi = raw[0];
    for &v in raw {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    if hi - lo < 1e-12 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Hybrid set objective evaluated from scratch over normalized matrices
/// given as nested rows: coverage of the pool minus λ times the mean
/// worst-case redundancy of the selection.
pub fn naive_objective(
    selected: &[usize],
    sim_norm: &[Vec<f64>],
    mi_norm: &[Vec<f64>],
    lambda: f64,
) -> f64 {
    let n_pool = sim_norm.first().map_or(0, |r| r.len());
    let mut coverage = 0.0f64;
    for j in 0..n_pool {
        let mut best = 0.0f64;
        for &i in selected {
            if sim_norm[i][j] > best {
                best = sim_norm[i][j];
            }
        }
        coverage += best;
    }
    let f = if n_pool > 0 { coverage / n_pool as f64 } else { 0.0 };

    let mut redundancy = 0.0f64;
    for &i in selected {
        let mut worst = 0.0f64;
        for &v in &mi_norm[i] {
            if v > worst {
                worst = v;
            }
        }
        redundancy += worst;
    }
    let r = if selected.is_empty() { 0.0 } else { redundancy / selected.len() as f64 };
    f - lambda * r
}

/// Scratch greedy: at each step evaluate the full objective of every
/// extension and take the strict maximum (first such candidate on ties).
pub fn naive_greedy_select(
    sim_raw: &[Vec<f64>],
    mi_raw: &[Vec<f64>],
    lambda: f64,
    k: usize,
    diversity_only: bool,
) -> Vec<usize> {
    let flatten = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().flatten().copied().collect() };
    let unflatten = |flat: Vec<f64>, m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(m.len());
        let mut at = 0;
        for row in m {
            out.push(flat[at..at + row.len()].to_vec());
            at += row.len();
        }
        out
    };
    let sim_norm = unflatten(naive_normalize(&flatten(sim_raw)), sim_raw);
    let mi_norm = unflatten(naive_normalize(&flatten(mi_raw)), mi_raw);

    let n = sim_raw.len();
    let mut selected: Vec<usize> = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(i);
            let score = if diversity_only {
                let mut redundancy = 0.0f64;
                for &s in &trial {
                    let worst = mi_norm[s].iter().copied().fold(0.0f64, f64::max);
                    redundancy += worst;
                }
                -(redundancy / trial.len() as f64)
            } else {
                naive_objective(&trial, &sim_norm, &mi_norm, lambda)
            };
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        selected.push(best.expect("candidates remain").0);
    }
    selected
}

/// Exhaustive best single pick: the argmax of the k=1 objective over all
/// candidates, ties to the smallest index.
pub fn exhaustive_best_single(sim_raw: &[Vec<f64>], mi_raw: &[Vec<f64>], lambda: f64) -> usize {
    naive_greedy_select(sim_raw, mi_raw, lambda, 1, false)[0]
}

/// One named cross-check outcome.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn random_samples(rng: &mut impl Rng, passes: usize, classes_out: usize, pixels: usize) -> PredictiveSamples {
    let plane = classes_out * pixels;
    let mut probs = vec![0.0f64; passes * plane];
    for t in 0..passes {
        for px in 0..pixels {
            let mut row: Vec<f64> = (0..classes_out).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            for (c, v) in row.iter().enumerate() {
                probs[t * plane + c * pixels + px] = *v;
            }
        }
    }
    let mut mean = vec![0.0f64; plane];
    for t in 0..passes {
        for i in 0..plane {
            mean[i] += probs[t * plane + i] / passes as f64;
        }
    }
    PredictiveSamples {
        passes,
        classes_out,
        pixels,
        probs,
        mean,
    }
}

fn random_matrices(
    rng: &mut impl Rng,
    candidates: usize,
    pool: usize,
    training: usize,
) -> (PairwiseMatrix, PairwiseMatrix, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let keys = |n: usize, p: &str| -> Vec<SampleKey> {
        (0..n).map(|i| SampleKey::volume(&format!("{p}{i:03}"))).collect()
    };
    let rows = keys(candidates, "c");
    let sim_rows: Vec<Vec<f64>> = (0..candidates)
        .map(|_| (0..pool).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let mi_rows: Vec<Vec<f64>> = (0..candidates)
        .map(|_| (0..training).map(|_| rng.gen::<f64>() * 2.0).collect())
        .collect();
    let sim = PairwiseMatrix::new(
        MatrixKind::Similarity,
        rows.clone(),
        keys(pool, "u"),
        sim_rows.iter().flatten().copied().collect(),
    );
    let mi = PairwiseMatrix::new(
        MatrixKind::MutualInformation,
        rows,
        keys(training, "t"),
        mi_rows.iter().flatten().copied().collect(),
    );
    (sim, mi, sim_rows, mi_rows)
}

/// Run the cross-check battery. With `perturb` set, a small bias is injected
/// into every tolerance comparison so the battery demonstrably fails; a
/// clean pass with `perturb` would mean the checks are vacuous.
pub fn run_all(perturb: bool) -> Vec<OracleCheck> {
    let bias = if perturb { 1e-3 } else { 0.0 };
    let mut checks = Vec::new();
    let mut rng = substream(2024, "oracle-check", 0);

    // Uncertainty identity against the triple-loop reference.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let passes = rng.gen_range(2..12);
        let classes = rng.gen_range(2..6);
        let pixels = rng.gen_range(1..40);
        let samples = random_samples(&mut rng, passes, classes, pixels);
        let fast = class_uncertainty(&samples);
        let slow = naive_class_uncertainty(&samples);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b + bias).abs());
        }
    }
    checks.push(OracleCheck {
        name: "uncertainty-vs-naive",
        pass: worst < 1e-12,
        detail: format!("max abs deviation {worst:.3e} over 50 tensors"),
    });

    // Greedy selection identity against the scratch implementation.
    let mut mismatches = 0usize;
    for case in 0..40 {
        let candidates = rng.gen_range(2..9);
        let pool = rng.gen_range(1..12);
        let training = rng.gen_range(0..5);
        let k = rng.gen_range(1..=candidates);
        let lambda = rng.gen::<f64>();
        let (sim, mi, sim_rows, mi_rows) = random_matrices(&mut rng, candidates, pool, training);
        let cfg = HybridConfig {
            lambda,
            k,
            mode: SelectionMode::Hybrid,
        };
        let fast = greedy_hybrid_select(&sim, &mi, &cfg).unwrap();
        let slow: Vec<SampleKey> = naive_greedy_select(&sim_rows, &mi_rows, lambda + bias, k, false)
            .into_iter()
            .map(|i| sim.rows[i].clone())
            .collect();
        if fast != slow {
            mismatches += 1;
            if mismatches == 1 && !perturb {
                eprintln!("greedy mismatch in case {case}: {fast:?} vs {slow:?}");
            }
        }
    }
    checks.push(OracleCheck {
        name: "greedy-vs-naive",
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches over 40 instances"),
    });

    // k=1 greedy equals the exhaustive best singleton.
    let mut k1_mismatches = 0usize;
    for _ in 0..40 {
        let candidates = rng.gen_range(2..12);
        let (sim, mi, sim_rows, mi_rows) = random_matrices(&mut rng, candidates, 6, 3);
        let lambda = rng.gen::<f64>();
        let cfg = HybridConfig {
            lambda,
            k: 1,
            mode: SelectionMode::Hybrid,
        };
        let fast = greedy_hybrid_select(&sim, &mi, &cfg).unwrap();
        let best = exhaustive_best_single(&sim_rows, &mi_rows, lambda + bias);
        if fast[0] != sim.rows[best] {
            k1_mismatches += 1;
        }
    }
    checks.push(OracleCheck {
        name: "greedy-k1-exhaustive",
        pass: k1_mismatches == 0,
        detail: format!("{k1_mismatches} mismatches over 40 instances"),
    });

    // Hand-value tables.
    let mi_ln2 = mutual_information(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0], 2).unwrap();
    let mi_indep = mutual_information(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 0.0, 1.0], 2).unwrap();
    let mi_ok = (mi_ln2 - std::f64::consts::LN_2 + bias).abs() < 1e-12 && (mi_indep + bias).abs() < 1e-12;
    checks.push(OracleCheck {
        name: "mutual-information-hand-values",
        pass: mi_ok,
        detail: format!("identical {mi_ln2:.6} (want ln 2), independent {mi_indep:.2e}"),
    });

    let d_half = dice(&[1, 1, 1, 1, 0, 0, 0, 0], &[1, 1, 0, 0, 1, 1, 0, 0], 1, 1).unwrap();
    checks.push(OracleCheck {
        name: "dice-hand-values",
        pass: (d_half - 0.5 + bias).abs() < 1e-15,
        detail: format!("half-overlap dice {d_half}"),
    });

    let mut pred = vec![1u8; 100];
    for p in pred.iter_mut().take(25) {
        *p = 2;
    }
    let r = rac(&pred, &vec![1u8; 100]).unwrap();
    checks.push(OracleCheck {
        name: "rac-hand-values",
        pass: (r - 0.75 + bias).abs() < 1e-15,
        detail: format!("25/100 revised gives rac {r}"),
    });

    let focal = focal_loss_term(0.5, 0.67, 2.0);
    let focal_want = 0.67 * 0.25 * std::f64::consts::LN_2;
    checks.push(OracleCheck {
        name: "focal-hand-values",
        pass: (focal - focal_want + bias).abs() < 1e-12,
        detail: format!("term(0.5) = {focal:.9}, want {focal_want:.9}"),
    });

    checks
}
