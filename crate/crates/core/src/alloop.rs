//! The iterative acquisition loop: train, score, select, acquire, evaluate.
//!
//! Each iteration trains a fresh model on the current training pool, scores
//! the unlabeled pool (where the strategy needs it), moves the selected
//! units into the training pool, retrains, and evaluates DSC and RAC on the
//! held-out test volumes.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{AcquisitionRule, DataError, Dataset, PoolState, SampleKey, split_pools};
use crate::metrics::{rac, ConfusionCounts, MetricError};
use crate::model::{self, Classifier, SliceData, TrainConfig, TrainError};
use crate::repr::{greedy_hybrid_select, pairwise_matrices, HybridConfig, ReprError, SelectionMode};
use crate::rng::{derive, substream};
use crate::uncertainty::{
    aggregate_unit_score, class_uncertainty, scalar_score, select_candidates, UncertaintyError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("results io: {0}")]
    Io(#[from] std::io::Error),
}

/// The five acquisition strategies of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Rand,
    Unc,
    UncSim,
    UncMi,
    UncHres,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Rand,
        Strategy::Unc,
        Strategy::UncSim,
        Strategy::UncMi,
        Strategy::UncHres,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Rand => "rand",
            Strategy::Unc => "unc",
            Strategy::UncSim => "unc+sim",
            Strategy::UncMi => "unc+mi",
            Strategy::UncHres => "unc+hres",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Strategy::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Fully resolved settings for one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub rule: AcquisitionRule,
    pub strategy: Strategy,
    /// Number of acquisition iterations.
    pub iterations: usize,
    /// Units acquired per iteration (volumes or slices per the rule).
    pub budget: usize,
    pub seed: u64,
    pub split: (usize, usize, usize, usize),
    pub candidate_factor: f64,
    /// Hybrid balance; `None` picks the rule default (0.5 volume-wise,
    /// 0.25 slice-wise).
    pub lambda: Option<f64>,
    pub mi_bins: usize,
    pub train: TrainConfig,
    /// Upper-bound mode: one training round on the full labeled pool.
    pub upper_bound: bool,
}

impl ExperimentSpec {
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.rule {
            AcquisitionRule::VolumeWise => 0.5,
            AcquisitionRule::SliceWise => 0.25,
        })
    }

    pub fn run_id(&self) -> String {
        let tag = if self.upper_bound { "upper-bound".to_string() } else { self.strategy.as_str().to_string() };
        format!("{}_{}_s{}", tag, self.rule.as_str(), self.seed)
    }
}

/// Per-iteration results with full provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub rule: AcquisitionRule,
    pub iteration: usize,
    pub n_train_units: usize,
    pub dsc_mean: f64,
    pub dsc_class: Vec<f64>,
    pub rac_mean: f64,
    pub selected: Vec<SampleKey>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub rows: Vec<IterationRecord>,
}

/// Results CSV header for C foreground classes.
pub fn csv_header(classes: u8) -> String {
    let class_cols: Vec<String> = (1..=classes).map(|c| format!("dsc_class_{c}")).collect();
    format!(
        "run_id,strategy,seed,rule,iteration,n_train_units,dsc_mean,{},rac_mean,selected_keys,wall_ms",
        class_cols.join(",")
    )
}

pub fn csv_row(r: &IterationRecord) -> String {
    let classes: Vec<String> = r.dsc_class.iter().map(|d| format!("{d:.6}")).collect();
    let selected: Vec<String> = r.selected.iter().map(|k| k.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{:.6},{},{:.6},{},{}",
        r.run_id,
        r.strategy,
        r.seed,
        r.rule.as_str(),
        r.iteration,
        r.n_train_units,
        r.dsc_mean,
        classes.join(","),
        r.rac_mean,
        selected.join(";"),
        r.wall_ms
    )
}

/// Per-volume slice features, computed once and shared read-only across
/// runs.
pub struct FeatureCache {
    slices: HashMap<String, Vec<SliceData>>,
}

impl FeatureCache {
    pub fn build(dataset: &Dataset) -> Self {
        let slices = dataset
            .volumes()
            .par_iter()
            .map(|v| {
                let data: Vec<SliceData> = (0..v.depth).map(|z| SliceData::from_volume(v, z)).collect();
                (v.id.clone(), data)
            })
            .collect();
        FeatureCache { slices }
    }

    pub fn volume(&self, id: &str) -> &[SliceData] {
        &self.slices[id]
    }

    fn resolve<'a>(&'a self, keys: &[SampleKey]) -> Vec<&'a SliceData> {
        keys.iter()
            .flat_map(|key| match key.slice {
                Some(z) => vec![&self.volume(&key.volume)[z]],
                None => self.volume(&key.volume).iter().collect(),
            })
            .collect()
    }
}

fn train_model(
    cache: &FeatureCache,
    pools: &PoolState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    include_unlabeled: bool,
) -> Result<Classifier, TrainError> {
    let mut keys: Vec<SampleKey> = pools.training.clone();
    if include_unlabeled {
        keys.extend(pools.unlabeled.iter().cloned());
    }
    let slices = cache.resolve(&keys);
    let validation: Vec<&[SliceData]> = pools.validation.iter().map(|id| cache.volume(id)).collect();
    model::train(&slices, &validation, dataset.classes(), cfg, seed)
}

struct TestEvaluation {
    dsc_class: Vec<f64>,
    dsc_mean: f64,
    rac_mean: f64,
}

fn evaluate_test(
    model: &Classifier,
    cache: &FeatureCache,
    pools: &PoolState,
    classes: u8,
) -> Result<TestEvaluation, RunError> {
    let per_volume: Vec<(Vec<f64>, f64)> = pools
        .test
        .par_iter()
        .map(|id| {
            let slices = cache.volume(id);
            let mut counts: Option<ConfusionCounts> = None;
            let mut predictions = Vec::new();
            let mut truths = Vec::new();
            for slice in slices {
                let pred = model.predict_labels(slice);
                let tally = ConfusionCounts::tally(&pred, &slice.labels, classes)?;
                match &mut counts {
                    None => counts = Some(tally),
                    Some(c) => c.merge(&tally),
                }
                predictions.extend(pred);
                truths.extend_from_slice(&slice.labels);
            }
            let counts = counts.expect("test volume has slices");
            let dsc: Vec<f64> = (1..=classes).map(|c| counts.dice(c)).collect();
            let volume_rac = rac(&predictions, &truths)?;
            Ok::<_, RunError>((dsc, volume_rac))
        })
        .collect::<Result<_, _>>()?;

    let n = per_volume.len() as f64;
    let mut dsc_class = vec![0.0f64; classes as usize];
    let mut rac_sum = 0.0;
    for (dsc, r) in &per_volume {
        for (acc, d) in dsc_class.iter_mut().zip(dsc) {
            *acc += d / n;
        }
        rac_sum += r / n;
    }
    let dsc_mean = dsc_class.iter().sum::<f64>() / classes as f64;
    Ok(TestEvaluation {
        dsc_class,
        dsc_mean,
        rac_mean: rac_sum,
    })
}

/// Scalar uncertainty score per unlabeled unit, aligned with
/// `pools.unlabeled`. Scores every slice of a volume-wise unit.
fn score_unlabeled(
    model: &Classifier,
    cache: &FeatureCache,
    pools: &PoolState,
    passes: usize,
    mc_seed: u64,
) -> Vec<f64> {
    pools
        .unlabeled
        .par_iter()
        .enumerate()
        .map(|(ordinal, key)| {
            let slice_scalars: Vec<f64> = match key.slice {
                Some(z) => {
                    let slice = &cache.volume(&key.volume)[z];
                    let seed = derive(mc_seed, "unit", ordinal as u64);
                    let samples = model.predict_mc(slice, passes, seed);
                    vec![scalar_score(&class_uncertainty(&samples))]
                }
                None => cache
                    .volume(&key.volume)
                    .iter()
                    .enumerate()
                    .map(|(z, slice)| {
                        let seed = derive(mc_seed, "unit", (ordinal * 4096 + z) as u64);
                        let samples = model.predict_mc(slice, passes, seed);
                        scalar_score(&class_uncertainty(&samples))
                    })
                    .collect(),
            };
            aggregate_unit_score(&slice_scalars, pools.rule)
        })
        .collect()
}

fn select_batch(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    cache: &FeatureCache,
    pools: &PoolState,
    model: &Classifier,
    iteration: usize,
) -> Result<Vec<SampleKey>, RunError> {
    let k = spec.budget;
    if spec.strategy == Strategy::Rand {
        let mut rng = substream(spec.seed, "rand-strategy", iteration as u64);
        let picked = rand::seq::index::sample(&mut rng, pools.unlabeled.len(), k);
        let mut indices: Vec<usize> = picked.into_iter().collect();
        indices.sort_unstable();
        return Ok(indices.into_iter().map(|i| pools.unlabeled[i].clone()).collect());
    }

    let mc_seed = derive(spec.seed, "mc-scoring", iteration as u64);
    let scores = score_unlabeled(model, cache, pools, spec.train.mc_passes, mc_seed);
    match spec.strategy {
        Strategy::Unc => Ok(select_candidates(pools, &scores, 1.0, k)?),
        Strategy::UncSim | Strategy::UncMi | Strategy::UncHres => {
            let candidates = select_candidates(pools, &scores, spec.candidate_factor, k)?;
            let (sim, mi) = pairwise_matrices(
                |id| dataset.volume(id),
                &candidates,
                &pools.unlabeled,
                &pools.training,
                spec.mi_bins,
            )?;
            let mode = match spec.strategy {
                Strategy::UncSim => SelectionMode::DensityOnly,
                Strategy::UncMi => SelectionMode::DiversityOnly,
                _ => SelectionMode::Hybrid,
            };
            let config = HybridConfig {
                lambda: spec.effective_lambda(),
                k,
                mode,
            };
            Ok(greedy_hybrid_select(&sim, &mi, &config)?)
        }
        Strategy::Rand => unreachable!(),
    }
}

/// Run one experiment. Rows are appended to `sink` (header included) as they
/// complete, so partial runs stay inspectable.
pub fn run_experiment(
    dataset: &Dataset,
    cache: &FeatureCache,
    spec: &ExperimentSpec,
    mut sink: Option<&mut dyn Write>,
) -> Result<ExperimentRecord, RunError> {
    let run_id = spec.run_id();
    let classes = dataset.classes();
    let pools_initial = split_pools(dataset.volumes(), spec.split, spec.rule, spec.seed)?;
    let mut pools = pools_initial;
    let mut rows = Vec::new();

    if let Some(w) = sink.as_deref_mut() {
        writeln!(w, "{}", csv_header(classes))?;
    }

    if spec.upper_bound {
        let start = Instant::now();
        let model = train_model(cache, &pools, dataset, &spec.train, derive(spec.seed, "train", 0), true)?;
        let eval = evaluate_test(&model, cache, &pools, classes)?;
        let row = IterationRecord {
            run_id: run_id.clone(),
            strategy: "upper-bound".to_string(),
            seed: spec.seed,
            rule: spec.rule,
            iteration: 0,
            n_train_units: pools.training.len() + pools.unlabeled.len(),
            dsc_mean: eval.dsc_mean,
            dsc_class: eval.dsc_class,
            rac_mean: eval.rac_mean,
            selected: vec![],
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", csv_row(&row))?;
            w.flush()?;
        }
        return Ok(ExperimentRecord { run_id, rows: vec![row] });
    }

    let mut model = train_model(cache, &pools, dataset, &spec.train, derive(spec.seed, "train", 0), false)?;
    for iteration in 1..=spec.iterations {
        if pools.unlabeled.len() < spec.budget {
            // Budget exceeds the pool: terminate cleanly with what we have.
            break;
        }
        let start = Instant::now();
        let selected = select_batch(spec, dataset, cache, &pools, &model, iteration)?;

        // Leakage guard: acquisitions must come from the unlabeled pool of
        // non-eval volumes.
        for key in &selected {
            assert!(
                !pools.validation.contains(&key.volume) && !pools.test.contains(&key.volume),
                "selected {key} belongs to an evaluation volume"
            );
        }

        pools.move_to_training(&selected)?;
        model = train_model(cache, &pools, dataset, &spec.train, derive(spec.seed, "train", iteration as u64), false)?;
        let eval = evaluate_test(&model, cache, &pools, classes)?;

        let row = IterationRecord {
            run_id: run_id.clone(),
            strategy: spec.strategy.as_str().to_string(),
            seed: spec.seed,
            rule: spec.rule,
            iteration,
            n_train_units: pools.training.len(),
            dsc_mean: eval.dsc_mean,
            dsc_class: eval.dsc_class,
            rac_mean: eval.rac_mean,
            selected,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", csv_row(&row))?;
            w.flush()?;
        }
        rows.push(row);
    }
    Ok(ExperimentRecord { run_id, rows })
}

/// Outcome of one run within a suite.
pub struct SuiteRun {
    pub spec: ExperimentSpec,
    pub result: Result<ExperimentRecord, RunError>,
}

/// Execute the full strategies×seeds cross-product. Individual failures are
/// recorded and the suite continues. Runs execute concurrently on the
/// current rayon pool; each writes `{run_id}.csv` into `out_dir`.
pub fn run_suite(
    dataset: &Dataset,
    cache: &FeatureCache,
    base: &ExperimentSpec,
    strategies: &[Strategy],
    seeds: &[u64],
    include_upper_bound: bool,
    out_dir: &std::path::Path,
) -> std::io::Result<Vec<SuiteRun>> {
    std::fs::create_dir_all(out_dir)?;
    let mut specs = Vec::new();
    for &seed in seeds {
        for &strategy in strategies {
            specs.push(ExperimentSpec {
                strategy,
                seed,
                upper_bound: false,
                ..base.clone()
            });
        }
        if include_upper_bound {
            specs.push(ExperimentSpec {
                seed,
                upper_bound: true,
                ..base.clone()
            });
        }
    }
    let runs: Vec<SuiteRun> = specs
        .into_par_iter()
        .map(|spec| {
            let path = out_dir.join(format!("{}.csv", spec.run_id()));
            let result = std::fs::File::create(&path)
                .map_err(RunError::from)
                .and_then(|mut file| run_experiment(dataset, cache, &spec, Some(&mut file)));
            SuiteRun { spec, result }
        })
        .collect();
    Ok(runs)
}
