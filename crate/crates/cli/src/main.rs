//! `bal`: generate phantom data, run acquisition experiments, aggregate
//! results, and cross-check the numerics.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (including failed
//! oracle checks or suite runs), 2 on a usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bal_core::alloop::{run_experiment, run_suite, ExperimentSpec};
use bal_core::config::RunConfig;
use bal_core::data::{generate_phantom, load_dataset, save_dataset};
use bal_core::oracle;
use bal_core::report::{summarize_dir, write_summary};
use bal_core::alloop::FeatureCache;
use bal_core::Dataset;

#[derive(Parser)]
#[command(name = "bal", version, about = "Bayesian active learning for segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.lr=2e-4 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                RunConfig::from_toml_str(&text)?
            }
            None => RunConfig::default(),
        };
        config.apply_overrides(&self.overrides)?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    GenData {
        /// Output directory for volumes and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a single experiment.
    Run {
        /// Dataset directory holding manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the result CSV and frozen config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full strategies-by-seeds cross-product.
    Suite {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Additionally run the full-pool upper-bound reference per seed.
        #[arg(long)]
        upper_bound: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Aggregate result CSVs into summary.csv.
    Report {
        /// Directory of per-run result CSVs.
        #[arg(long)]
        results: PathBuf,
        /// Summary path; defaults to summary.csv inside the results dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-check the optimized numerics against naive references.
    OracleCheck {
        /// Inject a deliberate deviation; the battery must then fail.
        #[arg(long)]
        perturb: bool,
    },
}

/// Refuse to write into an existing non-empty directory unless forced.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            );
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn freeze_config(config: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml_string()?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.tsv");
    load_dataset(&manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn configure_pool(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    Ok(())
}

fn cmd_gen_data(out: &Path, force: bool, config: &ConfigArgs) -> Result<()> {
    let config = config.resolve()?;
    claim_dir(out, force)?;
    let phantom = config.phantom.phantom_config();
    let volumes = generate_phantom(config.phantom.seed, &phantom)?;
    save_dataset(&volumes, out, phantom.classes)?;
    freeze_config(&config, out)?;
    println!(
        "wrote {} volumes ({}x{}x{}, {} classes) to {}",
        volumes.len(),
        phantom.height,
        phantom.width,
        phantom.depth,
        phantom.classes,
        out.display()
    );
    Ok(())
}

fn cmd_run(data: &Path, out: &Path, force: bool, config: &ConfigArgs) -> Result<()> {
    let config = config.resolve()?;
    let spec: ExperimentSpec = config.experiment_spec()?;
    claim_dir(out, force)?;
    freeze_config(&config, out)?;
    let dataset = load_data(data)?;
    let cache = FeatureCache::build(&dataset);
    let csv_path = out.join(format!("{}.csv", spec.run_id()));
    let mut file = std::fs::File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;
    let record = run_experiment(&dataset, &cache, &spec, Some(&mut file))?;
    for row in &record.rows {
        println!(
            "iter {}: train units {}, dsc {:.4}, rac {:.4}",
            row.iteration, row.n_train_units, row.dsc_mean, row.rac_mean
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_suite(
    data: &Path,
    out: &Path,
    force: bool,
    jobs: Option<usize>,
    upper_bound: bool,
    config: &ConfigArgs,
) -> Result<()> {
    configure_pool(jobs)?;
    let config = config.resolve()?;
    let base = config.experiment_spec()?;
    let strategies = config.strategies()?;
    let seeds = &config.experiment.seeds;
    claim_dir(out, force)?;
    freeze_config(&config, out)?;
    let dataset = load_data(data)?;
    let cache = FeatureCache::build(&dataset);
    let runs = run_suite(&dataset, &cache, &base, &strategies, seeds, upper_bound, out)?;
    let mut failures = 0usize;
    for run in &runs {
        match &run.result {
            Ok(record) => println!("{}: {} iterations", record.run_id, record.rows.len()),
            Err(e) => {
                failures += 1;
                eprintln!("{}: FAILED: {e}", run.spec.run_id());
            }
        }
    }
    println!("{} runs, {failures} failed, results in {}", runs.len(), out.display());
    if failures > 0 {
        bail!("{failures} suite runs failed");
    }
    Ok(())
}

fn cmd_report(results: &Path, out: Option<&Path>) -> Result<()> {
    let summary = summarize_dir(results)?;
    if summary.skipped > 0 {
        eprintln!("warning: skipped {} malformed result rows", summary.skipped);
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| results.join("summary.csv"));
    let mut bytes = Vec::new();
    write_summary(&summary, &mut bytes)?;
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} ({} rows)", path.display(), summary.rows.len());
    Ok(())
}

fn cmd_oracle_check(perturb: bool) -> Result<()> {
    let checks = oracle::run_all(perturb);
    let mut failed = 0usize;
    for check in &checks {
        let status = if check.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", check.name, check.detail);
        if !check.pass {
            failed += 1;
        }
    }
    if perturb {
        if failed == 0 {
            bail!("perturbed battery passed; the checks are not sensitive");
        }
        println!("perturbation detected by {failed}/{} checks", checks.len());
        return Ok(());
    }
    if failed > 0 {
        bail!("{failed}/{} oracle checks failed", checks.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData { out, force, config } => cmd_gen_data(out, *force, config),
        Command::Run { data, out, force, config } => cmd_run(data, out, *force, config),
        Command::Suite {
            data,
            out,
            force,
            jobs,
            upper_bound,
            config,
        } => cmd_suite(data, out, *force, *jobs, *upper_bound, config),
        Command::Report { results, out } => cmd_report(results, out.as_deref()),
        Command::OracleCheck { perturb } => cmd_oracle_check(*perturb),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
