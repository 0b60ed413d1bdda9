//! Aggregate per-run result CSVs into a per-strategy summary.
//!
//! Each run file holds one row per acquisition iteration. The summary
//! groups rows by (strategy, rule, iteration) across seeds and reports the
//! mean, sample standard deviation, and 95% confidence half-width of the
//! mean DSC and mean RAC. Output bytes are deterministic for a given input
//! set, so re-running a report is idempotent.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no result rows found under {0}")]
    NoRows(String),
}

/// One parsed result row; only the columns the summary needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub strategy: String,
    pub seed: u64,
    pub rule: String,
    pub iteration: usize,
    pub dsc_mean: f64,
    pub rac_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub rule: String,
    pub iteration: usize,
    pub seeds: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub dsc_ci95: f64,
    pub rac_mean: f64,
    pub rac_std: f64,
    pub rac_ci95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Lines that did not parse as result rows and were skipped.
    pub skipped: usize,
}

/// Parse one result CSV given its header line. Returns the parsed rows and
/// the count of malformed lines.
pub fn parse_result_csv(text: &str) -> (Vec<ResultRow>, usize) {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return (vec![], 0);
    };
    let columns: Vec<&str> = header.split(',').collect();
    let col = |name: &str| columns.iter().position(|c| *c == name);
    let (Some(i_strategy), Some(i_seed), Some(i_rule), Some(i_iter), Some(i_dsc), Some(i_rac)) = (
        col("strategy"),
        col("seed"),
        col("rule"),
        col("iteration"),
        col("dsc_mean"),
        col("rac_mean"),
    ) else {
        return (vec![], text.lines().count());
    };

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (|| {
            Some(ResultRow {
                strategy: fields.get(i_strategy)?.to_string(),
                seed: fields.get(i_seed)?.parse().ok()?,
                rule: fields.get(i_rule)?.to_string(),
                iteration: fields.get(i_iter)?.parse().ok()?,
                dsc_mean: fields.get(i_dsc)?.parse().ok()?,
                rac_mean: fields.get(i_rac)?.parse().ok()?,
            })
        })();
        match parsed {
            Some(row) => rows.push(row),
            None => skipped += 1,
        }
    }
    (rows, skipped)
}

fn mean_std_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    (mean, std, 1.96 * std / n.sqrt())
}

/// Group rows by (strategy, rule, iteration) and aggregate across seeds.
pub fn summarize(rows: &[ResultRow], skipped: usize) -> Summary {
    let mut groups: BTreeMap<(String, String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in rows {
        let entry = groups
            .entry((row.strategy.clone(), row.rule.clone(), row.iteration))
            .or_default();
        entry.0.push(row.dsc_mean);
        entry.1.push(row.rac_mean);
    }
    let rows = groups
        .into_iter()
        .map(|((strategy, rule, iteration), (dsc, rac))| {
            let (dsc_mean, dsc_std, dsc_ci95) = mean_std_ci(&dsc);
            let (rac_mean, rac_std, rac_ci95) = mean_std_ci(&rac);
            SummaryRow {
                strategy,
                rule,
                iteration,
                seeds: dsc.len(),
                dsc_mean,
                dsc_std,
                dsc_ci95,
                rac_mean,
                rac_std,
                rac_ci95,
            }
        })
        .collect();
    Summary { rows, skipped }
}

/// Read every `*.csv` under `dir` (non-recursive, `summary.csv` excluded)
/// and build the aggregate summary.
pub fn summarize_dir(dir: &Path) -> Result<Summary, ReportError> {
    let io_err = |e: std::io::Error| ReportError::Io {
        path: dir.display().to_string(),
        source: e,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && p.file_name().is_some_and(|n| n != "summary.csv")
        })
        .collect();
    paths.sort();

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| ReportError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let (mut parsed, bad) = parse_result_csv(&text);
        rows.append(&mut parsed);
        skipped += bad;
    }
    if rows.is_empty() {
        return Err(ReportError::NoRows(dir.display().to_string()));
    }
    Ok(summarize(&rows, skipped))
}

pub const SUMMARY_HEADER: &str =
    "strategy,rule,iteration,seeds,dsc_mean,dsc_std,dsc_ci95,rac_mean,rac_std,rac_ci95";

pub fn write_summary(summary: &Summary, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in &summary.rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.strategy,
            r.rule,
            r.iteration,
            r.seeds,
            r.dsc_mean,
            r.dsc_std,
            r.dsc_ci95,
            r.rac_mean,
            r.rac_std,
            r.rac_ci95
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_csv(seed: u64, dsc: &[f64]) -> String {
        let mut out = String::from(
            "run_id,strategy,seed,rule,iteration,n_train_units,dsc_mean,dsc_class_1,rac_mean,selected_keys,wall_ms\n",
        );
        for (i, d) in dsc.iter().enumerate() {
            out.push_str(&format!(
                "unc_volume_s{seed},unc,{seed},volume,{},{},{d:.6},{d:.6},{:.6},vol001,10\n",
                i + 1,
                i + 2,
                d / 2.0
            ));
        }
        out
    }

    #[test]
    fn parse_skips_malformed_rows() {
        let mut text = sample_csv(1, &[0.5, 0.6]);
        text.push_str("garbage,row\n");
        text.push_str("unc_volume_s1,unc,1,volume,three,4,0.7,0.7,0.3,vol002,9\n");
        let (rows, skipped) = parse_result_csv(&text);
        assert_eq!(rows.len(), 2);
        assert_eq!(skipped, 2);
    }

    #[test]
    fn summary_statistics_hand_case() {
        let (mut rows, _) = parse_result_csv(&sample_csv(1, &[0.4, 0.6]));
        let (more, _) = parse_result_csv(&sample_csv(2, &[0.6, 0.8]));
        rows.extend(more);
        let summary = summarize(&rows, 0);
        assert_eq!(summary.rows.len(), 2);
        let first = &summary.rows[0];
        assert_eq!((first.iteration, first.seeds), (1, 2));
        assert!((first.dsc_mean - 0.5).abs() < 1e-12);
        // Sample std of {0.4, 0.6} is sqrt(0.02).
        assert!((first.dsc_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((first.dsc_ci95 - 1.96 * 0.02f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summary_bytes_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("unc_volume_s1.csv"), sample_csv(1, &[0.4, 0.6])).unwrap();
        std::fs::write(dir.path().join("unc_volume_s2.csv"), sample_csv(2, &[0.5, 0.7])).unwrap();
        let render = || {
            let summary = summarize_dir(dir.path()).unwrap();
            let mut bytes = Vec::new();
            write_summary(&summary, &mut bytes).unwrap();
            bytes
        };
        let a = render();
        // A stale summary.csv in the directory must not feed back into
        // itself.
        std::fs::write(dir.path().join("summary.csv"), &a).unwrap();
        let b = render();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with(SUMMARY_HEADER));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(summarize_dir(dir.path()), Err(ReportError::NoRows(_))));
    }
}
