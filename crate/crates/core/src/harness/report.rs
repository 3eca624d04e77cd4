//! Tables written after runs and sweeps.
//!
//! Everything here is plain CSV or JSON so curves can be plotted elsewhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{write_metric_csv_file, Metric, MetricRow};
use crate::error::{Error, Result};

use super::pipeline::RunReport;
use super::sweep::{write_summary_file, SummaryRow, SweepResult};

/// One per-stage metric of one run, tagged with the cell it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedMetricRow {
    pub seed: u64,
    pub lambda: f64,
    pub lr_scale: f64,
    pub stage: usize,
    pub method: String,
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

pub fn tagged_rows(report: &RunReport) -> Vec<TaggedMetricRow> {
    report
        .metric_rows()
        .into_iter()
        .map(|r| TaggedMetricRow {
            seed: report.seed,
            lambda: report.lambda,
            lr_scale: report.lr_scale,
            stage: r.stage,
            method: r.method,
            metric: r.metric,
            k: r.k,
            value: r.value,
        })
        .collect()
}

/// Best λ per (method, lr scale), chosen on mean validation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLambdaRow {
    pub method: String,
    pub lr_scale: f64,
    pub lambda: f64,
    pub metric: Metric,
    pub k: usize,
    pub val_mean: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

/// One line per method: test metrics of its validation-selected cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub lambda: f64,
    pub lr_scale: f64,
    pub metric: Metric,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numeric(format!("csv: {e}"))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("json: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `report.json` and `metrics.csv` for a single run.
pub fn write_run(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let json = dir.join("report.json");
    write_json(report, &json)?;
    let metrics = dir.join("metrics.csv");
    let rows: Vec<MetricRow> = report.metric_rows();
    write_metric_csv_file(&rows, &metrics)?;
    Ok(vec![json, metrics])
}

/// Summary rows of regularized methods, ordered by method, lr scale, λ.
pub fn lambda_curve(result: &SweepResult) -> Vec<SummaryRow> {
    let regularized: Vec<String> = result
        .outcomes
        .iter()
        .filter(|o| o.cell.method.is_regularized())
        .map(|o| o.cell.method.to_string())
        .collect();
    let mut rows: Vec<SummaryRow> = result
        .summary
        .iter()
        .filter(|r| regularized.contains(&r.method))
        .cloned()
        .collect();
    rows.sort_by(|a, b| {
        (&a.method, &a.split, a.metric, a.k)
            .cmp(&(&b.method, &b.split, b.metric, b.k))
            .then(a.lr_scale.total_cmp(&b.lr_scale))
            .then(a.lambda.total_cmp(&b.lambda))
    });
    rows
}

/// Summary rows ordered by method, λ, lr scale.
pub fn lr_curve(result: &SweepResult) -> Vec<SummaryRow> {
    let mut rows = result.summary.clone();
    rows.sort_by(|a, b| {
        (&a.method, &a.split, a.metric, a.k)
            .cmp(&(&b.method, &b.split, b.metric, b.k))
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.lr_scale.total_cmp(&b.lr_scale))
    });
    rows
}

pub fn best_lambda(result: &SweepResult, metric: Metric, k: usize) -> Vec<BestLambdaRow> {
    let mut out: Vec<BestLambdaRow> = Vec::new();
    for r in result
        .summary
        .iter()
        .filter(|r| r.split == "val" && r.metric == metric && r.k == k)
    {
        let Some(test) = result.row(&r.method, r.lambda, r.lr_scale, "test", metric, k) else {
            continue;
        };
        let candidate = BestLambdaRow {
            method: r.method.clone(),
            lr_scale: r.lr_scale,
            lambda: r.lambda,
            metric,
            k,
            val_mean: r.mean,
            test_mean: test.mean,
            test_std: test.std,
        };
        match out
            .iter_mut()
            .find(|b| b.method == r.method && b.lr_scale == r.lr_scale)
        {
            // strict: ties keep the earlier (smaller) λ
            Some(b) if candidate.val_mean > b.val_mean => *b = candidate,
            Some(_) => {}
            None => out.push(candidate),
        }
    }
    out
}

/// Per method, the cell chosen by validation `select`, reported on every test metric.
pub fn method_table(result: &SweepResult, select: (Metric, usize)) -> Vec<MethodRow> {
    let mut methods: Vec<String> = Vec::new();
    for o in &result.outcomes {
        let m = o.cell.method.to_string();
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let mut out = Vec::new();
    for m in methods {
        let Some(best) = result.best_by_val(&m, select.0, select.1) else {
            continue;
        };
        for r in result.summary.iter().filter(|r| {
            r.method == m && r.split == "test" && r.lambda == best.lambda && r.lr_scale == best.lr_scale
        }) {
            out.push(MethodRow {
                method: m.clone(),
                lambda: r.lambda,
                lr_scale: r.lr_scale,
                metric: r.metric,
                k: r.k,
                mean: r.mean,
                std: r.std,
                n_seeds: r.n_seeds,
            });
        }
    }
    out
}

/// All sweep tables in `dir`; returns the written paths.
pub fn write_sweep(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    let path = dir.join("summary.csv");
    write_summary_file(&result.summary, &path)?;
    written.push(path);

    let rows: Vec<TaggedMetricRow> = result.reports().flat_map(tagged_rows).collect();
    let path = dir.join("metrics.csv");
    write_csv(&rows, &path)?;
    written.push(path);

    for (name, rows) in [("lambda_sweep.csv", lambda_curve(result)), ("lr_sweep.csv", lr_curve(result))] {
        let path = dir.join(name);
        write_csv(&rows, &path)?;
        written.push(path);
    }
    let path = dir.join("best_lambda.csv");
    write_csv(&best_lambda(result, Metric::Ndcg, 10), &path)?;
    written.push(path);
    let path = dir.join("methods.csv");
    write_csv(&method_table(result, (Metric::Ndcg, 10)), &path)?;
    written.push(path);

    let failures: Vec<_> = result.failures().collect();
    if !failures.is_empty() {
        let path = dir.join("failures.json");
        write_json(&failures, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Plain-text table of [`method_table`] rows for one metric.
pub fn format_method_table(rows: &[MethodRow], metric: Metric, k: usize) -> String {
    let mut s = format!("{:<22} {:>6} {:>8} {:>10} {:>10}\n", "method", "λ", "lr_scale", "mean", "std");
    for r in rows.iter().filter(|r| r.metric == metric && r.k == k) {
        s.push_str(&format!(
            "{:<22} {:>6} {:>8} {:>10.5} {:>10.5}\n",
            r.method, r.lambda, r.lr_scale, r.mean, r.std
        ));
    }
    s
}
