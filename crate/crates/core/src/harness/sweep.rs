//! Grid runs over methods, λ, lr scales and seeds.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::Metric;
use crate::error::{Error, Result};

use super::config::MethodId;
use super::pipeline::{prepare_data, pretrain, run_method, Experiment, PreparedData, Pretrained, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: MethodId,
    pub lambda: f64,
    pub lr_scale: f64,
    pub seed: u64,
}

/// Grid cells in execution order: method, then λ, lr scale and seed.
///
/// Methods without a regularizer get a single λ cell (λ = 0).
pub fn cells(exp: &Experiment) -> Vec<Cell> {
    let cfg = &exp.config;
    let mut out = Vec::new();
    for method in cfg.methods() {
        let lambdas = if method.is_regularized() {
            cfg.lambda_values()
        } else {
            vec![0.0]
        };
        for &lambda in &lambdas {
            for &lr_scale in &cfg.lr_scales() {
                for &seed in &cfg.seeds() {
                    out.push(Cell {
                        method,
                        lambda,
                        lr_scale,
                        seed,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub lambda: f64,
    pub lr_scale: f64,
    /// `test` or `val`.
    pub split: String,
    pub metric: Metric,
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub n_seeds: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub outcomes: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    pub fn reports(&self) -> impl Iterator<Item = &RunReport> {
        self.outcomes.iter().filter_map(|o| o.report.as_ref())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some())
    }

    pub fn row(&self, method: &str, lambda: f64, lr_scale: f64, split: &str, metric: Metric, k: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| {
            r.method == method
                && r.lambda == lambda
                && r.lr_scale == lr_scale
                && r.split == split
                && r.metric == metric
                && r.k == k
        })
    }

    /// The cell of `method` with the best mean validation metric; ties go to
    /// the earlier cell.
    pub fn best_by_val(&self, method: &str, metric: Metric, k: usize) -> Option<&SummaryRow> {
        let mut best: Option<&SummaryRow> = None;
        for r in self
            .summary
            .iter()
            .filter(|r| r.method == method && r.split == "val" && r.metric == metric && r.k == k)
        {
            if best.is_none_or(|b| r.mean > b.mean) {
                best = Some(r);
            }
        }
        best
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    // offset by the first value so identical inputs return it unchanged
    let mean = xs[0] + xs.iter().map(|x| x - xs[0]).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean ± std over seeds for every (method, λ, lr scale) group.
pub fn summarize(outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    type Key = (String, u64, u64);
    let mut groups: BTreeMap<usize, (Key, Vec<&CellOutcome>)> = BTreeMap::new();
    let mut index: BTreeMap<Key, usize> = BTreeMap::new();
    for o in outcomes {
        let key = (o.cell.method.to_string(), o.cell.lambda.to_bits(), o.cell.lr_scale.to_bits());
        let next = index.len();
        let slot = *index.entry(key.clone()).or_insert(next);
        groups.entry(slot).or_insert_with(|| (key, Vec::new())).1.push(o);
    }
    let mut rows = Vec::new();
    for (_, (key, members)) in groups {
        let reports: Vec<&RunReport> = members.iter().filter_map(|o| o.report.as_ref()).collect();
        let n_failed = members.len() - reports.len();
        let Some(first) = reports.first() else {
            continue;
        };
        for (split, pick) in [("test", 0), ("val", 1)] {
            let table = if pick == 0 { &first.averages } else { &first.val_averages };
            for v in table {
                let xs: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| {
                        if pick == 0 {
                            r.average(v.metric, v.k)
                        } else {
                            r.val_average(v.metric, v.k)
                        }
                    })
                    .collect();
                let (mean, std) = mean_std(&xs);
                rows.push(SummaryRow {
                    method: key.0.clone(),
                    lambda: f64::from_bits(key.1),
                    lr_scale: f64::from_bits(key.2),
                    split: split.to_string(),
                    metric: v.metric,
                    k: v.k,
                    mean,
                    std,
                    n_seeds: xs.len(),
                    n_failed,
                });
            }
        }
    }
    rows
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {jobs} workers: {e}")))
}

/// Runs every cell on a pool of `jobs` workers.
///
/// Data and pretraining are shared per seed. A failing cell is recorded and
/// the rest continue; results come back in cell order.
pub fn run_sweep(exp: &Experiment, jobs: usize) -> Result<SweepResult> {
    let grid = cells(exp);
    if grid.is_empty() {
        return Err(Error::Config("the sweep has no cells".into()));
    }
    let seeds = exp.config.seeds();
    let pool = pool(jobs)?;
    let shared: Vec<(u64, std::result::Result<(PreparedData, Pretrained), String>)> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let r = prepare_data(&exp.config, seed)
                    .and_then(|d| pretrain(&exp.config, &d, seed).map(|p| (d, p)))
                    .map_err(|e| e.to_string());
                (seed, r)
            })
            .collect()
    });
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        grid.par_iter()
            .map(|&cell| {
                let (_, base) = shared.iter().find(|(s, _)| *s == cell.seed).expect("every seed prepared");
                let result = match base {
                    Ok((data, pre)) => {
                        let e = exp.with_seed(cell.seed);
                        run_method(&e, data, pre, cell.method, cell.lambda, cell.lr_scale, None).map_err(|e| e.to_string())
                    }
                    Err(msg) => Err(msg.clone()),
                };
                match result {
                    Ok(report) => {
                        info!(
                            "{} λ={} lr_scale={} seed={}: NDCG@10 {:.4}",
                            cell.method,
                            cell.lambda,
                            cell.lr_scale,
                            cell.seed,
                            report.average(Metric::Ndcg, 10).unwrap_or(f64::NAN)
                        );
                        CellOutcome {
                            cell,
                            report: Some(report),
                            error: None,
                        }
                    }
                    Err(msg) => {
                        warn!("{} λ={} seed={} failed: {msg}", cell.method, cell.lambda, cell.seed);
                        CellOutcome {
                            cell,
                            report: None,
                            error: Some(msg),
                        }
                    }
                }
            })
            .collect()
    });
    let summary = summarize(&outcomes);
    Ok(SweepResult { outcomes, summary })
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))
}

pub fn write_summary_file(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_summary_csv(rows, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Policy;
    use crate::harness::config::ExperimentConfig;
    use crate::harness::pipeline::run_pipeline;

    #[test]
    fn lambda_list_gives_one_cell_per_value_for_peso_only() {
        let mut cfg = ExperimentConfig::quick(3);
        cfg.sweep.lambda_values = vec![0.5, 1.0, 2.0, 5.0, 8.0];
        cfg.sweep.methods = vec![MethodId::policy(Policy::Peso), MethodId::policy(Policy::SingleEvolving)];
        let exp = Experiment::new(cfg).unwrap();
        let c = cells(&exp);
        assert_eq!(c.iter().filter(|c| c.method.is_regularized()).count(), 5);
        assert_eq!(c.len(), 6);
    }

    #[test]
    fn single_cell_equals_pipeline() {
        let exp = Experiment::new(ExperimentConfig::quick(3)).unwrap();
        let s = run_sweep(&exp, 1).unwrap();
        assert_eq!(s.outcomes.len(), 1);
        let direct = run_pipeline(&exp).unwrap();
        assert_eq!(s.outcomes[0].report.as_ref().unwrap().without_timing(), direct.without_timing());
    }

    #[test]
    fn identical_seeds_have_zero_spread() {
        let mut cfg = ExperimentConfig::quick(3);
        cfg.sweep.seeds = vec![4, 4, 4];
        let s = run_sweep(&Experiment::new(cfg).unwrap(), 1).unwrap();
        let single = s.outcomes[0].report.as_ref().unwrap().average(Metric::Ndcg, 10).unwrap();
        let row = s.row("peso", 0.0, 0.1, "test", Metric::Ndcg, 10).unwrap();
        assert_eq!(row.mean, single);
        assert_eq!(row.std, 0.0);
        assert_eq!(row.n_seeds, 3);
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
