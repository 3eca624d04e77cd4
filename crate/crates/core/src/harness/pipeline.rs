//! Stage pipeline: shared pretraining, then one continual run per method.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{pack_adapters, AdapterStack, LoraAdapter, Policy};
use crate::data::{
    assign_codes, generate_drift, ingest_csv, make_all_pairs, split_chronological, split_user_disjoint, BlockInput,
    InteractionLog, StageBlock,
};
use crate::decode::{evaluate_pairs, metric_rows, BlockMetrics, CodeTrie, Metric, MetricRow, MetricValue};
use crate::error::{Error, Result};
use crate::model::{train_stage, CodeBook, EpochLog, ToyRecModel};

use super::checkpoint;
use super::config::{ExperimentConfig, MethodId, SplitKind};

/// A validated config together with the text it was read from.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Echoed verbatim into every report.
    pub source: String,
}

impl Experiment {
    /// Uses the canonical TOML rendering as the source text.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let source = config.to_toml()?;
        Ok(Experiment { config, source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, source) = ExperimentConfig::load(path)?;
        Ok(Experiment { config, source })
    }

    /// Same experiment under another top-level seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut e = self.clone();
        e.config.seed = seed;
        e
    }
}

/// Seed the data of run `seed` is generated and coded with.
pub fn data_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    let base = cfg.data.drift.as_ref().map_or(0, |d| d.seed);
    if cfg.data.reseed_per_run {
        base.wrapping_add(seed)
    } else {
        base
    }
}

/// Interaction log and item clusters of run `seed`.
///
/// CSV items have no clusters, so they are dealt round-robin over the
/// codebook's first-token values.
pub fn load_log(cfg: &ExperimentConfig, seed: u64) -> Result<(InteractionLog, Vec<usize>)> {
    if let Some(spec) = &cfg.data.drift {
        let mut spec = spec.clone();
        spec.seed = data_seed(cfg, seed);
        let d = generate_drift(&spec)?;
        Ok((d.log, d.item_cluster))
    } else if let Some(path) = &cfg.data.csv {
        let (log, _) = ingest_csv(path)?;
        let k = cfg.model.codebook_size;
        let clusters = (0..log.n_items).map(|i| i % k).collect();
        Ok((log, clusters))
    } else {
        Err(Error::Config("no data source configured".into()))
    }
}

pub fn split_log(cfg: &ExperimentConfig, log: &InteractionLog, seed: u64) -> Result<Vec<BlockInput>> {
    let d = &cfg.data;
    match d.split {
        SplitKind::Chronological => split_chronological(log, cfg.n_stages(), d.pretrain_frac),
        SplitKind::UserDisjoint => split_user_disjoint(
            log,
            cfg.n_stages(),
            d.pretrain_frac,
            d.disjoint_tolerance,
            data_seed(cfg, seed),
        ),
    }
}

/// Everything the stages of one seed read.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub codebook: CodeBook,
    pub trie: CodeTrie,
    pub blocks: Vec<StageBlock>,
    pub n_users: usize,
    pub n_items: usize,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (log, clusters) = load_log(cfg, seed)?;
    let inputs = split_log(cfg, &log, seed)?;
    let (codebook, trie) = assign_codes(&clusters, cfg.model.code_len, cfg.model.codebook_size, data_seed(cfg, seed))?;
    let blocks = make_all_pairs(&inputs);
    for b in &blocks {
        if b.test_pairs.is_empty() {
            return Err(Error::Split(format!("stage {} has no test pairs", b.stage_index)));
        }
    }
    Ok(PreparedData {
        codebook,
        trie,
        blocks,
        n_users: log.n_users,
        n_items: log.n_items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub n_train_pairs: usize,
    pub test: BlockMetrics,
    pub val: Option<BlockMetrics>,
    pub log: Vec<EpochLog>,
    /// `‖v_t − v_{t−1}‖` over the live adapters; absent for the first stage.
    pub displacement: Option<f64>,
}

fn evaluate_stage(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    stage: usize,
) -> Result<(BlockMetrics, Option<BlockMetrics>)> {
    let block = &data.blocks[stage - 1];
    let e = &cfg.eval;
    let test = evaluate_pairs(model, stacks, &data.codebook, &data.trie, &block.test_pairs, &e.ks, e.beam_width)?;
    let val = if block.val_pairs.is_empty() {
        None
    } else {
        Some(evaluate_pairs(
            model,
            stacks,
            &data.codebook,
            &data.trie,
            &block.val_pairs,
            &e.ks,
            e.beam_width,
        )?)
    };
    Ok((test, val))
}

/// The first stage, shared by every method of a seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pretrained {
    pub seed: u64,
    pub model: ToyRecModel,
    /// Single evolving stacks holding the first-stage adapter.
    pub stacks: Vec<AdapterStack>,
    pub report: StageReport,
    /// Generator state after pretraining; every method continues from a copy.
    pub rng: ChaCha8Rng,
}

pub fn pretrain(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<Pretrained> {
    let inner = || -> Result<Pretrained> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = vec![cfg.model.codebook_size; cfg.model.code_len];
        let mut model = ToyRecModel::new(cfg.model.d, sizes, &mut rng)?;
        let mut options = cfg.model.stack_options();
        if let Some(std) = cfg.pretrain.lora_init_std {
            options.init_std = std;
        }
        let stacks = model.fresh_stacks(Policy::SingleEvolving, cfg.model.rank, options, &mut rng)?;
        let block = &data.blocks[0];
        let mut tc = cfg.pretrain_config();
        tc.seed = seed;
        let out = train_stage(
            &mut model,
            &stacks,
            &data.codebook,
            &block.pairs,
            &block.val_pairs,
            None,
            1,
            &tc,
            &mut rng,
        )?;
        let (test, val) = evaluate_stage(cfg, data, &model, &out.trained, 1)?;
        info!(
            "seed {seed}: pretrained on {} pairs, stage-1 NDCG@10 {:.4}",
            block.pairs.len(),
            test.get(Metric::Ndcg, 10).unwrap_or(f64::NAN)
        );
        Ok(Pretrained {
            seed,
            model,
            stacks: out.trained,
            report: StageReport {
                stage: 1,
                n_train_pairs: block.pairs.len(),
                test,
                val,
                log: out.log,
                displacement: None,
            },
            rng,
        })
    };
    inner().map_err(|e| e.at_stage(1))
}

/// A method's run between stages; this is what checkpoints hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub method: MethodId,
    pub seed: u64,
    /// λ actually applied (zero for methods without a regularizer).
    pub lambda: f64,
    pub lr_scale: f64,
    /// Next stage to run, 1-based.
    pub next_stage: usize,
    pub model: ToyRecModel,
    pub stacks: Vec<AdapterStack>,
    pub rng: ChaCha8Rng,
    pub stages: Vec<StageReport>,
}

impl RunState {
    /// Converts the pretrained stacks to `method` and positions the run at stage 2.
    pub fn start(cfg: &ExperimentConfig, pre: &Pretrained, method: MethodId, lambda: f64, lr_scale: f64) -> Result<Self> {
        let mut rng = pre.rng.clone();
        let stacks = match method.adapter_policy() {
            None => pre.stacks.clone(),
            Some(policy) => pre
                .stacks
                .iter()
                .map(|s| {
                    AdapterStack::new(policy, s.live.clone(), cfg.model.stack_options()).seal_stage(
                        &s.live,
                        policy.inherits(),
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| e.at_stage(1))?,
        };
        Ok(RunState {
            method,
            seed: pre.seed,
            lambda: if method.is_regularized() { lambda } else { 0.0 },
            lr_scale,
            next_stage: 2,
            model: pre.model.clone(),
            stacks,
            rng,
            stages: vec![pre.report.clone()],
        })
    }

    pub fn is_done(&self, cfg: &ExperimentConfig) -> bool {
        self.next_stage > cfg.n_stages()
    }

    /// Trains (unless `pretrain_only`) and evaluates the next stage.
    pub fn advance(&mut self, cfg: &ExperimentConfig, data: &PreparedData) -> Result<()> {
        let t = self.next_stage;
        if t > cfg.n_stages() || t > data.blocks.len() {
            return Err(Error::pre(format!("no stage {t} to run")));
        }
        self.advance_inner(cfg, data, t).map_err(|e| e.at_stage(t))?;
        self.next_stage += 1;
        Ok(())
    }

    fn advance_inner(&mut self, cfg: &ExperimentConfig, data: &PreparedData, t: usize) -> Result<()> {
        let block = &data.blocks[t - 1];
        let report = match self.method {
            MethodId::PretrainOnly => {
                let (test, val) = evaluate_stage(cfg, data, &self.model, &self.stacks, t)?;
                StageReport {
                    stage: t,
                    n_train_pairs: 0,
                    test,
                    val,
                    log: Vec::new(),
                    displacement: Some(0.0),
                }
            }
            MethodId::Adapter { policy, regularizer } => {
                let mut tc = cfg.stage_config(policy, self.lambda, self.lr_scale);
                tc.seed = self.seed;
                if let Some(k) = regularizer {
                    tc.regularizer = k;
                }
                let v_prev: Vec<LoraAdapter> = self.stacks.iter().map(|s| s.live.clone()).collect();
                let out = train_stage(
                    &mut self.model,
                    &self.stacks,
                    &data.codebook,
                    &block.pairs,
                    &block.val_pairs,
                    Some(&v_prev),
                    t,
                    &tc,
                    &mut self.rng,
                )?;
                let trained: Vec<LoraAdapter> = out.trained.iter().map(|s| s.live.clone()).collect();
                let displacement = pack_adapters(&trained).distance(&pack_adapters(&v_prev));
                let (test, val) = evaluate_stage(cfg, data, &self.model, &out.trained, t)?;
                self.stacks = out.sealed;
                StageReport {
                    stage: t,
                    n_train_pairs: block.pairs.len(),
                    test,
                    val,
                    log: out.log,
                    displacement: Some(displacement),
                }
            }
        };
        debug!(
            "{} seed {} stage {t}: NDCG@10 {:.4}",
            self.method,
            self.seed,
            report.test.get(Metric::Ndcg, 10).unwrap_or(f64::NAN)
        );
        self.stages.push(report);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub lambda: f64,
    pub lr_scale: f64,
    /// The experiment config exactly as read.
    pub config: String,
    pub stages: Vec<StageReport>,
    pub average_from: usize,
    pub average_to: usize,
    /// Test metrics averaged over the averaging window.
    pub averages: Vec<MetricValue>,
    /// Validation metrics averaged over the window's stages that have them.
    pub val_averages: Vec<MetricValue>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn average(&self, metric: Metric, k: usize) -> Option<f64> {
        find(&self.averages, metric, k)
    }

    pub fn val_average(&self, metric: Metric, k: usize) -> Option<f64> {
        find(&self.val_averages, metric, k)
    }

    /// Per-stage test rows, `stage,method,metric,k,value`.
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.stages
            .iter()
            .flat_map(|s| metric_rows(s.stage, &self.method, &s.test))
            .collect()
    }

    /// The report with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

fn find(values: &[MetricValue], metric: Metric, k: usize) -> Option<f64> {
    values.iter().find(|v| v.metric == metric && v.k == k).map(|v| v.value)
}

/// Arithmetic mean of each metric over `tables`, keyed like the first table.
pub fn average_metrics(tables: &[&BlockMetrics]) -> Vec<MetricValue> {
    let Some(first) = tables.first() else {
        return Vec::new();
    };
    first
        .values
        .iter()
        .map(|v| {
            let sum: f64 = tables.iter().map(|t| t.get(v.metric, v.k).unwrap_or(f64::NAN)).sum();
            MetricValue {
                metric: v.metric,
                k: v.k,
                value: sum / tables.len() as f64,
            }
        })
        .collect()
}

pub fn finish(exp: &Experiment, state: RunState, wall_clock_secs: f64) -> RunReport {
    let cfg = &exp.config;
    let (from, to) = (cfg.eval.average_from, cfg.average_to());
    let window: Vec<&StageReport> = state.stages.iter().filter(|s| (from..=to).contains(&s.stage)).collect();
    let test: Vec<&BlockMetrics> = window.iter().map(|s| &s.test).collect();
    let val: Vec<&BlockMetrics> = window.iter().filter_map(|s| s.val.as_ref()).collect();
    RunReport {
        method: state.method.to_string(),
        seed: state.seed,
        lambda: state.lambda,
        lr_scale: state.lr_scale,
        config: exp.source.clone(),
        averages: average_metrics(&test),
        val_averages: average_metrics(&val),
        stages: state.stages,
        average_from: from,
        average_to: to,
        wall_clock_secs,
    }
}

/// Runs `method` from a shared pretrained state.
///
/// With `checkpoint`, the run state is written there after every stage and an
/// existing file for the same config is resumed from.
pub fn run_method(
    exp: &Experiment,
    data: &PreparedData,
    pre: &Pretrained,
    method: MethodId,
    lambda: f64,
    lr_scale: f64,
    checkpoint_path: Option<&Path>,
) -> Result<RunReport> {
    let cfg = &exp.config;
    let started = Instant::now();
    let hash = cfg.hash()?;
    let mut state = match checkpoint_path {
        Some(p) if p.exists() => {
            let s = checkpoint::load(p, &hash)?;
            if s.method != method || s.seed != pre.seed {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} seed {}, expected {method} seed {}",
                    p.display(),
                    s.method,
                    s.seed,
                    pre.seed
                )));
            }
            info!("resuming {method} at stage {}", s.next_stage);
            s
        }
        _ => RunState::start(cfg, pre, method, lambda, lr_scale)?,
    };
    while !state.is_done(cfg) {
        state.advance(cfg, data)?;
        if let Some(p) = checkpoint_path {
            checkpoint::save(p, &state, &hash)?;
        }
    }
    Ok(finish(exp, state, started.elapsed().as_secs_f64()))
}

/// Data, pretraining and the configured method for the configured seed.
pub fn run_pipeline(exp: &Experiment) -> Result<RunReport> {
    let cfg = &exp.config;
    let started = Instant::now();
    let data = prepare_data(cfg, cfg.seed)?;
    let pre = pretrain(cfg, &data, cfg.seed)?;
    let mut report = run_method(exp, &data, &pre, cfg.method, cfg.train.lambda, cfg.train.lr_scale, None)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
