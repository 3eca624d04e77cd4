//! Experiment configuration, read from and written to TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Policy, SdMagnitudeInit, StackOptions, LORA_INIT_STD};
use crate::data::DriftSpec;
use crate::decode::DEFAULT_BEAM_WIDTH;
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::proximal::RegularizerKind;

/// A method of the comparison matrix.
///
/// Written as `pretrain_only`, a policy name such as `sum_all_inherit`, or
/// `peso:<regularizer>` to pin the PESO regularizer regardless of the
/// `[train]` section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodId {
    PretrainOnly,
    Adapter {
        policy: Policy,
        regularizer: Option<RegularizerKind>,
    },
}

impl MethodId {
    pub fn policy(policy: Policy) -> Self {
        MethodId::Adapter {
            policy,
            regularizer: None,
        }
    }

    pub fn peso(kind: RegularizerKind) -> Self {
        MethodId::Adapter {
            policy: Policy::Peso,
            regularizer: Some(kind),
        }
    }

    /// `pretrain_only` followed by the fourteen adapter policies.
    pub fn matrix() -> Vec<MethodId> {
        std::iter::once(MethodId::PretrainOnly)
            .chain(Policy::all().into_iter().map(MethodId::policy))
            .collect()
    }

    /// PESO once per regularizer kind.
    pub fn peso_variants() -> Vec<MethodId> {
        RegularizerKind::ALL.iter().map(|&k| MethodId::peso(k)).collect()
    }

    pub fn adapter_policy(&self) -> Option<Policy> {
        match self {
            MethodId::PretrainOnly => None,
            MethodId::Adapter { policy, .. } => Some(*policy),
        }
    }

    /// Whether λ changes anything for this method.
    pub fn is_regularized(&self) -> bool {
        self.adapter_policy() == Some(Policy::Peso)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodId::PretrainOnly => write!(f, "pretrain_only"),
            MethodId::Adapter {
                policy,
                regularizer: None,
            } => write!(f, "{policy}"),
            MethodId::Adapter {
                policy,
                regularizer: Some(k),
            } => write!(f, "{policy}:{k}"),
        }
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pretrain_only" {
            return Ok(MethodId::PretrainOnly);
        }
        match s.split_once(':') {
            None => Ok(MethodId::policy(s.parse()?)),
            Some(("peso", reg)) => Ok(MethodId::peso(reg.parse()?)),
            Some(_) => Err(Error::Config(format!(
                "only peso takes a regularizer suffix, got `{s}`"
            ))),
        }
    }
}

impl TryFrom<String> for MethodId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodId> for String {
    fn from(m: MethodId) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Chronological,
    UserDisjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub split: SplitKind,
    /// Defaults to the drift spec's stage count, else 5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_stages: Option<usize>,
    #[serde(default = "default_pretrain_frac")]
    pub pretrain_frac: f64,
    /// Relative block-size tolerance for the user-disjoint split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disjoint_tolerance: Option<f64>,
    /// Interaction CSV (`user_id,item_id,timestamp`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftSpec>,
    /// Add the run seed to the drift seed, so every seed sees its own data.
    #[serde(default = "yes")]
    pub reseed_per_run: bool,
}

fn default_pretrain_frac() -> f64 {
    0.6
}

fn yes() -> bool {
    true
}

impl DataConfig {
    pub fn stages(&self) -> usize {
        self.n_stages
            .or_else(|| self.drift.as_ref().map(DriftSpec::n_stages))
            .unwrap_or(5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub rank: usize,
    pub code_len: usize,
    pub codebook_size: usize,
    pub sd_magnitude_init: SdMagnitudeInit,
    pub trim_latest_storage: bool,
    /// Standard deviation of fresh LoRA `A` factors.
    pub lora_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            rank: 4,
            code_len: 4,
            codebook_size: 16,
            sd_magnitude_init: SdMagnitudeInit::default(),
            trim_latest_storage: false,
            lora_init_std: LORA_INIT_STD,
        }
    }
}

impl ModelConfig {
    pub fn stack_options(&self) -> StackOptions {
        StackOptions {
            sd_magnitude_init: self.sd_magnitude_init,
            trim_latest_storage: self.trim_latest_storage,
            init_std: self.lora_init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Init std of the stage-1 adapters; falls back to `model.lora_init_std`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora_init_std: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 0.5,
            epochs: 5,
            batch_size: 32,
            lora_init_std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTrainConfig {
    /// Base step; continual stages use `lr · lr_scale`.
    pub lr: f64,
    pub lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub regularizer: RegularizerKind,
}

impl Default for StageTrainConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        StageTrainConfig {
            lr: t.lr,
            lr_scale: t.lr_scale,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda: t.lambda,
            regularizer: t.regularizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam_width: usize,
    /// First stage included in cross-stage averages.
    pub average_from: usize,
    /// Last stage included; defaults to the final stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_to: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            beam_width: DEFAULT_BEAM_WIDTH,
            average_from: 2,
            average_to: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Empty means `[train].lambda` only.
    pub lambda_values: Vec<f64>,
    /// Empty means `[train].lr_scale` only.
    pub lr_scales: Vec<f64>,
    /// Empty means the top-level seed only.
    pub seeds: Vec<u64>,
    /// Empty means the top-level method only.
    pub methods: Vec<MethodId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: MethodId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: StageTrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_method() -> MethodId {
    MethodId::policy(Policy::Peso)
}

impl ExperimentConfig {
    /// A small drift setup that runs in seconds.
    pub fn quick(n_stages: usize) -> Self {
        let mut drift = DriftSpec::with_total(6000, n_stages, 0.7);
        drift.users = 200;
        drift.items = 64;
        drift.n_clusters = 8;
        ExperimentConfig {
            seed: 0,
            method: default_method(),
            out_dir: None,
            data: DataConfig {
                split: SplitKind::Chronological,
                n_stages: None,
                pretrain_frac: 0.6,
                disjoint_tolerance: None,
                csv: None,
                drift: Some(drift),
                reseed_per_run: true,
            },
            model: ModelConfig {
                d: 8,
                rank: 2,
                code_len: 3,
                codebook_size: 8,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 2,
                ..PretrainConfig::default()
            },
            train: StageTrainConfig {
                epochs: 1,
                ..StageTrainConfig::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file, returning it with its verbatim text.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        Ok((cfg, text))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn n_stages(&self) -> usize {
        self.data.stages()
    }

    /// Last stage of the averaging window.
    pub fn average_to(&self) -> usize {
        self.eval.average_to.unwrap_or(self.n_stages())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.csv, &d.drift) {
            (Some(_), Some(_)) => return Err(Error::Config("give either data.csv or data.drift, not both".into())),
            (None, None) => return Err(Error::Config("data needs a csv path or a drift spec".into())),
            (None, Some(spec)) => {
                spec.validate()?;
                if d.n_stages.is_some_and(|n| n != spec.n_stages()) {
                    return Err(Error::Config(format!(
                        "data.n_stages = {} but the drift spec has {} stages",
                        d.n_stages.unwrap_or_default(),
                        spec.n_stages()
                    )));
                }
            }
            (Some(_), None) => {}
        }
        let t = self.n_stages();
        if t < 2 {
            return Err(Error::Config("need at least two stages".into()));
        }
        if !(0.0 < d.pretrain_frac && d.pretrain_frac < 1.0) {
            return Err(Error::Config("pretrain_frac must lie in (0, 1)".into()));
        }
        if d.disjoint_tolerance.is_some_and(|x| !(x > 0.0)) {
            return Err(Error::Config("disjoint_tolerance must be positive".into()));
        }
        let m = &self.model;
        if m.d == 0 || m.rank == 0 || m.rank > m.d {
            return Err(Error::Config(format!("need 1 ≤ rank ≤ d, got rank {} and d {}", m.rank, m.d)));
        }
        if !(m.lora_init_std > 0.0 && m.lora_init_std.is_finite()) {
            return Err(Error::Config("lora_init_std must be positive".into()));
        }
        if let Some(s) = self.pretrain.lora_init_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("pretrain.lora_init_std must be positive".into()));
            }
        }
        if m.code_len == 0 || m.codebook_size == 0 {
            return Err(Error::Config("code_len and codebook_size must be positive".into()));
        }
        self.pretrain_config().validate()?;
        self.stage_config(Policy::SingleEvolving, self.train.lambda, self.train.lr_scale)
            .validate()?;
        let e = &self.eval;
        if e.ks.is_empty() || e.ks.iter().any(|&k| k == 0 || k > e.beam_width) {
            return Err(Error::Config(format!(
                "eval.ks must be nonempty with 1 ≤ k ≤ beam_width ({})",
                e.beam_width
            )));
        }
        let to = self.average_to();
        if !(1 <= e.average_from && e.average_from <= to && to <= t) {
            return Err(Error::Config(format!(
                "averaging window {}..={to} must lie inside 1..={t}",
                e.average_from
            )));
        }
        let s = &self.sweep;
        if s.lambda_values.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("sweep lambda values must be nonnegative".into()));
        }
        if s.lr_scales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config("sweep lr scales must be positive".into()));
        }
        Ok(())
    }

    /// Training settings of the shared first stage.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.pretrain.lr,
            lr_scale: 1.0,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lambda: 0.0,
            regularizer: self.train.regularizer,
            policy: Policy::SingleEvolving,
            seed: self.seed,
        }
    }

    /// Training settings of the continual stages.
    pub fn stage_config(&self, policy: Policy, lambda: f64, lr_scale: f64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            lr_scale,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lambda,
            regularizer: self.train.regularizer,
            policy,
            seed: self.seed,
        }
    }

    pub fn lambda_values(&self) -> Vec<f64> {
        if self.sweep.lambda_values.is_empty() {
            vec![self.train.lambda]
        } else {
            self.sweep.lambda_values.clone()
        }
    }

    pub fn lr_scales(&self) -> Vec<f64> {
        if self.sweep.lr_scales.is_empty() {
            vec![self.train.lr_scale]
        } else {
            self.sweep.lr_scales.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.sweep.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.sweep.seeds.clone()
        }
    }

    pub fn methods(&self) -> Vec<MethodId> {
        if self.sweep.methods.is_empty() {
            vec![self.method]
        } else {
            self.sweep.methods.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_has_fifteen_distinct_methods() {
        let m = MethodId::matrix();
        assert_eq!(m.len(), 15);
        let names: std::collections::BTreeSet<String> = m.iter().map(|x| x.to_string()).collect();
        assert_eq!(names.len(), 15);
        for x in &m {
            assert_eq!(&x.to_string().parse::<MethodId>().unwrap(), x);
        }
    }

    #[test]
    fn peso_suffix_parses() {
        for k in RegularizerKind::ALL {
            let id: MethodId = format!("peso:{k}").parse().unwrap();
            assert_eq!(id, MethodId::peso(k));
        }
        assert!("sum_all:l2".parse::<MethodId>().is_err());
        assert!("peso:nope".parse::<MethodId>().is_err());
        assert!("nope".parse::<MethodId>().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::quick(3);
        cfg.sweep.lambda_values = vec![0.5, 1.0, 2.0];
        cfg.sweep.methods = vec![MethodId::PretrainOnly, MethodId::peso(RegularizerKind::L2)];
        cfg.train.lr = 0.1 + 0.2;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let text = r#"
method = "single_evolving"
[data]
csv = "log.csv"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.n_stages(), 5);
        assert_eq!(cfg.eval.ks, vec![5, 10]);
        assert_eq!(cfg.average_to(), 5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("[data]\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n[data]\ncsv = \"x\"\n").is_err());
        let mut cfg = ExperimentConfig::quick(3);
        cfg.eval.ks = vec![50];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::quick(3);
        cfg.model.rank = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::quick(3);
        cfg.eval.average_to = Some(4);
        assert!(cfg.validate().is_err());
    }
}
