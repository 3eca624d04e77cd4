//! Low-rank adapter algebra.
//!
//! A [`LoraAdapter`] is the factor pair `(A, B)` whose product `B·A` is added
//! to one base matrix (a *site*). An [`AdapterStack`] holds the live adapter
//! of a site together with the sealed history of earlier stages and knows how
//! to compose them under each [`Policy`]:
//!
//! ```text
//! single_evolving, peso:   ΔW = B_t A_t
//! cumulative families:      ΔW = Σ_i α_i B̂_i Â_i + B_t A_t   (i over all or only the latest)
//! ```
//!
//! Sealed factors are stored as unit-Frobenius directions `Â = A/‖A‖_F`,
//! `B̂ = B/‖B‖_F`. [`ParamVector`] is the flat, grouped view of all live
//! factors that the proximal regularizers operate on.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix};

/// Standard deviation of the Gaussian used for fresh `A` factors.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub site_id: String,
    /// `rank x d_in`
    pub a: Matrix,
    /// `d_out x rank`
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn new(site_id: impl Into<String>, a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank {
            return Err(Error::pre(format!(
                "adapter factors disagree on rank: A is {:?}, B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if rank > a.cols().min(b.rows()) {
            return Err(Error::pre(format!(
                "rank {rank} exceeds min(d_in, d_out) = {}",
                a.cols().min(b.rows())
            )));
        }
        Ok(LoraAdapter {
            site_id: site_id.into(),
            a,
            b,
        })
    }

    /// Standard start: `A ~ N(0, 0.02²)` entrywise, `B = 0`.
    pub fn fresh<R: Rng + ?Sized>(
        site_id: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        Self::fresh_with_std(site_id, d_in, d_out, rank, LORA_INIT_STD, rng)
    }

    /// `A ~ N(0, std²)` entrywise, `B = 0`.
    pub fn fresh_with_std<R: Rng + ?Sized>(
        site_id: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("valid normal");
        let data = (0..rank * d_in).map(|_| normal.sample(rng)).collect();
        LoraAdapter {
            site_id: site_id.into(),
            a: Matrix::from_vec(rank, d_in, data).expect("finite"),
            b: Matrix::zeros(d_out, rank),
        }
    }

    pub fn zeros(site_id: impl Into<String>, d_in: usize, d_out: usize, rank: usize) -> Self {
        LoraAdapter {
            site_id: site_id.into(),
            a: Matrix::zeros(rank, d_in),
            b: Matrix::zeros(d_out, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `B·A`, shape `d_out x d_in`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a)
    }

    fn same_shape(&self, other: &LoraAdapter) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Sum,
    Sd,
    Inf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    All,
    Latest,
}

/// How the live adapter is combined with sealed history across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    SingleEvolving,
    Peso,
    Cumulative {
        family: Family,
        scope: Scope,
        inherit: bool,
    },
}

impl Policy {
    /// All fourteen composition policies.
    pub fn all() -> Vec<Policy> {
        let mut out = vec![Policy::SingleEvolving];
        for family in [Family::Sum, Family::Sd, Family::Inf] {
            for scope in [Scope::All, Scope::Latest] {
                for inherit in [false, true] {
                    out.push(Policy::Cumulative {
                        family,
                        scope,
                        inherit,
                    });
                }
            }
        }
        out.push(Policy::Peso);
        out
    }

    pub fn family(&self) -> Option<Family> {
        match self {
            Policy::Cumulative { family, .. } => Some(*family),
            _ => None,
        }
    }

    pub fn is_cumulative(&self) -> bool {
        matches!(self, Policy::Cumulative { .. })
    }

    pub fn inherits(&self) -> bool {
        match self {
            Policy::SingleEvolving | Policy::Peso => true,
            Policy::Cumulative { inherit, .. } => *inherit,
        }
    }

    pub fn has_trainable_magnitudes(&self) -> bool {
        self.family() == Some(Family::Sd)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::SingleEvolving => write!(f, "single_evolving"),
            Policy::Peso => write!(f, "peso"),
            Policy::Cumulative {
                family,
                scope,
                inherit,
            } => {
                let fam = match family {
                    Family::Sum => "sum",
                    Family::Sd => "sd",
                    Family::Inf => "inf",
                };
                let sc = match scope {
                    Scope::All => "all",
                    Scope::Latest => "latest",
                };
                write!(f, "{fam}_{sc}")?;
                if *inherit {
                    write!(f, "_inherit")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::all()
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter policy `{s}`")))
    }
}

/// Starting magnitude given to a newly sealed SD adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SdMagnitudeInit {
    /// α = 1.0.
    #[default]
    Unit,
    /// α = ‖A‖_F·‖B‖_F, so sealing does not change the function.
    FunctionPreserving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackOptions {
    #[serde(default)]
    pub sd_magnitude_init: SdMagnitudeInit,
    /// Drop all but the last sealed entry under `latest` policies.
    #[serde(default)]
    pub trim_latest_storage: bool,
    /// Standard deviation of fresh `A` factors.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    LORA_INIT_STD
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            sd_magnitude_init: SdMagnitudeInit::default(),
            trim_latest_storage: false,
            init_std: LORA_INIT_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenAdapter {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    pub alpha: f64,
}

impl FrozenAdapter {
    /// `B̂·Â`
    pub fn direction(&self) -> Matrix {
        self.b_hat.matmul(&self.a_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    pub site_id: String,
    pub policy: Policy,
    pub frozen: Vec<FrozenAdapter>,
    pub live: LoraAdapter,
    /// `false` while an InfLoRA stage keeps the projected `A` fixed.
    pub a_trainable: bool,
    pub options: StackOptions,
}

impl AdapterStack {
    pub fn new(policy: Policy, live: LoraAdapter, options: StackOptions) -> Self {
        AdapterStack {
            site_id: live.site_id.clone(),
            policy,
            frozen: Vec::new(),
            live,
            a_trainable: true,
            options,
        }
    }

    /// Indices of the sealed entries that enter the effective update.
    pub fn active_frozen(&self) -> std::ops::Range<usize> {
        let n = self.frozen.len();
        match self.policy {
            Policy::SingleEvolving | Policy::Peso => 0..0,
            Policy::Cumulative { scope: Scope::All, .. } => 0..n,
            Policy::Cumulative {
                scope: Scope::Latest,
                ..
            } => n.saturating_sub(1)..n,
        }
    }

    /// Effective low-rank update of the site under the stack's policy.
    pub fn effective_delta(&self) -> Result<Matrix> {
        let mut delta = self.live.delta();
        for i in self.active_frozen() {
            let f = &self.frozen[i];
            let dir = f.direction();
            if dir.shape() != delta.shape() {
                return Err(Error::pre(format!(
                    "frozen entry {i} of site {} has shape {:?}, live delta {:?}",
                    self.site_id,
                    dir.shape(),
                    delta.shape()
                )));
            }
            delta.add_scaled(f.alpha, &dir);
        }
        Ok(delta)
    }

    fn sealed_magnitude(&self, a_norm: f64, b_norm: f64) -> f64 {
        match (self.policy.family(), self.options.sd_magnitude_init) {
            (Some(Family::Sd), SdMagnitudeInit::Unit) => 1.0,
            _ => a_norm * b_norm,
        }
    }

    /// Closes a stage: records `trained` in the history (cumulative families)
    /// and prepares the live adapter of the next stage.
    pub fn seal_stage<R: Rng + ?Sized>(
        &self,
        trained: &LoraAdapter,
        inherit: bool,
        rng: &mut R,
    ) -> Result<AdapterStack> {
        if !trained.same_shape(&self.live) {
            return Err(Error::pre(format!(
                "trained adapter shapes A {:?} B {:?} do not match site {} (A {:?} B {:?})",
                trained.a.shape(),
                trained.b.shape(),
                self.site_id,
                self.live.a.shape(),
                self.live.b.shape()
            )));
        }
        let mut next = self.clone();
        if self.policy.is_cumulative() {
            let a_norm = trained.a.frobenius_norm();
            let b_norm = trained.b.frobenius_norm();
            if a_norm == 0.0 {
                return Err(Error::Normalization {
                    what: format!("A factor of site {}", self.site_id),
                });
            }
            if b_norm == 0.0 {
                return Err(Error::Normalization {
                    what: format!("B factor of site {}", self.site_id),
                });
            }
            next.frozen.push(FrozenAdapter {
                a_hat: trained.a.scale(1.0 / a_norm),
                b_hat: trained.b.scale(1.0 / b_norm),
                alpha: self.sealed_magnitude(a_norm, b_norm),
            });
            if self.options.trim_latest_storage
                && matches!(self.policy, Policy::Cumulative { scope: Scope::Latest, .. })
            {
                let keep = next.frozen.len() - 1;
                next.frozen.drain(..keep);
            }
        }
        next.live = if inherit {
            trained.clone()
        } else {
            LoraAdapter::fresh_with_std(
                self.site_id.clone(),
                trained.d_in(),
                trained.d_out(),
                trained.rank(),
                self.options.init_std,
                rng,
            )
        };
        next.a_trainable = true;
        Ok(next)
    }

    /// Magnitudes of the active sealed entries (the SD-trainable ones).
    pub fn active_magnitudes(&self) -> Vec<f64> {
        self.active_frozen().map(|i| self.frozen[i].alpha).collect()
    }

    pub fn set_active_magnitudes(&mut self, alphas: &[f64]) -> Result<()> {
        let range = self.active_frozen();
        if range.len() != alphas.len() {
            return Err(Error::pre(format!(
                "site {} has {} active magnitudes, got {}",
                self.site_id,
                range.len(),
                alphas.len()
            )));
        }
        for (i, &a) in range.zip(alphas) {
            self.frozen[i].alpha = a;
        }
        Ok(())
    }
}

/// InfLoRA start: rows of `A` are the top-`rank` eigenvectors of the empirical
/// input covariance `(1/n) Σ x xᵀ`, `B = 0`.
pub fn inflora_init(
    site_id: impl Into<String>,
    inputs: &[Vec<f64>],
    rank: usize,
    d_out: usize,
) -> Result<LoraAdapter> {
    if inputs.len() < rank {
        return Err(Error::pre(format!(
            "InfLoRA needs at least {rank} inputs, got {}",
            inputs.len()
        )));
    }
    let d_in = inputs.first().map_or(0, |x| x.len());
    if rank > d_in.min(d_out) {
        return Err(Error::pre(format!("rank {rank} exceeds site dimensions")));
    }
    let mut cov = Matrix::zeros(d_in, d_in);
    for x in inputs {
        if x.len() != d_in {
            return Err(Error::pre("InfLoRA inputs have unequal dimensions"));
        }
        for i in 0..d_in {
            if x[i] == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for (c, &xj) in row.iter_mut().zip(x) {
                *c += x[i] * xj;
            }
        }
    }
    let n = inputs.len() as f64;
    let cov = cov.scale(1.0 / n);
    let eig = sym_eig(&cov)?;
    let mut a = Matrix::zeros(rank, d_in);
    for k in 0..rank {
        a.row_mut(k).copy_from_slice(&eig.vector(k));
    }
    LoraAdapter::new(site_id, a, Matrix::zeros(d_out, rank))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: String,
    pub len: usize,
}

/// Flat parameter vector partitioned into named, contiguous groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Vec<GroupSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(groups: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut layout = Vec::with_capacity(groups.len());
        let mut values = Vec::new();
        for (id, v) in groups {
            if layout.iter().any(|g: &GroupSpec| g.id == id) {
                return Err(Error::pre(format!("duplicate group id `{id}`")));
            }
            layout.push(GroupSpec { id, len: v.len() });
            values.extend(v);
        }
        Ok(ParamVector { layout, values })
    }

    pub fn from_layout(layout: Vec<GroupSpec>, values: Vec<f64>) -> Result<Self> {
        let m: usize = layout.iter().map(|g| g.len).sum();
        if m != values.len() {
            return Err(Error::pre(format!(
                "layout covers {m} coordinates, got {}",
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn layout(&self) -> &[GroupSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn num_groups(&self) -> usize {
        self.layout.len()
    }

    pub fn same_structure(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        let start: usize = self.layout[..g].iter().map(|s| s.len).sum();
        start..start + self.layout[g].len
    }

    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[self.group_range(g)]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [f64] {
        let r = self.group_range(g);
        &mut self.values[r]
    }

    pub fn group_index(&self, id: &str) -> Option<usize> {
        self.layout.iter().position(|g| g.id == id)
    }

    pub fn group_by_id(&self, id: &str) -> Option<&[f64]> {
        self.group_index(id).map(|g| self.group(g))
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[f64])> {
        let mut start = 0;
        self.layout.iter().map(move |g| {
            let s = &self.values[start..start + g.len];
            start += g.len;
            (g.id.as_str(), s)
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn factor_group_id(site_id: &str, factor: char) -> String {
    format!("{site_id}.{factor}")
}

/// Live factors of every stack: groups `site.A`, `site.B` in stack order.
pub fn pack(stacks: &[AdapterStack]) -> ParamVector {
    let live: Vec<&LoraAdapter> = stacks.iter().map(|s| &s.live).collect();
    pack_refs(&live)
}

/// Same layout as [`pack`] for bare adapters.
pub fn pack_adapters(adapters: &[LoraAdapter]) -> ParamVector {
    let refs: Vec<&LoraAdapter> = adapters.iter().collect();
    pack_refs(&refs)
}

fn pack_refs(adapters: &[&LoraAdapter]) -> ParamVector {
    let mut layout = Vec::with_capacity(2 * adapters.len());
    let mut values = Vec::new();
    for ad in adapters {
        for (factor, m) in [('A', &ad.a), ('B', &ad.b)] {
            layout.push(GroupSpec {
                id: factor_group_id(&ad.site_id, factor),
                len: m.as_slice().len(),
            });
            values.extend_from_slice(m.as_slice());
        }
    }
    ParamVector { layout, values }
}

/// Rebuilds live adapters from `v` using the shapes of `template`.
pub fn unpack(v: &ParamVector, template: &[AdapterStack]) -> Result<Vec<LoraAdapter>> {
    let expected = pack(template);
    if !v.same_structure(&expected) {
        return Err(Error::pre(format!(
            "parameter vector layout {:?} does not match adapter template {:?}",
            v.layout, expected.layout
        )));
    }
    let mut out = Vec::with_capacity(template.len());
    let mut g = 0;
    for s in template {
        let (ar, ac) = s.live.a.shape();
        let (br, bc) = s.live.b.shape();
        let a = Matrix::from_vec(ar, ac, v.group(g).to_vec())?;
        let b = Matrix::from_vec(br, bc, v.group(g + 1).to_vec())?;
        g += 2;
        out.push(LoraAdapter::new(s.site_id.clone(), a, b)?);
    }
    Ok(out)
}

/// Writes `v` into the live adapters of `stacks`.
pub fn write_live(stacks: &mut [AdapterStack], v: &ParamVector) -> Result<()> {
    let adapters = unpack(v, stacks)?;
    for (s, a) in stacks.iter_mut().zip(adapters) {
        s.live = a;
    }
    Ok(())
}
