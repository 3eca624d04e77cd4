//! Desk-scale next-item scorer with two LoRA sites.
//!
//! Items are fixed-length codes `(t_0, …, t_{L-1})` with a position-specific
//! codebook of size `K_j` at each position. The scorer is
//!
//! ```text
//! h       = mean of token embeddings over the last 20 history items
//! s_0     = tanh((W_enc + ΔW_enc) h)
//! z_j     = W_out_j s_j                                   j = 0..L-1
//! s_{j+1} = tanh((W_dec + ΔW_dec)(s_j + embed[t_j]))      teacher forcing
//! ```
//!
//! and the loss is the per-position cross-entropy summed over positions and
//! averaged over the batch. Gradients are a hand-written reverse sweep.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{
    factor_group_id, inflora_init, AdapterStack, Family, LoraAdapter, ParamVector, Policy, StackOptions,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::proximal::{log_softmax, variant_value_grad, RegularizerContext, RegularizerKind, MAX_OUTPUT_PROBES};

/// Number of most recent history items the scorer looks at.
pub const HISTORY_WINDOW: usize = 20;

pub const SITE_ENC: &str = "enc";
pub const SITE_DEC: &str = "dec";

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemCode {
    pub tokens: Vec<usize>,
}

impl ItemCode {
    pub fn new(tokens: Vec<usize>, codebook_sizes: &[usize]) -> Result<Self> {
        if tokens.len() != codebook_sizes.len() {
            return Err(Error::pre(format!(
                "code has {} tokens, expected {}",
                tokens.len(),
                codebook_sizes.len()
            )));
        }
        if let Some(j) = tokens.iter().zip(codebook_sizes).position(|(t, k)| t >= k) {
            return Err(Error::pre(format!(
                "token {} at position {j} outside codebook of size {}",
                tokens[j], codebook_sizes[j]
            )));
        }
        Ok(ItemCode { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Frozen item → code table, indexed by dense item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeBook {
    pub codebook_sizes: Vec<usize>,
    pub codes: Vec<ItemCode>,
}

impl CodeBook {
    pub fn new(codebook_sizes: Vec<usize>, codes: Vec<ItemCode>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(codes.len());
        for (item, c) in codes.iter().enumerate() {
            ItemCode::new(c.tokens.clone(), &codebook_sizes)?;
            if !seen.insert(&c.tokens) {
                return Err(Error::pre(format!("item {item} repeats an existing code")));
            }
        }
        Ok(CodeBook { codebook_sizes, codes })
    }

    pub fn num_items(&self) -> usize {
        self.codes.len()
    }

    pub fn code(&self, item: usize) -> &ItemCode {
        &self.codes[item]
    }
}

/// One `(history, next item)` example; ids index a [`CodeBook`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecModel {
    pub d: usize,
    pub codebook_sizes: Vec<usize>,
    /// `V x d`, rows ordered by position then token.
    pub embed: Matrix,
    pub w_enc: Matrix,
    pub w_dec: Matrix,
    /// `K_j x d` per position.
    pub w_out: Vec<Matrix>,
}

/// Which parameters a stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainScope {
    /// Base weights and live adapters (pretraining).
    Full,
    /// Live adapter factors and, for SD policies, the active magnitudes.
    Adapters,
}

impl ToyRecModel {
    pub fn new<R: Rng + ?Sized>(d: usize, codebook_sizes: Vec<usize>, rng: &mut R) -> Result<Self> {
        let mut m = ToyRecModel::zeros(d, codebook_sizes)?;
        let emb = Normal::new(0.0, 0.5).expect("valid normal");
        let lin = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        m.embed.as_mut_slice().iter_mut().for_each(|x| *x = emb.sample(rng));
        m.w_enc.as_mut_slice().iter_mut().for_each(|x| *x = lin.sample(rng));
        m.w_dec.as_mut_slice().iter_mut().for_each(|x| *x = lin.sample(rng));
        for w in &mut m.w_out {
            w.as_mut_slice().iter_mut().for_each(|x| *x = lin.sample(rng));
        }
        Ok(m)
    }

    pub fn zeros(d: usize, codebook_sizes: Vec<usize>) -> Result<Self> {
        if d == 0 || codebook_sizes.is_empty() || codebook_sizes.contains(&0) {
            return Err(Error::pre("model needs d > 0 and nonempty codebooks"));
        }
        let v: usize = codebook_sizes.iter().sum();
        Ok(ToyRecModel {
            d,
            embed: Matrix::zeros(v, d),
            w_enc: Matrix::zeros(d, d),
            w_dec: Matrix::zeros(d, d),
            w_out: codebook_sizes.iter().map(|&k| Matrix::zeros(k, d)).collect(),
            codebook_sizes,
        })
    }

    pub fn code_len(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    /// Row of `embed` holding token `tok` at position `pos`.
    pub fn token_row(&self, pos: usize, tok: usize) -> usize {
        self.codebook_sizes[..pos].iter().sum::<usize>() + tok
    }

    /// One fresh stack per site (`enc`, `dec`) under `policy`.
    pub fn fresh_stacks<R: Rng + ?Sized>(
        &self,
        policy: Policy,
        rank: usize,
        options: StackOptions,
        rng: &mut R,
    ) -> Result<Vec<AdapterStack>> {
        if rank == 0 || rank > self.d {
            return Err(Error::pre(format!("rank {rank} must lie in 1..={}", self.d)));
        }
        Ok([SITE_ENC, SITE_DEC]
            .iter()
            .map(|site| AdapterStack::new(
                    policy,
                    LoraAdapter::fresh_with_std(*site, self.d, self.d, rank, options.init_std, rng),
                    options,
                ))
            .collect())
    }

    fn check_stacks(&self, stacks: &[AdapterStack]) -> Result<()> {
        if stacks.len() != 2 || stacks[0].site_id != SITE_ENC || stacks[1].site_id != SITE_DEC {
            return Err(Error::pre("expected adapter stacks for sites [enc, dec]"));
        }
        for s in stacks {
            if s.live.d_in() != self.d || s.live.d_out() != self.d {
                return Err(Error::pre(format!("site {} adapter does not match d = {}", s.site_id, self.d)));
            }
        }
        Ok(())
    }

    /// Base weights with the stacks' effective updates folded in.
    pub fn effective<'m>(&'m self, stacks: &[AdapterStack]) -> Result<Effective<'m>> {
        self.check_stacks(stacks)?;
        Ok(Effective {
            model: self,
            m_enc: self.w_enc.add(&stacks[0].effective_delta()?),
            m_dec: self.w_dec.add(&stacks[1].effective_delta()?),
        })
    }
}

/// A model ready for inference: `W + ΔW` precomputed for both sites.
#[derive(Debug, Clone)]
pub struct Effective<'m> {
    pub model: &'m ToyRecModel,
    pub m_enc: Matrix,
    pub m_dec: Matrix,
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

impl Effective<'_> {
    /// Mean token embedding of the last [`HISTORY_WINDOW`] items.
    pub fn encode(&self, history: &[&ItemCode]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::pre("history must be nonempty"));
        }
        let m = self.model;
        let window = &history[history.len().saturating_sub(HISTORY_WINDOW)..];
        let mut h = vec![0.0; m.d];
        let mut n = 0usize;
        for code in window {
            if code.len() != m.code_len() {
                return Err(Error::pre("history code length does not match the model"));
            }
            for (pos, &tok) in code.tokens.iter().enumerate() {
                for (hi, e) in h.iter_mut().zip(m.embed.row(m.token_row(pos, tok))) {
                    *hi += e;
                }
                n += 1;
            }
        }
        let inv = 1.0 / n as f64;
        h.iter_mut().for_each(|x| *x *= inv);
        Ok(h)
    }

    pub fn initial_state(&self, h: &[f64]) -> Vec<f64> {
        let mut s = self.m_enc.matvec(h);
        tanh_in_place(&mut s);
        s
    }

    pub fn logits(&self, pos: usize, s: &[f64]) -> Vec<f64> {
        self.model.w_out[pos].matvec(s)
    }

    /// Input of the decoder site after emitting `tok` at `pos`.
    pub fn decoder_input(&self, pos: usize, tok: usize, s: &[f64]) -> Vec<f64> {
        let e = self.model.embed.row(self.model.token_row(pos, tok));
        s.iter().zip(e).map(|(a, b)| a + b).collect()
    }

    pub fn advance(&self, pos: usize, tok: usize, s: &[f64]) -> Vec<f64> {
        let mut next = self.m_dec.matvec(&self.decoder_input(pos, tok, s));
        tanh_in_place(&mut next);
        next
    }

    /// Teacher-forced logits at every position.
    pub fn forward(&self, history: &[&ItemCode], target: &ItemCode) -> Result<Vec<Vec<f64>>> {
        let l = self.model.code_len();
        if target.len() != l {
            return Err(Error::pre("target code length does not match the model"));
        }
        let mut s = self.initial_state(&self.encode(history)?);
        let mut out = Vec::with_capacity(l);
        for pos in 0..l {
            out.push(self.logits(pos, &s));
            if pos + 1 < l {
                s = self.advance(pos, target.tokens[pos], &s);
            }
        }
        Ok(out)
    }

    /// Site inputs seen while scoring `pair` (one `h` for `enc`, `L-1` vectors for `dec`).
    pub fn site_inputs(&self, codebook: &CodeBook, pair: &Pair) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let hist: Vec<&ItemCode> = pair.history.iter().map(|&i| codebook.code(i)).collect();
        let h = self.encode(&hist)?;
        let target = codebook.code(pair.target);
        let mut s = self.initial_state(&h);
        let mut dec = Vec::with_capacity(self.model.code_len().saturating_sub(1));
        for pos in 0..self.model.code_len() - 1 {
            let u = self.decoder_input(pos, target.tokens[pos], &s);
            s = self.m_dec.matvec(&u);
            tanh_in_place(&mut s);
            dec.push(u);
        }
        Ok((h, dec))
    }
}

/// Teacher-forced per-position logits of `target` given `history`.
pub fn forward(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    history: &[ItemCode],
    target: &ItemCode,
) -> Result<Vec<Vec<f64>>> {
    let eff = model.effective(stacks)?;
    let hist: Vec<&ItemCode> = history.iter().collect();
    eff.forward(&hist, target)
}

/// Gradients with respect to the effective site matrices and base weights.
#[derive(Debug, Clone)]
struct RawGrads {
    d_enc: Matrix,
    d_dec: Matrix,
    d_embed: Option<Matrix>,
    d_out: Option<Vec<Matrix>>,
}

/// Mean cross-entropy over `batch` and its gradients.
fn ce_raw(eff: &Effective<'_>, codebook: &CodeBook, pairs: &[Pair], batch: &[usize], full: bool) -> Result<(f64, RawGrads)> {
    let m = eff.model;
    let d = m.d;
    let l = m.code_len();
    let mut g = RawGrads {
        d_enc: Matrix::zeros(d, d),
        d_dec: Matrix::zeros(d, d),
        d_embed: full.then(|| Matrix::zeros(m.vocab(), d)),
        d_out: full.then(|| m.codebook_sizes.iter().map(|&k| Matrix::zeros(k, d)).collect()),
    };
    if batch.is_empty() {
        return Err(Error::pre("empty batch"));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut dec_inputs: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut dz: Vec<Vec<f64>> = Vec::with_capacity(l);
    for &idx in batch {
        let pair = &pairs[idx];
        let hist: Vec<&ItemCode> = pair.history.iter().map(|&i| codebook.code(i)).collect();
        let target = codebook.code(pair.target);
        let h = eff.encode(&hist)?;
        states.clear();
        dec_inputs.clear();
        dz.clear();
        states.push(eff.initial_state(&h));
        let mut loss = 0.0;
        for pos in 0..l {
            let z = eff.logits(pos, &states[pos]);
            let lp = log_softmax(&z);
            let t = target.tokens[pos];
            loss -= lp[t];
            let mut dzp: Vec<f64> = lp.iter().map(|x| x.exp() * inv_b).collect();
            dzp[t] -= inv_b;
            dz.push(dzp);
            if pos + 1 < l {
                let u = eff.decoder_input(pos, t, &states[pos]);
                let mut s = eff.m_dec.matvec(&u);
                tanh_in_place(&mut s);
                dec_inputs.push(u);
                states.push(s);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NanLoss { index: idx });
        }
        total += loss;

        // reverse sweep
        let mut ds = vec![0.0; d];
        for pos in (0..l).rev() {
            let w = &m.w_out[pos];
            let wt_dz = w.matvec_t(&dz[pos]);
            for (a, b) in ds.iter_mut().zip(&wt_dz) {
                *a += b;
            }
            if let Some(dout) = g.d_out.as_mut() {
                let s = &states[pos];
                for (k, &dzk) in dz[pos].iter().enumerate() {
                    for (o, sv) in dout[pos].row_mut(k).iter_mut().zip(s) {
                        *o += dzk * sv;
                    }
                }
            }
            let s = &states[pos];
            let da: Vec<f64> = ds.iter().zip(s).map(|(g, sv)| g * (1.0 - sv * sv)).collect();
            if pos == 0 {
                for (i, &dai) in da.iter().enumerate() {
                    for (o, hv) in g.d_enc.row_mut(i).iter_mut().zip(&h) {
                        *o += dai * hv;
                    }
                }
                if let Some(demb) = g.d_embed.as_mut() {
                    let dh = eff.m_enc.matvec_t(&da);
                    let window = &hist[hist.len().saturating_sub(HISTORY_WINDOW)..];
                    let inv_n = 1.0 / (window.len() * l) as f64;
                    for code in window {
                        for (p, &tok) in code.tokens.iter().enumerate() {
                            for (o, x) in demb.row_mut(m.token_row(p, tok)).iter_mut().zip(&dh) {
                                *o += x * inv_n;
                            }
                        }
                    }
                }
            } else {
                let u = &dec_inputs[pos - 1];
                for (i, &dai) in da.iter().enumerate() {
                    for (o, uv) in g.d_dec.row_mut(i).iter_mut().zip(u) {
                        *o += dai * uv;
                    }
                }
                let du = eff.m_dec.matvec_t(&da);
                if let Some(demb) = g.d_embed.as_mut() {
                    let row = m.token_row(pos - 1, target.tokens[pos - 1]);
                    for (o, x) in demb.row_mut(row).iter_mut().zip(&du) {
                        *o += x;
                    }
                }
                ds = du;
            }
        }
    }
    Ok((total * inv_b, g))
}

fn alpha_group_id(site: &str) -> String {
    format!("{site}.alpha")
}

/// Current values of the parameters `scope` trains.
///
/// Group order: base weights (`embed`, `w_enc`, `w_dec`, `w_out.j`, full
/// scope only), then per site `site.A` (unless frozen), `site.B` and, for SD
/// policies with active history, `site.alpha`.
pub fn trainable_vector(model: &ToyRecModel, stacks: &[AdapterStack], scope: TrainScope) -> Result<ParamVector> {
    model.check_stacks(stacks)?;
    let mut groups = Vec::new();
    if scope == TrainScope::Full {
        groups.push(("embed".to_string(), model.embed.as_slice().to_vec()));
        groups.push(("w_enc".to_string(), model.w_enc.as_slice().to_vec()));
        groups.push(("w_dec".to_string(), model.w_dec.as_slice().to_vec()));
        for (j, w) in model.w_out.iter().enumerate() {
            groups.push((format!("w_out.{j}"), w.as_slice().to_vec()));
        }
    }
    for s in stacks {
        if s.a_trainable {
            groups.push((factor_group_id(&s.site_id, 'A'), s.live.a.as_slice().to_vec()));
        }
        groups.push((factor_group_id(&s.site_id, 'B'), s.live.b.as_slice().to_vec()));
        if scope == TrainScope::Adapters && s.policy.has_trainable_magnitudes() && !s.active_frozen().is_empty() {
            groups.push((alpha_group_id(&s.site_id), s.active_magnitudes()));
        }
    }
    ParamVector::new(groups)
}

/// Writes `v` (in the [`trainable_vector`] layout) back into model and stacks.
pub fn set_trainable(model: &mut ToyRecModel, stacks: &mut [AdapterStack], v: &ParamVector) -> Result<()> {
    for (id, vals) in v.groups() {
        let copy = |m: &mut Matrix| -> Result<()> {
            if m.as_slice().len() != vals.len() {
                return Err(Error::pre(format!("group {id} has the wrong length")));
            }
            m.as_mut_slice().copy_from_slice(vals);
            Ok(())
        };
        match id {
            "embed" => copy(&mut model.embed)?,
            "w_enc" => copy(&mut model.w_enc)?,
            "w_dec" => copy(&mut model.w_dec)?,
            _ => {
                if let Some(j) = id.strip_prefix("w_out.") {
                    let j: usize = j.parse().map_err(|_| Error::pre(format!("bad group id {id}")))?;
                    let w = model
                        .w_out
                        .get_mut(j)
                        .ok_or_else(|| Error::pre(format!("no output head {j}")))?;
                    copy(w)?;
                    continue;
                }
                let (site, part) = id
                    .rsplit_once('.')
                    .ok_or_else(|| Error::pre(format!("bad group id {id}")))?;
                let stack = stacks
                    .iter_mut()
                    .find(|s| s.site_id == site)
                    .ok_or_else(|| Error::pre(format!("no site {site}")))?;
                match part {
                    "A" => copy(&mut stack.live.a)?,
                    "B" => copy(&mut stack.live.b)?,
                    "alpha" => stack.set_active_magnitudes(vals)?,
                    _ => return Err(Error::pre(format!("bad group id {id}"))),
                }
            }
        }
    }
    Ok(())
}

/// `∂L/∂α_i = ⟨∂L/∂ΔW, B̂_i Â_i⟩_F` for every active sealed entry of every stack.
pub fn sd_magnitude_grad(stacks: &[AdapterStack], upstream: &[Matrix]) -> Result<Vec<Vec<f64>>> {
    if stacks.len() != upstream.len() {
        return Err(Error::pre("one upstream gradient per site is required"));
    }
    stacks
        .iter()
        .zip(upstream)
        .map(|(s, g)| {
            if !s.policy.has_trainable_magnitudes() {
                return Err(Error::pre(format!("policy {} has no trainable magnitudes", s.policy)));
            }
            s.active_frozen()
                .map(|i| {
                    let dir = s.frozen[i].direction();
                    if dir.shape() != g.shape() {
                        return Err(Error::pre("upstream gradient shape does not match the site"));
                    }
                    Ok(g.frobenius_dot(&dir))
                })
                .collect()
        })
        .collect()
}

/// Proximal term of a stage: kind, strength and anchor.
#[derive(Debug, Clone, Copy)]
pub struct Regularizer<'a> {
    pub kind: RegularizerKind,
    pub lambda: f64,
    /// Live adapters at the end of the previous stage.
    pub previous: Option<&'a [LoraAdapter]>,
    /// Per-site input probes (output-space KL only).
    pub probes: Option<&'a [Vec<Vec<f64>>]>,
}

impl Regularizer<'_> {
    pub fn none() -> Regularizer<'static> {
        Regularizer {
            kind: RegularizerKind::SoftmaxKlPerModule,
            lambda: 0.0,
            previous: None,
            probes: None,
        }
    }

    fn active(&self) -> bool {
        self.lambda > 0.0 && self.previous.is_some()
    }
}

fn raw_to_trainable(
    raw: &RawGrads,
    stacks: &[AdapterStack],
    scope: TrainScope,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut groups = Vec::new();
    if scope == TrainScope::Full {
        let de = raw.d_embed.as_ref().ok_or_else(|| Error::pre("missing base gradients"))?;
        groups.push(("embed".to_string(), de.as_slice().to_vec()));
        groups.push(("w_enc".to_string(), raw.d_enc.as_slice().to_vec()));
        groups.push(("w_dec".to_string(), raw.d_dec.as_slice().to_vec()));
        for (j, w) in raw.d_out.as_ref().into_iter().flatten().enumerate() {
            groups.push((format!("w_out.{j}"), w.as_slice().to_vec()));
        }
    }
    for (s, g) in stacks.iter().zip([&raw.d_enc, &raw.d_dec]) {
        if s.a_trainable {
            // dA = Bᵀ G
            let da = s.live.b.transpose().matmul(g);
            groups.push((factor_group_id(&s.site_id, 'A'), da.into_vec()));
        }
        // dB = G Aᵀ
        let db = g.matmul(&s.live.a.transpose());
        groups.push((factor_group_id(&s.site_id, 'B'), db.into_vec()));
        if scope == TrainScope::Adapters && s.policy.has_trainable_magnitudes() && !s.active_frozen().is_empty() {
            let da = sd_magnitude_grad(std::slice::from_ref(s), std::slice::from_ref(g))?;
            groups.push((alpha_group_id(&s.site_id), da.into_iter().next().unwrap_or_default()));
        }
    }
    Ok(groups)
}

fn regularizer_value_grad(stacks: &[AdapterStack], reg: &Regularizer<'_>) -> Result<(f64, ParamVector)> {
    let current: Vec<LoraAdapter> = stacks.iter().map(|s| s.live.clone()).collect();
    variant_value_grad(
        reg.kind,
        &RegularizerContext {
            lambda: reg.lambda,
            current: &current,
            previous: reg.previous,
            probes: reg.probes,
        },
    )
}

fn add_by_id(target: &mut ParamVector, other: &ParamVector) {
    for (id, vals) in other.groups() {
        if let Some(g) = target.group_index(id) {
            for (t, v) in target.group_mut(g).iter_mut().zip(vals) {
                *t += v;
            }
        }
    }
}

/// Cross-entropy of `pairs[batch]` plus the regularizer, with its gradient
/// over the trainable set of `scope`.
pub fn loss_and_grad(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    codebook: &CodeBook,
    pairs: &[Pair],
    batch: &[usize],
    scope: TrainScope,
    reg: &Regularizer<'_>,
) -> Result<(f64, ParamVector)> {
    let (ce, mut grad) = ce_loss_and_grad(model, stacks, codebook, pairs, batch, scope)?;
    if !reg.active() {
        return Ok((ce, grad));
    }
    let (value, rg) = regularizer_value_grad(stacks, reg)?;
    add_by_id(&mut grad, &rg);
    Ok((ce + value, grad))
}

fn ce_loss_and_grad(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    codebook: &CodeBook,
    pairs: &[Pair],
    batch: &[usize],
    scope: TrainScope,
) -> Result<(f64, ParamVector)> {
    let eff = model.effective(stacks)?;
    let (loss, raw) = ce_raw(&eff, codebook, pairs, batch, scope == TrainScope::Full)?;
    Ok((loss, ParamVector::new(raw_to_trainable(&raw, stacks, scope)?)?))
}

/// Mean teacher-forced cross-entropy over all of `pairs` (no gradient).
pub fn mean_loss(model: &ToyRecModel, stacks: &[AdapterStack], codebook: &CodeBook, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::pre("no pairs to score"));
    }
    let eff = model.effective(stacks)?;
    let mut total = 0.0;
    for (idx, p) in pairs.iter().enumerate() {
        let hist: Vec<&ItemCode> = p.history.iter().map(|&i| codebook.code(i)).collect();
        let target = codebook.code(p.target);
        let logits = eff.forward(&hist, target)?;
        let loss: f64 = logits
            .iter()
            .zip(&target.tokens)
            .map(|(z, &t)| -log_softmax(z)[t])
            .sum();
        if !loss.is_finite() {
            return Err(Error::NanLoss { index: idx });
        }
        total += loss;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Step multiplier for stages after the first.
    pub lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub regularizer: RegularizerKind,
    pub policy: Policy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            lr_scale: 0.1,
            epochs: 3,
            batch_size: 32,
            lambda: 0.0,
            regularizer: RegularizerKind::SoftmaxKlPerModule,
            policy: Policy::SingleEvolving,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale must be positive, got {}", self.lr_scale)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch objective (cross-entropy plus regularizer) over the epoch.
    pub train_loss: f64,
    /// Regularizer value at the end of the epoch.
    pub regularizer: f64,
    /// Teacher-forced cross-entropy on the validation pairs.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Stacks as trained, the state evaluated for this stage.
    pub trained: Vec<AdapterStack>,
    /// Stacks after sealing, ready to start the next stage.
    pub sealed: Vec<AdapterStack>,
    pub log: Vec<EpochLog>,
}

/// Site inputs of the first `MAX_OUTPUT_PROBES` training pairs, per site.
pub fn output_probes(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    codebook: &CodeBook,
    pairs: &[Pair],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let eff = model.effective(stacks)?;
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    for p in pairs {
        let (h, us) = eff.site_inputs(codebook, p)?;
        if enc.len() < MAX_OUTPUT_PROBES {
            enc.push(h);
        }
        for u in us {
            if dec.len() < MAX_OUTPUT_PROBES {
                dec.push(u);
            }
        }
        if enc.len() >= MAX_OUTPUT_PROBES && dec.len() >= MAX_OUTPUT_PROBES {
            break;
        }
    }
    Ok(vec![enc, dec])
}

fn inflora_restart(
    model: &ToyRecModel,
    stacks: &mut [AdapterStack],
    codebook: &CodeBook,
    pairs: &[Pair],
) -> Result<()> {
    let eff = model.effective(stacks)?;
    let mut enc = Vec::with_capacity(pairs.len());
    let mut dec = Vec::with_capacity(pairs.len() * model.code_len());
    for p in pairs {
        let (h, us) = eff.site_inputs(codebook, p)?;
        enc.push(h);
        dec.extend(us);
    }
    drop(eff);
    for (s, inputs) in stacks.iter_mut().zip([enc, dec]) {
        let rank = s.live.rank();
        let mut fresh = inflora_init(s.site_id.clone(), &inputs, rank, s.live.d_out())?;
        if s.policy.inherits() {
            fresh.b = s.live.b.clone();
        }
        s.live = fresh;
        s.a_trainable = false;
    }
    Ok(())
}

/// Trains one stage and seals the result.
///
/// `rng` drives minibatch shuffling and fresh adapters at the seal.
///
/// Stage 1 updates base weights and adapters with step `lr`; later stages
/// update only the trainable adapter set with step `lr · lr_scale`. The
/// regularizer is anchored at `v_prev` and skipped entirely when `λ = 0`. The
/// L2 term is applied through its exact proximal map so very large `λ` stays
/// stable; the other kinds enter the gradient.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut ToyRecModel,
    stacks: &[AdapterStack],
    codebook: &CodeBook,
    train: &[Pair],
    val: &[Pair],
    v_prev: Option<&[LoraAdapter]>,
    stage: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageOutcome> {
    config.validate()?;
    if stage == 0 {
        return Err(Error::pre("stage indices start at 1"));
    }
    model.check_stacks(stacks)?;
    if stacks.iter().any(|s| s.policy != config.policy) {
        return Err(Error::pre(format!("stacks do not follow policy {}", config.policy)));
    }
    if config.epochs == 0 {
        return Ok(StageOutcome {
            trained: stacks.to_vec(),
            sealed: stacks.to_vec(),
            log: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(Error::pre(format!("stage {stage} has no training pairs")));
    }
    let mut stacks = stacks.to_vec();
    let (scope, lr) = if stage == 1 {
        (TrainScope::Full, config.lr)
    } else {
        (TrainScope::Adapters, config.lr * config.lr_scale)
    };
    if stage > 1 && config.policy.family() == Some(Family::Inf) {
        inflora_restart(model, &mut stacks, codebook, train)?;
    }

    let use_reg = stage > 1 && config.lambda > 0.0;
    if use_reg && v_prev.is_none() {
        return Err(Error::pre("a regularized stage needs the previous adapters"));
    }
    let probes = if use_reg && config.regularizer == RegularizerKind::LoraOutputKl {
        Some(output_probes(model, &stacks, codebook, train)?)
    } else {
        None
    };
    let reg = Regularizer {
        kind: config.regularizer,
        lambda: if use_reg { config.lambda } else { 0.0 },
        previous: if use_reg { v_prev } else { None },
        probes: probes.as_deref(),
    };
    let l2_prox = reg.active() && reg.kind == RegularizerKind::L2;
    let prev_packed = reg.previous.map(crate::adapters::pack_adapters);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (mut loss, grad) = if l2_prox {
                ce_loss_and_grad(model, &stacks, codebook, train, batch, scope)?
            } else {
                loss_and_grad(model, &stacks, codebook, train, batch, scope, &reg)?
            };
            if l2_prox {
                loss += regularizer_value_grad(&stacks, &reg)?.0;
            }
            if loss.is_nan() {
                return Err(Error::NanLoss { index: batch[0] });
            }
            if !(loss <= DIVERGENCE_LOSS) {
                return Err(Error::Divergence { epoch, loss });
            }
            sum += loss;
            batches += 1;
            let mut v = trainable_vector(model, &stacks, scope)?;
            for (x, g) in v.values_mut().iter_mut().zip(grad.values()) {
                *x -= lr * g;
            }
            if let (true, Some(prev)) = (l2_prox, prev_packed.as_ref()) {
                // argmin_x ½‖x − y‖² + lr·(λ/2)‖x − v_prev‖²
                let c = lr * reg.lambda;
                for (id, p) in prev.groups() {
                    if let Some(g) = v.group_index(id) {
                        for (x, pv) in v.group_mut(g).iter_mut().zip(p) {
                            *x = (*x + c * pv) / (1.0 + c);
                        }
                    }
                }
            }
            set_trainable(model, &mut stacks, &v)?;
        }
        let regularizer = if reg.active() {
            regularizer_value_grad(&stacks, &reg)?.0
        } else {
            0.0
        };
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(model, &stacks, codebook, val)?)
        };
        log.push(EpochLog {
            epoch,
            train_loss: sum / batches as f64,
            regularizer,
            val_loss,
        });
    }

    let sealed = stacks
        .iter()
        .map(|s| s.seal_stage(&s.live, s.policy.inherits(), rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(StageOutcome {
        trained: stacks,
        sealed,
        log,
    })
}
