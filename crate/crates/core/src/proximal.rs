//! Penalties anchoring the live adapter to the previous stage's adapter.
//!
//! The main one is the blockwise softmax-KL proximal
//!
//! ```text
//! K(v_t, v_prev) = λ Σ_g KL( softmax(v_t^(g)) ‖ softmax(v_prev^(g)) )
//! ```
//!
//! whose local metric around `v_prev` is `diag(p) − p pᵀ` per group. The
//! remaining kinds (L2, per-rank KL, LoRA-output KL, orthogonality) are the
//! alternatives it is compared against. λ is applied inside every value and
//! gradient returned from this module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{pack_adapters, LoraAdapter, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix};

/// Cap on the probe batch used by the LoRA-output KL.
pub const MAX_OUTPUT_PROBES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    L2,
    SoftmaxKlPerModule,
    SoftmaxKlPerRank,
    LoraOutputKl,
    Orthogonality,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 5] = [
        RegularizerKind::L2,
        RegularizerKind::SoftmaxKlPerModule,
        RegularizerKind::SoftmaxKlPerRank,
        RegularizerKind::LoraOutputKl,
        RegularizerKind::Orthogonality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RegularizerKind::L2 => "l2",
            RegularizerKind::SoftmaxKlPerModule => "softmax_kl_per_module",
            RegularizerKind::SoftmaxKlPerRank => "softmax_kl_per_rank",
            RegularizerKind::LoraOutputKl => "lora_output_kl",
            RegularizerKind::Orthogonality => "orthogonality",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularizer `{s}`")))
    }
}

/// Block-diagonal PSD metric with a scalar weight.
#[derive(Debug, Clone)]
pub struct ProximalMetric {
    pub blocks: Vec<(String, Matrix)>,
    pub lambda: f64,
}

impl ProximalMetric {
    pub fn new(blocks: Vec<(String, Matrix)>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::pre(format!("lambda must be >= 0, got {lambda}")));
        }
        for (id, h) in &blocks {
            if !h.is_symmetric(1e-12) {
                return Err(Error::pre(format!("metric block `{id}` is not symmetric")));
            }
            let min = sym_eig(h)?.values.last().copied().unwrap_or(0.0);
            if min < -1e-10 {
                return Err(Error::pre(format!(
                    "metric block `{id}` is not PSD (min eigenvalue {min:e})"
                )));
            }
        }
        Ok(ProximalMetric { blocks, lambda })
    }

    /// `H = I` on every group.
    pub fn identity(layout_of: &ParamVector, lambda: f64) -> Self {
        let blocks = layout_of
            .groups()
            .map(|(id, g)| (id.to_string(), Matrix::identity(g.len())))
            .collect();
        ProximalMetric { blocks, lambda }
    }

    /// Local metric of the softmax-KL proximal at `v_prev`.
    pub fn softmax_kl(v_prev: &ParamVector, lambda: f64) -> Self {
        let blocks = v_prev
            .groups()
            .map(|(id, g)| (id.to_string(), kl_local_hessian(g)))
            .collect();
        ProximalMetric { blocks, lambda }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|(_, h)| h.rows()).sum()
    }

    pub fn dense(&self) -> Matrix {
        let blocks: Vec<Matrix> = self.blocks.iter().map(|(_, h)| h.clone()).collect();
        Matrix::block_diag(&blocks)
    }

    /// Checks the blocks line up with the groups of `v`.
    pub fn matches(&self, v: &ParamVector) -> bool {
        self.blocks.len() == v.num_groups()
            && self
                .blocks
                .iter()
                .zip(v.layout())
                .all(|((id, h), g)| *id == g.id && h.rows() == g.len)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(x) ‖ softmax(y))` and its gradient with respect to `x`.
pub(crate) fn kl_logits(x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let log_q = log_softmax(x);
    let log_p = log_softmax(y);
    let q: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
    let u: Vec<f64> = log_q.iter().zip(&log_p).map(|(a, b)| a - b).collect();
    let value: f64 = q.iter().zip(&u).map(|(qi, ui)| qi * ui).sum();
    let mean_u = value;
    let grad = q.iter().zip(&u).map(|(qi, ui)| qi * (ui - mean_u)).collect();
    (value.max(0.0), grad)
}

fn check_same(v_t: &ParamVector, v_prev: &ParamVector) -> Result<()> {
    if !v_t.same_structure(v_prev) {
        return Err(Error::pre("parameter vectors have different group structure"));
    }
    Ok(())
}

/// `λ Σ_g KL(softmax(v_t^(g)) ‖ softmax(v_prev^(g)))`
pub fn softmax_kl_value(v_t: &ParamVector, v_prev: &ParamVector, lambda: f64) -> Result<f64> {
    check_same(v_t, v_prev)?;
    let mut total = 0.0;
    for g in 0..v_t.num_groups() {
        total += kl_logits(v_t.group(g), v_prev.group(g)).0;
    }
    Ok(lambda * total)
}

/// Per group: `λ q_i (u_i − Σ_j q_j u_j)` with `q = softmax(v_t)`, `u = log q − log p`.
pub fn softmax_kl_grad(v_t: &ParamVector, v_prev: &ParamVector, lambda: f64) -> Result<ParamVector> {
    check_same(v_t, v_prev)?;
    let mut grad = v_t.zeros_like();
    for g in 0..v_t.num_groups() {
        let (_, gr) = kl_logits(v_t.group(g), v_prev.group(g));
        for (o, x) in grad.group_mut(g).iter_mut().zip(gr) {
            *o = lambda * x;
        }
    }
    Ok(grad)
}

/// `diag(p) − p pᵀ` with `p = softmax(v_prev_group)`.
pub fn kl_local_hessian(v_prev_group: &[f64]) -> Matrix {
    let p = softmax(v_prev_group);
    let n = p.len();
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = -p[i] * p[j];
        }
        h[(i, i)] += p[i];
    }
    h
}

/// `(λ/2) ‖v_t − v_prev‖²` and `λ (v_t − v_prev)`.
pub fn l2_value_grad(v_t: &ParamVector, v_prev: &ParamVector, lambda: f64) -> Result<(f64, ParamVector)> {
    check_same(v_t, v_prev)?;
    let mut grad = v_t.zeros_like();
    let mut sq = 0.0;
    for ((o, a), b) in grad.values_mut().iter_mut().zip(v_t.values()).zip(v_prev.values()) {
        let d = a - b;
        sq += d * d;
        *o = lambda * d;
    }
    Ok((0.5 * lambda * sq, grad))
}

/// Inputs of the non-parametric variants.
#[derive(Debug, Clone, Copy)]
pub struct RegularizerContext<'a> {
    pub lambda: f64,
    /// Live adapters being trained, one per site.
    pub current: &'a [LoraAdapter],
    /// Adapters at the end of the previous stage, same order.
    pub previous: Option<&'a [LoraAdapter]>,
    /// Site inputs (one list per site) for the output-space KL.
    pub probes: Option<&'a [Vec<Vec<f64>>]>,
}

/// Value and gradient (in the [`pack_adapters`] layout of `current`) of any regularizer kind.
pub fn variant_value_grad(kind: RegularizerKind, ctx: &RegularizerContext<'_>) -> Result<(f64, ParamVector)> {
    let previous = ctx
        .previous
        .ok_or_else(|| Error::pre(format!("regularizer {kind} needs the previous adapters")))?;
    if previous.len() != ctx.current.len()
        || previous
            .iter()
            .zip(ctx.current)
            .any(|(p, c)| p.a.shape() != c.a.shape() || p.b.shape() != c.b.shape())
    {
        return Err(Error::pre("previous adapters do not match the current sites"));
    }
    let v_t = pack_adapters(ctx.current);
    let v_prev = pack_adapters(previous);
    match kind {
        RegularizerKind::L2 => l2_value_grad(&v_t, &v_prev, ctx.lambda),
        RegularizerKind::SoftmaxKlPerModule => {
            let value = softmax_kl_value(&v_t, &v_prev, ctx.lambda)?;
            let grad = softmax_kl_grad(&v_t, &v_prev, ctx.lambda)?;
            Ok((value, grad))
        }
        RegularizerKind::SoftmaxKlPerRank => per_rank_kl(ctx.current, previous, ctx.lambda, v_t),
        RegularizerKind::LoraOutputKl => {
            let probes = ctx
                .probes
                .ok_or_else(|| Error::pre("lora_output_kl needs probe inputs"))?;
            if probes.len() != ctx.current.len() {
                return Err(Error::pre("lora_output_kl needs one probe list per site"));
            }
            output_kl(ctx.current, previous, probes, ctx.lambda, v_t)
        }
        RegularizerKind::Orthogonality => orthogonality(ctx.current, previous, ctx.lambda, v_t),
    }
}

/// Regroups a site's factors as one group per `A` row and per `B` column.
pub fn per_rank_groups(adapter: &LoraAdapter) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..adapter.rank()).map(|k| adapter.a.row(k).to_vec()).collect();
    out.extend((0..adapter.rank()).map(|k| adapter.b.col(k)));
    out
}

fn per_rank_kl(
    current: &[LoraAdapter],
    previous: &[LoraAdapter],
    lambda: f64,
    mut grad: ParamVector,
) -> Result<(f64, ParamVector)> {
    grad.values_mut().iter_mut().for_each(|x| *x = 0.0);
    let mut value = 0.0;
    for (s, (cur, prev)) in current.iter().zip(previous).enumerate() {
        let r = cur.rank();
        let d_out = cur.d_out();
        let cur_groups = per_rank_groups(cur);
        let prev_groups = per_rank_groups(prev);
        let a_group = 2 * s;
        for (k, (x, y)) in cur_groups.iter().zip(&prev_groups).enumerate() {
            let (v, g) = kl_logits(x, y);
            value += v;
            if k < r {
                let row = &mut grad.group_mut(a_group)[k * cur.d_in()..(k + 1) * cur.d_in()];
                for (o, gi) in row.iter_mut().zip(g) {
                    *o = lambda * gi;
                }
            } else {
                let col = k - r;
                let bg = grad.group_mut(a_group + 1);
                for (row, gi) in g.into_iter().enumerate().take(d_out) {
                    bg[row * r + col] = lambda * gi;
                }
            }
        }
    }
    Ok((lambda * value, grad))
}

fn output_kl(
    current: &[LoraAdapter],
    previous: &[LoraAdapter],
    probes: &[Vec<Vec<f64>>],
    lambda: f64,
    mut grad: ParamVector,
) -> Result<(f64, ParamVector)> {
    grad.values_mut().iter_mut().for_each(|x| *x = 0.0);
    let mut value = 0.0;
    for (s, ((cur, prev), xs)) in current.iter().zip(previous).zip(probes).enumerate() {
        let xs = &xs[..xs.len().min(MAX_OUTPUT_PROBES)];
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        let r = cur.rank();
        let mut ga = Matrix::zeros(r, cur.d_in());
        let mut gb = Matrix::zeros(cur.d_out(), r);
        for x in xs {
            if x.len() != cur.d_in() {
                return Err(Error::pre("probe dimension does not match site input"));
            }
            let ax = cur.a.matvec(x);
            let y_cur = cur.b.matvec(&ax);
            let y_prev = prev.b.matvec(&prev.a.matvec(x));
            let (v, gy) = kl_logits(&y_cur, &y_prev);
            value += v / n;
            for i in 0..cur.d_out() {
                for k in 0..r {
                    gb[(i, k)] += gy[i] * ax[k] / n;
                }
            }
            let bt_gy = cur.b.matvec_t(&gy);
            for k in 0..r {
                for j in 0..cur.d_in() {
                    ga[(k, j)] += bt_gy[k] * x[j] / n;
                }
            }
        }
        for (o, g) in grad.group_mut(2 * s).iter_mut().zip(ga.as_slice()) {
            *o = lambda * g;
        }
        for (o, g) in grad.group_mut(2 * s + 1).iter_mut().zip(gb.as_slice()) {
            *o = lambda * g;
        }
    }
    Ok((lambda * value, grad))
}

fn orthogonality(
    current: &[LoraAdapter],
    previous: &[LoraAdapter],
    lambda: f64,
    mut grad: ParamVector,
) -> Result<(f64, ParamVector)> {
    let mut value = 0.0;
    for (s, (cur, prev)) in current.iter().zip(previous).enumerate() {
        // ‖A_t A_pᵀ‖² and ‖B_tᵀ B_p‖²
        let aa = cur.a.matmul(&prev.a.transpose());
        let bb = cur.b.transpose().matmul(&prev.b);
        value += aa.frobenius_norm().powi(2) + bb.frobenius_norm().powi(2);
        let ga = aa.matmul(&prev.a).scale(2.0 * lambda);
        let gb = prev.b.matmul(&bb.transpose()).scale(2.0 * lambda);
        grad.group_mut(2 * s).copy_from_slice(ga.as_slice());
        grad.group_mut(2 * s + 1).copy_from_slice(gb.as_slice());
    }
    Ok((lambda * value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(groups: &[&[f64]]) -> ParamVector {
        ParamVector::new(
            groups
                .iter()
                .enumerate()
                .map(|(i, g)| (format!("g{i}"), g.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    fn random_pv(rng: &mut ChaCha8Rng, sizes: &[usize], scale: f64) -> ParamVector {
        ParamVector::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| (format!("g{i}"), (0..n).map(|_| rng.random_range(-scale..scale)).collect()))
                .collect(),
        )
        .unwrap()
    }

    fn random_adapter(rng: &mut ChaCha8Rng, site: &str, d_in: usize, d_out: usize, r: usize) -> LoraAdapter {
        let a = Matrix::from_vec(r, d_in, (0..r * d_in).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(d_out, r, (0..r * d_out).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        LoraAdapter::new(site, a, b).unwrap()
    }

    /// Central differences of `f` over every coordinate of the packed current adapters.
    fn fd_adapters(
        current: &[LoraAdapter],
        step: f64,
        f: &dyn Fn(&[LoraAdapter]) -> f64,
    ) -> Vec<f64> {
        let base = pack_adapters(current);
        let mut out = Vec::with_capacity(base.total_dim());
        for i in 0..base.total_dim() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v.values_mut()[i] += delta;
                let mut adapters = current.to_vec();
                let mut g = 0;
                for ad in adapters.iter_mut() {
                    ad.a.as_mut_slice().copy_from_slice(v.group(g));
                    ad.b.as_mut_slice().copy_from_slice(v.group(g + 1));
                    g += 2;
                }
                f(&adapters)
            };
            out.push((eval(step) - eval(-step)) / (2.0 * step));
        }
        out
    }

    #[test]
    fn kl_zero_for_identical_vectors() {
        let v = pv(&[&[0.3, -1.0, 2.0], &[1.0]]);
        assert_eq!(softmax_kl_value(&v, &v, 3.0).unwrap(), 0.0);
        assert!(softmax_kl_grad(&v, &v, 3.0).unwrap().values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_two_logit_value() {
        // 40-digit reference for KL(softmax(1,0) ‖ (1/2, 1/2))
        let v = softmax_kl_value(&pv(&[&[1.0, 0.0]]), &pv(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert!((v - 0.110_944_071_671_727_35).abs() < 1e-15, "{v}");
    }

    #[test]
    fn kl_shift_invariant() {
        let v_prev = pv(&[&[0.1, 0.7, -0.2]]);
        let v = pv(&[&[1.0, -0.5, 0.25]]);
        let shifted = pv(&[&[4.0, 2.5, 3.25]]);
        let a = softmax_kl_value(&v, &v_prev, 1.0).unwrap();
        let b = softmax_kl_value(&shifted, &v_prev, 1.0).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn kl_rejects_mismatched_groups() {
        let a = pv(&[&[0.0, 1.0]]);
        let b = pv(&[&[0.0], &[1.0]]);
        assert!(matches!(softmax_kl_value(&a, &b, 1.0), Err(Error::Precondition(_))));
        assert!(softmax_kl_grad(&a, &b, 1.0).is_err());
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let v_prev = random_pv(&mut rng, &[8, 8], 2.0);
            let v = random_pv(&mut rng, &[8, 8], 2.0);
            let lambda = 1.7;
            let g = softmax_kl_grad(&v, &v_prev, lambda).unwrap();
            let h = 1e-6;
            for i in 0..v.total_dim() {
                let mut plus = v.clone();
                plus.values_mut()[i] += h;
                let mut minus = v.clone();
                minus.values_mut()[i] -= h;
                let fd = (softmax_kl_value(&plus, &v_prev, lambda).unwrap()
                    - softmax_kl_value(&minus, &v_prev, lambda).unwrap())
                    / (2.0 * h);
                assert!((fd - g.values()[i]).abs() < 1e-7, "coord {i}: fd {fd} vs {}", g.values()[i]);
            }
            for gi in 0..g.num_groups() {
                assert!(g.group(gi).iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn local_hessian_examples() {
        let h = kl_local_hessian(&[0.0, 0.0]);
        assert_eq!(h, Matrix::from_rows(&[&[0.25, -0.25], &[-0.25, 0.25]]));
        let h = kl_local_hessian(&[0.3, -1.2, 2.0, 0.0]);
        assert!(h.matvec(&[1.0; 4]).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn local_hessian_matches_second_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let v_prev = pv(&[&base]);
        let h = kl_local_hessian(&base);
        let step = 1e-4;
        let f = |d: &[f64]| {
            let v: Vec<f64> = base.iter().zip(d).map(|(a, b)| a + b).collect();
            softmax_kl_value(&pv(&[&v]), &v_prev, 1.0).unwrap()
        };
        for a in 0..n {
            for b in 0..n {
                let mut e = vec![0.0; n];
                let mut val = 0.0;
                for (sa, sb, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    e.iter_mut().for_each(|x| *x = 0.0);
                    e[a] += sa * step;
                    e[b] += sb * step;
                    val += sign * f(&e);
                }
                let fd = val / (4.0 * step * step);
                assert!((fd - h[(a, b)]).abs() < 1e-5, "({a},{b}): {fd} vs {}", h[(a, b)]);
            }
        }
    }

    #[test]
    fn l2_examples() {
        let v = pv(&[&[1.0, 2.0]]);
        let (val, g) = l2_value_grad(&v, &v, 2.0).unwrap();
        assert_eq!(val, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
        let (val, g) = l2_value_grad(&pv(&[&[2.0, 2.0]]), &v, 2.0).unwrap();
        assert_eq!(val, 1.0);
        assert_eq!(g.values(), &[2.0, 0.0]);
    }

    #[test]
    fn l2_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v_prev = random_pv(&mut rng, &[5, 3], 1.0);
        let v = random_pv(&mut rng, &[5, 3], 1.0);
        let (_, g) = l2_value_grad(&v, &v_prev, 0.7).unwrap();
        for i in 0..v.total_dim() {
            let h = 1e-5;
            let mut p = v.clone();
            p.values_mut()[i] += h;
            let mut m = v.clone();
            m.values_mut()[i] -= h;
            let fd = (l2_value_grad(&p, &v_prev, 0.7).unwrap().0 - l2_value_grad(&m, &v_prev, 0.7).unwrap().0) / (2.0 * h);
            assert!((fd - g.values()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn orthogonality_zero_without_past_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cur = vec![random_adapter(&mut rng, "enc", 3, 3, 2)];
        let prev = vec![LoraAdapter::zeros("enc", 3, 3, 2)];
        let ctx = RegularizerContext {
            lambda: 1.0,
            current: &cur,
            previous: Some(&prev),
            probes: None,
        };
        let (v, g) = variant_value_grad(RegularizerKind::Orthogonality, &ctx).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn per_rank_on_rank_one_equals_per_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cur = vec![random_adapter(&mut rng, "enc", 4, 3, 1), random_adapter(&mut rng, "dec", 3, 3, 1)];
        let prev = vec![random_adapter(&mut rng, "enc", 4, 3, 1), random_adapter(&mut rng, "dec", 3, 3, 1)];
        let ctx = RegularizerContext {
            lambda: 0.8,
            current: &cur,
            previous: Some(&prev),
            probes: None,
        };
        let (a, ga) = variant_value_grad(RegularizerKind::SoftmaxKlPerRank, &ctx).unwrap();
        let (b, gb) = variant_value_grad(RegularizerKind::SoftmaxKlPerModule, &ctx).unwrap();
        assert!((a - b).abs() < 1e-14);
        for (x, y) in ga.values().iter().zip(gb.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn output_kl_zero_for_identical_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cur = vec![random_adapter(&mut rng, "enc", 4, 3, 2)];
        let probes = vec![(0..10).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()];
        let ctx = RegularizerContext {
            lambda: 2.0,
            current: &cur,
            previous: Some(&cur),
            probes: Some(&probes),
        };
        let (v, g) = variant_value_grad(RegularizerKind::LoraOutputKl, &ctx).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn variants_need_context() {
        let cur = vec![LoraAdapter::zeros("enc", 2, 2, 1)];
        let ctx = RegularizerContext {
            lambda: 1.0,
            current: &cur,
            previous: None,
            probes: None,
        };
        assert!(matches!(variant_value_grad(RegularizerKind::L2, &ctx), Err(Error::Precondition(_))));
        let ctx = RegularizerContext {
            previous: Some(&cur),
            ..ctx
        };
        assert!(matches!(variant_value_grad(RegularizerKind::LoraOutputKl, &ctx), Err(Error::Precondition(_))));
    }

    #[test]
    fn every_variant_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cur = vec![random_adapter(&mut rng, "enc", 4, 3, 2), random_adapter(&mut rng, "dec", 3, 3, 2)];
        let prev = vec![random_adapter(&mut rng, "enc", 4, 3, 2), random_adapter(&mut rng, "dec", 3, 3, 2)];
        let probes: Vec<Vec<Vec<f64>>> = [4, 3]
            .iter()
            .map(|&d| (0..7).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        for kind in RegularizerKind::ALL {
            let ctx = RegularizerContext {
                lambda: 1.3,
                current: &cur,
                previous: Some(&prev),
                probes: Some(&probes),
            };
            let (value, grad) = variant_value_grad(kind, &ctx).unwrap();
            assert!(value >= 0.0);
            let fd = fd_adapters(&cur, 1e-6, &|ads| {
                let c = RegularizerContext { current: ads, ..ctx };
                variant_value_grad(kind, &c).unwrap().0
            });
            for (i, (f, g)) in fd.iter().zip(grad.values()).enumerate() {
                let rel = (f - g).abs() / f.abs().max(g.abs()).max(1e-3);
                assert!(rel < 1e-6, "{kind} coord {i}: fd {f} vs {g}");
            }
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 6),
                          b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let v = ParamVector::new(vec![("x".into(), a[..3].to_vec()), ("y".into(), a[3..].to_vec())]).unwrap();
            let w = ParamVector::new(vec![("x".into(), b[..3].to_vec()), ("y".into(), b[3..].to_vec())]).unwrap();
            prop_assert!(softmax_kl_value(&v, &w, 1.0).unwrap() >= 0.0);
        }

        #[test]
        fn variance_identity(logits in proptest::collection::vec(-4.0f64..4.0, 1..12),
                             seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delta: Vec<f64> = logits.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = softmax(&logits);
            let h = kl_local_hessian(&logits);
            let quad = h.quad_form(&delta, &delta);
            let mu: f64 = p.iter().zip(&delta).map(|(a, b)| a * b).sum();
            let var: f64 = p.iter().zip(&delta).map(|(pi, di)| pi * (di - mu).powi(2)).sum();
            prop_assert!((quad - var).abs() < 1e-12);
        }
    }
}
