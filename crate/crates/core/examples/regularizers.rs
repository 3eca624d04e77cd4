//! Every anchoring regularizer on the same perturbed adapter pair, plus the
//! local behaviour of the softmax KL near its anchor.

use peso_cl::adapters::{pack_adapters, LoraAdapter};
use peso_cl::linalg::dot;
use peso_cl::proximal::{kl_local_hessian, softmax, variant_value_grad, RegularizerContext, RegularizerKind};
use peso_cl::proximal::softmax_kl_value;
use peso_cl::adapters::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> peso_cl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut previous = LoraAdapter::fresh_with_std("enc", 6, 6, 2, 0.3, &mut rng);
    for x in previous.b.as_mut_slice() {
        *x = rng.random_range(-0.3..0.3);
    }
    let mut current = previous.clone();
    for x in current.a.as_mut_slice().iter_mut().chain(current.b.as_mut_slice()) {
        *x += rng.random_range(-0.05..0.05);
    }
    let probes = vec![(0..8).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()];
    let (cur, prev) = ([current], [previous]);
    let ctx = RegularizerContext {
        lambda: 1.0,
        current: &cur,
        previous: Some(&prev),
        probes: Some(&probes),
    };
    for kind in RegularizerKind::ALL {
        let (value, grad) = variant_value_grad(kind, &ctx)?;
        println!("{:<22} value {value:.3e}  ‖grad‖ {:.3e}", kind.name(), grad.norm());
    }

    // near the anchor the KL is ½ δᵀ(diag(p) − ppᵀ)δ, i.e. half the p-weighted variance of δ
    let anchor = pack_adapters(&prev);
    let g = anchor.group(0).to_vec();
    let p = softmax(&g);
    let h = kl_local_hessian(&g);
    let delta: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = dot(&p, &delta);
    let var: f64 = p.iter().zip(&delta).map(|(pi, d)| pi * (d - mean).powi(2)).sum();
    println!("\nδᵀHδ = {:.6e}, Var_p(δ) = {var:.6e}", h.quad_form(&delta, &delta));
    for eps in [1e-1, 1e-2, 1e-3] {
        let moved: Vec<f64> = g.iter().zip(&delta).map(|(x, d)| x + eps * d).collect();
        let a = ParamVector::new(vec![("g".into(), moved)])?;
        let b = ParamVector::new(vec![("g".into(), g.clone())])?;
        let kl = softmax_kl_value(&a, &b, 1.0)?;
        let quad = 0.5 * eps * eps * var;
        println!("ε = {eps:.0e}: KL {kl:.4e}, quadratic {quad:.4e}, ratio {:.5}", kl / quad);
    }
    Ok(())
}
