//! Closed-form proximal minimizer on a small quadratic, checked two ways:
//! along the generalized eigenbasis of (Σ, H), and against iterative descent.

use peso_cl::linalg::Matrix;
use peso_cl::proximal::ProximalMetric;
use peso_cl::theory::{
    closed_form_min, descent_vs_closed_form, stationarity_residual, tangent_sigma, verify_interpolation,
    QuadraticRisk,
};

fn main() -> peso_cl::Result<()> {
    // two tangent features in three dimensions: Σ is rank 2
    let sigma = tangent_sigma(&[vec![1.0, 0.5, 0.0], vec![0.0, 1.0, -1.0]])?;
    let risk = QuadraticRisk::new(sigma, vec![1.0, -2.0, 0.5])?;
    let h = Matrix::from_rows(&[&[2.0, 0.3, 0.0], &[0.3, 1.0, 0.0], &[0.0, 0.0, 0.5]]);
    let v_prev = [0.2, 0.1, -0.4];

    for lambda in [0.1, 1.0, 10.0] {
        let metric = ProximalMetric::new(vec![("w".into(), h.clone())], lambda)?;
        let v = closed_form_min(&risk, &metric, &v_prev)?;
        let rep = verify_interpolation(&risk, &metric, &v_prev, &v)?;
        println!("λ = {lambda}: v = {v:.4?}");
        for p in &rep.pairs {
            println!(
                "  ρ = {:>8.4}  new {:.3} old {:.3}  |lhs − rhs| = {:.1e}",
                p.rho, p.coeff_new, p.coeff_old, p.abs_err
            );
        }
        let descent = descent_vs_closed_form(&risk, &metric, &v_prev)?;
        println!(
            "  stationarity {:.1e}, descent agrees to {:.1e} after {} steps",
            stationarity_residual(&risk, &metric, &v_prev, &v),
            descent.deviation,
            descent.iterations
        );
    }
    Ok(())
}
