//! Generates a drifting interaction log, shows how far user preferences move
//! per stage, then splits it into stage blocks and next-item pairs.

use peso_cl::data::{generate_drift, make_all_pairs, split_chronological, DriftSpec};

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn main() -> peso_cl::Result<()> {
    let mut spec = DriftSpec::with_total(20_000, 4, 0.7);
    spec.users = 300;
    spec.items = 96;
    spec.n_clusters = 8;
    let data = generate_drift(&spec)?;
    println!("{} interactions, {} users, {} items", data.log.len(), spec.users, spec.items);

    // mean L1 shift of the user mixtures between consecutive stages
    for t in 1..spec.n_stages() {
        let shift: f64 = data.mixtures.iter().map(|m| l1(&m[t], &m[t - 1])).sum::<f64>() / spec.users as f64;
        println!("stage {} → {}: mean mixture shift {shift:.3} (α = {})", t, t + 1, spec.alpha[t]);
    }

    let inputs = split_chronological(&data.log, spec.n_stages(), 0.6)?;
    for b in make_all_pairs(&inputs) {
        println!(
            "block {}: {} train, {} val, {} test pairs",
            b.stage_index,
            b.pairs.len(),
            b.val_pairs.len(),
            b.test_pairs.len()
        );
    }
    Ok(())
}
