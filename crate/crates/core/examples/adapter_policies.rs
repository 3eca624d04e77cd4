//! How each composition policy turns three trained stages into one update.
//! Sealing normalizes the factors and stores the magnitude separately.

use peso_cl::adapters::{AdapterStack, LoraAdapter, Policy, StackOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> peso_cl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // stand-ins for what three stages of training would produce
    let trained: Vec<LoraAdapter> = (0..3)
        .map(|_| {
            let mut a = LoraAdapter::fresh_with_std("dec", 8, 8, 2, 0.5, &mut rng);
            a.b = LoraAdapter::fresh_with_std("dec", 8, 8, 2, 0.5, &mut rng).a.transpose();
            a
        })
        .collect();

    println!("{:<20} {:>7} {:>7} {:>12}", "policy", "sealed", "active", "‖ΔW‖_F");
    for policy in Policy::all() {
        let mut stack = AdapterStack::new(policy, trained[0].clone(), StackOptions::default());
        for t in &trained {
            stack.live = t.clone();
            stack = stack.seal_stage(t, policy.inherits(), &mut rng)?;
        }
        println!(
            "{:<20} {:>7} {:>7} {:>12.4}",
            policy.to_string(),
            stack.frozen.len(),
            stack.active_frozen().len(),
            stack.effective_delta()?.frobenius_norm()
        );
    }
    Ok(())
}
