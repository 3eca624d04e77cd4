//! Pretrains once, then runs single evolving LoRA and PESO from the same
//! starting point and prints per-stage test NDCG@10 and adapter displacement.

use peso_cl::decode::Metric;
use peso_cl::harness::pipeline::{prepare_data, pretrain, run_method};
use peso_cl::harness::{Experiment, ExperimentConfig, MethodId};
use peso_cl::adapters::Policy;

fn main() -> peso_cl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::quick(4))?;
    let cfg = &exp.config;
    let data = prepare_data(cfg, cfg.seed)?;
    let pre = pretrain(cfg, &data, cfg.seed)?;
    println!(
        "pretrained on {} pairs, stage 1 NDCG@10 {:.4}",
        pre.report.n_train_pairs,
        pre.report.test.get(Metric::Ndcg, 10).unwrap_or(f64::NAN)
    );

    for (method, lambda) in [(MethodId::policy(Policy::SingleEvolving), 0.0), (MethodId::policy(Policy::Peso), 2.0)] {
        let r = run_method(&exp, &data, &pre, method, lambda, cfg.train.lr_scale, None)?;
        println!("\n{} (λ = {})", r.method, r.lambda);
        for s in &r.stages {
            println!(
                "  stage {}: NDCG@10 {:.4}  displacement {}",
                s.stage,
                s.test.get(Metric::Ndcg, 10).unwrap_or(f64::NAN),
                s.displacement.map_or("-".into(), |d| format!("{d:.4}"))
            );
        }
        println!("  average over stages {}..={}: {:.4}", r.average_from, r.average_to, r.average(Metric::Ndcg, 10).unwrap_or(f64::NAN));
    }
    Ok(())
}
