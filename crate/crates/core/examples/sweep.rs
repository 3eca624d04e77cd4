//! A small λ × method × seed grid, the validation-selected table, and the
//! CSV outputs a full benchmark run writes.

use peso_cl::adapters::Policy;
use peso_cl::decode::Metric;
use peso_cl::harness::report::{best_lambda, format_method_table, method_table, write_sweep};
use peso_cl::harness::sweep::run_sweep;
use peso_cl::harness::{Experiment, ExperimentConfig, MethodId};

fn main() -> peso_cl::Result<()> {
    let mut cfg = ExperimentConfig::quick(3);
    cfg.sweep.lambda_values = vec![0.5, 2.0, 8.0];
    cfg.sweep.seeds = vec![0, 1];
    cfg.sweep.methods = vec![
        MethodId::PretrainOnly,
        MethodId::policy(Policy::SingleEvolving),
        MethodId::policy(Policy::Peso),
    ];
    let result = run_sweep(&Experiment::new(cfg)?, 1)?;

    for b in best_lambda(&result, Metric::Ndcg, 10) {
        println!("{}: best λ {} (val {:.4}, test {:.4} ± {:.4})", b.method, b.lambda, b.val_mean, b.test_mean, b.test_std);
    }
    println!();
    print!("{}", format_method_table(&method_table(&result, (Metric::Ndcg, 10)), Metric::Ndcg, 10));

    let dir = std::env::temp_dir().join("peso_cl_sweep_example");
    for p in write_sweep(&result, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
