//! Runs a method stage by stage, saving and reloading a checkpoint between
//! stages, and checks the result matches an uninterrupted run.

use peso_cl::harness::checkpoint;
use peso_cl::harness::pipeline::{prepare_data, pretrain, run_method, RunState};
use peso_cl::harness::{Experiment, ExperimentConfig, MethodId};

fn main() -> peso_cl::Result<()> {
    let exp = Experiment::new(ExperimentConfig::quick(4))?;
    let cfg = &exp.config;
    let hash = cfg.hash()?;
    let data = prepare_data(cfg, cfg.seed)?;
    let pre = pretrain(cfg, &data, cfg.seed)?;
    let method: MethodId = "sd_all_inherit".parse()?;

    let path = std::env::temp_dir().join("peso_cl_checkpoint_example.json");
    let mut state = RunState::start(cfg, &pre, method, 1.0, cfg.train.lr_scale)?;
    while !state.is_done(cfg) {
        state.advance(cfg, &data)?;
        checkpoint::save(&path, &state, &hash)?;
        // a fresh process would start here
        state = checkpoint::load(&path, &hash)?;
        println!("stage {} done, checkpoint reloaded", state.next_stage - 1);
    }

    let straight = run_method(&exp, &data, &pre, method, 1.0, cfg.train.lr_scale, None)?;
    let same = straight.stages.iter().zip(&state.stages).all(|(a, b)| a.test == b.test);
    println!("resumed run matches uninterrupted run: {same}");

    // a checkpoint written under another config is refused
    match checkpoint::load(&path, "not-this-config") {
        Err(e) => println!("foreign checkpoint rejected: {e}"),
        Ok(_) => println!("foreign checkpoint accepted"),
    }
    Ok(())
}
