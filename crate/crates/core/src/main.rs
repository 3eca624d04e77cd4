use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use peso_cl::data::{generate_drift, write_csv, InteractionLog};
use peso_cl::decode::{evaluate_pairs, metric_rows, write_metric_csv_file, Metric};
use peso_cl::harness::certify::{certify, CertifyOptions};
use peso_cl::harness::checkpoint;
use peso_cl::harness::pipeline::{data_seed, load_log, prepare_data, pretrain, run_method, split_log, Experiment};
use peso_cl::harness::report::{format_method_table, method_table, read_json, write_json, write_run, write_sweep};
use peso_cl::harness::sweep::{run_sweep, SweepResult};
use peso_cl::harness::MethodId;
use peso_cl::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_CERTIFICATE: u8 = 3;

#[derive(Parser)]
#[command(name = "peso-cl", version, about = "Continual LoRA adaptation experiments on a toy generative recommender")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed; for sweeps, runs only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the drift benchmark log as CSV.
    Generate,
    /// Split the log into stage blocks and write one CSV per block.
    Split,
    /// Pretrain and run the configured method, checkpointing after each stage.
    Train {
        /// Method id; defaults to the config's.
        #[arg(long)]
        method: Option<MethodId>,
        /// Checkpoint file; resumed from when it exists.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpointed model on every stage's test pairs.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the method × λ × lr scale × seed grid.
    Sweep,
    /// Run the theory certificate.
    Certify,
    /// Rebuild the sweep tables from a saved sweep.json.
    Report,
}

/// Errors tagged with the exit code they map to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUN,
        };
        Failure { code, error }
    }
}

fn config_failure(error: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

fn load_experiment(cli: &Cli) -> Result<Experiment, Failure> {
    let Some(path) = &cli.config else {
        return Err(config_failure(Error::Config("this command needs --config".into())));
    };
    let mut exp = Experiment::load(path).map_err(config_failure)?;
    if let Some(seed) = cli.seed {
        exp = exp.with_seed(seed);
        exp.config.sweep.seeds = vec![seed];
    }
    Ok(exp)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_RUN,
        error: Error::Io {
            path: dir.to_path_buf(),
            source: e,
        },
    })
}

fn generate(cli: &Cli) -> Result<(), Failure> {
    let exp = load_experiment(cli)?;
    let cfg = &exp.config;
    let Some(spec) = &cfg.data.drift else {
        return Err(config_failure(Error::Config("generate needs a [data.drift] table".into())));
    };
    let mut spec = spec.clone();
    spec.seed = data_seed(cfg, cfg.seed);
    let data = generate_drift(&spec)?;
    create_dir(&cli.out)?;
    let path = cli.out.join("interactions.csv");
    write_csv(&data.log, &path)?;
    info!("{} interactions → {}", data.log.len(), path.display());
    Ok(())
}

fn split(cli: &Cli) -> Result<(), Failure> {
    let exp = load_experiment(cli)?;
    let cfg = &exp.config;
    let (log, _) = load_log(cfg, cfg.seed)?;
    let blocks = split_log(cfg, &log, cfg.seed)?;
    create_dir(&cli.out)?;
    for b in &blocks {
        let path = cli.out.join(format!("stage_{}.csv", b.stage_index));
        write_csv(&InteractionLog::from_records(b.records.clone()), &path)?;
        info!("stage {}: {} records, {} eligible users", b.stage_index, b.records.len(), b.eligible_users().len());
    }
    Ok(())
}

fn train(cli: &Cli, method: Option<MethodId>, checkpoint_path: Option<&Path>) -> Result<(), Failure> {
    let exp = load_experiment(cli)?;
    let cfg = &exp.config;
    // the config stays untouched so its hash still matches at `evaluate`
    let method = method.unwrap_or(cfg.method);
    create_dir(&cli.out)?;
    let ckpt = checkpoint_path.map_or_else(|| cli.out.join("checkpoint.json"), Path::to_path_buf);
    let data = prepare_data(cfg, cfg.seed)?;
    let pre = pretrain(cfg, &data, cfg.seed)?;
    let report = run_method(&exp, &data, &pre, method, cfg.train.lambda, cfg.train.lr_scale, Some(&ckpt))?;
    write_run(&report, &cli.out)?;
    println!(
        "{} seed {}: NDCG@10 {:.5} Hit@10 {:.5} (stages {}..={})",
        report.method,
        report.seed,
        report.average(Metric::Ndcg, 10).unwrap_or(f64::NAN),
        report.average(Metric::Hit, 10).unwrap_or(f64::NAN),
        report.average_from,
        report.average_to
    );
    Ok(())
}

fn evaluate(cli: &Cli, checkpoint_path: Option<&Path>) -> Result<(), Failure> {
    let exp = load_experiment(cli)?;
    let cfg = &exp.config;
    let ckpt = checkpoint_path.map_or_else(|| cli.out.join("checkpoint.json"), Path::to_path_buf);
    let state = checkpoint::load(&ckpt, &cfg.hash()?)?;
    let data = prepare_data(cfg, state.seed)?;
    let mut rows = Vec::new();
    for b in &data.blocks {
        let m = evaluate_pairs(
            &state.model,
            &state.stacks,
            &data.codebook,
            &data.trie,
            &b.test_pairs,
            &cfg.eval.ks,
            cfg.eval.beam_width,
        )?;
        println!("stage {}: NDCG@10 {:.5}", b.stage_index, m.get(Metric::Ndcg, 10).unwrap_or(f64::NAN));
        rows.extend(metric_rows(b.stage_index, &state.method.to_string(), &m));
    }
    create_dir(&cli.out)?;
    write_metric_csv_file(&rows, cli.out.join("evaluation.csv"))?;
    Ok(())
}

fn sweep(cli: &Cli) -> Result<(), Failure> {
    let exp = load_experiment(cli)?;
    let result = run_sweep(&exp, cli.jobs)?;
    create_dir(&cli.out)?;
    write_json(&result, &cli.out.join("sweep.json"))?;
    write_sweep(&result, &cli.out)?;
    print!("{}", format_method_table(&method_table(&result, (Metric::Ndcg, 10)), Metric::Ndcg, 10));
    let failed = result.failures().count();
    if failed > 0 {
        for f in result.failures() {
            warn!("{} λ={} seed={}: {}", f.cell.method, f.cell.lambda, f.cell.seed, f.error.as_deref().unwrap_or(""));
        }
        return Err(Failure {
            code: EXIT_RUN,
            error: Error::Numeric(format!("{failed} of {} cells failed", result.outcomes.len())),
        });
    }
    Ok(())
}

fn run_certify(cli: &Cli) -> Result<(), Failure> {
    let opts = CertifyOptions {
        seed: cli.seed.unwrap_or(0),
        ..CertifyOptions::default()
    };
    let cert = certify(&opts)?;
    create_dir(&cli.out)?;
    let path = cli.out.join("certificate.json");
    cert.write(&path)?;
    for f in &cert.families {
        for c in &f.checks {
            println!(
                "{} {}::{} max {:.3e} tol {:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                f.name,
                c.name,
                c.max_error,
                c.tolerance
            );
        }
    }
    if !cert.passed {
        return Err(Failure {
            code: EXIT_CERTIFICATE,
            error: Error::Numeric(format!("certificate failed, see {}", path.display())),
        });
    }
    Ok(())
}

fn report(cli: &Cli) -> Result<(), Failure> {
    let result: SweepResult = read_json(&cli.out.join("sweep.json"))?;
    for p in write_sweep(&result, &cli.out)? {
        info!("wrote {}", p.display());
    }
    print!("{}", format_method_table(&method_table(&result, (Metric::Ndcg, 10)), Metric::Ndcg, 10));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PESO_CL_LOG", "info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate => generate(&cli),
        Command::Split => split(&cli),
        Command::Train { method, checkpoint } => train(&cli, *method, checkpoint.as_deref()),
        Command::Evaluate { checkpoint } => evaluate(&cli, checkpoint.as_deref()),
        Command::Sweep => sweep(&cli),
        Command::Certify => run_certify(&cli),
        Command::Report => report(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.error);
            ExitCode::from(f.code)
        }
    }
}
