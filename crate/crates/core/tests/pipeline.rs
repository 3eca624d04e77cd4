use peso_cl::adapters::Policy;
use peso_cl::decode::Metric;
use peso_cl::harness::checkpoint;
use peso_cl::harness::pipeline::{prepare_data, pretrain, run_method, PreparedData, Pretrained, RunState};
use peso_cl::harness::{Experiment, ExperimentConfig, MethodId};
use peso_cl::proximal::RegularizerKind;
use peso_cl::Error;

fn setup(n_stages: usize) -> (Experiment, PreparedData, Pretrained) {
    let exp = Experiment::new(ExperimentConfig::quick(n_stages)).unwrap();
    let cfg = &exp.config;
    let data = prepare_data(cfg, cfg.seed).unwrap();
    let pre = pretrain(cfg, &data, cfg.seed).unwrap();
    (exp, data, pre)
}

#[test]
fn every_method_runs_two_stages() {
    let (exp, data, pre) = setup(2);
    let mut methods = MethodId::matrix();
    methods.extend(MethodId::peso_variants());
    for m in methods {
        let r = run_method(&exp, &data, &pre, m, 1.0, exp.config.train.lr_scale, None)
            .unwrap_or_else(|e| panic!("{m}: {e}"));
        assert_eq!(r.stages.len(), 2, "{m}");
        let ndcg = r.average(Metric::Ndcg, 10).unwrap();
        assert!((0.0..=1.0).contains(&ndcg), "{m}: {ndcg}");
        // stage 1 is the shared pretrained model for every method
        assert_eq!(r.stages[0].test, pre.report.test, "{m}");
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let (exp, data, pre) = setup(4);
    let cfg = &exp.config;
    let method = MethodId::peso(RegularizerKind::SoftmaxKlPerModule);
    let straight = run_method(&exp, &data, &pre, method, 2.0, cfg.train.lr_scale, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut state = RunState::start(cfg, &pre, method, 2.0, cfg.train.lr_scale).unwrap();
    state.advance(cfg, &data).unwrap();
    state.advance(cfg, &data).unwrap();
    checkpoint::save(&path, &state, &cfg.hash().unwrap()).unwrap();

    let resumed = run_method(&exp, &data, &pre, method, 2.0, cfg.train.lr_scale, Some(&path)).unwrap();
    assert_eq!(resumed.without_timing(), straight.without_timing());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (exp, data, pre) = setup(3);
    let cfg = &exp.config;
    let mut state = RunState::start(cfg, &pre, MethodId::policy(Policy::Peso), 1.0, 0.1).unwrap();
    state.advance(cfg, &data).unwrap();
    let text = checkpoint::to_string(&state, "h").unwrap();
    assert_eq!(checkpoint::from_str(&text, "h").unwrap(), state);
}

#[test]
fn damaged_or_foreign_checkpoints_are_refused() {
    let (exp, data, pre) = setup(3);
    let cfg = &exp.config;
    let mut state = RunState::start(cfg, &pre, MethodId::policy(Policy::SingleEvolving), 0.0, 0.1).unwrap();
    state.advance(cfg, &data).unwrap();
    let text = checkpoint::to_string(&state, "h").unwrap();

    assert!(matches!(checkpoint::from_str(&text, "other"), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint::from_str(&text[..text.len() / 2], "h"), Err(Error::Checkpoint(_))));

    // flip one digit inside the payload; the envelope still parses
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let payload = v["payload"].as_str().unwrap().to_string();
    let at = payload.find("\"next_stage\":").unwrap() + "\"next_stage\":".len();
    let mut bytes = payload.into_bytes();
    bytes[at] = if bytes[at] == b'9' { b'8' } else { b'9' };
    v["payload"] = serde_json::Value::String(String::from_utf8(bytes).unwrap());
    let err = checkpoint::from_str(&v.to_string(), "h").unwrap_err();
    assert!(err.to_string().contains("digest"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint::save(&path, &state, &cfg.hash().unwrap()).unwrap();
    let wrong_method = run_method(&exp, &data, &pre, MethodId::policy(Policy::Peso), 1.0, 0.1, Some(&path));
    assert!(matches!(wrong_method, Err(Error::Checkpoint(_))));
}

#[test]
fn identical_seeds_reproduce_bit_for_bit() {
    let run = || {
        let (exp, data, pre) = setup(3);
        run_method(&exp, &data, &pre, "sd_latest".parse().unwrap(), 0.0, 0.1, None)
            .unwrap()
            .without_timing()
    };
    assert_eq!(run(), run());
}

#[test]
fn config_files_in_the_repo_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let exp = Experiment::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = ExperimentConfig::from_toml(&exp.config.to_toml().unwrap()).unwrap();
        assert_eq!(again, exp.config, "{}", path.display());
    }
}
