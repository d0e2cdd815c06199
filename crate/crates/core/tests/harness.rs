use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latent_budget::anytime::{BudgetGrid, BudgetWeight};
use latent_budget::fit::{BudgetKind, ModelParams};
use latent_budget::harness::config::DomainConfig;
use latent_budget::harness::plot::read_posterior_csv;
use latent_budget::harness::{
    evaluate_model, fit_model, run_experiment, sweep_model, Dataset, DatasetBody, Domain, ExperimentConfig,
    ExperimentReport, MetricsRow, ModelKind, RecoveryRow,
};
use latent_budget::{Error, Execution};

fn points(bs: &[u32]) -> Vec<Vec<BudgetWeight>> {
    bs.iter().map(|&b| vec![BudgetWeight { budget: b, weight: 1.0 }]).collect()
}

fn small(domain: Domain) -> ExperimentConfig {
    let mut c = ExperimentConfig::default_for(domain);
    c.name = format!("small_{domain:?}").to_lowercase();
    c.seed = 3;
    c.fit.max_iters = 15;
    match &mut c.domain {
        DomainConfig::Maze(m) => {
            m.data.width = 6;
            m.data.height = 6;
            m.data.num_exits = 3;
            m.data.num_mazes = 2;
            m.data.rewards = vec![1.0, 2.0, 4.0];
            m.data.grid = BudgetGrid::new(vec![0, 1, 2, 5]).unwrap();
            m.data.subpopulations = points(&[1, 5]);
            m.data.trajectories_per_subpop = 30;
            m.data.max_steps = Some(30);
            m.temps = vec![0.0, 1.0, 4.0];
            m.fixed_budgets = Some(vec![0, 2]);
        }
        DomainConfig::Rsa(r) => {
            r.data.vocab_utterances = 6;
            r.data.vocab_referents = 5;
            r.data.context_size = 3;
            r.data.num_games = 6;
            r.data.rounds_per_subpop = 150;
            r.fixed_budgets = Some(vec![0, 1]);
        }
        DomainConfig::Game(g) => {
            g.data.grid = BudgetGrid::new(vec![0, 4, 16]).unwrap();
            g.data.subpopulations = points(&[4, 16]);
            g.data.records_per_subpop = 30;
            g.puct_betas = vec![0.3, 1.0];
            g.puct_budget = 16;
            g.fixed_budgets = Some(vec![4]);
        }
    }
    c
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn strip_wall_time(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_time_secs");
            m.values_mut().for_each(strip_wall_time);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

fn comparable(files: BTreeMap<PathBuf, Vec<u8>>) -> BTreeMap<PathBuf, Vec<u8>> {
    files
        .into_iter()
        .map(|(p, bytes)| {
            let timed = p.file_name().is_some_and(|n| n == "report.json" || n.to_string_lossy().starts_with("fit_"));
            if timed {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                strip_wall_time(&mut v);
                (p, serde_json::to_vec(&v).unwrap())
            } else {
                (p, bytes)
            }
        })
        .collect()
}

#[test]
fn maze_experiment_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(Domain::Maze);
    let outcome = run_experiment(&config, Some(dir.path())).unwrap();
    let names: Vec<&str> = outcome.report.models.iter().map(|m| m.model.as_str()).collect();
    assert_eq!(names, ["libm", "boltzmann", "fixed_0", "fixed_2"]);
    assert_eq!(outcome.report.best_fixed.as_deref(), Some("fixed_2"));

    let on_disk: ExperimentReport = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, outcome.report);
    let reread = ExperimentConfig::from_path(dir.path().join("config.json")).unwrap();
    assert_eq!(reread, config);
    assert_eq!(Dataset::read(dir.path().join("data")).unwrap(), outcome.dataset);

    for m in &names {
        assert!(dir.path().join(format!("prior_{m}.svg")).exists());
        let rows = read_posterior_csv(fs::File::open(dir.path().join(format!("posterior_{m}.csv"))).unwrap()).unwrap();
        for s in 0..2 {
            let total: f64 = rows.iter().filter(|r| r.subpop == s).map(|r| r.probability).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    let mut rdr = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let metrics: Vec<MetricsRow> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    let libm_test = metrics.iter().find(|r| r.model == "libm" && r.split == "test" && r.subpop.is_none()).unwrap();
    assert_eq!(libm_test.accuracy, outcome.run("libm").unwrap().test.accuracy);
    assert_eq!(libm_test.mean_nll, outcome.run("libm").unwrap().test.mean_nll);

    let mut rdr = csv::Reader::from_path(dir.path().join("recovery.csv")).unwrap();
    let recovery: Vec<RecoveryRow> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(recovery, outcome.report.recovery);
    assert_eq!(recovery.len(), 2 * 4);
    assert!(!dir.path().join("sweep.csv").exists());
}

#[test]
fn reruns_are_identical_in_both_execution_modes() {
    let config = small(Domain::Maze);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&config, Some(a.path())).unwrap();
    run_experiment(&config, Some(b.path())).unwrap();
    let mut seq = config.clone();
    seq.fit.execution = Execution::Sequential;
    run_experiment(&seq, Some(c.path())).unwrap();

    let fa = comparable(files(a.path()));
    assert_eq!(fa, comparable(files(b.path())));
    let mut fc = comparable(files(c.path()));
    // the resolved config records the execution mode itself
    fc.insert("config.json".into(), fa[Path::new("config.json")].clone());
    assert_eq!(fa, fc);
}

#[test]
fn rsa_and_game_experiments_run() {
    let rsa = run_experiment(&small(Domain::Rsa), None).unwrap();
    assert!(rsa.report.model("boltzmann").is_some());
    assert_eq!(rsa.report.model("libm").unwrap().budget_kind, BudgetKind::Runtime);
    assert_eq!(rsa.report.model("boltzmann").unwrap().budget_kind, BudgetKind::Temp);

    let game = run_experiment(&small(Domain::Game), None).unwrap();
    let puct = game.report.model("puct").unwrap();
    assert_eq!(puct.budget_kind, BudgetKind::Puct);
    assert_eq!(game.report.best_fixed.as_deref(), Some("fixed_4"));
    for m in &game.report.models {
        assert!(m.test.accuracy >= 0.0 && m.test.accuracy <= 1.0);
        assert!(m.train_nll.is_finite());
    }
}

#[test]
fn checked_in_configs_match_builtins() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for domain in [Domain::Maze, Domain::Rsa, Domain::Game] {
        let builtin = ExperimentConfig::default_for(domain);
        let file = ExperimentConfig::from_path(root.join(format!("{}.json", builtin.name))).unwrap();
        assert_eq!(file, builtin);
        file.validate().unwrap();
    }
}

#[test]
fn config_errors_name_the_field() {
    let mut v: serde_json::Value = serde_json::from_str(&small(Domain::Maze).to_json_pretty().unwrap()).unwrap();
    v["domain"]["maze"]["data"]["width"] = "wide".into();
    match ExperimentConfig::from_json_str(&v.to_string()) {
        Err(Error::Schema { path, .. }) => assert_eq!(path, "domain.maze.data.width"),
        other => panic!("expected a schema error, got {other:?}"),
    }

    let mut v: serde_json::Value = serde_json::from_str(&small(Domain::Game).to_json_pretty().unwrap()).unwrap();
    v["domain"]["game"]["colour"] = "blue".into();
    assert!(matches!(ExperimentConfig::from_json_str(&v.to_string()), Err(Error::Schema { .. })));

    let mut c = small(Domain::Rsa);
    c.version = 2;
    assert!(c.validate().is_err());
}

#[test]
fn single_rate_sweep_equals_plain_fit() {
    let config = small(Domain::Maze);
    let data = Dataset::generate(&config, Execution::Parallel).unwrap();
    let plain = fit_model(&config, &data, ModelKind::Libm).unwrap();
    let swept = sweep_model(&config, &data, ModelKind::Libm, &[config.fit.learning_rate]).unwrap();
    assert_eq!(plain.fit.params, swept.fit.params);
    assert_eq!(plain.fit.valid_nll, swept.fit.valid_nll);
    assert_eq!(swept.sweep, vec![(config.fit.learning_rate, plain.fit.valid_nll)]);
    assert_eq!(plain.test, swept.test);
}

#[test]
fn evaluation_reproduces_fit_metrics() {
    let config = small(Domain::Rsa);
    let data = Dataset::generate(&config, Execution::Parallel).unwrap();
    for kind in [ModelKind::Libm, ModelKind::Baseline, ModelKind::Fixed(1)] {
        let run = fit_model(&config, &data, kind).unwrap();
        let (valid, test) = evaluate_model(&config, &data, kind, &run.fit.params).unwrap();
        assert_eq!(valid, run.valid);
        assert_eq!(test, run.test);
    }
    let run = fit_model(&config, &data, ModelKind::Libm).unwrap();
    assert!(matches!(evaluate_model(&config, &data, ModelKind::Baseline, &run.fit.params), Err(Error::Config(_))));
}

#[test]
fn zero_budget_is_uniform_over_legal_moves() {
    let config = small(Domain::Maze);
    let data = Dataset::generate(&config, Execution::Parallel).unwrap();
    let DatasetBody::Maze { mazes, trajectories } = &data.body else { panic!("maze body") };
    let split = latent_budget::harness::experiment::split_dataset(&config, &data).unwrap();
    let grid: Vec<f64> = config.domain.grid().values().iter().map(|&b| b as f64).collect();
    let mut params = ModelParams::new(vec![0.0; 3], 2, BudgetKind::Runtime, grid);
    for p in &mut params.eta {
        *p = latent_budget::BudgetPrior::point_mass(4, 0, p.subpopulation);
    }
    let (_, test) = evaluate_model(&config, &data, ModelKind::Fixed(0), &params).unwrap();

    let (mut nll, mut steps) = (0.0, 0u64);
    for &i in &split.test {
        let t = &trajectories[i];
        for s in &t.steps {
            nll += (mazes[t.maze_id].legal_actions(s.cell).len() as f64).ln();
            steps += 1;
        }
    }
    assert_eq!(test.records, steps);
    assert!((test.mean_nll - nll / steps as f64).abs() < 1e-12);
}

#[test]
fn dataset_directories_round_trip() {
    for domain in [Domain::Maze, Domain::Rsa, Domain::Game] {
        let config = small(domain);
        let data = Dataset::generate(&config, Execution::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), data);
        assert_eq!(data, Dataset::generate(&config, Execution::Sequential).unwrap());
    }
}

#[test]
fn corrupt_records_report_their_line() {
    let config = small(Domain::Game);
    let data = Dataset::generate(&config, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let path = dir.path().join("records.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    // play on an occupied cell
    let state = rec["state"].as_str().unwrap().to_string();
    let taken = state.find(|c| c != '.').unwrap_or(0);
    rec["action_index"] = taken.into();
    if state.chars().all(|c| c == '.') {
        rec["action_index"] = 9.into();
    }
    lines[2] = rec.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match Dataset::read(dir.path()) {
        Err(Error::Data { record, .. }) => assert_eq!(record, 2),
        other => panic!("expected a data error, got {other:?}"),
    }
}
