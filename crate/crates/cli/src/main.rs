use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latent_budget::fit::FitResult;
use latent_budget::harness::plot::{posterior_chart, read_posterior_csv};
use latent_budget::harness::{
    evaluate_model, fit_model, run_experiment, sweep_model, write_metrics_csv, Dataset, Domain, ExperimentConfig,
    MetricsRow, ModelKind, MAZE_LEARNING_RATES,
};
use latent_budget::{Error, Execution, Result};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "lbm", version, about = "Latent inference budget models: generate, fit, evaluate")]
struct Cli {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON). Without it the built-in config of the domain is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed reduction order so reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Maze,
    Rsa,
    Game,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Domain {
        match d {
            DomainArg::Maze => Domain::Maze,
            DomainArg::Rsa => Domain::Rsa,
            DomainArg::Game => Domain::Game,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen { domain: DomainArg },
    /// Fit one model variant.
    Fit {
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// libm, boltzmann, puct or fixed_<budget>.
        #[arg(long, default_value = "libm")]
        model: String,
        #[arg(long)]
        domain: Option<DomainArg>,
    },
    /// Validation and test metrics of a fitted model.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// A fit_<model>.json written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value = "libm")]
        model: String,
        #[arg(long)]
        domain: Option<DomainArg>,
    },
    /// Fit at each learning rate and keep the best validation NLL.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "libm")]
        model: String,
        /// Comma-separated rates; defaults to the config's list, then the maze list.
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        #[arg(long)]
        domain: Option<DomainArg>,
    },
    /// Generate, split, fit every variant, evaluate and write all artifacts.
    Experiment { domain: Option<DomainArg> },
    /// Render posterior CSV files as SVG bar charts.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let _ =
                writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

/// Config from `--config` or the domain default, with global flags applied.
fn load_config(cli: &Cli, domain: Option<Domain>) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, domain) {
        (Some(path), _) => ExperimentConfig::from_path(path)?,
        (None, Some(d)) => ExperimentConfig::default_for(d),
        (None, None) => return Err(Error::Config("pass --config or a domain".into())),
    };
    if let Some(d) = domain {
        if config.domain.domain() != d {
            return Err(Error::Config(format!("config is for {:?}, not {d:?}", config.domain.domain())));
        }
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.deterministic {
        config.fit.deterministic = true;
    }
    if cli.sequential {
        config.fit.execution = Execution::Sequential;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Config and dataset for fit/eval/sweep; the domain comes from the flag,
/// the dataset or the config, in that order.
fn config_and_data(
    cli: &Cli,
    data: &Option<PathBuf>,
    domain: Option<DomainArg>,
) -> Result<(ExperimentConfig, Dataset)> {
    let dataset = data.as_ref().map(Dataset::read).transpose()?;
    let domain = domain.map(Domain::from).or(dataset.as_ref().map(|d| d.meta.domain));
    let config = load_config(cli, domain)?;
    let dataset = match dataset {
        Some(d) => d,
        None => Dataset::generate(&config, config.fit.execution)?,
    };
    Ok((config, dataset))
}

fn write_fit(dir: &Path, model: &str, fit: &FitResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("fit_{model}.json")), serde_json::to_string_pretty(fit)? + "\n")?;
    let mut csv = Vec::new();
    fit.write_posterior_csv(&mut csv)?;
    std::fs::write(dir.join(format!("posterior_{model}.csv")), csv)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Gen { domain } => {
            let domain = Domain::from(*domain);
            let config = load_config(cli, Some(domain))?;
            let dataset = Dataset::generate(&config, config.fit.execution)?;
            let dir = out_dir(cli, &format!("data/{}", config.name));
            dataset.write(&dir)?;
            Ok(json!({ "dataset": dir, "domain": domain, "seed": config.seed, "records": dataset.meta.num_records }))
        }
        Command::Fit { data, model, domain } => {
            let (config, dataset) = config_and_data(cli, data, *domain)?;
            let kind = ModelKind::parse(model)?;
            let name = kind.name(dataset.meta.domain);
            let run = fit_model(&config, &dataset, kind)?;
            let dir = out_dir(cli, &format!("runs/{}", config.name));
            write_fit(&dir, &name, &run.fit)?;
            write_metrics_csv(
                std::fs::File::create(dir.join(format!("metrics_{name}.csv")))?,
                &metric_rows(&name, &run.valid, &run.test),
            )?;
            Ok(json!({
                "model": name,
                "train_nll": run.fit.train_nll,
                "valid_nll": run.fit.valid_nll,
                "iterations": run.fit.iterations,
                "converged": run.fit.converged,
                "test_accuracy": run.test.accuracy,
                "test_mean_nll": run.test.mean_nll,
                "out": dir,
            }))
        }
        Command::Eval { data, fit, model, domain } => {
            let (config, dataset) = config_and_data(cli, data, *domain)?;
            let kind = ModelKind::parse(model)?;
            let name = kind.name(dataset.meta.domain);
            let fitted: FitResult = serde_json::from_str(&std::fs::read_to_string(fit)?)?;
            let (valid, test) = evaluate_model(&config, &dataset, kind, &fitted.params)?;
            let dir = out_dir(cli, &format!("runs/{}", config.name));
            std::fs::create_dir_all(&dir)?;
            write_metrics_csv(
                std::fs::File::create(dir.join(format!("metrics_{name}.csv")))?,
                &metric_rows(&name, &valid, &test),
            )?;
            Ok(json!({ "model": name, "valid": valid, "test": test }))
        }
        Command::Sweep { data, model, rates, domain } => {
            let (config, dataset) = config_and_data(cli, data, *domain)?;
            let kind = ModelKind::parse(model)?;
            let name = kind.name(dataset.meta.domain);
            let rates = if !rates.is_empty() {
                rates.clone()
            } else if !config.fit.learning_rates.is_empty() {
                config.fit.learning_rates.clone()
            } else {
                MAZE_LEARNING_RATES.to_vec()
            };
            let run = sweep_model(&config, &dataset, kind, &rates)?;
            let dir = out_dir(cli, &format!("runs/{}", config.name));
            write_fit(&dir, &name, &run.fit)?;
            let log: Vec<_> = run.sweep.iter().map(|(r, v)| json!({ "learning_rate": r, "valid_nll": v })).collect();
            Ok(
                json!({ "model": name, "best_learning_rate": run.fit.learning_rate, "valid_nll": run.fit.valid_nll, "sweep": log, "out": dir }),
            )
        }
        Command::Experiment { domain } => {
            let config = load_config(cli, domain.map(Domain::from))?;
            let dir = out_dir(cli, &format!("runs/{}", config.name));
            let outcome = run_experiment(&config, Some(&dir))?;
            let r = &outcome.report;
            let models: Vec<_> = r
                .models
                .iter()
                .map(
                    |m| json!({ "model": m.model, "test_accuracy": m.test.accuracy, "test_mean_nll": m.test.mean_nll }),
                )
                .collect();
            Ok(json!({ "name": r.name, "out": dir, "best_fixed": r.best_fixed, "models": models }))
        }
        Command::Plot { csv } => {
            let mut written = Vec::new();
            for path in csv {
                let rows = read_posterior_csv(std::fs::File::open(path)?)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("posterior");
                let dir = match &cli.out {
                    Some(d) => d.clone(),
                    None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
                };
                std::fs::create_dir_all(&dir)?;
                let target = dir.join(format!("{stem}.svg"));
                std::fs::write(&target, posterior_chart(stem, &rows))?;
                written.push(target);
            }
            Ok(json!({ "written": written }))
        }
    }
}

fn metric_rows(
    model: &str,
    valid: &latent_budget::fit::Metrics,
    test: &latent_budget::fit::Metrics,
) -> Vec<MetricsRow> {
    let mut rows = MetricsRow::from_metrics(model, "valid", valid);
    rows.extend(MetricsRow::from_metrics(model, "test", test));
    rows
}
