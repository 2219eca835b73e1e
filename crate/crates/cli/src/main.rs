use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use editlab::config::{EnvSpec, ExperimentConfig, MethodKind};
use editlab::data::{sample_log, EditDataset};
use editlab::harness::{run_experiment_to_dir, sweep, train_method, verify};
use editlab::offline::{FitResult, OptimizerSettings, PolicyClass};
use editlab::online::run_fixed_policy;
use editlab::users::validate;
use editlab::{Error, Policy};

#[derive(Parser)]
#[command(name = "editlab", version, about = "Simulate and learn from user edits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an environment's user model and print the invariant report.
    Verify {
        /// Environment TOML.
        #[arg(long)]
        config: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw an offline edit log from an environment.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one offline method on a logged dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// base, sft, dpo, early_ensemble or pessimistic_rl.
        #[arg(long)]
        method: String,
        /// Early-ensemble SFT weight.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Preference-logit scale for dpo and early_ensemble.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Seed of the preference pairing and the cost class.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy JSON destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Deploy a fixed policy online and log every round.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Policy JSON written by `train`, or a bare policy table.
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment described by a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of an experiment's `[sweep.axes]` grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 1: an assumption check failed; 2: I/O; 3: malformed configuration.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Csv(_) => 2,
        Error::Config(_) | Error::TomlParse(_) | Error::TomlEncode(_) | Error::UnknownMethod(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<(), Error> {
    w.flush().map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn method_kind(name: &str, lambda: f64, scale: f64) -> Result<MethodKind, Error> {
    let doc = match name {
        "early_ensemble" => format!("method = \"{name}\"\nlambda = {lambda:?}\nscale = {scale:?}\n"),
        "dpo" => format!("method = \"{name}\"\nscale = {scale:?}\n"),
        _ => format!("method = \"{name}\"\n"),
    };
    let table: toml::Table = toml::from_str(&doc)?;
    if !editlab::config::METHOD_NAMES.contains(&name) {
        return Err(Error::UnknownMethod(name.to_owned()));
    }
    Ok(table.try_into()?)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.out.as_ref().map(|o| cfg.base_dir.join(o)))
        .unwrap_or_else(|| PathBuf::from("out").join(if cfg.name.is_empty() { "run" } else { &cfg.name }))
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Verify { config, out } => {
            let env = EnvSpec::load(&config)?.build()?;
            let report = verify(&env)?;
            for c in &report.checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                let detail = c.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default();
                println!("{status} {:<22} value={:.3e} threshold={:.1e}{detail}", c.name, c.value, c.threshold);
            }
            if let Some(path) = out {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &report)?;
                flush(w, &path)?;
            }
            if !report.passed {
                return Err(Error::Validation("one or more checks failed".into()));
            }
        }
        Command::GenData { config, n, seed, out } => {
            let env = EnvSpec::load(&config)?.build()?;
            let data = sample_log(&env, n, seed)?;
            let w = create(&out)?;
            data.write_csv(w)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Train { config, data, method, lambda, scale, seed, out } => {
            let kind = method_kind(&method, lambda, scale)?;
            if matches!(kind, MethodKind::EpochSft { .. }) {
                return Err(Error::Config("epoch_sft is online; use `run`".into()));
            }
            let env = EnvSpec::load(&config)?.build()?;
            let report = validate(&env)?;
            if report.balance_residual > editlab::harness::BALANCE_ABORT {
                return Err(Error::Validation(format!("balance residual {:.3e}", report.balance_residual)));
            }
            let data = EditDataset::read_csv(open(&data)?, &env, seed)?;
            let class = PolicyClass::for_env(&env);
            let fit = train_method(&env, &data, &kind, class, &OptimizerSettings::default(), seed)?;
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &fit)?;
            flush(w, &out)?;
            println!(
                "{}: {} iterations, loss {:.6}, converged {}",
                fit.metadata.method, fit.metadata.iterations, fit.metadata.final_loss, fit.metadata.converged
            );
        }
        Command::Evaluate { config, policy, horizon, seed, out } => {
            let env = EnvSpec::load(&config)?.build()?;
            let value: serde_json::Value = serde_json::from_reader(open(&policy)?)?;
            let (label, pi): (String, Policy) = if value.get("metadata").is_some() {
                let fit: FitResult = serde_json::from_value(value)?;
                (fit.metadata.method, fit.policy)
            } else {
                ("policy".into(), serde_json::from_value(value)?)
            };
            let run = run_fixed_policy(&env, &pi, &label, horizon, seed)?;
            run.write_csv(create(&out)?)?;
            println!("mean cost {:.6}, regret {:.6}", run.mean_cost(), run.regret());
        }
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let dir = out_dir(&cfg, out);
            let result = run_experiment_to_dir(&cfg, &dir)?;
            println!("{:<18} {:>10} {:>10} {:>10}", "method", "mean_cost", "sd", "gap");
            for r in &result.summary.rows {
                println!("{:<18} {:>10.5} {:>10.5} {:>10.5}", r.method, r.mean_cost, r.sd_cost, r.gap);
            }
            println!("outputs in {}", dir.display());
        }
        Command::Sweep { config, out } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::Io { path: config.display().to_string(), source: e })?;
            let doc: toml::Table = toml::from_str(&text)?;
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let dir = out.unwrap_or_else(|| match doc.get("out").and_then(toml::Value::as_str) {
                Some(o) => base.join(o),
                None => PathBuf::from("out/sweep"),
            });
            let cells = sweep(&doc, &base, &dir)?;
            let failed = cells.iter().filter(|c| !c.ok).count();
            println!("{} cells, {failed} failed; manifest in {}", cells.len(), dir.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
