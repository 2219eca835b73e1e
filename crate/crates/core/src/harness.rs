//! End-to-end experiments: offline log under the train user, every offline
//! learner, online evaluation under the test user, the late ensemble, and
//! seeded, self-describing output directories. Also the invariant battery
//! behind `verify` and parameter sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EnvSource, ExperimentConfig, MethodKind, MethodSpec};
use crate::data::{fmt_f64, sample_log, EditDataset};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::objectives::{
    bt_probability, diagnostics, expected_policy_cost, grid_search_policy, j_beta, optimal_policy, subopt_with,
    Diagnostics,
};
use crate::offline::{
    build_preferences, fit_dpo, fit_early_ensemble, fit_pessimistic_rl, fit_sft, residual_policy, tabular_mle,
    CostModelClass, FitMetadata, FitResult, OptimizerSettings, PolicyClass,
};
use crate::online::{epoch_schedule, run_fixed_policy, run_late_ensemble, write_runs_csv, EpochFit, RunRecord};
use crate::rng::{purpose, stream};
use crate::spaces::Policy;
use crate::users::{contraction_probes, validate, ValidationReport};

/// Balance residual above which an experiment refuses to run.
pub const BALANCE_ABORT: f64 = 1e-8;

/// Fits one offline method on `data`. `base` returns `π_ref`.
pub fn train_method(
    env: &Environment,
    data: &EditDataset,
    method: &MethodKind,
    class: PolicyClass,
    opt: &OptimizerSettings,
    seed: u64,
) -> Result<FitResult> {
    let pi_ref = env.pi_ref();
    match method {
        MethodKind::Base => Ok(FitResult {
            metadata: FitMetadata {
                method: "base".into(),
                hyperparameters: BTreeMap::new(),
                data_seed: data.seed,
                iterations: 0,
                final_loss: 0.0,
                converged: true,
            },
            policy: pi_ref.clone(),
            params: None,
        }),
        MethodKind::Sft { tabular: true } => Ok(FitResult {
            metadata: FitMetadata {
                method: "sft".into(),
                hyperparameters: [("tabular".to_string(), 1.0)].into(),
                data_seed: data.seed,
                iterations: 0,
                final_loss: 0.0,
                converged: true,
            },
            policy: tabular_mle(data, pi_ref)?,
            params: None,
        }),
        MethodKind::Sft { tabular: false } => fit_sft(data, pi_ref, class, opt),
        MethodKind::Dpo { scale } => fit_dpo(&build_preferences(data, seed), pi_ref, *scale, class, opt),
        MethodKind::EarlyEnsemble { lambda, scale } => {
            fit_early_ensemble(data, &build_preferences(data, seed), pi_ref, *scale, *lambda, class, opt)
        }
        MethodKind::PessimisticRl { b, delta, perturbed, noise } => {
            let fclass = CostModelClass::standard(env, *perturbed, noise * env.c_max(), seed)?;
            Ok(fit_pessimistic_rl(data, pi_ref, &fclass, env.beta(), *b, *delta)?.0)
        }
        MethodKind::EpochSft { .. } => Err(Error::Config("epoch_sft is an online method".into())),
    }
}

/// One method's outcome on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub label: String,
    /// `(1/T) Σ_t c_t`.
    pub mean_cost: f64,
    /// `(1/T) Σ_t SubOpt(π_t)` under the test environment.
    pub mean_subopt: f64,
    pub regret: f64,
    pub pulls: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMetadata>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub methods: Vec<MethodOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub setting: String,
    pub mean_cost: f64,
    pub sd_cost: f64,
    pub mean_subopt: f64,
    pub mean_regret: f64,
    /// `mean_cost` minus the best `mean_cost` in this setting.
    pub gap: f64,
}

/// Mean cost per (method, setting) across seeds, and each method's worst
/// gap to the best method of a setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub max_subopt: BTreeMap<String, f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl SummaryTable {
    pub fn from_seeds(setting: &str, seeds: &[SeedOutcome]) -> Self {
        let labels: Vec<String> = seeds
            .first()
            .map(|s| s.methods.iter().map(|m| m.label.clone()).collect())
            .unwrap_or_default();
        let rows = labels
            .iter()
            .map(|label| {
                let pick = |f: fn(&MethodOutcome) -> f64| -> Vec<f64> {
                    seeds
                        .iter()
                        .filter_map(|s| s.methods.iter().find(|m| &m.label == label).map(f))
                        .collect()
                };
                let (mean_cost, sd_cost) = mean_sd(&pick(|m| m.mean_cost));
                SummaryRow {
                    method: label.clone(),
                    setting: setting.into(),
                    mean_cost,
                    sd_cost,
                    mean_subopt: mean_sd(&pick(|m| m.mean_subopt)).0,
                    mean_regret: mean_sd(&pick(|m| m.regret)).0,
                    gap: 0.0,
                }
            })
            .collect();
        Self::finalize(rows)
    }

    /// Concatenates tables of different settings and recomputes gaps.
    pub fn merge(tables: &[SummaryTable]) -> Self {
        Self::finalize(tables.iter().flat_map(|t| t.rows.iter().cloned()).collect())
    }

    fn finalize(mut rows: Vec<SummaryRow>) -> Self {
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for r in &rows {
            let b = best.entry(r.setting.clone()).or_insert(f64::INFINITY);
            *b = b.min(r.mean_cost);
        }
        let mut max_subopt: BTreeMap<String, f64> = BTreeMap::new();
        for r in &mut rows {
            r.gap = r.mean_cost - best[&r.setting];
            let m = max_subopt.entry(r.method.clone()).or_insert(0.0);
            *m = m.max(r.gap);
        }
        SummaryTable { rows, max_subopt }
    }

    pub fn row(&self, method: &str, setting: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.setting == setting)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvReports {
    pub train: ValidationReport,
    pub test: ValidationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvDiagnostics {
    pub train: Diagnostics,
    pub test: Diagnostics,
}

/// Whether the clipped policy class contains the supervised target
/// `q∘π_ref` of the training user and the test optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub v_max: f64,
    pub theta_bound: f64,
    pub edit_target_in_class: bool,
    pub optimum_in_class: bool,
}

impl ClassReport {
    pub fn new(class: PolicyClass, train: &Environment, test: &Environment) -> Result<Self> {
        let target = train.compose_user(train.pi_ref())?;
        let optimum = optimal_policy(test)?.pi_star;
        Ok(ClassReport {
            v_max: class.v_max,
            theta_bound: class.theta_bound(),
            edit_target_in_class: class.contains(train.pi_ref(), &target),
            optimum_in_class: class.contains(test.pi_ref(), &optimum),
        })
    }
}

/// Everything an experiment produces; `runs[i]` belongs to `seeds[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub summary: SummaryTable,
    pub seeds: Vec<SeedOutcome>,
    pub runs: Vec<Vec<RunRecord>>,
    pub fits: Vec<Vec<FitResult>>,
    pub validation: EnvReports,
    pub diagnostics: EnvDiagnostics,
    pub class: ClassReport,
}

/// Serialized `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub name: String,
    pub n: usize,
    pub horizon: usize,
    pub summary: SummaryTable,
    pub seeds: Vec<SeedOutcome>,
    pub validation: EnvReports,
    pub diagnostics: EnvDiagnostics,
    pub class: ClassReport,
}

fn check_balance(which: &str, r: &ValidationReport) -> Result<()> {
    if r.balance_residual > BALANCE_ABORT {
        return Err(Error::Validation(format!(
            "{which} environment violates the balance equation (residual {:.3e} > {BALANCE_ABORT:.0e})",
            r.balance_residual
        )));
    }
    Ok(())
}

/// Builds and validates the train and test environments of `cfg`.
pub fn build_environments(cfg: &ExperimentConfig) -> Result<(Environment, Environment, EnvReports)> {
    let train = cfg.train_spec()?.build()?;
    let test = cfg.test_spec()?.build()?;
    if train.num_contexts() != test.num_contexts() || train.num_responses() != test.num_responses() {
        return Err(Error::Config("train and test environments must share their spaces".into()));
    }
    let reports = EnvReports { train: validate(&train)?, test: validate(&test)? };
    Ok((train, test, reports))
}

/// Runs every seed of `cfg` in memory. Fails with [`Error::Validation`]
/// (after nothing has been trained) if either environment breaks balance.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.check()?;
    let (train, test, validation) = build_environments(cfg)?;
    check_balance("train", &validation.train)?;
    check_balance("test", &validation.test)?;

    let class = PolicyClass::new(cfg.class.v_max.unwrap_or(2.0 * train.c_max()), train.beta())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut all_runs = Vec::with_capacity(cfg.seeds.len());
    let mut all_fits = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (outcome, runs, fits) = run_seed(cfg, &train, &test, class, seed)?;
        seeds.push(outcome);
        all_runs.push(runs);
        all_fits.push(fits);
    }

    let mut probes = vec![train.pi_ref().clone()];
    probes.extend(all_fits.iter().flatten().map(|f| f.policy.clone()));
    let diagnostics = EnvDiagnostics {
        train: diagnostics(&train, &probes)?,
        test: diagnostics(&test, &probes)?,
    };
    let class = ClassReport::new(class, &train, &test)?;
    let setting = if cfg.name.is_empty() { "default" } else { cfg.name.as_str() };
    Ok(ExperimentOutput {
        summary: SummaryTable::from_seeds(setting, &seeds),
        seeds,
        runs: all_runs,
        fits: all_fits,
        validation,
        diagnostics,
        class,
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    train: &Environment,
    test: &Environment,
    class: PolicyClass,
    seed: u64,
) -> Result<(SeedOutcome, Vec<RunRecord>, Vec<FitResult>)> {
    let data = if cfg.n > 0 { Some(sample_log(train, cfg.n, seed)?) } else { None };
    let mut outcomes = Vec::new();
    let mut runs = Vec::new();
    let mut fits: Vec<(String, FitResult)> = Vec::new();

    for MethodSpec { label, kind } in &cfg.methods {
        let label = label.clone().unwrap_or_else(|| kind.name().to_owned());
        let run = match kind {
            MethodKind::EpochSft { log_pi_size, delta, cumulative } => {
                let gamma = test.user().gamma_floor().iter().copied().fold(f64::INFINITY, f64::min);
                let schedule = epoch_schedule(gamma, *log_pi_size, *delta, cfg.horizon)?;
                let mut run = crate::online::run_epoch_supervised(test, &schedule, EpochFit::Tabular, *cumulative, seed)?;
                run.method = label.clone();
                run
            }
            MethodKind::Base if data.is_none() => run_fixed_policy(test, test.pi_ref(), &label, cfg.horizon, seed)?,
            _ => {
                let data = data.as_ref().expect("n ≥ 1 checked for trained methods");
                let fit = train_method(train, data, kind, class, &cfg.optimizer, seed)?;
                let run = run_fixed_policy(test, &fit.policy, &label, cfg.horizon, seed)?;
                fits.push((label.clone(), fit));
                run
            }
        };
        let fit = fits.iter().find(|(l, _)| l == &label).map(|(_, f)| f.metadata.clone());
        outcomes.push(outcome_of(&label, &run, fit));
        runs.push(run);
    }

    let le = cfg.late_ensemble.clone().unwrap_or_default();
    if le.enabled {
        let members: Vec<&(String, FitResult)> = match &le.members {
            Some(names) => names
                .iter()
                .map(|n| {
                    fits.iter()
                        .find(|(l, _)| l == n)
                        .ok_or_else(|| Error::Config(format!("late-ensemble member `{n}` is not a trained method")))
                })
                .collect::<Result<_>>()?,
            None => fits.iter().filter(|(_, f)| f.metadata.method != "base").collect(),
        };
        if !members.is_empty() {
            let policies: Vec<Policy> = members.iter().map(|(_, f)| f.policy.clone()).collect();
            let alpha = le.alpha.unwrap_or(test.c_max());
            let run = run_late_ensemble(test, &policies, cfg.horizon, alpha, seed)?;
            outcomes.push(outcome_of("late_ensemble", &run, None));
            runs.push(run);
        }
    }
    Ok((SeedOutcome { seed, methods: outcomes }, runs, fits.into_iter().map(|(_, f)| f).collect()))
}

fn outcome_of(label: &str, run: &RunRecord, fit: Option<FitMetadata>) -> MethodOutcome {
    MethodOutcome {
        label: label.into(),
        mean_cost: run.mean_cost(),
        mean_subopt: run.regret() / run.horizon() as f64,
        regret: run.regret(),
        pulls: run.pulls.clone(),
        fit,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `config.toml` (with environments inlined), `summary.json`, and
/// `seed_<s>/run.csv` plus `seed_<s>/policies.json` for each seed.
pub fn write_experiment(cfg: &ExperimentConfig, out: &ExperimentOutput, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut echo = cfg.clone();
    echo.train = EnvSource::Inline(Box::new(cfg.train_spec()?));
    echo.test = Some(EnvSource::Inline(Box::new(cfg.test_spec()?)));
    echo.out = None;
    echo.sweep = None;
    write_file(&dir.join("config.toml"), echo.to_toml_string()?.as_bytes())?;
    let doc = SummaryDocument {
        name: cfg.name.clone(),
        n: cfg.n,
        horizon: cfg.horizon,
        summary: out.summary.clone(),
        seeds: out.seeds.clone(),
        validation: out.validation.clone(),
        diagnostics: out.diagnostics.clone(),
        class: out.class.clone(),
    };
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&doc)?.as_bytes())?;
    for ((seed, runs), fits) in cfg.seeds.iter().zip(&out.runs).zip(&out.fits) {
        let sd = dir.join(format!("seed_{seed}"));
        create_dir(&sd)?;
        let mut buf = Vec::new();
        write_runs_csv(runs, &mut buf)?;
        write_file(&sd.join("run.csv"), &buf)?;
        write_file(&sd.join("policies.json"), serde_json::to_string_pretty(fits)?.as_bytes())?;
    }
    Ok(())
}

/// [`run_experiment`] then [`write_experiment`]. On a validation failure the
/// reports are still written to `validation.json` before the error returns.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutput> {
    match run_experiment(cfg) {
        Ok(out) => {
            write_experiment(cfg, &out, dir)?;
            Ok(out)
        }
        Err(e @ Error::Validation(_)) => {
            if let Ok((_, _, reports)) = build_environments(cfg) {
                create_dir(dir)?;
                write_file(&dir.join("validation.json"), serde_json::to_string_pretty(&reports)?.as_bytes())?;
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub validation: ValidationReport,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn check(name: &str, value: f64, threshold: f64, passed: bool, detail: Option<String>) -> Check {
    Check { name: name.into(), passed, value, threshold, detail }
}

/// Grid steps used by the optimal-policy check of [`verify`].
pub const VERIFY_GRID_STEPS: usize = 1000;

/// Balance, steady state, contraction, floor, Bradley-Terry agreement,
/// closed-form versus grid-search optimum, the value identity and the
/// TV-to-suboptimality inequalities. Each check is reported; none throws.
pub fn verify(env: &Environment) -> Result<VerifyReport> {
    let report = validate(env)?;
    let opt = optimal_policy(env)?;
    let (nx, ny) = (env.num_contexts(), env.num_responses());
    let c_max = env.c_max();
    let mut checks = vec![
        check("balance", report.balance_residual, 1e-10, report.balance_residual < 1e-10, None),
        check("steady_state", report.steady_state_tv, 1e-10, report.steady_state_tv < 1e-10, None),
        check("contraction", report.contraction_excess, 1e-9, report.contraction_excess <= 1e-9, None),
    ];
    let floor = report.gamma_certified.iter().copied().fold(f64::INFINITY, f64::min);
    checks.push(check("gamma_floor_positive", floor, 0.0, floor > 0.0, None));

    let mut bt_gap: f64 = 0.0;
    let mut undefined = 0;
    for x in 0..nx {
        for y in 0..ny {
            for yp in 0..ny {
                match bt_probability(env, x, y, yp) {
                    Ok(p) => bt_gap = bt_gap.max((p.sigmoid - p.mechanistic).abs()),
                    Err(Error::UndefinedPreference { .. }) => undefined += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    checks.push(check(
        "bradley_terry",
        bt_gap,
        1e-10,
        bt_gap < 1e-10,
        (undefined > 0).then(|| format!("{undefined} pairs with zero joint mass skipped")),
    ));

    let grid = grid_search_policy(env, VERIFY_GRID_STEPS)?;
    let grid_tv = env.expected_tv(&grid, &opt.pi_star)?;
    let grid_tol = 2e-3 * (ny as f64 / 4.0).max(1.0);
    checks.push(check("optimal_policy_grid", grid_tv, grid_tol, grid_tv <= grid_tol, None));

    let value_gap = (j_beta(env, &opt.pi_star, env.beta())? - opt.j_beta_star).abs();
    let bounded = opt.log_z.iter().all(|lz| (env.beta() * lz).abs() <= c_max + 1e-12);
    checks.push(check(
        "optimal_value",
        value_gap,
        1e-10,
        value_gap < 1e-10 && bounded,
        (!bounded).then(|| "some |β ln Z(x)| exceeds c_max".into()),
    ));

    let j0_star = expected_policy_cost(env, &opt.pi_star)?;
    let mut unreg_excess = f64::NEG_INFINITY;
    let mut min_subopt = f64::INFINITY;
    for pi in contraction_probes(env) {
        let tv = env.expected_tv(&pi, &opt.pi_star)?;
        unreg_excess = unreg_excess.max(expected_policy_cost(env, &pi)? - j0_star - 2.0 * c_max * tv);
        let s = subopt_with(env, &opt, &pi)?;
        if s.is_finite() {
            min_subopt = min_subopt.min(s);
        }
    }
    checks.push(check("tv_unregularized", unreg_excess, 1e-9, unreg_excess <= 1e-9, None));
    checks.push(check("subopt_nonnegative", min_subopt, -1e-9, min_subopt >= -1e-9, None));

    let class = PolicyClass::for_env(env);
    let bound = class.theta_bound();
    let mut rng = stream(crate::users::PROBE_SEED, purpose::TRIALS);
    let mut reg_excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let theta: Vec<Vec<f64>> = (0..nx)
            .map(|_| (0..ny).map(|_| rng.gen_range(-bound..=bound)).collect())
            .collect();
        let pi = residual_policy(env.pi_ref(), &theta)?;
        let tv = env.expected_tv(&pi, &opt.pi_star)?;
        reg_excess = reg_excess.max(subopt_with(env, &opt, &pi)? - 2.0 * (c_max + class.v_max) * tv);
    }
    checks.push(check("tv_regularized", reg_excess, 1e-9, reg_excess <= 1e-9, None));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { validation: report, checks, passed })
}

/// One executed sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub assignments: Vec<(String, String)>,
    pub dir: PathBuf,
    pub ok: bool,
    pub message: String,
    pub started: f64,
    pub finished: f64,
    #[serde(skip)]
    pub summary: Option<SummaryTable>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = table;
    while let Some(key) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(key.to_owned(), value);
            return Ok(());
        }
        let next = cur
            .entry(key.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("sweep axis `{path}` passes through a non-table at `{key}`")))?;
    }
    Err(Error::Config("empty sweep axis".into()))
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Axis assignments (`path`, rendered value) and the resulting document.
pub type SweepCellSpec = (Vec<(String, String)>, toml::Table);

/// Expands the `[sweep.axes]` grid of a raw config document into cell
/// configs, in lexicographic axis order with the last axis varying fastest.
pub fn expand_sweep(doc: &toml::Table) -> Result<Vec<SweepCellSpec>> {
    let mut base = doc.clone();
    let axes = match base.remove("sweep") {
        Some(toml::Value::Table(mut s)) => match s.remove("axes") {
            Some(toml::Value::Table(a)) => a,
            _ => return Err(Error::Config("sweep needs an `axes` table".into())),
        },
        _ => return Err(Error::Config("config has no [sweep] section".into())),
    };
    let mut cells = vec![(Vec::new(), base)];
    for (path, values) in &axes {
        let values = values
            .as_array()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Config(format!("sweep axis `{path}` must be a nonempty array")))?;
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (assign, table) in &cells {
            for v in values {
                let mut t = table.clone();
                set_path(&mut t, path, v.clone())?;
                let mut a = assign.clone();
                a.push((path.clone(), value_label(v)));
                next.push((a, t));
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Runs every cell of the sweep in parallel under `dir/cell_NNNN`, writes
/// `manifest.csv` (one row per cell and seed) and `sweep_summary.json`.
/// Failed cells are recorded, not fatal.
pub fn sweep(doc: &toml::Table, base_dir: &Path, dir: &Path) -> Result<Vec<SweepCell>> {
    let cells = expand_sweep(doc)?;
    create_dir(dir)?;
    let results: Vec<(SweepCell, Vec<u64>)> = cells
        .into_par_iter()
        .enumerate()
        .map(|(index, (assignments, table))| {
            let cell_dir = dir.join(format!("cell_{index:04}"));
            let started = now();
            let parsed = ExperimentConfig::from_table(table).map(|mut c| {
                c.base_dir = base_dir.to_path_buf();
                c.name = format!(
                    "cell_{index:04}[{}]",
                    assignments.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
                );
                c
            });
            let seeds = parsed.as_ref().map(|c| c.seeds.clone()).unwrap_or_default();
            let result = parsed.and_then(|c| run_experiment_to_dir(&c, &cell_dir));
            let (ok, message, summary) = match result {
                Ok(out) => (true, String::new(), Some(out.summary)),
                Err(e) => (false, e.to_string(), None),
            };
            let cell = SweepCell { index, assignments, dir: cell_dir, ok, message, started, finished: now(), summary };
            (cell, seeds)
        })
        .collect();

    let axis_names: Vec<String> = results
        .first()
        .map(|(c, _)| c.assignments.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "seed".to_string()];
    header.extend(axis_names.iter().cloned());
    header.extend(["status", "run_csv", "started_unix", "finished_unix", "message"].map(String::from));
    w.write_record(&header)?;
    for (cell, seeds) in &results {
        let seeds = if seeds.is_empty() { vec![None] } else { seeds.iter().map(|s| Some(*s)).collect() };
        for seed in seeds {
            let mut row = vec![cell.index.to_string(), seed.map_or(String::new(), |s| s.to_string())];
            row.extend(cell.assignments.iter().map(|(_, v)| v.clone()));
            row.push(if cell.ok { "ok".into() } else { "failed".into() });
            row.push(match seed {
                Some(s) if cell.ok => cell.dir.join(format!("seed_{s}")).join("run.csv").display().to_string(),
                _ => String::new(),
            });
            row.push(fmt_f64(cell.started));
            row.push(fmt_f64(cell.finished));
            row.push(cell.message.clone());
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join("manifest.csv"), &bytes)?;

    let tables: Vec<SummaryTable> = results.iter().filter_map(|(c, _)| c.summary.clone()).collect();
    write_file(
        &dir.join("sweep_summary.json"),
        serde_json::to_string_pretty(&SummaryTable::merge(&tables))?.as_bytes(),
    )?;
    Ok(results.into_iter().map(|(c, _)| c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::UserEditModel;
    use crate::spaces::Distribution;
    use crate::users::example1_environment;

    fn outcome(label: &str, mean_cost: f64) -> MethodOutcome {
        MethodOutcome { label: label.into(), mean_cost, mean_subopt: 0.0, regret: 0.0, pulls: vec![], fit: None }
    }

    #[test]
    fn summary_gaps_and_ties() {
        let seeds = vec![
            SeedOutcome { seed: 1, methods: vec![outcome("a", 0.5), outcome("b", 0.3), outcome("c", 0.3)] },
            SeedOutcome { seed: 2, methods: vec![outcome("a", 0.7), outcome("b", 0.3), outcome("c", 0.3)] },
        ];
        let t = SummaryTable::from_seeds("s", &seeds);
        assert!((t.row("a", "s").unwrap().gap - 0.3).abs() < 1e-15);
        assert_eq!(t.row("b", "s").unwrap().gap, 0.0);
        assert_eq!(t.row("c", "s").unwrap().gap, 0.0);
        assert!((t.row("a", "s").unwrap().sd_cost - 0.2f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);

        let other = SummaryTable::from_seeds(
            "u",
            &[SeedOutcome { seed: 1, methods: vec![outcome("a", 0.1), outcome("b", 0.4), outcome("c", 0.2)] }],
        );
        let m = SummaryTable::merge(&[t, other]);
        assert!((m.max_subopt["a"] - 0.3).abs() < 1e-12);
        assert!((m.max_subopt["b"] - 0.3).abs() < 1e-12);
        assert!((m.max_subopt["c"] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn verify_passes_on_example1_and_flags_degenerate_users() {
        let env = example1_environment(5, 0.2, 1.0).unwrap();
        let rep = verify(&env).unwrap();
        assert!(rep.passed, "{:#?}", rep.checks);

        let ident = env.with_user(UserEditModel::identity(1, 5), env.beta()).unwrap();
        let rep = verify(&ident).unwrap();
        assert!(!rep.passed);
        let failed: Vec<_> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["gamma_floor_positive"]);

        let mut table: Vec<Vec<Distribution>> = env.user().table().to_vec();
        let mut row = table[0][0].probs().to_vec();
        row[0] += 0.05;
        table[0][0] = Distribution::from_weights(row).unwrap();
        let bad = env.with_user(UserEditModel::from_table(table).unwrap(), env.beta()).unwrap();
        let rep = verify(&bad).unwrap();
        assert!(!rep.checks.iter().find(|c| c.name == "balance").unwrap().passed);
    }

    #[test]
    fn sweep_expansion_order() {
        let doc: toml::Table = toml::from_str(
            "n = 1\n[sweep.axes]\n\"train.user.gamma_min\" = [0.1, 0.2]\nn = [10, 20, 30]\n",
        )
        .unwrap();
        let cells = expand_sweep(&doc).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1].0, vec![("n".to_string(), "10".to_string()), ("train.user.gamma_min".to_string(), "0.2".to_string())]);
        assert_eq!(cells[5].1["n"].as_integer(), Some(30));
        assert!(!cells[0].1.contains_key("sweep"));
    }
}
