//! Acceptance suite. Each test prints one `PASS`/`FAIL` line straight to
//! stderr (bypassing libtest's capture) and then asserts the same verdict.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use editlab::config::{EnvSpec, ExperimentConfig, MethodKind};
use editlab::data::sample_log;
use editlab::harness::{run_experiment_to_dir, sweep, train_method};
use editlab::objectives::{bt_probability, expected_policy_cost, grid_search_policy, optimal_policy, subopt};
use editlab::offline::{
    build_preferences, early_ensemble_loss, fit_cost, pessimistic_cost, preference_loss, sft_loss, CostModelClass,
    EditCounts, OptimizerSettings, PolicyClass, PreferenceCounts,
};
use editlab::online::{epoch_schedule, run_epoch_supervised, run_late_ensemble, EpochFit};
use editlab::rng::stream;
use editlab::users::{example1_environment, gibbs_environment, validate, weaken_environment};
use editlab::{Distribution, EditMetric, Environment, Error, Item, MetricKind, Policy, Space};
use rand::Rng;

fn report(name: &str, passed: bool, detail: String) -> bool {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] {verdict} {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    passed
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Example-1 instances over the size/floor grid plus the shipped Gibbs users.
fn validated_environments() -> Vec<(String, Environment)> {
    let mut envs = Vec::new();
    for n in [2, 5, 10, 50] {
        for g in [0.05, 0.2, 0.5] {
            envs.push((format!("example1(N={n},γ={g})"), example1_environment(n, g, 1.0).unwrap()));
        }
    }
    for w in ["0", "05", "08"] {
        let path = configs().join(format!("envs/gibbs_w{w}.toml"));
        envs.push((format!("gibbs_w{w}"), EnvSpec::load(&path).unwrap().build().unwrap()));
    }
    envs
}

/// One context, six token-string responses under normalized Levenshtein
/// cost, and a Gibbs user at regularization `beta`.
fn gibbs_instance(beta: f64, reference: &[f64]) -> Environment {
    let texts = ["a", "a b", "a b c", "a b c d", "b c d", "c d"];
    let items = texts.iter().enumerate().map(|(i, t)| Item::from_text(format!("r{i}"), t)).collect();
    gibbs_environment(
        Space::named("x", 1).unwrap(),
        Space::new(items).unwrap(),
        Distribution::uniform(1),
        Policy::from_rows(vec![reference.to_vec()]).unwrap(),
        EditMetric::new(MetricKind::LevenshteinNormalized, 1.0).unwrap(),
        beta,
        0.0,
    )
    .unwrap()
}

fn uniform6() -> Vec<f64> {
    vec![1.0 / 6.0; 6]
}

fn min_floor(env: &Environment) -> f64 {
    env.user().gamma_floor().iter().copied().fold(f64::INFINITY, f64::min)
}

fn fit(env: &Environment, n: usize, seed: u64, method: MethodKind) -> Policy {
    let data = sample_log(env, n, seed).unwrap();
    train_method(env, &data, &method, PolicyClass::for_env(env), &OptimizerSettings::default(), seed)
        .unwrap()
        .policy
}

#[test]
fn balance_and_steady_state() {
    let start = Instant::now();
    let envs = validated_environments();
    let reports: Vec<_> = envs.iter().map(|(_, e)| validate(e).unwrap()).collect();
    let elapsed = start.elapsed();
    let worst_balance = reports.iter().map(|r| r.balance_residual).fold(0.0, f64::max);
    let worst_steady = reports.iter().map(|r| r.steady_state_tv).fold(0.0, f64::max);
    let ok = worst_balance < 1e-10 && worst_steady < 1e-10 && elapsed < Duration::from_secs(1);
    assert!(report(
        "balance_and_steady_state",
        ok,
        format!(
            "{} environments, max balance residual {worst_balance:.2e}, max TV(q∘π⋆, π⋆) {worst_steady:.2e} (< 1e-10), {:.0?} (< 1s)",
            envs.len(),
            elapsed
        )
    ));
}

#[test]
fn contraction_on_probe_policies() {
    let envs = validated_environments();
    let mut worst = f64::NEG_INFINITY;
    let mut probes = 0;
    for (_, env) in &envs {
        let r = validate(env).unwrap();
        worst = worst.max(r.contraction_excess);
        probes += r.probes_checked;
        assert!(r.probes_checked >= 100);
    }
    let ok = worst <= 1e-9;
    assert!(report(
        "contraction_on_probe_policies",
        ok,
        format!("{probes} probe policies, max ratio excess over 1 − γ(x) = {worst:.2e} (≤ 1e-9)")
    ));
}

#[test]
fn bradley_terry_agreement() {
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (_, env) in validated_environments() {
        let ny = env.num_responses();
        for x in 0..env.num_contexts() {
            for y in 0..ny {
                for yp in 0..ny {
                    match bt_probability(&env, x, y, yp) {
                        Ok(p) => {
                            worst = worst.max((p.mechanistic - p.sigmoid).abs());
                            checked += 1;
                        }
                        Err(Error::UndefinedPreference { .. }) => skipped += 1,
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }
    let ok = worst < 1e-10 && skipped == 0;
    assert!(report(
        "bradley_terry_agreement",
        ok,
        format!("{checked} triples, max |mechanistic − σ| = {worst:.2e} (< 1e-10), {skipped} undefined")
    ));
}

#[test]
fn optimal_policy_matches_grid_search() {
    let start = Instant::now();
    let mut envs: Vec<(String, Environment)> = Vec::new();
    for n in [2, 3, 4] {
        for g in [0.05, 0.2, 0.5] {
            envs.push((format!("example1({n},{g})"), example1_environment(n, g, 1.0).unwrap()));
        }
    }
    envs.extend(validated_environments().into_iter().filter(|(_, e)| e.num_responses() <= 4));
    let mut worst: f64 = 0.0;
    for (_, env) in &envs {
        let closed = optimal_policy(env).unwrap().pi_star;
        let grid = grid_search_policy(env, 1000).unwrap();
        worst = worst.max(env.expected_tv(&closed, &grid).unwrap());
    }
    let elapsed = start.elapsed();
    let ok = worst <= 2e-3 && elapsed < Duration::from_secs(30);
    assert!(report(
        "optimal_policy_matches_grid_search",
        ok,
        format!("{} instances at resolution 1e-3, max TV {worst:.2e} (≤ 2e-3), {elapsed:.1?} (< 30s)", envs.len())
    ));
}

#[test]
fn sft_consistency() {
    let start = Instant::now();
    let text = r#"
contexts = 2
rho = [0.4, 0.6]
pi_ref = [[0.3, 0.25, 0.2, 0.15, 0.1], [0.1, 0.1, 0.2, 0.3, 0.3]]
responses = [
  { id = "r0", text = "a b c" },
  { id = "r1", text = "a b" },
  { id = "r2", text = "a c d" },
  { id = "r3", text = "b c d e" },
  { id = "r4", text = "e" },
]
metric = { kind = "levenshtein_normalized", c_max = 1.0 }
[user]
kind = "gibbs"
beta = 0.3
w = 0.5
"#;
    let env = EnvSpec::from_toml_str(text).unwrap().build().unwrap();
    let target = env.compose_user(env.pi_ref()).unwrap();
    let sizes = [100, 1_000, 10_000, 100_000];
    let seeds = 0..5u64;
    let mut means = Vec::new();
    let mut worst_final: f64 = 0.0;
    for &n in &sizes {
        let tvs: Vec<f64> = seeds
            .clone()
            .map(|s| env.expected_tv(&fit(&env, n, s, MethodKind::Sft { tabular: false }), &target).unwrap())
            .collect();
        if n == 100_000 {
            worst_final = tvs.iter().copied().fold(0.0, f64::max);
        }
        means.push(tvs.iter().sum::<f64>() / tvs.len() as f64);
    }
    let monotone = means.windows(2).all(|w| w[1] <= w[0] + 0.01);
    let elapsed = start.elapsed();
    let ok = worst_final < 0.02 && monotone && elapsed < Duration::from_secs(120);
    assert!(report(
        "sft_consistency",
        ok,
        format!(
            "mean TV(π̂_SFT, q∘π_ref) over n=1e2..1e5: {:?}; worst seed at 1e5 {worst_final:.4} (< 0.02); monotone within 0.01: {monotone}; {elapsed:.1?}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()
        )
    ));
}

#[test]
fn sft_improves_with_user_strength() {
    let strong = gibbs_instance(0.2, &uniform6());
    let top = min_floor(&strong);
    let floors = [0.05, 0.2, 0.5];
    assert!(top >= 0.5, "base user floor {top} too low");
    let mut good = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let subs: Vec<f64> = floors
            .iter()
            .map(|g| {
                let train = weaken_environment(&strong, 1.0 - g / top).unwrap();
                subopt(&strong, &fit(&train, 10_000, seed, MethodKind::Sft { tabular: false })).unwrap()
            })
            .collect();
        if subs.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
        rows.push(subs.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join("/"));
    }
    let ok = good >= 4;
    assert!(report(
        "sft_improves_with_user_strength",
        ok,
        format!("SubOpt at γ_min = 0.05/0.2/0.5 per seed: [{}]; non-increasing in {good}/5 (≥ 4)", rows.join(", "))
    ));
}

#[test]
fn dpo_beats_sft_on_weak_user() {
    let strong = gibbs_instance(0.2, &uniform6());
    let weak = weaken_environment(&strong, 0.8).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let data = sample_log(&weak, 100_000, seed).unwrap();
        let class = PolicyClass::for_env(&weak);
        let opt = OptimizerSettings::default();
        let s = |m: MethodKind| {
            let p = train_method(&weak, &data, &m, class, &opt, seed).unwrap().policy;
            subopt(&strong, &p).unwrap()
        };
        let (sft, dpo) = (s(MethodKind::Sft { tabular: false }), s(MethodKind::Dpo { scale: 1.0 }));
        if dpo < sft {
            wins += 1;
        }
        rows.push(format!("{dpo:.4}<{sft:.4}"));
    }
    let ok = wins >= 4;
    assert!(report(
        "dpo_beats_sft_on_weak_user",
        ok,
        format!("w = 0.8, n = 1e5, SubOpt dpo<sft per seed: [{}]; DPO better in {wins}/5 (≥ 4)", rows.join(", "))
    ));
}

#[test]
fn pessimism_covers_true_cost() {
    let env = example1_environment(5, 0.2, 1.0).unwrap();
    let class = CostModelClass::standard(&env, 20, 0.1 * env.c_max(), 0).unwrap();
    assert_eq!(class.members[0].table, env.cost_table());
    let trials = 200;
    let mut covered = 0;
    let mut dominated = true;
    for t in 0..trials {
        let data = sample_log(&env, 300, 10_000 + t).unwrap();
        let fitted = fit_cost(&data, &class, 1.0, 0.1).unwrap();
        if fitted.confidence.contains(&0) {
            covered += 1;
            let upper = pessimistic_cost(&class, &fitted).unwrap();
            dominated &= upper
                .iter()
                .flatten()
                .zip(env.cost_table().iter().flatten())
                .all(|(u, c)| u >= c);
        }
    }
    let freq = covered as f64 / trials as f64;
    let threshold = 0.9 - 3.0 * (0.9 * 0.1 / trials as f64).sqrt();
    let ok = freq >= threshold && dominated;
    assert!(report(
        "pessimism_covers_true_cost",
        ok,
        format!("coverage {freq:.3} over {trials} trials (≥ {threshold:.3}); f̄ ≥ c whenever covered: {dominated}")
    ));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let env = EnvSpec::load(&configs().join("envs/gibbs_w05.toml")).unwrap().build().unwrap();
    let (nx, ny) = (env.num_contexts(), env.num_responses());
    let data = sample_log(&env, 500, 3).unwrap();
    let edits = EditCounts::from_dataset(&data, nx, ny).unwrap();
    let prefs = PreferenceCounts::from_dataset(&build_preferences(&data, 3), nx, ny).unwrap();
    let pi_ref = env.pi_ref();
    type Loss<'a> = Box<dyn Fn(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>) + 'a>;
    let losses: Vec<(&str, Loss)> = vec![
        ("sft", Box::new(|t: &[Vec<f64>]| sft_loss(&edits, pi_ref, t).unwrap())),
        ("dpo", Box::new(|t: &[Vec<f64>]| preference_loss(&prefs, t, 1.0))),
        ("dpo_scaled", Box::new(|t: &[Vec<f64>]| preference_loss(&prefs, t, 0.37))),
        ("early_ensemble", Box::new(|t: &[Vec<f64>]| early_ensemble_loss(&edits, &prefs, pi_ref, t, 1.0, 0.7).unwrap())),
    ];
    let mut rng = stream(99, 0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let theta: Vec<Vec<f64>> = (0..nx).map(|_| (0..ny).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        for (_, loss) in &losses {
            let (_, grad) = loss(&theta);
            for x in 0..nx {
                for y in 0..ny {
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[x][y] += h;
                    dn[x][y] -= h;
                    let fd = (loss(&up).0 - loss(&dn).0) / (2.0 * h);
                    worst = worst.max((fd - grad[x][y]).abs());
                }
            }
        }
    }
    let ok = worst < 1e-6;
    let names: Vec<&str> = losses.iter().map(|(n, _)| *n).collect();
    assert!(report(
        "loss_gradients_match_finite_differences",
        ok,
        format!("{names:?} at 20 random points, max |analytic − central FD| = {worst:.2e} (< 1e-6)")
    ));
}

#[test]
fn ucb_ensemble_two_arms() {
    let start = Instant::now();
    let env = example1_environment(2, 0.3, 1.0).unwrap();
    let arms = vec![
        Policy::new(vec![Distribution::point_mass(2, 0)]).unwrap(),
        Policy::new(vec![Distribution::point_mass(2, 1)]).unwrap(),
    ];
    let costs: Vec<f64> = arms.iter().map(|p| expected_policy_cost(&env, p).unwrap()).collect();
    let best = if costs[0] <= costs[1] { 0 } else { 1 };
    let gap = (costs[0] - costs[1]).abs();
    assert!(gap >= 0.1 * env.c_max());
    let t = 5_000;
    let seeds = 50;
    let (mut frac, mut reg_t, mut reg_2t) = (0.0, 0.0, 0.0);
    for seed in 0..seeds {
        let run = run_late_ensemble(&env, &arms, 2 * t, env.c_max(), seed).unwrap();
        let bad_by = |h: usize| run.rows[..h].iter().filter(|r| r.arm != best).count() as f64;
        frac += (t as f64 - bad_by(t)) / t as f64;
        reg_t += gap * bad_by(t);
        reg_2t += gap * bad_by(2 * t);
    }
    frac /= seeds as f64;
    let ratio = reg_2t / reg_t;
    let elapsed = start.elapsed();
    let ok = frac >= 0.9 && ratio < 1.8 && elapsed < Duration::from_secs(60);
    assert!(report(
        "ucb_ensemble_two_arms",
        ok,
        format!(
            "gap {gap:.3}·c_max, T = {t}, {seeds} seeds: better-arm fraction {frac:.4} (≥ 0.9), regret(2T)/regret(T) = {ratio:.3} (< 1.8), {elapsed:.1?}"
        )
    ));
}

#[test]
fn late_ensemble_worst_case() {
    // Instance A: soft preferences and a tiny log, where pairwise data is
    // too thin for DPO. Instance B: sharp preferences and a larger log.
    let instances = [("A", 0.3, 20), ("B", 0.1, 100)];
    let methods = [
        ("sft", MethodKind::Sft { tabular: false }),
        ("dpo", MethodKind::Dpo { scale: 1.0 }),
        ("early_ensemble", MethodKind::EarlyEnsemble { lambda: 1.0, scale: 1.0 }),
    ];
    let horizon = 50_000;
    let seeds = 0..5u64;
    let mut fixed_max = vec![0.0f64; methods.len()];
    let mut le_max = f64::NEG_INFINITY;
    let mut cells = Vec::new();
    for (name, beta, n) in instances {
        let test = gibbs_instance(beta, &uniform6());
        for (train_name, w) in [("strong", 0.0), ("weak", 0.8)] {
            let train = weaken_environment(&test, w).unwrap();
            let class = PolicyClass::for_env(&train);
            let mut fixed = vec![0.0; methods.len()];
            let mut le = 0.0;
            for seed in seeds.clone() {
                let data = sample_log(&train, n, seed).unwrap();
                let policies: Vec<Policy> = methods
                    .iter()
                    .map(|(_, m)| {
                        train_method(&train, &data, m, class, &OptimizerSettings::default(), seed).unwrap().policy
                    })
                    .collect();
                let costs: Vec<f64> = policies.iter().map(|p| expected_policy_cost(&test, p).unwrap()).collect();
                for (f, c) in fixed.iter_mut().zip(&costs) {
                    *f += c / 5.0;
                }
                let run = run_late_ensemble(&test, &policies, horizon, test.c_max(), seed).unwrap();
                le += run.rows.iter().map(|r| costs[r.arm]).sum::<f64>() / horizon as f64 / 5.0;
            }
            let best = fixed.iter().copied().fold(f64::INFINITY, f64::min);
            for (m, f) in fixed_max.iter_mut().zip(&fixed) {
                *m = m.max(f - best);
            }
            le_max = le_max.max(le - best);
            cells.push(format!(
                "{name}/{train_name}: {} le={le:.4}",
                methods
                    .iter()
                    .zip(&fixed)
                    .map(|((m, _), c)| format!("{m}={c:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
        }
    }
    let ok = fixed_max.iter().all(|&m| le_max < m);
    assert!(report(
        "late_ensemble_worst_case",
        ok,
        format!(
            "max gap late_ensemble {le_max:.4} vs {}; cells [{}]",
            methods
                .iter()
                .zip(&fixed_max)
                .map(|((m, _), g)| format!("{m} {g:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
            cells.join("; ")
        )
    ));
}

#[test]
fn epoch_supervised_recursion_and_regret() {
    let start = Instant::now();
    let env = example1_environment(5, 0.5, 1.0).unwrap();
    let gamma = min_floor(&env);
    let t = 20_000;
    let schedule = epoch_schedule(gamma, 1e4f64.ln(), 0.1, 2 * t).unwrap();
    let seeds = 50;
    let (mut holds, mut reg_t, mut reg_2t) = (0, 0.0, 0.0);
    for seed in 0..seeds {
        let run = run_epoch_supervised(&env, &schedule, EpochFit::Tabular, false, seed).unwrap();
        let ok = run
            .epochs
            .windows(2)
            .all(|w| w[1].tv_to_optimum <= (1.0 - gamma) * w[0].tv_to_optimum + w[0].xi + 1e-12);
        if ok {
            holds += 1;
        }
        reg_t += run.rows[t - 1].cum_regret;
        reg_2t += run.rows[2 * t - 1].cum_regret;
    }
    let ratio = reg_2t / reg_t;
    let elapsed = start.elapsed();
    let ok = holds >= 45 && ratio < 1.9 && elapsed < Duration::from_secs(120);
    assert!(report(
        "epoch_supervised_recursion_and_regret",
        ok,
        format!(
            "{} epochs over 2T = {}: recursion held in {holds}/{seeds} runs (≥ 45), Reg_2T/Reg_T = {ratio:.3} (< 1.9), {elapsed:.1?}",
            schedule.num_epochs(),
            2 * t
        )
    ));
}

fn collect_files(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(&p, ext, out);
        } else if p.extension().is_some_and(|e| e == ext) && p.file_name().is_some_and(|f| f != "manifest.csv") {
            out.push(p);
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let mut compared = 0;
    let mut identical = true;
    let mut check = |a: &Path, b: &Path| {
        let mut files = Vec::new();
        collect_files(a, "csv", &mut files);
        assert!(!files.is_empty());
        for f in files {
            let rel = f.strip_prefix(a).unwrap();
            identical &= std::fs::read(&f).unwrap() == std::fs::read(b.join(rel)).unwrap();
            compared += 1;
        }
    };

    let mut cfg = ExperimentConfig::load(&configs().join("experiments/quickstart.toml")).unwrap();
    cfg.horizon = 1000;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment_to_dir(&cfg, a.path()).unwrap();
    run_experiment_to_dir(&cfg, b.path()).unwrap();
    check(a.path(), b.path());

    let path = configs().join("experiments/weakness_sweep.toml");
    let mut doc: toml::Table = toml::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    doc.insert("horizon".into(), toml::Value::Integer(300));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    sweep(&doc, path.parent().unwrap(), a.path()).unwrap();
    sweep(&doc, path.parent().unwrap(), b.path()).unwrap();
    check(a.path(), b.path());

    assert!(report(
        "reruns_are_byte_identical",
        identical,
        format!("{compared} CSV files from two runs of the shipped experiment and sweep configs")
    ));
}
