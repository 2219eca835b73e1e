//! WebAssembly entry points for the static demo page. Every export returns
//! a JSON document, or an error message.

use editlab::config::MethodKind;
use editlab::data::sample_log;
use editlab::harness::train_method;
use editlab::objectives::{optimal_policy, subopt};
use editlab::offline::{OptimizerSettings, PolicyClass};
use editlab::online::run_late_ensemble;
use editlab::users::{example1_environment, weaken_environment};
use editlab::{Distribution, Policy};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 400;

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn err(e: editlab::Error) -> String {
    e.to_string()
}

#[derive(Serialize)]
pub struct ContractionStep {
    pub k: usize,
    pub tv: f64,
    pub bound: f64,
}

#[derive(Serialize)]
pub struct ContractionCurve {
    pub beta: f64,
    pub pi_star: Vec<f64>,
    pub steps: Vec<ContractionStep>,
}

/// Repeated user edits starting from "always answer with the last
/// response": distance to the optimal policy after each round, next to the
/// `(1 − γ)^k` envelope.
#[wasm_bindgen]
pub fn contraction_curve(n: usize, gamma_min: f64, steps: usize) -> Result<String, String> {
    let env = example1_environment(n, gamma_min, 1.0).map_err(err)?;
    let opt = optimal_policy(&env).map_err(err)?;
    let mut pi = Policy::new(vec![Distribution::point_mass(n, n - 1)]).map_err(err)?;
    let tv0 = env.expected_tv(&pi, &opt.pi_star).map_err(err)?;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let tv = env.expected_tv(&pi, &opt.pi_star).map_err(err)?;
        out.push(ContractionStep { k, tv, bound: tv0 * (1.0 - gamma_min).powi(k as i32) });
        pi = env.compose_user(&pi).map_err(err)?;
    }
    json(&ContractionCurve { beta: env.beta(), pi_star: opt.pi_star.row(0).probs().to_vec(), steps: out })
}

#[derive(Serialize)]
pub struct RegretCurve {
    pub t: Vec<usize>,
    pub cum_regret: Vec<f64>,
    pub pulls: Vec<usize>,
    pub arm_subopt: Vec<f64>,
}

/// UCB over the `n` constant policies "always answer `y_i`".
#[wasm_bindgen]
pub fn ucb_regret(n: usize, gamma_min: f64, horizon: usize, seed: u64) -> Result<String, String> {
    let env = example1_environment(n, gamma_min, 1.0).map_err(err)?;
    let arms: Vec<Policy> = (0..n)
        .map(|i| Policy::new(vec![Distribution::point_mass(n, i)]))
        .collect::<editlab::Result<_>>()
        .map_err(err)?;
    let arm_subopt = arms.iter().map(|p| subopt(&env, p)).collect::<editlab::Result<_>>().map_err(err)?;
    let run = run_late_ensemble(&env, &arms, horizon, env.c_max(), seed).map_err(err)?;
    let stride = horizon.div_ceil(MAX_POINTS).max(1);
    let kept: Vec<_> = run
        .rows
        .iter()
        .filter(|r| r.t % stride == 0 || r.t == horizon)
        .collect();
    json(&RegretCurve {
        t: kept.iter().map(|r| r.t).collect(),
        cum_regret: kept.iter().map(|r| r.cum_regret).collect(),
        pulls: run.pulls,
        arm_subopt,
    })
}

#[derive(Serialize)]
pub struct LearnerScore {
    pub method: String,
    pub subopt: f64,
    pub policy: Vec<f64>,
}

#[derive(Serialize)]
pub struct LearnerComparison {
    pub train_beta: f64,
    pub test_beta: f64,
    pub pi_star: Vec<f64>,
    pub scores: Vec<LearnerScore>,
}

/// Logs `samples` edits from a user weakened by `w`, fits SFT, DPO and the
/// early ensemble, and scores each against the unweakened user.
#[wasm_bindgen]
pub fn compare_learners(w: f64, samples: usize, lambda: f64, seed: u64) -> Result<String, String> {
    let strong = example1_environment(5, 0.5, 1.0).map_err(err)?;
    let train = weaken_environment(&strong, w).map_err(err)?;
    let data = sample_log(&train, samples, seed).map_err(err)?;
    let class = PolicyClass::for_env(&train);
    let opt = OptimizerSettings::default();
    let methods = [
        MethodKind::Base,
        MethodKind::Sft { tabular: false },
        MethodKind::Dpo { scale: 1.0 },
        MethodKind::EarlyEnsemble { lambda, scale: 1.0 },
    ];
    let scores = methods
        .iter()
        .map(|m| {
            let fit = train_method(&train, &data, m, class, &opt, seed)?;
            Ok(LearnerScore {
                method: m.name().into(),
                subopt: subopt(&strong, &fit.policy)?,
                policy: fit.policy.row(0).probs().to_vec(),
            })
        })
        .collect::<editlab::Result<Vec<_>>>()
        .map_err(err)?;
    json(&LearnerComparison {
        train_beta: train.beta(),
        test_beta: strong.beta(),
        pi_star: optimal_policy(&strong).map_err(err)?.pi_star.row(0).probs().to_vec(),
        scores,
    })
}
