//! Offline learners: supervised fine-tuning on edits, preference learning on
//! (response, edit) pairs, their early ensemble, and pessimistic cost
//! regression followed by closed-form KL-regularized optimization.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EditDataset;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::objectives::{gibbs_policy, log_sigmoid, sigmoid};
use crate::rng::{purpose, stream};
use crate::spaces::{Distribution, Policy};

/// Log-linear residual policies `π_θ(y|x) ∝ π_ref(y|x)·exp θ(x,y)` with
/// `|θ| ≤ v_max/(2β)`, so that `|log π_θ/π_ref| ≤ v_max/β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyClass {
    pub v_max: f64,
    pub beta: f64,
}

impl PolicyClass {
    pub fn new(v_max: f64, beta: f64) -> Result<Self> {
        if !(v_max > 0.0 && v_max.is_finite()) {
            return Err(Error::Parameter(format!("v_max must be positive, got {v_max}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
        }
        Ok(PolicyClass { v_max, beta })
    }

    /// `v_max = 2·c_max` at the environment's `β`: wide enough to contain
    /// every Gibbs policy of a cost bounded by `c_max`.
    pub fn for_env(env: &Environment) -> Self {
        PolicyClass {
            v_max: 2.0 * env.c_max(),
            beta: env.beta(),
        }
    }

    pub fn theta_bound(&self) -> f64 {
        self.v_max / (2.0 * self.beta)
    }

    /// Whether `pi` has the same support as `π_ref` and per-context
    /// log-ratio spread at most `v_max/β`, i.e. is a member of the class.
    pub fn contains(&self, pi_ref: &Policy, pi: &Policy) -> bool {
        if pi.num_contexts() != pi_ref.num_contexts() || pi.num_responses() != pi_ref.num_responses() {
            return false;
        }
        pi_ref.rows().iter().zip(pi.rows()).all(|(r, p)| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (&a, &b) in r.probs().iter().zip(p.probs()) {
                match (a > 0.0, b > 0.0) {
                    (true, true) => {
                        let l = (b / a).ln();
                        lo = lo.min(l);
                        hi = hi.max(l);
                    }
                    (false, false) => {}
                    _ => return false,
                }
            }
            hi - lo <= 2.0 * self.theta_bound() + 1e-12
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPolicyParams {
    pub theta: Vec<Vec<f64>>,
    pub class: PolicyClass,
}

impl ResidualPolicyParams {
    pub fn zeros(class: PolicyClass, nx: usize, ny: usize) -> Self {
        ResidualPolicyParams {
            theta: vec![vec![0.0; ny]; nx],
            class,
        }
    }

    pub fn policy(&self, pi_ref: &Policy) -> Result<Policy> {
        residual_policy(pi_ref, &self.theta)
    }
}

/// `π(y|x) ∝ π_ref(y|x)·exp θ(x,y)`, without clipping.
pub fn residual_policy(pi_ref: &Policy, theta: &[Vec<f64>]) -> Result<Policy> {
    pi_ref.check_shape(theta.len(), theta.first().map_or(0, Vec::len))?;
    let rows = pi_ref
        .rows()
        .iter()
        .zip(theta)
        .map(|(r, th)| {
            let shift = r
                .probs()
                .iter()
                .zip(th)
                .filter(|(p, _)| **p > 0.0)
                .map(|(_, t)| *t)
                .fold(f64::NEG_INFINITY, f64::max);
            let w = r
                .probs()
                .iter()
                .zip(th)
                .map(|(&p, &t)| if p > 0.0 { p * (t - shift).exp() } else { 0.0 })
                .collect();
            Distribution::from_weights(w)
        })
        .collect::<Result<Vec<_>>>()?;
    Policy::new(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            step: 1.0,
            max_iters: 100_000,
            tol: 1e-8,
        }
    }
}

impl OptimizerSettings {
    fn check(&self) -> Result<()> {
        if !(self.step > 0.0 && self.tol > 0.0 && self.max_iters > 0) {
            return Err(Error::Parameter(format!("optimizer settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Sufficient statistics of an edit log: `n`, per-context counts and
/// counts of `(x, y')`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditCounts {
    pub n: usize,
    pub per_context: Vec<usize>,
    pub edits: Vec<Vec<usize>>,
}

impl EditCounts {
    pub fn from_dataset(data: &EditDataset, nx: usize, ny: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut per_context = vec![0; nx];
        let mut edits = vec![vec![0; ny]; nx];
        for r in &data.records {
            if r.x >= nx || r.y_edit >= ny {
                return Err(Error::Shape(format!("record {r:?} out of range for {nx}x{ny}")));
            }
            per_context[r.x] += 1;
            edits[r.x][r.y_edit] += 1;
        }
        Ok(EditCounts {
            n: data.len(),
            per_context,
            edits,
        })
    }

    fn check_support(&self, pi_ref: &Policy) -> Result<()> {
        for (x, row) in self.edits.iter().enumerate() {
            for (y, &c) in row.iter().enumerate() {
                if c > 0 && pi_ref.prob(x, y) <= 0.0 {
                    return Err(Error::Parameter(format!(
                        "observed edit ({x}, {y}) lies outside the reference support"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One preference record: `z = +1` means `y_tilde_prime` is preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub x: usize,
    pub y_tilde: usize,
    pub y_tilde_prime: usize,
    pub z: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub records: Vec<PreferenceRecord>,
    pub seed: u64,
}

/// Randomized swap: `z ∼ Unf{±1}`; `z = +1` keeps `(y, y')`, `z = −1` stores
/// `(y', y)`. Either way the edit is the preferred response.
pub fn build_preferences(data: &EditDataset, seed: u64) -> PreferenceDataset {
    let mut rng = stream(seed, purpose::PREFERENCES);
    let records = data
        .records
        .iter()
        .map(|r| {
            if rng.gen::<bool>() {
                PreferenceRecord { x: r.x, y_tilde: r.y, y_tilde_prime: r.y_edit, z: 1 }
            } else {
                PreferenceRecord { x: r.x, y_tilde: r.y_edit, y_tilde_prime: r.y, z: -1 }
            }
        })
        .collect();
    PreferenceDataset { records, seed }
}

/// Preference records grouped as `(x, loser, winner) → count`; records whose
/// two responses coincide only contribute the constant `ln 2` to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceCounts {
    pub n: usize,
    pub ties: usize,
    pub wins: BTreeMap<(usize, usize, usize), usize>,
}

impl PreferenceCounts {
    pub fn from_dataset(prefs: &PreferenceDataset, nx: usize, ny: usize) -> Result<Self> {
        if prefs.records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut wins = BTreeMap::new();
        let mut ties = 0;
        for r in &prefs.records {
            if r.x >= nx || r.y_tilde >= ny || r.y_tilde_prime >= ny || r.z.abs() != 1 {
                return Err(Error::Shape(format!("preference record {r:?} is malformed")));
            }
            if r.y_tilde == r.y_tilde_prime {
                ties += 1;
                continue;
            }
            let (lose, win) = if r.z > 0 {
                (r.y_tilde, r.y_tilde_prime)
            } else {
                (r.y_tilde_prime, r.y_tilde)
            };
            *wins.entry((r.x, lose, win)).or_insert(0) += 1;
        }
        Ok(PreferenceCounts {
            n: prefs.records.len(),
            ties,
            wins,
        })
    }
}

/// `−(1/n) Σ log π_θ(y'_i|x_i)` and its gradient in `θ`.
pub fn sft_loss(counts: &EditCounts, pi_ref: &Policy, theta: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let pi = residual_policy(pi_ref, theta)?;
    let n = counts.n as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; pi.num_responses()]; pi.num_contexts()];
    for (x, g) in grad.iter_mut().enumerate() {
        let nx = counts.per_context[x] as f64;
        if nx == 0.0 {
            continue;
        }
        for (y, gy) in g.iter_mut().enumerate() {
            let c = counts.edits[x][y] as f64;
            let p = pi.prob(x, y);
            if c > 0.0 {
                loss -= c * p.ln();
            }
            *gy = (nx * p - c) / n;
        }
    }
    Ok((loss / n, grad))
}

/// `−(1/n) Σ log σ(z·s·[log π_θ/π_ref(ỹ') − log π_θ/π_ref(ỹ)])` and its
/// gradient, where `s` is the logit scale.
pub fn preference_loss(
    counts: &PreferenceCounts,
    theta: &[Vec<f64>],
    scale: f64,
) -> (f64, Vec<Vec<f64>>) {
    let n = counts.n as f64;
    let mut loss = counts.ties as f64 * std::f64::consts::LN_2;
    let mut grad = vec![vec![0.0; theta.first().map_or(0, Vec::len)]; theta.len()];
    for (&(x, lose, win), &w) in &counts.wins {
        let u = scale * (theta[x][win] - theta[x][lose]);
        let w = w as f64;
        loss -= w * log_sigmoid(u);
        let d = w * scale * sigmoid(-u) / n;
        grad[x][win] -= d;
        grad[x][lose] += d;
    }
    (loss / n, grad)
}

/// Preference loss plus `λ` times the supervised loss.
pub fn early_ensemble_loss(
    edits: &EditCounts,
    prefs: &PreferenceCounts,
    pi_ref: &Policy,
    theta: &[Vec<f64>],
    scale: f64,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut loss, mut grad) = preference_loss(prefs, theta, scale);
    if lambda != 0.0 {
        let (ls, gs) = sft_loss(edits, pi_ref, theta)?;
        loss += lambda * ls;
        for (g, h) in grad.iter_mut().zip(gs) {
            for (a, b) in g.iter_mut().zip(h) {
                *a += lambda * b;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub method: String,
    pub hyperparameters: BTreeMap<String, f64>,
    pub data_seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
}

/// A learned policy together with how it was obtained; serializes as the
/// policy table plus a metadata header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub metadata: FitMetadata,
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ResidualPolicyParams>,
}

struct Descent {
    theta: Vec<Vec<f64>>,
    iterations: usize,
    loss: f64,
    converged: bool,
}

/// Projected full-batch gradient descent on the box `|θ| ≤ bound`, stopping
/// when the projected-gradient norm falls below `tol`.
fn projected_descent<F>(
    mut theta: Vec<Vec<f64>>,
    bound: f64,
    step: f64,
    opt: &OptimizerSettings,
    mut objective: F,
) -> Result<Descent>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (mut loss, mut grad) = objective(&theta)?;
    for it in 0..opt.max_iters {
        let mut norm_sq = 0.0;
        for (row, g) in theta.iter_mut().zip(&grad) {
            for (t, &gi) in row.iter_mut().zip(g) {
                let next = (*t - step * gi).clamp(-bound, bound);
                let pg = (*t - next) / step;
                norm_sq += pg * pg;
                *t = next;
            }
        }
        if norm_sq.sqrt() < opt.tol {
            let (l, _) = objective(&theta)?;
            return Ok(Descent { theta, iterations: it + 1, loss: l, converged: true });
        }
        (loss, grad) = objective(&theta)?;
    }
    Ok(Descent { theta, iterations: opt.max_iters, loss, converged: false })
}

/// Empirical conditional frequencies of `y'` given `x`; contexts without
/// data fall back to `π_ref`.
pub fn tabular_mle(data: &EditDataset, pi_ref: &Policy) -> Result<Policy> {
    let counts = EditCounts::from_dataset(data, pi_ref.num_contexts(), pi_ref.num_responses())?;
    tabular_from_counts(&counts, pi_ref)
}

pub(crate) fn tabular_from_counts(counts: &EditCounts, pi_ref: &Policy) -> Result<Policy> {
    let rows = counts
        .edits
        .iter()
        .enumerate()
        .map(|(x, row)| {
            if counts.per_context[x] == 0 {
                Ok(pi_ref.row(x).clone())
            } else {
                Distribution::from_weights(row.iter().map(|&c| c as f64).collect())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Policy::new(rows)
}

fn hyper(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Maximum likelihood on the edits within the clipped class.
pub fn fit_sft(
    data: &EditDataset,
    pi_ref: &Policy,
    class: PolicyClass,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    opt.check()?;
    let (nx, ny) = (pi_ref.num_contexts(), pi_ref.num_responses());
    let counts = EditCounts::from_dataset(data, nx, ny)?;
    counts.check_support(pi_ref)?;
    let d = projected_descent(
        vec![vec![0.0; ny]; nx],
        class.theta_bound(),
        opt.step,
        opt,
        |th| sft_loss(&counts, pi_ref, th),
    )?;
    finish("sft", hyper(&[("step", opt.step)]), data.seed, d, class, pi_ref)
}

/// Logistic regression of the swap label on the implicit log-ratio
/// difference. With `scale = 1` the population optimum is the optimal
/// policy; `scale = β` gives the usual β-weighted objective.
pub fn fit_dpo(
    prefs: &PreferenceDataset,
    pi_ref: &Policy,
    scale: f64,
    class: PolicyClass,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    fit_ensemble_inner("dpo", None, prefs, pi_ref, scale, 0.0, class, opt)
}

/// Preference loss plus `λ`·supervised loss. `λ = 0` reproduces [`fit_dpo`].
#[allow(clippy::too_many_arguments)]
pub fn fit_early_ensemble(
    data: &EditDataset,
    prefs: &PreferenceDataset,
    pi_ref: &Policy,
    scale: f64,
    lambda: f64,
    class: PolicyClass,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    fit_ensemble_inner("early_ensemble", Some(data), prefs, pi_ref, scale, lambda, class, opt)
}

#[allow(clippy::too_many_arguments)]
fn fit_ensemble_inner(
    method: &str,
    data: Option<&EditDataset>,
    prefs: &PreferenceDataset,
    pi_ref: &Policy,
    scale: f64,
    lambda: f64,
    class: PolicyClass,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    opt.check()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!("logit scale must be positive, got {scale}")));
    }
    let (nx, ny) = (pi_ref.num_contexts(), pi_ref.num_responses());
    let pc = PreferenceCounts::from_dataset(prefs, nx, ny)?;
    let ec = match data {
        Some(d) if lambda != 0.0 => {
            let c = EditCounts::from_dataset(d, nx, ny)?;
            c.check_support(pi_ref)?;
            Some(c)
        }
        _ => None,
    };
    let step = opt.step / (scale * scale + lambda);
    let d = projected_descent(vec![vec![0.0; ny]; nx], class.theta_bound(), step, opt, |th| match &ec {
        Some(ec) => early_ensemble_loss(ec, &pc, pi_ref, th, scale, lambda),
        None => Ok(preference_loss(&pc, th, scale)),
    })?;
    let mut h = hyper(&[("step", opt.step), ("scale", scale)]);
    if method != "dpo" {
        h.insert("lambda".into(), lambda);
    }
    finish(method, h, prefs.seed, d, class, pi_ref)
}

fn finish(
    method: &str,
    mut hyperparameters: BTreeMap<String, f64>,
    data_seed: u64,
    d: Descent,
    class: PolicyClass,
    pi_ref: &Policy,
) -> Result<FitResult> {
    hyperparameters.insert("v_max".into(), class.v_max);
    hyperparameters.insert("beta".into(), class.beta);
    let params = ResidualPolicyParams { theta: d.theta, class };
    Ok(FitResult {
        metadata: FitMetadata {
            method: method.into(),
            hyperparameters,
            data_seed,
            iterations: d.iterations,
            final_loss: d.loss,
            converged: d.converged,
        },
        policy: params.policy(pi_ref)?,
        params: Some(params),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub id: String,
    pub table: Vec<Vec<f64>>,
}

/// A finite class of cost tables bounded by `c_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModelClass {
    pub members: Vec<CostModel>,
    pub c_max: f64,
}

impl CostModelClass {
    pub fn new(members: Vec<CostModel>, c_max: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Parameter("cost class must be nonempty".into()));
        }
        let shape = (members[0].table.len(), members[0].table.first().map_or(0, Vec::len));
        for m in &members {
            if (m.table.len(), m.table.first().map_or(0, Vec::len)) != shape
                || m.table.iter().any(|r| r.len() != shape.1)
            {
                return Err(Error::Shape(format!("cost table `{}` has the wrong shape", m.id)));
            }
            if m.table.iter().flatten().any(|v| !(0.0..=c_max).contains(v)) {
                return Err(Error::Parameter(format!("cost table `{}` leaves [0, {c_max}]", m.id)));
            }
        }
        Ok(CostModelClass { members, c_max })
    }

    /// The true expected-cost table, `perturbed` copies with independent
    /// uniform noise of half-width `noise` (clamped to `[0, c_max]`), and the
    /// constant tables `0`, `c_max/2`, `c_max`.
    pub fn standard(env: &Environment, perturbed: usize, noise: f64, seed: u64) -> Result<Self> {
        let c_max = env.c_max();
        let truth = env.cost_table().to_vec();
        let mut rng = stream(seed, purpose::COST_CLASS);
        let mut members = vec![CostModel { id: "true".into(), table: truth.clone() }];
        for k in 0..perturbed {
            let table = truth
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|c| (c + rng.gen_range(-noise..=noise)).clamp(0.0, c_max))
                        .collect()
                })
                .collect();
            members.push(CostModel { id: format!("perturbed{k}"), table });
        }
        for (name, level) in [("const_zero", 0.0), ("const_half", c_max / 2.0), ("const_max", c_max)] {
            members.push(CostModel {
                id: name.into(),
                table: vec![vec![level; env.num_responses()]; env.num_contexts()],
            });
        }
        CostModelClass::new(members, c_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    /// Index into the class of the least-squares member.
    pub best: usize,
    pub f_hat: Vec<Vec<f64>>,
    pub radius: f64,
    /// Indices of members within `radius` of `f_hat` on the data.
    pub confidence: Vec<usize>,
    pub squared_errors: Vec<f64>,
}

/// Least-squares regression over the finite class, and the confidence set
/// `{f : Σ_i (f(x_i,y_i) − f̂(x_i,y_i))² ≤ b·c_max²·ln(|𝓕|/δ)}`.
pub fn fit_cost(data: &EditDataset, class: &CostModelClass, b: f64, delta: f64) -> Result<CostFit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(b > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("need b > 0 and delta in (0, 1), got {b}, {delta}")));
    }
    let nx = class.members[0].table.len();
    let ny = class.members[0].table[0].len();
    // Residuals only depend on counts and cost sums per (x, y).
    let mut count = vec![vec![0.0; ny]; nx];
    let mut sum = vec![vec![0.0; ny]; nx];
    let mut sum_sq = 0.0;
    for r in &data.records {
        if r.x >= nx || r.y >= ny {
            return Err(Error::Shape(format!("record {r:?} out of range")));
        }
        count[r.x][r.y] += 1.0;
        sum[r.x][r.y] += r.cost;
        sum_sq += r.cost * r.cost;
    }
    let squared_errors: Vec<f64> = class
        .members
        .iter()
        .map(|m| {
            let mut s = sum_sq;
            for x in 0..nx {
                for y in 0..ny {
                    let f = m.table[x][y];
                    s += count[x][y] * f * f - 2.0 * f * sum[x][y];
                }
            }
            s.max(0.0)
        })
        .collect();
    let mut best = 0;
    for (i, &e) in squared_errors.iter().enumerate() {
        if e < squared_errors[best] {
            best = i;
        }
    }
    let f_hat = class.members[best].table.clone();
    let radius = b * class.c_max * class.c_max * (class.members.len() as f64 / delta).ln();
    let confidence = class
        .members
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let mut d = 0.0;
            for x in 0..nx {
                for y in 0..ny {
                    let e = m.table[x][y] - f_hat[x][y];
                    d += count[x][y] * e * e;
                }
            }
            d <= radius
        })
        .map(|(i, _)| i)
        .collect();
    Ok(CostFit { best, f_hat, radius, confidence, squared_errors })
}

/// Pointwise maximum over the confidence set.
pub fn pessimistic_cost(class: &CostModelClass, fit: &CostFit) -> Result<Vec<Vec<f64>>> {
    let mut ids = fit.confidence.iter();
    let first = ids
        .next()
        .ok_or_else(|| Error::Invariant("empty confidence set".into()))?;
    let mut bar = class.members[*first].table.clone();
    for &i in ids {
        for (row, other) in bar.iter_mut().zip(&class.members[i].table) {
            for (a, b) in row.iter_mut().zip(other) {
                *a = a.max(*b);
            }
        }
    }
    Ok(bar)
}

/// Closed-form optimum of `f̄ + β·KL(π‖π_ref)` for the pessimistic cost `f̄`.
pub fn fit_pessimistic_rl(
    data: &EditDataset,
    pi_ref: &Policy,
    class: &CostModelClass,
    beta: f64,
    b: f64,
    delta: f64,
) -> Result<(FitResult, CostFit)> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    let fit = fit_cost(data, class, b, delta)?;
    let bar = pessimistic_cost(class, &fit)?;
    let (policy, _) = gibbs_policy(pi_ref, &bar, beta)?;
    let result = FitResult {
        metadata: FitMetadata {
            method: "pessimistic_rl".into(),
            hyperparameters: hyper(&[("beta", beta), ("b", b), ("delta", delta)]),
            data_seed: data.seed,
            iterations: 0,
            final_loss: fit.squared_errors[fit.best],
            converged: true,
        },
        policy,
        params: None,
    };
    Ok((result, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_log, EditRecord};
    use crate::objectives::optimal_policy;
    use crate::rng::dirichlet_flat;
    use crate::users::{example1_environment, gibbs_environment};
    use crate::{EditMetric, Item, Space};

    fn records(rs: &[(usize, usize, usize)]) -> EditDataset {
        EditDataset {
            records: rs
                .iter()
                .map(|&(x, y, y_edit)| EditRecord { x, y, y_edit, cost: if y == y_edit { 0.0 } else { 1.0 } })
                .collect(),
            seed: 0,
        }
    }

    fn three_response_env() -> Environment {
        gibbs_environment(
            Space::named("x", 2).unwrap(),
            Space::new(vec![
                Item::from_text("a", "one two three"),
                Item::from_text("b", "one two four"),
                Item::from_text("c", "five six"),
            ])
            .unwrap(),
            Distribution::uniform(2),
            Policy::from_rows(vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]]).unwrap(),
            EditMetric::new(crate::MetricKind::LevenshteinNormalized, 1.0).unwrap(),
            0.4,
            0.0,
        )
        .unwrap()
    }

    fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn finite_difference<F: Fn(&[Vec<f64>]) -> f64>(f: F, theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = 1e-5;
        let mut out = vec![vec![0.0; theta[0].len()]; theta.len()];
        for x in 0..theta.len() {
            for y in 0..theta[0].len() {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[x][y] += h;
                m[x][y] -= h;
                out[x][y] = (f(&p) - f(&m)) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn tabular_mle_counts() {
        let d = records(&[(0, 1, 0), (0, 2, 0), (0, 0, 1)]);
        let pi = tabular_mle(&d, &Policy::uniform(2, 3)).unwrap();
        assert!((pi.prob(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi.prob(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pi.prob(0, 2), 0.0);
        assert_eq!(pi.row(1), Policy::uniform(2, 3).row(1));
    }

    #[test]
    fn clipped_sft_matches_mle_inside_the_class() {
        let d = records(&[(0, 0, 0), (0, 0, 0), (0, 0, 1), (0, 1, 2), (1, 0, 1)]);
        let pi_ref = Policy::uniform(2, 3);
        let class = PolicyClass::new(4.0, 1.0).unwrap();
        let fit = fit_sft(&d, &pi_ref, class, &OptimizerSettings::default()).unwrap();
        let mle = tabular_mle(&d, &pi_ref).unwrap();
        // context 0 MLE {1/2, 1/4, 1/4} lies inside the class
        assert!(crate::spaces::tv_distance(fit.policy.row(0), mle.row(0)).unwrap() < 1e-4);
        assert!(fit.metadata.converged);
        // context 1 MLE is a point mass, so the clip binds
        let bound = class.theta_bound();
        let th = &fit.params.as_ref().unwrap().theta;
        assert!(th[1].iter().all(|t| t.abs() <= bound + 1e-15));
        assert!(class.contains(&pi_ref, &fit.policy));
    }

    #[test]
    fn sft_rejects_empty_and_unsupported() {
        let pi_ref = Policy::from_rows(vec![vec![0.5, 0.5, 0.0]]).unwrap();
        let class = PolicyClass::new(1.0, 1.0).unwrap();
        let opt = OptimizerSettings::default();
        assert!(matches!(
            fit_sft(&EditDataset { records: vec![], seed: 0 }, &pi_ref, class, &opt),
            Err(Error::EmptyDataset)
        ));
        assert!(fit_sft(&records(&[(0, 0, 2)]), &pi_ref, class, &opt).is_err());
    }

    #[test]
    fn preference_swap_is_reproducible_and_balanced() {
        let env = three_response_env();
        let d = sample_log(&env, 100_000, 4).unwrap();
        let a = build_preferences(&d, 9);
        assert_eq!(a, build_preferences(&d, 9));
        let plus = a.records.iter().filter(|r| r.z == 1).count() as f64;
        let n = d.len() as f64;
        assert!((plus - n / 2.0).abs() < 4.0 * (n / 4.0).sqrt());
        for (p, r) in a.records.iter().zip(&d.records) {
            let (win, lose) = if p.z == 1 { (p.y_tilde_prime, p.y_tilde) } else { (p.y_tilde, p.y_tilde_prime) };
            assert_eq!((win, lose), (r.y_edit, r.y));
        }
    }

    #[test]
    fn preference_loss_at_reference_is_ln2() {
        let env = three_response_env();
        let d = sample_log(&env, 200, 4).unwrap();
        let pc = PreferenceCounts::from_dataset(&build_preferences(&d, 1), 2, 3).unwrap();
        let (loss, _) = preference_loss(&pc, &[vec![0.0; 3], vec![0.0; 3]], 1.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let env = three_response_env();
        let d = sample_log(&env, 500, 2).unwrap();
        let prefs = build_preferences(&d, 2);
        let ec = EditCounts::from_dataset(&d, 2, 3).unwrap();
        let pc = PreferenceCounts::from_dataset(&prefs, 2, 3).unwrap();
        let pi_ref = env.pi_ref();
        let mut rng = stream(3, 0);
        for _ in 0..20 {
            let theta: Vec<Vec<f64>> = (0..2)
                .map(|_| dirichlet_flat(3, &mut rng).iter().map(|v| 4.0 * v - 1.5).collect())
                .collect();
            let (_, g) = sft_loss(&ec, pi_ref, &theta).unwrap();
            let fd = finite_difference(|t| sft_loss(&ec, pi_ref, t).unwrap().0, &theta);
            assert!(max_abs_diff(&g, &fd) < 1e-6);
            let (_, g) = preference_loss(&pc, &theta, 0.7);
            let fd = finite_difference(|t| preference_loss(&pc, t, 0.7).0, &theta);
            assert!(max_abs_diff(&g, &fd) < 1e-6);
            let (_, g) = early_ensemble_loss(&ec, &pc, pi_ref, &theta, 0.7, 2.5).unwrap();
            let fd = finite_difference(|t| early_ensemble_loss(&ec, &pc, pi_ref, t, 0.7, 2.5).unwrap().0, &theta);
            assert!(max_abs_diff(&g, &fd) < 1e-6);
        }
    }

    #[test]
    fn early_ensemble_at_zero_lambda_is_dpo() {
        let env = three_response_env();
        let d = sample_log(&env, 2_000, 6).unwrap();
        let prefs = build_preferences(&d, 6);
        let class = PolicyClass::for_env(&env);
        let opt = OptimizerSettings::default();
        let a = fit_dpo(&prefs, env.pi_ref(), 1.0, class, &opt).unwrap();
        let b = fit_early_ensemble(&d, &prefs, env.pi_ref(), 1.0, 0.0, class, &opt).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn dpo_recovers_cost_differences() {
        // two responses, one context: every record compares the same pair
        let env = example1_environment(2, 0.3, 1.0).unwrap();
        let d = sample_log(&env, 100_000, 8).unwrap();
        let prefs = build_preferences(&d, 8);
        let class = PolicyClass::for_env(&env);
        let fit = fit_dpo(&prefs, env.pi_ref(), 1.0, class, &OptimizerSettings::default()).unwrap();
        let beta = env.beta();
        let r = |y: usize| beta * (fit.policy.prob(0, y) / env.pi_ref().prob(0, y)).ln();
        let want = env.expected_cost(0, 0) - env.expected_cost(0, 1);
        assert!((r(1) - r(0) - want).abs() < 0.05, "{} vs {want}", r(1) - r(0));
        let star = optimal_policy(&env).unwrap().pi_star;
        assert!(env.expected_tv(&fit.policy, &star).unwrap() < 0.05);
    }

    #[test]
    fn large_lambda_approaches_clipped_sft() {
        let env = three_response_env();
        let d = sample_log(&env, 5_000, 10).unwrap();
        let prefs = build_preferences(&d, 10);
        let class = PolicyClass::for_env(&env);
        let opt = OptimizerSettings::default();
        let sft = fit_sft(&d, env.pi_ref(), class, &opt).unwrap();
        let ee = fit_early_ensemble(&d, &prefs, env.pi_ref(), 1.0, 1e6, class, &opt).unwrap();
        assert!(env.expected_tv(&sft.policy, &ee.policy).unwrap() < 0.01);
    }

    #[test]
    fn fitting_is_deterministic() {
        let env = three_response_env();
        let d = sample_log(&env, 1_000, 12).unwrap();
        let class = PolicyClass::for_env(&env);
        let opt = OptimizerSettings::default();
        assert_eq!(
            fit_sft(&d, env.pi_ref(), class, &opt).unwrap(),
            fit_sft(&d, env.pi_ref(), class, &opt).unwrap()
        );
    }

    #[test]
    fn class_certificate() {
        let class = PolicyClass::new(1.0, 0.5).unwrap();
        let pi_ref = Policy::from_rows(vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let b = class.theta_bound();
        let p = residual_policy(&pi_ref, &[vec![b, -b, b]]).unwrap();
        let worst = (0..3)
            .map(|y| (p.prob(0, y) / pi_ref.prob(0, y)).ln().abs())
            .fold(0.0, f64::max);
        assert!(worst <= class.v_max / class.beta + 1e-9);
        assert!(class.contains(&pi_ref, &p));
        let q = residual_policy(&pi_ref, &[vec![2.0 * b, -b, b]]).unwrap();
        assert!(!class.contains(&pi_ref, &q));
    }

    #[test]
    fn cost_regression_and_pessimism() {
        let env = three_response_env();
        let class = CostModelClass::standard(&env, 10, 0.2, 1).unwrap();
        let d = sample_log(&env, 100_000, 3).unwrap();
        let fit = fit_cost(&d, &class, 1.0, 0.1).unwrap();
        assert_eq!(fit.best, 0);
        assert!(fit.confidence.contains(&fit.best));
        let bar = pessimistic_cost(&class, &fit).unwrap();
        for (r, f) in bar.iter().flatten().zip(fit.f_hat.iter().flatten()) {
            assert!(r >= f);
        }

        let base = vec![vec![0.2, 0.4, 0.6]; 2];
        let shifted = base.iter().map(|r| r.iter().map(|v| v + 0.1).collect()).collect();
        let two = CostModelClass::new(
            vec![CostModel { id: "f1".into(), table: base }, CostModel { id: "f2".into(), table: shifted }],
            1.0,
        )
        .unwrap();
        let small = sample_log(&env, 3, 3).unwrap();
        let fit = fit_cost(&small, &two, 1.0, 0.1).unwrap();
        assert_eq!(fit.confidence, vec![0, 1]);
        assert_eq!(pessimistic_cost(&two, &fit).unwrap(), two.members[1].table);
    }

    #[test]
    fn singleton_confidence_gives_gibbs_policy() {
        let env = three_response_env();
        let one = CostModelClass::new(
            vec![CostModel { id: "truth".into(), table: env.cost_table().to_vec() }],
            env.c_max(),
        )
        .unwrap();
        let d = sample_log(&env, 100, 1).unwrap();
        let (fit, _) = fit_pessimistic_rl(&d, env.pi_ref(), &one, env.beta(), 1.0, 0.1).unwrap();
        let star = optimal_policy(&env).unwrap().pi_star;
        assert!(env.expected_tv(&fit.policy, &star).unwrap() < 1e-14);
    }
}
