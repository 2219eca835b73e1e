//! Exact objectives: `J_β`, sub-optimality, the closed-form optimal policy,
//! implied Bradley-Terry preferences and concentrability diagnostics.

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::spaces::{Distribution, Policy};

/// `σ(t) = 1 / (1 + e^{-t})`, evaluated without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log σ(t)`, stable for large `|t|`.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// The KL-regularized minimizer for an arbitrary cost table:
/// `π(y|x) ∝ π_ref(y|x) · exp(−f(x,y)/β)`.
///
/// Returns the policy and `ln Z(x)` with `Z(x) = Σ_y π_ref(y|x) e^{−f(x,y)/β}`.
pub fn gibbs_policy(pi_ref: &Policy, costs: &[Vec<f64>], beta: f64) -> Result<(Policy, Vec<f64>)> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    pi_ref.check_shape(costs.len(), costs.first().map_or(0, Vec::len))?;
    let mut rows = Vec::with_capacity(costs.len());
    let mut log_z = Vec::with_capacity(costs.len());
    for (x, cx) in costs.iter().enumerate() {
        let r = pi_ref.row(x).probs();
        let shift = cx
            .iter()
            .zip(r)
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, _)| *c)
            .fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = cx
            .iter()
            .zip(r)
            .map(|(c, &p)| if p > 0.0 { p * (-(c - shift) / beta).exp() } else { 0.0 })
            .collect();
        let total: f64 = w.iter().sum();
        log_z.push(total.ln() - shift / beta);
        rows.push(Distribution::new(w.into_iter().map(|v| v / total).collect())?);
    }
    Ok((Policy::new(rows)?, log_z))
}

#[derive(Clone, Debug)]
pub struct OptimalPolicyResult {
    pub pi_star: Policy,
    /// `W⋆(x) = Σ_y π_ref(y|x) e^{−c(x,y)/β}`.
    pub z_norm: Vec<f64>,
    pub log_z: Vec<f64>,
    /// `J_β(π⋆) = E_x[−β ln Z(x)]`.
    pub j_beta_star: f64,
}

pub fn optimal_policy(env: &Environment) -> Result<OptimalPolicyResult> {
    let beta = env.beta();
    let (pi_star, log_z) = gibbs_policy(env.pi_ref(), env.cost_table(), beta)?;
    let j_beta_star = log_z
        .iter()
        .enumerate()
        .map(|(x, lz)| env.rho().prob(x) * (-beta * lz))
        .sum();
    Ok(OptimalPolicyResult {
        pi_star,
        z_norm: log_z.iter().map(|l| l.exp()).collect(),
        log_z,
        j_beta_star,
    })
}

/// `J_β(π) = E_{x∼ρ, y∼π}[c(x,y) + β ln(π(y|x)/π_ref(y|x))]`.
///
/// `β = 0` gives the unregularized `J_0`. Mass where `π_ref` is zero makes
/// the KL term (and the result) `+∞`.
pub fn j_beta(env: &Environment, pi: &Policy, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be non-negative, got {beta}")));
    }
    pi.check_shape(env.num_contexts(), env.num_responses())?;
    let mut total = 0.0;
    for x in 0..env.num_contexts() {
        let rx = env.rho().prob(x);
        if rx == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (y, &p) in pi.row(x).probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            inner += p * env.expected_cost(x, y);
            if beta > 0.0 {
                let r = env.pi_ref().prob(x, y);
                if r == 0.0 {
                    return Ok(f64::INFINITY);
                }
                inner += beta * p * (p / r).ln();
            }
        }
        total += rx * inner;
    }
    Ok(total)
}

/// Unregularized expected cost `J_0(π)`.
pub fn expected_policy_cost(env: &Environment, pi: &Policy) -> Result<f64> {
    j_beta(env, pi, 0.0)
}

/// `J_β(π) − J_β(π⋆)` at the environment's `β`.
pub fn subopt(env: &Environment, pi: &Policy) -> Result<f64> {
    let opt = optimal_policy(env)?;
    subopt_with(env, &opt, pi)
}

/// [`subopt`] against a precomputed optimum.
pub fn subopt_with(env: &Environment, opt: &OptimalPolicyResult, pi: &Policy) -> Result<f64> {
    Ok(j_beta(env, pi, env.beta())? - opt.j_beta_star)
}

/// `J_0(π) − J_0(π⋆)`.
pub fn subopt_unreg(env: &Environment, pi: &Policy) -> Result<f64> {
    let opt = optimal_policy(env)?;
    Ok(expected_policy_cost(env, pi)? - expected_policy_cost(env, &opt.pi_star)?)
}

/// Exhaustive minimizer of `Σ_y p_y (c_y + β ln(p_y/r_y))` over the simplex
/// grid `{p : p_y ∈ {0, 1/k, …, 1}, Σ p_y = 1}`.
///
/// The objective is separable, so the grid argmin is found by min-plus
/// convolution over coordinates instead of enumerating every point.
pub fn grid_minimizer(costs: &[f64], reference: &[f64], beta: f64, steps: usize) -> Result<Vec<f64>> {
    let ny = costs.len();
    if ny == 0 || reference.len() != ny || steps == 0 {
        return Err(Error::Shape("grid search needs matching nonempty rows and steps ≥ 1".into()));
    }
    let k = steps as f64;
    let term = |y: usize, i: usize| -> f64 {
        if i == 0 {
            return 0.0;
        }
        if reference[y] == 0.0 {
            return f64::INFINITY;
        }
        let p = i as f64 / k;
        let kl = if beta > 0.0 { beta * p * (p / reference[y]).ln() } else { 0.0 };
        p * costs[y] + kl
    };
    // best[y][m]: min over the coordinates y.. sharing m grid units; choice[y][m]: units given to y
    let mut best = vec![vec![f64::INFINITY; steps + 1]; ny];
    let mut choice = vec![vec![0usize; steps + 1]; ny];
    for m in 0..=steps {
        best[ny - 1][m] = term(ny - 1, m);
        choice[ny - 1][m] = m;
    }
    for y in (0..ny - 1).rev() {
        let t: Vec<f64> = (0..=steps).map(|i| term(y, i)).collect();
        for m in 0..=steps {
            for i in 0..=m {
                let v = t[i] + best[y + 1][m - i];
                if v < best[y][m] {
                    best[y][m] = v;
                    choice[y][m] = i;
                }
            }
        }
    }
    if !best[0][steps].is_finite() {
        return Err(Error::Invariant("grid search found no finite point".into()));
    }
    let mut left = steps;
    let mut out = Vec::with_capacity(ny);
    for row in &choice {
        let i = row[left];
        out.push(i as f64 / k);
        left -= i;
    }
    Ok(out)
}

/// Grid-search minimizer of `J_β` for every context, resolution `1/steps`.
pub fn grid_search_policy(env: &Environment, steps: usize) -> Result<Policy> {
    let rows = (0..env.num_contexts())
        .map(|x| {
            let p = grid_minimizer(&env.cost_table()[x], env.pi_ref().row(x).probs(), env.beta(), steps)?;
            Distribution::from_weights(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Policy::new(rows)
}

/// Probability that `y'` is preferred over `y`, computed two ways.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BtProbability {
    /// `σ((c(x,y) − c(x,y'))/β)`.
    pub sigmoid: f64,
    /// `π_ref(y)q(y'|y) / (π_ref(y)q(y'|y) + π_ref(y')q(y|y'))`.
    pub mechanistic: f64,
}

pub fn bt_probability(env: &Environment, x: usize, y: usize, y_prime: usize) -> Result<BtProbability> {
    let sig = sigmoid((env.expected_cost(x, y) - env.expected_cost(x, y_prime)) / env.beta());
    let r = env.pi_ref();
    let fwd = r.prob(x, y) * env.user().prob(x, y, y_prime);
    let back = r.prob(x, y_prime) * env.user().prob(x, y_prime, y);
    if fwd + back == 0.0 {
        return Err(Error::UndefinedPreference { x, y, y_prime });
    }
    Ok(BtProbability {
        sigmoid: sig,
        mechanistic: fwd / (fwd + back),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Largest `β·|ln π/π_ref|` over the probe policies.
    pub v_max: f64,
    /// `sqrt(E_{ρ×π_ref}[(π⋆/π_ref)²])`.
    pub c_bar_star: f64,
    /// Largest preference-concentrability ratio over the probes; a lower
    /// estimate of the supremum over the whole class.
    pub c_pref_estimate: f64,
    /// `1 − min_x γ(x)`.
    pub eta_max: f64,
    /// `sqrt(E_ρ[(1 − γ(x))²])`.
    pub eta_bar_max: f64,
}

pub fn diagnostics(env: &Environment, probes: &[Policy]) -> Result<Diagnostics> {
    let opt = optimal_policy(env)?;
    let beta = env.beta();
    let (nx, ny) = (env.num_contexts(), env.num_responses());
    let rho = env.rho();
    let r = env.pi_ref();
    let star = &opt.pi_star;

    let mut c2 = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            let (s, p) = (star.prob(x, y), r.prob(x, y));
            if s > 0.0 {
                c2 += if p > 0.0 { rho.prob(x) * s * s / p } else { f64::INFINITY };
            }
        }
    }

    let mut v_max: f64 = 0.0;
    let mut c_pref: f64 = 0.0;
    for pi in probes {
        pi.check_shape(nx, ny)?;
        for x in 0..nx {
            for y in 0..ny {
                let (p, q) = (pi.prob(x, y), r.prob(x, y));
                if p == 0.0 && q == 0.0 {
                    continue;
                }
                v_max = v_max.max(beta * (p / q).ln().abs());
            }
        }
        let num = pref_concentrability_term(env, star, pi, pi);
        let den = pref_concentrability_term(env, star, r, pi);
        let ratio = if den > 0.0 {
            num / den
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            // 0/0 (e.g. the probe is π⋆ itself): the probe carries no information.
            continue;
        };
        c_pref = c_pref.max(ratio);
    }

    let floors = env.user().gamma_floor();
    let min_floor = floors.iter().copied().fold(f64::INFINITY, f64::min);
    let eta_bar2: f64 = (0..nx).map(|x| rho.prob(x) * (1.0 - floors[x]).powi(2)).sum();
    Ok(Diagnostics {
        v_max,
        c_bar_star: c2.sqrt(),
        c_pref_estimate: c_pref,
        eta_max: 1.0 - min_floor,
        eta_bar_max: eta_bar2.sqrt(),
    })
}

/// `E_{(x,ỹ,ỹ')∼Q_sampler} |β ln(π(ỹ')/π⋆(ỹ')) − β ln(π(ỹ)/π⋆(ỹ))|` with
/// `Q_s(x,ỹ,ỹ') = ½ρ(x)(s(ỹ')π⋆(ỹ) + π⋆(ỹ')s(ỹ))`.
fn pref_concentrability_term(env: &Environment, star: &Policy, sampler: &Policy, pi: &Policy) -> f64 {
    let beta = env.beta();
    let ny = env.num_responses();
    let mut total = 0.0;
    for x in 0..env.num_contexts() {
        let g: Vec<f64> = (0..ny)
            .map(|y| beta * (pi.prob(x, y) / star.prob(x, y)).ln())
            .collect();
        for a in 0..ny {
            for b in 0..ny {
                let w = 0.5
                    * env.rho().prob(x)
                    * (sampler.prob(x, b) * star.prob(x, a) + star.prob(x, b) * sampler.prob(x, a));
                if w == 0.0 || a == b {
                    continue;
                }
                let d = g[b] - g[a];
                total += if d.is_nan() { 0.0 } else { w * d.abs() };
            }
        }
    }
    total
}
