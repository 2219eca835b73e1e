//! User edit models that satisfy the balance equation
//! `q(y'|x,y) π⋆(y|x) = q(y|x,y') π⋆(y'|x)`, weak-user transforms, and the
//! validator for balance, steady state and contraction.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, UserEditModel};
use crate::error::{Error, Result};
use crate::metric::EditMetric;
use crate::objectives::optimal_policy;
use crate::rng::{dirichlet_flat, stream};
use crate::spaces::{tv_slices, ContextSpace, Distribution, Item, Policy, ResponseSpace, Space};

/// Seed of the contraction probe set.
pub const PROBE_SEED: u64 = 0xED17_5EED;
/// Number of random probe policies used by [`validate`].
pub const NUM_RANDOM_PROBES: usize = 100;

/// Output of [`build_example1`].
#[derive(Clone, Debug)]
pub struct Example1 {
    pub user: UserEditModel,
    pub costs: Vec<Vec<f64>>,
    pub beta: f64,
    pub metric: EditMetric,
}

/// The single-context construction where every response is edited to `y_N`
/// with probability `γ + (1−γ)/N` and to each other response with `(1−γ)/N`,
/// under the indicator metric `δ·[y ≠ y']`.
///
/// `β` is the closed-form solution of
/// `(1 + Nγ − γ)/(1 − γ) = exp(δγ/β)`, which makes the balance equation exact.
pub fn build_example1(n: usize, gamma_min: f64, delta: f64) -> Result<Example1> {
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 responses, got {n}")));
    }
    if !(gamma_min > 0.0 && gamma_min < 1.0) {
        return Err(Error::Parameter(format!("gamma_min must lie in (0, 1), got {gamma_min}")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
    }
    let nf = n as f64;
    let base = (1.0 - gamma_min) / nf;
    let mut probs = vec![base; n];
    probs[n - 1] = gamma_min + base;
    let row = Distribution::new(probs)?;
    let user = UserEditModel::with_certificate(vec![vec![row; n]], vec![gamma_min], vec![n - 1])?;

    let beta = delta * gamma_min / ((1.0 + nf * gamma_min - gamma_min) / (1.0 - gamma_min)).ln();
    let mut costs = vec![delta - delta * base; n];
    costs[n - 1] = delta - delta * (gamma_min + base);
    Ok(Example1 {
        user,
        costs: vec![costs],
        beta,
        metric: EditMetric::indicator(delta)?,
    })
}

/// The full single-context environment for [`build_example1`], with a uniform
/// reference policy.
pub fn example1_environment(n: usize, gamma_min: f64, delta: f64) -> Result<Environment> {
    let ex = build_example1(n, gamma_min, delta)?;
    Environment::new(
        Space::new(vec![Item::new("x")])?,
        Space::new((1..=n).map(|i| Item::new(format!("y{i}"))).collect())?,
        Distribution::point_mass(1, 0),
        Policy::uniform(1, n),
        ex.user,
        ex.metric,
        ex.beta,
    )
}

/// Solves `p(y) ∝ π_ref(y) exp(−Σ_{y'} Δ(y,y') p(y') / β)` by damped
/// fixed-point iteration. A user whose edit target is `p` regardless of the
/// current response then has expected cost `c(y) = Σ_{y'} Δ(y,y') p(y')`, and
/// its optimal policy is `p` itself.
fn self_consistent_target(reference: &[f64], edit_costs: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    let map = |p: &[f64]| -> Vec<f64> {
        let c: Vec<f64> = edit_costs
            .iter()
            .map(|row| row.iter().zip(p).map(|(d, q)| d * q).sum())
            .collect();
        let shift = c.iter().copied().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = reference
            .iter()
            .zip(&c)
            .map(|(&r, &cy)| if r > 0.0 { r * (-(cy - shift) / beta).exp() } else { 0.0 })
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    };
    let residual = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let mut p = reference.to_vec();
    let mut step = 1.0;
    let mut res = residual(&map(&p), &p);
    for _ in 0..200_000 {
        if res <= 1e-15 {
            break;
        }
        let f = map(&p);
        let cand: Vec<f64> = p.iter().zip(&f).map(|(a, b)| (1.0 - step) * a + step * b).collect();
        let cand_res = residual(&map(&cand), &cand);
        if cand_res < res || step < 1e-3 {
            p = cand;
            res = cand_res;
            step = (step * 1.5).min(1.0);
        } else {
            step *= 0.5;
        }
    }
    if res > 1e-13 {
        return Err(Error::Parameter(format!(
            "self-consistent edit target did not converge (residual {res:.3e}); try a larger beta"
        )));
    }
    Ok(p)
}

/// A balance-satisfying user whose edit target is the optimal policy,
/// independent of the current response, mixed with staying put:
/// `q(·|x,y) = (1−w)·π⋆(·|x) + w·1[· = y]`.
///
/// `π⋆` is the self-consistent optimum for the costs this user induces under
/// `metric` at regularization `beta`. The environment carrying this user must
/// use `(1−w)·beta`; see [`gibbs_environment`].
pub fn build_gibbs_user(
    responses: &ResponseSpace,
    pi_ref: &Policy,
    metric: &EditMetric,
    beta: f64,
    w: f64,
) -> Result<UserEditModel> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    if !(0.0..1.0).contains(&w) {
        return Err(Error::Parameter(format!("laziness w must lie in [0, 1), got {w}")));
    }
    let ny = responses.len();
    pi_ref.check_shape(pi_ref.num_contexts(), ny)?;
    let items = responses.items();
    let edit_costs: Vec<Vec<f64>> = (0..ny)
        .map(|i| (0..ny).map(|j| metric.cost(i, &items[i], j, &items[j])).collect())
        .collect::<Result<_>>()?;

    let mut table = Vec::with_capacity(pi_ref.num_contexts());
    let mut floors = Vec::new();
    let mut stars = Vec::new();
    for x in 0..pi_ref.num_contexts() {
        let target = self_consistent_target(pi_ref.row(x).probs(), &edit_costs, beta)?;
        let ystar = crate::spaces::argmax(&target);
        let rows = (0..ny)
            .map(|y| {
                let mut row: Vec<f64> = target.iter().map(|p| (1.0 - w) * p).collect();
                row[y] += w;
                Distribution::new(row)
            })
            .collect::<Result<Vec<_>>>()?;
        floors.push((1.0 - w) * target[ystar]);
        stars.push(ystar);
        table.push(rows);
    }
    UserEditModel::with_certificate(table, floors, stars)
}

/// Environment with a [`build_gibbs_user`] user and `β_env = (1−w)·beta`.
pub fn gibbs_environment(
    contexts: ContextSpace,
    responses: ResponseSpace,
    rho: Distribution,
    pi_ref: Policy,
    metric: EditMetric,
    beta: f64,
    w: f64,
) -> Result<Environment> {
    let user = build_gibbs_user(&responses, &pi_ref, &metric, beta, w)?;
    Environment::new(contexts, responses, rho, pi_ref, user, metric, (1.0 - w) * beta)
}

/// Lazy mixing with the identity editor: `(1−w)·q + w·I`.
///
/// Off-diagonal likelihood ratios are unchanged, expected costs and the
/// certified floor scale by `1−w`, and the optimal policy is preserved once
/// `β` is scaled by `1−w` as well.
pub fn weaken_user(q: &UserEditModel, w: f64) -> Result<UserEditModel> {
    if !(0.0..1.0).contains(&w) {
        return Err(Error::Parameter(format!("laziness w must lie in [0, 1), got {w}")));
    }
    let table = q
        .table()
        .iter()
        .map(|rows| {
            rows.iter()
                .enumerate()
                .map(|(y, r)| {
                    let mut v: Vec<f64> = r.probs().iter().map(|p| (1.0 - w) * p).collect();
                    v[y] += w;
                    Distribution::new(v)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let floors = q.gamma_floor().iter().map(|g| (1.0 - w) * g).collect();
    UserEditModel::with_certificate(table, floors, q.optimal_response().to_vec())
}

/// [`weaken_user`] applied to an environment, with `β ↦ (1−w)β`.
pub fn weaken_environment(env: &Environment, w: f64) -> Result<Environment> {
    env.with_user(weaken_user(env.user(), w)?, (1.0 - w) * env.beta())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `max |q(y'|x,y)π⋆(y|x) − q(y|x,y')π⋆(y'|x)|`.
    pub balance_residual: f64,
    /// Per context, `min_y q(y⋆|x,y)`.
    pub gamma_certified: Vec<f64>,
    /// `max_x TV(q∘π⋆(·|x), π⋆(·|x))`.
    pub steady_state_tv: f64,
    /// Worst ratio `TV(q∘π, π⋆) / TV(π, π⋆)` over probes and contexts.
    pub contraction_margin: f64,
    /// Worst `ratio − (1 − γ(x))`; positive means the contraction bound failed.
    pub contraction_excess: f64,
    pub probes_checked: usize,
}

/// 100 flat-Dirichlet policies from [`PROBE_SEED`], then `π_ref`, then the
/// point-mass policy on each response.
pub fn contraction_probes(env: &Environment) -> Vec<Policy> {
    let (nx, ny) = (env.num_contexts(), env.num_responses());
    let mut rng = stream(PROBE_SEED, crate::rng::purpose::PROBES);
    let mut probes: Vec<Policy> = (0..NUM_RANDOM_PROBES)
        .map(|_| {
            Policy::new(
                (0..nx)
                    .map(|_| Distribution::new(dirichlet_flat(ny, &mut rng)))
                    .collect::<Result<Vec<_>>>()
                    .expect("dirichlet draws are distributions"),
            )
            .expect("rows share a length")
        })
        .collect();
    probes.push(env.pi_ref().clone());
    probes.extend((0..ny).map(|y| Policy::deterministic(&vec![y; nx], ny)));
    probes
}

/// Checks the balance equation, the steady-state property and the
/// contraction property of `env`'s user. Failing assumptions are reported,
/// not raised.
pub fn validate(env: &Environment) -> Result<ValidationReport> {
    let star = optimal_policy(env)?.pi_star;
    let (nx, ny) = (env.num_contexts(), env.num_responses());
    let q = env.user();

    let mut balance: f64 = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            for yp in 0..ny {
                let lhs = q.prob(x, y, yp) * star.prob(x, y);
                let rhs = q.prob(x, yp, y) * star.prob(x, yp);
                balance = balance.max((lhs - rhs).abs());
            }
        }
    }

    let gamma_certified = (0..nx)
        .map(|x| {
            let ys = q.optimal_response()[x];
            (0..ny).map(|y| q.prob(x, y, ys)).fold(f64::INFINITY, f64::min)
        })
        .collect();

    let pushed = env.compose_user(&star)?;
    let mut steady: f64 = 0.0;
    for x in 0..nx {
        steady = steady.max(tv_slices(pushed.row(x).probs(), star.row(x).probs())?);
    }

    let probes = contraction_probes(env);
    let mut margin: f64 = 0.0;
    let mut excess = f64::NEG_INFINITY;
    for pi in &probes {
        let out = env.compose_user(pi)?;
        for x in 0..nx {
            let before = tv_slices(pi.row(x).probs(), star.row(x).probs())?;
            if before < 1e-12 {
                continue;
            }
            let ratio = tv_slices(out.row(x).probs(), star.row(x).probs())? / before;
            margin = margin.max(ratio);
            excess = excess.max(ratio - (1.0 - q.gamma_floor()[x]));
        }
    }
    Ok(ValidationReport {
        balance_residual: balance,
        gamma_certified,
        steady_state_tv: steady,
        contraction_margin: margin,
        contraction_excess: if excess.is_finite() { excess } else { 0.0 },
        probes_checked: probes.len(),
    })
}
