//! User edit models and the environment bundle `(ρ, π_ref, q, Δ_edit, β)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::EditMetric;
use crate::spaces::{tv_slices, ContextSpace, Distribution, Policy, ResponseSpace};

/// Per-(context, response) distribution over edited responses, with a
/// certified floor on the probability of landing on the optimal response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserEditModel {
    table: Vec<Vec<Distribution>>,
    gamma_floor: Vec<f64>,
    optimal_response: Vec<usize>,
}

impl UserEditModel {
    /// Wraps a raw table and certifies the tightest floor it admits:
    /// `γ(x) = max_{y⋆} min_y q(y⋆ | x, y)`, ties to the lowest `y⋆`.
    pub fn from_table(table: Vec<Vec<Distribution>>) -> Result<Self> {
        check_table_shape(&table)?;
        let ny = table[0].len();
        let mut gamma_floor = Vec::with_capacity(table.len());
        let mut optimal_response = Vec::with_capacity(table.len());
        for rows in &table {
            let (mut best_y, mut best) = (0, f64::NEG_INFINITY);
            for cand in 0..ny {
                let m = rows.iter().map(|r| r.prob(cand)).fold(f64::INFINITY, f64::min);
                if m > best {
                    best = m;
                    best_y = cand;
                }
            }
            gamma_floor.push(best);
            optimal_response.push(best_y);
        }
        Ok(UserEditModel {
            table,
            gamma_floor,
            optimal_response,
        })
    }

    /// Wraps a table together with a caller-supplied certificate, checking
    /// `q(y⋆(x) | x, y) ≥ γ(x)` for every `y`.
    pub fn with_certificate(
        table: Vec<Vec<Distribution>>,
        gamma_floor: Vec<f64>,
        optimal_response: Vec<usize>,
    ) -> Result<Self> {
        check_table_shape(&table)?;
        if gamma_floor.len() != table.len() || optimal_response.len() != table.len() {
            return Err(Error::Shape("certificate length differs from context count".into()));
        }
        for (x, rows) in table.iter().enumerate() {
            let (g, ys) = (gamma_floor[x], optimal_response[x]);
            if !(0.0..=1.0).contains(&g) || ys >= rows.len() {
                return Err(Error::Parameter(format!("bad certificate at context {x}")));
            }
            if let Some(y) = rows.iter().position(|r| r.prob(ys) < g - 1e-12) {
                return Err(Error::Parameter(format!(
                    "q(y⋆={ys} | x={x}, y={y}) is below the certified floor {g}"
                )));
            }
        }
        Ok(UserEditModel {
            table,
            gamma_floor,
            optimal_response,
        })
    }

    /// The user who never edits.
    pub fn identity(num_contexts: usize, num_responses: usize) -> Self {
        let rows: Vec<Distribution> = (0..num_responses)
            .map(|y| Distribution::point_mass(num_responses, y))
            .collect();
        UserEditModel::from_table(vec![rows; num_contexts]).expect("identity table is well formed")
    }

    pub fn row(&self, x: usize, y: usize) -> &Distribution {
        &self.table[x][y]
    }

    pub fn prob(&self, x: usize, y: usize, y_edit: usize) -> f64 {
        self.table[x][y].prob(y_edit)
    }

    pub fn table(&self) -> &[Vec<Distribution>] {
        &self.table
    }

    pub fn gamma_floor(&self) -> &[f64] {
        &self.gamma_floor
    }

    pub fn optimal_response(&self) -> &[usize] {
        &self.optimal_response
    }

    pub fn num_contexts(&self) -> usize {
        self.table.len()
    }

    pub fn num_responses(&self) -> usize {
        self.table[0].len()
    }
}

fn check_table_shape(table: &[Vec<Distribution>]) -> Result<()> {
    let ny = table
        .first()
        .ok_or_else(|| Error::Shape("user table has no contexts".into()))?
        .len();
    if ny == 0 {
        return Err(Error::Shape("user table has no responses".into()));
    }
    for rows in table {
        if rows.len() != ny || rows.iter().any(|r| r.len() != ny) {
            return Err(Error::Shape("user table must be |X| x |Y| x |Y|".into()));
        }
    }
    Ok(())
}

/// Everything needed to simulate one deployment: spaces, context distribution,
/// reference policy, user, edit metric and regularization strength.
///
/// The pairwise edit costs and the expected-cost table
/// `c(x, y) = Σ_{y'} q(y' | x, y) Δ(y, y')` are computed once at construction.
#[derive(Clone, Debug)]
pub struct Environment {
    contexts: ContextSpace,
    responses: ResponseSpace,
    rho: Distribution,
    pi_ref: Policy,
    user: UserEditModel,
    metric: EditMetric,
    beta: f64,
    edit_costs: Vec<Vec<f64>>,
    costs: Vec<Vec<f64>>,
}

impl Environment {
    pub fn new(
        contexts: ContextSpace,
        responses: ResponseSpace,
        rho: Distribution,
        pi_ref: Policy,
        user: UserEditModel,
        metric: EditMetric,
        beta: f64,
    ) -> Result<Self> {
        let (nx, ny) = (contexts.len(), responses.len());
        if rho.len() != nx {
            return Err(Error::Shape(format!("rho has {} entries for {nx} contexts", rho.len())));
        }
        pi_ref.check_shape(nx, ny)?;
        if user.num_contexts() != nx || user.num_responses() != ny {
            return Err(Error::Shape("user model does not match the spaces".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
        }
        let edit_costs = edit_cost_matrix(&responses, &metric)?;
        let costs = (0..nx)
            .map(|x| {
                (0..ny)
                    .map(|y| {
                        let row = user.row(x, y).probs();
                        row.iter().zip(&edit_costs[y]).map(|(q, d)| q * d).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        Ok(Environment {
            contexts,
            responses,
            rho,
            pi_ref,
            user,
            metric,
            beta,
            edit_costs,
            costs,
        })
    }

    /// Same spaces, `ρ`, `π_ref` and metric with a different user and `β`.
    pub fn with_user(&self, user: UserEditModel, beta: f64) -> Result<Self> {
        Environment::new(
            self.contexts.clone(),
            self.responses.clone(),
            self.rho.clone(),
            self.pi_ref.clone(),
            user,
            self.metric,
            beta,
        )
    }

    pub fn contexts(&self) -> &ContextSpace {
        &self.contexts
    }

    pub fn responses(&self) -> &ResponseSpace {
        &self.responses
    }

    pub fn rho(&self) -> &Distribution {
        &self.rho
    }

    pub fn pi_ref(&self) -> &Policy {
        &self.pi_ref
    }

    pub fn user(&self) -> &UserEditModel {
        &self.user
    }

    pub fn metric(&self) -> &EditMetric {
        &self.metric
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn c_max(&self) -> f64 {
        self.metric.c_max
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn num_responses(&self) -> usize {
        self.responses.len()
    }

    /// `Δ_edit(y, y')` for response indices.
    pub fn edit_cost(&self, y: usize, y_edit: usize) -> f64 {
        self.edit_costs[y][y_edit]
    }

    pub fn edit_cost_matrix(&self) -> &[Vec<f64>] {
        &self.edit_costs
    }

    /// `c(x, y) = E_{y' ∼ q(·|x,y)} Δ_edit(y, y')`, exact.
    pub fn expected_cost(&self, x: usize, y: usize) -> f64 {
        self.costs[x][y]
    }

    pub fn cost_table(&self) -> &[Vec<f64>] {
        &self.costs
    }

    /// `(q∘π)(y' | x) = Σ_y q(y' | x, y) π(y | x)`.
    pub fn compose_user(&self, pi: &Policy) -> Result<Policy> {
        pi.check_shape(self.num_contexts(), self.num_responses())?;
        let ny = self.num_responses();
        let rows = (0..self.num_contexts())
            .map(|x| {
                let mut out = vec![0.0; ny];
                for (y, &p) in pi.row(x).probs().iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, q) in out.iter_mut().zip(self.user.row(x, y).probs()) {
                        *o += p * q;
                    }
                }
                Distribution::new(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Policy::new(rows)
    }

    /// `D(π_a, π_b) = E_{x∼ρ} TV(π_a(·|x), π_b(·|x))`.
    pub fn expected_tv(&self, a: &Policy, b: &Policy) -> Result<f64> {
        let (nx, ny) = (self.num_contexts(), self.num_responses());
        a.check_shape(nx, ny)?;
        b.check_shape(nx, ny)?;
        let mut total = 0.0;
        for x in 0..nx {
            total += self.rho.prob(x) * tv_slices(a.row(x).probs(), b.row(x).probs())?;
        }
        Ok(total)
    }
}

fn edit_cost_matrix(responses: &ResponseSpace, metric: &EditMetric) -> Result<Vec<Vec<f64>>> {
    let items = responses.items();
    items
        .iter()
        .enumerate()
        .map(|(i, a)| {
            items
                .iter()
                .enumerate()
                .map(|(j, b)| metric.cost(i, a, j, b))
                .collect()
        })
        .collect()
}
