//! Online interaction: fixed-policy deployment, the UCB late ensemble over a
//! list of policies, and epoch-wise supervised refitting on fresh edits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{draw_record, fmt_f64, EditDataset};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::objectives::{optimal_policy, subopt_with, OptimalPolicyResult};
use crate::offline::{fit_sft, tabular_mle, OptimizerSettings, PolicyClass};
use crate::rng::{purpose, stream};
use crate::spaces::Policy;

/// Cap on a single epoch length.
pub const MAX_EPOCH_LEN: usize = 1_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub total_cost: f64,
    pub pulls: usize,
}

impl ArmStats {
    pub fn update(&mut self, cost: f64) {
        self.total_cost += cost;
        self.pulls += 1;
    }

    pub fn mean(&self) -> f64 {
        self.total_cost / self.pulls as f64
    }
}

/// Rounds `1..=|Ψ|` play each arm once in order; later rounds play the
/// argmin of `C/N − α·sqrt(ln t / N)`, ties to the lowest index.
pub fn ucb_select(arms: &[ArmStats], t: usize, alpha: f64) -> Result<usize> {
    if t == 0 {
        return Err(Error::Parameter("rounds are numbered from 1".into()));
    }
    if arms.is_empty() {
        return Err(Error::Parameter("no arms to select from".into()));
    }
    if t <= arms.len() {
        return Ok(t - 1);
    }
    let log_t = (t as f64).ln();
    let mut best = 0;
    let mut best_index = f64::INFINITY;
    for (i, a) in arms.iter().enumerate() {
        if a.pulls == 0 {
            return Err(Error::Invariant(format!("arm {i} unpulled after initialization")));
        }
        let n = a.pulls as f64;
        let index = a.mean() - alpha * (log_t / n).sqrt();
        if index < best_index {
            best = i;
            best_index = index;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub t: usize,
    pub arm: usize,
    pub cost: f64,
    pub cum_cost: f64,
    pub subopt: f64,
    pub cum_regret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub start: usize,
    pub length: usize,
    /// `E_x TV(π_e, π⋆)`.
    pub tv_to_optimum: f64,
    /// `E_x TV(π_{e+1}, q∘π_e)`; absent for a final epoch that is not refit.
    pub tv_to_edit_target: Option<f64>,
    /// `δ/(2e²)`.
    pub confidence: f64,
    /// `sqrt(2·ln(|Π|/δ_e)/m_e)`.
    pub xi: f64,
}

/// Per-round trace of one online run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub rows: Vec<RoundRow>,
    pub pulls: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<EpochTrace>,
}

impl RunRecord {
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_cost)
    }

    pub fn mean_cost(&self) -> f64 {
        self.total_cost() / self.rows.len().max(1) as f64
    }

    pub fn regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_runs_csv(std::slice::from_ref(self), w)
    }
}

/// Writes several runs into one table with header
/// `t,method,arm,cost,cum_cost,subopt,cum_regret`.
pub fn write_runs_csv<W: Write>(runs: &[RunRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "method", "arm", "cost", "cum_cost", "subopt", "cum_regret"])?;
    for run in runs {
        for r in &run.rows {
            out.write_record([
                r.t.to_string(),
                run.method.clone(),
                r.arm.to_string(),
                fmt_f64(r.cost),
                fmt_f64(r.cum_cost),
                fmt_f64(r.subopt),
                fmt_f64(r.cum_regret),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

struct Tracker {
    rows: Vec<RoundRow>,
    cum_cost: f64,
    cum_regret: f64,
}

impl Tracker {
    fn with_capacity(n: usize) -> Self {
        Tracker { rows: Vec::with_capacity(n), cum_cost: 0.0, cum_regret: 0.0 }
    }

    fn push(&mut self, arm: usize, cost: f64, subopt: f64) {
        self.cum_cost += cost;
        self.cum_regret += subopt;
        self.rows.push(RoundRow {
            t: self.rows.len() + 1,
            arm,
            cost,
            cum_cost: self.cum_cost,
            subopt,
            cum_regret: self.cum_regret,
        });
    }
}

/// Deploys `pi` for `horizon` rounds.
pub fn run_fixed_policy(
    env: &Environment,
    pi: &Policy,
    method: &str,
    horizon: usize,
    seed: u64,
) -> Result<RunRecord> {
    let opt = optimal_policy(env)?;
    let mut run = run_late_ensemble_with(env, &opt, std::slice::from_ref(pi), horizon, 0.0, seed)?;
    run.method = method.into();
    Ok(run)
}

/// UCB over `policies` for `horizon` rounds; each round draws `x ∼ ρ`,
/// plays the selected policy, and observes the user's edit cost.
pub fn run_late_ensemble(
    env: &Environment,
    policies: &[Policy],
    horizon: usize,
    alpha: f64,
    seed: u64,
) -> Result<RunRecord> {
    let opt = optimal_policy(env)?;
    run_late_ensemble_with(env, &opt, policies, horizon, alpha, seed)
}

pub(crate) fn run_late_ensemble_with(
    env: &Environment,
    opt: &OptimalPolicyResult,
    policies: &[Policy],
    horizon: usize,
    alpha: f64,
    seed: u64,
) -> Result<RunRecord> {
    if policies.is_empty() {
        return Err(Error::Parameter("need at least one policy".into()));
    }
    if horizon < policies.len() {
        return Err(Error::Parameter(format!(
            "horizon {horizon} is shorter than the {} initialization rounds",
            policies.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be non-negative, got {alpha}")));
    }
    let subopts = policies
        .iter()
        .map(|p| subopt_with(env, opt, p))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(seed, purpose::ONLINE);
    let mut arms = vec![ArmStats::default(); policies.len()];
    let mut tracker = Tracker::with_capacity(horizon);
    for t in 1..=horizon {
        let arm = ucb_select(&arms, t, alpha)?;
        let rec = draw_record(env, &policies[arm], &mut rng);
        arms[arm].update(rec.cost);
        tracker.push(arm, rec.cost, subopts[arm]);
    }
    Ok(RunRecord {
        method: "late_ensemble".into(),
        rows: tracker.rows,
        pulls: arms.iter().map(|a| a.pulls).collect(),
        epochs: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub gamma_min: f64,
    pub log_pi_size: f64,
    pub delta: f64,
    pub horizon: usize,
    /// Epoch lengths; the last is truncated so they sum to `horizon`.
    pub lengths: Vec<usize>,
    /// Untruncated `m_e` for each scheduled epoch.
    pub planned: Vec<usize>,
    /// Whether some `m_e` hit [`MAX_EPOCH_LEN`].
    pub capped: bool,
}

impl EpochSchedule {
    pub fn num_epochs(&self) -> usize {
        self.lengths.len()
    }

    pub fn confidence(&self, epoch: usize) -> f64 {
        self.delta / (2.0 * (epoch * epoch) as f64)
    }
}

/// `m_e = ceil(2·(ln|Π| + ln(2e²/δ)) / (1−γ_min)^{2e})`, capped at
/// [`MAX_EPOCH_LEN`], until the cumulative length reaches `horizon`.
pub fn epoch_schedule(gamma_min: f64, log_pi_size: f64, delta: f64, horizon: usize) -> Result<EpochSchedule> {
    if !(gamma_min > 0.0 && gamma_min < 1.0) {
        return Err(Error::Parameter(format!("gamma_min must lie in (0, 1), got {gamma_min}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(log_pi_size >= 0.0 && log_pi_size.is_finite()) {
        return Err(Error::Parameter(format!("ln|Π| must be non-negative, got {log_pi_size}")));
    }
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    let mut lengths = Vec::new();
    let mut planned = Vec::new();
    let mut capped = false;
    let mut used = 0usize;
    let mut e = 1u32;
    while used < horizon {
        let ef = f64::from(e);
        let raw = 2.0 * (log_pi_size + (2.0 * ef * ef / delta).ln()) / (1.0 - gamma_min).powf(2.0 * ef);
        let m = if raw >= MAX_EPOCH_LEN as f64 {
            capped = true;
            MAX_EPOCH_LEN
        } else {
            raw.ceil() as usize
        };
        planned.push(m);
        let len = m.min(horizon - used);
        lengths.push(len);
        used += len;
        e += 1;
    }
    Ok(EpochSchedule { gamma_min, log_pi_size, delta, horizon, lengths, planned, capped })
}

/// How each epoch's policy is refit from its edits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpochFit {
    /// Empirical conditional frequencies, `π_ref` on unseen contexts.
    Tabular,
    /// Maximum likelihood within the clipped residual class.
    Clipped { class: PolicyClass, opt: OptimizerSettings },
}

/// Plays `π_1 = π_ref`, then in each epoch plays `π_e` for `m_e` rounds and
/// refits `π_{e+1}` on that epoch's edits (or on all edits so far if
/// `cumulative`).
pub fn run_epoch_supervised(
    env: &Environment,
    schedule: &EpochSchedule,
    fit: EpochFit,
    cumulative: bool,
    seed: u64,
) -> Result<RunRecord> {
    let opt = optimal_policy(env)?;
    let mut rng = stream(seed, purpose::EPOCH);
    let mut tracker = Tracker::with_capacity(schedule.horizon);
    let mut pi = env.pi_ref().clone();
    let mut epochs = Vec::with_capacity(schedule.num_epochs());
    let mut all = Vec::new();
    for (i, &len) in schedule.lengths.iter().enumerate() {
        let e = i + 1;
        let so = subopt_with(env, &opt, &pi)?;
        let start = tracker.rows.len() + 1;
        let mut batch = Vec::with_capacity(len);
        for _ in 0..len {
            let rec = draw_record(env, &pi, &mut rng);
            tracker.push(i, rec.cost, so);
            batch.push(rec);
        }
        let confidence = schedule.confidence(e);
        let mut trace = EpochTrace {
            epoch: e,
            start,
            length: len,
            tv_to_optimum: env.expected_tv(&pi, &opt.pi_star)?,
            tv_to_edit_target: None,
            confidence,
            xi: (2.0 * (schedule.log_pi_size - confidence.ln()) / len as f64).sqrt(),
        };
        if e < schedule.num_epochs() {
            let records = if cumulative {
                all.extend_from_slice(&batch);
                all.clone()
            } else {
                batch
            };
            let data = EditDataset { records, seed };
            let next = match fit {
                EpochFit::Tabular => tabular_mle(&data, env.pi_ref())?,
                EpochFit::Clipped { class, opt } => fit_sft(&data, env.pi_ref(), class, &opt)?.policy,
            };
            let target = env.compose_user(&pi)?;
            trace.tv_to_edit_target = Some(env.expected_tv(&next, &target)?);
            pi = next;
        }
        epochs.push(trace);
    }
    Ok(RunRecord {
        method: "epoch_sft".into(),
        rows: tracker.rows,
        pulls: schedule.lengths.clone(),
        epochs,
    })
}
