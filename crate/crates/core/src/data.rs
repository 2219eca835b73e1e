//! Deployment logs `{(x_i, y_i, y'_i, c_i)}` and their CSV form.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::spaces::Policy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub x: usize,
    pub y: usize,
    pub y_edit: usize,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditDataset {
    pub records: Vec<EditRecord>,
    pub seed: u64,
}

impl EditDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the `x,y,y_edit,cost` columnar form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "y", "y_edit", "cost"])?;
        for r in &self.records {
            out.write_record([
                r.x.to_string(),
                r.y.to_string(),
                r.y_edit.to_string(),
                fmt_f64(r.cost),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads the columnar form and re-checks every cost against `env`'s metric.
    pub fn read_csv<R: Read>(r: R, env: &Environment, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["x", "y", "y_edit", "cost"] {
            return Err(Error::Config(format!("unexpected dataset header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let rec: EditRecord = row?;
            if rec.x >= env.num_contexts()
                || rec.y >= env.num_responses()
                || rec.y_edit >= env.num_responses()
            {
                return Err(Error::Config(format!("record {rec:?} is out of range")));
            }
            let want = env.edit_cost(rec.y, rec.y_edit);
            if (rec.cost - want).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "record {rec:?} has cost {} but the metric gives {want}",
                    rec.cost
                )));
            }
            records.push(rec);
        }
        Ok(EditDataset { records, seed })
    }
}

/// Seventeen significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Draws one interaction: `x ∼ ρ`, `y ∼ π(·|x)`, `y' ∼ q(·|x, y)`.
pub fn draw_record<R: Rng + ?Sized>(env: &Environment, pi: &Policy, rng: &mut R) -> EditRecord {
    let x = env.rho().sample(rng);
    let y = pi.row(x).sample(rng);
    let y_edit = env.user().row(x, y).sample(rng);
    EditRecord {
        x,
        y,
        y_edit,
        cost: env.edit_cost(y, y_edit),
    }
}

/// `n` i.i.d. records under `π_ref` on the offline-log stream of `seed`.
pub fn sample_log(env: &Environment, n: usize, seed: u64) -> Result<EditDataset> {
    sample_log_with(env, env.pi_ref(), n, seed)
}

/// Like [`sample_log`] but responses are drawn from an arbitrary policy.
pub fn sample_log_with(env: &Environment, pi: &Policy, n: usize, seed: u64) -> Result<EditDataset> {
    if n == 0 {
        return Err(Error::Parameter("sample size must be at least 1".into()));
    }
    pi.check_shape(env.num_contexts(), env.num_responses())?;
    let mut rng = stream(seed, purpose::OFFLINE_LOG);
    let records = (0..n).map(|_| draw_record(env, pi, &mut rng)).collect();
    Ok(EditDataset { records, seed })
}
