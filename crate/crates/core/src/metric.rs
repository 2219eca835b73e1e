//! Edit-distance metrics over responses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::Item;

/// Token-level Levenshtein distance; insert, delete and substitute each cost 1.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricKind {
    /// `δ · [y ≠ y']`.
    Indicator { delta: f64 },
    /// Levenshtein distance, clamped to `c_max`.
    LevenshteinRaw,
    /// Levenshtein distance divided by the token length of the agent response.
    LevenshteinNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMetric {
    #[serde(flatten)]
    pub kind: MetricKind,
    pub c_max: f64,
}

impl EditMetric {
    pub fn new(kind: MetricKind, c_max: f64) -> Result<Self> {
        if !(c_max > 0.0) || !c_max.is_finite() {
            return Err(Error::Parameter(format!("c_max must be positive, got {c_max}")));
        }
        if let MetricKind::Indicator { delta } = kind {
            if !(delta > 0.0) || delta > c_max {
                return Err(Error::Parameter(format!(
                    "indicator delta must lie in (0, c_max], got {delta}"
                )));
            }
        }
        Ok(EditMetric { kind, c_max })
    }

    /// Indicator metric with `c_max = δ`.
    pub fn indicator(delta: f64) -> Result<Self> {
        EditMetric::new(MetricKind::Indicator { delta }, delta)
    }

    pub fn needs_tokens(&self) -> bool {
        !matches!(self.kind, MetricKind::Indicator { .. })
    }

    /// Cost of editing response `y` (index `iy`) into `y_edit` (index `ie`).
    pub fn cost(&self, iy: usize, y: &Item, ie: usize, y_edit: &Item) -> Result<f64> {
        if iy == ie {
            return Ok(0.0);
        }
        let tokens = |it| item_tokens(it, &self.kind);
        let value = match self.kind {
            MetricKind::Indicator { delta } => delta,
            MetricKind::LevenshteinRaw => levenshtein(tokens(y)?, tokens(y_edit)?) as f64,
            MetricKind::LevenshteinNormalized => {
                let ty = tokens(y)?;
                levenshtein(ty, tokens(y_edit)?) as f64 / ty.len().max(1) as f64
            }
        };
        Ok(value.clamp(0.0, self.c_max))
    }
}

fn item_tokens<'a>(it: &'a Item, kind: &MetricKind) -> Result<&'a [String]> {
    it.tokens.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "response `{}` has no token payload, required by {kind:?}",
            it.id
        ))
    })
}
