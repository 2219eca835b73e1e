//! Finite context/response spaces and probability tables over them.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sample_categorical;

/// Tolerance used when validating that a probability vector sums to one.
pub const PROB_TOL: f64 = 1e-9;

/// One element of a finite space: an identifier and an optional token payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

impl Item {
    pub fn new(id: impl Into<String>) -> Self {
        Item {
            id: id.into(),
            tokens: None,
        }
    }

    pub fn with_tokens(id: impl Into<String>, tokens: &[&str]) -> Self {
        Item {
            id: id.into(),
            tokens: Some(tokens.iter().map(|t| t.to_string()).collect()),
        }
    }

    /// Builds an item whose tokens are the whitespace-separated words of `text`.
    pub fn from_text(id: impl Into<String>, text: &str) -> Self {
        Item {
            id: id.into(),
            tokens: Some(text.split_whitespace().map(str::to_owned).collect()),
        }
    }
}

/// An ordered, nonempty list of uniquely named items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Item>", into = "Vec<Item>")]
pub struct Space {
    items: Vec<Item>,
}

pub type ContextSpace = Space;
pub type ResponseSpace = Space;

impl Space {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Parameter("space must be nonempty".into()));
        }
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::Parameter(format!("duplicate identifier `{}`", it.id)));
            }
        }
        Ok(Space { items })
    }

    /// A space of `n` payload-free items named `{prefix}{i}`.
    pub fn named(prefix: &str, n: usize) -> Result<Self> {
        Space::new((0..n).map(|i| Item::new(format!("{prefix}{i}"))).collect())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &Item {
        &self.items[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|it| it.id == id)
    }
}

impl TryFrom<Vec<Item>> for Space {
    type Error = Error;

    fn try_from(items: Vec<Item>) -> Result<Self> {
        Space::new(items)
    }
}

impl From<Space> for Vec<Item> {
    fn from(s: Space) -> Self {
        s.items
    }
}

/// A probability vector over a finite space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates entries are finite and non-negative and sum to 1 within [`PROB_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Distribution { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Distribution::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over an empty space");
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, i: usize) -> Self {
        assert!(i < n, "point mass index out of range");
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Distribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Distribution::new(v)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Total-variation distance `½ Σ |p_i − r_i|`.
pub fn tv_distance(p: &Distribution, r: &Distribution) -> Result<f64> {
    tv_slices(p.probs(), r.probs())
}

pub(crate) fn tv_slices(p: &[f64], r: &[f64]) -> Result<f64> {
    if p.len() != r.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            r.len()
        )));
    }
    Ok(0.5 * p.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// A conditional probability table `π(y | x)`, one row per context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Distribution>", into = "Vec<Distribution>")]
pub struct Policy {
    rows: Vec<Distribution>,
}

impl Policy {
    pub fn new(rows: Vec<Distribution>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Shape("policy has no contexts".into()))?
            .len();
        if rows.iter().any(|r| r.len() != first) {
            return Err(Error::Shape("policy rows have differing lengths".into()));
        }
        Ok(Policy { rows })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Policy::new(rows.into_iter().map(Distribution::new).collect::<Result<_>>()?)
    }

    pub fn uniform(num_contexts: usize, num_responses: usize) -> Self {
        Policy {
            rows: vec![Distribution::uniform(num_responses); num_contexts],
        }
    }

    /// The policy putting all mass on `responses[x]` in context `x`.
    pub fn deterministic(responses: &[usize], num_responses: usize) -> Self {
        Policy {
            rows: responses
                .iter()
                .map(|&y| Distribution::point_mass(num_responses, y))
                .collect(),
        }
    }

    pub fn rows(&self) -> &[Distribution] {
        &self.rows
    }

    pub fn row(&self, x: usize) -> &Distribution {
        &self.rows[x]
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.rows[x].prob(y)
    }

    pub fn num_contexts(&self) -> usize {
        self.rows.len()
    }

    pub fn num_responses(&self) -> usize {
        self.rows[0].len()
    }

    pub fn to_table(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.probs().to_vec()).collect()
    }

    pub(crate) fn check_shape(&self, nx: usize, ny: usize) -> Result<()> {
        if self.num_contexts() != nx || self.num_responses() != ny {
            return Err(Error::Shape(format!(
                "policy is {}x{}, expected {nx}x{ny}",
                self.num_contexts(),
                self.num_responses()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<Distribution>> for Policy {
    type Error = Error;

    fn try_from(rows: Vec<Distribution>) -> Result<Self> {
        Policy::new(rows)
    }
}

impl From<Policy> for Vec<Distribution> {
    fn from(p: Policy) -> Self {
        p.rows
    }
}
