//! TOML documents describing environments and experiments.
//!
//! An environment document names its spaces, `ρ`, `π_ref`, metric and `β`,
//! and a `[user]` table selecting a constructor (`example1`, `gibbs`) or a raw
//! `table`, optionally followed by lazy weakening (`weaken_w`, or
//! `weaken_to_gamma` to hit a target floor).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{Environment, UserEditModel};
use crate::error::{Error, Result};
use crate::metric::EditMetric;
use crate::offline::OptimizerSettings;
use crate::spaces::{Distribution, Item, Policy, Space};
use crate::users::{build_example1, gibbs_environment, weaken_environment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemSpec {
    pub id: String,
    /// Whitespace-tokenized into the token payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

/// A space given either by its size (items named by index) or item by item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceSpec {
    Count(usize),
    Items(Vec<ItemSpec>),
}

impl SpaceSpec {
    fn build(&self, prefix: &str) -> Result<Space> {
        match self {
            SpaceSpec::Count(n) => Space::named(prefix, *n),
            SpaceSpec::Items(items) => Space::new(
                items
                    .iter()
                    .map(|it| match (&it.text, &it.tokens) {
                        (Some(_), Some(_)) => Err(Error::Config(format!(
                            "item `{}` has both `text` and `tokens`",
                            it.id
                        ))),
                        (Some(t), None) => Ok(Item::from_text(it.id.clone(), t)),
                        (None, tokens) => Ok(Item { id: it.id.clone(), tokens: tokens.clone() }),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }

    fn from_space(space: &Space) -> Self {
        SpaceSpec::Items(
            space
                .items()
                .iter()
                .map(|it| ItemSpec { id: it.id.clone(), text: None, tokens: it.tokens.clone() })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserKind {
    /// Single context, `n` responses, indicator metric; fixes every other
    /// environment field.
    Example1 { n: usize, gamma_min: f64, delta: f64 },
    /// Edits land on the optimal policy at regularization `beta`, staying
    /// put with probability `w`; the environment's `β` becomes `(1−w)·beta`.
    Gibbs {
        beta: f64,
        #[serde(default)]
        w: f64,
    },
    /// Explicit `q[x][y][y']`.
    Table { table: Vec<Vec<Vec<f64>>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    #[serde(flatten)]
    pub kind: UserKind,
    /// Lazy mixing with the identity editor, `(1−w)·q + w·I`, with `β ↦ (1−w)β`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weaken_w: Option<f64>,
    /// Weakens so that the smallest certified floor equals this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weaken_to_gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<SpaceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<SpaceSpec>,
    /// Defaults to uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    /// Defaults to uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_ref: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<EditMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub user: UserSpec,
}

impl EnvSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// An explicit `table` spec reproducing `env` exactly.
    pub fn from_environment(env: &Environment) -> Self {
        EnvSpec {
            contexts: Some(SpaceSpec::from_space(env.contexts())),
            responses: Some(SpaceSpec::from_space(env.responses())),
            rho: Some(env.rho().probs().to_vec()),
            pi_ref: Some(env.pi_ref().to_table()),
            metric: Some(*env.metric()),
            beta: Some(env.beta()),
            user: UserSpec {
                kind: UserKind::Table {
                    table: env
                        .user()
                        .table()
                        .iter()
                        .map(|rows| rows.iter().map(|r| r.probs().to_vec()).collect())
                        .collect(),
                },
                weaken_w: None,
                weaken_to_gamma: None,
            },
        }
    }

    pub fn build(&self) -> Result<Environment> {
        let env = match &self.user.kind {
            UserKind::Example1 { n, gamma_min, delta } => {
                if self.contexts.is_some()
                    || self.responses.is_some()
                    || self.rho.is_some()
                    || self.pi_ref.is_some()
                    || self.metric.is_some()
                    || self.beta.is_some()
                {
                    return Err(Error::Config(
                        "an example1 user fixes the spaces, rho, pi_ref, metric and beta; remove them".into(),
                    ));
                }
                let ex = build_example1(*n, *gamma_min, *delta)?;
                Environment::new(
                    Space::new(vec![Item::new("x")])?,
                    Space::new((1..=*n).map(|i| Item::new(format!("y{i}"))).collect())?,
                    Distribution::point_mass(1, 0),
                    Policy::uniform(1, *n),
                    ex.user,
                    ex.metric,
                    ex.beta,
                )?
            }
            UserKind::Gibbs { beta, w } => {
                if self.beta.is_some() {
                    return Err(Error::Config(
                        "a gibbs user sets beta itself (environment beta = (1 - w)·beta); remove the top-level beta"
                            .into(),
                    ));
                }
                let (contexts, responses, rho, pi_ref, metric) = self.skeleton()?;
                gibbs_environment(contexts, responses, rho, pi_ref, metric, *beta, *w)?
            }
            UserKind::Table { table } => {
                let beta = self
                    .beta
                    .ok_or_else(|| Error::Config("a table user needs a top-level beta".into()))?;
                let (contexts, responses, rho, pi_ref, metric) = self.skeleton()?;
                let rows = table
                    .iter()
                    .map(|rows| rows.iter().map(|r| Distribution::new(r.clone())).collect())
                    .collect::<Result<Vec<Vec<_>>>>()?;
                Environment::new(contexts, responses, rho, pi_ref, UserEditModel::from_table(rows)?, metric, beta)?
            }
        };
        match (self.user.weaken_w, self.user.weaken_to_gamma) {
            (Some(_), Some(_)) => Err(Error::Config("set at most one of weaken_w and weaken_to_gamma".into())),
            (Some(w), None) => weaken_environment(&env, w),
            (None, Some(g)) => {
                let base = env.user().gamma_floor().iter().copied().fold(f64::INFINITY, f64::min);
                if !(g > 0.0 && g <= base) {
                    return Err(Error::Config(format!(
                        "weaken_to_gamma must lie in (0, {base}], the strong user's floor; got {g}"
                    )));
                }
                weaken_environment(&env, 1.0 - g / base)
            }
            (None, None) => Ok(env),
        }
    }

    #[allow(clippy::type_complexity)]
    fn skeleton(&self) -> Result<(Space, Space, Distribution, Policy, EditMetric)> {
        let contexts = match &self.contexts {
            Some(s) => s.build("x")?,
            None => Space::named("x", 1)?,
        };
        let responses = self
            .responses
            .as_ref()
            .ok_or_else(|| Error::Config("missing `responses`".into()))?
            .build("y")?;
        let rho = match &self.rho {
            Some(r) => Distribution::new(r.clone())?,
            None => Distribution::uniform(contexts.len()),
        };
        let pi_ref = match &self.pi_ref {
            Some(t) => Policy::from_rows(t.clone())?,
            None => Policy::uniform(contexts.len(), responses.len()),
        };
        let metric = self.metric.ok_or_else(|| Error::Config("missing `metric`".into()))?;
        let metric = EditMetric::new(metric.kind, metric.c_max)?;
        Ok((contexts, responses, rho, pi_ref, metric))
    }
}

/// An environment given inline or by a path relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    File { file: PathBuf },
    Inline(Box<EnvSpec>),
}

impl EnvSource {
    pub fn resolve(&self, base_dir: &Path) -> Result<EnvSpec> {
        match self {
            EnvSource::Inline(spec) => Ok((**spec).clone()),
            EnvSource::File { file } => EnvSpec::load(&base_dir.join(file)),
        }
    }
}

pub const METHOD_NAMES: [&str; 6] = ["base", "sft", "dpo", "early_ensemble", "pessimistic_rl", "epoch_sft"];

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.1
}

fn default_perturbed() -> usize {
    20
}

fn default_noise() -> f64 {
    0.1
}

fn default_log_pi_size() -> f64 {
    1e4_f64.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodKind {
    /// `π_ref`, untrained.
    Base,
    Sft {
        /// Empirical frequencies instead of the clipped class.
        #[serde(default)]
        tabular: bool,
    },
    Dpo {
        #[serde(default = "one")]
        scale: f64,
    },
    EarlyEnsemble {
        lambda: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    PessimisticRl {
        #[serde(default = "one")]
        b: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        /// Number of perturbed copies of the true cost table in the class.
        #[serde(default = "default_perturbed")]
        perturbed: usize,
        /// Half-width of the perturbation, in units of `c_max`.
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Online: refits on each epoch's edits from the test user.
    EpochSft {
        #[serde(default = "default_log_pi_size")]
        log_pi_size: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default)]
        cumulative: bool,
    },
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Base => "base",
            MethodKind::Sft { .. } => "sft",
            MethodKind::Dpo { .. } => "dpo",
            MethodKind::EarlyEnsemble { .. } => "early_ensemble",
            MethodKind::PessimisticRl { .. } => "pessimistic_rl",
            MethodKind::EpochSft { .. } => "epoch_sft",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// Distinguishes several runs of one method; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodSpec {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.kind.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateEnsembleSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Defaults to the test environment's `c_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Labels of the offline methods to ensemble; defaults to every trained
    /// offline method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<String>>,
}

impl Default for LateEnsembleSpec {
    fn default() -> Self {
        LateEnsembleSpec { enabled: true, alpha: None, members: None }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// Defaults to `2·c_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted key path into this document → values to substitute.
    pub axes: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Environment the offline log is drawn from.
    pub train: EnvSource,
    /// Environment of the online phase; defaults to `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<EnvSource>,
    /// Offline log size; `0` skips training (only `base` and `epoch_sft` apply).
    pub n: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub late_ensemble: Option<LateEnsembleSpec>,
    #[serde(default)]
    pub class: ClassSpec,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Directory that relative environment paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(s)?;
        Self::from_table(value)
    }

    pub fn from_table(value: toml::Table) -> Result<Self> {
        if let Some(toml::Value::Array(methods)) = value.get("methods") {
            for m in methods {
                if let Some(name) = m.get("method").and_then(toml::Value::as_str) {
                    if !METHOD_NAMES.contains(&name) {
                        return Err(Error::UnknownMethod(name.to_owned()));
                    }
                }
            }
        }
        let cfg: ExperimentConfig = value.try_into()?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut labels: Vec<&str> = self.methods.iter().map(MethodSpec::label).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate method label `{}`", w[0])));
        }
        if labels.contains(&"late_ensemble") {
            return Err(Error::Config("`late_ensemble` is reserved for the ensemble run".into()));
        }
        if self.n == 0 {
            if let Some(m) = self
                .methods
                .iter()
                .find(|m| !matches!(m.kind, MethodKind::Base | MethodKind::EpochSft { .. }))
            {
                return Err(Error::Config(format!("method `{}` needs n ≥ 1", m.label())));
            }
        }
        Ok(())
    }

    pub fn train_spec(&self) -> Result<EnvSpec> {
        self.train.resolve(&self.base_dir)
    }

    pub fn test_spec(&self) -> Result<EnvSpec> {
        self.test.as_ref().unwrap_or(&self.train).resolve(&self.base_dir)
    }
}
