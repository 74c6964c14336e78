//! Experiment plans: a TOML file describing cohorts, fixed run settings and
//! the hyperparameter grid.

use std::path::{Path, PathBuf};

use gluadfl::cohort::{NormScope, WindowSpec};
use gluadfl::learner::{LearnerKind, LearnerSpec};
use gluadfl::metrics::GPenaltySpec;
use gluadfl::timeseries::SynthCohortSpec;
use gluadfl::topology::TopologyKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub cohorts: Vec<CohortSource>,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default)]
    pub grid: Grid,
    pub personalize: Option<PersonalizeSettings>,
    /// Directory relative CSV paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("gluadfl-out")
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}

/// A named cohort, either generated or read from a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSource {
    pub name: String,
    pub synthetic: Option<SynthCohortSpec>,
    pub csv: Option<PathBuf>,
    pub interval_minutes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gluadfl,
    Fedavg,
    Pooled,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gluadfl => "gluadfl",
            Method::Fedavg => "fedavg",
            Method::Pooled => "pooled",
        }
    }
}

/// Settings shared by every grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub rounds: usize,
    pub batch_size: usize,
    pub local_steps: usize,
    pub eval_every: usize,
    pub comm_batch: usize,
    pub cluster_size: usize,
    pub grad_at_aggregate: bool,
    pub clip_norm: Option<f64>,
    pub weight_by_samples: bool,
    pub learner: LearnerKind,
    pub input_len: usize,
    pub horizon: usize,
    pub init_scale: f64,
    pub norm_scope: NormScope,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub penalty: GPenaltySpec,
    /// Let the time-lag metric report predictions that lead the readings.
    pub negative_lags: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            rounds: 500,
            batch_size: 64,
            local_steps: 1,
            eval_every: 10,
            comm_batch: 7,
            cluster_size: 4,
            grad_at_aggregate: false,
            clip_norm: None,
            weight_by_samples: false,
            learner: LearnerKind::Lstm,
            input_len: 12,
            horizon: 6,
            init_scale: 0.1,
            norm_scope: NormScope::Pooled,
            train_fraction: 0.6,
            val_fraction: 0.2,
            penalty: GPenaltySpec::default(),
            negative_lags: false,
        }
    }
}

impl RunSettings {
    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len,
            horizon: self.horizon,
        }
    }

    pub fn learner_spec(&self, hidden_size: usize) -> LearnerSpec {
        let base = match self.learner {
            LearnerKind::Lstm => LearnerSpec::lstm(self.input_len, hidden_size, 0),
            LearnerKind::Linear => LearnerSpec::linear(self.input_len, 0),
        };
        LearnerSpec {
            init_scale: self.init_scale,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub methods: Vec<Method>,
    /// Decentralized topologies; FedAvg always runs on the star.
    pub topologies: Vec<TopologyKind>,
    pub inactive_ratios: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            methods: vec![Method::Gluadfl],
            topologies: vec![TopologyKind::Random],
            inactive_ratios: vec![0.0],
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            hidden_sizes: vec![128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizeSettings {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
}

fn default_ft_batch() -> usize {
    64
}

/// One training job: a cohort, a method and one point of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cohort: String,
    pub method: Method,
    /// `star` for FedAvg and `pooled` for pooled training.
    pub topology: String,
    pub rho: f64,
    pub learning_rate: f64,
    pub hidden_size: usize,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}__{}__{}__rho{}__lr{:e}__h{}__seed{}",
            self.cohort,
            self.method.name(),
            self.topology,
            self.rho,
            self.learning_rate,
            self.hidden_size,
            self.seed
        )
    }

    pub fn group(&self) -> GroupKey {
        GroupKey {
            cohort: self.cohort.clone(),
            method: self.method,
            topology: self.topology.clone(),
            rho_millis: (self.rho * 1000.0).round() as u32,
        }
    }
}

/// Cells sharing everything but hyperparameters and seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub cohort: String,
    pub method: Method,
    pub topology: String,
    pub rho_millis: u32,
}

impl GroupKey {
    pub fn rho(&self) -> f64 {
        f64::from(self.rho_millis) / 1000.0
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let plan: Self = toml::from_str(text).map_err(|e| HarnessError::Config(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut plan = Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        plan.base_dir = path.parent().map(Path::to_path_buf);
        Ok(plan)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |at: &str, msg: &str| Err(HarnessError::Config(format!("{at}: {msg}")));
        if self.name.trim().is_empty() {
            return bad("name", "must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        if self.cohorts.is_empty() {
            return bad("cohorts", "at least one cohort is required");
        }
        for (i, c) in self.cohorts.iter().enumerate() {
            let at = format!("cohorts[{i}]");
            if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
                return bad(&format!("{at}.name"), "use letters, digits, '_' or '-'");
            }
            if self.cohorts[..i].iter().any(|o| o.name == c.name) {
                return bad(&format!("{at}.name"), "duplicate cohort name");
            }
            match (&c.synthetic, &c.csv) {
                (Some(s), None) => {
                    s.validate().map_err(|e| HarnessError::Config(format!("{at}.synthetic: {e}")))?;
                }
                (None, Some(_)) => {}
                _ => return bad(&at, "set exactly one of `synthetic` or `csv`"),
            }
        }
        let r = &self.run;
        if r.rounds == 0 {
            return bad("run.rounds", "must be >= 1");
        }
        for (key, v) in [
            ("run.batch_size", r.batch_size),
            ("run.local_steps", r.local_steps),
            ("run.eval_every", r.eval_every),
            ("run.comm_batch", r.comm_batch),
            ("run.cluster_size", r.cluster_size),
            ("run.input_len", r.input_len),
            ("run.horizon", r.horizon),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if !(r.init_scale >= 0.0 && r.init_scale.is_finite()) {
            return bad("run.init_scale", "must be finite and >= 0");
        }
        if let Some(c) = r.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("run.clip_norm", "must be positive");
            }
        }
        let (tr, va) = (r.train_fraction, r.val_fraction);
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            return bad("run.train_fraction", "train and val fractions must be positive and sum below 1");
        }
        r.penalty
            .validate()
            .map_err(|e| HarnessError::Config(format!("run.penalty: {e}")))?;

        let g = &self.grid;
        for (key, empty) in [
            ("grid.methods", g.methods.is_empty()),
            ("grid.inactive_ratios", g.inactive_ratios.is_empty()),
            ("grid.learning_rates", g.learning_rates.is_empty()),
            ("grid.hidden_sizes", g.hidden_sizes.is_empty()),
        ] {
            if empty {
                return bad(key, "must list at least one value");
            }
        }
        if g.methods.contains(&Method::Gluadfl) && g.topologies.is_empty() {
            return bad("grid.topologies", "gluadfl needs at least one topology");
        }
        for (i, t) in g.topologies.iter().enumerate() {
            if *t == TopologyKind::Star {
                return bad(&format!("grid.topologies[{i}]"), "star is the FedAvg topology; add `fedavg` to grid.methods");
            }
        }
        for (i, rho) in g.inactive_ratios.iter().enumerate() {
            if !(0.0..1.0).contains(rho) {
                return bad(&format!("grid.inactive_ratios[{i}]"), "must be in [0, 1)");
            }
        }
        for (i, lr) in g.learning_rates.iter().enumerate() {
            if !(*lr > 0.0 && lr.is_finite()) {
                return bad(&format!("grid.learning_rates[{i}]"), "must be positive");
            }
        }
        for (i, h) in g.hidden_sizes.iter().enumerate() {
            if r.learner == LearnerKind::Lstm {
                r.learner_spec(*h)
                    .validate()
                    .map_err(|e| HarnessError::Config(format!("grid.hidden_sizes[{i}]: {e}")))?;
            }
        }
        if let Some(p) = &self.personalize {
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return bad("personalize.learning_rate", "must be positive");
            }
            if p.batch_size == 0 {
                return bad("personalize.batch_size", "must be >= 1");
            }
        }
        Ok(())
    }

    /// Every training job, in a fixed order. FedAvg ignores the topology
    /// axis and pooled training ignores both topology and inactive ratio.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let hidden: Vec<usize> = match self.run.learner {
            LearnerKind::Lstm => g.hidden_sizes.clone(),
            LearnerKind::Linear => vec![0],
        };
        let mut out = Vec::new();
        for cohort in &self.cohorts {
            for &method in &g.methods {
                let (topologies, rhos): (Vec<String>, Vec<f64>) = match method {
                    Method::Gluadfl => (
                        g.topologies.iter().map(|t| t.name().to_owned()).collect(),
                        g.inactive_ratios.clone(),
                    ),
                    Method::Fedavg => (vec!["star".into()], g.inactive_ratios.clone()),
                    Method::Pooled => (vec!["pooled".into()], vec![0.0]),
                };
                for topology in &topologies {
                    for &rho in &rhos {
                        for &learning_rate in &g.learning_rates {
                            for &hidden_size in &hidden {
                                for &seed in &self.seeds {
                                    out.push(Cell {
                                        cohort: cohort.name.clone(),
                                        method,
                                        topology: topology.clone(),
                                        rho,
                                        learning_rate,
                                        hidden_size,
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// SHA-256 of the plan's canonical JSON form, output location excluded.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("plans serialize");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
