use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DomainSpec;
use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::surgery::UpdateRule;
use crate::trainer::{default_epochs, Target, TrainConfig};
use crate::vlm::VlmSpec;

/// A target-domain gap for the domain-shift protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub rotation_deg: f64,
    pub shift: f64,
}

/// One experiment document. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub vlm: VlmSpec,
    pub domain: DomainSpec,
    pub shots: Vec<usize>,
    pub rules: Vec<UpdateRule>,
    /// Grid for `lambda-sweep`.
    pub lambdas: Vec<f64>,
    /// Seed labels; each run's RNG seed is derived from `(master_seed, label)`.
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    /// Target gaps for `domainshift`.
    pub gaps: Vec<Gap>,
    /// Shot counts traced by `angles`.
    pub angle_shots: Vec<usize>,
    /// Overrides the per-shot epoch budget.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr0: f64,
    pub warmup_lr: f64,
    pub target: Target,
    /// Random instances checked by `gradcheck`.
    pub gradcheck_cases: usize,
    /// Fill `wallclock_ms`; off by default so outputs stay byte-stable.
    pub record_wallclock: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            experiment: "default".into(),
            vlm: VlmSpec::default(),
            domain: DomainSpec::default(),
            shots: vec![1, 2, 4, 8, 16],
            rules: vec![UpdateRule::Ce, UpdateRule::Prograd { lambda: 1.0 }],
            lambdas: vec![0.0, 0.2, 0.4, 0.7, 0.9, 1.0],
            seeds: vec![1, 2, 3],
            master_seed: 0,
            gaps: [0.0, 30.0, 60.0, 90.0].map(|d| Gap { rotation_deg: d, shift: 0.0 }).to_vec(),
            angle_shots: vec![1, 2, 4],
            epochs: None,
            batch_size: train.batch_size,
            lr0: train.lr0,
            warmup_lr: train.warmup_lr,
            target: Target::Prompt,
            gradcheck_cases: 100,
            record_wallclock: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.vlm.validate()?;
        self.domain.validate()?;
        if self.domain.k != self.vlm.k || self.domain.feat_dim != self.vlm.feat_dim {
            return Err(Error::Config("domain k/feat_dim must match the model".into()));
        }
        if self.shots.is_empty() || self.rules.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("shots, rules and seeds must be nonempty".into()));
        }
        if self.shots.contains(&0) || self.angle_shots.contains(&0) {
            return Err(Error::Config("shot counts must be >= 1".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        for rule in &self.rules {
            rule.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("lambda grid must lie in [0, 1]".into()));
        }
        if self.gaps.iter().any(|g| !(g.rotation_deg >= 0.0 && g.shift >= 0.0)) {
            return Err(Error::Config("gaps must be >= 0".into()));
        }
        self.train_config(UpdateRule::Ce, 1, 0).validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the seed list with `n` labels derived from the master seed.
    pub fn with_seed_count(mut self, n: usize) -> Self {
        self.seeds = (0..n as u64).map(|i| derive_seed(self.master_seed, i) % 1_000_000).collect();
        self
    }

    /// RNG seed for the run labelled `label`.
    pub fn run_seed(&self, label: u64) -> u64 {
        derive_seed(self.master_seed, label)
    }

    pub fn train_config(&self, rule: UpdateRule, shots: usize, run_seed: u64) -> TrainConfig {
        TrainConfig {
            rule,
            lr0: self.lr0,
            warmup_lr: self.warmup_lr,
            epochs: self.epochs.unwrap_or_else(|| default_epochs(shots)),
            batch_size: self.batch_size,
            target: self.target,
            seed: run_seed,
        }
    }
}
