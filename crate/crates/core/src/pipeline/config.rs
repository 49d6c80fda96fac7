//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::InitMethod;
use crate::bo::{Clock, GpHyper};
use crate::error::{Error, Result};
use crate::mi::BitConfig;
use crate::models::{Arch, DatasetParams, TrainConfig};
use crate::prune::{Aggregation, ImportanceConfig, Order};
use crate::quant::QuantFormat;

/// Memory budget for allocation and search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    /// `floor + frac · (all-8-bit cost − floor)`.
    Relative(f64),
    Bytes(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub arch: Arch,
    pub data: DatasetParams,
    pub train: TrainConfig,
    pub prune_rate: f64,
    pub importance: ImportanceConfig,
    /// `None` keeps weights in fp32.
    pub quant: Option<QuantFormat>,
    pub quant_delta: Option<f32>,
    pub bins: usize,
    pub budget: Budget,
    pub cap_fraction: f64,
    pub bo_iters: usize,
    pub bo_random_init: usize,
    pub bo_length_scale: Option<f64>,
    pub bo_signal_var: f64,
    pub bo_noise_var: f64,
    /// `None` recovers without adapters.
    pub method: Option<InitMethod>,
    pub rank: usize,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub full_finetune: bool,
    /// Fixed configuration for the recover stage instead of the search's best.
    pub bits: Option<BitConfig>,
    pub out: PathBuf,
    pub clock: Clock,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            arch: Arch::MlpM,
            data: DatasetParams::default(),
            train: TrainConfig::default(),
            prune_rate: 0.3,
            importance: ImportanceConfig::default(),
            quant: Some(QuantFormat::Nf),
            quant_delta: None,
            bins: 16,
            budget: Budget::Relative(0.25),
            cap_fraction: 0.25,
            bo_iters: 10,
            bo_random_init: 0,
            bo_length_scale: None,
            bo_signal_var: 0.25,
            bo_noise_var: 1e-4,
            method: Some(InitMethod::LoftQ { iters: 1 }),
            rank: 8,
            lr: 2e-3,
            steps: 200,
            batch_size: 64,
            full_finetune: false,
            bits: None,
            out: PathBuf::from("runs/default"),
            clock: Clock::Logical,
        }
    }
}

fn opt_text<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

impl PipelineConfig {
    pub fn hyper(&self, layers: usize) -> GpHyper {
        let base = GpHyper::for_layers(layers);
        GpHyper {
            length_scale: self.bo_length_scale.unwrap_or(base.length_scale),
            signal_var: self.bo_signal_var,
            noise_var: self.bo_noise_var,
        }
    }

    /// Every key with its resolved value, in key order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let (method, iters) = match self.method {
            None => ("none".to_string(), 1),
            Some(InitMethod::LoftQ { iters }) => ("loftq".to_string(), iters),
            Some(m) => (m.to_string(), 1),
        };
        let (budget, frac) = match self.budget {
            Budget::Relative(f) => ("auto".to_string(), f),
            Budget::Bytes(b) => (b.to_string(), Budget::default_fraction()),
        };
        let clock = match self.clock {
            Clock::Logical => "logical",
            Clock::Wall => "wall",
        };
        BTreeMap::from([
            ("seed", self.seed.to_string()),
            ("model.arch", self.arch.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.dim", self.data.dim.to_string()),
            ("data.n", self.data.n.to_string()),
            ("data.clusters", self.data.clusters_per_class.to_string()),
            ("data.margin", self.data.margin.to_string()),
            ("data.noise", self.data.noise.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.batch", self.train.batch_size.to_string()),
            ("prune.rate", self.prune_rate.to_string()),
            ("prune.order", self.importance.order.to_string()),
            ("prune.aggregation", self.importance.aggregation.to_string()),
            ("prune.calib", self.importance.calib_size.to_string()),
            ("quant.kind", opt_text(&self.quant, "none")),
            ("quant.delta", opt_text(&self.quant_delta, "auto")),
            ("alloc.bins", self.bins.to_string()),
            ("alloc.budget", budget),
            ("alloc.budget_frac", frac.to_string()),
            ("alloc.cap", self.cap_fraction.to_string()),
            ("bo.iters", self.bo_iters.to_string()),
            ("bo.random_init", self.bo_random_init.to_string()),
            ("bo.length_scale", opt_text(&self.bo_length_scale, "auto")),
            ("bo.signal_var", self.bo_signal_var.to_string()),
            ("bo.noise_var", self.bo_noise_var.to_string()),
            ("recover.method", method),
            ("recover.iters", iters.to_string()),
            ("recover.rank", self.rank.to_string()),
            ("recover.lr", self.lr.to_string()),
            ("recover.steps", self.steps.to_string()),
            ("recover.batch", self.batch_size.to_string()),
            ("recover.full", self.full_finetune.to_string()),
            ("recover.bits", opt_text(&self.bits, "best")),
            ("run.out", self.out.display().to_string()),
            ("run.clock", clock.to_string()),
        ])
    }

    /// Canonical text: one `key=value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical text without `run.out`, so the same run in
    /// another directory hashes the same.
    pub fn hash(&self) -> String {
        let text: String =
            self.entries().iter().filter(|(k, _)| **k != "run.out").map(|(k, v)| format!("{k}={v}\n")).collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Parses config text; keys not present keep their defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| parse_err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        fn auto<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
            if v == "auto" { Ok(None) } else { num(key, v).map(Some) }
        }
        let v = value;
        match key {
            "seed" => self.seed = num(key, v)?,
            "model.arch" => self.arch = v.parse()?,
            "data.classes" => self.data.classes = num(key, v)?,
            "data.dim" => self.data.dim = num(key, v)?,
            "data.n" => self.data.n = num(key, v)?,
            "data.clusters" => self.data.clusters_per_class = num(key, v)?,
            "data.margin" => self.data.margin = num(key, v)?,
            "data.noise" => self.data.noise = num(key, v)?,
            "train.steps" => self.train.steps = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.batch" => self.train.batch_size = num(key, v)?,
            "prune.rate" => self.prune_rate = num(key, v)?,
            "prune.order" => self.importance.order = v.parse::<Order>()?,
            "prune.aggregation" => self.importance.aggregation = v.parse::<Aggregation>()?,
            "prune.calib" => self.importance.calib_size = num(key, v)?,
            "quant.kind" => self.quant = if v == "none" { None } else { Some(v.parse()?) },
            "quant.delta" => self.quant_delta = auto(key, v)?,
            "alloc.bins" => self.bins = num(key, v)?,
            "alloc.budget" => {
                self.budget = match auto::<u64>(key, v)? {
                    None => Budget::Relative(self.budget.fraction()),
                    Some(b) => Budget::Bytes(b),
                }
            }
            "alloc.budget_frac" => {
                let f = num(key, v)?;
                if let Budget::Relative(_) = self.budget {
                    self.budget = Budget::Relative(f);
                }
            }
            "alloc.cap" => self.cap_fraction = num(key, v)?,
            "bo.iters" => self.bo_iters = num(key, v)?,
            "bo.random_init" => self.bo_random_init = num(key, v)?,
            "bo.length_scale" => self.bo_length_scale = auto(key, v)?,
            "bo.signal_var" => self.bo_signal_var = num(key, v)?,
            "bo.noise_var" => self.bo_noise_var = num(key, v)?,
            "recover.method" => {
                let iters = match self.method {
                    Some(InitMethod::LoftQ { iters }) => iters,
                    _ => 1,
                };
                self.method = match v {
                    "none" => None,
                    "loftq" => Some(InitMethod::LoftQ { iters }),
                    other => Some(other.parse()?),
                }
            }
            "recover.iters" => {
                let iters: usize = num(key, v)?;
                if iters == 0 {
                    return Err(Error::config("recover.iters must be positive"));
                }
                if let Some(InitMethod::LoftQ { .. }) = self.method {
                    self.method = Some(InitMethod::LoftQ { iters });
                }
            }
            "recover.rank" => self.rank = num(key, v)?,
            "recover.lr" => self.lr = num(key, v)?,
            "recover.steps" => self.steps = num(key, v)?,
            "recover.batch" => self.batch_size = num(key, v)?,
            "recover.full" => self.full_finetune = num(key, v)?,
            "recover.bits" => self.bits = if v == "best" { None } else { Some(v.parse()?) },
            "run.out" => self.out = PathBuf::from(v),
            "run.clock" => {
                self.clock = match v {
                    "logical" => Clock::Logical,
                    "wall" => Clock::Wall,
                    other => return Err(Error::config(format!("unknown clock `{other}`"))),
                }
            }
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(0.0..1.0).contains(&self.prune_rate) {
            return bad(format!("prune.rate {} is outside [0, 1)", self.prune_rate));
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return bad(format!("alloc.cap {} is outside (0, 1]", self.cap_fraction));
        }
        if let Budget::Relative(f) = self.budget {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("alloc.budget_frac {f} is outside [0, 1]"));
            }
        }
        if self.bins < 2 {
            return bad("alloc.bins must be at least 2".into());
        }
        if self.importance.calib_size == 0 {
            return bad("prune.calib must be positive".into());
        }
        if self.rank == 0 && self.method.is_some() {
            return bad("recover.rank must be positive".into());
        }
        if self.train.batch_size == 0 || self.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.bo_signal_var <= 0.0 || self.bo_noise_var < 0.0 || self.bo_length_scale.is_some_and(|l| l <= 0.0) {
            return bad("kernel parameters must be positive".into());
        }
        if let Some(d) = self.quant_delta {
            if !(d > 0.0 && d < 0.5) {
                return bad(format!("quant.delta {d} is outside (0, 0.5)"));
            }
        }
        Ok(())
    }
}

impl Budget {
    fn default_fraction() -> f64 {
        0.25
    }

    fn fraction(self) -> f64 {
        match self {
            Budget::Relative(f) => f,
            Budget::Bytes(_) => Self::default_fraction(),
        }
    }

    pub fn resolve(self, floor: u64, ceiling: u64) -> u64 {
        match self {
            Budget::Bytes(b) => b,
            Budget::Relative(f) => floor + (f * ceiling.saturating_sub(floor) as f64).floor() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_overrides(["prune.rate=0.2", "recover.method=loftq", "recover.iters=4", "quant.kind=fp4"]).unwrap();
        let back = PipelineConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.method, Some(InitMethod::LoftQ { iters: 4 }));
    }

    #[test]
    fn hash_ignores_output_dir_and_explicit_defaults() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::parse("run.out = elsewhere\nprune.rate = 0.3 # default\n", Path::new("x")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig::parse("prune.rate = 0.2\n", Path::new("x")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn errors_name_the_line() {
        let err = PipelineConfig::parse("seed = 1\n\nbogus.key = 3\n", Path::new("cfg.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(PipelineConfig::parse("prune.rate = 1.0\n", Path::new("x")).is_err());
        assert!(PipelineConfig::parse("no equals sign\n", Path::new("x")).is_err());
    }
}
