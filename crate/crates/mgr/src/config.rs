//! Run configuration: a small sectioned key = value format, strict about
//! unknown keys, with dotted-path overrides. The fully resolved document is
//! written into every run directory and checkpoint so a run can be
//! reproduced bit-for-bit from its artifacts.

use crate::error::{MgrError, Result};
use crate::model::{ModelConfig, Wiring};
use crate::optim::OptimConfig;
use crate::train::{RecomputeMode, RecomputePlan, TrainSettings};

/// Numeric precision of a run (applies to every tensor in the run).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(MgrError::Config(format!(
                "unknown precision '{other}' (expected single or double)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    // [model]
    pub model: ModelConfig,
    // [optim]
    pub optim: OptimConfig,
    // [train]
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub recompute: RecomputeMode,
    pub recompute_p: f64,
    pub beta_max: f64,
    pub eval_every: u64,
    pub eval_batches: usize,
    pub checkpoint_every: u64,
    pub log_wall_ms: bool,
    // [data]
    pub corpus: String,
    pub split_fraction: f64,
    // [diagnostics]
    pub probe_samples: usize,
    pub probe_batch: usize,
}

impl Default for RunConfig {
    /// The desk-scale configuration (6 blocks, d_model 128) used by the
    /// bundled `desk.cfg`.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                n_layers: 6,
                d_model: 128,
                n_heads: 4,
                d_head: 32,
                vocab_size: 256,
                context_len: 256,
                wiring: Wiring::MgrCompetitive,
                n_stream: 4,
                rope_theta: 10000.0,
                b_base: -3.0,
                l_base: 21.0,
                tie_embeddings: true,
            },
            optim: OptimConfig::default(),
            batch_size: 32,
            total_steps: 2000,
            warmup_steps: 200,
            seed: 0,
            precision: Precision::Single,
            recompute: RecomputeMode::StoreAll,
            recompute_p: 0.01,
            beta_max: 1.0 - 1e-4,
            eval_every: 250,
            eval_batches: 8,
            checkpoint_every: 0,
            log_wall_ms: true,
            corpus: String::new(),
            split_fraction: 0.9,
            probe_samples: 512,
            probe_batch: 8,
        }
    }
}

impl RunConfig {
    /// Parse a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["model", "optim", "train", "data", "diagnostics"].contains(&section.as_str())
                {
                    return Err(MgrError::Config(format!(
                        "unknown section [{section}] at line {}",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MgrError::Config(format!("expected key = value at line {}: '{line}'", lineno + 1))
            })?;
            cfg.set(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            MgrError::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Apply a dotted override like `train.seed=7`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            MgrError::Config(format!("override '{spec}' is not of the form section.key=value"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            MgrError::Config(format!("override key '{path}' must be section.key"))
        })?;
        self.set(section, key, value.trim())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || {
            Err(MgrError::Config(format!(
                "unknown key '{key}' in section [{section}]"
            )))
        };
        match section {
            "model" => match key {
                "n_layers" => self.model.n_layers = parse_num(key, value)?,
                "d_model" => self.model.d_model = parse_num(key, value)?,
                "n_heads" => self.model.n_heads = parse_num(key, value)?,
                "d_head" => self.model.d_head = parse_num(key, value)?,
                "vocab_size" => self.model.vocab_size = parse_num(key, value)?,
                "context_len" => self.model.context_len = parse_num(key, value)?,
                "wiring" => self.model.wiring = Wiring::parse(value)?,
                "n_stream" => self.model.n_stream = parse_num(key, value)?,
                "rope_theta" => self.model.rope_theta = parse_f64(key, value)?,
                "b_base" => self.model.b_base = parse_f64(key, value)?,
                "l_base" => self.model.l_base = parse_f64(key, value)?,
                "tie_embeddings" => self.model.tie_embeddings = parse_bool(key, value)?,
                _ => return unknown(),
            },
            "optim" => match key {
                "adamw_lr" => self.optim.adamw_lr = parse_f64(key, value)?,
                "muon_lr" => self.optim.muon_lr = parse_f64(key, value)?,
                "beta1" => self.optim.beta1 = parse_f64(key, value)?,
                "beta2" => self.optim.beta2 = parse_f64(key, value)?,
                "adamw_eps" => self.optim.adamw_eps = parse_f64(key, value)?,
                "weight_decay" => self.optim.weight_decay = parse_f64(key, value)?,
                "muon_momentum" => self.optim.muon_momentum = parse_f64(key, value)?,
                "ns_iters" => self.optim.ns_iters = parse_num(key, value)?,
                "grad_clip" => self.optim.grad_clip = parse_f64(key, value)?,
                _ => return unknown(),
            },
            "train" => match key {
                "batch_size" => self.batch_size = parse_num(key, value)?,
                "total_steps" => self.total_steps = parse_num(key, value)?,
                "warmup_steps" => self.warmup_steps = parse_num(key, value)?,
                "seed" => self.seed = parse_num(key, value)?,
                "precision" => self.precision = Precision::parse(value)?,
                "recompute" => self.recompute = RecomputeMode::parse(value)?,
                "recompute_p" => self.recompute_p = parse_f64(key, value)?,
                "beta_max" => self.beta_max = parse_f64(key, value)?,
                "eval_every" => self.eval_every = parse_num(key, value)?,
                "eval_batches" => self.eval_batches = parse_num(key, value)?,
                "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
                "log_wall_ms" => self.log_wall_ms = parse_bool(key, value)?,
                _ => return unknown(),
            },
            "data" => match key {
                "corpus" => self.corpus = value.to_string(),
                "split_fraction" => self.split_fraction = parse_f64(key, value)?,
                _ => return unknown(),
            },
            "diagnostics" => match key {
                "probe_samples" => self.probe_samples = parse_num(key, value)?,
                "probe_batch" => self.probe_batch = parse_num(key, value)?,
                _ => return unknown(),
            },
            "" => {
                return Err(MgrError::Config(format!(
                    "key '{key}' appears before any [section] header"
                )))
            }
            other => {
                return Err(MgrError::Config(format!("unknown section [{other}]")));
            }
        }
        Ok(())
    }

    /// Canonical serialization: every field, fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        format!(
            "[model]\n\
             n_layers = {}\nd_model = {}\nn_heads = {}\nd_head = {}\n\
             vocab_size = {}\ncontext_len = {}\nwiring = {}\nn_stream = {}\n\
             rope_theta = {}\nb_base = {}\nl_base = {}\ntie_embeddings = {}\n\
             \n[optim]\n\
             adamw_lr = {}\nmuon_lr = {}\nbeta1 = {}\nbeta2 = {}\nadamw_eps = {}\n\
             weight_decay = {}\nmuon_momentum = {}\nns_iters = {}\ngrad_clip = {}\n\
             \n[train]\n\
             batch_size = {}\ntotal_steps = {}\nwarmup_steps = {}\nseed = {}\n\
             precision = {}\nrecompute = {}\nrecompute_p = {}\nbeta_max = {}\n\
             eval_every = {}\neval_batches = {}\ncheckpoint_every = {}\nlog_wall_ms = {}\n\
             \n[data]\n\
             corpus = {}\nsplit_fraction = {}\n\
             \n[diagnostics]\n\
             probe_samples = {}\nprobe_batch = {}\n",
            m.n_layers,
            m.d_model,
            m.n_heads,
            m.d_head,
            m.vocab_size,
            m.context_len,
            m.wiring.name(),
            m.n_stream,
            m.rope_theta,
            m.b_base,
            m.l_base,
            m.tie_embeddings,
            o.adamw_lr,
            o.muon_lr,
            o.beta1,
            o.beta2,
            o.adamw_eps,
            o.weight_decay,
            o.muon_momentum,
            o.ns_iters,
            o.grad_clip,
            self.batch_size,
            self.total_steps,
            self.warmup_steps,
            self.seed,
            self.precision.name(),
            self.recompute.name(),
            self.recompute_p,
            self.beta_max,
            self.eval_every,
            self.eval_batches,
            self.checkpoint_every,
            self.log_wall_ms,
            self.corpus,
            self.split_fraction,
            self.probe_samples,
            self.probe_batch,
        )
    }

    /// Stable identifier of the resolved configuration.
    pub fn hash_hex(&self) -> String {
        format!("{:016x}", crate::ckpt::fnv1a(self.to_text().as_bytes()))
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            recompute: RecomputePlan {
                mode: self.recompute,
                p: self.recompute_p,
                beta_max: self.beta_max,
            },
            eval_every: self.eval_every,
            eval_batches: self.eval_batches,
            checkpoint_every: self.checkpoint_every,
            log_wall_ms: self.log_wall_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(MgrError::Config("batch_size and total_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.recompute_p) {
            return Err(MgrError::Config(format!(
                "recompute_p must be in [0, 1], got {}",
                self.recompute_p
            )));
        }
        if self.corpus.is_empty() {
            return Err(MgrError::Config(
                "data.corpus must name the corpus file (set it in the config \
                 or with --override data.corpus=PATH)"
                    .into(),
            ));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MgrError::Config(format!("key '{key}': '{value}' is not a valid integer")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| MgrError::Config(format!("key '{key}': '{value}' is not a valid number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MgrError::Config(format!(
            "key '{key}': '{value}' is not a valid boolean (true/false)"
        ))),
    }
}
