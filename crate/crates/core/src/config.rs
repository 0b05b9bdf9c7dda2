//! Run configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters shared by every stage of a run.
///
/// `lambdas` weight the five objective terms in the order pixel, perceptual,
/// adversarial, illumination-preserving, identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub lambdas: [f64; 5],
    pub lr_main: f64,
    pub lr_flow: f64,
    pub lr_pretrain: f64,
    pub lr_embedder: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub scales: usize,
    pub vgg_layer_weights: Vec<f64>,
    pub gfilter_warmup_steps: u64,
    pub gfilter_eps: f64,
    /// Guided filter radius; `None` means a quarter of `resolution`.
    pub gfilter_radius: Option<usize>,
    pub resolution: usize,
    pub total_steps: u64,
    pub pretrain_epochs: usize,
    pub embedder_steps: u64,
    pub embedder_aux_identities: usize,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub seed: u64,
}

const DEFAULT_TOTAL_STEPS: u64 = 2000;

impl Default for Config {
    fn default() -> Self {
        Self {
            lambdas: [5.0, 1.0, 0.1, 15.0, 1.0],
            lr_main: 0.0004,
            lr_flow: 0.00005,
            lr_pretrain: 0.001,
            lr_embedder: 0.002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 8,
            scales: 3,
            vgg_layer_weights: vec![1.0, 0.5, 0.25, 0.25, 0.125],
            gfilter_warmup_steps: DEFAULT_TOTAL_STEPS / 10,
            gfilter_eps: 1e-2,
            gfilter_radius: None,
            resolution: 64,
            total_steps: DEFAULT_TOTAL_STEPS,
            pretrain_epochs: 4,
            embedder_steps: 600,
            embedder_aux_identities: 48,
            checkpoint_every: 500,
            sample_every: 500,
            seed: 0,
        }
    }
}

impl Config {
    pub fn gfilter_radius(&self) -> usize {
        self.gfilter_radius.unwrap_or((self.resolution / 4).max(1))
    }

    /// Sets the step budget and rescales the guided-filter warm-up to 10% of it.
    pub fn with_total_steps(mut self, steps: u64) -> Self {
        self.total_steps = steps;
        self.gfilter_warmup_steps = steps / 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return bad("resolution must be a positive multiple of 16");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.scales == 0 || self.resolution >> (self.scales - 1) < 4 {
            return bad("scales too large for resolution");
        }
        if self.vgg_layer_weights.len() != 5 {
            return bad("vgg_layer_weights needs exactly 5 entries");
        }
        if self.gfilter_eps <= 0.0 {
            return bad("gfilter_eps must be > 0");
        }
        if self.gfilter_radius == Some(0) {
            return bad("gfilter_radius must be >= 1");
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambdas must be finite and non-negative");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the flat `key = value` format. `#` starts a comment; unknown keys
    /// are rejected. When `total_steps` is given without
    /// `gfilter_warmup_steps`, the warm-up defaults to 10% of the steps.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut warmup_set = false;
        let mut steps_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let ctx = |e: String| Error::Config(format!("line {} ({key}): {e}", lineno + 1));
            match key {
                "lambdas" => {
                    let v = parse_list(value).map_err(ctx)?;
                    cfg.lambdas = v
                        .try_into()
                        .map_err(|_| ctx("expected 5 values".into()))?;
                }
                "lr_main" => cfg.lr_main = parse_num(value).map_err(ctx)?,
                "lr_flow" => cfg.lr_flow = parse_num(value).map_err(ctx)?,
                "lr_pretrain" => cfg.lr_pretrain = parse_num(value).map_err(ctx)?,
                "lr_embedder" => cfg.lr_embedder = parse_num(value).map_err(ctx)?,
                "adam_beta1" => cfg.adam_beta1 = parse_num(value).map_err(ctx)?,
                "adam_beta2" => cfg.adam_beta2 = parse_num(value).map_err(ctx)?,
                "batch_size" => cfg.batch_size = parse_num(value).map_err(ctx)?,
                "scales" => cfg.scales = parse_num(value).map_err(ctx)?,
                "vgg_layer_weights" => cfg.vgg_layer_weights = parse_list(value).map_err(ctx)?,
                "gfilter_warmup_steps" => {
                    cfg.gfilter_warmup_steps = parse_num(value).map_err(ctx)?;
                    warmup_set = true;
                }
                "gfilter_eps" => cfg.gfilter_eps = parse_num(value).map_err(ctx)?,
                "gfilter_radius" => {
                    cfg.gfilter_radius = if value == "auto" {
                        None
                    } else {
                        Some(parse_num(value).map_err(ctx)?)
                    }
                }
                "resolution" => cfg.resolution = parse_num(value).map_err(ctx)?,
                "total_steps" => {
                    cfg.total_steps = parse_num(value).map_err(ctx)?;
                    steps_set = true;
                }
                "pretrain_epochs" => cfg.pretrain_epochs = parse_num(value).map_err(ctx)?,
                "embedder_steps" => cfg.embedder_steps = parse_num(value).map_err(ctx)?,
                "embedder_aux_identities" => {
                    cfg.embedder_aux_identities = parse_num(value).map_err(ctx)?
                }
                "checkpoint_every" => cfg.checkpoint_every = parse_num(value).map_err(ctx)?,
                "sample_every" => cfg.sample_every = parse_num(value).map_err(ctx)?,
                "seed" => cfg.seed = parse_num(value).map_err(ctx)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        if steps_set && !warmup_set {
            cfg.gfilter_warmup_steps = cfg.total_steps / 10;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config in the same format `parse` accepts.
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut s = String::new();
        let _ = writeln!(s, "lambdas = {}", list(&self.lambdas));
        let _ = writeln!(s, "lr_main = {:?}", self.lr_main);
        let _ = writeln!(s, "lr_flow = {:?}", self.lr_flow);
        let _ = writeln!(s, "lr_pretrain = {:?}", self.lr_pretrain);
        let _ = writeln!(s, "lr_embedder = {:?}", self.lr_embedder);
        let _ = writeln!(s, "adam_beta1 = {:?}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {:?}", self.adam_beta2);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "scales = {}", self.scales);
        let _ = writeln!(s, "vgg_layer_weights = {}", list(&self.vgg_layer_weights));
        let _ = writeln!(s, "gfilter_warmup_steps = {}", self.gfilter_warmup_steps);
        let _ = writeln!(s, "gfilter_eps = {:?}", self.gfilter_eps);
        match self.gfilter_radius {
            Some(r) => {
                let _ = writeln!(s, "gfilter_radius = {r}");
            }
            None => {
                let _ = writeln!(s, "gfilter_radius = auto");
            }
        }
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "embedder_steps = {}", self.embedder_steps);
        let _ = writeln!(s, "embedder_aux_identities = {}", self.embedder_aux_identities);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "sample_every = {}", self.sample_every);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|x| parse_num::<f64>(x.trim())).collect()
}
