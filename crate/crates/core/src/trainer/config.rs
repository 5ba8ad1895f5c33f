//! `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::causal::MechanismKind;
use crate::encoder::{GnnKind, GnnVariant};
use crate::error::{Error, Result};
use crate::hetnet::EdgeMask;
use crate::objective::{LossWeights, MmdConfig};

pub const SEED_ENV: &str = "GRACE_SEED";

/// Recognized keys, in the order they are written.
pub const KEYS: [&str; 18] = [
    "latent_dim",
    "gnn",
    "gnn_layers",
    "hidden",
    "embed",
    "lr",
    "batch_size",
    "epochs",
    "alpha_max",
    "beta_max",
    "lambda",
    "temp_max",
    "mmd_sigma",
    "kernel_num",
    "mechanism",
    "edge_mask",
    "seed",
    "split",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `None` sizes the latent space to the number of single interventions.
    pub latent_dim: Option<usize>,
    pub gnn: GnnKind,
    pub gnn_layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha_max: f64,
    pub beta_max: f64,
    pub lambda: f64,
    pub temp_max: f64,
    pub mmd_sigma: f64,
    pub kernel_num: usize,
    pub mechanism: MechanismKind,
    pub edge_mask: EdgeMask,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: None,
            gnn: GnnKind::Sage,
            gnn_layers: 1,
            hidden: 128,
            embed: 16,
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            alpha_max: 8.0,
            beta_max: 2.0,
            lambda: 1e-4,
            temp_max: 4.0,
            mmd_sigma: 1000.0,
            kernel_num: 10,
            mechanism: MechanismKind::Mlp,
            edge_mask: EdgeMask::ALL,
            seed: 0,
            split: [0.7, 0.1, 0.2],
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse '{v}'")))
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, format!("must be positive, got {v}")))
    }
}

fn nonneg(key: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, format!("must be nonnegative, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize> {
    if v >= min {
        Ok(v)
    } else {
        Err(bad(key, format!("must be at least {min}, got {v}")))
    }
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "latent_dim" => {
                self.latent_dim = if v == "auto" { None } else { Some(at_least(key, num(key, v)?, 1)?) }
            }
            "gnn" => self.gnn = v.parse().map_err(|e: String| bad(key, e))?,
            "gnn_layers" => {
                let l = num(key, v)?;
                GnnVariant::new(self.gnn, l).map_err(|e| bad(key, e.to_string()))?;
                self.gnn_layers = l;
            }
            "hidden" => self.hidden = at_least(key, num(key, v)?, 1)?,
            "embed" => self.embed = at_least(key, num(key, v)?, 1)?,
            "lr" => self.lr = nonneg(key, num(key, v)?)?,
            "batch_size" => self.batch_size = at_least(key, num(key, v)?, 2)?,
            "epochs" => self.epochs = at_least(key, num(key, v)?, 1)?,
            "alpha_max" => self.alpha_max = nonneg(key, num(key, v)?)?,
            "beta_max" => self.beta_max = nonneg(key, num(key, v)?)?,
            "lambda" => self.lambda = nonneg(key, num(key, v)?)?,
            "temp_max" => self.temp_max = positive(key, num(key, v)?)?,
            "mmd_sigma" => self.mmd_sigma = positive(key, num(key, v)?)?,
            "kernel_num" => self.kernel_num = at_least(key, num(key, v)?, 1)?,
            "mechanism" => self.mechanism = v.parse().map_err(|e: String| bad(key, e))?,
            "edge_mask" => self.edge_mask = v.parse().map_err(|e: String| bad(key, e))?,
            "seed" => self.seed = num(key, v)?,
            "split" => {
                let parts: Vec<f64> = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
                if parts.len() != 3 || parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || parts[0] <= 0.0 {
                    return Err(bad(key, "expected three fractions like 0.7,0.1,0.2"));
                }
                if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(bad(key, "fractions must sum to 1"));
                }
                self.split = [parts[0], parts[1], parts[2]];
            }
            _ => return Err(bad(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(bad(line, format!("expected 'key = value' ({source}:{})", i + 1)));
            };
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config { key, msg } => Error::Config {
                    key,
                    msg: format!("{msg} ({source}:{})", i + 1),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `GRACE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v).map_err(|_| bad("seed", format!("{SEED_ENV}='{v}' is not an integer"))),
            Err(_) => Ok(()),
        }
    }

    pub fn value(&self, key: &str) -> Option<String> {
        Some(match key {
            "latent_dim" => self.latent_dim.map_or("auto".into(), |p| p.to_string()),
            "gnn" => self.gnn.to_string(),
            "gnn_layers" => self.gnn_layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "embed" => self.embed.to_string(),
            "lr" => format!("{:?}", self.lr),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "alpha_max" => format!("{:?}", self.alpha_max),
            "beta_max" => format!("{:?}", self.beta_max),
            "lambda" => format!("{:?}", self.lambda),
            "temp_max" => format!("{:?}", self.temp_max),
            "mmd_sigma" => format!("{:?}", self.mmd_sigma),
            "kernel_num" => self.kernel_num.to_string(),
            "mechanism" => self.mechanism.to_string(),
            "edge_mask" => self.edge_mask.to_string(),
            "seed" => self.seed.to_string(),
            "split" => format!("{:?},{:?},{:?}", self.split[0], self.split[1], self.split[2]),
            _ => return None,
        })
    }

    /// Canonical text: every key, fixed order, exact floats.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.value(k).expect("known key"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn variant(&self) -> Result<GnnVariant> {
        GnnVariant::new(self.gnn, self.gnn_layers)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_max: self.alpha_max,
            beta_max: self.beta_max,
            lambda: self.lambda,
            epochs: self.epochs,
        }
    }

    pub fn mmd(&self) -> Result<MmdConfig> {
        MmdConfig::new(self.mmd_sigma, self.kernel_num)
    }
}
