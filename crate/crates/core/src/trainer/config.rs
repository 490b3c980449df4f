//! Training configuration as flat `key=value` text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::LossWeights;
use crate::model::NetConfig;

/// Components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    pub cam_loss: bool,
    pub saliency: bool,
    pub sharpen: bool,
    pub multiscale: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["cam-loss", "saliency", "sharpen", "multiscale"];

    /// Switch off the named component.
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name {
            "cam-loss" => self.cam_loss = true,
            "saliency" => self.saliency = true,
            "sharpen" => self.sharpen = true,
            "multiscale" => self.multiscale = true,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown ablation {name:?}; valid names are {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: String,
    pub net: NetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// First epoch with the CAM term of the classification loss.
    pub cam_start: usize,
    /// First epoch with the consistency loss.
    pub consistency_start: usize,
    pub batch_size: usize,
    pub unlabelled_batch_size: usize,
    /// Riemann steps for saliency during training.
    pub ig_steps: usize,
    pub weights: LossWeights,
    pub ablate: Ablations,
    pub weak_labels: bool,
    pub supervised_only: bool,
    pub seed: u64,
    pub seg_threshold: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Full-scale schedule: 300 epochs, gates at 20 and 40.
    pub fn full() -> Self {
        TrainConfig {
            profile: "full".into(),
            net: NetConfig::full(),
            epochs: 300,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            cam_start: 20,
            consistency_start: 40,
            batch_size: 16,
            unlabelled_batch_size: 16,
            ig_steps: 16,
            weights: LossWeights::default(),
            ablate: Ablations::default(),
            weak_labels: false,
            supervised_only: false,
            seed: 0,
            seg_threshold: 0.5,
            checkpoint_every: 20,
        }
    }

    /// Desk-scale schedule on the tiny network. Epoch counts and gates are
    /// the full schedule divided by five; the learning rate and its decay
    /// are retuned because the short run would otherwise freeze early.
    pub fn desk() -> Self {
        TrainConfig {
            profile: "desk".into(),
            net: NetConfig::tiny(),
            epochs: 20,
            lr: 1e-3,
            lr_decay_every: 10,
            cam_start: 4,
            consistency_start: 8,
            batch_size: 8,
            unlabelled_batch_size: 4,
            ig_steps: 4,
            checkpoint_every: 0,
            weights: LossWeights {
                bce_weight: Some(0.3),
                consistency_weight: Some(1.0),
                ..LossWeights::default()
            },
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.cam_start > self.epochs {
            return bad(format!("cam_start {} exceeds epochs {}", self.cam_start, self.epochs));
        }
        if !self.supervised_only && self.consistency_start > self.epochs {
            log::info!("consistency_start exceeds epochs: the run is purely supervised");
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return bad("learning rate, decay factor and decay interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps must be positive".into());
        }
        if self.batch_size == 0 || self.unlabelled_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.ig_steps == 0 {
            return bad("ig_steps must be at least 1".into());
        }
        if !(self.weights.fusion.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        self.weights.validate()?;
        self.fusion().effective_weights()?;
        Ok(())
    }

    /// Fusion settings with the ablation switches applied.
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            sharpen: self.weights.fusion.sharpen && !self.ablate.sharpen,
            use_saliency: self.weights.fusion.use_saliency && !self.ablate.saliency,
            ..self.weights.fusion
        }
    }

    pub fn multiscale(&self) -> bool {
        !self.ablate.multiscale
    }

    /// Whether the consistency phase ever runs.
    pub fn uses_consistency(&self) -> bool {
        !self.supervised_only && self.consistency_start < self.epochs
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let f = &w.fusion;
        let widths: Vec<String> = self.net.widths.iter().map(|v| v.to_string()).collect();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("profile", self.profile.clone());
        kv("widths", widths.join(","));
        kv("leaky_slope", self.net.leaky_slope.to_string());
        kv("norm_eps", self.net.norm_eps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("lr_decay_every", self.lr_decay_every.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("cam_start", self.cam_start.to_string());
        kv("consistency_start", self.consistency_start.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("unlabelled_batch_size", self.unlabelled_batch_size.to_string());
        kv("ig_steps", self.ig_steps.to_string());
        kv("alpha", w.alpha.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        kv("beta", w.beta.to_string());
        kv("gamma", w.gamma.to_string());
        kv("eta", w.eta.to_string());
        kv("bce_weight", w.bce_weight.map_or("auto".into(), |v| v.to_string()));
        kv("consistency_weight", w.consistency_weight.map_or("auto".into(), |v| v.to_string()));
        kv("lambda", f.lambda.to_string());
        kv("mu", f.mu.to_string());
        kv("nu", f.nu.to_string());
        kv("temperature", f.temperature.to_string());
        kv("renormalize_weights", f.renormalize_weights.to_string());
        kv("ablate_cam_loss", self.ablate.cam_loss.to_string());
        kv("ablate_saliency", self.ablate.saliency.to_string());
        kv("ablate_sharpen", self.ablate.sharpen.to_string());
        kv("ablate_multiscale", self.ablate.multiscale.to_string());
        kv("weak_labels", self.weak_labels.to_string());
        kv("supervised_only", self.supervised_only.to_string());
        kv("seed", self.seed.to_string());
        kv("seg_threshold", self.seg_threshold.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        fn list<const N: usize, T: std::str::FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != N {
                return Err(Error::Config(format!("{key} needs {N} comma-separated values")));
            }
            let mut out = [T::default(); N];
            for (o, p) in out.iter_mut().zip(parts) {
                *o = num(key, p)?;
            }
            Ok(out)
        }
        let w = &mut self.weights;
        match key {
            "profile" => self.profile = value.to_string(),
            "widths" => self.net.widths = list(key, value)?,
            "leaky_slope" => self.net.leaky_slope = num(key, value)?,
            "norm_eps" => self.net.norm_eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "cam_start" => self.cam_start = num(key, value)?,
            "consistency_start" => self.consistency_start = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "unlabelled_batch_size" => self.unlabelled_batch_size = num(key, value)?,
            "ig_steps" => self.ig_steps = num(key, value)?,
            "alpha" => w.alpha = list(key, value)?,
            "beta" => w.beta = num(key, value)?,
            "gamma" => w.gamma = num(key, value)?,
            "eta" => w.eta = num(key, value)?,
            "bce_weight" => w.bce_weight = if value == "auto" { None } else { Some(num(key, value)?) },
            "consistency_weight" => w.consistency_weight = if value == "auto" { None } else { Some(num(key, value)?) },
            "lambda" => w.fusion.lambda = num(key, value)?,
            "mu" => w.fusion.mu = num(key, value)?,
            "nu" => w.fusion.nu = num(key, value)?,
            "temperature" => w.fusion.temperature = num(key, value)?,
            "renormalize_weights" => w.fusion.renormalize_weights = num(key, value)?,
            "ablate_cam_loss" => self.ablate.cam_loss = num(key, value)?,
            "ablate_saliency" => self.ablate.saliency = num(key, value)?,
            "ablate_sharpen" => self.ablate.sharpen = num(key, value)?,
            "ablate_multiscale" => self.ablate.multiscale = num(key, value)?,
            "weak_labels" => self.weak_labels = num(key, value)?,
            "supervised_only" => self.supervised_only = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "seg_threshold" => self.seg_threshold = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply every `key=value` line of `text` on top of `self`. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parse a complete configuration. A `profile=` line, if present,
    /// selects the defaults the remaining keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let profile = text
            .lines()
            .filter_map(|l| l.trim().split_once('='))
            .find(|(k, _)| k.trim() == "profile")
            .map(|(_, v)| v.trim().to_string());
        let mut cfg = match profile.as_deref() {
            Some("desk") => Self::desk(),
            Some("full") | None => Self::full(),
            Some(other) => return Err(Error::Config(format!("unknown profile {other:?}"))),
        };
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn fingerprint(&self) -> String {
        crate::metrics::fingerprint(&self.to_text())
    }

    /// Fingerprint of everything that shapes the trajectory, so a run may be
    /// resumed with a larger epoch budget or another checkpoint interval.
    pub fn resume_key(&self) -> String {
        let cfg = TrainConfig {
            epochs: 0,
            checkpoint_every: 0,
            ..self.clone()
        };
        cfg.fingerprint()
    }
}
