//! Phased training with Adam.
//!
//! Epoch `e` runs `ceil(labelled / batch_size)` steps over a fresh shuffle
//! of the labelled partition. From `cam_start` the classification loss gains
//! its CAM terms; from `consistency_start` each step also draws an
//! unlabelled batch, builds pseudo-labels from the clean images and adds the
//! consistency loss on strongly augmented copies. Every random draw is keyed
//! by `(seed, epoch, step, slot)`, so a resumed run replays exactly.

mod config;

pub use config::{Ablations, TrainConfig};

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::RngExt;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{self, Phase};
use crate::model::{read_f64, read_params, read_u32, read_u64, write_params, Network};
use crate::pipeline::clean_pass;
use crate::seeds;
use crate::synthdata::{augment_strong, AugmentParams, Dataset, PhantomSample};
use crate::tensor::Tape;

const SHUFFLE_LABELLED: u64 = 1;
const SHUFFLE_UNLABELLED: u64 = 2;
const AUGMENT: u64 = 3;
const INIT: u64 = 4;

/// `base * factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, base: f64, every: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: impl Iterator<Item = usize>) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.map(|n| vec![0.0; n]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter block.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Mean loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub epoch: usize,
    pub ce: f64,
    /// `sum_s alpha_s L_cam^s`.
    pub cam: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub total: f64,
}

pub const LOSS_HEADER: &str = "epoch,L_ce,sum_alpha_L_cam,L_s,L_u,total";

impl EpochLosses {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.ce, self.cam, self.supervised, self.unsupervised, self.total)
    }
}

pub fn losses_csv(history: &[EpochLosses]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for h in history {
        s.push_str(&h.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub net: Network,
    pub adam: AdamState,
    pub history: Vec<EpochLosses>,
    /// [`TrainConfig::resume_key`] of the configuration in use.
    pub config_fingerprint: String,
}

const STATE_MAGIC: &[u8; 4] = b"CLRS";
const STATE_VERSION: u32 = 1;

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let net = Network::new(cfg.net.clone(), seeds::derive(cfg.seed, &[INIT]));
        let adam = AdamState::new(net.params().iter().map(|p| p.values.len()));
        RunState {
            epoch: 0,
            net,
            adam,
            history: Vec::new(),
            config_fingerprint: cfg.resume_key(),
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(STATE_MAGIC)?;
        out.write_all(&STATE_VERSION.to_le_bytes())?;
        out.write_all(&(self.epoch as u64).to_le_bytes())?;
        out.write_all(&(self.config_fingerprint.len() as u32).to_le_bytes())?;
        out.write_all(self.config_fingerprint.as_bytes())?;
        self.net.write_to(out)?;
        out.write_all(&self.adam.step.to_le_bytes())?;
        for block in [&self.adam.m, &self.adam.v] {
            write_params(
                out,
                self.net.params().iter().zip(block).map(|(p, v)| (p.name.as_str(), p.shape.as_slice(), v.as_slice())),
            )?;
        }
        out.write_all(&(self.history.len() as u32).to_le_bytes())?;
        for h in &self.history {
            out.write_all(&(h.epoch as u64).to_le_bytes())?;
            for v in [h.ce, h.cam, h.supervised, h.unsupervised, h.total] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| format!("truncated checkpoint: {e}"))?;
        if &magic != STATE_MAGIC {
            return Err("not a training checkpoint (bad magic)".into());
        }
        let version = read_u32(input)?;
        if version != STATE_VERSION {
            return Err(format!("unsupported training checkpoint version {version}, expected {STATE_VERSION}"));
        }
        let epoch = read_u64(input)? as usize;
        let len = read_u32(input)? as usize;
        if len > 256 {
            return Err("corrupt fingerprint length".into());
        }
        let mut fp = vec![0u8; len];
        input.read_exact(&mut fp).map_err(|e| format!("truncated checkpoint: {e}"))?;
        let config_fingerprint = String::from_utf8(fp).map_err(|e| e.to_string())?;
        let net = Network::read_from(input)?;
        let step = read_u64(input)?;
        let mut blocks = Vec::with_capacity(2);
        for _ in 0..2 {
            let loaded = read_params(input)?;
            if loaded.len() != net.params().len()
                || loaded.iter().zip(net.params()).any(|(l, p)| l.name != p.name || l.shape != p.shape)
            {
                return Err("optimiser moments do not match the network".into());
            }
            blocks.push(loaded.into_iter().map(|p| p.values).collect::<Vec<_>>());
        }
        let v = blocks.pop().unwrap_or_default();
        let m = blocks.pop().unwrap_or_default();
        let n = read_u32(input)? as usize;
        let mut history = Vec::with_capacity(n.min(100_000));
        for _ in 0..n {
            history.push(EpochLosses {
                epoch: read_u64(input)? as usize,
                ce: read_f64(input)?,
                cam: read_f64(input)?,
                supervised: read_f64(input)?,
                unsupervised: read_f64(input)?,
                total: read_f64(input)?,
            });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(RunState {
            epoch,
            net,
            adam: AdamState { step, m, v },
            history,
            config_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        write_atomic(path, &buf)
    }

    /// Load a checkpoint. Nothing is returned unless the whole file parses.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|msg| Error::format(path, msg))
    }
}

/// Path of the checkpoint written after `epoch` completed epochs.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_{epoch:04}.bin"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("ckpt_final.bin")
}

/// Gradients and loss components of one sample, already scaled by its
/// share of the step objective.
struct SampleOut {
    grads: Vec<Vec<f64>>,
    ce: f64,
    cam: f64,
    supervised: f64,
    unsupervised: f64,
    total: f64,
}

fn collect_grads(tape: &Tape<f32>, vars: &[crate::tensor::Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.grad_f64(v)).collect()
}

fn labelled_sample(net: &Network, cfg: &TrainConfig, s: &PhantomSample, epoch: usize, w: f64, share: f64) -> Result<SampleOut> {
    let mut tape = Tape::<f32>::new();
    let bound = net.bind(&mut tape, true);
    let x = Network::image_leaf(&mut tape, &s.image, (s.size, s.size), false)?;
    let mut bundle = net.encoder_forward(&mut tape, &bound, x)?;
    let probs = net.classify(&mut tape, &mut bundle, cfg.multiscale())?;
    let cam_on = epoch >= cam_start_epoch(cfg);
    let cls = losses::multiscale_cam_loss(&mut tape, &bundle, probs, s.class.index(), &cfg.weights, !cam_on, !cfg.multiscale())?;
    let seg = net.decode(&mut tape, &bound, &bundle)?;
    let mask = s.mask.as_deref().ok_or_else(|| Error::Config(format!("labelled sample {} has no mask", s.id)))?;
    let ls = losses::weighted_bce_supervised(&mut tape, seg, mask, w)?;
    let total = losses::total_objective(&mut tape, cls.total, ls, None, &cfg.weights, Phase::Warmup)?;
    let scaled = tape.affine(total, share, 0.0);
    tape.backward(scaled)?;
    Ok(SampleOut {
        grads: collect_grads(&tape, bound.vars()),
        ce: tape.scalar(cls.cross_entropy) as f64,
        cam: cls.cam_terms.map_or(0.0, |v| tape.scalar(v) as f64),
        supervised: tape.scalar(ls) as f64,
        unsupervised: 0.0,
        total: tape.scalar(total) as f64,
    })
}

/// Epoch from which the CAM terms are active; never when ablated.
fn cam_start_epoch(cfg: &TrainConfig) -> usize {
    if cfg.ablate.cam_loss {
        usize::MAX
    } else {
        cfg.cam_start
    }
}

#[allow(clippy::too_many_arguments)]
fn unlabelled_sample(
    net: &Network,
    cfg: &TrainConfig,
    s: &PhantomSample,
    epoch: usize,
    step: usize,
    slot: usize,
    w: f64,
    share: f64,
) -> Result<SampleOut> {
    let weak_class = cfg.weak_labels.then(|| s.class.index());
    let fusion = cfg.fusion();
    let ig = fusion.use_saliency.then_some(cfg.ig_steps);
    let clean = clean_pass::<f32>(net, &s.image, s.size, weak_class, ig, cfg.multiscale())?;
    let pseudo = clean.pseudo_label(s.size, &fusion)?.foreground();

    let aug = AugmentParams::sample(seeds::derive(cfg.seed, &[AUGMENT, epoch as u64, step as u64, slot as u64]));
    let image = augment_strong(&s.image, s.size, aug);
    let mut tape = Tape::<f32>::new();
    let bound = net.bind(&mut tape, true);
    let x = Network::image_leaf(&mut tape, &image, (s.size, s.size), false)?;
    let mut bundle = net.encoder_forward(&mut tape, &bound, x)?;
    let seg = net.decode(&mut tape, &bound, &bundle)?;
    let lu = losses::consistency_loss(&mut tape, seg, &pseudo, w)?;
    let mut terms = vec![tape.affine(lu, cfg.weights.eta, 0.0)];
    let (mut ce, mut cam) = (0.0, 0.0);
    if let Some(class) = weak_class {
        let probs = net.classify(&mut tape, &mut bundle, cfg.multiscale())?;
        let cam_on = epoch >= cam_start_epoch(cfg);
        let cls = losses::multiscale_cam_loss(&mut tape, &bundle, probs, class, &cfg.weights, !cam_on, !cfg.multiscale())?;
        ce = tape.scalar(cls.cross_entropy) as f64;
        cam = cls.cam_terms.map_or(0.0, |v| tape.scalar(v) as f64);
        terms.push(tape.affine(cls.total, cfg.weights.beta, 0.0));
    }
    let total = tape.add_all(&terms)?;
    let scaled = tape.affine(total, share, 0.0);
    tape.backward(scaled)?;
    Ok(SampleOut {
        grads: collect_grads(&tape, bound.vars()),
        ce,
        cam,
        supervised: 0.0,
        unsupervised: tape.scalar(lu) as f64,
        total: tape.scalar(total) as f64,
    })
}

fn shuffled(ids: &[String], seed: u64, stream: u64, epoch: usize) -> Vec<String> {
    let mut out = ids.to_vec();
    let mut rng = seeds::rng(seed, &[stream, epoch as u64]);
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Check that `data` can feed `cfg`.
pub fn check_inputs(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    data.validate()?;
    if data.manifest.labelled_train.is_empty() {
        return Err(Error::Config("the labelled partition is empty".into()));
    }
    if cfg.uses_consistency() && data.manifest.unlabelled_train.is_empty() {
        log::warn!("the unlabelled partition is empty; the consistency phase will be skipped");
    }
    Ok(())
}

/// Run one epoch in place and return its mean losses.
pub fn train_epoch(data: &Dataset, cfg: &TrainConfig, state: &mut RunState) -> Result<EpochLosses> {
    let epoch = state.epoch;
    let labelled = data.partition(&shuffled(&data.manifest.labelled_train, cfg.seed, SHUFFLE_LABELLED, epoch))?;
    let unlabelled = data.partition(&shuffled(&data.manifest.unlabelled_train, cfg.seed, SHUFFLE_UNLABELLED, epoch))?;
    let full = cfg.uses_consistency() && epoch >= cfg.consistency_start && !unlabelled.is_empty();
    let lr = lr_at(epoch, cfg.lr, cfg.lr_decay_every, cfg.lr_decay_factor);
    let steps = labelled.len().div_ceil(cfg.batch_size);

    let mut sums = EpochLosses {
        epoch,
        ..EpochLosses::default()
    };
    let (mut n_lab, mut n_unl, mut n_weak) = (0usize, 0usize, 0usize);
    for step in 0..steps {
        let batch = &labelled[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(labelled.len())];
        let w = cfg
            .weights
            .bce_weight
            .unwrap_or_else(|| losses::balance_weight(batch.iter().filter_map(|s| s.mask.as_deref())));
        let unl_batch: Vec<&PhantomSample> = if full {
            (0..cfg.unlabelled_batch_size)
                .map(|k| unlabelled[(step * cfg.unlabelled_batch_size + k) % unlabelled.len()])
                .collect()
        } else {
            Vec::new()
        };
        let share_l = 1.0 / batch.len() as f64;
        let share_u = if unl_batch.is_empty() { 0.0 } else { 1.0 / unl_batch.len() as f64 };

        let mut outs: Vec<Result<SampleOut>> = batch.par_iter().map(|s| labelled_sample(&state.net, cfg, s, epoch, w, share_l)).collect();
        outs.extend(
            unl_batch
                .par_iter()
                .enumerate()
                .map(|(k, s)| unlabelled_sample(&state.net, cfg, s, epoch, step, k, cfg.weights.consistency_weight.unwrap_or(w), share_u))
                .collect::<Vec<_>>(),
        );

        let mut grads: Vec<Vec<f64>> = state.net.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        let mut step_total = 0.0;
        let ids: Vec<&str> = batch.iter().chain(&unl_batch).map(|s| s.id.as_str()).collect();
        for (k, out) in outs.into_iter().enumerate() {
            let out = out?;
            if !out.total.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step}, sample {} (batch: {})",
                    ids[k],
                    ids.join(" ")
                )));
            }
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let labelled_slot = k < batch.len();
            let share = if labelled_slot { share_l } else { share_u };
            step_total += out.total * share;
            if labelled_slot {
                sums.ce += out.ce;
                sums.cam += out.cam;
                sums.supervised += out.supervised;
                n_lab += 1;
            } else {
                sums.unsupervised += out.unsupervised;
                n_unl += 1;
                if cfg.weak_labels {
                    sums.ce += out.ce;
                    sums.cam += out.cam;
                    n_weak += 1;
                }
            }
        }
        sums.total += step_total;
        let mut params: Vec<&mut [f64]> = state.net.params_mut().iter_mut().map(|p| p.values.as_mut_slice()).collect();
        adam_step(&mut params, &grads, &mut state.adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    }
    let n_cls = (n_lab + n_weak).max(1) as f64;
    let means = EpochLosses {
        epoch,
        ce: sums.ce / n_cls,
        cam: sums.cam / n_cls,
        supervised: sums.supervised / n_lab.max(1) as f64,
        unsupervised: sums.unsupervised / n_unl.max(1) as f64,
        total: sums.total / steps.max(1) as f64,
    };
    state.epoch += 1;
    state.history.push(means);
    Ok(means)
}

/// Train from `state` (or a fresh initialisation) to `cfg.epochs`. With a
/// run directory, `losses.csv` is rewritten after every epoch and
/// checkpoints are written per `checkpoint_every` plus a final one.
pub fn train(data: &Dataset, cfg: &TrainConfig, state: Option<RunState>, run_dir: Option<&Path>) -> Result<RunState> {
    check_inputs(data, cfg)?;
    let mut state = match state {
        Some(s) => {
            if s.config_fingerprint != cfg.resume_key() {
                return Err(Error::Config("checkpoint was trained with a different configuration".into()));
            }
            s
        }
        None => RunState::new(cfg),
    };
    while state.epoch < cfg.epochs {
        let losses = train_epoch(data, cfg, &mut state)?;
        log::info!(
            "epoch {} lr {:.2e}: L_ce {:.4} cam {:.4} L_s {:.4} L_u {:.4} total {:.4}",
            losses.epoch,
            lr_at(losses.epoch, cfg.lr, cfg.lr_decay_every, cfg.lr_decay_factor),
            losses.ce,
            losses.cam,
            losses.supervised,
            losses.unsupervised,
            losses.total
        );
        if let Some(dir) = run_dir {
            write_atomic(&dir.join("losses.csv"), losses_csv(&state.history).as_bytes())?;
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                state.save(&checkpoint_path(dir, state.epoch))?;
            }
        }
    }
    if let Some(dir) = run_dir {
        write_atomic(&dir.join("losses.csv"), losses_csv(&state.history).as_bytes())?;
        state.save(&final_checkpoint_path(dir))?;
    }
    Ok(state)
}
