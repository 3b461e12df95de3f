//! Rollout-based training and stage-wise sampling of the unfolded bridge.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::{image_var, Measurement, ModelParams, UnfoldedNet};
use crate::physics::Image;
use crate::rng::{stage_rng, Stage};
use crate::schedule::Schedule;
use crate::tensor::{AdamW, AdamWConfig, Tape};

/// One training triplet: clean image, degraded endpoint and its measurement.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: Image,
    pub x1: Image,
    pub meas: Measurement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplier on the rollout noise `σ_{t_i} z`.
    pub sigma_train_scale: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 0,
            sigma_train_scale: 1.0,
            max_steps: None,
            checkpoint_every: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.sigma_train_scale >= 0.0 && self.sigma_train_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_train_scale must be >= 0, got {}", self.sigma_train_scale)));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.optimizer.lr)));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let planned = self.epochs * self.batches_per_epoch(n);
        self.max_steps.map_or(planned, |m| m.min(planned))
    }
}

/// States of a no-grad rollout from `t_K` down to `t_1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `states[j]` is `x_{t_{K−j}}`: `x_{t_K}` first, `x_{t_1}` last.
    pub states: Vec<Image>,
    /// `noise[j]` is the standard-normal draw used to step from `x_{t_{K−j}}`.
    pub noise: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.states.len()
    }

    /// `x_{t_k}` for `1 ≤ k ≤ K`.
    pub fn state(&self, k: usize) -> &Image {
        &self.states[self.k() - k]
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Run layers `K, …, 2` without gradients, adding `c·σ_{t_i} z` after layer `i`.
pub fn rollout_no_grad<R: Rng + ?Sized>(
    net: &UnfoldedNet,
    x1: &Image,
    meas: &Measurement,
    params: &ModelParams,
    sigma_scale: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let k_max = net.k();
    let mut states = vec![x1.clone()];
    let mut noise = Vec::with_capacity(k_max - 1);
    for i in (2..=k_max).rev() {
        let mut x = net.layer_apply(states.last().unwrap(), meas, i, params)?;
        let z = normal_vec(rng, x.pixels().len());
        let s = sigma_scale * net.schedule().sigma(i);
        x.pixels_mut().iter_mut().zip(&z).for_each(|(p, z)| *p += s * z);
        states.push(x);
        noise.push(z);
    }
    Ok(Trajectory { states, noise })
}

/// `(1 − α_{t_{k−1}}) x₀ + α_{t_{k−1}} x₁`.
pub fn training_target(x0: &Image, x1: &Image, k: usize, schedule: &Schedule) -> Result<Image> {
    x0.check_same_shape(x1)?;
    if k < 2 || k > schedule.k() {
        return Err(Error::InvalidArgument(format!("target layer {k} outside 2..={}", schedule.k())));
    }
    let a = schedule.alpha(k - 1);
    let pixels = x0.pixels().iter().zip(x1.pixels()).map(|(p, q)| (1.0 - a) * p + a * q).collect();
    Image::new(x0.n(), pixels)
}

/// Loss terms and gradients of one training sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub k: usize,
    pub l1: f64,
    pub l2: f64,
    /// Gradients in [`ModelParams::named`] order.
    pub grads: Vec<Vec<f64>>,
}

/// Layer index trained by one sample, uniform on `{2, …, K}`. It is the first
/// draw of the sample's stream.
pub fn draw_layer<R: Rng + ?Sized>(rng: &mut R, k_max: usize) -> usize {
    rng.random_range(2..=k_max)
}

/// Draw `k`, roll out, and differentiate `L1 + L2` of one sample.
pub fn sample_gradients<R: Rng + ?Sized>(
    net: &UnfoldedNet,
    sample: &TrainSample,
    params: &ModelParams,
    sigma_scale: f64,
    rng: &mut R,
) -> Result<SampleGrad> {
    let k = draw_layer(rng, net.k());
    let traj = rollout_no_grad(net, &sample.x1, &sample.meas, params, sigma_scale, rng)?;
    let target = training_target(&sample.x0, &sample.x1, k, net.schedule())?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (xk, y, cond) = net.constants(&mut tape, traj.state(k), &sample.meas)?;
    let out_k = net.layer_on_tape(&mut tape, &bound, params, xk, y, cond, k)?;
    let x_1 = image_var(&mut tape, traj.state(1))?;
    let out_1 = net.layer_on_tape(&mut tape, &bound, params, x_1, y, cond, 1)?;
    let target = image_var(&mut tape, &target)?;
    let x0 = image_var(&mut tape, &sample.x0)?;
    let l1 = tape.mse_loss(out_k, target)?;
    let l2 = tape.mse_loss(out_1, x0)?;
    let loss = tape.add(l1, l2)?;
    let (l1v, l2v) = (tape.value(l1)?.item()?, tape.value(l2)?.item()?);
    let vars = bound.vars();
    let g = tape.backward(loss)?;
    let grads = vars.iter().map(|&v| g.get(v).expect("every parameter gets a gradient").to_vec()).collect();
    Ok(SampleGrad { k, l1: l1v, l2: l2v, grads })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
}

/// Per-sample generator for optimizer step `step`, slot `j` of the batch.
pub fn sample_rng(seed: u64, step: usize, j: usize) -> crate::rng::Rng {
    stage_rng(seed, Stage::Train, step as u64, j as u64)
}

/// Batch-mean loss terms and gradients, with per-sample draws of `k` and noise
/// taken from the `(seed, step, slot)` stream.
pub fn batch_gradients(
    net: &UnfoldedNet,
    batch: &[&TrainSample],
    params: &ModelParams,
    sigma_scale: f64,
    seed: u64,
    step: usize,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut total: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let (mut l1, mut l2) = (0.0, 0.0);
    for (j, s) in batch.iter().enumerate() {
        let sg = sample_gradients(net, s, params, sigma_scale, &mut sample_rng(seed, step, j))?;
        l1 += sg.l1 / b;
        l2 += sg.l2 / b;
        for (acc, g) in total.iter_mut().zip(&sg.grads) {
            acc.iter_mut().zip(g).for_each(|(a, g)| *a += g / b);
        }
    }
    Ok((l1, l2, total))
}

/// One optimizer step on the batch: AdamW on the mean of `L1 + L2`, then
/// `μ ≥ 0`. A non-finite loss leaves the parameters untouched and errors.
pub fn training_step(
    net: &UnfoldedNet,
    batch: &[&TrainSample],
    params: &mut ModelParams,
    opt: &mut AdamW,
    sigma_scale: f64,
    seed: u64,
) -> Result<LossRecord> {
    let step = opt.state.step as usize;
    let (l1, l2, grads) = batch_gradients(net, batch, params, sigma_scale, seed, step)?;
    if !(l1.is_finite() && l2.is_finite()) || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step: step as u64, l1, l2 });
    }
    for ((_, t), g) in params.named_mut().into_iter().zip(grads) {
        t.set_grad(g)?;
    }
    opt.step(params.named_mut())?;
    params.project_mu();
    Ok(LossRecord { step, l1, l2 })
}

/// Indices of the batch used at optimizer step `step`: epoch `step / B` is a
/// fresh permutation drawn from the `Shuffle` stream; the last batch of an
/// epoch may be short.
pub fn batch_indices(n: usize, cfg: &TrainConfig, step: usize) -> Vec<usize> {
    let per_epoch = cfg.batches_per_epoch(n);
    let (epoch, b) = (step / per_epoch, step % per_epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stage_rng(cfg.seed, Stage::Shuffle, epoch as u64, 0));
    let start = b * cfg.batch_size;
    perm[start..(start + cfg.batch_size).min(n)].to_vec()
}

/// Mutable training state: weights plus optimizer.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamW,
}

impl TrainState {
    pub fn new(params: ModelParams, config: AdamWConfig) -> Self {
        let opt = AdamW::new(config, params.named().into_iter().map(|(_, t)| t));
        TrainState { params, opt }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        TrainState { params: c.params, opt: AdamW::with_state(c.optimizer_config, c.optimizer) }
    }

    pub fn to_checkpoint(&self, config: &str) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.opt.state.clone(),
            optimizer_config: self.opt.config,
            config: config.to_string(),
        }
    }

    pub fn step(&self) -> usize {
        self.opt.state.step as usize
    }
}

/// Where [`train`] writes its artifacts: `loss.csv`, `step_XXXXXX.ckpt`,
/// `final.ckpt`, and `abort.ckpt` if a loss goes non-finite.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Echoed into every checkpoint.
    pub config_echo: String,
}

fn append_losses(path: &Path, rows: &[LossRecord], fresh: bool) -> Result<()> {
    let mut f = if fresh {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "step,L1,L2").map_err(|e| Error::io(path, e))?;
        f
    } else {
        OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?
    };
    for r in rows {
        writeln!(f, "{},{},{}", r.step, r.l1, r.l2).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Train from the state's current step up to `cfg.total_steps`. Every step is a
/// pure function of (weights, optimizer state, seed, step index), so resuming
/// from a checkpoint reproduces the same subsequent losses.
pub fn train(
    net: &UnfoldedNet,
    data: &[TrainSample],
    state: &mut TrainState,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let total = cfg.total_steps(data.len());
    let start = state.step();
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        let loss_path = o.dir.join("loss.csv");
        if start == 0 || !loss_path.exists() {
            append_losses(&loss_path, &[], true)?;
        }
    }
    let mut losses = Vec::with_capacity(total.saturating_sub(start));
    for step in start..total {
        let batch: Vec<&TrainSample> = batch_indices(data.len(), cfg, step).into_iter().map(|i| &data[i]).collect();
        let rec = match training_step(net, &batch, &mut state.params, &mut state.opt, cfg.sigma_train_scale, cfg.seed) {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(o) = out {
                    state.to_checkpoint(&o.config_echo).save(&o.dir.join("abort.ckpt"))?;
                }
                log::error!("{e}; aborting");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if step % 100 == 0 || step + 1 == total {
            log::info!("step {step}: L1 = {:.4e}, L2 = {:.4e}", rec.l1, rec.l2);
        }
        losses.push(rec);
        if let Some(o) = out {
            append_losses(&o.dir.join("loss.csv"), &[rec], false)?;
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                state.to_checkpoint(&o.config_echo).save(&o.dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(o) = out {
        state.to_checkpoint(&o.config_echo).save(&o.dir.join("final.ckpt"))?;
    }
    Ok(losses)
}

/// Stage-wise sampler: for `k = K, …, 1`, `x ← layer_k(x) + c·σ_{t_k} z`. The
/// noise after the last layer is skipped when `final_noise` is false. Performs
/// exactly `K` layer evaluations.
pub fn sample<R: Rng + ?Sized>(
    net: &UnfoldedNet,
    meas: &Measurement,
    x1: &Image,
    params: &ModelParams,
    sigma_scale: f64,
    final_noise: bool,
    rng: &mut R,
) -> Result<Image> {
    if !(sigma_scale >= 0.0 && sigma_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma scale must be >= 0, got {sigma_scale}")));
    }
    let mut x = x1.clone();
    for k in (1..=net.k()).rev() {
        x = net.layer_apply(&x, meas, k, params)?;
        if k > 1 || final_noise {
            let s = sigma_scale * net.schedule().sigma(k);
            for p in x.pixels_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *p += s * z;
            }
        }
    }
    Ok(x)
}
