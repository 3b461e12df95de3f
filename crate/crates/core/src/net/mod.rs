//! The unfolded iteration: a gradient step on the data term followed by the
//! time-conditioned proximal module, one layer per grid time.

mod pom;

pub use pom::{pom, BoundPom, PomNet, EMBED_DIM, HIDDEN, KERNEL};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::physics::{back_project, forward_project, Geometry, Image, Sinogram};
use crate::rng::{stage_rng, Stage};
use crate::schedule::Schedule;
use crate::tensor::{LinearOperator, Tape, Tensor, Var};

/// Trainable state: proximal weights (one shared set or one per layer) and the
/// per-layer step sizes `m_k`, with the actual step `μ_k = m_k / L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub pom: Vec<PomNet>,
    pub mu: Tensor,
    pub lipschitz: f64,
}

impl ModelParams {
    /// Step sizes start at `1/L`; proximal weights are drawn from the `Init` stream.
    pub fn init(k: usize, lipschitz: f64, per_layer: bool, seed: u64) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidArgument(format!("Lipschitz constant must be positive, got {lipschitz}")));
        }
        let copies = if per_layer { k } else { 1 };
        let pom = (0..copies)
            .map(|i| PomNet::init(&mut stage_rng(seed, Stage::Init, i as u64, 0)))
            .collect();
        Ok(ModelParams { pom, mu: Tensor::full(&[k], 1.0), lipschitz })
    }

    pub fn k(&self) -> usize {
        self.mu.numel()
    }

    pub fn per_layer(&self) -> bool {
        self.pom.len() > 1
    }

    /// Proximal weights used by layer `k` (1-based).
    pub fn pom_index(&self, k: usize) -> usize {
        if self.per_layer() {
            k - 1
        } else {
            0
        }
    }

    /// Actual GDM step size of layer `k` (1-based).
    pub fn step_size(&self, k: usize) -> f64 {
        self.mu.data()[k - 1] / self.lipschitz
    }

    /// Clamp step sizes to be non-negative.
    pub fn project_mu(&mut self) {
        self.mu.data_mut().iter_mut().for_each(|m| *m = m.max(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.pom.iter().all(PomNet::is_finite)
    }

    /// Every trainable tensor with a stable name: `pom{i}.<name>` then `mu`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.pom.iter().enumerate() {
            for (name, t) in p.params() {
                out.push((format!("pom{i}.{name}"), t));
            }
        }
        out.push(("mu".into(), &self.mu));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.pom.iter_mut().enumerate() {
            for (name, t) in p.params_mut() {
                out.push((format!("pom{i}.{name}"), t));
            }
        }
        out.push(("mu".into(), &mut self.mu));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { pom: self.pom.iter().map(|p| p.bind(tape)).collect(), mu: tape.param(&self.mu) }
    }

    /// Clear every gradient buffer.
    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.set_grad(vec![0.0; t.numel()]).expect("matching length");
        }
    }
}

/// [`ModelParams`] recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub pom: Vec<BoundPom>,
    pub mu: Var,
}

impl BoundParams {
    /// Tape variables in [`ModelParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.pom.iter().flat_map(|p| p.vars.iter().copied()).chain([self.mu]).collect()
    }
}

/// One measurement `y` with its normalised conditioning image `Wᵀy`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    y: Sinogram,
    cond: Image,
    cond_mean: f64,
    cond_std: f64,
}

impl Measurement {
    /// Backprojects `y` and rescales it to zero mean and unit variance; a constant
    /// backprojection is only centred.
    pub fn new(y: Sinogram, geom: &Geometry) -> Result<Self> {
        let bp = back_project(&y, geom)?;
        let n = bp.pixels().len() as f64;
        let mean = bp.pixels().iter().sum::<f64>() / n;
        let var = bp.pixels().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let cond = Image::new(bp.n(), bp.pixels().iter().map(|v| (v - mean) / std).collect())?;
        Ok(Measurement { y, cond, cond_mean: mean, cond_std: std })
    }

    pub fn y(&self) -> &Sinogram {
        &self.y
    }

    pub fn cond(&self) -> &Image {
        &self.cond
    }

    /// `(mean, std)` removed from `Wᵀy`.
    pub fn normalizer(&self) -> (f64, f64) {
        (self.cond_mean, self.cond_std)
    }
}

/// Record `img` on `tape` as a constant of shape `[1, n, n]`.
pub fn image_var(tape: &mut Tape, img: &Image) -> Result<Var> {
    Ok(tape.constant(Tensor::new(&[1, img.n(), img.n()], img.pixels().to_vec())?))
}

/// Gradient-descent module `r = x − μ Hᵀ(Hx − y)`.
pub fn gdm(x: &Image, y: &Sinogram, mu: f64, geom: &Geometry) -> Result<Image> {
    let mut residual = forward_project(x, geom)?;
    for (r, m) in residual.samples_mut().iter_mut().zip(y.samples()) {
        *r -= m;
    }
    let g = back_project(&residual, geom)?;
    let pixels = x.pixels().iter().zip(g.pixels()).map(|(a, b)| a - mu * b).collect();
    Image::new(x.n(), pixels)
}

/// The K-layer unfolded network for one geometry and schedule. Counts every
/// layer evaluation so the sampler's cost can be checked.
pub struct UnfoldedNet {
    geom: Arc<Geometry>,
    schedule: Schedule,
    evals: AtomicUsize,
}

impl UnfoldedNet {
    pub fn new(geom: Geometry, schedule: Schedule) -> Self {
        UnfoldedNet { geom: Arc::new(geom), schedule, evals: AtomicUsize::new(0) }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn k(&self) -> usize {
        self.schedule.k()
    }

    /// Layer evaluations since construction or the last reset.
    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn check(&self, params: &ModelParams, k: usize) -> Result<()> {
        if params.k() != self.k() {
            return Err(Error::InvalidArgument(format!(
                "model has {} layers, schedule has {}",
                params.k(),
                self.k()
            )));
        }
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!("layer index {k} outside 1..={}", self.k())));
        }
        Ok(())
    }

    /// Record layer `k` on `tape`: `x` is `[1, n, n]`, `cond` is the normalised
    /// conditioning image of the same shape, `y` the sinogram.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        params: &ModelParams,
        x: Var,
        y: Var,
        cond: Var,
        k: usize,
    ) -> Result<Var> {
        self.check(params, k)?;
        let h: Arc<dyn LinearOperator> = self.geom.clone();
        let shape = tape.value(x)?.shape().to_vec();
        let hx = tape.apply_linear(x, h.clone(), false)?;
        let residual = tape.sub(hx, y)?;
        let grad = tape.apply_linear(residual, h, true)?;
        let grad = tape.reshape(grad, &shape)?;
        let m = tape.select(bound.mu, k - 1)?;
        let step = tape.scale_by(grad, m)?;
        let step = tape.scale(step, 1.0 / params.lipschitz)?;
        let r = tape.sub(x, step)?;
        let out = bound.pom[params.pom_index(k)].forward(tape, r, cond, self.schedule.t(k))?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Put `x`, `y` and the conditioning image on `tape` as constants.
    pub fn constants(&self, tape: &mut Tape, x: &Image, meas: &Measurement) -> Result<(Var, Var, Var)> {
        self.geom.check_image(x)?;
        self.geom.check_sinogram(meas.y())?;
        let xv = image_var(tape, x)?;
        let y = meas.y();
        let yv = tape.constant(Tensor::new(&[y.n_views(), y.n_dets()], y.samples().to_vec())?);
        let cv = image_var(tape, meas.cond())?;
        Ok((xv, yv, cv))
    }

    /// Layer `k` (1-based) evaluated without gradients.
    pub fn layer_apply(&self, x: &Image, meas: &Measurement, k: usize, params: &ModelParams) -> Result<Image> {
        self.check(params, k)?;
        let mut tape = Tape::no_grad();
        let bound = params.bind(&mut tape);
        let (xv, yv, cv) = self.constants(&mut tape, x, meas)?;
        let out = self.layer_on_tape(&mut tape, &bound, params, xv, yv, cv, k)?;
        Image::new(x.n(), tape.value(out)?.data().to_vec())
    }
}
