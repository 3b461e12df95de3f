//! Proximal module: a small residual CNN conditioned on time and on `Wᵀy`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::physics::Image;
use crate::tensor::{time_embedding, Tape, Tensor, Var};

pub const HIDDEN: usize = 32;
pub const EMBED_DIM: usize = 32;
pub const KERNEL: usize = 3;
const CONVS: [(usize, usize); 4] = [(2, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 1)];
const TIME_PROJ: usize = CONVS.len() - 1;

/// Four 3×3 convolutions with SiLU between them. Each hidden layer receives a
/// per-channel bias projected from the time embedding; the last convolution
/// predicts a residual added back onto the input.
#[derive(Clone, Debug, PartialEq)]
pub struct PomNet {
    params: Vec<(String, Tensor)>,
}

impl PomNet {
    /// He-uniform hidden convolutions, zero output convolution (so the module
    /// starts as the identity), small uniform time projections.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut params = Vec::new();
        for (i, &(c_in, c_out)) in CONVS.iter().enumerate() {
            let fan_in = c_in * KERNEL * KERNEL;
            let shape = [c_out, c_in, KERNEL, KERNEL];
            let w = if i == CONVS.len() - 1 {
                Tensor::zeros(&shape)
            } else {
                uniform(rng, &shape, (6.0 / fan_in as f64).sqrt())
            };
            params.push((format!("conv{i}.w"), w));
            params.push((format!("conv{i}.b"), Tensor::zeros(&[c_out])));
        }
        for i in 0..TIME_PROJ {
            let w = uniform(rng, &[HIDDEN, EMBED_DIM], 1.0 / (EMBED_DIM as f64).sqrt());
            params.push((format!("time{i}.w"), w));
            params.push((format!("time{i}.b"), Tensor::zeros(&[HIDDEN])));
        }
        PomNet { params }
    }

    /// Rebuild from named tensors in [`PomNet::names`] order, checking shapes.
    pub fn from_params(params: Vec<(String, Tensor)>) -> Result<Self> {
        let reference = Self::init(&mut crate::rng::rng_from_seed(0));
        if params.len() != reference.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((name, t), (rname, rt)) in params.iter().zip(&reference.params) {
            if name != rname {
                return Err(Error::InvalidArgument(format!("expected tensor {rname}, got {name}")));
            }
            if t.shape() != rt.shape() {
                return Err(Error::shape(rt.shape(), t.shape()));
            }
        }
        Ok(PomNet { params })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, t)| t.is_finite())
    }

    /// Record every tensor as a trainable leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundPom {
        BoundPom { vars: self.params.iter().map(|(_, t)| tape.param(t)).collect() }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}

/// A [`PomNet`] recorded on a tape; `vars` follows the parameter order.
#[derive(Clone, Debug)]
pub struct BoundPom {
    pub vars: Vec<Var>,
}

impl BoundPom {
    fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn time(&self, i: usize) -> (Var, Var) {
        let base = 2 * CONVS.len();
        (self.vars[base + 2 * i], self.vars[base + 2 * i + 1])
    }

    /// `r + f([r, cond], t)` for `r`, `cond` of shape `[1, n, n]`.
    pub fn forward(&self, tape: &mut Tape, r: Var, cond: Var, t: f64) -> Result<Var> {
        let embed = tape.constant(time_embedding(t, EMBED_DIM)?);
        let mut h = tape.concat(&[r, cond])?;
        for i in 0..CONVS.len() {
            let (w, b) = self.conv(i);
            h = tape.conv2d(h, w, b)?;
            if i < TIME_PROJ {
                let (tw, tb) = self.time(i);
                let bias = tape.linear(embed, tw, tb)?;
                h = tape.add_channel_bias(h, bias)?;
                h = tape.silu(h)?;
            }
        }
        tape.add(r, h)
    }
}

/// Evaluate the proximal module on plain images without recording gradients.
pub fn pom(r: &Image, t: f64, cond: &Image, net: &PomNet) -> Result<Image> {
    r.check_same_shape(cond)?;
    let n = r.n();
    let mut tape = Tape::no_grad();
    let bound = net.bind(&mut tape);
    let rv = tape.constant(Tensor::new(&[1, n, n], r.pixels().to_vec())?);
    let cv = tape.constant(Tensor::new(&[1, n, n], cond.pixels().to_vec())?);
    let out = bound.forward(&mut tape, rv, cv, t)?;
    Image::new(n, tape.value(out)?.data().to_vec())
}
