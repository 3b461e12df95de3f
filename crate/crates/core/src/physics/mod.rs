//! Measurement physics for parallel-beam CT: `y = Hx + n`.

mod fbp;
mod geometry;
mod noise;
mod phantom;
mod power;
mod projector;

pub use fbp::{fbp, RampFilter};
pub use geometry::{Geometry, ProjectorKind};
pub use noise::{draw_counts, simulate_ldct, NoiseConfig};
pub use phantom::{make_phantom, rasterize, random_ellipses, shepp_logan_ellipses, Ellipse, PhantomKind};
pub use power::{power_iteration, power_iteration_l, PowerResult};
pub use projector::{back_project, forward_project};

use crate::error::{Error, Result};

/// Square `n×n` attenuation map, row-major. Row 0 is the top of the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    n: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(n: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != n * n {
            return Err(Error::shape(&[n, n], &[pixels.len()]));
        }
        Ok(Image { n, pixels })
    }

    pub fn zeros(n: usize) -> Self {
        Image { n, pixels: vec![0.0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.n + col]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.n != other.n {
            return Err(Error::shape(&[self.n, self.n], &[other.n, other.n]));
        }
        Ok(())
    }
}

/// `n_views × n_dets` array of line integrals.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_views: usize,
    n_dets: usize,
    samples: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_views: usize, n_dets: usize, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != n_views * n_dets {
            return Err(Error::shape(&[n_views, n_dets], &[samples.len()]));
        }
        Ok(Sinogram { n_views, n_dets, samples })
    }

    pub fn zeros(n_views: usize, n_dets: usize) -> Self {
        Sinogram { n_views, n_dets, samples: vec![0.0; n_views * n_dets] }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_dets(&self) -> usize {
        self.n_dets
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.samples[v * self.n_dets..(v + 1) * self.n_dets]
    }
}
