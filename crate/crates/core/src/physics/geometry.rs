use std::f64::consts::PI;

use super::projector::MatrixCache;
use super::{Image, Sinogram};
use crate::error::{Error, Result};
use crate::tensor::LinearOperator;

/// How line integrals are discretised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProjectorKind {
    /// Joseph's method: one linear interpolation per row (or column) crossed,
    /// weighted by the path length per step.
    #[default]
    Joseph,
    /// Siddon's method: exact intersection lengths with the pixel squares.
    Siddon,
}

impl std::str::FromStr for ProjectorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joseph" => Ok(ProjectorKind::Joseph),
            "siddon" => Ok(ProjectorKind::Siddon),
            other => Err(Error::InvalidArgument(format!("unknown projector `{other}`"))),
        }
    }
}

impl std::fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProjectorKind::Joseph => "joseph",
            ProjectorKind::Siddon => "siddon",
        })
    }
}

/// Parallel-beam scan description.
///
/// Pixel `(row i, col j)` is the unit square centred at `x = j - (n-1)/2`,
/// `y = (n-1)/2 - i`. Detector `d` of view `v` measures the line
/// `{p : p·(cos θ_v, sin θ_v) = (d - (n_dets-1)/2) · det_spacing}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    n: usize,
    n_dets: usize,
    det_spacing: f64,
    angles: Vec<f64>,
    trig: Vec<(f64, f64)>,
    projector: ProjectorKind,
    matrix: MatrixCache,
}

impl Geometry {
    /// `n_views` angles uniformly spaced over `[0, π)`.
    pub fn parallel(n: usize, n_views: usize, n_dets: usize, det_spacing: f64) -> Result<Self> {
        let angles = (0..n_views).map(|v| v as f64 * PI / n_views as f64).collect();
        Self::with_angles(n, n_dets, det_spacing, angles)
    }

    pub fn with_angles(n: usize, n_dets: usize, det_spacing: f64, angles: Vec<f64>) -> Result<Self> {
        if n == 0 || n_dets == 0 || angles.is_empty() {
            return Err(Error::InvalidArgument("n, n_views and n_dets must be at least 1".into()));
        }
        if !(det_spacing > 0.0 && det_spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!("det_spacing must be positive, got {det_spacing}")));
        }
        if angles.iter().any(|&a| !(0.0..PI).contains(&a)) {
            return Err(Error::InvalidArgument("view angles must lie in [0, π)".into()));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("view angles must be strictly increasing".into()));
        }
        let trig = angles.iter().map(|a| (a.cos(), a.sin())).collect();
        Ok(Geometry {
            n,
            n_dets,
            det_spacing,
            angles,
            trig,
            projector: ProjectorKind::default(),
            matrix: MatrixCache::default(),
        })
    }

    /// 64×64 image, 90 views, 95 detectors of unit pitch.
    pub fn desk_default() -> Self {
        Self::parallel(64, 90, 95, 1.0).expect("valid default geometry")
    }

    pub fn with_projector(mut self, projector: ProjectorKind) -> Self {
        self.projector = projector;
        self.matrix = MatrixCache::default();
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn n_dets(&self) -> usize {
        self.n_dets
    }

    pub fn det_spacing(&self) -> f64 {
        self.det_spacing
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn projector(&self) -> ProjectorKind {
        self.projector
    }

    pub(crate) fn matrix(&self) -> &MatrixCache {
        &self.matrix
    }

    pub(crate) fn trig(&self) -> &[(f64, f64)] {
        &self.trig
    }

    /// Signed offset of detector `d` from the rotation centre.
    pub fn det_offset(&self, d: usize) -> f64 {
        (d as f64 - (self.n_dets as f64 - 1.0) / 2.0) * self.det_spacing
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        if img.n() != self.n {
            return Err(Error::shape(&[self.n, self.n], &[img.n(), img.n()]));
        }
        Ok(())
    }

    pub fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        if sino.n_views() != self.n_views() || sino.n_dets() != self.n_dets {
            return Err(Error::shape(&[self.n_views(), self.n_dets], &[sino.n_views(), sino.n_dets()]));
        }
        Ok(())
    }
}

/// `H` as a linear operator from `[n, n]` images to `[n_views, n_dets]` sinograms.
impl LinearOperator for Geometry {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.n]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.n_views(), self.n_dets]
    }

    fn apply(&self, input: &[f64], output: &mut [f64]) {
        super::projector::project_into(self, input, output);
    }

    fn apply_adjoint(&self, input: &[f64], output: &mut [f64]) {
        super::projector::back_project_into(self, input, output);
    }
}
