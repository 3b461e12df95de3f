//! Ray-driven forward projection and its matched adjoint.
//!
//! Both directions walk the same per-ray list of `(pixel, weight)` pairs, so
//! `⟨Hx, y⟩ = ⟨x, Hᵀy⟩` holds up to floating-point rounding. For small
//! geometries the list is computed once and kept as a sparse matrix.

use std::sync::{Arc, OnceLock};

use super::{Geometry, Image, ProjectorKind, Sinogram};
use crate::error::Result;

pub fn forward_project(img: &Image, geom: &Geometry) -> Result<Sinogram> {
    geom.check_image(img)?;
    let mut out = vec![0.0; geom.n_views() * geom.n_dets()];
    project_into(geom, img.pixels(), &mut out);
    Sinogram::new(geom.n_views(), geom.n_dets(), out)
}

pub fn back_project(sino: &Sinogram, geom: &Geometry) -> Result<Image> {
    geom.check_sinogram(sino)?;
    let mut out = vec![0.0; geom.n() * geom.n()];
    back_project_into(geom, sino.samples(), &mut out);
    Image::new(geom.n(), out)
}

pub(crate) fn project_into(geom: &Geometry, image: &[f64], sino: &mut [f64]) {
    if let Some(m) = geom.matrix().get(geom) {
        m.rays.matvec(image, sino);
        return;
    }
    let mut scratch = Vec::new();
    let nd = geom.n_dets();
    for v in 0..geom.n_views() {
        for d in 0..nd {
            let mut acc = 0.0;
            for_each_weight(geom, v, d, &mut scratch, |p, w| acc += w * image[p]);
            sino[v * nd + d] = acc;
        }
    }
}

pub(crate) fn back_project_into(geom: &Geometry, sino: &[f64], image: &mut [f64]) {
    if let Some(m) = geom.matrix().get(geom) {
        m.pixels.matvec(sino, image);
        return;
    }
    image.fill(0.0);
    let mut scratch = Vec::new();
    let nd = geom.n_dets();
    for v in 0..geom.n_views() {
        for d in 0..nd {
            let g = sino[v * nd + d];
            if g == 0.0 {
                continue;
            }
            for_each_weight(geom, v, d, &mut scratch, |p, w| image[p] += w * g);
        }
    }
}

/// Largest system matrix worth caching, in stored weights.
const MAX_CACHED_WEIGHTS: usize = 1 << 23;

/// Compressed sparse rows.
#[derive(Debug)]
struct Csr {
    starts: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.starts[r], self.starts[r + 1]);
            *o = self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&c, w)| w * x[c as usize]).sum();
        }
    }
}

/// The projector stored both by ray (for `H`) and by pixel (for `Hᵀ`). Pixel
/// rows list rays in increasing order, so both products accumulate in the same
/// order as the matrix-free loops above.
#[derive(Debug)]
pub(crate) struct SystemMatrix {
    rays: Csr,
    pixels: Csr,
}

impl SystemMatrix {
    fn build(geom: &Geometry) -> Option<Self> {
        let n_rays = geom.n_views() * geom.n_dets();
        let n_px = geom.n() * geom.n();
        let mut starts = Vec::with_capacity(n_rays + 1);
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        let mut scratch = Vec::new();
        starts.push(0);
        for v in 0..geom.n_views() {
            for d in 0..geom.n_dets() {
                let mut fits = true;
                for_each_weight(geom, v, d, &mut scratch, |p, w| {
                    cols.push(p as u32);
                    vals.push(w);
                    fits &= cols.len() <= MAX_CACHED_WEIGHTS;
                });
                if !fits {
                    return None;
                }
                starts.push(cols.len());
            }
        }
        let mut counts = vec![0usize; n_px + 1];
        cols.iter().for_each(|&c| counts[c as usize + 1] += 1);
        for i in 0..n_px {
            counts[i + 1] += counts[i];
        }
        let pstarts = counts.clone();
        let mut pcols = vec![0u32; cols.len()];
        let mut pvals = vec![0.0; cols.len()];
        for r in 0..n_rays {
            for e in starts[r]..starts[r + 1] {
                let slot = &mut counts[cols[e] as usize];
                pcols[*slot] = r as u32;
                pvals[*slot] = vals[e];
                *slot += 1;
            }
        }
        Some(SystemMatrix {
            rays: Csr { starts, cols, vals },
            pixels: Csr { starts: pstarts, cols: pcols, vals: pvals },
        })
    }
}

/// Lazily built [`SystemMatrix`], shared between clones of a geometry. It is
/// a pure function of the geometry, so it never takes part in comparisons.
#[derive(Clone, Default)]
pub(crate) struct MatrixCache(Arc<OnceLock<Option<SystemMatrix>>>);

impl MatrixCache {
    fn get(&self, geom: &Geometry) -> Option<&SystemMatrix> {
        self.0.get_or_init(|| SystemMatrix::build(geom)).as_ref()
    }
}

impl PartialEq for MatrixCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for MatrixCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MatrixCache")
    }
}

/// Visit the nonzero-footprint pixels of ray `(view, det)` with their weights.
pub(crate) fn for_each_weight(
    geom: &Geometry,
    view: usize,
    det: usize,
    scratch: &mut Vec<f64>,
    f: impl FnMut(usize, f64),
) {
    match geom.projector() {
        ProjectorKind::Joseph => joseph_ray(geom, view, det, f),
        ProjectorKind::Siddon => siddon_ray(geom, view, det, scratch, f),
    }
}

fn joseph_ray(geom: &Geometry, view: usize, det: usize, mut f: impl FnMut(usize, f64)) {
    let n = geom.n();
    let ni = n as isize;
    let ctr = (n as f64 - 1.0) / 2.0;
    let (c, s) = geom.trig()[view];
    let off = geom.det_offset(det);
    // Points on the ray satisfy x·c + y·s = off.
    if c.abs() >= s.abs() {
        let step = 1.0 / c.abs();
        for i in 0..n {
            let y = ctr - i as f64;
            let fj = (off - y * s) / c + ctr;
            let j0 = fj.floor();
            let w = fj - j0;
            let j0 = j0 as isize;
            if j0 >= 0 && j0 < ni {
                f(i * n + j0 as usize, (1.0 - w) * step);
            }
            if j0 + 1 >= 0 && j0 + 1 < ni {
                f(i * n + (j0 + 1) as usize, w * step);
            }
        }
    } else {
        let step = 1.0 / s.abs();
        for j in 0..n {
            let x = j as f64 - ctr;
            let fi = ctr - (off - x * c) / s;
            let i0 = fi.floor();
            let w = fi - i0;
            let i0 = i0 as isize;
            if i0 >= 0 && i0 < ni {
                f(i0 as usize * n + j, (1.0 - w) * step);
            }
            if i0 + 1 >= 0 && i0 + 1 < ni {
                f((i0 + 1) as usize * n + j, w * step);
            }
        }
    }
}

const PARALLEL_EPS: f64 = 1e-12;

fn siddon_ray(geom: &Geometry, view: usize, det: usize, ts: &mut Vec<f64>, mut f: impl FnMut(usize, f64)) {
    let n = geom.n();
    let half = n as f64 / 2.0;
    let (c, s) = geom.trig()[view];
    let off = geom.det_offset(det);
    let p0 = [off * c, off * s];
    let dir = [-s, c];

    let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in 0..2 {
        if dir[axis].abs() < PARALLEL_EPS {
            if p0[axis].abs() >= half {
                return;
            }
        } else {
            let a = (-half - p0[axis]) / dir[axis];
            let b = (half - p0[axis]) / dir[axis];
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_hi <= t_lo {
        return;
    }

    ts.clear();
    ts.push(t_lo);
    ts.push(t_hi);
    for axis in 0..2 {
        if dir[axis].abs() < PARALLEL_EPS {
            continue;
        }
        for k in 0..=n {
            let t = (-half + k as f64 - p0[axis]) / dir[axis];
            if t > t_lo && t < t_hi {
                ts.push(t);
            }
        }
    }
    ts.sort_unstable_by(f64::total_cmp);

    let last = n as isize - 1;
    for pair in ts.windows(2) {
        let len = pair[1] - pair[0];
        if len <= 0.0 {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let x = p0[0] + tm * dir[0];
        let y = p0[1] + tm * dir[1];
        let j = ((x + half).floor() as isize).clamp(0, last) as usize;
        let i = ((half - y).floor() as isize).clamp(0, last) as usize;
        f(i * n + j, len);
    }
}
