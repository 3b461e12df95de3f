//! Image quality metrics and per-image reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{list_items, read_image};
use crate::physics::Image;

/// `10·log10(range² / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image, range: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {range}")));
    }
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Weighted local mean of `img` at every position where the window fits.
fn local_mean(img: &[f64], n: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let m = n + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; n * m];
    for y in 0..n {
        for x in 0..m {
            rows[y * m + x] = (0..SSIM_WINDOW).map(|k| w[k] * img[y * n + x + k]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for y in 0..m {
        for x in 0..m {
            out[y * m + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * m + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), `k1 = 0.01`,
/// `k2 = 0.03`, averaged over all positions where the window fits.
pub fn ssim(a: &Image, b: &Image, range: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {range}")));
    }
    let n = a.n();
    if n < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {n}×{n}")));
    }
    let w = gaussian_window();
    let (pa, pb) = (a.pixels(), b.pixels());
    let prod = |f: &dyn Fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = local_mean(pa, n, &w);
    let mu_b = local_mean(pb, n, &w);
    let e_aa = local_mean(&prod(&|x, _| x * x), n, &w);
    let e_bb = local_mean(&prod(&|_, y| y * y), n, &w);
    let e_ab = local_mean(&prod(&|x, y| x * y), n, &w);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n as f64 - 1.0)).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn psnr_stats(&self) -> (f64, f64) {
        mean_sd(&self.rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>())
    }

    pub fn ssim_stats(&self) -> (f64, f64) {
        mean_sd(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    /// `id,psnr_db,ssim`, one row per image, then `AGGREGATE,<mean>±<sd>,<mean>±<sd>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.id, r.psnr_db, r.ssim).unwrap();
        }
        let (pm, ps) = self.psnr_stats();
        let (sm, ss) = self.ssim_stats();
        writeln!(out, "AGGREGATE,{pm}±{ps},{sm}±{ss}").unwrap();
        out
    }

    /// Parse the per-image rows of [`MetricReport::to_csv`] output; the aggregate
    /// row is recomputed rather than trusted.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::InvalidArgument(format!("metrics line {line}: {why}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "id,psnr_db,ssim")) => {}
            _ => return Err(bad(1, "expected header id,psnr_db,ssim")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected 3 fields"));
            }
            if f[0] == "AGGREGATE" {
                break;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "not a number"));
            rows.push(MetricRow { id: f[0].to_string(), psnr_db: num(f[1])?, ssim: num(f[2])? });
        }
        Ok(MetricReport { rows })
    }
}

/// Compare every `.ctf` image in `recon_dir` with the same-named file in `reference_dir`.
pub fn evaluate(recon_dir: &Path, reference_dir: &Path, range: f64) -> Result<MetricReport> {
    let ids = list_items(recon_dir)?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no .ctf images in {}", recon_dir.display())));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let name = format!("{id}.ctf");
        let reference = reference_dir.join(&name);
        if !reference.exists() {
            return Err(Error::InvalidArgument(format!("no reference for {name} in {}", reference_dir.display())));
        }
        let (a, b) = (read_image(&recon_dir.join(&name))?, read_image(&reference)?);
        rows.push(MetricRow { id, psnr_db: psnr(&a, &b, range)?, ssim: ssim(&a, &b, range)? });
    }
    Ok(MetricReport { rows })
}
