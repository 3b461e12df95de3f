//! Ellipse phantoms in normalised coordinates: the image spans `[-1, 1]²`.

use rand::Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    /// Semi-axis along the rotated y direction.
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    /// Counter-clockwise rotation in degrees.
    pub phi_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp_logan" | "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "random_ellipses" | "random-ellipses" => Ok(PhantomKind::RandomEllipses),
            other => Err(Error::InvalidArgument(format!("unsupported phantom kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhantomKind::SheppLogan => "shepp_logan",
            PhantomKind::RandomEllipses => "random_ellipses",
        })
    }
}

/// The modified (Toft) Shepp-Logan table, whose values lie in `[0, 1]`.
pub fn shepp_logan_ellipses() -> Vec<Ellipse> {
    const TABLE: [[f64; 6]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0],
        [0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0],
        [0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0],
    ];
    TABLE
        .iter()
        .map(|r| Ellipse { intensity: r[0], a: r[1], b: r[2], x0: r[3], y0: r[4], phi_deg: r[5] })
        .collect()
}

/// Between 4 and 10 ellipses: one body ellipse plus smaller structures inside
/// the inscribed circle.
pub fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut rng = rng_from_seed(seed);
    let count = rng.random_range(4..=10usize);
    let mut out = Vec::with_capacity(count);
    out.push(Ellipse {
        intensity: rng.random_range(0.3..0.6),
        a: rng.random_range(0.6..0.85),
        b: rng.random_range(0.6..0.85),
        x0: rng.random_range(-0.05..0.05),
        y0: rng.random_range(-0.05..0.05),
        phi_deg: rng.random_range(0.0..180.0),
    });
    while out.len() < count {
        let a: f64 = rng.random_range(0.05..0.3);
        let b: f64 = rng.random_range(0.05..0.3);
        let r: f64 = rng.random_range(0.0..0.5);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            intensity: rng.random_range(-0.25..0.45),
            a,
            b,
            x0: r * theta.cos(),
            y0: r * theta.sin(),
            phi_deg: rng.random_range(0.0..180.0),
        });
    }
    out
}

/// Evaluate the clamped intensity sum at every pixel centre.
pub fn rasterize(ellipses: &[Ellipse], n: usize) -> Image {
    let ctr = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    let mut pixels = vec![0.0; n * n];
    for i in 0..n {
        let y = (ctr - i as f64) / half;
        for j in 0..n {
            let x = (j as f64 - ctr) / half;
            let v: f64 = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
            pixels[i * n + j] = v.clamp(0.0, 1.0);
        }
    }
    Image::new(n, pixels).expect("n*n pixels")
}

pub fn make_phantom(kind: PhantomKind, n: usize, seed: u64) -> Result<Image> {
    if n < 16 {
        return Err(Error::InvalidArgument(format!("phantom side must be at least 16, got {n}")));
    }
    let ellipses = match kind {
        PhantomKind::SheppLogan => shepp_logan_ellipses(),
        PhantomKind::RandomEllipses => random_ellipses(seed),
    };
    Ok(rasterize(&ellipses, n))
}
