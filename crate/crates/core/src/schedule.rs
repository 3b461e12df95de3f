//! Bridge schedule: the triangular β rate, its integrals, and the Gaussian
//! bridge marginal `x_t = (1 − α_t) x₀ + α_t x₁ + σ_t z`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::physics::Image;

pub const DEFAULT_BETA_MIN: f64 = 1e-8;
pub const DEFAULT_BETA_MAX: f64 = 3.005e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    /// `t_0 = 0 < t_1 < … < t_K = 1`.
    pub grid: Vec<f64>,
}

impl ScheduleConfig {
    pub fn new(beta_min: f64, beta_max: f64, grid: Vec<f64>) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max, got {beta_min} and {beta_max}"
            )));
        }
        if grid.len() < 3 {
            return Err(Error::InvalidArgument("time grid needs at least K = 2 steps".into()));
        }
        if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("time grid must start at 0 and end at 1".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
        }
        Ok(ScheduleConfig { beta_min, beta_max, grid })
    }

    pub fn uniform(beta_min: f64, beta_max: f64, k: usize) -> Result<Self> {
        Self::new(beta_min, beta_max, time_grid(k)?)
    }

    /// `β_min = 1e-8`, `β_max = 3.005e-6` on a uniform grid of `k` steps.
    pub fn standard(k: usize) -> Result<Self> {
        Self::uniform(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX, k)
    }

    pub fn k(&self) -> usize {
        self.grid.len() - 1
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Triangular rate: rises linearly from `β_min` at 0 to `β_max` at ½, then falls back.
pub fn beta_at(t: f64, cfg: &ScheduleConfig) -> Result<f64> {
    check_time(t)?;
    let delta = cfg.beta_max - cfg.beta_min;
    Ok(if t <= 0.5 {
        cfg.beta_min + 2.0 * delta * t
    } else {
        cfg.beta_max - 2.0 * delta * (t - 0.5)
    })
}

/// `∫₀ᵗ β(r) dr` for `t ∈ [0, 1]`.
fn cumulative(t: f64, cfg: &ScheduleConfig) -> f64 {
    let delta = cfg.beta_max - cfg.beta_min;
    if t <= 0.5 {
        cfg.beta_min * t + delta * t * t
    } else {
        let u = t - 0.5;
        0.5 * cfg.beta_min + 0.25 * delta + cfg.beta_max * u - delta * u * u
    }
}

/// `(γ²_t, γ̃²_t) = (∫₀ᵗ β, ∫ₜ¹ β)`. The schedule is symmetric about ½, so the
/// upper integral is evaluated as `∫₀^{1−t} β`, which stays exact near `t = 1`.
pub fn gammas_at(t: f64, cfg: &ScheduleConfig) -> Result<(f64, f64)> {
    check_time(t)?;
    Ok((cumulative(t, cfg), cumulative(1.0 - t, cfg)))
}

/// `(α_t, σ_t)` with `α = γ²/(γ² + γ̃²)` and `σ² = γ²γ̃²/(γ² + γ̃²)`.
/// The endpoints take their limits: `α(0) = 0`, `α(1) = 1`, `σ = 0`.
pub fn mixing_at(t: f64, cfg: &ScheduleConfig) -> Result<(f64, f64)> {
    check_time(t)?;
    if t == 0.0 {
        return Ok((0.0, 0.0));
    }
    if t == 1.0 {
        return Ok((1.0, 0.0));
    }
    let (g, gt) = gammas_at(t, cfg)?;
    let total = g + gt;
    Ok((g / total, (g * gt / total).sqrt()))
}

/// Uniform grid `t_k = k / K`, `k = 0..=K`.
pub fn time_grid(k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be at least 2, got {k}")));
    }
    Ok((0..=k).map(|i| i as f64 / k as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleNode {
    pub t: f64,
    pub beta: f64,
    pub gamma_sq: f64,
    pub gamma_tilde_sq: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Schedule quantities tabulated on the time grid; node `k` is time `t_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    config: ScheduleConfig,
    nodes: Vec<ScheduleNode>,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let nodes = config
            .grid
            .iter()
            .map(|&t| {
                let (gamma_sq, gamma_tilde_sq) = gammas_at(t, &config)?;
                let (alpha, sigma) = mixing_at(t, &config)?;
                Ok(ScheduleNode { t, beta: beta_at(t, &config)?, gamma_sq, gamma_tilde_sq, alpha, sigma })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule { config, nodes })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of unfolded steps `K`.
    pub fn k(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[ScheduleNode] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> Result<&ScheduleNode> {
        self.nodes
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("grid index {k} out of range 0..={}", self.k())))
    }

    pub fn t(&self, k: usize) -> f64 {
        self.nodes[k].t
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.nodes[k].alpha
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.nodes[k].sigma
    }

    /// `t,beta,gamma_sq,gamma_tilde_sq,alpha,sigma`, one row per grid node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,gamma_sq,gamma_tilde_sq,alpha,sigma\n");
        for n in &self.nodes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                n.t, n.beta, n.gamma_sq, n.gamma_tilde_sq, n.alpha, n.sigma
            ));
        }
        out
    }
}

/// Draw `x_{t_k} = (1 − α) x₀ + α x₁ + c·σ·z` at grid node `k`, with noise scale `c`.
pub fn bridge_sample<R: Rng + ?Sized>(
    x0: &Image,
    x1: &Image,
    k: usize,
    schedule: &Schedule,
    sigma_scale: f64,
    rng: &mut R,
) -> Result<Image> {
    x0.check_same_shape(x1)?;
    let node = schedule.node(k)?;
    let (alpha, sigma) = (node.alpha, node.sigma * sigma_scale);
    let pixels = x0
        .pixels()
        .iter()
        .zip(x1.pixels())
        .map(|(a, b)| {
            let mean = (1.0 - alpha) * a + alpha * b;
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                mean + sigma * z
            } else {
                mean
            }
        })
        .collect();
    Image::new(x0.n(), pixels)
}
