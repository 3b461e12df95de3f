//! Line-oriented `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use unfold_ct::physics::{Geometry, NoiseConfig, PhantomKind, ProjectorKind, RampFilter};
use unfold_ct::schedule::{ScheduleConfig, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use unfold_ct::tensor::AdamWConfig;
use unfold_ct::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryBlock {
    pub n: usize,
    pub n_views: usize,
    pub n_dets: usize,
    pub det_spacing: f64,
    pub projector: ProjectorKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataBlock {
    pub phantom: PhantomKind,
    /// Images generated by `phantom`.
    pub count: usize,
    /// The first `train_count` items are used for training, the rest are held out.
    pub train_count: usize,
    pub fbp_filter: RampFilter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBlock {
    pub i0: f64,
    pub dose_fraction: f64,
    pub elec_var: f64,
    pub atten_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleBlock {
    pub beta_min: f64,
    pub beta_max: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sigma_train_scale: f64,
    /// 0 means no cap beyond `epochs`.
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub per_layer_weights: bool,
    pub power_iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBlock {
    pub sigma_scale: f64,
    pub final_noise: bool,
    /// Data range used by PSNR and SSIM.
    pub data_range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub geometry: GeometryBlock,
    pub data: DataBlock,
    pub noise: NoiseBlock,
    pub schedule: ScheduleBlock,
    pub train: TrainBlock,
    pub sample: SampleBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let noise = NoiseConfig::default();
        ExperimentConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            geometry: GeometryBlock { n: 64, n_views: 90, n_dets: 95, det_spacing: 1.0, projector: ProjectorKind::Joseph },
            data: DataBlock { phantom: PhantomKind::RandomEllipses, count: 200, train_count: 180, fbp_filter: RampFilter::Ramp },
            noise: NoiseBlock {
                i0: noise.i0,
                dose_fraction: noise.dose_fraction,
                elec_var: noise.elec_var,
                atten_scale: noise.atten_scale,
            },
            schedule: ScheduleBlock { beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX, k: 6 },
            train: TrainBlock {
                epochs: 45,
                batch_size: 4,
                lr: 1e-4,
                weight_decay: 0.01,
                sigma_train_scale: 1.0,
                max_steps: 2000,
                checkpoint_every: 500,
                per_layer_weights: false,
                power_iters: 300,
            },
            sample: SampleBlock { sigma_scale: 1.0, final_noise: true, data_range: 1.0 },
        }
    }
}

/// Every recognised key, in serialisation order.
pub const KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "run_dir",
    "n",
    "n_views",
    "n_dets",
    "det_spacing",
    "projector",
    "phantom",
    "count",
    "train_count",
    "fbp_filter",
    "i0",
    "dose_fraction",
    "elec_var",
    "atten_scale",
    "beta_min",
    "beta_max",
    "k",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "sigma_train_scale",
    "max_steps",
    "checkpoint_every",
    "per_layer_weights",
    "power_iters",
    "sigma_scale",
    "final_noise",
    "data_range",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

impl ExperimentConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            "n" => self.geometry.n = parse(key, v)?,
            "n_views" => self.geometry.n_views = parse(key, v)?,
            "n_dets" => self.geometry.n_dets = parse(key, v)?,
            "det_spacing" => self.geometry.det_spacing = parse(key, v)?,
            "projector" => self.geometry.projector = parse(key, v)?,
            "phantom" => self.data.phantom = parse(key, v)?,
            "count" => self.data.count = parse(key, v)?,
            "train_count" => self.data.train_count = parse(key, v)?,
            "fbp_filter" => self.data.fbp_filter = parse(key, v)?,
            "i0" => self.noise.i0 = parse(key, v)?,
            "dose_fraction" => self.noise.dose_fraction = parse(key, v)?,
            "elec_var" => self.noise.elec_var = parse(key, v)?,
            "atten_scale" => self.noise.atten_scale = parse(key, v)?,
            "beta_min" => self.schedule.beta_min = parse(key, v)?,
            "beta_max" => self.schedule.beta_max = parse(key, v)?,
            "k" => self.schedule.k = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "sigma_train_scale" => self.train.sigma_train_scale = parse(key, v)?,
            "max_steps" => self.train.max_steps = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "per_layer_weights" => self.train.per_layer_weights = parse(key, v)?,
            "power_iters" => self.train.power_iters = parse(key, v)?,
            "sigma_scale" => self.sample.sigma_scale = parse(key, v)?,
            "final_noise" => self.sample.final_noise = parse(key, v)?,
            "data_range" => self.sample.data_range = parse(key, v)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Textual value of one key, in the form [`ExperimentConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            "n" => self.geometry.n.to_string(),
            "n_views" => self.geometry.n_views.to_string(),
            "n_dets" => self.geometry.n_dets.to_string(),
            "det_spacing" => self.geometry.det_spacing.to_string(),
            "projector" => self.geometry.projector.to_string(),
            "phantom" => self.data.phantom.to_string(),
            "count" => self.data.count.to_string(),
            "train_count" => self.data.train_count.to_string(),
            "fbp_filter" => self.data.fbp_filter.to_string(),
            "i0" => self.noise.i0.to_string(),
            "dose_fraction" => self.noise.dose_fraction.to_string(),
            "elec_var" => self.noise.elec_var.to_string(),
            "atten_scale" => self.noise.atten_scale.to_string(),
            "beta_min" => self.schedule.beta_min.to_string(),
            "beta_max" => self.schedule.beta_max.to_string(),
            "k" => self.schedule.k.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "lr" => self.train.lr.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "sigma_train_scale" => self.train.sigma_train_scale.to_string(),
            "max_steps" => self.train.max_steps.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "per_layer_weights" => self.train.per_layer_weights.to_string(),
            "power_iters" => self.train.power_iters.to_string(),
            "sigma_scale" => self.sample.sigma_scale.to_string(),
            "final_noise" => self.sample.final_noise.to_string(),
            "data_range" => self.sample.data_range.to_string(),
            _ => return None,
        })
    }

    /// Parse `key = value` lines on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown keys and bad values are errors
    /// that name the line.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            cfg.set(key.trim(), value.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Every key in [`KEYS`] order; [`ExperimentConfig::parse_str`] inverts this.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.n < 16 {
            bail!("n must be at least 16, got {}", g.n);
        }
        if self.data.train_count > self.data.count {
            bail!("train_count ({}) exceeds count ({})", self.data.train_count, self.data.count);
        }
        if self.schedule.k < 2 {
            bail!("k must be at least 2, got {}", self.schedule.k);
        }
        if !(self.sample.data_range > 0.0) {
            bail!("data_range must be positive");
        }
        self.geometry()?;
        self.noise_config(0).validate()?;
        self.schedule_config()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let g = &self.geometry;
        Ok(Geometry::parallel(g.n, g.n_views, g.n_dets, g.det_spacing)?.with_projector(g.projector))
    }

    pub fn noise_config(&self, seed: u64) -> NoiseConfig {
        let b = &self.noise;
        NoiseConfig { i0: b.i0, dose_fraction: b.dose_fraction, elec_var: b.elec_var, atten_scale: b.atten_scale, seed }
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig> {
        let s = &self.schedule;
        Ok(ScheduleConfig::uniform(s.beta_min, s.beta_max, s.k)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            sigma_train_scale: t.sigma_train_scale,
            max_steps: (t.max_steps > 0).then_some(t.max_steps),
            checkpoint_every: t.checkpoint_every,
            optimizer: AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, ..AdamWConfig::default() },
        }
    }

    /// Apply `--key value` style overrides; hyphens in keys are read as underscores.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(&k.replace('-', "_"), v).with_context(|| format!("override --{k}"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_text();
        assert_eq!(ExperimentConfig::parse_str(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse_str("seed = 3\n\n# note\nbogus = 1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn bad_value_and_syntax_report_line() {
        let msg = format!("{:#}", ExperimentConfig::parse_str("k = six").unwrap_err());
        assert!(msg.contains("line 1") && msg.contains("`k`"), "{msg}");
        let msg = format!("{:#}", ExperimentConfig::parse_str("seed 3").unwrap_err());
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[("dose-fraction".into(), "0.5".into()), ("k".into(), "7".into())]).unwrap();
        assert_eq!(c.noise.dose_fraction, 0.5);
        assert_eq!(c.schedule.k, 7);
        assert!(c.apply_overrides(&[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn validation_catches_inconsistency() {
        let mut c = ExperimentConfig::default();
        c.data.train_count = 500;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.schedule.k = 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.noise.i0 = 0.0;
        assert!(c.validate().is_err());
    }
}
