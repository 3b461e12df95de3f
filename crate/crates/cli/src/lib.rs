//! Experiment pipelines behind the `unfold-ct` binary. Each command is a pure
//! function of the configuration, its input artifacts and the master seed.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use unfold_ct::io::{item_name, read_image, read_sinogram, write_image, write_sinogram, DatasetLayout};
use unfold_ct::metrics::{evaluate, psnr, ssim, MetricReport, MetricRow};
use unfold_ct::net::{Measurement, ModelParams, UnfoldedNet};
use unfold_ct::physics::{fbp, forward_project, make_phantom, power_iteration_l, simulate_ldct, Image};
use unfold_ct::rng::{derive_seed, stage_rng, Stage};
use unfold_ct::schedule::Schedule;
use unfold_ct::train::{self, Checkpoint, TrainOutput, TrainSample, TrainState};

pub use config::ExperimentConfig;

pub const META_FILE: &str = "meta";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const RECON_DIR: &str = "recon";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SIGMA_ABLATION_FILE: &str = "ablate_sigma.csv";
pub const K_ABLATION_FILE: &str = "ablate_k.csv";

const POWER_TOL: f64 = 1e-12;

fn write_meta(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(META_FILE);
    fs::write(&p, cfg.to_text()).with_context(|| format!("writing {}", p.display()))
}

/// Generate `count` clean phantoms into `<data_dir>/clean`.
pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<usize> {
    let layout = DatasetLayout::new(&cfg.data_dir);
    let dir = layout.dir(DatasetLayout::CLEAN);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for i in 0..cfg.data.count {
        let seed = derive_seed(cfg.seed, Stage::Phantom, i as u64, 0);
        let img = make_phantom(cfg.data.phantom, cfg.geometry.n, seed)?;
        write_image(&layout.item(DatasetLayout::CLEAN, i), &img)?;
    }
    write_meta(&cfg.data_dir, cfg)?;
    log::info!("wrote {} phantoms to {}", cfg.data.count, dir.display());
    Ok(cfg.data.count)
}

/// Project every clean image, draw one low-dose realisation per image and
/// reconstruct it with FBP.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<usize> {
    let layout = DatasetLayout::new(&cfg.data_dir);
    let count = layout.count().context("reading clean dataset")?;
    ensure!(count > 0, "no clean images in {}", layout.dir(DatasetLayout::CLEAN).display());
    let geom = cfg.geometry()?;
    for kind in [DatasetLayout::SINO_CLEAN, DatasetLayout::SINO_LDCT, DatasetLayout::FBP_LDCT] {
        fs::create_dir_all(layout.dir(kind))?;
    }
    for i in 0..count {
        let x0 = read_image(&layout.item(DatasetLayout::CLEAN, i))?;
        geom.check_image(&x0).with_context(|| format!("clean image {i}"))?;
        let y = forward_project(&x0, &geom)?;
        let noise = cfg.noise_config(derive_seed(cfg.seed, Stage::Noise, i as u64, 0));
        let y_ldct = simulate_ldct(&y, &noise)?;
        let x1 = fbp(&y_ldct, &geom, cfg.data.fbp_filter)?;
        write_sinogram(&layout.item(DatasetLayout::SINO_CLEAN, i), &y)?;
        write_sinogram(&layout.item(DatasetLayout::SINO_LDCT, i), &y_ldct)?;
        write_image(&layout.item(DatasetLayout::FBP_LDCT, i), &x1)?;
    }
    write_meta(&cfg.data_dir, cfg)?;
    log::info!("simulated {count} low-dose scans");
    Ok(count)
}

/// Items `ids` as `(x0, x1, measurement)` triples.
pub fn load_samples(cfg: &ExperimentConfig, ids: std::ops::Range<usize>) -> Result<Vec<TrainSample>> {
    let layout = DatasetLayout::new(&cfg.data_dir);
    let geom = cfg.geometry()?;
    ids.map(|i| {
        let x0 = read_image(&layout.item(DatasetLayout::CLEAN, i))?;
        let x1 = read_image(&layout.item(DatasetLayout::FBP_LDCT, i))?;
        let y = read_sinogram(&layout.item(DatasetLayout::SINO_LDCT, i))
            .with_context(|| format!("item {i}: run `simulate` first"))?;
        geom.check_image(&x0)?;
        geom.check_image(&x1)?;
        let meas = Measurement::new(y, &geom).with_context(|| format!("item {i}"))?;
        Ok(TrainSample { x0, x1, meas })
    })
    .collect()
}

fn dataset_split(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let count = DatasetLayout::new(&cfg.data_dir).count()?;
    ensure!(
        cfg.data.train_count <= count,
        "train_count {} exceeds the {count} images in {}",
        cfg.data.train_count,
        cfg.data_dir.display()
    );
    Ok((cfg.data.train_count, count))
}

pub fn build_net(cfg: &ExperimentConfig) -> Result<UnfoldedNet> {
    Ok(UnfoldedNet::new(cfg.geometry()?, Schedule::new(cfg.schedule_config()?)?))
}

/// Train on the first `train_count` items, writing `loss.csv` and checkpoints to
/// `out_dir`. Training resumes from `resume` when given.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    let (n_train, _) = dataset_split(cfg)?;
    ensure!(n_train > 0, "train_count is 0");
    let data = load_samples(cfg, 0..n_train)?;
    let net = build_net(cfg)?;
    let tc = cfg.train_config();
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            ensure!(ck.params.k() == cfg.schedule.k, "checkpoint has K = {}, config has k = {}", ck.params.k(), cfg.schedule.k);
            log::info!("resuming from {} at step {}", p.display(), ck.step());
            TrainState::from_checkpoint(ck)
        }
        None => {
            let power = power_iteration_l(net.geometry(), cfg.train.power_iters, POWER_TOL);
            log::info!("Lipschitz constant L = {:.6} (converged: {})", power.l, power.converged);
            let params = ModelParams::init(cfg.schedule.k, power.l, cfg.train.per_layer_weights, cfg.seed)?;
            TrainState::new(params, tc.optimizer)
        }
    };
    write_meta(out_dir, cfg)?;
    let out = TrainOutput { dir: out_dir.to_path_buf(), config_echo: cfg.to_text() };
    train::train(&net, &data, &mut state, &tc, Some(&out))?;
    Ok(state)
}

pub fn load_params(cfg: &ExperimentConfig, ckpt: &Path) -> Result<ModelParams> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    ensure!(
        ck.params.k() == cfg.schedule.k,
        "checkpoint {} has K = {}, config has k = {}",
        ckpt.display(),
        ck.params.k(),
        cfg.schedule.k
    );
    Ok(ck.params)
}

/// Sample every held-out item with `sigma_scale`; returns `(id, reconstruction)`.
/// Item `i` always uses the stream `(seed, Sample, i)`, so runs that differ only in
/// `sigma_scale` share their noise draws.
pub fn sample_held_out(
    cfg: &ExperimentConfig,
    net: &UnfoldedNet,
    params: &ModelParams,
    sigma_scale: f64,
) -> Result<Vec<(usize, Image)>> {
    let (start, end) = dataset_split(cfg)?;
    ensure!(end > start, "no held-out items: train_count = count = {end}");
    let samples = load_samples(cfg, start..end)?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in (start..end).zip(&samples) {
        let mut rng = stage_rng(cfg.seed, Stage::Sample, i as u64, 0);
        let x = train::sample(net, &s.meas, &s.x1, params, sigma_scale, cfg.sample.final_noise, &mut rng)?;
        out.push((i, x));
    }
    Ok(out)
}

/// Sample the held-out items into `<out_dir>/recon`.
pub fn cmd_sample(cfg: &ExperimentConfig, ckpt: &Path, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let params = load_params(cfg, ckpt)?;
    let net = build_net(cfg)?;
    let recon = out_dir.join(RECON_DIR);
    fs::create_dir_all(&recon)?;
    for (i, x) in sample_held_out(cfg, &net, &params, cfg.sample.sigma_scale)? {
        write_image(&recon.join(item_name(i)), &x)?;
    }
    write_meta(out_dir, cfg)?;
    log::info!("{} network evaluations", net.evaluations());
    Ok(recon)
}

/// Score `recon_dir` against the clean images and write `metrics.csv` to `out`.
pub fn cmd_eval(cfg: &ExperimentConfig, recon_dir: &Path, out: &Path) -> Result<MetricReport> {
    let reference = DatasetLayout::new(&cfg.data_dir).dir(DatasetLayout::CLEAN);
    let report = evaluate(recon_dir, &reference, cfg.sample.data_range)?;
    write_file(out, &report.to_csv())?;
    Ok(report)
}

/// Metrics of the FBP inputs of the held-out items.
pub fn fbp_baseline(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let (start, end) = dataset_split(cfg)?;
    let samples = load_samples(cfg, start..end)?;
    score(cfg, (start..end).zip(samples.iter().map(|s| &s.x1)), &samples)
}

fn score<'a>(
    cfg: &ExperimentConfig,
    recons: impl Iterator<Item = (usize, &'a Image)>,
    samples: &[TrainSample],
) -> Result<MetricReport> {
    let range = cfg.sample.data_range;
    let rows = recons
        .zip(samples)
        .map(|((i, x), s)| {
            Ok(MetricRow { id: format!("{i:05}"), psnr_db: psnr(x, &s.x0, range)?, ssim: ssim(x, &s.x0, range)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

pub fn cmd_schedule_dump(cfg: &ExperimentConfig) -> Result<String> {
    Ok(Schedule::new(cfg.schedule_config()?)?.to_csv())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
}

fn ablation_csv(key: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("{key},psnr_mean,psnr_sd,ssim_mean,ssim_sd\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.label, r.psnr.0, r.psnr.1, r.ssim.0, r.ssim.1).unwrap();
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn held_out_row(cfg: &ExperimentConfig, label: String, net: &UnfoldedNet, params: &ModelParams, c: f64) -> Result<AblationRow> {
    let (start, end) = dataset_split(cfg)?;
    let samples = load_samples(cfg, start..end)?;
    let recons = sample_held_out(cfg, net, params, c)?;
    let report = score(cfg, recons.iter().map(|(i, x)| (*i, x)), &samples)?;
    Ok(AblationRow { label, psnr: report.psnr_stats(), ssim: report.ssim_stats() })
}

/// One metric row per sampling-noise scale, all from the same checkpoint and
/// the same noise draws.
pub fn cmd_ablate_sigma(cfg: &ExperimentConfig, ckpt: &Path, scales: &[f64], out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    ensure!(!scales.is_empty(), "no sigma scales given");
    let params = load_params(cfg, ckpt)?;
    let net = build_net(cfg)?;
    let rows = scales
        .iter()
        .map(|&c| held_out_row(cfg, c.to_string(), &net, &params, c))
        .collect::<Result<Vec<_>>>()?;
    write_file(out, &ablation_csv("sigma_scale", &rows))?;
    Ok(rows)
}

/// One metric row per number of unfolded layers. Each K trains into
/// `<run_dir>/k<K>` unless that directory already holds a final checkpoint.
pub fn cmd_ablate_k(cfg: &ExperimentConfig, ks: &[usize], out: &Path) -> Result<Vec<AblationRow>> {
    ensure!(!ks.is_empty(), "no K values given");
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = cfg.clone();
        c.schedule.k = k;
        c.validate()?;
        let dir = cfg.run_dir.join(format!("k{k}"));
        let ckpt = dir.join(FINAL_CKPT);
        if !ckpt.exists() {
            cmd_train(&c, &dir, None)?;
        } else {
            log::info!("K = {k}: using {}", ckpt.display());
        }
        let params = load_params(&c, &ckpt)?;
        let net = build_net(&c)?;
        rows.push(held_out_row(&c, k.to_string(), &net, &params, c.sample.sigma_scale)?);
    }
    write_file(out, &ablation_csv("k", &rows))?;
    Ok(rows)
}

/// Comma-separated list parser for `--scales` and `--k-list`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) if !a.contains('.') && !b.contains('.') => {
                // inclusive integer range like `5..9`
                let (a, b): (i64, i64) = (a.parse()?, b.parse()?);
                ensure!(a <= b, "empty range `{part}`");
                for v in a..=b {
                    out.push(v.to_string().parse::<T>().map_err(|e| anyhow::anyhow!("`{v}`: {e}"))?);
                }
            }
            _ => out.push(part.parse::<T>().map_err(|e| anyhow::anyhow!("`{part}`: {e}"))?),
        }
    }
    if out.is_empty() {
        bail!("empty list `{s}`");
    }
    Ok(out)
}

/// Split `--key value` / `--key=value` pairs whose key is a config key out of
/// `args`, leaving everything else for the subcommand parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !config::KEYS.contains(&key.replace('-', "_").as_str()) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{key} needs a value"))?,
        };
        pairs.push((key, value));
    }
    Ok((rest, pairs))
}

/// Summary line used by `eval` and the ablations.
pub fn summary(report: &MetricReport) -> String {
    let (pm, ps) = report.psnr_stats();
    let (sm, ss) = report.ssim_stats();
    format!("PSNR {pm:.3} ± {ps:.3} dB, SSIM {sm:.4} ± {ss:.4} over {} images", report.rows.len())
}
