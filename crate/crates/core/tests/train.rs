use rand::Rng as _;
use rand_distr::StandardNormal;
use unfold_ct::net::{Measurement, ModelParams, UnfoldedNet};
use unfold_ct::physics::{fbp, forward_project, make_phantom, power_iteration_l, simulate_ldct, Geometry, Image};
use unfold_ct::physics::{NoiseConfig, PhantomKind, RampFilter};
use unfold_ct::rng::{derive_seed, rng_from_seed, stage_rng, Stage};
use unfold_ct::schedule::{Schedule, ScheduleConfig};
use unfold_ct::tensor::AdamWConfig;
use unfold_ct::train::*;
use unfold_ct::Error;

const N: usize = 16;

fn geometry() -> Geometry {
    Geometry::parallel(N, 12, 23, 1.0).unwrap()
}

fn net(k: usize) -> UnfoldedNet {
    UnfoldedNet::new(geometry(), Schedule::new(ScheduleConfig::standard(k).unwrap()).unwrap())
}

fn lipschitz() -> f64 {
    power_iteration_l(&geometry(), 200, 1e-12).l
}

fn dataset(count: usize) -> Vec<TrainSample> {
    let g = geometry();
    (0..count as u64)
        .map(|i| {
            let x0 = make_phantom(PhantomKind::RandomEllipses, N, derive_seed(5, Stage::Phantom, i, 0)).unwrap();
            let y = forward_project(&x0, &g).unwrap();
            let noise = NoiseConfig { seed: derive_seed(5, Stage::Noise, i, 0), ..NoiseConfig::default() };
            let y = simulate_ldct(&y, &noise).unwrap();
            let x1 = fbp(&y, &g, RampFilter::Ramp).unwrap();
            TrainSample { x0, x1, meas: Measurement::new(y, &g).unwrap() }
        })
        .collect()
}

/// Init weights with every tensor nudged so no layer is the identity.
fn perturbed(k: usize, per_layer: bool, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(k, lipschitz(), per_layer, seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0xabc);
    for (_, t) in p.named_mut() {
        for v in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += 0.02 * z;
        }
    }
    p.project_mu();
    p
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.named().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn identity_model_rollout_stays_at_x1() {
    let net = net(6);
    let s = &dataset(1)[0];
    let mut p = ModelParams::init(6, lipschitz(), false, 1).unwrap();
    p.mu.data_mut().iter_mut().for_each(|m| *m = 0.0);
    let traj = rollout_no_grad(&net, &s.x1, &s.meas, &p, 0.0, &mut rng_from_seed(3)).unwrap();
    assert_eq!(traj.k(), 6);
    assert_eq!(traj.noise.len(), 5);
    for st in &traj.states {
        assert_eq!(st, &s.x1);
    }
    assert_eq!(traj.state(6), &s.x1);
}

#[test]
fn rollout_is_deterministic_per_seed() {
    let net = net(5);
    let s = &dataset(1)[0];
    let p = perturbed(5, false, 2);
    let a = rollout_no_grad(&net, &s.x1, &s.meas, &p, 1.0, &mut rng_from_seed(9)).unwrap();
    let b = rollout_no_grad(&net, &s.x1, &s.meas, &p, 1.0, &mut rng_from_seed(9)).unwrap();
    assert_eq!(a, b);
    let c = rollout_no_grad(&net, &s.x1, &s.meas, &p, 1.0, &mut rng_from_seed(10)).unwrap();
    // σ at t_K is 0, so the first step is noise-free and seeds diverge after it
    assert!(a.states[1] == c.states[1]);
    assert!(a.states[2] != c.states[2]);
}

#[test]
fn rollout_noise_increments_have_schedule_variance() {
    // With the identity model every increment is exactly σ_{t_i} z.
    let k = 6;
    let net = net(k);
    let s = &dataset(1)[0];
    let mut p = ModelParams::init(k, lipschitz(), false, 1).unwrap();
    p.mu.data_mut().iter_mut().for_each(|m| *m = 0.0);
    let runs = 200;
    let mut sums = vec![(0.0, 0.0, 0usize); k - 1];
    for r in 0..runs {
        let traj = rollout_no_grad(&net, &s.x1, &s.meas, &p, 1.0, &mut rng_from_seed(r)).unwrap();
        for j in 0..k - 1 {
            for (a, b) in traj.states[j].pixels().iter().zip(traj.states[j + 1].pixels()) {
                let d = b - a;
                sums[j].0 += d;
                sums[j].1 += d * d;
                sums[j].2 += 1;
            }
        }
    }
    for (j, (s1, s2, n)) in sums.into_iter().enumerate() {
        let i = k - j;
        let n = n as f64;
        let var = (s2 - s1 * s1 / n) / (n - 1.0);
        let want = net.schedule().sigma(i).powi(2);
        if want == 0.0 {
            assert_eq!(s2, 0.0, "t_{i}");
            continue;
        }
        assert!((var / want - 1.0).abs() < 0.1, "step from t_{i}: {var} vs {want}");
    }
}

#[test]
fn training_target_cases() {
    let sched = Schedule::new(ScheduleConfig::standard(6).unwrap()).unwrap();
    let x0 = make_phantom(PhantomKind::SheppLogan, N, 0).unwrap();
    let x1 = Image::new(N, x0.pixels().iter().map(|v| 1.0 - v).collect()).unwrap();
    for k in 2..=6 {
        let same = training_target(&x0, &x0, k, &sched).unwrap();
        for (a, b) in same.pixels().iter().zip(x0.pixels()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    // small t_1: mostly x0
    let t2 = training_target(&x0, &x1, 2, &sched).unwrap();
    let a1 = sched.alpha(1);
    assert!(a1 < 0.5);
    let d0: f64 = t2.pixels().iter().zip(x0.pixels()).map(|(a, b)| (a - b).abs()).sum();
    let d1: f64 = t2.pixels().iter().zip(x1.pixels()).map(|(a, b)| (a - b).abs()).sum();
    assert!(d0 < d1);
    // k = K against the alpha column of the schedule CSV
    let csv = sched.to_csv();
    let row: Vec<f64> = csv.lines().nth(1 + 5).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let alpha = row[4];
    let tk = training_target(&x0, &x1, 6, &sched).unwrap();
    for ((t, a), b) in tk.pixels().iter().zip(x0.pixels()).zip(x1.pixels()) {
        assert!((t - ((1.0 - alpha) * a + alpha * b)).abs() < 1e-12);
    }
    assert!(training_target(&x0, &x1, 1, &sched).is_err());
    assert!(training_target(&x0, &x1, 7, &sched).is_err());
    assert!(training_target(&x0, &make_phantom(PhantomKind::SheppLogan, 20, 0).unwrap(), 3, &sched).is_err());
}

#[test]
fn layer_draws_are_uniform_over_training_steps() {
    let k_max = 6;
    let steps = 10_000;
    let mut counts = vec![0usize; k_max + 1];
    for step in 0..steps {
        counts[draw_layer(&mut sample_rng(4, step, 0), k_max)] += 1;
    }
    assert_eq!(counts[0] + counts[1], 0);
    let p = 1.0 / (k_max - 1) as f64;
    let se = (p * (1.0 - p) / steps as f64).sqrt();
    for (k, &c) in counts.iter().enumerate().skip(2) {
        let f = c as f64 / steps as f64;
        assert!((f - p).abs() < 4.0 * se, "k = {k}: {f}");
    }
    // the draw is the one a training sample uses
    let net = net(k_max);
    let s = &dataset(1)[0];
    let p = perturbed(k_max, false, 1);
    for step in 0..5 {
        let g = sample_gradients(&net, s, &p, 1.0, &mut sample_rng(4, step, 0)).unwrap();
        assert_eq!(g.k, draw_layer(&mut sample_rng(4, step, 0), k_max));
    }
}

#[test]
fn exact_targets_give_zero_loss_and_no_update() {
    let net = net(4);
    let g = geometry();
    let zero = Image::zeros(N);
    let y = forward_project(&zero, &g).unwrap();
    let s = TrainSample { x0: zero.clone(), x1: zero, meas: Measurement::new(y, &g).unwrap() };
    let mut st = TrainState::new(
        ModelParams::init(4, lipschitz(), false, 3).unwrap(),
        AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
    );
    let before = bits(&st.params);
    let rec = training_step(&net, &[&s], &mut st.params, &mut st.opt, 0.0, 1).unwrap();
    assert_eq!((rec.l1, rec.l2), (0.0, 0.0));
    assert_eq!(bits(&st.params), before);
}

#[test]
fn small_step_decreases_loss_on_frozen_batch() {
    let net = net(4);
    let data = dataset(4);
    let batch: Vec<&TrainSample> = data.iter().collect();
    let mut st = TrainState::new(perturbed(4, false, 7), AdamWConfig { lr: 1e-5, ..AdamWConfig::default() });
    let (l1, l2, _) = batch_gradients(&net, &batch, &st.params, 1.0, 2, 0).unwrap();
    let rec = training_step(&net, &batch, &mut st.params, &mut st.opt, 1.0, 2).unwrap();
    assert_eq!((rec.l1, rec.l2), (l1, l2));
    let (a1, a2, _) = batch_gradients(&net, &batch, &st.params, 1.0, 2, 0).unwrap();
    assert!(a1 + a2 < l1 + l2, "{} -> {}", l1 + l2, a1 + a2);
}

#[test]
fn rollout_layers_get_no_gradient() {
    let k_max = 5;
    let net = net(k_max);
    let s = &dataset(1)[0];
    let p = perturbed(k_max, true, 3);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    for step in 0..6 {
        let g = sample_gradients(&net, s, &p, 1.0, &mut sample_rng(8, step, 0)).unwrap();
        let live = [g.k - 1, 0];
        for (name, grad) in names.iter().zip(&g.grads) {
            if name == "mu" {
                for (i, v) in grad.iter().enumerate() {
                    assert_eq!(*v != 0.0, live.contains(&i), "mu[{i}] with k = {}", g.k);
                }
                continue;
            }
            let layer: usize = name[3..name.find('.').unwrap()].parse().unwrap();
            let nonzero = grad.iter().any(|v| *v != 0.0);
            if !live.contains(&layer) {
                assert!(!nonzero, "{name} has a gradient with k = {}", g.k);
            } else if name.ends_with("conv3.w") {
                assert!(nonzero, "{name} has no gradient with k = {}", g.k);
            }
        }
    }
}

#[test]
fn one_epoch_of_four_with_batch_four_is_one_step() {
    let net = net(3);
    let data = dataset(4);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    assert_eq!(cfg.total_steps(4), 1);
    let mut st = TrainState::new(ModelParams::init(3, lipschitz(), false, 0).unwrap(), cfg.optimizer);
    let losses = train(&net, &data, &mut st, &cfg, None).unwrap();
    assert_eq!(losses.len(), 1);
    assert_eq!(st.step(), 1);
    assert!(train(&net, &[], &mut st, &cfg, None).is_err());
}

#[test]
fn batches_cover_each_epoch_once() {
    let cfg = TrainConfig { batch_size: 3, seed: 4, ..TrainConfig::default() };
    assert_eq!(cfg.batches_per_epoch(7), 3);
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (0..3).flat_map(|b| batch_indices(7, &cfg, epoch * 3 + b)).collect();
        assert_eq!(batch_indices(7, &cfg, epoch * 3 + 2).len(), 1);
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
    assert_ne!(batch_indices(7, &cfg, 0), batch_indices(7, &cfg, 3));
}

#[test]
fn resume_reproduces_losses_bit_exactly() {
    let net = net(3);
    let data = dataset(5);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, seed: 6, ..TrainConfig::default() };
    let init = ModelParams::init(3, lipschitz(), false, 6).unwrap();
    let mut full = TrainState::new(init.clone(), cfg.optimizer);
    let all = train(&net, &data, &mut full, &cfg, None).unwrap();
    assert_eq!(all.len(), 6);

    let mut part = TrainState::new(init, cfg.optimizer);
    let first = train(&net, &data, &mut part, &TrainConfig { max_steps: Some(4), ..cfg.clone() }, None).unwrap();
    let bytes = part.to_checkpoint("cfg").to_bytes();
    let mut resumed = TrainState::from_checkpoint(Checkpoint::from_bytes(&bytes, "mem".as_ref()).unwrap());
    let rest = train(&net, &data, &mut resumed, &cfg, None).unwrap();
    let joined: Vec<LossRecord> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, all);
    assert_eq!(bits(&resumed.params), bits(&full.params));
}

#[test]
fn non_finite_loss_aborts_with_checkpoint() {
    let net = net(3);
    let data = dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let mut p = ModelParams::init(3, lipschitz(), false, 0).unwrap();
    p.pom[0].get_mut("conv3.b").unwrap().data_mut()[0] = f64::NAN;
    let mut st = TrainState::new(p, cfg.optimizer);
    let before = bits(&st.params);
    let out = TrainOutput { dir: dir.path().to_path_buf(), config_echo: "x".into() };
    let err = train(&net, &data, &mut st, &cfg, Some(&out)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    assert_eq!(bits(&st.params), before);
    let saved = Checkpoint::load(&dir.path().join("abort.ckpt")).unwrap();
    assert_eq!(saved.step(), 0);
    assert!(!dir.path().join("final.ckpt").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("loss.csv")).unwrap(), "step,L1,L2\n");
}

#[test]
fn train_writes_losses_and_checkpoints() {
    let net = net(3);
    let data = dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, checkpoint_every: 2, ..TrainConfig::default() };
    let mut st = TrainState::new(ModelParams::init(3, lipschitz(), false, 0).unwrap(), cfg.optimizer);
    let out = TrainOutput { dir: dir.path().to_path_buf(), config_echo: "seed = 0\n".into() };
    let losses = train(&net, &data, &mut st, &cfg, Some(&out)).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,L1,L2");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4], format!("3,{},{}", losses[3].l1, losses[3].l2));
    for name in ["step_000002.ckpt", "step_000004.ckpt", "final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let fin = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(fin.step(), 4);
    assert_eq!(fin.config, "seed = 0\n");
}

#[test]
fn zero_noise_sampling_is_the_layer_composition() {
    let k = 5;
    let net = net(k);
    let s = &dataset(1)[0];
    let p = perturbed(k, true, 4);
    let got = sample(&net, &s.meas, &s.x1, &p, 0.0, true, &mut rng_from_seed(1)).unwrap();
    let mut x = s.x1.clone();
    for i in (1..=k).rev() {
        x = net.layer_apply(&x, &s.meas, i, &p).unwrap();
    }
    assert_eq!(got, x);
    assert!(sample(&net, &s.meas, &s.x1, &p, -1.0, true, &mut rng_from_seed(1)).is_err());
}

#[test]
fn sampling_is_deterministic_and_final_noise_is_the_last_draw() {
    let k = 4;
    let net = net(k);
    let s = &dataset(1)[0];
    let p = perturbed(k, false, 5);
    let run = |final_noise| {
        sample(&net, &s.meas, &s.x1, &p, 3.0, final_noise, &mut stage_rng(1, Stage::Sample, 0, 0)).unwrap()
    };
    let a = run(true);
    assert_eq!(a, run(true));
    let b = run(false);
    let s1 = 3.0 * net.schedule().sigma(1);
    let diff: Vec<f64> = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) / s1).collect();
    let var = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
    assert!((var - 1.0).abs() < 0.3, "{var}");
}

#[test]
fn sampling_uses_exactly_k_evaluations() {
    let s = &dataset(1)[0];
    for k in 2..=9 {
        let net = net(k);
        let p = ModelParams::init(k, lipschitz(), false, 0).unwrap();
        net.reset_evaluations();
        sample(&net, &s.meas, &s.x1, &p, 1.0, true, &mut rng_from_seed(0)).unwrap();
        assert_eq!(net.evaluations(), k);
    }
}
