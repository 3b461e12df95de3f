use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unfold_ct::physics::Image;
use unfold_ct::schedule::{
    beta_at, bridge_sample, gammas_at, mixing_at, Schedule, ScheduleConfig,
};

fn standard() -> ScheduleConfig {
    ScheduleConfig::standard(6).unwrap()
}

/// Independent oracle: triangular rate written directly from its definition.
fn beta_ref(t: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (1.0 - (2.0 * t - 1.0).abs())
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (l, r) = (simpson(f, a, m), simpson(f, m, b));
    if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
        return l + r + (l + r - whole) / 15.0;
    }
    adaptive(f, a, m, l, tol / 2.0, depth - 1) + adaptive(f, m, b, r, tol / 2.0, depth - 1)
}

fn quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    adaptive(f, a, b, simpson(f, a, b), 1e-22, 40)
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[test]
fn closed_form_gammas_match_quadrature() {
    let c = standard();
    let f = |t: f64| beta_ref(t, c.beta_min, c.beta_max);
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let (g, gt) = gammas_at(t, &c).unwrap();
        let (qg, qgt) = (quad(&f, 0.0, t), quad(&f, t, 1.0));
        assert!(rel(g, qg) < 1e-10, "t={t}: {g} vs {qg}");
        assert!(rel(gt, qgt) < 1e-10, "t={t}: {gt} vs {qgt}");
    }
}

#[test]
fn beta_matches_reference_formula() {
    let c = standard();
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        assert!(rel(beta_at(t, &c).unwrap(), beta_ref(t, c.beta_min, c.beta_max)) < 1e-12);
    }
}

#[test]
fn total_integral_with_reference_values() {
    let c = standard();
    assert_eq!(c.beta_min, 1e-8);
    assert_eq!(c.beta_max, 3.005e-6);
    let (g1, _) = gammas_at(1.0, &c).unwrap();
    assert!(rel(g1, (1e-8 + 3.005e-6) / 2.0) < 1e-12);
}

#[test]
fn midpoint_sigma_matches_quadrature() {
    let c = standard();
    let f = |t: f64| beta_ref(t, c.beta_min, c.beta_max);
    let g = quad(&f, 0.0, 0.5);
    let (_, s) = mixing_at(0.5, &c).unwrap();
    assert!(rel(s, (g / 2.0).sqrt()) < 1e-10);
}

#[test]
fn alpha_monotone_and_sigma_unimodal() {
    let c = ScheduleConfig::uniform(1e-8, 3.005e-6, 100).unwrap();
    let s = Schedule::new(c).unwrap();
    let nodes = s.nodes();
    assert!(nodes.windows(2).all(|w| w[1].alpha >= w[0].alpha));
    let peak = nodes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.sigma.partial_cmp(&b.1.sigma).unwrap())
        .unwrap()
        .0;
    assert_eq!(nodes[peak].t, 0.5);
    assert!(nodes[..=peak].windows(2).all(|w| w[1].sigma >= w[0].sigma));
    assert!(nodes[peak..].windows(2).all(|w| w[1].sigma <= w[0].sigma));
}

#[test]
fn gamma_sum_is_constant() {
    let c = standard();
    let (total, _) = gammas_at(1.0, &c).unwrap();
    for i in 0..=1000 {
        let (g, gt) = gammas_at(i as f64 / 1000.0, &c).unwrap();
        assert!(rel(g + gt, total) < 1e-12);
    }
}

fn moment_images() -> (Image, Image) {
    let x0 = Image::new(4, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
    let x1 = Image::new(4, (0..16).map(|i| 1.0 - (i as f64 * 0.37).sin().abs()).collect()).unwrap();
    (x0, x1)
}

#[test]
fn bridge_moments_at_midpoint() {
    // K = 2 puts grid node 1 at t = 0.5.
    let s = Schedule::new(ScheduleConfig::standard(2).unwrap()).unwrap();
    let sigma = s.sigma(1);
    let (x0, x1) = moment_images();
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sum = [0.0; 16];
    let mut sq = [0.0; 16];
    for _ in 0..draws {
        let x = bridge_sample(&x0, &x1, 1, &s, 1.0, &mut rng).unwrap();
        for (p, v) in x.pixels().iter().enumerate() {
            sum[p] += v;
            sq[p] += v * v;
        }
    }
    let nd = draws as f64;
    for p in 0..16 {
        let mean = sum[p] / nd;
        let var = (sq[p] - nd * mean * mean) / (nd - 1.0);
        let expected = 0.5 * (x0.pixels()[p] + x1.pixels()[p]);
        let se = sigma / nd.sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "pixel {p}: mean {mean} vs {expected}");
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "pixel {p}: var ratio {}", var / (sigma * sigma));
    }
}

#[test]
fn scaled_noise_recovers_unit_variance() {
    let s = Schedule::new(ScheduleConfig::standard(6).unwrap()).unwrap();
    let (x0, x1) = moment_images();
    let k = 2;
    let (alpha, sigma) = (s.alpha(k), s.sigma(k));
    for &c in &[1.0, 3.0, 15.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut z = Vec::new();
        for _ in 0..1000 {
            let x = bridge_sample(&x0, &x1, k, &s, c, &mut rng).unwrap();
            for (p, v) in x.pixels().iter().enumerate() {
                let mean = (1.0 - alpha) * x0.pixels()[p] + alpha * x1.pixels()[p];
                z.push((v - mean) / (c * sigma));
            }
        }
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let v = z.iter().map(|q| (q - m) * (q - m)).sum::<f64>() / (n - 1.0);
        assert!(m.abs() < 4.0 / n.sqrt(), "c={c}: mean {m}");
        assert!((v - 1.0).abs() < 0.05, "c={c}: var {v}");
    }
}

#[test]
fn bridge_sample_is_deterministic_per_seed() {
    let s = Schedule::new(standard()).unwrap();
    let (x0, x1) = moment_images();
    let a = bridge_sample(&x0, &x1, 3, &s, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = bridge_sample(&x0, &x1, 3, &s, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn csv_rows_match_node_values() {
    let s = Schedule::new(standard()).unwrap();
    let csv = s.to_csv();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 7);
    for (row, node) in rows.iter().zip(s.nodes()) {
        assert_eq!(row, &vec![node.t, node.beta, node.gamma_sq, node.gamma_tilde_sq, node.alpha, node.sigma]);
    }
    assert_eq!(rows[0][4], 0.0);
    assert_eq!(rows[6][4], 1.0);
}

proptest! {
    #[test]
    fn mixing_stays_in_range(t in 0.0f64..=1.0, lo in 1e-9f64..1e-6, span in 0.0f64..1e-4) {
        let c = ScheduleConfig::uniform(lo, lo + span, 4).unwrap();
        let (a, s) = mixing_at(t, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(s >= 0.0 && s.is_finite());
        let (g, gt) = gammas_at(t, &c).unwrap();
        prop_assert!(g >= 0.0 && gt >= 0.0);
    }

    #[test]
    fn alpha_symmetry(t in 0.0f64..=1.0) {
        let c = standard();
        let (a, s) = mixing_at(t, &c).unwrap();
        let (b, r) = mixing_at(1.0 - t, &c).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((s - r).abs() <= 1e-12 * s.max(r).max(1e-300));
    }
}
