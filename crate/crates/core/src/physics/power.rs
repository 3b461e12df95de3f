//! Largest eigenvalue of `AᵀA` by normalised power iteration.

use super::Geometry;
use crate::rng::rng_from_seed;
use crate::tensor::LinearOperator;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct PowerResult {
    /// Estimate of `λ_max(AᵀA)`, i.e. the Lipschitz constant of `∇ ½‖Ax − y‖²`.
    pub l: f64,
    /// Unit-norm eigenvector estimate.
    pub vector: Vec<f64>,
    /// Rayleigh quotient after every iteration.
    pub rayleigh: Vec<f64>,
    pub converged: bool,
}

const START_SEED: u64 = 0x5EED_0F_F00D;

pub fn power_iteration(op: &(impl LinearOperator + ?Sized), iters: usize, tol: f64) -> PowerResult {
    let n_in: usize = op.input_shape().iter().product();
    let n_out: usize = op.output_shape().iter().product();
    let mut rng = rng_from_seed(START_SEED);
    let mut v: Vec<f64> = (0..n_in).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut av = vec![0.0; n_out];
    let mut w = vec![0.0; n_in];
    let mut rayleigh = Vec::with_capacity(iters);
    let mut converged = false;
    for _ in 0..iters.max(1) {
        op.apply(&v, &mut av);
        op.apply_adjoint(&av, &mut w);
        let q: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let prev = rayleigh.last().copied();
        rayleigh.push(q);
        let norm = normalize(&mut w);
        if norm == 0.0 {
            converged = true;
            break;
        }
        std::mem::swap(&mut v, &mut w);
        if let Some(p) = prev {
            if (q - p).abs() <= tol * q.abs() {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("power iteration did not reach tol {tol} in {iters} iterations");
    }
    let l = rayleigh.last().copied().unwrap_or(0.0);
    PowerResult { l, vector: v, rayleigh, converged }
}

/// `λ_max(HᵀH)` for the projector of `geom`.
pub fn power_iteration_l(geom: &Geometry, iters: usize, tol: f64) -> PowerResult {
    power_iteration(geom, iters, tol)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Diag(Vec<f64>);

    impl LinearOperator for Diag {
        fn input_shape(&self) -> Vec<usize> {
            vec![self.0.len()]
        }
        fn output_shape(&self) -> Vec<usize> {
            vec![self.0.len()]
        }
        fn apply(&self, x: &[f64], out: &mut [f64]) {
            for ((o, x), d) in out.iter_mut().zip(x).zip(&self.0) {
                *o = d * x;
            }
        }
        fn apply_adjoint(&self, x: &[f64], out: &mut [f64]) {
            self.apply(x, out)
        }
    }

    #[test]
    fn identity_has_unit_l() {
        let r = power_iteration(&Diag(vec![1.0; 7]), 10, 1e-12);
        assert!((r.l - 1.0).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn diag_three_one_gives_nine() {
        let r = power_iteration(&Diag(vec![3.0, 1.0]), 200, 1e-14);
        assert!((r.l - 9.0).abs() < 1e-9, "{}", r.l);
    }

    #[test]
    fn rayleigh_quotients_are_monotone() {
        let r = power_iteration(&Diag(vec![3.0, 2.5, 1.0, 0.3]), 100, 1e-15);
        assert!(r.rayleigh.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn rayleigh_bound_holds_for_returned_vector() {
        let tol = 1e-8;
        let op = Diag(vec![2.0, 1.5, 0.5]);
        let r = power_iteration(&op, 500, tol);
        let mut av = vec![0.0; 3];
        let mut w = vec![0.0; 3];
        op.apply(&r.vector, &mut av);
        op.apply_adjoint(&av, &mut w);
        let lhs = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = r.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(lhs >= (r.l - tol) * vn);
    }

    #[test]
    fn non_convergence_still_returns_estimate() {
        let r = power_iteration(&Diag(vec![1.0, 0.999]), 2, 1e-16);
        assert!(!r.converged);
        assert!(r.l > 0.9);
    }
}
