//! AdamW with bias-corrected moments and decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// The usual framework defaults, with lr = 1e-4.
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = m.clone();
        AdamW { config, state: AdamWState { m, v, step: 0 } }
    }

    pub fn with_state(config: AdamWConfig, state: AdamWState) -> Self {
        AdamW { config, state }
    }

    /// One update over `params`, which must be given in the same order (and with the
    /// same sizes) as at construction. Every parameter must carry a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        let params: Vec<(String, &mut Tensor)> = params.into_iter().collect();
        if params.len() != self.state.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.m.len(),
                params.len()
            )));
        }
        for (i, (name, p)) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
            if p.numel() != self.state.m[i].len() {
                return Err(Error::shape(&[self.state.m[i].len()], p.shape()));
            }
        }

        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for (i, (_, p)) in params.into_iter().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::from_vec(vec![v]);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn first_step_hand_computed() {
        let mut w = param(1.0, 1.0);
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg, [&w]);
        opt.step([("w".to_string(), &mut w)]).unwrap();
        // m_hat = v_hat = 1, update = 0.1 * 1 / (1 + 1e-8)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w.data()[0] - want).abs() < 1e-15);
        assert!((w.data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut w = Tensor::from_vec(vec![0.3, -2.0, 5.0]);
        w.set_grad(vec![0.0; 3]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, [&w]);
        for _ in 0..5 {
            opt.step([("w".to_string(), &mut w)]).unwrap();
        }
        assert_eq!(w.data(), &[0.3, -2.0, 5.0]);
        assert_eq!(opt.state.step, 5);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_wd() {
        let mut w = param(2.0, 0.0);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, [&w]);
        opt.step([("w".to_string(), &mut w)]).unwrap();
        assert!((w.data()[0] - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_reported_by_name() {
        let mut w = Tensor::from_vec(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        match opt.step([("layer.weight".to_string(), &mut w)]) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "layer.weight"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.state.step, 0);
    }
}
