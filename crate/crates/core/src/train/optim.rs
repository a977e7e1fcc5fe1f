//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::{Element, Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-10,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: one first and second moment per parameter tensor and
/// the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>]) -> Self {
        AdamW {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// Applies one update at learning rate `lr`. Gradients are checked for
    /// finiteness before any parameter changes; `names` label the error.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || names.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let c = &self.config;
        let cast = T::from_f64_lossy;
        let (b1, b2) = (cast(c.beta1), cast(c.beta2));
        let (one_b1, one_b2) = (cast(1.0 - c.beta1), cast(1.0 - c.beta2));
        let bc1 = cast(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = cast(1.0 - c.beta2.powi(self.t as i32));
        let (lr_t, eps) = (cast(lr), cast(c.eps));
        let decay = cast(1.0 - lr * c.weight_decay);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *x = *x * decay;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x = *x - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![3]]);
        for _ in 0..5 {
            opt.step(vec![&mut p], &[Tensor::zeros(&[3])], &names(1), 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.t, 5);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![1]]);
        let mut last = 0.0;
        for _ in 0..200 {
            opt.step(vec![&mut p], &[Tensor::scalar(0.37)], &names(1), 1e-3).unwrap();
            let x = p.data()[0];
            let delta = last - x;
            last = x;
            assert!((delta - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = Tensor::<f64>::scalar(2.0);
        let mut opt = AdamW::new(cfg, &[vec![1]]);
        opt.step(vec![&mut p], &[Tensor::scalar(0.0)], &names(1), 0.5).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![1]]);
        let err = opt
            .step(vec![&mut p], &[Tensor::scalar(f32::NAN)], &["gates.0.bias".into()], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("gates.0.bias"));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.t, 0);
    }
}
