use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a named subset of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    /// Applies one update for every `(name, grad)` pair.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ModelParams, grads: &[(String, Tensor)]) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted above");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("inserted above");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mh = mi / c1;
                let vh = vi / c2;
                *pi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_updates() {
        // minimize f(a, b) = (a - 3)^2 + 10 * b^2 from (0, 1)
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        };
        let mut params = ModelParams::new();
        params.insert("p", Tensor::new([1, 2, 1, 1], vec![0.0, 1.0]).unwrap());
        let mut adam = Adam::default();

        let (mut a, mut b) = (0.0f64, 1.0f64);
        let (mut ma, mut mb, mut va, mut vb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let (ga, gb) = (2.0 * (a - 3.0), 20.0 * b);
            let grad = Tensor::new([1, 2, 1, 1], vec![ga, gb]).unwrap();
            adam.step(&cfg, &mut params, &[("p".into(), grad)]).unwrap();

            ma = 0.5 * ma + 0.5 * ga;
            mb = 0.5 * mb + 0.5 * gb;
            va = 0.9 * va + 0.1 * ga * ga;
            vb = 0.9 * vb + 0.1 * gb * gb;
            let c1 = 1.0 - 0.5f64.powi(t);
            let c2 = 1.0 - 0.9f64.powi(t);
            a -= 0.1 * (ma / c1) / ((va / c2).sqrt() + 1e-8);
            b -= 0.1 * (mb / c1) / ((vb / c2).sqrt() + 1e-8);
            let p = params.get("p").unwrap().data();
            assert!((p[0] - a).abs() < 1e-9 && (p[1] - b).abs() < 1e-9, "step {t}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut params = ModelParams::new();
        params.insert("w", Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let g = Tensor::new([1, 3, 1, 1], vec![0.5, -7.0, 1e3]).unwrap();
        Adam::default().step(&cfg, &mut params, &[("w".into(), g)]).unwrap();
        let got = params.get("w").unwrap().data().to_vec();
        for (p, e) in got.iter().zip([1.0 - 1e-4, 2.0 + 1e-4, 3.0 - 1e-4]) {
            assert!((p - e).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = AdamConfig::default();
        let mut params = ModelParams::new();
        params.insert("w", Tensor::full([1, 2, 1, 1], 0.3));
        let before = params.clone();
        let mut adam = Adam::default();
        for _ in 0..3 {
            adam.step(&cfg, &mut params, &[("w".into(), Tensor::zeros([1, 2, 1, 1]))]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamConfig { lr: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { beta2: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
