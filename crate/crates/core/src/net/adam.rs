use serde::{Deserialize, Serialize};

use super::{Network, TrainConfig};
use crate::error::{Error, Result};

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update with L2 weight decay folded into the
    /// gradient.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], config: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = config.learning_rate / c1;
        let c2_sqrt = c2.sqrt();
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = if config.weight_decay != 0.0 {
                g + config.weight_decay * *p
            } else {
                g
            };
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let denom = v.sqrt() / c2_sqrt + config.epsilon;
            *p -= step_size * *m / denom;
        }
        Ok(())
    }
}

pub fn adam_step(network: &mut Network, state: &mut AdamState, gradients: &[f64], config: &TrainConfig) -> Result<()> {
    state.update(network.params_mut(), gradients, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.5, -1.0, 2.0];
        let g = vec![3.0, -1e-3, 250.0];
        let mut st = AdamState::new(3);
        st.update(&mut p, &g, &cfg).unwrap();
        let moved: Vec<f64> = p.iter().zip([0.5, -1.0, 2.0]).map(|(a, b)| a - b).collect();
        for (d, g) in moved.iter().zip(&g) {
            assert!((d.abs() - cfg.learning_rate).abs() < 1e-6 * cfg.learning_rate * 10.0);
            assert!(d.signum() == -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.5, -1.0];
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            st.update(&mut p, &[0.0, 0.0], &cfg).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn quadratic_descends() {
        let cfg = TrainConfig::default();
        let scales = [1.0, 10.0, 0.1];
        let f = |x: &[f64]| x.iter().zip(scales).map(|(x, s)| 0.5 * s * x * x).sum::<f64>();
        let mut x = vec![1.0, -0.7, 0.4];
        let mut st = AdamState::new(3);
        let mut losses = vec![f(&x)];
        for _ in 0..200 {
            let g: Vec<f64> = x.iter().zip(scales).map(|(x, s)| s * x).collect();
            st.update(&mut x, &g, &cfg).unwrap();
            losses.push(f(&x));
        }
        assert!(losses[10..].windows(2).all(|w| w[1] < w[0]));
        assert!(losses[200] < losses[0]);
    }

    #[test]
    fn length_mismatch() {
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(2);
        assert!(st.update(&mut [0.0; 3], &[0.0; 3], &cfg).is_err());
    }
}
