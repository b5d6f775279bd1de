use super::{AutodiffError, Float, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One bias-corrected Adam update. Moments are allocated (zeroed) on the
    /// first call and the parameter list must keep the same shapes after.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(AutodiffError::ShapeMismatch("parameter count changed".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != p.len() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "parameter {i}: {} values, gradient {}, state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::<f64>::scalar(0.5);
        let mut s = AdamState::new(AdamConfig::with_lr(2e-5));
        s.update(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = 0.5 - 2e-5 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::<f64>::new(&[3], vec![0.1, -2.0, 7.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            s.update(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, before);
        assert!(s.second_moment()[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut a = Tensor::<f32>::scalar(1.0);
        let mut b = Tensor::<f32>::scalar(1.0);
        let mut s = AdamState::new(AdamConfig::with_lr(1e-3));
        s.update(&mut [&mut a, &mut b], &[&[0.3], &[0.3]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut s = AdamState::new(AdamConfig::default());
        assert!(s.update(&mut [&mut p], &[&[1.0]]).is_err());
        assert!(s.update(&mut [&mut p], &[]).is_err());
    }
}
