//! Momentum SGD, Adam, and step-decay learning-rate schedules.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Update rule and its rule-specific constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub fn adam() -> Self {
        Rule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter set.
///
/// Accumulators are allocated on the first step, shaped like the parameters
/// they track. Weight decay is added to the gradient for both rules.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub rule: Rule,
    pub lr: f64,
    pub weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl OptimState {
    pub fn sgd(lr: f64, weight_decay: f64, momentum: f64) -> Self {
        Self::new(Rule::Sgd { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(Rule::adam(), lr, weight_decay)
    }

    pub fn new(rule: Rule, lr: f64, weight_decay: f64) -> Self {
        OptimState {
            rule,
            lr,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optim_step",
                format!("{} parameters vs {} gradients", params.len(), grads.len()),
            ));
        }
        if let Some(i) = params.iter().zip(grads).position(|(p, g)| !p.same_shape(g)) {
            return Err(Error::shape(
                "optim_step",
                format!("parameter {i}: {:?} vs gradient {:?}", params[i].shape(), grads[i].shape()),
            ));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            if matches!(self.rule, Rule::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(a, g)| !a.same_shape(g))
        {
            return Err(Error::shape("optim_step", "parameter set changed between steps"));
        }
        self.steps += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.rule {
            Rule::Sgd { momentum } => {
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.first) {
                    let p = p.data_mut();
                    for ((theta, &gr), b) in p.iter_mut().zip(g.data()).zip(buf.data_mut()) {
                        *b = momentum * *b + (gr + wd * *theta);
                        *theta -= lr * *b;
                    }
                }
            }
            Rule::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let p = p.data_mut();
                    let it = p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((theta, &gr), m), v) in it {
                        let gr = gr + wd * *theta;
                        *m = beta1 * *m + (1.0 - beta1) * gr;
                        *v = beta2 * *v + (1.0 - beta2) * gr * gr;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Step-decay schedule with optional linear warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub decay_epochs: Vec<usize>,
    pub warmup_epochs: usize,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            decay: 1.0,
            decay_epochs: Vec::new(),
            warmup_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.base)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay factor must lie in (0, 1], got {}", self.decay)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay epochs must be strictly increasing"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    ///
    /// During warm-up epoch `e` runs at `base·(e+1)/wep`, so the last warm-up
    /// epoch reaches `base`. Afterwards the rate is `base·ld^k` with `k` the
    /// number of decay epochs `≤ epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let passed = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base * self.decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = one(1.0);
        let mut opt = OptimState::sgd(0.1, 0.0, 0.0);
        opt.step(vec![&mut p], &[one(0.5)]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = one(0.0);
        let mut opt = OptimState::sgd(1.0, 0.0, 0.9);
        opt.step(vec![&mut p], &[one(1.0)]).unwrap();
        opt.step(vec![&mut p], &[one(1.0)]).unwrap();
        // buffers 1 then 1.9
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut p = one(2.0);
        let mut opt = OptimState::sgd(0.5, 0.1, 0.0);
        opt.step(vec![&mut p], &[one(0.0)]).unwrap();
        assert!((p.data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-4, 0.3, 250.0, -7.0] {
            let mut p = one(0.0);
            let mut opt = OptimState::adam(1e-3, 0.0);
            opt.step(vec![&mut p], &[one(g)]).unwrap();
            assert!((p.data()[0].abs() - 1e-3).abs() < 1e-6, "g={g}");
            assert_eq!(p.data()[0].signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for mut opt in [OptimState::adam(1e-3, 0.0), OptimState::sgd(0.1, 0.0, 0.9)] {
            let mut p = Tensor::vector(vec![0.3, -1.2]);
            for _ in 0..5 {
                opt.step(vec![&mut p], &[Tensor::zeros(&[2])]).unwrap();
            }
            assert_eq!(p.data(), &[0.3, -1.2]);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut opt = OptimState::sgd(0.1, 0.0, 0.0);
        assert!(opt.step(vec![&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(vec![&mut p], &[]).is_err());
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        // f(θ) = 2θ², curvature 4, stable for η < 0.5
        let mut p = one(3.0);
        let mut opt = OptimState::sgd(0.1, 0.0, 0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let theta = p.data()[0];
            let f = 2.0 * theta * theta;
            assert!(f <= prev);
            prev = f;
            opt.step(vec![&mut p], &[one(4.0 * theta)]).unwrap();
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(LrSchedule::constant(0.3).lr_at(1000), 0.3);
        let s = LrSchedule {
            base: 0.01,
            decay: 0.1,
            decay_epochs: vec![100, 200],
            warmup_epochs: 0,
        };
        assert!((s.lr_at(150) - 0.001).abs() < 1e-15);
        assert_eq!(s.lr_at(99), 0.01);
        assert!((s.lr_at(250) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_to_base() {
        let s = LrSchedule {
            base: 0.1,
            decay: 0.1,
            decay_epochs: vec![8],
            warmup_epochs: 4,
        };
        let lrs: Vec<f64> = (0..10).map(|e| s.lr_at(e)).collect();
        assert!((lrs[0] - 0.025).abs() < 1e-15);
        assert_eq!(lrs[3], 0.1);
        assert!(lrs[4..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn schedule_validation() {
        let mut s = LrSchedule::constant(0.1);
        assert!(s.validate().is_ok());
        s.decay_epochs = vec![5, 5];
        assert!(s.validate().is_err());
        s.decay_epochs.clear();
        s.decay = 0.0;
        assert!(s.validate().is_err());
    }
}
