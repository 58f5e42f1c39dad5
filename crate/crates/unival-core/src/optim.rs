//! AdamW optimizer, linear learning-rate decay and parameter averaging (EMA).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters. Weight decay is decoupled by default: the decay
/// shrink is applied to the parameter before the moment update touches it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When false, weight decay is folded into the gradient (classic L2).
    pub decoupled_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decoupled_decay: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1): got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("adam eps must be positive: {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be non-negative: {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    config: AdamConfig,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one optimizer step.
    ///
    /// `grads` maps parameter names to gradient buffers; parameters without
    /// an entry are skipped entirely (no decay, no moment update), matching
    /// the behaviour of frozen or unused parameters. Moments update per
    /// element in f64 and are stored in f32 alongside the weights.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let tensor = params.get_mut(name)?;
            if grad.len() != tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient for {name:?} has {} elements, parameter has {}",
                    grad.len(),
                    tensor.numel()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let mut p = data[i] as f64;
                let mut g = grad[i] as f64;
                if c.decoupled_decay {
                    p -= lr * c.weight_decay * p;
                } else {
                    g += c.weight_decay * p;
                }
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p -= lr * mhat / (vhat.sqrt() + c.eps);
                data[i] = p as f32;
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules over a fixed step budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    /// lr(step) = base * (1 - step / total_steps); reaches zero at the end.
    LinearDecay { base: f64, total_steps: u64 },
    Constant { base: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let base = match self {
            LrSchedule::LinearDecay { base, total_steps } => {
                if *total_steps == 0 {
                    return Err(Error::Config("linear decay needs total_steps > 0".to_string()));
                }
                *base
            }
            LrSchedule::Constant { base } => *base,
        };
        if base <= 0.0 || !base.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive: {base}")));
        }
        Ok(())
    }

    /// Rate for a zero-based step index.
    pub fn lr(&self, step: u64) -> f64 {
        match self {
            LrSchedule::LinearDecay { base, total_steps } => {
                let frac = (step.min(*total_steps)) as f64 / *total_steps as f64;
                base * (1.0 - frac)
            }
            LrSchedule::Constant { base } => *base,
        }
    }
}

/// Exponential moving average of parameters.
///
/// shadow = decay * shadow + (1 - decay) * param, elementwise in f64.
#[derive(Debug, Clone)]
pub struct EmaState {
    decay: f64,
    shadow: BTreeMap<String, Vec<f32>>,
}

impl EmaState {
    /// Rejects decay outside [0, 1); decay = 1 would never track anything.
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!(
                "ema decay must lie in [0, 1): got {decay}"
            )));
        }
        Ok(EmaState {
            decay,
            shadow: BTreeMap::new(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Folds the current parameters into the average. On first update the
    /// shadow snaps to the parameters exactly.
    pub fn update(&mut self, params: &ParamStore<f32>) {
        for (name, tensor) in params.iter() {
            match self.shadow.get_mut(name) {
                Some(buf) => {
                    for (s, &p) in buf.iter_mut().zip(tensor.data()) {
                        *s = (self.decay * *s as f64 + (1.0 - self.decay) * p as f64) as f32;
                    }
                }
                None => {
                    self.shadow.insert(name.to_string(), tensor.data().to_vec());
                }
            }
        }
    }

    /// The averaged parameters as a store shaped like `reference`.
    pub fn snapshot(&self, reference: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let mut out = ParamStore::new();
        for (name, tensor) in reference.iter() {
            let buf = self.shadow.get(name).ok_or_else(|| {
                Error::Contract(format!("ema has no shadow for parameter {name:?}"))
            })?;
            out.insert(name, Tensor::new(tensor.shape().to_vec(), buf.clone())?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = store_with("w", &[1.5, -2.5]);
        let mut opt = OptimState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0f32, 0.0]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.5, -2.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first update lr * g / (|g| + eps').
        let mut params = store_with("w", &[0.0]);
        let mut opt = OptimState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0f32]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-7, "w = {w}");
    }

    #[test]
    fn two_steps_match_f64_reference_trace() {
        // Straight-line f64 reference implementation, kept independent of
        // the production code path.
        let c = AdamConfig::default();
        let lr = 0.01;
        let g1 = 0.5f64;
        let g2 = -0.25f64;
        let mut p = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, g1), (2, g2)] {
            p -= lr * c.weight_decay * p;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mhat = m / (1.0 - c.beta1.powi(t));
            let vhat = v / (1.0 - c.beta2.powi(t));
            p -= lr * mhat / (vhat.sqrt() + c.eps);
        }

        let mut params = store_with("w", &[1.0]);
        let mut opt = OptimState::new(c).unwrap();
        for g in [g1 as f32, g2 as f32] {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![g]);
            opt.step(&mut params, &grads, lr).unwrap();
        }
        let got = params.get("w").unwrap().data()[0] as f64;
        assert!((got - p).abs() < 1e-6, "got {got} want {p}");
    }

    #[test]
    fn decoupled_decay_shrinks_before_moment_update() {
        // With zero gradient, decoupled decay still shrinks the weight,
        // while coupled decay routes it through the moments.
        let mk = |decoupled| {
            let mut params = store_with("w", &[1.0]);
            let mut opt = OptimState::new(AdamConfig {
                decoupled_decay: decoupled,
                ..AdamConfig::default()
            })
            .unwrap();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![0.0f32]);
            opt.step(&mut params, &grads, 0.1).unwrap();
            params.get("w").unwrap().data()[0] as f64
        };
        let dec = mk(true);
        let coup = mk(false);
        // Decoupled: shrink to 1 - lr*wd = 0.999 (up to f32 storage), then a
        // zero moment leaves it there.
        assert!((dec - 0.999).abs() < 1e-6, "decoupled {dec}");
        // Coupled: g = wd * w = 0.01; first-step update is about -lr.
        assert!((coup - (1.0 - 0.1)).abs() < 1e-3, "coupled {coup}");
        assert!(dec != coup);
    }

    #[test]
    fn params_missing_from_grads_are_untouched() {
        let mut params = store_with("w", &[1.0]);
        params.insert("frozen", Tensor::new(vec![1], vec![4.0]).unwrap());
        let mut opt = OptimState::new(AdamConfig::default()).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0f32]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.get("frozen").unwrap().data(), &[4.0]);
    }

    #[test]
    fn linear_decay_endpoints_and_midpoint() {
        let s = LrSchedule::LinearDecay {
            base: 2e-4,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 2e-4);
        assert!((s.lr(50) - 1e-4).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(1000), 0.0);
    }

    #[test]
    fn ema_rejects_decay_one() {
        assert!(EmaState::new(1.0).is_err());
        assert!(EmaState::new(-0.1).is_err());
        assert!(EmaState::new(0.9999).is_ok());
    }

    #[test]
    fn ema_decay_zero_tracks_params_exactly() {
        let mut ema = EmaState::new(0.0).unwrap();
        let p1 = store_with("w", &[1.0, 2.0]);
        ema.update(&p1);
        let p2 = store_with("w", &[3.0, 4.0]);
        ema.update(&p2);
        let snap = ema.snapshot(&p2).unwrap();
        assert_eq!(snap.get("w").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn ema_half_decay_hand_value() {
        // Shadow seeds at 1.0, then 0.5 * 1.0 + 0.5 * 2.0 = 1.5.
        let mut ema = EmaState::new(0.5).unwrap();
        ema.update(&store_with("w", &[1.0]));
        ema.update(&store_with("w", &[2.0]));
        let snap = ema.snapshot(&store_with("w", &[0.0])).unwrap();
        assert_eq!(snap.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn adam_config_validation() {
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { eps: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
