//! Optimizers and learning-rate schedules.

use lfm_autodiff::{GradientMap, WeightSet};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Momentum SGD with coupled weight decay (`d = g + wd·w; b = μb + d;
/// w -= lr·b`), after optional global-norm clipping of `g`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Written as `0` when disabled, since TOML has no null.
    #[serde(with = "zero_is_none")]
    pub clip_norm: Option<f64>,
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 3e-4,
            clip_norm: Some(5.0),
        }
    }
}

impl SgdConfig {
    /// `w -= lr·g`, nothing else.
    pub fn plain() -> Self {
        Self {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub cfg: SgdConfig,
    buf: Option<WeightSet>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, buf: None }
    }

    /// Applies one step; returns the gradient norm before clipping.
    pub fn step(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<f64> {
        let mut d = grad.clone();
        let norm = match self.cfg.clip_norm {
            Some(c) => d.clip_norm(c),
            None => d.norm(),
        };
        if self.cfg.weight_decay != 0.0 {
            d.axpy(self.cfg.weight_decay, w)?;
        }
        if self.cfg.momentum != 0.0 {
            let buf = match self.buf.take() {
                Some(mut b) => {
                    for (_, t) in b.iter_mut() {
                        for v in t.data_mut() {
                            *v *= self.cfg.momentum;
                        }
                    }
                    b.axpy(1.0, &d)?;
                    b
                }
                None => d,
            };
            d = buf.clone();
            self.buf = Some(buf);
        }
        if lr != 0.0 {
            w.axpy(-lr, &d)?;
        }
        Ok(norm)
    }
}

/// Adaptive moments with decoupled weight decay: `w -= lr·wd·w` then the
/// bias-corrected `w -= lr·m̂ / (sqrt(v̂) + eps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Option<WeightSet>,
    v: Option<WeightSet>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: None,
            v: None,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let mut m = self.m.take().unwrap_or_else(|| grad.zeros_like());
        let mut v = self.v.take().unwrap_or_else(|| grad.zeros_like());
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grad.iter() {
            let mt = m
                .get_mut(name)
                .ok_or_else(|| config(format!("moment for {name} missing")))?;
            for (mi, gi) in mt.data_mut().iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let vt = v
                .get_mut(name)
                .ok_or_else(|| config(format!("moment for {name} missing")))?;
            for (vi, gi) in vt.data_mut().iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let wt = w
                .get_mut(name)
                .ok_or_else(|| config(format!("parameter {name} missing")))?;
            let (mt, vt) = (m.get(name).expect("moment"), v.get(name).expect("moment"));
            for ((wi, mi), vi) in wt.data_mut().iter_mut().zip(mt.data()).zip(vt.data()) {
                if weight_decay != 0.0 {
                    *wi -= lr * weight_decay * *wi;
                }
                *wi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        self.m = Some(m);
        self.v = Some(v);
        Ok(())
    }
}

/// Either optimizer, chosen per variable group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl OptimizerConfig {
    pub fn build(&self) -> Optimizer {
        match *self {
            OptimizerConfig::Sgd(c) => Optimizer::Sgd(Sgd::new(c)),
            OptimizerConfig::Adam(c) => Optimizer::Adam(Adam::new(c)),
        }
    }
}

impl Optimizer {
    /// Descends along `grad`; returns the gradient norm.
    pub fn descend(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<f64> {
        match self {
            Optimizer::Sgd(s) => s.step(w, grad, lr),
            Optimizer::Adam(a) => {
                a.step(w, grad, lr)?;
                Ok(grad.norm())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// `floor + ½(lr₀ − floor)(1 + cos(π t / T))`.
    Cosine {
        floor: f64,
    },
}

/// Step sizes for every variable group; the schedule applies to `W₁`, `W₂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSchedule {
    pub w1: f64,
    pub w2: f64,
    pub g: f64,
    pub h: f64,
    pub a: f64,
    pub schedule: Schedule,
}

impl Default for RateSchedule {
    fn default() -> Self {
        Self {
            w1: 0.025,
            w2: 0.025,
            g: 2e-4,
            h: 2e-4,
            a: 3e-4,
            schedule: Schedule::Cosine { floor: 1e-3 },
        }
    }
}

/// Rates in effect at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub w1: f64,
    pub w2: f64,
    pub g: f64,
    pub h: f64,
    pub a: f64,
}

impl RateSchedule {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("w1", self.w1),
            ("w2", self.w2),
            ("g", self.g),
            ("h", self.h),
            ("a", self.a),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config(format!("rate {what} must be non-negative, got {v}")));
            }
        }
        if let Schedule::Cosine { floor } = self.schedule {
            if !(floor >= 0.0) {
                return Err(config(format!(
                    "cosine floor must be non-negative, got {floor}"
                )));
            }
        }
        Ok(())
    }

    pub fn at(&self, step: usize, total: usize) -> Rates {
        let decay = |lr0: f64| match self.schedule {
            Schedule::Constant => lr0,
            Schedule::Cosine { floor } => {
                let floor = floor.min(lr0);
                let frac = if total == 0 {
                    0.0
                } else {
                    step as f64 / total as f64
                };
                floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        };
        Rates {
            w1: decay(self.w1),
            w2: decay(self.w2),
            g: self.g,
            h: self.h,
            a: self.a,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lfm_autodiff::Tensor;

    fn scalar_set(v: f64) -> WeightSet {
        [("w".to_string(), Tensor::from_vec(vec![v]))]
            .into_iter()
            .collect()
    }

    #[test]
    fn plain_sgd_on_shifted_square() {
        // loss (w−1)², w = 0 → grad −2
        let mut w = scalar_set(0.0);
        let mut opt = Sgd::new(SgdConfig::plain());
        opt.step(&mut w, &scalar_set(-2.0), 0.1).unwrap();
        assert!((w.get("w").unwrap().data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_bitwise_identity() {
        let mut w = scalar_set(0.3);
        let before = w.clone();
        Sgd::new(SgdConfig::default())
            .step(&mut w, &scalar_set(1.0), 0.0)
            .unwrap();
        assert!(w.bit_eq(&before));
        Adam::new(AdamConfig::default())
            .step(&mut w, &scalar_set(1.0), 0.0)
            .unwrap();
        assert!(w.bit_eq(&before));
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = scalar_set(0.0);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: None,
        });
        opt.step(&mut w, &scalar_set(1.0), 1.0).unwrap();
        opt.step(&mut w, &scalar_set(1.0), 1.0).unwrap();
        assert!((w.get("w").unwrap().data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_step() {
        let mut w = scalar_set(0.0);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: Some(5.0),
        });
        let n = opt.step(&mut w, &scalar_set(50.0), 1.0).unwrap();
        assert_eq!(n, 50.0);
        assert!((w.get("w").unwrap().data()[0] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut w = scalar_set(2.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut w, &scalar_set(0.0), 3e-4).unwrap();
        let expect = 2.0 - 3e-4 * 1e-3 * 2.0;
        assert!((w.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        // f(a) = ½ Σ k_i (a_i − t_i)²
        let t = [0.7, -1.3, 0.2];
        let k = [1.0, 3.0, 0.5];
        let mut w: WeightSet = [("a".to_string(), Tensor::from_vec(vec![0.0; 3]))]
            .into_iter()
            .collect();
        let mut opt = Adam::new(AdamConfig {
            beta1: 0.9,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for i in 0..4000 {
            let a = w.get("a").unwrap().data().to_vec();
            let g: Vec<f64> = (0..3).map(|j| k[j] * (a[j] - t[j])).collect();
            let lr = if i < 3000 { 0.01 } else { 0.001 };
            opt.step(
                &mut w,
                &[("a".to_string(), Tensor::from_vec(g))]
                    .into_iter()
                    .collect(),
                lr,
            )
            .unwrap();
        }
        for (a, b) in w.get("a").unwrap().data().iter().zip(t) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_endpoints() {
        let r = RateSchedule::default();
        assert!((r.at(0, 100).w1 - 0.025).abs() < 1e-15);
        assert!((r.at(100, 100).w1 - 1e-3).abs() < 1e-15);
        assert_eq!(r.at(50, 100).a, 3e-4);
    }
}
