//! Per-class validation losses of the first classifier and the class-weighted
//! objective of the second.

use lfm_autodiff::{GradientMap, Graph, Tensor, WeightSet};
use serde::{Deserialize, Serialize};

use crate::cig::SyntheticBatch;
use crate::error::{config, CoreError, Result};
use crate::search_space::{bind_arch, ArchParams, Network};

/// `l_c`: mean validation cross-entropy on class `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLossVector {
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassLossVector {
    /// Per-class means of per-example losses. Absent classes get value 0.
    pub fn from_example_losses(losses: &[f64], labels: &[usize], classes: usize) -> Result<Self> {
        if losses.is_empty() {
            return Err(CoreError::Empty("validation set"));
        }
        let mut sums = vec![0.0; classes];
        let mut counts = vec![0; classes];
        for (&l, &y) in losses.iter().zip(labels) {
            if y >= classes {
                return Err(CoreError::LabelOutOfRange { label: y, classes });
            }
            sums[y] += l;
            counts[y] += 1;
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        Ok(Self { values, counts })
    }

    pub fn uniform(value: f64, classes: usize) -> Self {
        Self {
            values: vec![value; classes],
            counts: vec![1; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Classes with no validation examples.
    pub fn absent(&self) -> Vec<usize> {
        (0..self.counts.len())
            .filter(|&c| self.counts[c] == 0)
            .collect()
    }
}

/// How many synthetic images each step generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "m")]
pub enum SyntheticPolicy {
    /// One image per real training example, with the same label.
    MatchBatch,
    /// `m` images for every class.
    PerClass(usize),
}

impl SyntheticPolicy {
    pub fn labels(&self, batch_labels: &[usize], classes: usize) -> Vec<usize> {
        match *self {
            SyntheticPolicy::MatchBatch => batch_labels.to_vec(),
            SyntheticPolicy::PerClass(m) => (0..classes)
                .flat_map(|c| std::iter::repeat_n(c, m))
                .collect(),
        }
    }
}

/// Reduction of the per-image synthetic losses within a class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticReduction {
    /// `Σ_m L(x̂_{c,m}, c)`.
    #[default]
    Sum,
    /// The sum divided by the total number of synthetic images.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub lambda: f64,
    pub policy: SyntheticPolicy,
    pub normalize_weights: bool,
    pub synthetic_only: bool,
    pub reduction: SyntheticReduction,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            policy: SyntheticPolicy::MatchBatch,
            normalize_weights: false,
            synthetic_only: false,
            reduction: SyntheticReduction::Sum,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(config(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        if self.policy == SyntheticPolicy::PerClass(0) {
            return Err(config("per-class synthetic count must be positive"));
        }
        Ok(())
    }

    /// `d coefficient_c / d l_c`: `λ`, or `λ / mean(l)` with the mean held fixed.
    pub fn weight_scale(&self, l: &ClassLossVector) -> f64 {
        if !self.normalize_weights {
            return self.lambda;
        }
        let mean = l.values.iter().sum::<f64>() / l.len().max(1) as f64;
        if mean > 0.0 {
            self.lambda / mean
        } else {
            0.0
        }
    }

    /// Multipliers of the per-class synthetic losses.
    pub fn coefficients(&self, l: &ClassLossVector) -> Vec<f64> {
        let s = self.weight_scale(l);
        l.values.iter().map(|v| s * v).collect()
    }
}

/// Per-image multipliers realizing `Σ_c coeff_c S_c` (with the reduction).
pub fn image_weights(
    labels: &[usize],
    coefficients: &[f64],
    reduction: SyntheticReduction,
) -> Vec<f64> {
    let r = match reduction {
        SyntheticReduction::Sum => 1.0,
        SyntheticReduction::Mean => 1.0 / labels.len().max(1) as f64,
    };
    labels.iter().map(|&y| coefficients[y] * r).collect()
}

/// A loss value with its gradients w.r.t. the bound groups.
#[derive(Clone, Debug)]
pub struct ClassLoss {
    pub value: f64,
    pub count: usize,
    /// Keyed `a.*` and `w.*`; zero for absent classes.
    pub grads: GradientMap,
}

pub const W_PREFIX: &str = "w.";

/// `l_c` for every class from one forward pass over `(images, labels)`;
/// gradients w.r.t. `A` and the weights when `with_grads` is set.
pub fn class_losses(
    net: &Network,
    weights: &WeightSet,
    arch: &ArchParams,
    images: &Tensor,
    labels: &[usize],
    with_grads: bool,
) -> Result<Vec<ClassLoss>> {
    if labels.is_empty() {
        return Err(CoreError::Empty("validation set"));
    }
    let classes = net.outputs();
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(CoreError::LabelOutOfRange { label: y, classes });
        }
        counts[y] += 1;
    }
    let mut g = Graph::new();
    let (wb, av) = if with_grads {
        (
            g.bind(weights, W_PREFIX)?,
            bind_arch(&mut g, arch, Some(crate::cig::A_PREFIX))?,
        )
    } else {
        (g.bind_const(weights)?, bind_arch(&mut g, arch, None)?)
    };
    let x = g.input(images.clone())?;
    let logits = net.forward(&mut g, &wb, Some(av), x)?;
    let mut out = Vec::with_capacity(classes);
    for (c, &count) in counts.iter().enumerate() {
        let w: Vec<f64> = labels
            .iter()
            .map(|&y| if y == c { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let loss = g.weighted_cross_entropy(logits, labels, &w)?;
        let grads = if with_grads && count > 0 {
            g.backward(loss)?
        } else {
            GradientMap::new()
        };
        out.push(ClassLoss {
            value: g.value(loss).item()?,
            count,
            grads,
        });
    }
    Ok(out)
}

pub fn class_loss_vector(losses: &[ClassLoss]) -> ClassLossVector {
    ClassLossVector {
        values: losses.iter().map(|l| l.value).collect(),
        counts: losses.iter().map(|l| l.count).collect(),
    }
}

/// Breakdown of the second classifier's objective.
#[derive(Clone, Debug)]
pub struct WeightedLoss {
    pub total: f64,
    pub real: f64,
    pub synthetic: f64,
    /// Gradient of `total` w.r.t. the weights (unprefixed keys).
    pub grad: GradientMap,
}

/// `L(real) + λ Σ_c l_c Σ_m L(x̂_{c,m}, c)`, or the synthetic term alone in
/// synthetic-only mode.
pub fn weighted_objective(
    net: &Network,
    weights: &WeightSet,
    arch: &ArchParams,
    real: (&Tensor, &[usize]),
    synth: &SyntheticBatch,
    l: &ClassLossVector,
    cfg: &WeightingConfig,
) -> Result<WeightedLoss> {
    if l.len() != net.outputs() {
        return Err(config(format!(
            "{} class weights for {} classes",
            l.len(),
            net.outputs()
        )));
    }
    let (real_value, mut grad) = if cfg.synthetic_only {
        (0.0, weights.zeros_like())
    } else {
        let mut g = Graph::new();
        let wb = g.bind(weights, "")?;
        let av = bind_arch(&mut g, arch, None)?;
        let x = g.input(real.0.clone())?;
        let logits = net.forward(&mut g, &wb, Some(av), x)?;
        let loss = g.cross_entropy(logits, real.1)?;
        (g.value(loss).item()?, g.backward(loss)?)
    };
    let coeffs = cfg.coefficients(l);
    let mut synthetic = 0.0;
    if !synth.is_empty() && coeffs.iter().any(|&c| c != 0.0) {
        let mut g = Graph::new();
        let wb = g.bind(weights, "")?;
        let av = bind_arch(&mut g, arch, None)?;
        let x = g.input(synth.images.clone())?;
        let logits = net.forward(&mut g, &wb, Some(av), x)?;
        let w = image_weights(&synth.labels, &coeffs, cfg.reduction);
        let loss = g.weighted_cross_entropy(logits, &synth.labels, &w)?;
        synthetic = g.value(loss).item()?;
        grad.axpy(1.0, &g.backward(loss)?)?;
    }
    Ok(WeightedLoss {
        total: real_value + synthetic,
        real: real_value,
        synthetic,
        grad,
    })
}
