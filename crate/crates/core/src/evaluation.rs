//! Training a discretized architecture from scratch and scoring it.

use lfm_autodiff::Graph;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, LabeledImageSet};
use crate::error::{config, CoreError, Result};
use crate::optim::{Schedule, Sgd, SgdConfig};
use crate::search::accuracy;
use crate::search_space::{build_eval_network, Genotype, ImageShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cells stacked in the evaluation network.
    pub copies: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: SgdConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            copies: 2,
            channels: 8,
            epochs: 10,
            batch_size: 32,
            lr: 0.025,
            schedule: Schedule::Cosine { floor: 1e-3 },
            optimizer: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 || self.channels == 0 || self.batch_size == 0 {
            return Err(config(
                "evaluation copies, channels and batch_size must be positive",
            ));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config(format!(
                "evaluation lr must be non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub param_count: usize,
    pub steps: usize,
    pub final_train_loss: f64,
}

impl EvalReport {
    pub fn error(&self) -> f64 {
        1.0 - self.accuracy
    }
}

/// Builds the stacked network for `genotype`, trains it on `train` and
/// reports accuracy on `test`.
pub fn train_and_evaluate(
    genotype: &Genotype,
    cfg: &EvalConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
) -> Result<EvalReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Empty("training set"));
    }
    let (h, w, c) = train.image_shape();
    let input = ImageShape {
        height: h,
        width: w,
        channels: c,
    };
    let (net, mut weights) = build_eval_network(
        genotype,
        cfg.copies,
        cfg.channels,
        train.num_classes(),
        input,
        cfg.seed,
    )?;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let per_epoch = train.len().div_ceil(cfg.batch_size.min(train.len())).max(1);
    let total = per_epoch * cfg.epochs;
    let schedule = crate::optim::RateSchedule {
        w1: cfg.lr,
        schedule: cfg.schedule,
        ..Default::default()
    };
    let mut opt = Sgd::new(cfg.optimizer);
    let mut last = f64::NAN;
    for step in 0..total {
        let (x, y) = train.batch_nchw(&sampler.next_batch());
        let mut g = Graph::new();
        let wb = g.bind(&weights, "")?;
        let xv = g.input(x)?;
        let logits = net.forward(&mut g, &wb, None, xv)?;
        let loss = g.cross_entropy(logits, &y)?;
        last = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        if !last.is_finite() || !grads.is_finite() {
            return Err(CoreError::NonFinite {
                what: "evaluation training".into(),
                iteration: step,
            });
        }
        opt.step(&mut weights, &grads, schedule.at(step, total).w1)?;
    }
    Ok(EvalReport {
        accuracy: accuracy(&net, &weights, None, test, 256)?,
        param_count: net.param_count(),
        steps: total,
        final_train_loss: last,
    })
}
