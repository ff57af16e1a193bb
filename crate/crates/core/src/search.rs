//! The neural instance of the tri-level problem and the search loop.

use lfm_autodiff::{GradientMap, Graph, Tensor, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cig::{sample_noise, Cig, GanBatch, GeneratorLoss, GeneratorSpec, A_PREFIX, G_PREFIX};
use crate::data::{BatchSampler, LabeledImageSet};
use crate::error::{config, CoreError, Result};
use crate::optim::{Adam, AdamConfig, Optimizer, OptimizerConfig, RateSchedule, Sgd, SgdConfig};
use crate::reweight::{class_losses, image_weights, WeightingConfig, W_PREFIX};
use crate::search_space::{bind_arch, derive_cell, ArchParams, Genotype, Network, SupernetSpec};
use crate::trilevel::{
    hypergradient, step_arch, unroll, AdversarialEval, HypergradMode, HypergradOptions, LossGrad,
    Order, SyntheticEval, TrilevelProblem, Updater, Variables,
};

/// Fixed batches of one outer iteration.
#[derive(Clone, Debug)]
pub struct IterationBatches {
    pub train: (Tensor, Vec<usize>),
    /// Validation batch for the class losses.
    pub val_class: (Tensor, Vec<usize>),
    /// Validation batch for the architecture update.
    pub val_arch: (Tensor, Vec<usize>),
    pub gan: GanBatch,
    pub synth_labels: Vec<usize>,
    pub synth_noise: Tensor,
}

/// Supernet classifiers plus the adversarial pair, evaluated on fixed batches.
pub struct NeuralProblem<'a> {
    pub net: &'a Network,
    pub cig: &'a Cig,
    /// Supplies the op set and shapes when rebuilding `A` from a weight set.
    pub arch: &'a ArchParams,
    pub weighting: &'a WeightingConfig,
    pub batches: &'a IterationBatches,
}

fn split_grads(all: &GradientMap, prefix: &str) -> GradientMap {
    all.strip_prefix(prefix)
}

impl NeuralProblem<'_> {
    fn arch_of(&self, a: &WeightSet) -> Result<ArchParams> {
        self.arch.with_weights(a)
    }

    fn supervised(
        &self,
        a: &WeightSet,
        w: &WeightSet,
        batch: &(Tensor, Vec<usize>),
    ) -> Result<LossGrad> {
        let arch = self.arch_of(a)?;
        let mut g = Graph::new();
        let wb = g.bind(w, W_PREFIX)?;
        let av = bind_arch(&mut g, &arch, Some(A_PREFIX))?;
        let x = g.input(batch.0.clone())?;
        let logits = self.net.forward(&mut g, &wb, Some(av), x)?;
        let loss = g.cross_entropy(logits, &batch.1)?;
        let grads = g.backward(loss)?;
        Ok(LossGrad {
            value: g.value(loss).item()?,
            grad_a: split_grads(&grads, A_PREFIX),
            grad_w: split_grads(&grads, W_PREFIX),
        })
    }

    /// Builds the synthetic forward graph; returns the graph and logits.
    fn synthetic_graph(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        gw: &WeightSet,
    ) -> Result<(Graph, lfm_autodiff::Var)> {
        let arch = self.arch_of(a)?;
        let mut g = Graph::new();
        let gb = g.bind(gw, G_PREFIX)?;
        let wb = g.bind(w2, W_PREFIX)?;
        let av = bind_arch(&mut g, &arch, Some(A_PREFIX))?;
        let noise = g.input(self.batches.synth_noise.clone())?;
        let images = self
            .cig
            .generator
            .forward(&mut g, &gb, &self.batches.synth_labels, noise)?;
        let logits = self.net.forward(&mut g, &wb, Some(av), images)?;
        Ok((g, logits))
    }
}

impl TrilevelProblem for NeuralProblem<'_> {
    fn num_classes(&self) -> usize {
        self.net.outputs()
    }

    fn train_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad> {
        self.supervised(a, w, &self.batches.train)
    }

    fn val_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad> {
        self.supervised(a, w, &self.batches.val_arch)
    }

    fn class_losses(
        &self,
        a: &WeightSet,
        w1: &WeightSet,
        with_grads: bool,
    ) -> Result<Vec<LossGrad>> {
        let arch = self.arch_of(a)?;
        let (images, labels) = &self.batches.val_class;
        let losses = class_losses(self.net, w1, &arch, images, labels, with_grads)?;
        Ok(losses
            .into_iter()
            .map(|l| {
                let (grad_a, grad_w) = if !with_grads {
                    (GradientMap::new(), GradientMap::new())
                } else if l.grads.is_empty() {
                    (a.zeros_like(), w1.zeros_like())
                } else {
                    (
                        split_grads(&l.grads, A_PREFIX),
                        split_grads(&l.grads, W_PREFIX),
                    )
                };
                LossGrad {
                    value: l.value,
                    grad_a,
                    grad_w,
                }
            })
            .collect())
    }

    fn synthetic_loss(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        gw: &WeightSet,
        coeffs: &[f64],
    ) -> Result<SyntheticEval> {
        let (mut g, logits) = self.synthetic_graph(a, w2, gw)?;
        let labels = &self.batches.synth_labels;
        let weights = image_weights(labels, coeffs, self.weighting.reduction);
        let loss = g.weighted_cross_entropy(logits, labels, &weights)?;
        let grads = g.backward(loss)?;
        Ok(SyntheticEval {
            value: g.value(loss).item()?,
            grad_a: split_grads(&grads, A_PREFIX),
            grad_w: split_grads(&grads, W_PREFIX),
            grad_g: split_grads(&grads, G_PREFIX),
        })
    }

    fn synthetic_class_grads(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        gw: &WeightSet,
    ) -> Result<Vec<GradientMap>> {
        let (mut g, logits) = self.synthetic_graph(a, w2, gw)?;
        let labels = &self.batches.synth_labels;
        let c = self.num_classes();
        let mut out = Vec::with_capacity(c);
        for k in 0..c {
            let mut coeffs = vec![0.0; c];
            coeffs[k] = 1.0;
            let weights = image_weights(labels, &coeffs, self.weighting.reduction);
            if weights.iter().all(|&x| x == 0.0) {
                out.push(w2.zeros_like());
                continue;
            }
            let loss = g.weighted_cross_entropy(logits, labels, &weights)?;
            out.push(split_grads(&g.backward(loss)?, W_PREFIX));
        }
        Ok(out)
    }

    fn adversarial(
        &self,
        a: &WeightSet,
        gw: &WeightSet,
        hw: &WeightSet,
    ) -> Result<AdversarialEval> {
        let arch = self.arch_of(a)?;
        let e = self.cig.evaluate(gw, hw, &arch, &self.batches.gan)?;
        Ok(AdversarialEval {
            generator: LossGrad {
                value: e.generator_loss,
                grad_a: split_grads(&e.generator_grads, A_PREFIX),
                grad_w: split_grads(&e.generator_grads, G_PREFIX),
            },
            discriminator: LossGrad {
                value: e.objective,
                grad_a: split_grads(&e.objective_grads, A_PREFIX),
                grad_w: split_grads(&e.objective_grads, crate::cig::H_PREFIX),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub supernet: SupernetSpec,
    pub generator: GeneratorSpec,
    pub generator_loss: GeneratorLoss,
    pub weighting: WeightingConfig,
    pub rates: RateSchedule,
    pub mode: HypergradMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub w_optimizer: SgdConfig,
    pub a_optimizer: AdamConfig,
    pub gan_optimizer: OptimizerConfig,
    /// Use one validation draw for both the class losses and the `A` update.
    pub shared_validation_batch: bool,
}

impl SearchConfig {
    /// Defaults for a supernet; the generator matches its input and classes.
    pub fn for_supernet(supernet: SupernetSpec) -> Self {
        let generator = GeneratorSpec::new(supernet.num_classes, supernet.input);
        Self {
            supernet,
            generator,
            generator_loss: GeneratorLoss::default(),
            weighting: WeightingConfig::default(),
            rates: RateSchedule::default(),
            mode: HypergradMode::default(),
            iterations: 200,
            batch_size: 32,
            seed: 0,
            w_optimizer: SgdConfig::default(),
            a_optimizer: AdamConfig::default(),
            gan_optimizer: OptimizerConfig::Sgd(SgdConfig::plain()),
            shared_validation_batch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.generator.validate()?;
        self.weighting.validate()?;
        self.rates.validate()?;
        self.mode.validate()?;
        if self.generator.num_classes != self.supernet.num_classes
            || self.generator.output != self.supernet.input
        {
            return Err(config("generator classes/output must match the supernet"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Everything that evolves during a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrilevelState {
    pub iteration: usize,
    pub arch: ArchParams,
    pub w1: WeightSet,
    pub w2: WeightSet,
    pub g: WeightSet,
    pub h: WeightSet,
    pub opt_w1: Sgd,
    pub opt_w2: Sgd,
    pub opt_g: Optimizer,
    pub opt_h: Optimizer,
    pub opt_a: Adam,
}

impl TrilevelState {
    pub fn is_finite(&self) -> bool {
        self.arch.is_finite()
            && self.w1.is_finite()
            && self.w2.is_finite()
            && self.g.is_finite()
            && self.h.is_finite()
    }
}

/// One row of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: usize,
    pub loss_w1: f64,
    pub loss_gan_g: f64,
    pub loss_gan_h: f64,
    pub loss_w2_real: f64,
    pub loss_w2_synth: f64,
    pub val_loss: f64,
    pub l_c: Vec<f64>,
    pub grad_norm_a: f64,
}

impl MetricsRow {
    pub fn csv_header(classes: usize) -> String {
        let mut cols: Vec<String> = [
            "iteration",
            "epoch",
            "loss_w1",
            "loss_gan_g",
            "loss_gan_h",
            "loss_w2_real",
            "loss_w2_synth",
            "val_loss",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((0..classes).map(|c| format!("l_c{c}")));
        cols.push("grad_norm_a".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.iteration.to_string(), self.epoch.to_string()];
        for v in [
            self.loss_w1,
            self.loss_gan_g,
            self.loss_gan_h,
            self.loss_w2_real,
            self.loss_w2_synth,
            self.val_loss,
        ] {
            cols.push(v.to_string());
        }
        cols.extend(self.l_c.iter().map(|v| v.to_string()));
        cols.push(self.grad_norm_a.to_string());
        cols.join(",")
    }
}

struct StateSteps<'s> {
    w1: &'s mut Sgd,
    w2: &'s mut Sgd,
    g: &'s mut Optimizer,
    h: &'s mut Optimizer,
}

impl Updater for StateSteps<'_> {
    fn w1(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        self.w1.step(w, grad, lr).map(drop)
    }
    fn g(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        self.g.descend(w, grad, lr).map(drop)
    }
    fn h(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        self.h.descend(w, &grad.scale(-1.0), lr).map(drop)
    }
    fn w2(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        self.w2.step(w, grad, lr).map(drop)
    }
}

/// A running search over fixed training and validation sets.
pub struct Search<'d> {
    cfg: SearchConfig,
    net: Network,
    cig: Cig,
    train: &'d LabeledImageSet,
    val: &'d LabeledImageSet,
    train_sampler: BatchSampler,
    val_sampler: BatchSampler,
    cig_sampler: BatchSampler,
    noise_rng: ChaCha8Rng,
    fault: Option<crate::trilevel::Term>,
    pub state: TrilevelState,
}

impl<'d> Search<'d> {
    pub fn new(
        cfg: SearchConfig,
        train: &'d LabeledImageSet,
        val: &'d LabeledImageSet,
    ) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.supernet;
        for (what, set) in [("training", train), ("validation", val)] {
            if set.is_empty() {
                return Err(CoreError::Empty(if what == "training" {
                    "training set"
                } else {
                    "validation set"
                }));
            }
            let (h, w, c) = set.image_shape();
            if (h, w, c) != (s.input.height, s.input.width, s.input.channels)
                || set.num_classes() != s.num_classes
            {
                return Err(config(format!(
                    "{what} set shape or class count does not match the supernet"
                )));
            }
        }
        let net = Network::supernet(s)?;
        let cig = Cig::new(cfg.generator.clone(), s, cfg.generator_loss)?;
        let seed = cfg.seed;
        let state = TrilevelState {
            iteration: 0,
            arch: s.init_arch(seed),
            w1: net.init_weights(seed.wrapping_add(1)),
            w2: net.init_weights(seed.wrapping_add(2)),
            g: cig.generator.init_weights(seed.wrapping_add(3)),
            h: cig.discriminator.init_weights(seed.wrapping_add(4)),
            opt_w1: Sgd::new(cfg.w_optimizer),
            opt_w2: Sgd::new(cfg.w_optimizer),
            opt_g: cfg.gan_optimizer.build(),
            opt_h: cfg.gan_optimizer.build(),
            opt_a: Adam::new(cfg.a_optimizer),
        };
        Ok(Self {
            train_sampler: BatchSampler::new(train.len(), cfg.batch_size, seed.wrapping_add(10))?,
            val_sampler: BatchSampler::new(val.len(), cfg.batch_size, seed.wrapping_add(11))?,
            cig_sampler: BatchSampler::new(train.len(), cfg.batch_size, seed.wrapping_add(12))?,
            noise_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(13)),
            fault: None,
            cfg,
            net,
            cig,
            train,
            val,
            state,
        })
    }

    /// Negates one hypergradient term in every step (verification fixtures).
    pub fn inject_fault(&mut self, term: Option<crate::trilevel::Term>) {
        self.fault = term;
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn cig(&self) -> &Cig {
        &self.cig
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    fn draw_batches(&mut self) -> IterationBatches {
        let classes = self.cfg.supernet.num_classes;
        let train = self.train.batch_nchw(&self.train_sampler.next_batch());
        let val_class = self.val.batch_nchw(&self.val_sampler.next_batch());
        let val_arch = if self.cfg.shared_validation_batch {
            val_class.clone()
        } else {
            self.val.batch_nchw(&self.val_sampler.next_batch())
        };
        let (real, real_labels) = self.train.batch_nchw(&self.cig_sampler.next_batch());
        let noise_dim = self.cfg.generator.noise_dim;
        let gan_noise = sample_noise(&mut self.noise_rng, real_labels.len(), noise_dim);
        let synth_labels = self.cfg.weighting.policy.labels(&train.1, classes);
        let synth_noise = sample_noise(&mut self.noise_rng, synth_labels.len(), noise_dim);
        IterationBatches {
            train,
            val_class,
            val_arch,
            gan: GanBatch {
                real,
                fake_labels: real_labels.clone(),
                real_labels,
                noise: gan_noise,
            },
            synth_labels,
            synth_noise,
        }
    }

    /// One outer iteration: every variable group takes exactly one step.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let iteration = self.state.iteration;
        let rates = self.cfg.rates.at(iteration, self.cfg.iterations);
        let batches = self.draw_batches();
        let vars = Variables {
            a: self.state.arch.to_weights(),
            w1: self.state.w1.clone(),
            w2: self.state.w2.clone(),
            g: self.state.g.clone(),
            h: self.state.h.clone(),
        };
        let problem = NeuralProblem {
            net: &self.net,
            cig: &self.cig,
            arch: &self.state.arch,
            weighting: &self.cfg.weighting,
            batches: &batches,
        };
        let second = self.cfg.mode.order == Order::Second;
        let mut steps = StateSteps {
            w1: &mut self.state.opt_w1,
            w2: &mut self.state.opt_w2,
            g: &mut self.state.opt_g,
            h: &mut self.state.opt_h,
        };
        let at = |e: CoreError| match e {
            CoreError::NonFinite { what, .. } => CoreError::NonFinite { what, iteration },
            e => e,
        };
        let un = unroll(
            &problem,
            &vars,
            &rates,
            &self.cfg.weighting,
            second,
            &mut steps,
        )
        .map_err(at)?;
        let opts = HypergradOptions {
            mode: self.cfg.mode,
            fault: self.fault,
        };
        let hg =
            hypergradient(&problem, &vars, &un, &rates, &self.cfg.weighting, &opts).map_err(at)?;

        let mut a = vars.a;
        step_arch(&mut self.state.opt_a, &mut a, &hg.total, rates.a)?;
        let arch = self.state.arch.with_weights(&a)?;
        let next = TrilevelState {
            iteration: iteration + 1,
            arch,
            w1: un.w1_next,
            w2: un.w2_next,
            g: un.g_next,
            h: un.h_next,
            ..self.state.clone()
        };
        if !next.is_finite() {
            return Err(CoreError::NonFinite {
                what: "search state".into(),
                iteration,
            });
        }
        self.state = next;
        Ok(MetricsRow {
            iteration,
            epoch: self.train_sampler.epoch(),
            loss_w1: un.train_w1.value,
            loss_gan_g: un.adversarial.generator.value,
            loss_gan_h: un.adversarial.discriminator.value,
            loss_w2_real: un.train_w2.map_or(0.0, |t| t.value),
            loss_w2_synth: un.synthetic.map_or(0.0, |s| s.value),
            val_loss: hg.val_loss,
            l_c: un.l.values,
            grad_norm_a: hg.total.norm(),
        })
    }

    pub fn genotype(&self) -> Genotype {
        derive_cell(&self.state.arch)
    }

    /// Accuracy of the second classifier on `set` under the current `A`.
    pub fn supernet_accuracy(&self, set: &LabeledImageSet) -> Result<f64> {
        accuracy(&self.net, &self.state.w2, Some(&self.state.arch), set, 256)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub arch: ArchParams,
    pub genotype: Genotype,
    pub metrics: Vec<MetricsRow>,
    pub state: TrilevelState,
}

/// Runs every iteration of a search.
pub fn run_search(
    cfg: SearchConfig,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
) -> Result<SearchOutcome> {
    let mut search = Search::new(cfg, train, val)?;
    let mut metrics = Vec::new();
    while !search.is_done() {
        metrics.push(search.step()?);
    }
    Ok(SearchOutcome {
        arch: search.state.arch.clone(),
        genotype: search.genotype(),
        metrics,
        state: search.state,
    })
}

/// Top-1 accuracy in chunks of `chunk` (batch statistics per chunk).
pub fn accuracy(
    net: &Network,
    w: &WeightSet,
    arch: Option<&ArchParams>,
    set: &LabeledImageSet,
    chunk: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(CoreError::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for part in idx.chunks(chunk.max(2)) {
        let (x, y) = set.batch_nchw(part);
        let mut g = Graph::new();
        let wb = g.bind_const(w)?;
        let av = match arch {
            Some(a) => Some(bind_arch(&mut g, a, None)?),
            None => None,
        };
        let xv = g.input(x)?;
        let logits = net.forward(&mut g, &wb, av, xv)?;
        let pred = g.value(logits).argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / set.len() as f64)
}
