//! Conditional image generator `G` and the discriminator `H` that shares the
//! classifier's architecture logits.

use lfm_autodiff::{Bound, Conv2dOpts, GradientMap, Graph, Tensor, Var, WeightSet};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, CoreError, Result};
use crate::search_space::{bind_arch, ArchParams, ImageShape, Network, SupernetSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Tiny,
    #[default]
    Small,
    Medium,
}

impl Capacity {
    pub const ALL: [Capacity; 3] = [Capacity::Tiny, Capacity::Small, Capacity::Medium];

    /// Width of the seed feature map, then of each upsampled conv layer.
    pub fn hidden(self) -> Vec<usize> {
        match self {
            Capacity::Tiny => vec![4],
            Capacity::Small => vec![8, 8],
            Capacity::Medium => vec![16, 16, 16],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Capacity::Tiny => "tiny",
            Capacity::Small => "small",
            Capacity::Medium => "medium",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub label_embedding_dim: usize,
    pub capacity: Capacity,
    pub num_classes: usize,
    pub output: ImageShape,
}

impl GeneratorSpec {
    pub fn new(num_classes: usize, output: ImageShape) -> Self {
        Self {
            noise_dim: 8,
            label_embedding_dim: 4,
            capacity: Capacity::default(),
            num_classes,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(config("generator noise_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(config("generator needs at least 2 classes"));
        }
        let ImageShape {
            height,
            width,
            channels,
        } = self.output;
        if height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0 || channels == 0 {
            return Err(config(format!(
                "generator output must have even height/width and channels > 0, got {height}x{width}x{channels}"
            )));
        }
        Ok(())
    }
}

/// Generated images `[M, channels, H, W]` with their labels and noise rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub noise: Tensor,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CoreError::LabelOutOfRange { label: l, classes });
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Standard normal noise rows `[n, dim]`.
pub fn sample_noise<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data).expect("noise shape")
}

/// `concat(noise, embed[label]) → linear → relu → 2x upsample →
/// (conv3x3 → relu)* → conv3x3 + bias → tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let s = &self.spec;
        let hidden = s.capacity.hidden();
        let (h2, w2) = (s.output.height / 2, s.output.width / 2);
        let mut p = vec![
            (
                "embed".to_string(),
                vec![s.num_classes, s.label_embedding_dim],
            ),
            (
                "fc.w".to_string(),
                vec![s.noise_dim + s.label_embedding_dim, hidden[0] * h2 * w2],
            ),
            ("fc.b".to_string(), vec![hidden[0] * h2 * w2]),
        ];
        for i in 1..hidden.len() {
            p.push((format!("conv{i}.w"), vec![hidden[i], hidden[i - 1], 3, 3]));
        }
        p.push((
            "out.w".to_string(),
            vec![s.output.channels, *hidden.last().expect("hidden"), 3, 3],
        ));
        p.push(("out.b".to_string(), vec![s.output.channels]));
        p
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn init_weights(&self, seed: u64) -> WeightSet {
        init_layout(self.layout(), seed)
    }

    /// Images `[B, channels, H, W]` in `(-1, 1)`.
    pub fn forward(&self, g: &mut Graph, w: &Bound, labels: &[usize], noise: Var) -> Result<Var> {
        let s = &self.spec;
        let hidden = s.capacity.hidden();
        let b = labels.len();
        if g.shape(noise) != [b, s.noise_dim] {
            return Err(config(format!(
                "noise must be [{b}, {}], got {:?}",
                s.noise_dim,
                g.shape(noise)
            )));
        }
        let oh = g.input(one_hot(labels, s.num_classes)?)?;
        let emb = g.matmul(oh, w.get("embed")?)?;
        let z = g.concat(&[noise, emb], 1)?;
        let h = g.matmul(z, w.get("fc.w")?)?;
        let h = g.add_bias(h, w.get("fc.b")?)?;
        let h = g.reshape(h, &[b, hidden[0], s.output.height / 2, s.output.width / 2])?;
        let h = g.relu(h)?;
        let mut h = g.upsample2x(h)?;
        for i in 1..hidden.len() {
            let c = g.conv2d(h, w.get(&format!("conv{i}.w"))?, Conv2dOpts::default())?;
            h = g.relu(c)?;
        }
        let o = g.conv2d(h, w.get("out.w")?, Conv2dOpts::default())?;
        let o = g.add_bias(o, w.get("out.b")?)?;
        Ok(g.tanh(o)?)
    }
}

fn init_layout(layout: Vec<(String, Vec<usize>)>, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightSet::new();
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            let fan_in = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                _ => shape[0],
            };
            let std = if name == "embed" {
                1.0
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        ws.insert(name, Tensor::new(shape, data).expect("layout shape"));
    }
    ws
}

/// Runs `G` on `(labels, noise)`; a pure function of its inputs.
pub fn generate(
    gen: &Generator,
    weights: &WeightSet,
    labels: &[usize],
    noise: &Tensor,
) -> Result<SyntheticBatch> {
    let mut g = Graph::new();
    let b = g.bind_const(weights)?;
    let z = g.input(noise.clone())?;
    let x = gen.forward(&mut g, &b, labels, z)?;
    Ok(SyntheticBatch {
        images: g.value(x).clone(),
        labels: labels.to_vec(),
        noise: noise.clone(),
    })
}

/// Supernet trunk on `[image, label plane]` with a single real/fake logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    net: Network,
    num_classes: usize,
    input: ImageShape,
}

impl Discriminator {
    pub fn new(spec: &SupernetSpec) -> Result<Self> {
        Ok(Self {
            net: Network::supernet_with_io(spec, spec.input.channels + 1, 1)?,
            num_classes: spec.num_classes,
            input: spec.input,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.num_classes * self.input.height * self.input.width
    }

    pub fn init_weights(&self, seed: u64) -> WeightSet {
        let mut w = self.net.init_weights(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = self.num_classes * self.input.height * self.input.width;
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        w.insert(
            "embed",
            Tensor::new(
                vec![self.num_classes, self.input.height * self.input.width],
                data,
            )
            .expect("embed shape"),
        );
        w
    }

    /// Real/fake logits `[B, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        h: &Bound,
        arch: crate::search_space::ArchVars,
        images: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let b = labels.len();
        let oh = g.input(one_hot(labels, self.num_classes)?)?;
        let plane = g.matmul(oh, h.get("embed")?)?;
        let plane = g.reshape(plane, &[b, 1, self.input.height, self.input.width])?;
        let x = g.concat(&[images, plane], 1)?;
        self.net.forward(g, h, Some(arch), x)
    }

    /// `sigmoid` of the logits, for inspection.
    pub fn probabilities(
        &self,
        h: &WeightSet,
        arch: &ArchParams,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let hb = g.bind_const(h)?;
        let av = bind_arch(&mut g, arch, None)?;
        let x = g.input(images.clone())?;
        let logits = self.forward(&mut g, &hb, av, x, labels)?;
        let p = g.sigmoid(logits)?;
        Ok(g.value(p).data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `G` descends the same objective that `H` ascends.
    #[default]
    Saturating,
    /// `G` minimizes `-mean log D(fake)` instead.
    NonSaturating,
}

/// One `D_cig` batch: real images with their labels, and the conditioning
/// labels and noise for the generated half.
#[derive(Clone, Debug, PartialEq)]
pub struct GanBatch {
    pub real: Tensor,
    pub real_labels: Vec<usize>,
    pub fake_labels: Vec<usize>,
    pub noise: Tensor,
}

pub const G_PREFIX: &str = "g.";
pub const H_PREFIX: &str = "h.";
pub const A_PREFIX: &str = "a.";

/// Values and gradients of the adversarial objectives at one point.
#[derive(Clone, Debug)]
pub struct GanEval {
    /// `L = mean log D(x, y) + mean log(1 − D(G(y', δ), y'))`.
    pub objective: f64,
    /// What `G` minimizes (equals `objective` in saturating mode).
    pub generator_loss: f64,
    /// Gradients of `objective` keyed `h.*`, `a.*`.
    pub objective_grads: GradientMap,
    /// Gradients of `generator_loss` keyed `g.*`, `a.*`.
    pub generator_grads: GradientMap,
}

/// The conditional GAN pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Cig {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub loss: GeneratorLoss,
}

impl Cig {
    pub fn new(gspec: GeneratorSpec, dspec: &SupernetSpec, loss: GeneratorLoss) -> Result<Self> {
        if gspec.output != dspec.input || gspec.num_classes != dspec.num_classes {
            return Err(config("generator output and discriminator input disagree"));
        }
        Ok(Self {
            generator: Generator::new(gspec)?,
            discriminator: Discriminator::new(dspec)?,
            loss,
        })
    }

    /// Evaluates both objectives and their gradients w.r.t. `G`, `H` and `A`.
    pub fn evaluate(
        &self,
        gw: &WeightSet,
        hw: &WeightSet,
        arch: &ArchParams,
        batch: &GanBatch,
    ) -> Result<GanEval> {
        if batch.real_labels.is_empty() || batch.fake_labels.is_empty() {
            return Err(CoreError::Empty("adversarial batch"));
        }
        let mut g = Graph::new();
        let gb = g.bind(gw, G_PREFIX)?;
        let hb = g.bind(hw, H_PREFIX)?;
        let av = bind_arch(&mut g, arch, Some(A_PREFIX))?;
        let real = g.input(batch.real.clone())?;
        let noise = g.input(batch.noise.clone())?;
        let fake = self
            .generator
            .forward(&mut g, &gb, &batch.fake_labels, noise)?;
        let d_real = self
            .discriminator
            .forward(&mut g, &hb, av, real, &batch.real_labels)?;
        let d_fake = self
            .discriminator
            .forward(&mut g, &hb, av, fake, &batch.fake_labels)?;

        let log_d_real = g.log_sigmoid(d_real)?;
        let real_term = g.mean(log_d_real)?;
        let neg_fake = g.scale(d_fake, -1.0)?;
        let log_one_minus = g.log_sigmoid(neg_fake)?;
        let fake_term = g.mean(log_one_minus)?;
        let objective = g.add(real_term, fake_term)?;

        let gen_loss = match self.loss {
            GeneratorLoss::Saturating => objective,
            GeneratorLoss::NonSaturating => {
                let log_d_fake = g.log_sigmoid(d_fake)?;
                let m = g.mean(log_d_fake)?;
                g.scale(m, -1.0)?
            }
        };
        let all_obj = g.backward(objective)?;
        let all_gen = if gen_loss == objective {
            all_obj.clone()
        } else {
            g.backward(gen_loss)?
        };
        let mut objective_grads = all_obj.strip_prefix(H_PREFIX).with_prefix(H_PREFIX);
        objective_grads.extend(all_obj.strip_prefix(A_PREFIX).with_prefix(A_PREFIX));
        let mut generator_grads = all_gen.strip_prefix(G_PREFIX).with_prefix(G_PREFIX);
        generator_grads.extend(all_gen.strip_prefix(A_PREFIX).with_prefix(A_PREFIX));
        Ok(GanEval {
            objective: g.value(objective).item()?,
            generator_loss: g.value(gen_loss).item()?,
            objective_grads,
            generator_grads,
        })
    }
}

/// Result of one simultaneous adversarial step.
#[derive(Clone, Debug)]
pub struct GanStep {
    pub g: WeightSet,
    pub h: WeightSet,
    pub generator_loss: f64,
    pub objective: f64,
}

/// `G' = G − ξ_G ∇_G L_G`, `H' = H + ξ_H ∇_H L`, both from gradients at `(G, H)`.
pub fn gan_step(
    cig: &Cig,
    gw: &WeightSet,
    hw: &WeightSet,
    arch: &ArchParams,
    batch: &GanBatch,
    xi_g: f64,
    xi_h: f64,
) -> Result<GanStep> {
    let eval = cig.evaluate(gw, hw, arch, batch)?;
    let dg = eval.generator_grads.strip_prefix(G_PREFIX);
    let dh = eval.objective_grads.strip_prefix(H_PREFIX);
    if !dg.is_finite() || !dh.is_finite() {
        return Err(CoreError::NonFinite {
            what: "adversarial gradients".into(),
            iteration: 0,
        });
    }
    let mut g = gw.clone();
    let mut h = hw.clone();
    if xi_g != 0.0 {
        g.axpy(-xi_g, &dg)?;
    }
    if xi_h != 0.0 {
        h.axpy(xi_h, &dh)?;
    }
    Ok(GanStep {
        g,
        h,
        generator_loss: eval.generator_loss,
        objective: eval.objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::CandidateOp;
    use crate::search_space::OpSet;

    fn dspec() -> SupernetSpec {
        SupernetSpec {
            cells: 1,
            nodes: 2,
            channels: 3,
            num_classes: 2,
            input: ImageShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            reduction_cells: false,
            ops: OpSet::new(vec![
                CandidateOp::SepConv3x3,
                CandidateOp::MaxPool3x3,
                CandidateOp::Zero,
                CandidateOp::Identity,
            ])
            .unwrap(),
        }
    }

    fn setup() -> (Cig, WeightSet, WeightSet, ArchParams, GanBatch) {
        let ds = dspec();
        let mut gs = GeneratorSpec::new(2, ds.input);
        gs.capacity = Capacity::Tiny;
        let cig = Cig::new(gs, &ds, GeneratorLoss::Saturating).unwrap();
        let gw = cig.generator.init_weights(1);
        let hw = cig.discriminator.init_weights(2);
        let arch = ArchParams::random(2, ds.ops.clone(), false, 0.5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real = sample_noise(&mut rng, 4, 16)
            .map(|v| (0.5 * v).tanh())
            .reshape(&[4, 1, 4, 4])
            .unwrap();
        let batch = GanBatch {
            real,
            real_labels: vec![0, 1, 1, 0],
            fake_labels: vec![1, 0, 1, 0],
            noise: sample_noise(&mut rng, 4, 8),
        };
        (cig, gw, hw, arch, batch)
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (cig, gw, ..) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..2).flat_map(|c| std::iter::repeat_n(c, 3)).collect();
        let noise = sample_noise(&mut rng, labels.len(), 8);
        let a = generate(&cig.generator, &gw, &labels, &noise).unwrap();
        let b = generate(&cig.generator, &gw, &labels, &noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[6, 1, 4, 4]);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 3);
        assert!(a.images.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let (cig, gw, ..) = setup();
        let noise = Tensor::zeros(&[1, 8]);
        assert!(matches!(
            generate(&cig.generator, &gw, &[2], &noise),
            Err(CoreError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn zero_rates_are_identity() {
        let (cig, gw, hw, arch, batch) = setup();
        let s = gan_step(&cig, &gw, &hw, &arch, &batch, 0.0, 0.0).unwrap();
        assert!(s.g.bit_eq(&gw));
        assert!(s.h.bit_eq(&hw));
    }

    #[test]
    fn discriminator_output_is_a_probability_and_depends_on_arch() {
        let (cig, _, hw, arch, batch) = setup();
        let p = cig
            .discriminator
            .probabilities(&hw, &arch, &batch.real, &batch.real_labels)
            .unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let other = ArchParams::random(2, arch.ops().clone(), false, 2.0, 99);
        let q = cig
            .discriminator
            .probabilities(&hw, &other, &batch.real, &batch.real_labels)
            .unwrap();
        assert!(p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn ascent_step_does_not_decrease_objective() {
        let (cig, gw, hw, arch, batch) = setup();
        let before = cig.evaluate(&gw, &hw, &arch, &batch).unwrap().objective;
        let s = gan_step(&cig, &gw, &hw, &arch, &batch, 0.0, 1e-3).unwrap();
        let after = cig.evaluate(&gw, &s.h, &arch, &batch).unwrap().objective;
        assert!(after >= before - 1e-8, "{before} -> {after}");
    }

    #[test]
    fn trunk_shapes_match_classifier() {
        let ds = dspec();
        let cls = Network::supernet(&ds).unwrap().param_shapes();
        let disc = Discriminator::new(&ds).unwrap().network().param_shapes();
        let cells = |v: &[(String, Vec<usize>)]| -> Vec<(String, Vec<usize>)> {
            v.iter()
                .filter(|(n, _)| n.starts_with("cell"))
                .cloned()
                .collect()
        };
        assert_eq!(cells(&cls), cells(&disc));
        assert!(!cells(&cls).is_empty());
    }

    #[test]
    fn real_batch_order_does_not_matter() {
        let (cig, gw, hw, arch, batch) = setup();
        let a = cig.evaluate(&gw, &hw, &arch, &batch).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut data = Vec::new();
        for &i in &perm {
            data.extend_from_slice(&batch.real.data()[i * 16..(i + 1) * 16]);
        }
        let permuted = GanBatch {
            real: Tensor::new(vec![4, 1, 4, 4], data).unwrap(),
            real_labels: perm.iter().map(|&i| batch.real_labels[i]).collect(),
            ..batch.clone()
        };
        let b = cig.evaluate(&gw, &hw, &arch, &permuted).unwrap();
        let diff = a.objective_grads.sub(&b.objective_grads).unwrap().norm();
        assert!(diff < 1e-9, "{diff}");
        let diff = a.generator_grads.sub(&b.generator_grads).unwrap().norm();
        assert!(diff < 1e-9, "{diff}");
    }
}
