//! Ground truth for the hypergradient: tri-level problems built from
//! quadratics, their closed-form hypergradient, and brute-force central
//! differences of the unrolled pipeline.

use lfm_autodiff::{GradientMap, Tensor, WeightSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cig::{sample_noise, Capacity, Cig, GanBatch, GeneratorLoss, GeneratorSpec};
use crate::error::{config, CoreError, Result};
use crate::optim::Rates;
use crate::reweight::{ClassLossVector, SyntheticPolicy, WeightingConfig};
use crate::search::{IterationBatches, NeuralProblem};
use crate::search_space::{ArchParams, CandidateOp, ImageShape, Network, OpSet, SupernetSpec};
use crate::trilevel::{
    AdversarialEval, Hypergradient, LossGrad, SyntheticEval, Term, TrilevelProblem, Variables,
};

/// Key of the single vector stored in each quadratic weight set.
pub const KEY: &str = "x";

pub fn to_set(v: &DVector<f64>) -> WeightSet {
    let mut w = WeightSet::new();
    w.insert(KEY, Tensor::from_vec(v.as_slice().to_vec()));
    w
}

pub fn to_vector(w: &WeightSet) -> Result<DVector<f64>> {
    Ok(DVector::from_column_slice(w.require(KEY)?.data()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuadraticDims {
    pub a: usize,
    pub w: usize,
    pub g: usize,
    pub h: usize,
    pub classes: usize,
}

/// `l_c` and `S_c` for one class.
#[derive(Clone, Debug)]
struct ClassTerms {
    k: DMatrix<f64>,
    f: DMatrix<f64>,
    t: DMatrix<f64>,
    k_lin: DVector<f64>,
    t_lin: DVector<f64>,
    kappa: f64,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    j: DMatrix<f64>,
    y: DMatrix<f64>,
    z: DMatrix<f64>,
    u_lin: DVector<f64>,
}

/// Quadratic stand-ins for every loss of the tri-level problem.
///
/// ```text
/// L_tr  = ½WᵀPW + WᵀBA + ½AᵀRA + pᵀW + rᵀA
/// L_val = ½WᵀQW + WᵀEA + ½AᵀSA + qᵀW + sᵀA
/// l_c   = ½W₁ᵀK_cW₁ + W₁ᵀF_cA + ½AᵀT_cA + k_cᵀW₁ + t_cᵀA + κ_c
/// S_c   = ½W₂ᵀU_cW₂ + W₂ᵀV_cG + W₂ᵀJ_cA + ½GᵀY_cG + GᵀZ_cA + u_cᵀW₂
/// L_G   = ½GᵀΓG + GᵀΦA + GᵀΨH − ½HᵀΩH + γᵀG
/// ```
/// Every square form is symmetric with eigenvalues in `[0.5, 2]`.
#[derive(Clone, Debug)]
pub struct QuadraticTrilevelProblem {
    pub dims: QuadraticDims,
    p: DMatrix<f64>,
    b: DMatrix<f64>,
    r: DMatrix<f64>,
    p_lin: DVector<f64>,
    r_lin: DVector<f64>,
    q: DMatrix<f64>,
    e: DMatrix<f64>,
    s: DMatrix<f64>,
    q_lin: DVector<f64>,
    s_lin: DVector<f64>,
    class: Vec<ClassTerms>,
    gamma: DMatrix<f64>,
    phi: DMatrix<f64>,
    psi: DMatrix<f64>,
    omega: DMatrix<f64>,
    gamma_lin: DVector<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

/// Random symmetric matrix with eigenvalues drawn from `[0.5, 2]`.
fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let qr = gaussian(rng, n, n, 1.0).qr();
    let o = qr.q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..=2.0)));
    let m = &o * d * o.transpose();
    (&m + m.transpose()) * 0.5
}

impl QuadraticTrilevelProblem {
    pub fn random(dims: QuadraticDims, seed: u64) -> Result<Self> {
        let QuadraticDims {
            a,
            w,
            g,
            h,
            classes,
        } = dims;
        if [a, w, g, h].iter().any(|&d| d == 0 || d > 10) || classes < 2 {
            return Err(config(format!(
                "quadratic dims must lie in 1..=10 with ≥ 2 classes, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 0.3;
        let class = (0..classes)
            .map(|_| ClassTerms {
                k: spd(&mut rng, w),
                f: gaussian(&mut rng, w, a, c),
                t: spd(&mut rng, a),
                k_lin: gaussian_vec(&mut rng, w, c),
                t_lin: gaussian_vec(&mut rng, a, c),
                kappa: rng.random_range(0.5..1.5),
                u: spd(&mut rng, w),
                v: gaussian(&mut rng, w, g, c),
                j: gaussian(&mut rng, w, a, c),
                y: spd(&mut rng, g),
                z: gaussian(&mut rng, g, a, c),
                u_lin: gaussian_vec(&mut rng, w, c),
            })
            .collect();
        Ok(Self {
            dims,
            p: spd(&mut rng, w),
            b: gaussian(&mut rng, w, a, c),
            r: spd(&mut rng, a),
            p_lin: gaussian_vec(&mut rng, w, c),
            r_lin: gaussian_vec(&mut rng, a, c),
            q: spd(&mut rng, w),
            e: gaussian(&mut rng, w, a, c),
            s: spd(&mut rng, a),
            q_lin: gaussian_vec(&mut rng, w, c),
            s_lin: gaussian_vec(&mut rng, a, c),
            class,
            gamma: spd(&mut rng, g),
            phi: gaussian(&mut rng, g, a, c),
            psi: gaussian(&mut rng, g, h, c),
            omega: spd(&mut rng, h),
            gamma_lin: gaussian_vec(&mut rng, g, c),
        })
    }

    /// Removes every coupling between `A` and the other variables.
    pub fn decouple_architecture(&mut self) {
        self.b.fill(0.0);
        self.e.fill(0.0);
        self.phi.fill(0.0);
        for ct in &mut self.class {
            ct.f.fill(0.0);
            ct.t.fill(0.0);
            ct.t_lin.fill(0.0);
            ct.j.fill(0.0);
            ct.z.fill(0.0);
        }
    }

    /// A random starting point.
    pub fn random_point(&self, seed: u64) -> Variables {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dims;
        Variables {
            a: to_set(&gaussian_vec(&mut rng, d.a, 1.0)),
            w1: to_set(&gaussian_vec(&mut rng, d.w, 1.0)),
            w2: to_set(&gaussian_vec(&mut rng, d.w, 1.0)),
            g: to_set(&gaussian_vec(&mut rng, d.g, 1.0)),
            h: to_set(&gaussian_vec(&mut rng, d.h, 1.0)),
        }
    }

    /// Moves `W₁`, `G` and `W₂` to the stationary points of their own
    /// objectives at the current `A` and `H`, so one gradient step leaves
    /// them in place and every hypergradient term is exactly linear in its
    /// step sizes.
    pub fn stationary_point(&self, v: &Variables, cfg: &WeightingConfig) -> Result<Variables> {
        let (a, h) = (to_vector(&v.a)?, to_vector(&v.h)?);
        let solve = |m: &DMatrix<f64>, rhs: DVector<f64>| {
            m.clone()
                .lu()
                .solve(&rhs)
                .ok_or_else(|| config("singular lower-level Hessian"))
        };
        let w1 = solve(&self.p, -(&self.b * &a + &self.p_lin))?;
        let g = solve(
            &self.gamma,
            -(&self.phi * &a + &self.psi * &h + &self.gamma_lin),
        )?;
        let l = ClassLossVector {
            values: (0..self.dims.classes)
                .map(|c| self.l_c(c, &a, &w1).0)
                .collect(),
            counts: vec![1; self.dims.classes],
        };
        let coeffs = cfg.coefficients(&l);
        let real = if cfg.synthetic_only { 0.0 } else { 1.0 };
        let mut m = &self.p * real;
        let mut rhs = (&self.b * &a + &self.p_lin) * real;
        for (ct, k) in self.class.iter().zip(&coeffs) {
            m += &ct.u * *k;
            rhs += (&ct.v * &g + &ct.j * &a + &ct.u_lin) * *k;
        }
        let w2 = solve(&m, -rhs)?;
        Ok(Variables {
            a: v.a.clone(),
            w1: to_set(&w1),
            w2: to_set(&w2),
            g: to_set(&g),
            h: v.h.clone(),
        })
    }

    fn l_c(
        &self,
        c: usize,
        a: &DVector<f64>,
        w1: &DVector<f64>,
    ) -> (f64, DVector<f64>, DVector<f64>) {
        let ct = &self.class[c];
        let value = 0.5 * w1.dot(&(&ct.k * w1))
            + w1.dot(&(&ct.f * a))
            + 0.5 * a.dot(&(&ct.t * a))
            + ct.k_lin.dot(w1)
            + ct.t_lin.dot(a)
            + ct.kappa;
        let ga = ct.f.transpose() * w1 + &ct.t * a + &ct.t_lin;
        let gw = &ct.k * w1 + &ct.f * a + &ct.k_lin;
        (value, ga, gw)
    }

    /// `∇_{W₂} S_c`.
    fn s_c(&self, c: usize, a: &DVector<f64>, w2: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let ct = &self.class[c];
        &ct.u * w2 + &ct.v * g + &ct.j * a + &ct.u_lin
    }
}

fn loss_grad(value: f64, ga: DVector<f64>, gw: DVector<f64>) -> LossGrad {
    LossGrad {
        value,
        grad_a: to_set(&ga),
        grad_w: to_set(&gw),
    }
}

impl TrilevelProblem for QuadraticTrilevelProblem {
    fn num_classes(&self) -> usize {
        self.dims.classes
    }

    fn train_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad> {
        let (a, w) = (to_vector(a)?, to_vector(w)?);
        let value = 0.5 * w.dot(&(&self.p * &w))
            + w.dot(&(&self.b * &a))
            + 0.5 * a.dot(&(&self.r * &a))
            + self.p_lin.dot(&w)
            + self.r_lin.dot(&a);
        let ga = self.b.transpose() * &w + &self.r * &a + &self.r_lin;
        let gw = &self.p * &w + &self.b * &a + &self.p_lin;
        Ok(loss_grad(value, ga, gw))
    }

    fn val_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad> {
        let (a, w) = (to_vector(a)?, to_vector(w)?);
        let value = 0.5 * w.dot(&(&self.q * &w))
            + w.dot(&(&self.e * &a))
            + 0.5 * a.dot(&(&self.s * &a))
            + self.q_lin.dot(&w)
            + self.s_lin.dot(&a);
        let ga = self.e.transpose() * &w + &self.s * &a + &self.s_lin;
        let gw = &self.q * &w + &self.e * &a + &self.q_lin;
        Ok(loss_grad(value, ga, gw))
    }

    fn class_losses(
        &self,
        a: &WeightSet,
        w1: &WeightSet,
        _with_grads: bool,
    ) -> Result<Vec<LossGrad>> {
        let (a, w1) = (to_vector(a)?, to_vector(w1)?);
        Ok((0..self.dims.classes)
            .map(|c| {
                let (v, ga, gw) = self.l_c(c, &a, &w1);
                loss_grad(v, ga, gw)
            })
            .collect())
    }

    fn synthetic_loss(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        g: &WeightSet,
        coeffs: &[f64],
    ) -> Result<SyntheticEval> {
        let (a, w2, g) = (to_vector(a)?, to_vector(w2)?, to_vector(g)?);
        let d = self.dims;
        let (mut value, mut ga, mut gw, mut gg) = (
            0.0,
            DVector::zeros(d.a),
            DVector::zeros(d.w),
            DVector::zeros(d.g),
        );
        for (ct, &k) in self.class.iter().zip(coeffs) {
            value += k
                * (0.5 * w2.dot(&(&ct.u * &w2))
                    + w2.dot(&(&ct.v * &g))
                    + w2.dot(&(&ct.j * &a))
                    + 0.5 * g.dot(&(&ct.y * &g))
                    + g.dot(&(&ct.z * &a))
                    + ct.u_lin.dot(&w2));
            gw += (&ct.u * &w2 + &ct.v * &g + &ct.j * &a + &ct.u_lin) * k;
            gg += (ct.v.transpose() * &w2 + &ct.y * &g + &ct.z * &a) * k;
            ga += (ct.j.transpose() * &w2 + ct.z.transpose() * &g) * k;
        }
        Ok(SyntheticEval {
            value,
            grad_a: to_set(&ga),
            grad_w: to_set(&gw),
            grad_g: to_set(&gg),
        })
    }

    fn adversarial(&self, a: &WeightSet, g: &WeightSet, h: &WeightSet) -> Result<AdversarialEval> {
        let (a, g, h) = (to_vector(a)?, to_vector(g)?, to_vector(h)?);
        let value =
            0.5 * g.dot(&(&self.gamma * &g)) + g.dot(&(&self.phi * &a)) + g.dot(&(&self.psi * &h))
                - 0.5 * h.dot(&(&self.omega * &h))
                + self.gamma_lin.dot(&g);
        let ga = self.phi.transpose() * &g;
        Ok(AdversarialEval {
            generator: loss_grad(
                value,
                ga.clone(),
                &self.gamma * &g + &self.phi * &a + &self.psi * &h + &self.gamma_lin,
            ),
            discriminator: loss_grad(value, ga, self.psi.transpose() * &g - &self.omega * &h),
        })
    }
}

/// Closed-form hypergradient of a quadratic problem under plain gradient
/// steps, split into the same terms as [`crate::trilevel::hypergradient`].
/// The class-weight normalization, when enabled, is held fixed.
pub fn analytic_quadratic_hypergrad(
    p: &QuadraticTrilevelProblem,
    v: &Variables,
    rates: &Rates,
    cfg: &WeightingConfig,
) -> Result<Hypergradient> {
    let (a, w1, w2, g, h) = (
        to_vector(&v.a)?,
        to_vector(&v.w1)?,
        to_vector(&v.w2)?,
        to_vector(&v.g)?,
        to_vector(&v.h)?,
    );
    let (xi1, xi2, xig) = (rates.w1, rates.w2, rates.g);
    let real = if cfg.synthetic_only { 0.0 } else { 1.0 };

    let w1n = &w1 - (&p.p * &w1 + &p.b * &a + &p.p_lin) * xi1;
    let gn = &g - (&p.gamma * &g + &p.phi * &a + &p.psi * &h + &p.gamma_lin) * xig;
    let classes: Vec<_> = (0..p.dims.classes).map(|c| p.l_c(c, &a, &w1n)).collect();
    let l = ClassLossVector {
        values: classes.iter().map(|c| c.0).collect(),
        counts: vec![1; classes.len()],
    };
    let scale = cfg.weight_scale(&l);
    let coeffs = cfg.coefficients(&l);
    let s: Vec<DVector<f64>> = (0..p.dims.classes)
        .map(|c| p.s_c(c, &a, &w2, &gn))
        .collect();

    let mut step = (&p.p * &w2 + &p.b * &a + &p.p_lin) * real;
    for (sc, k) in s.iter().zip(&coeffs) {
        step += sc * *k;
    }
    let w2n = &w2 - step * xi2;
    let v0 = &p.q * &w2n + &p.e * &a + &p.q_lin;

    let direct = p.e.transpose() * &w2n + &p.s * &a + &p.s_lin;
    let train_mixed = p.b.transpose() * &v0 * (-xi2 * real);
    let zero = DVector::zeros(p.dims.a);
    let (mut class_weight, mut w1_path, mut synth, mut gen) =
        (zero.clone(), zero.clone(), zero.clone(), zero.clone());
    let dw1_da = &p.b * -xi1;
    let dg_da = &p.phi * -xig;
    for c in 0..p.dims.classes {
        let d = s[c].dot(&v0);
        let (_, ga, gw) = &classes[c];
        class_weight += ga * (-xi2 * scale * d);
        w1_path += dw1_da.transpose() * gw * (-xi2 * scale * d);
        let ct = &p.class[c];
        synth += ct.j.transpose() * &v0 * (-xi2 * coeffs[c]);
        gen += (&ct.v * &dg_da).transpose() * &v0 * (-xi2 * coeffs[c]);
    }

    let terms: Vec<(Term, GradientMap)> = [
        (Term::Direct, direct),
        (Term::TrainMixed, train_mixed),
        (Term::ClassWeight, class_weight),
        (Term::SyntheticMixed, synth),
        (Term::W1Path, w1_path),
        (Term::GeneratorPath, gen),
    ]
    .into_iter()
    .map(|(t, x)| (t, to_set(&x)))
    .collect();
    let mut total = v.a.zeros_like();
    for (_, t) in &terms {
        total.axpy(1.0, t)?;
    }
    Ok(Hypergradient {
        total,
        terms,
        val_loss: p.val_loss(&v.a, &to_set(&w2n))?.value,
    })
}

/// Validation loss after one plain gradient step of every lower level, as a
/// function of `A` alone.
pub fn unrolled_val_loss<P: TrilevelProblem + ?Sized>(
    p: &P,
    v: &Variables,
    a: &WeightSet,
    rates: &Rates,
    cfg: &WeightingConfig,
) -> Result<f64> {
    let mut w1 = v.w1.clone();
    w1.axpy(-rates.w1, &p.train_loss(a, &v.w1)?.grad_w)?;
    let mut g = v.g.clone();
    g.axpy(-rates.g, &p.adversarial(a, &v.g, &v.h)?.generator.grad_w)?;
    let l = ClassLossVector {
        values: p
            .class_losses(a, &w1, false)?
            .iter()
            .map(|c| c.value)
            .collect(),
        counts: vec![1; p.num_classes()],
    };
    let coeffs = cfg.coefficients(&l);
    let mut grad = if cfg.synthetic_only {
        v.w2.zeros_like()
    } else {
        p.train_loss(a, &v.w2)?.grad_w
    };
    grad.axpy(1.0, &p.synthetic_loss(a, &v.w2, &g, &coeffs)?.grad_w)?;
    let mut w2 = v.w2.clone();
    w2.axpy(-rates.w2, &grad)?;
    let value = p.val_loss(a, &w2)?.value;
    if !value.is_finite() {
        return Err(CoreError::NonFinite {
            what: "unrolled validation loss".into(),
            iteration: 0,
        });
    }
    Ok(value)
}

/// Central differences of [`unrolled_val_loss`] over every coordinate of `A`.
pub fn unrolled_hypergrad_fd<P: TrilevelProblem + ?Sized>(
    p: &P,
    v: &Variables,
    rates: &Rates,
    cfg: &WeightingConfig,
    eps: f64,
) -> Result<GradientMap> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let base = v.a.flatten();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = v.a.clone();
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + eps;
        probe.assign_flat(&x)?;
        let plus = unrolled_val_loss(p, v, &probe, rates, cfg)?;
        x[i] = base[i] - eps;
        probe.assign_flat(&x)?;
        let minus = unrolled_val_loss(p, v, &probe, rates, cfg)?;
        out.push((plus - minus) / (2.0 * eps));
    }
    let mut g = v.a.zeros_like();
    g.assign_flat(&out)?;
    Ok(g)
}

/// Relative error `‖x − y‖ / max(‖y‖, floor)`.
pub fn relative_error(x: &GradientMap, y: &GradientMap, floor: f64) -> Result<f64> {
    Ok(x.sub(y)?.norm() / y.norm().max(floor))
}

/// A neural tri-level instance small enough for coordinate-wise finite
/// differences: one cell with one node, two channels, four ops, 4×4 inputs.
pub struct TinyNeural {
    pub net: Network,
    pub cig: Cig,
    pub arch: ArchParams,
    pub weighting: WeightingConfig,
    pub batches: IterationBatches,
    pub vars: Variables,
}

impl TinyNeural {
    pub fn new(seed: u64) -> Result<Self> {
        let ops = OpSet::new(vec![
            CandidateOp::SepConv3x3,
            CandidateOp::MaxPool3x3,
            CandidateOp::Zero,
            CandidateOp::Identity,
        ])?;
        let input = ImageShape {
            height: 4,
            width: 4,
            channels: 1,
        };
        let spec = SupernetSpec {
            cells: 1,
            nodes: 1,
            channels: 2,
            num_classes: 2,
            input,
            reduction_cells: false,
            ops,
        };
        let gspec = GeneratorSpec {
            noise_dim: 2,
            label_embedding_dim: 2,
            capacity: Capacity::Tiny,
            num_classes: 2,
            output: input,
        };
        let net = Network::supernet(&spec)?;
        let cig = Cig::new(gspec, &spec, GeneratorLoss::Saturating)?;
        let arch = ArchParams::random(1, spec.ops.clone(), false, 0.5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
        let mut images = |labels: &[usize]| {
            let n = labels.len();
            let data: Vec<f64> = labels
                .iter()
                .flat_map(|&y| (0..16).map(move |k| (y, k)))
                .map(|(y, k)| {
                    let z: f64 = rng.sample(StandardNormal);
                    let sign = if (k % 2 == 0) == (y == 0) { 0.5 } else { -0.5 };
                    (sign + 0.3 * z).clamp(-1.0, 1.0)
                })
                .collect();
            (
                Tensor::new(vec![n, 1, 4, 4], data).expect("image shape"),
                labels.to_vec(),
            )
        };
        let labels = [0, 1, 1, 0, 1, 0];
        let train = images(&labels);
        let val_class = images(&[1, 0, 0, 1, 1, 0]);
        let val_arch = images(&[0, 0, 1, 1, 0, 1]);
        let (real, real_labels) = images(&[1, 0, 1, 0]);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4015e);
        let weighting = WeightingConfig {
            lambda: 1.0,
            policy: SyntheticPolicy::PerClass(2),
            ..Default::default()
        };
        let synth_labels = weighting.policy.labels(&train.1, 2);
        let batches = IterationBatches {
            train,
            val_class,
            val_arch,
            gan: GanBatch {
                real,
                fake_labels: real_labels.clone(),
                real_labels,
                noise: sample_noise(&mut noise_rng, 4, 2),
            },
            synth_noise: sample_noise(&mut noise_rng, synth_labels.len(), 2),
            synth_labels,
        };
        let vars = Variables {
            a: arch.to_weights(),
            w1: net.init_weights(seed.wrapping_add(1)),
            w2: net.init_weights(seed.wrapping_add(2)),
            g: cig.generator.init_weights(seed.wrapping_add(3)),
            h: cig.discriminator.init_weights(seed.wrapping_add(4)),
        };
        Ok(Self {
            net,
            cig,
            arch,
            weighting,
            batches,
            vars,
        })
    }

    pub fn problem(&self) -> NeuralProblem<'_> {
        NeuralProblem {
            net: &self.net,
            cig: &self.cig,
            arch: &self.arch,
            weighting: &self.weighting,
            batches: &self.batches,
        }
    }

    /// Largest parameter count among the weight groups.
    pub fn max_group_size(&self) -> usize {
        [&self.vars.w1, &self.vars.w2, &self.vars.g, &self.vars.h]
            .iter()
            .map(|w| w.numel())
            .max()
            .unwrap_or(0)
    }
}
