//! One outer iteration of the tri-level scheme and the architecture
//! hypergradient through the unrolled weight, generator and class-weight
//! updates.
//!
//! Everything here is written against [`TrilevelProblem`], so the neural
//! search and the quadratic oracle share one implementation.

use lfm_autodiff::{hvp, AutodiffError, GradientMap, WeightSet, MIN_DIRECTION_NORM};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::optim::{Adam, Rates};
use crate::reweight::{ClassLossVector, WeightingConfig};

/// A value with gradients w.r.t. the architecture and one weight group.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad_a: GradientMap,
    pub grad_w: GradientMap,
}

/// `Σ_c coeff_c S_c(A, W₂, G)` and its gradients.
#[derive(Clone, Debug)]
pub struct SyntheticEval {
    pub value: f64,
    pub grad_a: GradientMap,
    pub grad_w: GradientMap,
    pub grad_g: GradientMap,
}

/// Both adversarial objectives at one `(A, G, H)`.
#[derive(Clone, Debug)]
pub struct AdversarialEval {
    /// What `G` descends, with gradients w.r.t. `A` and `G`.
    pub generator: LossGrad,
    /// What `H` ascends, with its gradient w.r.t. `H` in `grad_w`.
    pub discriminator: LossGrad,
}

/// The losses of one outer iteration, each with its batches already fixed.
pub trait TrilevelProblem {
    fn num_classes(&self) -> usize;

    /// Training loss of a classifier with weights `w`.
    fn train_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad>;

    /// Validation loss driving the architecture update.
    fn val_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad>;

    /// `l_c(A, W₁)` for each class, with gradients when `with_grads`.
    fn class_losses(
        &self,
        a: &WeightSet,
        w1: &WeightSet,
        with_grads: bool,
    ) -> Result<Vec<LossGrad>>;

    /// Weighted synthetic loss of the second classifier on images from `g`.
    fn synthetic_loss(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        g: &WeightSet,
        coeffs: &[f64],
    ) -> Result<SyntheticEval>;

    /// `∇_{W₂} S_c` for each class.
    fn synthetic_class_grads(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        g: &WeightSet,
    ) -> Result<Vec<GradientMap>> {
        let c = self.num_classes();
        (0..c)
            .map(|k| {
                let mut coeffs = vec![0.0; c];
                coeffs[k] = 1.0;
                Ok(self.synthetic_loss(a, w2, g, &coeffs)?.grad_w)
            })
            .collect()
    }

    fn adversarial(&self, a: &WeightSet, g: &WeightSet, h: &WeightSet) -> Result<AdversarialEval>;
}

/// Variable groups at the start of an iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variables {
    pub a: WeightSet,
    pub w1: WeightSet,
    pub w2: WeightSet,
    pub g: WeightSet,
    pub h: WeightSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    #[default]
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypergradMode {
    pub order: Order,
    /// Finite-difference radius of the Hessian-vector products.
    pub eps: f64,
}

impl Default for HypergradMode {
    fn default() -> Self {
        Self {
            order: Order::Second,
            eps: lfm_autodiff::DEFAULT_HVP_EPS,
        }
    }
}

impl HypergradMode {
    pub fn first_order() -> Self {
        Self {
            order: Order::First,
            ..Self::default()
        }
    }

    pub fn second_order(eps: f64) -> Self {
        Self {
            order: Order::Second,
            eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == Order::Second && !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(CoreError::Mode(format!(
                "second-order mode needs eps > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Additive pieces of the architecture hypergradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Explicit dependence of the validation loss on `A`.
    Direct,
    /// `W₂'` through the real training loss.
    TrainMixed,
    /// `W₂'` through the class weights `l_c(A, W₁')`.
    ClassWeight,
    /// `W₂'` through the synthetic losses' own dependence on `A`.
    SyntheticMixed,
    /// `W₂'` through `l_c` through `W₁'`.
    W1Path,
    /// `W₂'` through the synthetic images through `G'`.
    GeneratorPath,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Direct,
        Term::TrainMixed,
        Term::ClassWeight,
        Term::SyntheticMixed,
        Term::W1Path,
        Term::GeneratorPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Direct => "direct",
            Term::TrainMixed => "train_mixed",
            Term::ClassWeight => "class_weight",
            Term::SyntheticMixed => "synthetic_mixed",
            Term::W1Path => "w1_path",
            Term::GeneratorPath => "generator_path",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HypergradOptions {
    pub mode: HypergradMode,
    /// Negates one term; used to check that verification catches sign errors.
    pub fault: Option<Term>,
}

#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub total: GradientMap,
    pub terms: Vec<(Term, GradientMap)>,
    pub val_loss: f64,
}

impl Hypergradient {
    pub fn term(&self, t: Term) -> &GradientMap {
        &self
            .terms
            .iter()
            .find(|(k, _)| *k == t)
            .expect("every term is present")
            .1
    }
}

/// Results of the weight, generator and class-weight updates of one iteration.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub w1_next: WeightSet,
    pub g_next: WeightSet,
    pub h_next: WeightSet,
    pub w2_next: WeightSet,
    pub train_w1: LossGrad,
    pub adversarial: AdversarialEval,
    pub class: Vec<LossGrad>,
    pub l: ClassLossVector,
    pub coeffs: Vec<f64>,
    pub train_w2: Option<LossGrad>,
    pub synthetic: Option<SyntheticEval>,
}

/// Weight updates, supplied by the caller so real runs can use momentum and
/// clipping while the oracle uses literal gradient steps.
pub trait Updater {
    fn w1(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()>;
    fn g(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()>;
    /// Ascent on `H` along `grad`.
    fn h(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()>;
    fn w2(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()>;
}

/// `w ← w − lr·g` for every group (`H` ascends).
pub struct PlainSteps;

impl Updater for PlainSteps {
    fn w1(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        plain(w, grad, -lr)
    }
    fn g(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        plain(w, grad, -lr)
    }
    fn h(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        plain(w, grad, lr)
    }
    fn w2(&mut self, w: &mut WeightSet, grad: &GradientMap, lr: f64) -> Result<()> {
        plain(w, grad, -lr)
    }
}

fn plain(w: &mut WeightSet, grad: &GradientMap, alpha: f64) -> Result<()> {
    if alpha != 0.0 {
        w.axpy(alpha, grad)?;
    }
    Ok(())
}

fn check_finite(what: &str, g: &GradientMap) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite {
            what: what.to_string(),
            iteration: 0,
        })
    }
}

/// `W₁' = step(W₁, ∇_{W₁} L_tr)`.
pub fn step_w1<P: TrilevelProblem + ?Sized>(
    p: &P,
    a: &WeightSet,
    w1: &WeightSet,
    lr: f64,
    up: &mut dyn Updater,
) -> Result<(WeightSet, LossGrad)> {
    let tr = p.train_loss(a, w1)?;
    check_finite("W1 gradient", &tr.grad_w)?;
    let mut next = w1.clone();
    up.w1(&mut next, &tr.grad_w, lr)?;
    Ok((next, tr))
}

/// `W₂' = step(W₂, ∇_{W₂}[L_tr + Σ_c coeff_c S_c])`; the real term is
/// skipped in synthetic-only mode and the synthetic one when every
/// coefficient is zero.
#[allow(clippy::too_many_arguments)]
pub fn step_w2<P: TrilevelProblem + ?Sized>(
    p: &P,
    a: &WeightSet,
    w2: &WeightSet,
    g_next: &WeightSet,
    coeffs: &[f64],
    cfg: &WeightingConfig,
    lr: f64,
    up: &mut dyn Updater,
) -> Result<(WeightSet, Option<LossGrad>, Option<SyntheticEval>)> {
    let train = if cfg.synthetic_only {
        None
    } else {
        Some(p.train_loss(a, w2)?)
    };
    let synthetic = if coeffs.iter().any(|&c| c != 0.0) {
        Some(p.synthetic_loss(a, w2, g_next, coeffs)?)
    } else {
        None
    };
    let mut grad = match &train {
        Some(t) => t.grad_w.clone(),
        None => w2.zeros_like(),
    };
    if let Some(s) = &synthetic {
        grad.axpy(1.0, &s.grad_w)?;
    }
    check_finite("W2 gradient", &grad)?;
    let mut next = w2.clone();
    up.w2(&mut next, &grad, lr)?;
    Ok((next, train, synthetic))
}

/// `A' = A − ξ_A · AdamW(∇_A)`.
pub fn step_arch(
    opt: &mut Adam,
    a: &mut WeightSet,
    hypergrad: &GradientMap,
    lr: f64,
) -> Result<()> {
    if !a.keys().eq(hypergrad.keys()) {
        return Err(CoreError::Mode(
            "hypergradient keys do not match the architecture".into(),
        ));
    }
    for (k, t) in hypergrad.iter() {
        if a.require(k)?.shape() != t.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "step_arch",
                expected: a.require(k)?.shape().to_vec(),
                got: t.shape().to_vec(),
            }
            .into());
        }
    }
    opt.step(a, hypergrad, lr)
}

/// Runs every lower-level update of one iteration.
pub fn unroll<P: TrilevelProblem + ?Sized>(
    p: &P,
    v: &Variables,
    rates: &Rates,
    cfg: &WeightingConfig,
    class_grads: bool,
    up: &mut dyn Updater,
) -> Result<Unrolled> {
    let (w1_next, train_w1) = step_w1(p, &v.a, &v.w1, rates.w1, up)?;

    let adversarial = p.adversarial(&v.a, &v.g, &v.h)?;
    check_finite("generator gradient", &adversarial.generator.grad_w)?;
    check_finite("discriminator gradient", &adversarial.discriminator.grad_w)?;
    let mut g_next = v.g.clone();
    up.g(&mut g_next, &adversarial.generator.grad_w, rates.g)?;
    let mut h_next = v.h.clone();
    up.h(&mut h_next, &adversarial.discriminator.grad_w, rates.h)?;

    let class = p.class_losses(&v.a, &w1_next, class_grads)?;
    let l = ClassLossVector {
        values: class.iter().map(|c| c.value).collect(),
        counts: vec![1; class.len()],
    };
    let coeffs = cfg.coefficients(&l);
    let (w2_next, train_w2, synthetic) =
        step_w2(p, &v.a, &v.w2, &g_next, &coeffs, cfg, rates.w2, up)?;
    Ok(Unrolled {
        w1_next,
        g_next,
        h_next,
        w2_next,
        train_w1,
        adversarial,
        class,
        l,
        coeffs,
        train_w2,
        synthetic,
    })
}

fn nonzero(v: &GradientMap) -> bool {
    v.norm() >= MIN_DIRECTION_NORM
}

/// Architecture hypergradient at the end of an iteration.
///
/// With `v₀ = ∇_{W₂'} L_val(A, W₂')`, every indirect term is a mixed second
/// derivative contracted against a propagated vector, evaluated by central
/// differences at the pre-update point of the perturbed group.
pub fn hypergradient<P: TrilevelProblem + ?Sized>(
    p: &P,
    v: &Variables,
    un: &Unrolled,
    rates: &Rates,
    cfg: &WeightingConfig,
    opts: &HypergradOptions,
) -> Result<Hypergradient> {
    opts.mode.validate()?;
    let val = p.val_loss(&v.a, &un.w2_next)?;
    let zero = v.a.zeros_like();
    let mut terms: Vec<(Term, GradientMap)> =
        Term::ALL.iter().map(|&t| (t, zero.clone())).collect();
    let set = |terms: &mut Vec<(Term, GradientMap)>, t: Term, g: GradientMap| {
        terms.iter_mut().find(|(k, _)| *k == t).expect("term").1 = g;
    };
    set(&mut terms, Term::Direct, val.grad_a.clone());

    let v0 = &val.grad_w;
    let eps = opts.mode.eps;
    if opts.mode.order == Order::Second && rates.w2 != 0.0 && nonzero(v0) {
        let xi2 = rates.w2;
        if !cfg.synthetic_only {
            let m = hvp(|w| grad_a_of(p.train_loss(&v.a, w)), &v.w2, v0, eps)?;
            set(&mut terms, Term::TrainMixed, m.scale(-xi2));
        }

        let scale = cfg.weight_scale(&un.l);
        if scale != 0.0 {
            let s = p.synthetic_class_grads(&v.a, &v.w2, &un.g_next)?;
            let d = s
                .iter()
                .map(|sc| sc.dot(v0))
                .collect::<std::result::Result<Vec<f64>, _>>()?;

            let mut cw = zero.clone();
            let mut u1 = v.w1.zeros_like();
            for (c, lc) in un.class.iter().enumerate() {
                if d[c] == 0.0 || lc.grad_a.is_empty() {
                    continue;
                }
                cw.axpy(-xi2 * scale * d[c], &lc.grad_a)?;
                u1.axpy(-xi2 * scale * d[c], &lc.grad_w)?;
            }
            if un.class.iter().any(|lc| lc.grad_a.is_empty()) && d.iter().any(|&x| x != 0.0) {
                return Err(CoreError::Mode(
                    "class-loss gradients missing for a second-order step".into(),
                ));
            }
            set(&mut terms, Term::ClassWeight, cw);

            if un.coeffs.iter().any(|&c| c != 0.0) {
                let mixed = hvp(
                    |w| {
                        let e = p
                            .synthetic_loss(&v.a, w, &un.g_next, &un.coeffs)
                            .map_err(to_autodiff)?;
                        let mut out = e.grad_a.with_prefix("a.");
                        out.extend(e.grad_g.with_prefix("g."));
                        Ok(out)
                    },
                    &v.w2,
                    v0,
                    eps,
                )?;
                set(
                    &mut terms,
                    Term::SyntheticMixed,
                    mixed.strip_prefix("a.").scale(-xi2),
                );
                let ug = mixed.strip_prefix("g.").scale(-xi2);
                if rates.g != 0.0 && nonzero(&ug) {
                    let gp = hvp(
                        |g| grad_a_of(p.adversarial(&v.a, g, &v.h).map(|e| e.generator)),
                        &v.g,
                        &ug,
                        eps,
                    )?;
                    set(&mut terms, Term::GeneratorPath, gp.scale(-rates.g));
                }
            }

            if rates.w1 != 0.0 && nonzero(&u1) {
                let wp = hvp(|w| grad_a_of(p.train_loss(&v.a, w)), &v.w1, &u1, eps)?;
                set(&mut terms, Term::W1Path, wp.scale(-rates.w1));
            }
        }
    }

    if let Some(f) = opts.fault {
        let t = &mut terms.iter_mut().find(|(k, _)| *k == f).expect("term").1;
        *t = t.scale(-1.0);
    }
    let mut total = zero;
    for (_, t) in &terms {
        total.axpy(1.0, t)?;
    }
    check_finite("architecture hypergradient", &total)?;
    Ok(Hypergradient {
        total,
        terms,
        val_loss: val.value,
    })
}

fn to_autodiff(e: CoreError) -> AutodiffError {
    match e {
        CoreError::Autodiff(e) => e,
        e => AutodiffError::InvalidArgument {
            op: "hypergradient",
            msg: e.to_string(),
        },
    }
}

fn grad_a_of(r: Result<LossGrad>) -> std::result::Result<GradientMap, AutodiffError> {
    r.map(|l| l.grad_a).map_err(to_autodiff)
}
