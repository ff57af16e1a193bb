use lfm_autodiff::{GradientMap, Tensor, WeightSet};
use lfm_core::cig::SyntheticBatch;
use lfm_core::optim::{Adam, AdamConfig, Rates};
use lfm_core::oracle::{
    analytic_quadratic_hypergrad, QuadraticDims, QuadraticTrilevelProblem, TinyNeural,
};
use lfm_core::reweight::{weighted_objective, ClassLossVector, WeightingConfig};
use lfm_core::search_space::{build_supernet, ImageShape, SupernetSpec};
use lfm_core::trilevel::{
    hypergradient, step_arch, step_w1, step_w2, unroll, AdversarialEval, HypergradMode,
    HypergradOptions, LossGrad, PlainSteps, SyntheticEval, Term, TrilevelProblem,
};
use lfm_core::Result;

const INDIRECT_BY_LAMBDA: [Term; 4] = [
    Term::ClassWeight,
    Term::SyntheticMixed,
    Term::W1Path,
    Term::GeneratorPath,
];

fn rates(w1: f64, w2: f64, g: f64) -> Rates {
    Rates {
        w1,
        w2,
        g,
        h: 0.05,
        a: 0.0,
    }
}

fn second(eps: f64) -> HypergradOptions {
    HypergradOptions {
        mode: HypergradMode::second_order(eps),
        fault: None,
    }
}

#[test]
fn zero_lambda_silences_the_synthetic_paths() {
    let inst = TinyNeural::new(2).unwrap();
    let p = inst.problem();
    let cfg = WeightingConfig {
        lambda: 0.0,
        ..inst.weighting.clone()
    };
    let r = rates(0.1, 0.1, 0.1);
    let un = unroll(&p, &inst.vars, &r, &cfg, true, &mut PlainSteps).unwrap();
    let hg = hypergradient(&p, &inst.vars, &un, &r, &cfg, &second(1e-4)).unwrap();
    for t in INDIRECT_BY_LAMBDA {
        assert_eq!(hg.term(t).norm(), 0.0, "{}", t.name());
    }
    assert!(hg.term(Term::TrainMixed).norm() > 0.0);

    let q = QuadraticTrilevelProblem::random(
        QuadraticDims {
            a: 4,
            w: 4,
            g: 3,
            h: 2,
            classes: 3,
        },
        9,
    )
    .unwrap();
    let v = q.random_point(1);
    let exact = analytic_quadratic_hypergrad(&q, &v, &r, &cfg).unwrap();
    for t in INDIRECT_BY_LAMBDA {
        assert_eq!(exact.term(t).norm(), 0.0, "{}", t.name());
    }
}

#[test]
fn zero_step_sizes_collapse_to_first_order() {
    let inst = TinyNeural::new(3).unwrap();
    let p = inst.problem();
    let r = rates(0.0, 0.0, 0.0);
    let un = unroll(&p, &inst.vars, &r, &inst.weighting, true, &mut PlainSteps).unwrap();
    let full = hypergradient(&p, &inst.vars, &un, &r, &inst.weighting, &second(1e-4)).unwrap();
    let first = HypergradOptions {
        mode: HypergradMode::first_order(),
        fault: None,
    };
    let direct = hypergradient(&p, &inst.vars, &un, &r, &inst.weighting, &first).unwrap();
    assert!(full.total.sub(&direct.total).unwrap().norm() <= 1e-9);
}

#[test]
fn first_order_keeps_only_the_direct_term() {
    let inst = TinyNeural::new(4).unwrap();
    let p = inst.problem();
    let r = rates(0.1, 0.1, 0.1);
    let un = unroll(&p, &inst.vars, &r, &inst.weighting, false, &mut PlainSteps).unwrap();
    let o = HypergradOptions {
        mode: HypergradMode::first_order(),
        fault: None,
    };
    let hg = hypergradient(&p, &inst.vars, &un, &r, &inst.weighting, &o).unwrap();
    assert!(hg.total.bit_eq(hg.term(Term::Direct)));
}

#[test]
fn second_order_mode_needs_positive_eps() {
    assert!(HypergradMode::second_order(0.0).validate().is_err());
    assert!(HypergradMode::second_order(-1.0).validate().is_err());
    assert!(HypergradMode {
        eps: 0.0,
        ..HypergradMode::first_order()
    }
    .validate()
    .is_ok());
}

#[test]
fn zero_lambda_w2_step_equals_plain_training_step() {
    let inst = TinyNeural::new(6).unwrap();
    let p = inst.problem();
    let v = &inst.vars;
    let cfg = WeightingConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let coeffs = cfg.coefficients(&ClassLossVector::uniform(0.7, 2));
    let (w2, _, synth) =
        step_w2(&p, &v.a, &v.w2, &v.g, &coeffs, &cfg, 0.1, &mut PlainSteps).unwrap();
    let (plain, _) = step_w1(&p, &v.a, &v.w2, 0.1, &mut PlainSteps).unwrap();
    assert!(synth.is_none());
    assert!(w2.bit_eq(&plain));
}

#[test]
fn zero_rate_leaves_w1_bitwise_unchanged() {
    let inst = TinyNeural::new(7).unwrap();
    let p = inst.problem();
    let (w1, _) = step_w1(&p, &inst.vars.a, &inst.vars.w1, 0.0, &mut PlainSteps).unwrap();
    assert!(w1.bit_eq(&inst.vars.w1));
}

#[test]
fn small_w1_step_does_not_increase_the_batch_loss() {
    let inst = TinyNeural::new(8).unwrap();
    let p = inst.problem();
    let before = p.train_loss(&inst.vars.a, &inst.vars.w1).unwrap().value;
    let (w1, _) = step_w1(&p, &inst.vars.a, &inst.vars.w1, 1e-3, &mut PlainSteps).unwrap();
    let after = p.train_loss(&inst.vars.a, &w1).unwrap().value;
    assert!(after <= before, "{after} > {before}");
}

/// One scalar weight: `L_tr = (w − 1)²` and `S = 1.5·w` per unit coefficient.
struct Scalar;

fn scalar(v: f64) -> WeightSet {
    [("w".to_string(), Tensor::from_vec(vec![v]))]
        .into_iter()
        .collect()
}

fn w_of(ws: &WeightSet) -> f64 {
    ws.require("w").unwrap().data()[0]
}

impl TrilevelProblem for Scalar {
    fn num_classes(&self) -> usize {
        1
    }
    fn train_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad> {
        let x = w_of(w);
        Ok(LossGrad {
            value: (x - 1.0).powi(2),
            grad_a: a.zeros_like(),
            grad_w: scalar(2.0 * (x - 1.0)),
        })
    }
    fn val_loss(&self, a: &WeightSet, w: &WeightSet) -> Result<LossGrad> {
        self.train_loss(a, w)
    }
    fn class_losses(&self, a: &WeightSet, w1: &WeightSet, _: bool) -> Result<Vec<LossGrad>> {
        Ok(vec![self.train_loss(a, w1)?])
    }
    fn synthetic_loss(
        &self,
        a: &WeightSet,
        w2: &WeightSet,
        g: &WeightSet,
        coeffs: &[f64],
    ) -> Result<SyntheticEval> {
        Ok(SyntheticEval {
            value: coeffs[0] * 1.5 * w_of(w2),
            grad_a: a.zeros_like(),
            grad_w: scalar(coeffs[0] * 1.5),
            grad_g: g.zeros_like(),
        })
    }
    fn adversarial(&self, a: &WeightSet, g: &WeightSet, h: &WeightSet) -> Result<AdversarialEval> {
        let zero = |w: &WeightSet| LossGrad {
            value: 0.0,
            grad_a: a.zeros_like(),
            grad_w: w.zeros_like(),
        };
        Ok(AdversarialEval {
            generator: zero(g),
            discriminator: zero(h),
        })
    }
}

#[test]
fn scalar_w1_step() {
    let (w, _) = step_w1(&Scalar, &scalar(0.0), &scalar(0.0), 0.1, &mut PlainSteps).unwrap();
    assert!((w_of(&w) - 0.2).abs() < 1e-15);
}

#[test]
fn scalar_w2_step_adds_real_and_synthetic_gradients() {
    // real gradient 2.0 at w = 2, weighted synthetic gradient 1.5
    let cfg = WeightingConfig::default();
    let (w, _, _) = step_w2(
        &Scalar,
        &scalar(0.0),
        &scalar(2.0),
        &scalar(0.0),
        &[1.0],
        &cfg,
        0.1,
        &mut PlainSteps,
    )
    .unwrap();
    assert!((w_of(&w) - 2.0 + 0.35).abs() < 1e-15);
}

#[test]
fn arch_step_edge_cases() {
    let a0 = scalar(0.8);
    let mut a = a0.clone();
    let mut opt = Adam::new(AdamConfig::default());
    step_arch(&mut opt, &mut a, &scalar(3.0), 0.0).unwrap();
    assert!(a.bit_eq(&a0));

    let mut a = a0.clone();
    let mut opt = Adam::new(AdamConfig::default());
    step_arch(&mut opt, &mut a, &scalar(0.0), 0.1).unwrap();
    let expect = 0.8 * (1.0 - 0.1 * AdamConfig::default().weight_decay);
    assert!((w_of(&a) - expect).abs() < 1e-15);

    let mut bad = GradientMap::new();
    bad.insert("other", Tensor::from_vec(vec![1.0]));
    assert!(step_arch(&mut opt, &mut a, &bad, 0.1).is_err());
}

#[test]
fn arch_steps_converge_on_a_convex_quadratic() {
    let target = [0.3, -1.2, 2.0];
    let mut a: WeightSet = [("a".to_string(), Tensor::from_vec(vec![0.0; 3]))]
        .into_iter()
        .collect();
    let mut opt = Adam::new(AdamConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let steps = 4000;
    for k in 0..steps {
        let x = a.require("a").unwrap().data().to_vec();
        let g: GradientMap = [(
            "a".to_string(),
            Tensor::from_vec(x.iter().zip(&target).map(|(x, t)| x - t).collect()),
        )]
        .into_iter()
        .collect();
        let lr = 0.05 * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / steps as f64).cos());
        step_arch(&mut opt, &mut a, &g, lr).unwrap();
    }
    for (x, t) in a.require("a").unwrap().data().iter().zip(&target) {
        assert!((x - t).abs() <= 1e-4, "{x} vs {t}");
    }
}

#[test]
fn terms_scale_linearly_with_their_leading_step() {
    let q = QuadraticTrilevelProblem::random(
        QuadraticDims {
            a: 3,
            w: 5,
            g: 4,
            h: 2,
            classes: 2,
        },
        21,
    )
    .unwrap();
    let cfg = WeightingConfig::default();
    let v = q.stationary_point(&q.random_point(22), &cfg).unwrap();
    let base = rates(0.1, 0.1, 0.1);
    let hg = |r: &Rates| {
        let un = unroll(&q, &v, r, &cfg, true, &mut PlainSteps).unwrap();
        hypergradient(&q, &v, &un, r, &cfg, &second(1.0)).unwrap()
    };
    let full = hg(&base);
    let halved_w2 = hg(&Rates { w2: 0.05, ..base });
    let halved_w1 = hg(&Rates { w1: 0.05, ..base });
    let halved_g = hg(&Rates { g: 0.05, ..base });
    let check = |h: &lfm_core::trilevel::Hypergradient, t: Term| {
        let want = full.term(t).scale(0.5);
        assert!(want.norm() > 0.0, "{} vanished", t.name());
        let err = h.term(t).sub(&want).unwrap().norm() / want.norm();
        assert!(err <= 1e-9, "{}: {err}", t.name());
    };
    for t in [
        Term::TrainMixed,
        Term::ClassWeight,
        Term::SyntheticMixed,
        Term::W1Path,
        Term::GeneratorPath,
    ] {
        check(&halved_w2, t);
    }
    check(&halved_w1, Term::W1Path);
    check(&halved_g, Term::GeneratorPath);
}

#[test]
fn weighted_objective_is_affine_in_each_class_loss() {
    let spec = SupernetSpec {
        cells: 1,
        nodes: 2,
        channels: 3,
        num_classes: 3,
        input: ImageShape {
            height: 4,
            width: 4,
            channels: 1,
        },
        ..Default::default()
    };
    let (net, w) = build_supernet(&spec, 1).unwrap();
    let arch = spec.init_arch(2);
    let real = Tensor::new(
        vec![3, 1, 4, 4],
        (0..48).map(|i| ((i as f64) * 0.37).sin()).collect(),
    )
    .unwrap();
    let synth = SyntheticBatch {
        images: Tensor::new(
            vec![4, 1, 4, 4],
            (0..64).map(|i| ((i as f64) * 0.53).cos()).collect(),
        )
        .unwrap(),
        labels: vec![0, 1, 2, 1],
        noise: Tensor::zeros(&[4, 1]),
    };
    let cfg = WeightingConfig::default();
    let total = |l: Vec<f64>| {
        let l = ClassLossVector {
            counts: vec![1; l.len()],
            values: l,
        };
        weighted_objective(&net, &w, &arch, (&real, &[0, 1, 2]), &synth, &l, &cfg)
            .unwrap()
            .total
    };
    let base = vec![0.4, 1.1, 0.7];
    let zero = total(vec![0.0; 3]);
    for c in 0..3 {
        let mut unit = vec![0.0; 3];
        unit[c] = 1.0;
        let coefficient = total(unit) - zero;
        let mut doubled = base.clone();
        doubled[c] *= 2.0;
        let delta = total(doubled) - total(base.clone());
        assert!(
            (delta - base[c] * coefficient).abs() <= 1e-9,
            "class {c}: {delta} vs {}",
            base[c] * coefficient
        );
    }

    let lambda0 = WeightingConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let l = ClassLossVector {
        counts: vec![1; 3],
        values: base,
    };
    let off =
        weighted_objective(&net, &w, &arch, (&real, &[0, 1, 2]), &synth, &l, &lambda0).unwrap();
    let none = weighted_objective(
        &net,
        &w,
        &arch,
        (&real, &[0, 1, 2]),
        &synth,
        &ClassLossVector::uniform(0.0, 3),
        &cfg,
    )
    .unwrap();
    assert!(off.grad.bit_eq(&none.grad));
    assert_eq!(off.synthetic, 0.0);
}
