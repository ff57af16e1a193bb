//! The oracle suite behind `lfmcw verify`.

use std::fmt::Write as _;
use std::time::Instant;

use lfm_autodiff::check::primitive_suite;
use lfm_core::optim::Rates;
use lfm_core::oracle::{
    analytic_quadratic_hypergrad, relative_error, unrolled_hypergrad_fd, QuadraticDims,
    QuadraticTrilevelProblem, TinyNeural,
};
use lfm_core::reweight::{ClassLossVector, WeightingConfig};
use lfm_core::trilevel::{
    hypergradient, step_w1, step_w2, unroll, HypergradMode, HypergradOptions, PlainSteps, Term,
    TrilevelProblem, Variables,
};

use crate::error::Result;

pub const QUADRATIC_INSTANCES: u64 = 100;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const QUADRATIC_TOL: f64 = 1e-6;
pub const NEURAL_TOL: f64 = 1e-3;
pub const COLLAPSE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub rows: Vec<CheckRow>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CheckRow> {
        self.rows.iter().filter(|r| !r.passed).collect()
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.rows.push(CheckRow {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!("{:width$}  result  detail\n", "check");
        for r in &self.rows {
            let mark = if r.passed { "PASS" } else { "FAIL" };
            writeln!(s, "{:width$}  {mark}    {}", r.name, r.detail).unwrap();
        }
        let failed = self.failures().len();
        writeln!(
            s,
            "{} checks, {failed} failed, {:.1} s",
            self.rows.len(),
            self.seconds
        )
        .unwrap();
        s
    }
}

fn rates(xi: f64) -> Rates {
    Rates {
        w1: xi,
        w2: xi,
        g: xi,
        h: 0.05,
        a: 0.0,
    }
}

/// Deterministic dimensions in `1..=10` with 2 to 4 classes.
pub fn quadratic_dims(seed: u64) -> QuadraticDims {
    let d = |k: u64| 1 + (seed.wrapping_mul(2_654_435_761).wrapping_add(k * 97) % 10) as usize;
    QuadraticDims {
        a: d(1),
        w: d(2),
        g: d(3),
        h: d(4),
        classes: 2 + (seed % 3) as usize,
    }
}

fn opts(mode: HypergradMode, fault: Option<Term>) -> HypergradOptions {
    HypergradOptions { mode, fault }
}

fn check<P: TrilevelProblem>(
    p: &P,
    v: &Variables,
    r: &Rates,
    cfg: &WeightingConfig,
    o: &HypergradOptions,
) -> Result<lfm_core::trilevel::Hypergradient> {
    let un = unroll(
        p,
        v,
        r,
        cfg,
        o.mode.order == lfm_core::trilevel::Order::Second,
        &mut PlainSteps,
    )?;
    Ok(hypergradient(p, v, &un, r, cfg, o)?)
}

fn primitives(report: &mut VerifyReport) -> Result<()> {
    let checks = primitive_suite(0)?;
    let mut ops: Vec<&str> = Vec::new();
    for c in &checks {
        if !ops.contains(&c.op) {
            ops.push(c.op);
        }
    }
    for op in ops {
        let mine: Vec<_> = checks.iter().filter(|c| c.op == op).collect();
        let worst = mine.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        let ok = worst <= PRIMITIVE_TOL && mine.len() >= 3 && worst.is_finite();
        report.push(
            format!("autodiff/{op}"),
            ok,
            format!("{} shapes, worst rel err {worst:.2e}", mine.len()),
        );
    }
    Ok(())
}

/// Second-order hypergradient against the closed form, term by term.
fn quadratic_terms(report: &mut VerifyReport, fault: Option<Term>) -> Result<()> {
    let cfg = WeightingConfig {
        lambda: 0.5,
        ..Default::default()
    };
    let r = rates(0.1);
    let o = opts(HypergradMode::second_order(1.0), fault);
    let mut worst_total: f64 = 0.0;
    let mut worst = [0.0f64; Term::ALL.len()];
    for seed in 0..QUADRATIC_INSTANCES {
        let p = QuadraticTrilevelProblem::random(quadratic_dims(seed), seed)?;
        let v = p.random_point(seed + 1000);
        let hg = check(&p, &v, &r, &cfg, &o)?;
        let exact = analytic_quadratic_hypergrad(&p, &v, &r, &cfg)?;
        let scale = exact.total.norm().max(1e-12);
        worst_total = worst_total.max(relative_error(&hg.total, &exact.total, 1e-12)?);
        for (k, t) in Term::ALL.into_iter().enumerate() {
            let e = hg.term(t).sub(exact.term(t))?.norm() / scale;
            worst[k] = worst[k].max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    for (k, t) in Term::ALL.into_iter().enumerate() {
        report.push(
            format!("quadratic/term/{}", t.name()),
            worst[k] <= QUADRATIC_TOL,
            format!(
                "{QUADRATIC_INSTANCES} instances, worst rel err {:.2e}",
                worst[k]
            ),
        );
    }
    report.push(
        "quadratic/total",
        worst_total <= QUADRATIC_TOL,
        format!("{QUADRATIC_INSTANCES} instances, worst rel err {worst_total:.2e}"),
    );
    Ok(())
}

/// The closed form against brute-force differences of the unrolled loss.
fn quadratic_unrolled(report: &mut VerifyReport) -> Result<()> {
    let cfg = WeightingConfig {
        lambda: 0.5,
        ..Default::default()
    };
    let r = rates(0.1);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let p = QuadraticTrilevelProblem::random(quadratic_dims(seed), seed)?;
        let v = p.random_point(seed + 7);
        let exact = analytic_quadratic_hypergrad(&p, &v, &r, &cfg)?;
        let fd = unrolled_hypergrad_fd(&p, &v, &r, &cfg, 1e-5)?;
        worst = worst.max(relative_error(&fd, &exact.total, 1e-12)?);
    }
    report.push(
        "quadratic/analytic_vs_unrolled_fd",
        worst <= QUADRATIC_TOL,
        format!("20 instances, worst rel err {worst:.2e}"),
    );
    Ok(())
}

fn neural_unrolled(report: &mut VerifyReport, fault: Option<Term>) -> Result<()> {
    let inst = TinyNeural::new(5)?;
    let p = inst.problem();
    let r = rates(0.1);
    let hg = check(
        &p,
        &inst.vars,
        &r,
        &inst.weighting,
        &opts(HypergradMode::second_order(1e-4), fault),
    )?;
    let fd = unrolled_hypergrad_fd(&p, &inst.vars, &r, &inst.weighting, 1e-5)?;
    let err = relative_error(&hg.total, &fd, 1e-12)?;
    report.push(
        "neural/second_order_vs_unrolled_fd",
        err <= NEURAL_TOL && inst.max_group_size() <= 200,
        format!(
            "largest group {} params, rel err {err:.2e}",
            inst.max_group_size()
        ),
    );
    Ok(())
}

const LAMBDA_TERMS: [Term; 4] = [
    Term::ClassWeight,
    Term::SyntheticMixed,
    Term::W1Path,
    Term::GeneratorPath,
];

/// λ = 0: the synthetic terms vanish exactly, the result ignores the
/// generator and discriminator entirely, and the `W₂` step is a plain one.
fn lambda_zero(report: &mut VerifyReport, fault: Option<Term>) -> Result<()> {
    let cfg = WeightingConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let r = rates(0.1);
    let o = opts(HypergradMode::second_order(1.0), fault);
    let mut nonzero = Vec::new();
    for seed in 0..20 {
        let p = QuadraticTrilevelProblem::random(quadratic_dims(seed), seed)?;
        let v = p.random_point(seed + 3);
        let hg = check(&p, &v, &r, &cfg, &o)?;
        let exact = analytic_quadratic_hypergrad(&p, &v, &r, &cfg)?;
        for t in LAMBDA_TERMS {
            if hg.term(t).norm() != 0.0 || exact.term(t).norm() != 0.0 {
                nonzero.push(format!("{} (seed {seed})", t.name()));
            }
        }
    }
    let inst = TinyNeural::new(2)?;
    let ncfg = WeightingConfig {
        lambda: 0.0,
        ..inst.weighting.clone()
    };
    let p = inst.problem();
    let no = opts(HypergradMode::second_order(1e-4), fault);
    let hg = check(&p, &inst.vars, &r, &ncfg, &no)?;
    for t in LAMBDA_TERMS {
        if hg.term(t).norm() != 0.0 {
            nonzero.push(format!("{} (neural)", t.name()));
        }
    }
    report.push(
        "lambda0/terms_vanish",
        nonzero.is_empty(),
        if nonzero.is_empty() {
            "exact zeros on 20 quadratic and 1 neural instance".into()
        } else {
            format!("non-zero: {}", nonzero.join(", "))
        },
    );

    // Scramble the generator and discriminator: nothing may change.
    let mut scrambled = inst.vars.clone();
    for w in [&mut scrambled.g, &mut scrambled.h] {
        for (_, t) in w.iter_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = (*x * 3.0 + 0.1 * (i % 7) as f64).sin();
            }
        }
    }
    let other = check(&p, &scrambled, &r, &ncfg, &no)?;
    let same = other.total.bit_eq(&hg.total);
    report.push(
        "lambda0/gan_independent",
        same,
        if same {
            "hypergradient bitwise unchanged under new G and H"
        } else {
            "hypergradient depends on G or H"
        },
    );

    let coeffs = ncfg.coefficients(&ClassLossVector::uniform(0.7, p.num_classes()));
    let v = &inst.vars;
    let (w2, _, synth) = step_w2(&p, &v.a, &v.w2, &v.g, &coeffs, &ncfg, 0.1, &mut PlainSteps)?;
    let (plain, _) = step_w1(&p, &v.a, &v.w2, 0.1, &mut PlainSteps)?;
    let ok = synth.is_none() && w2.bit_eq(&plain);
    report.push(
        "lambda0/w2_step_is_plain",
        ok,
        if ok {
            "bitwise equal to a plain training step"
        } else {
            "differs from a plain training step"
        },
    );
    Ok(())
}

/// Zero inner step sizes: second order must equal first order.
fn collapse(report: &mut VerifyReport, fault: Option<Term>) -> Result<()> {
    let r = rates(0.0);
    let inst = TinyNeural::new(3)?;
    let p = inst.problem();
    let second = check(
        &p,
        &inst.vars,
        &r,
        &inst.weighting,
        &opts(HypergradMode::second_order(1e-4), fault),
    )?;
    let first = check(
        &p,
        &inst.vars,
        &r,
        &inst.weighting,
        &opts(HypergradMode::first_order(), None),
    )?;
    let mut worst = second.total.sub(&first.total)?.norm();

    let cfg = WeightingConfig::default();
    for seed in 0..20 {
        let q = QuadraticTrilevelProblem::random(quadratic_dims(seed), seed)?;
        let v = q.random_point(seed + 5);
        let s = check(
            &q,
            &v,
            &r,
            &cfg,
            &opts(HypergradMode::second_order(1.0), fault),
        )?;
        let f = check(&q, &v, &r, &cfg, &opts(HypergradMode::first_order(), None))?;
        worst = worst.max(s.total.sub(&f.total)?.norm());
    }
    report.push(
        "collapse/zero_steps_first_order",
        worst <= COLLAPSE_TOL,
        format!("max |second - first| {worst:.2e}"),
    );
    Ok(())
}

/// Runs every check. `fault` negates one hypergradient term in the code
/// under test so that the suite's ability to catch it can be exercised.
pub fn cmd_verify(fault: Option<Term>) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut report = VerifyReport::default();
    primitives(&mut report)?;
    quadratic_terms(&mut report, fault)?;
    quadratic_unrolled(&mut report)?;
    neural_unrolled(&mut report, fault)?;
    lambda_zero(&mut report, fault)?;
    collapse(&mut report, fault)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn parse_term(s: &str) -> Option<Term> {
    Term::ALL.into_iter().find(|t| t.name() == s)
}
