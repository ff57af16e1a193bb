//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lfm_autodiff::check::{primitive_suite, FD_STEP};
use lfm_autodiff::Tensor;
use lfm_core::cig::SyntheticBatch;
use lfm_core::data::{split, synth_blobs, SplitSpec};
use lfm_core::optim::Rates;
use lfm_core::oracle::{
    analytic_quadratic_hypergrad, relative_error, unrolled_hypergrad_fd, QuadraticTrilevelProblem,
    TinyNeural,
};
use lfm_core::reweight::{weighted_objective, ClassLossVector, WeightingConfig};
use lfm_core::search::Search;
use lfm_core::search_space::{
    build_supernet, derive_cell, ArchParams, ImageShape, OpSet, SupernetSpec,
};
use lfm_core::trilevel::{
    hypergradient, step_w1, step_w2, unroll, HypergradMode, HypergradOptions, PlainSteps, Term,
    TrilevelProblem,
};
use lfm_harness::ablation::{cmd_ablate, Study};
use lfm_harness::commands::search_and_evaluate;
use lfm_harness::config::ExperimentConfig;
use lfm_harness::verify::quadratic_dims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, passed: bool, detail: &str) {
    let mark = if passed { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} {mark} {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
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

fn second(eps: f64) -> HypergradOptions {
    HypergradOptions {
        mode: HypergradMode::second_order(eps),
        fault: None,
    }
}

fn first() -> HypergradOptions {
    HypergradOptions {
        mode: HypergradMode::first_order(),
        fault: None,
    }
}

fn config(fixture: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(fixture).unwrap();
    cfg.output = out.to_path_buf();
    cfg
}

#[test]
fn autodiff_exactness() {
    let start = Instant::now();
    let checks = primitive_suite(11).unwrap();
    let mut ops: Vec<&str> = Vec::new();
    for c in &checks {
        if !ops.contains(&c.op) {
            ops.push(c.op);
        }
    }
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let min_shapes = ops
        .iter()
        .map(|op| checks.iter().filter(|c| c.op == *op).count())
        .min()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-4 && min_shapes >= 3 && secs < 30.0 && FD_STEP == 1e-5;
    report(
        1,
        "autodiff exactness",
        ok,
        &format!(
            "{} ops, >= {min_shapes} shapes each, worst rel err {worst:.2e}, {secs:.1} s",
            ops.len()
        ),
    );
}

#[test]
fn quadratic_hypergradient_agreement() {
    let start = Instant::now();
    let cfg = WeightingConfig {
        lambda: 0.5,
        ..Default::default()
    };
    let r = rates(0.1);
    let mut worst: f64 = 0.0;
    let n = 120;
    for seed in 0..n {
        let dims = quadratic_dims(seed);
        assert!(dims.a.max(dims.w).max(dims.g).max(dims.h) <= 10);
        let p = QuadraticTrilevelProblem::random(dims, seed).unwrap();
        let v = p.random_point(seed + 500);
        let un = unroll(&p, &v, &r, &cfg, true, &mut PlainSteps).unwrap();
        let hg = hypergradient(&p, &v, &un, &r, &cfg, &second(1.0)).unwrap();
        let exact = analytic_quadratic_hypergrad(&p, &v, &r, &cfg).unwrap();
        worst = worst.max(relative_error(&hg.total, &exact.total, 1e-12).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "quadratic hypergradient agreement",
        worst <= 1e-6 && secs < 60.0,
        &format!("{n} instances, worst rel err {worst:.2e}, {secs:.1} s"),
    );
}

#[test]
fn unrolled_neural_agreement() {
    let start = Instant::now();
    let inst = TinyNeural::new(21).unwrap();
    let p = inst.problem();
    let r = rates(0.1);
    let un = unroll(&p, &inst.vars, &r, &inst.weighting, true, &mut PlainSteps).unwrap();
    let hg = hypergradient(&p, &inst.vars, &un, &r, &inst.weighting, &second(1e-4)).unwrap();
    let fd = unrolled_hypergrad_fd(&p, &inst.vars, &r, &inst.weighting, 1e-5).unwrap();
    let err = relative_error(&hg.total, &fd, 1e-12).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let size = inst.max_group_size();
    report(
        3,
        "unrolled neural agreement",
        err <= 1e-3 && size <= 200 && secs < 120.0,
        &format!("largest group {size} params, rel err {err:.2e}, {secs:.1} s"),
    );
}

#[test]
fn degeneracy_laws() {
    let silenced = [
        Term::ClassWeight,
        Term::SyntheticMixed,
        Term::W1Path,
        Term::GeneratorPath,
    ];
    let inst = TinyNeural::new(22).unwrap();
    let p = inst.problem();
    let v = &inst.vars;
    let zero = WeightingConfig {
        lambda: 0.0,
        ..inst.weighting.clone()
    };
    let r = rates(0.1);

    let mut vanish = true;
    let un = unroll(&p, v, &r, &zero, true, &mut PlainSteps).unwrap();
    let hg = hypergradient(&p, v, &un, &r, &zero, &second(1e-4)).unwrap();
    vanish &= silenced.iter().all(|&t| hg.term(t).norm() == 0.0);
    for seed in 0..20 {
        let q = QuadraticTrilevelProblem::random(quadratic_dims(seed), seed).unwrap();
        let qv = q.random_point(seed + 9);
        let qcfg = WeightingConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let un = unroll(&q, &qv, &r, &qcfg, true, &mut PlainSteps).unwrap();
        let hg = hypergradient(&q, &qv, &un, &r, &qcfg, &second(1.0)).unwrap();
        let exact = analytic_quadratic_hypergrad(&q, &qv, &r, &qcfg).unwrap();
        vanish &= silenced
            .iter()
            .all(|&t| hg.term(t).norm() == 0.0 && exact.term(t).norm() == 0.0);
    }

    let still = rates(0.0);
    let un = unroll(&p, v, &still, &inst.weighting, true, &mut PlainSteps).unwrap();
    let full = hypergradient(&p, v, &un, &still, &inst.weighting, &second(1e-4)).unwrap();
    let direct = hypergradient(&p, v, &un, &still, &inst.weighting, &first()).unwrap();
    let collapse = full.total.sub(&direct.total).unwrap().norm();

    let coeffs = zero.coefficients(&ClassLossVector::uniform(0.9, p.num_classes()));
    let (w2, _, _) = step_w2(&p, &v.a, &v.w2, &v.g, &coeffs, &zero, 0.1, &mut PlainSteps).unwrap();
    let (plain, _) = step_w1(&p, &v.a, &v.w2, 0.1, &mut PlainSteps).unwrap();
    let bitwise = w2.bit_eq(&plain);

    report(
        4,
        "degeneracy laws",
        vanish && collapse <= 1e-9 && bitwise,
        &format!("lambda=0 terms exactly zero: {vanish}; zero-step collapse {collapse:.1e}; W2 step bitwise plain: {bitwise}"),
    );
}

#[test]
fn weighting_linearity() {
    let spec = SupernetSpec {
        cells: 1,
        nodes: 2,
        channels: 3,
        num_classes: 4,
        input: ImageShape {
            height: 4,
            width: 4,
            channels: 1,
        },
        ..Default::default()
    };
    let (net, w) = build_supernet(&spec, 3).unwrap();
    let arch = spec.init_arch(4);
    let real = Tensor::new(
        vec![4, 1, 4, 4],
        (0..64).map(|i| (i as f64 * 0.29).sin()).collect(),
    )
    .unwrap();
    let synth = SyntheticBatch {
        images: Tensor::new(
            vec![6, 1, 4, 4],
            (0..96).map(|i| (i as f64 * 0.41).cos()).collect(),
        )
        .unwrap(),
        labels: vec![0, 1, 2, 3, 1, 2],
        noise: Tensor::zeros(&[6, 1]),
    };
    let mut worst: f64 = 0.0;
    for cfg in [
        WeightingConfig::default(),
        WeightingConfig {
            lambda: 2.5,
            ..Default::default()
        },
        WeightingConfig {
            synthetic_only: true,
            ..Default::default()
        },
    ] {
        let total = |values: Vec<f64>| {
            let l = ClassLossVector {
                counts: vec![1; values.len()],
                values,
            };
            weighted_objective(&net, &w, &arch, (&real, &[0, 1, 2, 3]), &synth, &l, &cfg)
                .unwrap()
                .total
        };
        let base = vec![0.3, 1.7, 0.8, 1.2];
        let at_zero = total(vec![0.0; 4]);
        for c in 0..4 {
            let mut unit = vec![0.0; 4];
            unit[c] = 1.0;
            let coefficient = total(unit) - at_zero;
            let mut doubled = base.clone();
            doubled[c] *= 2.0;
            let delta = total(doubled) - total(base.clone());
            worst = worst.max((delta - base[c] * coefficient).abs());
        }
    }
    report(
        5,
        "weighting linearity",
        worst <= 1e-9,
        &format!(
            "doubling l_c moves the loss by l_c times its coefficient, worst deviation {worst:.1e}"
        ),
    );
}

#[test]
fn softmax_and_architecture_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(include_str!("fixtures/tiny.toml"), dir.path());
    cfg.search.iterations = 12;
    cfg.rates.a = 0.05;
    cfg.supernet.reduction_cells = true;
    cfg.supernet.cells = 3;
    let scfg = cfg.search_config().unwrap();
    let d = &cfg.dataset;
    let blobs = synth_blobs(d.classes, d.per_class, (d.height, d.width), d.separation, 0).unwrap();
    let s = split(&blobs.data, &SplitSpec::default()).unwrap();
    let (train, val) = (blobs.data.subset(&s.train), blobs.data.subset(&s.val));
    let mut search = Search::new(scfg, &train, &val).unwrap();
    let mut worst_row: f64 = 0.0;
    while !search.is_done() {
        search.step().unwrap();
        let arch = &search.state.arch;
        for probs in std::iter::once(arch.softmax_normal()).chain(arch.softmax_reduce()) {
            let cols = probs.shape()[1];
            for row in probs.data().chunks(cols) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let instances = 1000;
    for seed in 0..instances {
        let nodes = 1 + (seed % 5) as usize;
        let arch = ArchParams::random(nodes, OpSet::default(), seed % 2 == 1, 3.0, seed + 77);
        let mut shift = |t: &Tensor| {
            let cols = t.shape()[1];
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(cols) {
                let c: f64 = rng.random_range(-100.0..100.0);
                row.iter_mut().for_each(|x| *x += c);
            }
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let normal = shift(arch.normal());
        let reduce = arch.reduce().map(&mut shift);
        let shifted = ArchParams::from_parts(nodes, OpSet::default(), normal, reduce).unwrap();
        if derive_cell(&arch) != derive_cell(&shifted) {
            mismatches += 1;
        }
    }
    report(
        6,
        "softmax and architecture invariants",
        worst_row <= 1e-6 && mismatches == 0,
        &format!("worst row-sum error {worst_row:.1e} over 12 steps; {mismatches}/{instances} shifted instances changed the cell"),
    );
}

#[test]
fn desk_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = config(include_str!("fixtures/desk.toml"), &dir.path().join(name));
        let start = Instant::now();
        let r = search_and_evaluate(&cfg).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let genotype = std::fs::read(r.genotype_path.as_ref().unwrap()).unwrap();
        (r, secs, genotype)
    };
    let (a, secs_a, geno_a) = run("first");
    let (_, secs_b, geno_b) = run("second");
    let acc = a.evaluation.as_ref().unwrap().accuracy;
    let same = geno_a == geno_b;
    let slowest = secs_a.max(secs_b);
    report(
        7,
        "desk run end to end",
        acc >= 0.90 && slowest <= 600.0 && same,
        &format!(
            "held-out accuracy {acc:.3}, supernet val accuracy {:.3}, wall clock {secs_a:.0} s / {secs_b:.0} s, genotype identical on rerun: {same}",
            a.supernet_val_accuracy.unwrap()
        ),
    );
}

fn lambda_sweep_config(out: &Path) -> ExperimentConfig {
    let mut cfg = config(include_str!("fixtures/tiny.toml"), out);
    cfg.search.iterations = 12;
    cfg.ablation.lambdas = vec![0.0, 0.5, 1.0, 2.0, 3.0];
    cfg.ablation.seeds = 3;
    cfg.evaluation.epochs = 3;
    cfg
}

#[test]
fn lambda_sweep_curve() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_ablate(
        &lambda_sweep_config(&dir.path().join("a")),
        Study::LambdaSweep,
    )
    .unwrap();
    let b = cmd_ablate(
        &lambda_sweep_config(&dir.path().join("b")),
        Study::LambdaSweep,
    )
    .unwrap();
    let csv_a = std::fs::read(&a.summary_path).unwrap();
    let csv_b = std::fs::read(&b.summary_path).unwrap();
    let svg_a = std::fs::read(&a.plot_path).unwrap();
    let svg_b = std::fs::read(&b.plot_path).unwrap();
    let runs_same = std::fs::read(&a.runs_path).unwrap() == std::fs::read(&b.runs_path).unwrap();
    let lambdas: Vec<f64> = a.rows.iter().map(|r| r.x).collect();
    let complete = a.rows.iter().all(|r| {
        r.runs == 3 && r.failed == 0 && r.mean_error.is_finite() && r.std_error.is_finite()
    });
    let curve: Vec<String> = a
        .rows
        .iter()
        .map(|r| format!("{}:{:.3}±{:.3}", r.x, r.mean_error, r.std_error))
        .collect();
    report(
        8,
        "lambda sweep curve",
        lambdas == [0.0, 0.5, 1.0, 2.0, 3.0]
            && complete
            && csv_a == csv_b
            && svg_a == svg_b
            && runs_same,
        &format!(
            "error by lambda {}; rerun byte-identical: {}",
            curve.join(" "),
            csv_a == csv_b && svg_a == svg_b && runs_same
        ),
    );
}

#[test]
fn synthetic_only_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(include_str!("fixtures/tiny.toml"), dir.path());
    cfg.search.iterations = 12;
    cfg.ablation.seeds = 2;
    let s = cmd_ablate(&cfg, Study::SyntheticOnly).unwrap();
    let labels: Vec<&str> = s.rows.iter().map(|r| r.point.as_str()).collect();
    let complete = s
        .rows
        .iter()
        .all(|r| r.failed == 0 && r.mean_error.is_finite());
    let csv = std::fs::read_to_string(&s.summary_path).unwrap();
    let paired = csv.contains("synthetic_plus_training,") && csv.contains("synthetic_only,");
    let detail: Vec<String> = s
        .rows
        .iter()
        .map(|r| format!("{} error {:.3}±{:.3}", r.point, r.mean_error, r.std_error))
        .collect();
    report(
        9,
        "synthetic-only mode side by side",
        labels == ["synthetic_plus_training", "synthetic_only"] && complete && paired,
        &detail.join("; "),
    );
}
