//! Finite-difference reference gradients for checking the tape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Bound, Conv2dOpts, Graph, Var};
use crate::map::{GradientMap, WeightSet};
use crate::tensor::Tensor;

/// Step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn numerical_gradient<F>(mut f: F, params: &WeightSet, h: f64) -> Result<GradientMap>
where
    F: FnMut(&WeightSet) -> Result<f64>,
{
    let mut flat = params.flatten();
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        probe.assign_flat(&flat)?;
        let up = f(&probe)?;
        flat[i] = orig - h;
        probe.assign_flat(&flat)?;
        let down = f(&probe)?;
        flat[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    let mut out = params.zeros_like();
    out.assign_flat(&grad)?;
    Ok(out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)` over flattened values.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Relative error between two maps with identical keys.
pub fn map_relative_error(a: &GradientMap, b: &GradientMap) -> f64 {
    relative_error(&a.flatten(), &b.flatten(), 1e-12)
}

/// Worst per-coordinate relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_elementwise_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of one primitive gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub rel_error: f64,
}

type Build = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var>>;

struct Case {
    op: &'static str,
    params: WeightSet,
    build: Build,
}

fn gauss_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Values bounded away from zero (kinks of relu sit at 0).
fn off_zero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = gauss_tensor(rng, shape);
    t.map(|v| if v >= 0.0 { 0.1 + v } else { v - 0.1 })
}

/// Pairwise-distinct values so pooling argmaxes are stable under the FD step.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape product matches")
}

fn single(name: &str, t: Tensor) -> WeightSet {
    [(name.to_string(), t)].into_iter().collect()
}

fn pair(a: Tensor, b: Tensor) -> WeightSet {
    [("a".to_string(), a), ("b".to_string(), b)]
        .into_iter()
        .collect()
}

fn unary(op: &'static str, t: Tensor, f: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    Case {
        op,
        params: single("a", t),
        build: Box::new(move |g, p| f(g, p.get("a")?)),
    }
}

fn binary(
    op: &'static str,
    a: Tensor,
    b: Tensor,
    f: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Case {
    Case {
        op,
        params: pair(a, b),
        build: Box::new(move |g, p| f(g, p.get("a")?, p.get("b")?)),
    }
}

fn conv_case(op: &'static str, x: Tensor, w: Tensor, opts: Conv2dOpts) -> Case {
    Case {
        op,
        params: pair(x, w),
        build: Box::new(move |g, p| g.conv2d(p.get("a")?, p.get("b")?, opts)),
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    for (a, b) in [([2, 3], [3, 4]), ([1, 5], [5, 1]), ([4, 2], [2, 3])] {
        cases.push(binary(
            "matmul",
            gauss_tensor(rng, &a),
            gauss_tensor(rng, &b),
            Graph::matmul,
        ));
    }
    let elementwise: [&[usize]; 3] = [&[3], &[2, 3], &[2, 2, 2]];
    for s in elementwise {
        cases.push(binary(
            "add",
            gauss_tensor(rng, s),
            gauss_tensor(rng, s),
            Graph::add,
        ));
        cases.push(binary(
            "sub",
            gauss_tensor(rng, s),
            gauss_tensor(rng, s),
            Graph::sub,
        ));
        cases.push(binary(
            "mul",
            gauss_tensor(rng, s),
            gauss_tensor(rng, s),
            Graph::mul,
        ));
        cases.push(Case {
            op: "scale",
            params: single("a", gauss_tensor(rng, s)),
            build: Box::new(|g, p| g.scale(p.get("a")?, -1.7)),
        });
        cases.push(unary("relu", off_zero_tensor(rng, s), Graph::relu));
        cases.push(unary(
            "sigmoid",
            gauss_tensor(rng, s).scale(3.0),
            Graph::sigmoid,
        ));
        cases.push(unary("tanh", gauss_tensor(rng, s).scale(2.0), Graph::tanh));
        cases.push(unary(
            "log_sigmoid",
            gauss_tensor(rng, s).scale(4.0),
            Graph::log_sigmoid,
        ));
        cases.push(unary("sum", gauss_tensor(rng, s), Graph::sum));
        cases.push(unary("mean", gauss_tensor(rng, s), Graph::mean));
    }
    let channel: [&[usize]; 3] = [&[2, 3], &[2, 3, 2, 2], &[1, 4, 3, 3]];
    for s in channel {
        let c = [s[1]];
        cases.push(binary(
            "add_bias",
            gauss_tensor(rng, s),
            gauss_tensor(rng, &c),
            Graph::add_bias,
        ));
        cases.push(binary(
            "mul_channel",
            gauss_tensor(rng, s),
            gauss_tensor(rng, &c),
            Graph::mul_channel,
        ));
    }
    let conv = |stride, padding, dilation, groups| Conv2dOpts {
        stride,
        padding,
        dilation,
        groups,
    };
    use crate::graph::Padding::{Same, Valid};
    let plain = [
        ([1, 2, 5, 5], [3, 2, 3, 3], conv(1, Same, 1, 1)),
        ([2, 1, 6, 6], [2, 1, 3, 3], conv(2, Same, 1, 1)),
        ([1, 3, 4, 4], [2, 3, 1, 1], conv(1, Valid, 1, 1)),
    ];
    let depthwise = [
        ([1, 3, 5, 5], [3, 1, 3, 3], conv(1, Same, 1, 3)),
        ([2, 2, 6, 6], [2, 1, 5, 5], conv(2, Same, 1, 2)),
        ([1, 4, 4, 4], [4, 1, 3, 3], conv(1, Valid, 1, 4)),
    ];
    let dilated = [
        ([1, 2, 6, 6], [2, 1, 3, 3], conv(1, Same, 2, 2)),
        ([1, 1, 7, 7], [1, 1, 5, 5], conv(1, Same, 2, 1)),
        ([2, 2, 8, 8], [3, 2, 3, 3], conv(2, Same, 2, 1)),
    ];
    for (op, set) in [
        ("conv2d", plain),
        ("depthwise_conv2d", depthwise),
        ("dilated_conv2d", dilated),
    ] {
        for (xs, ws, opts) in set {
            cases.push(conv_case(
                op,
                gauss_tensor(rng, &xs),
                gauss_tensor(rng, &ws),
                opts,
            ));
        }
    }
    for (s, stride) in [([1, 2, 5, 5], 1), ([2, 1, 6, 6], 2), ([1, 3, 4, 4], 1)] {
        cases.push(Case {
            op: "max_pool2d",
            params: single("a", distinct_tensor(rng, &s)),
            build: Box::new(move |g, p| g.max_pool2d(p.get("a")?, 3, stride, 1)),
        });
        cases.push(Case {
            op: "avg_pool2d",
            params: single("a", gauss_tensor(rng, &s)),
            build: Box::new(move |g, p| g.avg_pool2d(p.get("a")?, 3, stride, 1)),
        });
    }
    for s in [[1, 1, 2, 2], [2, 2, 3, 3], [1, 3, 1, 2]] {
        cases.push(unary(
            "upsample2x",
            gauss_tensor(rng, &s),
            Graph::upsample2x,
        ));
    }
    let bn: [&[usize]; 3] = [&[4, 2, 3, 3], &[3, 3, 2, 2], &[5, 4]];
    for s in bn {
        cases.push(unary("batch_norm", gauss_tensor(rng, s), Graph::batch_norm));
    }
    for s in [[2, 2, 3, 3], [1, 3, 2, 2], [2, 1, 4, 4]] {
        cases.push(unary(
            "global_avg_pool",
            gauss_tensor(rng, &s),
            Graph::global_avg_pool,
        ));
    }
    let rows: [&[usize]; 3] = [&[4], &[2, 3], &[3, 5]];
    for s in rows {
        cases.push(unary(
            "softmax",
            gauss_tensor(rng, s).scale(2.0),
            Graph::softmax,
        ));
        cases.push(unary(
            "log_softmax",
            gauss_tensor(rng, s).scale(2.0),
            Graph::log_softmax,
        ));
    }
    for (n, k) in [(2, 3), (4, 5), (1, 2)] {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let l = labels.clone();
        cases.push(Case {
            op: "cross_entropy",
            params: single("a", gauss_tensor(rng, &[n, k]).scale(2.0)),
            build: Box::new(move |g, p| g.cross_entropy(p.get("a")?, &l)),
        });
        cases.push(Case {
            op: "weighted_cross_entropy",
            params: single("a", gauss_tensor(rng, &[n, k]).scale(2.0)),
            build: Box::new(move |g, p| g.weighted_cross_entropy(p.get("a")?, &labels, &weights)),
        });
    }
    for (a, b, axis) in [
        (vec![2, 1, 2, 2], vec![2, 2, 2, 2], 1),
        (vec![3, 2], vec![3, 4], 1),
        (vec![2, 3], vec![1, 3], 0),
    ] {
        cases.push(Case {
            op: "concat",
            params: pair(gauss_tensor(rng, &a), gauss_tensor(rng, &b)),
            build: Box::new(move |g, p| g.concat(&[p.get("a")?, p.get("b")?, p.get("a")?], axis)),
        });
    }
    for (from, to) in [
        (vec![2, 3], vec![3, 2]),
        (vec![4], vec![2, 2]),
        (vec![2, 2, 2], vec![8]),
    ] {
        cases.push(Case {
            op: "reshape",
            params: single("a", gauss_tensor(rng, &from)),
            build: Box::new(move |g, p| g.reshape(p.get("a")?, &to)),
        });
    }
    for (terms, shape, wshape, row) in [
        (2, vec![3], vec![2], 0),
        (3, vec![2, 2], vec![2, 3], 1),
        (4, vec![1, 2, 2, 2], vec![1, 4], 0),
    ] {
        let mut params = WeightSet::new();
        for t in 0..terms {
            params.insert(format!("x{t}"), gauss_tensor(rng, &shape));
        }
        params.insert("w", gauss_tensor(rng, &wshape));
        cases.push(Case {
            op: "weighted_sum",
            params,
            build: Box::new(move |g, p| {
                let xs = (0..terms)
                    .map(|t| Ok((p.get(&format!("x{t}"))?, t)))
                    .collect::<Result<Vec<_>>>()?;
                g.weighted_sum(&xs, p.get("w")?, row)
            }),
        });
    }
    cases
}

/// Contract `build`'s output with `coeffs` into a scalar on a fresh graph.
fn evaluate(
    case: &Case,
    params: &WeightSet,
    coeffs: Option<&Tensor>,
) -> Result<(Graph, Var, Vec<usize>)> {
    let mut g = Graph::new();
    let bound = g.bind(params, "")?;
    let out = (case.build)(&mut g, &bound)?;
    let shape = g.shape(out).to_vec();
    let scalar = match coeffs {
        Some(c) => {
            let c = g.input(c.clone())?;
            let m = g.mul(out, c)?;
            g.sum(m)?
        }
        None => out,
    };
    Ok((g, scalar, shape))
}

/// Compares reverse-mode gradients of every primitive against central
/// differences with step [`FD_STEP`], on at least three shapes per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases(&mut rng) {
        let (_, _, out_shape) = evaluate(&case, &case.params, None)?;
        let coeffs = gauss_tensor(&mut rng, &out_shape);
        let (g, scalar, _) = evaluate(&case, &case.params, Some(&coeffs))?;
        let analytic = g.backward(scalar)?;
        let numeric = numerical_gradient(
            |p| {
                let (g, s, _) = evaluate(&case, p, Some(&coeffs))?;
                g.value(s).item()
            },
            &case.params,
            FD_STEP,
        )?;
        let shape = case
            .params
            .values()
            .next()
            .map(|t| t.shape().to_vec())
            .unwrap_or_default();
        out.push(PrimitiveCheck {
            op: case.op,
            shape,
            rel_error: map_relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let p: WeightSet = [("x".to_string(), Tensor::from_vec(vec![2.0]))]
            .into_iter()
            .collect();
        let g = numerical_gradient(|w| Ok(w.require("x")?.data()[0].powi(3)), &p, FD_STEP).unwrap();
        assert!((g.get("x").unwrap().data()[0] - 12.0).abs() < 1e-8);
    }

    #[test]
    fn every_primitive_has_three_shapes() {
        let checks = primitive_suite(1).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for c in &checks {
            *counts.entry(c.op).or_insert(0) += 1;
        }
        assert!(counts.len() >= 25);
        assert!(counts.values().all(|&n| n >= 3), "{counts:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0], 1e-12), 0.0);
        assert!((relative_error(&[1.0], &[1.1], 1e-12) - 0.1 / 1.1).abs() < 1e-12);
    }
}
