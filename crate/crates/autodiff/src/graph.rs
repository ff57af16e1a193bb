//! Define-by-run tape. Every op evaluates eagerly, records its inputs, and
//! `backward` replays the tape in reverse creation order.

use std::collections::HashMap;

use crate::error::{invalid, AutodiffError, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::map::{GradientMap, WeightSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input extent (for stride 1); odd kernels only.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Same,
            dilation: 1,
            groups: 1,
        }
    }
}

const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulChannel {
        x: Var,
        scale: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Upsample2x(Var),
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
        c: usize,
        spatial: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    WeightedSum {
        terms: Vec<(Var, usize)>,
        weights: Var,
        row: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape holding leaf tensors, recorded ops and their values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Parameters of one [`WeightSet`] bound onto a graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::Missing(name.to_string()))
    }
}

fn shape4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(invalid(
            op,
            format!("expected a 4-D tensor, got {:?}", t.shape()),
        )),
    }
}

fn shape2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(invalid(
            op,
            format!("expected a 2-D tensor, got {:?}", t.shape()),
        )),
    }
}

fn log_sigmoid(z: f64) -> f64 {
    z.min(0.0) - (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax along the last axis.
fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient is tracked).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "input", false)
    }

    /// Named differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "param", true)?;
        self.params.push((name.into(), v));
        Ok(v)
    }

    /// Binds every tensor of `ws` as a parameter named `prefix + key`.
    pub fn bind(&mut self, ws: &WeightSet, prefix: &str) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(ws.len());
        for (k, t) in ws.iter() {
            let v = self.param(format!("{prefix}{k}"), t.clone())?;
            vars.insert(k.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Binds `ws` as constants: same handles, no gradient.
    pub fn bind_const(&mut self, ws: &WeightSet) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(ws.len());
        for (k, t) in ws.iter() {
            vars.insert(k.clone(), self.input(t.clone())?);
        }
        Ok(Bound { vars })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = shape2(self.value(a), "matmul")?;
        let [k2, n] = shape2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: vec![k2, n],
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            "matmul",
            ng,
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), "add", ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), "sub", ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), "mul", ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), "scale", ng)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| invalid("add_n", "no inputs"))?;
        rest.iter().try_fold(*first, |acc, &v| self.add(acc, v))
    }

    fn channel_layout(&self, x: Var, c: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        let cs = self.value(c).shape();
        if xs.len() < 2 || cs != [xs[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                expected: vec![xs.get(1).copied().unwrap_or(0)],
                got: cs.to_vec(),
            });
        }
        let inner: usize = xs[2..].iter().product();
        Ok((xs[0], xs[1], inner))
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[N, C, ...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = self.channel_layout(x, bias, "add_bias")?;
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
        debug_assert_eq!(out.numel(), n * c * inner);
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias { x, bias }, "add_bias", ng)
    }

    /// Multiplies axis 1 of `x` by `scale[c]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (_, c, inner) = self.channel_layout(x, scale, "mul_channel")?;
        let mut out = self.value(x).clone();
        let s = self.value(scale).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= s[(i / inner) % c];
        }
        let ng = self.needs(x) || self.needs(scale);
        self.push(out, Op::MulChannel { x, scale }, "mul_channel", ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), "relu", ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), "sigmoid", ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(t, Op::Tanh(a), "tanh", ng)
    }

    /// `ln σ(x)`, computed stably.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(log_sigmoid);
        let ng = self.needs(a);
        self.push(t, Op::LogSigmoid(a), "log_sigmoid", ng)
    }

    /// NCHW convolution; weight layout `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, opts: Conv2dOpts) -> Result<Var> {
        let [n, cin, h, wd] = shape4(self.value(x), "conv2d")?;
        let [cout, cin_g, kh, kw] = shape4(self.value(w), "conv2d")?;
        let Conv2dOpts {
            stride,
            padding,
            dilation,
            groups,
        } = opts;
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(invalid(
                "conv2d",
                "stride, dilation and groups must be positive",
            ));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin / groups, kh, kw],
                got: self.value(w).shape().to_vec(),
            });
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(invalid("conv2d", "same padding needs a square odd kernel"));
                }
                dilation * (kh - 1) / 2
            }
        };
        let oh = kernels::out_extent(h, kh, stride, pad, dilation)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        let ow = kernels::out_extent(wd, kw, stride, pad, dilation)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            dil: dilation,
            groups,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let ng = self.needs(x) || self.needs(w);
        self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::Conv2d { x, w, geom },
            "conv2d",
            ng,
        )
    }

    fn pool_geom(
        &self,
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
        op: &'static str,
    ) -> Result<PoolGeom> {
        let [n, c, h, w] = shape4(self.value(x), op)?;
        if stride == 0 || pad >= k {
            return Err(invalid(
                op,
                "stride must be positive and padding smaller than the window",
            ));
        }
        let oh = kernels::out_extent(h, k, stride, pad, 1)
            .ok_or_else(|| invalid(op, "window larger than input"))?;
        let ow = kernels::out_extent(w, k, stride, pad, 1)
            .ok_or_else(|| invalid(op, "window larger than input"))?;
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let g = self.pool_geom(x, k, stride, pad, "max_pool2d")?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &g);
        let ng = self.needs(x);
        self.push(
            Tensor::new(vec![g.n, g.c, g.oh, g.ow], out)?,
            Op::MaxPool { x, argmax },
            "max_pool2d",
            ng,
        )
    }

    /// Average pooling that excludes padded positions from the divisor.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let g = self.pool_geom(x, k, stride, pad, "avg_pool2d")?;
        let out = kernels::avg_pool_forward(self.value(x).data(), &g);
        let ng = self.needs(x);
        self.push(
            Tensor::new(vec![g.n, g.c, g.oh, g.ow], out)?,
            Op::AvgPool { x, geom: g },
            "avg_pool2d",
            ng,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "upsample2x")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[plane * oh * ow + y * ow + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::Upsample2x(x),
            "upsample2x",
            ng,
        )
    }

    /// Normalization with the current batch's statistics over every axis but 1; no affine terms.
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("batch_norm", "expected at least 2 axes"));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (xhat, inv_std) =
            kernels::batch_norm_forward(self.value(x).data(), n, c, spatial, BN_EPS);
        let ng = self.needs(x);
        let value = Tensor::new(shape, xhat.clone())?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                n,
                c,
                spatial,
            },
            "batch_norm",
            ng,
        )
    }

    fn last_axis(&self, a: Var) -> usize {
        *self.value(a).shape().last().unwrap_or(&1)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_axis(a);
        let t = self.value(a);
        let data = log_softmax_rows(t.data(), cols)
            .into_iter()
            .map(f64::exp)
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), "softmax", ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_axis(a);
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), log_softmax_rows(t.data(), cols))?;
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax(a), "log_softmax", ng)
    }

    /// Mean cross-entropy of `logits` `[N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len().max(1);
        self.weighted_cross_entropy(logits, labels, &vec![1.0 / n as f64; labels.len()])
    }

    /// `Σ_i weights[i] · CE(logits[i], labels[i])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let [n, k] = shape2(self.value(logits), "cross_entropy")?;
        if labels.len() != n || weights.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![n],
                got: vec![labels.len(), weights.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let logp = log_softmax_rows(self.value(logits).data(), k);
        let loss: f64 = labels
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&y, &w))| -w * logp[i * k + y])
            .sum();
        let probs = logp.into_iter().map(f64::exp).collect();
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            "cross_entropy",
            ng,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {:?}", base),
            ));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    expected: base.clone(),
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), "reshape", ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(t, Op::Sum(a), "sum", ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        let ng = self.needs(a);
        self.push(t, Op::Mean(a), "mean", ng)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "global_avg_pool")?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(x);
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::GlobalAvgPool(x),
            "global_avg_pool",
            ng,
        )
    }

    /// `Σ_t weights[row, k_t] · x_t` over `terms = [(x_t, k_t)]`.
    ///
    /// `weights` is `[rows, K]` (or `[K]` with `row == 0`); all `x_t` share one shape.
    pub fn weighted_sum(
        &mut self,
        terms: &[(Var, usize)],
        weights: Var,
        row: usize,
    ) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| invalid("weighted_sum", "no terms"))?;
        let shape = self.value(first).shape().to_vec();
        let ws = self.value(weights).shape();
        let (rows, k) = match *ws {
            [k] => (1, k),
            [r, k] => (r, k),
            _ => {
                return Err(invalid(
                    "weighted_sum",
                    format!("weights must be 1-D or 2-D, got {ws:?}"),
                ))
            }
        };
        if row >= rows {
            return Err(invalid(
                "weighted_sum",
                format!("row {row} out of range ({rows} rows)"),
            ));
        }
        let mut out = vec![0.0; shape.iter().product()];
        for &(v, idx) in terms {
            if idx >= k {
                return Err(invalid(
                    "weighted_sum",
                    format!("weight index {idx} out of range ({k})"),
                ));
            }
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "weighted_sum",
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            let w = self.value(weights).data()[row * k + idx];
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let ng = self.needs(weights) || terms.iter().any(|&(v, _)| self.needs(v));
        self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
                row,
            },
            "weighted_sum",
            ng,
        )
    }

    /// Reverse-mode gradients of scalar `output` w.r.t. every bound parameter.
    ///
    /// Parameters that do not influence `output` receive zero gradients.
    pub fn backward(&self, output: Var) -> Result<GradientMap> {
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(AutodiffError::NotScalar(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut out = GradientMap::new();
        for (name, v) in &self.params {
            let shape = self.value(*v).shape().to_vec();
            let data = match grads.get_mut(v.0).and_then(Option::take) {
                Some(d) => d,
                None => vec![0.0; shape.iter().product()],
            };
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            if let Some(prev) = out.get_mut(name) {
                prev.add_assign(&t)?;
            } else {
                out.insert(name.clone(), t);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = shape2(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                if self.needs(*a) {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddBias { x, bias } => {
                let (_, c, inner) = self.channel_layout(*x, *bias, "add_bias")?;
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::MulChannel { x, scale } => {
                let (_, c, inner) = self.channel_layout(*x, *scale, "mul_channel")?;
                let (xd, sd) = (val(*x), val(*scale));
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * sd[(i / inner) % c])
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*scale) {
                    let mut ds = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        ds[(i / inner) % c] += v * xd[i];
                    }
                    self.accumulate(grads, *scale, ds);
                }
            }
            Op::Relu(a) => {
                let ad = val(*a);
                let dx = g
                    .iter()
                    .zip(ad)
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::LogSigmoid(a) => {
                let ad = val(*a);
                let dx = g.iter().zip(ad).map(|(d, z)| d * sigmoid(-z)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (d, &i) in g.iter().zip(argmax) {
                    dx[i] += d;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, geom } => {
                self.accumulate(grads, *x, kernels::avg_pool_backward(g, geom));
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = shape4(self.value(*x), "upsample2x")?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[plane * h * w + (y / 2) * w + xx / 2] +=
                                g[plane * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                n,
                c,
                spatial,
            } => {
                let dx = kernels::batch_norm_backward(g, xhat, inv_std, *n, *c, *spatial);
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(a) => {
                let cols = self.last_axis(*a);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in
                    dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let cols = self.last_axis(*a);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in
                    dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..cols {
                        drow[j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = self.last_axis(*logits);
                let mut dx = probs.clone();
                for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    let row = &mut dx[i * k..(i + 1) * k];
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * g[0];
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dv.extend_from_slice(
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = shape4(self.value(*x), "global_avg_pool")?;
                let hw = h * w;
                let dx = g
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d / hw as f64, hw))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum {
                terms,
                weights,
                row,
            } => {
                let ws = self.value(*weights);
                let k = *ws.shape().last().unwrap_or(&1);
                let wd = ws.data();
                let mut dw = if self.needs(*weights) {
                    Some(vec![0.0; ws.numel()])
                } else {
                    None
                };
                for &(v, idx) in terms {
                    let w = wd[row * k + idx];
                    if self.needs(v) {
                        self.accumulate(grads, v, g.iter().map(|d| d * w).collect());
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[row * k + idx] += g.iter().zip(val(v)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weights, dw);
                }
            }
        }
        Ok(())
    }
}
