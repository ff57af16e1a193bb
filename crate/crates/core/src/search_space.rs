//! Continuous cell relaxation: candidate operations, architecture logits,
//! the weight-sharing supernet, discretization into a genotype, and the
//! fixed-architecture evaluation network.

use std::fmt;
use std::str::FromStr;

use lfm_autodiff::{Bound, Conv2dOpts, Graph, Padding, Tensor, Var, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOp {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    Zero,
    Identity,
}

impl CandidateOp {
    pub const ALL: [CandidateOp; 8] = [
        CandidateOp::SepConv3x3,
        CandidateOp::SepConv5x5,
        CandidateOp::DilConv3x3,
        CandidateOp::DilConv5x5,
        CandidateOp::MaxPool3x3,
        CandidateOp::AvgPool3x3,
        CandidateOp::Zero,
        CandidateOp::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CandidateOp::SepConv3x3 => "sep_conv_3x3",
            CandidateOp::SepConv5x5 => "sep_conv_5x5",
            CandidateOp::DilConv3x3 => "dil_conv_3x3",
            CandidateOp::DilConv5x5 => "dil_conv_5x5",
            CandidateOp::MaxPool3x3 => "max_pool_3x3",
            CandidateOp::AvgPool3x3 => "avg_pool_3x3",
            CandidateOp::Zero => "zero",
            CandidateOp::Identity => "identity",
        }
    }

    pub fn is_zero(self) -> bool {
        self == CandidateOp::Zero
    }

    /// Kernel size and dilation of the depthwise stage, for convolutions.
    fn conv_geometry(self) -> Option<(usize, usize)> {
        match self {
            CandidateOp::SepConv3x3 => Some((3, 1)),
            CandidateOp::SepConv5x5 => Some((5, 1)),
            CandidateOp::DilConv3x3 => Some((3, 2)),
            CandidateOp::DilConv5x5 => Some((5, 2)),
            _ => None,
        }
    }
}

impl fmt::Display for CandidateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateOp {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        CandidateOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| CoreError::UnknownOp(s.to_string()))
    }
}

/// Ordered candidate operations; the column order of every logit row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CandidateOp>", into = "Vec<CandidateOp>")]
pub struct OpSet {
    ops: Vec<CandidateOp>,
}

impl OpSet {
    pub fn new(ops: Vec<CandidateOp>) -> Result<Self> {
        if ops.len() < 2 {
            return Err(config(format!(
                "op set needs at least 2 operations, got {}",
                ops.len()
            )));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(config(format!("op {op} listed twice")));
            }
        }
        if ops.iter().all(|op| op.is_zero()) {
            return Err(config("op set needs a non-zero operation"));
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[CandidateOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: CandidateOp) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }

    pub fn contains(&self, op: CandidateOp) -> bool {
        self.ops.contains(&op)
    }

    /// Comma-separated op names, the canonical text used for hashing.
    pub fn canonical(&self) -> String {
        self.ops
            .iter()
            .map(|op| op.name())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Default for OpSet {
    fn default() -> Self {
        Self {
            ops: CandidateOp::ALL.to_vec(),
        }
    }
}

impl TryFrom<Vec<CandidateOp>> for OpSet {
    type Error = CoreError;

    fn try_from(ops: Vec<CandidateOp>) -> Result<Self> {
        OpSet::new(ops)
    }
}

impl From<OpSet> for Vec<CandidateOp> {
    fn from(s: OpSet) -> Self {
        s.ops
    }
}

/// Edges of a cell with `nodes` intermediate nodes, each fed by both cell
/// inputs and every earlier node.
pub fn num_edges(nodes: usize) -> usize {
    2 * nodes + nodes * nodes.saturating_sub(1) / 2
}

/// Index of the first edge feeding intermediate node `node`.
pub fn edge_offset(node: usize) -> usize {
    2 * node + node * node.saturating_sub(1) / 2
}

/// Row-wise softmax of a `[rows, K]` tensor.
pub fn row_softmax(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks(k.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
}

/// Architecture logits `A`: one `[edges, K]` matrix per cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    nodes: usize,
    ops: OpSet,
    normal: Tensor,
    reduce: Option<Tensor>,
}

pub const NORMAL_KEY: &str = "normal";
pub const REDUCE_KEY: &str = "reduce";

impl ArchParams {
    pub fn zeros(nodes: usize, ops: OpSet, reduction: bool) -> Self {
        let shape = [num_edges(nodes), ops.len()];
        Self {
            nodes,
            normal: Tensor::zeros(&shape),
            reduce: reduction.then(|| Tensor::zeros(&shape)),
            ops,
        }
    }

    /// Logits drawn from N(0, scale²).
    pub fn random(nodes: usize, ops: OpSet, reduction: bool, scale: f64, seed: u64) -> Self {
        let mut a = Self::zeros(nodes, ops, reduction);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, scale.abs()).expect("finite scale");
        for t in std::iter::once(&mut a.normal).chain(a.reduce.as_mut()) {
            for v in t.data_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        a
    }

    pub fn from_parts(
        nodes: usize,
        ops: OpSet,
        normal: Tensor,
        reduce: Option<Tensor>,
    ) -> Result<Self> {
        let shape = [num_edges(nodes), ops.len()];
        for t in std::iter::once(&normal).chain(reduce.as_ref()) {
            if t.shape() != shape {
                return Err(config(format!(
                    "arch logits must be {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "architecture logits".into(),
                    iteration: 0,
                });
            }
        }
        Ok(Self {
            nodes,
            ops,
            normal,
            reduce,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn ops(&self) -> &OpSet {
        &self.ops
    }

    pub fn normal(&self) -> &Tensor {
        &self.normal
    }

    pub fn reduce(&self) -> Option<&Tensor> {
        self.reduce.as_ref()
    }

    pub fn has_reduction(&self) -> bool {
        self.reduce.is_some()
    }

    pub fn num_edges(&self) -> usize {
        num_edges(self.nodes)
    }

    /// Logits as a weight set keyed `normal` / `reduce`.
    pub fn to_weights(&self) -> WeightSet {
        let mut w = WeightSet::new();
        w.insert(NORMAL_KEY, self.normal.clone());
        if let Some(r) = &self.reduce {
            w.insert(REDUCE_KEY, r.clone());
        }
        w
    }

    /// Replaces the logits with those in `w` (same keys and shapes).
    pub fn with_weights(&self, w: &WeightSet) -> Result<Self> {
        let normal = w.require(NORMAL_KEY)?.clone();
        let reduce = match self.reduce {
            Some(_) => Some(w.require(REDUCE_KEY)?.clone()),
            None => None,
        };
        Self::from_parts(self.nodes, self.ops.clone(), normal, reduce)
    }

    pub fn softmax_normal(&self) -> Tensor {
        row_softmax(&self.normal)
    }

    pub fn softmax_reduce(&self) -> Option<Tensor> {
        self.reduce.as_ref().map(row_softmax)
    }

    pub fn is_finite(&self) -> bool {
        self.normal.is_finite() && self.reduce.as_ref().is_none_or(Tensor::is_finite)
    }
}

/// Mixing weights of one network instance on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ArchVars {
    pub normal: Var,
    pub reduce: Option<Var>,
}

/// Puts `arch` on the graph and applies the row softmax.
///
/// With `prefix = Some(p)` the logits become parameters `p + "normal"` etc.,
/// otherwise constants.
pub fn bind_arch(g: &mut Graph, arch: &ArchParams, prefix: Option<&str>) -> Result<ArchVars> {
    let leaf = |g: &mut Graph, key: &str, t: &Tensor| -> Result<Var> {
        let v = match prefix {
            Some(p) => g.param(format!("{p}{key}"), t.clone())?,
            None => g.input(t.clone())?,
        };
        Ok(g.softmax(v)?)
    };
    let normal = leaf(g, NORMAL_KEY, &arch.normal)?;
    let reduce = match &arch.reduce {
        Some(r) => Some(leaf(g, REDUCE_KEY, r)?),
        None => None,
    };
    Ok(ArchVars { normal, reduce })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetSpec {
    pub cells: usize,
    /// Intermediate nodes per cell; the two cell inputs and the output
    /// node come on top.
    pub nodes: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub input: ImageShape,
    pub reduction_cells: bool,
    pub ops: OpSet,
}

impl Default for SupernetSpec {
    fn default() -> Self {
        Self {
            cells: 2,
            nodes: 4,
            channels: 8,
            num_classes: 4,
            input: ImageShape {
                height: 8,
                width: 8,
                channels: 1,
            },
            reduction_cells: false,
            ops: OpSet::default(),
        }
    }
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cells", self.cells),
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("input height", self.input.height),
            ("input width", self.input.width),
            ("input channels", self.input.channels),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(config(format!("{what} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.reduction_cells {
            let halvings = reduction_layout(self.cells, true)
                .iter()
                .filter(|&&r| r)
                .count();
            let min_extent = self.input.height.min(self.input.width);
            if min_extent >> halvings == 0 {
                return Err(config(format!(
                    "{} reduction cells cannot shrink a {}x{} input",
                    halvings, self.input.height, self.input.width
                )));
            }
        }
        OpSet::new(self.ops.ops().to_vec())?;
        Ok(())
    }

    pub fn init_arch(&self, seed: u64) -> ArchParams {
        ArchParams::random(
            self.nodes,
            self.ops.clone(),
            self.reduction_cells,
            1e-3,
            seed,
        )
    }
}

/// Which cells reduce resolution: those at one and two thirds of the stack.
pub fn reduction_layout(cells: usize, reduction: bool) -> Vec<bool> {
    (0..cells)
        .map(|i| reduction && (i == cells / 3 || i == 2 * cells / 3))
        .collect()
}

/// Two `(input, op)` choices per intermediate node. Inputs 0 and 1 are the
/// cell inputs; input `2 + j` is intermediate node `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteCell {
    pub nodes: Vec<[(usize, CandidateOp); 2]>,
}

impl DiscreteCell {
    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.nodes.iter().enumerate() {
            for &(input, op) in pair {
                if input >= 2 + i {
                    return Err(config(format!("node {i} reads from later input {input}")));
                }
                if op.is_zero() {
                    return Err(config(format!("node {i} selects the zero op")));
                }
            }
            if pair[0].0 == pair[1].0 {
                return Err(config(format!("node {i} uses input {} twice", pair[0].0)));
            }
        }
        Ok(())
    }

    pub fn ops(&self) -> impl Iterator<Item = CandidateOp> + '_ {
        self.nodes.iter().flat_map(|p| p.iter().map(|&(_, op)| op))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: DiscreteCell,
    pub reduce: Option<DiscreteCell>,
}

/// Node-level edge selection shared by every discretization.
fn derive_one(probs: &Tensor, nodes: usize, ops: &OpSet) -> DiscreteCell {
    let k = ops.len();
    let best_op = |e: usize| -> (usize, f64) {
        let row = &probs.data()[e * k..(e + 1) * k];
        let mut best: Option<(usize, f64)> = None;
        for (o, &p) in row.iter().enumerate() {
            if ops.ops()[o].is_zero() {
                continue;
            }
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((o, p));
            }
        }
        best.expect("op set has a non-zero op")
    };
    let mut out = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let off = edge_offset(node);
        let mut ranked: Vec<(usize, usize, f64)> = (0..2 + node)
            .map(|j| {
                let (o, p) = best_op(off + j);
                (j, o, p)
            })
            .collect();
        // Stable sort keeps lower inputs first among equal scores.
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut keep = [ranked[0], ranked[1]];
        keep.sort_by_key(|t| t.0);
        out.push(keep.map(|(j, o, _)| (j, ops.ops()[o])));
    }
    DiscreteCell { nodes: out }
}

/// Discretizes `arch`: per node, the two incoming edges whose strongest
/// non-zero op has the largest softmax weight, each with that op.
pub fn derive_cell(arch: &ArchParams) -> Genotype {
    Genotype {
        normal: derive_one(&arch.softmax_normal(), arch.nodes, &arch.ops),
        reduce: arch
            .softmax_reduce()
            .map(|p| derive_one(&p, arch.nodes, &arch.ops)),
    }
}

/// Exhaustive reference for [`derive_cell`]: scores every pair of inputs and
/// every op assignment, keeping the first maximum in enumeration order.
pub fn derive_cell_exhaustive(arch: &ArchParams) -> Genotype {
    let one = |probs: &Tensor| {
        let k = arch.ops.len();
        let p = |e: usize, o: usize| probs.data()[e * k + o];
        let mut nodes = Vec::new();
        for node in 0..arch.nodes {
            let off = edge_offset(node);
            let mut best: Option<(f64, [(usize, CandidateOp); 2])> = None;
            for a in 0..2 + node {
                for b in a + 1..2 + node {
                    let mut pick = [(a, CandidateOp::Zero), (b, CandidateOp::Zero)];
                    let mut total = 0.0;
                    for slot in &mut pick {
                        let mut top = f64::NEG_INFINITY;
                        for (o, &op) in arch.ops.ops().iter().enumerate() {
                            if !op.is_zero() && p(off + slot.0, o) > top {
                                top = p(off + slot.0, o);
                                slot.1 = op;
                            }
                        }
                        total += top;
                    }
                    if best.is_none_or(|(s, _)| total > s) {
                        best = Some((total, pick));
                    }
                }
            }
            nodes.push(best.expect("at least two inputs").1);
        }
        DiscreteCell { nodes }
    };
    Genotype {
        normal: one(&arch.softmax_normal()),
        reduce: arch.softmax_reduce().map(|p| one(&p)),
    }
}

/// Parameter shapes of `op` on an edge of width `c`, keyed by suffix.
fn op_params(op: CandidateOp, c: usize, stride: usize) -> Vec<(&'static str, Vec<usize>)> {
    match op.conv_geometry() {
        Some((k, _)) => vec![("dw", vec![c, 1, k, k]), ("pw", vec![c, c, 1, 1])],
        None if op == CandidateOp::Identity && stride == 2 => vec![("fr", vec![c, c, 1, 1])],
        None => vec![],
    }
}

/// Output of `op` on `x`, or `None` for the zero op.
pub fn apply_op(
    g: &mut Graph,
    w: &Bound,
    prefix: &str,
    op: CandidateOp,
    x: Var,
    stride: usize,
) -> Result<Option<Var>> {
    let channels = g.shape(x)[1];
    let y = match op {
        CandidateOp::Zero => return Ok(None),
        CandidateOp::Identity if stride == 1 => x,
        CandidateOp::Identity => {
            let r = g.relu(x)?;
            let c = g.conv2d(
                r,
                w.get(&format!("{prefix}fr"))?,
                Conv2dOpts {
                    stride: 2,
                    padding: Padding::Valid,
                    ..Default::default()
                },
            )?;
            g.batch_norm(c)?
        }
        CandidateOp::MaxPool3x3 => {
            let p = g.max_pool2d(x, 3, stride, 1)?;
            g.batch_norm(p)?
        }
        CandidateOp::AvgPool3x3 => {
            let p = g.avg_pool2d(x, 3, stride, 1)?;
            g.batch_norm(p)?
        }
        _ => {
            let (_, dilation) = op.conv_geometry().expect("conv op");
            let r = g.relu(x)?;
            let d = g.conv2d(
                r,
                w.get(&format!("{prefix}dw"))?,
                Conv2dOpts {
                    stride,
                    padding: Padding::Same,
                    dilation,
                    groups: channels,
                },
            )?;
            let p = g.conv2d(d, w.get(&format!("{prefix}pw"))?, Conv2dOpts::default())?;
            g.batch_norm(p)?
        }
    };
    Ok(Some(y))
}

/// `Σ_o softmax(A[row])_o · op_o(x)` with mixing weights `alphas` (already
/// softmaxed, `[edges, K]`). Zero ops are skipped but keep their share of
/// the softmax mass.
#[allow(clippy::too_many_arguments)]
pub fn mixed_op(
    g: &mut Graph,
    w: &Bound,
    prefix: &str,
    ops: &OpSet,
    alphas: Var,
    row: usize,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(ops.len());
    for (k, &op) in ops.ops().iter().enumerate() {
        if let Some(y) = apply_op(g, w, &format!("{prefix}{}.", op.name()), op, x, stride)? {
            terms.push((y, k));
        }
    }
    Ok(g.weighted_sum(&terms, alphas, row)?)
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Mixed(OpSet),
    Discrete(Genotype),
}

/// A stack of cells between a convolutional stem and a linear head.
///
/// Cell `k` preprocesses its two inputs to the cell width with
/// `relu → conv1x1 → BN` (strided when the older input is at twice the
/// resolution), computes each intermediate node as a sum over its incoming
/// edges, and concatenates the intermediate nodes along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    in_channels: usize,
    outputs: usize,
    channels: usize,
    nodes: usize,
    reductions: Vec<bool>,
    body: Body,
}

struct Layout {
    params: Vec<(String, Vec<usize>)>,
}

impl Network {
    /// Weight-sharing supernet classifier for `spec`.
    pub fn supernet(spec: &SupernetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            in_channels: spec.input.channels,
            outputs: spec.num_classes,
            channels: spec.channels,
            nodes: spec.nodes,
            reductions: reduction_layout(spec.cells, spec.reduction_cells),
            body: Body::Mixed(spec.ops.clone()),
        })
    }

    /// Supernet trunk with a different input depth and head width.
    pub fn supernet_with_io(
        spec: &SupernetSpec,
        in_channels: usize,
        outputs: usize,
    ) -> Result<Self> {
        let mut n = Self::supernet(spec)?;
        n.in_channels = in_channels;
        n.outputs = outputs;
        Ok(n)
    }

    /// Fixed-architecture network stacking `copies` cells of `genotype`.
    pub fn discrete(
        genotype: &Genotype,
        copies: usize,
        channels: usize,
        num_classes: usize,
        input: ImageShape,
    ) -> Result<Self> {
        genotype.normal.validate()?;
        if let Some(r) = &genotype.reduce {
            r.validate()?;
            if r.nodes.len() != genotype.normal.nodes.len() {
                return Err(config("normal and reduction cells differ in node count"));
            }
        }
        if copies == 0 || channels == 0 || num_classes < 2 {
            return Err(config(
                "evaluation network needs copies, channels > 0 and at least 2 classes",
            ));
        }
        Ok(Self {
            in_channels: input.channels,
            outputs: num_classes,
            channels,
            nodes: genotype.normal.nodes.len(),
            reductions: reduction_layout(copies, genotype.reduce.is_some()),
            body: Body::Discrete(genotype.clone()),
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn cells(&self) -> usize {
        self.reductions.len()
    }

    /// The edges realized in a cell: `(edge index, input, ops)`.
    fn cell_edges(&self, reduction: bool) -> Vec<(usize, usize, Vec<CandidateOp>)> {
        let mut out = Vec::new();
        for node in 0..self.nodes {
            match &self.body {
                Body::Mixed(ops) => {
                    for j in 0..2 + node {
                        let nz = ops.ops().iter().copied().filter(|o| !o.is_zero()).collect();
                        out.push((edge_offset(node) + j, j, nz));
                    }
                }
                Body::Discrete(gt) => {
                    let cell = if reduction {
                        gt.reduce.as_ref().expect("reduction cell")
                    } else {
                        &gt.normal
                    };
                    for &(j, op) in &cell.nodes[node] {
                        out.push((edge_offset(node) + j, j, vec![op]));
                    }
                }
            }
        }
        out
    }

    fn layout(&self) -> Layout {
        let mut params = vec![(
            "stem.w".to_string(),
            vec![self.channels, self.in_channels, 3, 3],
        )];
        let (mut c_pp, mut c_p, mut c) = (self.channels, self.channels, self.channels);
        for (k, &reduction) in self.reductions.iter().enumerate() {
            if reduction {
                c *= 2;
            }
            params.push((format!("cell{k}.pre0.w"), vec![c, c_pp, 1, 1]));
            params.push((format!("cell{k}.pre1.w"), vec![c, c_p, 1, 1]));
            for (e, input, ops) in self.cell_edges(reduction) {
                let stride = if reduction && input < 2 { 2 } else { 1 };
                for op in ops {
                    for (suffix, shape) in op_params(op, c, stride) {
                        params.push((format!("cell{k}.e{e}.{}.{suffix}", op.name()), shape));
                    }
                }
            }
            c_pp = c_p;
            c_p = self.nodes * c;
        }
        params.push(("head.w".to_string(), vec![c_p, self.outputs]));
        params.push(("head.b".to_string(), vec![self.outputs]));
        Layout { params }
    }

    /// Shapes of every weight tensor, keyed by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().params
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .params
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// He-normal convolutions, `1/sqrt(fan_in)` head, zero bias.
    pub fn init_weights(&self, seed: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = WeightSet::new();
        for (name, shape) in self.layout().params {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let std = if shape.len() == 4 {
                    (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
                } else {
                    (1.0 / shape[0] as f64).sqrt()
                };
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            ws.insert(name, Tensor::new(shape, data).expect("layout shape"));
        }
        ws
    }

    /// Logits `[B, outputs]` for images `x` `[B, C, H, W]`.
    ///
    /// `arch` is required for supernets and ignored for discrete networks.
    pub fn forward(&self, g: &mut Graph, w: &Bound, arch: Option<ArchVars>, x: Var) -> Result<Var> {
        let stem = g.conv2d(x, w.get("stem.w")?, Conv2dOpts::default())?;
        let stem = g.batch_norm(stem)?;
        let (mut s0, mut s1) = (stem, stem);
        let mut prev_reduction = false;
        for (k, &reduction) in self.reductions.iter().enumerate() {
            let pre0 = g.relu(s0)?;
            let pre0 = g.conv2d(
                pre0,
                w.get(&format!("cell{k}.pre0.w"))?,
                Conv2dOpts {
                    stride: if prev_reduction { 2 } else { 1 },
                    padding: Padding::Valid,
                    ..Default::default()
                },
            )?;
            let pre0 = g.batch_norm(pre0)?;
            let pre1 = g.relu(s1)?;
            let pre1 = g.conv2d(
                pre1,
                w.get(&format!("cell{k}.pre1.w"))?,
                Conv2dOpts::default(),
            )?;
            let pre1 = g.batch_norm(pre1)?;

            let alphas = match (&self.body, reduction) {
                (Body::Discrete(_), _) => None,
                (Body::Mixed(_), false) => Some(
                    arch.ok_or_else(|| config("supernet needs architecture weights"))?
                        .normal,
                ),
                (Body::Mixed(_), true) => Some(
                    arch.and_then(|a| a.reduce)
                        .ok_or_else(|| config("supernet needs reduction-cell weights"))?,
                ),
            };
            let mut states = vec![pre0, pre1];
            let edges = self.cell_edges(reduction);
            for node in 0..self.nodes {
                let mut incoming = Vec::new();
                for (e, input, ops) in edges
                    .iter()
                    .filter(|(e, _, _)| (edge_offset(node)..edge_offset(node + 1)).contains(e))
                {
                    let stride = if reduction && *input < 2 { 2 } else { 1 };
                    let prefix = format!("cell{k}.e{e}.");
                    let y = match (&self.body, alphas) {
                        (Body::Mixed(set), Some(alphas)) => Some(mixed_op(
                            g,
                            w,
                            &prefix,
                            set,
                            alphas,
                            *e,
                            states[*input],
                            stride,
                        )?),
                        _ => apply_op(
                            g,
                            w,
                            &format!("{prefix}{}.", ops[0].name()),
                            ops[0],
                            states[*input],
                            stride,
                        )?,
                    };
                    incoming.extend(y);
                }
                let sum = g.add_n(&incoming)?;
                states.push(sum);
            }
            let out = g.concat(&states[2..], 1)?;
            s0 = s1;
            s1 = out;
            prev_reduction = reduction;
        }
        let pooled = g.global_avg_pool(s1)?;
        let logits = g.matmul(pooled, w.get("head.w")?)?;
        Ok(g.add_bias(logits, w.get("head.b")?)?)
    }
}

/// Convenience wrapper: supernet classifier, fresh weights and its op set.
pub fn build_supernet(spec: &SupernetSpec, seed: u64) -> Result<(Network, WeightSet)> {
    let net = Network::supernet(spec)?;
    let w = net.init_weights(seed);
    Ok((net, w))
}

pub fn build_eval_network(
    genotype: &Genotype,
    copies: usize,
    channels: usize,
    num_classes: usize,
    input: ImageShape,
    seed: u64,
) -> Result<(Network, WeightSet)> {
    let net = Network::discrete(genotype, copies, channels, num_classes, input)?;
    let w = net.init_weights(seed);
    Ok((net, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SupernetSpec {
        SupernetSpec {
            cells: 2,
            nodes: 2,
            channels: 4,
            num_classes: 3,
            input: ImageShape {
                height: 6,
                width: 6,
                channels: 1,
            },
            reduction_cells: false,
            ops: OpSet::default(),
        }
    }

    fn images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 0.5).unwrap();
        Tensor::new(
            vec![n, c, h, w],
            (0..n * c * h * w).map(|_| d.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    fn single_edge(ops: OpSet, logits: Vec<f64>, x: &Tensor) -> (Tensor, WeightSet) {
        let k = ops.len();
        let arch = ArchParams::from_parts(
            1,
            ops.clone(),
            Tensor::new(vec![2, k], logits.iter().chain(&logits).copied().collect()).unwrap(),
            None,
        )
        .unwrap();
        let c = x.shape()[1];
        let mut w = WeightSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Normal::new(0.0, 0.3).unwrap();
        for &op in ops.ops() {
            for (s, shape) in op_params(op, c, 1) {
                let n = shape.iter().product();
                w.insert(
                    format!("{}.{s}", op.name()),
                    Tensor::new(shape, (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap(),
                );
            }
        }
        let mut g = Graph::new();
        let b = g.bind(&w, "").unwrap();
        let av = bind_arch(&mut g, &arch, None).unwrap();
        let xv = g.input(x.clone()).unwrap();
        let y = mixed_op(&mut g, &b, "", &ops, av.normal, 0, xv, 1).unwrap();
        (g.value(y).clone(), w)
    }

    fn op_output(op: CandidateOp, w: &WeightSet, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let b = g.bind(w, "").unwrap();
        let xv = g.input(x.clone()).unwrap();
        match apply_op(&mut g, &b, &format!("{}.", op.name()), op, xv, 1).unwrap() {
            Some(y) => g.value(y).clone(),
            None => x.zeros_like(),
        }
    }

    #[test]
    fn equal_logits_average_the_ops() {
        let x = images(2, 3, 5, 5, 2);
        let ops = OpSet::default();
        let (y, w) = single_edge(ops.clone(), vec![0.7; ops.len()], &x);
        let mut expect = x.zeros_like();
        for &op in ops.ops() {
            expect
                .axpy(1.0 / ops.len() as f64, &op_output(op, &w, &x))
                .unwrap();
        }
        let err = y
            .data()
            .iter()
            .zip(expect.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn saturated_logit_selects_one_op() {
        let x = images(2, 3, 5, 5, 3);
        let ops = OpSet::default();
        let mut logits = vec![0.0; ops.len()];
        logits[1] = 40.0;
        let (y, w) = single_edge(ops.clone(), logits, &x);
        let target = op_output(CandidateOp::SepConv5x5, &w, &x);
        let rel = y
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / target.norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn zero_and_identity_halve_the_input() {
        let x = images(1, 2, 4, 4, 4);
        let ops = OpSet::new(vec![CandidateOp::Zero, CandidateOp::Identity]).unwrap();
        let (y, _) = single_edge(ops, vec![0.0, 0.0], &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logit_shift_leaves_mixed_output_unchanged() {
        let x = images(2, 2, 4, 4, 5);
        let ops = OpSet::default();
        let logits: Vec<f64> = (0..ops.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (a, _) = single_edge(ops.clone(), logits.clone(), &x);
        let (b, _) = single_edge(ops, logits.iter().map(|v| v + 3.5).collect(), &x);
        let err = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn edge_counts() {
        assert_eq!(num_edges(4), 14);
        assert_eq!(num_edges(1), 2);
        assert_eq!(edge_offset(3), 9);
    }

    #[test]
    fn supernet_logits_shape_and_stable_count() {
        let spec = SupernetSpec::default();
        let (net, w) = build_supernet(&spec, 0).unwrap();
        let (_, w2) = build_supernet(&spec, 0).unwrap();
        assert!(w.bit_eq(&w2));
        assert_eq!(net.param_count(), w.numel());
        let arch = spec.init_arch(0);
        let mut g = Graph::new();
        let b = g.bind(&w, "w.").unwrap();
        let av = bind_arch(&mut g, &arch, Some("a.")).unwrap();
        let x = g.input(images(4, 1, 8, 8, 1)).unwrap();
        let logits = net.forward(&mut g, &b, Some(av), x).unwrap();
        assert_eq!(g.shape(logits), &[4, 4]);
    }

    #[test]
    fn single_cell_supernet_runs() {
        let spec = SupernetSpec {
            cells: 1,
            ..tiny_spec()
        };
        let (net, w) = build_supernet(&spec, 3).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&w, "").unwrap();
        let av = bind_arch(&mut g, &spec.init_arch(1), None).unwrap();
        let x = g.input(images(2, 1, 6, 6, 2)).unwrap();
        let logits = net.forward(&mut g, &b, Some(av), x).unwrap();
        assert_eq!(g.shape(logits), &[2, 3]);
    }

    #[test]
    fn reduction_cells_halve_resolution() {
        let spec = SupernetSpec {
            cells: 3,
            reduction_cells: true,
            ..tiny_spec()
        };
        let (net, w) = build_supernet(&spec, 3).unwrap();
        let arch = spec.init_arch(1);
        assert!(arch.has_reduction());
        let mut g = Graph::new();
        let b = g.bind(&w, "w.").unwrap();
        let av = bind_arch(&mut g, &arch, Some("a.")).unwrap();
        let x = g.input(images(2, 1, 6, 6, 2)).unwrap();
        let logits = net.forward(&mut g, &b, Some(av), x).unwrap();
        let loss = g.cross_entropy(logits, &[0, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("a.reduce").unwrap().norm() > 0.0);
    }

    #[test]
    fn arch_gradient_is_live() {
        let spec = tiny_spec();
        let (net, w) = build_supernet(&spec, 0).unwrap();
        let arch = ArchParams::random(spec.nodes, spec.ops.clone(), false, 0.5, 9);
        let mut g = Graph::new();
        let b = g.bind(&w, "w.").unwrap();
        let av = bind_arch(&mut g, &arch, Some("a.")).unwrap();
        let x = g.input(images(3, 1, 6, 6, 8)).unwrap();
        let logits = net.forward(&mut g, &b, Some(av), x).unwrap();
        let loss = g.cross_entropy(logits, &[0, 1, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("a.normal").unwrap().norm() > 1e-8);
        assert_eq!(grads.strip_prefix("w.").len(), w.len());
    }

    #[test]
    fn dominant_identity_is_selected() {
        let ops = OpSet::default();
        let mut arch = ArchParams::zeros(4, ops.clone(), false);
        let id = ops.index_of(CandidateOp::Identity).unwrap();
        let mut normal = arch.normal().clone();
        normal.data_mut()[10 * ops.len() + id] = 10.0;
        arch = arch
            .with_weights(&[(NORMAL_KEY.to_string(), normal)].into_iter().collect())
            .unwrap();
        let cell = derive_cell(&arch).normal;
        // Edge 10 is input 1 of node 3.
        assert!(cell.nodes[3].contains(&(1, CandidateOp::Identity)));
    }

    #[test]
    fn equal_logits_give_smallest_cell() {
        let arch = ArchParams::zeros(4, OpSet::default(), false);
        let cell = derive_cell(&arch).normal;
        for pair in &cell.nodes {
            assert_eq!(
                *pair,
                [(0, CandidateOp::SepConv3x3), (1, CandidateOp::SepConv3x3)]
            );
        }
    }

    #[test]
    fn derive_matches_exhaustive_search() {
        for seed in 0..200 {
            let arch = ArchParams::random(4, OpSet::default(), seed % 2 == 0, 1.0, seed);
            assert_eq!(
                derive_cell(&arch),
                derive_cell_exhaustive(&arch),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn derived_cells_are_valid() {
        for seed in 0..50 {
            let arch = ArchParams::random(4, OpSet::default(), false, 3.0, seed);
            derive_cell(&arch).normal.validate().unwrap();
        }
    }

    #[test]
    fn eval_network_parameter_count_grows_with_copies() {
        let gt = derive_cell(&ArchParams::random(4, OpSet::default(), false, 1.0, 4));
        let input = ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        };
        let (n1, w1) = build_eval_network(&gt, 1, 8, 4, input, 0).unwrap();
        let (n4, _) = build_eval_network(&gt, 4, 8, 4, input, 0).unwrap();
        let (_, w1b) = build_eval_network(&gt, 1, 8, 4, input, 0).unwrap();
        assert!(w1.bit_eq(&w1b));
        assert!(n4.param_count() > n1.param_count());
        let mut g = Graph::new();
        let b = g.bind(&w1, "").unwrap();
        let x = g.input(images(3, 1, 8, 8, 0)).unwrap();
        let y = n1.forward(&mut g, &b, None, x).unwrap();
        assert_eq!(g.shape(y), &[3, 4]);
    }

    #[test]
    fn op_set_validation() {
        assert!(OpSet::new(vec![CandidateOp::Zero]).is_err());
        assert!(OpSet::new(vec![CandidateOp::Identity, CandidateOp::Identity]).is_err());
        assert_eq!(
            "dil_conv_5x5".parse::<CandidateOp>().unwrap(),
            CandidateOp::DilConv5x5
        );
        assert!(matches!(
            "conv_7x7".parse::<CandidateOp>(),
            Err(CoreError::UnknownOp(_))
        ));
    }
}
