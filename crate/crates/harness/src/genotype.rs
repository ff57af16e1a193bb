//! Plain-text genotype files.
//!
//! ```text
//! # config_hash 3f2a...
//! # op_set sep_conv_3x3,max_pool_3x3,zero,identity
//! # op_set_hash 91c0...
//! normal 0 0 sep_conv_3x3
//! normal 0 1 max_pool_3x3
//! ```
//!
//! Each body line is `<cell> <node> <input> <op>`, two lines per node.

use std::fmt::Write as _;

use lfm_core::search_space::{CandidateOp, DiscreteCell, Genotype, OpSet};

use crate::config::op_set_hash;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenotypeFile {
    pub genotype: Genotype,
    pub config_hash: Option<String>,
    pub op_set: Option<String>,
    pub op_set_hash: Option<String>,
}

pub fn render(genotype: &Genotype, config_hash: &str, ops: &OpSet) -> String {
    let mut out = String::new();
    writeln!(out, "# config_hash {config_hash}").unwrap();
    writeln!(out, "# op_set {}", ops.canonical()).unwrap();
    writeln!(out, "# op_set_hash {}", op_set_hash(ops)).unwrap();
    let cells = std::iter::once(("normal", &genotype.normal))
        .chain(genotype.reduce.as_ref().map(|c| ("reduce", c)));
    for (name, cell) in cells {
        for (node, pair) in cell.nodes.iter().enumerate() {
            for (input, op) in pair {
                writeln!(out, "{name} {node} {input} {op}").unwrap();
            }
        }
    }
    out
}

fn bad(line: usize, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Genotype(format!("line {line}: {msg}"))
}

pub fn parse(text: &str) -> Result<GenotypeFile> {
    let mut config_hash = None;
    let mut op_set = None;
    let mut op_set_hash = None;
    let mut normal: Vec<Vec<(usize, CandidateOp)>> = Vec::new();
    let mut reduce: Vec<Vec<(usize, CandidateOp)>> = Vec::new();
    let mut saw_reduce = false;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("config_hash"), Some(v)) => config_hash = Some(v.to_string()),
                (Some("op_set"), Some(v)) => op_set = Some(v.to_string()),
                (Some("op_set_hash"), Some(v)) => op_set_hash = Some(v.to_string()),
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [cell, node, input, op] = fields[..] else {
            return Err(bad(
                n,
                format!("expected `<cell> <node> <input> <op>`, got `{line}`"),
            ));
        };
        let node: usize = node
            .parse()
            .map_err(|_| bad(n, format!("bad node index `{node}`")))?;
        let input: usize = input
            .parse()
            .map_err(|_| bad(n, format!("bad input index `{input}`")))?;
        let op: CandidateOp = op
            .parse()
            .map_err(|_| bad(n, format!("unknown operation `{op}`")))?;
        let target = match cell {
            "normal" => &mut normal,
            "reduce" => {
                saw_reduce = true;
                &mut reduce
            }
            other => return Err(bad(n, format!("unknown cell `{other}`"))),
        };
        if node > target.len() || (node + 1 < target.len()) {
            return Err(bad(n, format!("node {node} out of order")));
        }
        if node == target.len() {
            target.push(Vec::new());
        }
        if target[node].len() == 2 {
            return Err(bad(n, format!("node {node} has more than two inputs")));
        }
        target[node].push((input, op));
    }
    let to_cell = |name: &str, nodes: Vec<Vec<(usize, CandidateOp)>>| -> Result<DiscreteCell> {
        if nodes.is_empty() {
            return Err(HarnessError::Genotype(format!("{name} cell has no nodes")));
        }
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                <[(usize, CandidateOp); 2]>::try_from(v).map_err(|_| {
                    HarnessError::Genotype(format!("{name} node {i} needs exactly two inputs"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cell = DiscreteCell { nodes };
        cell.validate()
            .map_err(|e| HarnessError::Genotype(format!("{name} cell: {e}")))?;
        Ok(cell)
    };
    let normal = to_cell("normal", normal)?;
    let reduce = if saw_reduce {
        Some(to_cell("reduce", reduce)?)
    } else {
        None
    };
    Ok(GenotypeFile {
        genotype: Genotype { normal, reduce },
        config_hash,
        op_set,
        op_set_hash,
    })
}

impl GenotypeFile {
    /// Every op must belong to `ops`; a differing op-set hash is refused
    /// unless `force` is set.
    pub fn check_op_set(&self, ops: &OpSet, force: bool) -> Result<()> {
        let cells = std::iter::once(&self.genotype.normal).chain(self.genotype.reduce.as_ref());
        for op in cells.flat_map(|c| c.ops()) {
            if !ops.contains(op) {
                return Err(HarnessError::Genotype(format!(
                    "operation `{op}` is not in the configured op set `{}`",
                    ops.canonical()
                )));
            }
        }
        let expected = op_set_hash(ops);
        match &self.op_set_hash {
            Some(found) if *found != expected && !force => Err(HarnessError::OpSetMismatch {
                expected: ops.canonical(),
                found: self.op_set.clone().unwrap_or_else(|| found.clone()),
            }),
            _ => Ok(()),
        }
    }
}
