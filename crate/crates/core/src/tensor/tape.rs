//! Define-by-run reverse-mode tape.
//!
//! Every primitive application is appended to a [`Tape`] together with the
//! ids of its inputs. Values of all nodes are retained, so the backward
//! pass needs no recomputation and [`Tape::replay`] can re-run the whole
//! recorded program from new leaf values.
//!
//! A tape belongs to one worker. Operations that talk to other workers
//! are recorded as [`CustomOp`]s, whose backward may itself communicate;
//! this works because every worker records the same structure and
//! therefore runs backward in the same order.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// An operation implemented outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One entry per input. `None` means the input gets no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Mul,
    Scale(f32),
    Silu,
    Softmax,
    CausalMask,
    SliceCols { start: usize, len: usize },
    ConcatCols,
    RmsNorm { eps: f32 },
    Rope { head_dim: usize, theta: f32 },
    CrossEntropy { targets: Vec<u32>, mask: Vec<bool> },
    Custom(Arc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(c) => write!(f, "Custom({})", c.name()),
            Op::Scale(s) => write!(f, "Scale({s})"),
            Op::SliceCols { start, len } => write!(f, "SliceCols({start}, {len})"),
            Op::RmsNorm { .. } => write!(f, "RmsNorm"),
            Op::Rope { .. } => write!(f, "Rope"),
            Op::CrossEntropy { .. } => write!(f, "CrossEntropy"),
            other => write!(f, "{}", op_name(other)),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "Leaf",
        Op::Matmul => "Matmul",
        Op::Transpose => "Transpose",
        Op::Add => "Add",
        Op::Mul => "Mul",
        Op::Scale(_) => "Scale",
        Op::Silu => "Silu",
        Op::Softmax => "Softmax",
        Op::CausalMask => "CausalMask",
        Op::SliceCols { .. } => "SliceCols",
        Op::ConcatCols => "ConcatCols",
        Op::RmsNorm { .. } => "RmsNorm",
        Op::Rope { .. } => "Rope",
        Op::CrossEntropy { .. } => "CrossEntropy",
        Op::Custom(c) => c.name(),
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// A scalar loss recorded on a tape, with the number of positions it
/// averages over. `count == 0` flags an empty loss (value 0).
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub var: Var,
    pub count: usize,
}

impl Loss {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.check(v)?].requires_grad)
    }

    fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            eval(&op, &vals)?
        };
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, idx, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.record(Op::Scale(s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Silu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax, &[a])
    }

    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        self.record(Op::CausalMask, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { start, len }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols, parts)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        self.record(Op::RmsNorm { eps }, &[x, gain])
    }

    pub fn rope(&mut self, x: Var, head_dim: usize, theta: f32) -> Result<Var> {
        self.record(Op::Rope { head_dim, theta }, &[x])
    }

    pub fn cross_entropy_next_token(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Loss> {
        let count = mask.iter().filter(|&&m| m).count();
        let var = self.record(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        )?;
        Ok(Loss { var, count })
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        self.record(Op::Custom(op), inputs)
    }

    /// Reverse pass from a scalar `root`. Every leaf that requires a
    /// gradient gets one (zeros if the root does not depend on it); other
    /// leaves get none.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_idx = self.check(root)?;
        let root_val = &self.nodes[root_idx].value;
        if root_val.numel() != 1 {
            return Err(Error::NotScalar(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root_idx + 1];
        if self.nodes[root_idx].requires_grad {
            grads[root_idx] = Some(Tensor::full(root_val.shape(), 1.0));
        }
        let mut leaf_grads = HashMap::new();

        for i in (0..=root_idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaf_grads.insert(i, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaf_grads.insert(i, g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let wants: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = vjp(&node.op, &inputs, &node.value, &g, &wants)?;
            for ((&j, want), ig) in node.inputs.iter().zip(wants).zip(input_grads) {
                let (true, Some(ig)) = (want, ig) else { continue };
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => ops::add(&acc, &ig)?,
                    None => ig,
                });
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }

    /// Recomputes every node in recording order, substituting the given
    /// leaf values. Replaying with unchanged leaves reproduces every value
    /// bit-for-bit.
    pub fn replay(&mut self, overrides: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in overrides {
            let i = self.check(*v)?;
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::InvalidShape {
                    op: "replay",
                    reason: format!("node {i} is not a leaf"),
                });
            }
            if node.value.shape() != t.shape() {
                return Err(Error::shape("replay", node.value.shape(), t.shape()));
            }
        }
        for (v, t) in overrides {
            self.nodes[v.index].value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                eval(&node.op, &vals)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Op names in recording order, for diagnostics.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| op_name(&n.op)).collect()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn eval(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::Matmul => ops::matmul(x[0], x[1]),
        Op::Transpose => ops::transpose(x[0]),
        Op::Add => ops::add(x[0], x[1]),
        Op::Mul => ops::mul(x[0], x[1]),
        Op::Scale(s) => Ok(ops::scale(x[0], *s)),
        Op::Silu => Ok(ops::silu(x[0])),
        Op::Softmax => ops::softmax_lastdim(x[0]),
        Op::CausalMask => ops::causal_mask(x[0]),
        Op::SliceCols { start, len } => ops::slice_cols(x[0], *start, *len),
        Op::ConcatCols => ops::concat_cols(x),
        Op::RmsNorm { eps } => ops::rms_norm(x[0], x[1], *eps),
        Op::Rope { head_dim, theta } => ops::rope(x[0], *head_dim, *theta),
        Op::CrossEntropy { targets, mask } => {
            let ce = ops::cross_entropy_next_token(x[0], targets, mask)?;
            Ok(Tensor::scalar(ce.loss))
        }
        Op::Custom(c) => c.forward(x),
    }
}

fn vjp(op: &Op, x: &[&Tensor], out: &Tensor, g: &Tensor, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Matmul => {
            let da = if want(0) {
                Some(ops::matmul(g, &ops::transpose(x[1])?)?)
            } else {
                None
            };
            let db = if want(1) {
                Some(ops::matmul(&ops::transpose(x[0])?, g)?)
            } else {
                None
            };
            vec![da, db]
        }
        Op::Transpose => vec![Some(ops::transpose(g)?)],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul => vec![
            want(0).then(|| ops::mul(g, x[1])).transpose()?,
            want(1).then(|| ops::mul(g, x[0])).transpose()?,
        ],
        Op::Scale(s) => vec![Some(ops::scale(g, *s))],
        Op::Silu => vec![Some(ops::silu_backward(x[0], g)?)],
        Op::Softmax => vec![Some(ops::softmax_backward(out, g)?)],
        Op::CausalMask => vec![Some(ops::causal_mask_backward(g)?)],
        Op::SliceCols { start, len } => {
            let (r, c) = x[0].dims2("slice_cols_backward")?;
            let mut full = vec![0.0f32; r * c];
            for i in 0..r {
                full[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            vec![Some(Tensor::from_parts(vec![r, c], full))]
        }
        Op::ConcatCols => {
            let mut start = 0;
            let mut out = Vec::with_capacity(x.len());
            for p in x {
                let (_, w) = p.dims2("concat_cols_backward")?;
                out.push(Some(ops::slice_cols(g, start, w)?));
                start += w;
            }
            out
        }
        Op::RmsNorm { eps } => {
            let (dx, dgain) = ops::rms_norm_backward(x[0], x[1], *eps, g)?;
            vec![Some(dx), Some(dgain)]
        }
        Op::Rope { head_dim, theta } => vec![Some(ops::rope_backward(g, *head_dim, *theta)?)],
        Op::CrossEntropy { targets, mask } => {
            vec![Some(ops::cross_entropy_backward(x[0], targets, mask, g.item()?)?)]
        }
        Op::Custom(c) => c.backward(x, out, g)?,
    })
}
