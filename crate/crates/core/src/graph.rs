//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so recording order
//! is a topological order and [`Graph::backward`] is a single reverse sweep.
//! Graphs are cheap; optimisation loops build a fresh one per step.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Relu,
    /// Identity inside `[lo, hi]`, constant outside; zero gradient outside.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `scale * x + shift`.
    Affine {
        scale: f64,
        shift: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    Replicate,
}

/// Backward rule for an operation implemented outside this module.
///
/// `forward` is computed by the caller; only the vector-Jacobian product is
/// needed here. Return one entry per input, `None` for inputs that receive no
/// gradient.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce {
        kind: ReduceOp,
        input: Var,
        /// For every input element, the flat index of its output element.
        group: Vec<usize>,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        padding: Padding,
    },
    Sort {
        input: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    ChannelScale {
        act: Var,
        mask: Var,
    },
    ChannelBias {
        act: Var,
        bias: Var,
    },
    MatVec {
        weight: Var,
        input: Var,
    },
    AvgPool {
        input: Var,
        size: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branches: u64,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    /// Adjoint of `var`, or zeros of `like`'s shape when `var` was unreachable.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Output shape and input-to-output index map for a reduction over `axes`.
fn reduction_groups(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    for &axis in axes {
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
    }
    let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = if keep.is_empty() {
        vec![1]
    } else {
        keep.iter().map(|&d| shape[d]).collect()
    };
    let numel: usize = shape.iter().product();
    let mut group = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    for _ in 0..numel {
        let mut out = 0;
        for &d in &keep {
            out = out * shape[d] + index[d];
        }
        group.push(out);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Ok((out_shape, group))
}

/// Normalised conv operand layout: `(channels_in, h, w)` and kernel
/// `(channels_out, channels_in or 1, kh, kw)` plus whether it is depthwise.
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    depthwise: bool,
    out_shape: Vec<usize>,
}

fn conv_dims(input: &Tensor, kernel: &Tensor) -> Result<ConvDims> {
    let (cin, h, w) = match input.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => return Err(mismatch("conv2d", input, kernel)),
    };
    let (cout, kh, kw, depthwise) = match kernel.shape() {
        [kh, kw] => (cin, *kh, *kw, true),
        [o, c, kh, kw] if *c == cin => (*o, *kh, *kw, false),
        _ => return Err(mismatch("conv2d", input, kernel)),
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    // a kernel whose radius exceeds the input never sees a real pixel on one side
    if kh > 2 * h - 1 || kw > 2 * w - 1 {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
        )));
    }
    let out_shape = if input.rank() == 2 && depthwise {
        vec![h, w]
    } else {
        vec![cout, h, w]
    };
    Ok(ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        depthwise,
        out_shape,
    })
}

/// Source pixel for padded coordinate `p` along an axis of length `n`.
#[inline]
fn pad_index(p: isize, n: usize, padding: Padding) -> Option<usize> {
    if p >= 0 && (p as usize) < n {
        Some(p as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Replicate => Some(p.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Visits every `(output index, input index, kernel index)` triple of a
/// same-size cross-correlation.
fn conv_for_each(d: &ConvDims, padding: Padding, mut f: impl FnMut(usize, usize, usize)) {
    let (rh, rw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let plane = d.h * d.w;
    for o in 0..d.cout {
        let in_channels: Box<dyn Iterator<Item = usize>> = if d.depthwise {
            Box::new(std::iter::once(o))
        } else {
            Box::new(0..d.cin)
        };
        for c in in_channels {
            let kbase = if d.depthwise { 0 } else { (o * d.cin + c) * d.kh * d.kw };
            for y in 0..d.h {
                for x in 0..d.w {
                    let out = o * plane + y * d.w + x;
                    for i in 0..d.kh {
                        let Some(sy) = pad_index(y as isize + i as isize - rh, d.h, padding) else {
                            continue;
                        };
                        for j in 0..d.kw {
                            let Some(sx) = pad_index(x as isize + j as isize - rw, d.w, padding) else {
                                continue;
                            };
                            f(out, c * plane + sy * d.w + sx, kbase + i * d.kw + j);
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Hash of every discrete choice made while recording (relu signs, clamp
    /// activity, argmax positions, sort permutations). Two evaluations with the
    /// same signature lie in the same piecewise-smooth region.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    /// Folds discrete choices made by a custom op into the branch signature.
    pub fn note_branch(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.branches = (self.branches ^ b).wrapping_mul(0x100_0000_01b3);
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A fixed input; never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else if vb.is_scalar() {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            return Err(mismatch("binary", va, vb));
        };
        check_finite(&out, "binary")?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Op::Binary(kind, a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = match kind {
            UnaryOp::Exp => va.map(f64::exp),
            UnaryOp::Relu => va.map(|x| x.max(0.0)),
            UnaryOp::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::invalid(format!("clamp interval [{lo}, {hi}] is empty")));
                }
                va.map(|x| x.clamp(lo, hi))
            }
            UnaryOp::Affine { scale, shift } => va.map(|x| scale * x + shift),
        };
        check_finite(&out, "unary")?;
        match kind {
            UnaryOp::Relu => {
                let bits: Vec<u64> = va.data().iter().map(|&x| (x > 0.0) as u64).collect();
                self.note_branch(bits);
            }
            UnaryOp::Clamp { lo, hi } => {
                let bits: Vec<u64> = va
                    .data()
                    .iter()
                    .map(|&x| {
                        if x < lo {
                            1
                        } else if x > hi {
                            2
                        } else {
                            3
                        }
                    })
                    .collect();
                self.note_branch(bits);
            }
            _ => {}
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(Op::Unary(kind, a), out, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryOp::Clamp { lo, hi }, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(
            UnaryOp::Affine {
                scale: factor,
                shift: 0.0,
            },
            a,
        )
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(UnaryOp::Affine { scale, shift }, a)
    }

    /// `1 - a`, the complement of a mask.
    pub fn complement(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    fn reduce_impl(&mut self, kind: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (out_shape, group) = reduction_groups(va.shape(), axes)?;
        let out_numel: usize = out_shape.iter().product();
        let mut argmax = Vec::new();
        let data = match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0f64; out_numel];
                for (&g, &v) in group.iter().zip(va.data()) {
                    acc[g] += v;
                }
                if kind == ReduceOp::Mean {
                    let count = (va.numel() / out_numel) as f64;
                    acc.iter_mut().for_each(|v| *v /= count);
                }
                acc
            }
            ReduceOp::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_numel];
                argmax = vec![usize::MAX; out_numel];
                for (i, (&g, &v)) in group.iter().zip(va.data()).enumerate() {
                    if v > best[g] || argmax[g] == usize::MAX {
                        best[g] = v;
                        argmax[g] = i;
                    }
                }
                best
            }
        };
        if kind == ReduceOp::Max {
            let bits: Vec<u64> = argmax.iter().map(|&i| i as u64).collect();
            self.note_branch(bits);
        }
        let out = Tensor::from_parts(out_shape, data);
        check_finite(&out, "reduce")?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(
            Op::Reduce {
                kind,
                input: a,
                group,
                argmax,
            },
            out,
            rg,
        ))
    }

    /// Reduction over `axes`; an empty axis list reduces everything.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            let all: Vec<usize> = (0..self.value(a).rank()).collect();
            self.reduce_impl(kind, a, &all)
        } else {
            self.reduce_impl(kind, a, axes)
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, &[])
    }

    /// Maximum over `axes` together with the flat input index of each maximum
    /// (first occurrence on ties).
    pub fn max_with_index(&mut self, a: Var, axes: &[usize]) -> Result<(Var, Vec<usize>)> {
        let out = self.reduce(ReduceOp::Max, a, axes)?;
        let Op::Reduce { argmax, .. } = &self.nodes[out.0].op else {
            unreachable!("reduce records a Reduce node")
        };
        Ok((out, argmax.clone()))
    }

    /// Same-size cross-correlation. `input` is `[H, W]` or `[C, H, W]`;
    /// `kernel` is `[kh, kw]` (applied to each channel) or `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let dims = conv_dims(vi, vk)?;
        let mut out = vec![0.0; dims.out_shape.iter().product()];
        let (id, kd) = (vi.data(), vk.data());
        conv_for_each(&dims, padding, |o, i, k| out[o] += kd[k] * id[i]);
        let out = Tensor::from_parts(dims.out_shape, out);
        check_finite(&out, "conv2d")?;
        let rg = self.grad_of(&[input, kernel]);
        Ok(self.push(Op::Conv2d { input, kernel, padding }, out, rg))
    }

    /// Flattens and sorts in non-decreasing order. `perm[j]` is the original
    /// index of the `j`-th smallest element; ties keep their original order.
    ///
    /// Within a block of exactly tied values the adjoint is shared equally,
    /// so tied elements receive identical gradients instead of ones that
    /// depend on their index.
    pub fn sort_with_permutation(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let va = self.value(a);
        let data = va.data();
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.sort_by(|&i, &j| data[i].total_cmp(&data[j]));
        let sorted: Vec<f64> = perm.iter().map(|&i| data[i]).collect();
        let out = Tensor::from_vec(sorted);
        self.note_branch(perm.iter().map(|&i| i as u64));
        let rg = self.grad_of(&[a]);
        let var = self.push(
            Op::Sort {
                input: a,
                perm: perm.clone(),
            },
            out,
            rg,
        );
        Ok((var, perm))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Multiplies channel `k` of a `[K, H, W]` activation by `mask[k]`.
    pub fn channel_scale(&mut self, act: Var, mask: Var) -> Result<Var> {
        let (va, vm) = (self.value(act), self.value(mask));
        if va.rank() != 3 || vm.numel() != va.shape()[0] {
            return Err(mismatch("channel_scale", va, vm));
        }
        let plane = va.shape()[1] * va.shape()[2];
        let m = vm.data();
        let data = va.data().iter().enumerate().map(|(i, &v)| v * m[i / plane]).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        check_finite(&out, "channel_scale")?;
        let rg = self.grad_of(&[act, mask]);
        Ok(self.push(Op::ChannelScale { act, mask }, out, rg))
    }

    /// Adds `bias[k]` to every element of channel `k`.
    pub fn channel_bias(&mut self, act: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(act), self.value(bias));
        if va.rank() != 3 || vb.numel() != va.shape()[0] {
            return Err(mismatch("channel_bias", va, vb));
        }
        let plane = va.shape()[1] * va.shape()[2];
        let b = vb.data();
        let data = va.data().iter().enumerate().map(|(i, &v)| v + b[i / plane]).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        check_finite(&out, "channel_bias")?;
        let rg = self.grad_of(&[act, bias]);
        Ok(self.push(Op::ChannelBias { act, bias }, out, rg))
    }

    /// `weight [O, I]` times the flattened `input` (I elements), giving `[O]`.
    pub fn matvec(&mut self, weight: Var, input: Var) -> Result<Var> {
        let (vw, vx) = (self.value(weight), self.value(input));
        if vw.rank() != 2 || vw.shape()[1] != vx.numel() {
            return Err(mismatch("matvec", vw, vx));
        }
        let (rows, cols) = (vw.shape()[0], vw.shape()[1]);
        let x = vx.data();
        let data = vw
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let out = Tensor::from_parts(vec![rows], data);
        check_finite(&out, "matvec")?;
        let rg = self.grad_of(&[weight, input]);
        Ok(self.push(Op::MatVec { weight, input }, out, rg))
    }

    /// Non-overlapping `size x size` average pooling of a `[C, H, W]` tensor.
    pub fn avg_pool(&mut self, input: Var, size: usize) -> Result<Var> {
        let vi = self.value(input);
        let (c, h, w) = match vi.shape() {
            [c, h, w] if size > 0 && h % size == 0 && w % size == 0 => (*c, *h, *w),
            _ => {
                return Err(Error::invalid(format!(
                    "avg_pool size {size} does not tile shape {:?}",
                    vi.shape()
                )))
            }
        };
        let (oh, ow) = (h / size, w / size);
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (size * size) as f64;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * oh + y / size) * ow + x / size] += vi.data()[(ch * h + y) * w + x] * norm;
                }
            }
        }
        let out = Tensor::from_parts(vec![c, oh, ow], out);
        let rg = self.grad_of(&[input]);
        Ok(self.push(Op::AvgPool { input, size }, out, rg))
    }

    /// Records an externally computed value with a caller-supplied backward.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Arc<dyn CustomOp>) -> Result<Var> {
        check_finite(&output, op.name())?;
        let rg = self.grad_of(inputs);
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            output,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`, seeding its adjoint with one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::ones(root_value.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            for (target, contribution) in self.vjp(node, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                let slot = &mut adj[target.0];
                match slot {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    None => *slot = Some(contribution),
                }
            }
            adj[i] = Some(g);
        }
        for t in adj.iter().flatten() {
            check_finite(t, "backward")?;
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = node.value.numel();
                let at = |t: &Tensor, i: usize| if t.numel() == n { t.data()[i] } else { t.item() };
                let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (x, y) = (at(va, i), at(vb, i));
                    let (dx, dy) = match kind {
                        BinaryOp::Add => (1.0, 1.0),
                        BinaryOp::Sub => (1.0, -1.0),
                        BinaryOp::Mul => (y, x),
                        BinaryOp::Div => (1.0 / y, -x / (y * y)),
                    };
                    ga[i] = gd[i] * dx;
                    gb[i] = gd[i] * dy;
                }
                let fold = |grad: Vec<f64>, t: &Tensor| {
                    if t.numel() == n {
                        Tensor::from_parts(t.shape().to_vec(), grad)
                    } else {
                        Tensor::from_parts(t.shape().to_vec(), vec![grad.iter().sum()])
                    }
                };
                vec![(*a, fold(ga, va)), (*b, fold(gb, vb))]
            }
            Op::Unary(kind, a) => {
                let va = self.value(*a);
                let grad = va
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&x, &y), &g)| match *kind {
                        UnaryOp::Exp => g * y,
                        UnaryOp::Relu => {
                            if x > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Clamp { lo, hi } => {
                            if (lo..=hi).contains(&x) {
                                g
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Affine { scale, .. } => g * scale,
                    })
                    .collect();
                vec![(*a, Tensor::from_parts(va.shape().to_vec(), grad))]
            }
            Op::Reduce {
                kind,
                input,
                group,
                argmax,
            } => {
                let vi = self.value(*input);
                let grad = match kind {
                    ReduceOp::Sum => group.iter().map(|&o| gd[o]).collect(),
                    ReduceOp::Mean => {
                        let count = (vi.numel() / node.value.numel()) as f64;
                        group.iter().map(|&o| gd[o] / count).collect()
                    }
                    ReduceOp::Max => {
                        let mut grad = vec![0.0; vi.numel()];
                        for (o, &i) in argmax.iter().enumerate() {
                            grad[i] += gd[o];
                        }
                        grad
                    }
                };
                vec![(*input, Tensor::from_parts(vi.shape().to_vec(), grad))]
            }
            Op::Conv2d { input, kernel, padding } => {
                let (vi, vk) = (self.value(*input), self.value(*kernel));
                let dims = conv_dims(vi, vk).expect("validated at record time");
                let (mut gi, mut gk) = (vec![0.0; vi.numel()], vec![0.0; vk.numel()]);
                let (id, kd) = (vi.data(), vk.data());
                conv_for_each(&dims, *padding, |o, i, k| {
                    gi[i] += kd[k] * gd[o];
                    gk[k] += id[i] * gd[o];
                });
                vec![
                    (*input, Tensor::from_parts(vi.shape().to_vec(), gi)),
                    (*kernel, Tensor::from_parts(vk.shape().to_vec(), gk)),
                ]
            }
            Op::Sort { input, perm } => {
                let vi = self.value(*input);
                let (x, mut grad) = (vi.data(), vec![0.0; vi.numel()]);
                let mut start = 0;
                while start < perm.len() {
                    let mut end = start + 1;
                    while end < perm.len() && x[perm[end]] == x[perm[start]] {
                        end += 1;
                    }
                    let shared = gd[start..end].iter().sum::<f64>() / (end - start) as f64;
                    for &i in &perm[start..end] {
                        grad[i] = shared;
                    }
                    start = end;
                }
                vec![(*input, Tensor::from_parts(vi.shape().to_vec(), grad))]
            }
            Op::Reshape(a) => {
                let va = self.value(*a);
                vec![(*a, Tensor::from_parts(va.shape().to_vec(), gd.to_vec()))]
            }
            Op::ChannelScale { act, mask } => {
                let (va, vm) = (self.value(*act), self.value(*mask));
                let plane = va.shape()[1] * va.shape()[2];
                let m = vm.data();
                let mut gm = vec![0.0; vm.numel()];
                let ga = va
                    .data()
                    .iter()
                    .zip(gd)
                    .enumerate()
                    .map(|(i, (&a, &g))| {
                        gm[i / plane] += a * g;
                        g * m[i / plane]
                    })
                    .collect();
                vec![
                    (*act, Tensor::from_parts(va.shape().to_vec(), ga)),
                    (*mask, Tensor::from_parts(vm.shape().to_vec(), gm)),
                ]
            }
            Op::ChannelBias { act, bias } => {
                let (va, vb) = (self.value(*act), self.value(*bias));
                let plane = va.shape()[1] * va.shape()[2];
                let mut gb = vec![0.0; vb.numel()];
                for (i, &g) in gd.iter().enumerate() {
                    gb[i / plane] += g;
                }
                vec![
                    (*act, Tensor::from_parts(va.shape().to_vec(), gd.to_vec())),
                    (*bias, Tensor::from_parts(vb.shape().to_vec(), gb)),
                ]
            }
            Op::MatVec { weight, input } => {
                let (vw, vx) = (self.value(*weight), self.value(*input));
                let cols = vw.shape()[1];
                let x = vx.data();
                let mut gx = vec![0.0; cols];
                let mut gw = vec![0.0; vw.numel()];
                for (r, row) in vw.data().chunks(cols).enumerate() {
                    for c in 0..cols {
                        gw[r * cols + c] = gd[r] * x[c];
                        gx[c] += gd[r] * row[c];
                    }
                }
                vec![
                    (*weight, Tensor::from_parts(vw.shape().to_vec(), gw)),
                    (*input, Tensor::from_parts(vx.shape().to_vec(), gx)),
                ]
            }
            Op::AvgPool { input, size } => {
                let vi = self.value(*input);
                let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                let (oh, ow) = (h / size, w / size);
                let norm = 1.0 / (size * size) as f64;
                let mut grad = vec![0.0; vi.numel()];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            grad[(ch * h + y) * w + x] = gd[(ch * oh + y / size) * ow + x / size] * norm;
                        }
                    }
                }
                vec![(*input, Tensor::from_parts(vi.shape().to_vec(), grad))]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                op.backward(&values, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(grad, &v)| grad.map(|t| (v, t)))
                    .collect()
            }
        }
    }
}
