use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::{gemm, MatView};
use super::tensor::validate_shape;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    AddSuffix {
        a: Var,
        b: Var,
    },
    MulPrefix {
        a: Var,
        s: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    MeanLast {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Seeded counter-based generator for dropout masks.
///
/// Each call to [`Graph::dropout`] draws from its own ChaCha stream, so a mask
/// depends only on `(seed, call index)`.
#[derive(Clone, Debug)]
pub struct DropoutRng {
    seed: u64,
    counter: u64,
}

impl DropoutRng {
    pub fn new(seed: u64) -> Self {
        DropoutRng { seed, counter: 0 }
    }

    fn next_stream(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }
}

/// Append-only record of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are only recorded with their backward information when at least one
/// input requires gradients; otherwise the result is stored as a constant leaf.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / last;
    (rows, last)
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying backward information.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a rank-2 matrix shared across all leading axes of `a`, or a
    /// tensor with the same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != k2 || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if shared_rhs {
                gemm(
                    MatView::row_major(ad, batch * m, k),
                    MatView::row_major(bd, k, n),
                    &mut out,
                    false,
                );
            } else {
                for bi in 0..batch {
                    gemm(
                        MatView::row_major(&ad[bi * m * k..(bi + 1) * m * k], m, k),
                        MatView::row_major(&bd[bi * k * n..(bi + 1) * k * n], k, n),
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(
            "matmul",
            Tensor::from_parts_unchecked(out_shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        )
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts_unchecked(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("sub", out, Op::Sub { a, b }, rg)
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("mul", out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_parts_unchecked(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * factor).collect(),
        );
        let rg = self.any_grad(&[a]);
        self.push("scale", out, Op::Scale { a, factor }, rg)
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape
    /// (a bias vector along the last axis, or a `T x D` table over channels).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bd = tb.data();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(bd.len()) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x = *x + y;
            }
        }
        let out = Tensor::from_parts_unchecked(sa.to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push("add_broadcast", out, Op::AddSuffix { a, b }, rg)
    }

    /// `a * s` where `s`'s shape equals a leading prefix of `a`'s shape; each
    /// prefix-indexed block of `a` is scaled by the matching entry of `s`.
    pub fn mul_prefix(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let (sa, ss) = (ta.shape(), ts.shape());
        if ss.len() > sa.len() || sa[..ss.len()] != *ss {
            return Err(Error::shape("mul_prefix", sa, ss));
        }
        let inner = ta.numel() / ts.numel();
        let sd = ts.data();
        let data = ta
            .data()
            .chunks(inner)
            .zip(sd)
            .flat_map(|(chunk, &w)| chunk.iter().map(move |&x| x * w))
            .collect();
        let out = Tensor::from_parts_unchecked(sa.to_vec(), data);
        let rg = self.any_grad(&[a, s]);
        self.push("mul_prefix", out, Op::MulPrefix { a, s }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_parts_unchecked(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.max(T::zero())).collect(),
        );
        let rg = self.any_grad(&[a]);
        self.push("relu", out, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_parts_unchecked(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| sigmoid(x)).collect(),
        );
        let rg = self.any_grad(&[a]);
        self.push("sigmoid", out, Op::Sigmoid { a }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let sa = ta.shape();
        if sa.len() < 2 {
            return Err(Error::InvalidShape {
                shape: sa.to_vec(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let data = transpose_last(ta.data(), r, c);
        let mut shape = sa.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let out = Tensor::from_parts_unchecked(shape, data);
        let rg = self.any_grad(&[a]);
        self.push("transpose", out, Op::Transpose { a }, rg)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        if self.shape(first).is_empty() {
            return Err(Error::shape("concat_last", &[], &[]));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        self.push(
            "concat_last",
            Tensor::from_parts_unchecked(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Mean over the last axis, which is removed from the shape.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() == 0 {
            return Err(Error::InvalidShape {
                shape: vec![],
                reason: "mean over last axis of a scalar".into(),
            });
        }
        let (_, width) = split_last(ta.shape());
        let inv = T::one() / T::of(width as f64);
        let data = ta
            .data()
            .chunks(width)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        let rg = self.any_grad(&[a]);
        self.push(
            "mean_last",
            Tensor::from_parts_unchecked(shape, data),
            Op::MeanLast { a },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[a]);
        self.push(
            "sum_all",
            Tensor::from_parts_unchecked(vec![], vec![total]),
            Op::SumAll { a },
            rg,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(Error::shape("reshape", ta.shape(), shape));
        }
        let out = Tensor::from_parts_unchecked(shape.to_vec(), ta.data().to_vec());
        let rg = self.any_grad(&[a]);
        self.push("reshape", out, Op::Reshape { a }, rg)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let sa = ta.shape();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::InvalidShape {
                shape: sa.to_vec(),
                reason: format!("slice axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let extent = sa[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = len;
        let rg = self.any_grad(&[a]);
        self.push(
            "slice",
            Tensor::from_parts_unchecked(shape, data),
            Op::Slice { a, axis, start },
            rg,
        )
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let sa = ta.shape();
        if axis >= sa.len() {
            return Err(Error::InvalidShape {
                shape: sa.to_vec(),
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let (outer, extent, inner) = axis_split(sa, axis);
        let x = ta.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * extent + i) * inner + j;
                let max = (0..extent).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..extent {
                    let e = (x[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total = total + e;
                }
                for i in 0..extent {
                    out[idx(i)] = out[idx(i)] / total;
                }
            }
        }
        let out = Tensor::from_parts_unchecked(sa.to_vec(), out);
        let rg = self.any_grad(&[a]);
        self.push("softmax", out, Op::Softmax { a, axis }, rg)
    }

    /// Inverted dropout: in training mode every element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Inference mode (or a zero rate) returns `a` itself.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut DropoutRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mut stream = rng.next_stream();
        let keep = T::of(1.0 / (1.0 - rate));
        let ta = self.value(a);
        let mask: Vec<T> = (0..ta.numel())
            .map(|_| {
                if stream.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push("dropout", out, Op::Dropout { a, mask }, rg)
    }

    /// Normalizes each last-axis slice to zero mean and unit variance
    /// (`(x - mean) / sqrt(var + epsilon)`), then applies `gain` and `bias`.
    /// A zero-variance slice therefore maps to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(Error::shape("layer_norm", &[], self.shape(gain)));
        }
        let (rows, width) = split_last(tx.shape());
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(Error::shape("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::of(epsilon);
        let w = T::of(width as f64);
        let mut normalized = vec![T::zero(); rows * width];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            let row = &tx.data()[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..width {
                let xh = (row[i] - mean) * is;
                normalized[r * width + i] = xh;
                out[r * width + i] = xh * g[i] + b[i];
            }
        }
        let out = Tensor::from_parts_unchecked(tx.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Backpropagates from a scalar `loss`, accumulating into the gradient of
    /// every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                continue;
            }
            if let Some(g) = g {
                match &mut node.grad {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(g) {
                            *e = *e + v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.wants(a) {
                    let da = grad_slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        let bb = if shared_rhs { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        gemm(
                            MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            MatView::transposed(bb, k, n),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.wants(b) {
                    let db = grad_slot(grads, b, self.numel(b));
                    if shared_rhs {
                        gemm(
                            MatView::transposed(ad, batch * m, k),
                            MatView::row_major(g, batch * m, n),
                            db,
                            true,
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                MatView::transposed(&ad[bi * m * k..(bi + 1) * m * k], m, k),
                                MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                true,
                            );
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(grad_slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    add_into(grad_slot(grads, a, g.len()), g);
                }
                if self.wants(b) {
                    for (d, &x) in grad_slot(grads, b, g.len()).iter_mut().zip(g) {
                        *d = *d - x;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    for ((d, &x), &y) in grad_slot(grads, a, g.len()).iter_mut().zip(g).zip(bd) {
                        *d = *d + x * y;
                    }
                }
                if self.wants(b) {
                    for ((d, &x), &y) in grad_slot(grads, b, g.len()).iter_mut().zip(g).zip(ad) {
                        *d = *d + x * y;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if self.wants(a) {
                    for (d, &x) in grad_slot(grads, a, g.len()).iter_mut().zip(g) {
                        *d = *d + x * factor;
                    }
                }
            }
            &Op::AddSuffix { a, b } => {
                if self.wants(a) {
                    add_into(grad_slot(grads, a, g.len()), g);
                }
                if self.wants(b) {
                    let nb = self.numel(b);
                    let db = grad_slot(grads, b, nb);
                    for chunk in g.chunks(nb) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::MulPrefix { a, s } => {
                let (ad, sd) = (self.value(a).data(), self.value(s).data());
                let inner = g.len() / sd.len();
                if self.wants(a) {
                    let da = grad_slot(grads, a, g.len());
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] * sd[idx / inner];
                    }
                }
                if self.wants(s) {
                    let ds = grad_slot(grads, s, sd.len());
                    for (c, d) in ds.iter_mut().enumerate() {
                        let range = c * inner..(c + 1) * inner;
                        let dot = g[range.clone()]
                            .iter()
                            .zip(&ad[range])
                            .map(|(&x, &y)| x * y)
                            .sum::<T>();
                        *d = *d + dot;
                    }
                }
            }
            &Op::Relu { a } => {
                if self.wants(a) {
                    let ad = self.value(a).data();
                    for ((d, &x), &v) in grad_slot(grads, a, g.len()).iter_mut().zip(g).zip(ad) {
                        if v > T::zero() {
                            *d = *d + x;
                        }
                    }
                }
            }
            &Op::Sigmoid { a } => {
                if self.wants(a) {
                    let y = node.value.data();
                    for ((d, &x), &s) in grad_slot(grads, a, g.len()).iter_mut().zip(g).zip(y) {
                        *d = *d + x * s * (T::one() - s);
                    }
                }
            }
            &Op::Transpose { a } => {
                if self.wants(a) {
                    // node shape is [.., c, r]; transposing back yields [.., r, c]
                    let s = node.value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    add_into(grad_slot(grads, a, g.len()), &transpose_last(g, r, c));
                }
            }
            Op::Concat { parts } => {
                let (rows, total) = split_last(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.wants(p) {
                        let dp = grad_slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::MeanLast { a } => {
                if self.wants(a) {
                    let width = *self.shape(a).last().unwrap();
                    let inv = T::one() / T::of(width as f64);
                    let da = grad_slot(grads, a, g.len() * width);
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx / width] * inv;
                    }
                }
            }
            &Op::SumAll { a } => {
                if self.wants(a) {
                    let n = self.numel(a);
                    for d in grad_slot(grads, a, n).iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    add_into(grad_slot(grads, a, g.len()), g);
                }
            }
            &Op::Slice { a, axis, start } => {
                if self.wants(a) {
                    let sa = self.shape(a);
                    let (outer, extent, inner) = axis_split(sa, axis);
                    let len = node.value.shape()[axis];
                    let da = grad_slot(grads, a, outer * extent * inner);
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        add_into(
                            &mut da[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                if self.wants(a) {
                    let y = node.value.data();
                    let (outer, extent, inner) = axis_split(node.value.shape(), axis);
                    let da = grad_slot(grads, a, g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * extent + i) * inner + j;
                            let dot = (0..extent).map(|i| y[idx(i)] * g[idx(i)]).sum::<T>();
                            for i in 0..extent {
                                let k = idx(i);
                                da[k] = da[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.wants(*a) {
                    for ((d, &x), &m) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(mask) {
                        *d = *d + x * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, width) = split_last(node.value.shape());
                let gd = self.value(*gain).data();
                if self.wants(*x) {
                    let w = T::of(width as f64);
                    let dx = grad_slot(grads, *x, rows * width);
                    let mut dxh = vec![T::zero(); width];
                    for r in 0..rows {
                        let xh = &normalized[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        for i in 0..width {
                            dxh[i] = gr[i] * gd[i];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() / w;
                        let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / w;
                        for i in 0..width {
                            let k = r * width + i;
                            dx[k] = dx[k] + inv_std[r] * (dxh[i] - m1 - xh[i] * m2);
                        }
                    }
                }
                if self.wants(*gain) {
                    let dg = grad_slot(grads, *gain, width);
                    for (idx, (&x, &xh)) in g.iter().zip(normalized).enumerate() {
                        dg[idx % width] = dg[idx % width] + x * xh;
                    }
                }
                if self.wants(*bias) {
                    let db = grad_slot(grads, *bias, width);
                    for chunk in g.chunks(width) {
                        add_into(db, chunk);
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Transposes each trailing `rows x cols` block of `data`.
fn transpose_last<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let block = rows * cols;
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
