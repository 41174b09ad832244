use std::cell::RefCell;

use super::kernels;
use super::{as_matrix, split_axis, Real, Tensor};
use crate::error::{Error, Result};

pub use super::kernels::AttnShape;

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Sum { x: usize },
    Softmax { x: usize, outer: usize, n: usize, inner: usize },
    RmsNorm { x: usize, gamma: usize, inv: Vec<T> },
    Gelu { x: usize },
    Silu { x: usize },
    Rope { x: usize, heads: usize, hd: usize, positions: Vec<usize>, base: f64 },
    Attention { q: usize, k: usize, v: usize, shape: AttnShape, probs: Vec<T> },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Reshape { x: usize },
    CrossEntropy { logits: usize, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<T>, count: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates `[rows_i × d]` tensors along the row axis.
    pub fn concat_rows(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let Some(&first) = ids.first() else {
                return Err(Error::contract("concat_rows of zero tensors"));
            };
            let d = nodes[first].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &ids {
                let t = &nodes[i].value;
                if t.shape().len() != 2 || t.cols() != d {
                    return Err(Error::shape("concat_rows", nodes[first].value.shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new([rows, d], data)?
        };
        let rg = self.needs(&ids);
        Ok(self.push(value, Op::ConcatRows { parts: ids }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);

        let acc = |grads: &mut Vec<Option<Vec<T>>>, id: usize, g: Vec<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(cur) => {
                    for (c, v) in cur.iter_mut().zip(g) {
                        *c += v;
                    }
                }
                slot => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.data();
            match &nodes[id].op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        acc(&mut grads, a, kernels::matmul_nt(&g, val(b), m, n, k));
                    }
                    if nodes[b].requires_grad {
                        acc(&mut grads, b, kernels::matmul_tn(val(a), &g, m, k, n));
                    }
                }
                &Op::Transpose { x, rows, cols } => {
                    acc(&mut grads, x, kernels::transpose(&g, cols, rows));
                }
                &Op::Add { a, b } => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                &Op::AddRow { x, bias } => {
                    let d = nodes[bias].value.len();
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, bias, gb);
                    acc(&mut grads, x, g.clone());
                }
                &Op::Mul { a, b } => {
                    let ga = g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect();
                    let gb = g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect();
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                &Op::Scale { x, c } => {
                    acc(&mut grads, x, g.iter().map(|&v| v * c).collect());
                }
                &Op::Sum { x } => {
                    acc(&mut grads, x, vec![g[0]; nodes[x].value.len()]);
                }
                &Op::Softmax { x, outer, n, inner } => {
                    let y = nodes[id].value.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                Op::RmsNorm { x, gamma, inv } => {
                    let d = nodes[*gamma].value.len();
                    let (dx, dg) = kernels::rms_norm_backward(val(*x), val(*gamma), inv, &g, d);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                }
                &Op::Gelu { x } => {
                    let gx = g.iter().zip(val(x)).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect();
                    acc(&mut grads, x, gx);
                }
                &Op::Silu { x } => {
                    let gx = g.iter().zip(val(x)).map(|(&g, &v)| g * kernels::silu_grad(v)).collect();
                    acc(&mut grads, x, gx);
                }
                Op::Rope { x, heads, hd, positions, base } => {
                    let mut gx = g.clone();
                    kernels::rope(&mut gx, positions, *heads, *hd, *base, true);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, &g, *shape);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::GatherRows { x, idx } => {
                    let d = nodes[*x].value.cols();
                    let mut gx = vec![T::zero(); nodes[*x].value.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            gx[src * d + c] += g[r * d + c];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        acc(&mut grads, p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                &Op::Reshape { x } => {
                    acc(&mut grads, x, g.clone());
                }
                Op::CrossEntropy { logits, targets, mask, probs, count } => {
                    let v = nodes[*logits].value.cols();
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let mut gl = vec![T::zero(); probs.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..v {
                            gl[r * v + c] = probs[r * v + c] * scale;
                        }
                        gl[r * v + t as usize] -= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` when the variable
    /// does not require gradients or the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(self.shapes[var.id].clone(), g.clone()).ok()
    }

    /// Like [`get`](Self::get) but substitutes zeros for a missing gradient.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>) -> Result<Var<'t, T>> {
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<(Tensor<T>, Op<T>)>,
    ) -> Result<Var<'t, T>> {
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            let (m, k) = as_matrix(x, "matmul")?;
            let (k2, n) = as_matrix(y, "matmul")?;
            if k != k2 {
                return Err(Error::shape("matmul", x.shape(), y.shape()));
            }
            let data = kernels::matmul(x.data(), y.data(), m, k, n);
            Ok((Tensor::new([m, n], data)?, Op::MatMul { a, b, m, k, n }))
        })
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let (rows, cols) = as_matrix(t, "transpose")?;
            let data = kernels::transpose(t.data(), rows, cols);
            Ok((Tensor::new([cols, rows], data)?, Op::Transpose { x, rows, cols }))
        })
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            if x.shape() != y.shape() {
                return Err(Error::shape("add", x.shape(), y.shape()));
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Op::Add { a, b }))
        })
    }

    /// Adds a length-`d` vector to every row of a `[.. × d]` tensor.
    pub fn add_row(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.id, bias.id);
        self.binary(bias, |t, bt| {
            if bt.len() != t.cols() {
                return Err(Error::shape("add_row", t.shape(), bt.shape()));
            }
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(bt.len()) {
                for (v, &bv) in row.iter_mut().zip(bt.data()) {
                    *v += bv;
                }
            }
            Ok((Tensor::new(t.shape().to_vec(), data)?, Op::AddRow { x, bias: b }))
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            if x.shape() != y.shape() {
                return Err(Error::shape("mul", x.shape(), y.shape()));
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Op::Mul { a, b }))
        })
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let data = t.data().iter().map(|&v| v * c).collect();
            Ok((Tensor::new(t.shape().to_vec(), data)?, Op::Scale { x, c }))
        })
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| Ok((Tensor::scalar(t.data().iter().copied().sum()), Op::Sum { x })))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let (outer, n, inner) = split_axis(t.shape(), axis)?;
            let mut data = t.data().to_vec();
            kernels::softmax_axis(&mut data, outer, n, inner);
            Ok((Tensor::new(t.shape().to_vec(), data)?, Op::Softmax { x, outer, n, inner }))
        })
    }

    pub fn rms_norm(&self, gamma: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (x, g) = (self.id, gamma.id);
        self.binary(gamma, |t, gt| {
            if gt.len() != t.cols() {
                return Err(Error::shape("rms_norm", t.shape(), gt.shape()));
            }
            let (y, inv) = kernels::rms_norm(t.data(), gt.data(), t.cols(), T::lit(eps));
            Ok((Tensor::new(t.shape().to_vec(), y)?, Op::RmsNorm { x, gamma: g, inv }))
        })
    }

    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let data = t.data().iter().map(|&v| kernels::gelu(v)).collect();
            Ok((Tensor::new(t.shape().to_vec(), data)?, Op::Gelu { x }))
        })
    }

    pub fn silu(&self) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let data = t.data().iter().map(|&v| kernels::silu(v)).collect();
            Ok((Tensor::new(t.shape().to_vec(), data)?, Op::Silu { x }))
        })
    }

    /// Rotary embedding on `[rows × heads·hd]`; `positions[r]` is row `r`'s
    /// sequence position.
    pub fn rope(&self, heads: usize, positions: &[usize], base: f64) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let width = t.cols();
            if heads == 0 || width % heads != 0 {
                return Err(Error::config(format!("width {width} not divisible by {heads} heads")));
            }
            let hd = width / heads;
            if !hd.is_multiple_of(2) {
                return Err(Error::config(format!("rotary head dim {hd} is odd")));
            }
            if positions.len() != t.rows() {
                return Err(Error::shape("rope", t.shape(), &[positions.len()]));
            }
            let mut data = t.data().to_vec();
            kernels::rope(&mut data, positions, heads, hd, base, false);
            let op = Op::Rope {
                x,
                heads,
                hd,
                positions: positions.to_vec(),
                base,
            };
            Ok((Tensor::new(t.shape().to_vec(), data)?, op))
        })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| {
            let d = t.cols();
            let rows = t.rows();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= rows {
                    return Err(Error::contract(format!("gather index {i} out of {rows} rows")));
                }
                data.extend_from_slice(t.row(i));
            }
            Ok((Tensor::new([idx.len(), d], data)?, Op::GatherRows { x, idx: idx.to_vec() }))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.id;
        self.unary(|t| Ok((t.clone().reshape(shape.to_vec())?, Op::Reshape { x })))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` holds.
    pub fn cross_entropy_masked(&self, targets: &[u32], mask: &[bool]) -> Result<Var<'t, T>> {
        let logits = self.id;
        self.unary(|t| {
            let (rows, v) = as_matrix(t, "cross_entropy")?;
            if targets.len() != rows || mask.len() != rows {
                return Err(Error::shape("cross_entropy", t.shape(), &[targets.len(), mask.len()]));
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::EmptyLoss);
            }
            let mut probs = t.data().to_vec();
            kernels::softmax_rows(&mut probs, v);
            let mut total = T::zero();
            for (r, (&tg, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                if tg as usize >= v {
                    return Err(Error::UnknownToken(tg));
                }
                // log-softmax computed directly for accuracy at tiny probabilities
                let row = t.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
                total += lse - row[tg as usize];
            }
            let loss = total / T::from_usize(count).unwrap();
            let op = Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            };
            Ok((Tensor::scalar(loss), op))
        })
    }
}

/// Fused scaled dot-product attention over `[batch·seq × heads·hd]` inputs.
pub fn attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    shape: AttnShape,
) -> Result<Var<'t, T>> {
    let tape = q.tape;
    let (value, op) = {
        let nodes = tape.nodes.borrow();
        let expect = [shape.rows(), shape.width()];
        for id in [q.id, k.id, v.id] {
            if nodes[id].value.shape() != expect {
                return Err(Error::shape("attention", nodes[id].value.shape(), &expect));
            }
        }
        let (out, probs) = kernels::attention_forward(
            nodes[q.id].value.data(),
            nodes[k.id].value.data(),
            nodes[v.id].value.data(),
            shape,
        );
        let op = Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            shape,
            probs,
        };
        (Tensor::new(expect.to_vec(), out)?, op)
    };
    let rg = tape.needs(&[q.id, k.id, v.id]);
    Ok(tape.push(value, op, rg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64([3], &[1.0, -2.0, 5.0]).unwrap());
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64([1], &[3.0]).unwrap());
        let y = tape.param(Tensor::from_f64([1], &[-7.0]).unwrap());
        let z = x.mul(y).unwrap().sum().unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-7.0]);
        assert_eq!(g.get(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn diamond_fan_out_accumulates() {
        // f(x) = sum(x*x + 3x) with x used three times; df/dx = 2x + 3
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64([2], &[0.5, -4.0]).unwrap());
        let sq = x.mul(x).unwrap();
        let lin = x.scale(3.0).unwrap();
        let f = sq.add(lin).unwrap().sum().unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([2], 2.0));
        let c = tape.constant(Tensor::full([2], 3.0));
        let g = tape.backward(x.mul(c).unwrap().sum().unwrap()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_mask() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros([3, 7]));
        let l = logits.cross_entropy_masked(&[1, 2, 3], &[true, false, true]).unwrap();
        assert!((l.item() - 7f64.ln()).abs() < 1e-12);
        let l2 = logits.cross_entropy_masked(&[1, 6, 3], &[true, false, true]).unwrap();
        assert_eq!(l.item(), l2.item());
        assert!(matches!(
            logits.cross_entropy_masked(&[0, 0, 0], &[false; 3]),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn cross_entropy_confident_prediction_goes_to_zero() {
        let tape = Tape::<f64>::new();
        let mut data = vec![0.0; 8];
        data[2] = 60.0;
        data[4 + 1] = 60.0;
        let logits = tape.constant(Tensor::new([2, 4], data).unwrap());
        let l = logits.cross_entropy_masked(&[2, 1], &[true, true]).unwrap();
        assert!(l.item() < 1e-20);
    }
}
