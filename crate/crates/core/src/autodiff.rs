//! Reverse-mode differentiation over batched matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Leaves are
//! either trainable (gradients are produced for them) or constants, which is
//! also how stop-gradient is expressed: feed a value back in through
//! [`Tape::constant`]. Second-order quantities such as the input-gradient
//! norm of a network are built explicitly out of first-order ops
//! (see [`Op::SiluGrad`]), so a single backward sweep suffices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, silu, silu_grad, silu_grad2, softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Silu(Var),
    SiluGrad(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    RowNorm(Var),
    SumCols(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Single use: [`Tape::backward`] may run once.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if the output did not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = Tensor::matmul_t(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x).add_row(self.value(row));
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow { x, row }, rg)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x).mul_row(self.value(row));
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow { x, row }, rg)
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let value = self.value(x).mul_col(self.value(col));
        let rg = self.rg(x) || self.rg(col);
        self.push(value, Op::MulCol { x, col }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, Op::Silu(a))
    }

    /// Elementwise derivative of SiLU, itself differentiable.
    pub fn silu_grad(&mut self, a: Var) -> Var {
        self.unary(a, silu_grad, Op::SiluGrad(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Row-wise normalisation without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (value, inv_std) = self.value(x).layer_norm(eps);
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Euclidean norm of each row, as a column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            let s: T = v.row(r).iter().map(|&x| x * x).sum();
            out.set(r, 0, s.sqrt());
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNorm(a), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_cols();
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Sum of every element, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&values);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    /// Backpropagates from a 1x1 output.
    pub fn backward(&mut self, out: Var) -> Result<Gradients<T>> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(Error::Shape(format!(
                "backward() needs a scalar output, got {}x{}; use backward_with_seed",
                shape.0, shape.1
            )));
        }
        self.backward_with_seed(out, Tensor::scalar(T::one()))
    }

    /// Backpropagates `seed` (same shape as `out`) through the tape.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves that require gradients keep theirs.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, delta: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.rg(a) {
                    // C = op(A) op(B): dop(A) = G op(B)^T
                    let da = if ta {
                        Tensor::matmul_t(bv, g, tb, true)
                    } else {
                        Tensor::matmul_t(g, bv, false, !tb)
                    };
                    acc(a, da, grads);
                }
                if self.rg(b) {
                    let db = if tb {
                        Tensor::matmul_t(g, av, true, ta)
                    } else {
                        Tensor::matmul_t(av, g, !ta, false)
                    };
                    acc(b, db, grads);
                }
            }
            &Op::AddRow { x, row } => {
                if self.rg(x) {
                    acc(x, g.clone(), grads);
                }
                if self.rg(row) {
                    acc(row, g.sum_rows(), grads);
                }
            }
            &Op::MulRow { x, row } => {
                if self.rg(x) {
                    acc(x, g.mul_row(self.value(row)), grads);
                }
                if self.rg(row) {
                    let prod = g.zip_map(self.value(x), |a, b| a * b);
                    acc(row, prod.sum_rows(), grads);
                }
            }
            &Op::MulCol { x, col } => {
                if self.rg(x) {
                    acc(x, g.mul_col(self.value(col)), grads);
                }
                if self.rg(col) {
                    let prod = g.zip_map(self.value(x), |a, b| a * b);
                    acc(col, prod.sum_cols(), grads);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone(), grads);
                acc(b, g.clone(), grads);
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone(), grads);
                acc(b, g.scale(-T::one()), grads);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    acc(a, g.zip_map(self.value(b), |x, y| x * y), grads);
                }
                if self.rg(b) {
                    acc(b, g.zip_map(self.value(a), |x, y| x * y), grads);
                }
            }
            &Op::Scale(a, s) => acc(a, g.scale(s), grads),
            &Op::AddConst(a) => acc(a, g.clone(), grads),
            &Op::Silu(a) => acc(a, g.zip_map(self.value(a), |d, x| d * silu_grad(x)), grads),
            &Op::SiluGrad(a) => acc(a, g.zip_map(self.value(a), |d, x| d * silu_grad2(x)), grads),
            &Op::Tanh(a) => {
                let y = &node.value;
                acc(a, g.zip_map(y, |d, t| d * (T::one() - t * t)), grads)
            }
            &Op::Exp(a) => acc(a, g.zip_map(&node.value, |d, e| d * e), grads),
            &Op::Softplus(a) => acc(a, g.zip_map(self.value(a), |d, x| d * sigmoid(x)), grads),
            &Op::Square(a) => {
                let two = T::one() + T::one();
                acc(a, g.zip_map(self.value(a), |d, x| d * two * x), grads)
            }
            Op::LayerNorm { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g * y))
                let y = &node.value;
                let d = T::from_usize(y.cols()).unwrap();
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().copied().sum::<T>() / d;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / d;
                    let is = inv_std[r];
                    for ((o, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = is * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, dx, grads);
            }
            &Op::RowNorm(a) => {
                let av = self.value(a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = node.value.get(r, 0);
                    if norm > T::zero() {
                        let s = g.get(r, 0) / norm;
                        for (o, &x) in da.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * x;
                        }
                    }
                }
                acc(a, da, grads);
            }
            &Op::SumCols(a) => {
                let av = self.value(a);
                let da = Tensor::from_fn(av.rows(), av.cols(), |r, _| g.get(r, 0));
                acc(a, da, grads);
            }
            &Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                acc(a, Tensor::full(r, c, g.item()), grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        acc(p, g.slice_cols(off, w), grads);
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if self.rg(x) {
                    let (r, c) = self.value(x).shape();
                    let mut dx = Tensor::zeros(r, c);
                    let w = g.cols();
                    for row in 0..r {
                        dx.row_mut(row)[start..start + w].copy_from_slice(g.row(row));
                    }
                    acc(x, dx, grads);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.exp(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::from_vec(2, 2, vec![1.0; 4]));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zero(unused), Tensor::zeros(2, 2));
    }

    #[test]
    fn constants_block_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let sq = tape.square(x);
        let stopped = tape.detach(sq);
        let y = tape.mul(stopped, x);
        let g = tape.backward(y).unwrap();
        // d/dx [sg(x^2) * x] = x^2
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        let mut out = Tensor::zeros(x0.rows(), x0.cols());
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn build(tape: &mut Tape<f64>, x: Var, w: Var) -> Var {
        let h = tape.matmul(x, w);
        let n = tape.layer_norm(h, 1e-5);
        let s = tape.silu(n);
        let sg = tape.silu_grad(s);
        let t = tape.tanh(sg);
        let e = tape.softplus(t);
        let rn = tape.row_norm(e);
        let sl = tape.slice_cols(s, 1, 2);
        let cat = tape.concat_cols(&[sl, rn]);
        let sq = tape.square(cat);
        let sc = tape.sum_cols(sq);
        let m = tape.mul_col(e, sc);
        let ex = tape.exp(m);
        tape.mean(ex)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x0 = Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
        let w0 = Tensor::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.91).cos() * 0.5);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let w = tape.param(w0.clone());
        let out = build(&mut tape, x, w);
        let g = tape.backward(out).unwrap();

        let eval = |xv: &Tensor<f64>, wv: &Tensor<f64>| {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let w = t.constant(wv.clone());
            let o = build(&mut t, x, w);
            t.value(o).item()
        };
        let nx = numeric_grad(&x0, |xv| eval(xv, &w0));
        let nw = numeric_grad(&w0, |wv| eval(&x0, wv));
        assert_close(g.get(x).unwrap(), &nx, 1e-6);
        assert_close(g.get(w).unwrap(), &nw, 1e-6);
    }

    #[test]
    fn transposed_matmul_gradients() {
        let a0 = Tensor::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.3 + 0.1);
        let b0 = Tensor::from_fn(4, 3, |r, c| (r * c) as f64 * 0.2 - 0.5);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_in = if ta { a0.clone() } else { a0.transpose() };
            let b_in = if tb { b0.clone() } else { b0.transpose() };
            let f = |av: &Tensor<f64>, bv: &Tensor<f64>| {
                let mut t = Tape::new();
                let a = t.constant(av.clone());
                let b = t.constant(bv.clone());
                let c = t.matmul_t(a, b, ta, tb);
                let s = t.square(c);
                let total = t.sum(s);
                t.value(total).item()
            };
            let mut tape = Tape::new();
            let a = tape.param(a_in.clone());
            let b = tape.param(b_in.clone());
            let c = tape.matmul_t(a, b, ta, tb);
            let s = tape.square(c);
            let out = tape.sum(s);
            let g = tape.backward(out).unwrap();
            assert_close(
                g.get(a).unwrap(),
                &numeric_grad(&a_in, |v| f(v, &b_in)),
                1e-6,
            );
            assert_close(
                g.get(b).unwrap(),
                &numeric_grad(&b_in, |v| f(&a_in, v)),
                1e-6,
            );
        }
    }
}
