//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive op as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse order from a scalar output and
//! returns a [`Gradients`] map. `backward` borrows the tape immutably, so it
//! can be called any number of times and always yields identical results.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
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
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    /// A differentiable input (model parameter, trigger, mask).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.zip_with(&self.nodes[ib].value, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.zip_with(&self.nodes[ib].value, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.zip_with(&self.nodes[ib].value, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(ia, ib)))
    }

    fn row_broadcast(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = &self.nodes[ia].value;
        let b = &self.nodes[ib].value;
        let (n, m) = a.dims2()?;
        if b.len() != m {
            return Err(Error::dim(format!("row broadcast of {} values onto {n}×{m}", b.len())));
        }
        let data = a
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::matrix(n, m, data)
    }

    /// `a[n×m] + b[m]`, adding `b` to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.row_broadcast(ia, ib, |x, y| x + y)?;
        Ok(self.push(value, Op::AddRow(ia, ib)))
    }

    /// `a[n×m] ⊙ b[m]`, scaling every row elementwise by `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.row_broadcast(ia, ib, |x, y| x * y)?;
        Ok(self.push(value, Op::MulRow(ia, ib)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(value, Op::Relu(ia)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x * c);
        Ok(self.push(value, Op::Scale(ia, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x + c);
        Ok(self.push(value, Op::AddScalar(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized with
    /// log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let z = &self.nodes[il].value;
        let (n, c) = z.dims2()?;
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &y) in z.data().chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        let op = Op::SoftmaxCrossEntropy { logits: il, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::new(self.nodes[il].value.shape().to_vec(), vec![1.0])?);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose()?)?)?;
                    accumulate(&mut grads, *b, av.transpose()?.matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.map(|v| -v))?;
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.zip_with(bv, |x, y| x * y)?)?;
                    accumulate(&mut grads, *b, g.zip_with(av, |x, y| x * y)?)?;
                }
                Op::AddRow(a, b) => {
                    let m = self.nodes[*b].value.len();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape_b = self.nodes[*b].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, Tensor::new(shape_b, gb)?)?;
                }
                Op::MulRow(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let m = bv.len();
                    let mut ga = Vec::with_capacity(g.len());
                    let mut gb = vec![0.0; m];
                    for (grow, arow) in g.data().chunks(m).zip(av.data().chunks(m)) {
                        for j in 0..m {
                            ga.push(grow[j] * bv.data()[j]);
                            gb[j] += grow[j] * arow[j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, g.zip_with(av, |gv, x| if x > 0.0 { gv } else { 0.0 })?)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.map(|v| v * c))?;
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let shape = self.nodes[*a].value.shape();
                    let n = self.nodes[*a].value.len();
                    accumulate(&mut grads, *a, Tensor::new(shape.to_vec(), vec![gv; n])?)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let gv = g.data()[0];
                    let shape = self.nodes[*logits].value.shape().to_vec();
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = gv / n as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * c + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(shape, gl)?)?;
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { tape: self.id, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Result of a backward pass. Leaves that the output does not depend on get a
/// zero gradient.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.idx >= self.shapes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(match self.grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.idx]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let c = t.constant(Tensor::scalar(5.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        let r = t.relu(x).unwrap();
        let s = t.mul(r, x).unwrap();
        let l = t.sum(s).unwrap();
        let g1 = t.backward(l).unwrap().wrt(x).unwrap();
        let g2 = t.backward(l).unwrap().wrt(x).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn foreign_variable_is_a_tape_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.leaf(Tensor::scalar(1.0));
        let xb = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(xa, xb), Err(Error::Tape(_))));
        assert!(matches!(a.backward(xb), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((t.value(l).unwrap().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_are_stable() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::matrix(1, 2, vec![1000.0, -1000.0]).unwrap());
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        let v = t.value(l).unwrap().item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
        let g = t.backward(l).unwrap().wrt(z).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(t.softmax_cross_entropy(z, &[2]), Err(Error::Index(_))));
    }

    // Oracle: naive softmax with compensated summation, on logits small enough
    // that no stabilization is needed.
    fn naive_ce(z: &[f64], c: usize, labels: &[usize]) -> f64 {
        let mut total = 0.0f64;
        let mut comp = 0.0f64;
        for (row, &y) in z.chunks(c).zip(labels) {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let term = -(row[y].exp() / denom).ln();
            let yk = term - comp;
            let tk = total + yk;
            comp = (tk - total) - yk;
            total = tk;
        }
        total / labels.len() as f64
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        use rand::Rng;
        let mut rng = crate::seed::rng_from(11, &[]);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [0usize, 2, 1, 2];
        let mut t = Tape::new();
        let zv = t.constant(Tensor::matrix(4, 3, z.clone()).unwrap());
        let l = t.softmax_cross_entropy(zv, &labels).unwrap();
        let got = t.value(l).unwrap().item().unwrap();
        assert!((got - naive_ce(&z, 3, &labels)).abs() < 1e-13);
    }

    #[test]
    fn row_broadcast_ops_match_finite_differences() {
        let a0 = vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.4];
        let b0 = vec![0.5, -0.25, 0.8];
        let f = |v: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::matrix(2, 3, v[..6].to_vec()).unwrap());
            let b = t.leaf(Tensor::vector(v[6..].to_vec()).unwrap());
            let p = t.mul_row(a, b).unwrap();
            let q = t.add_row(p, b).unwrap();
            let r = t.mul(q, q).unwrap();
            let s = t.sum(r).unwrap();
            t.value(s).unwrap().item().unwrap()
        };
        let x: Vec<f64> = a0.iter().chain(&b0).cloned().collect();
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, a0.clone()).unwrap());
        let b = t.leaf(Tensor::vector(b0.clone()).unwrap());
        let p = t.mul_row(a, b).unwrap();
        let q = t.add_row(p, b).unwrap();
        let r = t.mul(q, q).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        let mut auto = g.wrt(a).unwrap().into_data();
        auto.extend(g.wrt(b).unwrap().into_data());
        let fd = finite_diff_grad(f, &x, 1e-5).unwrap();
        for (x, y) in auto.iter().zip(&fd) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.5, 0.0, -1.0]).unwrap());
        let zs = t.add_scalar(z, 37.5).unwrap();
        let a = t.softmax_cross_entropy(z, &[2, 0]).unwrap();
        let b = t.softmax_cross_entropy(zs, &[2, 0]).unwrap();
        let (a, b) = (t.value(a).unwrap().item().unwrap(), t.value(b).unwrap().item().unwrap());
        assert!((a - b).abs() <= 1e-9);
    }
}
