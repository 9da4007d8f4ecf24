//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles;
//! [`backward`] walks the recorded graph once from a scalar root and
//! returns adjoints. The graph is acyclic by construction (nodes only
//! reference earlier nodes). [`Var::stop_gradient`] marks a node whose
//! value passes through unchanged but whose adjoint flow to parents is
//! cut; this is the primitive the variance-reduced estimator is built on.
//!
//! Completed tapes are immutable and may be read concurrently; tape
//! construction is single-threaded.
//!
//! ```
//! use sdebnn::autodiff::{backward, Tape};
//! use sdebnn::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.mul(x).sum(); // sum of squares
//! let grads = backward(loss);
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use std::cell::{Ref, RefCell};

use crate::tensor::{assert_same_shape, matmul, matmul_a_bt, matmul_at_b, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Tanh(usize),
    Softplus(usize),
    Swish(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sum(usize),
    Dot(usize, usize),
    Concat(usize, usize),
    ConcatCols(usize, usize),
    Slice(usize, usize),
    Reshape(usize),
    AddRow(usize, usize),
    GatherRows(usize, Vec<usize>),
    LogSumExpRows(usize),
    // parent kept for graph provenance; backward intentionally never
    // propagates through it
    StopGradient(#[allow(dead_code)] usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// The recording tape. One per differentiable computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A leaf node: parameter or constant input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    /// Number of recorded nodes; used by the memory instrumentation.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of recorded nodes whose value holds at least `min_len`
    /// elements. Proxy for "full states retained" when profiling the
    /// backprop-through-solver path.
    pub fn count_values_at_least(&self, min_len: usize) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.value.len() >= min_len)
            .count()
    }
}

/// Handle to one tape node. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    /// The tape this handle was recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.idx].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape(&a, &b, "add");
            a.zip(&b, |x, y| x + y)
        };
        self.tape.push(Op::Add(self.idx, other.idx), v)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape(&a, &b, "sub");
            a.zip(&b, |x, y| x - y)
        };
        self.tape.push(Op::Sub(self.idx, other.idx), v)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape(&a, &b, "mul");
            a.zip(&b, |x, y| x * y)
        };
        self.tape.push(Op::Mul(self.idx, other.idx), v)
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.tape.push(Op::Neg(self.idx), v)
    }

    /// Scalar-constant multiple.
    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.tape.push(Op::Scale(self.idx, c), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.push(Op::AddScalar(self.idx), v)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = matmul(&self.value(), &other.value());
        self.tape.push(Op::Matmul(self.idx, other.idx), v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.push(Op::Tanh(self.idx), v)
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.tape.push(Op::Softplus(self.idx), v)
    }

    /// swish(x) = x * sigmoid(x).
    pub fn swish(self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.tape.push(Op::Swish(self.idx), v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.push(Op::Exp(self.idx), v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.tape.push(Op::Ln(self.idx), v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.push(Op::Square(self.idx), v)
    }

    /// Sum of all elements, as a scalar-shaped tensor.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push(Op::Sum(self.idx), v)
    }

    /// Inner product of two same-shape tensors, as a scalar.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert_same_shape(&a, &b, "dot");
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        };
        self.tape.push(Op::Dot(self.idx, other.idx), v)
    }

    /// Concatenation of two 1-D tensors.
    pub fn concat(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            assert!(
                a.shape().len() == 1 && b.shape().len() == 1,
                "concat expects 1-D tensors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            );
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::vector(data)
        };
        self.tape.push(Op::Concat(self.idx, other.idx), v)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            assert!(
                sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0],
                "concat_cols shape mismatch: {sa:?} vs {sb:?}"
            );
            let (r, ca, cb) = (sa[0], sa[1], sb[1]);
            let mut data = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
            }
            Tensor::matrix(r, ca + cb, data)
        };
        self.tape.push(Op::ConcatCols(self.idx, other.idx), v)
    }

    /// Contiguous 1-D slice of a flat tensor.
    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let v = {
            let a = self.value();
            assert!(
                start + len <= a.len(),
                "slice [{start}, {}) out of bounds for length {}",
                start + len,
                a.len()
            );
            Tensor::vector(a.data()[start..start + len].to_vec())
        };
        self.tape.push(Op::Slice(self.idx, start), v)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let v = self.value().clone().reshape(shape);
        self.tape.push(Op::Reshape(self.idx), v)
    }

    /// Add a row vector [c] to every row of a matrix [r x c] (bias add).
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let v = {
            let (a, b) = (self.value(), row.value());
            let sa = a.shape();
            assert!(
                sa.len() == 2 && b.shape() == [sa[1]],
                "add_row shape mismatch: {:?} vs {:?}",
                sa,
                b.shape()
            );
            let (r, c) = (sa[0], sa[1]);
            let mut data = a.data().to_vec();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += b.data()[j];
                }
            }
            Tensor::matrix(r, c, data)
        };
        self.tape.push(Op::AddRow(self.idx, row.idx), v)
    }

    /// Pick one element per row: out[i] = self[i, idx[i]].
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let v = {
            let a = self.value();
            let sa = a.shape();
            assert!(
                sa.len() == 2 && indices.len() == sa[0],
                "gather_rows expects [r x c] with r indices, got {:?} and {} indices",
                sa,
                indices.len()
            );
            let c = sa[1];
            let data = indices
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    assert!(j < c, "class index {j} out of range for {c} classes");
                    a.data()[i * c + j]
                })
                .collect();
            Tensor::vector(data)
        };
        self.tape
            .push(Op::GatherRows(self.idx, indices.to_vec()), v)
    }

    /// Row-wise log-sum-exp of a matrix, returns [r].
    pub fn logsumexp_rows(self) -> Var<'t> {
        let v = {
            let a = self.value();
            let sa = a.shape();
            assert!(sa.len() == 2, "logsumexp_rows expects a matrix");
            let (r, c) = (sa[0], sa[1]);
            let data = (0..r)
                .map(|i| {
                    let row = &a.data()[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::vector(data)
        };
        self.tape.push(Op::LogSumExpRows(self.idx), v)
    }

    /// Identity on values; blocks adjoint flow to the input.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.push(Op::StopGradient(self.idx), v)
    }
}

/// Adjoints of every node reachable from a backward pass.
pub struct Adjoints<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Tensor>>,
}

impl<'t> Adjoints<'t> {
    /// Gradient of the root w.r.t. `v`; zero tensor when no contribution.
    pub fn wrt(&self, v: Var<'t>) -> Tensor {
        assert!(
            std::ptr::eq(self.tape, v.tape),
            "gradient queried on a different tape"
        );
        match self.grads.get(v.idx) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(v.shape()),
        }
    }
}

/// Reverse sweep from a scalar-valued root.
pub fn backward(root: Var<'_>) -> Adjoints<'_> {
    let nodes = root.tape.nodes.borrow();
    assert!(
        nodes[root.idx].value.len() == 1,
        "backward requires a scalar root, got shape {:?}",
        nodes[root.idx].value.shape()
    );

    let mut grads: Vec<Option<Tensor>> = vec![None; root.idx + 1];
    grads[root.idx] = Some(Tensor::scalar(1.0));

    let accum = |slot: &mut Option<Tensor>, contrib: Tensor| match slot {
        Some(g) => g.add_assign(&contrib),
        None => *slot = Some(contrib),
    };

    for idx in (0..=root.idx).rev() {
        let g = match grads[idx].clone() {
            Some(g) => g,
            None => continue,
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                accum(&mut grads[*a], g.clone());
                accum(&mut grads[*b], g.clone());
            }
            Op::Sub(a, b) => {
                accum(&mut grads[*a], g.clone());
                accum(&mut grads[*b], g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip(&nodes[*b].value, |gv, bv| gv * bv);
                let gb = g.zip(&nodes[*a].value, |gv, av| gv * av);
                accum(&mut grads[*a], ga);
                accum(&mut grads[*b], gb);
            }
            Op::Neg(a) => accum(&mut grads[*a], g.scale(-1.0)),
            Op::Scale(a, c) => accum(&mut grads[*a], g.scale(*c)),
            Op::AddScalar(a) => accum(&mut grads[*a], g.clone()),
            Op::Matmul(a, b) => {
                let ga = matmul_a_bt(&g, &nodes[*b].value);
                let gb = matmul_at_b(&nodes[*a].value, &g);
                accum(&mut grads[*a], ga);
                accum(&mut grads[*b], gb);
            }
            Op::Tanh(a) => {
                let ga = g.zip(&node.value, |gv, y| gv * (1.0 - y * y));
                accum(&mut grads[*a], ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip(&nodes[*a].value, |gv, x| gv * sigmoid(x));
                accum(&mut grads[*a], ga);
            }
            Op::Swish(a) => {
                let ga = g.zip(&nodes[*a].value, |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                accum(&mut grads[*a], ga);
            }
            Op::Exp(a) => {
                let ga = g.zip(&node.value, |gv, y| gv * y);
                accum(&mut grads[*a], ga);
            }
            Op::Ln(a) => {
                let ga = g.zip(&nodes[*a].value, |gv, x| gv / x);
                accum(&mut grads[*a], ga);
            }
            Op::Square(a) => {
                let ga = g.zip(&nodes[*a].value, |gv, x| gv * 2.0 * x);
                accum(&mut grads[*a], ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                let parent_shape = nodes[*a].value.shape().to_vec();
                accum(&mut grads[*a], Tensor::zeros(parent_shape).map(|_| gv));
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                accum(&mut grads[*a], nodes[*b].value.scale(gv));
                accum(&mut grads[*b], nodes[*a].value.scale(gv));
            }
            Op::Concat(a, b) => {
                let na = nodes[*a].value.len();
                let nb = nodes[*b].value.len();
                accum(&mut grads[*a], Tensor::vector(g.data()[..na].to_vec()));
                accum(
                    &mut grads[*b],
                    Tensor::vector(g.data()[na..na + nb].to_vec()),
                );
            }
            Op::ConcatCols(a, b) => {
                let sa = nodes[*a].value.shape().to_vec();
                let sb = nodes[*b].value.shape().to_vec();
                let (r, ca, cb) = (sa[0], sa[1], sb[1]);
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                }
                accum(&mut grads[*a], Tensor::matrix(r, ca, da));
                accum(&mut grads[*b], Tensor::matrix(r, cb, db));
            }
            Op::Slice(a, start) => {
                let mut full = Tensor::zeros(vec![nodes[*a].value.len()]);
                full.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                // parent may be any shape with that flat length
                let pshape = nodes[*a].value.shape().to_vec();
                accum(&mut grads[*a], full.reshape(pshape));
            }
            Op::Reshape(a) => {
                let pshape = nodes[*a].value.shape().to_vec();
                accum(&mut grads[*a], g.clone().reshape(pshape));
            }
            Op::AddRow(a, b) => {
                let sa = nodes[*a].value.shape().to_vec();
                let (r, c) = (sa[0], sa[1]);
                let mut row = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        row[j] += g.data()[i * c + j];
                    }
                }
                accum(&mut grads[*a], g.clone());
                accum(&mut grads[*b], Tensor::vector(row));
            }
            Op::GatherRows(a, indices) => {
                let sa = nodes[*a].value.shape().to_vec();
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for (i, &j) in indices.iter().enumerate() {
                    da[i * c + j] = g.data()[i];
                }
                accum(&mut grads[*a], Tensor::matrix(r, c, da));
            }
            Op::LogSumExpRows(a) => {
                let input = &nodes[*a].value;
                let sa = input.shape().to_vec();
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let lse = node.value.data()[i];
                    let gv = g.data()[i];
                    for j in 0..c {
                        da[i * c + j] = gv * (input.data()[i * c + j] - lse).exp();
                    }
                }
                accum(&mut grads[*a], Tensor::matrix(r, c, da));
            }
        }
    }

    drop(nodes);
    Adjoints {
        tape: root.tape,
        grads,
    }
}
