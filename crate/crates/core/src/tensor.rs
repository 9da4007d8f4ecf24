//! Dense real tensors, double precision.
//!
//! Shapes are explicit; there is no broadcasting beyond scalar * tensor.
//! Shape mismatches are contract violations and panic with both shapes in
//! the message.

/// A dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            n == data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            n == self.data.len(),
            "cannot reshape {:?} ({} elems) to {:?}",
            self.shape,
            self.data.len(),
            shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_same_shape(self, other, "zip");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_same_shape(self, other, "add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }
}

pub fn assert_same_shape(a: &Tensor, b: &Tensor, ctx: &str) {
    assert!(
        a.shape == b.shape,
        "shape mismatch in {ctx}: {:?} vs {:?}",
        a.shape,
        b.shape
    );
}

/// Row-major matmul: [r x k] * [k x c] -> [r x c].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ashape, bshape) = (a.shape(), b.shape());
    assert!(
        ashape.len() == 2 && bshape.len() == 2 && ashape[1] == bshape[0],
        "shape mismatch in matmul: {ashape:?} vs {bshape:?}"
    );
    let (r, k, c) = (ashape[0], ashape[1], bshape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let av = a.data()[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[l * c..(l + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(r, c, out)
}

/// [r x k]^T * [r x c] -> [k x c], used by matmul adjoints.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[1];
    assert!(b.shape()[0] == r, "shape mismatch in matmul_at_b");
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        for l in 0..k {
            let av = a.data()[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..c {
                out[l * c + j] += av * b.data()[i * c + j];
            }
        }
    }
    Tensor::matrix(k, c, out)
}

/// [r x k] * [c x k]^T -> [r x c], used by matmul adjoints.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[0];
    assert!(b.shape()[1] == k, "shape mismatch in matmul_a_bt");
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..k {
                s += a.data()[i * k + l] * b.data()[j * k + l];
            }
            out[i * c + j] = s;
        }
    }
    Tensor::matrix(r, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(matmul(&eye, &x), x);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]);
        let b = Tensor::matrix(2, 2, vec![0.0; 4]);
        matmul(&a, &b);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(2, 2, vec![1., -1., 0.5, 2.]);
        // a^T b
        let atb = matmul_at_b(&a, &b);
        let at = Tensor::matrix(3, 2, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(atb, matmul(&at, &b));
        // b a (via a_bt with transposed second arg semantics)
        let c = Tensor::matrix(4, 3, vec![1.; 12]);
        let abt = matmul_a_bt(&a, &c);
        let ct = Tensor::matrix(3, 4, vec![1.; 12]);
        assert_eq!(abt, matmul(&a, &ct));
    }
}
