//! Dense f64 tensors with a leading batch dimension.
//!
//! Every value that flows through the compute graph is a `Tensor` of shape
//! `(batch, rows, cols)`, row-major within each batch item. Parameters and
//! other shared values use `batch == 1` and broadcast across the batch.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, rows: usize, cols: usize) -> Self {
        Tensor { batch, rows, cols, data: vec![0.0; batch * rows * cols] }
    }

    pub fn filled(batch: usize, rows: usize, cols: usize, v: f64) -> Self {
        Tensor { batch, rows, cols, data: vec![v; batch * rows * cols] }
    }

    pub fn from_vec(batch: usize, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), batch * rows * cols, "data length does not match shape");
        Tensor { batch, rows, cols, data }
    }

    /// Single batch item from row-major data.
    pub fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_vec(1, rows, cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { batch: 1, rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_fn(batch: usize, rows: usize, cols: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(b, r, c));
                }
            }
        }
        Tensor { batch, rows, cols, data }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, r: usize, c: usize) -> f64 {
        self.data[(b * self.rows + r) * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, b: usize, r: usize, c: usize, v: f64) {
        self.data[(b * self.rows + r) * self.cols + c] = v;
    }

    /// Row-major slice of one batch item.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.rows * self.cols;
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Same data, new shape. Total length must match.
    pub fn reshaped(&self, batch: usize, rows: usize, cols: usize) -> Tensor {
        assert_eq!(batch * rows * cols, self.data.len(), "reshape must preserve length");
        Tensor { batch, rows, cols, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            batch: self.batch,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_in_place shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// self += a * other
    pub fn axpy_in_place(&mut self, a: f64, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += a * y;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Reverse batch items along the row axis.
    pub fn reversed_rows(&self) -> Tensor {
        let mut out = Tensor::zeros(self.batch, self.rows, self.cols);
        for b in 0..self.batch {
            let src = self.item(b);
            let dst = out.item_mut(b);
            for r in 0..self.rows {
                let s = &src[r * self.cols..(r + 1) * self.cols];
                let d = &mut dst[(self.rows - 1 - r) * self.cols..(self.rows - r) * self.cols];
                d.copy_from_slice(s);
            }
        }
        out
    }

    /// Fill with N(0, std^2) samples via Box-Muller.
    pub fn randn_fill(&mut self, rng: &mut impl Rng, std: f64) {
        for v in &mut self.data {
            *v = randn(rng) * std;
        }
    }

    /// Fill with U(-bound, bound) samples.
    pub fn uniform_fill(&mut self, rng: &mut impl Rng, bound: f64) {
        for v in &mut self.data {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
        }
    }
}

/// One standard normal sample (Box-Muller).
pub fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// C = op(A) * op(B) with batch broadcasting (any operand may have batch 1).
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "matmul inner dimension mismatch: ({m},{k}) x ({kb},{n})");
    let batch = broadcast_batch(a.batch, b.batch);
    let mut out = Tensor::zeros(batch, m, n);
    matmul_acc(&mut out, a, ta, b, tb, 0.0);
    out
}

/// C = beta * C + op(A) * op(B).
///
/// If C has batch 1 while A and B are batched, per-item products are summed
/// into the single C item (the reduction used for shared-weight gradients).
pub fn matmul_acc(out: &mut Tensor, a: &Tensor, ta: bool, b: &Tensor, tb: bool, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    assert_eq!((out.rows, out.cols), (m, n), "matmul output shape mismatch");
    let batch = broadcast_batch(a.batch, b.batch);

    // Batched items sharing one operand flatten into a single product:
    //  - [A1; A2; ...] * B stacks output rows (shared right operand);
    //  - sum_i A_i^T * C_i equals the flattened A^T * C (shared-weight
    //    gradient reduction).
    if batch > 1 && !ta && b.batch == 1 && out.batch == batch {
        let (rsb, csb) = strides(b, tb);
        unsafe {
            matrixmultiply::dgemm(
                batch * a.rows,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.cols as isize,
                1,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    if batch > 1 && out.batch == 1 && a.batch == batch && b.batch == batch && ta && !tb {
        unsafe {
            matrixmultiply::dgemm(
                m,
                batch * a.rows,
                n,
                1.0,
                a.data.as_ptr(),
                1,
                a.cols as isize,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                beta,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    let a_step = a.rows * a.cols;
    let b_step = b.rows * b.cols;
    let c_step = out.rows * out.cols;

    if out.batch == batch {
        for i in 0..batch {
            let ai = if a.batch == 1 { 0 } else { i };
            let bi = if b.batch == 1 { 0 } else { i };
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr().add(ai * a_step),
                    rsa,
                    csa,
                    b.data.as_ptr().add(bi * b_step),
                    rsb,
                    csb,
                    beta,
                    out.data.as_mut_ptr().add(i * c_step),
                    n as isize,
                    1,
                );
            }
        }
    } else {
        assert_eq!(out.batch, 1, "matmul_acc output batch must be n or 1");
        for i in 0..batch {
            let ai = if a.batch == 1 { 0 } else { i };
            let bi = if b.batch == 1 { 0 } else { i };
            let beta_i = if i == 0 { beta } else { 1.0 };
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr().add(ai * a_step),
                    rsa,
                    csa,
                    b.data.as_ptr().add(bi * b_step),
                    rsb,
                    csb,
                    beta_i,
                    out.data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
}

fn strides(t: &Tensor, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, t.cols as isize)
    } else {
        (t.cols as isize, 1)
    }
}

fn broadcast_batch(a: usize, b: usize) -> usize {
    if a == b {
        a
    } else if a == 1 {
        b
    } else if b == 1 {
        a
    } else {
        panic!("incompatible batch sizes {a} and {b}");
    }
}
