//! Dense row-major f64 matrices.
//!
//! Everything the model computes is rank-2 (vectors are `1 x n`, scalars
//! `1 x 1`). Matrix products go through OpenBLAS when the `system-blas`
//! feature is enabled (the default); otherwise a pure-Rust kernel is used.
//! Both paths are deterministic for fixed inputs on a fixed build.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Mismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("invalid shape for {op}: got {shape:?}, {detail}")]
    Invalid {
        op: &'static str,
        shape: [usize; 2],
        detail: String,
    },
}

/// A dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::Invalid {
                op: "from_vec",
                shape: [rows, cols],
                detail: format!("data length {} != rows*cols {}", data.len(), rows * cols),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(ShapeError::Invalid {
                    op: "from_rows",
                    shape: [r, c],
                    detail: format!("ragged row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(r, c, data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Tensor { rows: 1, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Standard normal entries scaled by `std`, drawn in row-major order.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        self.check_same("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        self.check_same("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), ShapeError> {
        self.check_same("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    fn check_same(&self, op: &'static str, other: &Tensor) -> Result<(), ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::Mismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// `A (m x k) * B (k x n) -> m x n`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    if a.cols != b.rows {
        return Err(ShapeError::Mismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Tensor::zeros(a.rows, b.cols);
    kernel::gemm(
        false, false, a.rows, b.cols, a.cols, &a.data, a.cols, &b.data, b.cols, &mut c.data,
    );
    Ok(c)
}

/// `A (m x k) * B^T (n x k) -> m x n`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    if a.cols != b.cols {
        return Err(ShapeError::Mismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Tensor::zeros(a.rows, b.rows);
    kernel::gemm(
        false, true, a.rows, b.rows, a.cols, &a.data, a.cols, &b.data, b.cols, &mut c.data,
    );
    Ok(c)
}

/// `A^T (k x m) * B (k x n) -> m x n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    if a.rows != b.rows {
        return Err(ShapeError::Mismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Tensor::zeros(a.cols, b.cols);
    kernel::gemm(
        true, false, a.cols, b.cols, a.rows, &a.data, a.cols, &b.data, b.cols, &mut c.data,
    );
    Ok(c)
}

#[cfg(feature = "system-blas")]
mod kernel {
    //! cblas_dgemm from the system OpenBLAS, pinned to one thread per call;
    //! outer-level parallelism happens across items instead.

    use std::sync::Once;

    const ROW_MAJOR: i32 = 101;
    const NO_TRANS: i32 = 111;
    const TRANS: i32 = 112;

    #[link(name = "openblas")]
    extern "C" {
        fn cblas_dgemm(
            layout: i32,
            transa: i32,
            transb: i32,
            m: i32,
            n: i32,
            k: i32,
            alpha: f64,
            a: *const f64,
            lda: i32,
            b: *const f64,
            ldb: i32,
            beta: f64,
            c: *mut f64,
            ldc: i32,
        );
        fn openblas_set_num_threads(n: i32);
    }

    static INIT: Once = Once::new();

    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
    ) {
        INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
        if m == 0 || n == 0 {
            return;
        }
        unsafe {
            cblas_dgemm(
                ROW_MAJOR,
                if ta { TRANS } else { NO_TRANS },
                if tb { TRANS } else { NO_TRANS },
                m as i32,
                n as i32,
                k as i32,
                1.0,
                a.as_ptr(),
                lda as i32,
                b.as_ptr(),
                ldb as i32,
                0.0,
                c.as_mut_ptr(),
                n as i32,
            );
        }
    }
}

#[cfg(not(feature = "system-blas"))]
mod kernel {
    //! Pure-Rust fallback kernels. Loop orders are chosen so the inner loop
    //! runs over independent outputs (auto-vectorizable without changing the
    //! per-element accumulation order).

    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
    ) {
        match (ta, tb) {
            (false, false) => nn(m, n, k, a, lda, b, ldb, c),
            (false, true) => nt(m, n, k, a, lda, b, ldb, c),
            (true, false) => tn(m, n, k, a, lda, b, ldb, c),
            (true, true) => unreachable!("tt product is never used"),
        }
    }

    fn nn(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64]) {
        for i in 0..m {
            let ar = &a[i * lda..i * lda + k];
            let cr = &mut c[i * n..(i + 1) * n];
            for (p, &aip) in ar.iter().enumerate() {
                let br = &b[p * ldb..p * ldb + n];
                for j in 0..n {
                    cr[j] += aip * br[j];
                }
            }
        }
    }

    fn nt(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64]) {
        for i in 0..m {
            let ar = &a[i * lda..i * lda + k];
            for j in 0..n {
                let br = &b[j * ldb..j * ldb + k];
                let mut acc = [0.0f64; 4];
                let chunks = k / 4;
                for ch in 0..chunks {
                    let o = ch * 4;
                    for l in 0..4 {
                        acc[l] += ar[o + l] * br[o + l];
                    }
                }
                let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
                for l in chunks * 4..k {
                    s += ar[l] * br[l];
                }
                c[i * n + j] = s;
            }
        }
    }

    fn tn(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64]) {
        for p in 0..k {
            let ar = &a[p * lda..p * lda + m];
            let br = &b[p * ldb..p * ldb + n];
            for (i, &api) in ar.iter().enumerate() {
                let cr = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    cr[j] += api * br[j];
                }
            }
        }
    }
}
