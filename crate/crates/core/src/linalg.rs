//! Small dense `f64` linear algebra: symmetric eigendecomposition by cyclic
//! Jacobi rotations and random orthogonal matrices.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.normal()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for t in 0..self.cols {
                let a = self[(i, t)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(t);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * self^T`.
    pub fn gram(&self) -> Mat {
        let n = self.rows;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `max |M^T M - I|`, the orthogonality defect of a square matrix.
    pub fn orthogonality_defect(&self) -> f64 {
        let mtm = self.transpose().matmul(self).expect("square");
        mtm.max_abs_diff(&Mat::identity(self.cols))
    }

    /// Embeds square blocks along the diagonal.
    pub fn block_diag(blocks: &[&Mat]) -> Mat {
        let n: usize = blocks.iter().map(|b| b.rows).sum();
        let mut m = Mat::zeros(n, n);
        let mut off = 0;
        for b in blocks {
            for i in 0..b.rows {
                for j in 0..b.cols {
                    m[(off + i, off + j)] = b[(i, j)];
                }
            }
            off += b.rows;
        }
        m
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector of `values[i]`, sign-normalized so that
    /// its largest-magnitude entry is positive.
    pub vectors: Mat,
    pub sweeps: usize,
}

pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver. Sweeps over `(p, q)` pairs in row order until the
/// off-diagonal Frobenius norm drops below `1e-10 * ||A||_F`; fails after 100 sweeps.
pub fn sym_eigen(a: &Mat) -> Result<SymEigen> {
    let n = a.rows;
    if n != a.cols {
        return Err(Error::dim(format!("sym_eigen needs a square matrix, got {}x{}", a.rows, a.cols)));
    }
    if let Some(bad) = a.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite matrix entry {bad}")));
    }
    let mut a = a.clone();
    let mut v = Mat::identity(n);
    let target = JACOBI_TOL * a.frobenius();
    let mut sweeps = 0;
    while off_diagonal_norm(&a) > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::numeric(format!(
                "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {:.3e}, target {target:.3e})",
                off_diagonal_norm(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        let mut best = 0;
        for k in 0..n {
            if v[(k, i)].abs() > v[(best, i)].abs() {
                best = k;
            }
        }
        let sign = if v[(best, i)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(r, k)] = sign * v[(k, i)];
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Orthonormalizes the columns of `a` (which must have full column rank) by
/// modified Gram-Schmidt with one reorthogonalization pass. This is the `Q` of a
/// thin QR factorization with positive `R` diagonal.
pub fn qr_q(a: &Mat) -> Result<Mat> {
    let (m, n) = (a.rows, a.cols);
    let mut q = a.clone();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..m).map(|k| q[(k, i)] * q[(k, j)]).sum();
                for k in 0..m {
                    q[(k, j)] -= dot * q[(k, i)];
                }
            }
        }
        let norm: f64 = (0..m).map(|k| q[(k, j)] * q[(k, j)]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numeric(format!("qr_q: column {j} is rank deficient")));
        }
        for k in 0..m {
            q[(k, j)] /= norm;
        }
    }
    Ok(q)
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix).
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Mat {
    loop {
        if let Ok(q) = qr_q(&Mat::gaussian(n, n, rng)) {
            return q;
        }
    }
}
