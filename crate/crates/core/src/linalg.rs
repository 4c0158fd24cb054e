//! Small dense helpers for canonical correlation: thin Householder QR and a
//! cyclic Jacobi eigensolver for symmetric matrices.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds the `len x rows.len()` matrix whose columns are `rows`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Mat::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self^T * other`.
    pub fn t_mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = &self.data[r * self.cols..(r + 1) * self.cols];
            let b = &other.data[r * other.cols..(r + 1) * other.cols];
            for (i, ai) in a.iter().enumerate() {
                let row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, bj) in row.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        out
    }
}

/// Thin QR of a tall matrix via Householder reflections.
///
/// Returns `Q` (`rows x cols`, orthonormal columns) and the diagonal of `R`.
pub fn thin_qr(a: &Mat) -> (Mat, Vec<f64>) {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "thin QR needs rows >= cols");
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * r.get(i, j)).sum();
                let s = 2.0 * dot / vnorm2;
                for i in k..m {
                    let cur = r.get(i, j);
                    r.set(i, j, cur - s * v[i - k]);
                }
            }
        }
        diag.push(r.get(k, k));
        reflectors.push(v);
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n unit columns.
    let mut q = Mat::zeros(m, n);
    for j in 0..n {
        q.set(j, j, 1.0);
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in 0..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * q.get(i, j)).sum();
            let s = 2.0 * dot / vnorm2;
            for i in k..m {
                let cur = q.get(i, j);
                q.set(i, j, cur - s * v[i - k]);
            }
        }
    }
    (q, diag)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * m.get(i, j))
            .sum();
        let scale: f64 = m.data.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Largest singular value of `m`.
pub fn largest_singular_value(m: &Mat) -> f64 {
    let gram = if m.rows <= m.cols {
        // m m^T
        let mut g = Mat::zeros(m.rows, m.rows);
        for i in 0..m.rows {
            for j in 0..m.rows {
                let s: f64 = (0..m.cols).map(|k| m.get(i, k) * m.get(j, k)).sum();
                g.set(i, j, s);
            }
        }
        g
    } else {
        m.t_mul(m)
    };
    libm::sqrt(symmetric_eigenvalues(&gram)[0].max(0.0))
}
