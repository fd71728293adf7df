//! Dense complex matrices for the small (I x I) spatial covariances.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.n + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.n + c]
    }
}

impl CMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![ZERO; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        Self {
            n,
            data: rows.concat(),
        }
    }

    /// `v v^H`.
    pub fn outer(v: &[Complex64]) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] = v[r] * v[c].conj();
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &CMatrix, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    /// `self += s * v v^H` without materializing the outer product.
    pub fn add_outer_scaled(&mut self, v: &[Complex64], s: f64) {
        let n = self.n;
        for r in 0..n {
            for c in 0..n {
                self.data[r * n + c] += (v[r] * v[c].conj()) * s;
            }
        }
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn adjoint(&self) -> CMatrix {
        let mut m = Self::zeros(self.n);
        for r in 0..self.n {
            for c in 0..self.n {
                m[(c, r)] = self[(r, c)].conj();
            }
        }
        m
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        let n = self.n;
        let mut m = Self::zeros(n);
        for r in 0..n {
            for k in 0..n {
                let a = self[(r, k)];
                for c in 0..n {
                    m.data[r * n + c] += a * other.data[k * n + c];
                }
            }
        }
        m
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|r| (0..self.n).map(|c| self[(r, c)] * v[c]).sum())
            .collect()
    }

    /// `||A - A^H||_F / ||A||_F`.
    pub fn hermitian_defect(&self) -> f64 {
        let norm = self.frobenius();
        if norm == 0.0 {
            return 0.0;
        }
        let mut d = 0.0;
        for r in 0..self.n {
            for c in 0..self.n {
                d += (self[(r, c)] - self[(c, r)].conj()).norm_sqr();
            }
        }
        d.sqrt() / norm
    }

    /// Lower-triangular Cholesky factor `L` with `A = L L^H`, or `None` if `A`
    /// is not numerically positive definite.
    pub fn cholesky(&self) -> Option<CMatrix> {
        let n = self.n;
        let mut l = Self::zeros(n);
        for j in 0..n {
            let mut d = self[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = Complex64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(l)
    }
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_subst(l: &CMatrix, b: &[Complex64]) -> Vec<Complex64> {
    let n = l.dim();
    let mut y = vec![ZERO; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves `L^H x = y` for lower-triangular `L`.
pub fn backward_subst_adjoint(l: &CMatrix, y: &[Complex64]) -> Vec<Complex64> {
    let n = l.dim();
    let mut x = vec![ZERO; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)].conj() * x[k];
        }
        x[i] = s / l[(i, i)].conj();
    }
    x
}

/// Solves `(L L^H) x = b`.
pub fn cholesky_solve(l: &CMatrix, b: &[Complex64]) -> Vec<Complex64> {
    backward_subst_adjoint(l, &forward_subst(l, b))
}

/// Eigen-decomposition of a Hermitian matrix by cyclic complex Jacobi
/// rotations. Returns eigenvalues (ascending) and unit eigenvectors as columns.
pub fn hermitian_eigen(a: &CMatrix) -> (Vec<f64>, Vec<Vec<Complex64>>) {
    let n = a.dim();
    let mut m = a.clone();
    // symmetrize away rounding so rotations stay unitary-consistent
    for r in 0..n {
        m[(r, r)] = Complex64::new(m[(r, r)].re, 0.0);
        for c in r + 1..n {
            let avg = (m[(r, c)] + m[(c, r)].conj()) * 0.5;
            m[(r, c)] = avg;
            m[(c, r)] = avg.conj();
        }
    }
    let mut v = CMatrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-16 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let b = m[(p, q)];
                let beta = b.norm();
                if beta <= 1e-300 {
                    continue;
                }
                let phase = b / beta;
                let (ap, aq) = (m[(p, p)].re, m[(q, q)].re);
                let tau = (aq - ap) / (2.0 * beta);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // G restricted to (p, q): [[c, s], [-s e^{-i phi}, c e^{-i phi}]]
                let g_pp = Complex64::new(c, 0.0);
                let g_pq = Complex64::new(s, 0.0);
                let g_qp = -phase.conj() * s;
                let g_qq = phase.conj() * c;
                // m <- m G
                for r in 0..n {
                    let (mp, mq) = (m[(r, p)], m[(r, q)]);
                    m[(r, p)] = mp * g_pp + mq * g_qp;
                    m[(r, q)] = mp * g_pq + mq * g_qq;
                }
                // m <- G^H m
                for col in 0..n {
                    let (mp, mq) = (m[(p, col)], m[(q, col)]);
                    m[(p, col)] = g_pp.conj() * mp + g_qp.conj() * mq;
                    m[(q, col)] = g_pq.conj() * mp + g_qq.conj() * mq;
                }
                m[(p, q)] = ZERO;
                m[(q, p)] = ZERO;
                m[(p, p)] = Complex64::new(m[(p, p)].re, 0.0);
                m[(q, q)] = Complex64::new(m[(q, q)].re, 0.0);
                for r in 0..n {
                    let (vp, vq) = (v[(r, p)], v[(r, q)]);
                    v[(r, p)] = vp * g_pp + vq * g_qp;
                    v[(r, q)] = vp * g_pq + vq * g_qq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].re.total_cmp(&m[(j, j)].re));
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|r| v[(r, i)]).collect())
        .collect();
    (values, vectors)
}

pub fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `a^H b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}
