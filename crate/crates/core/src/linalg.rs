//! Dense real linear algebra used by the editor: Frobenius norms and inner
//! products, rank-one outer products, SPD factorisation and whitening.
//!
//! Everything is `f64`. Matrices are `nalgebra::DMatrix<f64>`; vectors are
//! `nalgebra::DVector<f64>`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Absolute floor applied by [`approx_rel`] when the reference magnitude is below one.
pub const ABS_FLOOR: f64 = 1e-12;

/// Relative comparison with an absolute floor for small references.
pub fn approx_rel(actual: f64, reference: f64, tol: f64) -> bool {
    let gap = (actual - reference).abs();
    gap <= tol * reference.abs() || (reference.abs() < 1.0 && gap <= ABS_FLOOR)
}

/// Relative error `|a - r| / max(|r|, 1)`.
pub fn rel_err(actual: f64, reference: f64) -> f64 {
    (actual - reference).abs() / reference.abs().max(1.0)
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what}: entry {pos} is {}", values[pos])));
    }
    Ok(())
}

/// The edited weight matrix `W` (d_v rows by d_k columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMatrix {
    data: DMatrix<f64>,
}

impl MemoryMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "memory matrix must be at least 1x1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        ensure_finite(data.as_slice(), "memory matrix")?;
        Ok(Self { data })
    }

    pub fn zeros(d_v: usize, d_k: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(d_v, d_k))
    }

    pub fn d_v(&self) -> usize {
        self.data.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// `W k`.
    pub fn apply(&self, key: &DVector<f64>) -> Result<DVector<f64>> {
        if key.len() != self.d_k() {
            return Err(Error::Shape(format!(
                "key has length {}, expected d_k = {}",
                key.len(),
                self.d_k()
            )));
        }
        Ok(&self.data * key)
    }

    pub fn norm_sq(&self) -> f64 {
        frob_sum_sq(self.data.as_slice())
    }

    /// `W += delta`, rejecting non-finite results.
    pub fn add_delta(&mut self, delta: &EditDelta) -> Result<()> {
        if delta.value_diff.len() != self.d_v() || delta.key_row.len() != self.d_k() {
            return Err(Error::Shape(format!(
                "delta is {}x{}, matrix is {}x{}",
                delta.value_diff.len(),
                delta.key_row.len(),
                self.d_v(),
                self.d_k()
            )));
        }
        let inv_scale = 1.0 / delta.scale;
        for (j, &kj) in delta.key_row.iter().enumerate() {
            let coeff = kj * inv_scale;
            let mut col = self.data.column_mut(j);
            for (w, &dv) in col.iter_mut().zip(delta.value_diff.iter()) {
                *w += dv * coeff;
            }
        }
        ensure_finite(self.data.as_slice(), "edited memory matrix")
    }
}

/// Rank-one update `value_diff * key_row^T / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDelta {
    pub value_diff: DVector<f64>,
    pub key_row: DVector<f64>,
    pub scale: f64,
}

impl EditDelta {
    pub fn materialize(&self) -> DMatrix<f64> {
        outer(&self.value_diff, &self.key_row) / self.scale
    }

    /// `||Delta W||_F^2` without materialising the matrix.
    pub fn norm_sq(&self) -> f64 {
        self.value_diff.norm_squared() * self.key_row.norm_squared() / (self.scale * self.scale)
    }
}

fn frob_sum_sq(values: &[f64]) -> f64 {
    values.iter().map(|x| x * x).sum()
}

/// `sum_ij m_ij^2`.
pub fn frob_norm_sq(m: &DMatrix<f64>) -> Result<f64> {
    ensure_finite(m.as_slice(), "frob_norm_sq input")?;
    Ok(frob_sum_sq(m.as_slice()))
}

/// `sum_ij a_ij b_ij`.
pub fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "frob_inner of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum())
}

/// `u v^T`.
pub fn outer(u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    u * v.transpose()
}

/// `||u v^T||_F^2 = ||u||^2 ||v||^2`.
pub fn outer_product_norm_sq(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    ensure_finite(u.as_slice(), "outer_product_norm_sq u")?;
    ensure_finite(v.as_slice(), "outer_product_norm_sq v")?;
    Ok(u.norm_squared() * v.norm_squared())
}

/// A symmetric positive-definite matrix certified by a Cholesky factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    pub data: DMatrix<f64>,
    pub chol_lower: DMatrix<f64>,
    pub cond_estimate: f64,
}

/// Factor `c = L L^T`.
///
/// Fails with [`Error::Asymmetry`] if `|c_ij - c_ji| > 1e-12 max(1, |c_ij|)` and with
/// [`Error::NotPositiveDefinite`] if any pivot falls to `1e-12 trace(c) / n` or below.
pub fn cholesky(c: &DMatrix<f64>) -> Result<SpdMatrix> {
    let n = c.nrows();
    if n == 0 || c.ncols() != n {
        return Err(Error::Shape(format!("cholesky needs a square matrix, got {:?}", c.shape())));
    }
    ensure_finite(c.as_slice(), "cholesky input")?;
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (c[(i, j)] - c[(j, i)]).abs();
            if gap > 1e-12 * c[(i, j)].abs().max(1.0) {
                return Err(Error::Asymmetry { i, j, gap });
            }
        }
    }
    let pivot_floor = 1e-12 * c.trace() / n as f64;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = c[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > pivot_floor) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = c[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    let (lo, hi) = l
        .diagonal()
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(SpdMatrix {
        data: c.clone(),
        chol_lower: l,
        cond_estimate: (hi / lo).powi(2),
    })
}

impl SpdMatrix {
    pub fn identity(n: usize) -> Self {
        cholesky(&DMatrix::identity(n, n)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// `C^{-1} b` by forward and backward substitution against the factor.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::Shape(format!("solve rhs has length {}, expected {n}", b.len())));
        }
        let l = &self.chol_lower;
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        ensure_finite(y.as_slice(), "SPD solve")?;
        Ok(y)
    }

    /// `k^T C^{-1} k`.
    pub fn inv_quad(&self, k: &DVector<f64>) -> Result<f64> {
        Ok(k.dot(&self.solve(k)?))
    }

    pub fn is_identity(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.data[(i, j)] == if i == j { 1.0 } else { 0.0 }))
    }
}

/// Symmetric square root and inverse square root of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl Whitener {
    pub fn new(c: &SpdMatrix) -> Self {
        let n = c.dim();
        if c.is_identity() {
            return Self {
                sqrt: DMatrix::identity(n, n),
                inv_sqrt: DMatrix::identity(n, n),
            };
        }
        let eig = SymmetricEigen::new(c.data.clone());
        let q = &eig.eigenvectors;
        let root = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| l.sqrt()));
        let inv_root = root.map(|r| 1.0 / r);
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        let sqrt = sym(q * DMatrix::from_diagonal(&root) * q.transpose());
        let inv_sqrt = sym(q * DMatrix::from_diagonal(&inv_root) * q.transpose());
        Self { sqrt, inv_sqrt }
    }

    /// `W C^{1/2}`.
    pub fn weight(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        w * &self.sqrt
    }

    /// `C^{-1/2} k`.
    pub fn key(&self, k: &DVector<f64>) -> DVector<f64> {
        &self.inv_sqrt * k
    }

    /// `||W C^{1/2}||_F^2`.
    pub fn weight_norm_sq(&self, w: &DMatrix<f64>) -> f64 {
        frob_sum_sq(self.weight(w).as_slice())
    }
}

/// Whitened coordinates `(W C^{1/2}, C^{-1/2} k)` using the symmetric square root.
pub fn whiten(
    w: &MemoryMatrix,
    k: &DVector<f64>,
    c: &SpdMatrix,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if k.len() != w.d_k() || c.dim() != w.d_k() {
        return Err(Error::Shape(format!(
            "whiten: W is {}x{}, k has {}, C is {}x{}",
            w.d_v(),
            w.d_k(),
            k.len(),
            c.dim(),
            c.dim()
        )));
    }
    let wh = Whitener::new(c);
    Ok((wh.weight(w.as_matrix()), wh.key(k)))
}
