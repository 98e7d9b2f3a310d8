//! Dense symmetric linear algebra for the preconditioners.
//!
//! Damped inversion (Cholesky with a one-shot jitter retry), spectral
//! decomposition (cyclic Jacobi), minimum eigenvalues, and inverse p-th
//! roots via the coupled Newton iteration. All routines are pure functions
//! over immutable inputs and are safe to call from many threads.

mod matrix;

pub use matrix::Matrix;

use crate::error::{Error, Result};

/// Elementwise symmetry tolerance shared by the preconditions below.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues ascending; eigenvectors as orthonormal columns, so
/// `V diag(w) Vᵀ` reconstructs the input.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl Spectrum {
    /// `V diag(w) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for k in 0..n {
            let w = self.eigenvalues[k];
            for i in 0..n {
                let vik = v.get(i, k) * w;
                for j in 0..n {
                    let x = out.get(i, j) + vik * v.get(j, k);
                    out.set(i, j, x);
                }
            }
        }
        out
    }

    /// `V f(diag(w)) Vᵀ` for a scalar spectral map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mapped = Spectrum {
            eigenvalues: self.eigenvalues.iter().map(|&w| f(w)).collect(),
            eigenvectors: self.eigenvectors.clone(),
        };
        mapped.reconstruct()
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix, or `None` when a
/// nonpositive pivot shows the matrix is not numerically positive definite.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Solve `L Lᵀ x = b` in place given the Cholesky factor.
fn cholesky_solve(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    // forward: L y = b
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * b[k];
        }
        b[i] = sum / l.get(i, i);
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l.get(k, i) * b[k];
        }
        b[i] = sum / l.get(i, i);
    }
}

/// Inverse of the damped matrix `G + λI` for symmetric PSD `G` and `λ > 0`.
///
/// Cholesky-based; if the damped matrix is not numerically positive definite
/// (EMA statistics can be semidefinite to rounding), a jitter of
/// `1e-12 · trace(G)/d` is added once before giving up. The result is
/// symmetrized so callers can rely on exact symmetry.
pub fn damped_inverse(g: &Matrix, damping: f64) -> Result<Matrix> {
    if !(damping > 0.0) {
        return Err(Error::InvalidInput {
            context: format!("damping must be positive, got {damping}"),
        });
    }
    damped_inverse_nonneg(g, damping)
}

/// Like [`damped_inverse`] but accepts `λ = 0` for inputs that are already
/// positive definite (the undamped exact-curvature path).
pub(crate) fn damped_inverse_nonneg(g: &Matrix, damping: f64) -> Result<Matrix> {
    g.require_symmetric(SYMMETRY_TOL)?;
    let n = g.rows();
    let mut damped = g.clone();
    for i in 0..n {
        let v = damped.get(i, i) + damping;
        damped.set(i, i, v);
    }
    let l = match cholesky(&damped) {
        Some(l) => Some(l),
        None => {
            let jitter = 1e-12 * g.trace() / n as f64;
            for i in 0..n {
                let v = damped.get(i, i) + jitter;
                damped.set(i, i, v);
            }
            cholesky(&damped)
        }
    };
    let l = l.ok_or_else(|| Error::NotPositiveDefinite {
        context: "damped_inverse".into(),
    })?;

    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        cholesky_solve(&l, &mut col);
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    inv.symmetrize();
    Ok(inv)
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Suitable for the desk-scale dimensions used here (d ≤ a few hundred).
pub fn sym_eig(g: &Matrix) -> Result<Spectrum> {
    g.require_symmetric(SYMMETRY_TOL)?;
    let n = g.rows();
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: vec![],
            eigenvectors: Matrix::zeros(0, 0),
        });
    }
    let mut a = g.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).powi(2);
            }
        }
        if (2.0 * off).sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply the rotation J(p,q,θ) on both sides of A and on V.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(g: &Matrix) -> Result<f64> {
    let spectrum = sym_eig(g)?;
    Ok(spectrum.eigenvalues.first().copied().unwrap_or(0.0))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(g: &Matrix) -> Result<f64> {
    let spectrum = sym_eig(g)?;
    Ok(spectrum.eigenvalues.last().copied().unwrap_or(0.0))
}

/// Spectral norm of an arbitrary rectangular matrix, computed from the
/// smaller of the two Gram products.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    let mut gram = if m.rows() <= m.cols() {
        m.mul_t(m)
    } else {
        m.tmul(m)
    };
    gram.symmetrize();
    Ok(max_eigenvalue(&gram)?.max(0.0).sqrt())
}

/// `(G + εI)^{-1/p}` by the coupled Newton iteration.
///
/// `p` must be one of {2, 4, 8} and `ε > 0`. The iteration maintains
/// `X_{k} → (G+εI)^{-1/p}` and `M_k → I`; it stops when `‖M_k − I‖_F`
/// drops below 1e-10 and fails after 100 iterations, carrying the last
/// residual.
pub fn inverse_pth_root(g: &Matrix, p: u32, epsilon: f64) -> Result<Matrix> {
    g.require_symmetric(SYMMETRY_TOL)?;
    if !matches!(p, 2 | 4 | 8) {
        return Err(Error::InvalidInput {
            context: format!("inverse root order must be 2, 4 or 8, got {p}"),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput {
            context: format!("root damping must be positive, got {epsilon}"),
        });
    }
    let n = g.rows();
    let mut damped = g.clone();
    for i in 0..n {
        let v = damped.get(i, i) + epsilon;
        damped.set(i, i, v);
    }

    // z scales the spectrum of M₀ = z·A into (0, (1+p)/2]; the Frobenius
    // norm upper-bounds the spectral norm, which is all the scheme needs.
    let norm = damped.frobenius_norm().max(f64::MIN_POSITIVE);
    let z = (1.0 + p as f64) / (2.0 * norm);
    let mut x = Matrix::identity(n);
    x.scale(z.powf(1.0 / p as f64));
    let mut m = damped.clone();
    m.scale(z);

    const MAX_ITERS: usize = 100;
    const TOL: f64 = 1e-10;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut diff = m.clone();
        diff.add_scaled(-1.0, &Matrix::identity(n));
        residual = diff.frobenius_norm();
        if !residual.is_finite() {
            return Err(Error::RootDiverged {
                residual,
                iterations: MAX_ITERS,
            });
        }
        if residual <= TOL {
            let mut root = x;
            root.symmetrize();
            return Ok(root);
        }
        // T = ((p+1)I − M)/p; X ← X·T; M ← Tᵖ·M
        let mut t = m.clone();
        t.scale(-1.0 / p as f64);
        for i in 0..n {
            let v = t.get(i, i) + (p as f64 + 1.0) / p as f64;
            t.set(i, i, v);
        }
        x = x.mul(&t);
        let mut t_pow = t.clone();
        let mut exp = p;
        let mut acc: Option<Matrix> = None;
        // exponentiation by squaring for Tᵖ (p ∈ {2,4,8} is a power of two)
        while exp > 0 {
            if exp & 1 == 1 {
                acc = Some(match acc {
                    None => t_pow.clone(),
                    Some(a) => a.mul(&t_pow),
                });
            }
            exp >>= 1;
            if exp > 0 {
                t_pow = t_pow.mul(&t_pow);
            }
        }
        m = acc.unwrap().mul(&m);
    }
    Err(Error::RootDiverged {
        residual,
        iterations: MAX_ITERS,
    })
}
