use serde::{Deserialize, Serialize};

use super::vector::dot;
use super::{LinalgError, Matrix, Result, Vector};
use crate::Scalar;

/// Fitted ridge model `y ≈ wᵀx + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar + Serialize", deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct RidgeSolution<S: Scalar> {
    pub weights: Vector<S>,
    pub intercept: S,
    pub lambda: S,
    /// In-sample coefficient of determination.
    pub r_squared: S,
}

impl<S: Scalar> RidgeSolution<S> {
    pub fn predict(&self, x: &[S]) -> S {
        dot(self.weights.as_slice(), x) + self.intercept
    }
}

/// Which normal-equation system to solve. Both give the same minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolvePath {
    /// Dual when `n < d`, primal otherwise.
    #[default]
    Auto,
    /// `(X_cᵀX_c + λI) w = X_cᵀ y_c`, a `d × d` system.
    Primal,
    /// `(X_cX_cᵀ + λI) a = y_c`, `w = X_cᵀ a`, an `n × n` system.
    Dual,
}

/// Minimize `Σ (y_s − wᵀx_s − b)² + λ‖w‖²` with an unpenalized intercept.
pub fn ridge_fit<S: Scalar>(x: &Matrix<S>, y: &[S], lambda: S) -> Result<RidgeSolution<S>> {
    ridge_fit_with(x, y, lambda, SolvePath::Auto)
}

pub fn ridge_fit_with<S: Scalar>(x: &Matrix<S>, y: &[S], lambda: S, path: SolvePath) -> Result<RidgeSolution<S>> {
    let (n, d) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n < 2 {
        return Err(LinalgError::TooFewRows { needed: 2, got: n });
    }
    if d == 0 {
        return Err(LinalgError::EmptyVector);
    }
    if !lambda.is_finite() || lambda < S::zero() {
        return Err(LinalgError::InvalidLambda(lambda.to_f64_lossy()));
    }
    if y.iter().any(|v| !v.is_finite()) || x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFiniteInput);
    }

    let x_mean = x.column_means();
    let n_s = S::from_usize(n).expect("sample count fits the scalar type");
    let y_mean = y.iter().copied().sum::<S>() / n_s;
    let mut xc = x.clone();
    for i in 0..n {
        for (v, m) in xc.row_mut(i).iter_mut().zip(&x_mean) {
            *v -= *m;
        }
    }
    let yc: Vec<S> = y.iter().map(|v| *v - y_mean).collect();

    let use_dual = match path {
        SolvePath::Auto => n < d,
        SolvePath::Primal => false,
        SolvePath::Dual => true,
    };
    let weights = if use_dual {
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(xc.row(i), xc.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += lambda;
        }
        let a = cholesky_solve(k, &yc)?;
        let mut w = vec![S::zero(); d];
        for (i, ai) in a.iter().enumerate() {
            for (wj, xij) in w.iter_mut().zip(xc.row(i)) {
                *wj += *xij * *ai;
            }
        }
        w
    } else {
        let mut gram = Matrix::zeros(d, d);
        let mut rhs = vec![S::zero(); d];
        for (i, &yi) in yc.iter().enumerate() {
            let row = xc.row(i);
            for a in 0..d {
                let xa = row[a];
                for b in 0..=a {
                    gram[(a, b)] += xa * row[b];
                }
                rhs[a] += xa * yi;
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
            gram[(a, a)] += lambda;
        }
        cholesky_solve(gram, &rhs)?
    };

    let intercept = y_mean - dot(&weights, &x_mean);
    let mut ss_res = S::zero();
    let mut ss_tot = S::zero();
    for (i, yi) in y.iter().enumerate() {
        let r = *yi - dot(&weights, x.row(i)) - intercept;
        ss_res += r * r;
        ss_tot += yc[i] * yc[i];
    }
    let r_squared = if ss_tot > S::zero() {
        S::one() - ss_res / ss_tot
    } else if ss_res == S::zero() {
        S::one()
    } else {
        S::zero()
    };
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::SingularSystem);
    }

    Ok(RidgeSolution {
        weights: Vector::new(weights)?,
        intercept,
        lambda,
        r_squared,
    })
}

/// Solve `A x = b` for symmetric positive-definite `A` (consumed, overwritten
/// with its Cholesky factor).
fn cholesky_solve<S: Scalar>(mut a: Matrix<S>, b: &[S]) -> Result<Vec<S>> {
    let n = a.rows();
    let max_diag = (0..n).fold(S::zero(), |m, i| m.max(a[(i, i)].abs()));
    let tol = max_diag * S::epsilon() * S::from_usize(n.max(1)).expect("dimension fits the scalar type");
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= a[(j, k)] * a[(j, k)];
        }
        if diag.is_nan() || diag <= tol {
            return Err(LinalgError::SingularSystem);
        }
        let ljj = diag.sqrt();
        a[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / ljj;
        }
    }
    // L z = b
    let mut z = b.to_vec();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= a[(i, k)] * z[k];
        }
        z[i] = s / a[(i, i)];
    }
    // Lᵀ x = z
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in (i + 1)..n {
            s -= a[(k, i)] * z[k];
        }
        z[i] = s / a[(i, i)];
    }
    Ok(z)
}
