//! Closed-form ridge regression.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Appends a constant column so the fit carries an intercept.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

/// Solves `(X^T X + lambda I) W = X^T Y` for `W` (`d x o`), rows of `x`
/// being samples.
pub fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::Schema(format!("{} inputs but {} targets", x.nrows(), y.nrows())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let mut a = x.transpose() * x;
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let b = x.transpose() * y;
    let chol = a.cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "normal matrix is singular at lambda={lambda}; use a positive regularization"
        ))
    })?;
    let w = chol.solve(&b);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("ridge solution is not finite; use a larger lambda".into()));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(30, 4, |i, j| ((i * (j + 2)) as f64 * 0.37 + j as f64).sin());
        let truth = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 0.5, 0.0, -1.5, 3.0, 2.0, 1.0]);
        (x.clone(), x * truth)
    }

    #[test]
    fn recovers_exact_linear_map() {
        let (x, y) = data();
        let w = ridge(&x, &y, 1e-12).unwrap();
        assert!((&x * &w - &y).amax() < 1e-6);
    }

    #[test]
    fn satisfies_normal_equations() {
        let (x, mut y) = data();
        y[(3, 1)] += 0.7;
        for lambda in [0.0, 0.1, 10.0] {
            let w = ridge(&x, &y, lambda).unwrap();
            let mut a = x.transpose() * &x;
            for i in 0..4 {
                a[(i, i)] += lambda;
            }
            let r = &a * &w - x.transpose() * &y;
            assert!(r.norm() <= 1e-8 * (x.transpose() * &y).norm());
        }
    }

    #[test]
    fn singular_without_regularization() {
        let x = DMatrix::from_fn(5, 3, |i, _| i as f64);
        let y = DMatrix::zeros(5, 1);
        assert!(matches!(ridge(&x, &y, 0.0), Err(Error::Singular(_))));
        assert!(ridge(&x, &y, 1e-3).is_ok());
    }

    #[test]
    fn zero_targets_give_zero_map() {
        let (x, _) = data();
        let w = ridge(&with_intercept(&x), &DMatrix::zeros(30, 3), 1.0).unwrap();
        assert!(w.amax() == 0.0);
    }
}
