//! Ridge / minimum-norm least squares for the text-to-feature map.

use nalgebra::{DMatrix, DVector};

use super::{check_finite, NumericsError};

/// Affine map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// outputs × inputs
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub ridge_lambda: f64,
}

impl LinearMap {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, NumericsError> {
        if x.len() != self.input_dim() {
            return Err(NumericsError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(&self.weights * x + &self.bias)
    }
}

/// Fits `Y ≈ X·Wᵀ + 1·bᵀ` minimizing `Σ‖Yᵢ − W·Xᵢ − b‖² + λ‖W‖²_F`.
///
/// The bias is unpenalized, so the problem is solved on column-centered data
/// and `b = ȳ − W·x̄`. The centered system is solved through the SVD of `X`;
/// at `λ = 0` singular values below `max(n, m)·ε·σ_max` are dropped, which
/// yields the minimum-norm solution for rank-deficient inputs.
pub fn fit_linear(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge_lambda: f64) -> Result<LinearMap, NumericsError> {
    let (n, m) = x.shape();
    if n == 0 || m == 0 {
        return Err(NumericsError::EmptyInput);
    }
    if y.nrows() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: n,
            found: y.nrows(),
        });
    }
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(NumericsError::InvalidRidge(ridge_lambda));
    }
    check_finite(x, "regression inputs")?;
    check_finite(y, "regression targets")?;

    let x_mean = column_means(x);
    let y_mean = column_means(y);
    let xc = center(x, &x_mean);
    let yc = center(y, &y_mean);

    let svd = xc.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let tol = n.max(m) as f64 * f64::EPSILON * s_max;
    let shrink = DVector::from_iterator(
        s.len(),
        s.iter().map(|&si| {
            if ridge_lambda > 0.0 {
                si / (si * si + ridge_lambda)
            } else if si > tol {
                1.0 / si
            } else {
                0.0
            }
        }),
    );
    // Wᵀ = V · diag(shrink) · Uᵀ · Yc
    let mut uty = u.transpose() * yc;
    for (mut row, f) in uty.row_iter_mut().zip(shrink.iter()) {
        row *= *f;
    }
    let weights = (v_t.transpose() * uty).transpose();
    let bias = &y_mean - &weights * &x_mean;
    Ok(LinearMap {
        weights,
        bias,
        ridge_lambda,
    })
}

fn column_means(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows() as f64;
    DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.sum() / n))
}

fn center(a: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut row in out.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(means.iter()) {
            *v -= m;
        }
    }
    out
}

/// Sum of squared residuals plus the ridge penalty on `W`.
pub fn ridge_objective(map: &LinearMap, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (xi, yi) in x.row_iter().zip(y.row_iter()) {
        let pred = &map.weights * xi.transpose() + &map.bias;
        total += (pred - yi.transpose()).norm_squared();
    }
    total + map.ridge_lambda * map.weights.norm_squared()
}
