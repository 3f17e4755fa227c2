//! Principal component analysis of text embeddings.

use nalgebra::{DMatrix, DVector};

use super::{check_finite, NumericsError};

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaTarget {
    Components(usize),
    /// Smallest number of components whose explained variance reaches the fraction.
    VarianceFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    pub mean: DVector<f64>,
    /// k×d, one principal direction per row.
    pub components: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>, NumericsError> {
        apply_pca(self, x)
    }
}

/// Fits PCA on the rows of `x` (n samples × d dimensions).
///
/// Components are the leading right singular vectors of the centered data,
/// which are the eigenvectors of the sample covariance. Each component is
/// signed so that its largest-magnitude entry is positive. The component
/// count is capped at `min(d, n - 1)`.
pub fn fit_pca(x: &DMatrix<f64>, target: PcaTarget) -> Result<PcaTransform, NumericsError> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(NumericsError::TooFewSamples { needed: 2, found: n });
    }
    if d == 0 {
        return Err(NumericsError::EmptyInput);
    }
    check_finite(x, "PCA input")?;
    match target {
        PcaTarget::Components(0) => return Err(NumericsError::InvalidComponentCount),
        PcaTarget::VarianceFraction(v) if !(v > 0.0 && v <= 1.0) => {
            return Err(NumericsError::InvalidVarianceFraction(v))
        }
        _ => {}
    }

    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let variances: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s * s / (n - 1) as f64)
        .collect();
    let total: f64 = variances.iter().sum();
    let ratios: Vec<f64> = variances
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();

    let cap = d.min(n - 1);
    let k = match target {
        PcaTarget::Components(k) => k.min(cap),
        PcaTarget::VarianceFraction(v) => {
            let mut cum = 0.0;
            let mut k = cap;
            for (i, r) in ratios.iter().enumerate().take(cap) {
                cum += r;
                if cum >= v - 1e-12 {
                    k = i + 1;
                    break;
                }
            }
            k.max(1)
        }
    };

    let mut components = v_t.rows(0, k).into_owned();
    for mut row in components.row_iter_mut() {
        let mut pivot = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[pivot].abs() {
                pivot = j;
            }
        }
        if row[pivot] < 0.0 {
            row.neg_mut();
        }
    }
    Ok(PcaTransform {
        mean,
        components,
        explained_variance_ratio: ratios[..k].to_vec(),
    })
}

/// Projects `x` onto the principal directions: `components · (x − mean)`.
pub fn apply_pca(pca: &PcaTransform, x: &[f64]) -> Result<DVector<f64>, NumericsError> {
    if x.len() != pca.input_dim() {
        return Err(NumericsError::DimensionMismatch {
            expected: pca.input_dim(),
            found: x.len(),
        });
    }
    let centered = DVector::from_iterator(x.len(), x.iter().zip(pca.mean.iter()).map(|(a, m)| a - m));
    Ok(&pca.components * centered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Symmetric 2×2 eigen-decomposition in closed form, largest eigenvalue first.
    fn eig2(a: f64, b: f64, c: f64) -> ((f64, f64), (f64, f64)) {
        let tr = a + c;
        let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        let (vx, vy) = if b.abs() > 0.0 { (b, l1 - a) } else if a >= c { (1.0, 0.0) } else { (0.0, 1.0) };
        let norm = (vx * vx + vy * vy).sqrt();
        ((l1, l2), (vx / norm, vy / norm))
    }

    #[test]
    fn exact_line_recovers_direction() {
        let x = DMatrix::from_row_slice(4, 2, &[0., 0., 1., 2., 2., 4., 3., 6.]);
        // sample covariance of the points: var(x)=5/3, cov=10/3, var(y)=20/3
        let ((l1, l2), (vx, vy)) = eig2(5.0 / 3.0, 10.0 / 3.0, 20.0 / 3.0);
        assert!(l2.abs() < 1e-12);
        assert!((l1 - 25.0 / 3.0).abs() < 1e-12);
        let pca = fit_pca(&x, PcaTarget::Components(1)).unwrap();
        assert_eq!(pca.output_dim(), 1);
        assert!((pca.components[(0, 0)] - vx).abs() < 1e-12);
        assert!((pca.components[(0, 1)] - vy).abs() < 1e-12);
        assert!((vx - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((pca.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_apply() {
        let pca = PcaTransform {
            mean: DVector::from_vec(vec![1.0, 1.0]),
            components: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            explained_variance_ratio: vec![1.0],
        };
        assert_eq!(apply_pca(&pca, &[3.0, 1.0]).unwrap().as_slice(), &[2.0]);
        assert_eq!(apply_pca(&pca, &[1.0, 1.0]).unwrap().as_slice(), &[0.0]);
        assert!(matches!(
            apply_pca(&pca, &[1.0]),
            Err(NumericsError::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn mean_maps_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let pca = fit_pca(&x, PcaTarget::Components(3)).unwrap();
        let y = apply_pca(&pca, pca.mean.as_slice()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_cap_on_few_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let pca = fit_pca(&x, PcaTarget::VarianceFraction(0.99)).unwrap();
        assert!(pca.output_dim() <= 2);
        let pca = fit_pca(&x, PcaTarget::Components(5)).unwrap();
        assert_eq!(pca.output_dim(), 2);
    }

    #[test]
    fn argument_errors() {
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            fit_pca(&one, PcaTarget::Components(1)),
            Err(NumericsError::TooFewSamples { .. })
        ));
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 5.0]);
        assert!(matches!(
            fit_pca(&x, PcaTarget::Components(0)),
            Err(NumericsError::InvalidComponentCount)
        ));
        for v in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                fit_pca(&x, PcaTarget::VarianceFraction(v)),
                Err(NumericsError::InvalidVarianceFraction(_))
            ));
        }
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, f64::INFINITY, 3.0, 5.0]);
        assert!(matches!(
            fit_pca(&bad, PcaTarget::Components(1)),
            Err(NumericsError::NonFinite(_))
        ));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(12, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = fit_pca(&x, PcaTarget::Components(4)).unwrap();
        let b = fit_pca(&x, PcaTarget::Components(4)).unwrap();
        assert_eq!(a, b);
        for row in a.components.row_iter() {
            let max = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(max > 0.0);
        }
    }
}
