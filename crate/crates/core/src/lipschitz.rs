//! Bi-Lipschitz bound calculators for layer compositions plus an empirical
//! Lipschitz probe.
//!
//! A residual layer `x + f'(x)` with an alpha-Lipschitz inner function has
//! bounds `(1 - alpha, 1 + alpha)`; a leaky-relu has `(alpha, 1)`; a dense
//! layer inherits its extreme singular values; a composition multiplies
//! member bounds. Norms are Euclidean on both sides; a semantically
//! meaningful input norm is the caller's problem, which is why the probe is
//! a consistency check rather than a certificate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_from_seed;

/// Description of a layer (or stack of layers) for bound calculation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Residual layer with an `alpha`-Lipschitz inner function.
    Residual { alpha: f64 },
    /// Dense layer with known extreme singular values.
    Dense { sigma_min: f64, sigma_max: f64 },
    /// Leaky ReLU activation with negative slope `alpha` in (0, 1).
    LeakyRelu { alpha: f64 },
    Composition { layers: Vec<LayerSpec> },
}

/// Lower and upper bi-Lipschitz bounds plus a vacuity warning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiLipschitzBounds {
    pub lower: f64,
    pub upper: f64,
    /// Set when a residual alpha >= 1 voids the lower-bound guarantee.
    pub vacuous_lower: bool,
}

/// Computes bi-Lipschitz bounds for a layer spec.
///
/// A residual layer with alpha >= 1 yields a lower bound of 0 with the
/// vacuity flag set: the guarantee derivation needs alpha < 1.
pub fn bilipschitz_bounds(spec: &LayerSpec) -> Result<BiLipschitzBounds> {
    match spec {
        LayerSpec::Residual { alpha } => {
            if !alpha.is_finite() || *alpha < 0.0 {
                return Err(Error::invalid(format!("residual alpha must be >= 0, got {alpha}")));
            }
            if *alpha >= 1.0 {
                Ok(BiLipschitzBounds { lower: 0.0, upper: 1.0 + alpha, vacuous_lower: true })
            } else {
                Ok(BiLipschitzBounds {
                    lower: 1.0 - alpha,
                    upper: 1.0 + alpha,
                    vacuous_lower: false,
                })
            }
        }
        LayerSpec::Dense { sigma_min, sigma_max } => {
            if !(*sigma_min >= 0.0 && *sigma_max >= *sigma_min) {
                return Err(Error::invalid(format!(
                    "dense bounds require 0 <= sigma_min <= sigma_max, got [{sigma_min}, {sigma_max}]"
                )));
            }
            Ok(BiLipschitzBounds { lower: *sigma_min, upper: *sigma_max, vacuous_lower: false })
        }
        LayerSpec::LeakyRelu { alpha } => {
            if !(*alpha > 0.0 && *alpha < 1.0) {
                return Err(Error::invalid(format!("leaky-relu alpha must be in (0,1), got {alpha}")));
            }
            Ok(BiLipschitzBounds { lower: *alpha, upper: 1.0, vacuous_lower: false })
        }
        LayerSpec::Composition { layers } => {
            if layers.is_empty() {
                return Err(Error::invalid("composition must contain at least one layer"));
            }
            let mut lower = 1.0;
            let mut upper = 1.0;
            let mut vacuous = false;
            for layer in layers {
                let b = bilipschitz_bounds(layer)?;
                lower *= b.lower;
                upper *= b.upper;
                vacuous |= b.vacuous_lower;
            }
            Ok(BiLipschitzBounds { lower, upper, vacuous_lower: vacuous })
        }
    }
}

/// Extreme singular values of a matrix.
///
/// `sigma_max` comes from power iteration on `M^T M` (tolerance 1e-10, at
/// most 10^4 iterations); `sigma_min` from inverse-style iteration through
/// the smallest eigenvalue of `M^T M`, obtained by spectral shift.
pub fn singular_value_bounds(matrix: &DMatrix<f64>) -> Result<(f64, f64)> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix entries must be finite"));
    }
    if matrix.nrows() == 0 || matrix.ncols() == 0 {
        return Err(Error::invalid("matrix must be non-empty"));
    }
    let gram = matrix.transpose() * matrix;
    let lambda_max = power_iteration(&gram, None)?;
    // Smallest eigenvalue: inverse iteration when the Gram matrix is
    // invertible (good relative accuracy), spectral shift otherwise.
    let lambda_min = match gram.clone().try_inverse() {
        Some(inv) => {
            let lambda_inv_max = power_iteration(&inv, None)?;
            if lambda_inv_max > 0.0 {
                1.0 / lambda_inv_max
            } else {
                0.0
            }
        }
        None => {
            // Largest eigenvalue of (lambda_max I - G) is lambda_max - lambda_min.
            let shifted = DMatrix::identity(gram.nrows(), gram.ncols()) * lambda_max - &gram;
            let gap = power_iteration(&shifted, Some(lambda_max))?;
            (lambda_max - gap).max(0.0)
        }
    };
    Ok((lambda_min.sqrt(), lambda_max.sqrt()))
}

// Power iteration for the dominant eigenvalue of a symmetric PSD matrix.
// `scale` supplies the magnitude reference for the convergence test when the
// matrix is itself a shifted complement.
fn power_iteration(m: &DMatrix<f64>, scale: Option<f64>) -> Result<f64> {
    const MAX_ITER: usize = 10_000;
    const TOL: f64 = 1e-13;
    let n = m.nrows();
    // Deterministic start vector with a dash of irrationality so it is not
    // orthogonal to the dominant eigenvector for common structured matrices.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.754_877_666).sin() * 0.5);
    v /= v.norm();
    let mut lambda = 0.0f64;
    let reference = scale.unwrap_or(1.0).max(1.0);
    for iter in 0..MAX_ITER {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = &w / norm;
        let new_lambda = next.dot(&(m * &next));
        if (new_lambda - lambda).abs() <= TOL * reference.max(new_lambda.abs()) && iter > 2 {
            return Ok(new_lambda.max(0.0));
        }
        lambda = new_lambda;
        v = next;
    }
    Err(Error::NonConvergence { what: "power iteration".into(), iterations: MAX_ITER })
}

/// Extremes of the observed ratio `||f(x) - f(x')|| / ||x - x'||` over random
/// point pairs inside a box. A consistency check for analytic bounds, not a
/// certificate.
pub fn empirical_lipschitz_probe(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    box_lo: &[f64],
    box_hi: &[f64],
    n_pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_pairs < 1 {
        return Err(Error::invalid("probe requires n_pairs >= 1"));
    }
    if box_lo.len() != box_hi.len() || box_lo.is_empty() {
        return Err(Error::shape("probe box bounds disagree"));
    }
    let dim = box_lo.len();
    let mut rng = rng_from_seed(seed);
    let sample_point = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|i| rng.random_range(box_lo[i]..box_hi[i])).collect()
    };
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    let mut produced = 0usize;
    let mut attempts = 0usize;
    while produced < n_pairs {
        attempts += 1;
        if attempts > 100 * n_pairs {
            return Err(Error::invalid("could not sample distinct point pairs"));
        }
        let a = sample_point(&mut rng);
        let b = sample_point(&mut rng);
        let dx: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if dx == 0.0 {
            continue; // coincident pair: resample
        }
        let fa = f(&a);
        let fb = f(&b);
        let dy: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let ratio = dy / dx;
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
        produced += 1;
    }
    Ok((min_ratio, max_ratio))
}

/// A residual network with linear inner maps scaled to a target spectral
/// norm; conforms to the residual bound derivation by construction.
pub struct ResidualNet {
    pub layers: Vec<DMatrix<f64>>,
}

impl ResidualNet {
    /// `depth` residual layers of width `dim`, each inner map scaled so its
    /// spectral norm is exactly `alpha`.
    pub fn random(dim: usize, depth: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let raw = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (_, sigma_max) = singular_value_bounds(&raw)?;
            layers.push(raw * (alpha / sigma_max));
        }
        Ok(ResidualNet { layers })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut v = DVector::from_column_slice(x);
        for w in &self.layers {
            v = &v + w * &v;
        }
        v.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_composition_spec_example() {
        let spec = LayerSpec::Composition {
            layers: vec![LayerSpec::Residual { alpha: 0.1 }; 3],
        };
        let b = bilipschitz_bounds(&spec).unwrap();
        assert!((b.lower - 0.729).abs() < 1e-12);
        assert!((b.upper - 1.331).abs() < 1e-12);
        assert!(!b.vacuous_lower);
    }

    #[test]
    fn leaky_relu_spec_example() {
        let b = bilipschitz_bounds(&LayerSpec::LeakyRelu { alpha: 0.01 }).unwrap();
        assert_eq!(b.lower, 0.01);
        assert_eq!(b.upper, 1.0);
    }

    #[test]
    fn mixed_composition_spec_example() {
        let spec = LayerSpec::Composition {
            layers: vec![
                LayerSpec::Dense { sigma_min: 0.5, sigma_max: 2.0 },
                LayerSpec::LeakyRelu { alpha: 0.1 },
            ],
        };
        let b = bilipschitz_bounds(&spec).unwrap();
        assert!((b.lower - 0.05).abs() < 1e-15);
        assert!((b.upper - 2.0).abs() < 1e-15);
    }

    #[test]
    fn residual_alpha_at_least_one_is_vacuous() {
        let b = bilipschitz_bounds(&LayerSpec::Residual { alpha: 1.2 }).unwrap();
        assert_eq!(b.lower, 0.0);
        assert!(b.vacuous_lower);
        assert!((b.upper - 2.2).abs() < 1e-15);
    }

    #[test]
    fn bounds_ordered_and_composition_associative() {
        let a = LayerSpec::Residual { alpha: 0.3 };
        let b = LayerSpec::LeakyRelu { alpha: 0.2 };
        let c = LayerSpec::Dense { sigma_min: 0.9, sigma_max: 1.5 };
        let flat = LayerSpec::Composition { layers: vec![a.clone(), b.clone(), c.clone()] };
        let nested = LayerSpec::Composition {
            layers: vec![
                LayerSpec::Composition { layers: vec![a, b] },
                c,
            ],
        };
        let bf = bilipschitz_bounds(&flat).unwrap();
        let bn = bilipschitz_bounds(&nested).unwrap();
        assert!((bf.lower - bn.lower).abs() < 1e-15);
        assert!((bf.upper - bn.upper).abs() < 1e-15);
        assert!(bf.lower <= bf.upper);
    }

    #[test]
    fn singular_values_spec_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let (lo, hi) = singular_value_bounds(&id).unwrap();
        assert!((lo - 1.0).abs() < 1e-8 && (hi - 1.0).abs() < 1e-8);

        let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let (lo, hi) = singular_value_bounds(&d).unwrap();
        assert!((lo - 0.5).abs() < 1e-8, "{lo}");
        assert!((hi - 2.0).abs() < 1e-8, "{hi}");
    }

    #[test]
    fn singular_values_match_jacobi_oracle() {
        // Test-only oracle: one-sided Jacobi SVD returning all singular
        // values of a square matrix.
        fn jacobi_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
            let mut a = m.clone();
            let n = a.ncols();
            for _ in 0..60 {
                let mut off = 0.0f64;
                for p in 0..n {
                    for q in (p + 1)..n {
                        let ap = a.column(p).into_owned();
                        let aq = a.column(q).into_owned();
                        let app = ap.dot(&ap);
                        let aqq = aq.dot(&aq);
                        let apq = ap.dot(&aq);
                        off = off.max(apq.abs());
                        if apq.abs() < 1e-15 {
                            continue;
                        }
                        let tau = (aqq - app) / (2.0 * apq);
                        let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                        let c = 1.0 / (1.0 + t * t).sqrt();
                        let s = c * t;
                        for i in 0..a.nrows() {
                            let vp = a[(i, p)];
                            let vq = a[(i, q)];
                            a[(i, p)] = c * vp - s * vq;
                            a[(i, q)] = s * vp + c * vq;
                        }
                    }
                }
                if off < 1e-14 {
                    break;
                }
            }
            let mut sv: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
            sv.sort_by(f64::total_cmp);
            sv
        }

        let mut rng = rng_from_seed(101);
        for _ in 0..5 {
            let m = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sv = jacobi_singular_values(&m);
            let (lo, hi) = singular_value_bounds(&m).unwrap();
            assert!((lo - sv[0]).abs() < 1e-8, "sigma_min {lo} vs oracle {}", sv[0]);
            assert!((hi - sv[4]).abs() < 1e-8, "sigma_max {hi} vs oracle {}", sv[4]);
        }
    }

    #[test]
    fn probe_spec_examples() {
        // f = 2 * identity.
        let f = |x: &[f64]| x.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
        let (lo, hi) =
            empirical_lipschitz_probe(&f, &[-1.0, -1.0], &[1.0, 1.0], 1000, 3).unwrap();
        assert!((lo - 2.0).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);

        // Constant function.
        let g = |_: &[f64]| vec![1.0, 1.0];
        let (_, hi) = empirical_lipschitz_probe(&g, &[-1.0, -1.0], &[1.0, 1.0], 500, 4).unwrap();
        assert_eq!(hi, 0.0);
    }

    #[test]
    fn probe_respects_residual_bounds() {
        let net = ResidualNet::random(4, 3, 0.1, 7).unwrap();
        let f = |x: &[f64]| net.apply(x);
        let (lo, hi) =
            empirical_lipschitz_probe(&f, &[-2.0; 4], &[2.0; 4], 2000, 8).unwrap();
        assert!(lo >= 0.729 - 1e-9, "observed {lo} below analytic lower bound");
        assert!(hi <= 1.331 + 1e-9, "observed {hi} above analytic upper bound");
    }
}
