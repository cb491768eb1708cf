//! Distribution sampling and evaluation.
//!
//! Houses every distribution the model needs: multivariate Gaussians
//! (process/observation noise), Beta (transition and sticky
//! probabilities), the matrix-normal inverse-Wishart conjugate prior for
//! `(transition matrix, noise covariance)` pairs, and the standard
//! normal CDF/quantile used by the detection threshold formulas.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Beta as BetaDist, ChiSquared, Distribution, StandardNormal};

use crate::rng::RngHandle;
use crate::{Error, Result};

/// Eigenvalues of a nominally-PSD matrix may dip below zero by this much
/// before the matrix is rejected; anything in `[-PSD_TOL, 0)` is clamped.
pub const PSD_TOL: f64 = 1e-10;

/// Maximum allowed asymmetry `max|A - A^T|` for covariance inputs.
pub const SYM_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Standard normal CDF / quantile
// ---------------------------------------------------------------------------

/// Standard normal CDF, `Phi(x)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile, `Phi^{-1}(p)` for `p` strictly inside (0,1).
///
/// The initial rational-approximation guess is polished with two Newton
/// steps against [`std_normal_cdf`], so the pair round-trips:
/// `cdf(quantile(p)) = p` to within a few ulps.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "normal quantile requires p in (0,1), got {p}"
        )));
    }
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    for _ in 0..2 {
        let f = std_normal_cdf(x) - p;
        let d = std_normal_pdf(x);
        if d > 0.0 {
            let step = f / d;
            if step.is_finite() {
                x -= step;
            }
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Multivariate Gaussian
// ---------------------------------------------------------------------------

/// Multivariate Gaussian with a positive-semidefinite covariance.
///
/// The covariance must be symmetric to within [`SYM_TOL`]; eigenvalues in
/// `[-PSD_TOL, 0)` are clamped to zero, anything lower is rejected. The
/// PSD square root is precomputed so sampling is a matrix-vector product.
#[derive(Debug, Clone)]
pub struct MvGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    sqrt: DMatrix<f64>,
}

impl MvGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid(format!(
                "covariance is {}x{}, mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > SYM_TOL {
            return Err(Error::invalid(format!(
                "covariance asymmetry {asym:.3e} exceeds {SYM_TOL:.0e}"
            )));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOL) {
            return Err(Error::invalid(format!(
                "covariance has eigenvalue {bad:.6e} below -{PSD_TOL:.0e}; not PSD"
            )));
        }
        let mut sqrt_vals = eig.eigenvalues.clone();
        sqrt_vals.iter_mut().for_each(|l| *l = l.max(0.0).sqrt());
        let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Ok(MvGaussian { mean, cov: sym, sqrt })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample(&self, rng: &mut RngHandle) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.sqrt * z
    }
}

/// PSD square root of a symmetric 2x2 matrix, eigen-clamped at zero.
///
/// Used to precompute noise factors for the hot simulation paths.
pub fn psd_sqrt2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let asym = (m - m.transpose()).abs().max();
    if asym > SYM_TOL {
        return Err(Error::invalid(format!(
            "matrix asymmetry {asym:.3e} exceeds {SYM_TOL:.0e}"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOL) {
        return Err(Error::invalid(format!(
            "matrix has eigenvalue {bad:.6e} below -{PSD_TOL:.0e}; not PSD"
        )));
    }
    let mut d = eig.eigenvalues;
    d.iter_mut().for_each(|l| *l = l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Projects a 2x2 matrix onto the symmetric PSD cone (symmetrize, then
/// clamp negative eigenvalues to zero). Infallible; used by the filter to
/// keep covariances well-formed under accumulated rounding.
pub fn psd_project2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = eig.eigenvalues;
    d.iter_mut().for_each(|l| *l = l.max(0.0));
    eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Draws from `N(mean, factor * factor^T)` given a precomputed factor.
pub fn sample_gaussian2(
    mean: &Vector2<f64>,
    factor: &Matrix2<f64>,
    rng: &mut RngHandle,
) -> Vector2<f64> {
    let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    mean + factor * z
}

// ---------------------------------------------------------------------------
// Beta
// ---------------------------------------------------------------------------

/// Draws from `Beta(alpha, beta)`; both shapes must be finite and positive.
pub fn sample_beta(alpha: f64, beta: f64, rng: &mut RngHandle) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "beta shapes must be positive and finite, got ({alpha}, {beta})"
        )));
    }
    let dist = BetaDist::new(alpha, beta)
        .map_err(|e| Error::invalid(format!("beta({alpha}, {beta}): {e}")))?;
    Ok(dist.sample(rng))
}

// ---------------------------------------------------------------------------
// Matrix-normal inverse-Wishart
// ---------------------------------------------------------------------------

/// Conjugate prior for a `(2x2 coefficient matrix, 2x2 noise covariance)`
/// pair: `Sigma ~ IW(n0, S0)`, `A | Sigma ~ MN(M0, Sigma, K0)` with `K0`
/// the column precision.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MniwPrior {
    pub m0: Matrix2<f64>,
    pub k0: Matrix2<f64>,
    pub n0: f64,
    pub s0: Matrix2<f64>,
}

impl MniwPrior {
    pub fn new(m0: Matrix2<f64>, k0: Matrix2<f64>, n0: f64, s0: Matrix2<f64>) -> Result<Self> {
        let d = 2.0;
        if !(n0 > d - 1.0) {
            return Err(Error::invalid(format!(
                "MNIW degrees of freedom must exceed d-1 = {}, got {n0}",
                d - 1.0
            )));
        }
        for (name, m) in [("K0", &k0), ("S0", &s0)] {
            if (m - m.transpose()).abs().max() > SYM_TOL {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
            if m.cholesky().is_none() {
                return Err(Error::invalid(format!("{name} is not positive-definite")));
            }
        }
        Ok(MniwPrior { m0, k0, n0, s0 })
    }
}

/// Draws `(A, Sigma)` from the MNIW prior/posterior.
///
/// `Sigma` comes from the inverse Wishart via a Bartlett decomposition of
/// the Wishart on `S0^{-1}`, then inversion; `A` from the matrix normal
/// `MN(M0, Sigma, K0)`.
pub fn sample_mniw(prior: &MniwPrior, rng: &mut RngHandle) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    let sigma = sample_inverse_wishart2(prior.n0, &prior.s0, rng)?;
    let a = sample_matrix_normal2(&prior.m0, &sigma, &prior.k0, rng)?;
    Ok((a, sigma))
}

/// Inverse Wishart draw `Sigma ~ IW(df, scale)` for 2x2 matrices.
pub fn sample_inverse_wishart2(
    df: f64,
    scale: &Matrix2<f64>,
    rng: &mut RngHandle,
) -> Result<Matrix2<f64>> {
    if !(df > 1.0) {
        return Err(Error::invalid(format!(
            "inverse Wishart df must exceed d-1 = 1, got {df}"
        )));
    }
    let scale_inv = scale
        .try_inverse()
        .ok_or_else(|| Error::numerical("inverse Wishart scale is singular".to_string()))?;
    let scale_inv = (scale_inv + scale_inv.transpose()) * 0.5;
    let l = scale_inv
        .cholesky()
        .ok_or_else(|| Error::numerical("inverse Wishart scale inverse is not PD".to_string()))?
        .l();
    // Bartlett: W = (L A)(L A)^T ~ Wishart(df, scale^{-1}), Sigma = W^{-1}.
    let c11 = ChiSquared::new(df)
        .map_err(|e| Error::invalid(format!("chi-squared({df}): {e}")))?
        .sample(rng)
        .sqrt();
    let c22 = ChiSquared::new(df - 1.0)
        .map_err(|e| Error::invalid(format!("chi-squared({}): {e}", df - 1.0)))?
        .sample(rng)
        .sqrt();
    let n21: f64 = rng.sample(StandardNormal);
    let bart = Matrix2::new(c11, 0.0, n21, c22);
    let la = l * bart;
    let la_inv = la
        .try_inverse()
        .ok_or_else(|| Error::numerical("Bartlett factor is singular".to_string()))?;
    let sigma = la_inv.transpose() * la_inv;
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Matrix normal draw `A ~ MN(mean, row_cov, col_prec)` for 2x2 matrices.
pub fn sample_matrix_normal2(
    mean: &Matrix2<f64>,
    row_cov: &Matrix2<f64>,
    col_prec: &Matrix2<f64>,
    rng: &mut RngHandle,
) -> Result<Matrix2<f64>> {
    let row_l = row_cov
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::numerical("matrix normal row covariance is not PD".to_string()))?;
    let col_l = col_prec
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::numerical("matrix normal column precision is not PD".to_string()))?;
    let col_l_inv = col_l
        .try_inverse()
        .ok_or_else(|| Error::numerical("column precision factor is singular".to_string()))?;
    let z = Matrix2::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    // A = M + chol(U) Z B with B^T B = V = col_prec^{-1}.
    Ok(mean + row_l * z * col_l_inv)
}
