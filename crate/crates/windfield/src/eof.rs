//! SVD-based decomposition of the centered observation matrix into an
//! orthonormal temporal basis and spatial coefficient maps.

use nalgebra::{DMatrix, DVector};

use crate::data::ObservationMatrix;
use crate::error::{Result, WindError};

/// Decomposition of an S x T centered matrix: Ztilde = A Phi^T with
/// orthonormal temporal basis columns and coefficient columns ordered by
/// nonincreasing singular value.
#[derive(Debug, Clone)]
pub struct EofDecomposition {
    /// Length-T empirical temporal mean.
    pub mu_t: DVector<f64>,
    /// T x S orthonormal temporal basis, column k = phi_k.
    pub phi: DMatrix<f64>,
    /// S x S spatial coefficients, column k = a_k at the S stations.
    pub coeffs: DMatrix<f64>,
    /// Length-S nonincreasing singular values.
    pub singular_values: DVector<f64>,
    /// Number of leading components used for prediction.
    pub k_retained: usize,
}

/// Station-wise mean at each time, Eq. of the empirical temporal mean.
pub fn temporal_mean(m: &ObservationMatrix) -> Result<DVector<f64>> {
    if m.has_missing() {
        return Err(WindError::Completeness(
            "temporal mean requires a fully observed matrix".into(),
        ));
    }
    let s = m.n_stations() as f64;
    Ok(DVector::from_iterator(m.n_times(), m.values.column_iter().map(|c| c.sum() / s)))
}

/// Subtract the temporal mean from every station row.
pub fn center(m: &ObservationMatrix, mu_t: &DVector<f64>) -> Result<DMatrix<f64>> {
    if mu_t.len() != m.n_times() {
        return Err(WindError::Dimension(format!(
            "mean length {} does not match T = {}",
            mu_t.len(),
            m.n_times()
        )));
    }
    let mut z = m.values.clone();
    for j in 0..z.ncols() {
        for i in 0..z.nrows() {
            z[(i, j)] -= mu_t[j];
        }
    }
    Ok(z)
}

/// SVD of the centered matrix. Coefficients are U Sigma, the basis is V.
/// Components are sorted by nonincreasing singular value and each basis
/// column is flipped so its largest-magnitude entry is positive.
pub fn decompose(mu_t: DVector<f64>, ztilde: &DMatrix<f64>) -> Result<EofDecomposition> {
    let s = ztilde.nrows();
    let t = ztilde.ncols();
    if s > t {
        return Err(WindError::Dimension(format!("S = {s} > T = {t}")));
    }
    if ztilde.iter().any(|v| !v.is_finite()) {
        return Err(WindError::Numeric("non-finite entry in centered matrix".into()));
    }
    // go through the S x S Gram matrix rather than a direct SVD: the
    // symmetric eigensolver is far more dependable than the iterative
    // bidiagonal SVD on these tall matrices. With Gram eigenvectors v_k
    // and u_k = Ztilde^T v_k, the expansion sum_k v_k u_k^T reproduces
    // Ztilde to machine precision, so phi_k = u_k / |u_k| and
    // a_k = |u_k| v_k give an exact factorization.
    let gram = ztilde * ztilde.transpose();
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut components: Vec<(f64, DVector<f64>, DVector<f64>)> = (0..s)
        .map(|c| {
            let v = eig.eigenvectors.column(c).clone_owned();
            let u = ztilde.transpose() * &v;
            (u.norm(), v, u)
        })
        .collect();
    components.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut phi = DMatrix::zeros(t, s);
    let mut coeffs = DMatrix::zeros(s, s);
    let mut singular_values = DVector::zeros(s);
    for (k, (sigma, v, u)) in components.into_iter().enumerate() {
        singular_values[k] = sigma;
        if sigma <= 0.0 {
            continue;
        }
        // sign convention: largest-magnitude basis entry positive
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for j in 0..t {
            if u[j].abs() > max_abs {
                max_abs = u[j].abs();
                sign = if u[j] >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        for j in 0..t {
            phi[(j, k)] = sign * u[j] / sigma;
        }
        for i in 0..s {
            coeffs[(i, k)] = sign * sigma * v[i];
        }
    }
    Ok(EofDecomposition { mu_t, phi, coeffs, singular_values, k_retained: s })
}

impl EofDecomposition {
    pub fn n_times(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.phi.ncols()
    }

    /// Field value at one location and one time index given coefficient
    /// values for the first `coeffs_at.len()` components.
    pub fn reconstruct_at(&self, coeffs_at: &[f64], time: usize) -> Result<f64> {
        if coeffs_at.len() > self.k_retained {
            return Err(WindError::Dimension(format!(
                "{} coefficients exceed k_retained = {}",
                coeffs_at.len(),
                self.k_retained
            )));
        }
        let mut v = self.mu_t[time];
        for (k, a) in coeffs_at.iter().enumerate() {
            v += a * self.phi[(time, k)];
        }
        Ok(v)
    }

    /// Reconstruct a time series over the requested time indices.
    pub fn reconstruct_series(&self, coeffs_at: &[f64], times: &[usize]) -> Result<Vec<f64>> {
        times.iter().map(|&j| self.reconstruct_at(coeffs_at, j)).collect()
    }
}

/// Empirical diagnostics for the coefficient structure.
#[derive(Debug, Clone)]
pub struct Eq4Diagnostics {
    /// max_k |mean_i a_k(s_i)| / sigma_k over components with sigma_k > 0.
    pub max_coeff_mean: f64,
    /// Largest normalized off-diagonal of the empirical coefficient
    /// covariance.
    pub max_offdiag_cov: f64,
    /// Number of adjacent diagonal pairs violating nonincreasing order.
    pub monotonicity_violations: usize,
    pub mean_ok: bool,
    pub cov_ok: bool,
    pub order_ok: bool,
}

impl Eq4Diagnostics {
    pub fn all_ok(&self) -> bool {
        self.mean_ok && self.cov_ok && self.order_ok
    }
}

/// Check that coefficient columns are centred, empirically uncorrelated
/// and ordered by nonincreasing variance.
pub fn verify_eq4(d: &EofDecomposition) -> Eq4Diagnostics {
    verify_coeff_structure(&d.coeffs, &d.singular_values)
}

pub fn verify_coeff_structure(coeffs: &DMatrix<f64>, singular_values: &DVector<f64>) -> Eq4Diagnostics {
    let s = coeffs.nrows();
    let k = coeffs.ncols();
    // components at round-off scale carry no structure worth checking;
    // the Gram-matrix factorization leaves numerically null directions
    // with singular values near sqrt(machine epsilon) relative
    let sigma_floor = 1e-7 * singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let live = |c: usize| singular_values[c] > sigma_floor;
    let mut max_coeff_mean: f64 = 0.0;
    for c in (0..k).filter(|&c| live(c)) {
        let mean = coeffs.column(c).sum() / s as f64;
        max_coeff_mean = max_coeff_mean.max(mean.abs() / singular_values[c]);
    }
    // empirical covariance of coefficient columns (they are centred)
    let cov = coeffs.transpose() * coeffs / s as f64;
    let mut max_offdiag: f64 = 0.0;
    for a in (0..k).filter(|&a| live(a)) {
        for b in ((a + 1)..k).filter(|&b| live(b)) {
            let denom = (cov[(a, a)] * cov[(b, b)]).sqrt();
            if denom > 0.0 {
                max_offdiag = max_offdiag.max(cov[(a, b)].abs() / denom);
            }
        }
    }
    let mut violations = 0usize;
    for a in 0..k.saturating_sub(1) {
        if cov[(a + 1, a + 1)] > cov[(a, a)] * (1.0 + 1e-10) + 1e-12 {
            violations += 1;
        }
    }
    Eq4Diagnostics {
        max_coeff_mean,
        max_offdiag_cov: max_offdiag,
        monotonicity_violations: violations,
        mean_ok: max_coeff_mean <= 1e-8,
        cov_ok: max_offdiag <= 1e-8,
        order_ok: violations == 0,
    }
}
