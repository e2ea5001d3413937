//! Regularized extreme learning machines: random logistic hidden layer,
//! ridge output weights with GCV-selected Tikhonov factors, M-member
//! ensembles and distribution-free variance estimators.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, WindError};

#[inline]
pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draw input weights (d x N) and biases (N) i.i.d. uniform on [-1, 1].
pub fn init_member(d: usize, n_neurons: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if n_neurons < 1 {
        return Err(WindError::Parameter("need at least one hidden neuron".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(d, n_neurons, |_, _| rng.gen_range(-1.0..=1.0));
    let b = DVector::from_fn(n_neurons, |_, _| rng.gen_range(-1.0..=1.0));
    Ok((w, b))
}

/// Hidden layer matrix H_ij = g(x_i . w_j + b_j) for inputs X (n x d).
pub fn hidden_matrix(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut h = x * w;
    for j in 0..h.ncols() {
        for i in 0..h.nrows() {
            h[(i, j)] = logistic(h[(i, j)] + b[j]);
        }
    }
    h
}

/// Ridge solution (H^T H + alpha I)^-1 H^T y via Cholesky on the
/// regularized normal equations.
pub fn fit_ridge(h: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    if alpha < 0.0 {
        return Err(WindError::Parameter("negative Tikhonov factor".into()));
    }
    let chol = regularized_cholesky(h, alpha)?;
    Ok(chol.solve(&(h.transpose() * y)))
}

fn regularized_cholesky(h: &DMatrix<f64>, alpha: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let n_neurons = h.ncols();
    let mut hth = h.transpose() * h;
    for j in 0..n_neurons {
        hth[(j, j)] += alpha;
    }
    let scale = (0..n_neurons).map(|j| hth[(j, j)]).fold(0.0, f64::max);
    let chol = Cholesky::new(hth).ok_or_else(|| {
        WindError::Singular(format!("H^T H + {alpha} I is not positive definite"))
    })?;
    // nalgebra accepts zero pivots; reject them so rank-deficient systems
    // fail loudly instead of producing infinities
    let l = chol.l_dirty();
    for j in 0..n_neurons {
        let p = l[(j, j)];
        if !(p.is_finite() && p * p > scale * 1e-14) {
            return Err(WindError::Singular(format!(
                "H^T H + {alpha} I is numerically singular (pivot {p})"
            )));
        }
    }
    Ok(chol)
}

/// Shrinkage factors, trace and residual sum of squares of the ridge
/// smoother from an SVD of H, for all requested Tikhonov factors.
struct GcvSpectrum {
    singular_sq: Vec<f64>,
    /// Projections of y on the left singular vectors.
    u_proj: Vec<f64>,
    y_norm_sq: f64,
    n: usize,
}

impl GcvSpectrum {
    fn new(h: &DMatrix<f64>, y: &DVector<f64>) -> GcvSpectrum {
        let n = h.nrows();
        let svd = h.clone().svd(true, false);
        let u = svd.u.as_ref().expect("svd with u");
        let u_proj: Vec<f64> = (0..u.ncols()).map(|i| u.column(i).dot(y)).collect();
        GcvSpectrum {
            singular_sq: svd.singular_values.iter().map(|s| s * s).collect(),
            u_proj,
            y_norm_sq: y.norm_squared(),
            n,
        }
    }

    /// (GCV value, trace of the hat matrix), or None when the smoother is
    /// degenerate (trace >= n).
    fn gcv(&self, alpha: f64) -> Option<(f64, f64)> {
        let mut trace = 0.0;
        let mut rss = self.y_norm_sq;
        for (&s2, &p) in self.singular_sq.iter().zip(&self.u_proj) {
            let c = s2 / (s2 + alpha);
            trace += c;
            rss += (1.0 - c) * (1.0 - c) * p * p - p * p;
        }
        let rss = rss.max(0.0);
        let n = self.n as f64;
        if trace >= n {
            return None;
        }
        let denom = 1.0 - trace / n;
        Some(((rss / n) / (denom * denom), trace))
    }
}

/// GCV score of the ridge smoother at one Tikhonov factor, or None when
/// the smoother is degenerate (effective df >= n).
pub fn gcv_value(h: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Option<f64> {
    GcvSpectrum::new(h, y).gcv(alpha).map(|(g, _)| g)
}

/// Minimize GCV over a grid of Tikhonov factors, ties broken toward the
/// larger factor.
pub fn gcv_select(h: &DMatrix<f64>, y: &DVector<f64>, alpha_grid: &[f64]) -> Result<f64> {
    if alpha_grid.is_empty() {
        return Err(WindError::Parameter("empty Tikhonov grid".into()));
    }
    if alpha_grid.iter().any(|a| *a <= 0.0) {
        return Err(WindError::Parameter("Tikhonov grid must be positive".into()));
    }
    let spectrum = GcvSpectrum::new(h, y);
    let mut grid: Vec<f64> = alpha_grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    let mut best: Option<(f64, f64)> = None;
    for &alpha in &grid {
        if let Some((g, _)) = spectrum.gcv(alpha) {
            match best {
                Some((gb, _)) if g > gb => {}
                _ => best = Some((g, alpha)),
            }
        }
    }
    best.map(|(_, a)| a)
        .ok_or_else(|| WindError::Selection("no admissible Tikhonov factor in grid".into()))
}

/// The default 61-point logarithmic Tikhonov grid over [1e-8, 1e4].
pub fn default_alpha_grid() -> Vec<f64> {
    let lo = -8.0_f64;
    let hi = 4.0_f64;
    (0..61).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / 60.0)).collect()
}

/// One trained ensemble member.
#[derive(Debug, Clone)]
pub struct ElmMember {
    /// Input weights, d x N.
    pub w: DMatrix<f64>,
    /// Hidden biases, length N.
    pub b: DVector<f64>,
    pub alpha: f64,
    /// Output weights, length N.
    pub beta: DVector<f64>,
    /// Smoother factor (H^T H + alpha I)^-1 H^T, N x n.
    pub h_alpha: DMatrix<f64>,
}

impl ElmMember {
    /// Hidden activations at one input point.
    pub fn hidden_at(&self, x0: &[f64]) -> DVector<f64> {
        let n_neurons = self.w.ncols();
        DVector::from_fn(n_neurons, |j, _| {
            let mut z = self.b[j];
            for (xi, wij) in x0.iter().zip(self.w.column(j).iter()) {
                z += xi * wij;
            }
            logistic(z)
        })
    }

    /// Per-point smoother weights l_m(x0) = (H^alpha)^T h(x0), length n.
    pub fn weight_vector(&self, x0: &[f64]) -> DVector<f64> {
        self.h_alpha.transpose() * self.hidden_at(x0)
    }

    pub fn predict(&self, x0: &[f64]) -> f64 {
        self.hidden_at(x0).dot(&self.beta)
    }
}

/// Ensemble training configuration.
#[derive(Debug, Clone)]
pub struct ElmConfig {
    /// Hidden neurons per member; defaults to floor(0.9 n).
    pub n_neurons: Option<usize>,
    pub m_members: usize,
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for ElmConfig {
    fn default() -> Self {
        ElmConfig { n_neurons: None, m_members: 20, alpha_grid: default_alpha_grid(), seed: 0 }
    }
}

/// Model and noise variance estimates at one input point.
#[derive(Debug, Clone, Copy)]
pub struct VarianceEstimates {
    pub sigma2_s2: f64,
    pub sigma2_br: f64,
    pub sigma2_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    S2,
    BR,
}

/// M regularized members sharing one training set, with the ensemble hat
/// matrix statistics needed by the variance estimators.
#[derive(Debug, Clone)]
pub struct ElmEnsemble {
    pub members: Vec<ElmMember>,
    /// Training targets, length n.
    pub y: DVector<f64>,
    /// Ensemble-hat training residuals y - Abar y.
    pub residuals: DVector<f64>,
    /// Effective degrees of freedom tr(2 Abar - Abar Abar^T).
    pub df: f64,
    /// Noise variance ||y - Abar y||^2 / (n - df), clamped at zero.
    pub sigma2_eps: f64,
}

impl ElmEnsemble {
    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn m_members(&self) -> usize {
        self.members.len()
    }

    /// Ensemble mean prediction at one point.
    pub fn predict(&self, x0: &[f64]) -> f64 {
        let m = self.members.len() as f64;
        self.members.iter().map(|mem| mem.predict(x0)).sum::<f64>() / m
    }

    /// Both model variance estimates at one point.
    pub fn variance_at(&self, x0: &[f64]) -> Result<VarianceEstimates> {
        let m = self.members.len();
        if m < 2 {
            return Err(WindError::EnsembleSize(m));
        }
        let mf = m as f64;
        let n = self.n_train() as f64;
        let weights: Vec<DVector<f64>> =
            self.members.iter().map(|mem| mem.weight_vector(x0)).collect();
        let mut l_bar = DVector::zeros(self.n_train());
        for l in &weights {
            l_bar += l;
        }
        l_bar /= mf;

        let preds: Vec<f64> = weights.iter().map(|l| l.dot(&self.y)).collect();
        let mean_pred = preds.iter().sum::<f64>() / mf;
        let tau2 =
            preds.iter().map(|p| (p - mean_pred) * (p - mean_pred)).sum::<f64>() / (mf * (mf - 1.0));
        // shared-noise contribution to the between-member spread
        let spread: f64 = weights.iter().map(|l| (l - &l_bar).norm_squared()).sum();
        let tau2_c = (tau2 - self.sigma2_eps * spread / (mf * (mf - 1.0))).max(0.0);

        let sigma2_br = tau2_c + self.sigma2_eps * l_bar.norm_squared();
        let scale = n / (n - self.df);
        let noise_s2: f64 = l_bar
            .iter()
            .zip(self.residuals.iter())
            .map(|(l, r)| l * l * r * r * scale)
            .sum();
        let sigma2_s2 = tau2_c + noise_s2;
        Ok(VarianceEstimates {
            sigma2_s2: sigma2_s2.max(0.0),
            sigma2_br: sigma2_br.max(0.0),
            sigma2_eps: self.sigma2_eps,
        })
    }

    pub fn model_variance(&self, x0: &[f64], mode: VarianceMode) -> Result<f64> {
        let v = self.variance_at(x0)?;
        Ok(match mode {
            VarianceMode::S2 => v.sigma2_s2,
            VarianceMode::BR => v.sigma2_br,
        })
    }
}

/// Train an M-member ensemble on standardized inputs X (n x d) and
/// targets y. Member m is seeded with `seed ^ m`, so fitting is
/// deterministic regardless of the parallel schedule.
pub fn fit_ensemble(x: &DMatrix<f64>, y: &DVector<f64>, config: &ElmConfig) -> Result<ElmEnsemble> {
    let n = x.nrows();
    let d = x.ncols();
    if y.len() != n {
        return Err(WindError::Dimension(format!("{} targets for {n} inputs", y.len())));
    }
    if config.m_members < 2 {
        return Err(WindError::EnsembleSize(config.m_members));
    }
    let n_neurons = config.n_neurons.unwrap_or(((0.9 * n as f64) as usize).max(1));

    struct FitOut {
        member: ElmMember,
        hat: DMatrix<f64>,
    }
    let fits: Vec<FitOut> = (0..config.m_members)
        .into_par_iter()
        .map(|m| -> Result<FitOut> {
            let seed = config.seed ^ m as u64;
            let (w, b) = init_member(d, n_neurons, seed)?;
            let h = hidden_matrix(x, &w, &b);
            let alpha = gcv_select(&h, y, &config.alpha_grid)?;
            let chol = regularized_cholesky(&h, alpha)?;
            let h_alpha = chol.solve(&h.transpose());
            let beta = &h_alpha * y;
            let hat = &h * &h_alpha;
            Ok(FitOut { member: ElmMember { w, b, alpha, beta, h_alpha }, hat })
        })
        .collect::<Result<_>>()?;

    let mf = config.m_members as f64;
    let mut a_bar = DMatrix::zeros(n, n);
    for f in &fits {
        a_bar += &f.hat;
    }
    a_bar /= mf;
    // df = tr(2 Abar - Abar Abar^T); Abar is symmetric here
    let trace: f64 = (0..n).map(|i| a_bar[(i, i)]).sum();
    let frob2 = a_bar.iter().map(|v| v * v).sum::<f64>();
    let df = 2.0 * trace - frob2;
    if df >= n as f64 {
        return Err(WindError::DegreesOfFreedom { df, n });
    }
    let residuals = y - &a_bar * y;
    let sigma2_eps = (residuals.norm_squared() / (n as f64 - df)).max(0.0);

    Ok(ElmEnsemble {
        members: fits.into_iter().map(|f| f.member).collect(),
        y: y.clone(),
        residuals,
        df,
        sigma2_eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let (w1, b1) = init_member(3, 5, 99).unwrap();
        let (w2, b2) = init_member(3, 5, 99).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
        let (w, b) = init_member(10, 10_000, 1).unwrap();
        let all: Vec<f64> = w.iter().chain(b.iter()).copied().collect();
        assert!(all.iter().all(|v| (-1.0..=1.0).contains(v)));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 0.02, "uniform sample mean {mean}");
    }

    #[test]
    fn init_with_zero_input_dim() {
        let (w, b) = init_member(0, 4, 1).unwrap();
        assert_eq!(w.nrows(), 0);
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn hidden_matrix_values() {
        let x = DMatrix::zeros(1, 2);
        let (w, _) = init_member(2, 3, 5).unwrap();
        let b = DVector::zeros(3);
        let h = hidden_matrix(&x, &w, &b);
        for v in h.iter() {
            assert_eq!(*v, 0.5);
        }
        assert!((logistic(3.0_f64.ln()) - 0.75).abs() < 1e-12);
        for z in [-3.0, -0.2, 0.0, 1.7] {
            assert!((logistic(z) + logistic(-z) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_identity_and_hand_case() {
        let h = DMatrix::identity(4, 4);
        let y = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let beta = fit_ridge(&h, &y, 0.0).unwrap();
        assert!((beta - &y).norm() < 1e-12);

        let h = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 2.0]);
        let beta = fit_ridge(&h, &y, 2.0).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let h = DMatrix::from_fn(20, 7, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(20, |_, _| rng.gen_range(-1.0..1.0));
            let alpha = rng.gen_range(1e-6..10.0);
            let beta = fit_ridge(&h, &y, alpha).unwrap();
            let mut lhs = h.transpose() * &h * &beta;
            lhs += alpha * &beta;
            let rhs = h.transpose() * &y;
            assert!((lhs - &rhs).norm() / rhs.norm() < 1e-8);
        }
    }

    #[test]
    fn ridge_singular_without_regularization() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(fit_ridge(&h, &y, 0.0), Err(WindError::Singular(_))));
    }

    #[test]
    fn beta_norm_nonincreasing_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = DMatrix::from_fn(15, 6, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(15, |_, _| rng.gen_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for &alpha in &default_alpha_grid() {
            let norm = fit_ridge(&h, &y, alpha).unwrap().norm();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
    }

    #[test]
    fn gcv_hand_computation() {
        let h = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 0.0]);
        let spectrum = GcvSpectrum::new(&h, &y);
        let (g, trace) = spectrum.gcv(2.0).unwrap();
        assert!((trace - 0.5).abs() < 1e-12);
        assert!((g - 2.0 / 0.9).abs() < 1e-10, "gcv {g}"); // 2.2222
    }

    #[test]
    fn gcv_matches_explicit_hat_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let n = rng.gen_range(5..40);
            let p = rng.gen_range(1..n);
            let h = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let spectrum = GcvSpectrum::new(&h, &y);
            for &alpha in &[1e-4, 0.3, 10.0] {
                // brute force via the explicit hat matrix
                let mut hth = h.transpose() * &h;
                for j in 0..p {
                    hth[(j, j)] += alpha;
                }
                let inv = hth.try_inverse().unwrap();
                let hat = &h * inv * h.transpose();
                let fitted = &hat * &y;
                let rss = (&y - fitted).norm_squared();
                let trace: f64 = (0..n).map(|i| hat[(i, i)]).sum();
                let nf = n as f64;
                let expect = (rss / nf) / ((1.0 - trace / nf) * (1.0 - trace / nf));
                let (got, _) = spectrum.gcv(alpha).unwrap();
                assert!((got - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gcv_prefers_heavy_regularization_for_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let (w, b) = init_member(2, 36, 3).unwrap();
        let h = hidden_matrix(&x, &w, &b);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let alpha = gcv_select(&h, &y, &default_alpha_grid()).unwrap();
        // pure noise: the selected smoother must stay far from
        // interpolation (36 of 40 effective df would fit the noise)
        let spectrum = GcvSpectrum::new(&h, &y);
        let (_, trace) = spectrum.gcv(alpha).unwrap();
        assert!(trace < 0.5 * n as f64, "trace {trace} at alpha {alpha}");
        let (_, trace_tiny) = spectrum.gcv(1e-8).unwrap();
        assert!(trace < trace_tiny, "no shrinkage relative to alpha -> 0");
    }

    fn toy_ensemble(seed: u64, noise: f64, m: usize) -> (DMatrix<f64>, DVector<f64>, ElmEnsemble) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let x = DMatrix::from_fn(n, 1, |i, _| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
        let y = DVector::from_fn(n, |i, _| {
            (2.0 * x[(i, 0)]).sin() + noise * rng.gen_range(-1.0..1.0)
        });
        let config = ElmConfig { n_neurons: Some(20), m_members: m, seed, ..Default::default() };
        let e = fit_ensemble(&x, &y, &config).unwrap();
        (x, y, e)
    }

    #[test]
    fn ensemble_prediction_is_mean_of_members() {
        let (_, _, e) = toy_ensemble(17, 0.1, 5);
        for x0 in [-0.7, 0.0, 0.9] {
            let mean =
                e.members.iter().map(|m| m.predict(&[x0])).sum::<f64>() / e.m_members() as f64;
            assert!((e.predict(&[x0]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_linear_in_targets() {
        let (x, y, e) = toy_ensemble(23, 0.1, 4);
        // same weights, scaled targets: rebuild the smoother output l . y
        let x0 = [0.3];
        let member = &e.members[0];
        let l = member.weight_vector(&x0);
        let y2 = 2.0 * &y;
        let pred1 = l.dot(&y);
        let pred2 = l.dot(&y2);
        assert!((pred2 - 2.0 * pred1).abs() < 1e-10);
        assert!((pred1 - member.predict(&x0)).abs() < 1e-10);
        let _ = x;
    }

    #[test]
    fn noise_variance_zero_for_interpolated_targets() {
        // constant targets are in the fixed space of the logistic smoother
        // only approximately; instead check y = 0 exactly
        let (x, _, _) = toy_ensemble(31, 0.0, 3);
        let y = DVector::zeros(x.nrows());
        let config = ElmConfig { n_neurons: Some(20), m_members: 3, seed: 31, ..Default::default() };
        let e = fit_ensemble(&x, &y, &config).unwrap();
        assert!(e.sigma2_eps.abs() < 1e-20);
        let v = e.variance_at(&[0.1]).unwrap();
        assert_eq!(v.sigma2_br, 0.0);
        assert_eq!(v.sigma2_s2, 0.0);
    }

    #[test]
    fn null_smoother_noise_variance() {
        // alpha forced huge: Abar ~ 0, so sigma2_eps ~ ||y||^2 / n
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 50;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let config = ElmConfig {
            n_neurons: Some(10),
            m_members: 2,
            alpha_grid: vec![1e12],
            seed: 1,
        };
        let e = fit_ensemble(&x, &y, &config).unwrap();
        let expect = y.norm_squared() / n as f64;
        assert!((e.sigma2_eps - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn variance_requires_two_members() {
        let (_, _, mut e) = toy_ensemble(5, 0.1, 3);
        e.members.truncate(1);
        assert!(matches!(e.variance_at(&[0.0]), Err(WindError::EnsembleSize(1))));
    }

    #[test]
    fn variances_are_nonnegative() {
        let (_, _, e) = toy_ensemble(19, 0.4, 6);
        for i in 0..20 {
            let x0 = [-1.0 + 0.1 * i as f64];
            let v = e.variance_at(&x0).unwrap();
            assert!(v.sigma2_s2 >= 0.0);
            assert!(v.sigma2_br >= 0.0);
        }
    }
}
