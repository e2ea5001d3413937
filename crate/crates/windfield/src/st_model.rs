//! The full spatio-temporal model: one ELM ensemble per EOF component,
//! field prediction, spatio-temporal model variance, and prediction
//! variance through a second model on log-squared residuals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::ObservationMatrix;
use crate::elm::{fit_ensemble, ElmConfig, ElmEnsemble, VarianceMode};
use crate::eof::{self, EofDecomposition};
use crate::error::{Result, WindError};
use crate::terrain::Standardizer;

/// Components whose singular value falls below this fraction of the
/// leading one carry no signal; their coefficient maps are identically
/// zero and are skipped during ELM fitting.
const ZERO_SINGULAR_REL: f64 = 1e-12;

/// Seed salt separating the second (variance) model from the first.
const VARIANCE_SEED_SALT: u64 = 0x9e3779b97f4a7c15;

#[derive(Debug, Clone)]
pub struct StModelConfig {
    pub elm: ElmConfig,
    /// Leading components used for prediction; default all.
    pub k_retained: Option<usize>,
    /// Added inside the logarithm of squared residuals.
    pub residual_floor: f64,
    /// Second-model ELM configuration; defaults to the first model's.
    pub variance_elm: Option<ElmConfig>,
}

impl Default for StModelConfig {
    fn default() -> Self {
        StModelConfig {
            elm: ElmConfig::default(),
            k_retained: None,
            residual_floor: 1e-6,
            variance_elm: None,
        }
    }
}

/// EOF decomposition plus one fitted ensemble per retained component with
/// nonzero singular value.
#[derive(Debug, Clone)]
pub struct StModel {
    pub eof: EofDecomposition,
    /// Index k -> ensemble, or None when sigma_k is (numerically) zero.
    pub ensembles: Vec<Option<ElmEnsemble>>,
    pub standardizer: Standardizer,
}

/// Point prediction with both variance estimates.
#[derive(Debug, Clone, Copy)]
pub struct StPrediction {
    pub mean: f64,
    pub var_model: f64,
    pub var_pred: f64,
}

/// Second spatio-temporal model fitted to log squared residuals.
#[derive(Debug, Clone)]
pub struct VarianceModel {
    pub model: StModel,
    pub floor: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub baseline_rmse: f64,
    pub baseline_mae: f64,
}

#[derive(Debug, Clone)]
pub struct CrossCovDiagnostics {
    /// Largest |corr| between residual vectors of distinct components.
    pub max_abs_normalized: f64,
    /// Components with nondegenerate residuals that were compared.
    pub n_components: usize,
    pub warn: bool,
}

pub const CROSS_COV_WARN_THRESHOLD: f64 = 0.2;

fn component_seed(base: u64, k: usize) -> u64 {
    base ^ ((k as u64 + 1) << 32)
}

/// Fit the full pipeline on a complete training matrix and the raw
/// (unstandardized) feature rows of its stations.
pub fn fit(
    train: &ObservationMatrix,
    features: &[Vec<f64>],
    config: &StModelConfig,
) -> Result<StModel> {
    if train.has_missing() {
        return Err(WindError::Completeness("training matrix has missing cells".into()));
    }
    if features.len() != train.n_stations() {
        return Err(WindError::Dimension(format!(
            "{} feature rows for {} stations",
            features.len(),
            train.n_stations()
        )));
    }
    let mu = eof::temporal_mean(train)?;
    let ztilde = eof::center(train, &mu)?;
    let mut decomposition = eof::decompose(mu, &ztilde)?;
    if let Some(k) = config.k_retained {
        if k > decomposition.n_components() {
            return Err(WindError::Dimension(format!(
                "k_retained = {k} exceeds {} components",
                decomposition.n_components()
            )));
        }
        decomposition.k_retained = k;
    }

    let standardizer = Standardizer::fit(features);
    let x = feature_matrix(&standardizer, features);
    let sigma0 = decomposition.singular_values[0];
    let ensembles: Vec<Option<ElmEnsemble>> = (0..decomposition.k_retained)
        .into_par_iter()
        .map(|k| -> Result<Option<ElmEnsemble>> {
            let sigma = decomposition.singular_values[k];
            if sigma0 <= 0.0 || sigma <= ZERO_SINGULAR_REL * sigma0 {
                return Ok(None);
            }
            let y: DVector<f64> = decomposition.coeffs.column(k).clone_owned();
            let elm_config =
                ElmConfig { seed: component_seed(config.elm.seed, k), ..config.elm.clone() };
            Ok(Some(fit_ensemble(&x, &y, &elm_config)?))
        })
        .collect::<Result<_>>()?;

    Ok(StModel { eof: decomposition, ensembles, standardizer })
}

fn feature_matrix(standardizer: &Standardizer, features: &[Vec<f64>]) -> DMatrix<f64> {
    let n = features.len();
    let d = standardizer.mean.len();
    DMatrix::from_fn(n, d, |i, j| (features[i][j] - standardizer.mean[j]) / standardizer.sd[j])
}

impl StModel {
    pub fn k_retained(&self) -> usize {
        self.eof.k_retained
    }

    /// Predicted coefficient vector at one raw feature row.
    pub fn coefficients_at(&self, features: &[f64]) -> Vec<f64> {
        let x = self.standardizer.apply_row(features);
        self.ensembles
            .iter()
            .map(|e| e.as_ref().map(|e| e.predict(&x)).unwrap_or(0.0))
            .collect()
    }

    /// Field mean at the given locations (feature rows) and time indices.
    /// Output is locations x times.
    pub fn predict(&self, features: &[Vec<f64>], times: &[usize]) -> Result<DMatrix<f64>> {
        let t = self.eof.n_times();
        for &j in times {
            if j >= t {
                return Err(WindError::Range(format!("time index {j} out of 0..{t}")));
            }
        }
        let rows: Vec<Vec<f64>> = features
            .par_iter()
            .map(|f| {
                let coeffs = self.coefficients_at(f);
                times
                    .iter()
                    .map(|&j| self.eof.reconstruct_at(&coeffs, j).expect("validated range"))
                    .collect()
            })
            .collect();
        Ok(DMatrix::from_fn(features.len(), times.len(), |i, j| rows[i][j]))
    }

    /// Per-component heteroskedastic model variances at one location.
    pub fn component_s2(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = self.standardizer.apply_row(features);
        self.ensembles
            .iter()
            .map(|e| match e {
                Some(e) => e.model_variance(&x, VarianceMode::S2),
                None => Ok(0.0),
            })
            .collect()
    }

    /// Spatio-temporal model variance: sum of component model variances
    /// weighted by the squared basis functions.
    pub fn model_variance(&self, features: &[Vec<f64>], times: &[usize]) -> Result<DMatrix<f64>> {
        let t = self.eof.n_times();
        for &j in times {
            if j >= t {
                return Err(WindError::Range(format!("time index {j} out of 0..{t}")));
            }
        }
        let rows: Vec<Vec<f64>> = features
            .par_iter()
            .map(|f| -> Result<Vec<f64>> {
                let s2 = self.component_s2(f)?;
                Ok(times.iter().map(|&j| combine_variances(&s2, &self.eof.phi, j)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(features.len(), times.len(), |i, j| rows[i][j]))
    }
}

/// sigma^2(s0, t_j) = sum_k v_k phi_k(t_j)^2.
pub fn combine_variances(per_component: &[f64], phi: &DMatrix<f64>, time: usize) -> f64 {
    per_component
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let p = phi[(time, k)];
            v * p * p
        })
        .sum()
}

/// Empirical cross-covariance between per-component training residuals.
/// The independence assumption behind the variance combination is only
/// checked, never enforced.
pub fn cross_covariance_check(
    model: &StModel,
    train_features: &[Vec<f64>],
) -> Result<CrossCovDiagnostics> {
    let n = train_features.len();
    let mut residuals: Vec<DVector<f64>> = Vec::new();
    for (k, ensemble) in model.ensembles.iter().enumerate() {
        let Some(e) = ensemble else { continue };
        let mut r = DVector::zeros(n);
        for (i, f) in train_features.iter().enumerate() {
            let x = model.standardizer.apply_row(f);
            r[i] = model.eof.coeffs[(i, k)] - e.predict(&x);
        }
        residuals.push(r);
    }
    let mut max_abs: f64 = 0.0;
    for a in 0..residuals.len() {
        for b in (a + 1)..residuals.len() {
            let ra = &residuals[a];
            let rb = &residuals[b];
            let ma = ra.mean();
            let mb = rb.mean();
            let ca: DVector<f64> = ra.map(|v| v - ma);
            let cb: DVector<f64> = rb.map(|v| v - mb);
            let denom = ca.norm() * cb.norm();
            if denom > 0.0 {
                max_abs = max_abs.max((ca.dot(&cb) / denom).abs());
            }
        }
    }
    Ok(CrossCovDiagnostics {
        max_abs_normalized: max_abs,
        n_components: residuals.len(),
        warn: max_abs > CROSS_COV_WARN_THRESHOLD,
    })
}

/// Fit the second model on the log of squared training residuals.
pub fn fit_variance_model(
    model: &StModel,
    train: &ObservationMatrix,
    features: &[Vec<f64>],
    config: &StModelConfig,
) -> Result<VarianceModel> {
    let times: Vec<usize> = (0..train.n_times()).collect();
    let predicted = model.predict(features, &times)?;
    let mut log_res = train.clone();
    for i in 0..train.n_stations() {
        for j in 0..train.n_times() {
            let r = train.values[(i, j)] - predicted[(i, j)];
            log_res.values[(i, j)] = (r * r + config.residual_floor).ln();
        }
    }
    let elm = config.variance_elm.clone().unwrap_or_else(|| ElmConfig {
        seed: config.elm.seed ^ VARIANCE_SEED_SALT,
        ..config.elm.clone()
    });
    let second_config = StModelConfig {
        elm,
        k_retained: config.k_retained,
        residual_floor: config.residual_floor,
        variance_elm: None,
    };
    let second = fit(&log_res, features, &second_config)?;
    Ok(VarianceModel { model: second, floor: config.residual_floor })
}

/// Delta-method back-transform of the log-residual model.
#[inline]
pub fn prediction_variance_formula(mu_l: f64, sigma2_l: f64) -> f64 {
    mu_l.exp() * (1.0 + 0.5 * sigma2_l)
}

impl VarianceModel {
    /// Per-component BR + noise variance at one location, for Eq. of the
    /// second model's prediction variance.
    fn component_br_plus_eps(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = self.model.standardizer.apply_row(features);
        self.model
            .ensembles
            .iter()
            .map(|e| match e {
                Some(e) => {
                    let v = e.variance_at(&x)?;
                    Ok(v.sigma2_br + v.sigma2_eps)
                }
                None => Ok(0.0),
            })
            .collect()
    }

    /// Spatio-temporal prediction variance at the given locations and
    /// time indices.
    pub fn prediction_variance(
        &self,
        features: &[Vec<f64>],
        times: &[usize],
    ) -> Result<DMatrix<f64>> {
        let mu_l = self.model.predict(features, times)?;
        let rows: Vec<Vec<f64>> = features
            .par_iter()
            .enumerate()
            .map(|(i, f)| -> Result<Vec<f64>> {
                let per_comp = self.component_br_plus_eps(f)?;
                times
                    .iter()
                    .enumerate()
                    .map(|(jj, &j)| {
                        let sigma2_l = combine_variances(&per_comp, &self.model.eof.phi, j);
                        let mu = mu_l[(i, jj)];
                        if !mu.is_finite() {
                            return Err(WindError::Numeric(format!(
                                "non-finite log-residual prediction {mu}"
                            )));
                        }
                        Ok(prediction_variance_formula(mu, sigma2_l))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(features.len(), times.len(), |i, j| rows[i][j]))
    }
}

/// RMSE/MAE over observed test cells, for the model and for the
/// empirical-temporal-mean baseline.
pub fn evaluate(
    model: &StModel,
    test: &ObservationMatrix,
    test_features: &[Vec<f64>],
) -> Result<EvalMetrics> {
    let times: Vec<usize> = (0..test.n_times()).collect();
    let predicted = model.predict(test_features, &times)?;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut base_se = 0.0;
    let mut base_ae = 0.0;
    let mut count = 0usize;
    for i in 0..test.n_stations() {
        for j in 0..test.n_times() {
            let z = test.values[(i, j)];
            if z.is_nan() {
                continue;
            }
            let e = z - predicted[(i, j)];
            se += e * e;
            ae += e.abs();
            let be = z - model.eof.mu_t[j];
            base_se += be * be;
            base_ae += be.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(WindError::Evaluation("no observed test cells".into()));
    }
    let n = count as f64;
    Ok(EvalMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        baseline_rmse: (base_se / n).sqrt(),
        baseline_mae: base_ae / n,
    })
}

/// Fraction of observed test cells inside +-1.96 prediction-standard-error
/// bands.
pub fn coverage_check(
    model: &StModel,
    vm: &VarianceModel,
    test: &ObservationMatrix,
    test_features: &[Vec<f64>],
) -> Result<f64> {
    let times: Vec<usize> = (0..test.n_times()).collect();
    let predicted = model.predict(test_features, &times)?;
    let var_pred = vm.prediction_variance(test_features, &times)?;
    let mut inside = 0usize;
    let mut count = 0usize;
    for i in 0..test.n_stations() {
        for j in 0..test.n_times() {
            let z = test.values[(i, j)];
            if z.is_nan() {
                continue;
            }
            let half = 1.96 * var_pred[(i, j)].max(0.0).sqrt();
            if (z - predicted[(i, j)]).abs() <= half {
                inside += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(WindError::Evaluation("no observed test cells".into()));
    }
    Ok(inside as f64 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObservationMatrix, StationLocation};
    use chrono::{TimeDelta, TimeZone, Utc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix_from(values: DMatrix<f64>, coords: &[(f64, f64)]) -> ObservationMatrix {
        let t0 = Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap();
        ObservationMatrix {
            station_ids: (0..values.nrows()).map(|i| format!("s{i}")).collect(),
            locations: coords
                .iter()
                .map(|&(x, y)| StationLocation { easting: x, northing: y, elevation: 0.0 })
                .collect(),
            time_grid: (0..values.ncols()).map(|j| t0 + TimeDelta::hours(j as i64)).collect(),
            values,
        }
    }

    fn small_config(seed: u64) -> StModelConfig {
        StModelConfig {
            elm: ElmConfig { n_neurons: Some(25), m_members: 5, seed, ..Default::default() },
            ..Default::default()
        }
    }

    /// Rank-one synthetic field: mean + a(s) phi(t) + noise.
    fn rank_one_case(
        n_stations: usize,
        n_times: usize,
        noise: f64,
        seed: u64,
    ) -> (ObservationMatrix, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<(f64, f64)> = (0..n_stations)
            .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        let a: Vec<f64> = coords.iter().map(|&(x, y)| (0.05 * x).sin() + 0.01 * y).collect();
        let phi: Vec<f64> = (0..n_times)
            .map(|j| (2.0 * std::f64::consts::PI * j as f64 / 24.0).cos())
            .collect();
        let mut values = DMatrix::zeros(n_stations, n_times);
        for i in 0..n_stations {
            for j in 0..n_times {
                values[(i, j)] =
                    5.0 + a[i] * phi[j] + noise * rng.gen_range(-1.0..1.0);
            }
        }
        let features: Vec<Vec<f64>> = coords.iter().map(|&(x, y)| vec![x, y]).collect();
        (matrix_from(values, &coords), features, a)
    }

    #[test]
    fn rank_one_field_recovers_spatial_map() {
        let (m, features, a_true) = rank_one_case(100, 200, 0.0, 2);
        let model = fit(&m, &features, &small_config(7)).unwrap();
        // leading component dominates; ensemble 0 should track a(s) up to
        // sign/scale
        let a_hat: Vec<f64> = features.iter().map(|f| model.coefficients_at(f)[0]).collect();
        let mean_t: f64 = a_true.iter().sum::<f64>() / a_true.len() as f64;
        let mean_h: f64 = a_hat.iter().sum::<f64>() / a_hat.len() as f64;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut dh = 0.0;
        for (t, h) in a_true.iter().zip(&a_hat) {
            num += (t - mean_t) * (h - mean_h);
            da += (t - mean_t) * (t - mean_t);
            dh += (h - mean_h) * (h - mean_h);
        }
        let r2 = (num / (da * dh).sqrt()).powi(2);
        assert!(r2 > 0.9, "component-map R^2 = {r2}");
    }

    #[test]
    fn constant_in_space_field_predicts_the_mean() {
        // integer-valued cells keep the station mean exact, so the
        // centered matrix is identically zero
        let mut values = DMatrix::zeros(20, 60);
        for j in 0..60 {
            let v = 1.0 + (j % 7) as f64;
            for i in 0..20 {
                values[(i, j)] = v;
            }
        }
        let coords: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, (i * i % 7) as f64)).collect();
        let m = matrix_from(values, &coords);
        let features: Vec<Vec<f64>> = coords.iter().map(|&(x, y)| vec![x, y]).collect();
        let model = fit(&m, &features, &small_config(3)).unwrap();
        // the centered matrix is zero, so every ensemble is skipped
        assert!(model.ensembles.iter().all(|e| e.is_none()));
        let pred = model.predict(&features[..1].to_vec(), &[0, 10, 59]).unwrap();
        for (jj, &j) in [0usize, 10, 59].iter().enumerate() {
            assert!((pred[(0, jj)] - model.eof.mu_t[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_matches_triple_sum_oracle() {
        let (m, features, _) = rank_one_case(30, 80, 0.3, 9);
        let config = small_config(5);
        let model = fit(&m, &features, &config).unwrap();
        let times = [0usize, 17, 42];
        let pred = model.predict(&features[..3].to_vec(), &times).unwrap();
        for (i, f) in features[..3].iter().enumerate() {
            let coeffs = model.coefficients_at(f);
            for (jj, &j) in times.iter().enumerate() {
                let mut v = model.eof.mu_t[j];
                for (k, a) in coeffs.iter().enumerate() {
                    v += a * model.eof.phi[(j, k)];
                }
                assert!((pred[(i, jj)] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn model_variance_hand_values() {
        // K=1, sigma^2 = 2, phi = 0.5 -> 0.5
        let phi = DMatrix::from_column_slice(1, 1, &[0.5]);
        assert!((combine_variances(&[2.0], &phi, 0) - 0.5).abs() < 1e-15);
        // K=2, sigma^2 = (1,4), phi = (0.6, 0.8) -> 2.92
        let phi = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        assert!((combine_variances(&[1.0, 4.0], &phi, 0) - 2.92).abs() < 1e-12);
    }

    #[test]
    fn time_average_of_model_variance_is_parseval_sum() {
        let (m, features, _) = rank_one_case(25, 120, 0.4, 13);
        let model = fit(&m, &features, &small_config(11)).unwrap();
        let times: Vec<usize> = (0..120).collect();
        let var = model.model_variance(&features[..2].to_vec(), &times).unwrap();
        for (i, f) in features[..2].iter().enumerate() {
            let s2 = model.component_s2(f).unwrap();
            let expect: f64 = s2.iter().sum::<f64>() / 120.0;
            let got: f64 = var.row(i).iter().sum::<f64>() / 120.0;
            assert!((got - expect).abs() <= 1e-10 * expect.max(1e-30));
        }
    }

    #[test]
    fn prediction_variance_formula_values() {
        assert!((prediction_variance_formula(0.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((prediction_variance_formula(2.0_f64.ln(), 1.0) - 3.0).abs() < 1e-12);
        let mu = 0.7;
        assert!((prediction_variance_formula(mu, 0.0) - mu.exp()).abs() < 1e-15);
    }

    #[test]
    fn perfect_first_model_gives_floor_variance_model() {
        // constant-in-space field: the first model predicts exactly,
        // residuals vanish, L = log(floor) everywhere
        let mut values = DMatrix::zeros(10, 40);
        for j in 0..40 {
            for i in 0..10 {
                values[(i, j)] = (2 + (j % 5)) as f64;
            }
        }
        let coords: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let m = matrix_from(values, &coords);
        let features: Vec<Vec<f64>> = coords.iter().map(|&(x, y)| vec![x, y]).collect();
        let config = small_config(1);
        let model = fit(&m, &features, &config).unwrap();
        let vm = fit_variance_model(&model, &m, &features, &config).unwrap();
        // second model's matrix is constant log(floor); prediction
        // variance = exp(log floor) (1 + 0) = floor
        let var = vm.prediction_variance(&features[..2].to_vec(), &[0, 5]).unwrap();
        for v in var.iter() {
            assert!((v - config.residual_floor).abs() < 1e-9 * config.residual_floor);
        }
    }

    #[test]
    fn cross_covariance_diagnostics_bounded() {
        let (m, features, _) = rank_one_case(30, 80, 0.5, 4);
        let model = fit(&m, &features, &small_config(2)).unwrap();
        let diag = cross_covariance_check(&model, &features).unwrap();
        assert!(diag.n_components >= 2);
        assert!(diag.max_abs_normalized <= 1.0);
    }

    #[test]
    fn evaluate_hand_arithmetic() {
        // build a model whose prediction errs by exactly (3, 4) on two cells
        let (m, features, _) = rank_one_case(10, 30, 0.0, 6);
        let model = fit(&m, &features, &small_config(8)).unwrap();
        let times: Vec<usize> = (0..30).collect();
        let pred = model.predict(&features, &times).unwrap();
        let mut test = m.clone();
        for v in test.values.iter_mut() {
            *v = f64::NAN;
        }
        test.values[(0, 0)] = pred[(0, 0)] + 3.0;
        test.values[(1, 1)] = pred[(1, 1)] - 4.0;
        let metrics = evaluate(&model, &test, &features).unwrap();
        assert!((metrics.rmse - 12.5_f64.sqrt()).abs() < 1e-10);
        assert!((metrics.mae - 3.5).abs() < 1e-10);
        assert!(metrics.rmse >= metrics.mae);
    }

    #[test]
    fn evaluate_errors_on_empty_test() {
        let (m, features, _) = rank_one_case(10, 30, 0.0, 6);
        let model = fit(&m, &features, &small_config(8)).unwrap();
        let mut test = m.clone();
        for v in test.values.iter_mut() {
            *v = f64::NAN;
        }
        assert!(matches!(evaluate(&model, &test, &features), Err(WindError::Evaluation(_))));
    }

    #[test]
    fn coverage_extremes() {
        let (m, features, _) = rank_one_case(12, 40, 0.2, 10);
        let config = small_config(14);
        let model = fit(&m, &features, &config).unwrap();
        let vm = fit_variance_model(&model, &m, &features, &config).unwrap();
        let cov = coverage_check(&model, &vm, &m, &features).unwrap();
        assert!((0.0..=1.0).contains(&cov));
        // training coverage should be reasonably high on in-sample data
        assert!(cov > 0.5, "in-sample coverage {cov}");
    }
}
