//! Wind power: log-law height extrapolation of speed mean and variance,
//! a three-parameter logistic power curve with a Gauss-Newton fitter, and
//! second-order delta-method moments of turbine power.

use nalgebra::{Cholesky, Matrix3, Vector3};

use crate::error::{Result, WindError};
use crate::grid::DemGrid;

/// Heights for the log-law and the cut-out speed, all in metres resp. m/s.
#[derive(Debug, Clone, Copy)]
pub struct TurbineConfig {
    /// Measurement height.
    pub h1: f64,
    /// Hub height.
    pub h2: f64,
    pub cutout: f64,
}

impl Default for TurbineConfig {
    fn default() -> Self {
        TurbineConfig { h1: 10.0, h2: 100.0, cutout: 25.0 }
    }
}

/// First two moments of wind speed at one height.
#[derive(Debug, Clone, Copy)]
pub struct WindMoments {
    pub mean: f64,
    pub var: f64,
}

/// First two moments of turbine power.
#[derive(Debug, Clone, Copy)]
pub struct PowerMoments {
    pub mean_kw: f64,
    pub var_kw2: f64,
    /// Hub-height mean speed exceeded the cut-out speed.
    pub cut_out: bool,
}

/// Log-law ratio u(h2)/u(h1) for roughness length h0.
pub fn loglaw_factor(h0: f64, h1: f64, h2: f64) -> Result<f64> {
    if !(h0 > 0.0) || h0 >= h1 || h0 >= h2 {
        return Err(WindError::Geometry(format!(
            "roughness length {h0} must be positive and below both heights {h1}, {h2}"
        )));
    }
    Ok((h2 / h0).ln() / (h1 / h0).ln())
}

/// Extrapolate speed moments from h1 to h2. The transform is linear in
/// the speed, so the mean scales with c and the variance with c^2.
pub fn extrapolate(wind: WindMoments, h0: f64, config: &TurbineConfig) -> Result<WindMoments> {
    let c = loglaw_factor(h0, config.h1, config.h2)?;
    Ok(WindMoments { mean: c * wind.mean, var: c * c * wind.var })
}

/// P(v) = phi1 / (1 + exp((phi2 - v) / phi3)): rated power phi1 (kW),
/// inflection speed phi2 (m/s), rise scale phi3 (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCurve {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
}

impl PowerCurve {
    fn sigmoid(&self, v: f64) -> f64 {
        1.0 / (1.0 + ((self.phi2 - v) / self.phi3).exp())
    }

    pub fn value(&self, v: f64) -> f64 {
        self.phi1 * self.sigmoid(v)
    }

    /// dP/dv.
    pub fn slope(&self, v: f64) -> f64 {
        let s = self.sigmoid(v);
        self.phi1 / self.phi3 * s * (1.0 - s)
    }

    /// d^2P/dv^2.
    pub fn curvature(&self, v: f64) -> f64 {
        let s = self.sigmoid(v);
        self.phi1 / (self.phi3 * self.phi3) * s * (1.0 - s) * (1.0 - 2.0 * s)
    }

    /// Second-order delta-method moments of power for hub-height speed
    /// moments. The mean is clamped to the physical range [0, phi1];
    /// negative input variances are treated as zero. Above the cut-out
    /// speed both moments are zero.
    pub fn moments(&self, wind: WindMoments, cutout: f64) -> PowerMoments {
        if wind.mean > cutout {
            return PowerMoments { mean_kw: 0.0, var_kw2: 0.0, cut_out: true };
        }
        let var = wind.var.max(0.0);
        let mean = (self.value(wind.mean) + 0.5 * self.curvature(wind.mean) * var)
            .clamp(0.0, self.phi1);
        let slope = self.slope(wind.mean);
        PowerMoments { mean_kw: mean, var_kw2: slope * slope * var, cut_out: false }
    }

    /// Partial derivatives of P(v) with respect to (phi1, phi2, phi3).
    fn jacobian_row(&self, v: f64) -> Vector3<f64> {
        let s = self.sigmoid(v);
        Vector3::new(
            s,
            -self.phi1 * s * (1.0 - s) / self.phi3,
            self.phi1 * s * (1.0 - s) * (self.phi2 - v) / (self.phi3 * self.phi3),
        )
    }
}

fn sse(curve: &PowerCurve, speeds: &[f64], powers: &[f64]) -> f64 {
    speeds
        .iter()
        .zip(powers)
        .map(|(&v, &p)| {
            let r = curve.value(v) - p;
            r * r
        })
        .sum()
}

/// Level crossing of the (speed, power) samples by linear interpolation:
/// first speed at which power reaches `level`.
fn crossing(speeds: &[f64], powers: &[f64], level: f64) -> Option<f64> {
    for i in 0..speeds.len() {
        if powers[i] >= level {
            if i == 0 {
                return Some(speeds[0]);
            }
            let (p0, p1) = (powers[i - 1], powers[i]);
            if p1 > p0 {
                return Some(speeds[i - 1] + (speeds[i] - speeds[i - 1]) * (level - p0) / (p1 - p0));
            }
            return Some(speeds[i]);
        }
    }
    None
}

/// Fit the logistic curve to datasheet samples by Gauss-Newton with
/// backtracking line search. Samples need not be sorted.
pub fn fit_power_curve(speeds: &[f64], powers: &[f64]) -> Result<PowerCurve> {
    if speeds.len() != powers.len() {
        return Err(WindError::Dimension(format!(
            "{} speeds vs {} powers",
            speeds.len(),
            powers.len()
        )));
    }
    if speeds.len() < 3 {
        return Err(WindError::Fit("need at least 3 samples".into()));
    }
    if speeds.iter().chain(powers).any(|v| !v.is_finite()) {
        return Err(WindError::Fit("non-finite sample".into()));
    }
    let mut pairs: Vec<(f64, f64)> = speeds.iter().copied().zip(powers.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let speeds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let powers: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    let p_max = powers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if p_max <= 0.0 {
        return Err(WindError::Fit("all powers nonpositive".into()));
    }
    let half = crossing(&speeds, &powers, 0.5 * p_max)
        .ok_or_else(|| WindError::Fit("no half-power crossing".into()))?;
    let lo = crossing(&speeds, &powers, 0.1 * p_max).unwrap_or(speeds[0]);
    let hi = crossing(&speeds, &powers, 0.9 * p_max).unwrap_or(*speeds.last().unwrap());
    let rise = (hi - lo).max(1e-3);
    let mut curve = PowerCurve { phi1: p_max, phi2: half, phi3: 0.25 * rise };

    let n = speeds.len();
    let tol = 1e-10;
    let mut current = sse(&curve, &speeds, &powers);
    for _ in 0..200 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for i in 0..n {
            let j = curve.jacobian_row(speeds[i]);
            let r = curve.value(speeds[i]) - powers[i];
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.norm() <= tol * (1.0 + current) {
            break;
        }
        // tiny Tikhonov term keeps the normal equations decomposable when
        // a parameter direction is locally flat
        let jitter = 1e-12 * jtj.trace().max(1.0);
        for d in 0..3 {
            jtj[(d, d)] += jitter;
        }
        let chol = Cholesky::new(jtj)
            .ok_or_else(|| WindError::Fit("normal equations not positive definite".into()))?;
        let delta = chol.solve(&(-jtr));
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-12 {
            let trial = PowerCurve {
                phi1: curve.phi1 + step * delta[0],
                phi2: curve.phi2 + step * delta[1],
                phi3: curve.phi3 + step * delta[2],
            };
            if trial.phi3 > 0.0 && trial.phi1 > 0.0 {
                let trial_sse = sse(&trial, &speeds, &powers);
                if trial_sse < current {
                    curve = trial;
                    current = trial_sse;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break; // stalled: the iterate is at (numerical) optimum
        }
    }
    if ![curve.phi1, curve.phi2, curve.phi3].iter().all(|v| v.is_finite()) {
        return Err(WindError::Fit("diverged to non-finite parameters".into()));
    }
    Ok(curve)
}

/// Per-cell hub-height speed moments from measurement-height grids and a
/// roughness-length grid. Cells missing in any input stay missing.
pub fn extrapolate_grids(
    mean: &DemGrid,
    var: &DemGrid,
    roughness: &DemGrid,
    config: &TurbineConfig,
) -> Result<(DemGrid, DemGrid)> {
    if !mean.same_geometry(var) || !mean.same_geometry(roughness) {
        return Err(WindError::Dimension("grid geometries differ".into()));
    }
    let mut out_mean = DemGrid::like(mean);
    let mut out_var = DemGrid::like(mean);
    for r in 0..mean.nrows {
        for c in 0..mean.ncols {
            let (m, v, h0) = (mean.get(r, c), var.get(r, c), roughness.get(r, c));
            let (Some(m), Some(v), Some(h0)) = (m, v, h0) else { continue };
            let w = extrapolate(WindMoments { mean: m, var: v }, h0, config)?;
            out_mean.set(r, c, w.mean);
            out_var.set(r, c, w.var);
        }
    }
    Ok((out_mean, out_var))
}
