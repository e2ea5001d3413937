//! Multi-scale terrain features from a DEM: Gaussian smoothing,
//! differences of Gaussians, directional derivatives and slope norms,
//! assembled into the 13-dimensional spatial input space.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Result, WindError};
use crate::grid::DemGrid;

pub const N_FEATURES: usize = 13;

/// Feature order within a stack. Index 0..13:
/// easting, northing, elevation, three DoG pairs, two N-S derivatives,
/// two E-W derivatives, three slope norms.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "easting",
    "northing",
    "elevation",
    "dog_s1_s2",
    "dog_s2_s3",
    "dog_s1_s3",
    "dns_s1",
    "dns_s2",
    "dew_s1",
    "dew_s2",
    "slope_s1",
    "slope_s2",
    "slope_s3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    NS,
    EW,
}

/// Discrete Gaussian convolution with the kernel truncated at three
/// bandwidths. Weights are renormalized over the available (non-missing,
/// in-bounds) cells, so no terrain is invented outside the DEM.
pub fn gaussian_smooth(dem: &DemGrid, bandwidth: f64) -> Result<DemGrid> {
    if bandwidth < dem.cell {
        return Err(WindError::Parameter(format!(
            "bandwidth {bandwidth} m below cell size {} m",
            dem.cell
        )));
    }
    let radius = (3.0 * bandwidth / dem.cell).ceil() as isize;
    let sigma_cells = bandwidth / dem.cell;
    let w1d: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma_cells * sigma_cells)).exp())
        .collect();
    let nrows = dem.nrows as isize;
    let ncols = dem.ncols as isize;
    let mut out = DemGrid::like(dem);
    let rows: Vec<Vec<f64>> = (0..nrows)
        .into_par_iter()
        .map(|r| {
            let mut row = vec![f64::NAN; dem.ncols];
            for c in 0..ncols {
                let mut sum = 0.0;
                let mut wsum = 0.0;
                let r_lo = (r - radius).max(0);
                let r_hi = (r + radius).min(nrows - 1);
                let c_lo = (c - radius).max(0);
                let c_hi = (c + radius).min(ncols - 1);
                for rr in r_lo..=r_hi {
                    let wr = w1d[(rr - r + radius) as usize];
                    for cc in c_lo..=c_hi {
                        let v = dem.raw(rr as usize, cc as usize);
                        if v.is_nan() {
                            continue;
                        }
                        let w = wr * w1d[(cc - c + radius) as usize];
                        sum += w * v;
                        wsum += w;
                    }
                }
                if wsum > 0.0 {
                    row[c as usize] = sum / wsum;
                }
            }
            row
        })
        .collect();
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            if !v.is_nan() {
                out.set(r, c, v);
            }
        }
    }
    Ok(out)
}

pub fn difference_of_gaussians(dem: &DemGrid, bw_small: f64, bw_large: f64) -> Result<DemGrid> {
    if bw_small >= bw_large {
        return Err(WindError::Parameter("DoG bandwidths must be ascending".into()));
    }
    let a = gaussian_smooth(dem, bw_small)?;
    let b = gaussian_smooth(dem, bw_large)?;
    Ok(subtract(&a, &b))
}

fn subtract(a: &DemGrid, b: &DemGrid) -> DemGrid {
    let mut out = DemGrid::like(a);
    for r in 0..a.nrows {
        for c in 0..a.ncols {
            if let (Some(x), Some(y)) = (a.get(r, c), b.get(r, c)) {
                out.set(r, c, x - y);
            }
        }
    }
    out
}

/// Finite-difference derivative of an already-smoothed grid along one
/// axis: central differences in the interior, one-sided at boundaries
/// and next to missing cells.
fn derivative_of(smoothed: &DemGrid, direction: Direction) -> DemGrid {
    let mut out = DemGrid::like(smoothed);
    let nrows = smoothed.nrows;
    let ncols = smoothed.ncols;
    let h = smoothed.cell;
    for r in 0..nrows {
        for c in 0..ncols {
            let center = smoothed.get(r, c);
            // neighbour in the increasing-coordinate sense: +x is east
            // (col + 1), +y is north (row - 1).
            let (fwd, bwd) = match direction {
                Direction::EW => (
                    if c + 1 < ncols { smoothed.get(r, c + 1) } else { None },
                    if c > 0 { smoothed.get(r, c - 1) } else { None },
                ),
                Direction::NS => (
                    if r > 0 { smoothed.get(r - 1, c) } else { None },
                    if r + 1 < nrows { smoothed.get(r + 1, c) } else { None },
                ),
            };
            let d = match (bwd, center, fwd) {
                (Some(b), _, Some(f)) => Some((f - b) / (2.0 * h)),
                (None, Some(z), Some(f)) => Some((f - z) / h),
                (Some(b), Some(z), None) => Some((z - b) / h),
                _ => None,
            };
            if let Some(d) = d {
                out.set(r, c, d);
            }
        }
    }
    out
}

pub fn directional_derivative(
    dem: &DemGrid,
    bandwidth: f64,
    direction: Direction,
) -> Result<DemGrid> {
    let smoothed = gaussian_smooth(dem, bandwidth)?;
    Ok(derivative_of(&smoothed, direction))
}

/// Norm of the terrain gradient on the smoothed DEM.
pub fn slope_norm(dem: &DemGrid, bandwidth: f64) -> Result<DemGrid> {
    let smoothed = gaussian_smooth(dem, bandwidth)?;
    Ok(slope_of(&smoothed))
}

fn slope_of(smoothed: &DemGrid) -> DemGrid {
    let dx = derivative_of(smoothed, Direction::EW);
    let dy = derivative_of(smoothed, Direction::NS);
    let mut out = DemGrid::like(smoothed);
    for r in 0..smoothed.nrows {
        for c in 0..smoothed.ncols {
            if let (Some(x), Some(y)) = (dx.get(r, c), dy.get(r, c)) {
                out.set(r, c, (x * x + y * y).sqrt());
            }
        }
    }
    out
}

/// The 13 co-registered feature grids plus the bandwidths they were
/// built from.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub grids: Vec<DemGrid>,
    pub bandwidths: [f64; 3],
}

/// Build the full feature stack from three ascending bandwidths.
pub fn assemble_features(dem: &DemGrid, bandwidths: &[f64]) -> Result<FeatureStack> {
    if bandwidths.len() != 3 {
        return Err(WindError::Parameter(format!(
            "need exactly 3 bandwidths, got {}",
            bandwidths.len()
        )));
    }
    let [s1, s2, s3] = [bandwidths[0], bandwidths[1], bandwidths[2]];
    if !(s1 < s2 && s2 < s3) {
        return Err(WindError::Parameter("bandwidths must be distinct and ascending".into()));
    }
    let sm: Vec<DemGrid> = bandwidths
        .par_iter()
        .map(|&bw| gaussian_smooth(dem, bw))
        .collect::<Result<_>>()?;

    let mut easting = DemGrid::like(dem);
    let mut northing = DemGrid::like(dem);
    for r in 0..dem.nrows {
        for c in 0..dem.ncols {
            let (x, y) = dem.cell_center(r, c);
            easting.set(r, c, x);
            northing.set(r, c, y);
        }
    }

    let grids = vec![
        easting,
        northing,
        dem.clone(),
        subtract(&sm[0], &sm[1]),
        subtract(&sm[1], &sm[2]),
        subtract(&sm[0], &sm[2]),
        derivative_of(&sm[0], Direction::NS),
        derivative_of(&sm[1], Direction::NS),
        derivative_of(&sm[0], Direction::EW),
        derivative_of(&sm[1], Direction::EW),
        slope_of(&sm[0]),
        slope_of(&sm[1]),
        slope_of(&sm[2]),
    ];
    Ok(FeatureStack { grids, bandwidths: [s1, s2, s3] })
}

impl FeatureStack {
    /// Bilinear interpolation of every feature grid at a point.
    pub fn sample(&self, easting: f64, northing: f64) -> Result<Vec<f64>> {
        self.grids.iter().map(|g| g.sample(easting, northing)).collect()
    }

    /// Sample a list of points; rows are feature vectors.
    pub fn sample_many(&self, locations: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
        locations.iter().map(|&(x, y)| self.sample(x, y)).collect()
    }

    /// Persist as 13 ESRI ASCII grids plus a manifest naming the order
    /// and bandwidths.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("feature,file\n");
        for (name, grid) in FEATURE_NAMES.iter().zip(&self.grids) {
            let file = format!("{name}.asc");
            grid.write_ascii(&dir.join(&file))?;
            manifest.push_str(&format!("{name},{file}\n"));
        }
        manifest.push_str(&format!(
            "bandwidths_m,{} {} {}\n",
            self.bandwidths[0], self.bandwidths[1], self.bandwidths[2]
        ));
        fs::write(dir.join("manifest.csv"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<FeatureStack> {
        let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
        let mut bandwidths = None;
        for line in manifest.lines().skip(1) {
            if let Some(rest) = line.strip_prefix("bandwidths_m,") {
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| WindError::Schema("bad bandwidth".into())))
                    .collect::<Result<_>>()?;
                if vals.len() == 3 {
                    bandwidths = Some([vals[0], vals[1], vals[2]]);
                }
            }
        }
        let bandwidths =
            bandwidths.ok_or_else(|| WindError::Schema("manifest missing bandwidths".into()))?;
        let grids = FEATURE_NAMES
            .iter()
            .map(|name| DemGrid::read_ascii(&dir.join(format!("{name}.asc"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureStack { grids, bandwidths })
    }
}

/// Per-dimension z-score standardization, frozen at fit time from the
/// training locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        assert!(!rows.is_empty());
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0 // constant feature, leave centred at zero
                }
            })
            .collect();
        Standardizer { mean, sd }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.sd)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}
