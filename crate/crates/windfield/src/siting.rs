//! Virtual turbine placement on a restriction mask and aggregation of
//! annual energy and its variance into a technical-potential summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, WindError};
use crate::grid::DemGrid;
use crate::power::{PowerCurve, PowerMoments, WindMoments};

/// Land-use zone codes carried by the restriction mask.
pub const ZONE_PROHIBITED: u8 = 0;
pub const ZONE_RESTRICTED: u8 = 1;
pub const ZONE_FORESTS: u8 = 2;
pub const ZONE_OTHER: u8 = 3;

pub const ZONE_NAMES: [&str; 4] = ["prohibited", "restricted", "forests", "other"];

/// Integer-coded raster of buildable zones. Turbines may stand anywhere
/// except prohibited or unmapped cells.
#[derive(Debug, Clone)]
pub struct RestrictionMask {
    pub grid: DemGrid,
}

impl RestrictionMask {
    /// Wrap a raster whose cells are 0..=3 (or missing).
    pub fn from_grid(grid: DemGrid) -> Result<RestrictionMask> {
        for r in 0..grid.nrows {
            for c in 0..grid.ncols {
                if let Some(v) = grid.get(r, c) {
                    if v.fract() != 0.0 || !(0.0..=3.0).contains(&v) {
                        return Err(WindError::Geometry(format!(
                            "invalid zone code {v} at ({r}, {c})"
                        )));
                    }
                }
            }
        }
        Ok(RestrictionMask { grid })
    }

    /// Zone code at a point, None outside the raster or over missing cells.
    pub fn zone(&self, x: f64, y: f64) -> Option<u8> {
        let (r, c) = self.grid.cell_at(x, y).ok()?;
        self.grid.get(r, c).map(|v| v as u8)
    }

    /// Buildable area in km^2 (all mapped, non-prohibited cells).
    pub fn buildable_area_km2(&self) -> f64 {
        let cell_km2 = self.grid.cell * self.grid.cell / 1e6;
        let n = (0..self.grid.nrows)
            .flat_map(|r| (0..self.grid.ncols).map(move |c| (r, c)))
            .filter(|&(r, c)| matches!(self.grid.get(r, c), Some(v) if v as u8 != ZONE_PROHIBITED))
            .count();
        n as f64 * cell_km2
    }
}

/// Lattice orientation and spacings of the virtual wind farm.
#[derive(Debug, Clone, Copy)]
pub struct SitingConfig {
    /// Prevailing wind direction in degrees clockwise from north.
    pub direction_deg: f64,
    /// Spacing along the prevailing direction, metres.
    pub streamwise_m: f64,
    /// Spacing across it, metres.
    pub crosswise_m: f64,
}

impl Default for SitingConfig {
    fn default() -> Self {
        SitingConfig { direction_deg: 60.0, streamwise_m: 1600.0, crosswise_m: 1000.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Turbine {
    pub id: usize,
    pub easting: f64,
    pub northing: f64,
    pub zone: u8,
}

#[derive(Debug, Clone)]
pub struct TurbineLayout {
    pub turbines: Vec<Turbine>,
}

impl TurbineLayout {
    pub fn len(&self) -> usize {
        self.turbines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turbines.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("turbine_id,easting_m,northing_m,zone\n");
        for t in &self.turbines {
            let _ = writeln!(s, "{},{},{},{}", t.id, t.easting, t.northing, t.zone);
        }
        s
    }
}

fn snap(v: f64, lo: f64, hi: f64) -> f64 {
    let tol = 1e-6 * (hi - lo).max(1.0);
    if (v - lo).abs() <= tol {
        lo
    } else if (v - hi).abs() <= tol {
        hi
    } else {
        v
    }
}

/// Place turbines on a rotated rectangular lattice over the mask extent.
/// The lattice is anchored at the extent's minimum corner, runs with unit
/// vector (sin theta, cos theta) streamwise, and keeps every node that
/// falls inside the half-open extent on a buildable cell.
pub fn place_turbines(mask: &RestrictionMask, config: &SitingConfig) -> Result<TurbineLayout> {
    if config.streamwise_m <= 0.0 || config.crosswise_m <= 0.0 {
        return Err(WindError::Parameter("turbine spacings must be positive".into()));
    }
    let g = &mask.grid;
    let (x0, y0) = (g.xll, g.yll);
    let x1 = g.xll + g.ncols as f64 * g.cell;
    let y1 = g.yll + g.nrows as f64 * g.cell;
    let theta = config.direction_deg.to_radians();
    let u = (theta.sin(), theta.cos()); // streamwise
    let w = (theta.cos(), -theta.sin()); // crosswise

    // lattice index ranges from the extent corners projected on (u, w)
    let corners =
        [(0.0, 0.0), (x1 - x0, 0.0), (0.0, y1 - y0), (x1 - x0, y1 - y0)];
    let (mut s_min, mut s_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut c_min, mut c_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (dx, dy) in corners {
        let s = dx * u.0 + dy * u.1;
        let c = dx * w.0 + dy * w.1;
        s_min = s_min.min(s);
        s_max = s_max.max(s);
        c_min = c_min.min(c);
        c_max = c_max.max(c);
    }
    let i_lo = (s_min / config.streamwise_m).floor() as i64;
    let i_hi = (s_max / config.streamwise_m).ceil() as i64;
    let j_lo = (c_min / config.crosswise_m).floor() as i64;
    let j_hi = (c_max / config.crosswise_m).ceil() as i64;

    let mut turbines = Vec::new();
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let s = i as f64 * config.streamwise_m;
            let c = j as f64 * config.crosswise_m;
            // snap rotation round-off onto the extent edges before the
            // half-open inclusion test
            let x = snap(x0 + s * u.0 + c * w.0, x0, x1);
            let y = snap(y0 + s * u.1 + c * w.1, y0, y1);
            if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
                continue;
            }
            match mask.zone(x, y) {
                Some(z) if z != ZONE_PROHIBITED => {
                    turbines.push(Turbine { id: turbines.len(), easting: x, northing: y, zone: z });
                }
                _ => {}
            }
        }
    }
    Ok(TurbineLayout { turbines })
}

/// Power moments for every turbine from hub-height speed-moment grids.
pub fn turbine_power(
    layout: &TurbineLayout,
    curve: &PowerCurve,
    mean_grid: &DemGrid,
    var_grid: &DemGrid,
    cutout: f64,
) -> Result<Vec<PowerMoments>> {
    layout
        .turbines
        .iter()
        .map(|t| {
            let mean = mean_grid.sample(t.easting, t.northing)?;
            let var = var_grid.sample(t.easting, t.northing)?;
            Ok(curve.moments(WindMoments { mean, var }, cutout))
        })
        .collect()
}

/// Sum hourly mean powers (kW over 1-hour steps) into energy in GWh.
pub fn energy_gwh(hourly_mean_kw: &[f64]) -> f64 {
    hourly_mean_kw.iter().sum::<f64>() / 1e6
}

/// Sum hourly power variances (kW^2) into an energy variance in GWh^2,
/// treating hours as independent.
pub fn energy_var_gwh2(hourly_var_kw2: &[f64]) -> f64 {
    hourly_var_kw2.iter().sum::<f64>() / 1e12
}

/// Technical potential of one zone.
#[derive(Debug, Clone)]
pub struct ZonePotential {
    pub zone: u8,
    pub n_turbines: usize,
    pub energy_gwh: f64,
    pub energy_var_gwh2: f64,
    pub n_cut_out: usize,
}

#[derive(Debug, Clone)]
pub struct PotentialSummary {
    pub zones: Vec<ZonePotential>,
}

impl PotentialSummary {
    pub fn total_energy_gwh(&self) -> f64 {
        self.zones.iter().map(|z| z.energy_gwh).sum()
    }

    pub fn total_turbines(&self) -> usize {
        self.zones.iter().map(|z| z.n_turbines).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("zone,zone_name,n_turbines,energy_gwh,energy_sd_gwh,n_cut_out\n");
        for z in &self.zones {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                z.zone,
                ZONE_NAMES[z.zone as usize],
                z.n_turbines,
                z.energy_gwh,
                z.energy_var_gwh2.sqrt(),
                z.n_cut_out
            );
        }
        let _ = writeln!(
            s,
            "total,,{},{},{},{}",
            self.total_turbines(),
            self.total_energy_gwh(),
            self.zones.iter().map(|z| z.energy_var_gwh2).sum::<f64>().sqrt(),
            self.zones.iter().map(|z| z.n_cut_out).sum::<usize>()
        );
        s
    }
}

/// Aggregate per-turbine annual energies (GWh) and variances (GWh^2) by
/// zone. Turbine variances are treated as independent.
pub fn summarize_potential(
    layout: &TurbineLayout,
    energies_gwh: &[f64],
    variances_gwh2: &[f64],
    cut_out: &[bool],
) -> Result<PotentialSummary> {
    let n = layout.len();
    if energies_gwh.len() != n || variances_gwh2.len() != n || cut_out.len() != n {
        return Err(WindError::Dimension(format!(
            "{} turbines vs {}/{}/{} aggregates",
            n,
            energies_gwh.len(),
            variances_gwh2.len(),
            cut_out.len()
        )));
    }
    let mut by_zone: BTreeMap<u8, ZonePotential> = BTreeMap::new();
    for (i, t) in layout.turbines.iter().enumerate() {
        let z = by_zone.entry(t.zone).or_insert(ZonePotential {
            zone: t.zone,
            n_turbines: 0,
            energy_gwh: 0.0,
            energy_var_gwh2: 0.0,
            n_cut_out: 0,
        });
        z.n_turbines += 1;
        z.energy_gwh += energies_gwh[i];
        z.energy_var_gwh2 += variances_gwh2[i];
        if cut_out[i] {
            z.n_cut_out += 1;
        }
    }
    Ok(PotentialSummary { zones: by_zone.into_values().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_mask(nrows: usize, ncols: usize, cell: f64, code: f64) -> RestrictionMask {
        RestrictionMask::from_grid(DemGrid::constant(0.0, 0.0, cell, nrows, ncols, code)).unwrap()
    }

    #[test]
    fn mask_rejects_bad_codes() {
        let g = DemGrid::constant(0.0, 0.0, 100.0, 2, 2, 4.0);
        assert!(RestrictionMask::from_grid(g).is_err());
        let g = DemGrid::constant(0.0, 0.0, 100.0, 2, 2, 1.5);
        assert!(RestrictionMask::from_grid(g).is_err());
    }

    #[test]
    fn four_turbine_hand_layout_north() {
        // 2 km x 2 km extent, lattice aligned north: nodes at
        // (crosswise * j, streamwise * i) for i, j in {0, 1}
        let mask = uniform_mask(20, 20, 100.0, 3.0);
        let config =
            SitingConfig { direction_deg: 0.0, streamwise_m: 1600.0, crosswise_m: 1000.0 };
        let layout = place_turbines(&mask, &config).unwrap();
        let mut pos: Vec<(i64, i64)> =
            layout.turbines.iter().map(|t| (t.easting as i64, t.northing as i64)).collect();
        pos.sort();
        assert_eq!(pos, vec![(0, 0), (0, 1600), (1000, 0), (1000, 1600)]);
    }

    #[test]
    fn rotated_lattice_east() {
        // 90 degrees: streamwise along +x, crosswise along -y
        let mask = uniform_mask(20, 20, 100.0, 2.0);
        let config =
            SitingConfig { direction_deg: 90.0, streamwise_m: 1600.0, crosswise_m: 1000.0 };
        let layout = place_turbines(&mask, &config).unwrap();
        let mut pos: Vec<(i64, i64)> = layout
            .turbines
            .iter()
            .map(|t| (t.easting.round() as i64, t.northing.round() as i64))
            .collect();
        pos.sort();
        assert_eq!(pos, vec![(0, 0), (0, 1000), (1600, 0), (1600, 1000)]);
    }

    #[test]
    fn prohibited_cells_are_excluded() {
        let mut g = DemGrid::constant(0.0, 0.0, 100.0, 20, 20, 3.0);
        // prohibit the cell containing (0, 0): row nrows-1, col 0
        g.set(19, 0, 0.0);
        let mask = RestrictionMask::from_grid(g).unwrap();
        let config =
            SitingConfig { direction_deg: 0.0, streamwise_m: 1600.0, crosswise_m: 1000.0 };
        let layout = place_turbines(&mask, &config).unwrap();
        assert_eq!(layout.len(), 3);
        assert!(layout.turbines.iter().all(|t| (t.easting, t.northing) != (0.0, 0.0)));
    }

    #[test]
    fn lattice_density_approaches_inverse_cell_area() {
        // 40 km x 40 km: expect about 1600 km^2 / (1.6 km * 1.0 km) nodes
        let mask = uniform_mask(40, 40, 1000.0, 1.0);
        for dir in [0.0, 37.0, 60.0, 123.0] {
            let layout = place_turbines(
                &mask,
                &SitingConfig { direction_deg: dir, ..SitingConfig::default() },
            )
            .unwrap();
            let expect = 1600.0 / 1.6;
            let got = layout.len() as f64;
            assert!(
                (got - expect).abs() / expect < 0.05,
                "direction {dir}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn rotation_invariance_of_density() {
        let mask = uniform_mask(30, 30, 1000.0, 3.0);
        let base = place_turbines(
            &mask,
            &SitingConfig { direction_deg: 0.0, ..SitingConfig::default() },
        )
        .unwrap()
        .len() as f64;
        let rot = place_turbines(
            &mask,
            &SitingConfig { direction_deg: 60.0, ..SitingConfig::default() },
        )
        .unwrap()
        .len() as f64;
        assert!((rot - base).abs() / base < 0.08, "{rot} vs {base}");
    }

    #[test]
    fn energy_unit_conversions() {
        // 8760 hours at 1000 kW = 8.76 GWh
        let hours = vec![1000.0; 8760];
        assert!((energy_gwh(&hours) - 8.76).abs() < 1e-12);
        let vars = vec![4.0e6; 100];
        assert!((energy_var_gwh2(&vars) - 4.0e-4).abs() < 1e-15);
    }

    #[test]
    fn summary_groups_by_zone() {
        let layout = TurbineLayout {
            turbines: vec![
                Turbine { id: 0, easting: 0.0, northing: 0.0, zone: 1 },
                Turbine { id: 1, easting: 1.0, northing: 0.0, zone: 3 },
                Turbine { id: 2, easting: 2.0, northing: 0.0, zone: 1 },
            ],
        };
        let summary = summarize_potential(
            &layout,
            &[1.0, 2.0, 3.0],
            &[0.01, 0.02, 0.03],
            &[false, true, false],
        )
        .unwrap();
        assert_eq!(summary.zones.len(), 2);
        let z1 = &summary.zones[0];
        assert_eq!((z1.zone, z1.n_turbines, z1.n_cut_out), (1, 2, 0));
        assert!((z1.energy_gwh - 4.0).abs() < 1e-12);
        assert!((z1.energy_var_gwh2 - 0.04).abs() < 1e-12);
        assert!((summary.total_energy_gwh() - 6.0).abs() < 1e-12);
        assert_eq!(summary.total_turbines(), 3);
        let csv = summary.to_csv();
        assert!(csv.starts_with("zone,zone_name,"));
        assert!(csv.contains("\ntotal,,3,"));
    }

    #[test]
    fn turbine_power_samples_grids() {
        let mask = uniform_mask(20, 20, 100.0, 3.0);
        let config =
            SitingConfig { direction_deg: 0.0, streamwise_m: 1600.0, crosswise_m: 1000.0 };
        let layout = place_turbines(&mask, &config).unwrap();
        let mean = DemGrid::constant(0.0, 0.0, 100.0, 20, 20, 8.47);
        let var = DemGrid::constant(0.0, 0.0, 100.0, 20, 20, 0.0);
        let curve = PowerCurve { phi1: 3075.31, phi2: 8.47, phi3: 1.27 };
        let moments = turbine_power(&layout, &curve, &mean, &var, 25.0).unwrap();
        assert_eq!(moments.len(), 4);
        for m in &moments {
            assert!((m.mean_kw - 1537.655).abs() < 1e-9);
            assert_eq!(m.var_kw2, 0.0);
        }
    }

    #[test]
    fn layout_csv_schema() {
        let layout = TurbineLayout {
            turbines: vec![Turbine { id: 0, easting: 10.0, northing: 20.0, zone: 2 }],
        };
        assert_eq!(layout.to_csv(), "turbine_id,easting_m,northing_m,zone\n0,10,20,2\n");
    }
}
