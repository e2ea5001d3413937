//! Station time series ingestion, cleaning, hourly downsampling,
//! neighbour imputation and train/test network splitting.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WindError};

/// Planar station location in metres plus elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct StationLocation {
    pub easting: f64,
    pub northing: f64,
    pub elevation: f64,
}

/// One station's measurement record at native cadence.
/// Timestamps are strictly increasing; missing speeds are `None`.
#[derive(Debug, Clone)]
pub struct StationSeries {
    pub station_id: String,
    pub location: StationLocation,
    pub samples: Vec<(DateTime<Utc>, Option<f64>)>,
}

impl StationSeries {
    fn sort_and_check(&mut self) -> Result<()> {
        self.samples.sort_by_key(|(t, _)| *t);
        for w in self.samples.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(WindError::Duplicate {
                    station: self.station_id.clone(),
                    timestamp: w[0].0.to_rfc3339(),
                });
            }
        }
        Ok(())
    }
}

/// Per-station cleaning diagnostics.
#[derive(Debug, Clone)]
pub struct StationQuality {
    pub station_id: String,
    pub frac_missing: f64,
    pub frac_negative: f64,
    pub frac_zero: f64,
    pub removed: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct QualityReport {
    pub stations: Vec<StationQuality>,
    pub outlier_replacements: usize,
}

impl QualityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("station_id,frac_missing,frac_negative,frac_zero,removed,reason\n");
        for q in &self.stations {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                q.station_id,
                q.frac_missing,
                q.frac_negative,
                q.frac_zero,
                q.removed,
                q.reason.as_deref().unwrap_or("")
            ));
        }
        s
    }
}

/// Cleaning thresholds, each a fraction in [0, 1].
#[derive(Debug, Clone, Copy)]
pub struct CleanThresholds {
    pub missing: f64,
    pub negative: f64,
    pub zero: f64,
    /// Physical upper bound on plausible wind speed (m/s).
    pub max_speed: f64,
    /// Robust z-score cutoff for outlier replacement.
    pub robust_z: f64,
}

impl Default for CleanThresholds {
    fn default() -> Self {
        CleanThresholds {
            missing: 0.10,
            negative: 0.10,
            zero: 0.10,
            max_speed: 75.0,
            robust_z: 8.0,
        }
    }
}

/// S stations by T hourly times, NaN marks missing cells.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    pub station_ids: Vec<String>,
    pub locations: Vec<StationLocation>,
    pub time_grid: Vec<DateTime<Utc>>,
    /// S x T, NaN = missing.
    pub values: DMatrix<f64>,
}

impl ObservationMatrix {
    pub fn n_stations(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)].is_nan()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Row-subset matrix keeping the station order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> ObservationMatrix {
        let t = self.n_times();
        let mut values = DMatrix::zeros(indices.len(), t);
        for (r, &i) in indices.iter().enumerate() {
            for j in 0..t {
                values[(r, j)] = self.values[(i, j)];
            }
        }
        ObservationMatrix {
            station_ids: indices.iter().map(|&i| self.station_ids[i].clone()).collect(),
            locations: indices.iter().map(|&i| self.locations[i].clone()).collect(),
            time_grid: self.time_grid.clone(),
            values,
        }
    }
}

/// Disjoint, exhaustive station split.
#[derive(Debug, Clone)]
pub struct NetworkSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub split_fraction: f64,
}

const CSV_HEADER: [&str; 6] = [
    "station_id",
    "easting_m",
    "northing_m",
    "elev_m",
    "timestamp",
    "speed_mps",
];

/// Load one station CSV. Rows whose speed field is empty, `NaN` or
/// unparseable become missing samples.
pub fn load_station_csv(path: &Path) -> Result<Vec<StationSeries>> {
    load_station_csvs(std::slice::from_ref(&path.to_path_buf()))
}

/// Load and merge several station CSVs; the same station id may appear in
/// multiple files with disjoint timestamps.
pub fn load_station_csvs(paths: &[std::path::PathBuf]) -> Result<Vec<StationSeries>> {
    let mut by_station: BTreeMap<String, StationSeries> = BTreeMap::new();
    for path in paths {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        {
            let headers = rdr.headers()?;
            let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
            if got != CSV_HEADER {
                return Err(WindError::Schema(format!(
                    "expected header {:?}, got {:?} in {}",
                    CSV_HEADER.join(","),
                    got.join(","),
                    path.display()
                )));
            }
        }
        for record in rdr.records() {
            let record = record?;
            if record.len() < 5 {
                return Err(WindError::Schema(format!(
                    "short row in {}: {:?}",
                    path.display(),
                    record
                )));
            }
            let station_id = record[0].trim().to_string();
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| WindError::Schema(format!("bad {what} field: {s:?}")))
            };
            let easting = parse_f(&record[1], "easting_m")?;
            let northing = parse_f(&record[2], "northing_m")?;
            let elevation = parse_f(&record[3], "elev_m")?;
            let timestamp = record[4]
                .trim()
                .parse::<DateTime<Utc>>()
                .map_err(|_| WindError::Schema(format!("bad timestamp field: {:?}", &record[4])))?;
            let speed_field = record.get(5).unwrap_or("").trim();
            let speed = if speed_field.is_empty() || speed_field.eq_ignore_ascii_case("nan") {
                None
            } else {
                match speed_field.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => None,
                }
            };
            let entry = by_station.entry(station_id.clone()).or_insert_with(|| StationSeries {
                station_id,
                location: StationLocation { easting, northing, elevation },
                samples: Vec::new(),
            });
            entry.samples.push((timestamp, speed));
        }
    }
    let mut out: Vec<StationSeries> = by_station.into_values().collect();
    for s in &mut out {
        s.sort_and_check()?;
    }
    Ok(out)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Flag outliers within a station: speeds above the physical bound, and
/// robust z-scores |x - median| / (1.4826 MAD) above the cutoff. The pass
/// repeats until no new sample is flagged, so the rule is a fixpoint of
/// its own output.
fn replace_outliers(samples: &mut [(DateTime<Utc>, Option<f64>)], th: &CleanThresholds) -> usize {
    let mut replaced = 0;
    loop {
        let mut valid: Vec<f64> = samples.iter().filter_map(|(_, v)| *v).collect();
        if valid.is_empty() {
            break;
        }
        valid.sort_by(|a, b| a.total_cmp(b));
        let med = median(&valid);
        let mut devs: Vec<f64> = valid.iter().map(|v| (v - med).abs()).collect();
        devs.sort_by(|a, b| a.total_cmp(b));
        let mad = median(&devs);
        let scale = 1.4826 * mad;
        let mut changed = false;
        for (_, v) in samples.iter_mut() {
            if let Some(x) = *v {
                let z_flag = scale > 0.0 && (x - med).abs() / scale > th.robust_z;
                if x > th.max_speed || z_flag {
                    *v = None;
                    replaced += 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    replaced
}

/// Remove poor-quality stations and convert invalid samples to missing.
///
/// Raw missing/negative/zero fractions are reported per station. Negative
/// and zero speeds and detected outliers become missing; a station is
/// removed when its raw negative or zero fraction, or its post-conversion
/// missing fraction, exceeds the thresholds.
pub fn clean_network(
    series: &[StationSeries],
    thresholds: &CleanThresholds,
) -> (Vec<StationSeries>, QualityReport) {
    let mut report = QualityReport::default();
    let mut kept = Vec::new();
    for s in series {
        let n = s.samples.len();
        if n == 0 {
            report.stations.push(StationQuality {
                station_id: s.station_id.clone(),
                frac_missing: 0.0,
                frac_negative: 0.0,
                frac_zero: 0.0,
                removed: true,
                reason: Some("missing>10%".into()),
            });
            continue;
        }
        let nf = n as f64;
        let n_missing = s.samples.iter().filter(|(_, v)| v.is_none()).count();
        let n_negative = s.samples.iter().filter(|(_, v)| matches!(v, Some(x) if *x < 0.0)).count();
        let n_zero = s.samples.iter().filter(|(_, v)| matches!(v, Some(x) if *x == 0.0)).count();
        let frac_missing = n_missing as f64 / nf;
        let frac_negative = n_negative as f64 / nf;
        let frac_zero = n_zero as f64 / nf;

        let mut cleaned = s.clone();
        for (_, v) in cleaned.samples.iter_mut() {
            if matches!(v, Some(x) if *x <= 0.0) {
                *v = None;
            }
        }
        let replaced = replace_outliers(&mut cleaned.samples, thresholds);
        let final_missing =
            cleaned.samples.iter().filter(|(_, v)| v.is_none()).count() as f64 / nf;

        let reason = if final_missing > thresholds.missing {
            Some("missing>10%")
        } else if frac_negative > thresholds.negative {
            Some("negative>10%")
        } else if frac_zero > thresholds.zero {
            Some("zero>10%")
        } else {
            None
        };
        let removed = reason.is_some();
        report.stations.push(StationQuality {
            station_id: s.station_id.clone(),
            frac_missing,
            frac_negative,
            frac_zero,
            removed,
            reason: reason.map(|r| r.to_string()),
        });
        if !removed {
            report.outlier_replacements += replaced;
            kept.push(cleaned);
        }
    }
    (kept, report)
}

/// Average native samples within each hour; an hour with no available
/// sample stays missing.
pub fn downsample_hourly(series: &StationSeries) -> StationSeries {
    let mut hours: BTreeMap<DateTime<Utc>, (f64, usize, bool)> = BTreeMap::new();
    for (t, v) in &series.samples {
        let hour = t.duration_trunc(TimeDelta::hours(1)).expect("hour truncation");
        let entry = hours.entry(hour).or_insert((0.0, 0, false));
        match v {
            Some(x) => {
                entry.0 += x;
                entry.1 += 1;
            }
            None => entry.2 = true,
        }
    }
    let samples = hours
        .into_iter()
        .map(|(hour, (sum, count, _))| {
            if count > 0 {
                (hour, Some(sum / count as f64))
            } else {
                (hour, None)
            }
        })
        .collect();
    StationSeries {
        station_id: series.station_id.clone(),
        location: series.location.clone(),
        samples,
    }
}

/// Assemble hourly series into an S x T matrix over [start, end).
pub fn build_matrix(
    series: &[StationSeries],
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<ObservationMatrix> {
    if start >= end {
        return Err(WindError::Parameter("start must precede end".into()));
    }
    let t_hours = (end - start).num_hours() as usize;
    let s = series.len();
    if s > t_hours {
        return Err(WindError::Dimension(format!(
            "S = {s} stations exceeds T = {t_hours} times; S <= T is required"
        )));
    }
    let time_grid: Vec<DateTime<Utc>> =
        (0..t_hours).map(|j| start + TimeDelta::hours(j as i64)).collect();
    let mut values = DMatrix::from_element(s, t_hours, f64::NAN);
    for (i, st) in series.iter().enumerate() {
        for (t, v) in &st.samples {
            if *t < start || *t >= end {
                continue;
            }
            let j = (*t - start).num_hours() as usize;
            if let Some(x) = v {
                values[(i, j)] = *x;
            }
        }
    }
    Ok(ObservationMatrix {
        station_ids: series.iter().map(|s| s.station_id.clone()).collect(),
        locations: series.iter().map(|s| s.location.clone()).collect(),
        time_grid,
        values,
    })
}

/// The `k_space` nearest other stations by planar distance, ties broken
/// toward the lower station index.
fn nearest_neighbours(locations: &[StationLocation], i: usize, k_space: usize) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = locations
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, loc)| {
            let dx = loc.easting - locations[i].easting;
            let dy = loc.northing - locations[i].northing;
            (dx * dx + dy * dy, j)
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k_space).map(|(_, j)| j).collect()
}

/// Fill missing cells with the mean over the `k_space` nearest stations at
/// the `2 k_time + 1` contiguous time frames, reading only pre-imputation
/// values.
pub fn impute_missing(
    m: &ObservationMatrix,
    k_space: usize,
    k_time: usize,
) -> Result<ObservationMatrix> {
    let s = m.n_stations();
    let t = m.n_times();
    let neighbours: Vec<Vec<usize>> =
        (0..s).map(|i| nearest_neighbours(&m.locations, i, k_space)).collect();
    let mut out = m.clone();
    for i in 0..s {
        for j in 0..t {
            if !m.is_missing(i, j) {
                continue;
            }
            let j_lo = j.saturating_sub(k_time);
            let j_hi = (j + k_time).min(t - 1);
            let mut sum = 0.0;
            let mut count = 0usize;
            for &nb in &neighbours[i] {
                for jj in j_lo..=j_hi {
                    let v = m.values[(nb, jj)];
                    if !v.is_nan() {
                        sum += v;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(WindError::Imputation { station: i, time: j });
            }
            out.values[(i, j)] = sum / count as f64;
        }
    }
    Ok(out)
}

/// Uniform random station split, reproducible under seed.
pub fn split_network(m: &ObservationMatrix, fraction: f64, seed: u64) -> Result<NetworkSplit> {
    let s = m.n_stations();
    if s < 2 {
        return Err(WindError::Parameter("need at least 2 stations to split".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(WindError::Parameter(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..s).collect();
    indices.shuffle(&mut rng);
    let n_train = ((fraction * s as f64).round() as usize).clamp(1, s - 1);
    let mut train: Vec<usize> = indices[..n_train].to_vec();
    let mut test: Vec<usize> = indices[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(NetworkSplit { train_indices: train, test_indices: test, split_fraction: fraction })
}

/// Average spacing of a monitoring network covering `area_km2` with `n`
/// stations, in km.
pub fn characteristic_scale(area_km2: f64, n: usize) -> f64 {
    assert!(area_km2 > 0.0 && n >= 1);
    (area_km2 / n as f64).sqrt()
}
