//! Run configuration: a flat `section.key = value` text format with
//! defaults for every knob and hard errors on unknown keys.

use std::path::PathBuf;

use crate::data::CleanThresholds;
use crate::elm::ElmConfig;
use crate::error::{Result, WindError};
use crate::power::TurbineConfig;
use crate::siting::SitingConfig;
use crate::st_model::StModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    AsciiGrid,
    Csv,
}

#[derive(Debug, Clone, Default)]
pub struct Paths {
    /// Station CSV files or directories containing them.
    pub stations: Vec<PathBuf>,
    pub dem: Option<PathBuf>,
    pub roughness: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub power_datasheet: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub members: usize,
    pub neurons: Option<usize>,
    pub components: Option<usize>,
    pub residual_floor: f64,
    pub seed: u64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_count: usize,
    pub split_fraction: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            members: 20,
            neurons: None,
            components: None,
            residual_floor: 1e-6,
            seed: 0,
            alpha_min: 1e-8,
            alpha_max: 1e4,
            alpha_count: 61,
            split_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerSettings {
    pub turbine: TurbineConfig,
    /// Explicit curve parameters; when absent the datasheet is fitted.
    pub phi: Option<[f64; 3]>,
}

impl Default for PowerSettings {
    fn default() -> Self {
        PowerSettings { turbine: TurbineConfig::default(), phi: None }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub paths: Paths,
    pub clean: CleanThresholds,
    /// Ascending terrain smoothing bandwidths in metres.
    pub bandwidths: [f64; 3],
    pub model: ModelSettings,
    pub power: PowerSettings,
    pub siting: SitingConfig,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            clean: CleanThresholds::default(),
            bandwidths: [500.0, 2000.0, 8000.0],
            model: ModelSettings::default(),
            power: PowerSettings::default(),
            siting: SitingConfig::default(),
            format: OutputFormat::AsciiGrid,
        }
    }
}

impl RunConfig {
    /// The per-component ensemble settings implied by the model section.
    pub fn st_model_config(&self) -> StModelConfig {
        let lo = self.model.alpha_min.log10();
        let hi = self.model.alpha_max.log10();
        let k = self.model.alpha_count;
        let alpha_grid = if k <= 1 {
            vec![self.model.alpha_min]
        } else {
            (0..k).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (k - 1) as f64)).collect()
        };
        StModelConfig {
            elm: ElmConfig {
                n_neurons: self.model.neurons,
                m_members: self.model.members,
                alpha_grid,
                seed: self.model.seed,
            },
            k_retained: self.model.components,
            residual_floor: self.model.residual_floor,
            variance_elm: None,
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(WindError::Config(format!(
                    "line {}: expected `section.key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| {
                WindError::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        if !(cfg.bandwidths[0] < cfg.bandwidths[1] && cfg.bandwidths[1] < cfg.bandwidths[2]) {
            return Err(WindError::Config(format!(
                "bandwidths must be strictly ascending, got {:?}",
                cfg.bandwidths
            )));
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.stations" => {
                self.paths.stations = value.split(',').map(|p| PathBuf::from(p.trim())).collect()
            }
            "data.dem" => self.paths.dem = Some(PathBuf::from(value)),
            "data.roughness" => self.paths.roughness = Some(PathBuf::from(value)),
            "data.mask" => self.paths.mask = Some(PathBuf::from(value)),
            "power.datasheet" => self.paths.power_datasheet = Some(PathBuf::from(value)),

            "clean.max_missing" => self.clean.missing = parse_f64(key, value)?,
            "clean.max_negative" => self.clean.negative = parse_f64(key, value)?,
            "clean.max_zero" => self.clean.zero = parse_f64(key, value)?,
            "clean.max_speed" => self.clean.max_speed = parse_f64(key, value)?,
            "clean.robust_z" => self.clean.robust_z = parse_f64(key, value)?,

            "features.bandwidths" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse_f64(key, p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(WindError::Config(format!(
                        "{key}: expected 3 comma-separated bandwidths, got {}",
                        parts.len()
                    )));
                }
                self.bandwidths = [parts[0], parts[1], parts[2]];
            }

            "model.members" => self.model.members = parse_usize(key, value)?,
            "model.neurons" => self.model.neurons = Some(parse_usize(key, value)?),
            "model.components" => self.model.components = Some(parse_usize(key, value)?),
            "model.residual_floor" => self.model.residual_floor = parse_f64(key, value)?,
            "model.seed" => {
                self.model.seed = value
                    .parse()
                    .map_err(|_| WindError::Config(format!("{key}: bad integer `{value}`")))?
            }
            "model.alpha_min" => self.model.alpha_min = parse_f64(key, value)?,
            "model.alpha_max" => self.model.alpha_max = parse_f64(key, value)?,
            "model.alpha_count" => self.model.alpha_count = parse_usize(key, value)?,
            "model.split_fraction" => self.model.split_fraction = parse_f64(key, value)?,

            "power.h1" => self.power.turbine.h1 = parse_f64(key, value)?,
            "power.h2" => self.power.turbine.h2 = parse_f64(key, value)?,
            "power.cutout" => self.power.turbine.cutout = parse_f64(key, value)?,
            "power.phi" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse_f64(key, p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(WindError::Config(format!(
                        "{key}: expected phi1,phi2,phi3, got {} values",
                        parts.len()
                    )));
                }
                self.power.phi = Some([parts[0], parts[1], parts[2]]);
            }

            "siting.direction_deg" => self.siting.direction_deg = parse_f64(key, value)?,
            "siting.streamwise_m" => self.siting.streamwise_m = parse_f64(key, value)?,
            "siting.crosswise_m" => self.siting.crosswise_m = parse_f64(key, value)?,

            "output.format" => {
                self.format = match value {
                    "ascii-grid" => OutputFormat::AsciiGrid,
                    "csv" => OutputFormat::Csv,
                    other => {
                        return Err(WindError::Config(format!(
                            "output.format: unknown format `{other}` (ascii-grid|csv)"
                        )))
                    }
                }
            }

            other => return Err(WindError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| WindError::Config(format!("{key}: bad number `{value}`")))?;
    if !v.is_finite() {
        return Err(WindError::Config(format!("{key}: non-finite value")));
    }
    Ok(v)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| WindError::Config(format!("{key}: bad integer `{value}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_empty_config() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model.members, 20);
        assert_eq!(cfg.bandwidths, [500.0, 2000.0, 8000.0]);
        assert_eq!(cfg.siting.direction_deg, 60.0);
        assert_eq!(cfg.power.turbine.h2, 100.0);
        assert_eq!(cfg.format, OutputFormat::AsciiGrid);
        let st = cfg.st_model_config();
        assert_eq!(st.elm.alpha_grid.len(), 61);
        assert!((st.elm.alpha_grid[0] - 1e-8).abs() < 1e-20);
        assert!((st.elm.alpha_grid[60] - 1e4).abs() < 1e-8);
    }

    #[test]
    fn parses_full_example() {
        let text = "\
# pipeline inputs
data.stations = a.csv, b/
data.dem = dem.asc
data.mask = mask.asc

clean.max_missing = 0.2   # looser than default
features.bandwidths = 400, 1600, 6400
model.members = 10
model.neurons = 50
model.seed = 42
model.split_fraction = 0.75
power.phi = 3075.31, 8.47, 1.27
siting.direction_deg = 30
output.format = csv
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.paths.stations.len(), 2);
        assert_eq!(cfg.clean.missing, 0.2);
        assert_eq!(cfg.bandwidths, [400.0, 1600.0, 6400.0]);
        assert_eq!(cfg.model.members, 10);
        assert_eq!(cfg.model.neurons, Some(50));
        assert_eq!(cfg.model.seed, 42);
        assert_eq!(cfg.power.phi, Some([3075.31, 8.47, 1.27]));
        assert_eq!(cfg.siting.direction_deg, 30.0);
        assert_eq!(cfg.format, OutputFormat::Csv);
    }

    #[test]
    fn rejects_unknown_keys_and_malformed_lines() {
        assert!(matches!(
            RunConfig::parse("model.membres = 10"),
            Err(WindError::Config(_))
        ));
        assert!(matches!(RunConfig::parse("just words"), Err(WindError::Config(_))));
        assert!(matches!(
            RunConfig::parse("model.members = ten"),
            Err(WindError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("output.format = hdf5"),
            Err(WindError::Config(_))
        ));
    }

    #[test]
    fn rejects_non_ascending_bandwidths() {
        assert!(RunConfig::parse("features.bandwidths = 1000, 500, 8000").is_err());
    }

    #[test]
    fn error_reports_line_number() {
        let err = RunConfig::parse("model.members = 5\nbogus.key = 1").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
