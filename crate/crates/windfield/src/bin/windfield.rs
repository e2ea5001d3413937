//! Command-line pipeline driver: cleaning, terrain features, model
//! fitting, field prediction, power conversion, siting and a synthetic
//! benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, TimeDelta, Utc};
use clap::{Parser, Subcommand};

use windfield::config::{OutputFormat, RunConfig};
use windfield::data::{
    self, build_matrix, clean_network, downsample_hourly, impute_missing, load_station_csvs,
    split_network, ObservationMatrix,
};
use windfield::grid::DemGrid;
use windfield::power::{self, PowerCurve, WindMoments};
use windfield::siting::{self, RestrictionMask};
use windfield::st_model::{self, StModelConfig};
use windfield::synth::{self, SyntheticScenario};
use windfield::terrain::{self, FeatureStack};
use windfield::{persist, Result, WindError};

#[derive(Parser)]
#[command(name = "windfield", version, about = "Wind field reconstruction and power potential")]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory holding intermediate artifacts.
    #[arg(long, global = true, default_value = "stage")]
    stage_dir: PathBuf,
    /// Grid output format: ascii-grid or csv.
    #[arg(long, global = true)]
    format: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw station series and write hourly data plus a quality report.
    Clean,
    /// Assemble the multiscale terrain feature stack from the DEM.
    Features,
    /// Fit the spatio-temporal model and its variance model.
    Fit,
    /// Predict mean, model variance and prediction variance grids.
    Predict {
        /// Time index to predict; omitted = all-time average.
        #[arg(long)]
        time: Option<usize>,
    },
    /// Convert predicted speed grids to hub height and power moments.
    Power,
    /// Place virtual turbines and summarize the technical potential.
    Site,
    /// Run the synthetic end-to-end benchmark and print its metrics.
    Benchmark {
        #[arg(long, default_value_t = 100)]
        train_stations: usize,
        #[arg(long, default_value_t = 25)]
        test_stations: usize,
        #[arg(long, default_value_t = 2000)]
        times: usize,
    },
    /// Emit a synthetic station CSV on stdout.
    Synth {
        #[arg(long, default_value_t = 30)]
        stations: usize,
        #[arg(long, default_value_t = 500)]
        times: usize,
    },
}

fn exit_code_for(err: &WindError) -> u8 {
    match err {
        WindError::Config(_) | WindError::Parameter(_) | WindError::Range(_) => 2,
        WindError::Schema(_)
        | WindError::Duplicate { .. }
        | WindError::Completeness(_)
        | WindError::Imputation { .. }
        | WindError::Dimension(_)
        | WindError::Io(_)
        | WindError::Csv(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
    }
    if let Some(format) = &cli.format {
        cfg.format = match format.as_str() {
            "ascii-grid" => OutputFormat::AsciiGrid,
            "csv" => OutputFormat::Csv,
            other => return Err(WindError::Config(format!("unknown format `{other}`"))),
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.stage_dir)?;
    match &cli.command {
        Command::Clean => cmd_clean(&cfg, &cli.stage_dir),
        Command::Features => cmd_features(&cfg, &cli.stage_dir),
        Command::Fit => cmd_fit(&cfg, &cli.stage_dir),
        Command::Predict { time } => cmd_predict(&cfg, &cli.stage_dir, *time),
        Command::Power => cmd_power(&cfg, &cli.stage_dir),
        Command::Site => cmd_site(&cfg, &cli.stage_dir),
        Command::Benchmark { train_stations, test_stations, times } => {
            cmd_benchmark(&cfg, *train_stations, *test_stations, *times)
        }
        Command::Synth { stations, times } => cmd_synth(&cfg, *stations, *times),
    }
}

fn station_paths(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.paths.stations.is_empty() {
        return Err(WindError::Config("data.stations is not set".into()));
    }
    let mut files = Vec::new();
    for p in &cfg.paths.stations {
        if p.is_dir() {
            let mut dir_files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            dir_files.sort();
            files.extend(dir_files);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(WindError::Config("no station CSV files found".into()));
    }
    Ok(files)
}

fn cmd_clean(cfg: &RunConfig, stage: &Path) -> Result<()> {
    let series = load_station_csvs(&station_paths(cfg)?)?;
    let (kept, report) = clean_network(&series, &cfg.clean);
    let hourly: Vec<_> = kept.iter().map(downsample_hourly).collect();
    std::fs::write(stage.join("quality.csv"), report.to_csv())?;
    let matrix = matrix_from_hourly(&hourly)?;
    std::fs::write(stage.join("cleaned.csv"), synth::to_station_csv(&matrix))?;
    println!(
        "clean: kept {} of {} stations, {} outliers replaced",
        kept.len(),
        series.len(),
        report.outlier_replacements
    );
    Ok(())
}

/// Hourly series to matrix over the union of observed hours.
fn matrix_from_hourly(hourly: &[data::StationSeries]) -> Result<ObservationMatrix> {
    let mut start: Option<DateTime<Utc>> = None;
    let mut end: Option<DateTime<Utc>> = None;
    for s in hourly {
        for (t, _) in &s.samples {
            start = Some(start.map_or(*t, |v| v.min(*t)));
            end = Some(end.map_or(*t, |v| v.max(*t)));
        }
    }
    let (Some(start), Some(end)) = (start, end) else {
        return Err(WindError::Completeness("no observed samples".into()));
    };
    build_matrix(hourly, start, end + TimeDelta::hours(1))
}

fn cmd_features(cfg: &RunConfig, stage: &Path) -> Result<()> {
    let dem_path =
        cfg.paths.dem.as_ref().ok_or_else(|| WindError::Config("data.dem is not set".into()))?;
    let dem = DemGrid::read_ascii(dem_path)?;
    let stack = terrain::assemble_features(&dem, &cfg.bandwidths)?;
    stack.save(&stage.join("features"))?;
    println!("features: {} grids at bandwidths {:?}", stack.grids.len(), cfg.bandwidths);
    Ok(())
}

/// Feature rows at station locations: the terrain stack when available,
/// otherwise plain coordinates and elevation.
fn station_features(m: &ObservationMatrix, stage: &Path) -> Result<Vec<Vec<f64>>> {
    let feature_dir = stage.join("features");
    if feature_dir.join("manifest.csv").exists() {
        let stack = FeatureStack::load(&feature_dir)?;
        stack.sample_many(
            &m.locations.iter().map(|l| (l.easting, l.northing)).collect::<Vec<_>>(),
        )
    } else {
        Ok(m.locations.iter().map(|l| vec![l.easting, l.northing, l.elevation]).collect())
    }
}

fn load_cleaned_matrix(cfg: &RunConfig, stage: &Path) -> Result<ObservationMatrix> {
    let cleaned = stage.join("cleaned.csv");
    let series = if cleaned.exists() {
        data::load_station_csv(&cleaned)?
    } else {
        let raw = load_station_csvs(&station_paths(cfg)?)?;
        let (kept, _) = clean_network(&raw, &cfg.clean);
        kept.iter().map(downsample_hourly).collect()
    };
    matrix_from_hourly(&series)
}

fn cmd_fit(cfg: &RunConfig, stage: &Path) -> Result<()> {
    let matrix = load_cleaned_matrix(cfg, stage)?;
    let split = split_network(&matrix, cfg.model.split_fraction, cfg.model.seed)?;
    let train = impute_missing(&matrix.subset(&split.train_indices), 8, 1)?;
    let test = matrix.subset(&split.test_indices);
    let features = station_features(&train, stage)?;
    let test_features = station_features(&test, stage)?;

    let model_config = cfg.st_model_config();
    let model = st_model::fit(&train, &features, &model_config)?;
    let vm = st_model::fit_variance_model(&model, &train, &features, &model_config)?;
    persist::save_model(&stage.join("model"), &model)?;
    persist::save_variance_model(&stage.join("vmodel"), &vm)?;

    let diag = st_model::cross_covariance_check(&model, &features)?;
    if diag.warn {
        eprintln!(
            "warning: max residual cross-correlation {:.3} between components",
            diag.max_abs_normalized
        );
    }
    let metrics = st_model::evaluate(&model, &test, &test_features)?;
    let coverage = st_model::coverage_check(&model, &vm, &test, &test_features)?;
    let csv = format!(
        "metric,value\nrmse,{}\nmae,{}\nbaseline_rmse,{}\nbaseline_mae,{}\ncoverage95,{}\n",
        metrics.rmse, metrics.mae, metrics.baseline_rmse, metrics.baseline_mae, coverage
    );
    std::fs::write(stage.join("metrics.csv"), &csv)?;
    println!(
        "fit: {} train / {} test stations, rmse {:.4} (baseline {:.4}), coverage {:.3}",
        train.n_stations(),
        test.n_stations(),
        metrics.rmse,
        metrics.baseline_rmse,
        coverage
    );
    Ok(())
}

fn write_grid(grid: &DemGrid, stage: &Path, name: &str, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::AsciiGrid => grid.write_ascii(&stage.join(format!("{name}.asc"))),
        OutputFormat::Csv => {
            let mut s = String::from("easting_m,northing_m,value\n");
            for r in 0..grid.nrows {
                for c in 0..grid.ncols {
                    if let Some(v) = grid.get(r, c) {
                        let (x, y) = grid.cell_center(r, c);
                        s.push_str(&format!("{x},{y},{v}\n"));
                    }
                }
            }
            std::fs::write(stage.join(format!("{name}.csv")), s)?;
            Ok(())
        }
    }
}

fn cmd_predict(cfg: &RunConfig, stage: &Path, time: Option<usize>) -> Result<()> {
    let model = persist::load_model(&stage.join("model"))?;
    let vm = persist::load_variance_model(&stage.join("vmodel"))?;
    let stack = FeatureStack::load(&stage.join("features"))?;
    let template = &stack.grids[0];
    let times: Vec<usize> = match time {
        Some(t) => vec![t],
        None => (0..model.eof.n_times()).collect(),
    };

    let mut mean = DemGrid::like(template);
    let mut var_model = DemGrid::like(template);
    let mut var_pred = DemGrid::like(template);
    for r in 0..template.nrows {
        for c in 0..template.ncols {
            if template.get(r, c).is_none() {
                continue;
            }
            let (x, y) = template.cell_center(r, c);
            let f = vec![stack.sample(x, y)?];
            let m = model.predict(&f, &times)?;
            let v = model.model_variance(&f, &times)?;
            let p = vm.prediction_variance(&f, &times)?;
            let t = times.len() as f64;
            mean.set(r, c, m.row(0).iter().sum::<f64>() / t);
            var_model.set(r, c, v.row(0).iter().sum::<f64>() / t);
            var_pred.set(r, c, p.row(0).iter().sum::<f64>() / t);
        }
    }
    write_grid(&mean, stage, "speed_mean", cfg.format)?;
    write_grid(&var_model, stage, "speed_var_model", cfg.format)?;
    write_grid(&var_pred, stage, "speed_var_pred", cfg.format)?;
    println!("predict: {} time steps over {}x{} cells", times.len(), template.nrows, template.ncols);
    Ok(())
}

fn load_power_curve(cfg: &RunConfig) -> Result<PowerCurve> {
    if let Some([p1, p2, p3]) = cfg.power.phi {
        return Ok(PowerCurve { phi1: p1, phi2: p2, phi3: p3 });
    }
    let path = cfg
        .paths
        .power_datasheet
        .as_ref()
        .ok_or_else(|| WindError::Config("set power.phi or power.datasheet".into()))?;
    let text = std::fs::read_to_string(path)?;
    let mut speeds = Vec::new();
    let mut powers = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let v: f64 = it
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| WindError::Schema("bad datasheet row".into()))?;
        let p: f64 = it
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| WindError::Schema("bad datasheet row".into()))?;
        speeds.push(v);
        powers.push(p);
    }
    power::fit_power_curve(&speeds, &powers)
}

fn load_stage_grid(stage: &Path, name: &str) -> Result<DemGrid> {
    DemGrid::read_ascii(&stage.join(format!("{name}.asc")))
}

fn cmd_power(cfg: &RunConfig, stage: &Path) -> Result<()> {
    let curve = load_power_curve(cfg)?;
    let mean = load_stage_grid(stage, "speed_mean")?;
    let var = load_stage_grid(stage, "speed_var_pred")?;
    let rough_path = cfg
        .paths
        .roughness
        .as_ref()
        .ok_or_else(|| WindError::Config("data.roughness is not set".into()))?;
    let rough = DemGrid::read_ascii(rough_path)?;
    let (hub_mean, hub_var) = power::extrapolate_grids(&mean, &var, &rough, &cfg.power.turbine)?;

    let mut p_mean = DemGrid::like(&hub_mean);
    let mut p_var = DemGrid::like(&hub_mean);
    let mut n_cut = 0usize;
    for r in 0..hub_mean.nrows {
        for c in 0..hub_mean.ncols {
            let (Some(m), Some(v)) = (hub_mean.get(r, c), hub_var.get(r, c)) else { continue };
            let pm = curve.moments(WindMoments { mean: m, var: v }, cfg.power.turbine.cutout);
            if pm.cut_out {
                n_cut += 1;
            }
            p_mean.set(r, c, pm.mean_kw);
            p_var.set(r, c, pm.var_kw2);
        }
    }
    write_grid(&hub_mean, stage, "hub_speed_mean", cfg.format)?;
    write_grid(&hub_var, stage, "hub_speed_var", cfg.format)?;
    write_grid(&p_mean, stage, "power_mean_kw", cfg.format)?;
    write_grid(&p_var, stage, "power_var_kw2", cfg.format)?;
    println!("power: curve ({:.2}, {:.2}, {:.2}), {} cells cut out", curve.phi1, curve.phi2, curve.phi3, n_cut);
    Ok(())
}

fn cmd_site(cfg: &RunConfig, stage: &Path) -> Result<()> {
    let mask_path =
        cfg.paths.mask.as_ref().ok_or_else(|| WindError::Config("data.mask is not set".into()))?;
    let mask = RestrictionMask::from_grid(DemGrid::read_ascii(mask_path)?)?;
    let curve = load_power_curve(cfg)?;
    let hub_mean = load_stage_grid(stage, "hub_speed_mean")?;
    let hub_var = load_stage_grid(stage, "hub_speed_var")?;

    let layout = siting::place_turbines(&mask, &cfg.siting)?;
    let moments =
        siting::turbine_power(&layout, &curve, &hub_mean, &hub_var, cfg.power.turbine.cutout)?;
    // grids hold all-time averages, so a full year of that power
    let hours = 8760.0;
    let energies: Vec<f64> = moments.iter().map(|m| m.mean_kw * hours / 1e6).collect();
    let variances: Vec<f64> = moments.iter().map(|m| m.var_kw2 * hours / 1e12).collect();
    let cut: Vec<bool> = moments.iter().map(|m| m.cut_out).collect();
    let summary = siting::summarize_potential(&layout, &energies, &variances, &cut)?;
    std::fs::write(stage.join("turbines.csv"), layout.to_csv())?;
    std::fs::write(stage.join("potential.csv"), summary.to_csv())?;
    println!(
        "site: {} turbines, {:.1} GWh/a over {:.0} km2 buildable",
        layout.len(),
        summary.total_energy_gwh(),
        mask.buildable_area_km2()
    );
    Ok(())
}

fn cmd_benchmark(cfg: &RunConfig, train_n: usize, test_n: usize, times: usize) -> Result<()> {
    let scenario = SyntheticScenario { seed: cfg.model.seed, ..SyntheticScenario::default() };
    let (matrix, _) = synth::generate(&scenario, train_n + test_n, times)?;
    let split = split_network(
        &matrix,
        train_n as f64 / (train_n + test_n) as f64,
        cfg.model.seed,
    )?;
    let train = matrix.subset(&split.train_indices);
    let test = matrix.subset(&split.test_indices);
    let features = synth::coordinate_features(&train);
    let test_features = synth::coordinate_features(&test);

    let model_config = StModelConfig {
        k_retained: cfg.model.components.or(Some(10)),
        ..cfg.st_model_config()
    };
    let model = st_model::fit(&train, &features, &model_config)?;
    let vm = st_model::fit_variance_model(&model, &train, &features, &model_config)?;
    let metrics = st_model::evaluate(&model, &test, &test_features)?;
    let coverage = st_model::coverage_check(&model, &vm, &test, &test_features)?;
    println!(
        "benchmark: rmse {:.4} mae {:.4} baseline_rmse {:.4} baseline_mae {:.4} coverage95 {:.3}",
        metrics.rmse, metrics.mae, metrics.baseline_rmse, metrics.baseline_mae, coverage
    );
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, stations: usize, times: usize) -> Result<()> {
    let scenario = SyntheticScenario { seed: cfg.model.seed, ..SyntheticScenario::default() };
    let (matrix, _) = synth::generate(&scenario, stations, times)?;
    print!("{}", synth::to_station_csv(&matrix));
    Ok(())
}
