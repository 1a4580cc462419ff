use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use radfield::experiment::{run_experiment, ExperimentSpec, SceneSource};
use radfield::field::{density_grid, SamplingConfig};
use radfield::io::{read_dataset, read_json, write_atomic, write_dataset, write_json_pretty};
use radfield::raysearch::{run_ray_search, RaySearchConfig, RaySearchProduct};
use radfield::sim::{generate_dataset, resimulate_paths, Dataset, SceneFile, Split};
use radfield::train::{evaluate, train, DoaSource, FieldCheckpoint, TrainConfig, TrainOptions, FIELD_KIND};
use radfield::{ComplexValue, Error, FrequencyConfig};

/// Wireless radiation field reconstruction from sparse channel measurements.
#[derive(Parser)]
#[command(name = "radfield", version)]
struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset with the image-method simulator.
    Simulate(SimulateArgs),
    /// Train a field on a dataset.
    Train(TrainArgs),
    /// Predict channels for a dataset split and score them.
    Eval(EvalArgs),
    /// Build the virtual-transmitter product used for unseen locations.
    Raysearch(RaysearchArgs),
    /// Run a one-axis sweep described by a JSON spec.
    Experiment(ExperimentArgs),
    /// Write grid points with significant density as CSV.
    ExportDensity(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    ConferenceRoom,
    FurnishedConferenceRoom,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description file; a built-in scene is used when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "conference-room")]
    builtin: Builtin,
    /// Material name for built-in scenes.
    #[arg(long, default_value = "perfect")]
    material: String,
    #[arg(long, default_value_t = 400)]
    receivers: usize,
    /// Carrier frequency in Hz.
    #[arg(long, default_value_t = 2.412e9)]
    frequency: f64,
    #[arg(long, default_value_t = 312.5e3)]
    subcarrier_spacing: f64,
    #[arg(long, default_value_t = 2)]
    max_order: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DoaArg {
    Gt,
    Raysearch,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "gt")]
    doa: DoaArg,
    /// Ray-search product; defaults to `raysearch.json` in the output directory.
    #[arg(long)]
    product: Option<PathBuf>,
    /// Subcarrier index range `k_min..k_max`, inclusive.
    #[arg(long)]
    subcarriers: Option<String>,
    /// Subcarrier spacing in Hz.
    #[arg(long, default_value_t = 312.5e3)]
    spacing: f64,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct RaysearchArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Angular tolerance for assigning directions to centroids, e.g. `2deg` or `0.035rad`.
    #[arg(long)]
    angle_tol: Option<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Sweep spec; `--config` is used when absent.
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    checkpoint: PathBuf,
    /// Grid spacing in meters.
    #[arg(long, default_value_t = 0.1)]
    resolution: f64,
    /// Density percentile kept.
    #[arg(long, default_value_t = 99.0)]
    percentile: f64,
    #[arg(long, default_value_t = 8_000_000)]
    max_cells: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::MissingProduct(_) => 4,
        Error::InvalidModel(_) => 5,
        Error::ResourceGuard(_) => 6,
        _ => 2,
    }
}

fn run(cli: &Cli) -> radfield::Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Raysearch(a) => cmd_raysearch(cli, a),
        Command::Experiment(a) => cmd_experiment(cli, a),
        Command::ExportDensity(a) => cmd_export(cli, a),
    }
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn config_or_default<T: DeserializeOwned + Default>(cli: &Cli) -> radfield::Result<T> {
    match &cli.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn out_path(cli: &Cli, name: &str) -> radfield::Result<PathBuf> {
    std::fs::create_dir_all(&cli.out)?;
    Ok(cli.out.join(name))
}

/// Angle in radians from `<v>deg`, `<v>rad` or a bare radian value.
fn parse_angle(s: &str) -> radfield::Result<f64> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("deg") {
        (v, std::f64::consts::PI / 180.0)
    } else if let Some(v) = s.strip_suffix("rad") {
        (v, 1.0)
    } else {
        (s, 1.0)
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * scale)
        .map_err(|_| Error::Domain(format!("cannot read angle '{s}'")))
}

fn parse_range(s: &str) -> radfield::Result<(i32, i32)> {
    let bad = || Error::Domain(format!("subcarrier range '{s}' is not of the form k_min..k_max"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let lo: i32 = a.trim().parse().map_err(|_| bad())?;
    let hi: i32 = b.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> radfield::Result<()> {
    let scene = match &a.scene {
        Some(p) => SceneFile::load(p)?,
        None => match a.builtin {
            Builtin::ConferenceRoom => SceneSource::ConferenceRoom {
                material: a.material.clone(),
            },
            Builtin::FurnishedConferenceRoom => SceneSource::FurnishedConferenceRoom {
                material: a.material.clone(),
            },
        }
        .load()?,
    };
    let freq = FrequencyConfig::new(a.frequency, a.subcarrier_spacing, None)?;
    let ds = generate_dataset(&scene, a.receivers, freq, a.max_order, cli.seed.unwrap_or(0), a.train_fraction)?;
    let path = out_path(cli, "dataset.json")?;
    write_dataset(&ds, &path)?;
    say(cli, format!("wrote {} measurements to {}", ds.measurements.len(), path.display()));
    say(cli, format!("measurement density: {:.4} meas/ft^3", ds.density_per_cubic_foot()));
    Ok(())
}

fn load_field(path: &Path) -> radfield::Result<(FieldCheckpoint, SamplingConfig)> {
    let ck = FieldCheckpoint::load(path, FIELD_KIND)?;
    ck.model.validate()?;
    let sampling: SamplingConfig = ck
        .metadata
        .get("sampling")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::InvalidModel(format!("{} lacks sampling settings", path.display())))?;
    Ok((ck, sampling))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> radfield::Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let mut config: TrainConfig = config_or_default(cli)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(n) = a.max_iterations {
        config.max_iterations = n;
    }
    let resume = a.resume.as_deref().map(|p| FieldCheckpoint::load(p, FIELD_KIND)).transpose()?;
    std::fs::create_dir_all(&cli.out)?;
    let options = TrainOptions {
        out_dir: Some(cli.out.clone()),
        resume,
        noise: None,
        progress_every: if cli.quiet { 0 } else { 50 },
    };
    let outcome = train(&ds, &config, options)?;
    outcome.checkpoint.save(&cli.out.join("checkpoint.json"))?;
    write_json_pretty(&outcome.report, &cli.out.join("report.json"))?;
    let r = &outcome.report;
    say(
        cli,
        format!(
            "{} iterations, train SNR {:.2} dB, test SNR {}",
            r.iterations.len(),
            r.final_train_snr_db,
            r.final_test_snr_db.map_or("n/a".into(), |v| format!("{v:.2} dB"))
        ),
    );
    Ok(())
}

fn parse_split(s: &str) -> radfield::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Domain(format!("unknown split '{s}'"))),
    }
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> radfield::Result<()> {
    let (ck, sampling) = load_field(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?;
    let split = parse_split(&a.split)?;
    let product = match a.doa {
        DoaArg::Gt => None,
        DoaArg::Raysearch => {
            let path = a.product.clone().unwrap_or_else(|| cli.out.join("raysearch.json"));
            if !path.exists() {
                return Err(Error::MissingProduct(format!(
                    "{} not found; run `radfield raysearch` first",
                    path.display()
                )));
            }
            Some(RaySearchProduct::load(&path)?)
        }
    };
    let source = match &product {
        None => DoaSource::GroundTruth,
        Some(p) => DoaSource::RaySearch(Some(p)),
    };
    let carrier = ds.frequency.carrier_hz;
    let ks: Vec<i32> = match &a.subcarriers {
        Some(r) => {
            let (lo, hi) = parse_range(r)?;
            (lo..=hi).collect()
        }
        None => vec![0],
    };
    let freqs: Vec<f64> = ks.iter().map(|&k| carrier + k as f64 * a.spacing).collect();
    let truth = |i: usize, f: f64| -> radfield::Result<ComplexValue> { subcarrier_truth(&ds, i, f) };
    let override_truth: Option<&dyn Fn(usize, f64) -> radfield::Result<ComplexValue>> =
        if a.subcarriers.is_some() { Some(&truth) } else { None };
    let reports = evaluate(&ck.model, &sampling, &ds, split, source, &freqs, override_truth)?;
    let body = serde_json::json!({
        "doa": match a.doa { DoaArg::Gt => "gt", DoaArg::Raysearch => "raysearch" },
        "subcarriers": ks,
        "reports": reports,
    });
    let path = out_path(cli, "eval.json")?;
    write_json_pretty(&body, &path)?;
    for (k, r) in ks.iter().zip(&reports) {
        say(cli, format!("k={k:+} f={:.6e} Hz  SNR {:.2} dB", r.frequency_hz, r.snr_db));
    }
    Ok(())
}

fn subcarrier_truth(ds: &Dataset, i: usize, f: f64) -> radfield::Result<ComplexValue> {
    let m = &ds.measurements[i];
    if f == ds.frequency.carrier_hz {
        return Ok(m.channel);
    }
    let paths = m
        .paths
        .as_deref()
        .ok_or_else(|| Error::Domain(format!("record {i} lacks path ground truth for subcarrier evaluation")))?;
    resimulate_paths(&ds.scene, paths, f)
}

fn cmd_raysearch(cli: &Cli, a: &RaysearchArgs) -> radfield::Result<()> {
    let (ck, sampling) = load_field(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?;
    let mut config: RaySearchConfig = config_or_default(cli)?;
    if let Some(t) = &a.angle_tol {
        config.angle_tol = parse_angle(t)?;
    }
    if let Some(s) = cli.seed {
        config.count_net.seed = s;
    }
    let product = run_ray_search(&ck.model, &sampling, &ds, &config)?;
    let path = out_path(cli, "raysearch.json")?;
    product.save(&path)?;
    say(
        cli,
        format!(
            "{} candidates, {} centroids",
            product.candidates,
            product.transmitters.centroids.len()
        ),
    );
    for (c, n) in product.transmitters.centroids.iter().zip(&product.transmitters.counts) {
        say(cli, format!("  ({:.3}, {:.3}, {:.3})  members {n}", c.x, c.y, c.z));
    }
    Ok(())
}

fn cmd_experiment(cli: &Cli, a: &ExperimentArgs) -> radfield::Result<()> {
    let path = a
        .spec
        .as_ref()
        .or(cli.config.as_ref())
        .ok_or_else(|| Error::Domain("experiment needs a spec file (positional or --config)".into()))?;
    let mut spec: ExperimentSpec = read_json(path)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    std::fs::create_dir_all(&cli.out)?;
    let table = run_experiment(&spec, Some(&cli.out), if cli.quiet { 0 } else { 100 })?;
    if !cli.quiet {
        print!("{}", table.to_csv());
    }
    Ok(())
}

fn cmd_export(cli: &Cli, a: &ExportArgs) -> radfield::Result<()> {
    let (ck, sampling) = load_field(&a.checkpoint)?;
    let bbox = ck
        .metadata
        .get("scene_box")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .unwrap_or_else(|| ck.model.normalization.expanded(-sampling.t_far));
    let grid = density_grid(&ck.model, &bbox, a.resolution, a.percentile, a.max_cells)?;
    let mut csv = String::from("x,y,z,sigma\n");
    for (p, s) in &grid.points {
        csv.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.z, s));
    }
    let path = out_path(cli, "density.csv")?;
    write_atomic(&path, csv.as_bytes())?;
    say(
        cli,
        format!(
            "{} points above threshold {:.4} written to {}",
            grid.points.len(),
            grid.threshold,
            path.display()
        ),
    );
    Ok(())
}
