//! One-axis parameter sweeps producing SNR tables.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{ComplexValue, FrequencyConfig};
use crate::error::{domain, Error, Result};
use crate::sim::{add_noise, generate_dataset, resimulate_paths, Dataset, Material, NoiseMode, NoisyData, SceneFile, SceneGeometry, Split};
use crate::train::{evaluate, train, DoaSource, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    ConferenceRoom { material: String },
    FurnishedConferenceRoom { material: String },
    File { path: PathBuf },
}

impl SceneSource {
    pub fn load(&self) -> Result<SceneGeometry> {
        let material = |name: &str| Material::named(name).ok_or_else(|| Error::InvalidScene(format!("unknown material '{name}'")));
        match self {
            SceneSource::ConferenceRoom { material: m } => SceneGeometry::conference_room(material(m)?),
            SceneSource::FurnishedConferenceRoom { material: m } => SceneGeometry::furnished_conference_room(material(m)?),
            SceneSource::File { path } => SceneFile::load(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum SweepAxis {
    /// Fraction of the training split kept.
    TrainFraction {
        values: Vec<f64>,
    },
    /// Material names applied to every surface.
    Material {
        names: Vec<String>,
    },
    Frequency {
        values_hz: Vec<f64>,
    },
    /// One trained model evaluated at `carrier + k * spacing` for each k.
    Subcarrier {
        k_min: i32,
        k_max: i32,
        spacing_hz: f64,
    },
    ChannelSnr {
        values_db: Vec<f64>,
        mode: NoiseMode,
    },
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::TrainFraction { .. } => "train_fraction",
            SweepAxis::Material { .. } => "material",
            SweepAxis::Frequency { .. } => "frequency_hz",
            SweepAxis::Subcarrier { .. } => "subcarrier",
            SweepAxis::ChannelSnr { .. } => "channel_snr_db",
        }
    }

    fn values(&self) -> Vec<AxisValue> {
        match self {
            SweepAxis::TrainFraction { values }
            | SweepAxis::Frequency { values_hz: values }
            | SweepAxis::ChannelSnr { values_db: values, .. } => values.iter().map(|&v| AxisValue::Number(v)).collect(),
            SweepAxis::Material { names } => names.iter().map(|n| AxisValue::Name(n.clone())).collect(),
            SweepAxis::Subcarrier { k_min, k_max, .. } => (*k_min..=*k_max).map(|k| AxisValue::Number(k as f64)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Name(String),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Name(s) => f.write_str(s),
        }
    }
}

fn axis_order(a: &AxisValue, b: &AxisValue) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a, b) {
        (AxisValue::Number(x), AxisValue::Number(y)) => x.total_cmp(y),
        (AxisValue::Name(x), AxisValue::Name(y)) => x.cmp(y),
        (AxisValue::Number(_), AxisValue::Name(_)) => Ordering::Less,
        (AxisValue::Name(_), AxisValue::Number(_)) => Ordering::Greater,
    }
}

/// A sweep over one axis around a fixed base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub scene: SceneSource,
    pub n_receivers: usize,
    pub train_fraction: f64,
    pub carrier_hz: f64,
    pub max_order: usize,
    /// Seeds the dataset, the training run and any noise.
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    pub axis: SweepAxis,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let values = self.axis.values();
        if values.is_empty() {
            return domain("sweep has no values");
        }
        match &self.axis {
            SweepAxis::TrainFraction { values } if values.iter().any(|&f| !(f > 0.0 && f <= 1.0)) => {
                return domain("train fractions must lie in (0, 1]");
            }
            SweepAxis::Frequency { values_hz } if values_hz.iter().any(|&f| !(f > 0.0 && f.is_finite())) => {
                return domain("frequencies must be positive");
            }
            SweepAxis::Material { names } => {
                if let Some(n) = names.iter().find(|n| Material::named(n).is_none()) {
                    return domain(format!("unknown material '{n}'"));
                }
            }
            SweepAxis::Subcarrier { spacing_hz, .. } if !(*spacing_hz > 0.0) => return domain("subcarrier spacing must be positive"),
            _ => {}
        }
        self.train.validate()
    }

    fn dataset(&self, scene: &SceneGeometry, carrier_hz: f64) -> Result<Dataset> {
        generate_dataset(
            scene,
            self.n_receivers,
            FrequencyConfig::carrier(carrier_hz)?,
            self.max_order,
            self.seed,
            self.train_fraction,
        )
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub axis: String,
    pub value: AxisValue,
    pub train_snr_db: Option<f64>,
    pub test_snr_db: Option<f64>,
    pub iterations: usize,
    pub runtime_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub name: String,
    pub axis: String,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("axis,value,train_snr_db,test_snr_db,iterations,runtime_s,error\n");
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace('"', "'");
            out.push_str(&format!(
                "{},{},{},{},{},{:.3},\"{}\"\n",
                r.axis,
                r.value,
                opt(r.train_snr_db),
                opt(r.test_snr_db),
                r.iterations,
                r.runtime_s,
                err
            ));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::io::write_json_pretty(self, &dir.join("results.json"))?;
        crate::io::write_atomic(&dir.join("results.csv"), self.to_csv().as_bytes())
    }

    pub fn row(&self, value: f64) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.value == AxisValue::Number(value))
    }
}

/// Runs every sweep value in order; a failing run is recorded in its row and
/// the sweep continues. Rows are sorted by axis value.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>, progress_every: usize) -> Result<ExperimentTable> {
    spec.validate()?;
    let base_scene = spec.scene.load()?;
    let axis = spec.axis.name().to_string();
    let mut rows = match &spec.axis {
        SweepAxis::Subcarrier { k_min, k_max, spacing_hz } => {
            subcarrier_rows(spec, &base_scene, *k_min, *k_max, *spacing_hz, out_dir, progress_every)
        }
        _ => {
            // built once for the axes that share it
            let base = match &spec.axis {
                SweepAxis::TrainFraction { .. } | SweepAxis::ChannelSnr { .. } => Some(spec.dataset(&base_scene, spec.carrier_hz)),
                _ => None,
            };
            let mut rows = Vec::new();
            for (i, value) in spec.axis.values().into_iter().enumerate() {
                let dir = out_dir.map(|d| d.join(format!("run_{i:02}")));
                let start = Instant::now();
                let result = run_one(spec, &base_scene, base.as_ref(), &value, dir, progress_every);
                let runtime_s = start.elapsed().as_secs_f64();
                rows.push(match result {
                    Ok((train, test, iterations)) => ExperimentRow {
                        axis: axis.clone(),
                        value,
                        train_snr_db: Some(train),
                        test_snr_db: test,
                        iterations,
                        runtime_s,
                        error: None,
                    },
                    Err(e) => failed_row(&axis, value, runtime_s, &e),
                });
            }
            rows
        }
    };
    rows.sort_by(|a, b| axis_order(&a.value, &b.value));
    let table = ExperimentTable {
        name: spec.name.clone(),
        axis,
        rows,
    };
    if let Some(dir) = out_dir {
        table.save(dir)?;
    }
    Ok(table)
}

fn failed_row(axis: &str, value: AxisValue, runtime_s: f64, e: &Error) -> ExperimentRow {
    ExperimentRow {
        axis: axis.to_string(),
        value,
        train_snr_db: None,
        test_snr_db: None,
        iterations: 0,
        runtime_s,
        error: Some(e.to_string()),
    }
}

fn run_one(
    spec: &ExperimentSpec,
    scene: &SceneGeometry,
    base: Option<&Result<Dataset>>,
    value: &AxisValue,
    out_dir: Option<PathBuf>,
    progress_every: usize,
) -> Result<(f64, Option<f64>, usize)> {
    let base = || -> Result<Dataset> {
        match base {
            Some(Ok(d)) => Ok(d.clone()),
            Some(Err(e)) => domain(format!("base dataset: {e}")),
            None => spec.dataset(scene, spec.carrier_hz),
        }
    };
    let config = spec.train_config();
    let options = |noise| TrainOptions {
        out_dir,
        resume: None,
        noise,
        progress_every,
    };
    let outcome = match (&spec.axis, value) {
        (SweepAxis::TrainFraction { .. }, AxisValue::Number(f)) => train(&base()?.subsample_train(*f)?, &config, options(None))?,
        (SweepAxis::Material { .. }, AxisValue::Name(n)) => {
            let m = Material::named(n).ok_or_else(|| Error::InvalidScene(format!("unknown material '{n}'")))?;
            train(&spec.dataset(&scene.with_material(m)?, spec.carrier_hz)?, &config, options(None))?
        }
        (SweepAxis::Frequency { .. }, AxisValue::Number(f)) => train(&spec.dataset(scene, *f)?, &config, options(None))?,
        (SweepAxis::ChannelSnr { mode, .. }, AxisValue::Number(snr)) => {
            let clean = base()?;
            match add_noise(&clean, *snr, *mode, spec.seed)? {
                NoisyData::Fixed(noisy) => train(&noisy, &config, options(None))?,
                NoisyData::PerDraw(stream) => train(&clean, &config, options(Some(&stream)))?,
            }
        }
        _ => return domain(format!("axis value {value} does not fit the sweep")),
    };
    let r = outcome.report;
    Ok((r.final_train_snr_db, r.final_test_snr_db, r.iterations.len()))
}

fn subcarrier_rows(
    spec: &ExperimentSpec,
    scene: &SceneGeometry,
    k_min: i32,
    k_max: i32,
    spacing_hz: f64,
    out_dir: Option<&Path>,
    progress_every: usize,
) -> Vec<ExperimentRow> {
    let axis = spec.axis.name();
    let ks: Vec<i32> = (k_min..=k_max).collect();
    let start = Instant::now();
    let result = (|| -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let dataset = spec.dataset(scene, spec.carrier_hz)?;
        let config = spec.train_config();
        let options = TrainOptions {
            out_dir: out_dir.map(|d| d.join("model")),
            progress_every,
            ..Default::default()
        };
        let outcome = train(&dataset, &config, options)?;
        let sampling = config.sampling(&dataset.scene, dataset.max_order)?;
        let freqs: Vec<f64> = ks.iter().map(|&k| spec.carrier_hz + k as f64 * spacing_hz).collect();
        let truth = |i: usize, f: f64| -> Result<ComplexValue> {
            let paths = dataset.measurements[i]
                .paths
                .as_deref()
                .ok_or_else(|| Error::Domain("record lacks path ground truth".into()))?;
            resimulate_paths(&dataset.scene, paths, f)
        };
        let model = &outcome.checkpoint.model;
        let snrs = |split| -> Result<Vec<f64>> {
            Ok(
                evaluate(model, &sampling, &dataset, split, DoaSource::GroundTruth, &freqs, Some(&truth))?
                    .iter()
                    .map(|r| r.snr_db)
                    .collect(),
            )
        };
        let test = if dataset.test_indices().is_empty() {
            vec![f64::NAN; ks.len()]
        } else {
            snrs(Split::Test)?
        };
        Ok((snrs(Split::Train)?, test, outcome.report.iterations.len()))
    })();
    let runtime_s = start.elapsed().as_secs_f64() / ks.len() as f64;
    ks.iter()
        .enumerate()
        .map(|(j, &k)| {
            let value = AxisValue::Number(k as f64);
            match &result {
                Ok((train, test, iterations)) => ExperimentRow {
                    axis: axis.to_string(),
                    value,
                    train_snr_db: Some(train[j]),
                    test_snr_db: test[j].is_finite().then_some(test[j]),
                    iterations: *iterations,
                    runtime_s,
                    error: None,
                },
                Err(e) => failed_row(axis, value, runtime_s, e),
            }
        })
        .collect()
}
