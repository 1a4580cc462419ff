//! Comparison predictors: K-nearest-neighbor channel averaging and a direct
//! position-to-channel network.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::channel::ComplexValue;
use crate::error::{domain, Error, Result};
use crate::field::{encode_into, Checkpoint};
use crate::geometry::{Aabb, Position};
use crate::metrics::{nmse, prediction_snr_db};
use crate::nn::{Mlp, OutputActivation, ParamSet};
use crate::sim::{stream_rng, Dataset};
use crate::train::{pick_batch, AdamState, PlateauScheduler, SchedulerConfig};

pub const KNN_KIND: &str = "knn";
pub const DIRECT_MLP_KIND: &str = "direct-mlp";

/// Training positions and channels averaged by [`knn_predict`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub positions: Vec<Position>,
    pub channels: Vec<ComplexValue>,
    pub k: usize,
}

impl KnnModel {
    pub fn new(positions: Vec<Position>, channels: Vec<ComplexValue>, k: usize) -> Result<Self> {
        if positions.len() != channels.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} channels",
                positions.len(),
                channels.len()
            )));
        }
        if k == 0 || k > positions.len() {
            return domain(format!("K = {k} outside [1, {}]", positions.len()));
        }
        Ok(KnnModel { positions, channels, k })
    }

    /// Built from the training split.
    pub fn from_dataset(dataset: &Dataset, k: usize) -> Result<Self> {
        let idx = dataset.train_indices();
        let positions = idx.iter().map(|&i| dataset.measurements[i].position).collect();
        let channels = idx.iter().map(|&i| dataset.measurements[i].channel).collect();
        KnnModel::new(positions, channels, k)
    }

    /// Indices of the K nearest training positions, nearest first.
    pub fn neighbors(&self, position: Position) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self.positions.iter().enumerate().map(|(i, p)| (p.distance(position), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().take(self.k).map(|(_, i)| i).collect()
    }
}

/// Unweighted mean channel of the K nearest training positions.
pub fn knn_predict(model: &KnnModel, position: Position) -> ComplexValue {
    let nb = model.neighbors(position);
    let sum: ComplexValue = nb.iter().map(|&i| model.channels[i]).sum();
    sum / nb.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectMlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub spatial_frequencies: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub scheduler: SchedulerConfig,
    /// Iterations per scheduler evaluation; 0 means one pass over the training split.
    pub scheduler_interval: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for DirectMlpConfig {
    fn default() -> Self {
        DirectMlpConfig {
            hidden_layers: 7,
            width: 128,
            spatial_frequencies: 10,
            batch_size: 32,
            lr_initial: 5e-4,
            scheduler: SchedulerConfig::default(),
            scheduler_interval: 0,
            max_iterations: 20_000,
            seed: 0,
        }
    }
}

impl DirectMlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.batch_size == 0 {
            return domain("direct MLP needs at least one hidden layer, nonzero width and batch size");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return domain(format!("learning rate {} must be positive", self.lr_initial));
        }
        Ok(())
    }
}

/// Encoded position to tanh-bounded (re, im), scaled by a channel amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectMlpModel {
    pub spatial_frequencies: usize,
    pub normalization: Aabb,
    pub scale: f64,
    pub network: Mlp<f32>,
}

impl DirectMlpModel {
    pub fn validate(&self) -> Result<()> {
        if !self.network.all_finite() || !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidModel("direct MLP has non-finite parameters".into()));
        }
        if self.network.inputs() != 3 * (2 * self.spatial_frequencies + 1) || self.network.outputs() != 2 {
            return Err(Error::InvalidModel("direct MLP layer shapes do not match its encoding".into()));
        }
        Ok(())
    }

    fn encode(&self, positions: &[Position]) -> Vec<f32> {
        let mut x = Vec::with_capacity(positions.len() * self.network.inputs());
        for p in positions {
            encode_into(&self.normalization.normalize(*p), self.spatial_frequencies, true, &mut x);
        }
        x
    }

    pub fn predict_many(&self, positions: &[Position]) -> Result<Vec<ComplexValue>> {
        let out = self.network.predict(&self.encode(positions), positions.len())?;
        Ok(out
            .chunks(2)
            .map(|c| ComplexValue::new(f64::from(c[0]), f64::from(c[1])) * self.scale)
            .collect())
    }
}

pub fn direct_mlp_predict(model: &DirectMlpModel, position: Position) -> Result<ComplexValue> {
    Ok(model.predict_many(&[position])?[0])
}

pub type DirectMlpCheckpoint = Checkpoint<DirectMlpModel>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectMlpReport {
    pub iterations: usize,
    pub losses: Vec<f64>,
    pub final_train_snr_db: f64,
    pub final_test_snr_db: Option<f64>,
}

/// Fits the network to training channels with batch NMSE, Adam and the
/// plateau scheduler.
pub fn train_direct_mlp(
    dataset: &Dataset,
    config: &DirectMlpConfig,
    out_dir: Option<PathBuf>,
) -> Result<(DirectMlpModel, DirectMlpReport)> {
    config.validate()?;
    let train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        return domain("training split is empty");
    }
    let scale = train_idx
        .iter()
        .map(|&i| dataset.measurements[i].channel.norm())
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return domain("training channels are all zero");
    }
    let inputs = 3 * (2 * config.spatial_frequencies + 1);
    let mut widths = vec![inputs];
    widths.extend(std::iter::repeat_n(config.width, config.hidden_layers));
    widths.push(2);
    let mut rng = stream_rng(config.seed, 0);
    let mut model = DirectMlpModel {
        spatial_frequencies: config.spatial_frequencies,
        normalization: dataset.scene.bounding_box(),
        scale,
        network: Mlp::new(&widths, OutputActivation::Tanh, &mut rng)?,
    };
    let mut adam = AdamState::new(&model.network);
    let mut scheduler = PlateauScheduler::new(config.lr_initial, config.scheduler);
    let batch = config.batch_size.min(train_idx.len());
    let interval = match config.scheduler_interval {
        0 => train_idx.len().div_ceil(batch),
        n => n,
    };
    let mut losses = Vec::with_capacity(config.max_iterations);
    let mut interval_sum = 0.0;
    let mut interval_count = 0;

    for it in 1..=config.max_iterations {
        let mut rng = stream_rng(config.seed, (1 << 32) + it as u64);
        let picks = pick_batch(&train_idx, batch, &mut rng);
        let positions: Vec<Position> = picks.iter().map(|&i| dataset.measurements[i].position).collect();
        let truth: Vec<ComplexValue> = picks.iter().map(|&i| dataset.measurements[i].channel).collect();
        let cache = model.network.forward(&model.encode(&positions), picks.len())?;
        let power: f64 = truth.iter().map(|h| h.norm_sqr()).sum();
        let mut loss = 0.0;
        let mut d_out = vec![0f32; 2 * picks.len()];
        for (r, h) in truth.iter().enumerate() {
            let y = &cache.output()[2 * r..2 * r + 2];
            let e = ComplexValue::new(f64::from(y[0]), f64::from(y[1])) * scale - h;
            loss += e.norm_sqr() / power;
            d_out[2 * r] = (2.0 * e.re * scale / power) as f32;
            d_out[2 * r + 1] = (2.0 * e.im * scale / power) as f32;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                what: "loss".into(),
            });
        }
        if loss > 1e6 {
            return Err(Error::Divergence { iteration: it, loss });
        }
        let mut grad = model.network.zeros_like();
        model.network.backward(&cache, &d_out, &mut grad);
        adam.step(&mut model.network, &grad, scheduler.lr).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { iteration: it, what },
            other => other,
        })?;
        losses.push(loss);
        interval_sum += loss;
        interval_count += 1;
        if interval_count == interval {
            scheduler.step(interval_sum / interval as f64)?;
            interval_sum = 0.0;
            interval_count = 0;
        }
    }

    let report = DirectMlpReport {
        iterations: config.max_iterations,
        losses,
        final_train_snr_db: split_snr(&model, dataset, &train_idx)?,
        final_test_snr_db: match dataset.test_indices() {
            t if t.is_empty() => None,
            t => Some(split_snr(&model, dataset, &t)?),
        },
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        let meta = serde_json::json!({ "config": config, "dataset_seed": dataset.seed });
        Checkpoint::<_, serde_json::Value>::new(DIRECT_MLP_KIND, dataset.frequency, model.clone(), None, meta)
            .save(&dir.join("direct_mlp.json"))?;
    }
    Ok((model, report))
}

fn split_snr(model: &DirectMlpModel, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let positions: Vec<Position> = idx.iter().map(|&i| dataset.measurements[i].position).collect();
    let truth: Vec<ComplexValue> = idx.iter().map(|&i| dataset.measurements[i].channel).collect();
    prediction_snr_db(&truth, &model.predict_many(&positions)?)
}

/// NMSE of K-nearest-neighbor predictions on a split.
pub fn knn_nmse(model: &KnnModel, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let truth: Vec<ComplexValue> = idx.iter().map(|&i| dataset.measurements[i].channel).collect();
    let pred: Vec<ComplexValue> = idx.iter().map(|&i| knn_predict(model, dataset.measurements[i].position)).collect();
    nmse(&truth, &pred)
}
