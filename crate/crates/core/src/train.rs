//! Training of the coarse/fine field pair from channel measurements.
//!
//! Each iteration draws a batch of training receivers, casts one ray per
//! known arrival direction plus a few random rays, renders both networks and
//! minimizes the batch NMSE. Gradients are computed by hand: the render is
//! differentiated analytically and pushed through the networks with
//! [`FieldMlp::backward`]. The fine sample positions depend on the coarse
//! weights but are treated as constants.
//!
//! All randomness comes from counter-based streams keyed by iteration, so a
//! run resumed from a checkpoint replays exactly what an uninterrupted run
//! would have done.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ComplexValue, Measurement};
use crate::error::{domain, Error, Result};
use crate::field::{
    query_field, render_backward, render_channel, render_fine, ArchitectureConfig, Checkpoint, EncodingConfig, FieldMlp, FieldModel,
    RaySampleBatch, SamplingConfig, DEFAULT_MIN_DISTANCE,
};
use crate::geometry::{Aabb, Direction, Position, Vec3};
use crate::metrics::{nmse, snr_db};
use crate::nn::ParamSet;
use crate::raysearch::RaySearchProduct;
use crate::sim::{enumerate_images, stream_rng, Dataset, NoiseStream, SceneGeometry, Split};

pub const FIELD_KIND: &str = "field";

/// Stream offsets; iteration `i` uses stream `ITERATION_STREAMS + i`.
const INIT_STREAM: u64 = 0;
const ITERATION_STREAMS: u64 = 1 << 32;

/// Number of directions in a one-degree azimuth/elevation grid.
pub const EXHAUSTIVE_GRID_DIRECTIONS: usize = 360 * 180;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement needed to reset the plateau counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            patience: 10,
            factor: 0.9,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossMix {
    pub coarse: f64,
    pub fine: f64,
}

impl Default for LossMix {
    fn default() -> Self {
        LossMix { coarse: 0.1, fine: 0.9 }
    }
}

/// How training rays are chosen at each receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RayMode {
    /// One ray per known arrival direction plus random rays.
    DoaGuided,
    /// Every direction of an azimuth x elevation grid.
    ExhaustiveGrid { azimuth_bins: usize, elevation_bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub scheduler: SchedulerConfig,
    /// Iterations per scheduler evaluation; 0 means one pass over the training set.
    pub scheduler_interval: usize,
    pub loss_mix: LossMix,
    pub n_coarse_samples: usize,
    pub n_fine_samples: usize,
    pub t_near: f64,
    /// Far sampling bound; derived from the scene when absent.
    pub t_far: Option<f64>,
    pub min_distance: f64,
    pub n_random_rays: usize,
    pub ray_mode: RayMode,
    pub max_iterations: usize,
    pub seed: u64,
    pub encoding: EncodingConfig,
    pub architecture: ArchitectureConfig,
    /// Stop once the train-split SNR reaches this value.
    pub early_stop_snr_db: Option<f64>,
    pub eval_every: usize,
    /// Train records used for the periodic SNR check (0 = all).
    pub eval_subset: usize,
    pub checkpoint_every: usize,
    /// Per-receiver memory estimate above which training refuses to start.
    pub memory_limit_bytes: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_initial: 5e-4,
            scheduler: SchedulerConfig::default(),
            scheduler_interval: 0,
            loss_mix: LossMix::default(),
            n_coarse_samples: 128,
            n_fine_samples: 128,
            t_near: DEFAULT_MIN_DISTANCE,
            t_far: None,
            min_distance: DEFAULT_MIN_DISTANCE,
            n_random_rays: 5,
            ray_mode: RayMode::DoaGuided,
            max_iterations: 100_000,
            seed: 0,
            encoding: EncodingConfig::default(),
            architecture: ArchitectureConfig::default(),
            early_stop_snr_db: None,
            eval_every: 100,
            eval_subset: 64,
            checkpoint_every: 1000,
            memory_limit_bytes: 2 << 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_coarse_samples == 0 || self.n_fine_samples == 0 || self.max_iterations == 0 {
            return domain("batch size, sample counts and iteration count must be at least 1");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return domain("initial learning rate must be positive");
        }
        let mix = self.loss_mix;
        if mix.coarse < 0.0 || mix.fine < 0.0 || (mix.coarse + mix.fine - 1.0).abs() > 1e-12 {
            return domain("loss mix weights must be non-negative and sum to 1");
        }
        let s = self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || s.threshold < 0.0 || !(s.min_lr > 0.0) {
            return domain("invalid scheduler settings");
        }
        if let RayMode::ExhaustiveGrid {
            azimuth_bins,
            elevation_bins,
        } = self.ray_mode
        {
            if azimuth_bins == 0 || elevation_bins == 0 {
                return domain("direction grid needs at least one bin per axis");
            }
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return domain("evaluation and checkpoint intervals must be at least 1");
        }
        self.encoding.validate()?;
        self.architecture.validate()
    }

    pub fn sampling(&self, scene: &SceneGeometry, max_order: usize) -> Result<SamplingConfig> {
        let s = SamplingConfig {
            t_near: self.t_near,
            t_far: self.t_far.unwrap_or_else(|| auto_t_far(scene, max_order)),
            n_coarse: self.n_coarse_samples,
            n_fine: self.n_fine_samples,
            min_distance: self.min_distance,
        };
        s.validate()?;
        Ok(s)
    }

    /// Rays cast per receiver, using `doas` as the typical DoA count.
    pub fn rays_per_receiver(&self, doas: usize) -> usize {
        match self.ray_mode {
            RayMode::DoaGuided => doas + self.n_random_rays,
            RayMode::ExhaustiveGrid {
                azimuth_bins,
                elevation_bins,
            } => azimuth_bins * elevation_bins + self.n_random_rays,
        }
    }

    /// Bytes of activations kept for the backward pass of one receiver.
    pub fn memory_estimate(&self, doas: usize) -> u64 {
        let arch = self.architecture;
        let floats_per_sample = self.encoding.position_len() * 2
            + self.encoding.direction_len() * 2
            + arch.trunk_layers * arch.trunk_width * 2
            + arch.head_width * 2
            + 6;
        let samples = self.n_coarse_samples.max(self.n_coarse_samples + self.n_fine_samples);
        (self.rays_per_receiver(doas) as u64) * (samples as u64) * (floats_per_sample as u64) * 4
    }
}

/// Largest distance from the scene box to any image source up to `max_order`, with 2% margin.
pub fn auto_t_far(scene: &SceneGeometry, max_order: usize) -> f64 {
    let b = scene.bounding_box();
    let corners: Vec<Vec3> = (0..8)
        .map(|c| {
            Vec3::new(
                if c & 1 == 0 { b.min.x } else { b.max.x },
                if c & 2 == 0 { b.min.y } else { b.max.y },
                if c & 4 == 0 { b.min.z } else { b.max.z },
            )
        })
        .collect();
    let far = enumerate_images(scene, max_order)
        .iter()
        .flat_map(|im| corners.iter().map(move |c| c.distance(im.position)))
        .fold(b.extent().norm(), f64::max);
    far * 1.02
}

/// Box used to normalize sample positions: the scene box grown by `t_far`.
pub fn normalization_box(scene: &SceneGeometry, t_far: f64) -> Aabb {
    scene.bounding_box().expanded(t_far)
}

/// Adam moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &impl ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut impl ParamSet<f32>, grads: &impl ParamSet<f32>, lr: f64) -> Result<()> {
        let g = grads.tensors();
        if g.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                iteration: self.step as usize,
                what: "gradient".into(),
            });
        }
        let mut p = params.tensors_mut();
        if p.len() != g.len() || p.len() != self.m.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("optimizer, parameter and gradient shapes differ".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in p.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = f64::from(g[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after more than `patience` evaluations without improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_evaluations: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: None,
            bad_evaluations: 0,
            reductions: 0,
        }
    }

    /// Records one evaluation; returns true when the rate was reduced.
    pub fn step(&mut self, loss: f64) -> Result<bool> {
        if !loss.is_finite() {
            return domain("scheduler metric must be finite");
        }
        let improved = match self.best {
            None => true,
            Some(b) => loss < b * (1.0 - self.config.threshold),
        };
        if improved {
            self.best = Some(loss);
            self.bad_evaluations = 0;
            return Ok(false);
        }
        self.bad_evaluations += 1;
        if self.bad_evaluations > self.config.patience {
            self.bad_evaluations = 0;
            let next = (self.lr * self.config.factor).max(self.config.min_lr);
            if next < self.lr {
                self.lr = next;
                self.reductions += 1;
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Optimizer and bookkeeping state carried in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub coarse_optimizer: AdamState,
    pub fine_optimizer: AdamState,
    pub scheduler: PlateauScheduler,
    pub interval_loss_sum: f64,
    pub interval_count: usize,
    pub best_interval_loss: Option<f64>,
    pub history: Vec<IterationRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub coarse_loss: f64,
    pub fine_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub train_snr_db: f64,
}

/// Training log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub coarse_loss: f64,
    pub fine_loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: Vec<IterationRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub final_train_snr_db: f64,
    pub final_test_snr_db: Option<f64>,
    pub stopped_early: bool,
    /// Wall-clock seconds per iteration of this process; not part of the deterministic content.
    #[serde(default)]
    pub elapsed_s: Vec<f64>,
}

impl TrainReport {
    /// The report without timings, for byte comparisons between runs.
    pub fn deterministic(&self) -> TrainReport {
        TrainReport {
            elapsed_s: Vec::new(),
            ..self.clone()
        }
    }
}

pub type FieldCheckpoint = Checkpoint<FieldModel, TrainState>;

/// Optional side channels of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `train_log.jsonl`, `checkpoint.json` and `best.json`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<FieldCheckpoint>,
    /// Per-iteration re-noising of the training channels.
    pub noise: Option<&'a NoiseStream>,
    /// Print a progress line to stderr every this many iterations (0 = never).
    pub progress_every: usize,
}

pub struct TrainOutcome {
    pub checkpoint: FieldCheckpoint,
    pub report: TrainReport,
}

/// One ray per arrival direction plus `n_random` uniformly random directions.
pub fn cast_ray_directions(doas: &[Direction], n_random: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    if doas.is_empty() {
        return domain("measurement has no arrival directions");
    }
    let mut dirs: Vec<Vec3> = doas.iter().map(|d| d.to_unit()).collect();
    dirs.extend((0..n_random).map(|_| random_unit(rng)));
    Ok(dirs)
}

/// Uniform direction on the sphere.
pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn grid_directions(azimuth_bins: usize, elevation_bins: usize) -> Vec<Vec3> {
    let mut dirs = Vec::with_capacity(azimuth_bins * elevation_bins);
    for e in 0..elevation_bins {
        let el = -PI / 2.0 + (e as f64 + 0.5) * PI / elevation_bins as f64;
        for a in 0..azimuth_bins {
            let az = -PI + (a as f64 + 0.5) * 2.0 * PI / azimuth_bins as f64;
            dirs.push(Direction::new(az, el).to_unit());
        }
    }
    dirs
}

/// Training rays for one receiver with stratified coarse depths.
pub fn cast_training_rays(
    measurement: &Measurement,
    config: &TrainConfig,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<RaySampleBatch> {
    let dirs = match config.ray_mode {
        RayMode::DoaGuided => cast_ray_directions(&measurement.doas, config.n_random_rays, rng)?,
        RayMode::ExhaustiveGrid {
            azimuth_bins,
            elevation_bins,
        } => {
            let mut d = grid_directions(azimuth_bins, elevation_bins);
            d.extend((0..config.n_random_rays).map(|_| random_unit(rng)));
            d
        }
    };
    sampling.coarse_batch(measurement.position, &dirs, Some(rng))
}

/// `coarse * nmse(truth, coarse_preds) + fine * nmse(truth, fine_preds)`.
pub fn composite_loss(truth: &[ComplexValue], coarse: &[ComplexValue], fine: &[ComplexValue], mix: LossMix) -> Result<f64> {
    Ok(mix.coarse * nmse(truth, coarse)? + mix.fine * nmse(truth, fine)?)
}

/// Per-iteration quantities of one receiver.
struct ReceiverPass {
    coarse: ComplexValue,
    fine: ComplexValue,
}

/// Gradients of both networks for one batch.
pub struct BatchGradients {
    pub coarse: FieldMlp<f32>,
    pub fine: FieldMlp<f32>,
    pub coarse_loss: f64,
    pub fine_loss: f64,
}

/// Forward and backward pass of one receiver with the loss normalizer `norm`
/// (the batch's total channel power). Gradients are accumulated.
#[allow(clippy::too_many_arguments)]
fn receiver_pass(
    model: &FieldModel,
    coarse_rays: &RaySampleBatch,
    sampling: &SamplingConfig,
    truth: ComplexValue,
    f: f64,
    norm: f64,
    mix: LossMix,
    grads: &mut BatchGradients,
    rng: &mut impl Rng,
) -> Result<ReceiverPass> {
    let enc = &model.encoding;
    let nb = &model.normalization;
    let c_cache = query_field(&model.coarse, enc, nb, coarse_rays)?;
    let c_out = c_cache.outputs();
    let c_render = render_channel(coarse_rays, &c_out, f, sampling.min_distance)?;
    let e = c_render.channel - truth;
    let scale = 2.0 * mix.coarse / norm;
    let g = render_backward(coarse_rays, &c_out, f, sampling.min_distance, scale * e.re, scale * e.im)?;
    model.coarse.backward(&c_cache, &g, &mut grads.coarse);
    drop(c_cache);

    let fine_rays = sampling.fine_batch(coarse_rays, &c_render.weights, Some(rng))?;
    let f_cache = query_field(&model.fine, enc, nb, &fine_rays)?;
    let f_out = f_cache.outputs();
    let f_render = render_channel(&fine_rays, &f_out, f, sampling.min_distance)?;
    let e = f_render.channel - truth;
    let scale = 2.0 * mix.fine / norm;
    let g = render_backward(&fine_rays, &f_out, f, sampling.min_distance, scale * e.re, scale * e.im)?;
    model.fine.backward(&f_cache, &g, &mut grads.fine);
    Ok(ReceiverPass {
        coarse: c_render.channel,
        fine: f_render.channel,
    })
}

/// Loss and gradients for a fixed set of coarse rays per receiver.
///
/// `rays[i]` belongs to the receiver with channel `truth[i]`; `rng` drives the
/// hierarchical resampling.
pub fn batch_gradients(
    model: &FieldModel,
    sampling: &SamplingConfig,
    rays: &[RaySampleBatch],
    truth: &[ComplexValue],
    f: f64,
    mix: LossMix,
    rng: &mut impl Rng,
) -> Result<BatchGradients> {
    if rays.len() != truth.len() || rays.is_empty() {
        return Err(Error::Shape("one ray set per truth value required".into()));
    }
    let norm: f64 = truth.iter().map(|h| h.norm_sqr()).sum();
    if !(norm > 0.0) {
        return domain("batch channel power is zero");
    }
    let mut grads = BatchGradients {
        coarse: model.coarse.zeros_like(),
        fine: model.fine.zeros_like(),
        coarse_loss: 0.0,
        fine_loss: 0.0,
    };
    let mut c_err = 0.0;
    let mut f_err = 0.0;
    for (r, &h) in rays.iter().zip(truth) {
        let pass = receiver_pass(model, r, sampling, h, f, norm, mix, &mut grads, rng)?;
        c_err += (pass.coarse - h).norm_sqr();
        f_err += (pass.fine - h).norm_sqr();
    }
    grads.coarse_loss = c_err / norm;
    grads.fine_loss = f_err / norm;
    Ok(grads)
}

fn iteration_rng(seed: u64, iteration: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, ITERATION_STREAMS + iteration as u64)
}

/// Fresh model for a dataset under a config.
pub fn init_model(dataset: &Dataset, config: &TrainConfig) -> Result<(FieldModel, SamplingConfig)> {
    config.validate()?;
    let sampling = config.sampling(&dataset.scene, dataset.max_order)?;
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    let model = FieldModel::new(
        config.encoding,
        config.architecture,
        normalization_box(&dataset.scene, sampling.t_far),
        &mut rng,
    )?;
    Ok((model, sampling))
}

fn check_guard(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    let doas = dataset
        .train_indices()
        .iter()
        .map(|&i| dataset.measurements[i].doas.len())
        .max()
        .unwrap_or(0);
    let bytes = config.memory_estimate(doas);
    if bytes > config.memory_limit_bytes {
        return Err(Error::ResourceGuard(format!(
            "{} rays per receiver need about {:.1} GiB of activations (limit {:.1} GiB); \
             use arrival-direction guided rays instead of a direction grid",
            config.rays_per_receiver(doas),
            bytes as f64 / (1u64 << 30) as f64,
            config.memory_limit_bytes as f64 / (1u64 << 30) as f64
        )));
    }
    Ok(())
}

/// Trains the coarse and fine networks on the training split.
pub fn train(dataset: &Dataset, config: &TrainConfig, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        return domain("training split is empty");
    }
    if let Some(i) = train_idx.iter().find(|&&i| dataset.measurements[i].doas.is_empty()) {
        return domain(format!("training record {i} has no arrival directions"));
    }
    check_guard(dataset, config)?;
    let (fresh, sampling) = init_model(dataset, config)?;
    let f = dataset.frequency.carrier_hz;
    let interval = if config.scheduler_interval == 0 {
        train_idx.len().div_ceil(config.batch_size)
    } else {
        config.scheduler_interval
    };
    let batch = config.batch_size.min(train_idx.len());

    let (mut model, mut state) = match options.resume {
        Some(ck) => {
            ck.model.validate()?;
            let state = ck
                .state
                .ok_or_else(|| Error::InvalidModel("checkpoint carries no training state".into()))?;
            (ck.model, state)
        }
        None => {
            let state = TrainState {
                iteration: 0,
                coarse_optimizer: AdamState::new(&fresh.coarse),
                fine_optimizer: AdamState::new(&fresh.fine),
                scheduler: PlateauScheduler::new(config.lr_initial, config.scheduler),
                interval_loss_sum: 0.0,
                interval_count: 0,
                best_interval_loss: None,
                history: Vec::new(),
                evaluations: Vec::new(),
                stopped_early: false,
            };
            (fresh, state)
        }
    };

    let mut log = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.jsonl");
            // keep the lines of iterations already done when resuming
            let kept = if state.iteration > 0 && path.exists() {
                std::fs::read_to_string(&path)?
                    .lines()
                    .take(state.iteration)
                    .map(|l| format!("{l}\n"))
                    .collect::<String>()
            } else {
                String::new()
            };
            std::fs::write(&path, kept)?;
            Some(std::fs::OpenOptions::new().append(true).open(path)?)
        }
        None => None,
    };

    let start = Instant::now();
    let mut elapsed = Vec::new();
    let eval_idx: Vec<usize> = if config.eval_subset == 0 {
        train_idx.clone()
    } else {
        train_idx.iter().copied().take(config.eval_subset).collect()
    };
    let metadata = |state: &TrainState| {
        serde_json::json!({
            "iteration": state.iteration,
            "seed": config.seed,
            "dataset_seed": dataset.seed,
            "config": config,
            "sampling": sampling,
            "scene_box": dataset.scene.bounding_box(),
        })
    };

    while state.iteration < config.max_iterations && !state.stopped_early {
        let it = state.iteration + 1;
        let mut rng = iteration_rng(config.seed, it);
        let channels: Option<Vec<ComplexValue>> = options.noise.map(|n| n.draw(it as u64));
        let picks = pick_batch(&train_idx, batch, &mut rng);
        let mut rays = Vec::with_capacity(picks.len());
        let mut truth = Vec::with_capacity(picks.len());
        for &i in &picks {
            let m = &dataset.measurements[i];
            rays.push(cast_training_rays(m, config, &sampling, &mut rng)?);
            truth.push(channels.as_ref().map_or(m.channel, |c| c[i]));
        }
        let grads = batch_gradients(&model, &sampling, &rays, &truth, f, config.loss_mix, &mut rng)?;
        let loss = config.loss_mix.coarse * grads.coarse_loss + config.loss_mix.fine * grads.fine_loss;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                what: "loss".into(),
            });
        }
        if loss > 1e6 {
            return Err(Error::Divergence { iteration: it, loss });
        }
        let lr = state.scheduler.lr;
        state
            .coarse_optimizer
            .step(&mut model.coarse, &grads.coarse, lr)
            .map_err(|e| at_iteration(e, it))?;
        state
            .fine_optimizer
            .step(&mut model.fine, &grads.fine, lr)
            .map_err(|e| at_iteration(e, it))?;
        let record = IterationRecord {
            iter: it,
            coarse_loss: grads.coarse_loss,
            fine_loss: grads.fine_loss,
            lr,
        };
        state.history.push(record);
        state.iteration = it;

        state.interval_loss_sum += loss;
        state.interval_count += 1;
        let mut improved = false;
        if state.interval_count == interval {
            let mean = state.interval_loss_sum / interval as f64;
            state.scheduler.step(mean)?;
            if state.best_interval_loss.is_none_or(|b| mean < b) {
                state.best_interval_loss = Some(mean);
                improved = true;
            }
            state.interval_loss_sum = 0.0;
            state.interval_count = 0;
        }
        if it % config.eval_every == 0 || it == config.max_iterations {
            let snr = split_snr(&model, &sampling, dataset, &eval_idx, f)?;
            state.evaluations.push(EvalRecord {
                iter: it,
                train_snr_db: snr,
            });
            if config.early_stop_snr_db.is_some_and(|t| snr >= t) {
                state.stopped_early = true;
            }
        }

        let t = start.elapsed().as_secs_f64();
        elapsed.push(t);
        if let Some(log) = log.as_mut() {
            let line = LogRecord {
                iter: it,
                coarse_loss: record.coarse_loss,
                fine_loss: record.fine_loss,
                lr,
                elapsed_s: t,
            };
            serde_json::to_writer(&mut *log, &line)?;
            log.write_all(b"\n")?;
        }
        if options.progress_every > 0 && it % options.progress_every == 0 {
            let snr = state.evaluations.last().map_or(f64::NAN, |e| e.train_snr_db);
            eprintln!(
                "iter {it:6}  coarse {:.4}  fine {:.4}  lr {lr:.2e}  train-snr {snr:.2} dB  {t:.0}s",
                record.coarse_loss, record.fine_loss
            );
        }
        if let Some(dir) = &options.out_dir {
            let periodic = it % config.checkpoint_every == 0 || state.stopped_early || it == config.max_iterations;
            if periodic || improved {
                let ck = Checkpoint::new(FIELD_KIND, dataset.frequency, model.clone(), Some(state.clone()), metadata(&state));
                if periodic {
                    ck.save(&dir.join("checkpoint.json"))?;
                }
                if improved {
                    ck.save(&dir.join("best.json"))?;
                }
            }
        }
    }

    let all_train = split_snr(&model, &sampling, dataset, &train_idx, f)?;
    let test_idx = dataset.test_indices();
    let final_test = if test_idx.is_empty() {
        None
    } else {
        Some(split_snr(&model, &sampling, dataset, &test_idx, f)?)
    };
    let report = TrainReport {
        iterations: state.history.clone(),
        evaluations: state.evaluations.clone(),
        final_train_snr_db: all_train,
        final_test_snr_db: final_test,
        stopped_early: state.stopped_early,
        elapsed_s: elapsed,
    };
    let checkpoint = Checkpoint::new(FIELD_KIND, dataset.frequency, model, Some(state.clone()), metadata(&state));
    Ok(TrainOutcome { checkpoint, report })
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { iteration, what },
        other => other,
    }
}

/// `k` distinct indices by partial Fisher-Yates.
pub(crate) fn pick_batch(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v = pool.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..v.len());
        v.swap(i, j);
    }
    v.truncate(k);
    v
}

/// SNR of fine-model renders with ground-truth directions over `indices`.
pub fn split_snr(model: &FieldModel, sampling: &SamplingConfig, dataset: &Dataset, indices: &[usize], f: f64) -> Result<f64> {
    let mut truth = Vec::with_capacity(indices.len());
    let mut pred = Vec::with_capacity(indices.len());
    for &i in indices {
        let m = &dataset.measurements[i];
        let dirs: Vec<Vec3> = m.doas.iter().map(|d| d.to_unit()).collect();
        pred.push(render_fine(model, sampling, m.position, &dirs, f)?.channel);
        truth.push(m.channel);
    }
    Ok(display_snr(nmse(&truth, &pred)?))
}

/// SNR in dB with `+inf` for an exact match.
pub fn display_snr(nmse_value: f64) -> f64 {
    if nmse_value == 0.0 {
        f64::INFINITY
    } else {
        snr_db(nmse_value).unwrap_or(f64::NAN)
    }
}

/// Where evaluation takes arrival directions from.
#[derive(Clone, Copy)]
pub enum DoaSource<'a> {
    GroundTruth,
    RaySearch(Option<&'a RaySearchProduct>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationPrediction {
    pub index: usize,
    pub position: Position,
    pub truth: ComplexValue,
    pub predicted: ComplexValue,
    /// Rendered contribution of each ray, in direction order.
    pub path_components: Vec<ComplexValue>,
    pub directions: Vec<Direction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub frequency_hz: f64,
    pub nmse: f64,
    pub snr_db: f64,
    pub predictions: Vec<LocationPrediction>,
}

/// Renders every record of `split` with the fine model and scores it.
///
/// `truth_override` replaces the dataset channels (used for other frequencies).
pub fn evaluate(
    model: &FieldModel,
    sampling: &SamplingConfig,
    dataset: &Dataset,
    split: Split,
    doa_source: DoaSource<'_>,
    frequencies: &[f64],
    truth_override: Option<&dyn Fn(usize, f64) -> Result<ComplexValue>>,
) -> Result<Vec<EvalReport>> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return domain(format!("{split:?} split is empty"));
    }
    let product = match doa_source {
        DoaSource::GroundTruth => None,
        DoaSource::RaySearch(Some(p)) => Some(p),
        DoaSource::RaySearch(None) => {
            return Err(Error::MissingProduct(
                "ray-search product required for predicted arrival directions".into(),
            ))
        }
    };
    let mut reports: Vec<EvalReport> = frequencies
        .iter()
        .map(|&f| EvalReport {
            split,
            frequency_hz: f,
            nmse: 0.0,
            snr_db: 0.0,
            predictions: Vec::with_capacity(idx.len()),
        })
        .collect();
    for &i in &idx {
        let m = &dataset.measurements[i];
        let directions = match product {
            None => m.doas.clone(),
            Some(p) => p.predict_doas(m.position)?.directions,
        };
        let units: Vec<Vec3> = directions.iter().map(|d| d.to_unit()).collect();
        let renders = if units.is_empty() {
            None
        } else {
            Some(crate::field::render_fine_multi(model, sampling, m.position, &units, frequencies)?)
        };
        for (k, rep) in reports.iter_mut().enumerate() {
            let f = frequencies[k];
            let truth = match truth_override {
                Some(t) => t(i, f)?,
                None => m.channel,
            };
            let (predicted, path_components) = match &renders {
                Some(r) => (r[k].channel, r[k].per_ray.clone()),
                None => (ComplexValue::new(0.0, 0.0), Vec::new()),
            };
            rep.predictions.push(LocationPrediction {
                index: i,
                position: m.position,
                truth,
                predicted,
                path_components,
                directions: directions.clone(),
            });
        }
    }
    for rep in &mut reports {
        let t: Vec<ComplexValue> = rep.predictions.iter().map(|p| p.truth).collect();
        let p: Vec<ComplexValue> = rep.predictions.iter().map(|p| p.predicted).collect();
        rep.nmse = nmse(&t, &p)?;
        rep.snr_db = display_snr(rep.nmse);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::FrequencyConfig;
    use crate::sim::{generate_dataset, Material};
    use approx::assert_relative_eq;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            n_coarse_samples: 8,
            n_fine_samples: 8,
            max_iterations: 6,
            eval_every: 3,
            eval_subset: 4,
            checkpoint_every: 2,
            architecture: ArchitectureConfig {
                trunk_layers: 3,
                trunk_width: 16,
                skip_after: 2,
                head_width: 8,
            },
            encoding: EncodingConfig {
                spatial_frequencies: 3,
                direction_frequencies: 2,
                include_identity: true,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let scene = SceneGeometry::shoebox(Vec3::new(3.0, 2.5, 2.0), Vec3::new(1.1, 0.9, 1.3), Material::PerfectReflector).unwrap();
        generate_dataset(&scene, 24, FrequencyConfig::carrier(2.412e9).unwrap(), 1, 3, 0.75).unwrap()
    }

    #[test]
    fn ray_counts_and_determinism() {
        let doas: Vec<Direction> = (0..12).map(|i| Direction::new(0.1 * i as f64, 0.0)).collect();
        let a = cast_ray_directions(&doas, 5, &mut stream_rng(1, 2)).unwrap();
        let b = cast_ray_directions(&doas, 5, &mut stream_rng(1, 2)).unwrap();
        assert_eq!(a.len(), 17);
        assert_eq!(a, b);
        assert!(cast_ray_directions(&[], 5, &mut stream_rng(1, 2)).is_err());
    }

    #[test]
    fn random_directions_are_isotropic() {
        let mut rng = stream_rng(3, 0);
        let mut mean = Vec3::new(0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let u = random_unit(&mut rng);
            assert!((u.norm() - 1.0).abs() < 1e-12);
            mean += u;
        }
        assert!((mean / 10_000.0).norm() < 0.05);
    }

    #[test]
    fn composite_loss_examples() {
        let t = [ComplexValue::new(1.0, 0.0)];
        let mix = LossMix::default();
        assert_eq!(composite_loss(&t, &t, &t, mix).unwrap(), 0.0);
        assert_relative_eq!(
            composite_loss(&t, &t, &[ComplexValue::new(0.0, 0.0)], mix).unwrap(),
            0.9,
            epsilon = 1e-15
        );
        let c = [ComplexValue::new(1.0 + 0.2f64.sqrt(), 0.0)];
        let fi = [ComplexValue::new(1.0 + 0.1f64.sqrt(), 0.0)];
        assert_relative_eq!(composite_loss(&t, &c, &fi, mix).unwrap(), 0.11, epsilon = 1e-12);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut rng = stream_rng(4, 0);
        let mut p = crate::nn::Linear::<f32>::init(3, 2, &mut rng);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero = p.zeros_like();
        st.step(&mut p, &zero, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        let mut st = AdamState::new(&p);
        let mut g = p.zeros_like();
        for (i, v) in g.weight.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.3 } else { -2.0 };
        }
        st.step(&mut p, &g, 1e-3).unwrap();
        for i in 0..6 {
            let d = f64::from(p.weight[i]) - f64::from(before.weight[i]);
            let expect = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!((d - expect).abs() < 1e-6, "{d}");
        }
        g.weight[0] = f32::NAN;
        assert!(matches!(st.step(&mut p, &g, 1e-3), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn scheduler_examples() {
        let mut s = PlateauScheduler::new(5e-4, SchedulerConfig::default());
        for i in 0..50 {
            assert!(!s.step(1.0 / (i + 1) as f64).unwrap());
        }
        assert_eq!(s.lr, 5e-4);
        let mut s = PlateauScheduler::new(5e-4, SchedulerConfig::default());
        s.step(1.0).unwrap();
        let reduced: usize = (0..11).map(|_| s.step(1.0).unwrap() as usize).sum();
        assert_eq!(reduced, 1);
        assert_relative_eq!(s.lr, 4.5e-4, epsilon = 1e-18);
        let mut s = PlateauScheduler::new(2e-6, SchedulerConfig::default());
        for _ in 0..1000 {
            s.step(1.0).unwrap();
        }
        assert_eq!(s.lr, 1e-6);
        assert!(s.step(f64::NAN).is_err());
    }

    #[test]
    fn exhaustive_grid_is_rejected() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            ray_mode: RayMode::ExhaustiveGrid {
                azimuth_bins: 360,
                elevation_bins: 180,
            },
            n_coarse_samples: 64,
            n_fine_samples: 64,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.rays_per_receiver(0), EXHAUSTIVE_GRID_DIRECTIONS + 5);
        assert!(matches!(train(&ds, &cfg, TrainOptions::default()), Err(Error::ResourceGuard(_))));
        let guided = TrainConfig {
            n_coarse_samples: 64,
            n_fine_samples: 64,
            ..TrainConfig::default()
        };
        assert!(check_guard(&ds, &guided).is_ok());
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let (mut model, sampling) = init_model(&ds, &cfg).unwrap();
        model.coarse = model.coarse.zeros_like();
        model.fine = model.fine.zeros_like();
        let m = &ds.measurements[0];
        let rays = vec![cast_training_rays(m, &cfg, &sampling, &mut stream_rng(5, 0)).unwrap()];
        // the zero network renders exactly zero, so a zero target gives zero loss
        let mut truth = vec![ComplexValue::new(0.0, 0.0)];
        assert!(batch_gradients(&model, &sampling, &rays, &truth, 2.4e9, LossMix::default(), &mut stream_rng(5, 1)).is_err());
        truth[0] = m.channel;
        let g = batch_gradients(&model, &sampling, &rays, &truth, 2.4e9, LossMix::default(), &mut stream_rng(5, 1)).unwrap();
        assert_relative_eq!(g.fine_loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn opaque_start_blocks_density_gradients() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let (mut model, sampling) = init_model(&ds, &cfg).unwrap();
        // huge positive density bias: the first sample of every ray is opaque
        for m in [&mut model.coarse, &mut model.fine] {
            m.output.bias[2] = 1e6;
        }
        let m = &ds.measurements[0];
        let rays = vec![cast_training_rays(m, &cfg, &sampling, &mut stream_rng(6, 0)).unwrap()];
        let g = batch_gradients(
            &model,
            &sampling,
            &rays,
            &[m.channel],
            ds.frequency.carrier_hz,
            LossMix::default(),
            &mut stream_rng(6, 1),
        )
        .unwrap();
        let out = rays[0].samples_per_ray;
        assert!(out > 1);
        // every sample after the first has T = 0, so sigma only matters through the first sample
        let c_out = query_field(&model.coarse, &model.encoding, &model.normalization, &rays[0])
            .unwrap()
            .outputs();
        let grads = render_backward(&rays[0], &c_out, ds.frequency.carrier_hz, sampling.min_distance, 1.0, 1.0).unwrap();
        for r in 0..rays[0].rays() {
            for s in 1..out {
                assert_eq!(grads[r * out + s][2], 0.0);
            }
        }
        assert!(g.coarse.all_finite() && g.fine.all_finite());
    }

    #[test]
    fn resume_reproduces_the_trace() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let full = train(
            &ds,
            &cfg,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(full.report.iterations.len(), 6);
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);

        let short = TrainConfig {
            max_iterations: 4,
            ..cfg.clone()
        };
        let dir2 = tempfile::tempdir().unwrap();
        let opts = || TrainOptions {
            out_dir: Some(dir2.path().to_path_buf()),
            ..Default::default()
        };
        train(&ds, &short, opts()).unwrap();
        let ck = FieldCheckpoint::load(&dir2.path().join("checkpoint.json"), FIELD_KIND).unwrap();
        assert_eq!(ck.state.as_ref().unwrap().iteration, 4);
        let resumed = train(
            &ds,
            &cfg,
            TrainOptions {
                resume: Some(ck),
                ..opts()
            },
        )
        .unwrap();
        assert_eq!(resumed.report.iterations, full.report.iterations);
        assert_eq!(resumed.checkpoint.model, full.checkpoint.model);
        let log = std::fs::read_to_string(dir2.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let a = train(&ds, &cfg, TrainOptions::default()).unwrap();
        let b = train(&ds, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.report.deterministic(), b.report.deterministic());
    }

    #[test]
    fn auto_far_bound_covers_images() {
        let scene = SceneGeometry::conference_room(Material::PerfectReflector).unwrap();
        let t = auto_t_far(&scene, 2);
        assert!(t > 10.0 && t < 25.0, "{t}");
        assert!(auto_t_far(&scene, 0) >= scene.bounding_box().extent().norm());
    }
}
