//! The radiation field: encoding, network, ray sampling and complex volume rendering.
//!
//! A field maps a position and a viewing direction to an in-phase/quadrature
//! radiation value and a volume density. A channel is rendered by marching
//! rays out from the receiver, weighting every sample by its transmittance
//! and opacity, and propagating its radiation back to the receiver with the
//! free-space gain of the sample depth.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{free_space_gain_unchecked, ComplexValue, FrequencyConfig};
use crate::error::{domain, Error, Result};
use crate::geometry::{Aabb, Position, Vec3};
use crate::nn::{concat_cols, relu_backward_inplace, relu_inplace, split_cols, Linear, ParamSet, Real};

/// Samples closer to the receiver than this are dropped from the render sum.
pub const DEFAULT_MIN_DISTANCE: f64 = 0.1;

/// Added to every coarse weight before building the resampling PDF.
pub const PDF_FLOOR: f64 = 1e-5;

pub const CHECKPOINT_FORMAT: &str = "radfield-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub spatial_frequencies: usize,
    pub direction_frequencies: usize,
    pub include_identity: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            spatial_frequencies: 10,
            direction_frequencies: 4,
            include_identity: true,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_frequencies == 0 || self.direction_frequencies == 0 {
            return domain("encoding frequency counts must be at least 1");
        }
        Ok(())
    }

    pub fn encoded_len(&self, dim: usize, n: usize) -> usize {
        dim * 2 * n + if self.include_identity { dim } else { 0 }
    }

    pub fn position_len(&self) -> usize {
        self.encoded_len(3, self.spatial_frequencies)
    }

    /// Directions are encoded as unit 3-vectors.
    pub fn direction_len(&self) -> usize {
        self.encoded_len(3, self.direction_frequencies)
    }
}

/// `[v, sin(2^k pi v), cos(2^k pi v) for k in 0..n]`, the identity block first when enabled.
pub fn positional_encode(value: &[f64], n_frequencies: usize, include_identity: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(value.len() * (2 * n_frequencies + 1));
    encode_into(value, n_frequencies, include_identity, &mut out);
    out
}

pub(crate) fn encode_into<F: Real>(value: &[f64], n: usize, include_identity: bool, out: &mut Vec<F>) {
    if include_identity {
        out.extend(value.iter().map(|&v| F::from_f64(v)));
    }
    let mut scale = PI;
    for _ in 0..n {
        for &v in value {
            let (s, c) = (scale * v).sin_cos();
            out.push(F::from_f64(s));
            out.push(F::from_f64(c));
        }
        scale *= 2.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub trunk_layers: usize,
    pub trunk_width: usize,
    /// The encoded position is concatenated to the output of this many trunk layers.
    pub skip_after: usize,
    pub head_width: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            trunk_layers: 7,
            trunk_width: 128,
            skip_after: 4,
            head_width: 64,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_layers == 0 || self.trunk_width == 0 || self.head_width == 0 {
            return domain("network layer counts and widths must be at least 1");
        }
        if self.skip_after >= self.trunk_layers {
            return domain("skip connection must feed an existing trunk layer");
        }
        Ok(())
    }
}

/// Density (1/m) of a freshly initialized field at every point.
pub const INITIAL_DENSITY: f64 = 0.05;

/// One field network: a ReLU trunk with a single input skip, then a
/// direction-conditioned head producing `(I, Q, sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FieldMlp<F: Real> {
    pub position_inputs: usize,
    pub direction_inputs: usize,
    pub skip_after: usize,
    pub trunk: Vec<Linear<F>>,
    pub head: Linear<F>,
    pub output: Linear<F>,
}

/// Per-sample network output.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldOutput {
    pub i_component: f64,
    pub q_component: f64,
    pub density: f64,
}

/// Everything the backward pass of [`FieldMlp`] needs.
pub struct FieldCache<F: Real> {
    rows: usize,
    trunk_inputs: Vec<Vec<F>>,
    head_input: Vec<F>,
    output_input: Vec<F>,
    activated: Vec<F>,
}

impl<F: Real> FieldCache<F> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn outputs(&self) -> Vec<FieldOutput> {
        self.activated
            .chunks_exact(3)
            .map(|o| FieldOutput {
                i_component: o[0].to_f64(),
                q_component: o[1].to_f64(),
                density: o[2].to_f64(),
            })
            .collect()
    }
}

impl<F: Real> FieldMlp<F> {
    pub fn new(encoding: &EncodingConfig, arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<Self> {
        encoding.validate()?;
        arch.validate()?;
        let p = encoding.position_len();
        let d = encoding.direction_len();
        let w = arch.trunk_width;
        let trunk = (0..arch.trunk_layers)
            .map(|i| {
                let inputs = match i {
                    0 => p,
                    i if i == arch.skip_after => w + p,
                    _ => w,
                };
                Linear::init(inputs, w, rng)
            })
            .collect();
        let head = Linear::init(w + d, arch.head_width, rng);
        let mut output = Linear::init(arch.head_width, 3, rng);
        // density starts as a uniform faint fog so its ReLU is live everywhere
        let n = arch.head_width;
        output.weight[2 * n..3 * n].fill(F::ZERO);
        output.bias[2] = F::from_f64(INITIAL_DENSITY);
        Ok(FieldMlp {
            position_inputs: p,
            direction_inputs: d,
            skip_after: arch.skip_after,
            trunk,
            head,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        FieldMlp {
            position_inputs: self.position_inputs,
            direction_inputs: self.direction_inputs,
            skip_after: self.skip_after,
            trunk: self.trunk.iter().map(Linear::zeros_like).collect(),
            head: self.head.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn cast<G: Real>(&self) -> FieldMlp<G> {
        FieldMlp {
            position_inputs: self.position_inputs,
            direction_inputs: self.direction_inputs,
            skip_after: self.skip_after,
            trunk: self.trunk.iter().map(Linear::cast).collect(),
            head: self.head.cast(),
            output: self.output.cast(),
        }
    }

    /// Checks that all layer shapes chain together.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidModel(format!("inconsistent field network: {what}")));
        let Some(first) = self.trunk.first() else {
            return bad("empty trunk");
        };
        let w = first.outputs;
        if first.inputs != self.position_inputs || self.skip_after == 0 || self.skip_after >= self.trunk.len() {
            return bad("input layer");
        }
        for (i, l) in self.trunk.iter().enumerate().skip(1) {
            let expect = if i == self.skip_after { w + self.position_inputs } else { w };
            if l.inputs != expect || l.outputs != w {
                return bad("trunk layer");
            }
        }
        if self.head.inputs != w + self.direction_inputs || self.output.inputs != self.head.outputs || self.output.outputs != 3 {
            return bad("head");
        }
        for l in self.layers() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return bad("parameter length");
            }
        }
        if !self.all_finite() {
            return Err(Error::InvalidModel("non-finite parameters".into()));
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &Linear<F>> {
        self.trunk.iter().chain([&self.head, &self.output])
    }

    /// Evaluates `rows` samples; `pos` and `dir` are encoded row-major inputs.
    pub fn forward(&self, pos: &[F], dir: &[F], rows: usize) -> Result<FieldCache<F>> {
        if pos.len() != rows * self.position_inputs || dir.len() != rows * self.direction_inputs {
            return Err(Error::Shape(format!(
                "field input sizes {}/{} do not match {rows} rows of {}/{}",
                pos.len(),
                dir.len(),
                self.position_inputs,
                self.direction_inputs
            )));
        }
        let mut trunk_inputs = Vec::with_capacity(self.trunk.len());
        let mut h = pos.to_vec();
        for (i, layer) in self.trunk.iter().enumerate() {
            if i == self.skip_after {
                h = concat_cols(&h, layer.outputs, pos, self.position_inputs, rows);
            }
            let mut y = layer.forward(&h, rows);
            relu_inplace(&mut y);
            trunk_inputs.push(std::mem::replace(&mut h, y));
        }
        let head_input = concat_cols(&h, self.head.inputs - self.direction_inputs, dir, self.direction_inputs, rows);
        let mut g = self.head.forward(&head_input, rows);
        relu_inplace(&mut g);
        let mut activated = self.output.forward(&g, rows);
        for o in activated.chunks_exact_mut(3) {
            o[0] = o[0].tanh();
            o[1] = o[1].tanh();
            if o[2] < F::ZERO {
                o[2] = F::ZERO;
            }
        }
        Ok(FieldCache {
            rows,
            trunk_inputs,
            head_input,
            output_input: g,
            activated,
        })
    }

    /// Accumulates parameter gradients given `d_out[r] = dL/d(I, Q, sigma)` per row.
    pub fn backward(&self, cache: &FieldCache<F>, d_out: &[[f64; 3]], grad: &mut FieldMlp<F>) {
        let rows = cache.rows;
        let mut d = Vec::with_capacity(rows * 3);
        for (g, y) in d_out.iter().zip(cache.activated.chunks_exact(3)) {
            d.push(F::from_f64(g[0]) * (F::ONE - y[0] * y[0]));
            d.push(F::from_f64(g[1]) * (F::ONE - y[1] * y[1]));
            d.push(if y[2] > F::ZERO { F::from_f64(g[2]) } else { F::ZERO });
        }
        let mut d = self
            .output
            .backward(&cache.output_input, &d, rows, &mut grad.output, true)
            .expect("dx requested");
        relu_backward_inplace(&mut d, &cache.output_input);
        let d_head = self
            .head
            .backward(&cache.head_input, &d, rows, &mut grad.head, true)
            .expect("dx requested");
        let w = self.head.inputs - self.direction_inputs;
        let (mut d, _) = split_cols(&d_head, w, self.direction_inputs, rows);
        for i in (0..self.trunk.len()).rev() {
            // d is w.r.t. the ReLU output of trunk layer i
            let out = if i + 1 < self.trunk.len() {
                &cache.trunk_inputs[i + 1]
            } else {
                &cache.head_input
            };
            relu_backward_trunk(&mut d, out, w, rows);
            let x = &cache.trunk_inputs[i];
            let Some(dx) = self.trunk[i].backward(x, &d, rows, &mut grad.trunk[i], i > 0) else {
                break;
            };
            d = if i == self.skip_after {
                split_cols(&dx, w, self.position_inputs, rows).0
            } else {
                dx
            };
        }
    }
}

/// ReLU mask for the output of a trunk layer; `stored` may carry extra concatenated columns.
fn relu_backward_trunk<F: Real>(d: &mut [F], stored: &[F], w: usize, rows: usize) {
    let stride = stored.len() / rows;
    if stride == w {
        relu_backward_inplace(d, stored);
        return;
    }
    for r in 0..rows {
        relu_backward_inplace(&mut d[r * w..(r + 1) * w], &stored[r * stride..r * stride + w]);
    }
}

impl<F: Real> ParamSet<F> for FieldMlp<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut t: Vec<&[F]> = self.trunk.iter().flat_map(|l| l.tensors()).collect();
        t.extend(self.head.tensors());
        t.extend(self.output.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t: Vec<&mut [F]> = self.trunk.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        t.extend(self.head.tensors_mut());
        t.extend(self.output.tensors_mut());
        t
    }
}

/// Rays with their sample depths, `samples_per_ray` per ray, stored ray-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleBatch {
    pub origins: Vec<Position>,
    pub directions: Vec<Vec3>,
    pub samples_per_ray: usize,
    pub depths: Vec<f64>,
    pub spacings: Vec<f64>,
}

impl RaySampleBatch {
    /// Builds a batch from sorted per-ray depths; the last spacing of each ray is `last_spacing`.
    pub fn new(origins: Vec<Position>, directions: Vec<Vec3>, depths: Vec<Vec<f64>>, last_spacing: f64) -> Result<Self> {
        if origins.len() != directions.len() || origins.len() != depths.len() {
            return Err(Error::Shape("ray origins, directions and depths differ in length".into()));
        }
        let n = depths.first().map_or(0, Vec::len);
        if n == 0 || depths.iter().any(|d| d.len() != n) {
            return Err(Error::Shape("every ray needs the same non-zero number of samples".into()));
        }
        if !(last_spacing > 0.0) {
            return domain("last sample spacing must be positive");
        }
        let mut flat = Vec::with_capacity(n * depths.len());
        let mut spacings = Vec::with_capacity(n * depths.len());
        for d in &depths {
            for i in 0..n {
                flat.push(d[i]);
                spacings.push(if i + 1 < n { d[i + 1] - d[i] } else { last_spacing });
            }
        }
        Ok(RaySampleBatch {
            origins,
            directions,
            samples_per_ray: n,
            depths: flat,
            spacings,
        })
    }

    pub fn rays(&self) -> usize {
        self.origins.len()
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn ray_depths(&self, ray: usize) -> &[f64] {
        &self.depths[ray * self.samples_per_ray..(ray + 1) * self.samples_per_ray]
    }

    pub fn ray_spacings(&self, ray: usize) -> &[f64] {
        &self.spacings[ray * self.samples_per_ray..(ray + 1) * self.samples_per_ray]
    }

    pub fn position(&self, sample: usize) -> Position {
        let r = sample / self.samples_per_ray;
        self.origins[r] + self.directions[r] * self.depths[sample]
    }

    pub fn positions(&self) -> Vec<Position> {
        (0..self.len()).map(|s| self.position(s)).collect()
    }
}

/// One uniform draw per equal-width bin of `[t_near, t_far)`.
pub fn stratified_samples(t_near: f64, t_far: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_range(t_near, t_far, n)?;
    let w = (t_far - t_near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let t = t_near + (i as f64 + rng.random::<f64>()) * w;
            t.min(t_far - w * 1e-12)
        })
        .collect())
}

/// Bin midpoints, used when sampling must be deterministic.
pub fn midpoint_samples(t_near: f64, t_far: f64, n: usize) -> Result<Vec<f64>> {
    check_range(t_near, t_far, n)?;
    let w = (t_far - t_near) / n as f64;
    Ok((0..n).map(|i| t_near + (i as f64 + 0.5) * w).collect())
}

fn check_range(t_near: f64, t_far: f64, n: usize) -> Result<()> {
    if !(t_near >= 0.0 && t_far > t_near && t_far.is_finite()) {
        return domain(format!("invalid sampling range [{t_near}, {t_far})"));
    }
    if n == 0 {
        return domain("sample count must be at least 1");
    }
    Ok(())
}

/// Rendering quantities along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`, `alpha_i = 1 - exp(-sigma_i delta_i)`, `w_i = T_i alpha_i`.
pub fn compute_weights(densities: &[f64], spacings: &[f64]) -> Result<Weights> {
    if densities.len() != spacings.len() {
        return Err(Error::Shape("densities and spacings differ in length".into()));
    }
    let n = densities.len();
    let mut out = Weights {
        transmittance: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
    };
    let mut optical = 0.0;
    for (&s, &d) in densities.iter().zip(spacings) {
        let t = (-optical).exp();
        let tau = s * d;
        let a = if tau.is_infinite() { 1.0 } else { -(-tau).exp_m1() };
        out.transmittance.push(t);
        out.alpha.push(a);
        out.weights.push(t * a);
        optical += tau;
    }
    Ok(out)
}

/// Inverse-CDF resampling over the intervals `[t_i, t_i + delta_i)` (the last clipped to `t_far`)
/// with probabilities proportional to `w_i + floor`. `u` are quantiles in `[0, 1)`.
pub fn inverse_cdf(depths: &[f64], spacings: &[f64], weights: &[f64], t_far: f64, floor: f64, u: &[f64]) -> Vec<f64> {
    let n = depths.len();
    let mut edges: Vec<f64> = depths.to_vec();
    edges.push((depths[n - 1] + spacings[n - 1]).min(t_far));
    let raw: Vec<f64> = weights.iter().map(|w| w.max(0.0) + floor).collect();
    let total: f64 = raw.iter().sum();
    let pdf: Vec<f64> = if total > 0.0 && total.is_finite() {
        raw.iter().map(|w| w / total).collect()
    } else {
        // no information: spread uniformly over the interval lengths
        let span = edges[n] - edges[0];
        (0..n).map(|i| (edges[i + 1] - edges[i]) / span).collect()
    };
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    let top = cdf[n];
    let mut out: Vec<f64> = u
        .iter()
        .map(|&q| {
            let q = q * top;
            let i = cdf.partition_point(|&c| c <= q).clamp(1, n) - 1;
            let p = pdf[i];
            let frac = if p > 0.0 { ((q - cdf[i]) / p).clamp(0.0, 1.0) } else { 0.5 };
            let t = edges[i] + frac * (edges[i + 1] - edges[i]);
            t.min(edges[n] - (edges[n] - edges[0]) * 1e-12)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Draws `n_fine` depths from the coarse weights and merges them with the coarse depths.
pub fn hierarchical_samples<R: Rng + ?Sized>(
    coarse_depths: &[f64],
    coarse_spacings: &[f64],
    coarse_weights: &[f64],
    t_far: f64,
    n_fine: usize,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    if coarse_depths.is_empty() || coarse_depths.len() != coarse_weights.len() || coarse_depths.len() != coarse_spacings.len() {
        return Err(Error::Shape(
            "coarse depths, spacings and weights must be non-empty and aligned".into(),
        ));
    }
    let u: Vec<f64> = match rng {
        Some(r) => (0..n_fine).map(|_| r.random::<f64>()).collect(),
        None => (0..n_fine).map(|j| (j as f64 + 0.5) / n_fine as f64).collect(),
    };
    let fine = inverse_cdf(coarse_depths, coarse_spacings, coarse_weights, t_far, PDF_FLOOR, &u);
    let mut all = Vec::with_capacity(coarse_depths.len() + n_fine);
    all.extend_from_slice(coarse_depths);
    all.extend(fine);
    all.sort_by(f64::total_cmp);
    Ok(all)
}

/// Result of rendering one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub channel: ComplexValue,
    /// Contribution of each ray; these add up to `channel`.
    pub per_ray: Vec<ComplexValue>,
    pub weights: Vec<f64>,
}

/// Sums `w (I + jQ) g(t, f)` over all samples, skipping samples closer than `min_distance`.
pub fn render_channel(batch: &RaySampleBatch, outputs: &[FieldOutput], f: f64, min_distance: f64) -> Result<Render> {
    if outputs.len() != batch.len() {
        return Err(Error::Shape(format!("{} outputs for {} samples", outputs.len(), batch.len())));
    }
    if !(f > 0.0 && f.is_finite()) {
        return domain(format!("frequency must be positive, got {f}"));
    }
    let n = batch.samples_per_ray;
    let mut per_ray = Vec::with_capacity(batch.rays());
    let mut weights = Vec::with_capacity(batch.len());
    let mut sigma = Vec::with_capacity(n);
    for r in 0..batch.rays() {
        let o = &outputs[r * n..(r + 1) * n];
        sigma.clear();
        sigma.extend(o.iter().map(|v| v.density));
        let w = compute_weights(&sigma, batch.ray_spacings(r))?.weights;
        let mut acc = ComplexValue::new(0.0, 0.0);
        for ((&t, &wi), v) in batch.ray_depths(r).iter().zip(&w).zip(o) {
            if t < min_distance || wi == 0.0 {
                continue;
            }
            acc += wi * ComplexValue::new(v.i_component, v.q_component) * free_space_gain_unchecked(t, f);
        }
        per_ray.push(acc);
        weights.extend(w);
    }
    Ok(Render {
        channel: per_ray.iter().sum(),
        per_ray,
        weights,
    })
}

/// Gradient of a real loss w.r.t. every sample's `(I, Q, sigma)`, given
/// `dL/dRe(H)` and `dL/dIm(H)` for the rendered channel `H`.
pub fn render_backward(
    batch: &RaySampleBatch,
    outputs: &[FieldOutput],
    f: f64,
    min_distance: f64,
    grad_re: f64,
    grad_im: f64,
) -> Result<Vec<[f64; 3]>> {
    if outputs.len() != batch.len() {
        return Err(Error::Shape(format!("{} outputs for {} samples", outputs.len(), batch.len())));
    }
    let n = batch.samples_per_ray;
    let mut grads = Vec::with_capacity(batch.len());
    let mut sigma = Vec::with_capacity(n);
    let mut a = vec![0.0; n];
    for r in 0..batch.rays() {
        let o = &outputs[r * n..(r + 1) * n];
        let deltas = batch.ray_spacings(r);
        sigma.clear();
        sigma.extend(o.iter().map(|v| v.density));
        let wt = compute_weights(&sigma, deltas)?;
        let start = grads.len();
        for (i, (&t, v)) in batch.ray_depths(r).iter().zip(o).enumerate() {
            if t < min_distance {
                a[i] = 0.0;
                grads.push([0.0; 3]);
                continue;
            }
            let g = free_space_gain_unchecked(t, f);
            let c = ComplexValue::new(v.i_component, v.q_component) * g;
            a[i] = grad_re * c.re + grad_im * c.im;
            let w = wt.weights[i];
            grads.push([w * (grad_re * g.re + grad_im * g.im), w * (grad_im * g.re - grad_re * g.im), 0.0]);
        }
        // dL/dsigma_k = delta_k (T_{k+1} a_k - sum_{i>k} a_i w_i)
        let mut tail = 0.0;
        for k in (0..n).rev() {
            let t_next = wt.transmittance[k] * (1.0 - wt.alpha[k]);
            grads[start + k][2] = deltas[k] * (t_next * a[k] - tail);
            tail += a[k] * wt.weights[k];
        }
    }
    Ok(grads)
}

/// Encodes all samples of a batch for the network.
pub fn encode_batch<F: Real>(batch: &RaySampleBatch, encoding: &EncodingConfig, norm: &Aabb) -> (Vec<F>, Vec<F>) {
    let mut pos = Vec::with_capacity(batch.len() * encoding.position_len());
    let mut dir = Vec::with_capacity(batch.len() * encoding.direction_len());
    let mut dir_code = Vec::with_capacity(encoding.direction_len());
    for r in 0..batch.rays() {
        dir_code.clear();
        encode_into(
            &batch.directions[r].to_array(),
            encoding.direction_frequencies,
            encoding.include_identity,
            &mut dir_code,
        );
        for &t in batch.ray_depths(r) {
            let p = batch.origins[r] + batch.directions[r] * t;
            encode_into(
                &norm.normalize(p),
                encoding.spatial_frequencies,
                encoding.include_identity,
                &mut pos,
            );
            dir.extend_from_slice(&dir_code);
        }
    }
    (pos, dir)
}

/// Runs the network over every sample of a batch.
pub fn query_field<F: Real>(mlp: &FieldMlp<F>, encoding: &EncodingConfig, norm: &Aabb, batch: &RaySampleBatch) -> Result<FieldCache<F>> {
    let (pos, dir) = encode_batch(batch, encoding, norm);
    mlp.forward(&pos, &dir, batch.len())
}

/// Coarse and fine networks plus what is needed to query them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    pub encoding: EncodingConfig,
    pub architecture: ArchitectureConfig,
    /// Box mapped to `[-1, 1]^3` before encoding.
    pub normalization: Aabb,
    pub coarse: FieldMlp<f32>,
    pub fine: FieldMlp<f32>,
}

impl FieldModel {
    pub fn new(encoding: EncodingConfig, architecture: ArchitectureConfig, normalization: Aabb, rng: &mut impl Rng) -> Result<Self> {
        let coarse = FieldMlp::new(&encoding, &architecture, rng)?;
        let fine = FieldMlp::new(&encoding, &architecture, rng)?;
        Ok(FieldModel {
            encoding,
            architecture,
            normalization,
            coarse,
            fine,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        self.coarse.validate()?;
        self.fine.validate()?;
        for m in [&self.coarse, &self.fine] {
            if m.position_inputs != self.encoding.position_len() || m.direction_inputs != self.encoding.direction_len() {
                return Err(Error::InvalidModel("network inputs do not match the encoding".into()));
            }
        }
        Ok(())
    }
}

/// Ray marching settings shared by training, evaluation and ray search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub t_near: f64,
    pub t_far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub min_distance: f64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        check_range(self.t_near, self.t_far, self.n_coarse)?;
        if self.n_fine == 0 {
            return domain("fine sample count must be at least 1");
        }
        if !(self.min_distance >= 0.0) {
            return domain("minimum render distance must be non-negative");
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.t_far - self.t_near) / self.n_coarse as f64
    }

    /// Coarse depths for `rays` rays: stratified with an rng, bin midpoints without.
    pub fn coarse_batch(&self, origin: Position, directions: &[Vec3], mut rng: Option<&mut dyn rand::RngCore>) -> Result<RaySampleBatch> {
        let mut depths = Vec::with_capacity(directions.len());
        for _ in directions {
            depths.push(match rng.as_deref_mut() {
                Some(r) => stratified_samples(self.t_near, self.t_far, self.n_coarse, &mut RngRef(r))?,
                None => midpoint_samples(self.t_near, self.t_far, self.n_coarse)?,
            });
        }
        RaySampleBatch::new(vec![origin; directions.len()], directions.to_vec(), depths, self.bin_width())
    }

    /// Coarse depths plus resampled depths drawn from the coarse weights.
    pub fn fine_batch(
        &self,
        coarse: &RaySampleBatch,
        coarse_weights: &[f64],
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<RaySampleBatch> {
        let n = coarse.samples_per_ray;
        let mut depths = Vec::with_capacity(coarse.rays());
        for r in 0..coarse.rays() {
            depths.push(hierarchical_samples(
                coarse.ray_depths(r),
                coarse.ray_spacings(r),
                &coarse_weights[r * n..(r + 1) * n],
                self.t_far,
                self.n_fine,
                rng.as_deref_mut(),
            )?);
        }
        RaySampleBatch::new(coarse.origins.clone(), coarse.directions.clone(), depths, self.bin_width())
    }
}

/// Adapter so a `&mut dyn RngCore` can be passed where `impl Rng` is expected.
struct RngRef<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngRef<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Fine-model render of a receiver along the given directions, deterministic sampling.
pub fn render_fine(model: &FieldModel, sampling: &SamplingConfig, origin: Position, directions: &[Vec3], f: f64) -> Result<Render> {
    let coarse = sampling.coarse_batch(origin, directions, None)?;
    let c_out = query_field(&model.coarse, &model.encoding, &model.normalization, &coarse)?.outputs();
    let c_render = render_channel(&coarse, &c_out, f, sampling.min_distance)?;
    let fine = sampling.fine_batch(&coarse, &c_render.weights, None)?;
    let f_out = query_field(&model.fine, &model.encoding, &model.normalization, &fine)?.outputs();
    render_channel(&fine, &f_out, f, sampling.min_distance)
}

/// Fine-model render at several frequencies, reusing one network evaluation.
pub fn render_fine_multi(
    model: &FieldModel,
    sampling: &SamplingConfig,
    origin: Position,
    directions: &[Vec3],
    freqs: &[f64],
) -> Result<Vec<Render>> {
    let Some(&f0) = freqs.first() else {
        return Ok(Vec::new());
    };
    let coarse = sampling.coarse_batch(origin, directions, None)?;
    let c_out = query_field(&model.coarse, &model.encoding, &model.normalization, &coarse)?.outputs();
    let c_render = render_channel(&coarse, &c_out, f0, sampling.min_distance)?;
    let fine = sampling.fine_batch(&coarse, &c_render.weights, None)?;
    let f_out = query_field(&model.fine, &model.encoding, &model.normalization, &fine)?.outputs();
    freqs
        .iter()
        .map(|&f| render_channel(&fine, &f_out, f, sampling.min_distance))
        .collect()
}

/// Dense density evaluation over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub origin: Position,
    pub resolution: f64,
    pub shape: [usize; 3],
    /// x fastest, then y, then z.
    pub values: Vec<f64>,
    pub threshold: f64,
    pub points: Vec<(Position, f64)>,
}

impl DensityGrid {
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Position {
        self.origin + Vec3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5) * self.resolution
    }
}

/// Evaluates fine-model density at cell centers along the `+x` direction and
/// keeps cells at or above the given percentile of the positive densities.
pub fn density_grid(model: &FieldModel, bbox: &Aabb, resolution: f64, percentile: f64, max_cells: usize) -> Result<DensityGrid> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return domain("grid resolution must be positive");
    }
    if !(0.0..=100.0).contains(&percentile) {
        return domain("percentile must lie in [0, 100]");
    }
    let e = bbox.extent();
    let shape = [e.x, e.y, e.z].map(|v| ((v / resolution).ceil() as usize).max(1));
    let cells = shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
    let cells = match cells {
        Some(c) if c <= max_cells => c,
        _ => {
            return Err(Error::ResourceGuard(format!(
                "density grid {}x{}x{} exceeds the cap of {max_cells} cells",
                shape[0], shape[1], shape[2]
            )))
        }
    };
    let mut grid = DensityGrid {
        origin: bbox.min,
        resolution,
        shape,
        values: Vec::with_capacity(cells),
        threshold: 0.0,
        points: Vec::new(),
    };
    let mut dir_code: Vec<f32> = Vec::new();
    encode_into(
        &[1.0, 0.0, 0.0],
        model.encoding.direction_frequencies,
        model.encoding.include_identity,
        &mut dir_code,
    );
    const CHUNK: usize = 4096;
    let centers: Vec<Position> = (0..cells)
        .map(|c| {
            let ix = c % shape[0];
            let iy = (c / shape[0]) % shape[1];
            let iz = c / (shape[0] * shape[1]);
            grid.cell_center(ix, iy, iz)
        })
        .collect();
    for chunk in centers.chunks(CHUNK) {
        let mut pos: Vec<f32> = Vec::with_capacity(chunk.len() * model.encoding.position_len());
        let mut dir: Vec<f32> = Vec::with_capacity(chunk.len() * dir_code.len());
        for p in chunk {
            encode_into(
                &model.normalization.normalize(*p),
                model.encoding.spatial_frequencies,
                model.encoding.include_identity,
                &mut pos,
            );
            dir.extend_from_slice(&dir_code);
        }
        let out = model.fine.forward(&pos, &dir, chunk.len())?;
        grid.values.extend(out.outputs().iter().map(|o| o.density));
    }
    let mut positive: Vec<f64> = grid.values.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Ok(grid);
    }
    positive.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * (positive.len() - 1) as f64).round() as usize;
    grid.threshold = positive[rank];
    grid.points = centers
        .iter()
        .zip(&grid.values)
        .filter(|(_, &v)| v > 0.0 && v >= grid.threshold)
        .map(|(p, &v)| (*p, v))
        .collect();
    Ok(grid)
}

/// Versioned checkpoint container; `kind` distinguishes field and baseline models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M, S = serde_json::Value> {
    pub format: String,
    pub version: String,
    pub kind: String,
    pub frequency: FrequencyConfig,
    pub model: M,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<S>,
    pub metadata: serde_json::Value,
}

impl<M: Serialize + serde::de::DeserializeOwned, S: Serialize + serde::de::DeserializeOwned> Checkpoint<M, S> {
    pub fn new(kind: &str, frequency: FrequencyConfig, model: M, state: Option<S>, metadata: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION.into(),
            kind: kind.into(),
            frequency,
            model,
            state,
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &std::path::Path, kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let head: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::InvalidModel(format!("{}: {e}", path.display())))?;
        if head.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::InvalidModel(format!("{} is not a checkpoint file", path.display())));
        }
        crate::io::check_version(head.get("version").and_then(|v| v.as_str()).unwrap_or(""), CHECKPOINT_VERSION)?;
        let found = head.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        if found != kind {
            return Err(Error::InvalidModel(format!(
                "checkpoint holds a '{found}' model, expected '{kind}'"
            )));
        }
        serde_json::from_value(head).map_err(|e| Error::InvalidModel(format!("{}: {e}", path.display())))
    }
}
