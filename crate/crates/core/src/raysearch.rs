//! Arrival-direction discovery for receivers without measured directions.
//!
//! A trained field concentrates density where the transmitter and its mirror
//! images sit. Marching every training ray through the fine model and keeping
//! the weight peak gives a cloud of candidate points; clustering the cloud
//! yields the (virtual) transmitters. Each training receiver is then linked
//! to the transmitters its rays point at, a small network learns how many
//! transmitters a receiver sees, and a new receiver borrows the most common
//! transmitters of its nearest training neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::field::{query_field, render_channel, FieldModel, SamplingConfig};
use crate::geometry::{angular_distance, Aabb, Direction, Position, Vec3};
use crate::nn::{Mlp, OutputActivation};
use crate::sim::{stream_rng, Dataset};
use crate::train::{AdamState, PlateauScheduler, SchedulerConfig};

pub const PRODUCT_FORMAT: &str = "radfield-raysearch";
pub const PRODUCT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaySearchConfig {
    /// Minimum peak rendering weight for a ray to yield a candidate.
    pub w_min: f64,
    pub eps: f64,
    pub min_pts: usize,
    /// Radians.
    pub angle_tol: f64,
    pub k_neighbors: usize,
    pub count_net: CountNetConfig,
}

impl Default for RaySearchConfig {
    fn default() -> Self {
        RaySearchConfig {
            w_min: 0.05,
            eps: 0.25,
            min_pts: 3,
            angle_tol: 2f64.to_radians(),
            k_neighbors: 6,
            count_net: CountNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountNetConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CountNetConfig {
    fn default() -> Self {
        CountNetConfig {
            hidden: 64,
            iterations: 3000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub position: Position,
    pub measurement: usize,
    pub doa_index: usize,
    pub weight: f64,
}

/// Fine-model weight peaks along each direction from `origin`, `None` where the peak is below `w_min`.
pub fn locate_along_rays(
    model: &FieldModel,
    sampling: &SamplingConfig,
    origin: Position,
    dirs: &[Vec3],
    w_min: f64,
    f: f64,
) -> Result<Vec<Option<(Position, f64)>>> {
    if dirs.is_empty() {
        return Ok(Vec::new());
    }
    let coarse = sampling.coarse_batch(origin, dirs, None)?;
    let c_out = query_field(&model.coarse, &model.encoding, &model.normalization, &coarse)?.outputs();
    let c_render = render_channel(&coarse, &c_out, f, sampling.min_distance)?;
    let fine = sampling.fine_batch(&coarse, &c_render.weights, None)?;
    let f_out = query_field(&model.fine, &model.encoding, &model.normalization, &fine)?.outputs();
    let weights = render_channel(&fine, &f_out, f, sampling.min_distance)?.weights;
    let n = fine.samples_per_ray;
    Ok((0..fine.rays())
        .map(|r| {
            let w = &weights[r * n..(r + 1) * n];
            let (best, &wmax) = w
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            (wmax >= w_min && wmax > 0.0).then(|| (fine.position(r * n + best), wmax))
        })
        .collect())
}

/// Single-ray form of [`locate_along_rays`].
pub fn locate_along_ray(
    model: &FieldModel,
    sampling: &SamplingConfig,
    origin: Position,
    dir: Direction,
    w_min: f64,
    f: f64,
) -> Result<Option<(Position, f64)>> {
    Ok(locate_along_rays(model, sampling, origin, &[dir.to_unit()], w_min, f)?
        .pop()
        .flatten())
}

/// Candidates from every arrival direction of the given records.
pub fn find_candidates(
    model: &FieldModel,
    sampling: &SamplingConfig,
    dataset: &Dataset,
    indices: &[usize],
    w_min: f64,
) -> Result<Vec<CandidatePoint>> {
    let f = dataset.frequency.carrier_hz;
    let mut out = Vec::new();
    for &i in indices {
        let m = &dataset.measurements[i];
        let dirs: Vec<Vec3> = m.doas.iter().map(|d| d.to_unit()).collect();
        for (k, hit) in locate_along_rays(model, sampling, m.position, &dirs, w_min, f)?
            .into_iter()
            .enumerate()
        {
            if let Some((position, weight)) = hit {
                out.push(CandidatePoint {
                    position,
                    measurement: i,
                    doa_index: k,
                    weight,
                });
            }
        }
    }
    Ok(out)
}

/// DBSCAN labels: `Some(cluster)` or `None` for noise. Clusters are numbered in discovery order.
pub fn dbscan(points: &[Position], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > 0.0) || min_pts == 0 {
        return domain("DBSCAN needs eps > 0 and min_pts >= 1");
    }
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..points.len())
            .filter(|&j| (points[i] - points[j]).norm_squared() <= eps2)
            .collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut next = 0;
    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let n = neighbors(i);
        if n.len() < min_pts {
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = Some(c);
        let mut queue = n;
        let mut q = 0;
        while q < queue.len() {
            let j = queue[q];
            q += 1;
            if labels[j].is_none() {
                labels[j] = Some(c);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nj = neighbors(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualTransmitterSet {
    pub centroids: Vec<Position>,
    pub counts: Vec<usize>,
}

impl VirtualTransmitterSet {
    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    /// Distance from `p` to the nearest centroid.
    pub fn nearest_distance(&self, p: Position) -> Option<f64> {
        self.centroids.iter().map(|c| c.distance(p)).min_by(f64::total_cmp)
    }
}

/// DBSCAN over candidate positions; centroids are member means. Clusters
/// whose centroids end up within `eps` of each other are merged.
pub fn cluster_candidates(points: &[Position], eps: f64, min_pts: usize) -> Result<VirtualTransmitterSet> {
    let labels = dbscan(points, eps, min_pts)?;
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut sums = vec![Vec3::new(0.0, 0.0, 0.0); k];
    let mut counts = vec![0usize; k];
    for (p, l) in points.iter().zip(&labels) {
        if let Some(c) = *l {
            sums[c] += *p;
            counts[c] += 1;
        }
    }
    let mut centroids: Vec<Position> = sums.iter().zip(&counts).map(|(s, &n)| *s / n as f64).collect();
    loop {
        let mut pair = None;
        'outer: for a in 0..centroids.len() {
            for b in a + 1..centroids.len() {
                if centroids[a].distance(centroids[b]) <= eps {
                    pair = Some((a, b));
                    break 'outer;
                }
            }
        }
        let Some((a, b)) = pair else { break };
        let (na, nb) = (counts[a] as f64, counts[b] as f64);
        centroids[a] = (centroids[a] * na + centroids[b] * nb) / (na + nb);
        counts[a] += counts[b];
        centroids.remove(b);
        counts.remove(b);
    }
    Ok(VirtualTransmitterSet { centroids, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub measurement: usize,
    pub position: Position,
    /// Centroid indices in order of first match, without duplicates.
    pub centroids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMap {
    pub entries: Vec<Assignment>,
    pub assigned_doas: usize,
    pub total_doas: usize,
}

impl AssignmentMap {
    pub fn assigned_fraction(&self) -> f64 {
        if self.total_doas == 0 {
            0.0
        } else {
            self.assigned_doas as f64 / self.total_doas as f64
        }
    }
}

/// Links each arrival direction of each record to the angularly closest centroid within `angle_tol`.
pub fn assign_transmitters(dataset: &Dataset, indices: &[usize], vts: &VirtualTransmitterSet, angle_tol: f64) -> Result<AssignmentMap> {
    if vts.is_empty() {
        return domain("no virtual transmitters to assign");
    }
    let mut map = AssignmentMap {
        entries: Vec::with_capacity(indices.len()),
        assigned_doas: 0,
        total_doas: 0,
    };
    for &i in indices {
        let m = &dataset.measurements[i];
        let to_centroid: Vec<Option<Vec3>> = vts.centroids.iter().map(|c| (*c - m.position).normalized()).collect();
        let mut chosen = Vec::new();
        for d in &m.doas {
            map.total_doas += 1;
            let u = d.to_unit();
            let best = to_centroid
                .iter()
                .enumerate()
                .filter_map(|(k, v)| v.map(|v| (k, angular_distance(u, v))))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((k, ang)) = best {
                if ang <= angle_tol {
                    map.assigned_doas += 1;
                    if !chosen.contains(&k) {
                        chosen.push(k);
                    }
                }
            }
        }
        map.entries.push(Assignment {
            measurement: i,
            position: m.position,
            centroids: chosen,
        });
    }
    Ok(map)
}

/// Regression from receiver position to the number of visible transmitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountNet {
    pub normalization: Aabb,
    /// Counts are standardized as `(n - mean) / scale` for training.
    pub mean: f64,
    pub scale: f64,
    /// `None` when every training count was equal.
    pub network: Option<Mlp<f32>>,
}

impl CountNet {
    pub fn predict_raw(&self, p: Position) -> Result<f64> {
        let Some(net) = &self.network else {
            return Ok(self.mean);
        };
        let x = self.normalization.normalize(p).map(|v| v as f32);
        let y = net.predict(&x, 1)?;
        Ok(f64::from(y[0]) * self.scale + self.mean)
    }

    /// Rounded prediction, at least 1.
    pub fn predict(&self, p: Position) -> Result<usize> {
        Ok((self.predict_raw(p)?.round().max(1.0)) as usize)
    }
}

/// Fits the count network on `|V_m|` for every assigned record.
pub fn fit_count_net(assignments: &AssignmentMap, normalization: Aabb, config: &CountNetConfig) -> Result<CountNet> {
    let n = assignments.entries.len();
    if n < 10 {
        return domain(format!("count network needs at least 10 records, got {n}"));
    }
    let counts: Vec<f64> = assignments.entries.iter().map(|e| e.centroids.len() as f64).collect();
    let mean = counts.iter().sum::<f64>() / n as f64;
    let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Ok(CountNet {
            normalization,
            mean,
            scale: 1.0,
            network: None,
        });
    }
    let scale = var.sqrt();
    let x: Vec<f32> = assignments
        .entries
        .iter()
        .flat_map(|e| normalization.normalize(e.position).map(|v| v as f32))
        .collect();
    let y: Vec<f32> = counts.iter().map(|c| ((c - mean) / scale) as f32).collect();
    let mut rng = stream_rng(config.seed, 0);
    let mut net = Mlp::new(&[3, config.hidden, config.hidden, 1], OutputActivation::Identity, &mut rng)?;
    let mut opt = AdamState::new(&net);
    let mut sched = PlateauScheduler::new(config.lr, SchedulerConfig::default());
    for it in 0..config.iterations {
        let cache = net.forward(&x, n)?;
        let mut loss = 0.0;
        let d: Vec<f32> = cache
            .output()
            .iter()
            .zip(&y)
            .map(|(p, t)| {
                let e = f64::from(*p - *t);
                loss += e * e;
                (2.0 * e / n as f64) as f32
            })
            .collect();
        let mut grad = net.zeros_like();
        net.backward(&cache, &d, &mut grad);
        opt.step(&mut net, &grad, sched.lr).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { iteration: it, what },
            other => other,
        })?;
        sched.step(loss / n as f64)?;
    }
    Ok(CountNet {
        normalization,
        mean,
        scale,
        network: Some(net),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDoas {
    pub directions: Vec<Direction>,
    pub centroids: Vec<usize>,
    /// Count the network asked for.
    pub requested: usize,
    /// True when fewer centroids were tallied than requested.
    pub short: bool,
}

/// Steps 4 and 5 in closed form: tally neighbour centroids and keep the top `n`.
pub fn predict_doas(
    position: Position,
    assignments: &AssignmentMap,
    vts: &VirtualTransmitterSet,
    count: usize,
    k_neighbors: usize,
) -> Result<PredictedDoas> {
    if assignments.entries.len() < k_neighbors || k_neighbors == 0 {
        return domain(format!(
            "need at least {k_neighbors} training records, have {}",
            assignments.entries.len()
        ));
    }
    let mut order: Vec<(f64, usize)> = assignments
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.position.distance(position), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // (votes, summed neighbour distance) per centroid
    let mut tally: Vec<(usize, f64)> = vec![(0, 0.0); vts.len()];
    for &(d, i) in &order[..k_neighbors] {
        for &c in &assignments.entries[i].centroids {
            if c >= vts.len() {
                return Err(Error::InvalidModel(format!("assignment refers to centroid {c} of {}", vts.len())));
            }
            tally[c].0 += 1;
            tally[c].1 += d;
        }
    }
    let mut ranked: Vec<usize> = (0..vts.len()).filter(|&c| tally[c].0 > 0).collect();
    ranked.sort_by(|&a, &b| {
        let (na, sa) = tally[a];
        let (nb, sb) = tally[b];
        nb.cmp(&na).then((sa / na as f64).total_cmp(&(sb / nb as f64))).then(a.cmp(&b))
    });
    let short = ranked.len() < count;
    ranked.truncate(count);
    let mut directions = Vec::with_capacity(ranked.len());
    let mut kept = Vec::with_capacity(ranked.len());
    for &c in &ranked {
        if let Ok(d) = Direction::between(position, vts.centroids[c]) {
            directions.push(d);
            kept.push(c);
        }
    }
    Ok(PredictedDoas {
        directions,
        centroids: kept,
        requested: count,
        short,
    })
}

/// Everything needed to predict arrival directions at new receivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaySearchProduct {
    pub format: String,
    pub version: String,
    pub config: RaySearchConfig,
    pub candidates: usize,
    pub transmitters: VirtualTransmitterSet,
    pub assignments: AssignmentMap,
    pub count_net: CountNet,
}

impl RaySearchProduct {
    pub fn predict_doas(&self, position: Position) -> Result<PredictedDoas> {
        let n = self.count_net.predict(position)?;
        predict_doas(position, &self.assignments, &self.transmitters, n, self.config.k_neighbors)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json_pretty(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p: RaySearchProduct = crate::io::read_json(path)?;
        if p.format != PRODUCT_FORMAT {
            return Err(Error::Format(format!("{} is not a ray-search product", path.display())));
        }
        crate::io::check_version(&p.version, PRODUCT_VERSION)?;
        Ok(p)
    }
}

/// Runs all five steps on the training split of `dataset`.
pub fn run_ray_search(
    model: &FieldModel,
    sampling: &SamplingConfig,
    dataset: &Dataset,
    config: &RaySearchConfig,
) -> Result<RaySearchProduct> {
    let train = dataset.train_indices();
    let candidates = find_candidates(model, sampling, dataset, &train, config.w_min)?;
    if candidates.is_empty() {
        return Err(Error::InvalidModel(
            "no ray reached the minimum weight; the model looks untrained".into(),
        ));
    }
    let points: Vec<Position> = candidates.iter().map(|c| c.position).collect();
    let transmitters = cluster_candidates(&points, config.eps, config.min_pts)?;
    if transmitters.is_empty() {
        return Err(Error::InvalidModel("candidate points formed no cluster".into()));
    }
    let assignments = assign_transmitters(dataset, &train, &transmitters, config.angle_tol)?;
    let count_net = fit_count_net(&assignments, dataset.scene.bounding_box(), &config.count_net)?;
    Ok(RaySearchProduct {
        format: PRODUCT_FORMAT.into(),
        version: PRODUCT_VERSION.into(),
        config: config.clone(),
        candidates: candidates.len(),
        transmitters,
        assignments,
        count_net,
    })
}
