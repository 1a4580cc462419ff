//! Image-method multipath simulator over convex polygonal scenes.
//!
//! The transmitter is mirrored recursively across the surface planes; each
//! mirror image is unfolded back into physical reflection points and kept only
//! if every point lies on its polygon and every leg is unobstructed. Surfaces
//! reflect with a scalar TE Fresnel coefficient (perfect reflectors use -1).

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{free_space_gain, multipath_sum, ComplexValue, FrequencyConfig, Measurement, VACUUM_PERMITTIVITY};
use crate::error::{domain, Error, Result};
use crate::geometry::{unit_to_direction, Aabb, Direction, Position, Vec3};

/// Points closer than this to a segment endpoint do not occlude it.
pub const OCCLUSION_EPS: f64 = 1e-9;
/// Coplanarity and polygon-membership tolerance, meters.
pub const GEOMETRY_TOL: f64 = 1e-9;
/// Minimum receiver clearance from surfaces and the transmitter, meters.
pub const RECEIVER_CLEARANCE: f64 = 0.1;
/// Default reflection order.
pub const DEFAULT_MAX_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Material {
    PerfectReflector,
    Dielectric {
        relative_permittivity: f64,
        /// S/m
        conductivity: f64,
    },
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Material::PerfectReflector => Ok(()),
            Material::Dielectric {
                relative_permittivity,
                conductivity,
            } => {
                if !(relative_permittivity >= 1.0) || !relative_permittivity.is_finite() {
                    return domain(format!("relative permittivity must be >= 1, got {relative_permittivity}"));
                }
                if !(conductivity >= 0.0) || !conductivity.is_finite() {
                    return domain(format!("conductivity must be >= 0, got {conductivity}"));
                }
                Ok(())
            }
        }
    }

    /// A few common building materials (permittivity, conductivity at ~2.4 GHz).
    pub fn named(name: &str) -> Option<Material> {
        let (eps, sigma) = match name {
            "perfect" | "perfect_reflector" | "metal" => return Some(Material::PerfectReflector),
            "concrete" => (5.31, 0.0548),
            "brick" => (3.75, 0.038),
            "wood" => (1.99, 0.0120),
            "glass" => (6.27, 0.0043),
            "plasterboard" => (2.94, 0.0116),
            _ => return None,
        };
        Some(Material::Dielectric {
            relative_permittivity: eps,
            conductivity: sigma,
        })
    }
}

/// Reflection coefficient for a scalar TE wave hitting `material` at
/// `incidence_angle` (radians from the surface normal).
pub fn reflection_coefficient(material: &Material, incidence_angle: f64, f: f64) -> Result<ComplexValue> {
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&incidence_angle) {
        return domain(format!("incidence angle {incidence_angle} outside [0, pi/2)"));
    }
    match *material {
        Material::PerfectReflector => Ok(Complex64::new(-1.0, 0.0)),
        Material::Dielectric {
            relative_permittivity,
            conductivity,
        } => {
            if !(f > 0.0) {
                return domain("frequency must be positive");
            }
            let eta = Complex64::new(
                relative_permittivity,
                -conductivity / (2.0 * std::f64::consts::PI * f * VACUUM_PERMITTIVITY),
            );
            let (s, c) = incidence_angle.sin_cos();
            let root = (eta - s * s).sqrt();
            Ok((c - root) / (c + root))
        }
    }
}

/// A convex planar polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    vertices: Vec<Vec3>,
    material: Material,
    normal: Vec3,
    offset: f64,
}

impl Surface {
    pub fn new(vertices: Vec<Vec3>, material: Material) -> Result<Self> {
        material.validate()?;
        if vertices.len() < 3 {
            return Err(Error::InvalidScene(format!("surface needs >= 3 vertices, got {}", vertices.len())));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidScene("non-finite vertex".into()));
        }
        // Newell's method gives a robust normal for any simple polygon.
        let mut n = Vec3::ZERO;
        for (i, a) in vertices.iter().enumerate() {
            let b = vertices[(i + 1) % vertices.len()];
            n += a.cross(b);
        }
        let area = 0.5 * n.norm();
        let Some(normal) = n.normalized().filter(|_| area > 0.0) else {
            return Err(Error::InvalidScene("degenerate surface with zero area".into()));
        };
        let offset = normal.dot(vertices[0]);
        for v in &vertices {
            if (normal.dot(*v) - offset).abs() > GEOMETRY_TOL {
                return Err(Error::InvalidScene("surface vertices are not coplanar".into()));
            }
        }
        let m = vertices.len();
        for i in 0..m {
            let a = vertices[i];
            let b = vertices[(i + 1) % m];
            let c = vertices[(i + 2) % m];
            if (b - a).cross(c - b).dot(normal) < -GEOMETRY_TOL {
                return Err(Error::InvalidScene("surface polygon is not convex".into()));
            }
        }
        Ok(Surface {
            vertices,
            material,
            normal,
            offset,
        })
    }

    /// Axis-aligned rectangle spanning `a` and `b`, which must share one coordinate.
    pub fn rectangle(a: Vec3, b: Vec3, material: Material) -> Result<Self> {
        let flat: Vec<usize> = (0..3).filter(|&i| (a[i] - b[i]).abs() < GEOMETRY_TOL).collect();
        let verts = match flat.as_slice() {
            [0] => vec![
                Vec3::new(a.x, a.y, a.z),
                Vec3::new(a.x, b.y, a.z),
                Vec3::new(a.x, b.y, b.z),
                Vec3::new(a.x, a.y, b.z),
            ],
            [1] => vec![
                Vec3::new(a.x, a.y, a.z),
                Vec3::new(a.x, a.y, b.z),
                Vec3::new(b.x, a.y, b.z),
                Vec3::new(b.x, a.y, a.z),
            ],
            [2] => vec![
                Vec3::new(a.x, a.y, a.z),
                Vec3::new(b.x, a.y, a.z),
                Vec3::new(b.x, b.y, a.z),
                Vec3::new(a.x, b.y, a.z),
            ],
            _ => return Err(Error::InvalidScene("rectangle corners must differ in exactly two axes".into())),
        };
        Surface::new(verts, material)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn material(&self) -> &Material {
        &self.material
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Mirror image of `p` across the surface plane.
    pub fn mirror(&self, p: Vec3) -> Vec3 {
        p - self.normal * (2.0 * self.signed_distance(p))
    }

    /// Whether a point already on the plane lies inside the polygon.
    pub fn contains_planar(&self, p: Vec3, tol: f64) -> bool {
        let m = self.vertices.len();
        (0..m).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % m];
            let edge = b - a;
            let len = edge.norm();
            // signed in-plane distance of p from the edge line, positive inside
            edge.cross(p - a).dot(self.normal) / len >= -tol
        })
    }

    /// Parameter `t` in [0, 1] where segment `a -> b` crosses the plane, if it does.
    pub fn segment_plane_param(&self, a: Vec3, b: Vec3) -> Option<f64> {
        let da = self.signed_distance(a);
        let db = self.signed_distance(b);
        let denom = da - db;
        if denom == 0.0 {
            return None;
        }
        let t = da / denom;
        (0.0..=1.0).contains(&t).then_some(t)
    }

    /// Euclidean distance from `p` to the polygon.
    pub fn distance_to(&self, p: Vec3) -> f64 {
        let h = self.signed_distance(p);
        let q = p - self.normal * h;
        if self.contains_planar(q, 0.0) {
            return h.abs();
        }
        let m = self.vertices.len();
        (0..m)
            .map(|i| point_segment_distance(p, self.vertices[i], self.vertices[(i + 1) % m]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (a + ab * t).distance(p)
}

/// Transmitter plus reflecting surfaces inside a bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    surfaces: Vec<Surface>,
    bounding_box: Aabb,
    transmitter: Position,
}

impl SceneGeometry {
    pub fn new(surfaces: Vec<Surface>, bounding_box: Aabb, transmitter: Position) -> Result<Self> {
        if !bounding_box.strictly_contains(transmitter) {
            return Err(Error::InvalidScene(format!(
                "transmitter {transmitter:?} is not strictly inside the box"
            )));
        }
        let slack = bounding_box.expanded(GEOMETRY_TOL);
        for (i, s) in surfaces.iter().enumerate() {
            if s.vertices.iter().any(|v| !slack.contains(*v)) {
                return Err(Error::InvalidScene(format!("surface {i} leaves the bounding box")));
            }
        }
        Ok(SceneGeometry {
            surfaces,
            bounding_box,
            transmitter,
        })
    }

    /// Closed rectangular room with all six walls made of `material`.
    pub fn shoebox(size: Vec3, transmitter: Position, material: Material) -> Result<Self> {
        let bbox = Aabb::new(Vec3::ZERO, size)?;
        let (x, y, z) = (size.x, size.y, size.z);
        let walls = vec![
            Surface::rectangle(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, y, z), material)?,
            Surface::rectangle(Vec3::new(x, 0.0, 0.0), Vec3::new(x, y, z), material)?,
            Surface::rectangle(Vec3::new(0.0, 0.0, 0.0), Vec3::new(x, 0.0, z), material)?,
            Surface::rectangle(Vec3::new(0.0, y, 0.0), Vec3::new(x, y, z), material)?,
            Surface::rectangle(Vec3::new(0.0, 0.0, 0.0), Vec3::new(x, y, 0.0), material)?,
            Surface::rectangle(Vec3::new(0.0, 0.0, z), Vec3::new(x, y, z), material)?,
        ];
        SceneGeometry::new(walls, bbox, transmitter)
    }

    /// Desk-scale conference room: a 6 x 5 x 3 m shoebox.
    pub fn conference_room(material: Material) -> Result<Self> {
        SceneGeometry::shoebox(Vec3::new(6.0, 5.0, 3.0), Vec3::new(2.3, 1.9, 2.1), material)
    }

    /// The conference room with a 2.4 x 1.2 m table top at 0.75 m.
    pub fn furnished_conference_room(material: Material) -> Result<Self> {
        let mut scene = SceneGeometry::conference_room(material)?;
        scene
            .surfaces
            .push(Surface::rectangle(Vec3::new(1.8, 1.9, 0.75), Vec3::new(4.2, 3.1, 0.75), material)?);
        Ok(scene)
    }

    pub fn surfaces(&self) -> &[Surface] {
        &self.surfaces
    }

    pub fn bounding_box(&self) -> Aabb {
        self.bounding_box
    }

    pub fn transmitter(&self) -> Position {
        self.transmitter
    }

    /// Same geometry with every surface switched to `material`.
    pub fn with_material(&self, material: Material) -> Result<Self> {
        material.validate()?;
        let mut out = self.clone();
        for s in &mut out.surfaces {
            s.material = material;
        }
        Ok(out)
    }

    pub fn with_transmitter(&self, transmitter: Position) -> Result<Self> {
        SceneGeometry::new(self.surfaces.clone(), self.bounding_box, transmitter)
    }

    /// Whether segment `a -> b` is blocked by any surface away from its endpoints.
    pub fn segment_blocked(&self, a: Vec3, b: Vec3) -> bool {
        let len = a.distance(b);
        if len <= 2.0 * OCCLUSION_EPS {
            return false;
        }
        let eps = OCCLUSION_EPS / len;
        self.surfaces.iter().any(|s| match s.segment_plane_param(a, b) {
            Some(t) if t > eps && t < 1.0 - eps => s.contains_planar(a + (b - a) * t, GEOMETRY_TOL),
            _ => false,
        })
    }

    pub fn clearance(&self, p: Vec3) -> f64 {
        let walls = self.surfaces.iter().map(|s| s.distance_to(p)).fold(f64::INFINITY, f64::min);
        walls.min(p.distance(self.transmitter))
    }
}

/// A transmitter image and the surface sequence that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSource {
    pub position: Position,
    /// Surfaces in the order the physical path meets them, starting at the transmitter.
    pub surfaces: Vec<usize>,
    /// `chain[k]` is the image after the first `k` reflections; `chain[0]` is the transmitter.
    pub chain: Vec<Position>,
}

impl ImageSource {
    pub fn order(&self) -> usize {
        self.surfaces.len()
    }
}

/// The transmitter plus all mirror images up to `max_order` reflections,
/// excluding immediate repeats of the same surface.
pub fn enumerate_images(scene: &SceneGeometry, max_order: usize) -> Vec<ImageSource> {
    let root = ImageSource {
        position: scene.transmitter,
        surfaces: Vec::new(),
        chain: vec![scene.transmitter],
    };
    let mut out = vec![root];
    let mut frontier = 0..1;
    for _ in 0..max_order {
        let start = out.len();
        for idx in frontier.clone() {
            for (si, surface) in scene.surfaces.iter().enumerate() {
                if out[idx].surfaces.last() == Some(&si) {
                    continue;
                }
                let parent = &out[idx];
                let position = surface.mirror(parent.position);
                let mut surfaces = parent.surfaces.clone();
                surfaces.push(si);
                let mut chain = parent.chain.clone();
                chain.push(position);
                out.push(ImageSource { position, surfaces, chain });
            }
        }
        frontier = start..out.len();
    }
    out
}

/// One specular propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub order: usize,
    pub reflection_points: Vec<Position>,
    pub total_length: f64,
    pub gain: ComplexValue,
    pub arrival_direction: Direction,
    pub image_position: Position,
    /// Product of the reflection coefficients along the path.
    pub reflection_gain: ComplexValue,
    /// Reflecting surface indices, transmitter side first.
    pub surfaces: Vec<usize>,
}

/// Unfolds `image` into a physical path to `receiver`, if one exists.
pub fn trace_path(image: &ImageSource, receiver: Position, scene: &SceneGeometry, f: f64) -> Option<PathRecord> {
    let order = image.order();
    let mut points = vec![Vec3::ZERO; order];
    let mut from = receiver;
    for k in (0..order).rev() {
        let surface = &scene.surfaces[image.surfaces[k]];
        let target = image.chain[k + 1];
        let t = surface.segment_plane_param(from, target)?;
        if t <= 0.0 || t >= 1.0 {
            return None;
        }
        let q = from + (target - from) * t;
        if !surface.contains_planar(q, GEOMETRY_TOL) {
            return None;
        }
        points[k] = q;
        from = q;
    }

    // tx -> q_1 -> ... -> q_n -> rx
    let mut vertices = Vec::with_capacity(order + 2);
    vertices.push(scene.transmitter);
    vertices.extend_from_slice(&points);
    vertices.push(receiver);
    for leg in vertices.windows(2) {
        if leg[0].distance(leg[1]) <= OCCLUSION_EPS || scene.segment_blocked(leg[0], leg[1]) {
            return None;
        }
    }

    let mut reflection_gain = Complex64::new(1.0, 0.0);
    for k in 0..order {
        let surface = &scene.surfaces[image.surfaces[k]];
        let incoming = (vertices[k + 1] - vertices[k]).normalized()?;
        let cos_i = incoming.dot(surface.normal).abs().min(1.0);
        let angle = cos_i.acos();
        reflection_gain *= reflection_coefficient(&surface.material, angle, f).ok()?;
    }

    let total_length: f64 = vertices.windows(2).map(|l| l[0].distance(l[1])).sum();
    let gain = free_space_gain(total_length, f).ok()? * reflection_gain;
    let last = vertices[order];
    let arrival_direction = unit_to_direction(last - receiver).ok()?;
    Some(PathRecord {
        order,
        reflection_points: points,
        total_length,
        gain,
        arrival_direction,
        image_position: image.position,
        reflection_gain,
        surfaces: image.surfaces.clone(),
    })
}

/// Channel at `receiver` and its valid paths sorted by length.
pub fn simulate_channel(scene: &SceneGeometry, receiver: Position, f: f64, max_order: usize) -> Result<(ComplexValue, Vec<PathRecord>)> {
    let images = enumerate_images(scene, max_order);
    simulate_with_images(scene, &images, receiver, f)
}

pub(crate) fn simulate_with_images(
    scene: &SceneGeometry,
    images: &[ImageSource],
    receiver: Position,
    f: f64,
) -> Result<(ComplexValue, Vec<PathRecord>)> {
    if !(f > 0.0) {
        return domain("frequency must be positive");
    }
    if !scene.bounding_box.contains(receiver) {
        return domain(format!("receiver {receiver:?} outside the scene box"));
    }
    if receiver.distance(scene.transmitter) <= OCCLUSION_EPS {
        return domain("receiver coincides with the transmitter");
    }
    let mut paths: Vec<PathRecord> = images.iter().filter_map(|img| trace_path(img, receiver, scene, f)).collect();
    if paths.is_empty() {
        return Err(Error::Shadow {
            x: receiver.x,
            y: receiver.y,
            z: receiver.z,
        });
    }
    paths.sort_by(|a, b| a.total_length.total_cmp(&b.total_length));
    let gains: Vec<ComplexValue> = paths.iter().map(|p| p.gain).collect();
    Ok((multipath_sum(&gains)?, paths))
}

/// Re-evaluates known paths at another frequency (geometry is frequency independent).
pub fn resimulate_paths(scene: &SceneGeometry, paths: &[PathRecord], f: f64) -> Result<ComplexValue> {
    let mut total = Complex64::new(0.0, 0.0);
    for p in paths {
        let mut from = scene.transmitter;
        let mut refl = Complex64::new(1.0, 0.0);
        for (q, &si) in p.reflection_points.iter().zip(&p.surfaces) {
            let surface = scene
                .surfaces
                .get(si)
                .ok_or_else(|| Error::Domain(format!("path references unknown surface {si}")))?;
            let incoming = (*q - from).normalized().ok_or_else(|| Error::Domain("degenerate path".into()))?;
            let angle = incoming.dot(surface.normal).abs().min(1.0).acos();
            refl *= reflection_coefficient(&surface.material, angle, f)?;
            from = *q;
        }
        total += free_space_gain(p.total_length, f)? * refl;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Simulated measurements with a train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: SceneGeometry,
    pub frequency: FrequencyConfig,
    pub max_order: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub measurements: Vec<Measurement>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.measurements.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    /// Measurements per cubic foot of scene volume.
    pub fn density_per_cubic_foot(&self) -> f64 {
        measurement_density_per_ft3(self.measurements.len(), self.scene.bounding_box.volume())
    }

    /// Keeps only the first `fraction` of the training records (in record order);
    /// the test split is untouched.
    pub fn subsample_train(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return domain(format!("train subsample fraction {fraction} outside (0, 1]"));
        }
        let train = self.train_indices();
        let keep = ((train.len() as f64) * fraction).round().max(1.0) as usize;
        let kept: std::collections::BTreeSet<usize> = train.into_iter().take(keep).collect();
        let mut out = self.clone();
        out.measurements.clear();
        out.splits.clear();
        for (i, (m, s)) in self.measurements.iter().zip(&self.splits).enumerate() {
            if *s == Split::Test || kept.contains(&i) {
                out.measurements.push(m.clone());
                out.splits.push(*s);
            }
        }
        Ok(out)
    }
}

pub const CUBIC_FEET_PER_CUBIC_METER: f64 = 35.3147;

pub fn measurement_density_per_ft3(n: usize, volume_m3: f64) -> f64 {
    n as f64 / (volume_m3 * CUBIC_FEET_PER_CUBIC_METER)
}

/// Counter-based RNG stream `stream` under `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SPLIT_STREAM: u64 = u64::MAX;

/// Samples `n_receivers` valid receiver positions uniformly in the box and
/// simulates each one.
pub fn generate_dataset(
    scene: &SceneGeometry,
    n_receivers: usize,
    frequency: FrequencyConfig,
    max_order: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<Dataset> {
    frequency.validate()?;
    if n_receivers < 2 {
        return domain("need at least two receivers");
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return domain(format!("train fraction {train_fraction} outside (0, 1)"));
    }
    let images = enumerate_images(scene, max_order);
    let bbox = scene.bounding_box;
    let budget = 1000 * n_receivers;
    let mut attempts = 0usize;
    let mut measurements = Vec::with_capacity(n_receivers);
    for i in 0..n_receivers {
        let mut rng = stream_rng(seed, i as u64);
        loop {
            attempts += 1;
            if attempts > budget {
                return domain(format!("receiver placement failed after {budget} attempts"));
            }
            let p = Vec3::new(
                rng.random_range(bbox.min.x..bbox.max.x),
                rng.random_range(bbox.min.y..bbox.max.y),
                rng.random_range(bbox.min.z..bbox.max.z),
            );
            if !bbox.strictly_contains(p) || scene.clearance(p) < RECEIVER_CLEARANCE {
                continue;
            }
            match simulate_with_images(scene, &images, p, frequency.carrier_hz) {
                Ok((channel, paths)) => {
                    measurements.push(Measurement {
                        position: p,
                        channel,
                        doas: paths.iter().map(|p| p.arrival_direction).collect(),
                        paths: Some(paths),
                    });
                    break;
                }
                Err(Error::Shadow { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    let n_train = ((n_receivers as f64) * train_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n_receivers).collect();
    let mut rng = stream_rng(seed, SPLIT_STREAM);
    // Fisher-Yates with the split stream
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut splits = vec![Split::Test; n_receivers];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Ok(Dataset {
        scene: scene.clone(),
        frequency,
        max_order,
        seed,
        train_fraction,
        measurements,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One draw baked into the training channels.
    Fixed,
    /// A fresh draw on every request.
    PerDraw,
}

/// Complex white Gaussian noise for the training records of a dataset.
///
/// Noise power is the mean training channel power divided by `10^(snr/10)`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    clean: Vec<ComplexValue>,
    targets: Vec<usize>,
    sigma: f64,
    seed: u64,
}

impl NoiseStream {
    pub fn new(dataset: &Dataset, channel_snr_db: f64, seed: u64) -> Result<Self> {
        if channel_snr_db.is_nan() || channel_snr_db == f64::NEG_INFINITY {
            return domain("channel snr must be finite or +inf");
        }
        let targets = dataset.train_indices();
        let clean: Vec<ComplexValue> = dataset.measurements.iter().map(|m| m.channel).collect();
        let power = if targets.is_empty() {
            0.0
        } else {
            targets.iter().map(|&i| clean[i].norm_sqr()).sum::<f64>() / targets.len() as f64
        };
        let noise_power = if channel_snr_db == f64::INFINITY {
            0.0
        } else {
            power / 10f64.powf(channel_snr_db / 10.0)
        };
        Ok(NoiseStream {
            clean,
            targets,
            sigma: (noise_power / 2.0).sqrt(),
            seed,
        })
    }

    pub fn noise_power(&self) -> f64 {
        2.0 * self.sigma * self.sigma
    }

    /// Channels of every record with draw number `draw` added to the training records.
    pub fn draw(&self, draw: u64) -> Vec<ComplexValue> {
        let mut out = self.clean.clone();
        if self.sigma == 0.0 {
            return out;
        }
        let mut rng = stream_rng(self.seed, draw);
        for &i in &self.targets {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            out[i] += Complex64::new(re, im) * self.sigma;
        }
        out
    }
}

/// Noisy view of a dataset.
#[derive(Debug, Clone)]
pub enum NoisyData {
    Fixed(Dataset),
    PerDraw(NoiseStream),
}

pub fn add_noise(dataset: &Dataset, channel_snr_db: f64, mode: NoiseMode, seed: u64) -> Result<NoisyData> {
    let stream = NoiseStream::new(dataset, channel_snr_db, seed)?;
    Ok(match mode {
        NoiseMode::Fixed => NoisyData::Fixed(add_fixed_noise(dataset, &stream)),
        NoiseMode::PerDraw => NoisyData::PerDraw(stream),
    })
}

fn add_fixed_noise(dataset: &Dataset, stream: &NoiseStream) -> Dataset {
    let mut out = dataset.clone();
    for (m, h) in out.measurements.iter_mut().zip(stream.draw(0)) {
        m.channel = h;
    }
    out
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: String,
    pub materials: BTreeMap<String, Material>,
    pub surfaces: Vec<SurfaceEntry>,
    pub bounding_box: Aabb,
    pub transmitter: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEntry {
    pub vertices: Vec<Position>,
    pub material: String,
}

pub const SCENE_FORMAT_VERSION: &str = "1.0";

impl SceneFile {
    pub fn from_scene(scene: &SceneGeometry) -> SceneFile {
        let mut materials = BTreeMap::new();
        let mut names: Vec<(Material, String)> = Vec::new();
        let mut surfaces = Vec::new();
        for s in &scene.surfaces {
            let name = match names.iter().find(|(m, _)| m == &s.material) {
                Some((_, n)) => n.clone(),
                None => {
                    let n = format!("m{}", names.len());
                    names.push((s.material, n.clone()));
                    materials.insert(n.clone(), s.material);
                    n
                }
            };
            surfaces.push(SurfaceEntry {
                vertices: s.vertices.clone(),
                material: name,
            });
        }
        SceneFile {
            version: SCENE_FORMAT_VERSION.to_string(),
            materials,
            surfaces,
            bounding_box: scene.bounding_box,
            transmitter: scene.transmitter,
        }
    }

    pub fn to_scene(&self) -> Result<SceneGeometry> {
        crate::io::check_version(&self.version, SCENE_FORMAT_VERSION)?;
        Aabb::new(self.bounding_box.min, self.bounding_box.max).map_err(|e| Error::InvalidScene(e.to_string()))?;
        let mut surfaces = Vec::with_capacity(self.surfaces.len());
        for (i, entry) in self.surfaces.iter().enumerate() {
            let material = self
                .materials
                .get(&entry.material)
                .copied()
                .or_else(|| Material::named(&entry.material))
                .ok_or_else(|| Error::InvalidScene(format!("surface {i}: unknown material '{}'", entry.material)))?;
            surfaces.push(Surface::new(entry.vertices.clone(), material).map_err(|e| match e {
                Error::Domain(m) => Error::InvalidScene(format!("surface {i}: {m}")),
                other => other,
            })?);
        }
        SceneGeometry::new(surfaces, self.bounding_box, self.transmitter)
    }

    pub fn load(path: &Path) -> Result<SceneGeometry> {
        let text = std::fs::read_to_string(path)?;
        let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::InvalidScene(format!("{}: {e}", path.display())))?;
        file.to_scene()
    }

    pub fn save(scene: &SceneGeometry, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&SceneFile::from_scene(scene))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
