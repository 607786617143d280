//! Procedural shape families: an elongated body with wings, plus a
//! family-specific set of small pods. Families differ only in where (and
//! how many) pods are attached, which makes the pods the regions that tell
//! the families apart.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    self, add, augment, normalize_unit_sphere, surface_sample_with_faces,
    unit_sphere_transform, AugmentConfig, Mesh, PointCloud, ShapeId, Vec3,
};
use crate::rng::{self, tag, Stream};

/// Dimensions of the shared base body (pre-normalization units).
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams {
    /// Fuselage ellipsoid semi-axes (x is the long axis).
    pub fuselage: Vec3,
    /// Half span of the main wing along y.
    pub wing_half_span: f64,
    pub wing_chord: f64,
    pub wing_thickness: f64,
    /// x position of the wing center.
    pub wing_x: f64,
    pub tail_half_span: f64,
    pub tail_chord: f64,
    pub tail_x: f64,
}

impl Default for BodyParams {
    fn default() -> Self {
        BodyParams {
            fuselage: [1.0, 0.12, 0.12],
            wing_half_span: 1.0,
            wing_chord: 0.3,
            wing_thickness: 0.03,
            wing_x: 0.05,
            tail_half_span: 0.3,
            tail_chord: 0.15,
            tail_x: -0.85,
        }
    }
}

impl BodyParams {
    /// Half extents of the axis-aligned box around fuselage, wing and tail.
    pub fn half_extents(&self) -> Vec3 {
        [
            self.fuselage[0],
            self.fuselage[1].max(self.wing_half_span).max(self.tail_half_span),
            self.fuselage[2].max(self.wing_thickness * 0.5),
        ]
    }
}

/// Relative per-instance jitter ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseParams {
    /// Fractional jitter of body dimensions, e.g. 0.05 for ±5%.
    pub body_scale: f64,
    /// Absolute jitter of pod placement along x and y.
    pub placement: f64,
    /// Fractional jitter of pod size.
    pub pod_scale: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            body_scale: 0.05,
            placement: 0.03,
            pod_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFamilySpec {
    pub family_name: String,
    pub body: BodyParams,
    /// Pod centers; the pod count is the length of this list.
    pub pod_placement: Vec<Vec3>,
    /// Pod ellipsoid semi-axes.
    pub pod_size: Vec3,
    pub noise: NoiseParams,
}

impl ShapeFamilySpec {
    pub fn pod_count(&self) -> usize {
        self.pod_placement.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.body.half_extents();
        for (i, p) in self.pod_placement.iter().enumerate() {
            if (0..3).any(|a| p[a].abs() > 2.0 * h[a]) {
                return Err(Error::invalid(format!(
                    "family {}: pod {i} offset {:?} outside twice the body box",
                    self.family_name, p
                )));
            }
        }
        if self.pod_size.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("pod size must be positive"));
        }
        Ok(())
    }

    fn with_pods(name: &str, pods: Vec<Vec3>) -> Self {
        ShapeFamilySpec {
            family_name: name.to_string(),
            body: BodyParams::default(),
            pod_placement: pods,
            pod_size: [0.16, 0.07, 0.07],
            noise: NoiseParams::default(),
        }
    }

    /// Two pods under the wing.
    pub fn twin_pod() -> Self {
        Self::with_pods("twin-pod", vec![[0.1, -0.45, -0.11], [0.1, 0.45, -0.11]])
    }

    /// Four pods under the wing.
    pub fn quad_pod() -> Self {
        Self::with_pods(
            "quad-pod",
            vec![
                [0.1, -0.6, -0.11],
                [0.1, -0.28, -0.11],
                [0.1, 0.28, -0.11],
                [0.1, 0.6, -0.11],
            ],
        )
    }

    /// Two pods beside the rear fuselage.
    pub fn tail_pod() -> Self {
        Self::with_pods("tail-pod", vec![[-0.55, -0.22, 0.12], [-0.55, 0.22, 0.12]])
    }

    pub fn no_pod() -> Self {
        Self::with_pods("no-pod", vec![])
    }
}

/// Named family pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    TwinVsQuad,
    QuadVsTail,
}

impl Preset {
    pub fn families(self) -> Vec<ShapeFamilySpec> {
        match self {
            Preset::TwinVsQuad => vec![ShapeFamilySpec::twin_pod(), ShapeFamilySpec::quad_pod()],
            Preset::QuadVsTail => vec![ShapeFamilySpec::quad_pod(), ShapeFamilySpec::tail_pod()],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::TwinVsQuad => "twin-vs-quad",
            Preset::QuadVsTail => "quad-vs-tail",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twin-vs-quad" => Ok(Preset::TwinVsQuad),
            "quad-vs-tail" => Ok(Preset::QuadVsTail),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected twin-vs-quad or quad-vs-tail)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub shape_id: ShapeId,
    /// Evaluation-only label; never read by training.
    pub family_name: String,
    /// Mesh in the same normalized frame as `master_cloud`.
    pub mesh: Mesh,
    pub master_cloud: PointCloud,
    /// True for master points sampled on pod faces.
    pub substructure_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Working point count per shape; master clouds hold `4 * n_points`.
    pub n_points: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() < 2 {
            return Err(Error::invalid("a dataset needs at least two shapes"));
        }
        for r in &self.records {
            r.master_cloud.validate()?;
            if r.substructure_mask.len() != r.master_cloud.len() {
                return Err(Error::invalid(format!(
                    "{}: mask length {} != master size {}",
                    r.shape_id,
                    r.substructure_mask.len(),
                    r.master_cloud.len()
                )));
            }
        }
        Ok(())
    }

    /// Distinct family names in first-appearance order, and each record's
    /// index into that list.
    pub fn family_labels(&self) -> (Vec<String>, Vec<usize>) {
        let mut names: Vec<String> = Vec::new();
        let labels = self
            .records
            .iter()
            .map(|r| match names.iter().position(|n| *n == r.family_name) {
                Some(i) => i,
                None => {
                    names.push(r.family_name.clone());
                    names.len() - 1
                }
            })
            .collect();
        (names, labels)
    }

    /// FNV-1a digest over ids, labels, geometry and masks.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.n_points as u64);
        for r in &self.records {
            h.write(r.shape_id.0.as_bytes());
            h.write(r.family_name.as_bytes());
            for v in &r.mesh.vertices {
                v.iter().for_each(|c| h.write_u64(c.to_bits()));
            }
            for f in &r.mesh.faces {
                f.iter().for_each(|&i| h.write_u64(i as u64));
            }
            for p in &r.master_cloud.points {
                p.iter().for_each(|c| h.write_u64(c.to_bits()));
            }
            for &m in &r.substructure_mask {
                h.write(&[m as u8]);
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

fn ellipsoid_mesh(center: Vec3, axes: Vec3, stacks: usize, slices: usize) -> Mesh {
    let mut vertices = vec![[center[0] + axes[0], center[1], center[2]]];
    for i in 1..stacks {
        let theta = std::f64::consts::PI * i as f64 / stacks as f64;
        let (st, ct) = theta.sin_cos();
        for j in 0..slices {
            let phi = std::f64::consts::TAU * j as f64 / slices as f64;
            let (sp, cp) = phi.sin_cos();
            vertices.push([
                center[0] + axes[0] * ct,
                center[1] + axes[1] * st * cp,
                center[2] + axes[2] * st * sp,
            ]);
        }
    }
    vertices.push([center[0] - axes[0], center[1], center[2]]);
    let south = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + (j % slices);
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..(stacks - 1) {
        for j in 0..slices {
            faces.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            faces.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    for j in 0..slices {
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    Mesh { vertices, faces }
}

fn box_mesh(center: Vec3, half: Vec3) -> Mesh {
    let mut vertices = Vec::with_capacity(8);
    for &sx in &[-1.0, 1.0] {
        for &sy in &[-1.0, 1.0] {
            for &sz in &[-1.0, 1.0] {
                vertices.push(add(center, [sx * half[0], sy * half[1], sz * half[2]]));
            }
        }
    }
    // vertex index = 4*ix + 2*iy + iz
    let quads = [
        [0, 1, 3, 2],
        [4, 6, 7, 5],
        [0, 4, 5, 1],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 5, 7, 3],
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    Mesh { vertices, faces }
}

struct Instance {
    mesh: Mesh,
    pod_face: Vec<bool>,
}

fn jitter(rng: &mut Stream, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.random_range(-amount..amount)
    } else {
        0.0
    }
}

fn build_instance(spec: &ShapeFamilySpec, rng: &mut Stream) -> Option<Instance> {
    let b = &spec.body;
    let n = &spec.noise;
    let body_s = 1.0 + jitter(rng, n.body_scale);
    let span_s = 1.0 + jitter(rng, n.body_scale);
    let fus = [b.fuselage[0] * body_s, b.fuselage[1], b.fuselage[2]];
    let half_span = b.wing_half_span * span_s;

    let mut mesh = ellipsoid_mesh([0.0; 3], fus, 14, 20);
    mesh.append(&box_mesh(
        [b.wing_x, 0.0, 0.0],
        [b.wing_chord * 0.5, half_span, b.wing_thickness * 0.5],
    ));
    mesh.append(&box_mesh(
        [b.tail_x * body_s, 0.0, 0.0],
        [b.tail_chord * 0.5, b.tail_half_span, b.wing_thickness * 0.4],
    ));
    let body_faces = mesh.faces.len();

    let pod_s = 1.0 + jitter(rng, n.pod_scale);
    let size = [spec.pod_size[0] * pod_s, spec.pod_size[1] * pod_s, spec.pod_size[2] * pod_s];
    let mut centers: Vec<Vec3> = Vec::new();
    for p in &spec.pod_placement {
        let c = [
            p[0] + jitter(rng, n.placement),
            p[1] * span_s + jitter(rng, n.placement),
            p[2],
        ];
        centers.push(c);
    }
    // Reject overlapping geometry: pods must clear each other, the wing
    // slab and the fuselage by a positive gap.
    let r_side = size[1].max(size[2]);
    for (i, c) in centers.iter().enumerate() {
        for d in &centers[..i] {
            if (0..3).all(|a| (c[a] - d[a]).abs() <= 2.0 * size[a]) {
                return None;
            }
        }
        let wing_gap = c[2].abs() - size[2] - b.wing_thickness * 0.5;
        let under_wing = c[1].abs() <= half_span + r_side;
        let fus_gap = {
            let x = (c[0] / fus[0]).clamp(-1.0, 1.0);
            let radius = fus[1] * (1.0 - x * x).sqrt();
            (c[1] * c[1] + c[2] * c[2]).sqrt() - radius - r_side
        };
        if (under_wing && wing_gap <= 0.0 && c[0].abs() < b.wing_chord + size[0]) || fus_gap <= 0.0 {
            return None;
        }
        if c[1].abs() > half_span + r_side && c[2].abs() < size[2] {
            return None;
        }
    }
    for c in &centers {
        mesh.append(&ellipsoid_mesh(*c, size, 8, 12));
    }
    let pod_face = (0..mesh.faces.len()).map(|f| f >= body_faces).collect();
    Some(Instance { mesh, pod_face })
}

const MAX_ATTEMPTS: usize = 16;

fn make_record(
    spec: &ShapeFamilySpec,
    index: usize,
    master_points: usize,
    rng: &mut Stream,
) -> Result<DatasetRecord> {
    let shape_id = ShapeId(format!("{}-{index:04}", spec.family_name));
    for _ in 0..MAX_ATTEMPTS {
        let Some(Instance { mut mesh, pod_face }) = build_instance(spec, rng) else {
            continue;
        };
        let (cloud, faces) = surface_sample_with_faces(&mesh, master_points, rng, shape_id.clone())?;
        let (center, s) = unit_sphere_transform(&cloud)?;
        let master_cloud = normalize_unit_sphere(&cloud)?;
        mesh.transform(center, s);
        let substructure_mask = faces.iter().map(|&f| pod_face[f]).collect();
        return Ok(DatasetRecord {
            shape_id,
            family_name: spec.family_name.clone(),
            mesh,
            master_cloud,
            substructure_mask,
        });
    }
    Err(Error::Degenerate(format!(
        "{shape_id}: no valid instance after {MAX_ATTEMPTS} attempts"
    )))
}

/// Generates `count` instances of one family, each with `master_points`
/// surface samples. Record `i` draws from its own stream derived from `seed`.
pub fn generate_family(
    spec: &ShapeFamilySpec,
    count: usize,
    master_points: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let family_key = rng::derive_key(seed, &[fnv_str(&spec.family_name)]);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng::derive(family_key, &[i as u64, tag::GENERATE]);
            make_record(spec, i, master_points, &mut stream)
        })
        .collect()
}

fn fnv_str(s: &str) -> u64 {
    let mut h = Fnv::new();
    h.write(s.as_bytes());
    h.finish()
}

/// Generates every family, then shuffles the records deterministically.
/// Master clouds hold `4 * n_points` points.
pub fn build_dataset(specs: &[(ShapeFamilySpec, usize)], n_points: usize, seed: u64) -> Result<Dataset> {
    let total: usize = specs.iter().map(|(_, c)| c).sum();
    if total < 2 {
        return Err(Error::invalid("a dataset needs at least two shapes"));
    }
    if n_points == 0 {
        return Err(Error::invalid("point count must be positive"));
    }
    let mut records = Vec::with_capacity(total);
    for (spec, count) in specs {
        records.extend(generate_family(spec, *count, 4 * n_points, seed)?);
    }
    records.shuffle(&mut rng::derive(seed, &[tag::SHUFFLE]));
    Ok(Dataset { records, n_points })
}

pub fn build_preset(preset: Preset, count_per_family: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    let specs: Vec<_> = preset
        .families()
        .into_iter()
        .map(|s| (s, count_per_family))
        .collect();
    build_dataset(&specs, n_points, seed)
}

/// Default per-point jitter applied to resampled views.
pub const VIEW_JITTER_SIGMA: f64 = 0.01;
pub const VIEW_JITTER_CLIP: f64 = 0.05;

/// `n` master points drawn without replacement (jittered), with their master indices.
pub fn resample_view_indexed(
    record: &DatasetRecord,
    n: usize,
    rng: &mut Stream,
    jitter_sigma: f64,
) -> Result<(PointCloud, Vec<usize>)> {
    let master = &record.master_cloud;
    if n == 0 || n > master.len() {
        return Err(Error::invalid(format!(
            "{}: cannot draw {n} points from a master cloud of {}",
            record.shape_id,
            master.len()
        )));
    }
    let idx = rand::seq::index::sample(rng, master.len(), n).into_vec();
    let pc = master.subset(&idx);
    let cfg = AugmentConfig {
        jitter_sigma,
        jitter_clip: VIEW_JITTER_CLIP,
        ..AugmentConfig::identity()
    };
    Ok((augment(&pc, rng, &cfg), idx))
}

/// A fresh `n`-point view of the same shape.
pub fn resample_view(record: &DatasetRecord, n: usize, rng: &mut Stream) -> Result<PointCloud> {
    resample_view_indexed(record, n, rng, VIEW_JITTER_SIGMA).map(|(pc, _)| pc)
}

/// Mean nearest-neighbor spacing of a cloud (brute force).
pub fn mean_nn_spacing(points: &[Vec3]) -> f64 {
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| geometry::dist2(*p, *q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / points.len() as f64
}
