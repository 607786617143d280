//! Point-cloud and mesh primitives: normalization, augmentation,
//! neighborhood queries, sampling and curvature.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::rng::Stream;

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    dist2(a, b).sqrt()
}

/// Opaque shape identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ShapeId(pub String);

impl fmt::Display for ShapeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ShapeId {
    fn from(s: &str) -> Self {
        ShapeId(s.to_string())
    }
}

/// An ordered set of 3D points sampled from one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub shape_id: ShapeId,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, shape_id: impl Into<ShapeId>) -> Result<Self> {
        let pc = PointCloud {
            points,
            shape_id: shape_id.into(),
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!("point {i} of {}", self.shape_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    /// Cloud made of the points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            shape_id: self.shape_id.clone(),
        }
    }
}

impl From<String> for ShapeId {
    fn from(s: String) -> Self {
        ShapeId(s)
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len().max(1) as f64)
}

/// Triangle mesh.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i >= v) {
                return Err(Error::invalid(format!(
                    "face {f} references vertex out of range (V = {v})"
                )));
            }
            if self.face_area(f) <= 0.0 {
                return Err(Error::Degenerate(format!("face {f} has zero area")));
            }
        }
        Ok(())
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Appends `other`, offsetting its face indices.
    pub fn append(&mut self, other: &Mesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    /// Applies `x -> (x - center) * s` to every vertex.
    pub fn transform(&mut self, center: Vec3, s: f64) {
        for v in &mut self.vertices {
            *v = scale(sub(*v, center), s);
        }
    }
}

/// Centroid and scale that map a cloud into the unit sphere.
pub fn unit_sphere_transform(pc: &PointCloud) -> Result<(Vec3, f64)> {
    pc.validate()?;
    let c = pc.centroid();
    let r = pc
        .points
        .iter()
        .map(|p| dist(*p, c))
        .fold(0.0_f64, f64::max);
    if r <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "all points of {} coincide; cannot normalize",
            pc.shape_id
        )));
    }
    Ok((c, 1.0 / r))
}

/// Translates the centroid to the origin and scales the farthest point to norm 1.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    let (c, s) = unit_sphere_transform(pc)?;
    Ok(PointCloud {
        points: pc.points.iter().map(|p| scale(sub(*p, c), s)).collect(),
        shape_id: pc.shape_id.clone(),
    })
}

/// Ranges for on-the-fly training augmentation. All zero (and unit scale)
/// is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation about the up (z) axis is drawn from `[0, max_yaw)`.
    pub max_yaw: f64,
    /// Tilt about a random horizontal axis, in radians, drawn from `[-max_tilt, max_tilt]`.
    pub max_tilt: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Shift drawn per axis from `[-max_shift, max_shift]`.
    pub max_shift: f64,
    pub jitter_sigma: f64,
    /// Per-point jitter vectors longer than this are shortened to it.
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_yaw: std::f64::consts::TAU,
            max_tilt: 10f64.to_radians(),
            scale_min: 0.9,
            scale_max: 1.1,
            max_shift: 0.1,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_yaw: 0.0,
            max_tilt: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_shift: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    fn clamped(&self) -> Self {
        let scale_min = self.scale_min.max(1e-6);
        AugmentConfig {
            max_yaw: self.max_yaw.clamp(0.0, std::f64::consts::TAU),
            max_tilt: self.max_tilt.clamp(0.0, std::f64::consts::FRAC_PI_2),
            scale_min,
            scale_max: self.scale_max.max(scale_min),
            max_shift: self.max_shift.max(0.0),
            jitter_sigma: self.jitter_sigma.max(0.0),
            jitter_clip: self.jitter_clip.max(0.0),
        }
    }
}

fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Rotation matrix about a unit `axis` by `angle` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Random rigid-plus-scale transform followed by per-point jitter:
/// `x' = R (s x) + t + j`, with `R` a yaw about z composed with a small tilt.
pub fn augment(pc: &PointCloud, rng: &mut Stream, cfg: &AugmentConfig) -> PointCloud {
    let cfg = cfg.clamped();
    let yaw = uniform(rng, 0.0, cfg.max_yaw);
    let tilt_dir = uniform(rng, 0.0, std::f64::consts::TAU);
    let tilt = uniform(rng, -cfg.max_tilt, cfg.max_tilt);
    let s = uniform(rng, cfg.scale_min, cfg.scale_max);
    let shift = [
        uniform(rng, -cfg.max_shift, cfg.max_shift),
        uniform(rng, -cfg.max_shift, cfg.max_shift),
        uniform(rng, -cfg.max_shift, cfg.max_shift),
    ];
    let rot = mat_mul(
        &axis_angle([tilt_dir.cos(), tilt_dir.sin(), 0.0], tilt),
        &axis_angle([0.0, 0.0, 1.0], yaw),
    );
    let normal = (cfg.jitter_sigma > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma).unwrap());

    let points = pc
        .points
        .iter()
        .map(|&p| {
            let mut q = add(mat_vec(&rot, scale(p, s)), shift);
            if let Some(normal) = &normal {
                let mut j = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
                let n = norm(j);
                if n > cfg.jitter_clip {
                    j = if n > 0.0 { scale(j, cfg.jitter_clip / n) } else { j };
                }
                q = add(q, j);
            }
            q
        })
        .collect();
    PointCloud {
        points,
        shape_id: pc.shape_id.clone(),
    }
}

/// Greedy max-min (farthest point) subsampling starting at `start`.
/// Ties in the max-min distance go to the lowest index.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    farthest_point_sample_points(&pc.points, k, start)
}

pub fn farthest_point_sample_points(points: &[Vec3], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "farthest point sampling needs 1 <= K <= N (K = {k}, N = {n})"
        )));
    }
    if start >= n {
        return Err(Error::invalid(format!("start index {start} out of range")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        min_d[current] = -1.0;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if min_d[i] < 0.0 {
                continue;
            }
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(chosen)
}

fn sort_by_distance(points: &[Vec3], center: Vec3, idx: &mut [usize]) {
    idx.sort_by(|&a, &b| {
        dist2(points[a], center)
            .total_cmp(&dist2(points[b], center))
            .then(a.cmp(&b))
    });
}

/// Indices of the `k` nearest points to `center`, nearest first (ties by index).
pub fn knn(points: &[Vec3], center: Vec3, k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(*p, center), i))
        .collect();
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.truncate(k);
    }
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().map(|(_, i)| i).collect()
}

/// Brute-force ball query. Points with `‖p − center‖ ≤ r`, nearest first,
/// at most `max_k`; an empty ball yields the single nearest point.
pub fn radius_query_brute(points: &[Vec3], center: Vec3, r: f64, max_k: usize) -> Vec<usize> {
    let r2 = r * r;
    let mut idx: Vec<usize> = (0..points.len())
        .filter(|&i| dist2(points[i], center) <= r2)
        .collect();
    if idx.is_empty() {
        return knn(points, center, 1);
    }
    sort_by_distance(points, center, &mut idx);
    idx.truncate(max_k.max(1));
    idx
}

/// Ball query over a cloud (see [`radius_query_brute`] for the contract).
pub fn radius_query(pc: &PointCloud, center: Vec3, r: f64, max_k: usize) -> Vec<usize> {
    radius_query_brute(&pc.points, center, r, max_k)
}

/// Uniform-grid hash over a fixed point set for repeated ball queries at
/// radii up to the cell size.
pub struct GridIndex<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        GridIndex {
            points,
            cell,
            cells,
        }
    }

    fn key(p: Vec3, cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Same result as [`radius_query_brute`].
    pub fn radius_query(&self, center: Vec3, r: f64, max_k: usize) -> Vec<usize> {
        if r > self.cell {
            return radius_query_brute(self.points, center, r, max_k);
        }
        let r2 = r * r;
        let k = Self::key(center, self.cell);
        let mut idx = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        idx.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&i| dist2(self.points[i], center) <= r2),
                        );
                    }
                }
            }
        }
        if idx.is_empty() {
            return knn(self.points, center, 1);
        }
        sort_by_distance(self.points, center, &mut idx);
        idx.truncate(max_k.max(1));
        idx
    }
}

/// Raw surface variation scores below this range are treated as constant.
pub const CURVATURE_RANGE_TOL: f64 = 1e-2;

/// Surface variation `λ0 / (λ0 + λ1 + λ2)` from local PCA over the `k`
/// nearest neighbors of each point (the point itself included). Values lie
/// in `[0, 1/3]`; a neighborhood with no spread scores 0.
pub fn surface_variation(pc: &PointCloud, k: usize) -> Result<Vec<f64>> {
    if k < 4 {
        return Err(Error::invalid(format!("curvature needs k >= 4 (got {k})")));
    }
    let pts = &pc.points;
    Ok(pts
        .iter()
        .map(|&p| {
            let nb = knn(pts, p, k);
            let c = centroid(&nb.iter().map(|&i| pts[i]).collect::<Vec<_>>());
            let mut cov = [0.0; 9];
            for &i in &nb {
                let d = sub(pts[i], c);
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a * 3 + b] += d[a] * d[b];
                    }
                }
            }
            let (vals, _) = symmetric_eigen(&cov, 3, 1e-14);
            let vals: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
            let sum: f64 = vals.iter().sum();
            if sum <= 1e-300 {
                0.0
            } else {
                vals[0] / sum
            }
        })
        .collect())
}

/// Min-max normalizes to `[0, 1]`; a range below `tol` gives all zeros.
pub fn min_max_normalize(values: &[f64], tol: f64) -> (Vec<f64>, bool) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi - lo > tol) {
        return (vec![0.0; values.len()], true);
    }
    (
        values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
        false,
    )
}

/// Per-point curvature score normalized to `[0, 1]` per shape.
pub fn estimate_curvature(pc: &PointCloud, k: usize) -> Result<Vec<f64>> {
    let raw = surface_variation(pc, k)?;
    Ok(min_max_normalize(&raw, CURVATURE_RANGE_TOL).0)
}

/// Diameter of the centroid-centered bounding sphere (twice the largest
/// distance from the centroid). This over-approximates the minimal
/// enclosing sphere by at most a factor of two.
pub fn bounding_sphere_diameter(pc: &PointCloud) -> f64 {
    bounding_sphere_diameter_points(&pc.points)
}

pub fn bounding_sphere_diameter_points(points: &[Vec3]) -> f64 {
    let c = centroid(points);
    2.0 * points.iter().map(|p| dist(*p, c)).fold(0.0_f64, f64::max)
}

/// Area-weighted uniform surface sampling; also returns the source face of
/// every sample.
pub fn surface_sample_with_faces(
    mesh: &Mesh,
    n: usize,
    rng: &mut Stream,
    shape_id: impl Into<ShapeId>,
) -> Result<(PointCloud, Vec<usize>)> {
    if mesh.faces.iter().flatten().any(|&i| i >= mesh.vertices.len()) {
        return Err(Error::invalid("mesh face index out of range"));
    }
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate("mesh has zero surface area".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0.0..total);
        let f = cum.partition_point(|&c| c <= x).min(cum.len() - 1);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let [a, b, c] = mesh.faces[f];
        let (a, b, c) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
        points.push(add(a, add(scale(sub(b, a), u), scale(sub(c, a), v))));
        faces.push(f);
    }
    Ok((
        PointCloud {
            points,
            shape_id: shape_id.into(),
        },
        faces,
    ))
}

pub fn surface_sample(
    mesh: &Mesh,
    n: usize,
    rng: &mut Stream,
    shape_id: impl Into<ShapeId>,
) -> Result<PointCloud> {
    surface_sample_with_faces(mesh, n, rng, shape_id).map(|(pc, _)| pc)
}

/// Largest nearest-neighbor distance between any point of `a` and the set `b`,
/// symmetrized (Hausdorff distance).
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one_way = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min))
            .fold(0.0_f64, f64::max)
            .sqrt()
    };
    one_way(a, b).max(one_way(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points, "t").unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut r = rng::stream(seed);
        cloud(
            (0..n)
                .map(|_| {
                    [
                        r.random_range(-1.0..1.0),
                        r.random_range(-2.0..2.0),
                        r.random_range(0.0..3.0),
                    ]
                })
                .collect(),
        )
    }

    fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                [r * t.cos(), r * t.sin(), z]
            })
            .collect()
    }

    #[test]
    fn normalize_two_points() {
        let out = normalize_unit_sphere(&cloud(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent_and_unit() {
        let once = normalize_unit_sphere(&random_cloud(1, 100)).unwrap();
        let max = once.points.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(norm(once.centroid()) < 1e-6);
        let twice = normalize_unit_sphere(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            assert!(dist(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_coincident_points() {
        let err = normalize_unit_sphere(&cloud(vec![[1.0, 1.0, 1.0]; 3]));
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn non_finite_points_rejected() {
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], "x").is_err());
        assert!(PointCloud::new(vec![], "x").is_err());
    }

    #[test]
    fn augment_identity_and_determinism() {
        let pc = normalize_unit_sphere(&random_cloud(2, 50)).unwrap();
        let same = augment(&pc, &mut rng::stream(5), &AugmentConfig::identity());
        assert_eq!(same.points, pc.points);
        let a = augment(&pc, &mut rng::stream(9), &AugmentConfig::default());
        let b = augment(&pc, &mut rng::stream(9), &AugmentConfig::default());
        assert_eq!(a.points, b.points);
        assert_ne!(a.points, pc.points);
    }

    #[test]
    fn jitter_displacement_is_clipped() {
        let pc = cloud(vec![[0.0; 3]; 10_000]);
        let cfg = AugmentConfig {
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            ..AugmentConfig::identity()
        };
        let out = augment(&pc, &mut rng::stream(11), &cfg);
        let max = out.points.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        assert!(max <= 0.05 + 1e-15, "max displacement {max}");
        let big = AugmentConfig {
            jitter_sigma: 1.0,
            jitter_clip: 0.05,
            ..AugmentConfig::identity()
        };
        let out = augment(&pc, &mut rng::stream(12), &big);
        let max = out.points.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        assert!(max <= 0.05 + 1e-15);
    }

    #[test]
    fn fps_square_corners() {
        let pc = cloud(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ]);
        let mut got = farthest_point_sample(&pc, 4, 0).unwrap();
        got.sort();
        // Brute force: the 4-subset maximizing the minimum pairwise distance.
        let mut best = (f64::NEG_INFINITY, vec![]);
        for skip in 0..5 {
            let subset: Vec<usize> = (0..5).filter(|&i| i != skip).collect();
            let mut m = f64::INFINITY;
            for a in 0..4 {
                for b in (a + 1)..4 {
                    m = m.min(dist(pc.points[subset[a]], pc.points[subset[b]]));
                }
            }
            if m > best.0 {
                best = (m, subset);
            }
        }
        assert_eq!(got, best.1);
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_edge_cases() {
        let pc = random_cloud(3, 20);
        assert_eq!(farthest_point_sample(&pc, 1, 7).unwrap(), vec![7]);
        let mut all = farthest_point_sample(&pc, 20, 0).unwrap();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(farthest_point_sample(&pc, 21, 0).is_err());
        assert!(farthest_point_sample(&pc, 0, 0).is_err());
    }

    #[test]
    fn fps_is_permutation_stable() {
        let pc = random_cloud(4, 30);
        let perm: Vec<usize> = (0..30).rev().collect();
        let permuted = pc.subset(&perm);
        let a = farthest_point_sample(&pc, 10, 5).unwrap();
        // point 5 sits at position 24 after reversal
        let b = farthest_point_sample(&permuted, 10, 24).unwrap();
        let b_orig: Vec<usize> = b.iter().map(|&i| perm[i]).collect();
        assert_eq!(a, b_orig);
    }

    #[test]
    fn radius_query_examples() {
        let pc = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(radius_query(&pc, [0.0; 3], 1.5, 10), vec![0, 1]);
        assert_eq!(radius_query(&pc, [0.0; 3], 10.0, 3), vec![0, 1, 2]);
        assert_eq!(radius_query(&pc, [0.9, 0.0, 0.0], 0.05, 3), vec![1]);
        assert_eq!(radius_query(&pc, [0.0; 3], 10.0, 2), vec![0, 1]);
    }

    #[test]
    fn grid_matches_brute_force() {
        let pc = random_cloud(5, 400);
        let grid = GridIndex::new(&pc.points, 0.5);
        let mut r = rng::stream(6);
        for _ in 0..200 {
            let c = [
                r.random_range(-1.5..1.5),
                r.random_range(-2.5..2.5),
                r.random_range(-0.5..3.5),
            ];
            let radius = r.random_range(0.01..0.5);
            let brute = radius_query_brute(&pc.points, c, radius, 16);
            assert_eq!(grid.radius_query(c, radius, 16), brute);
            // exact ≤ r set when the ball is nonempty
            let set: Vec<usize> = (0..pc.len())
                .filter(|&i| dist(pc.points[i], c) <= radius)
                .collect();
            let full = radius_query_brute(&pc.points, c, radius, usize::MAX);
            if !set.is_empty() {
                let mut sorted = full.clone();
                sorted.sort();
                assert_eq!(sorted, set);
            }
        }
    }

    #[test]
    fn plane_has_zero_curvature() {
        let mut pts = vec![];
        for i in 0..10 {
            for j in 0..10 {
                pts.push([i as f64 * 0.1, j as f64 * 0.13, 0.0]);
            }
        }
        let raw = surface_variation(&cloud(pts), 8).unwrap();
        assert!(raw.iter().all(|&v| v.abs() < 1e-12));
        assert!(surface_variation(&random_cloud(1, 10), 3).is_err());
    }

    fn cube_samples() -> (Vec<Vec3>, Vec<usize>, Vec<usize>) {
        // 6x6 grid on each face of [-1,1]^3, with corners marked
        let mut pts: Vec<Vec3> = vec![];
        let steps: Vec<f64> = (0..7).map(|i| -1.0 + i as f64 / 3.0).collect();
        for &a in &steps {
            for &b in &steps {
                for &(axis, s) in &[(0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0), (2, -1.0), (2, 1.0)] {
                    let mut p = [0.0; 3];
                    p[axis] = s;
                    p[(axis + 1) % 3] = a;
                    p[(axis + 2) % 3] = b;
                    if !pts.iter().any(|q| dist(*q, p) < 1e-9) {
                        pts.push(p);
                    }
                }
            }
        }
        let corners = (0..pts.len())
            .filter(|&i| pts[i].iter().all(|c| c.abs() > 0.999))
            .collect();
        let faces = (0..pts.len())
            .filter(|&i| pts[i].iter().filter(|c| c.abs() > 0.999).count() == 1)
            .filter(|&i| pts[i].iter().filter(|c| c.abs() < 0.4).count() == 2)
            .collect();
        (pts, corners, faces)
    }

    #[test]
    fn cube_corners_score_above_faces() {
        let (pts, corners, faces) = cube_samples();
        let pc = cloud(pts);
        let raw = surface_variation(&pc, 10).unwrap();
        // Independent oracle: eigenvalues of the same covariance via nalgebra.
        for &i in corners.iter().chain(faces.iter()) {
            let nb = knn(&pc.points, pc.points[i], 10);
            let c = centroid(&nb.iter().map(|&j| pc.points[j]).collect::<Vec<_>>());
            let mut m = nalgebra::Matrix3::<f64>::zeros();
            for &j in &nb {
                let d = nalgebra::Vector3::from(sub(pc.points[j], c));
                m += d * d.transpose();
            }
            let ev = m.symmetric_eigenvalues();
            let mut ev: Vec<f64> = ev.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let expect = ev[0].max(0.0) / ev.iter().map(|v| v.max(0.0)).sum::<f64>();
            assert!((raw[i] - expect).abs() < 1e-9);
        }
        let corner_min = corners.iter().map(|&i| raw[i]).fold(f64::INFINITY, f64::min);
        let face_max = faces.iter().map(|&i| raw[i]).fold(0.0, f64::max);
        assert!(corner_min > face_max, "{corner_min} vs {face_max}");
        assert!(raw.iter().all(|&v| (0.0..=1.0 / 3.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn sphere_curvature_collapses_to_zero() {
        let pc = cloud(fibonacci_sphere(500));
        let raw = surface_variation(&pc, 12).unwrap();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(0.0, f64::max);
        assert!(hi - lo < CURVATURE_RANGE_TOL, "range {}", hi - lo);
        assert!(estimate_curvature(&pc, 12).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn curvature_is_rotation_invariant() {
        // jitter breaks the exact distance ties of the grid
        let (pts, _, _) = cube_samples();
        let mut r = rng::stream(5);
        let pc = cloud(pts.iter().map(|p| add(*p, [0, 1, 2].map(|_| r.random_range(-0.01..0.01)))).collect());
        let rot = axis_angle([0.48, 0.6, 0.64], 0.7);
        let rotated = cloud(pc.points.iter().map(|p| mat_vec(&rot, *p)).collect());
        let a = estimate_curvature(&pc, 10).unwrap();
        let b = estimate_curvature(&rotated, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn bounding_diameter_examples() {
        assert_eq!(bounding_sphere_diameter(&cloud(vec![[1.0, 2.0, 3.0]])), 0.0);
        let two = cloud(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert!((bounding_sphere_diameter(&two) - 3.0).abs() < 1e-12);
        let n = normalize_unit_sphere(&random_cloud(8, 200)).unwrap();
        assert!((bounding_sphere_diameter(&n) - 2.0).abs() < 1e-6);
    }

    fn triangle_mesh() -> Mesh {
        Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn surface_sample_single_triangle_centroid() {
        let pc = surface_sample(&triangle_mesh(), 10_000, &mut rng::stream(1), "tri").unwrap();
        let c = pc.centroid();
        let expect = [1.0 / 3.0, 1.0 / 3.0, 0.0];
        assert!((c[0] - expect[0]).abs() < 0.01 / 3.0 * 3.0);
        assert!((c[1] - expect[1]).abs() < 0.01);
        let again = surface_sample(&triangle_mesh(), 10_000, &mut rng::stream(1), "tri").unwrap();
        assert_eq!(pc, again);
    }

    #[test]
    fn surface_sample_area_ratio() {
        // areas 1 and 3
        let mesh = Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 5.0],
                [6.0, 0.0, 5.0],
                [0.0, 1.0, 5.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        assert!((mesh.face_area(0) - 1.0).abs() < 1e-12);
        assert!((mesh.face_area(1) - 3.0).abs() < 1e-12);
        let (_, faces) = surface_sample_with_faces(&mesh, 10_000, &mut rng::stream(2), "m").unwrap();
        let n1 = faces.iter().filter(|&&f| f == 1).count() as f64;
        let n0 = 10_000.0 - n1;
        // Expected counts 2500 / 7500; chi-square with 1 dof below the 0.1% critical value.
        let chi2 = (n0 - 2500.0).powi(2) / 2500.0 + (n1 - 7500.0).powi(2) / 7500.0;
        assert!(chi2 < 10.83, "chi2 {chi2}");
        assert!(((n1 / n0) - 3.0).abs() / 3.0 < 0.05);
    }

    #[test]
    fn surface_sample_rejects_zero_area() {
        let mesh = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        assert!(surface_sample(&mesh, 5, &mut rng::stream(1), "z").is_err());
        assert!(mesh.validate().is_err());
    }

    proptest! {
        #[test]
        fn radius_query_is_exact_ball(seed in 0u64..1000, r in 0.05f64..1.5) {
            let pc = random_cloud(seed, 60);
            let c = pc.points[0];
            let got = radius_query(&pc, c, r, usize::MAX);
            let mut expect: Vec<usize> = (0..60).filter(|&i| dist(pc.points[i], c) <= r).collect();
            expect.sort_by(|&a, &b| dist2(pc.points[a], c).total_cmp(&dist2(pc.points[b], c)).then(a.cmp(&b)));
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn normalization_preserves_order(seed in 0u64..1000) {
            let pc = random_cloud(seed, 20);
            let n = normalize_unit_sphere(&pc).unwrap();
            let (c, s) = unit_sphere_transform(&pc).unwrap();
            for (p, q) in pc.points.iter().zip(&n.points) {
                prop_assert!(dist(scale(sub(*p, c), s), *q) < 1e-12);
            }
        }
    }
}
