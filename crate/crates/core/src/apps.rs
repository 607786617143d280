//! Downstream uses of the distinctiveness field: shape retrieval, adaptive
//! Poisson-disk sampling and view selection.

use std::collections::HashMap;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::encoder::{FeatureMatrix, MIN_POINTS};
use crate::error::{Error, Result};
use crate::geometry::{
    bounding_sphere_diameter_points, centroid, cross, dist2, dot, knn, min_max_normalize, norm, normalize_unit_sphere, scale,
    sub, PointCloud, ShapeId, Vec3,
};
use crate::pipeline::{shape_key, Checkpoint};
use crate::rng::{self, tag, Stream};
use crate::tensor::Real;

/// Distinctiveness threshold of the retrieval feature.
pub const DEFAULT_DELTA_D: f64 = 0.7;
pub const DEFAULT_VIEWS: usize = 50;
pub const DEFAULT_RESOLUTION: usize = 64;
/// Smallest depth-buffer resolution accepted.
pub const MIN_RESOLUTION: usize = 16;
/// Depth tolerance of the visibility test, as a fraction of the scene diameter.
pub const DEPTH_TOLERANCE: f64 = 0.01;

/// Mean of the refined rows with `d_i > delta_d`. When no row qualifies,
/// the mean over the top decile of `d` is used instead.
pub fn distinctive_global_feature<T: Real>(fr: &FeatureMatrix<T>, d: &[f64], delta_d: f64) -> Result<Array1<f64>> {
    let n = fr.values.nrows();
    if d.len() != n {
        return Err(Error::invalid(format!("{} distinctiveness values for {n} feature rows", d.len())));
    }
    if n == 0 {
        return Err(Error::invalid("no feature rows"));
    }
    let mut rows: Vec<usize> = (0..n).filter(|&i| d[i] > delta_d).collect();
    if rows.is_empty() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        let k = n.div_ceil(10);
        log::info!("no point above distinctiveness {delta_d}; using the top {k} of {n}");
        rows = order[..k].to_vec();
        rows.sort_unstable();
    }
    let mut h = Array1::zeros(fr.values.ncols());
    for &i in &rows {
        for (acc, v) in h.iter_mut().zip(fr.values.row(i)) {
            *acc += v.f64();
        }
    }
    Ok(h / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub shape_id: ShapeId,
    /// Distinctiveness-guided feature.
    pub h: Array1<f64>,
    /// Normalized global feature.
    pub g: Array1<f64>,
}

impl IndexEntry {
    /// Both retrieval features of `pc` under `ckpt`.
    pub fn encode(ckpt: &Checkpoint, pc: &PointCloud, delta_d: f64) -> Result<Self> {
        let enc = ckpt.encode(pc)?;
        let d = crate::distinct::extract(&enc.refined, pc.shape_id.clone())?;
        let h = distinctive_global_feature(&enc.refined, &d.values, delta_d)?;
        let g = enc.global.vector.mapv(|v| v as f64);
        let gn = g.dot(&g).sqrt();
        Ok(IndexEntry {
            shape_id: pc.shape_id.clone(),
            h,
            g: g / gn,
        })
    }
}

/// Which stored feature a query is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Distinctive,
    Global,
}

/// Immutable shape index, sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    pub delta_d: f64,
}

impl RetrievalIndex {
    pub fn new(mut entries: Vec<IndexEntry>, delta_d: f64) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::invalid("retrieval index needs at least one entry"));
        };
        let (mh, mg) = (first.h.len(), first.g.len());
        for e in &entries {
            if e.h.len() != mh || e.g.len() != mg {
                return Err(Error::invalid(format!("entry `{}` has a different feature width", e.shape_id)));
            }
            if e.h.iter().chain(e.g.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("retrieval feature of `{}`", e.shape_id)));
            }
        }
        entries.sort_by(|a, b| a.shape_id.cmp(&b.shape_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].shape_id == w[1].shape_id) {
            return Err(Error::invalid(format!("duplicate shape id `{}`", w[0].shape_id)));
        }
        Ok(RetrievalIndex { entries, delta_d })
    }

    /// Encodes every cloud with `ckpt`.
    pub fn build(ckpt: &Checkpoint, clouds: &[PointCloud], delta_d: f64) -> Result<Self> {
        let entries = clouds
            .par_iter()
            .map(|pc| IndexEntry::encode(ckpt, pc, delta_d))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, delta_d)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids and distances of the `top_k` entries nearest to `query`
    /// (all of them if `top_k` exceeds the index), ties broken by id.
    pub fn search(&self, query: ArrayView1<f64>, top_k: usize, kind: FeatureKind) -> Result<Vec<(ShapeId, f64)>> {
        let width = match kind {
            FeatureKind::Distinctive => self.entries[0].h.len(),
            FeatureKind::Global => self.entries[0].g.len(),
        };
        if query.len() != width {
            return Err(Error::invalid(format!("query has {} channels, index has {width}", query.len())));
        }
        let mut ranked: Vec<(ShapeId, f64)> = self
            .entries
            .iter()
            .map(|e| {
                let f = match kind {
                    FeatureKind::Distinctive => &e.h,
                    FeatureKind::Global => &e.g,
                };
                let d2: f64 = f.iter().zip(query.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (e.shape_id.clone(), d2.sqrt())
            })
            .collect();
        // entries are id-sorted, so a stable sort breaks ties by id
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        ranked.truncate(top_k);
        Ok(ranked)
    }
}

/// Ranks the index by distance between distinctiveness-guided features.
pub fn retrieve(index: &RetrievalIndex, query: ArrayView1<f64>, top_k: usize) -> Result<Vec<(ShapeId, f64)>> {
    index.search(query, top_k, FeatureKind::Distinctive)
}

/// Disk radius at distinctiveness `d`: `r_max − (r_max − r_min)·d`.
pub fn poisson_radius(d: f64, r_min: f64, r_max: f64) -> f64 {
    r_max - (r_max - r_min) * d
}

/// Greedy variable-radius dart throwing over a seeded permutation of the
/// points. A point is accepted when no accepted point lies closer than the
/// smaller of the two radii. Returns accepted indices in ascending order.
pub fn adaptive_poisson_sample(pc: &PointCloud, d: &[f64], r_min: f64, r_max: f64, rng: &mut Stream) -> Result<Vec<usize>> {
    if !(r_min > 0.0 && r_min <= r_max && r_max.is_finite()) {
        return Err(Error::invalid(format!("need 0 < r_min <= r_max (got {r_min}, {r_max})")));
    }
    if d.len() != pc.len() {
        return Err(Error::invalid(format!("{} distinctiveness values for {} points", d.len(), pc.len())));
    }
    if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("distinctiveness must lie in [0, 1]"));
    }
    let radius: Vec<f64> = d.iter().map(|&v| poisson_radius(v, r_min, r_max)).collect();
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.shuffle(rng);

    // accepted points bucketed on a grid of cell size r_max
    let cell = |p: Vec3| [0, 1, 2].map(|k| (p[k] / r_max).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut accepted = Vec::new();
    for i in order {
        let p = pc.points[i];
        let c = cell(p);
        let mut ok = true;
        'search: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        let r = radius[i].min(radius[j]);
                        if dist2(p, pc.points[j]) < r * r {
                            ok = false;
                            break 'search;
                        }
                    }
                }
            }
        }
        if ok {
            grid.entry(c).or_default().push(i);
            accepted.push(i);
        }
    }
    accepted.sort_unstable();
    Ok(accepted)
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(a: Vec3, b: Vec3) -> Result<Self> {
        let min = [0, 1, 2].map(|k| a[k].min(b[k]));
        let max = [0, 1, 2].map(|k| a[k].max(b[k]));
        if min.iter().chain(&max).any(|v| !v.is_finite()) {
            return Err(Error::invalid("box corners must be finite"));
        }
        Ok(Aabb { min, max })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vec3 {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }
}

/// Two unit vectors completing `dir` to an orthonormal frame.
fn image_plane(dir: Vec3) -> (Vec3, Vec3) {
    let helper = if dir[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let u = cross(helper, dir);
    let u = scale(u, 1.0 / norm(u));
    (u, cross(dir, u))
}

/// Points not hidden behind others when looking along `-direction`
/// (orthographic depth buffer on a `resolution²` grid over the projected
/// extent). A point is visible when its depth is within 1% of the scene
/// diameter of the nearest depth in its cell.
pub fn visible_points(pc: &PointCloud, direction: Vec3, camera_distance: f64, resolution: usize) -> Result<Vec<bool>> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::invalid(format!("depth-buffer resolution must be at least {MIN_RESOLUTION}")));
    }
    let len = norm(direction);
    if !(len.is_finite() && len > 0.0) {
        return Err(Error::invalid("view direction must be a nonzero vector"));
    }
    if pc.is_empty() {
        return Ok(Vec::new());
    }
    let dir = scale(direction, 1.0 / len);
    let (u, v) = image_plane(dir);
    let c = pc.centroid();
    let eye = [0, 1, 2].map(|k| c[k] + camera_distance * dir[k]);
    let proj: Vec<(f64, f64, f64)> = pc
        .points
        .iter()
        .map(|&p| {
            let q = sub(p, eye);
            (dot(q, u), dot(q, v), -dot(q, dir))
        })
        .collect();
    let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(a, b, _) in &proj {
        lo_u = lo_u.min(a);
        hi_u = hi_u.max(a);
        lo_v = lo_v.min(b);
        hi_v = hi_v.max(b);
    }
    let extent = (hi_u - lo_u).max(hi_v - lo_v).max(1e-12);
    let res = resolution as f64;
    let cell_of = |a: f64, b: f64| {
        let i = (((a - lo_u) / extent * res) as usize).min(resolution - 1);
        let j = (((b - lo_v) / extent * res) as usize).min(resolution - 1);
        i * resolution + j
    };
    let mut nearest = vec![f64::INFINITY; resolution * resolution];
    for &(a, b, depth) in &proj {
        let k = cell_of(a, b);
        nearest[k] = nearest[k].min(depth);
    }
    let eps = DEPTH_TOLERANCE * bounding_sphere_diameter_points(&pc.points);
    Ok(proj.iter().map(|&(a, b, depth)| depth <= nearest[cell_of(a, b)] + eps).collect())
}

/// `n` directions on the upper hemisphere from a Fibonacci lattice.
pub fn hemisphere_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    /// Position in the candidate lattice.
    pub index: usize,
    pub direction: Vec3,
    pub camera_distance: f64,
    /// Look-at point; the camera sits at `target + camera_distance·direction`.
    pub target: Vec3,
    /// Mean distinctiveness of the visible points, or −1 if none is visible.
    pub score: f64,
    pub visible: usize,
}

impl ViewScore {
    pub fn eye(&self) -> Vec3 {
        [0, 1, 2].map(|k| self.target[k] + self.camera_distance * self.direction[k])
    }
}

/// Scores views from `n_views` lattice directions. The camera distance is
/// twice the bounding-sphere radius; it aims at the scene centroid, or at
/// the focus box center when given, in which case only the points inside
/// the box are scored. Best view first; scores equal up to rounding keep
/// lattice order.
pub fn select_views(pc: &PointCloud, d: &[f64], n_views: usize, focus: Option<&Aabb>, resolution: usize) -> Result<Vec<ViewScore>> {
    select_views_from(pc, d, &hemisphere_directions(n_views), focus, resolution)
}

/// [`select_views`] over explicit candidate directions.
pub fn select_views_from(pc: &PointCloud, d: &[f64], directions: &[Vec3], focus: Option<&Aabb>, resolution: usize) -> Result<Vec<ViewScore>> {
    if pc.is_empty() {
        return Err(Error::invalid("view selection needs a nonempty scene"));
    }
    if d.len() != pc.len() {
        return Err(Error::invalid(format!("{} distinctiveness values for {} points", d.len(), pc.len())));
    }
    if directions.is_empty() {
        return Err(Error::invalid("no candidate views"));
    }
    let camera_distance = bounding_sphere_diameter_points(&pc.points);
    let target = focus.map_or_else(|| centroid(&pc.points), Aabb::center);
    let inside: Vec<bool> = pc.points.iter().map(|&p| focus.is_none_or(|b| b.contains(p))).collect();
    let mut views = directions
        .par_iter()
        .enumerate()
        .map(|(index, &direction)| {
            let vis = visible_points(pc, direction, camera_distance, resolution)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..pc.len() {
                if vis[i] && inside[i] {
                    sum += d[i];
                    count += 1;
                }
            }
            let n = norm(direction);
            Ok(ViewScore {
                index,
                direction: scale(direction, 1.0 / n),
                camera_distance,
                target,
                score: if count == 0 { -1.0 } else { sum / count as f64 },
                visible: count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // scores equal to 12 decimals keep lattice order
    views.sort_by_key(|v| std::cmp::Reverse((v.score * 1e12).round() as i64));
    Ok(views)
}

/// Per-point distinctiveness over a scene larger than one shape. The scene
/// is covered by balls of `patch_diameter` centered on the occupied cells of
/// a grid with spacing of half the diameter. Each patch with at least 8 points is resampled to
/// the checkpoint's point count, normalized, and run through the network.
/// Values go back to every patch point by inverse squared-distance
/// interpolation from the three nearest samples; overlaps are averaged and
/// the result is min-max normalized. Points outside every usable patch get 0.
pub fn scene_distinctiveness(scene: &PointCloud, ckpt: &Checkpoint, patch_diameter: f64) -> Result<Vec<f64>> {
    if !(patch_diameter > 0.0 && patch_diameter.is_finite()) {
        return Err(Error::invalid(format!("patch diameter must be positive (got {patch_diameter})")));
    }
    if scene.is_empty() {
        return Err(Error::invalid("empty scene"));
    }
    let radius = 0.5 * patch_diameter;
    let step = radius;
    let mut lo = [f64::MAX; 3];
    for p in &scene.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
        }
    }
    // one seed per occupied grid cell, at the cell center
    let mut cells: Vec<[i64; 3]> = scene
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|k| ((p[k] - lo[k]) / step).floor() as i64))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let seeds: Vec<Vec3> = cells.iter().map(|c| [0, 1, 2].map(|k| lo[k] + (c[k] as f64 + 0.5) * step)).collect();
    let n = ckpt.config.n_points;
    let key = shape_key(&scene.shape_id);
    let patches: Vec<Option<(Vec<usize>, Vec<f64>)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(s, &center)| {
            let members: Vec<usize> = (0..scene.len())
                .filter(|&i| dist2(scene.points[i], center) <= radius * radius)
                .collect();
            if members.len() < MIN_POINTS {
                return Ok(None);
            }
            let mut r = rng::derive(ckpt.seed, &[key, s as u64, tag::PATCH]);
            let picks: Vec<usize> = if members.len() >= n {
                let mut m = members.clone();
                m.shuffle(&mut r);
                m.truncate(n);
                m
            } else {
                let mut m = members.clone();
                while m.len() < n {
                    m.push(members[r.random_range(0..members.len())]);
                }
                m
            };
            let sample = PointCloud::new(picks.iter().map(|&i| scene.points[i]).collect(), scene.shape_id.clone())?;
            let field = match normalize_unit_sphere(&sample).and_then(|pc| ckpt.distinctiveness(&pc)) {
                Ok(f) => f,
                Err(Error::Degenerate(msg)) => {
                    log::warn!("skipping patch {s}: {msg}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let values = members
                .iter()
                .map(|&i| {
                    let p = scene.points[i];
                    let nb = knn(&sample.points, p, 3.min(sample.len()));
                    let w: Vec<f64> = nb.iter().map(|&k| 1.0 / (dist2(p, sample.points[k]) + 1e-24)).collect();
                    let total: f64 = w.iter().sum();
                    nb.iter().zip(&w).map(|(&k, wk)| field.values[k] * wk).sum::<f64>() / total
                })
                .collect();
            Ok(Some((members, values)))
        })
        .collect::<Result<_>>()?;

    let mut sum = vec![0.0; scene.len()];
    let mut hits = vec![0usize; scene.len()];
    let mut skipped = 0;
    for p in &patches {
        match p {
            Some((members, values)) => {
                for (&i, &v) in members.iter().zip(values) {
                    sum[i] += v;
                    hits[i] += 1;
                }
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::debug!("{skipped} of {} patches skipped", patches.len());
    }
    let covered: Vec<usize> = (0..scene.len()).filter(|&i| hits[i] > 0).collect();
    if covered.is_empty() {
        return Err(Error::Degenerate("no patch holds enough points".into()));
    }
    let raw: Vec<f64> = covered.iter().map(|&i| sum[i] / hits[i] as f64).collect();
    let (normalized, _) = min_max_normalize(&raw, crate::distinct::DEGENERATE_RANGE);
    let mut out = vec![0.0; scene.len()];
    for (&i, v) in covered.iter().zip(normalized) {
        out[i] = v;
    }
    Ok(out)
}
