//! Dataset-level evaluations of a trained checkpoint on a synthetic preset.
//! Every shape is read through its canonical view, so results depend only
//! on the checkpoint, the dataset and the seeds given here.

use rayon::prelude::*;

use crate::apps::{FeatureKind, IndexEntry, RetrievalIndex};
use crate::distinct::threshold_regions;
use crate::error::{Error, Result};
use crate::geometry::{bounding_sphere_diameter, estimate_curvature, PointCloud, Vec3};
use crate::metrics::{best_permutation_accuracy, cluster_retention, fne_fpe, PreferenceMode, RetentionShape, RetentionTable};
use crate::pipeline::{canonical_view_indexed, evaluate_assignments, Checkpoint};
use crate::synth::Dataset;

/// Neighbors used for the curvature preference.
pub const CURVATURE_K: usize = 16;

/// One shape seen through the checkpoint.
pub struct ShapeView {
    pub cloud: PointCloud,
    /// Substructure flag of each view point.
    pub mask: Vec<bool>,
    pub d: Vec<f64>,
}

/// Canonical views of every record with their distinctiveness.
pub fn shape_views(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Vec<ShapeView>> {
    dataset
        .records
        .par_iter()
        .map(|r| {
            let (cloud, idx) = canonical_view_indexed(r, ckpt.config.n_points, ckpt.seed)?;
            let d = ckpt.distinctiveness(&cloud)?.values;
            let mask = idx.iter().map(|&i| r.substructure_mask[i]).collect();
            Ok(ShapeView { cloud, mask, d })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Separation {
    /// Best-permutation agreement of cluster ids with family labels.
    pub accuracy: f64,
    /// Mean over shapes of the mean `d` on substructure points.
    pub pod_mean: f64,
    /// Mean over shapes of the mean `d` elsewhere.
    pub body_mean: f64,
    /// Mean over shapes of the per-shape ratio.
    pub mean_ratio: f64,
}

impl Separation {
    pub fn ratio(&self) -> f64 {
        self.pod_mean / self.body_mean
    }
}

pub fn separation(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Separation> {
    let (_, truth) = dataset.family_labels();
    let pred = evaluate_assignments(ckpt, dataset)?;
    let c = ckpt.bank.c.max(truth.iter().max().map_or(0, |m| m + 1));
    let accuracy = best_permutation_accuracy(&pred, &truth, c)?;
    let views = shape_views(ckpt, dataset)?;
    let (mut pod, mut body, mut ratio, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for v in &views {
        let mean = |flag: bool| {
            let s: Vec<f64> = v.d.iter().zip(&v.mask).filter(|(_, &m)| m == flag).map(|(d, _)| *d).collect();
            (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
        };
        // shapes without substructure carry no ratio
        if let (Some(p), Some(b)) = (mean(true), mean(false)) {
            pod += p;
            body += b;
            ratio += p / b;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("no shape has both substructure and body points"));
    }
    let n = counted as f64;
    Ok(Separation {
        accuracy,
        pod_mean: pod / n,
        body_mean: body / n,
        mean_ratio: ratio / n,
    })
}

/// Retention accuracy averaged over `seeds`.
pub fn retention(ckpt: &Checkpoint, dataset: &Dataset, budgets: &[usize], modes: &[PreferenceMode], seeds: &[u64]) -> Result<RetentionTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("retention needs at least one seed"));
    }
    let views = shape_views(ckpt, dataset)?;
    let curvature = views
        .par_iter()
        .map(|v| estimate_curvature(&v.cloud, CURVATURE_K.min(v.cloud.len())))
        .collect::<Result<Vec<_>>>()?;
    let baseline = views.par_iter().map(|v| ckpt.assign(&v.cloud)).collect::<Result<Vec<_>>>()?;
    let shapes: Vec<RetentionShape> = views
        .iter()
        .enumerate()
        .map(|(i, v)| RetentionShape {
            cloud: &v.cloud,
            distinctiveness: &v.d,
            curvature: &curvature[i],
            baseline: baseline[i],
        })
        .collect();
    let mut total = vec![vec![0.0; budgets.len()]; modes.len()];
    for &s in seeds {
        let t = cluster_retention(&shapes, budgets, modes, s, |pc| ckpt.assign(pc))?;
        for (row, add) in total.iter_mut().zip(&t.accuracy) {
            for (a, b) in row.iter_mut().zip(add) {
                *a += b;
            }
        }
    }
    for row in total.iter_mut() {
        for a in row.iter_mut() {
            *a /= seeds.len() as f64;
        }
    }
    Ok(RetentionTable {
        budgets: budgets.to_vec(),
        modes: modes.to_vec(),
        accuracy: total,
    })
}

fn detected(v: &ShapeView, d_t: f64) -> Result<Vec<Vec3>> {
    Ok(threshold_regions(&v.d, d_t)?.into_iter().map(|i| v.cloud.points[i]).collect())
}

/// Mean `(FNE, FPE)` per radius of the points above `d_t`, with `det`
/// scored against the reference detections of `gt`. Both checkpoints must
/// share a seed and point count so that they see the same views.
pub fn detection_agreement(gt: &Checkpoint, det: &Checkpoint, dataset: &Dataset, d_t: f64, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    if gt.seed != det.seed || gt.config.n_points != det.config.n_points {
        return Err(Error::invalid("detection agreement needs checkpoints with the same seed and point count"));
    }
    let a = shape_views(gt, dataset)?;
    let b = shape_views(det, dataset)?;
    let per_shape = a
        .par_iter()
        .zip(&b)
        .map(|(va, vb)| {
            let (q_hat, q) = (detected(va, d_t)?, detected(vb, d_t)?);
            let diameter = bounding_sphere_diameter(&va.cloud);
            radii.iter().map(|&r| fne_fpe(&q_hat, &q, r, diameter)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_curves(&per_shape, radii.len()))
}

/// Mean `(FNE, FPE)` per radius of the points above `d_t` against the
/// substructure points of each view.
pub fn detection_vs_substructure(ckpt: &Checkpoint, dataset: &Dataset, d_t: f64, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    let views = shape_views(ckpt, dataset)?;
    let per_shape = views
        .par_iter()
        .filter(|v| v.mask.iter().any(|&m| m))
        .map(|v| {
            let gt: Vec<Vec3> = v.cloud.points.iter().zip(&v.mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let det = detected(v, d_t)?;
            let diameter = bounding_sphere_diameter(&v.cloud);
            radii.iter().map(|&r| fne_fpe(&gt, &det, r, diameter)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if per_shape.is_empty() {
        return Err(Error::invalid("no shape has substructure points"));
    }
    Ok(mean_curves(&per_shape, radii.len()))
}

fn mean_curves(per_shape: &[Vec<(f64, f64)>], n: usize) -> Vec<(f64, f64)> {
    let k = per_shape.len() as f64;
    (0..n)
        .map(|j| {
            let (a, b) = per_shape.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s[j].0, acc.1 + s[j].1));
            (a / k, b / k)
        })
        .collect()
}

/// Leave-one-out top-`k` same-family precision with the distinctive
/// feature and with the global feature, in that order.
pub fn retrieval_precision(ckpt: &Checkpoint, dataset: &Dataset, delta_d: f64, top_k: usize) -> Result<(f64, f64)> {
    if top_k == 0 || dataset.len() <= top_k {
        return Err(Error::invalid(format!("top-{top_k} retrieval over {} shapes", dataset.len())));
    }
    let entries = dataset
        .records
        .par_iter()
        .map(|r| {
            let (cloud, _) = canonical_view_indexed(r, ckpt.config.n_points, ckpt.seed)?;
            IndexEntry::encode(ckpt, &cloud, delta_d)
        })
        .collect::<Result<Vec<_>>>()?;
    let index = RetrievalIndex::new(entries.clone(), delta_d)?;
    let family = |id: &crate::geometry::ShapeId| {
        dataset.records.iter().find(|r| &r.shape_id == id).map(|r| r.family_name.as_str()).unwrap_or("")
    };
    let mut scores = [0.0; 2];
    for (slot, kind) in [FeatureKind::Distinctive, FeatureKind::Global].into_iter().enumerate() {
        for e in &entries {
            let q = match kind {
                FeatureKind::Distinctive => e.h.view(),
                FeatureKind::Global => e.g.view(),
            };
            let hits = index
                .search(q, top_k + 1, kind)?
                .into_iter()
                .filter(|(id, _)| *id != e.shape_id)
                .take(top_k)
                .filter(|(id, _)| family(id) == family(&e.shape_id))
                .count();
            scores[slot] += hits as f64 / top_k as f64;
        }
        scores[slot] /= entries.len() as f64;
    }
    Ok((scores[0], scores[1]))
}
