//! Per-point distinctiveness from refined features.

use std::str::FromStr;

use crate::encoder::{FeatureMatrix, Stage};
use crate::error::{Error, Result};
use crate::geometry::{dist2, knn, min_max_normalize, Mesh, PointCloud, ShapeId};
use crate::tensor::Real;

/// Raw ranges below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// How a feature row is reduced to one raw score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Max,
    Mean,
    L2,
    Top3Mean,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Reduction::Max),
            "mean" => Ok(Reduction::Mean),
            "l2" => Ok(Reduction::L2),
            "top3" => Ok(Reduction::Top3Mean),
            _ => Err(Error::invalid(format!("unknown reduction `{s}`"))),
        }
    }
}

impl Reduction {
    fn apply(self, row: &[f64]) -> f64 {
        match self {
            Reduction::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reduction::Mean => row.iter().sum::<f64>() / row.len() as f64,
            Reduction::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Reduction::Top3Mean => {
                let mut v = row.to_vec();
                v.sort_by(|a, b| b.total_cmp(a));
                let k = v.len().min(3);
                v[..k].iter().sum::<f64>() / k as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistinctivenessField {
    pub values: Vec<f64>,
    pub shape_id: ShapeId,
    /// Set when the raw field was constant and `values` are all zero.
    pub degenerate: bool,
}

/// Channel-max of each refined row, min-max normalized per shape.
pub fn extract<T: Real>(fr: &FeatureMatrix<T>, shape_id: ShapeId) -> Result<DistinctivenessField> {
    extract_with(fr, shape_id, Reduction::Max)
}

pub fn extract_with<T: Real>(fr: &FeatureMatrix<T>, shape_id: ShapeId, reduction: Reduction) -> Result<DistinctivenessField> {
    if fr.stage != Stage::Refined {
        return Err(Error::invalid("distinctiveness is extracted from refined features"));
    }
    let raw: Vec<f64> = fr
        .values
        .rows()
        .into_iter()
        .map(|r| reduction.apply(&r.iter().map(|v| v.f64()).collect::<Vec<_>>()))
        .collect();
    let (values, degenerate) = min_max_normalize(&raw, DEGENERATE_RANGE);
    Ok(DistinctivenessField {
        values,
        shape_id,
        degenerate,
    })
}

/// Per-vertex values from the 3 nearest samples (inverse squared-distance weights),
/// min-max normalized. The flag reports a constant result.
pub fn project_to_mesh(mesh: &Mesh, pc: &PointCloud, d: &[f64]) -> Result<(Vec<f64>, bool)> {
    let raw = project_raw(mesh, pc, d)?;
    Ok(min_max_normalize(&raw, DEGENERATE_RANGE))
}

/// Weighted per-vertex values before normalization.
pub fn project_raw(mesh: &Mesh, pc: &PointCloud, d: &[f64]) -> Result<Vec<f64>> {
    if d.len() != pc.len() {
        return Err(Error::invalid(format!("{} values for {} points", d.len(), pc.len())));
    }
    if pc.is_empty() {
        return Err(Error::invalid("cannot project from an empty cloud"));
    }
    let k = pc.len().min(3);
    Ok(mesh
        .vertices
        .iter()
        .map(|&v| {
            let nb = knn(&pc.points, v, k);
            let w: Vec<f64> = nb.iter().map(|&i| 1.0 / (dist2(v, pc.points[i]) + 1e-24)).collect();
            let total: f64 = w.iter().sum();
            nb.iter().zip(&w).map(|(&i, wi)| d[i] * wi).sum::<f64>() / total
        })
        .collect())
}

/// Indices with `d_i > d_t`.
pub fn threshold_regions(d: &[f64], d_t: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&d_t) {
        return Err(Error::invalid(format!("threshold must be in [0, 1) (got {d_t})")));
    }
    Ok((0..d.len()).filter(|&i| d[i] > d_t).collect())
}
