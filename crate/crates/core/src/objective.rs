//! Loss terms over global features. Features enter as f64 vectors;
//! gradients come back in f64 and callers cast them to the network type.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ShapeId};
use crate::rng::Stream;
use crate::synth::{resample_view, Dataset};
use crate::tensor::ops::{affine, affine_backward, softmax_temperature};
use crate::tensor::{GradientSet, ModelParameters, Real};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_MARGIN: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 3.0;
pub const DEFAULT_BETA: f64 = 1e-5;

fn unit_rows(p: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = p.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(Error::Degenerate("prototype row has zero norm".into()));
        }
        row /= n;
    }
    Ok(out)
}

/// `softmax(ḡ·g / τ)` over the prototype rows.
pub fn cluster_probability(g: ArrayView1<f64>, prototypes: ArrayView2<f64>, tau: f64) -> Result<Array1<f64>> {
    if g.len() != prototypes.ncols() {
        return Err(Error::ShapeMismatch {
            op: "cluster_probability",
            detail: format!("feature has {} channels, prototypes {}", g.len(), prototypes.ncols()),
        });
    }
    let protos = unit_rows(prototypes)?;
    softmax_temperature(protos.dot(&g).view(), tau)
}

/// Mean negative log-likelihood of the assigned clusters and its gradient
/// with respect to every `g`. Prototypes are constants.
pub fn cluster_loss(
    gs: &[Array1<f64>],
    assignments: &[usize],
    prototypes: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Vec<Array1<f64>>)> {
    if gs.is_empty() {
        return Err(Error::invalid("cluster loss over an empty batch"));
    }
    if gs.len() != assignments.len() {
        return Err(Error::invalid("one assignment per feature required"));
    }
    let protos = unit_rows(prototypes)?;
    let b = gs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(gs.len());
    for (g, &y) in gs.iter().zip(assignments) {
        if y >= protos.nrows() {
            return Err(Error::invalid(format!("assignment {y} out of range for {} clusters", protos.nrows())));
        }
        let p = cluster_probability(g.view(), protos.view(), tau)?;
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        // ∂(−log p_y)/∂g = (Σ_k p_k ḡ_k − ḡ_y) / τ
        let mut d = protos.t().dot(&p);
        d -= &protos.row(y);
        grads.push(d / (tau * b));
    }
    Ok((loss / b, grads))
}

/// Euclidean distance and its gradient with respect to `a` (zero when `a = b`).
fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let diff = &a - &b;
    let d = diff.dot(&diff).sqrt();
    if d > 0.0 {
        (d, diff / d)
    } else {
        (0.0, Array1::zeros(a.len()))
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveGrad {
    pub anchor: Array1<f64>,
    pub positive: Array1<f64>,
    pub negative: Array1<f64>,
    /// Whether the margin term is active (`D(g, g⁻) < λ`).
    pub hinge_active: bool,
}

/// `D(g, g⁺) + max(0, λ − D(g, g⁻))`.
pub fn contrastive_loss(
    g: ArrayView1<f64>,
    g_pos: ArrayView1<f64>,
    g_neg: ArrayView1<f64>,
    margin: f64,
) -> (f64, ContrastiveGrad) {
    let (dp, up) = distance(g, g_pos);
    let (dn, un) = distance(g, g_neg);
    let hinge_active = dn < margin;
    let mut anchor = up.clone();
    let positive = -up;
    let mut negative = Array1::zeros(g.len());
    let mut loss = dp;
    if hinge_active {
        loss += margin - dn;
        anchor -= &un;
        negative = un;
    }
    (
        loss,
        ContrastiveGrad {
            anchor,
            positive,
            negative,
            hinge_active,
        },
    )
}

/// `½ ‖g_j − ḡ_{y_j}‖²` averaged over the batch, and its gradient.
pub fn center_loss(
    gs: &[Array1<f64>],
    assignments: &[usize],
    prototypes: ArrayView2<f64>,
) -> Result<(f64, Vec<Array1<f64>>)> {
    if gs.is_empty() || gs.len() != assignments.len() {
        return Err(Error::invalid("center loss needs one assignment per feature"));
    }
    let b = gs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(gs.len());
    for (g, &y) in gs.iter().zip(assignments) {
        if y >= prototypes.nrows() {
            return Err(Error::invalid(format!("assignment {y} out of range")));
        }
        let d = g - &prototypes.row(y);
        loss += 0.5 * d.dot(&d);
        grads.push(d / b);
    }
    Ok((loss / b, grads))
}

/// Parameter names of the classification head.
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Adds a `M → K` affine classification head to `params`.
pub fn init_head<T: Real>(params: &mut ModelParameters<T>, m: usize, k: usize, rng: &mut Stream) {
    params.init_affine("head", m, k, rng);
}

/// Mean softmax cross-entropy of an affine head on `g`; returns the loss,
/// gradients with respect to each `g`, and head parameter gradients.
pub fn supervised_head_loss<T: Real>(
    params: &ModelParameters<T>,
    gs: &[Array1<f64>],
    labels: &[usize],
    k: usize,
) -> Result<(f64, Vec<Array1<f64>>, GradientSet<T>)> {
    if gs.is_empty() || gs.len() != labels.len() {
        return Err(Error::invalid("supervised loss needs one label per feature"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let w = params.matrix(HEAD_W)?.mapv(|v| v.f64());
    let bias = params.vector(HEAD_B)?.mapv(|v| v.f64());
    if w.ncols() != k {
        return Err(Error::ShapeMismatch {
            op: "supervised head",
            detail: format!("head has {} outputs, expected {k}", w.ncols()),
        });
    }
    let m = gs[0].len();
    let x = Array2::from_shape_fn((gs.len(), m), |(r, c)| gs[r][c]);
    let logits = affine(x.view(), w.view(), bias.view(), "head")?;
    let b = gs.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.dim());
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax_temperature(logits.row(r), 1.0)?;
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let mut d = p;
        d[y] -= 1.0;
        dlogits.row_mut(r).assign(&(d / b));
    }
    let g = affine_backward(x.view(), w.view(), dlogits.view(), true);
    let mut grads = GradientSet::default();
    grads.accumulate2(HEAD_W, g.dw.mapv(T::of));
    grads.accumulate1(HEAD_B, g.db.mapv(T::of));
    let dgs = g.dx.rows().into_iter().map(|r| r.to_owned()).collect();
    Ok((loss / b, dgs, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cluster_term: f64,
    pub contrastive_term: f64,
    /// `Σ w²` over decayed parameters (before scaling by β).
    pub weight_decay_term: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub margin: f64,
}

/// `cluster + α·contrastive + β·decay`.
pub fn joint_loss(
    cluster: f64,
    contrastive: f64,
    decay: f64,
    alpha: f64,
    beta: f64,
    tau: f64,
    margin: f64,
) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::invalid(format!("loss weights must be nonnegative (alpha {alpha}, beta {beta})")));
    }
    let total = cluster + alpha * contrastive + beta * decay;
    if !total.is_finite() {
        return Err(Error::NonFinite("joint loss".into()));
    }
    Ok(LossBreakdown {
        cluster_term: cluster,
        contrastive_term: contrastive,
        weight_decay_term: decay,
        total,
        alpha,
        beta,
        tau,
        margin,
    })
}

#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub anchor_cloud: PointCloud,
    pub positive_cloud: PointCloud,
    pub negative_cloud: PointCloud,
    pub anchor_id: ShapeId,
    pub negative_id: ShapeId,
    pub anchor_index: usize,
    pub negative_index: usize,
}

/// Anchor and positive are two fresh views of the anchor record; the
/// negative is a view of a uniformly drawn shape from another cluster.
pub fn build_triplet(
    dataset: &Dataset,
    anchor: usize,
    assignments: &[usize],
    n_points: usize,
    rng: &mut Stream,
) -> Result<TripletBatch> {
    if assignments.len() != dataset.len() {
        return Err(Error::invalid("one assignment per dataset record required"));
    }
    if anchor >= dataset.len() {
        return Err(Error::UnknownShape(format!("record index {anchor}")));
    }
    if dataset.len() < 2 {
        return Err(Error::invalid("triplets need at least two shapes"));
    }
    let negative = pick_negative(assignments, anchor, rng);
    let a = &dataset.records[anchor];
    let nrec = &dataset.records[negative];
    Ok(TripletBatch {
        anchor_cloud: resample_view(a, n_points, rng)?,
        positive_cloud: resample_view(a, n_points, rng)?,
        negative_cloud: resample_view(nrec, n_points, rng)?,
        anchor_id: a.shape_id.clone(),
        negative_id: nrec.shape_id.clone(),
        anchor_index: anchor,
        negative_index: negative,
    })
}

/// Uniform index from other clusters; any other shape if the anchor's
/// cluster holds everything.
pub fn pick_negative(assignments: &[usize], anchor: usize, rng: &mut Stream) -> usize {
    let y = assignments[anchor];
    let eligible: Vec<usize> = (0..assignments.len()).filter(|&j| assignments[j] != y).collect();
    if eligible.is_empty() {
        log::warn!("all shapes share one cluster; drawing an arbitrary negative");
        let j = rng.random_range(0..assignments.len() - 1);
        return if j >= anchor { j + 1 } else { j };
    }
    eligible[rng.random_range(0..eligible.len())]
}
