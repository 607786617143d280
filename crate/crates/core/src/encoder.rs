//! Point encoder: a two-level ball-query hierarchy with interpolation
//! upsampling, followed by channel-spatial attention and mean pooling.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::geometry::{dist2, farthest_point_sample_points, knn, radius_query_brute, sub, PointCloud, Vec3};
use crate::rng;
use crate::synth::Fnv;
use crate::tensor::ops::{self, affine, affine_backward, relu, relu_backward};
use crate::tensor::{GradientSet, ModelParameters, Real};
use rayon::prelude::*;

/// Smallest cloud the hierarchy accepts.
pub const MIN_POINTS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Output channels `M`.
    pub channels: usize,
    pub radius1: f64,
    pub radius2: f64,
    /// Ball-query truncation.
    pub max_neighbors: usize,
    /// Fraction of points kept as level-2 centroids.
    pub downsample: f64,
    pub interp_k: usize,
    pub l1_widths: Vec<usize>,
    pub l2_widths: Vec<usize>,
    /// Hidden widths of the upsampling stack; its last layer always has `channels` outputs.
    pub up_widths: Vec<usize>,
    /// Bottleneck width of the channel-gate MLP.
    pub attention_hidden: usize,
    /// `false` bypasses attention (`F^r = F`).
    pub attention: bool,
    /// Apply a relu to the encoder output.
    pub output_relu: bool,
    pub output_norm: OutputNorm,
}

/// Normalization of the last upsampling layer, applied before the output activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputNorm {
    None,
    /// Per-channel standardization with statistics over all points of the
    /// training batch, or stored dataset statistics at inference.
    #[default]
    Batch,
}

impl std::str::FromStr for OutputNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OutputNorm::None),
            "batch" => Ok(OutputNorm::Batch),
            _ => Err(Error::Config(format!("unknown output normalization `{s}`"))),
        }
    }
}

impl std::fmt::Display for OutputNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutputNorm::None => "none",
            OutputNorm::Batch => "batch",
        })
    }
}

/// Stored per-channel mean and variance of the output normalization.
pub const NORM_MEAN: &str = "up.norm.mean";
pub const NORM_VAR: &str = "up.norm.var";
/// Variance floor of the output normalization.
pub const NORM_EPS: f64 = 1e-5;

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 64,
            radius1: 0.2,
            radius2: 0.4,
            max_neighbors: 32,
            downsample: 0.25,
            interp_k: 3,
            l1_widths: vec![32, 32],
            l2_widths: vec![64, 64],
            up_widths: vec![64],
            attention_hidden: 16,
            attention: true,
            output_relu: true,
            output_norm: OutputNorm::default(),
        }
    }
}

impl EncoderConfig {
    /// Small widths for micro-instances and tests. The radii are widened so
    /// that balls over a few dozen points still hold several neighbors.
    pub fn micro(channels: usize) -> Self {
        EncoderConfig {
            channels,
            radius1: 0.5,
            radius2: 0.9,
            l1_widths: vec![8],
            l2_widths: vec![8],
            up_widths: vec![8],
            attention_hidden: (channels / 2).max(1),
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.max_neighbors == 0 || self.interp_k == 0 || self.attention_hidden == 0 {
            return bad("encoder channel, neighbor, interpolation and attention counts must be positive".into());
        }
        if !(self.radius1 > 0.0 && self.radius1 < self.radius2 && self.radius2 <= 2.0) {
            return bad(format!(
                "encoder radii must satisfy 0 < r1 < r2 <= 2 (got {} and {})",
                self.radius1, self.radius2
            ));
        }
        if !(self.downsample > 0.0 && self.downsample <= 1.0) {
            return bad(format!("downsample fraction must be in (0, 1] (got {})", self.downsample));
        }
        if self.l1_widths.is_empty() || self.l2_widths.is_empty() {
            return bad("level-1 and level-2 stacks need at least one layer".into());
        }
        if self.l1_widths.iter().chain(&self.l2_widths).chain(&self.up_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    fn c1(&self) -> usize {
        *self.l1_widths.last().unwrap()
    }

    fn c2(&self) -> usize {
        *self.l2_widths.last().unwrap()
    }

    fn up_layers(&self) -> Vec<usize> {
        let mut w = self.up_widths.clone();
        w.push(self.channels);
        w
    }
}

/// Random initial parameters. Attention output layers start at zero so
/// every gate is exactly 0.5.
pub fn init_parameters<T: Real>(cfg: &EncoderConfig, seed: u64) -> Result<ModelParameters<T>> {
    cfg.validate()?;
    let mut r = rng::derive(seed, &[rng::tag::INIT]);
    let mut p = ModelParameters::default();
    let mut stack = |p: &mut ModelParameters<T>, prefix: &str, mut fan_in: usize, widths: &[usize]| {
        for (i, &w) in widths.iter().enumerate() {
            p.init_affine(&format!("{prefix}.{i}"), fan_in, w, &mut r);
            fan_in = w;
        }
    };
    stack(&mut p, "l1", 3, &cfg.l1_widths);
    stack(&mut p, "l2", cfg.c1() + 3, &cfg.l2_widths);
    stack(&mut p, "up", cfg.c2() + cfg.c1(), &cfg.up_layers());
    if cfg.output_norm == OutputNorm::Batch {
        // a bias before per-channel centering has no effect
        p.remove(&format!("up.{}.b", cfg.up_widths.len()));
        p.insert(NORM_MEAN, Array1::<T>::zeros(cfg.channels).into_dyn());
        p.insert(NORM_VAR, Array1::<T>::ones(cfg.channels).into_dyn());
    }
    if cfg.attention {
        let (m, h) = (cfg.channels, cfg.attention_hidden);
        stack(&mut p, "att.c", m, &[h]);
        p.insert("att.c1.w", Array2::<T>::zeros((h, m)).into_dyn());
        p.insert("att.c1.b", Array1::<T>::zeros(m).into_dyn());
        p.insert("att.s.w", Array2::<T>::zeros((2, 1)).into_dyn());
        p.insert("att.s.b", Array1::<T>::zeros(1).into_dyn());
    }
    Ok(p)
}

/// Geometry-only precomputation for one cloud: ball memberships, centroids
/// and interpolation weights.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    pub n: usize,
    l1_offsets: Vec<usize>,
    l1_rel: Vec<Vec3>,
    pub centroids: Vec<usize>,
    l2_index: Vec<usize>,
    l2_offsets: Vec<usize>,
    l2_rel: Vec<Vec3>,
    interp_k: usize,
    interp_index: Vec<usize>,
    interp_weight: Vec<f64>,
}

/// Index of the lexicographically largest point, so the FPS start does not
/// depend on point order.
fn extreme_point(points: &[Vec3]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.partial_cmp(&points[best]) == Some(std::cmp::Ordering::Greater) {
            best = i;
        }
    }
    best
}

impl Neighborhoods {
    pub fn build(pc: &PointCloud, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let pts = &pc.points;
        let n = pts.len();
        if n < MIN_POINTS {
            return Err(Error::invalid(format!(
                "encoder needs at least {MIN_POINTS} points, `{}` has {n}",
                pc.shape_id
            )));
        }
        pc.validate()?;

        let balls = |centers: &mut dyn Iterator<Item = usize>, r: f64| {
            let (mut index, mut offsets, mut rel) = (vec![], vec![0], vec![]);
            for c in centers {
                for j in radius_query_brute(pts, pts[c], r, cfg.max_neighbors) {
                    index.push(j);
                    let d = sub(pts[j], pts[c]);
                    rel.push([d[0] / r, d[1] / r, d[2] / r]);
                }
                offsets.push(index.len());
            }
            (index, offsets, rel)
        };
        let (_, l1_offsets, l1_rel) = balls(&mut (0..n), cfg.radius1);

        let s = ((n as f64 * cfg.downsample).ceil() as usize).clamp(1, n);
        let centroids = farthest_point_sample_points(pts, s, extreme_point(pts))?;
        let (l2_index, l2_offsets, l2_rel) = balls(&mut centroids.iter().copied(), cfg.radius2);

        let cpts: Vec<Vec3> = centroids.iter().map(|&c| pts[c]).collect();
        let k = cfg.interp_k.min(s);
        let mut interp_index = Vec::with_capacity(n * k);
        let mut interp_weight = Vec::with_capacity(n * k);
        for p in pts {
            let nb = knn(&cpts, *p, k);
            let w: Vec<f64> = nb.iter().map(|&c| 1.0 / (dist2(*p, cpts[c]) + 1e-8)).collect();
            let total: f64 = w.iter().sum();
            interp_index.extend(nb);
            interp_weight.extend(w.iter().map(|v| v / total));
        }
        Ok(Neighborhoods {
            n,
            l1_offsets,
            l1_rel,
            centroids,
            l2_index,
            l2_offsets,
            l2_rel,
            interp_k: k,
            interp_index,
            interp_weight,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Refined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub values: Array2<T>,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature<T> {
    pub vector: Array1<T>,
    pub normalized: bool,
}

#[derive(Clone, Debug)]
pub struct ShapeEncoding<T> {
    pub features: FeatureMatrix<T>,
    pub refined: FeatureMatrix<T>,
    pub global: GlobalFeature<T>,
    /// Mean of the refined rows before normalization.
    pub pooled_mean: Array1<T>,
}

struct StackCache<T> {
    input: Array2<T>,
    outputs: Vec<Array2<T>>,
}

fn stack_forward<T: Real>(
    params: &ModelParameters<T>,
    prefix: &str,
    layers: usize,
    input: Array2<T>,
    last_relu: bool,
) -> Result<StackCache<T>> {
    let mut outputs: Vec<Array2<T>> = Vec::with_capacity(layers);
    for i in 0..layers {
        let name = format!("{prefix}.{i}");
        let x = outputs.last().unwrap_or(&input);
        let w = params.matrix(&format!("{name}.w"))?;
        let bias = format!("{name}.b");
        let y = if params.contains(&bias) {
            affine(x.view(), w, params.vector(&bias)?, &name)?
        } else {
            affine(x.view(), w, Array1::zeros(w.ncols()).view(), &name)?
        };
        outputs.push(if i + 1 < layers || last_relu { relu(&y) } else { y });
    }
    Ok(StackCache { input, outputs })
}

fn stack_backward<T: Real>(
    params: &ModelParameters<T>,
    prefix: &str,
    cache: &StackCache<T>,
    mut dy: Array2<T>,
    last_relu: bool,
    need_dx: bool,
    grads: &mut GradientSet<T>,
) -> Result<Array2<T>> {
    let layers = cache.outputs.len();
    for i in (0..layers).rev() {
        if i + 1 < layers || last_relu {
            dy = relu_backward(&cache.outputs[i], &dy);
        }
        let name = format!("{prefix}.{i}");
        let x = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
        let g = affine_backward(x.view(), params.matrix(&format!("{name}.w"))?, dy.view(), i > 0 || need_dx);
        grads.accumulate2(&format!("{name}.w"), g.dw);
        if params.contains(&format!("{name}.b")) {
            grads.accumulate1(&format!("{name}.b"), g.db);
        }
        dy = g.dx;
    }
    Ok(dy)
}

/// Per-channel shift and inverse deviation of the output normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl NormStats {
    /// Column statistics over the rows of all blocks.
    pub fn of<T: Real>(blocks: &[&Array2<T>]) -> Self {
        let m = blocks.first().map_or(0, |b| b.ncols());
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut mean = Array1::zeros(m);
        for b in blocks {
            for row in b.rows() {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v.f64();
                }
            }
        }
        mean /= n.max(1) as f64;
        let mut var = Array1::zeros(m);
        for b in blocks {
            for row in b.rows() {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v.f64() - mu).powi(2);
                }
            }
        }
        var /= n.max(1) as f64;
        NormStats { mean, var }
    }

    fn stored<T: Real>(params: &ModelParameters<T>) -> Result<Self> {
        Ok(NormStats {
            mean: params.vector(NORM_MEAN)?.mapv(|v| v.f64()),
            var: params.vector(NORM_VAR)?.mapv(|v| v.f64()),
        })
    }

    /// Writes these statistics into `params`.
    pub fn store<T: Real>(&self, params: &mut ModelParameters<T>) {
        params.tensors.insert(NORM_MEAN.into(), self.mean.mapv(T::of).into_dyn());
        params.tensors.insert(NORM_VAR.into(), self.var.mapv(T::of).into_dyn());
    }

    fn inv(&self) -> Array1<f64> {
        self.var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt())
    }
}

/// Normalized last layer `z`; `batch` marks statistics taken from the batch itself.
struct NormCache<T> {
    z: Array2<T>,
    inv: Array1<f64>,
    batch: bool,
}

struct AttentionCache<T> {
    /// Rows: mean pool, max pool of `F`.
    pooled: Array2<T>,
    arg_rows: Vec<usize>,
    hidden: Array2<T>,
    gate_c: Array1<T>,
    gated: Array2<T>,
    /// Columns: channel mean, channel max of `F ⊙ c`.
    spatial_in: Array2<T>,
    arg_cols: Vec<usize>,
    gate_s: Array1<T>,
}

fn attention_forward<T: Real>(params: &ModelParameters<T>, f: &Array2<T>) -> Result<(Array2<T>, AttentionCache<T>)> {
    let m = f.ncols();
    let (mx, arg_rows) = ops::max_rows(f.view());
    let mut pooled = Array2::zeros((2, m));
    pooled.row_mut(0).assign(&ops::mean_rows(f.view()));
    pooled.row_mut(1).assign(&mx);
    let hidden = relu(&affine(
        pooled.view(),
        params.matrix("att.c.0.w")?,
        params.vector("att.c.0.b")?,
        "att.c.0",
    )?);
    let z = affine(hidden.view(), params.matrix("att.c1.w")?, params.vector("att.c1.b")?, "att.c1")?;
    let gate_c = ops::sigmoid(&(&z.row(0) + &z.row(1)));
    let gated = f * &gate_c;

    let (cmax, arg_cols) = ops::max_cols(gated.view());
    let mut spatial_in = Array2::zeros((f.nrows(), 2));
    spatial_in.column_mut(0).assign(&ops::mean_cols(gated.view()));
    spatial_in.column_mut(1).assign(&cmax);
    let t = affine(spatial_in.view(), params.matrix("att.s.w")?, params.vector("att.s.b")?, "att.s")?;
    let gate_s = ops::sigmoid(&t.column(0).to_owned());
    let refined = &gated * &gate_s.view().insert_axis(Axis(1));
    Ok((
        refined,
        AttentionCache {
            pooled,
            arg_rows,
            hidden,
            gate_c,
            gated,
            spatial_in,
            arg_cols,
            gate_s,
        },
    ))
}

fn attention_backward<T: Real>(
    params: &ModelParameters<T>,
    f: &Array2<T>,
    c: &AttentionCache<T>,
    d_refined: &Array2<T>,
    grads: &mut GradientSet<T>,
) -> Result<Array2<T>> {
    let (n, m) = f.dim();
    let s_col = c.gate_s.view().insert_axis(Axis(1));
    let mut d_gated = d_refined * &s_col;
    let ds: Array1<T> = (d_refined * &c.gated).sum_axis(Axis(1));
    let dt = ops::sigmoid_backward(&c.gate_s, &ds).insert_axis(Axis(1));
    let g = affine_backward(c.spatial_in.view(), params.matrix("att.s.w")?, dt.view(), true);
    grads.accumulate2("att.s.w", g.dw);
    grads.accumulate1("att.s.b", g.db);
    let inv_m = T::of(1.0 / m as f64);
    for i in 0..n {
        let dm = g.dx[[i, 0]] * inv_m;
        d_gated.row_mut(i).mapv_inplace(|v| v + dm);
        d_gated[[i, c.arg_cols[i]]] += g.dx[[i, 1]];
    }

    let mut df = &d_gated * &c.gate_c;
    let dc: Array1<T> = (&d_gated * f).sum_axis(Axis(0));
    let dz = ops::sigmoid_backward(&c.gate_c, &dc);
    let dz2 = dz.broadcast((2, m)).unwrap().to_owned();
    let g1 = affine_backward(c.hidden.view(), params.matrix("att.c1.w")?, dz2.view(), true);
    grads.accumulate2("att.c1.w", g1.dw);
    grads.accumulate1("att.c1.b", g1.db);
    let dh = relu_backward(&c.hidden, &g1.dx);
    let g0 = affine_backward(c.pooled.view(), params.matrix("att.c.0.w")?, dh.view(), true);
    grads.accumulate2("att.c.0.w", g0.dw);
    grads.accumulate1("att.c.0.b", g0.db);
    df += &ops::mean_rows_backward(n, &g0.dx.row(0).to_owned());
    for (ch, &r) in c.arg_rows.iter().enumerate() {
        df[[r, ch]] += g0.dx[[1, ch]];
    }
    Ok(df)
}

/// Everything the backward pass needs from one forward pass.
pub struct EncoderCache<T> {
    lower: Lower<T>,
    out_norm: Option<NormCache<T>>,
    features: Array2<T>,
    att: Option<AttentionCache<T>>,
    global: Array1<T>,
    norm: f64,
}

impl<T: Real> EncoderCache<T> {
    /// Hash of every branch decision taken (relu signs, arg-max choices).
    pub fn signature(&self) -> u64 {
        let mut h = Fnv::new();
        let mut signs = |a: &Array2<T>| {
            for v in a.iter() {
                h.write(&[(*v > T::zero()) as u8]);
            }
        };
        for s in [&self.lower.l1, &self.lower.l2, &self.lower.up] {
            for o in &s.outputs {
                signs(o);
            }
        }
        if let Some(n) = &self.out_norm {
            signs(&n.z);
        }
        if let Some(a) = &self.att {
            signs(&a.hidden);
        }
        for v in self.lower.arg1.iter().chain(self.lower.arg2.iter()) {
            h.write(&v.to_le_bytes());
        }
        if let Some(a) = &self.att {
            for &v in a.arg_rows.iter().chain(&a.arg_cols) {
                h.write_u64(v as u64);
            }
        }
        h.finish()
    }
}

/// Activations below the output normalization.
struct Lower<T> {
    nb: Neighborhoods,
    l1: StackCache<T>,
    arg1: Array2<u32>,
    l2: StackCache<T>,
    arg2: Array2<u32>,
    up: StackCache<T>,
}

impl<T: Real> Lower<T> {
    fn output(&self) -> &Array2<T> {
        self.up.outputs.last().unwrap()
    }
}

fn lower_forward<T: Real>(params: &ModelParameters<T>, pc: &PointCloud, cfg: &EncoderConfig) -> Result<Lower<T>> {
    let nb = Neighborhoods::build(pc, cfg)?;
    let (l1, arg1, l2, arg2, up) = encode_cached(params, &nb, cfg)?;
    Ok(Lower { nb, l1, arg1, l2, arg2, up })
}

/// Normalization and activation on top of the last upsampling layer.
fn output_head<T: Real>(cfg: &EncoderConfig, y: &Array2<T>, stats: Option<&NormStats>, batch: bool) -> (Array2<T>, Option<NormCache<T>>) {
    let Some(stats) = stats else {
        return (y.clone(), None);
    };
    let inv = stats.inv();
    let mut z = y.clone();
    for (c, mut col) in z.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| T::of((v.f64() - stats.mean[c]) * inv[c]));
    }
    let f = if cfg.output_relu { relu(&z) } else { z.clone() };
    (f, Some(NormCache { z, inv, batch }))
}

#[allow(clippy::type_complexity)]
fn encode_cached<T: Real>(
    params: &ModelParameters<T>,
    nb: &Neighborhoods,
    cfg: &EncoderConfig,
) -> Result<(StackCache<T>, Array2<u32>, StackCache<T>, Array2<u32>, StackCache<T>)> {
    let x1 = Array2::from_shape_fn((nb.l1_rel.len(), 3), |(r, c)| T::of(nb.l1_rel[r][c]));
    let l1 = stack_forward(params, "l1", cfg.l1_widths.len(), x1, true)?;
    let (f1, arg1) = ops::segment_max(l1.outputs.last().unwrap().view(), &nb.l1_offsets)?;

    let c1 = cfg.c1();
    let mut x2 = Array2::zeros((nb.l2_index.len(), c1 + 3));
    for (r, (&j, rel)) in nb.l2_index.iter().zip(&nb.l2_rel).enumerate() {
        let mut row = x2.row_mut(r);
        row.slice_mut(ndarray::s![..c1]).assign(&f1.row(j));
        for k in 0..3 {
            row[c1 + k] = T::of(rel[k]);
        }
    }
    let l2 = stack_forward(params, "l2", cfg.l2_widths.len(), x2, true)?;
    let (f2, arg2) = ops::segment_max(l2.outputs.last().unwrap().view(), &nb.l2_offsets)?;

    let c2 = cfg.c2();
    let mut x3 = Array2::zeros((nb.n, c2 + c1));
    for i in 0..nb.n {
        let mut row = x3.row_mut(i);
        for k in 0..nb.interp_k {
            let (c, w) = (nb.interp_index[i * nb.interp_k + k], T::of(nb.interp_weight[i * nb.interp_k + k]));
            row.slice_mut(ndarray::s![..c2]).scaled_add(w, &f2.row(c));
        }
        row.slice_mut(ndarray::s![c2..]).assign(&f1.row(i));
    }
    let last_relu = cfg.output_relu && cfg.output_norm == OutputNorm::None;
    let up = stack_forward(params, "up", cfg.up_layers().len(), x3, last_relu)?;
    Ok((l1, arg1, l2, arg2, up))
}

fn stored_stats<T: Real>(params: &ModelParameters<T>, cfg: &EncoderConfig) -> Result<Option<NormStats>> {
    match cfg.output_norm {
        OutputNorm::None => Ok(None),
        OutputNorm::Batch => NormStats::stored(params).map(Some),
    }
}

/// Output-normalization statistics over the points of all `clouds`.
pub fn output_statistics<T: Real>(params: &ModelParameters<T>, clouds: &[PointCloud], cfg: &EncoderConfig) -> Result<NormStats> {
    let lower: Vec<Lower<T>> = clouds.par_iter().map(|pc| lower_forward(params, pc, cfg)).collect::<Result<_>>()?;
    let ys: Vec<&Array2<T>> = lower.iter().map(|l| l.output()).collect();
    Ok(NormStats::of(&ys))
}

/// Raw per-point features `F` (`N×M`).
pub fn encode_per_point<T: Real>(params: &ModelParameters<T>, pc: &PointCloud, cfg: &EncoderConfig) -> Result<FeatureMatrix<T>> {
    let lower = lower_forward(params, pc, cfg)?;
    let (values, _) = output_head(cfg, lower.output(), stored_stats(params, cfg)?.as_ref(), false);
    Ok(FeatureMatrix {
        values,
        stage: Stage::Raw,
    })
}

/// Refined features `F^r = F ⊙ c ⊙ s`. Without attention parameters (the
/// ablation) this is the identity.
pub fn attention_refine<T: Real>(params: &ModelParameters<T>, f: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if f.stage != Stage::Raw {
        return Err(Error::invalid("attention expects raw features"));
    }
    let values = if params.contains("att.s.w") {
        attention_forward(params, &f.values)?.0
    } else {
        f.values.clone()
    };
    Ok(FeatureMatrix {
        values,
        stage: Stage::Refined,
    })
}

/// Unit-norm mean of the refined rows, plus the mean itself.
pub fn global_pool<T: Real>(fr: &FeatureMatrix<T>) -> Result<(GlobalFeature<T>, Array1<T>)> {
    if fr.values.nrows() == 0 {
        return Err(Error::invalid("cannot pool an empty feature matrix"));
    }
    let mean = ops::mean_rows(fr.values.view());
    let (vector, _) = ops::l2_normalize(mean.view())?;
    Ok((
        GlobalFeature {
            vector,
            normalized: true,
        },
        mean,
    ))
}

pub fn forward_shape<T: Real>(params: &ModelParameters<T>, pc: &PointCloud, cfg: &EncoderConfig) -> Result<ShapeEncoding<T>> {
    Ok(forward_train(params, pc, cfg)?.0)
}

/// Forward pass that also keeps the activations for [`backward`].
/// The output normalization uses the stored statistics.
pub fn forward_train<T: Real>(
    params: &ModelParameters<T>,
    pc: &PointCloud,
    cfg: &EncoderConfig,
) -> Result<(ShapeEncoding<T>, EncoderCache<T>)> {
    let lower = lower_forward(params, pc, cfg)?;
    let stats = stored_stats(params, cfg)?;
    finish(params, pc, cfg, lower, stats.as_ref(), false)
}

/// Forward pass over a training batch. With batch normalization the
/// statistics are taken over all points of `clouds`; otherwise every cloud
/// is encoded independently.
#[allow(clippy::type_complexity)]
pub fn forward_batch<T: Real>(
    params: &ModelParameters<T>,
    clouds: &[&PointCloud],
    cfg: &EncoderConfig,
) -> Result<Vec<(ShapeEncoding<T>, EncoderCache<T>)>> {
    if cfg.output_norm == OutputNorm::None {
        return clouds.par_iter().map(|pc| forward_train(params, pc, cfg)).collect();
    }
    let lower: Vec<Lower<T>> = clouds.par_iter().map(|pc| lower_forward(params, pc, cfg)).collect::<Result<_>>()?;
    let stats = NormStats::of(&lower.iter().map(|l| l.output()).collect::<Vec<_>>());
    lower
        .into_par_iter()
        .zip(clouds.par_iter())
        .map(|(l, pc)| finish(params, pc, cfg, l, Some(&stats), true))
        .collect()
}

fn finish<T: Real>(
    params: &ModelParameters<T>,
    pc: &PointCloud,
    cfg: &EncoderConfig,
    lower: Lower<T>,
    stats: Option<&NormStats>,
    batch: bool,
) -> Result<(ShapeEncoding<T>, EncoderCache<T>)> {
    let (f, out_norm) = output_head(cfg, lower.output(), stats, batch);
    let (refined, att) = if params.contains("att.s.w") {
        let (r, c) = attention_forward(params, &f)?;
        (r, Some(c))
    } else {
        (f.clone(), None)
    };
    if refined.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("encoder output for `{}`", pc.shape_id)));
    }
    let refined = FeatureMatrix {
        values: refined,
        stage: Stage::Refined,
    };
    let mean = ops::mean_rows(refined.values.view());
    let (vector, norm) = ops::l2_normalize(mean.view())
        .map_err(|_| Error::Degenerate(format!("global feature of `{}` is zero", pc.shape_id)))?;
    let enc = ShapeEncoding {
        features: FeatureMatrix {
            values: f.clone(),
            stage: Stage::Raw,
        },
        refined,
        global: GlobalFeature {
            vector: vector.clone(),
            normalized: true,
        },
        pooled_mean: mean,
    };
    let cache = EncoderCache {
        lower,
        out_norm,
        features: f,
        att,
        global: vector,
        norm,
    };
    Ok((enc, cache))
}

/// Gradient with respect to the last upsampling layer before normalization,
/// or to the encoder output when there is none. Batch-normalized caches
/// return the gradient at the normalized values instead.
fn upper_backward<T: Real>(
    params: &ModelParameters<T>,
    cfg: &EncoderConfig,
    cache: &EncoderCache<T>,
    d_global: &Array1<T>,
    grads: &mut GradientSet<T>,
) -> Result<Array2<T>> {
    let n = cache.lower.nb.n;
    let d_mean = ops::l2_normalize_backward(&cache.global, cache.norm, d_global);
    let d_refined = ops::mean_rows_backward(n, &d_mean);
    let df = match &cache.att {
        Some(a) => attention_backward(params, &cache.features, a, &d_refined, grads)?,
        None => d_refined,
    };
    let Some(nc) = &cache.out_norm else {
        return Ok(df);
    };
    let mut dz = if cfg.output_relu { relu_backward(&cache.features, &df) } else { df };
    if !nc.batch {
        for (c, mut col) in dz.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| T::of(v.f64() * nc.inv[c]));
        }
    }
    Ok(dz)
}

fn lower_backward<T: Real>(
    params: &ModelParameters<T>,
    cfg: &EncoderConfig,
    lower: &Lower<T>,
    dy: Array2<T>,
    grads: &mut GradientSet<T>,
) -> Result<()> {
    let nb = &lower.nb;
    let last_relu = cfg.output_relu && cfg.output_norm == OutputNorm::None;
    let dx3 = stack_backward(params, "up", &lower.up, dy, last_relu, true, grads)?;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut df2 = Array2::<T>::zeros((nb.centroids.len(), c2));
    for i in 0..nb.n {
        let d = dx3.row(i);
        let d = d.slice(ndarray::s![..c2]);
        for k in 0..nb.interp_k {
            let (c, w) = (nb.interp_index[i * nb.interp_k + k], T::of(nb.interp_weight[i * nb.interp_k + k]));
            df2.row_mut(c).scaled_add(w, &d);
        }
    }
    let mut df1 = dx3.slice(ndarray::s![.., c2..]).to_owned();

    let dh2 = ops::segment_max_backward(lower.l2.outputs.last().unwrap().nrows(), &lower.arg2, df2.view());
    let dx2 = stack_backward(params, "l2", &lower.l2, dh2, true, true, grads)?;
    for (r, &j) in nb.l2_index.iter().enumerate() {
        df1.row_mut(j).scaled_add(T::one(), &dx2.slice(ndarray::s![r, ..c1]));
    }

    let dh1 = ops::segment_max_backward(lower.l1.outputs.last().unwrap().nrows(), &lower.arg1, df1.view());
    stack_backward(params, "l1", &lower.l1, dh1, true, false, grads)?;
    Ok(())
}

/// Parameter gradients given `∂L/∂g` for the normalized global feature of a
/// cache from [`forward_train`].
pub fn backward<T: Real>(
    params: &ModelParameters<T>,
    cfg: &EncoderConfig,
    cache: &EncoderCache<T>,
    d_global: &Array1<T>,
) -> Result<GradientSet<T>> {
    if cache.out_norm.as_ref().is_some_and(|n| n.batch) {
        return Err(Error::invalid("batch-normalized caches need `backward_batch`"));
    }
    let mut grads = GradientSet::default();
    let dy = upper_backward(params, cfg, cache, d_global, &mut grads)?;
    lower_backward(params, cfg, &cache.lower, dy, &mut grads)?;
    Ok(grads)
}

/// Summed parameter gradients of a batch from [`forward_batch`], one
/// `∂L/∂g` per cache.
pub fn backward_batch<T: Real>(
    params: &ModelParameters<T>,
    cfg: &EncoderConfig,
    caches: &[&EncoderCache<T>],
    d_globals: &[Array1<T>],
) -> Result<GradientSet<T>> {
    if caches.len() != d_globals.len() {
        return Err(Error::invalid(format!("{} caches but {} gradients", caches.len(), d_globals.len())));
    }
    let upper: Vec<(Array2<T>, GradientSet<T>)> = caches
        .par_iter()
        .zip(d_globals.par_iter())
        .map(|(c, d)| {
            let mut g = GradientSet::default();
            let dy = upper_backward(params, cfg, c, d, &mut g)?;
            Ok((dy, g))
        })
        .collect::<Result<_>>()?;
    let mut dys: Vec<Array2<T>> = upper.iter().map(|(d, _)| d.clone()).collect();
    let batch: Vec<&NormCache<T>> = caches.iter().filter_map(|c| c.out_norm.as_ref().filter(|n| n.batch)).collect();
    if !batch.is_empty() {
        if batch.len() != caches.len() {
            return Err(Error::invalid("caches mix batch and stored normalization"));
        }
        // gradient through the shared mean and variance
        let total: usize = batch.iter().map(|n| n.z.nrows()).sum::<usize>();
        let m = batch[0].z.ncols();
        let (mut md, mut mdz) = (vec![0.0; m], vec![0.0; m]);
        for (n, d) in batch.iter().zip(&dys) {
            for (zr, dr) in n.z.rows().into_iter().zip(d.rows()) {
                for c in 0..m {
                    md[c] += dr[c].f64();
                    mdz[c] += dr[c].f64() * zr[c].f64();
                }
            }
        }
        for c in 0..m {
            md[c] /= total as f64;
            mdz[c] /= total as f64;
        }
        for (n, d) in batch.iter().zip(dys.iter_mut()) {
            for (zr, mut dr) in n.z.rows().into_iter().zip(d.rows_mut()) {
                for c in 0..m {
                    dr[c] = T::of(n.inv[c] * (dr[c].f64() - md[c] - zr[c].f64() * mdz[c]));
                }
            }
        }
    }
    let lower: Vec<GradientSet<T>> = caches
        .par_iter()
        .zip(dys.into_par_iter())
        .map(|(c, dy)| {
            let mut g = GradientSet::default();
            lower_backward(params, cfg, &c.lower, dy, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = GradientSet::default();
    for ((_, g), l) in upper.into_iter().zip(lower) {
        grads.merge(g);
        grads.merge(l);
    }
    Ok(grads)
}
