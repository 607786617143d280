//! Training loop: memory-bank refresh, spectral re-clustering, triplet batches
//! and Adam steps, plus the checkpoint it produces.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::clustering::{init_bank, MemoryBank, SpectralConfig};
use crate::distinct::{self, DistinctivenessField};
use crate::encoder::{self, EncoderCache, EncoderConfig, OutputNorm, ShapeEncoding};
use crate::error::{Error, Result};
use crate::geometry::{augment, AugmentConfig, PointCloud, ShapeId};
use crate::objective::{self, LossBreakdown};
use crate::rng::{self, tag};
use crate::synth::{resample_view_indexed, Dataset, DatasetRecord, Fnv};
use crate::tensor::{adam_step, AdamConfig, GradientSet, ModelParameters, Real};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which loss terms are active and whether attention is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Mode {
    #[default]
    Unsupervised,
    /// Cross-entropy on family labels replaces the cluster term.
    WeaklySupervised,
    WithoutAttention,
    WithoutContrastive,
    /// Center loss replaces the cluster term.
    CenterContrastive,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Unsupervised,
        Mode::WeaklySupervised,
        Mode::WithoutAttention,
        Mode::WithoutContrastive,
        Mode::CenterContrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unsupervised => "unsupervised",
            Mode::WeaklySupervised => "weakly-supervised",
            Mode::WithoutAttention => "w/o-Atten",
            Mode::WithoutContrastive => "w/o-Cont",
            Mode::CenterContrastive => "A-Center-Cont",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != Mode::WithoutAttention
    }

    pub fn uses_contrastive(self) -> bool {
        self != Mode::WithoutContrastive
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let key = key.strip_prefix("ablation").unwrap_or(&key);
        match key {
            "unsupervised" => Ok(Mode::Unsupervised),
            "weaklysupervised" | "weak" => Ok(Mode::WeaklySupervised),
            "woatten" | "noatten" => Ok(Mode::WithoutAttention),
            "wocont" | "nocont" => Ok(Mode::WithoutContrastive),
            "acentercont" | "centercont" => Ok(Mode::CenterContrastive),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (expected unsupervised, weakly-supervised, w/o-Atten, w/o-Cont or A-Center-Cont)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of clusters `C`.
    pub clusters: usize,
    /// Points per training view.
    pub n_points: usize,
    pub tau: f64,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Network shape; `channels` is `M`. Attention follows `mode`.
    pub encoder: EncoderConfig,
    /// Augmentation of training views.
    pub augment: AugmentConfig,
    pub spectral: SpectralConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clusters: 2,
            n_points: 256,
            tau: objective::DEFAULT_TAU,
            margin: objective::DEFAULT_MARGIN,
            alpha: objective::DEFAULT_ALPHA,
            beta: objective::DEFAULT_BETA,
            lr: 0.01,
            epochs: 200,
            batch_size: 10,
            seed: 0,
            mode: Mode::Unsupervised,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            spectral: SpectralConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Encoder settings with attention switched by the mode.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            attention: self.mode.uses_attention(),
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters < 1 || self.batch_size < 1 {
            return bad("clusters and batch_size must be positive".into());
        }
        if self.n_points < encoder::MIN_POINTS {
            return bad(format!("n_points must be at least {}", encoder::MIN_POINTS));
        }
        for (k, v) in [("tau", self.tau), ("margin", self.margin), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be positive (got {v})"));
            }
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be nonnegative (got {v})"));
            }
        }
        if self.spectral.sigma <= 0.0 || self.spectral.kmeans_restarts == 0 {
            return bad("spectral sigma and restarts must be positive".into());
        }
        self.encoder_config().validate()
    }

    /// Flat `key=value` form, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        let a = &self.augment;
        let s = &self.spectral;
        [
            ("clusters", self.clusters.to_string()),
            ("n_points", self.n_points.to_string()),
            ("channels", e.channels.to_string()),
            ("tau", self.tau.to_string()),
            ("margin", self.margin.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.name().to_string()),
            ("radius1", e.radius1.to_string()),
            ("radius2", e.radius2.to_string()),
            ("max_neighbors", e.max_neighbors.to_string()),
            ("downsample", e.downsample.to_string()),
            ("interp_k", e.interp_k.to_string()),
            ("l1_widths", join_widths(&e.l1_widths)),
            ("l2_widths", join_widths(&e.l2_widths)),
            ("up_widths", join_widths(&e.up_widths)),
            ("attention_hidden", e.attention_hidden.to_string()),
            ("output_relu", e.output_relu.to_string()),
            ("output_norm", e.output_norm.to_string()),
            ("aug_max_yaw", a.max_yaw.to_string()),
            ("aug_max_tilt", a.max_tilt.to_string()),
            ("aug_scale_min", a.scale_min.to_string()),
            ("aug_scale_max", a.scale_max.to_string()),
            ("aug_max_shift", a.max_shift.to_string()),
            ("aug_jitter_sigma", a.jitter_sigma.to_string()),
            ("aug_jitter_clip", a.jitter_clip.to_string()),
            ("sigma", s.sigma.to_string()),
            ("kmeans_restarts", s.kmeans_restarts.to_string()),
            ("jacobi_tol", s.jacobi_tol.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let a = &mut self.augment;
        let s = &mut self.spectral;
        match key {
            "clusters" => self.clusters = parse(key, value)?,
            "n_points" => self.n_points = parse(key, value)?,
            "channels" => e.channels = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "radius1" => e.radius1 = parse(key, value)?,
            "radius2" => e.radius2 = parse(key, value)?,
            "max_neighbors" => e.max_neighbors = parse(key, value)?,
            "downsample" => e.downsample = parse(key, value)?,
            "interp_k" => e.interp_k = parse(key, value)?,
            "l1_widths" => e.l1_widths = parse_widths(key, value)?,
            "l2_widths" => e.l2_widths = parse_widths(key, value)?,
            "up_widths" => e.up_widths = parse_widths(key, value)?,
            "attention_hidden" => e.attention_hidden = parse(key, value)?,
            "output_relu" => e.output_relu = parse(key, value)?,
            "output_norm" => e.output_norm = parse(key, value)?,
            "aug_max_yaw" => a.max_yaw = parse(key, value)?,
            "aug_max_tilt" => a.max_tilt = parse(key, value)?,
            "aug_scale_min" => a.scale_min = parse(key, value)?,
            "aug_scale_max" => a.scale_max = parse(key, value)?,
            "aug_max_shift" => a.max_shift = parse(key, value)?,
            "aug_jitter_sigma" => a.jitter_sigma = parse(key, value)?,
            "aug_jitter_clip" => a.jitter_clip = parse(key, value)?,
            "sigma" => s.sigma = parse(key, value)?,
            "kmeans_restarts" => s.kmeans_restarts = parse(key, value)?,
            "jacobi_tol" => s.jacobi_tol = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }
}

/// Everything needed to run inference or resume evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Trained tensors; optimizer state is not kept.
    pub params: ModelParameters<f32>,
    pub bank: MemoryBank,
    pub seed: u64,
    pub epoch: u64,
}

/// Copy of the trainable tensors without optimizer state.
fn strip_state(params: &ModelParameters<f32>) -> ModelParameters<f32> {
    let mut out = ModelParameters::default();
    for (k, v) in &params.tensors {
        out.insert(k.clone(), v.clone());
    }
    out
}

/// Rounds every entry through f32, renormalizing the rows so stored features stay unit norm.
fn f32_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.mapv(|v| v as f32 as f64);
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r.mapv_inplace(|v| (v / n) as f32 as f64);
        }
    }
    out
}

impl Checkpoint {
    fn snapshot(config: &TrainConfig, params: &ModelParameters<f32>, bank: &MemoryBank, epoch: u64) -> Self {
        let mut bank = bank.clone();
        // stored at f32 precision so that save/load is lossless
        bank.bank = f32_rows(&bank.bank);
        bank.prototypes = f32_rows(&bank.prototypes);
        bank.epoch = epoch;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            params: strip_state(params),
            bank,
            seed: config.seed,
            epoch,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.config.encoder_config()
    }

    /// Freshly initialized network with a random bank over `shape_ids`.
    pub fn untrained(config: &TrainConfig, shape_ids: Vec<ShapeId>) -> Result<Self> {
        config.validate()?;
        let enc_cfg = config.encoder_config();
        let params = encoder::init_parameters(&enc_cfg, config.seed)?;
        let spectral = SpectralConfig {
            seed: config.seed,
            ..config.spectral.clone()
        };
        let bank = init_bank(shape_ids, enc_cfg.channels, config.clusters, &spectral, &mut rng::derive(config.seed, &[tag::INIT, 2]))?;
        Ok(Self::snapshot(config, &params, &bank, 0))
    }

    /// Full forward pass on one cloud.
    pub fn encode(&self, pc: &PointCloud) -> Result<ShapeEncoding<f32>> {
        encoder::forward_shape(&self.params, pc, &self.encoder_config())
    }

    /// Per-point distinctiveness of `pc`.
    pub fn distinctiveness(&self, pc: &PointCloud) -> Result<DistinctivenessField> {
        let enc = self.encode(pc)?;
        distinct::extract(&enc.refined, pc.shape_id.clone())
    }

    /// Normalized global feature in f64.
    pub fn global_feature(&self, pc: &PointCloud) -> Result<Array1<f64>> {
        Ok(unit_f64(&self.encode(pc)?))
    }

    /// Arg-max cluster probability over the stored prototypes.
    pub fn assign(&self, pc: &PointCloud) -> Result<usize> {
        let g = self.global_feature(pc)?;
        let p = objective::cluster_probability(g.view(), self.bank.prototypes.view(), self.config.tau)?;
        Ok(argmax(&p))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", self.version)));
        }
        self.config.validate()?;
        self.params.check_finite()?;
        self.bank.validate()
    }
}

fn argmax(p: &Array1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// The encoder's global feature cast to f64 and renormalized there.
fn unit_f64(enc: &ShapeEncoding<f32>) -> Array1<f64> {
    unit_vector(&enc.global.vector)
}

fn unit_vector<T: Real>(v: &Array1<T>) -> Array1<f64> {
    let g = v.mapv(|x| x.f64());
    let n = g.dot(&g).sqrt();
    g / n
}

/// Stable 64-bit key of a shape id, used to derive per-shape streams.
pub fn shape_key(id: &ShapeId) -> u64 {
    let mut h = Fnv::new();
    h.write(id.0.as_bytes());
    h.finish()
}

/// Deterministic jitter-free `n`-point view of a record. Depends only on
/// the seed and the shape id, not on the record's position in the dataset.
pub fn canonical_view(record: &DatasetRecord, n: usize, seed: u64) -> Result<PointCloud> {
    Ok(canonical_view_indexed(record, n, seed)?.0)
}

/// [`canonical_view`] with the master indices of the drawn points.
pub fn canonical_view_indexed(record: &DatasetRecord, n: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    let mut r = rng::derive(seed, &[shape_key(&record.shape_id), tag::EVAL]);
    resample_view_indexed(record, n, &mut r, 0.0)
}

/// Cluster id of every record under the checkpoint's prototypes.
pub fn evaluate_assignments(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Vec<usize>> {
    dataset
        .records
        .par_iter()
        .map(|r| ckpt.assign(&canonical_view(r, ckpt.config.n_points, ckpt.seed)?))
        .collect()
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    /// Shapes that changed cluster at the start of this epoch.
    pub assignment_changes: usize,
}

impl LogRow {
    pub const HEADER: [&'static str; 7] = [
        "epoch",
        "batch",
        "cluster_term",
        "contrastive_term",
        "decay",
        "total",
        "assignment_changes",
    ];

    pub fn fields(&self) -> [String; 7] {
        [
            self.epoch.to_string(),
            self.batch.to_string(),
            self.loss.cluster_term.to_string(),
            self.loss.contrastive_term.to_string(),
            self.loss.weight_decay_term.to_string(),
            self.loss.total.to_string(),
            self.assignment_changes.to_string(),
        ]
    }
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(log: &[LogRow]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for row in log {
        match out.last_mut() {
            Some((e, s, n)) if *e == row.epoch => {
                *s += row.loss.total;
                *n += 1;
            }
            _ => out.push((row.epoch, row.loss.total, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

#[derive(Debug)]
pub struct TrainRun {
    /// Final state, or the last finite state if training aborted.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Set when a non-finite value stopped training early.
    pub aborted: Option<Error>,
}

/// Views of one triplet after augmentation; positive and negative are
/// absent when the contrastive term is off.
struct TripletViews {
    anchor: usize,
    clouds: Vec<PointCloud>,
}

struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    labels: Vec<usize>,
    classes: usize,
}

impl Trainer<'_> {
    /// Global features of `clouds`. Stored output statistics are first
    /// recomputed over these views.
    fn encode_views(&self, params: &mut ModelParameters<f32>, clouds: &[PointCloud], bank: &mut MemoryBank) -> Result<()> {
        if self.enc_cfg.output_norm == OutputNorm::Batch {
            encoder::output_statistics(params, clouds, &self.enc_cfg)?.store(params);
        }
        let params = &*params;
        let gs: Vec<Array1<f64>> = clouds
            .par_iter()
            .map(|pc| Ok(unit_f64(&encoder::forward_shape(params, pc, &self.enc_cfg)?)))
            .collect::<Result<_>>()?;
        for (i, g) in gs.iter().enumerate() {
            bank.update_row(i, g.view())?;
        }
        Ok(())
    }

    fn refresh_bank(&self, params: &mut ModelParameters<f32>, bank: &mut MemoryBank, epoch: usize) -> Result<()> {
        let seed = self.cfg.seed;
        let clouds: Vec<PointCloud> = self
            .dataset
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut s = rng::derive(seed, &[epoch as u64, i as u64, tag::BANK_VIEW]);
                Ok(resample_view_indexed(r, self.cfg.n_points, &mut s, 0.0)?.0)
            })
            .collect::<Result<_>>()?;
        self.encode_views(params, &clouds, bank)
    }

    fn refresh_canonical(&self, params: &mut ModelParameters<f32>, bank: &mut MemoryBank) -> Result<()> {
        let clouds: Vec<PointCloud> = self
            .dataset
            .records
            .par_iter()
            .map(|r| canonical_view(r, self.cfg.n_points, self.cfg.seed))
            .collect::<Result<_>>()?;
        self.encode_views(params, &clouds, bank)
    }

    fn views(&self, epoch: usize, anchor: usize, assignments: &[usize]) -> Result<TripletViews> {
        let seed = self.cfg.seed;
        let mut s = rng::derive(seed, &[epoch as u64, anchor as u64, tag::ANCHOR]);
        let t = objective::build_triplet(self.dataset, anchor, assignments, self.cfg.n_points, &mut s)?;
        let mut a = rng::derive(seed, &[epoch as u64, anchor as u64, tag::AUGMENT]);
        let mut clouds = vec![augment(&t.anchor_cloud, &mut a, &self.cfg.augment)];
        if self.cfg.mode.uses_contrastive() {
            clouds.push(augment(&t.positive_cloud, &mut a, &self.cfg.augment));
            clouds.push(augment(&t.negative_cloud, &mut a, &self.cfg.augment));
        }
        Ok(TripletViews { anchor, clouds })
    }

    /// Loss and parameter gradient of one batch. The decay gradient is
    /// left to the optimizer.
    fn step(
        &self,
        params: &ModelParameters<f32>,
        bank: &MemoryBank,
        batch: &[TripletViews],
    ) -> Result<(LossBreakdown, GradientSet<f32>)> {
        let groups: Vec<&[PointCloud]> = batch.iter().map(|t| t.clouds.as_slice()).collect();
        let targets: Vec<usize> = batch
            .iter()
            .map(|t| match self.cfg.mode {
                Mode::WeaklySupervised => self.labels[t.anchor],
                _ => bank.assignments[t.anchor],
            })
            .collect();
        let (loss, grads, _) = batch_objective(params, &self.cfg, &groups, &targets, bank.prototypes.view(), self.classes, false)?;
        grads.check_finite()?;
        Ok((loss, grads))
    }
}

/// The joint objective of one batch and its parameter gradient.
///
/// Each group holds the views of one triplet: the anchor, then the
/// positive and negative when the contrastive term is on. `targets` are
/// cluster ids (family labels in weakly-supervised mode) of the anchors.
/// With `with_decay` the gradient includes the weight-decay term; training
/// leaves it out and applies decay in the optimizer. The returned signature
/// hashes every relu sign and active hinge, for finite-difference checks.
pub fn batch_objective<T: Real>(
    params: &ModelParameters<T>,
    cfg: &TrainConfig,
    groups: &[&[PointCloud]],
    targets: &[usize],
    prototypes: ArrayView2<f64>,
    classes: usize,
    with_decay: bool,
) -> Result<(LossBreakdown, GradientSet<T>, u64)> {
    let per = if cfg.mode.uses_contrastive() { 3 } else { 1 };
    if groups.is_empty() || groups.len() != targets.len() || groups.iter().any(|g| g.len() != per) {
        return Err(Error::invalid(format!("a batch needs one target and {per} views per triplet")));
    }
    let enc_cfg = cfg.encoder_config();
    let flat: Vec<&PointCloud> = groups.iter().flat_map(|g| g.iter()).collect();
    let fwd = encoder::forward_batch(params, &flat, &enc_cfg)?;
    let enc: Vec<Array1<f64>> = fwd.iter().map(|(e, _)| unit_vector(&e.global.vector)).collect();
    let b = groups.len();
    let anchors: Vec<Array1<f64>> = (0..b).map(|j| enc[j * per].clone()).collect();
    let mut dg: Vec<Array1<f64>> = vec![Array1::zeros(enc_cfg.channels); fwd.len()];
    let mut head_grads = GradientSet::default();
    let mut sig = Fnv::new();

    let (cluster, d) = match cfg.mode {
        Mode::WeaklySupervised => {
            let (l, d, hg) = objective::supervised_head_loss(params, &anchors, targets, classes)?;
            head_grads = hg;
            (l, d)
        }
        Mode::CenterContrastive => objective::center_loss(&anchors, targets, prototypes)?,
        _ => objective::cluster_loss(&anchors, targets, prototypes, cfg.tau)?,
    };
    for (j, d) in d.into_iter().enumerate() {
        dg[j * per] += &d;
    }

    let mut contrastive = 0.0;
    if cfg.mode.uses_contrastive() {
        let w = cfg.alpha / b as f64;
        for j in 0..b {
            let (a, p, n) = (j * per, j * per + 1, j * per + 2);
            let (l, g) = objective::contrastive_loss(enc[a].view(), enc[p].view(), enc[n].view(), cfg.margin);
            sig.write_u64((l > 0.0) as u64);
            contrastive += l / b as f64;
            dg[a].scaled_add(w, &g.anchor);
            dg[p].scaled_add(w, &g.positive);
            dg[n].scaled_add(w, &g.negative);
        }
    }

    let decay = params.decay_norm_sq();
    let loss = objective::joint_loss(cluster, contrastive, decay, cfg.alpha, cfg.beta, cfg.tau, cfg.margin)?;

    let caches: Vec<&EncoderCache<T>> = fwd.iter().map(|(_, c)| c).collect();
    for c in &caches {
        sig.write_u64(c.signature());
    }
    let dg: Vec<Array1<T>> = dg.iter().map(|d| d.mapv(T::of)).collect();
    // The losses above depend only on the direction of each pooled mean, so
    // the decay gradient is the only force on the feature scale. Fed through
    // Adam's per-coordinate normalization it would shrink every weight by
    // about `lr` per step, which is why training applies it in the optimizer.
    let mut grads = encoder::backward_batch(params, &enc_cfg, &caches, &dg)?;
    grads.merge(head_grads);
    if with_decay {
        grads.merge(params.decay_gradient(cfg.beta));
    }
    Ok((loss, grads, sig.finish()))
}

/// State visible to a training observer after each epoch.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub bank: &'a MemoryBank,
    pub params: &'a ModelParameters<f32>,
    pub rows: &'a [LogRow],
}

/// Trains a model on `dataset`. Family labels are read only in
/// weakly-supervised mode.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainRun> {
    train_observed(dataset, config, |_| {})
}

/// [`train`] with a callback after every completed epoch.
pub fn train_observed(dataset: &Dataset, config: &TrainConfig, mut observe: impl FnMut(&EpochReport)) -> Result<TrainRun> {
    config.validate()?;
    dataset.validate()?;
    if config.clusters > dataset.len() {
        return Err(Error::Config(format!(
            "{} clusters requested for {} shapes",
            config.clusters,
            dataset.len()
        )));
    }
    let master = dataset.records.iter().map(|r| r.master_cloud.len()).min().unwrap_or(0);
    if config.n_points > master {
        return Err(Error::Config(format!(
            "n_points {} exceeds the smallest master cloud ({master})",
            config.n_points
        )));
    }
    let enc_cfg = config.encoder_config();
    let mut params: ModelParameters<f32> = encoder::init_parameters(&enc_cfg, config.seed)?;
    let (labels, classes) = if config.mode == Mode::WeaklySupervised {
        let (names, labels) = dataset.family_labels();
        let mut r = rng::derive(config.seed, &[tag::INIT, 1]);
        objective::init_head(&mut params, enc_cfg.channels, names.len(), &mut r);
        (labels, names.len())
    } else {
        (Vec::new(), 0)
    };
    let ids: Vec<ShapeId> = dataset.records.iter().map(|r| r.shape_id.clone()).collect();
    let spectral = SpectralConfig {
        seed: config.seed,
        ..config.spectral.clone()
    };
    let mut bank = init_bank(
        ids,
        enc_cfg.channels,
        config.clusters,
        &spectral,
        &mut rng::derive(config.seed, &[tag::INIT, 2]),
    )?;
    let trainer = Trainer {
        dataset,
        cfg: config.clone(),
        enc_cfg,
        labels,
        classes,
    };
    // the gradient of β·Σw² bypasses the adaptive moments; see `Trainer::step`
    let adam = AdamConfig {
        lr: config.lr,
        decoupled_decay: 2.0 * config.beta,
        ..AdamConfig::default()
    };
    let mut log = Vec::new();
    let mut done = 0u64;

    for epoch in 0..config.epochs {
        let e = epoch as u64;
        let abort = |batch: usize, err: Error| Error::TrainingAborted {
            epoch: epoch + 1,
            batch,
            msg: err.to_string(),
        };
        if let Err(err) = trainer.refresh_bank(&mut params, &mut bank, epoch) {
            return Ok(aborted(config, &params, &bank, done, log, abort(0, err)));
        }
        let spectral = SpectralConfig {
            seed: rng::derive_key(config.seed, &[e, tag::CLUSTER]),
            ..spectral.clone()
        };
        let changes = bank.recluster(&spectral, &mut rng::derive(config.seed, &[e, tag::PROTOTYPE]))?;
        log::debug!("epoch {}: {changes} assignment changes", epoch + 1);

        // negatives come from labels under weak supervision, from clusters otherwise
        let negatives = if config.mode == Mode::WeaklySupervised {
            trainer.labels.clone()
        } else {
            bank.assignments.clone()
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::derive(config.seed, &[e, tag::SHUFFLE]));
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let views: Result<Vec<TripletViews>> = chunk
                .par_iter()
                .map(|&a| trainer.views(epoch, a, &negatives))
                .collect();
            let result = views.and_then(|v| trainer.step(&params, &bank, &v));
            let (loss, grads) = match result {
                Ok(x) => x,
                Err(err) => return Ok(aborted(config, &params, &bank, done, log, abort(bi + 1, err))),
            };
            let mut next = params.clone();
            if let Err(err) = adam_step(&mut next, &grads, &adam).and_then(|_| next.check_finite()) {
                return Ok(aborted(config, &params, &bank, done, log, abort(bi + 1, err)));
            }
            params = next;
            log.push(LogRow {
                epoch: epoch + 1,
                batch: bi + 1,
                loss,
                assignment_changes: changes,
            });
        }
        done = e + 1;
        let first = log.iter().position(|r: &LogRow| r.epoch == epoch + 1).unwrap_or(log.len());
        observe(&EpochReport {
            epoch: epoch + 1,
            bank: &bank,
            params: &params,
            rows: &log[first..],
        });
    }
    if done > 0 {
        // the stored bank and prototypes describe the final parameters
        let finish = trainer
            .refresh_canonical(&mut params, &mut bank)
            .and_then(|_| bank.recluster(&spectral, &mut rng::derive(config.seed, &[done, tag::PROTOTYPE])));
        if let Err(err) = finish {
            let err = Error::TrainingAborted {
                epoch: config.epochs,
                batch: 0,
                msg: err.to_string(),
            };
            return Ok(aborted(config, &params, &bank, done, log, err));
        }
    }
    Ok(TrainRun {
        checkpoint: Checkpoint::snapshot(config, &params, &bank, done),
        log,
        aborted: None,
    })
}

fn aborted(
    config: &TrainConfig,
    params: &ModelParameters<f32>,
    bank: &MemoryBank,
    done: u64,
    log: Vec<LogRow>,
    err: Error,
) -> TrainRun {
    log::error!("{err}");
    TrainRun {
        checkpoint: Checkpoint::snapshot(config, params, bank, done),
        log,
        aborted: Some(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::best_permutation_accuracy;
    use crate::synth::{build_preset, Preset};

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            n_points: 64,
            epochs,
            batch_size: 4,
            encoder: EncoderConfig::micro(8),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn small_data() -> Dataset {
        build_preset(Preset::TwinVsQuad, 4, 64, 3).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("ablation:w/o-Atten".parse::<Mode>().unwrap(), Mode::WithoutAttention);
        assert!("fancy".parse::<Mode>().is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut c = TrainConfig {
            mode: Mode::CenterContrastive,
            tau: 0.123456789,
            ..TrainConfig::default()
        };
        c.encoder.up_widths = vec![];
        let mut d = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(d.set("nope", "1").is_err());
        assert!(d.set("epochs", "x").is_err());
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let data = small_data();
        let cfg = small_config(0);
        let run = train(&data, &cfg).unwrap();
        assert!(run.log.is_empty());
        assert!(run.aborted.is_none());
        let init: ModelParameters<f32> = encoder::init_parameters(&cfg.encoder_config(), cfg.seed).unwrap();
        assert_eq!(run.checkpoint.params, init);
        assert_eq!(run.checkpoint.epoch, 0);
    }

    #[test]
    fn deterministic_and_consistent_log() {
        let data = small_data();
        let cfg = small_config(2);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
        for row in &a.log {
            let l = row.loss;
            assert!((l.total - (l.cluster_term + cfg.alpha * l.contrastive_term + cfg.beta * l.weight_decay_term)).abs() < 1e-6);
        }
        a.checkpoint.validate().unwrap();
        for r in a.checkpoint.bank.bank.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn modes_switch_terms() {
        let data = small_data();
        let mut cfg = small_config(1);
        cfg.mode = Mode::WithoutContrastive;
        let run = train(&data, &cfg).unwrap();
        assert!(run.log.iter().all(|r| r.loss.contrastive_term == 0.0));
        cfg.mode = Mode::WithoutAttention;
        let run = train(&data, &cfg).unwrap();
        assert!(!run.checkpoint.params.contains("att.s.w"));
        let pc = canonical_view(&data.records[0], 64, 0).unwrap();
        let enc = run.checkpoint.encode(&pc).unwrap();
        assert_eq!(enc.features.values, enc.refined.values);
        cfg.mode = Mode::WeaklySupervised;
        let run = train(&data, &cfg).unwrap();
        assert!(run.checkpoint.params.contains(objective::HEAD_W));
        cfg.mode = Mode::CenterContrastive;
        let run = train(&data, &cfg).unwrap();
        assert!(run.log.iter().all(|r| r.loss.cluster_term >= 0.0 && r.loss.cluster_term <= 2.0));
    }

    #[test]
    fn diverging_run_keeps_last_finite_state() {
        let data = small_data();
        let mut cfg = small_config(3);
        cfg.lr = 1e36;
        let run = train(&data, &cfg).unwrap();
        let err = run.aborted.expect("training should abort");
        assert!(matches!(err, Error::TrainingAborted { .. }), "{err}");
        run.checkpoint.params.check_finite().unwrap();
    }

    #[test]
    fn evaluation_is_permutation_invariant() {
        let data = small_data();
        let run = train(&data, &small_config(1)).unwrap();
        let ckpt = run.checkpoint;
        let y = evaluate_assignments(&ckpt, &data).unwrap();
        assert_eq!(y.len(), data.len());
        let mut rev = data.clone();
        rev.records.reverse();
        let mut z = evaluate_assignments(&ckpt, &rev).unwrap();
        z.reverse();
        assert_eq!(y, z);
        let (_, truth) = data.family_labels();
        let acc = best_permutation_accuracy(&y, &truth, 2).unwrap();
        assert!((0.5..=1.0).contains(&acc));
        // a shape whose g equals a prototype is assigned to it
        let pc = canonical_view(&data.records[0], 64, ckpt.seed).unwrap();
        let g = ckpt.global_feature(&pc).unwrap();
        let mut c2 = ckpt.clone();
        c2.bank.prototypes.row_mut(1).assign(&g);
        c2.bank.prototypes.row_mut(0).assign(&(-&g));
        assert_eq!(c2.assign(&pc).unwrap(), 1);
    }
}
