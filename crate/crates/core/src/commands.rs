//! The command-line workflows as library calls. Each function reads its
//! inputs from disk, runs one stage and writes its artifacts atomically.

use std::path::Path;

use crate::apps::{self, Aabb, IndexEntry, RetrievalIndex, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};
use crate::experiments;
use crate::geometry::{normalize_unit_sphere, PointCloud, ShapeId};
use crate::io;
use crate::metrics::PreferenceMode;
use crate::pipeline::{canonical_view, train, Checkpoint, Mode, TrainConfig, TrainRun};
use crate::rng;
use crate::synth::{build_preset, Dataset, Preset};

/// Environment variable that overrides every seed not given on the command line.
pub const SEED_ENV: &str = "DISTINCT_SEED";

/// The seed from [`SEED_ENV`], if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse `{v}` as a seed"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Explicit value, else the environment, else `default`.
pub fn resolve_seed(explicit: Option<u64>, env: Option<u64>, default: u64) -> u64 {
    explicit.or(env).unwrap_or(default)
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("sweep `{s}` must be start:stop:step")))?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::Config(format!("sweep `{s}` must be start:stop:step")));
    };
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::Config(format!("sweep `{s}` needs step > 0 and stop >= start")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Comma-separated counts.
pub fn parse_budgets(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("budget `{p}` is not a count"))))
        .collect()
}

/// `x0,y0,z0,x1,y1,z1`.
pub fn parse_focus(s: &str) -> Result<Aabb> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("focus `{s}` must be six numbers")))?;
    let [x0, y0, z0, x1, y1, z1] = v[..] else {
        return Err(Error::Config(format!("focus `{s}` must be six numbers")));
    };
    Aabb::new([x0, y0, z0], [x1, y1, z1])
}

fn shape_id_of(path: &Path) -> ShapeId {
    ShapeId(path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud").to_string())
}

/// Generates a preset dataset and writes it to `out`.
pub fn gen_data(preset: Preset, count: usize, n_points: usize, seed: u64, out: &Path) -> Result<Dataset> {
    let ds = build_preset(preset, count, n_points, seed)?;
    io::save_dataset(out, &ds)?;
    Ok(ds)
}

/// Command-line settings for training, applied over the config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    /// Further `key=value` settings.
    pub set: Vec<(String, String)>,
}

/// `base`, then the config file, then the seed environment variable, then
/// the command line.
pub fn effective_config(base: TrainConfig, file: Option<&Path>, overrides: &TrainOverrides, env: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => io::load_train_config(p, base)?,
        None => base,
    };
    if let Some(s) = env {
        cfg.seed = s;
    }
    for (k, v) in &overrides.set {
        cfg.set(k, v)?;
    }
    if let Some(m) = overrides.mode {
        cfg.mode = m;
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(e) = overrides.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Built-in defaults with the working point count of a dataset directory.
pub fn dataset_defaults(data: &Path) -> Result<(Dataset, TrainConfig)> {
    let ds = io::load_dataset(data)?;
    let cfg = TrainConfig {
        n_points: ds.n_points,
        ..TrainConfig::default()
    };
    Ok((ds, cfg))
}

/// Trains and saves the checkpoint. A training abort still saves the last
/// finite state and is returned as an error.
pub fn train_command(ds: &Dataset, config: &TrainConfig, out: &Path, log: Option<&Path>) -> Result<TrainRun> {
    let run = train(ds, config)?;
    io::save_checkpoint(out, &run.checkpoint)?;
    if let Some(path) = log {
        let rows: Vec<Vec<String>> = run.log.iter().map(|r| r.fields().to_vec()).collect();
        io::write_csv(path, &crate::pipeline::LogRow::HEADER, &rows)?;
    }
    match &run.aborted {
        Some(e) => Err(Error::TrainingAborted {
            epoch: run.checkpoint.epoch as usize,
            batch: 0,
            msg: format!("{e} (last finite state saved to {})", out.display()),
        }),
        None => Ok(run),
    }
}

/// Distinctiveness of a cloud file, computed in the unit-sphere frame.
pub fn field_of(ckpt: &Checkpoint, pc: &PointCloud) -> Result<Vec<f64>> {
    Ok(ckpt.distinctiveness(&normalize_unit_sphere(pc)?)?.values)
}

/// Writes the input points with their distinctiveness and colors.
pub fn detect(ckpt_path: &Path, input: &Path, out: &Path) -> Result<Vec<f64>> {
    let ckpt = io::load_checkpoint(ckpt_path)?;
    let pc = io::read_point_cloud(input, shape_id_of(input))?;
    let d = field_of(&ckpt, &pc)?;
    io::write_field_ply(out, &pc.points, Some(&d))?;
    Ok(d)
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateOptions {
    /// FNE/FPE of the detections against the substructure points.
    pub r_sweep: Option<Vec<f64>>,
    pub d_t: f64,
    pub retention_budgets: Option<Vec<usize>>,
    pub retention_seeds: Vec<u64>,
}

pub const EVAL_HEADER: [&str; 5] = ["metric", "key", "param", "value", "value2"];

/// Writes one CSV of `metric,key,param,value,value2` rows and returns them.
pub fn evaluate(ckpt_path: &Path, data: &Path, opts: &EvaluateOptions, out: &Path) -> Result<Vec<Vec<String>>> {
    let ckpt = io::load_checkpoint(ckpt_path)?;
    let ds = io::load_dataset(data)?;
    let sep = experiments::separation(&ckpt, &ds)?;
    let mut rows = vec![
        vec!["accuracy".into(), "best_permutation".into(), String::new(), sep.accuracy.to_string(), String::new()],
        vec!["separation".into(), "substructure_vs_rest".into(), String::new(), sep.ratio().to_string(), sep.mean_ratio.to_string()],
    ];
    if let Some(radii) = &opts.r_sweep {
        let curve = experiments::detection_vs_substructure(&ckpt, &ds, opts.d_t, radii)?;
        for (r, (fne, fpe)) in radii.iter().zip(curve) {
            rows.push(vec!["fne_fpe".into(), format!("d_t={}", opts.d_t), r.to_string(), fne.to_string(), fpe.to_string()]);
        }
    }
    if let Some(budgets) = &opts.retention_budgets {
        let seeds = if opts.retention_seeds.is_empty() { vec![ckpt.seed] } else { opts.retention_seeds.clone() };
        let table = experiments::retention(&ckpt, &ds, budgets, &PreferenceMode::ALL, &seeds)?;
        for (m, mode) in table.modes.iter().enumerate() {
            for (b, k) in table.budgets.iter().enumerate() {
                rows.push(vec!["retention".into(), mode.name().into(), k.to_string(), table.accuracy[m][b].to_string(), String::new()]);
            }
        }
    }
    io::write_csv(out, &EVAL_HEADER, &rows)?;
    Ok(rows)
}

/// Ranks the canonical views of the dataset in `db` against a query cloud.
pub fn retrieve(ckpt_path: &Path, db: &Path, query: &Path, top_k: usize, delta_d: f64) -> Result<Vec<(ShapeId, f64)>> {
    let ckpt = io::load_checkpoint(ckpt_path)?;
    let ds = io::load_dataset(db)?;
    let clouds = ds
        .records
        .iter()
        .map(|r| canonical_view(r, ckpt.config.n_points, ckpt.seed))
        .collect::<Result<Vec<_>>>()?;
    let index = RetrievalIndex::build(&ckpt, &clouds, delta_d)?;
    let pc = normalize_unit_sphere(&io::read_point_cloud(query, shape_id_of(query))?)?;
    let q = IndexEntry::encode(&ckpt, &pc, delta_d)?;
    apps::retrieve(&index, q.h.view(), top_k)
}

/// Adaptive Poisson-disk subset of a cloud, written as XYZ. Radii are in
/// the units of the input file.
pub fn sample(ckpt_path: &Path, input: &Path, r_min: f64, r_max: f64, seed: u64, out: &Path) -> Result<Vec<usize>> {
    let ckpt = io::load_checkpoint(ckpt_path)?;
    let pc = io::read_point_cloud(input, shape_id_of(input))?;
    let d = field_of(&ckpt, &pc)?;
    let picked = apps::adaptive_poisson_sample(&pc, &d, r_min, r_max, &mut rng::derive(seed, &[rng::tag::POISSON]))?;
    io::write_xyz(out, &pc.subset(&picked).points)?;
    Ok(picked)
}

#[derive(Clone, Debug)]
pub struct ViewOptions {
    pub views: usize,
    pub focus: Option<Aabb>,
    /// Patch diameter for scenes larger than one shape, in scene units.
    pub patch: Option<f64>,
    pub resolution: usize,
}

impl Default for ViewOptions {
    fn default() -> Self {
        ViewOptions {
            views: apps::DEFAULT_VIEWS,
            focus: None,
            patch: None,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

pub const VIEW_HEADER: [&str; 11] = ["rank", "index", "dx", "dy", "dz", "eye_x", "eye_y", "eye_z", "distance", "score", "visible"];

/// Scores candidate views of a scene and writes them best first.
pub fn viewselect(ckpt_path: &Path, scene: &Path, opts: &ViewOptions, out: &Path) -> Result<Vec<apps::ViewScore>> {
    let ckpt = io::load_checkpoint(ckpt_path)?;
    let pc = io::read_point_cloud(scene, shape_id_of(scene))?;
    let d = match opts.patch {
        Some(diameter) => apps::scene_distinctiveness(&pc, &ckpt, diameter)?,
        None => field_of(&ckpt, &pc)?,
    };
    let views = apps::select_views(&pc, &d, opts.views, opts.focus.as_ref(), opts.resolution)?;
    let rows: Vec<Vec<String>> = views
        .iter()
        .enumerate()
        .map(|(rank, v)| {
            let eye = v.eye();
            [
                rank.to_string(),
                v.index.to_string(),
                v.direction[0].to_string(),
                v.direction[1].to_string(),
                v.direction[2].to_string(),
                eye[0].to_string(),
                eye[1].to_string(),
                eye[2].to_string(),
                v.camera_distance.to_string(),
                v.score.to_string(),
                v.visible.to_string(),
            ]
            .to_vec()
        })
        .collect();
    io::write_csv(out, &VIEW_HEADER, &rows)?;
    Ok(views)
}

/// Memory-bank rows and cluster ids, one row per shape, with the family
/// name from the dataset.
pub fn export_features(ckpt_path: &Path, data: &Path, out: &Path) -> Result<usize> {
    let ckpt = io::load_checkpoint(ckpt_path)?;
    let ds = io::load_dataset(data)?;
    let bank = &ckpt.bank;
    let mut header = vec!["shape_id".to_string(), "family".into(), "cluster".into()];
    header.extend((0..bank.bank.ncols()).map(|j| format!("f{j}")));
    let mut rows = Vec::with_capacity(bank.len());
    for (i, id) in bank.shape_ids.iter().enumerate() {
        let family = ds.records.iter().find(|r| &r.shape_id == id).map(|r| r.family_name.clone()).unwrap_or_default();
        let mut row = vec![id.0.clone(), family, bank.assignments[i].to_string()];
        row.extend(bank.bank.row(i).iter().map(|v| v.to_string()));
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_csv(out, &header, &rows)?;
    Ok(rows.len())
}
