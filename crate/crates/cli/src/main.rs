use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use distinct3d::commands::{self, EvaluateOptions, TrainOverrides, ViewOptions};
use distinct3d::pipeline::Mode;
use distinct3d::synth::Preset;

#[derive(Parser)]
#[command(name = "distinct3d", version, about = "Learn and use per-point distinctiveness on point-cloud collections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, found `{s}`"))
}

fn lift<T>(f: fn(&str) -> distinct3d::Result<T>) -> impl Fn(&str) -> Result<T, String> + Clone {
    move |s| f(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preset dataset.
    GenData {
        #[arg(long, value_parser = lift(str::parse::<Preset>))]
        preset: Preset,
        /// Shapes per family.
        #[arg(long, default_value_t = 30)]
        count: usize,
        /// Working points per shape.
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = lift(str::parse::<Mode>))]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Extra configuration keys, applied after the file.
        #[arg(long = "set", value_parser = key_value)]
        set: Vec<(String, String)>,
        /// Per-batch loss log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write the distinctiveness field of a cloud as a colored PLY.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Add FNE/FPE of detections against the substructure points.
        #[arg(long)]
        fne_fpe: bool,
        /// Radii as start:stop:step.
        #[arg(long, default_value = "0:0.2:0.01")]
        r_sweep: String,
        /// Detection threshold for FNE/FPE.
        #[arg(long, default_value_t = 0.7)]
        d_t: f64,
        /// Add assignment retention under preference downsampling.
        #[arg(long)]
        retention: bool,
        /// Comma-separated point budgets.
        #[arg(long, default_value = "256,128,64,32")]
        budgets: String,
        /// Number of retention sampling seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the shapes of a dataset directory against a query cloud.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = distinct3d::apps::DEFAULT_DELTA_D)]
        delta_d: f64,
    },
    /// Adaptive Poisson-disk sampling driven by distinctiveness.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        rmin: f64,
        #[arg(long)]
        rmax: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank viewpoints on the upper hemisphere of a scene.
    Viewselect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Box x0,y0,z0,x1,y1,z1 to score instead of the whole scene.
        #[arg(long, value_parser = lift(commands::parse_focus))]
        focus: Option<distinct3d::apps::Aabb>,
        #[arg(long, default_value_t = distinct3d::apps::DEFAULT_VIEWS)]
        views: usize,
        /// Evaluate the scene in patches of this diameter (scene units).
        #[arg(long)]
        patch: Option<f64>,
        #[arg(long, default_value_t = distinct3d::apps::DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export memory-bank features and cluster ids as CSV.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let env = commands::env_seed()?;
    match cli.command {
        Command::GenData { preset, count, n, seed, out } => {
            let seed = commands::resolve_seed(seed, env, 0);
            let ds = commands::gen_data(preset, count, n, seed, &out)?;
            println!("wrote {} shapes to {}", ds.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            mode,
            seed,
            epochs,
            set,
            log,
        } => {
            let (ds, base) = commands::dataset_defaults(&data)?;
            let overrides = TrainOverrides { mode, seed, epochs, set };
            let cfg = commands::effective_config(base, config.as_deref(), &overrides, env)?;
            log::info!("training {} epochs in {} mode, seed {}", cfg.epochs, cfg.mode, cfg.seed);
            let run = commands::train_command(&ds, &cfg, &out, log.as_deref())?;
            let last = run.log.last().map_or(f64::NAN, |r| r.loss.total);
            println!("trained {} epochs, final loss {last:.4}, checkpoint {}", run.checkpoint.epoch, out.display());
        }
        Command::Detect { ckpt, input, out } => {
            let d = commands::detect(&ckpt, &input, &out)?;
            println!("wrote {} points to {}", d.len(), out.display());
        }
        Command::Evaluate {
            ckpt,
            data,
            fne_fpe,
            r_sweep,
            d_t,
            retention,
            budgets,
            seeds,
            out,
        } => {
            let opts = EvaluateOptions {
                r_sweep: fne_fpe.then(|| commands::parse_sweep(&r_sweep)).transpose()?,
                d_t,
                retention_budgets: retention.then(|| commands::parse_budgets(&budgets)).transpose()?,
                retention_seeds: (0..seeds).collect(),
            };
            let rows = commands::evaluate(&ckpt, &data, &opts, &out)?;
            for r in rows.iter().take(2) {
                println!("{}: {}", r[0], r[3]);
            }
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Retrieve {
            ckpt,
            db,
            query,
            topk,
            delta_d,
        } => {
            for (rank, (id, dist)) in commands::retrieve(&ckpt, &db, &query, topk, delta_d)?.iter().enumerate() {
                println!("{}\t{}\t{dist:.6}", rank + 1, id);
            }
        }
        Command::Sample {
            ckpt,
            input,
            rmin,
            rmax,
            seed,
            out,
        } => {
            let seed = commands::resolve_seed(seed, env, 0);
            let picked = commands::sample(&ckpt, &input, rmin, rmax, seed, &out)?;
            println!("kept {} points in {}", picked.len(), out.display());
        }
        Command::Viewselect {
            ckpt,
            scene,
            focus,
            views,
            patch,
            resolution,
            out,
        } => {
            let opts = ViewOptions {
                views,
                focus,
                patch,
                resolution,
            };
            let ranked = commands::viewselect(&ckpt, &scene, &opts, &out)?;
            let best = &ranked[0];
            println!(
                "best view {} direction ({:.3}, {:.3}, {:.3}) score {:.4}",
                best.index, best.direction[0], best.direction[1], best.direction[2], best.score
            );
        }
        Command::ExportFeatures { ckpt, data, out } => {
            let n = commands::export_features(&ckpt, &data, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their cause in the message
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
