//! `dmaseg`: generate synthetic data, train, evaluate and visualise.

mod config;
mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use dmaseg::dataset::{build_synthetic_dataset, load_index, read_manifest, write_atomically, DatasetIndex, Protocol, SplitStrategy};
use dmaseg::embed::{tsne, TsneConfig};
use dmaseg::metrics::{format_table, Summary};
use dmaseg::model::{DType, ModelConfig};
use dmaseg::synth::SyntheticConfig;
use dmaseg::train::analysis::{dump_prototypes, silhouettes, Ablation, Feature};
use dmaseg::train::eval::Oracle;
use dmaseg::train::{evaluate, load_model, read_meta, TrainConfig, Trainer};

use config::{output_path, overlay, FileConfig};

#[derive(Parser)]
#[command(name = "dmaseg", version, about = "Motion-guided few-shot video object segmentation")]
struct Cli {
    /// JSON file with optional `synthetic`, `model`, `train` and `episode`
    /// sections; its fields override the corresponding flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes-with-motions dataset.
    Generate(GenerateArgs),
    /// Train a model episodically and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate checkpoints on test episodes.
    Eval(EvalArgs),
    /// Embed clip prototypes in 2-D and score their clustering.
    Visualize(VisualizeArgs),
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (o, m) = s.split_once(':').ok_or_else(|| format!("expected OBJECT:MOTION, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(o)?, n(m)?))
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory (relative paths resolve against $DMASEG_OUTPUT_ROOT).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    motions: usize,
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    /// Clips per (shape, motion) cell.
    #[arg(long, default_value_t = 5)]
    clips: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    #[arg(long, default_value_t = 2)]
    clutter: usize,
    /// Held-out cell as OBJECT:MOTION; repeatable.
    #[arg(long = "holdout", value_parser = parse_cell)]
    holdout: Vec<(usize, usize)>,
    /// Draw object colours per clip instead of per class.
    #[arg(long)]
    random_colors: bool,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    #[value(name = "OS", alias = "os")]
    Os,
    #[value(name = "NS", alias = "ns")]
    Ns,
    /// The held-out cells recorded in the dataset manifest.
    #[value(name = "holdout")]
    Holdout,
}

#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    test_fold: Option<usize>,
    /// Seed of the fold assignment.
    #[arg(long)]
    split_seed: Option<u64>,
}

impl SplitArgs {
    fn given(&self) -> bool {
        self.split.is_some() || self.test_fold.is_some() || self.split_seed.is_some()
    }

    fn protocol(&self, data: &Path) -> Result<Protocol> {
        let strategy = match self.split.unwrap_or(SplitArg::Os) {
            SplitArg::Os => SplitStrategy::Overlapping,
            SplitArg::Ns => SplitStrategy::NonOverlapping,
            SplitArg::Holdout => {
                ensure!(self.test_fold.is_none(), "--test-fold does not apply to the holdout split");
                let manifest = read_manifest(data).with_context(|| format!("reading manifest of {}", data.display()))?;
                let cells: Vec<(usize, usize)> = manifest
                    .cells
                    .iter()
                    .filter(|c| c.held_out)
                    .map(|c| (c.object_class, c.motion_class))
                    .collect();
                ensure!(!cells.is_empty(), "{} has no held-out cells", data.display());
                return Ok(Protocol::Holdout { cells });
            }
        };
        Ok(Protocol::Folds {
            strategy,
            test_fold: self.test_fold.unwrap_or(0),
            seed: self.split_seed.unwrap_or(0),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Ways per episode.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Shots per way.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Frames sampled from every support and query clip.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 3000)]
    episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    empty_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Component ablation; repeatable.
    #[arg(long = "ablate", value_parser = |s: &str| s.parse::<Ablation>().map_err(|e| e.to_string()))]
    ablate: Vec<Ablation>,
    /// Save the checkpoint every this many episodes (0: only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue the run stored in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory; repeat to fill one table row per fold.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the split recorded in each checkpoint.
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    empty_rate: Option<f64>,
    /// Replace predicted masks with the ground truth.
    #[arg(long)]
    oracle_mask: bool,
    /// Replace the empty decision with the true way identity.
    #[arg(long)]
    oracle_motion: bool,
    /// Row label of the table.
    #[arg(long, default_value = "model")]
    label: String,
    /// Write the results as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Dma,
    Cls,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the scatter data, image and scores.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "dma")]
    feature: FeatureArg,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Only the clips of held-out cells.
    #[arg(long)]
    held_out_only: bool,
    #[arg(long, default_value_t = 15.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 750)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    overwrite: bool,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
fn write_file_atomically(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!("{} exists (pass --overwrite to replace it)", path.display());
    }
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn open_dataset(data: &Path) -> Result<DatasetIndex> {
    load_index(data).with_context(|| format!("loading dataset {}", data.display()))
}

fn generate(args: GenerateArgs, file: &FileConfig) -> Result<()> {
    let cfg = SyntheticConfig {
        motion_classes: args.motions,
        object_classes: args.shapes,
        clips_per_cell: args.clips,
        frames: args.frames,
        height: args.size,
        width: args.size,
        seed: args.seed,
        distractors: args.distractors,
        clutter: args.clutter,
        holdout: args.holdout,
        random_colors: args.random_colors,
    };
    let cfg = overlay(cfg, file.synthetic.as_ref(), "synthetic")?;
    let out = output_path(&args.out);
    let manifest = build_synthetic_dataset(&cfg, &out, args.overwrite)?;
    let held: Vec<String> = manifest
        .cells
        .iter()
        .filter(|c| c.held_out)
        .map(|c| format!("{}:{}", c.object_class, c.motion_class))
        .collect();
    println!(
        "wrote {} clips ({} shapes x {} motions x {} per cell, {} frames at {}x{}) to {}",
        manifest.clips.len(),
        cfg.object_classes,
        cfg.motion_classes,
        cfg.clips_per_cell,
        cfg.frames,
        cfg.height,
        cfg.width,
        out.display()
    );
    if !held.is_empty() {
        println!("held-out cells: {}", held.join(" "));
    }
    Ok(())
}

fn train(args: TrainArgs, file: &FileConfig) -> Result<()> {
    let out = output_path(&args.out);
    let mut index = open_dataset(&args.data)?;
    let mut trainer = if args.resume {
        let mut t = Trainer::resume(&out, Some(args.episodes), DType::F32)?;
        ensure!(
            t.net.config().motion_classes == index.motion_classes()
                && t.net.config().object_classes == index.object_classes(),
            "checkpoint {} was trained on different class vocabularies",
            out.display()
        );
        t.cfg = overlay(t.cfg.clone(), file.train.as_ref(), "train")?;
        t
    } else {
        if out.exists() && fs::read_dir(&out)?.next().is_some() && !args.overwrite {
            bail!("{} exists and is not empty (pass --overwrite or --resume)", out.display());
        }
        let mut model = ModelConfig {
            dim: args.dim,
            object_classes: index.object_classes(),
            motion_classes: index.motion_classes(),
            seed: args.seed,
            ..ModelConfig::default()
        };
        let mut cfg = TrainConfig {
            episodes: args.episodes,
            lr: args.lr,
            seed: args.seed,
            protocol: args.split.protocol(&args.data)?,
            ..TrainConfig::default()
        };
        cfg.episode.ways = args.n;
        cfg.episode.shots = args.k;
        cfg.episode.support_frames = args.frames;
        cfg.episode.query_frames = args.frames;
        cfg.episode.empty_rate = args.empty_rate;
        for a in &args.ablate {
            a.apply(&mut model, &mut cfg);
        }
        let model = overlay(model, file.model.as_ref(), "model")?;
        let mut cfg = overlay(cfg, file.train.as_ref(), "train")?;
        cfg.episode = overlay(cfg.episode, file.episode.as_ref(), "episode")?;
        Trainer::new(model, cfg, DType::F32)?
    };
    index.preload()?;
    let pools = trainer.cfg.protocol.pools(&index, dmaseg::dataset::Phase::Train)?;
    info!(
        "training {} parameters for {} episodes ({} done)",
        trainer.net.store().num_params(),
        trainer.cfg.episodes,
        trainer.step
    );

    let mut log_file = match &args.log {
        Some(p) => {
            let p = output_path(p);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Some(fs::OpenOptions::new().create(true).append(true).open(&p)?)
        }
        None => None,
    };
    let every = args.checkpoint_every;
    let log_every = trainer.cfg.log_every.max(1);
    trainer.run(
        &index,
        &pools,
        log_file.as_mut().map(|f| f as &mut dyn Write),
        |t, e| {
            if (e.step + 1) % log_every == 0 {
                info!("episode {} loss {:.4} lr {:.2e} ({:.0}s)", e.step + 1, e.loss.total, e.lr, e.seconds);
            }
            if every > 0 && t.step % every == 0 && t.step < t.cfg.episodes {
                t.save(&out, true)?;
            }
            Ok(())
        },
    )?;
    trainer.save(&out, true)?;
    println!("checkpoint after {} episodes written to {}", trainer.step, out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    checkpoint: PathBuf,
    protocol: Protocol,
    fold: usize,
    summary: Summary,
}

#[derive(Serialize)]
struct EvalReport {
    label: String,
    episodes: usize,
    seed: u64,
    oracle: Oracle,
    rows: Vec<EvalRow>,
    table: String,
}

fn eval(args: EvalArgs, file: &FileConfig) -> Result<()> {
    let mut index = open_dataset(&args.data)?;
    index.preload()?;
    let oracle = Oracle {
        mask: args.oracle_mask,
        motion: args.oracle_motion,
    };
    let mut rows = Vec::new();
    for ckpt in &args.checkpoints {
        let meta = read_meta(ckpt)?;
        if meta.model.motion_classes != index.motion_classes() || meta.model.object_classes != index.object_classes() {
            bail!(
                "checkpoint {} expects {} motion / {} object classes but {} has {} / {}",
                ckpt.display(),
                meta.model.motion_classes,
                meta.model.object_classes,
                args.data.display(),
                index.motion_classes(),
                index.object_classes()
            );
        }
        let protocol = if args.split.given() { args.split.protocol(&args.data)? } else { meta.train.protocol.clone() };
        let mut episode = meta.train.episode;
        episode.ways = args.n.unwrap_or(episode.ways);
        episode.shots = args.k.unwrap_or(episode.shots);
        if let Some(f) = args.frames {
            episode.support_frames = f;
            episode.query_frames = f;
        }
        episode.empty_rate = args.empty_rate.unwrap_or(episode.empty_rate);
        let episode = overlay(episode, file.episode.as_ref(), "episode")?;
        let net = load_model(ckpt)?;
        let pools = protocol.pools(&index, dmaseg::dataset::Phase::Test)?;
        info!("evaluating {} on {} episodes", ckpt.display(), args.episodes);
        let (summary, _) = evaluate(&net, &index, &pools, &episode, args.episodes, args.seed, oracle)?;
        rows.push(EvalRow {
            checkpoint: ckpt.clone(),
            fold: protocol.fold(),
            protocol,
            summary,
        });
    }
    let folds: Vec<(usize, Summary)> = rows.iter().map(|r| (r.fold, r.summary)).collect();
    let table = format_table(&args.label, &folds);
    println!("{table}");
    if let Some(out) = &args.out {
        let report = EvalReport {
            label: args.label.clone(),
            episodes: args.episodes,
            seed: args.seed,
            oracle,
            rows,
            table,
        };
        write_file_atomically(&output_path(out), serde_json::to_string_pretty(&report)?.as_bytes(), args.overwrite)?;
    }
    Ok(())
}

fn visualize(args: VisualizeArgs) -> Result<()> {
    let index = open_dataset(&args.data)?;
    let net = load_model(&args.checkpoint)?;
    let ids: Vec<String> = if args.held_out_only {
        let manifest = read_manifest(&args.data)?;
        manifest.cells.iter().filter(|c| c.held_out).flat_map(|c| c.clips.clone()).collect()
    } else {
        index.clips.keys().cloned().collect()
    };
    let rows = dump_prototypes(&net, &index, &ids, args.frames)?;
    let feature = match args.feature {
        FeatureArg::Dma => Feature::Dma,
        FeatureArg::Cls => Feature::Cls,
    };
    let scores = silhouettes(&rows, feature)?;
    let points: Vec<Vec<f64>> = rows.iter().map(|r| feature.of(r).to_vec()).collect();
    let embedded = tsne(
        &points,
        TsneConfig {
            perplexity: args.perplexity,
            iterations: args.iterations,
            seed: args.seed,
            ..TsneConfig::default()
        },
    );
    let objects: Vec<usize> = rows.iter().map(|r| r.object_class).collect();
    let motions: Vec<usize> = rows.iter().map(|r| r.motion_class).collect();
    let image = plot::scatter(&embedded, &objects, &motions, 512);

    let out = output_path(&args.out);
    write_atomically(&out, args.overwrite, |dir| {
        let mut csv = String::from("clip_id,motion_class,object_class,x,y\n");
        for (r, p) in rows.iter().zip(&embedded) {
            csv += &format!("{},{},{},{:.6},{:.6}\n", r.clip_id, r.motion_class, r.object_class, p[0], p[1]);
        }
        fs::write(dir.join("scatter.csv"), csv)?;
        image.save(dir.join("scatter.png")).map_err(dmaseg::Error::from)?;
        let mut protos = String::new();
        for r in &rows {
            protos += &serde_json::to_string(r)?;
            protos.push('\n');
        }
        fs::write(dir.join("prototypes.jsonl"), protos)?;
        fs::write(
            dir.join("silhouettes.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "feature": feature,
                "clips": rows.len(),
                "motion": scores.motion,
                "object": scores.object,
            }))?,
        )?;
        Ok(())
    })?;
    println!(
        "{} clips; silhouette by motion {:.3}, by object {:.3}; written to {}",
        rows.len(),
        scores.motion,
        scores.object,
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => generate(a, &file),
        Command::Train(a) => train(a, &file),
        Command::Eval(a) => eval(a, &file),
        Command::Visualize(a) => visualize(a),
    }
}
