//! `molt`: train, infer, segment, refine, evaluate and generate toy data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use molt_core::cam::Cam;
use molt_core::io::dump::{read_cam, read_segments, write_cam, write_segments};
use molt_core::io::image::{decode_image, write_image};
use molt_core::io::manifest::{load_manifest, ManifestEntry};
use molt_core::io::render::{boundary_overlay, render_heatmap};
use molt_core::io::report::{format_metrics, format_per_image_csv, format_records, read_records, write_text};
use molt_core::io::RunConfig;
use molt_core::localize::{localize, EvalRecord};
use molt_core::multiscale::MultiscaleParams;
use molt_core::pipeline::{
    cam_at_image_size, format_scores_line, infer_image, load_labeled, make_record, read_scores, refine_image,
    run_end_to_end, write_corpus,
};
use molt_core::refine::refine_channels;
use molt_core::segmenter::segment_image;
use molt_core::synth::{synth_corpus, SynthConfig};
use molt_core::trainer::{read_checkpoints, train_with};
use molt_core::Error;
use rayon::prelude::*;

/// Environment variable naming the output directory when `--out` is absent.
const OUT_ENV: &str = "MOLT_OUT_DIR";
const DEFAULT_OUT: &str = "molt-out";
/// Effective run configuration, written next to checkpoints.
const RUN_CONFIG_FILE: &str = "run.cfg";
const SCORES_FILE: &str = "scores.tsv";

#[derive(Parser, Debug)]
#[command(name = "molt", version, about = "Multiscale attention maps for weakly supervised object localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the three-branch model on a manifest; writes checkpoints.
    Train(TrainArgs),
    /// Per-image branch CAMs, combined CAM and top-5 scores.
    Infer(InferArgs),
    /// Superpixel + clustering segmentation dumps and boundary overlays.
    Segment(SegmentArgs),
    /// Refine combined CAM dumps with the image segmentation.
    Refine(RefineArgs),
    /// Localization metrics from records, from dumps, or end to end.
    Eval(EvalArgs),
    /// Write the synthetic rectangle/disc corpus with train/test manifests.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory [default: $MOLT_OUT_DIR, else `molt-out`]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run configuration file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override `key=value`, applied after --config (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory written by `train` (its run.cfg is the base configuration)
    #[arg(long)]
    checkpoints: PathBuf,
    /// Also write heatmap overlays of the top-1 combined CAM
    #[arg(long, default_value_t = false)]
    render: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<id>.combined.cam` dumps from `infer`
    #[arg(long)]
    cams: PathBuf,
    /// Directory holding `<id>.seg` dumps from `segment` (computed when absent)
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Base configuration from a checkpoint directory's run.cfg
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["records", "cams", "checkpoints"]))]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Prepared records file (tab-separated, as written by eval)
    #[arg(long)]
    records: Option<PathBuf>,
    /// Ground-truth manifest (with --cams or --checkpoints)
    #[arg(long, required_unless_present = "records", conflicts_with = "records")]
    manifest: Option<PathBuf>,
    /// Directory of CAM dumps from `infer`/`refine`
    #[arg(long, requires = "scores")]
    cams: Option<PathBuf>,
    /// Scores file from `infer` (with --cams)
    #[arg(long, requires = "cams")]
    scores: Option<PathBuf>,
    /// Evaluate refined dumps (`<id>.refined.cam`) instead of combined ones;
    /// with --checkpoints, refine in process
    #[arg(long, default_value_t = false)]
    refined: bool,
    /// Checkpoint directory for an end-to-end run
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory [default: $MOLT_OUT_DIR, else `molt-out`]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of images
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of leading images in train.tsv; the rest go to test.tsv
    #[arg(long, default_value_t = 400)]
    train_count: usize,
}

/// Exit status per error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } => 3,
        Error::Decode(_) => 4,
        Error::Io { .. } => 5,
        Error::Parameter(_) | Error::Dimension(_) | Error::Contract(_) => 6,
        Error::Training { .. } => 7,
    }
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Base config (checkpoint run.cfg, else defaults), then --config, then --set.
fn run_config(common: &Common, checkpoints: Option<&Path>) -> molt_core::Result<RunConfig> {
    let mut cfg = match checkpoints.map(|d| d.join(RUN_CONFIG_FILE)).filter(|p| p.exists()) {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn load_params(dir: &Path, cfg: &RunConfig) -> molt_core::Result<MultiscaleParams> {
    let (_, params) = read_checkpoints(dir)?;
    params.check(&cfg.pyramid()?)?;
    Ok(params)
}

fn combined_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.combined.cam"))
}

fn refined_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.refined.cam"))
}

fn write_reports(out: &Path, records: &[EvalRecord]) -> molt_core::Result<String> {
    let metrics = format_metrics(records)?;
    write_text(&out.join("metrics.txt"), &metrics)?;
    write_text(&out.join("per_image.csv"), &format_per_image_csv(records))?;
    write_text(&out.join("records.tsv"), &format_records(records))?;
    Ok(metrics)
}

fn cmd_train(a: &TrainArgs) -> molt_core::Result<()> {
    let cfg = run_config(&a.common, None)?;
    let out = out_dir(&a.common.out);
    let entries = load_manifest(&a.manifest)?;
    let data = load_labeled(&entries)?;
    write_text(&out.join(RUN_CONFIG_FILE), &cfg.to_text())?;
    let mut log = String::new();
    let outcome = train_with(&data, &cfg.pyramid()?, &cfg.train_config(), Some(&out), |epoch, loss| {
        let line = format!("epoch={epoch} loss={loss}\n");
        eprint!("{line}");
        log.push_str(&line);
    })?;
    write_text(&out.join("train_log.txt"), &log)?;
    println!("trained {} epochs; checkpoints in {}", outcome.epoch_losses.len(), out.display());
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> molt_core::Result<()> {
    let cfg = run_config(&a.common, Some(&a.checkpoints))?;
    let params = load_params(&a.checkpoints, &cfg)?;
    let pcfg = cfg.pyramid()?;
    let entries = load_manifest(&a.manifest)?;
    let out = out_dir(&a.common.out);
    let lines = entries
        .par_iter()
        .map(|e| {
            let id = e.image_id();
            let image = decode_image(&e.image_path)?;
            let inf = infer_image(&image, &params, &pcfg)?;
            for (k, cam) in inf.branch_cams.iter().enumerate() {
                write_cam(&out.join(format!("{id}.scale{k}.cam")), cam)?;
            }
            write_cam(&combined_path(&out, &id), &inf.combined)?;
            if a.render {
                render_overlay(&out, &id, &image, &inf.combined, inf.top5[0], e, cfg.tau)?;
            }
            Ok(format_scores_line(&id, &inf))
        })
        .collect::<molt_core::Result<Vec<_>>>()?;
    write_text(&out.join(SCORES_FILE), &lines.concat())?;
    println!("wrote CAMs and {} for {} images to {}", SCORES_FILE, entries.len(), out.display());
    Ok(())
}

fn render_overlay(
    out: &Path,
    id: &str,
    image: &molt_core::Tensor,
    cam: &Cam,
    class: usize,
    entry: &ManifestEntry,
    tau: f64,
) -> molt_core::Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let map = cam_at_image_size(cam, h, w)?.channel(class)?;
    let pred = localize(&map, tau)?;
    render_heatmap(&map, image, Some(&pred), &entry.gt_boxes, &out.join(format!("{id}.heatmap.ppm")))
}

fn cmd_segment(a: &SegmentArgs) -> molt_core::Result<()> {
    let cfg = run_config(&a.common, None)?;
    let entries = load_manifest(&a.manifest)?;
    let out = out_dir(&a.common.out);
    entries.par_iter().try_for_each(|e| {
        let id = e.image_id();
        let image = decode_image(&e.image_path)?;
        let seg = segment_image(&image, &cfg.slic, &cfg.dpc_config())?;
        write_segments(&out.join(format!("{id}.seg")), &seg)?;
        write_image(&out.join(format!("{id}.boundaries.ppm")), &boundary_overlay(&seg, &image)?)
    })?;
    println!("segmented {} images into {}", entries.len(), out.display());
    Ok(())
}

fn cmd_refine(a: &RefineArgs) -> molt_core::Result<()> {
    let cfg = run_config(&a.common, a.checkpoints.as_deref())?;
    let entries = load_manifest(&a.manifest)?;
    let out = out_dir(&a.common.out);
    entries.par_iter().try_for_each(|e| {
        let id = e.image_id();
        let image = decode_image(&e.image_path)?;
        let cam = read_cam(&combined_path(&a.cams, &id))?;
        let refined = match &a.segments {
            Some(dir) => {
                let seg = read_segments(&dir.join(format!("{id}.seg")))?;
                let (h, w) = (image.shape()[0], image.shape()[1]);
                Cam {
                    map: refine_channels(&cam_at_image_size(&cam, h, w)?, &seg, cfg.refine)?,
                    scale_id: molt_core::cam::REFINED_SCALE_ID,
                }
            }
            None => refine_image(&image, &cam, &cfg.slic, &cfg.dpc_config(), cfg.refine)?.1,
        };
        write_cam(&refined_path(&out, &id), &refined)
    })?;
    println!("refined {} CAMs into {}", entries.len(), out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> molt_core::Result<()> {
    let cfg = run_config(&a.common, a.checkpoints.as_deref())?;
    let out = out_dir(&a.common.out);
    let records = if let Some(path) = &a.records {
        read_records(path)?
    } else {
        let manifest = a.manifest.as_ref().expect("clap requires --manifest here");
        let entries = load_manifest(manifest)?;
        if let Some(dir) = &a.checkpoints {
            let params = load_params(dir, &cfg)?;
            run_end_to_end(&entries, &params, &cfg, a.refined)?
                .into_iter()
                .map(|r| r.record)
                .collect()
        } else {
            let cams = a.cams.as_ref().expect("clap requires --cams here");
            let scores_path = a.scores.as_ref().expect("clap requires --scores here");
            let scores = read_scores(scores_path)?;
            entries
                .par_iter()
                .map(|e| {
                    let id = e.image_id();
                    let (_, top5) = scores.get(&id).ok_or_else(|| Error::Parse {
                        location: scores_path.display().to_string(),
                        message: format!("no scores for image `{id}`"),
                    })?;
                    let cam = if a.refined {
                        read_cam(&refined_path(cams, &id))?
                    } else {
                        read_cam(&combined_path(cams, &id))?
                    };
                    let (h, w) = molt_core::io::image::image_dims(&e.image_path)?;
                    make_record(&id, &cam, h, w, top5, e.class_id, &e.gt_boxes, cfg.tau)
                })
                .collect::<molt_core::Result<Vec<_>>>()?
        }
    };
    let metrics = write_reports(&out, &records)?;
    print!("{metrics}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> molt_core::Result<()> {
    let out = out_dir(&a.out);
    let cfg = SynthConfig {
        count: a.count,
        side: a.side,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let data = synth_corpus(&cfg)?;
    let split = a.train_count.min(data.len());
    let (_, train) = write_corpus(&out, "train", &data[..split])?;
    let (_, test) = write_corpus(&out, "test", &data[split..])?;
    write_text(&out.join("train.tsv"), &train)?;
    write_text(&out.join("test.tsv"), &test)?;
    println!("wrote {} train and {} test images to {}", split, data.len() - split, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("molt: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
