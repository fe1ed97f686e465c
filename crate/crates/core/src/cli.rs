//! Subcommand front end. Every command resolves one [`RunConfig`]
//! (defaults < config file < flags), validates it, then runs deterministically
//! off the seeds it contains. Outputs are written atomically so a failing run
//! leaves no partial files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cam::{compute_cam, evaluate, upsample_bilinear, cam_to_box, cam_to_u8, LocOutcome, MetricsReport};
use crate::checkpoint;
use crate::config::{Provenance, RunConfig};
use crate::data::{image_to_rgb8, load_dataset, generate_dataset, LoadedDataset, Sample, Split};
use crate::dfm::{Branch, DfmConfig, DfmVariant, Mode};
use crate::error::Result;
use crate::io::{atomic_write, write_pgm, write_ppm};
use crate::net::{argmax, DfmSlots, Network, SlotBranches, TrainConfig, TrainState};
use crate::tensor::SpatialMap;

/// A bad invocation (missing required flag, malformed list, ...) — reported
/// with exit code 2, like a parse error, instead of the runtime-failure 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "dfm", version, about = "Dual-attention focused module: training and localization toolkit")]
pub struct Cli {
    /// Config file with one `key = value` per line (`#` comments).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for dataset and training randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Dataset directory (as written by gen-data).
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic marker-localization dataset.
    GenData(GenArgs),
    /// Train a classifier, with the attention module or as a plain baseline.
    Train(TuneArgs),
    /// Evaluate a checkpoint: classification and localization metrics.
    Eval(EvalArgs),
    /// Train and evaluate every module variant across a seed set.
    Ablate(AblateArgs),
    /// Export CAM graymaps, overlays, and box annotations for sample ids.
    Heatmap(HeatmapArgs),
}

/// Dataset-shape overrides for gen-data.
#[derive(Args, Debug, Default)]
pub struct GenArgs {
    #[arg(long, value_name = "N")]
    pub train_per_class: Option<String>,
    #[arg(long, value_name = "N")]
    pub test_per_class: Option<String>,
    #[arg(long, value_name = "PX")]
    pub image_size: Option<String>,
    #[arg(long, value_name = "N")]
    pub clutter_max: Option<String>,
    #[arg(long)]
    pub clutter_lo: Option<String>,
    #[arg(long)]
    pub clutter_hi: Option<String>,
}

/// Training and module hyperparameter overrides.
#[derive(Args, Debug, Default)]
pub struct TuneArgs {
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Channel mask threshold ratio.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Position mask threshold ratio.
    #[arg(long)]
    pub beta: Option<String>,
    /// Border-ring weight.
    #[arg(long)]
    pub omega: Option<String>,
    /// Position-enhancement coefficient in the channel fusion.
    #[arg(long)]
    pub delta: Option<String>,
    /// Channel-enhancement coefficient in the position fusion.
    #[arg(long)]
    pub gamma: Option<String>,
    /// Probability of selecting the position fusion.
    #[arg(long)]
    pub tau: Option<String>,
    /// additive | multiplicative
    #[arg(long)]
    pub apply_mode: Option<String>,
    /// channel | position | dual | fusion | focused
    #[arg(long)]
    pub variant: Option<String>,
    /// Which insertion slots carry the module: ab | a | b | none
    #[arg(long)]
    pub dfm_slots: Option<String>,
    /// Train the plain baseline with no module at all.
    #[arg(long)]
    pub no_dfm: bool,
    #[arg(long)]
    pub theta_seg: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (default: <out>/checkpoint.bin).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Which split to evaluate: test (default) or train.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write one JSON object per sample to this path.
    #[arg(long, value_name = "PATH")]
    pub per_sample: Option<PathBuf>,
    #[arg(long)]
    pub theta_seg: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct AblateArgs {
    /// Comma-separated variants (default: all five).
    #[arg(long, value_name = "LIST")]
    pub variants: Option<String>,
    /// Comma-separated training seeds (default: 1,2,3).
    #[arg(long, value_name = "LIST", default_value = "1,2,3")]
    pub train_seeds: String,
    #[command(flatten)]
    pub tune: TuneArgs,
}

#[derive(Args, Debug, Default)]
pub struct HeatmapArgs {
    /// Checkpoint to visualize (default: <out>/checkpoint.bin).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated sample ids.
    #[arg(long, value_name = "LIST")]
    pub ids: String,
    #[arg(long)]
    pub theta_seg: Option<String>,
}

pub fn main_impl() -> i32 {
    let cli = Cli::parse();
    let env = env_logger::Env::new().filter_or("DFM_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("usage error: {e}");
                2
            } else {
                eprintln!("error: {e:#}");
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cli.config {
        rc.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        rc.set("seed", &seed.to_string(), Provenance::Flag)?;
    }
    if let Some(out) = &cli.out {
        rc.set("out", &out.to_string_lossy(), Provenance::Flag)?;
    }
    if let Some(data) = &cli.data {
        rc.set("data", &data.to_string_lossy(), Provenance::Flag)?;
    }
    match &cli.cmd {
        Cmd::GenData(args) => {
            apply_gen_flags(&mut rc, args)?;
            rc.validate()?;
            cmd_gen_data(&rc)
        }
        Cmd::Train(args) => {
            apply_tune_flags(&mut rc, args)?;
            rc.validate()?;
            cmd_train(&rc)
        }
        Cmd::Eval(args) => {
            if let Some(v) = &args.theta_seg {
                rc.set("theta_seg", v, Provenance::Flag)?;
            }
            rc.validate()?;
            cmd_eval(&rc, args)
        }
        Cmd::Ablate(args) => {
            apply_tune_flags(&mut rc, &args.tune)?;
            rc.validate()?;
            cmd_ablate(&rc, args)
        }
        Cmd::Heatmap(args) => {
            if let Some(v) = &args.theta_seg {
                rc.set("theta_seg", v, Provenance::Flag)?;
            }
            rc.validate()?;
            cmd_heatmap(&rc, args)
        }
    }
}

fn apply_gen_flags(rc: &mut RunConfig, args: &GenArgs) -> Result<()> {
    for (key, value) in [
        ("train_per_class", &args.train_per_class),
        ("test_per_class", &args.test_per_class),
        ("image_size", &args.image_size),
        ("clutter_max", &args.clutter_max),
        ("clutter_lo", &args.clutter_lo),
        ("clutter_hi", &args.clutter_hi),
    ] {
        if let Some(v) = value {
            rc.set(key, v, Provenance::Flag)?;
        }
    }
    Ok(())
}

fn apply_tune_flags(rc: &mut RunConfig, args: &TuneArgs) -> Result<()> {
    for (key, value) in [
        ("lr", &args.lr),
        ("momentum", &args.momentum),
        ("epochs", &args.epochs),
        ("batch_size", &args.batch_size),
        ("alpha", &args.alpha),
        ("beta", &args.beta),
        ("omega", &args.omega),
        ("delta", &args.delta),
        ("gamma", &args.gamma),
        ("tau", &args.tau),
        ("apply_mode", &args.apply_mode),
        ("variant", &args.variant),
        ("dfm_slots", &args.dfm_slots),
        ("theta_seg", &args.theta_seg),
    ] {
        if let Some(v) = value {
            rc.set(key, v, Provenance::Flag)?;
        }
    }
    if args.no_dfm {
        rc.set("dfm", "false", Provenance::Flag)?;
    }
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| UsageError(format!("--{flag} is required for this command")).into())
}

fn cmd_gen_data(rc: &RunConfig) -> anyhow::Result<()> {
    let out = require(&rc.out, "out")?;
    let index = generate_dataset(&rc.dataset, out)?;
    println!(
        "wrote {} images and index.jsonl under {} (seed {})",
        index.entries.len(),
        out.display(),
        rc.dataset.seed
    );
    Ok(())
}

fn cmd_train(rc: &RunConfig) -> anyhow::Result<()> {
    let out = require(&rc.out, "out")?;
    let data = require(&rc.data, "data")?;
    let ds = load_dataset(data)?;
    let cfg = rc.effective_train();
    let state = train_on(&ds, cfg)?;

    std::fs::create_dir_all(out)?;
    let mut csv = String::from("epoch,loss,accuracy\n");
    for s in &state.log {
        let _ = writeln!(csv, "{},{},{}", s.epoch, s.loss, s.accuracy);
    }
    atomic_write(&out.join("train_log.csv"), csv.as_bytes())?;
    checkpoint::save(&state, &out.join("checkpoint.bin"))?;
    let last = state.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs (slots {}): loss {}, accuracy {}; wrote checkpoint.bin and train_log.csv under {}",
        state.epoch,
        state.cfg.dfm_slots.as_str(),
        last.loss,
        last.accuracy,
        out.display()
    );
    Ok(())
}

/// Train on the train split of a loaded dataset.
pub fn train_on(ds: &LoadedDataset, cfg: TrainConfig) -> Result<TrainState> {
    let idx = ds.split_indices(Split::Train);
    let items: Vec<&Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    let mut state = TrainState::new(cfg, ds.num_classes())?;
    while state.epoch < state.cfg.epochs {
        let s = state.run_epoch(&items)?;
        log::info!("epoch {}: loss {} accuracy {}", s.epoch, s.loss, s.accuracy);
    }
    Ok(state)
}

/// Localization verdict for one sample plus the CAM it came from.
pub struct SampleLoc {
    pub outcome: LocOutcome,
    /// Feature-resolution CAM of the predicted class.
    pub cam: SpatialMap,
}

/// Eval-mode forward, CAM of the argmax class, threshold, box, IoU.
pub fn localize(net: &Network, dfm: &DfmConfig, slots: DfmSlots, sample: &Sample, theta_seg: f64) -> Result<SampleLoc> {
    // Branches are inert in eval mode unless the module was explicitly kept
    // active; a fixed choice keeps that case deterministic too.
    let branches = SlotBranches { a: Branch::Channel, b: Branch::Channel };
    let fwd = net.forward_sample(&sample.image, dfm, slots, Mode::Eval, branches)?;
    let pred = argmax(&fwd.logits);
    let weights = net.fc.class_weights(pred)?;
    let cam = compute_cam(&fwd.final_features, &weights)?;
    let (_, h, w) = sample.image.shape();
    let pred_box = cam_to_box(&cam, h, w, theta_seg)?;
    Ok(SampleLoc {
        outcome: LocOutcome::from_boxes(sample.id, pred, sample.label, pred_box, sample.gt_box),
        cam,
    })
}

/// Run the full localization pipeline over one split.
pub fn evaluate_split(
    state: &TrainState,
    ds: &LoadedDataset,
    split: Split,
    theta_seg: f64,
) -> Result<(MetricsReport, Vec<LocOutcome>)> {
    let idx = ds.split_indices(split);
    let mut outcomes = Vec::with_capacity(idx.len());
    for i in idx {
        let loc = localize(&state.net, &state.cfg.dfm, state.cfg.dfm_slots, &ds.samples[i], theta_seg)?;
        outcomes.push(loc.outcome);
    }
    let report = evaluate(&outcomes)?;
    Ok((report, outcomes))
}

#[derive(Serialize)]
struct OutcomeRow {
    id: u64,
    true_class: usize,
    pred_class: usize,
    pred_box: Option<[usize; 4]>,
    gt_box: [usize; 4],
    iou: f64,
    clas_correct: bool,
    loc_correct: bool,
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(UsageError(format!("--split must be train or test, got {other:?}")).into()),
    }
}

fn checkpoint_path(rc: &RunConfig, explicit: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => Ok(require(&rc.out, "out (or --checkpoint)")?.join("checkpoint.bin")),
    }
}

fn cmd_eval(rc: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let out = require(&rc.out, "out")?;
    let data = require(&rc.data, "data")?;
    let split = parse_split(&args.split)?;
    let ckpt_path = checkpoint_path(rc, &args.checkpoint)?;
    let state = checkpoint::load(&ckpt_path)?;
    let ds = load_dataset(data)?;
    let (report, outcomes) = evaluate_split(&state, &ds, split, rc.theta_seg)?;

    let run_name = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mut csv = String::from("run,seed,split,top1_clas,top1_loc,gt_known_loc\n");
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{}",
        run_name,
        state.cfg.seed,
        args.split,
        report.top1_clas,
        report.top1_loc,
        report.gt_known_loc
    );
    std::fs::create_dir_all(out)?;
    atomic_write(&out.join("eval.csv"), csv.as_bytes())?;

    if let Some(path) = &args.per_sample {
        let mut jsonl = String::new();
        for o in &outcomes {
            let row = OutcomeRow {
                id: o.id,
                true_class: o.true_class,
                pred_class: o.pred_class,
                pred_box: o.pred_box.as_ref().map(|b| [b.x0, b.y0, b.x1, b.y1]),
                gt_box: [o.gt_box.x0, o.gt_box.y0, o.gt_box.x1, o.gt_box.y1],
                iou: o.iou,
                clas_correct: o.clas_correct,
                loc_correct: o.loc_correct,
            };
            let _ = writeln!(jsonl, "{}", serde_json::to_string(&row)?);
        }
        atomic_write(path, jsonl.as_bytes())?;
    }
    println!(
        "{} {} n={}: top1_clas {} top1_loc {} gt_known_loc {}",
        run_name, args.split, report.n, report.top1_clas, report.top1_loc, report.gt_known_loc
    );
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_ablate(rc: &RunConfig, args: &AblateArgs) -> anyhow::Result<()> {
    let out = require(&rc.out, "out")?;
    let data = require(&rc.data, "data")?;

    let variants: Vec<DfmVariant> = match &args.variants {
        None => DfmVariant::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| UsageError(format!("--variants: {e}")))
            })
            .collect::<std::result::Result<_, _>>()?,
    };
    let seeds: Vec<u64> = args
        .train_seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| UsageError(format!("--train-seeds: bad seed {s:?}")))
        })
        .collect::<std::result::Result<_, _>>()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(UsageError("need at least one variant and one seed".into()).into());
    }

    let ds = load_dataset(data)?;
    let mut csv = String::from("variant,seed,top1_clas,top1_loc,gt_known_loc\n");
    let mut summaries = String::new();
    for &variant in &variants {
        let mut clas = Vec::new();
        let mut loc = Vec::new();
        let mut known = Vec::new();
        for &seed in &seeds {
            let mut cfg = rc.effective_train();
            cfg.seed = seed;
            cfg.dfm.variant = variant;
            log::info!("ablate {} seed {seed}: training", variant.as_str());
            let state = train_on(&ds, cfg)?;
            let (report, _) = evaluate_split(&state, &ds, Split::Test, rc.theta_seg)?;
            let _ = writeln!(
                csv,
                "{},{seed},{},{},{}",
                variant.as_str(),
                report.top1_clas,
                report.top1_loc,
                report.gt_known_loc
            );
            clas.push(report.top1_clas);
            loc.push(report.top1_loc);
            known.push(report.gt_known_loc);
        }
        let line = format!(
            "{},median,{},{},{}",
            variant.as_str(),
            median(&mut clas),
            median(&mut loc),
            median(&mut known)
        );
        summaries.push_str(&line);
        summaries.push('\n');
        println!("{line}");
    }
    csv.push_str(&summaries);
    std::fs::create_dir_all(out)?;
    atomic_write(&out.join("ablation.csv"), csv.as_bytes())?;
    println!(
        "wrote {} result rows + {} summaries to {}",
        variants.len() * seeds.len(),
        variants.len(),
        out.join("ablation.csv").display()
    );
    Ok(())
}

/// Draw a 1-px rectangle outline into one channel of an interleaved RGB
/// buffer. The box is half-open, so the outline sits on its outermost pixels.
fn draw_box_outline(rgb: &mut [u8], img_w: usize, b: &crate::cam::BBox, channel: usize) {
    let mut put = |x: usize, y: usize| {
        let p = 3 * (y * img_w + x);
        rgb[p] = 0;
        rgb[p + 1] = 0;
        rgb[p + 2] = 0;
        rgb[p + channel] = 255;
    };
    for x in b.x0..b.x1 {
        put(x, b.y0);
        put(x, b.y1 - 1);
    }
    for y in b.y0..b.y1 {
        put(b.x0, y);
        put(b.x1 - 1, y);
    }
}

fn cmd_heatmap(rc: &RunConfig, args: &HeatmapArgs) -> anyhow::Result<()> {
    let out = require(&rc.out, "out")?;
    let data = require(&rc.data, "data")?;
    let ckpt_path = checkpoint_path(rc, &args.checkpoint)?;
    let ids: Vec<u64> = args
        .ids
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| UsageError(format!("--ids: bad id {s:?}")))
        })
        .collect::<std::result::Result<_, _>>()?;
    if ids.is_empty() {
        return Err(UsageError("--ids must name at least one sample".into()).into());
    }

    let state = checkpoint::load(&ckpt_path)?;
    let ds = load_dataset(data)?;
    let missing: Vec<u64> = ids
        .iter()
        .copied()
        .filter(|id| !ds.samples.iter().any(|s| s.id == *id))
        .collect();
    if !missing.is_empty() {
        anyhow::bail!("unknown sample ids: {missing:?}");
    }

    std::fs::create_dir_all(out)?;
    for id in ids {
        let sample = ds.samples.iter().find(|s| s.id == id).expect("checked above");
        let loc = localize(&state.net, &state.cfg.dfm, state.cfg.dfm_slots, sample, rc.theta_seg)?;
        let (_, h, w) = sample.image.shape();
        let up = upsample_bilinear(&loc.cam, h, w)?;
        let heat = cam_to_u8(&up);
        write_pgm(&out.join(format!("cam_{id:06}.pgm")), w, h, &heat)?;

        // Overlay: dimmed image with the heatmap burned into the red channel.
        let base = image_to_rgb8(&sample.image);
        let mut overlay = vec![0u8; base.len()];
        for (i, px) in overlay.chunks_exact_mut(3).enumerate() {
            px[0] = (base[3 * i] / 2).saturating_add(heat[i] / 2 + heat[i] / 4);
            px[1] = base[3 * i + 1] / 2;
            px[2] = base[3 * i + 2] / 2;
        }
        write_ppm(&out.join(format!("overlay_{id:06}.ppm")), w, h, &overlay)?;

        // Annotation: ground truth in green, prediction in red.
        let mut boxed = base.clone();
        draw_box_outline(&mut boxed, w, &sample.gt_box, 1);
        match &loc.outcome.pred_box {
            Some(pb) => draw_box_outline(&mut boxed, w, pb, 0),
            None => println!("sample {id}: empty segmentation mask (flat CAM), no predicted box"),
        }
        write_ppm(&out.join(format!("boxes_{id:06}.ppm")), w, h, &boxed)?;
        println!(
            "sample {id}: pred class {} (true {}), iou {}",
            loc.outcome.pred_class, loc.outcome.true_class, loc.outcome.iou
        );
    }
    Ok(())
}
