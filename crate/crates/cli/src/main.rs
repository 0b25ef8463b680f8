use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use topotta::adapt::AdaptState;
use topotta::checkpoint::{load_checkpoint, save_checkpoint, save_tensor};
use topotta::config::RunConfig;
use topotta::formats::{load_image, load_mask, save_image, save_mask};
use topotta::metrics::{render_report, resize_label, topology_report, BettiConvention, BinaryMask};
use topotta::segnet::{train_source, SegModel};
use topotta::synth::generate;
use topotta::{Error, Tensor};

#[derive(Parser)]
#[command(name = "topotta", version, about = "Topology-enhanced test-time adaptation for tubular segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr_stage1=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write a checkpoint.
    TrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory with `images/` and `labels/`; synthesized from
        /// the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log (JSON lines); defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt to a stream of images in file-name order.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `.pgm` images.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory of ground-truth masks; enables the metrics report.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plain forward passes of the source model.
        #[arg(long)]
        no_adapt: bool,
    },
    /// Compare predicted masks against ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Average Betti errors over a P×P patch grid.
        #[arg(long, value_name = "P")]
        betti_patches: Option<usize>,
    },
    /// Build a pseudo-break hard sample for one image.
    GenerateHard {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resize label masks with connectivity-preserving interpolation.
    ResizeLabels {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
    },
    /// Write synthetic image/label pairs.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| format!("reading {}", dir.display()))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match p {
        Some(p) => Ok(p),
        None => bail!("missing {what}: pass it as a flag or set it in the configuration"),
    }
}

fn load_source(path: &Path, cfg: &RunConfig) -> Result<SegModel> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.meta() != cfg.model {
        return Err(Error::InvalidState(format!(
            "checkpoint {} holds a {:?} model but the configuration asks for {:?}",
            path.display(),
            ckpt.model.meta(),
            cfg.model
        ))
        .into());
    }
    Ok(ckpt.model)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    for l in lines {
        writeln!(f, "{l}").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn train_cmd(cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let out = required(out.or(cfg.output.clone()), "checkpoint output path (--out)")?;
    let data = data.or(cfg.data.clone());
    let dataset: Vec<(Tensor, Tensor)> = match &data {
        Some(dir) => {
            let images = list_pgm(&dir.join("images"))?;
            let mut pairs = Vec::with_capacity(images.len());
            for img in images {
                let label = dir.join("labels").join(file_name(&img));
                let mask = load_mask(&label)?;
                let t = mask.to_tensor().reshape(vec![1, 1, mask.height(), mask.width()])?;
                pairs.push((load_image(&img)?, t));
            }
            pairs
        }
        None => generate(&cfg.synth_domain.spec(cfg.synth_size), cfg.synth_count, cfg.seed)?
            .into_iter()
            .map(|s| (s.image, s.label))
            .collect(),
    };
    let model = SegModel::new(cfg.model, cfg.seed)?;
    let outcome = train_source(&model, &dataset, &cfg.train)?;
    save_checkpoint(&out, &outcome.model, cfg.seed)?;
    let mut lines = vec![json!({
        "record": "header",
        "lr": cfg.train.lr,
        "batch_size": cfg.train.batch_size,
        "epochs": cfg.train.epochs,
        "seed": cfg.seed,
        "images": dataset.len(),
        "source": data.as_ref().map(|d| d.display().to_string()).unwrap_or_else(|| format!("synth:{}", cfg.synth_domain.name())),
    })
    .to_string()];
    for e in &outcome.epochs {
        lines.push(json!({"record": "epoch", "epoch": e.epoch, "mean_loss": e.mean_loss, "val_dice": e.val_dice}).to_string());
    }
    lines.push(json!({"record": "best", "epoch": outcome.best_epoch, "val_dice": outcome.best_val_dice}).to_string());
    let log = log.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    write_lines(&log, &lines)?;
    println!(
        "wrote {} (best epoch {}, validation dice {:.4})",
        out.display(),
        outcome.best_epoch,
        outcome.best_val_dice
    );
    Ok(())
}

fn adapt_cmd(
    cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    labels: Option<PathBuf>,
    out: Option<PathBuf>,
    no_adapt: bool,
) -> Result<()> {
    let checkpoint = required(checkpoint.or(cfg.checkpoint.clone()), "checkpoint (--checkpoint)")?;
    let input = required(input.or(cfg.data.clone()), "input directory (--input)")?;
    let out = required(out.or(cfg.output.clone()), "output directory (--out)")?;
    let source = load_source(&checkpoint, &cfg)?;
    let images = list_pgm(&input)?;
    if images.is_empty() {
        bail!("no .pgm images in {}", input.display());
    }
    let (masks_dir, probs_dir) = (out.join("masks"), out.join("probs"));
    create_dir(&masks_dir)?;
    create_dir(&probs_dir)?;
    let mut state = if no_adapt {
        None
    } else {
        Some(AdaptState::new(&source, cfg.adapt.clone(), cfg.hg.clone(), cfg.seed)?)
    };
    let mut log = vec![json!({
        "record": "header",
        "mode": if no_adapt { "no-adapt" } else { "topotta" },
        "stage1_iterations": if no_adapt { 0 } else { cfg.adapt.stage_iterations() },
        "stage2_iterations": if no_adapt { 0 } else { cfg.adapt.stage_iterations() },
        "variant": cfg.hg.variant.name(),
        "seed": cfg.seed,
    })
    .to_string()];
    let mut rows = Vec::new();
    for path in &images {
        let image = load_image(path)?;
        let name = stem(path);
        let prob = match state.as_mut() {
            None => source.forward(&image, None)?,
            Some(st) => {
                let outcome = st.adapt_sample(&image)?;
                let mut rec: serde_json::Value = serde_json::from_str(&outcome.log.to_json())?;
                rec["record"] = json!("sample");
                rec["image"] = json!(file_name(path));
                log.push(rec.to_string());
                outcome.prediction
            }
        };
        let mask = BinaryMask::from_tensor(&prob, cfg.adapt.binarize_threshold)?;
        save_mask(&masks_dir.join(format!("{name}.pgm")), &mask)?;
        save_tensor(&probs_dir.join(format!("{name}.tensor")), "probability", &prob)?;
        if let Some(dir) = &labels {
            let gt = load_mask(&dir.join(file_name(path)))?;
            rows.push((file_name(path), topology_report(&mask, &gt, BettiConvention::WholeImage)?));
        }
    }
    write_lines(&out.join("adapt.log"), &log)?;
    if labels.is_some() {
        let report = render_report(&rows, BettiConvention::WholeImage);
        fs::write(out.join("report.txt"), &report).map_err(|e| Error::Io {
            path: out.join("report.txt"),
            source: e,
        })?;
        print!("{report}");
    }
    println!("adapted {} images into {}", images.len(), out.display());
    Ok(())
}

fn metrics_cmd(pred: PathBuf, gt: PathBuf, out: Option<PathBuf>, patches: Option<usize>) -> Result<()> {
    let convention = patches.map_or(BettiConvention::WholeImage, BettiConvention::Patched);
    let mut rows = Vec::new();
    for p in list_pgm(&pred)? {
        let pm = load_mask(&p)?;
        let gm = load_mask(&gt.join(file_name(&p)))?;
        rows.push((file_name(&p), topology_report(&pm, &gm, convention)?));
    }
    let report = render_report(&rows, convention);
    match out {
        Some(path) => fs::write(&path, report).map_err(|e| Error::Io { path, source: e })?,
        None => print!("{report}"),
    }
    Ok(())
}

fn generate_hard_cmd(cfg: RunConfig, checkpoint: Option<PathBuf>, image: PathBuf, out: PathBuf) -> Result<()> {
    let checkpoint = required(checkpoint.or(cfg.checkpoint.clone()), "checkpoint (--checkpoint)")?;
    let source = load_source(&checkpoint, &cfg)?;
    let img = load_image(&image)?;
    let mut state = AdaptState::new(&source, cfg.adapt.clone(), cfg.hg.clone(), cfg.seed)?;
    let (pseudo, plan) = state.hard_sample(&img)?;
    let patches = out.join("patches");
    create_dir(&patches)?;
    save_image(&out.join("hard.pgm"), &plan.hard_image)?;
    save_tensor(&out.join("weights.tensor"), "weights", &plan.weight_map)?;
    save_tensor(&out.join("pseudo.tensor"), "pseudo_label", &pseudo)?;
    let s = cfg.hg.s;
    let mut records = Vec::new();
    for (i, b) in plan.breaks.iter().enumerate() {
        save_image(&patches.join(format!("kp{i:03}_before.pgm")), &Tensor::image(s, s, b.before.clone())?)?;
        save_image(&patches.join(format!("kp{i:03}_after.pgm")), &Tensor::image(s, s, b.after.clone())?)?;
        records.push(json!({"keypoint": b.keypoint, "fg": b.fg, "bg": b.bg}));
    }
    let summary = json!({
        "candidates": plan.candidates,
        "accepted": records,
        "rejected": plan.rejected,
    });
    fs::write(out.join("plan.json"), serde_json::to_string_pretty(&summary)?).map_err(|e| Error::Io {
        path: out.join("plan.json"),
        source: e,
    })?;
    println!(
        "{} of {} keypoints accepted; wrote {}",
        plan.breaks.len(),
        plan.candidates,
        out.display()
    );
    Ok(())
}

fn resize_cmd(input: PathBuf, out: PathBuf, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        bail!("target size must be at least 1x1");
    }
    create_dir(&out)?;
    let files = list_pgm(&input)?;
    for p in &files {
        let m = resize_label(&load_mask(p)?, h, w)?;
        save_mask(&out.join(file_name(p)), &m)?;
    }
    println!("resized {} labels to {h}x{w}", files.len());
    Ok(())
}

fn synth_cmd(cfg: RunConfig, out: PathBuf) -> Result<()> {
    let (images, labels) = (out.join("images"), out.join("labels"));
    create_dir(&images)?;
    create_dir(&labels)?;
    let samples = generate(&cfg.synth_domain.spec(cfg.synth_size), cfg.synth_count, cfg.seed)?;
    for (i, s) in samples.iter().enumerate() {
        save_image(&images.join(format!("{i:04}.pgm")), &s.image)?;
        save_mask(&labels.join(format!("{i:04}.pgm")), &BinaryMask::from_tensor(&s.label, 0.5)?)?;
    }
    println!("wrote {} {} samples to {}", samples.len(), cfg.synth_domain.name(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource { cfg, data, out, log } => train_cmd(cfg.load()?, data, out, log),
        Command::Adapt {
            cfg,
            checkpoint,
            input,
            labels,
            out,
            no_adapt,
        } => adapt_cmd(cfg.load()?, checkpoint, input, labels, out, no_adapt),
        Command::Metrics {
            pred,
            gt,
            out,
            betti_patches,
        } => metrics_cmd(pred, gt, out, betti_patches),
        Command::GenerateHard {
            cfg,
            checkpoint,
            image,
            out,
        } => generate_hard_cmd(cfg.load()?, checkpoint, image, out),
        Command::ResizeLabels {
            input,
            out,
            height,
            width,
        } => resize_cmd(input, out, height, width),
        Command::Synth { cfg, out } => synth_cmd(cfg.load()?, out),
    }
}

/// 1 for numeric failures (divergence, non-finite values), 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<Error>())
        .any(Error::is_numeric);
    if numeric {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
