use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rsrcnn::data::{synth_generate, write_mask_pgm, Manifest, SliceRecord};
use rsrcnn::hyperopt::trace_csv;
use rsrcnn::metrics::{metrics_csv, per_slice_stats, split_dataset, stats_csv, Split};
use rsrcnn::pipeline::{
    ablate_k, ablation_csv, cross_validate, evaluate, history_csv, infer_slice, load_records, overlay_csv, train,
    tune_crf, write_overlays, PipelineConfig, PipelineWeights,
};

#[derive(Parser)]
#[command(name = "rsrcnn", version, about = "Punctate-lesion detection and segmentation on 2-D slices")]
struct Cli {
    /// Base configuration the config file and overrides apply to.
    #[arg(long, value_enum, default_value_t = Preset::Canonical, global = true)]
    preset: Preset,
    /// Config file: `key = value` lines or a JSON object.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits, initialization, sampling, synthesis and tuning.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `--set sgd.lr=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Canonical,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, masks, manifest.json).
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every stage jointly and write the best weights.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV (default: next to the weights).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Directory for per-epoch checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Predict masks and boxes.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        /// Directory for `{subject}_{slice}.pgm` masks and `boxes.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bayesian optimization of the CRF parameters on the validation split.
    TuneCrf {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Trace CSV, one row per evaluation.
        #[arg(long)]
        trace: PathBuf,
        /// Resolved configuration with the tuned CRF parameters (JSON).
        #[arg(long)]
        out_config: PathBuf,
    },
    /// Per-slice metrics and aggregates.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Not needed with `--five-fold`.
        #[arg(long, required_unless_present = "five_fold")]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Retrain and evaluate on five subject folds of the whole dataset.
        #[arg(long)]
        five_fold: bool,
    },
    /// Retrain the mask head per expansion factor and evaluate each.
    AblateK {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Expansion factors (default: the configured grid).
        #[arg(long, value_delimiter = ',')]
        k: Vec<f64>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render TP/FP/FN overlays as PPM plus a counts CSV.
    Overlay {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest (JSON list of subject/slice/image/mask entries).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
    All,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match cli.preset {
        Preset::Canonical => PipelineConfig::default(),
        Preset::Desk => PipelineConfig::desk(),
    };
    if let Some(path) = &cli.config {
        cfg = cfg.load_over(path).context("config")?;
    }
    let mut pairs = Vec::new();
    for s in &cli.set {
        let (k, v) = s.split_once('=').with_context(|| format!("config: override `{s}` is not KEY=VALUE"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        for key in ["seed", "synth.seed", "bo.seed"] {
            pairs.push((key.to_string(), seed.to_string()));
        }
    }
    cfg = cfg.with_overrides(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

struct Dataset {
    manifest: Manifest,
    split: Split,
}

impl Dataset {
    fn open(args: &DataArgs, cfg: &PipelineConfig) -> Result<Self> {
        let manifest = Manifest::load(&args.manifest).context("data")?;
        let split = split_dataset(&manifest.subjects(), cfg.split, cfg.seed).context("data")?;
        Ok(Self { manifest, split })
    }

    fn records(&self, part: Part) -> Result<Vec<SliceRecord>> {
        let all = self.manifest.subjects();
        let ids = match part {
            Part::Train => &self.split.train,
            Part::Val => &self.split.val,
            Part::Test => &self.split.test,
            Part::All => &all,
        };
        Ok(load_records(&self.manifest, ids)?)
    }
}

fn load_weights(path: &Path, cfg: &PipelineConfig) -> Result<PipelineWeights> {
    Ok(PipelineWeights::load(path, cfg).context("weights")?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match cli.cmd {
        Command::SynthGen { out } => {
            let manifest = synth_generate(&cfg.synth, &out).context("synth-gen")?;
            println!("{}", manifest.display());
        }
        Command::Train {
            data,
            out,
            history,
            checkpoints,
        } => {
            let ds = Dataset::open(&data, &cfg)?;
            let report = train(&ds.records(Part::Train)?, &ds.records(Part::Val)?, &cfg, checkpoints.as_deref())
                .context("train")?;
            report.weights.save(&out).context("train")?;
            let history = history.unwrap_or_else(|| out.with_extension("loss.csv"));
            write(&history, &history_csv(&report.history))?;
            println!("best epoch {} -> {}", report.best_epoch, out.display());
        }
        Command::Infer {
            data,
            weights,
            split,
            out,
        } => {
            let ds = Dataset::open(&data, &cfg)?;
            let w = load_weights(&weights, &cfg)?;
            let mut boxes = String::from("subject,slice,score,y1,x1,y2,x2\n");
            for r in ds.records(split)? {
                let res = infer_slice(&r, &w, &cfg).with_context(|| format!("infer {}", r.label()))?;
                write_mask_pgm(&out.join(format!("{}_{:03}.pgm", r.subject_id, r.slice_index)), &res.mask)?;
                for roi in &res.rois {
                    let b = roi.expanded;
                    writeln!(boxes, "{},{},{},{},{},{},{}", r.subject_id, r.slice_index, roi.score, b.y1, b.x1, b.y2, b.x2)?;
                }
            }
            write(&out.join("boxes.csv"), &boxes)?;
        }
        Command::TuneCrf {
            data,
            weights,
            trace,
            out_config,
        } => {
            let ds = Dataset::open(&data, &cfg)?;
            let w = load_weights(&weights, &cfg)?;
            let tuned = tune_crf(&ds.records(Part::Val)?, &w, &cfg)?;
            write(&trace, &trace_csv(&tuned.space, &tuned.bo.trace))?;
            let resolved = PipelineConfig {
                crf: tuned.params.clone(),
                ..cfg
            };
            write(&out_config, &resolved.to_json())?;
            println!("validation DSC {:.4}", tuned.dsc);
        }
        Command::Evaluate {
            data,
            weights,
            split,
            out,
            five_fold,
        } => {
            let ds = Dataset::open(&data, &cfg)?;
            if five_fold {
                let cv = cross_validate(&ds.records(Part::All)?, &cfg)?;
                let json = serde_json::to_string_pretty(&cv)?;
                write(&out.join("five_fold.json"), &format!("{json}\n"))?;
                println!(
                    "micro DSC {:.4} +- {:.4}, mean DSC {:.4} +- {:.4}",
                    cv.micro_dsc.mean, cv.micro_dsc.sd, cv.mean_dsc.mean, cv.mean_dsc.sd
                );
                return Ok(());
            }
            let Some(weights) = weights else {
                bail!("evaluate: --weights is required without --five-fold");
            };
            let w = load_weights(&weights, &cfg)?;
            let ev = evaluate(&ds.records(split)?, &w, &cfg)?;
            write(&out.join("metrics.csv"), &metrics_csv(&ev.slices))?;
            write(&out.join("stats.csv"), &stats_csv(&per_slice_stats(&ev.slices).context("metrics")?))?;
            let json = serde_json::to_string_pretty(&ev.aggregate)?;
            write(&out.join("summary.json"), &format!("{json}\n"))?;
            println!("micro DSC {:.4}, mean DSC {:.4}", ev.aggregate.micro_dsc, ev.aggregate.mean_dsc);
        }
        Command::AblateK { data, weights, k, out } => {
            let ds = Dataset::open(&data, &cfg)?;
            let w = load_weights(&weights, &cfg)?;
            let ks = if k.is_empty() { cfg.ablation_k.clone() } else { k };
            let rows = ablate_k(
                &ds.records(Part::Train)?,
                &ds.records(Part::Val)?,
                &ds.records(Part::Test)?,
                &w,
                &cfg,
                &ks,
            )?;
            write(&out, &ablation_csv(&rows))?;
        }
        Command::Overlay {
            data,
            weights,
            split,
            out,
        } => {
            let ds = Dataset::open(&data, &cfg)?;
            let w = load_weights(&weights, &cfg)?;
            let rows = write_overlays(&ds.records(split)?, &w, &cfg, &out)?;
            write(&out.join("counts.csv"), &overlay_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        // stage-labeled library errors already embed their cause
        let mut msg = String::new();
        for cause in e.chain().map(|c| c.to_string()) {
            if !msg.contains(&cause) {
                if !msg.is_empty() {
                    msg.push_str(": ");
                }
                msg.push_str(&cause);
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
