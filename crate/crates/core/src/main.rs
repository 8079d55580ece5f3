use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use forgescan::copymove::detect_copymove;
use forgescan::eval::{evaluate, fuse, REPORT_FILE};
use forgescan::imaging::{read_image, write_png, GrayImage};
use forgescan::mlp::TrainConfig;
use forgescan::resample::{detect_resampling, heatmap_export, train_models, ResampleModels};
use forgescan::synth::{derive_seed, generate_corpus, parse_counts, procedural_photo};
use forgescan::{Error, Result};

/// Image manipulation detection: copy-move pre-filter cascaded with a
/// resampling detector.
#[derive(Parser, Debug)]
#[command(name = "forgescan", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Directory holding the six `<task>.fsmlp` classifiers.
    #[arg(long, global = true, default_value = "models")]
    models_dir: PathBuf,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores). Never changes any output.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural pristine photos as PNG.
    Photos {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
    /// Generate a synthetic forgery corpus with ground truth.
    Synth {
        /// Directory of pristine PNG/JPEG sources.
        #[arg(long, conflicts_with = "procedural")]
        pristine_dir: Option<PathBuf>,
        /// Use this many procedural photos instead of a directory.
        #[arg(long)]
        procedural: Option<usize>,
        /// Procedural photo side length.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Images per kind, e.g. `pristine=150,copy_move=25`.
        #[arg(
            long,
            default_value = "pristine=150,copy_move=25,splice_upsample=25,splice_downsample=25,\
                             splice_rotate_cw=25,splice_rotate_ccw=25,splice_shear=25"
        )]
        counts: String,
    },
    /// Train the six resampling/compression classifiers.
    Train {
        #[arg(long, conflicts_with = "procedural")]
        pristine_dir: Option<PathBuf>,
        #[arg(long)]
        procedural: Option<usize>,
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Patches per task.
        #[arg(long, default_value_t = 10_000)]
        patches: usize,
        /// Share of source images held out to report test accuracy.
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
    },
    /// Analyse one image.
    Detect {
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Cascade)]
        method: Method,
    },
    /// Score every image in a corpus manifest and write ROC data.
    Evaluate { manifest: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Cascade,
    Copymove,
    Resample,
}

fn load_dir(dir: &Path) -> Result<Vec<GrayImage>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no PNG or JPEG files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_image(p)).collect()
}

fn sources(
    dir: &Option<PathBuf>,
    procedural: Option<usize>,
    size: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<GrayImage>> {
    match (dir, procedural) {
        (Some(d), _) => load_dir(d),
        (None, Some(n)) => Ok((0..n)
            .map(|i| procedural_photo(size, size, derive_seed(seed, stream, i as u64)))
            .collect()),
        (None, None) => Err(Error::InvalidArgument(
            "give either --pristine-dir or --procedural".into(),
        )),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_models(dir: &Path) -> Result<ResampleModels> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "models directory {} does not exist; run `forgescan train` first or pass --models-dir",
            dir.display()
        )));
    }
    ResampleModels::load(dir)
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Photos { count, size } => {
            create_out(&g.out)?;
            for i in 0..count {
                let img = procedural_photo(size, size, derive_seed(g.seed, 0, i as u64));
                let p = g.out.join(format!("photo_{i:05}.png"));
                write_png(&p, size, size, &img.to_luma8())?;
            }
            eprintln!("wrote {count} photos to {}", g.out.display());
        }
        Command::Synth {
            pristine_dir,
            procedural,
            size,
            counts,
        } => {
            let counts = parse_counts(&counts)?;
            let src = sources(&pristine_dir, procedural, size, g.seed, 0)?;
            let records = generate_corpus(&src, &counts, g.seed, &g.out)?;
            eprintln!(
                "wrote {} images and {}",
                records.len(),
                g.out.join("manifest.jsonl").display()
            );
        }
        Command::Train {
            pristine_dir,
            procedural,
            size,
            patches,
            holdout,
            epochs,
            learning_rate,
            batch_size,
            l2,
            momentum,
        } => {
            if !(0.0..1.0).contains(&holdout) {
                return Err(Error::InvalidArgument(format!(
                    "--holdout must be in [0, 1), got {holdout}"
                )));
            }
            let mut src = sources(&pristine_dir, procedural, size, g.seed, 1)?;
            let keep = src.len() - ((src.len() as f64 * holdout).round() as usize).min(src.len() - 1);
            let held = src.split_off(keep);
            let cfg = TrainConfig {
                learning_rate,
                batch_size,
                epochs,
                seed: g.seed,
                l2,
                momentum,
            };
            let (models, stats) = train_models(&src, &held, patches, &cfg)?;
            models.save(&g.models_dir)?;
            for s in &stats {
                match s.holdout_accuracy {
                    Some(h) => eprintln!(
                        "{:<14} train {:.3}  held-out {:.3}",
                        s.task.name(),
                        s.train_accuracy,
                        h
                    ),
                    None => eprintln!("{:<14} train {:.3}", s.task.name(), s.train_accuracy),
                }
            }
            create_out(&g.out)?;
            write_json(
                &g.out.join("training.json"),
                &json!({ "config": cfg, "train_images": src.len(), "holdout_images": held.len(), "tasks": stats }),
            )?;
            eprintln!("saved models to {}", g.models_dir.display());
        }
        Command::Detect { image, method } => {
            let img = read_image(&image)?;
            create_out(&g.out)?;
            let stem = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let base = g.out.join(&stem);
            let mut out = serde_json::Map::new();
            out.insert("image".into(), json!(image.display().to_string()));
            let mut cm_state = None;
            if method != Method::Resample {
                let cm = detect_copymove(&img)?;
                let mask = g.out.join(format!("{stem}_copymove_mask.png"));
                write_png(&mask, cm.mask.width(), cm.mask.height(), &cm.mask.to_luma8())?;
                out.insert("copymove".into(), json!(cm.summary()));
                out.insert("cm_flagged".into(), json!(cm.flagged));
                out.insert("c".into(), json!(cm.confidence));
                cm_state = Some((cm.flagged, cm.confidence));
            }
            let run_resample = match (method, cm_state) {
                (Method::Copymove, _) => false,
                (Method::Cascade, Some((flagged, _))) => !flagged,
                _ => true,
            };
            let mut r = None;
            if run_resample {
                let models = load_models(&g.models_dir)?;
                let report = detect_resampling(&img, &models)?;
                heatmap_export(&report, &base)?;
                out.insert("resample".into(), json!(report.summary()));
                out.insert("r".into(), json!(report.overall));
                r = Some(report.overall);
            }
            if method == Method::Cascade {
                let (flagged, c) = cm_state.expect("cascade runs copy-move");
                out.insert("s".into(), json!(fuse(flagged, c, r.unwrap_or(0.0))));
            }
            let value = serde_json::Value::Object(out);
            write_json(&g.out.join(format!("{stem}.detect.json")), &value)?;
            println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
        }
        Command::Evaluate { manifest } => {
            let models = load_models(&g.models_dir)?;
            let ev = evaluate(&manifest, &models, &g.out)?;
            let a = &ev.report.auc;
            let b = &ev.report.breakdown;
            eprintln!(
                "AUC copy-move {:.4}  resampling {:.4}  fused {:.4}",
                a.copymove, a.resample, a.fused
            );
            eprintln!(
                "manipulated {}: copy-move caught {}, missed {}, resampling caught {} of the missed",
                b.manipulated, b.cm_caught, b.cm_missed, b.resamp_caught_of_missed
            );
            eprintln!("report: {}", g.out.join(REPORT_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
