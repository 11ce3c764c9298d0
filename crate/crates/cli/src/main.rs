//! `gleason`: command-line pipeline for weakly-supervised Gleason grading.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gleason_core::config::PipelineConfig;
use gleason_core::data::{load_slides, Manifest, Slide, Split};
use gleason_core::mil::Aggregation;
use gleason_core::model::{load_checkpoint, save_checkpoint};
use gleason_core::pipeline::{self, EvalLevel};
use gleason_core::selflearn::{self, LossHistory};
use gleason_core::slide_score::ScoringMethod;
use gleason_core::stain::ReferenceProfile;
use gleason_core::synth::generate_dataset;

/// Relative output paths are resolved against this directory when set.
const OUTPUT_ROOT_VAR: &str = "GLEASON_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "gleason", version, about = "Weakly-supervised Gleason grading pipeline")]
struct Cli {
    /// Seed applied to every seeded stage, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Max,
    Attention,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Patch,
    Slide,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    SynthGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_slides: Option<usize>,
    },
    /// Tile slide images into tissue patches.
    Tile {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        stride: Option<u32>,
        #[arg(long)]
        min_tissue: Option<f64>,
    },
    /// Histogram-match every slide to a reference image.
    Normalize {
        #[arg(long)]
        manifest: PathBuf,
        /// Reference image; falls back to `[stain] reference`.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the MIL teacher on the train split.
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        agg: Option<Agg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Teacher inference and label refinement on the train split.
    PseudoLabel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the student on refined pseudo-labels.
    TrainStudent {
        #[arg(long)]
        pseudo: PathBuf,
        /// Manifest locating the patches named in the pseudo-label file.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the global-assignment baseline on the train split.
    BaselineGlobal {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Patch-level predictions of a checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Slide-level scoring: fit on the train split, predict val and test.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: ScoringMethod,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compare predictions with ground truth and write a metrics report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        level: Level,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the class overlay of one slide.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        out: PathBuf,
        /// Output pixels per slide pixel.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Also write the per-pixel probability map as CSV.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Patch window; read from the slide's index file when omitted.
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        stride: Option<u32>,
    },
}

/// A one-line error report: `error: <kind>: <message>`.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<gleason_core::Error> for Failure {
    fn from(e: gleason_core::Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn failure(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        kind,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn out_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Loads the config (or defaults), then applies the global seed. Every
/// section is validated before returning.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn finish(mut cfg: PipelineConfig, edit: impl FnOnce(&mut PipelineConfig)) -> CliResult<PipelineConfig> {
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn slides_in(manifest: &Path, split: Option<Split>) -> CliResult<Vec<Slide>> {
    let m = Manifest::read(manifest)?;
    let entries = match split {
        Some(s) => m.entries.into_iter().filter(|e| e.split == s).collect(),
        None => m.entries,
    };
    Ok(load_slides(&Manifest { entries })?)
}

fn write_loss(ckpt: &Path, history: &LossHistory) -> CliResult<PathBuf> {
    let path = ckpt.with_extension("loss.csv");
    let mut text = String::from("epoch,mean_loss,lr\n");
    for e in &history.epochs {
        text.push_str(&format!("{},{},{}\n", e.epoch + 1, e.mean_loss, e.lr));
    }
    gleason_core::io::write_string(&path, &text)?;
    Ok(path)
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::SynthGen { config, out, n_slides } => {
            let cfg = finish(load_config(config.as_deref(), seed)?, |c| {
                if let Some(n) = n_slides {
                    c.synth.n_slides = n;
                }
            })?;
            let files = generate_dataset(&cfg.synth, &out_path(&out))?;
            println!("wrote {}", files.manifest.display());
            println!("wrote {}", files.truth.display());
        }
        Command::Tile {
            manifest,
            out,
            config,
            window,
            stride,
            min_tissue,
        } => {
            let cfg = finish(load_config(config.as_deref(), seed)?, |c| {
                c.tiling.window = window.unwrap_or(c.tiling.window);
                c.tiling.stride = stride.unwrap_or(c.tiling.stride);
                c.tiling.min_tissue = min_tissue.unwrap_or(c.tiling.min_tissue);
            })?;
            let m = Manifest::read(&manifest)?;
            let path = pipeline::tile_manifest(&m, &cfg.tiling, &out_path(&out))?;
            println!("wrote {}", path.display());
        }
        Command::Normalize {
            manifest,
            reference,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let reference = reference
                .or(cfg.stain.reference)
                .ok_or_else(|| failure("invalid_config", "no reference image given"))?;
            let profile = ReferenceProfile::from_path(&reference)?;
            let m = Manifest::read(&manifest)?;
            let path = pipeline::normalize_manifest(&m, &profile, &out_path(&out))?;
            println!("wrote {}", path.display());
        }
        Command::TrainTeacher {
            manifest,
            config,
            out,
            agg,
            epochs,
        } => {
            let cfg = finish(load_config(config.as_deref(), seed)?, |c| {
                match agg {
                    Some(Agg::Max) => c.teacher.aggregation = Aggregation::Max,
                    Some(Agg::Attention) => c.teacher.aggregation = Aggregation::Attention,
                    None => {}
                }
                c.teacher.epochs = epochs.unwrap_or(c.teacher.epochs);
            })?;
            let slides = slides_in(&manifest, Some(Split::Train))?;
            let (params, history) =
                selflearn::train_teacher_with(&slides, &cfg.model, &cfg.teacher, &mut |e| {
                    eprintln!("epoch {} loss {:.5} lr {:.2e}", e.epoch + 1, e.mean_loss, e.lr)
                })?;
            let out = out_path(&out);
            save_checkpoint(&params, &out)?;
            let loss = write_loss(&out, &history)?;
            println!("wrote {}", out.display());
            println!("wrote {}", loss.display());
        }
        Command::PseudoLabel { ckpt, manifest, out } => {
            let params = load_checkpoint(&ckpt)?;
            let slides = slides_in(&manifest, Some(Split::Train))?;
            let records = pipeline::pseudo_label(&params, &slides)?;
            let out = out_path(&out);
            pipeline::write_pseudo_labels(&out, &records)?;
            println!("wrote {}", out.display());
        }
        Command::TrainStudent {
            pseudo,
            manifest,
            config,
            out,
            epochs,
        } => {
            let cfg = finish(load_config(config.as_deref(), seed)?, |c| {
                c.student.epochs = epochs.unwrap_or(c.student.epochs);
            })?;
            let records = pipeline::read_pseudo_labels(&pseudo)?;
            let slides = slides_in(&manifest, Some(Split::Train))?;
            let (params, history) = selflearn::train_student(&records, &slides, &cfg.model, &cfg.student)?;
            let out = out_path(&out);
            save_checkpoint(&params, &out)?;
            let loss = write_loss(&out, &history)?;
            println!("wrote {}", out.display());
            println!("wrote {}", loss.display());
        }
        Command::BaselineGlobal {
            manifest,
            config,
            out,
            epochs,
        } => {
            let cfg = finish(load_config(config.as_deref(), seed)?, |c| {
                c.student.epochs = epochs.unwrap_or(c.student.epochs);
            })?;
            let slides = slides_in(&manifest, Some(Split::Train))?;
            let (params, history) = selflearn::train_global_baseline(&slides, &cfg.model, &cfg.student)?;
            let out = out_path(&out);
            save_checkpoint(&params, &out)?;
            let loss = write_loss(&out, &history)?;
            println!("wrote {}", out.display());
            println!("wrote {}", loss.display());
        }
        Command::Predict {
            ckpt,
            manifest,
            out,
            split,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Val => Some(Split::Val),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let slides = slides_in(&manifest, split)?;
            let inference = pipeline::infer_slides(&params, &slides)?;
            let out = out_path(&out);
            pipeline::write_patch_predictions(&out, &pipeline::patch_prediction_rows(&inference))?;
            println!("wrote {}", out.display());
        }
        Command::Score {
            ckpt,
            manifest,
            method,
            out,
            config,
            k,
        } => {
            let cfg = finish(load_config(config.as_deref(), seed)?, |c| {
                c.scoring.k = k.unwrap_or(c.scoring.k);
            })?;
            let params = load_checkpoint(&ckpt)?;
            let slides = slides_in(&manifest, None)?;
            let inference = pipeline::infer_slides(&params, &slides)?;
            let rows = pipeline::score_slides(&inference, &slides, method, &cfg.scoring)?;
            let out = out_path(&out);
            pipeline::write_scores(&out, &rows)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            pred,
            truth,
            level,
            out,
        } => {
            let level = match level {
                Level::Patch => EvalLevel::Patch,
                Level::Slide => EvalLevel::Slide,
            };
            let report = pipeline::evaluate_files(&pred, &truth, level)?;
            let out = out_path(&out);
            let text = pipeline::write_report(&out, &report)?;
            print!("{}", report.text());
            println!("wrote {}", out.display());
            println!("wrote {}", text.display());
        }
        Command::Heatmap {
            ckpt,
            manifest,
            slide,
            out,
            scale,
            map,
            window,
            stride,
        } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(failure("invalid_config", "scale must be positive"));
            }
            let params = load_checkpoint(&ckpt)?;
            let m = Manifest::read(&manifest)?;
            let entry = m
                .entries
                .into_iter()
                .find(|e| e.slide_id == slide)
                .ok_or_else(|| failure("missing_slide", format!("slide {slide} not in {}", manifest.display())))?;
            let (w, s) = match (window, stride) {
                (Some(w), Some(s)) => (w, s),
                (w, s) => {
                    let (iw, is) = pipeline::patch_geometry(&entry.path)?;
                    (w.unwrap_or(iw), s.unwrap_or(is))
                }
            };
            let slides = load_slides(&Manifest { entries: vec![entry] })?;
            let (probs, overlay) = pipeline::slide_heatmap(&params, &slides[0], w, s, scale)?;
            let out = out_path(&out);
            gleason_core::io::ensure_parent(&out)?;
            overlay.save(&out).map_err(gleason_core::Error::from)?;
            println!("wrote {}", out.display());
            if let Some(map) = map {
                let map = out_path(&map);
                gleason_core::io::write_csv(&map, &probs.rows())?;
                println!("wrote {}", map.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error: {}: {}", f.kind, message);
            ExitCode::FAILURE
        }
    }
}
