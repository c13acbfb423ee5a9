//! Command execution behind the binary: config resolution, artifact
//! layout, and the five subcommands. Argument parsing lives in `main.rs`;
//! everything here is plain library code so tests can drive it directly.
//!
//! Every run writes a resolved-config snapshot into the output directory
//! and drops a `.incomplete` sentinel that is removed only on success.

use std::path::{Path, PathBuf};

use crate::checkpoint::Container;
use crate::config::{load_config, RunConfig};
use crate::data::{dump_pngs, generate_synthetic, load_folder, Domain, DomainDataset};
use crate::error::Result;
use crate::metrics::evaluate_run;
use crate::scalar::fl;
use crate::trainer::{RunDirs, StyleSource, Trainer};

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "GALIGN_OUT_ROOT";

const SENTINEL: &str = ".incomplete";

/// Training scalar type used by the command-line tools.
pub type CliScalar = f32;

#[derive(Debug, Clone)]
pub enum StyleChoice {
    RunningMean,
    FromImage(PathBuf),
}

#[derive(Debug, Clone)]
pub enum Command {
    SynthData,
    Train,
    Translate {
        checkpoint: PathBuf,
        input: PathBuf,
        style: StyleChoice,
    },
    Eval {
        translated: PathBuf,
        target: PathBuf,
    },
    InspectAttention {
        input: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub struct CommandSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out_dir: PathBuf,
}

/// Map a finished run to the process exit code: 0 success, 1 user error,
/// 2 internal error.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_user_error() => 1,
        Err(_) => 2,
    }
}

fn resolve_out_dir(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn load_domain_data(
    cfg: &RunConfig,
) -> Result<(DomainDataset<CliScalar>, DomainDataset<CliScalar>)> {
    match (&cfg.data.source_dir, &cfg.data.target_dir) {
        (Some(src), Some(tgt)) => {
            let source = load_folder(src, Domain::Source, cfg.data.resolution, cfg.data.seed)?;
            let target = load_folder(
                tgt,
                Domain::Target,
                cfg.data.resolution,
                cfg.data.seed.wrapping_add(1),
            )?;
            Ok((source, target))
        }
        _ => generate_synthetic(&cfg.synthetic_spec()),
    }
}

/// Execute one command; artifacts land under `spec.out_dir`.
pub fn run(spec: CommandSpec) -> Result<()> {
    let out_dir = resolve_out_dir(&spec.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let sentinel = out_dir.join(SENTINEL);
    std::fs::write(&sentinel, b"run in progress\n")?;

    let cfg = load_config(spec.config.as_deref(), &spec.overrides)?;
    std::fs::write(out_dir.join("resolved-config.toml"), cfg.to_toml_string())?;

    execute(&spec.command, &cfg, &out_dir)?;

    std::fs::remove_file(&sentinel).ok();
    Ok(())
}

fn execute(command: &Command, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    match command {
        Command::SynthData => {
            let (source, target) = generate_synthetic::<CliScalar>(&cfg.synthetic_spec())?;
            dump_pngs(&source, &out_dir.join("source"))?;
            dump_pngs(&target, &out_dir.join("target"))?;
            log::info!(
                "wrote {} source and {} target images under {}",
                source.len(),
                target.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Train => {
            let (source, target) = load_domain_data(cfg)?;
            let mut trainer = Trainer::<CliScalar>::new(cfg.clone())?;
            let dirs = RunDirs {
                checkpoints: out_dir.join("checkpoints"),
                samples: out_dir.join("samples"),
                history: out_dir.join("history.jsonl"),
            };
            let history = trainer.fit(&source, &target, Some(&dirs))?;
            if let Some(last) = history.last() {
                log::info!(
                    "finished at step {}: total {:.4}, d {:.4}",
                    last.step,
                    last.total,
                    last.d_loss
                );
            }
            Ok(())
        }
        Command::Translate {
            checkpoint,
            input,
            style,
        } => {
            let container = Container::<CliScalar>::load(checkpoint)?;
            let trainer = Trainer::from_checkpoint(&container)?;
            let dataset = load_folder::<CliScalar>(
                input,
                Domain::Source,
                trainer.cfg.data.resolution,
                trainer.cfg.data.seed,
            )?;
            let style_image = match style {
                StyleChoice::RunningMean => None,
                StyleChoice::FromImage(path) => {
                    let img = image::open(path)?.to_rgb8();
                    let resized = if img.dimensions()
                        == (
                            trainer.cfg.data.resolution as u32,
                            trainer.cfg.data.resolution as u32,
                        ) {
                        img
                    } else {
                        image::imageops::resize(
                            &img,
                            trainer.cfg.data.resolution as u32,
                            trainer.cfg.data.resolution as u32,
                            image::imageops::FilterType::Triangle,
                        )
                    };
                    let mut px = ndarray::Array3::<CliScalar>::zeros((
                        3,
                        trainer.cfg.data.resolution,
                        trainer.cfg.data.resolution,
                    ));
                    for (x, y, p) in resized.enumerate_pixels() {
                        for c in 0..3 {
                            px[[c, y as usize, x as usize]] =
                                fl::<CliScalar>(p.0[c] as f64 / 255.0 * 2.0 - 1.0);
                        }
                    }
                    Some(crate::data::ImageSample::new(px, path.display().to_string())?)
                }
            };
            let dir = out_dir.join("translated");
            std::fs::create_dir_all(&dir)?;
            for (i, sample) in dataset.samples.iter().enumerate() {
                let source = match &style_image {
                    Some(img) => StyleSource::FromImage(img),
                    None => StyleSource::RunningMean,
                };
                let translated = trainer.infer(sample, source)?;
                let stem = Path::new(&sample.source)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("{i:04}"));
                crate::data::tensor_to_rgb(&translated.pixels)
                    .save(dir.join(format!("{stem}.png")))?;
            }
            log::info!("translated {} images into {}", dataset.len(), dir.display());
            Ok(())
        }
        Command::Eval { translated, target } => {
            let translated_ds = load_folder::<CliScalar>(
                translated,
                Domain::Source,
                cfg.data.resolution,
                cfg.data.seed,
            )?;
            let target_ds = load_folder::<CliScalar>(
                target,
                Domain::Target,
                cfg.data.resolution,
                cfg.data.seed,
            )?;
            let extractor = cfg.feature_extractor::<CliScalar>()?;
            let report = evaluate_run(
                &translated_ds,
                &target_ds,
                &extractor,
                cfg.local.extractor_seed,
                cfg.metrics.k,
                cfg.metrics.kid_degree,
            )?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(out_dir.join("report.json"), &json)?;
            std::fs::write(out_dir.join("report.txt"), report.table())?;
            println!("{}", report.table());
            Ok(())
        }
        Command::InspectAttention { input } => {
            let dataset = load_folder::<CliScalar>(
                input,
                Domain::Source,
                cfg.data.resolution,
                cfg.data.seed,
            )?;
            let provider = cfg.attention_provider::<CliScalar>()?;
            let dir = out_dir.join("attention");
            std::fs::create_dir_all(&dir)?;
            for (i, sample) in dataset.samples.iter().enumerate() {
                let attn = provider.map(&sample.pixels)?;
                let res = sample.resolution();
                // input | attention | attention-weighted input
                let mut grid = ndarray::Array3::<CliScalar>::zeros((3, res, res * 3));
                for c in 0..3 {
                    for yy in 0..res {
                        for xx in 0..res {
                            let a = attn.weights[[yy, xx]];
                            grid[[c, yy, xx]] = sample.pixels[[c, yy, xx]];
                            grid[[c, yy, res + xx]] = a * fl::<CliScalar>(2.0) - 1.0;
                            grid[[c, yy, 2 * res + xx]] = sample.pixels[[c, yy, xx]] * a;
                        }
                    }
                }
                let stem = Path::new(&sample.source)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("{i:04}"));
                crate::data::tensor_to_rgb(&grid)
                    .save(dir.join(format!("{stem}_attention.png")))?;
            }
            log::info!(
                "wrote {} attention panels into {}",
                dataset.len(),
                dir.display()
            );
            Ok(())
        }
    }
}

/// `true` when a previous run into this directory was interrupted.
pub fn is_incomplete(out_dir: &Path) -> bool {
    resolve_out_dir(out_dir).join(SENTINEL).exists()
}
