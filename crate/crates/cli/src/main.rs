use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use inr_atlas::adaptation::{adapt, estimate_conditions, predict_segmentation, translate_modality, AdaptConfig};
use inr_atlas::analysis::{mid_slices_pgm, predict_scan_age};
use inr_atlas::atlas::{generate_atlas, AtlasGrid, AtlasRequest};
use inr_atlas::config::{parse_config, RunConfig, Scale};
use inr_atlas::nifti::{self, NiftiImage};
use inr_atlas::phantom::{generate_cohort, read_cohort, write_cohort};
use inr_atlas::recipes::{self, evaluate_held_out, train_on, Recipe};
use inr_atlas::training::TrainedModel;
use inr_atlas::volume::Volume;
use inr_atlas::{checkpoint, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CHECKS: u8 = 3;

#[derive(Parser)]
#[command(name = "inr-atlas", version, about = "Conditional implicit neural atlas on phantom cohorts")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Default profile: desk or paper.
    #[arg(long, global = true)]
    scale: Option<Scale>,
    /// Exit non-zero when an acceptance check of a recipe fails.
    #[arg(long, global = true)]
    strict: bool,
    /// Output file or directory (depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort as NIfTI files plus manifest.jsonl.
    MakePhantoms {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a cohort manifest and write a checkpoint.
    Train {
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Generate an atlas at an age with optional condition overrides.
    InferAtlas {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        age: f64,
        /// Kernel width in weeks.
        #[arg(long)]
        sigma: Option<f64>,
        /// Normalized condition value, `name=value`; repeatable.
        #[arg(long = "cond", value_parser = parse_cond)]
        cond: Vec<(String, f64)>,
        /// Voxel size in mm.
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Fit a new subject with the network frozen.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Model channels present in the image, e.g. `0` or `0,1`.
        #[arg(long, value_delimiter = ',')]
        observe: Vec<usize>,
    },
    /// Adapt to every subject of a manifest and write per-subject metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Write axial, coronal and sagittal mid-slices as 8-bit PGM.
    ExportSlices {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
    /// Run a named experiment end to end.
    Run {
        /// seg-eval, birth-age, lv-conditioning, acc-conditioning,
        /// modality-translation, ablation-latent-shape, ablation-rigid,
        /// ablation-conditioning
        recipe: Recipe,
    },
}

fn parse_cond(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = value.trim().parse().map_err(|_| format!("`{value}` is not a number"))?;
    Ok((name.trim().to_string(), v))
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text, cli.scale)?
        }
        None => RunConfig::profile(cli.scale.unwrap_or_default()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<TrainedModel> {
    if !path.is_file() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())).into());
    }
    Ok(checkpoint::load(path)?)
}

/// Config snapshot plus invocation, enough to rerun the command.
fn write_provenance(cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    let record = serde_json::json!({
        "command": std::env::args().collect::<Vec<_>>(),
        "seed": cfg.seed,
        "config": cfg.to_toml()?,
    });
    fs::write(path, serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(cli: &Cli) -> anyhow::Result<u8> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::MakePhantoms { count } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("phantoms"));
            if let Some(n) = count {
                cfg.cohort.count = *n;
            }
            let cohort = generate_cohort(&cfg.cohort, cfg.seed)?;
            let records = write_cohort(&cohort, &dir)?;
            write_provenance(&cfg, &dir.join("run.json"))?;
            println!("wrote {} subjects to {}", records.len(), dir.join("manifest.jsonl").display());
        }
        Command::Train { cohort } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
            let subjects = read_cohort(cohort)?;
            let model = train_on(&subjects, &cfg.model, &cfg.train_config())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            checkpoint::save(&model, &out)?;
            fs::write(sidecar(&out, ".log.csv"), model.log_csv())?;
            write_provenance(&cfg, &sidecar(&out, ".run.json"))?;
            if let Some((first, last)) = model.smoothed_loss(50) {
                println!("trained {} subjects, loss {first:.5} -> {last:.5}", subjects.len());
            }
            println!("checkpoint {}", out.display());
        }
        Command::InferAtlas {
            checkpoint,
            age,
            sigma,
            cond,
            resolution,
        } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("atlas"));
            let model = load_checkpoint(checkpoint)?;
            let grid = AtlasGrid::covering(&model, resolution.unwrap_or(cfg.evaluation.resolution_mm))?;
            let atlas = generate_atlas(
                &model,
                &AtlasRequest {
                    t_weeks: *age,
                    sigma_weeks: sigma.unwrap_or(cfg.evaluation.sigma_weeks),
                    condition_override: cond.clone(),
                    grid,
                    modalities: Vec::new(),
                },
            )?;
            fs::create_dir_all(&dir)?;
            for c in 0..atlas.intensities.channels {
                nifti::write_volume(&atlas.intensities.select_channels(&[c])?, dir.join(format!("atlas_mod{c}.nii")))?;
            }
            nifti::write_volume(&atlas.probabilities, dir.join("atlas_probabilities.nii"))?;
            nifti::write_labels(&atlas.labels, dir.join("atlas_labels.nii"))?;
            fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&atlas.metadata)?)?;
            write_provenance(&cfg, &dir.join("run.json"))?;
            println!("atlas {:?} at {age} weeks in {}", atlas.labels.dims, dir.display());
        }
        Command::Adapt {
            checkpoint,
            image,
            mask,
            observe,
        } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("adapted"));
            let model = load_checkpoint(checkpoint)?;
            let img = nifti::read_nifti(image)?.into_volume()?;
            let m = nifti::read_nifti(mask)?.into_mask()?;
            let acfg = AdaptConfig {
                seed: cfg.seed,
                observed_channels: observe.clone(),
                ..cfg.adapt.clone()
            };
            let res = adapt(&model, &img, &m, &acfg)?;
            let (probs, labels) = predict_segmentation(&model, &res)?;
            fs::create_dir_all(&dir)?;
            nifti::write_volume(&probs, dir.join("probabilities.nii"))?;
            nifti::write_labels(&labels, dir.join("labels.nii"))?;
            let mut translated = Vec::new();
            for c in (0..model.config.image_channels).filter(|c| !res.observed_channels.contains(c)) {
                let name = format!("translated_mod{c}.nii");
                nifti::write_volume(&translate_modality(&model, &res, c)?, dir.join(&name))?;
                translated.push(name);
            }
            let conditions = if model.conditions.is_empty() {
                Vec::new()
            } else {
                estimate_conditions(&model, &res)?
            };
            let record = serde_json::json!({
                "observed_channels": res.observed_channels,
                "fit_psnr_db": res.fit_psnr,
                "fit_ssim": res.fit_ssim,
                "holdout_psnr_db": res.holdout_psnr,
                "stopped_epoch": res.stopped_epoch,
                "best_epoch": res.best_epoch,
                "holdout_trace": res.holdout_trace,
                "rigid": res.rigid,
                "conditions": conditions,
                "predicted_scan_age_weeks": predict_scan_age(&model, &res.latent)?,
                "translated": translated,
            });
            fs::write(dir.join("result.json"), serde_json::to_string_pretty(&record)?)?;
            write_provenance(&cfg, &dir.join("run.json"))?;
            println!("adapted in {} epochs, fit PSNR {:.2} dB", res.stopped_epoch, res.fit_psnr);
        }
        Command::Evaluate { checkpoint, cohort } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.csv"));
            let model = load_checkpoint(checkpoint)?;
            let subjects = read_cohort(cohort)?;
            let acfg = AdaptConfig {
                seed: cfg.seed,
                ..cfg.adapt.clone()
            };
            let (report, _) = evaluate_held_out(&model, &subjects, &acfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, report.to_csv())?;
            write_provenance(&cfg, &sidecar(&out, ".run.json"))?;
            let (dice, sd) = report.aggregate(|r| Some(r.mean_dice));
            println!("{} subjects, mean foreground Dice {dice:.4} +- {sd:.4}", report.rows.len());
        }
        Command::ExportSlices { image, channel } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("slices"));
            let v = match nifti::read_nifti(image)? {
                NiftiImage::Volume(v) => v,
                NiftiImage::Labels(l) => {
                    let top = f32::from(l.labels.iter().copied().max().unwrap_or(0).max(1));
                    Volume::new(l.dims, l.spacing, 1, l.labels.iter().map(|&k| f32::from(k) / top).collect())?
                }
            };
            if *channel >= v.channels {
                return Err(Error::Usage(format!("channel {channel} out of range ({} channels)", v.channels)).into());
            }
            fs::create_dir_all(&dir)?;
            let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            for (plane, bytes) in ["axial", "coronal", "sagittal"].iter().zip(mid_slices_pgm(&v, *channel)?) {
                fs::write(dir.join(format!("{stem}_{plane}.pgm")), bytes)?;
            }
            println!("slices in {}", dir.display());
        }
        Command::Run { recipe } => {
            if let Some(out) = &cli.out {
                cfg.out = out.clone();
            }
            let report = recipes::run(*recipe, &cfg)?;
            for (k, v) in &report.metrics {
                println!("{k} = {v:.4}");
            }
            for c in &report.checks {
                println!("{} {} = {:.4} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
            }
            println!("outputs in {}", cfg.out.display());
            if cli.strict && !report.passed() {
                return Ok(EXIT_CHECKS);
            }
        }
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Parse { .. }) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cond_pairs() {
        assert_eq!(parse_cond("lv_fraction=0.5").unwrap(), ("lv_fraction".into(), 0.5));
        assert!(parse_cond("lv_fraction").is_err());
        assert!(parse_cond("a=b").is_err());
    }

    #[test]
    fn usage_errors_map_to_exit_2() {
        let e: anyhow::Error = Error::Usage("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_USAGE);
        let e: anyhow::Error = Error::Config("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_FAILURE);
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("a/m.ckpt"), ".log.csv"), PathBuf::from("a/m.ckpt.log.csv"));
    }
}
