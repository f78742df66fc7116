//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for usage or validation errors, 2 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, SynthConfig};
use crate::data::{
    border_pyramid, extract_border, list_images, load_image, load_mask, level_stride, DirectoryDataset, SampleSource,
    Split, SynthSet, SUPERVISION_LEVELS,
};
use crate::error::{Error, Result};
use crate::metrics::binarize;
use crate::model::{ModelConfig, Variant};
use crate::train::{self, checkpoint, eval, EvalOptions};

#[derive(Debug, Parser)]
#[command(name = "hns-gnn", version, about = "Road extraction with border-aware graph reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `train.epochs=5`. Repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides),
            None => RunConfig::from_toml_with_overrides("", &self.overrides),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a raw image/mask directory pair and normalise it into a split.
    Prepare {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Generate synthetic road tiles.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value = "synth")]
        output_dir: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory; overrides `train.checkpoint_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from `<checkpoint_dir>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a data split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// When given, the checkpoint's model must match this configuration.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "eval")]
        output_dir: PathBuf,
        /// Write an overlay PNG per image.
        #[arg(long)]
        overlays: bool,
    },
    /// Predict road and border maps for individual images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "predictions")]
        output_dir: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train and evaluate several model variants under identical settings.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "BU,SG,E1,E2,full")]
        variants: Vec<Variant>,
        /// One training step per variant on tiny synthetic data.
        #[arg(long)]
        smoke: bool,
        #[arg(long, default_value = "ablation")]
        output_dir: PathBuf,
    },
    /// Write border masks (and optionally their pyramid) for a mask directory.
    MakeBorders {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 1)]
        radius: usize,
        /// Also write the pooled border maps of every supervised level.
        #[arg(long)]
        pyramid: bool,
        #[arg(long, default_value = "borders")]
        output_dir: PathBuf,
    },
}

/// Parse `args` (including the program name) and execute.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            images,
            masks,
            split,
            output_dir,
        } => prepare(&images, &masks, split, &output_dir),
        Command::Synth {
            count,
            seed,
            size,
            output_dir,
        } => {
            let set = SynthSet::generate(count, size, seed)?;
            set.write(&output_dir)?;
            log::info!("wrote {count} synthetic tiles to {}", output_dir.display());
            Ok(())
        }
        Command::Train {
            cfg,
            output_dir,
            resume,
        } => {
            let mut config = cfg.resolve()?;
            if let Some(dir) = output_dir {
                config.train.checkpoint_dir = dir;
            }
            let source = train::training_source(&config)?;
            let val = if config.train.eval_interval > 0 {
                match train::eval_source(&config, Split::Val) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::warn!("validation disabled: {e}");
                        None
                    }
                }
            } else {
                None
            };
            let outcome = train::train(&config, source.as_ref(), val.as_deref(), resume)?;
            println!("{} steps; last checkpoint {}", outcome.steps, outcome.last.display());
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            cfg,
            split,
            output_dir,
            overlays,
        } => {
            let manifest = checkpoint::read_manifest(&ckpt)?;
            let config = if cfg.config.is_some() || !cfg.overrides.is_empty() {
                cfg.resolve()?
            } else {
                manifest.config.clone()
            };
            create_dir(&output_dir)?;
            config.save(&output_dir.join(train::CONFIG_SNAPSHOT))?;
            let source = train::eval_source(&config, split)?;
            let opts = EvalOptions {
                averaging: config.train.averaging,
                tile: config.data.tile_stride.map(|s| (config.data.crop_size, s)),
                overlay_dir: overlays.then(|| output_dir.join("overlays")),
            };
            let result = eval::evaluate_checkpoint(&ckpt, source.as_ref(), &opts, Some(&config.model))?;
            eval::write_report(&result.report, &output_dir.join("report.json"))?;
            let per_image: std::collections::BTreeMap<_, _> = result.per_image.into_iter().collect();
            write_json(&per_image, &output_dir.join("per_image.json"))?;
            println!("{}", serde_json::to_string(&result.report)?);
            Ok(())
        }
        Command::Predict {
            checkpoint: ckpt,
            output_dir,
            inputs,
        } => predict(&ckpt, &inputs, &output_dir),
        Command::Ablate {
            cfg,
            variants,
            smoke,
            output_dir,
        } => {
            let mut config = cfg.resolve()?;
            if smoke {
                smoke_settings(&mut config, cfg.config.is_none());
            }
            if config.train.checkpoint_dir == PathBuf::from("checkpoints") {
                config.train.checkpoint_dir = output_dir.join("checkpoints");
            }
            create_dir(&output_dir)?;
            config.save(&output_dir.join(train::CONFIG_SNAPSHOT))?;
            let source = train::training_source(&config)?;
            let val = train::eval_source(&config, Split::Val)?;
            let table = train::ablate(&config, &variants, source.as_ref(), val.as_ref(), &output_dir)?;
            println!("{} variants written to {}", table.rows.len(), output_dir.join("ablation.csv").display());
            Ok(())
        }
        Command::MakeBorders {
            masks,
            radius,
            pyramid,
            output_dir,
        } => make_borders(&masks, radius, pyramid, &output_dir),
    }
}

/// Shrink a run to one step per variant. Without a config file, the model
/// and data are reduced to desk scale as well.
fn smoke_settings(config: &mut RunConfig, desk: bool) {
    config.train.epochs = 1;
    config.train.max_steps = Some(1);
    config.train.eval_interval = 0;
    if desk {
        config.model = ModelConfig::desk(config.model.variant);
        config.data.crop_size = 64;
        config.data.synthetic = Some(SynthConfig {
            train_count: 2,
            val_count: 2,
            test_count: 2,
            size: 64,
            seed: config.train.seed,
        });
        config.train.batch_size = 2;
    }
}

fn prepare(images: &Path, masks: &Path, split: Split, output_dir: &Path) -> Result<()> {
    let spec = crate::data::DatasetSpec {
        split,
        image_dir: images.to_path_buf(),
        mask_dir: masks.to_path_buf(),
        crop_size: crate::encoder::INPUT_MULTIPLE,
        seed: 0,
        tile_stride: None,
    };
    let dataset = DirectoryDataset::open(spec)?;
    let out_images = output_dir.join(split.as_str()).join("images");
    let out_masks = output_dir.join(split.as_str()).join("masks");
    create_dir(&out_images)?;
    create_dir(&out_masks)?;
    let mut road_pixels = 0u64;
    let mut pixels = 0u64;
    for i in 0..SampleSource::len(&dataset) {
        let item = dataset.load_pair(i)?;
        crate::io::save_rgb(&item.image, &out_images.join(format!("{}.png", item.name)))?;
        crate::io::save_mask(&item.mask, &out_masks.join(format!("{}.png", item.name)))?;
        road_pixels += item.mask.iter().map(|&v| v as u64).sum::<u64>();
        pixels += item.mask.len() as u64;
    }
    let summary = serde_json::json!({
        "split": split.as_str(),
        "images": SampleSource::len(&dataset),
        "road_fraction": if pixels == 0 { 0.0 } else { road_pixels as f64 / pixels as f64 },
    });
    write_json(&summary, &output_dir.join(format!("{}_summary.json", split.as_str())))?;
    Ok(())
}

fn predict(ckpt: &Path, inputs: &[PathBuf], output_dir: &Path) -> Result<()> {
    let (model, manifest) = checkpoint::load_model(ckpt, None)?;
    create_dir(output_dir)?;
    manifest.config.save(&output_dir.join(train::CONFIG_SNAPSHOT))?;
    for input in inputs {
        let stem = input
            .file_stem()
            .ok_or_else(|| Error::Validation(format!("{} has no file name", input.display())))?
            .to_string_lossy()
            .into_owned();
        let image = load_image(input)?;
        let pred = match manifest.config.data.tile_stride {
            Some(stride) => eval::RoadPredictor::predict(
                &eval::Tiled {
                    model: &model,
                    tile: manifest.config.data.crop_size,
                    stride,
                },
                &image,
            )?,
            None => model.predict(&image)?,
        };
        let road = binarize(&pred.road);
        crate::io::save_mask(&road, &output_dir.join(format!("{stem}_road.png")))?;
        for (level, map) in &pred.borders {
            crate::io::save_prob(map, &output_dir.join(format!("{stem}_border_l{level}.png")))?;
        }
        let border = pred.borders.first().map(|(_, b)| binarize(b));
        crate::io::save_overlay(&image, &road, border.as_ref(), &output_dir.join(format!("{stem}_overlay.png")))?;
    }
    Ok(())
}

fn make_borders(masks: &Path, radius: usize, pyramid: bool, output_dir: &Path) -> Result<()> {
    create_dir(output_dir)?;
    let strides: Vec<usize> = SUPERVISION_LEVELS.iter().map(|&l| level_stride(l)).collect();
    for (stem, path) in list_images(masks)? {
        let border = extract_border(&load_mask(&path)?, radius)?;
        crate::io::save_mask(&border, &output_dir.join(format!("{stem}.png")))?;
        if pyramid {
            for (level, map) in SUPERVISION_LEVELS.iter().zip(border_pyramid(&border, &strides)?) {
                let dir = output_dir.join(format!("level_{level}"));
                create_dir(&dir)?;
                crate::io::save_mask(&map, &dir.join(format!("{stem}.png")))?;
            }
        }
    }
    Ok(())
}
