//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::augmenter::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_split, Lpips};
use crate::model::{CheckpointInfo, Model};
use crate::rasterizer::{backend, RasterChoice};
use crate::scene::{prepare_scene, save_point_cloud, PlyEncoding, Scene};
use crate::synthetic::{toy_scene, write_dataset, ToySpec};
use crate::trainer::{TrainConfig, Trainer};
use crate::vgg::AssetSpec;

#[derive(Debug, Parser)]
#[command(name = "pointnr", version, about = "Point-based neural re-rendering")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Overrides every seed taken from config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rasterizer implementation.
    #[arg(long, global = true, value_enum)]
    pub raster: Option<RasterChoice>,
    /// Sequential, bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a raw dataset and write a normalized scene directory.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train texture and renderer; writes a checkpoint after every epoch.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Render views of a trained checkpoint to PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, conflicts_with = "test_split", required_unless_present = "test_split")]
        view_id: Vec<u32>,
        #[arg(long)]
        test_split: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split (PSNR, SSIM, LPIPS).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Report directory; defaults to `<ckpt>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// LPIPS weights; falls back to the POINTNR_LPIPS_VGG variable.
        #[arg(long)]
        lpips: Option<PathBuf>,
        #[arg(long)]
        no_lpips: bool,
        /// Also write the rendered test views.
        #[arg(long)]
        dump_images: bool,
    },
    /// Densify the cloud with verified candidate points.
    Augment {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Continue from a trained checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Augmentation settings (TOML).
        #[arg(long)]
        augment_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove points (and their features) from a checkpoint.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// `x0,y0,z0,x1,y1,z1`
        #[arg(long, value_parser = parse_box, allow_hyphen_values = true, conflicts_with = "ids", required_unless_present = "ids")]
        r#box: Option<[f32; 6]>,
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<usize>>,
        /// Output checkpoint; edits in place when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a small procedural dataset (images, COLMAP model, manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 70)]
        grid: usize,
    },
}

fn parse_box(s: &str) -> std::result::Result<[f32; 6], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|t| t.trim().parse::<f32>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let b: [f32; 6] = v.try_into().map_err(|v: Vec<f32>| format!("expected 6 numbers, got {}", v.len()))?;
    if (0..3).any(|k| b[k] > b[k + 3]) {
        return Err("box lower corner exceeds the upper corner".into());
    }
    Ok(b)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn train_config(path: Option<&Path>, g: &Global) -> Result<(TrainConfig, String)> {
    let text = match path {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = g.raster {
        cfg.raster = r;
    }
    cfg.deterministic |= g.deterministic;
    let echo = toml::to_string(&cfg).expect("config serializes");
    Ok((cfg, echo))
}

fn scene_for(ckpt: &Path, info: &CheckpointInfo, explicit: Option<&Path>) -> Result<Scene> {
    let dir = explicit.map(Path::to_path_buf).or_else(|| info.scene.clone()).ok_or_else(|| {
        Error::Config(format!("{} does not record its scene; pass --scene", ckpt.display()))
    })?;
    Scene::open(dir)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in std::fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Prepare { manifest, out } => {
            let scene = prepare_scene(&manifest, &out)?;
            println!(
                "prepared {} views ({} train, {} test) and {} points in {}",
                scene.views.len(),
                scene.split.train_ids.len(),
                scene.split.test_ids.len(),
                scene.cloud.len(),
                out.display()
            );
        }
        Command::Train {
            scene,
            config,
            out,
            max_steps,
        } => {
            let (mut cfg, _) = train_config(config.as_deref(), g)?;
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            let echo = toml::to_string(&cfg).expect("config serializes");
            let s = Scene::open(&scene)?;
            let mut t = Trainer::new(&s, cfg)?;
            let scene_dir = std::fs::canonicalize(&scene).unwrap_or(scene);
            t.checkpoint_to(&out, echo, Some(scene_dir));
            t.run()?;
            if let Some(e) = t.log.epochs.last() {
                println!("trained {} steps ({} epochs); final epoch loss {:.6}", t.step, t.epoch, e.loss);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Render {
            ckpt,
            scene,
            view_id,
            test_split,
            out,
        } => {
            let (model, info) = Model::load(&ckpt)?;
            let s = scene_for(&ckpt, &info, scene.as_deref())?;
            let ids = if test_split { s.split.test_ids.clone() } else { view_id };
            let be = backend(g.raster.unwrap_or_default());
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for id in ids {
                let v = s.view(id).ok_or_else(|| {
                    Error::Data(format!("unknown view id {id}; valid ids: {:?}", s.view_ids()))
                })?;
                let img = model.render_view(be.as_ref(), &v.camera, &v.pose)?;
                let p = out.join(format!("{id:06}.png"));
                img.save_png(&p)?;
                info!("wrote {}", p.display());
            }
        }
        Command::Eval {
            ckpt,
            scene,
            out,
            lpips,
            no_lpips,
            dump_images,
        } => {
            let (model, info) = Model::load(&ckpt)?;
            let s = scene_for(&ckpt, &info, scene.as_deref())?;
            let lp = if no_lpips {
                None
            } else {
                Some(Lpips::load(&AssetSpec { path: lpips, sha256: None })?)
            };
            let out = out.unwrap_or_else(|| ckpt.join("eval"));
            let be = backend(g.raster.unwrap_or_default());
            let dump = dump_images.then(|| out.join("images"));
            let report = evaluate_split(&model, &s, be.as_ref(), lp.as_ref(), dump.as_deref())?;
            report.write(&out)?;
            print!("{}", report.table());
        }
        Command::Augment {
            scene,
            rounds,
            ckpt,
            config,
            augment_config,
            out,
        } => {
            let (cfg, echo) = train_config(config.as_deref(), g)?;
            let mut acfg: AugmentConfig = match &augment_config {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => AugmentConfig::default(),
            };
            acfg.iterations = rounds;
            if let Some(seed) = g.seed {
                acfg.seed = seed;
            }
            let s = Scene::open(&scene)?;
            let model = ckpt.as_deref().map(Model::load).transpose()?.map(|(m, _)| m);
            let result = augment(&s, &cfg, &acfg, model)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_point_cloud(&result.model.cloud, out.join("points.ply"), PlyEncoding::BinaryLittleEndian)?;
            result.provenance.write(out.join("provenance.json"))?;
            let info = CheckpointInfo {
                scene: Some(std::fs::canonicalize(&scene).unwrap_or(scene)),
                ..Default::default()
            };
            result.model.save(out.join("checkpoint"), &info)?;
            let cp = out.join("checkpoint").join("config.toml");
            std::fs::write(&cp, echo).map_err(|e| Error::io(&cp, e))?;
            println!(
                "{} -> {} points after {} round(s); written to {}",
                result.provenance.original_points,
                result.model.cloud.len(),
                rounds,
                out.display()
            );
        }
        Command::Edit { ckpt, r#box, ids, out } => {
            let (mut model, info) = Model::load(&ckpt)?;
            let removed = match (r#box, ids) {
                (Some(b), _) => model.remove_box([b[0], b[1], b[2]], [b[3], b[4], b[5]])?,
                (None, Some(ids)) => model.remove_ids(&ids)?,
                (None, None) => return Err(Error::Config("pass --box or --ids".into())),
            };
            let target = out.unwrap_or_else(|| ckpt.clone());
            if target != ckpt {
                copy_dir(&ckpt, &target)?;
            }
            if removed == 0 {
                warn!("selection contains no points; checkpoint unchanged");
            } else {
                std::fs::remove_dir_all(target.join("texture")).map_err(|e| Error::io(&target, e))?;
                model.save(&target, &info)?;
                let opt = target.join("optimizer");
                if opt.exists() {
                    std::fs::remove_dir_all(&opt).map_err(|e| Error::io(&opt, e))?;
                }
            }
            println!("removed {removed} points; {} remain", model.cloud.len());
        }
        Command::Synth { out, size, views, grid } => {
            let spec = ToySpec {
                width: size,
                height: size,
                views,
                grid,
                seed: g.seed.unwrap_or(ToySpec::default().seed),
                ..Default::default()
            };
            let manifest = write_dataset(&toy_scene(&spec), &out)?;
            println!("wrote {}", manifest.display());
        }
    }
    Ok(())
}

/// Single-line, greppable error report.
pub fn report(e: &Error) -> String {
    format!("error[{}]: {e}", e.class().code())
}
