//! The `objsdf` command line: dataset generation, training, rendering, mesh
//! extraction and evaluation.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use objsdf::datagen::{camera_rays, generate_dataset, Dataset, RaySampler, Split};
use objsdf::evalmesh::{evaluate, evaluate_views, extract_object_mesh, extract_scene_mesh};
use objsdf::fields::FieldModel;
use objsdf::io;
use objsdf::rendering::render_rays;
use objsdf::training::{Checkpoint, LossReport, Trainer};

pub use config::PipelineConfig;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LOG: &str = "log.csv";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(
    name = "objsdf",
    version,
    about = "Object-compositional neural implicit surfaces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from the configured scene.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of views.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Fit a model to a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Render color, labels, depth and opacity images of dataset views.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated view ids; the held-out views by default.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        /// Also render depth and opacity of this object alone.
        #[arg(long)]
        object_id: Option<usize>,
    },
    /// Write PLY meshes of every object and of the whole scene.
    ExtractMesh {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Only this object.
        #[arg(long)]
        object_id: Option<usize>,
        /// Grid cells per axis.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Compute PSNR, mIoU and Chamfer distances.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override, e.g. `--set train.lambda_eikonal=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    fn config(&self, extra: &[(&str, Option<String>)]) -> Result<PipelineConfig> {
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            for key in ["dataset.seed", "train.seed", "eval.seed"] {
                overrides.push(format!("{key}={seed}"));
            }
        }
        for (key, v) in extra {
            if let Some(v) = v {
                overrides.push(format!("{key}={v}"));
            }
        }
        overrides.extend(self.overrides.iter().cloned());
        let cfg = PipelineConfig::load(self.config.as_deref(), &overrides)?;
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        io::write_json_atomic(&self.out.join(EFFECTIVE_CONFIG), &cfg)?;
        Ok(cfg)
    }
}

/// Caps rayon's worker count from `OBJSDF_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("OBJSDF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("OBJSDF_THREADS={v} is not a count"))?;
        if n == 0 {
            bail!("OBJSDF_THREADS must be at least 1");
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate { common, views } => {
            let cfg = common.config(&[("dataset.views", views.map(|v| v.to_string()))])?;
            let m = generate_dataset(&cfg.scene(), &cfg.dataset, &common.out)?;
            eprintln!("wrote {} views to {}", m.views.len(), common.out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            iters,
            resume,
        } => {
            let cfg = common.config(&[("train.iterations", iters.map(|v| v.to_string()))])?;
            train(&cfg, &data, &common.out, resume)
        }
        Command::Render {
            common,
            model,
            data,
            views,
            object_id,
        } => {
            let cfg = common.config(&[])?;
            render(&cfg, &model, &data, &common.out, views, object_id)
        }
        Command::ExtractMesh {
            common,
            model,
            object_id,
            resolution,
        } => {
            let cfg = common.config(&[("eval.resolution", resolution.map(|v| v.to_string()))])?;
            let ck = read_checkpoint(&model)?;
            let field = FieldModel::from_doc(&ck.model)?;
            let ids: Vec<usize> = match object_id {
                Some(id) => vec![id],
                None => (0..field.config().num_objects).collect(),
            };
            for id in ids {
                let mesh = extract_object_mesh(&field, id, &ck.bbox, cfg.eval.resolution)?;
                mesh.write_ply(&common.out.join(format!("object_{id}.ply")))?;
            }
            if object_id.is_none() {
                extract_scene_mesh(&field, &ck.bbox, cfg.eval.resolution)?
                    .write_ply(&common.out.join("scene.ply"))?;
            }
            Ok(())
        }
        Command::Evaluate {
            common,
            model,
            data,
            resolution,
        } => {
            let cfg = common.config(&[("eval.resolution", resolution.map(|v| v.to_string()))])?;
            let ck = read_checkpoint(&model)?;
            let field = FieldModel::from_doc(&ck.model)?;
            let ds = Dataset::load(&data)?;
            let report = evaluate(
                &field,
                Some(&ds),
                ds.manifest.scene.as_ref(),
                &cfg.render,
                &cfg.eval,
            )?;
            io::write_json_atomic(&common.out.join(METRICS), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = if path.is_dir() {
        path.join(CHECKPOINT)
    } else {
        path.to_path_buf()
    };
    let text = io::read_to_string(&path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn train(cfg: &PipelineConfig, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let ds = Dataset::load(data)?;
    let latest = out.join(CHECKPOINT);
    let mut trainer = if resume && latest.exists() {
        let mut t = Trainer::from_checkpoint(&read_checkpoint(&latest)?)?;
        t.config.iterations = cfg.train.iterations;
        eprintln!("resuming at iteration {}", t.iteration());
        t
    } else {
        if resume {
            eprintln!("no checkpoint in {}, starting fresh", out.display());
        }
        let mut model_cfg = cfg.model.clone();
        model_cfg.num_objects = ds.num_objects();
        let model = FieldModel::new(model_cfg, cfg.train.seed)?;
        Trainer::new(model, cfg.train.clone(), cfg.render.clone(), *ds.bbox())?
    };

    let mut rows: Vec<String> = vec![LossReport::CSV_HEADER.to_string()];
    if trainer.iteration() > 0 {
        if let Ok(text) = fs::read_to_string(out.join(LOG)) {
            rows.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|i| i.parse::<usize>().ok())
                            .is_some_and(|i| i <= trainer.iteration())
                    })
                    .map(String::from),
            );
        }
    }
    let sampler = RaySampler::new(&ds, Split::Train)?;
    let validation = ds.split(Split::Test).next().is_some();
    let every = trainer.config.checkpoint_every;
    let save = |t: &Trainer, rows: &[String]| -> objsdf::Result<()> {
        let ck = t.to_checkpoint();
        if every > 0 && t.iteration().is_multiple_of(every) {
            io::write_json_atomic(
                &out.join("checkpoints")
                    .join(format!("iter_{:06}.json", t.iteration())),
                &ck,
            )?;
        }
        io::write_json_atomic(&latest, &ck)?;
        io::write_atomic(&out.join(LOG), (rows.join("\n") + "\n").as_bytes())?;
        Ok(())
    };

    let result = trainer.fit(&sampler, |t, report| {
        let v = t.config.validation_every;
        if validation && v > 0 && report.iteration % v == 0 {
            report.psnr_val = Some(validation_psnr(t, &ds)?);
        }
        rows.push(report.csv_row());
        if report.iteration % 50 == 0 || report.iteration == t.config.iterations {
            eprintln!(
                "iter {:>6}  total {:.5}  rec {:.5}  sem {:.5}  eik {:.5}  beta {:.5}",
                report.iteration,
                report.total,
                report.rec,
                report.semantic,
                report.eikonal,
                report.beta
            );
        }
        if every > 0 && report.iteration % every == 0 {
            save(t, &rows)?;
        }
        Ok(())
    });
    save(&trainer, &rows)?;
    result?;
    Ok(())
}

fn validation_psnr(t: &Trainer, ds: &Dataset) -> objsdf::Result<f64> {
    let mut one = ds.clone();
    let first = one
        .views
        .iter()
        .position(|v| v.split == Split::Test)
        .expect("a held-out view");
    one.views = vec![one.views.swap_remove(first)];
    let (psnrs, _) = evaluate_views(&t.model, &one, &t.render, t.config.seed)?;
    Ok(psnrs[0])
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.30, 0.25],
    [0.25, 0.50, 0.90],
    [0.55, 0.55, 0.55],
    [0.30, 0.75, 0.35],
    [0.95, 0.75, 0.20],
    [0.60, 0.35, 0.80],
    [0.20, 0.80, 0.80],
    [0.85, 0.45, 0.70],
];

fn render(
    cfg: &PipelineConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    views: Option<Vec<usize>>,
    object_id: Option<usize>,
) -> Result<()> {
    let ck = read_checkpoint(model)?;
    let field = FieldModel::from_doc(&ck.model)?;
    let k = field.config().num_objects;
    if let Some(id) = object_id {
        if id >= k {
            bail!("object id {id} out of range for {k} objects");
        }
    }
    let ds = Dataset::load(data)?;
    let background = ds.manifest.background_id;
    let ids: Vec<usize> = match views {
        Some(v) => v,
        None => ds.split(Split::Test).map(|v| v.id).collect(),
    };
    for id in ids {
        let view = ds
            .views
            .iter()
            .find(|v| v.id == id)
            .with_context(|| format!("dataset has no view {id}"))?;
        let (w, h) = (view.camera.intrinsics.width, view.camera.intrinsics.height);
        let rays = camera_rays(&view.camera, ds.bbox());
        let outs = render_rays(&field, &rays, &cfg.render, cfg.eval.seed ^ id as u64)?;
        let stem = |what: &str| out.join(format!("view_{id:03}_{what}.png"));
        let colors: Vec<[f64; 3]> = outs.iter().map(|o| o.color).collect();
        io::write_rgb_png(&stem("color"), w, h, &colors)?;
        let labels: Vec<usize> = outs.iter().map(|o| o.label(background)).collect();
        io::write_gray_png(
            &stem("labels"),
            w,
            h,
            &labels.iter().map(|&l| l as u8).collect::<Vec<_>>(),
        )?;
        let painted: Vec<[f64; 3]> = labels.iter().map(|&l| PALETTE[l % PALETTE.len()]).collect();
        io::write_rgb_png(&stem("semantic"), w, h, &painted)?;
        let far = rays.iter().map(|r| r.far).fold(0.0, f64::max).max(1e-9);
        let depth16 = |d: &dyn Fn(usize) -> f64| -> Vec<u16> {
            (0..outs.len())
                .map(|i| ((d(i) / far).clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect()
        };
        io::write_gray16_png(&stem("depth"), w, h, &depth16(&|i| outs[i].depth))?;
        let opacity: Vec<u8> = outs.iter().map(|o| io::to_u8(o.opacity)).collect();
        io::write_gray_png(&stem("opacity"), w, h, &opacity)?;
        if let Some(obj) = object_id {
            io::write_gray16_png(
                &stem(&format!("object{obj}_depth")),
                w,
                h,
                &depth16(&|i| outs[i].object_depth[obj]),
            )?;
            let op: Vec<u8> = outs
                .iter()
                .map(|o| io::to_u8(o.object_opacity[obj]))
                .collect();
            io::write_gray_png(&stem(&format!("object{obj}_opacity")), w, h, &op)?;
        }
    }
    Ok(())
}
