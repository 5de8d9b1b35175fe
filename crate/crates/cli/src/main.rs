use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mv2d::association::RelevanceRule;
use mv2d::decoder::Prediction3D;
use mv2d::matching_loss::LossWeights;
use mv2d::model::{forward, Model};
use mv2d::pipeline::{
    self, read_json, write_json, AssociationRecord, PipelineConfig, QueryGenerator, ASSOCIATIONS_FILE, CONFIG_FILE,
    DETECTIONS_FILE, METRICS_FILE, PARAMS_FILE, PREDICTIONS_FILE, QUERIES_FILE, SCENE_FILE,
};
use mv2d::query_gen::ObjectQuery;
use mv2d::simulator::{Scene, ViewDetectionRecord};

/// Multi-view 3D detection from 2D detections on synthetic camera rigs.
#[derive(Parser, Debug)]
#[command(name = "mv2d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene and write scene.json
    Simulate(Common),
    /// Run the detector stand-in on scene.json and write detections.json
    Detect(Common),
    /// Compute reference points and query embeddings (queries.json)
    Lift(ModelArgs),
    /// Select relevant regions and key cells per query (associations.json)
    Associate(Common),
    /// Decode predictions from persisted intermediates (predictions.json)
    Forward(ModelArgs),
    /// Score predictions against the scene (metrics.json)
    Eval(Common),
    /// Fixed-step gradient descent on one scene
    Train(TrainArgs),
    /// Top-down SVG of object centres and reference points or predictions
    PlotBev(PlotArgs),
    /// All stages in sequence
    Run(ModelArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleArg {
    Top1,
    AllOverlapped,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GeneratorArg {
    Learned,
    Oracle,
    UniformDepth,
    ScaleDepth,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Random seed; required by commands that sample
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory
    #[arg(long, env = "MV2D_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    n_views: usize,
    #[arg(long, default_value_t = 10)]
    n_objects: usize,
    /// 1, or 2 to add a second timestamp as extra views
    #[arg(long, default_value_t = 1)]
    frames: usize,
    #[arg(long, value_enum, default_value = "top1")]
    rule: RuleArg,
    #[arg(long, value_enum, default_value = "learned")]
    generator: GeneratorArg,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 10)]
    depth_bins: usize,
    #[arg(long, default_value_t = 7)]
    roi_size: usize,
    #[arg(long, default_value_t = 16)]
    stride: usize,
    /// Disable jitter, drops, false positives and score noise
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 0.05)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.6)]
    nms_iou: f64,
    #[arg(long, default_value_t = 0.05)]
    feature_noise: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_3d: f64,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter file; defaults to params.json in the output directory,
    /// else a seeded initialisation
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotSource {
    Queries,
    Predictions,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, env = "MV2D_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "queries")]
    source: PlotSource,
    /// Output SVG path; defaults to bev.svg in the output directory
    #[arg(long)]
    svg: Option<PathBuf>,
}

impl Common {
    fn config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            n_views: self.n_views,
            n_objects: self.n_objects,
            frames: self.frames,
            rule: match self.rule {
                RuleArg::Top1 => RelevanceRule::Top1,
                RuleArg::AllOverlapped => RelevanceRule::AllOverlapped,
            },
            generator: match self.generator {
                GeneratorArg::Learned => QueryGenerator::Learned,
                GeneratorArg::Oracle => QueryGenerator::Oracle,
                GeneratorArg::UniformDepth => QueryGenerator::UniformDepth,
                GeneratorArg::ScaleDepth => QueryGenerator::ScaleDepth,
            },
            channels: self.channels,
            layers: self.layers,
            heads: self.heads,
            depth_bins: self.depth_bins,
            roi_size: self.roi_size,
            stride: self.stride,
            noiseless: self.noiseless,
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            feature_noise: self.feature_noise,
            loss: LossWeights {
                lambda_cls: self.lambda_cls,
                lambda_3d: self.lambda_3d,
                ..LossWeights::default()
            },
            out_dir: self.out.clone(),
        }
    }

    /// Config for commands that sample and so need an explicit seed.
    fn generative(&self) -> Result<PipelineConfig> {
        let Some(seed) = self.seed else {
            bail!("--seed is required for this command");
        };
        let cfg = self.config(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config for commands that continue from a persisted scene.
    fn resumed(&self) -> Result<(PipelineConfig, Scene)> {
        let scene: Scene = load(&self.out, SCENE_FILE)?;
        if let Some(seed) = self.seed {
            if seed != scene.seed {
                bail!("--seed {seed} differs from the scene seed {}", scene.seed);
            }
        }
        let cfg = self.config(scene.seed);
        cfg.validate()?;
        Ok((cfg, scene))
    }
}

fn load<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    read_json(&path).with_context(|| format!("reading {}", path.display()))
}

fn save<T: serde::Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    write_json(&path, value).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn model_for(cfg: &PipelineConfig, weights: &Option<PathBuf>) -> Result<Model> {
    let default = cfg.out_dir.join(PARAMS_FILE);
    let path = weights.clone().or_else(|| default.exists().then_some(default));
    let model = pipeline::load_or_init_model(cfg, path.as_deref())?;
    if path.is_none() {
        model.store.save(&cfg.out_dir.join(PARAMS_FILE))?;
    }
    Ok(model)
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.generative()?;
            let scene = pipeline::simulate(&cfg)?;
            save(&cfg.out_dir, CONFIG_FILE, &cfg)?;
            report(&save(&cfg.out_dir, SCENE_FILE, &scene)?);
        }
        Command::Detect(c) => {
            let (cfg, scene) = c.resumed()?;
            let dets = pipeline::detect(&cfg, &scene)?;
            report(&save(&cfg.out_dir, DETECTIONS_FILE, &dets)?);
        }
        Command::Lift(m) => {
            let (cfg, scene) = m.common.resumed()?;
            let dets: Vec<ViewDetectionRecord> = load(&cfg.out_dir, DETECTIONS_FILE)?;
            let model = model_for(&cfg, &m.weights)?;
            let fmaps = pipeline::features(&cfg, &scene)?;
            let queries = pipeline::lift(&cfg, &model, &scene, &dets, &fmaps)?;
            report(&save(&cfg.out_dir, QUERIES_FILE, &queries)?);
        }
        Command::Associate(c) => {
            let (cfg, scene) = c.resumed()?;
            let dets: Vec<ViewDetectionRecord> = load(&cfg.out_dir, DETECTIONS_FILE)?;
            let assoc = pipeline::associate(&cfg, &scene, &dets)?;
            report(&save(&cfg.out_dir, ASSOCIATIONS_FILE, &assoc)?);
        }
        Command::Forward(m) => {
            let (cfg, scene) = m.common.resumed()?;
            let dets: Vec<ViewDetectionRecord> = load(&cfg.out_dir, DETECTIONS_FILE)?;
            let assoc: Vec<AssociationRecord> = load(&cfg.out_dir, ASSOCIATIONS_FILE)?;
            let model = model_for(&cfg, &m.weights)?;
            let fmaps = pipeline::features(&cfg, &scene)?;
            let (queries, preds) = if assoc.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                let inputs = pipeline::query_inputs(&cfg, &scene, &dets, &fmaps, &assoc)?;
                let out = forward(&model, &inputs)?;
                (out.queries, out.predictions)
            };
            report(&save(&cfg.out_dir, QUERIES_FILE, &queries)?);
            report(&save(&cfg.out_dir, PREDICTIONS_FILE, &preds)?);
        }
        Command::Eval(c) => {
            let (cfg, scene) = c.resumed()?;
            let queries: Vec<ObjectQuery> = load(&cfg.out_dir, QUERIES_FILE)?;
            let preds: Vec<Prediction3D> = load(&cfg.out_dir, PREDICTIONS_FILE)?;
            let metrics = pipeline::evaluate(&cfg, &scene, &queries, &preds)?;
            println!("{}", serde_json::to_string_pretty(&metrics.loss)?);
            report(&save(&cfg.out_dir, METRICS_FILE, &metrics)?);
        }
        Command::Train(t) => {
            let cfg = t.model.common.generative()?;
            let result = pipeline::train_toy(&cfg, t.iters, t.lr, t.model.weights.as_deref())?;
            let first = result.trace.first().copied().unwrap_or(f64::NAN);
            let last = result.trace.last().copied().unwrap_or(f64::NAN);
            println!("L_3d {first:.6} -> {last:.6} over {} iterations", t.iters);
            std::fs::create_dir_all(&cfg.out_dir)?;
            report(&save(&cfg.out_dir, "loss_trace.json", &result.trace)?);
            let path = cfg.out_dir.join(PARAMS_FILE);
            result.model.store.save(&path)?;
            report(&path);
        }
        Command::PlotBev(p) => {
            let scene: Scene = load(&p.out, SCENE_FILE)?;
            let points: Vec<[f64; 2]> = match p.source {
                PlotSource::Queries => load::<Vec<ObjectQuery>>(&p.out, QUERIES_FILE)?
                    .iter()
                    .map(|q| [q.p_ref[0], q.p_ref[1]])
                    .collect(),
                PlotSource::Predictions => load::<Vec<Prediction3D>>(&p.out, PREDICTIONS_FILE)?
                    .iter()
                    .map(|q| [q.center[0], q.center[1]])
                    .collect(),
            };
            let gt: Vec<[f64; 2]> = scene.objects.iter().map(|o| [o.center[0], o.center[1]]).collect();
            let path = p.svg.unwrap_or_else(|| p.out.join("bev.svg"));
            std::fs::write(&path, pipeline::plot_bev(&gt, &points))?;
            report(&path);
        }
        Command::Run(m) => {
            let cfg = m.common.generative()?;
            let run = pipeline::run_pipeline(&cfg, m.weights.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&pipeline::summary(&run))?);
            println!("artifacts in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}
