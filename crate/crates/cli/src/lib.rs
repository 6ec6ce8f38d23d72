//! The `hintpose` command line: data generation, training, inference,
//! evaluation, the ablation grid and rendering. Every run writes one
//! [`manifest::RunManifest`].

pub mod manifest;
pub mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use hintpose::formats::{read_jsonl, write_jsonl, GroundTruthRecord, ResultRecord};
use hintpose::{
    ablate, evaluate, load_checkpoint, save_checkpoint, train, Dataset, Error, ExperimentConfig, Model,
    Point, Result, Variant,
};
use manifest::{hash_paths, RunManifest, MANIFEST_VERSION};

#[derive(Debug, Parser)]
#[command(name = "hintpose", version, about = "Top-down pose estimation with instance cues and recurrent refinement")]
pub struct Cli {
    /// Experiment config (JSON), or a run manifest whose config is reused.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model checkpoint; repeat to ensemble.
    #[arg(long = "checkpoints", global = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Decode hop for inference, or the number of hops when training.
    #[arg(long, global = true)]
    pub hops: Option<usize>,
    #[arg(long = "nms-oks", global = true)]
    pub nms_oks: Option<f64>,
    #[arg(long = "min-box-side", global = true)]
    pub min_box_side: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Cue,
    Recurrent,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::BASELINE,
            VariantArg::Cue => Variant::CUE,
            VariantArg::Recurrent => Variant::RECURRENT,
            VariantArg::Full => Variant::FULL,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and val splits into `<out>/train` and `<out>/val`.
    GenData,
    /// Train one model; writes `<out>/model.ckpt` and `<out>/train_log.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    /// Run the pipeline on a dataset; `<out>` is the results JSONL file.
    Infer {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a results file against a dataset's annotations.
    Eval {
        /// Dataset directory or annotations JSONL file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Like `infer`, but requires at least two checkpoints.
    EnsembleInfer {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate the four-variant grid for every seed.
    Ablate,
    /// Draw skeleton overlays, plus cue panels when checkpoints are given.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long = "image-id")]
        image_ids: Vec<u64>,
        /// Images to draw when no id is given.
        #[arg(long, default_value_t = 4)]
        limit: usize,
        /// Predictions below this score are not drawn.
        #[arg(long, default_value_t = 0.2)]
        min_score: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::EnsembleInfer { .. } => "ensemble-infer",
            Command::Ablate => "ablate",
            Command::Render { .. } => "render",
        }
    }

    fn default_out(&self) -> &'static str {
        match self {
            Command::GenData => "data",
            Command::Train { .. } => "model",
            Command::Infer { .. } | Command::EnsembleInfer { .. } => "results.jsonl",
            Command::Eval { .. } => "eval.json",
            Command::Ablate => "ablation",
            Command::Render { .. } => "render",
        }
    }

    /// Whether `--out` names a single file rather than a directory.
    fn file_output(&self) -> bool {
        matches!(self, Command::Infer { .. } | Command::EnsembleInfer { .. } | Command::Eval { .. })
    }
}

/// Reads an experiment config, or the `config` of a run manifest. Every
/// failure is a configuration error naming the file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if value.get("manifest_version").is_some() {
        let m: RunManifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        return Ok(m.config);
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

/// Config file plus flag overrides, validated.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = cli.nms_oks {
        cfg.pipeline.nms_oks = v;
    }
    if let Some(v) = cli.min_box_side {
        cfg.pipeline.min_box_side = v;
    }
    match &cli.command {
        Command::Train { .. } | Command::Ablate => {
            if let Some(h) = cli.hops {
                cfg.model.hops = h;
            }
        }
        Command::Infer { .. } | Command::EnsembleInfer { .. } | Command::Render { .. } => {
            if cli.hops.is_some() {
                cfg.pipeline.hop = cli.hops;
            }
        }
        Command::GenData | Command::Eval { .. } => {}
    }
    if let Some(s) = cli.seed {
        match &cli.command {
            Command::GenData => cfg.scene.seed = s,
            Command::Ablate => {
                let n = cfg.seeds.len() as u64;
                cfg.seeds = (s..s + n).collect();
            }
            Command::Train { .. } => cfg.seeds = vec![s],
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_models(paths: &[PathBuf], min: usize) -> Result<Vec<Model>> {
    if paths.len() < min {
        return Err(Error::Usage(format!(
            "--checkpoints: need at least {min}, got {}",
            paths.len()
        )));
    }
    paths.iter().map(|p| load_checkpoint(p)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn read_ground_truth(data: &Path) -> Result<Vec<GroundTruthRecord>> {
    if data.is_dir() {
        read_jsonl(&data.join("annotations.jsonl"))
    } else {
        read_jsonl(data)
    }
}

fn infer(cfg: &ExperimentConfig, data: &Path, models: &[Model], out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    let results = hintpose::pipeline::estimate_scenes(&ds.scenes, models, &cfg.pipeline)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_jsonl(out, &results)?;
    log::info!(
        "{} images, {} poses -> {}",
        results.len(),
        results.iter().map(|r| r.poses.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn render_images(
    cfg: &ExperimentConfig,
    data: &Path,
    results: Option<&Path>,
    image_ids: &[u64],
    limit: usize,
    min_score: f64,
    models: &[Model],
    out: &Path,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let preds: BTreeMap<u64, ResultRecord> = match results {
        Some(p) => read_jsonl::<ResultRecord>(p)?
            .into_iter()
            .map(|r| (r.image_id, r))
            .collect(),
        None => BTreeMap::new(),
    };
    let scenes: Vec<_> = if image_ids.is_empty() {
        ds.scenes.iter().take(limit).collect()
    } else {
        image_ids
            .iter()
            .map(|id| {
                ds.scenes
                    .iter()
                    .find(|s| s.image_id == *id)
                    .ok_or_else(|| Error::Data(format!("--image-id {id}: not in {}", data.display())))
            })
            .collect::<Result<_>>()?
    };
    create_dir(out)?;
    let limbs = &cfg.scene.skeleton.limbs;
    let scale = 4.0;
    for scene in scenes {
        let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
        let mut canvas = render::Canvas::new((w as f64 * scale) as u32, (h as f64 * scale) as u32, scale);
        canvas.gray(scene.image.data(), h, w, 0, 0, None);
        for p in &scene.persons {
            let pts: Vec<Point> = p.pose.keypoints.iter().map(|k| k.pos).collect();
            canvas.skeleton(&pts, limbs, 0, 0, render::GT);
        }
        if let Some(r) = preds.get(&scene.image_id) {
            for pose in r.poses.iter().filter(|p| p.score >= min_score) {
                let pts: Vec<Point> = pose.keypoints.chunks(3).map(|c| Point::new(c[0], c[1])).collect();
                canvas.skeleton(&pts, limbs, 0, 0, render::PRED);
            }
        }
        canvas.save(&out.join(format!("{:06}.png", scene.image_id)))?;

        if !models.is_empty() {
            let panels = render::cue_panels(&scene.image, &scene.detections, models, &cfg.pipeline)?;
            if panels.is_empty() {
                continue;
            }
            let mc = models[0].config();
            let ps = 3.0;
            let (pw, ph) = ((mc.input_w as f64 * ps) as u32, (mc.input_h as f64 * ps) as u32);
            let mut canvas = render::Canvas::new(pw * panels.len() as u32, ph, ps);
            for (i, p) in panels.iter().enumerate() {
                let ox = i as u32 * pw;
                canvas.gray(&p.crop, mc.input_h, mc.input_w, ox, 0, Some(&p.heat));
                canvas.skeleton(&p.skeleton, limbs, ox, 0, render::PRED);
                canvas.dot(p.cue, ox, 0, 4, render::CUE);
            }
            canvas.save(&out.join(format!("{:06}_cues.png", scene.image_id)))?;
        }
    }
    Ok(())
}

/// Executes a parsed command line and writes its manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<RunManifest> {
    let start = Instant::now();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Usage("--workers must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(cli)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(cli.command.default_out()));
    let mut inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    inputs.extend(cli.checkpoints.iter().cloned());

    match &cli.command {
        Command::GenData => {
            let (train_set, val) = cfg.datasets()?;
            train_set.save(&out.join("train"))?;
            val.save(&out.join("val"))?;
            println!("{} train / {} val images -> {}", train_set.len(), val.len(), out.display());
        }
        Command::Train { data, val, variant } => {
            inputs.push(data.clone());
            inputs.extend(val.iter().cloned());
            let train_set = Dataset::load(data)?;
            let val_set = val.as_deref().map(Dataset::load).transpose()?;
            let seed = cfg.seeds[0];
            let mut model = Model::build(cfg.model_config((*variant).into(), seed))?;
            let log = train(&mut model, &train_set, val_set.as_ref(), &cfg.train_config(seed))?;
            create_dir(&out)?;
            save_checkpoint(&model, &out.join("model.ckpt"))?;
            log.write_csv(&out.join("train_log.csv"))?;
            if let Some(mse) = log.final_val_mse() {
                println!("final val MSE by hop: {mse:?}");
            }
        }
        Command::Infer { data } | Command::EnsembleInfer { data } => {
            inputs.push(data.clone());
            let min = if matches!(cli.command, Command::EnsembleInfer { .. }) { 2 } else { 1 };
            let models = load_models(&cli.checkpoints, min)?;
            infer(&cfg, data, &models, &out)?;
        }
        Command::Eval { data, results } => {
            let gt = read_ground_truth(data)?;
            inputs.push(if data.is_dir() { data.join("annotations.jsonl") } else { data.clone() });
            inputs.push(results.clone());
            let res: Vec<ResultRecord> = read_jsonl(results)?;
            let report = evaluate(&res, &gt, &cfg.eval)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format {
                path: out.clone(),
                message: e.to_string(),
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_text(&out, &(json + "\n"))?;
            println!("{}", report.table());
        }
        Command::Ablate => {
            let a = ablate(&cfg, Some(&out))?;
            println!("{}", a.report.table());
        }
        Command::Render {
            data,
            results,
            image_ids,
            limit,
            min_score,
        } => {
            inputs.push(data.clone());
            inputs.extend(results.iter().cloned());
            let models = if cli.checkpoints.is_empty() {
                Vec::new()
            } else {
                load_models(&cli.checkpoints, 1)?
            };
            render_images(&cfg, data, results.as_deref(), image_ids, *limit, *min_score, &models, &out)?;
        }
    }

    let outputs = hash_paths(std::slice::from_ref(&out))?;
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cli.command.name().to_string(),
        argv,
        config: cfg,
        seed: cli.seed,
        workers: rayon::current_num_threads(),
        inputs: hash_paths(&inputs)?,
        outputs,
        wallclock_seconds: start.elapsed().as_secs_f64(),
    };
    let path = if cli.command.file_output() {
        let mut name = out.clone().into_os_string();
        name.push(".manifest.json");
        PathBuf::from(name)
    } else {
        out.join("manifest.json")
    };
    manifest.write(&path)?;
    Ok(manifest)
}
