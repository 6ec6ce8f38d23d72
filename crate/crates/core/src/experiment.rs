//! The ablation grid: {cue on/off} × {feedback on/off} trained with shared
//! seeds on one synthetic split, evaluated end to end, plus per-hop and
//! ensemble comparisons.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{write_jsonl, GroundTruthRecord};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{estimate_scenes, PipelineConfig};
use crate::synth::{generate_range, Dataset, SceneConfig};
use crate::train::{save_checkpoint, train, validate, validation_samples, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub train_images: usize,
    pub val_images: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    /// One model per seed and variant; each seed drives both the weight
    /// initialization and the sample order.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_images: 2000,
            val_images: 500,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        self.eval.validate()?;
        if self.train_images == 0 || self.val_images == 0 {
            return Err(Error::Config("train_images and val_images must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.model.joints != self.scene.skeleton.len() {
            return Err(Error::Config(format!(
                "model.joints = {} but the skeleton has {} joints",
                self.model.joints,
                self.scene.skeleton.len()
            )));
        }
        Ok(())
    }

    /// Train split: scene indices `0..train_images`; validation continues
    /// the same stream so the splits never share an image.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = generate_range(&self.scene, 0, self.train_images)?;
        let val = generate_range(&self.scene, self.train_images as u64, self.val_images)?;
        Ok((train, val))
    }

    pub fn model_config(&self, variant: Variant, seed: u64) -> ModelConfig {
        ModelConfig {
            cue_enabled: variant.cue,
            feedback_enabled: variant.feedback,
            seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub cue: bool,
    pub feedback: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant { cue: false, feedback: false };
    pub const CUE: Variant = Variant { cue: true, feedback: false };
    pub const RECURRENT: Variant = Variant { cue: false, feedback: true };
    pub const FULL: Variant = Variant { cue: true, feedback: true };
    pub const ALL: [Variant; 4] = [Self::BASELINE, Self::CUE, Self::RECURRENT, Self::FULL];

    pub fn label(self) -> &'static str {
        match (self.cue, self.feedback) {
            (false, false) => "Baseline",
            (true, false) => "+ I.C.",
            (false, true) => "+ R.R.",
            (true, true) => "+ I.C. + R.R.",
        }
    }
}

/// One trained and evaluated model.
#[derive(Clone, Debug)]
pub struct Run {
    pub variant: Variant,
    pub seed: u64,
    pub model: Model,
    pub log: TrainLog,
    /// End-to-end evaluation at every hop, index 0 = hop 1.
    pub eval_by_hop: Vec<EvalReport>,
    /// Validation MSE per hop of the finished model.
    pub val_mse: Vec<f64>,
    pub train_seconds: f64,
}

impl Run {
    pub fn final_eval(&self) -> &EvalReport {
        self.eval_by_hop.last().expect("at least one hop")
    }
}

/// Trains one variant/seed and evaluates it on `val`.
pub fn run_one(
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    train_set: &Dataset,
    val: &Dataset,
    gt: &[GroundTruthRecord],
) -> Result<Run> {
    let mut model = Model::build(cfg.model_config(variant, seed))?;
    let tcfg = cfg.train_config(seed);
    let start = Instant::now();
    let log = train(&mut model, train_set, Some(val), &tcfg)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let samples = validation_samples(val, model.config(), &tcfg.sample, tcfg.val_samples, tcfg.seed)?;
    let val_mse = validate(&model, &samples, tcfg.batch_size)?;
    let hops = model.config().hops;
    // without feedback every hop is identical; evaluate once and reuse
    let hop_list: Vec<usize> = if variant.feedback { (1..=hops).collect() } else { vec![hops] };
    let mut eval_by_hop = Vec::with_capacity(hops);
    for &h in &hop_list {
        let pcfg = PipelineConfig { hop: Some(h), ..cfg.pipeline.clone() };
        let results = estimate_scenes(&val.scenes, std::slice::from_ref(&model), &pcfg)?;
        eval_by_hop.push(evaluate(&results, gt, &cfg.eval)?);
    }
    if !variant.feedback {
        eval_by_hop = vec![eval_by_hop[0].clone(); hops];
    }
    log::info!(
        "{} seed {seed}: AP {:.4} ({:.0}s)",
        variant.label(),
        eval_by_hop.last().map_or(0.0, |r| r.ap),
        train_seconds
    );
    Ok(Run {
        variant,
        seed,
        model,
        log,
        eval_by_hop,
        val_mse,
        train_seconds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: String,
    pub cue: bool,
    pub feedback: bool,
    pub ap_per_seed: Vec<f64>,
    pub ap: f64,
    pub ap_std: f64,
    pub ar: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Seed-mean AP when decoding hop t (index 0 = hop 1).
    pub ap_by_hop: Vec<f64>,
    /// Seed-mean validation MSE per hop.
    pub val_mse_by_hop: Vec<f64>,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub seeds: Vec<u64>,
    pub single_ap: Vec<f64>,
    pub ensemble_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
    /// Two-model average of the full variant, when at least two seeds ran.
    pub ensemble: Option<EnsembleRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

impl AblationReport {
    /// Copy with wallclock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.train_seconds = 0.0;
        }
        r
    }

    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.cue == v.cue && r.feedback == v.feedback)
    }

    /// Table of seed-averaged results, one row per variant.
    pub fn table(&self) -> String {
        let pct = |x: f64| format!("{:.1}", 100.0 * x);
        let mut s = format!("Ablation over seeds {:?} (AP/AR in points)\n", self.seeds);
        s.push_str("| Method          | I.C. | R.R. |   AP  | ± sd |  AP50 |  AP75 |   AR  | AP by hop          |\n");
        s.push_str("|-----------------|------|------|-------|------|-------|-------|-------|--------------------|\n");
        for r in &self.rows {
            let hops: Vec<String> = r.ap_by_hop.iter().map(|&a| pct(a)).collect();
            s.push_str(&format!(
                "| {:<15} | {:^4} | {:^4} | {:>5} | {:>4} | {:>5} | {:>5} | {:>5} | {:<18} |\n",
                r.label,
                if r.cue { "x" } else { "" },
                if r.feedback { "x" } else { "" },
                pct(r.ap),
                pct(r.ap_std),
                pct(r.ap50),
                pct(r.ap75),
                pct(r.ar),
                hops.join(" / ")
            ));
        }
        if let Some(e) = &self.ensemble {
            s.push_str(&format!(
                "Ensemble of seeds {:?}: AP {} (singles {})\n",
                e.seeds,
                pct(e.ensemble_ap),
                e.single_ap.iter().map(|&a| pct(a)).collect::<Vec<_>>().join(", ")
            ));
        }
        s
    }
}

pub struct Ablation {
    pub report: AblationReport,
    pub runs: Vec<Run>,
    pub val: Dataset,
}

/// Trains and evaluates every variant for every seed. Runs are independent
/// and may proceed in parallel; each is fully determined by its seed.
pub fn ablate(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Ablation> {
    cfg.validate()?;
    let (train_set, val) = cfg.datasets()?;
    let gt = val.ground_truth();
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(v, s)| run_one(cfg, v, s, &train_set, &val, &gt))
        .collect::<Result<Vec<_>>>()?;

    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let rs: Vec<&Run> = runs.iter().filter(|r| r.variant == v).collect();
            let aps: Vec<f64> = rs.iter().map(|r| r.final_eval().ap).collect();
            let hops = rs[0].eval_by_hop.len();
            VariantRow {
                label: v.label().to_string(),
                cue: v.cue,
                feedback: v.feedback,
                ap: mean(&aps),
                ap_std: std_dev(&aps),
                ar: mean(&rs.iter().map(|r| r.final_eval().ar).collect::<Vec<_>>()),
                ap50: mean(&rs.iter().map(|r| r.final_eval().ap50.unwrap_or(f64::NAN)).collect::<Vec<_>>()),
                ap75: mean(&rs.iter().map(|r| r.final_eval().ap75.unwrap_or(f64::NAN)).collect::<Vec<_>>()),
                ap_by_hop: (0..hops)
                    .map(|t| mean(&rs.iter().map(|r| r.eval_by_hop[t].ap).collect::<Vec<_>>()))
                    .collect(),
                val_mse_by_hop: (0..hops)
                    .map(|t| mean(&rs.iter().map(|r| r.val_mse[t]).collect::<Vec<_>>()))
                    .collect(),
                train_seconds: rs.iter().map(|r| r.train_seconds).sum(),
                ap_per_seed: aps,
            }
        })
        .collect();

    let full: Vec<&Run> = runs.iter().filter(|r| r.variant == Variant::FULL).take(2).collect();
    let ensemble = if full.len() == 2 {
        let models = [full[0].model.clone(), full[1].model.clone()];
        let results = estimate_scenes(&val.scenes, &models, &cfg.pipeline)?;
        Some(EnsembleRow {
            seeds: full.iter().map(|r| r.seed).collect(),
            single_ap: full.iter().map(|r| r.final_eval().ap).collect(),
            ensemble_ap: evaluate(&results, &gt, &cfg.eval)?.ap,
        })
    } else {
        None
    };

    let report = AblationReport {
        seeds: cfg.seeds.clone(),
        rows,
        ensemble,
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, &report, &runs, &val)?;
    }
    Ok(Ablation { report, runs, val })
}

fn write_artifacts(dir: &Path, report: &AblationReport, runs: &[Run], val: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in runs {
        let stem = format!("{}-seed{}", r.model.config().variant(), r.seed);
        save_checkpoint(&r.model, &dir.join(format!("{stem}.ckpt")))?;
        r.log.write_csv(&dir.join(format!("{stem}.csv")))?;
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(dir, e.to_string()))?;
    let path = dir.join("ablation.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("ablation.md");
    fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    write_jsonl(&dir.join("val_annotations.jsonl"), &val.ground_truth())
}
