//! Mini-batch training with the all-hop loss, validation per hop, and
//! checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_all_hops, loss_all_hops_graph, Model, ModelConfig};
use crate::nn::{io, Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::synth::{make_training_sample, Dataset, SampleConfig, TrainingSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Fractions of `epochs` after which the lr is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
    /// Cap on validation crops; 0 uses every validation person.
    pub val_samples: usize,
    pub sample: SampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            adam: AdamConfig::default(),
            lr_milestones: vec![0.7, 0.9],
            lr_decay: 0.1,
            clip_norm: 5.0,
            seed: 0,
            eval_every: 1,
            val_samples: 256,
            sample: SampleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("train.epochs, batch_size and eval_every must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("train.lr_milestones must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * self.epochs as f64).round())
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Empty when no validation ran this epoch.
    pub val_mse: Vec<f64>,
    pub lr: f64,
    /// Largest pre-clip gradient norm seen this epoch.
    pub max_grad_norm: f64,
    /// Steps this epoch whose gradient was clipped.
    pub clipped_steps: usize,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub hops: usize,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    /// `epoch,train_loss,val_mse_hop1..hopT,lr,wallclock`; missing
    /// validation values are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss");
        for t in 1..=self.hops {
            s.push_str(&format!(",val_mse_hop{t}"));
        }
        s.push_str(",lr,wallclock\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.8}", e.epoch, e.train_loss));
            for t in 0..self.hops {
                match e.val_mse.get(t) {
                    Some(v) => s.push_str(&format!(",{v:.8}")),
                    None => s.push(','),
                }
            }
            s.push_str(&format!(",{},{:.3}\n", e.lr, e.wallclock));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Validation MSE per hop from the last epoch that validated.
    pub fn final_val_mse(&self) -> Option<&[f64]> {
        self.epochs
            .iter()
            .rev()
            .find(|e| !e.val_mse.is_empty())
            .map(|e| e.val_mse.as_slice())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stacks samples into `(crops N×1×H×W, targets N×K×h×w, mask N·K)`.
pub fn collate(batch: &[TrainingSample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<bool>)> {
    let crops: Vec<Tensor<f32>> = batch.iter().map(|s| s.crop.clone()).collect();
    let targets: Vec<Tensor<f32>> = batch.iter().map(|s| s.target.to_tensor()).collect();
    let mask = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((Tensor::stack(&crops)?, Tensor::stack(&targets)?, mask))
}

fn diverged(step: usize, loss: f64, lr: f64, grad_norm: f64) -> Error {
    Error::Diverged {
        step,
        loss,
        lr,
        grad_norm,
    }
}

/// One optimizer step on `batch`. `step` only labels diagnostics.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[TrainingSample],
    lr: f64,
    clip_norm: f64,
    step: usize,
) -> Result<StepStats> {
    let (crops, targets, mask) = collate(batch)?;
    let cues: Vec<_> = batch.iter().map(|s| s.cue).collect();
    let hops = model.config().hops;
    let numeric = |e: Error| match e {
        Error::NonFinite(_) => diverged(step, f64::NAN, lr, f64::NAN),
        other => other,
    };
    let mut g = Graph::new();
    let crop = g.input(crops)?;
    let cue = if model.config().cue_enabled {
        Some(g.input(model.cue_embedding(&cues)?)?)
    } else {
        None
    };
    let outs = model.forward_graph(&mut g, crop, cue, hops).map_err(numeric)?;
    let (loss_var, _) = loss_all_hops_graph(&mut g, &outs, &targets, &mask).map_err(numeric)?;
    let loss = g.value(loss_var).item()? as f64;
    let grads = g.backward(loss_var).map_err(numeric)?;
    let params = model.params_mut();
    params.zero_grad();
    grads.accumulate_into(params);
    let grad_norm = params.clip_grad_norm(clip_norm);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(diverged(step, loss, lr, grad_norm));
    }
    adam.step(params, lr);
    Ok(StepStats { loss, grad_norm })
}

/// Every `(image, person)` pair with at least one labeled joint.
pub fn targets(data: &Dataset) -> Vec<(usize, usize)> {
    data.scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.persons
                .iter()
                .enumerate()
                .filter(|(_, p)| p.pose.labeled_count() > 0)
                .map(move |(j, _)| (i, j))
        })
        .collect()
}

/// Fixed validation crops: no box augmentation, cue always present, same
/// cue every call.
pub fn validation_samples(
    data: &Dataset,
    model: &ModelConfig,
    sample: &SampleConfig,
    limit: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    let mut pairs = targets(data);
    if limit > 0 {
        pairs.truncate(limit);
    }
    let det = sample.deterministic();
    pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let mut rng = sample_rng(seed ^ 0x5eed_0f_7a1, k as u64);
            make_training_sample(&data.scenes[i], j, model, &det, &mut rng)
        })
        .collect()
}

/// Mean masked MSE per hop over `samples`, batched by `batch_size`.
pub fn validate(model: &Model, samples: &[TrainingSample], batch_size: usize) -> Result<Vec<f64>> {
    let hops = model.config().hops;
    let mut sums = vec![0.0; hops];
    let mut weight = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (crops, targets, mask) = collate(chunk)?;
        let cues: Vec<_> = chunk.iter().map(|s| s.cue).collect();
        let out = model.forward_batch(&crops, &cues, hops)?;
        let l = loss_all_hops(&out, &targets, &mask)?;
        let w = chunk.len() as f64;
        for (s, v) in sums.iter_mut().zip(&l.per_hop) {
            *s += v * w;
        }
        weight += w;
    }
    if weight == 0.0 {
        return Err(Error::Data("validation set is empty".into()));
    }
    Ok(sums.into_iter().map(|s| s / weight).collect())
}

/// Trains `model` in place. Sample augmentation for position `k` of epoch
/// `e` is seeded by `(cfg.seed, e, k)`, so results do not depend on the
/// worker count.
pub fn train(model: &mut Model, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let pairs = targets(data);
    if pairs.is_empty() {
        return Err(Error::Data("training set has no labeled persons".into()));
    }
    let val_samples = match val {
        Some(v) => Some(validation_samples(v, model.config(), &cfg.sample, cfg.val_samples, cfg.seed)?),
        None => None,
    };
    let start = Instant::now();
    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut log = TrainLog {
        hops: model.config().hops,
        ..TrainLog::default()
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = pairs.clone();
        order.shuffle(&mut sample_rng(cfg.seed, u64::MAX - epoch as u64));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let (mut max_norm, mut clipped) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &(i, j))| {
                    let pos = (b * cfg.batch_size + k) as u64;
                    let mut rng = sample_rng(cfg.seed, ((epoch as u64) << 32) | pos);
                    make_training_sample(&data.scenes[i], j, model.config(), &cfg.sample, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = train_step(model, &mut adam, &batch, lr, cfg.clip_norm, step)?;
            step += 1;
            log.step_losses.push(stats.loss);
            loss_sum += stats.loss * batch.len() as f64;
            seen += batch.len();
            max_norm = max_norm.max(stats.grad_norm);
            if stats.grad_norm > cfg.clip_norm {
                clipped += 1;
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let val_mse = match &val_samples {
            Some(s) if last || (epoch + 1) % cfg.eval_every == 0 => validate(model, s, cfg.batch_size)?,
            _ => Vec::new(),
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_mse,
            lr,
            max_grad_norm: max_norm,
            clipped_steps: clipped,
            wallclock: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "[{}] epoch {}/{} loss {:.6} val {:?} lr {} clipped {} ({:.1}s)",
            model.config().variant(),
            entry.epoch,
            cfg.epochs,
            entry.train_loss,
            entry.val_mse,
            lr,
            clipped,
            entry.wallclock
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

/// `HPCK`, u32 version, u64 header length, JSON header, then one `HPT1`
/// tensor per manifest entry in order.
pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        manifest: model
            .params()
            .iter()
            .map(|(_, p)| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let io_err = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&json).map_err(io_err)?;
    for (_, p) in model.params().iter() {
        io::write_tensor(w, &p.value).map_err(io_err)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, model, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<R: Read>(r: &mut R, path: &Path) -> Result<Model> {
    let io_err = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"),
        ));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io_err)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 1 << 24 {
        return Err(Error::format(path, format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io_err)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format_version != version {
        return Err(Error::format(path, "header version disagrees with file version"));
    }
    let mut store = ParamStore::new();
    for entry in &header.manifest {
        let t = io::read_tensor(r, path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                path,
                format!("tensor {} has shape {:?}, manifest says {:?}", entry.name, t.shape(), entry.shape),
            ));
        }
        store
            .register(entry.name.clone(), t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Model::from_params(header.config, store).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f), path)
}
