//! The pose network: a small two-branch multi-resolution body, an input
//! refinement block that fuses the instance-cue channel into post-`layer1`
//! features, and a feedback path that re-injects the previous hop's heatmaps
//! at the same junction.
//!
//! ```text
//! crop ─ stem(s2) ─ layer1(s2) ─ F ──(+ cue block)──┬─(+ feedback(hop t-1))─ body ─ head ─ heatmaps_t
//!                                                    └──────────── reused every hop ────────────┘
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, InstanceCue};
use crate::nn::{downsample_mean, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Joint count K.
    pub joints: usize,
    pub stem_channels: usize,
    /// Heatmap stride relative to the input crop. Only 4 is supported.
    pub stride: usize,
    /// Recurrent hops T.
    pub hops: usize,
    pub cue_enabled: bool,
    pub feedback_enabled: bool,
    /// Cue Gaussian spread in input pixels.
    pub cue_sigma: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 64,
            input_w: 64,
            joints: 5,
            stem_channels: 16,
            stride: 4,
            hops: 3,
            cue_enabled: true,
            feedback_enabled: true,
            cue_sigma: 2.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 4 {
            return Err(Error::Config(format!(
                "model.stride must be 4 (stem + layer1), got {}",
                self.stride
            )));
        }
        let unit = self.stride * 2;
        if self.input_h == 0 || self.input_w == 0 || self.input_h % unit != 0 || self.input_w % unit != 0
        {
            return Err(Error::Config(format!(
                "model input {}x{} must be a positive multiple of {unit}",
                self.input_h, self.input_w
            )));
        }
        if self.hops == 0 {
            return Err(Error::Config("model.hops must be >= 1".into()));
        }
        if self.joints == 0 || self.stem_channels == 0 {
            return Err(Error::Config("model.joints and model.stem_channels must be >= 1".into()));
        }
        if !(self.cue_sigma > 0.0) {
            return Err(Error::Config("model.cue_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn heatmap_h(&self) -> usize {
        self.input_h / self.stride
    }

    pub fn heatmap_w(&self) -> usize {
        self.input_w / self.stride
    }

    /// Short ablation label used in reports.
    pub fn variant(&self) -> &'static str {
        match (self.cue_enabled, self.feedback_enabled) {
            (false, false) => "baseline",
            (true, false) => "instance-cue",
            (false, true) => "recurrent",
            (true, true) => "cue+recurrent",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    stem: Conv,
    layer1: Conv,
    cue: Option<(Conv, Conv)>,
    feedback: Option<(Conv, Conv)>,
    high1: Conv,
    transition: Conv,
    low1: Conv,
    low_to_high: Conv,
    high2: Conv,
    head: Conv,
}

/// Heatmaps of every hop, each `N×K×(H/s)×(W/s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HopOutputs<S = f32> {
    pub hops: Vec<Tensor<S>>,
}

impl<S: Scalar> HopOutputs<S> {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn last(&self) -> &Tensor<S> {
        self.hops.last().expect("at least one hop")
    }

    /// Heatmap of batch item `n` at hop index `t` (0-based).
    pub fn heatmap(&self, t: usize, n: usize) -> Result<Heatmap> {
        Heatmap::from_tensor(&self.hops[t].batch_item(n)?.cast())
    }
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<S>,
    layers: Layers,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Builder<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    seed: u64,
}

impl<S: Scalar> Builder<'_, S> {
    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Result<Conv> {
        let shape = [out_c, in_c, k, k];
        let weight = if zero {
            Tensor::zeros(&shape)?
        } else {
            let std = (2.0 / (in_c * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
            Tensor::from_fn(&shape, |_| S::from_f64(normal.sample(&mut rng)))?
        };
        Ok(Conv {
            weight: self.store.register(format!("{name}.weight"), weight)?,
            bias: self.store.register(format!("{name}.bias"), Tensor::zeros(&[out_c])?)?,
            stride,
            padding: k / 2,
        })
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic construction from `config.seed`. Each parameter draws
    /// from its own name-keyed stream, so shared layers initialize the same
    /// way regardless of which add-on paths are enabled. The cue block's
    /// second conv and the feedback update conv start at exactly zero.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = config.stem_channels;
        let k = config.joints;
        let mut b = Builder {
            store: &mut params,
            seed: config.seed,
        };
        let stem = b.conv("stem.conv", 1, c, 3, 2, false)?;
        let layer1 = b.conv("layer1.conv", c, c, 3, 2, false)?;
        let cue = if config.cue_enabled {
            Some((
                b.conv("cue.conv1", 1, c, 3, 1, false)?,
                b.conv("cue.conv2", c, c, 3, 1, true)?,
            ))
        } else {
            None
        };
        let feedback = if config.feedback_enabled {
            Some((
                b.conv("feedback.extract", k, c, 1, 1, false)?,
                b.conv("feedback.update", c, c, 1, 1, true)?,
            ))
        } else {
            None
        };
        let layers = Layers {
            stem,
            layer1,
            cue,
            feedback,
            high1: b.conv("body.high.conv1", c, c, 3, 1, false)?,
            transition: b.conv("body.low.transition", c, 2 * c, 3, 2, false)?,
            low1: b.conv("body.low.conv1", 2 * c, 2 * c, 3, 1, false)?,
            low_to_high: b.conv("body.fuse.low_to_high", 2 * c, c, 1, 1, false)?,
            high2: b.conv("body.high.conv2", c, c, 3, 1, false)?,
            head: b.conv("head.conv", c, k, 1, 1, false)?,
        };
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// Rebuilds the layer map for `config` and adopts `params`, which must
    /// match the freshly built manifest name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::build(config)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                model.params.len()
            )));
        }
        for ((_, want), (_, got)) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture and values in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params
                .register(p.name.clone(), p.value.cast())
                .expect("names are unique");
        }
        Model {
            config: self.config.clone(),
            params,
            layers: self.layers,
        }
    }

    /// Cue channel at feature resolution, `N×1×(H/s)×(W/s)`: each cue is
    /// rendered at input resolution and mean-pooled by the stride. `None`
    /// yields an all-zero channel.
    pub fn cue_embedding(&self, cues: &[Option<InstanceCue>]) -> Result<Tensor<S>> {
        let (h, w) = (self.config.input_h, self.config.input_w);
        let mut data = Vec::with_capacity(cues.len() * h * w);
        for cue in cues {
            match cue {
                Some(c) => data.extend(c.render(h, w)?.data().iter().map(|&v| S::from_f64(v as f64))),
                None => data.extend(std::iter::repeat_n(S::ZERO, h * w)),
            }
        }
        let full = Tensor::new(&[cues.len(), 1, h, w], data)?;
        downsample_mean(&full, self.config.stride)
    }

    fn conv(&self, g: &mut Graph<S>, x: Var, c: &Conv) -> Result<Var> {
        let w = g.param(&self.params, c.weight)?;
        let b = g.param(&self.params, c.bias)?;
        g.conv2d(x, w, b, c.stride, c.padding)
    }

    fn conv_relu(&self, g: &mut Graph<S>, x: Var, c: &Conv) -> Result<Var> {
        let y = self.conv(g, x, c)?;
        g.relu(y)
    }

    fn body(&self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        let l = &self.layers;
        let high = self.conv_relu(g, f, &l.high1)?;
        let low = self.conv_relu(g, f, &l.transition)?;
        let low = self.conv_relu(g, low, &l.low1)?;
        let up = self.conv(g, low, &l.low_to_high)?;
        let up = g.upsample_bilinear(up, 2)?;
        let fused = g.add(high, up)?;
        let fused = g.relu(fused)?;
        let high = self.conv_relu(g, fused, &l.high2)?;
        self.conv(g, high, &l.head)
    }

    /// Records the unrolled network on `g`. `crop` is `N×1×H×W`; `cue` is
    /// the matching embedding from [`Model::cue_embedding`] (ignored when
    /// the cue path is disabled). Returns one heatmap node per hop.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        crop: Var,
        cue: Option<Var>,
        hops: usize,
    ) -> Result<Vec<Var>> {
        if hops == 0 {
            return Err(Error::Config("hops must be >= 1".into()));
        }
        let [_, ch, h, w] = g.value(crop).dims4()?;
        if ch != 1 || h != self.config.input_h || w != self.config.input_w {
            return Err(Error::shape(
                "forward",
                format!(
                    "crop {:?} does not match model input 1x{}x{}",
                    g.value(crop).shape(),
                    self.config.input_h,
                    self.config.input_w
                ),
            ));
        }
        let l = &self.layers;
        let x = self.conv_relu(g, crop, &l.stem)?;
        let mut base = self.conv_relu(g, x, &l.layer1)?;

        if let (Some((c1, c2)), Some(cue)) = (&l.cue, cue) {
            let e = self.conv_relu(g, cue, c1)?;
            let e = self.conv(g, e, c2)?;
            base = g.add(base, e)?;
        }

        let mut outputs = Vec::with_capacity(hops);
        match &l.feedback {
            Some((extract, update)) => {
                for t in 0..hops {
                    let features = match outputs.last() {
                        Some(&prev) if t > 0 => {
                            let hint = self.conv_relu(g, prev, extract)?;
                            let delta = self.conv(g, hint, update)?;
                            g.add(base, delta)?
                        }
                        _ => base,
                    };
                    outputs.push(self.body(g, features)?);
                }
            }
            None => {
                // Without feedback every hop sees the same features.
                let out = self.body(g, base)?;
                outputs.resize(hops, out);
            }
        }
        Ok(outputs)
    }

    /// Batched inference over `N×1×H×W` crops with one optional cue each.
    pub fn forward_batch(
        &self,
        crops: &Tensor<S>,
        cues: &[Option<InstanceCue>],
        hops: usize,
    ) -> Result<HopOutputs<S>> {
        let n = crops.shape()[0];
        if cues.len() != n {
            return Err(Error::shape(
                "forward",
                format!("{} cues for a batch of {n}", cues.len()),
            ));
        }
        let mut g = Graph::inference();
        let crop = g.input(crops.clone())?;
        let cue = if self.config.cue_enabled {
            Some(g.input(self.cue_embedding(cues)?)?)
        } else {
            None
        };
        let outs = self.forward_graph(&mut g, crop, cue, hops)?;
        Ok(HopOutputs {
            hops: outs.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Single crop, `config.hops` hops.
    pub fn forward_hops(&self, crop: &Tensor<S>, cue: Option<&InstanceCue>) -> Result<HopOutputs<S>> {
        self.forward_batch(crop, &[cue.copied()], self.config.hops)
    }
}

/// Records the all-hop loss: the unweighted mean over hops of the MSE
/// restricted to `mask` (one flag per `(n, joint)`). Also reports whether
/// every channel was masked out, in which case the loss is 0.
pub fn loss_all_hops_graph<S: Scalar>(
    g: &mut Graph<S>,
    outputs: &[Var],
    target: &Tensor<S>,
    mask: &[bool],
) -> Result<(Var, bool)> {
    let all_masked = !mask.iter().any(|&m| m);
    let scale = 1.0 / outputs.len() as f64;
    let mut total: Option<Var> = None;
    for &out in outputs {
        let l = g.mse_masked(out, target, Some(mask), scale)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("loss over zero hops".into()))?;
    Ok((total, all_masked))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopLoss {
    pub value: f64,
    pub per_hop: Vec<f64>,
    /// Every joint channel was masked out; `value` is then 0.
    pub all_masked: bool,
}

/// Evaluates the all-hop loss on already computed outputs.
pub fn loss_all_hops<S: Scalar>(
    outputs: &HopOutputs<S>,
    target: &Tensor<S>,
    mask: &[bool],
) -> Result<HopLoss> {
    let mut g = Graph::inference();
    let mut per_hop = Vec::with_capacity(outputs.len());
    for t in &outputs.hops {
        let v = g.input(t.clone())?;
        let l = g.mse_masked(v, target, Some(mask), 1.0)?;
        per_hop.push(g.value(l).item()?.to_f64());
    }
    if per_hop.is_empty() {
        return Err(Error::Usage("loss over zero hops".into()));
    }
    let all_masked = !mask.iter().any(|&m| m);
    if all_masked {
        log::warn!("all joints masked out; loss defined as 0");
    }
    Ok(HopLoss {
        value: per_hop.iter().sum::<f64>() / per_hop.len() as f64,
        per_hop,
        all_masked,
    })
}
