//! Top-down inference: filtered boxes, instance cues from a cue-free pass,
//! one forward pass per cue (heatmaps averaged across models), decoding,
//! scoring and OKS-NMS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{PoseResult, ResultRecord};
use crate::geometry::{
    crop_affine, expand_to_aspect, filter_boxes_indexed, keypoints_to_image, sample_bilinear, BBox,
    CropTransform, DEFAULT_ASPECT, DEFAULT_MARGIN, DEFAULT_MIN_SIDE,
};
use crate::heatmap::{decode_all, local_peaks, Heatmap, InstanceCue, PeakParams};
use crate::metrics::{oks, AREA_FACTOR, DEFAULT_KAPPA};
use crate::model::Model;
use crate::nn::Tensor;
use crate::pose::{Keypoint, Point, Pose, Visibility};
use crate::synth::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub min_box_side: f64,
    pub aspect: f64,
    pub margin: f64,
    pub peaks: PeakParams,
    /// Joint channels merged into the image-level cue map; empty means all.
    pub cue_joints: Vec<usize>,
    /// OKS above which a lower-scored pose is suppressed.
    pub nms_oks: f64,
    /// One per joint; empty means the uniform default.
    pub kappas: Vec<f64>,
    /// 1-based hop whose heatmaps are decoded; `None` means the last.
    pub hop: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_box_side: DEFAULT_MIN_SIDE,
            aspect: DEFAULT_ASPECT,
            margin: DEFAULT_MARGIN,
            peaks: PeakParams::default(),
            cue_joints: Vec::new(),
            nms_oks: 0.5,
            kappas: Vec::new(),
            hop: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.peaks.validate()?;
        if !(self.nms_oks > 0.0 && self.nms_oks <= 1.0) {
            return Err(Error::Config(format!("nms_oks must lie in (0, 1], got {}", self.nms_oks)));
        }
        if !(self.min_box_side >= 0.0) {
            return Err(Error::Config("min_box_side must be >= 0".into()));
        }
        if self.hop == Some(0) {
            return Err(Error::Config("hop is 1-based".into()));
        }
        Ok(())
    }

    fn kappas_for(&self, joints: usize) -> Result<Vec<f64>> {
        match self.kappas.len() {
            0 => Ok(vec![DEFAULT_KAPPA; joints]),
            n if n == joints => Ok(self.kappas.clone()),
            n => Err(Error::Config(format!("{n} kappas for {joints} joints"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPose {
    /// Image coordinates.
    pub keypoints: Vec<Point>,
    pub keypoint_scores: Vec<f64>,
    pub score: f64,
    pub box_id: usize,
    /// Cue position in image coordinates, if the pass used one.
    pub cue: Option<Point>,
    /// 1-based hop the heatmaps came from.
    pub hop: usize,
    /// Scale area used when this pose is the reference in OKS-NMS.
    pub area: f64,
}

impl ScoredPose {
    pub fn as_pose(&self) -> Pose {
        Pose::new(
            self.keypoints
                .iter()
                .map(|p| Keypoint::new(p.x, p.y, Visibility::Visible))
                .collect(),
        )
    }

    pub fn to_result(&self) -> PoseResult {
        PoseResult {
            keypoints: self
                .keypoints
                .iter()
                .zip(&self.keypoint_scores)
                .flat_map(|(p, s)| [p.x, p.y, *s])
                .collect(),
            score: self.score,
            box_id: self.box_id,
            hop: self.hop,
        }
    }
}

/// Greedy OKS-NMS: visit poses by descending score (ties by input index)
/// and keep a pose unless a kept pose has OKS above `gamma` with it.
pub fn oks_nms(poses: &[ScoredPose], gamma: f64, kappas: &[f64]) -> Result<Vec<ScoredPose>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("nms gamma must lie in (0, 1], got {gamma}")));
    }
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| poses[b].score.total_cmp(&poses[a].score).then(a.cmp(&b)));
    let mut kept: Vec<(Pose, usize)> = Vec::new();
    for i in order {
        let cand = &poses[i];
        let mut suppressed = false;
        for (ref_pose, j) in &kept {
            if oks(&cand.keypoints, ref_pose, poses[*j].area, kappas)? > gamma {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push((cand.as_pose(), i));
        }
    }
    Ok(kept.into_iter().map(|(_, i)| poses[i].clone()).collect())
}

struct PreparedBox {
    id: usize,
    bbox: BBox,
    crop: Tensor<f32>,
    transform: CropTransform,
    area: f64,
}

fn prepare(image: &Tensor<f32>, id: usize, b: &BBox, model: &Model, cfg: &PipelineConfig) -> Result<PreparedBox> {
    let mc = model.config();
    let expanded = expand_to_aspect(b, cfg.aspect, cfg.margin)?;
    let (crop, transform) = crop_affine(image, &expanded, mc.input_h, mc.input_w)?;
    Ok(PreparedBox {
        id,
        bbox: *b,
        crop,
        transform,
        area: expanded.area() * AREA_FACTOR,
    })
}

fn image_size(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("pipeline", format!("expected a grayscale image, got {:?}", image.shape()))),
    }
}

fn cue_map_channels(map: &Heatmap, joints: &[usize]) -> Result<Vec<f32>> {
    let all: Vec<usize> = (0..map.channels()).collect();
    let chosen = if joints.is_empty() { &all } else { joints };
    let n = map.height() * map.width();
    let mut out = vec![f32::NEG_INFINITY; n];
    for &c in chosen {
        if c >= map.channels() {
            return Err(Error::Config(format!("cue joint {c} out of range for {} joints", map.channels())));
        }
        for (o, &v) in out.iter_mut().zip(map.channel(c)) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Hop-1 cue-free heatmaps of every crop, averaged over `models`.
fn cue_free_heatmaps(prepared: &[PreparedBox], models: &[Model]) -> Result<Vec<Heatmap>> {
    let crops: Vec<Tensor<f32>> = prepared.iter().map(|p| p.crop.clone()).collect();
    let batch = Tensor::stack(&crops)?;
    let mut sum: Vec<f64> = Vec::new();
    for m in models {
        let out = m.forward_batch(&batch, &vec![None; prepared.len()], 1)?;
        let data = out.hops[0].data();
        sum.resize(data.len(), 0.0);
        for (s, &v) in sum.iter_mut().zip(data) {
            *s += v as f64;
        }
    }
    let mc = models[0].config();
    let shape = [prepared.len(), mc.joints, mc.heatmap_h(), mc.heatmap_w()];
    let inv = 1.0 / models.len() as f64;
    let mean = Tensor::new(&shape, sum.iter().map(|&v| (v * inv) as f32).collect())?;
    (0..prepared.len())
        .map(|n| Heatmap::from_tensor(&mean.batch_item(n)?))
        .collect()
}

fn cues_for_boxes(image: &Tensor<f32>, prepared: &[PreparedBox], models: &[Model], cfg: &PipelineConfig) -> Result<Vec<Vec<InstanceCue>>> {
    if prepared.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = image_size(image)?;
    let s = models[0].config().stride;
    let sigma = models[0].config().cue_sigma;
    let (mh, mw) = (h.div_ceil(s), w.div_ceil(s));
    let heatmaps = cue_free_heatmaps(prepared, models)?;

    // image-level map on the stride grid: per-pixel max over crops and joints
    let mut image_map = vec![0.0f32; mh * mw];
    for (p, heat) in prepared.iter().zip(&heatmaps) {
        let plane = cue_map_channels(heat, &cfg.cue_joints)?;
        let expanded = expand_to_aspect(&p.bbox, cfg.aspect, cfg.margin)?;
        for y in 0..mh {
            for x in 0..mw {
                let q = Point::new((x * s) as f64, (y * s) as f64);
                if !expanded.contains(q) {
                    continue;
                }
                let c = p.transform.to_crop(q);
                let v = sample_bilinear(&plane, heat.height(), heat.width(), c.x / s as f64, c.y / s as f64);
                let cell = &mut image_map[y * mw + x];
                *cell = cell.max(v);
            }
        }
    }
    let map = Heatmap::new(1, mh, mw, image_map)?;
    let sf = s as f64;
    prepared
        .iter()
        .map(|p| {
            let b = p.bbox;
            let region = BBox::new(b.x / sf, b.y / sf, b.w / sf, b.h / sf, b.score);
            let found = local_peaks(&map, &region, &cfg.peaks, sigma)?;
            if found.is_empty() {
                let c = b.center();
                return Ok(vec![InstanceCue::new(c.x, c.y, sigma)?]);
            }
            found
                .into_iter()
                .map(|c| InstanceCue::new(c.x * sf, c.y * sf, sigma))
                .collect()
        })
        .collect()
}

/// Cues in image coordinates for each of `boxes` (already filtered), from
/// the cue-free hop-1 heatmaps of `models` averaged. Boxes without a local
/// peak get one cue at their center.
pub fn generate_image_cues(
    image: &Tensor<f32>,
    boxes: &[BBox],
    models: &[Model],
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<InstanceCue>>> {
    cfg.validate()?;
    check_models(models)?;
    let prepared = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| prepare(image, i, b, &models[0], cfg))
        .collect::<Result<Vec<_>>>()?;
    cues_for_boxes(image, &prepared, models, cfg)
}

fn check_models(models: &[Model]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("inference needs at least one model".into()))?
        .config();
    for m in &models[1..] {
        let c = m.config();
        if c.joints != first.joints
            || c.input_h != first.input_h
            || c.input_w != first.input_w
            || c.stride != first.stride
        {
            return Err(Error::Config(format!(
                "ensemble members disagree: {}x{} K={} vs {}x{} K={}",
                first.input_h, first.input_w, first.joints, c.input_h, c.input_w, c.joints
            )));
        }
    }
    Ok(())
}

/// Every decoded pose before suppression. `boxes` are raw detections; ids
/// in the output index into it.
pub fn estimate_unsuppressed(
    image: &Tensor<f32>,
    boxes: &[BBox],
    models: &[Model],
    cfg: &PipelineConfig,
) -> Result<Vec<ScoredPose>> {
    cfg.validate()?;
    check_models(models)?;
    let lead = &models[0];
    let hop = cfg.hop.unwrap_or_else(|| models.iter().map(|m| m.config().hops).max().unwrap_or(1));
    if let Some(m) = models.iter().find(|m| m.config().hops < hop) {
        return Err(Error::Config(format!(
            "hop {hop} requested but a model runs {} hops",
            m.config().hops
        )));
    }
    let prepared = filter_boxes_indexed(boxes, cfg.min_box_side)
        .into_iter()
        .map(|(i, b)| prepare(image, i, &b, lead, cfg))
        .collect::<Result<Vec<_>>>()?;

    let cues: Vec<Vec<Option<InstanceCue>>> = match models.iter().any(|m| m.config().cue_enabled) {
        true => cues_for_boxes(image, &prepared, models, cfg)?
            .into_iter()
            .map(|v| v.into_iter().map(Some).collect())
            .collect(),
        false => vec![vec![None]; prepared.len()],
    };

    let mc = lead.config();
    let (k, hh, hw) = (mc.joints, mc.heatmap_h(), mc.heatmap_w());
    let plane = k * hh * hw;
    let mut poses = Vec::new();
    for (p, box_cues) in prepared.iter().zip(&cues) {
        let n = box_cues.len();
        let crop_cues: Vec<Option<InstanceCue>> = box_cues
            .iter()
            .map(|c| {
                c.map(|c| {
                    let q = p.transform.to_crop(c.point());
                    InstanceCue::new(q.x, q.y, mc.cue_sigma)
                })
                .transpose()
            })
            .collect::<Result<_>>()?;
        let mut sum = vec![0.0f64; n * plane];
        for m in models {
            let hops = m.config().hops;
            if m.config().cue_enabled {
                let batch = Tensor::stack(&vec![p.crop.clone(); n])?;
                let out = m.forward_batch(&batch, &crop_cues, hops)?;
                for (s, &v) in sum.iter_mut().zip(out.hops[hop - 1].data()) {
                    *s += v as f64;
                }
            } else {
                let out = m.forward_batch(&p.crop, &[None], hops)?;
                let single = out.hops[hop - 1].data();
                for (i, s) in sum.iter_mut().enumerate() {
                    *s += single[i % plane] as f64;
                }
            }
        }
        let inv = 1.0 / models.len() as f64;
        for (j, cue) in box_cues.iter().enumerate() {
            let data = sum[j * plane..(j + 1) * plane].iter().map(|&v| (v * inv) as f32).collect();
            let heat = Heatmap::new(k, hh, hw, data)?;
            let peaks = decode_all(&heat);
            let in_heat = Pose::new(
                peaks
                    .iter()
                    .map(|q| Keypoint::new(q.x, q.y, Visibility::Visible))
                    .collect(),
            );
            let keypoints: Vec<Point> = keypoints_to_image(&in_heat, &p.transform, mc.stride)
                .keypoints
                .iter()
                .map(|kp| kp.pos)
                .collect();
            let keypoint_scores: Vec<f64> = peaks.iter().map(|q| q.score).collect();
            let mean = keypoint_scores.iter().sum::<f64>() / k as f64;
            poses.push(ScoredPose {
                keypoints,
                keypoint_scores,
                score: (p.bbox.score * mean).max(0.0),
                box_id: p.id,
                cue: cue.map(|c| c.point()),
                hop,
                area: p.area,
            });
        }
    }
    Ok(poses)
}

/// Final poses for one image: [`estimate_unsuppressed`] followed by OKS-NMS.
pub fn estimate(image: &Tensor<f32>, boxes: &[BBox], models: &[Model], cfg: &PipelineConfig) -> Result<Vec<ScoredPose>> {
    let poses = estimate_unsuppressed(image, boxes, models, cfg)?;
    let kappas = cfg.kappas_for(models[0].config().joints)?;
    oks_nms(&poses, cfg.nms_oks, &kappas)
}

/// Runs [`estimate`] on every scene with its simulated detections.
pub fn estimate_scenes(scenes: &[Scene], models: &[Model], cfg: &PipelineConfig) -> Result<Vec<ResultRecord>> {
    scenes
        .par_iter()
        .map(|s| {
            let poses = estimate(&s.image, &s.detections, models, cfg)?;
            Ok(ResultRecord {
                image_id: s.image_id,
                poses: poses.iter().map(ScoredPose::to_result).collect(),
            })
        })
        .collect()
}
