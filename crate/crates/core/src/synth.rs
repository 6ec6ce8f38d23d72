//! Deterministic crowded stick-figure scenes with pose annotations,
//! simulated detector boxes, and training-sample construction.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{
    self, quantize, DetectionRecord, GroundTruthRecord, PersonRecord,
};
use crate::geometry::{self, BBox, CropTransform, DEFAULT_ASPECT, DEFAULT_MARGIN, DEFAULT_MIN_SIDE};
use crate::heatmap::{render_targets, Heatmap, InstanceCue};
use crate::model::ModelConfig;
use crate::nn::Tensor;
use crate::pose::{Keypoint, Point, Pose, Visibility};

/// Joint names, canonical positions (unit height, origin at body center),
/// and limbs as joint index pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub joints: Vec<String>,
    pub template: Vec<[f64; 2]>,
    pub limbs: Vec<[usize; 2]>,
}

impl Default for Skeleton {
    /// Head, two hands, two feet; every limb hangs off the head.
    fn default() -> Self {
        Self {
            joints: ["head", "left_hand", "right_hand", "left_foot", "right_foot"]
                .map(String::from)
                .to_vec(),
            template: vec![[0.0, -0.45], [-0.4, -0.05], [0.4, -0.05], [-0.2, 0.5], [0.2, 0.5]],
            limbs: vec![[0, 1], [0, 2], [0, 3], [0, 4]],
        }
    }
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// How simulated detector boxes are derived from the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSim {
    /// Padding around the joint hull, in pixels.
    pub pad: f64,
    /// Relative size/position noise.
    pub jitter: f64,
    /// Chance that an overlapping pair is reported as one merged box.
    pub merge_prob: f64,
    pub score_range: [f64; 2],
}

impl Default for DetectionSim {
    fn default() -> Self {
        Self {
            pad: 4.0,
            jitter: 0.05,
            merge_prob: 0.3,
            score_range: [0.6, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Relative weights of 1, 2, 3, … persons per image.
    pub persons_weights: Vec<f64>,
    /// Box IoU range every overlapping pair must fall into.
    pub overlap_iou: [f64; 2],
    pub skeleton: Skeleton,
    pub person_height: [f64; 2],
    pub width_scale: [f64; 2],
    pub rotation_deg: f64,
    /// Per-joint positional noise as a fraction of person height.
    pub pose_jitter: f64,
    pub occlusion_prob: f64,
    pub noise: f64,
    pub limb_width: f64,
    pub limb_intensity: f64,
    pub joint_radius: f64,
    pub detection: DetectionSim,
    /// Placement attempts per image before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            persons_weights: vec![0.3, 0.6, 0.1],
            overlap_iou: [0.3, 0.6],
            skeleton: Skeleton::default(),
            person_height: [52.0, 76.0],
            width_scale: [0.85, 1.15],
            rotation_deg: 12.0,
            pose_jitter: 0.06,
            occlusion_prob: 0.1,
            noise: 0.04,
            limb_width: 2.0,
            limb_intensity: 0.6,
            joint_radius: 2.5,
            detection: DetectionSim::default(),
            max_retries: 2000,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("scene size {}x{} too small", self.width, self.height));
        }
        if self.persons_weights.is_empty()
            || self.persons_weights.iter().any(|&w| !(w >= 0.0))
            || self.persons_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("scene.persons_weights needs non-negative weights with a positive sum".into());
        }
        let [lo, hi] = self.overlap_iou;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return bad(format!("scene.overlap_iou must satisfy 0 < lo < hi <= 1, got {lo}, {hi}"));
        }
        let [h0, h1] = self.person_height;
        if !(0.0 < h0 && h0 < h1) {
            return bad("scene.person_height must be an increasing positive range".into());
        }
        let [w0, w1] = self.width_scale;
        if !(0.0 < w0 && w0 <= w1) {
            return bad("scene.width_scale must be a positive range".into());
        }
        let sk = &self.skeleton;
        if sk.is_empty() || sk.template.len() != sk.len() {
            return bad("scene.skeleton needs one template point per joint".into());
        }
        if sk.limbs.iter().any(|l| l[0] >= sk.len() || l[1] >= sk.len()) {
            return bad("scene.skeleton limb refers to an unknown joint".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.detection.merge_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        let [s0, s1] = self.detection.score_range;
        if !(0.0 <= s0 && s0 <= s1 && s1 <= 1.0) {
            return bad("scene.detection.score_range must lie in [0, 1]".into());
        }
        if self.max_retries == 0 {
            return bad("scene.max_retries must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonAnnotation {
    pub pose: Pose,
    /// Tight box around the labeled joints.
    pub bbox: BBox,
    /// A side of `bbox` is below the detection filter minimum.
    pub small: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    /// `H×W`, values are multiples of 1/255.
    pub image: Tensor<f32>,
    pub persons: Vec<PersonAnnotation>,
    /// Simulated detector output.
    pub detections: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthRecord> {
        self.scenes
            .iter()
            .map(|s| GroundTruthRecord {
                image_id: s.image_id,
                persons: s
                    .persons
                    .iter()
                    .map(|p| PersonRecord::from_pose(&p.pose, p.bbox, p.small))
                    .collect(),
            })
            .collect()
    }

    pub fn detections(&self) -> Vec<DetectionRecord> {
        self.scenes
            .iter()
            .map(|s| DetectionRecord {
                image_id: s.image_id,
                boxes: s.detections.clone(),
            })
            .collect()
    }

    /// Writes `images/<id>.pgm`, `annotations.jsonl`, `detections.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.scenes {
            formats::write_pgm(&images.join(format!("{}.pgm", s.image_id)), &s.image)?;
        }
        formats::write_jsonl(&dir.join("annotations.jsonl"), &self.ground_truth())?;
        formats::write_jsonl(&dir.join("detections.jsonl"), &self.detections())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gt: Vec<GroundTruthRecord> = formats::read_jsonl(&dir.join("annotations.jsonl"))?;
        let det_path = dir.join("detections.jsonl");
        let dets: Vec<DetectionRecord> = if det_path.exists() {
            formats::read_jsonl(&det_path)?
        } else {
            Vec::new()
        };
        let mut scenes = Vec::with_capacity(gt.len());
        for rec in gt {
            let image = formats::read_pgm(&dir.join("images").join(format!("{}.pgm", rec.image_id)))?;
            let persons = rec
                .persons
                .iter()
                .map(|p| {
                    Ok(PersonAnnotation {
                        pose: p.pose()?,
                        bbox: p.bbox.to_bbox(),
                        small: p.small,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let detections = dets
                .iter()
                .find(|d| d.image_id == rec.image_id)
                .map(|d| d.boxes.clone())
                .unwrap_or_default();
            scenes.push(Scene {
                image_id: rec.image_id,
                image,
                persons,
                detections,
            });
        }
        Ok(Dataset { scenes })
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Images `first..first+n` of the seed's scene stream, generated in parallel.
pub fn generate_range(cfg: &SceneConfig, first: u64, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset needs at least one image".into()));
    }
    let scenes = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, first + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes })
}

pub fn generate_dataset(cfg: &SceneConfig, n_images: usize) -> Result<Dataset> {
    generate_range(cfg, 0, n_images)
}

struct Figure {
    joints: Vec<Point>,
}

fn sample_figure(cfg: &SceneConfig, rng: &mut ChaCha8Rng, center: Point) -> Figure {
    let height = rng.random_range(cfg.person_height[0]..cfg.person_height[1]);
    let wscale = if cfg.width_scale[0] < cfg.width_scale[1] {
        rng.random_range(cfg.width_scale[0]..cfg.width_scale[1])
    } else {
        cfg.width_scale[0]
    };
    let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
    let (sin, cos) = angle.sin_cos();
    let joints = cfg
        .skeleton
        .template
        .iter()
        .map(|&[tx, ty]| {
            let jx = tx * wscale + rng.random_range(-1.0..1.0) * cfg.pose_jitter;
            let jy = ty + rng.random_range(-1.0..1.0) * cfg.pose_jitter;
            let (x, y) = (jx * height, jy * height);
            Point::new(center.x + cos * x - sin * y, center.y + sin * x + cos * y)
        })
        .collect();
    Figure { joints }
}

fn figure_box(f: &Figure) -> BBox {
    BBox::enclosing(f.joints.iter().copied()).expect("skeleton is non-empty")
}

fn inside(cfg: &SceneConfig, f: &Figure, margin: f64) -> bool {
    f.joints.iter().all(|p| {
        p.x >= margin
            && p.y >= margin
            && p.x <= cfg.width as f64 - 1.0 - margin
            && p.y <= cfg.height as f64 - 1.0 - margin
    })
}

fn place_figures(cfg: &SceneConfig, rng: &mut ChaCha8Rng, count: usize) -> Option<Vec<Figure>> {
    let [lo, hi] = cfg.overlap_iou;
    let margin = cfg.joint_radius + 1.0;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut figures: Vec<Figure> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let center = if i == 1 {
                // the second person is steered into overlap with the first
                let b = figure_box(&figures[0]);
                let c = b.center();
                Point::new(
                    c.x + rng.random_range(-0.7..0.7) * b.w,
                    c.y + rng.random_range(-0.4..0.4) * b.h,
                )
            } else {
                Point::new(rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.25 * h..0.75 * h))
            };
            let f = sample_figure(cfg, rng, center);
            if !inside(cfg, &f, margin) {
                continue;
            }
            let b = figure_box(&f);
            let ok = figures.iter().enumerate().all(|(j, o)| {
                let iou = b.iou(&figure_box(o));
                let in_range = (lo..=hi).contains(&iou);
                if i == 1 && j == 0 {
                    in_range
                } else {
                    iou == 0.0 || in_range
                }
            });
            if ok {
                figures.push(f);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(figures)
}

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist2(Point::new(a.x + t * abx, a.y + t * aby)).sqrt()
}

struct Canvas<'a> {
    data: &'a mut [f32],
    width: usize,
    height: usize,
}

impl Canvas<'_> {
    /// Max-composites an anti-aliased shape given its distance field.
    fn stamp(&mut self, lo: Point, hi: Point, intensity: f64, coverage: impl Fn(Point) -> f64) {
        let x0 = lo.x.floor().max(0.0) as usize;
        let y0 = lo.y.floor().max(0.0) as usize;
        let x1 = (hi.x.ceil() as usize).min(self.width - 1);
        let y1 = (hi.y.ceil() as usize).min(self.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = coverage(Point::new(x as f64, y as f64)).clamp(0.0, 1.0);
                let v = (intensity * c) as f32;
                let px = &mut self.data[y * self.width + x];
                if v > *px {
                    *px = v;
                }
            }
        }
    }

    fn line(&mut self, a: Point, b: Point, width: f64, intensity: f64) {
        let r = width / 2.0 + 1.0;
        let lo = Point::new(a.x.min(b.x) - r, a.y.min(b.y) - r);
        let hi = Point::new(a.x.max(b.x) + r, a.y.max(b.y) + r);
        self.stamp(lo, hi, intensity, |p| width / 2.0 + 0.5 - distance_to_segment(p, a, b));
    }

    fn disc(&mut self, c: Point, radius: f64, intensity: f64) {
        let r = radius + 1.0;
        let lo = Point::new(c.x - r, c.y - r);
        let hi = Point::new(c.x + r, c.y + r);
        self.stamp(lo, hi, intensity, |p| radius + 0.5 - p.dist2(c).sqrt());
    }
}

/// One scene, seeded by `(cfg.seed, index)` only.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene> {
    let mut rng = scene_rng(cfg.seed, index);
    let weights = &cfg.persons_weights;
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut count = weights.len();
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            count = i + 1;
            break;
        }
        pick -= w;
    }
    let figures = place_figures(cfg, &mut rng, count).ok_or_else(|| Error::Generation {
        index: index as usize,
        reason: format!(
            "could not place {count} persons with overlap IoU in {:?} after {} attempts",
            cfg.overlap_iou, cfg.max_retries
        ),
    })?;

    let (w, h) = (cfg.width, cfg.height);
    let mut data: Vec<f32> = (0..w * h)
        .map(|_| rng.random_range(0.0..=cfg.noise.max(0.0)) as f32)
        .collect();
    let mut persons = Vec::with_capacity(figures.len());
    {
        let mut canvas = Canvas {
            data: &mut data,
            width: w,
            height: h,
        };
        for f in &figures {
            let vis: Vec<Visibility> = f
                .joints
                .iter()
                .map(|_| {
                    if rng.random_bool(cfg.occlusion_prob) {
                        Visibility::Occluded
                    } else {
                        Visibility::Visible
                    }
                })
                .collect();
            for &[a, b] in &cfg.skeleton.limbs {
                canvas.line(f.joints[a], f.joints[b], cfg.limb_width, cfg.limb_intensity);
            }
            for (p, v) in f.joints.iter().zip(&vis) {
                if *v == Visibility::Visible {
                    canvas.disc(*p, cfg.joint_radius, 1.0);
                }
            }
            let pose = Pose::new(
                f.joints
                    .iter()
                    .zip(&vis)
                    .map(|(p, &v)| Keypoint::new(p.x, p.y, v))
                    .collect(),
            );
            let bbox = tight_box(&pose).unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0, 1.0));
            let small = bbox.w < DEFAULT_MIN_SIDE || bbox.h < DEFAULT_MIN_SIDE;
            persons.push(PersonAnnotation { pose, bbox, small });
        }
    }
    let data = data.into_iter().map(|v| quantize(v) as f32 / 255.0).collect();
    let image = Tensor::new(&[h, w], data)?;
    let detections = simulate_detections(cfg, &persons, &mut rng);
    Ok(Scene {
        image_id: index,
        image,
        persons,
        detections,
    })
}

/// Tight box around the labeled joints of a pose.
pub fn tight_box(pose: &Pose) -> Option<BBox> {
    BBox::enclosing(pose.labeled().map(|(_, k)| k.pos))
}

fn simulate_detections(cfg: &SceneConfig, persons: &[PersonAnnotation], rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let sim = &cfg.detection;
    let noisy: Vec<BBox> = persons
        .iter()
        .map(|p| {
            let b = p.bbox;
            let jw = 1.0 + rng.random_range(-sim.jitter..=sim.jitter);
            let jh = 1.0 + rng.random_range(-sim.jitter..=sim.jitter);
            let c = b.center();
            let c = Point::new(
                c.x + rng.random_range(-sim.jitter..=sim.jitter) * b.w,
                c.y + rng.random_range(-sim.jitter..=sim.jitter) * b.h,
            );
            let score = rng.random_range(sim.score_range[0]..=sim.score_range[1]);
            BBox::from_center(c, (b.w + 2.0 * sim.pad) * jw, (b.h + 2.0 * sim.pad) * jh, score)
        })
        .collect();
    let mut merged_into: Vec<Option<usize>> = vec![None; persons.len()];
    let mut out = Vec::with_capacity(persons.len());
    for i in 0..persons.len() {
        if merged_into[i].is_some() {
            continue;
        }
        let partner = (i + 1..persons.len()).find(|&j| {
            merged_into[j].is_none() && persons[i].bbox.iou(&persons[j].bbox) >= cfg.overlap_iou[0]
        });
        match partner {
            Some(j) if rng.random_bool(sim.merge_prob) => {
                merged_into[j] = Some(i);
                out.push(noisy[i].union(&noisy[j]));
            }
            _ => out.push(noisy[i]),
        }
    }
    // merged partners are dropped above; keep the rest in person order
    out
}

/// Picks one labeled joint uniformly and offsets it by Gaussian noise of
/// std `jitter_sigma`, truncated to ±2·`jitter_sigma` per axis.
pub fn sample_training_cue<R: Rng>(
    pose: &Pose,
    jitter_sigma: f64,
    cue_sigma: f64,
    rng: &mut R,
) -> Result<InstanceCue> {
    let labeled: Vec<Point> = pose.labeled().map(|(_, k)| k.pos).collect();
    let joint = labeled
        .choose(rng)
        .ok_or_else(|| Error::Data("cannot sample a cue from a pose without labeled joints".into()))?;
    let mut offset = [0.0; 2];
    if jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, jitter_sigma).expect("positive std");
        for o in &mut offset {
            *o = loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * jitter_sigma {
                    break v;
                }
            };
        }
    }
    InstanceCue::new(joint.x + offset[0], joint.y + offset[1], cue_sigma)
}

/// Crop and cue augmentation used to build training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub aspect: f64,
    pub margin: f64,
    /// Padding added around the tight joint box before expansion.
    pub pad: f64,
    /// Relative box size/position noise.
    pub box_jitter: f64,
    /// Chance of cropping the union with an overlapping neighbor instead.
    pub union_prob: f64,
    /// Chance of training without a cue.
    pub cue_dropout: f64,
    /// Cue position noise in crop pixels.
    pub jitter_sigma: f64,
    /// Target Gaussian spread in heatmap pixels.
    pub target_sigma: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            aspect: DEFAULT_ASPECT,
            margin: DEFAULT_MARGIN,
            pad: 4.0,
            box_jitter: 0.08,
            union_prob: 0.3,
            cue_dropout: 0.1,
            jitter_sigma: 2.0,
            target_sigma: 2.0,
        }
    }
}

impl SampleConfig {
    /// No augmentation except the cue jitter.
    pub fn deterministic(&self) -> Self {
        Self {
            box_jitter: 0.0,
            union_prob: 0.0,
            cue_dropout: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// `1×1×H×W`.
    pub crop: Tensor<f32>,
    pub cue: Option<InstanceCue>,
    /// K channels at heatmap resolution, target person only.
    pub target: Heatmap,
    pub mask: Vec<bool>,
    pub transform: CropTransform,
    /// Target pose in heatmap coordinates.
    pub target_pose: Pose,
}

/// Box a top-down crop is cut from for person `idx`, before expansion.
pub fn person_box(scene: &Scene, idx: usize, pad: f64) -> BBox {
    let b = scene.persons[idx].bbox;
    BBox::new(b.x - pad, b.y - pad, b.w + 2.0 * pad, b.h + 2.0 * pad, 1.0)
}

pub fn make_training_sample<R: Rng>(
    scene: &Scene,
    target: usize,
    model: &ModelConfig,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let person = scene
        .persons
        .get(target)
        .ok_or_else(|| Error::Data(format!("image {} has no person {target}", scene.image_id)))?;
    let mut b = person_box(scene, target, cfg.pad);
    if cfg.union_prob > 0.0 && rng.random_bool(cfg.union_prob) {
        let neighbors: Vec<usize> = (0..scene.persons.len())
            .filter(|&j| j != target && scene.persons[j].bbox.iou(&person.bbox) > 0.0)
            .collect();
        if let Some(&j) = neighbors.choose(rng) {
            b = b.union(&person_box(scene, j, cfg.pad));
        }
    }
    if cfg.box_jitter > 0.0 {
        let j = cfg.box_jitter;
        let c = b.center();
        let c = Point::new(
            c.x + rng.random_range(-j..=j) * b.w,
            c.y + rng.random_range(-j..=j) * b.h,
        );
        b = BBox::from_center(
            c,
            b.w * (1.0 + rng.random_range(-j..=j)),
            b.h * (1.0 + rng.random_range(-j..=j)),
            1.0,
        );
    }
    let b = geometry::expand_to_aspect(&b, cfg.aspect, cfg.margin)?;
    let (crop, transform) = geometry::crop_affine(&scene.image, &b, model.input_h, model.input_w)?;

    let in_crop = person.pose.map_points(|p| transform.to_crop(p));
    let target_pose = geometry::keypoints_to_heatmap(&person.pose, &transform, model.stride);
    let joints: Vec<Option<Point>> = target_pose
        .keypoints
        .iter()
        .map(|k| k.vis.is_labeled().then_some(k.pos))
        .collect();
    let target = render_targets(&joints, cfg.target_sigma, model.heatmap_h(), model.heatmap_w())?;
    let mask = person.pose.keypoints.iter().map(|k| k.vis.is_labeled()).collect();
    let cue = if cfg.cue_dropout > 0.0 && rng.random_bool(cfg.cue_dropout) {
        None
    } else {
        Some(sample_training_cue(&in_crop, cfg.jitter_sigma, model.cue_sigma, rng)?)
    };
    Ok(TrainingSample {
        crop,
        cue,
        target,
        mask,
        transform,
        target_pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::decode_all;

    fn two_person() -> SceneConfig {
        SceneConfig {
            persons_weights: vec![0.0, 1.0],
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic_generation() {
        let cfg = SceneConfig::default();
        let a = generate_dataset(&cfg, 6).unwrap();
        let b = generate_dataset(&cfg, 6).unwrap();
        assert_eq!(a, b);
        let other = generate_dataset(&SceneConfig { seed: 1, ..cfg.clone() }, 6).unwrap();
        assert_ne!(a, other);
        // a scene depends only on (seed, index)
        let tail = generate_range(&cfg, 3, 3).unwrap();
        assert_eq!(tail.scenes[..], a.scenes[3..]);
    }

    #[test]
    fn saved_dataset_is_byte_identical() {
        let cfg = SceneConfig::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, 4).unwrap().save(d1.path()).unwrap();
        generate_dataset(&cfg, 4).unwrap().save(d2.path()).unwrap();
        for f in ["annotations.jsonl", "detections.jsonl", "images/2.pgm"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        let back = Dataset::load(d1.path()).unwrap();
        assert_eq!(back, generate_dataset(&cfg, 4).unwrap());
    }

    #[test]
    fn two_person_overlap_in_range() {
        let cfg = two_person();
        let d = generate_dataset(&cfg, 40).unwrap();
        for s in &d.scenes {
            assert_eq!(s.persons.len(), 2);
            let iou = s.persons[0].bbox.iou(&s.persons[1].bbox);
            assert!((0.3..=0.6).contains(&iou), "image {}: {iou}", s.image_id);
        }
    }

    #[test]
    fn default_mix_is_crowded() {
        let d = generate_dataset(&SceneConfig::default(), 200).unwrap();
        let crowded = d
            .scenes
            .iter()
            .filter(|s| {
                s.persons.len() >= 2 && s.persons[0].bbox.iou(&s.persons[1].bbox) >= 0.3
            })
            .count();
        assert!(crowded >= 100, "{crowded}");
        for s in &d.scenes {
            for (i, a) in s.persons.iter().enumerate() {
                for b in &s.persons[i + 1..] {
                    let iou = a.bbox.iou(&b.bbox);
                    assert!(iou == 0.0 || (0.3..=0.6).contains(&iou));
                }
            }
        }
    }

    #[test]
    fn no_occlusion_means_all_visible() {
        let cfg = SceneConfig {
            occlusion_prob: 0.0,
            ..SceneConfig::default()
        };
        let d = generate_dataset(&cfg, 10).unwrap();
        assert!(d
            .scenes
            .iter()
            .flat_map(|s| &s.persons)
            .flat_map(|p| &p.pose.keypoints)
            .all(|k| k.vis == Visibility::Visible));
    }

    #[test]
    fn boxes_are_tight_and_flagged() {
        let d = generate_dataset(&SceneConfig::default(), 30).unwrap();
        for p in d.scenes.iter().flat_map(|s| &s.persons) {
            assert_eq!(Some(p.bbox), tight_box(&p.pose));
            assert_eq!(p.small, p.bbox.w < 32.0 || p.bbox.h < 32.0);
        }
    }

    #[test]
    fn unsatisfiable_overlap_errors() {
        let cfg = SceneConfig {
            persons_weights: vec![0.0, 1.0],
            overlap_iou: [0.97, 0.99],
            max_retries: 20,
            ..SceneConfig::default()
        };
        match generate_dataset(&cfg, 3) {
            Err(Error::Generation { index, .. }) => assert!(index < 3),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn detections_cover_or_merge() {
        let cfg = SceneConfig {
            detection: DetectionSim {
                merge_prob: 1.0,
                ..DetectionSim::default()
            },
            ..two_person()
        };
        let d = generate_dataset(&cfg, 5).unwrap();
        for s in &d.scenes {
            assert_eq!(s.detections.len(), 1);
            for p in &s.persons {
                assert!(s.detections[0].intersection(&p.bbox) > 0.8 * p.bbox.area());
            }
        }
        let d = generate_dataset(&SceneConfig { detection: DetectionSim { merge_prob: 0.0, ..DetectionSim::default() }, ..two_person() }, 5).unwrap();
        assert!(d.scenes.iter().all(|s| s.detections.len() == 2));
    }

    fn five_joint_pose() -> Pose {
        Pose::new(
            (0..5)
                .map(|i| Keypoint::new(10.0 * i as f64, 3.0 * i as f64, Visibility::Visible))
                .collect(),
        )
    }

    #[test]
    fn cue_without_jitter_hits_joint() {
        let pose = five_joint_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = sample_training_cue(&pose, 0.0, 2.0, &mut rng).unwrap();
            assert!(pose.keypoints.iter().any(|k| k.pos == c.point()));
        }
    }

    #[test]
    fn cue_selection_is_uniform_and_truncated() {
        let pose = five_joint_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let c = sample_training_cue(&pose, 2.0, 2.0, &mut rng).unwrap();
            let (i, k) = pose
                .keypoints
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.pos.dist2(c.point()).total_cmp(&b.1.pos.dist2(c.point())))
                .unwrap();
            assert!((c.x - k.pos.x).abs() <= 4.0 && (c.y - k.pos.y).abs() <= 4.0);
            counts[i] += 1;
        }
        for n in counts {
            let f = n as f64 / 10_000.0;
            assert!((f - 0.2).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn cue_needs_labeled_joint() {
        let pose = Pose::new(vec![Keypoint::new(1.0, 1.0, Visibility::Absent)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_training_cue(&pose, 1.0, 2.0, &mut rng),
            Err(Error::Data(_))
        ));
        // occluded joints are labeled and may be cued
        let pose = Pose::new(vec![Keypoint::new(1.0, 1.0, Visibility::Occluded)]);
        assert!(sample_training_cue(&pose, 0.0, 2.0, &mut rng).is_ok());
    }

    #[test]
    fn single_person_sample_targets_that_person() {
        let cfg = SceneConfig {
            persons_weights: vec![1.0],
            occlusion_prob: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 0).unwrap();
        let model = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = make_training_sample(&scene, 0, &model, &SampleConfig::default().deterministic(), &mut rng)
            .unwrap();
        assert_eq!(s.crop.shape(), &[1, 1, 64, 64]);
        assert_eq!(s.target.channels(), 5);
        assert_eq!(s.mask, vec![true; 5]);
        let peaks = decode_all(&s.target);
        for (p, k) in peaks.iter().zip(&s.target_pose.keypoints) {
            assert!((p.x - k.pos.x).abs() <= 0.5 && (p.y - k.pos.y).abs() <= 0.5);
            assert!(p.score > 0.5);
        }
        let cue = s.cue.unwrap();
        assert_eq!(cue.sigma, model.cue_sigma);
    }

    #[test]
    fn two_person_target_excludes_other() {
        let scene = generate_scene(&two_person(), 1).unwrap();
        let model = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for target in 0..2 {
            let s = make_training_sample(&scene, target, &model, &SampleConfig::default().deterministic(), &mut rng)
                .unwrap();
            let expected_joints: Vec<Option<Point>> = s
                .target_pose
                .keypoints
                .iter()
                .map(|k| k.vis.is_labeled().then_some(k.pos))
                .collect();
            let only_target = render_targets(&expected_joints, 2.0, 16, 16).unwrap();
            assert_eq!(s.target, only_target);
        }
    }

    #[test]
    fn augmented_samples_are_seeded() {
        let scene = generate_scene(&two_person(), 2).unwrap();
        let model = ModelConfig::default();
        let cfg = SampleConfig::default();
        let a = make_training_sample(&scene, 0, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_training_sample(&scene, 0, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.crop, b.crop);
        assert_eq!(a.cue, b.cue);
    }
}
