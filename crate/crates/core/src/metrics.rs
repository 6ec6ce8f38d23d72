//! Keypoint similarity and COCO-style average precision / recall.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{GroundTruthRecord, PoseResult, ResultRecord};
use crate::geometry::{expand_to_aspect, BBox, DEFAULT_ASPECT, DEFAULT_MARGIN};
use crate::pose::{Point, Pose};

/// Falloff constant used for every joint of the synthetic skeleton.
pub const DEFAULT_KAPPA: f64 = 0.08;
/// Ratio of person area to its expanded box area.
pub const AREA_FACTOR: f64 = 0.53;

/// Scale area of a person: the aspect-expanded box area times [`AREA_FACTOR`].
pub fn person_area(b: &BBox) -> f64 {
    expand_to_aspect(b, DEFAULT_ASPECT, DEFAULT_MARGIN)
        .map(|e| e.area() * AREA_FACTOR)
        .unwrap_or(0.0)
}

/// Object keypoint similarity of `pred` to the labeled joints of `gt`.
pub fn oks(pred: &[Point], gt: &Pose, area: f64, kappas: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || kappas.len() != gt.len() {
        return Err(Error::shape(
            "oks",
            format!("{} predicted, {} ground-truth, {} kappas", pred.len(), gt.len(), kappas.len()),
        ));
    }
    if !(area > 0.0) {
        return Err(Error::Data(format!("oks needs a positive area, got {area}")));
    }
    let (sum, n) = gt
        .labeled()
        .fold((0.0, 0usize), |(s, n), (i, k)| {
            let d2 = pred[i].dist2(k.pos);
            (s + (-d2 / (2.0 * area * kappas[i] * kappas[i])).exp(), n + 1)
        });
    if n == 0 {
        return Err(Error::Data("oks needs at least one labeled ground-truth joint".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// One per joint; empty means [`DEFAULT_KAPPA`] for every joint.
    pub kappas: Vec<f64>,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            kappas: Vec::new(),
            max_dets: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "eval.thresholds must be strictly increasing values in (0, 1]".into(),
            ));
        }
        if self.kappas.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Config("eval.kappas must be positive".into()));
        }
        if self.max_dets == 0 {
            return Err(Error::Config("eval.max_dets must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kappas_for(&self, joints: usize) -> Result<Vec<f64>> {
        if self.kappas.is_empty() {
            Ok(vec![DEFAULT_KAPPA; joints])
        } else if self.kappas.len() == joints {
            Ok(self.kappas.clone())
        } else {
            Err(Error::Config(format!(
                "eval.kappas has {} entries for {joints} joints",
                self.kappas.len()
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub ap: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ar: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub per_threshold: Vec<ThresholdRow>,
    pub images: usize,
    pub ground_truth: usize,
    pub predictions: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "AP {:.4}  AR {:.4}  AP50 {}  AP75 {}  ({} images, {} persons, {} predictions)\n",
            self.ap,
            self.ar,
            self.ap50.map_or("-".into(), |v| format!("{v:.4}")),
            self.ap75.map_or("-".into(), |v| format!("{v:.4}")),
            self.images,
            self.ground_truth,
            self.predictions
        );
        s.push_str("  OKS thr    AP      recall\n");
        for r in &self.per_threshold {
            s.push_str(&format!("  {:.2}     {:.4}  {:.4}\n", r.threshold, r.ap, r.recall));
        }
        s
    }
}

struct GtPerson {
    pose: Pose,
    area: f64,
}

struct Candidate<'a> {
    points: Vec<Point>,
    pose: &'a PoseResult,
}

fn pred_points(p: &PoseResult) -> Result<Vec<Point>> {
    if p.keypoints.len() % 3 != 0 {
        return Err(Error::Data(format!(
            "prediction keypoint array length {} is not a multiple of 3",
            p.keypoints.len()
        )));
    }
    Ok(p.keypoints.chunks_exact(3).map(|c| Point::new(c[0], c[1])).collect())
}

/// Score-descending order with a content tie-break, so the result does not
/// depend on how the file was ordered.
fn rank(a: &PoseResult, b: &PoseResult) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.keypoints
            .iter()
            .zip(&b.keypoints)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Greedy matching of one image at one threshold: predictions in score
/// order take the unmatched ground truth with the highest OKS if it clears
/// `thr`. Returns one flag per prediction.
fn match_image(oks_table: &[Vec<f64>], n_gt: usize, thr: f64) -> Vec<bool> {
    let mut taken = vec![false; n_gt];
    oks_table
        .iter()
        .map(|row| {
            let best = (0..n_gt)
                .filter(|&g| !taken[g] && row[g] >= thr)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
            match best {
                Some(g) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated area under the precision/recall curve.
fn interpolated_ap(hits: &[bool], n_gt: usize) -> (f64, f64) {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    (sum / 101.0, recall.last().copied().unwrap_or(0.0))
}

/// AP/AR of `results` against `gt`. Result images missing from `gt` are an
/// error; ground-truth images without results count as having no
/// predictions.
pub fn evaluate(results: &[ResultRecord], gt: &[GroundTruthRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut gt_map: BTreeMap<u64, Vec<GtPerson>> = BTreeMap::new();
    let mut joints = None;
    for rec in gt {
        let persons = gt_map.entry(rec.image_id).or_default();
        for p in &rec.persons {
            let pose = p.pose()?;
            if *joints.get_or_insert(pose.len()) != pose.len() {
                return Err(Error::Data(format!("image {}: inconsistent joint count", rec.image_id)));
            }
            if pose.labeled_count() == 0 {
                continue;
            }
            let area = person_area(&p.bbox.to_bbox());
            if !(area > 0.0) {
                return Err(Error::Data(format!("image {}: degenerate person box", rec.image_id)));
            }
            persons.push(GtPerson { pose, area });
        }
    }
    let unknown: BTreeSet<u64> = results
        .iter()
        .map(|r| r.image_id)
        .filter(|id| !gt_map.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!("results reference unknown image ids {unknown:?}")));
    }
    let n_gt: usize = gt_map.values().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::Data("ground truth contains no labeled persons".into()));
    }
    let kappas = cfg.kappas_for(joints.unwrap_or(0))?;

    let mut by_image: BTreeMap<u64, Vec<&PoseResult>> = BTreeMap::new();
    for r in results {
        by_image.entry(r.image_id).or_default().extend(r.poses.iter());
    }
    let predictions: usize = by_image.values().map(|v| v.len().min(cfg.max_dets)).sum();

    // per image: ranked predictions and their OKS against every person
    let per_image = by_image
        .into_par_iter()
        .map(|(id, mut poses)| {
            poses.sort_by(|a, b| rank(a, b));
            poses.truncate(cfg.max_dets);
            let persons = &gt_map[&id];
            let cands = poses
                .into_iter()
                .map(|p| Ok(Candidate { points: pred_points(p)?, pose: p }))
                .collect::<Result<Vec<_>>>()?;
            let table = cands
                .iter()
                .map(|c| {
                    persons
                        .iter()
                        .map(|g| oks(&c.points, &g.pose, g.area, &kappas))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id, cands, table))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(cfg.thresholds.len());
    for &thr in &cfg.thresholds {
        let mut scored: Vec<(f64, u64, usize, bool)> = Vec::new();
        for (id, cands, table) in &per_image {
            let hits = match_image(table, gt_map[id].len(), thr);
            scored.extend(
                cands
                    .iter()
                    .zip(hits)
                    .enumerate()
                    .map(|(i, (c, h))| (c.pose.score, *id, i, h)),
            );
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let hits: Vec<bool> = scored.iter().map(|s| s.3).collect();
        let (ap, recall) = interpolated_ap(&hits, n_gt);
        rows.push(ThresholdRow {
            threshold: thr,
            ap,
            recall,
        });
    }
    let mean = |f: fn(&ThresholdRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let at = |t: f64| rows.iter().find(|r| (r.threshold - t).abs() < 1e-9).map(|r| r.ap);
    Ok(EvalReport {
        ap: mean(|r| r.ap),
        ar: mean(|r| r.recall),
        ap50: at(0.5),
        ap75: at(0.75),
        images: gt_map.len(),
        ground_truth: n_gt,
        predictions,
        per_threshold: rows,
    })
}
