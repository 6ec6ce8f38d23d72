//! PNG overlays: the scene with ground-truth and predicted skeletons, and
//! optionally one panel per (box, cue) showing the crop, the cue, the
//! predicted heatmaps and the decoded skeleton.

use std::path::Path;

use hintpose::geometry::{crop_affine, expand_to_aspect};
use hintpose::heatmap::{decode_all, merge_channels_max};
use hintpose::pipeline::generate_image_cues;
use hintpose::{filter_boxes, Error, InstanceCue, Model, PipelineConfig, Point, Result};
use image::{Rgb, RgbImage};

pub const GT: Rgb<u8> = Rgb([60, 220, 90]);
pub const PRED: Rgb<u8> = Rgb([235, 60, 60]);
pub const CUE: Rgb<u8> = Rgb([70, 140, 255]);

pub struct Canvas {
    img: RgbImage,
    scale: f64,
}

impl Canvas {
    pub fn new(width: u32, height: u32, scale: f64) -> Self {
        Self {
            img: RgbImage::new(width, height),
            scale,
        }
    }

    /// Nearest-neighbor upscale of a grayscale plane at `(ox, oy)`.
    pub fn gray(&mut self, data: &[f32], h: usize, w: usize, ox: u32, oy: u32, tint: Option<&[f32]>) {
        let s = self.scale;
        let (pw, ph) = ((w as f64 * s) as u32, (h as f64 * s) as u32);
        for y in 0..ph {
            for x in 0..pw {
                let (sx, sy) = ((x as f64 / s) as usize, (y as f64 / s) as usize);
                let i = sy.min(h - 1) * w + sx.min(w - 1);
                let g = (data[i].clamp(0.0, 1.0) * 255.0) as u8;
                let px = match tint {
                    Some(t) => {
                        let a = t[i].clamp(0.0, 1.0);
                        let mix = |c: u8, target: f32| (c as f32 * (1.0 - a) + target * a) as u8;
                        Rgb([mix(g, 255.0), mix(g, 200.0), mix(g, 0.0)])
                    }
                    None => Rgb([g, g, g]),
                };
                if ox + x < self.img.width() && oy + y < self.img.height() {
                    self.img.put_pixel(ox + x, oy + y, px);
                }
            }
        }
    }

    fn plot(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Line between points given in source pixels, offset by `(ox, oy)`.
    pub fn line(&mut self, a: Point, b: Point, ox: u32, oy: u32, c: Rgb<u8>) {
        let s = self.scale;
        let (x0, y0) = (a.x * s + ox as f64, a.y * s + oy as f64);
        let (x1, y1) = (b.x * s + ox as f64, b.y * s + oy as f64);
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.plot((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
        }
    }

    pub fn dot(&mut self, p: Point, ox: u32, oy: u32, r: i64, c: Rgb<u8>) {
        let (cx, cy) = (
            (p.x * self.scale + ox as f64).round() as i64,
            (p.y * self.scale + oy as f64).round() as i64,
        );
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.plot(cx + dx, cy + dy, c);
                }
            }
        }
    }

    pub fn skeleton(&mut self, points: &[Point], limbs: &[[usize; 2]], ox: u32, oy: u32, c: Rgb<u8>) {
        for &[a, b] in limbs {
            if let (Some(&pa), Some(&pb)) = (points.get(a), points.get(b)) {
                self.line(pa, pb, ox, oy, c);
            }
        }
        for &p in points {
            self.dot(p, ox, oy, 2, c);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

pub struct Panel {
    pub crop: Vec<f32>,
    pub heat: Vec<f32>,
    pub cue: Point,
    pub skeleton: Vec<Point>,
}

/// One panel per box and cue: crop, merged hop-T heatmap upsampled to the
/// crop, cue position and decoded joints, all in crop pixels.
pub fn cue_panels(image: &hintpose::nn::Tensor<f32>, boxes: &[hintpose::BBox], models: &[Model], cfg: &PipelineConfig) -> Result<Vec<Panel>> {
    let kept = filter_boxes(boxes, cfg.min_box_side);
    let cues = generate_image_cues(image, &kept, models, cfg)?;
    let mc = models[0].config().clone();
    let s = mc.stride as f64;
    let mut panels = Vec::new();
    for (b, box_cues) in kept.iter().zip(&cues) {
        let expanded = expand_to_aspect(b, cfg.aspect, cfg.margin)?;
        let (crop, t) = crop_affine(image, &expanded, mc.input_h, mc.input_w)?;
        for c in box_cues {
            let q = t.to_crop(c.point());
            let cue = InstanceCue::new(q.x, q.y, mc.cue_sigma)?;
            let mut sum: Option<Vec<f32>> = None;
            for m in models {
                let out = m.forward_batch(&crop, &[Some(cue)], m.config().hops)?;
                let data = out.last().data();
                match &mut sum {
                    Some(acc) => acc.iter_mut().zip(data).for_each(|(a, &v)| *a += v),
                    None => sum = Some(data.to_vec()),
                }
            }
            let mean: Vec<f32> = sum.unwrap_or_default().iter().map(|v| v / models.len() as f32).collect();
            let heat = hintpose::Heatmap::new(mc.joints, mc.heatmap_h(), mc.heatmap_w(), mean)?;
            let merged = merge_channels_max(&heat);
            let up: Vec<f32> = (0..mc.input_h * mc.input_w)
                .map(|i| {
                    let (x, y) = ((i % mc.input_w) as f64 / s, (i / mc.input_w) as f64 / s);
                    hintpose::geometry::sample_bilinear(merged.data(), merged.height(), merged.width(), x, y)
                })
                .collect();
            let skeleton = decode_all(&heat)
                .iter()
                .map(|p| Point::new(p.x * s, p.y * s))
                .collect();
            panels.push(Panel {
                crop: crop.data().to_vec(),
                heat: up,
                cue: q,
                skeleton,
            });
        }
    }
    Ok(panels)
}
