//! Detection boxes, crop transforms, and the mapping between image and
//! crop/heatmap coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pose::{Point, Pose};

pub const DEFAULT_MIN_SIDE: f64 = 32.0;
pub const DEFAULT_ASPECT: f64 = 0.75;
pub const DEFAULT_MARGIN: f64 = 1.25;

/// Axis-aligned box in image pixels with a detector confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64, score: f64) -> Self {
        Self { x, y, w, h, score }
    }

    pub fn from_center(c: Point, w: f64, h: f64, score: f64) -> Self {
        Self::new(c.x - w / 2.0, c.y - h / 2.0, w, h, score)
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.x + self.w && p.y >= self.y && p.y <= self.y + self.h
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let h = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Smallest box covering both; keeps the higher score.
    pub fn union(&self, o: &BBox) -> BBox {
        let x0 = self.x.min(o.x);
        let y0 = self.y.min(o.y);
        let x1 = (self.x + self.w).max(o.x + o.w);
        let y1 = (self.y + self.h).max(o.y + o.h);
        BBox::new(x0, y0, x1 - x0, y1 - y0, self.score.max(o.score))
    }

    /// Tight box around a set of points.
    pub fn enclosing(points: impl IntoIterator<Item = Point>) -> Option<BBox> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in it {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Some(BBox::new(x0, y0, x1 - x0, y1 - y0, 1.0))
    }
}

/// Keeps boxes whose sides are both at least `min_side`, in input order.
pub fn filter_boxes(boxes: &[BBox], min_side: f64) -> Vec<BBox> {
    filter_boxes_indexed(boxes, min_side)
        .into_iter()
        .map(|(_, b)| b)
        .collect()
}

/// [`filter_boxes`] paired with each survivor's index in `boxes`.
pub fn filter_boxes_indexed(boxes: &[BBox], min_side: f64) -> Vec<(usize, BBox)> {
    boxes
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, b)| b.w >= min_side && b.h >= min_side)
        .collect()
}

/// Grows the short side about the center until `w/h == aspect`, then
/// scales both sides by `margin`.
pub fn expand_to_aspect(b: &BBox, aspect: f64, margin: f64) -> Result<BBox> {
    if !(aspect > 0.0) || !(margin >= 1.0) {
        return Err(Error::Config(format!(
            "expand_to_aspect needs aspect > 0 and margin >= 1, got {aspect}, {margin}"
        )));
    }
    let (mut w, mut h) = (b.w, b.h);
    if w < aspect * h {
        w = aspect * h;
    } else {
        h = w / aspect;
    }
    Ok(BBox::from_center(b.center(), w * margin, h * margin, b.score))
}

/// 2×3 affine map `[a b c; d e f]` taking `(x, y)` to `(ax+by+c, dx+ey+f)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine([f64; 6]);

impl Affine {
    pub fn new(m: [f64; 6]) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> [f64; 6] {
        self.0
    }

    pub fn apply(&self, p: Point) -> Point {
        let [a, b, c, d, e, f] = self.0;
        Point::new(a * p.x + b * p.y + c, d * p.x + e * p.y + f)
    }

    pub fn inverse(&self) -> Option<Affine> {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Some(Affine([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)]))
    }
}

/// Image→crop mapping and its exact inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub forward: Affine,
    pub inverse: Affine,
}

impl CropTransform {
    /// Maps `b` onto an `out_w × out_h` grid: crop pixel `(u, v)` samples
    /// image point `(b.x + u·b.w/out_w, b.y + v·b.h/out_h)`.
    pub fn for_box(b: &BBox, out_h: usize, out_w: usize) -> Result<Self> {
        if !b.is_valid() {
            return Err(Error::Data(format!("degenerate crop box {b:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("crop output dims must be >= 1".into()));
        }
        let sx = out_w as f64 / b.w;
        let sy = out_h as f64 / b.h;
        let forward = Affine::new([sx, 0.0, -sx * b.x, 0.0, sy, -sy * b.y]);
        let inverse = forward
            .inverse()
            .ok_or_else(|| Error::Data(format!("singular crop transform for {b:?}")))?;
        Ok(Self { forward, inverse })
    }

    pub fn to_crop(&self, p: Point) -> Point {
        self.forward.apply(p)
    }

    pub fn to_image(&self, p: Point) -> Point {
        self.inverse.apply(p)
    }
}

/// Bilinear sample of an `H×W` image at continuous `(x, y)`; pixels outside
/// the image read as 0.
pub fn sample_bilinear(data: &[f32], height: usize, width: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= width as f64 || yi >= height as f64 {
            0.0
        } else {
            data[yi as usize * width + xi as usize] as f64
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bot = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(
            "crop_affine",
            format!("expected a single-channel image, got {:?}", image.shape()),
        )),
    }
}

/// Resamples the box region of a grayscale image to a `1×1×out_h×out_w` crop.
pub fn crop_affine(
    image: &Tensor<f32>,
    b: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<f32>, CropTransform)> {
    let (h, w) = image_dims(image)?;
    let t = CropTransform::for_box(b, out_h, out_w)?;
    let mut out = Vec::with_capacity(out_h * out_w);
    for v in 0..out_h {
        for u in 0..out_w {
            let p = t.to_image(Point::new(u as f64, v as f64));
            out.push(sample_bilinear(image.data(), h, w, p.x, p.y));
        }
    }
    Ok((Tensor::new(&[1, 1, out_h, out_w], out)?, t))
}

/// Heatmap-grid pose → image pose: scale by `stride`, then undo the crop.
pub fn keypoints_to_image(pose_in_heatmap: &Pose, t: &CropTransform, stride: usize) -> Pose {
    let s = stride as f64;
    pose_in_heatmap.map_points(|p| t.to_image(Point::new(p.x * s, p.y * s)))
}

/// Image pose → heatmap-grid pose; inverse of [`keypoints_to_image`].
pub fn keypoints_to_heatmap(pose: &Pose, t: &CropTransform, stride: usize) -> Pose {
    let s = stride as f64;
    pose.map_points(|p| {
        let c = t.to_crop(p);
        Point::new(c.x / s, c.y / s)
    })
}
