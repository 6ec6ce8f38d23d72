//! Gaussian heatmap encoding, quarter-offset peak decoding, and local-peak
//! extraction for instance cues.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{io, Tensor};
use crate::pose::Point;

/// Rendered values vanish beyond this many sigmas from the center.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

/// `C×H×W` grid of confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "heatmap dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "heatmap",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Accepts `C×H×W` or `1×C×H×W` tensors.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] | [1, c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::shape("heatmap", format!("tensor shape {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone())
            .expect("heatmap dims are valid")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Copy of a single channel as a one-channel map.
    pub fn single(&self, c: usize) -> Heatmap {
        Heatmap {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    /// Writes `<stem>.hpt` and a `<stem>.json` sidecar.
    pub fn save(&self, stem: &Path, meta: &HeatmapMeta) -> Result<()> {
        io::save_tensor(&stem.with_extension("hpt"), &self.to_tensor())?;
        let json = stem.with_extension("json");
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<(Heatmap, HeatmapMeta)> {
        let t = io::load_tensor(&stem.with_extension("hpt"))?;
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: HeatmapMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
        let h = Heatmap::from_tensor(&t)?;
        if meta.channels != h.channels {
            return Err(Error::format(
                &json,
                format!("sidecar says {} channels, tensor has {}", meta.channels, h.channels),
            ));
        }
        Ok((h, meta))
    }
}

/// Sidecar describing how a dumped heatmap maps to image pixels:
/// `image = origin + stride · heatmap`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapMeta {
    pub channels: usize,
    pub stride: f64,
    pub origin: [f64; 2],
}

/// A point marking the target person, rendered as a single Gaussian channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCue {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

impl InstanceCue {
    pub fn new(x: f64, y: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("cue sigma must be positive, got {sigma}")));
        }
        Ok(Self { x, y, sigma })
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn render(&self, height: usize, width: usize) -> Result<Heatmap> {
        render_gaussian(self.point(), self.sigma, height, width)
    }
}

/// `exp(−‖p−c‖²/2σ²)` on the integer grid, exactly 0 beyond 3σ.
pub fn render_gaussian(center: Point, sigma: f64, height: usize, width: usize) -> Result<Heatmap> {
    let mut map = Heatmap::zeros(1, height, width)?;
    splat_gaussian(map.channel_mut(0), width, center, sigma)?;
    Ok(map)
}

/// Renders one Gaussian into `plane`, overwriting only the truncation window.
fn splat_gaussian(plane: &mut [f32], width: usize, center: Point, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let height = plane.len() / width;
    let radius = TRUNCATION_SIGMAS * sigma;
    let r2 = radius * radius;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let y0 = (center.y - radius).ceil().max(0.0);
    let y1 = (center.y + radius).floor().min(height as f64 - 1.0);
    let x0 = (center.x - radius).ceil().max(0.0);
    let x1 = (center.x + radius).floor().min(width as f64 - 1.0);
    if y0 > y1 || x0 > x1 {
        return Ok(());
    }
    for y in y0 as usize..=y1 as usize {
        let dy = y as f64 - center.y;
        for x in x0 as usize..=x1 as usize {
            let dx = x as f64 - center.x;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                plane[y * width + x] = (-d2 * inv).exp() as f32;
            }
        }
    }
    Ok(())
}

/// K-channel target: one Gaussian per present joint, all-zero channels for
/// joints passed as `None`.
pub fn render_targets(
    joints: &[Option<Point>],
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    let mut map = Heatmap::zeros(joints.len(), height, width)?;
    for (c, joint) in joints.iter().enumerate() {
        if let Some(p) = joint {
            splat_gaussian(map.channel_mut(c), width, *p, sigma)?;
        }
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Quarter-pixel shift toward the larger neighbor along one axis.
fn quarter_shift(prev: Option<f32>, next: Option<f32>) -> f64 {
    match (prev, next) {
        (Some(p), Some(n)) if n > p => 0.25,
        (Some(p), Some(n)) if p > n => -0.25,
        _ => 0.0,
    }
}

fn refine(plane: &[f32], width: usize, height: usize, x: usize, y: usize) -> (f64, f64) {
    let at = |xx: usize, yy: usize| plane[yy * width + xx];
    let dx = if x > 0 && x + 1 < width {
        quarter_shift(Some(at(x - 1, y)), Some(at(x + 1, y)))
    } else {
        0.0
    };
    let dy = if y > 0 && y + 1 < height {
        quarter_shift(Some(at(x, y - 1)), Some(at(x, y + 1)))
    } else {
        0.0
    };
    (x as f64 + dx, y as f64 + dy)
}

/// Argmax of one channel with the quarter-offset refinement. Ties resolve
/// to the first maximum in row-major order.
pub fn decode_peak(map: &Heatmap, channel: usize) -> Peak {
    let plane = map.channel(channel);
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    let (x, y) = refine(plane, map.width, map.height, best % map.width, best / map.width);
    Peak {
        x,
        y,
        score: plane[best] as f64,
    }
}

/// Decodes every channel.
pub fn decode_all(map: &Heatmap) -> Vec<Peak> {
    (0..map.channels).map(|c| decode_peak(map, c)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakParams {
    /// Side of the square neighborhood; odd and at least 3.
    pub window: usize,
    pub min_score: f64,
    pub max_cues: usize,
}

impl Default for PeakParams {
    fn default() -> Self {
        Self {
            window: 5,
            min_score: 0.3,
            max_cues: 4,
        }
    }
}

impl PeakParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "peak window must be odd and >= 3, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Strict local maxima of channel 0 inside `region` (map coordinates,
/// inclusive pixel range), strongest first, as cues of spread `cue_sigma`.
pub fn local_peaks(
    map: &Heatmap,
    region: &BBox,
    params: &PeakParams,
    cue_sigma: f64,
) -> Result<Vec<InstanceCue>> {
    params.validate()?;
    let (w, h) = (map.width as isize, map.height as isize);
    let x0 = (region.x.ceil() as isize).max(0);
    let y0 = (region.y.ceil() as isize).max(0);
    let x1 = ((region.x + region.w).floor() as isize).min(w - 1);
    let y1 = ((region.y + region.h).floor() as isize).min(h - 1);
    if x0 > x1 || y0 > y1 {
        return Ok(Vec::new());
    }
    let plane = map.channel(0);
    let half = (params.window / 2) as isize;
    let mut found: Vec<(f32, usize, usize)> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = plane[(y * w + x) as usize];
            if (v as f64) < params.min_score {
                continue;
            }
            let strict = (-half..=half).all(|dy| {
                (-half..=half).all(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    (dx == 0 && dy == 0)
                        || nx < 0
                        || ny < 0
                        || nx >= w
                        || ny >= h
                        || plane[(ny * w + nx) as usize] < v
                })
            });
            if strict {
                found.push((v, x as usize, y as usize));
            }
        }
    }
    // stable sort keeps scan order among equal scores
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    found.truncate(params.max_cues);
    found
        .into_iter()
        .map(|(_, x, y)| {
            let (px, py) = refine(plane, map.width, map.height, x, y);
            InstanceCue::new(px, py, cue_sigma)
        })
        .collect()
}

/// Per-pixel maximum over channels.
pub fn merge_channels_max(map: &Heatmap) -> Heatmap {
    let n = map.height * map.width;
    let mut out = map.channel(0).to_vec();
    for c in 1..map.channels {
        for (o, &v) in out.iter_mut().zip(&map.data[c * n..(c + 1) * n]) {
            if v > *o {
                *o = v;
            }
        }
    }
    Heatmap {
        channels: 1,
        height: map.height,
        width: map.width,
        data: out,
    }
}
