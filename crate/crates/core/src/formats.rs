//! On-disk records: ground-truth annotations, detections, and results as
//! JSON lines, plus binary PGM images.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::Tensor;
use crate::pose::{Keypoint, Pose, Visibility};

/// Box without a score, as stored with ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<BBox> for BoxRecord {
    fn from(b: BBox) -> Self {
        Self {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

impl BoxRecord {
    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonRecord {
    /// Flattened `x, y, v` triples.
    pub keypoints: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoxRecord,
    /// Set when a box side is below the detection filter's minimum.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub small: bool,
}

impl PersonRecord {
    pub fn from_pose(pose: &Pose, bbox: BBox, small: bool) -> Self {
        Self {
            keypoints: pose
                .keypoints
                .iter()
                .flat_map(|k| [k.pos.x, k.pos.y, k.vis.code() as f64])
                .collect(),
            bbox: bbox.into(),
            small,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        if self.keypoints.len() % 3 != 0 {
            return Err(Error::Data(format!(
                "keypoint array length {} is not a multiple of 3",
                self.keypoints.len()
            )));
        }
        self.keypoints
            .chunks_exact(3)
            .map(|c| {
                let vis = Visibility::from_code(c[2])
                    .ok_or_else(|| Error::Data(format!("invalid visibility code {}", c[2])))?;
                Ok(Keypoint::new(c[0], c[1], vis))
            })
            .collect::<Result<Vec<_>>>()
            .map(Pose::new)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub image_id: u64,
    pub persons: Vec<PersonRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseResult {
    /// Flattened `x, y, score` triples in image pixels.
    pub keypoints: Vec<f64>,
    pub score: f64,
    pub box_id: usize,
    /// 1-based hop the heatmaps came from.
    pub hop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub image_id: u64,
    pub poses: Vec<PoseResult>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Quantizes `[0, 1]` values to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `H×W` image in `[0, 1]` as 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [h, w] = image.shape() else {
        return Err(Error::shape("write_pgm", format!("{:?}", image.shape())));
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    // header: magic, width, height, maxval separated by whitespace; comments skipped
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let payload = bytes.get(i..i + w * h).ok_or_else(|| bad("truncated PGM payload"))?;
    Tensor::new(&[h, w], payload.iter().map(|&b| b as f32 / 255.0).collect())
}
