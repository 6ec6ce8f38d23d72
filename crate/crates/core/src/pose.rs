use serde::{Deserialize, Serialize};

/// Continuous 2-D position in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Point) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2)
    }
}

/// Annotation state of a keypoint, COCO numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Visibility {
    Absent = 0,
    Occluded = 1,
    Visible = 2,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        self != Visibility::Absent
    }

    pub fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 if v == 0.0 => Some(Visibility::Absent),
            1 if v == 1.0 => Some(Visibility::Occluded),
            2 if v == 2.0 => Some(Visibility::Visible),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub pos: Point,
    pub vis: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, vis: Visibility) -> Self {
        Self {
            pos: Point::new(x, y),
            vis,
        }
    }
}

/// Ordered keypoints of one person instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Self { keypoints }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, &Keypoint)> {
        self.keypoints
            .iter()
            .enumerate()
            .filter(|(_, k)| k.vis.is_labeled())
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled().count()
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Pose {
        Pose {
            keypoints: self
                .keypoints
                .iter()
                .map(|k| Keypoint {
                    pos: f(k.pos),
                    vis: k.vis,
                })
                .collect(),
        }
    }
}
