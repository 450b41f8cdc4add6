//! Axis-aligned box algebra and the lesion flagging criterion.
//!
//! Boxes are half-open in voxel index space: a box `[x0, x1)` contains the
//! point `x` iff `x0 <= x < x1`. Corners are real-valued so that decoded
//! detections need not be voxel aligned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IoBB threshold of the lesion flagging criterion.
pub const FLAG_IOBB_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Box3> {
        let ok = (0..3).all(|a| min[a].is_finite() && max[a].is_finite() && min[a] < max[a]);
        if ok {
            Ok(Box3 { min, max })
        } else {
            Err(Error::InvalidBox(min.iter().chain(max.iter()).copied().collect()))
        }
    }

    /// From `[x0, y0, z0, x1, y1, z1]`.
    pub fn from_array(a: [f64; 6]) -> Result<Box3> {
        Box3::new([a[0], a[1], a[2]], [a[3], a[4], a[5]])
    }

    pub fn from_center_extent(center: [f64; 3], extent: [f64; 3]) -> Result<Box3> {
        Box3::new(
            [0, 1, 2].map(|a| center[a] - extent[a] / 2.0),
            [0, 1, 2].map(|a| center[a] + extent[a] / 2.0),
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]]
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] < self.max[a])
    }

    /// Overlap box, `None` when the boxes do not overlap with positive volume.
    pub fn intersection(&self, other: &Box3) -> Option<Box3> {
        let min = [0, 1, 2].map(|a| self.min[a].max(other.min[a]));
        let max = [0, 1, 2].map(|a| self.max[a].min(other.max[a]));
        Box3::new(min, max).ok()
    }

    pub fn translate(&self, d: [f64; 3]) -> Box3 {
        Box3 {
            min: [0, 1, 2].map(|a| self.min[a] + d[a]),
            max: [0, 1, 2].map(|a| self.max[a] + d[a]),
        }
    }

    pub fn scale(&self, f: [f64; 3]) -> Box3 {
        Box3 {
            min: [0, 1, 2].map(|a| self.min[a] * f[a]),
            max: [0, 1, 2].map(|a| self.max[a] * f[a]),
        }
    }

    /// Projection onto the axial (x, y) plane.
    pub fn axial(&self) -> Box2 {
        Box2 {
            min: [self.min[0], self.min[1]],
            max: [self.max[0], self.max[1]],
        }
    }

    /// Integer voxel index ranges whose centers lie in the box, clipped to `dims`.
    pub fn voxel_ranges(&self, dims: [usize; 3]) -> [std::ops::Range<usize>; 3] {
        [0, 1, 2].map(|a| {
            // voxel i is inside iff min <= i + 0.5 < max
            let lo = (self.min[a] - 0.5).ceil().max(0.0);
            let hi = (self.max[a] - 0.5).ceil().max(0.0);
            let lo = (lo as usize).min(dims[a]);
            let hi = (hi as usize).min(dims[a]);
            lo..hi.max(lo)
        })
    }
}

impl Serialize for Box3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Box3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 6]>::deserialize(d)?;
        Box3::from_array(a).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Box2 {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Box2> {
        let ok = (0..2).all(|a| min[a].is_finite() && max[a].is_finite() && min[a] < max[a]);
        if ok {
            Ok(Box2 { min, max })
        } else {
            Err(Error::InvalidBox(min.iter().chain(max.iter()).copied().collect()))
        }
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1])]
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        (0..2).all(|a| self.min[a] <= p[a] && p[a] < self.max[a])
    }

    pub fn intersection_area(&self, other: &Box2) -> f64 {
        (0..2)
            .map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0))
            .product()
    }
}

pub fn intersection_volume(a: &Box3, b: &Box3) -> f64 {
    (0..3)
        .map(|i| (a.max[i].min(b.max[i]) - a.min[i].max(b.min[i])).max(0.0))
        .product()
}

/// Intersection over union; symmetric.
pub fn iou3(a: &Box3, b: &Box3) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over the *predicted* box volume. Not symmetric: a small
/// prediction inside a large lesion scores 1.
pub fn iobb3(pred: &Box3, gt: &Box3) -> f64 {
    (intersection_volume(pred, gt) / pred.volume()).clamp(0.0, 1.0)
}

/// Lesion flagging criterion: the predicted center lies inside `gt` and
/// IoBB is at least `tau_iobb`.
pub fn flag_match(pred: &Box3, gt: &Box3, tau_iobb: f64) -> bool {
    gt.contains_point(pred.center()) && iobb3(pred, gt) >= tau_iobb
}

/// 2D variant of [`flag_match`] against the axial projection of a 3D lesion box.
pub fn flag_match_2d(pred: &Box2, gt: &Box3, tau_iobb: f64) -> bool {
    let proj = gt.axial();
    if !proj.contains_point(pred.center()) {
        return false;
    }
    let iobb = (pred.intersection_area(&proj) / pred.area()).clamp(0.0, 1.0);
    iobb >= tau_iobb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LesionKind {
    #[serde(rename = "HCC")]
    Hcc,
    #[serde(rename = "TACE")]
    Tace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectionKind {
    #[serde(rename = "HCC")]
    Hcc,
    #[serde(rename = "TACE")]
    Tace,
    #[serde(rename = "unfiltered")]
    Unfiltered,
}

impl From<LesionKind> for DetectionKind {
    fn from(k: LesionKind) -> Self {
        match k {
            LesionKind::Hcc => DetectionKind::Hcc,
            LesionKind::Tace => DetectionKind::Tace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub score: f64,
    pub kind: DetectionKind,
}

impl Detection {
    pub fn new(bbox: Box3, score: f64, kind: DetectionKind) -> Result<Detection> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::MalformedDetections(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, score, kind })
    }
}
