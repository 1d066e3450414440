//! Point sets predicted per block: normalized center, radius and the
//! probability of belonging to a neuron.

use serde::{Deserialize, Serialize};

/// One `(a, b, c, r, cls)` tuple. Coordinates and radius are normalized by
/// the block size; `cls` is the neuron probability (its complement is the
/// no-object class).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredPoint {
    pub center: [f64; 3],
    pub radius: f64,
    pub cls: f64,
}

impl PredPoint {
    pub fn new(center: [f64; 3], radius: f64, cls: f64) -> Self {
        PredPoint { center, radius, cls }
    }

    /// Geometry fields `(a, b, c, r)`.
    pub fn geometry(&self) -> [f64; 4] {
        [self.center[0], self.center[1], self.center[2], self.radius]
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.center[0], self.center[1], self.center[2], self.radius, self.cls]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        PredPoint::new([v[0], v[1], v[2]], v[3], v[4])
    }

    pub fn in_unit_range(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetRole {
    Prediction,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub role: SetRole,
    pub points: Vec<PredPoint>,
}

impl PointSet {
    pub fn prediction(points: Vec<PredPoint>) -> Self {
        PointSet {
            role: SetRole::Prediction,
            points,
        }
    }

    pub fn ground_truth(points: Vec<PredPoint>) -> Self {
        PointSet {
            role: SetRole::GroundTruth,
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PredPoint> {
        self.points.iter()
    }
}
