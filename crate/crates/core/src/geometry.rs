//! Microphone array geometry and the far-field direction convention.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Point = [f64; 3];

pub fn distance(a: &Point, b: &Point) -> f64 {
    sub(a, b).iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Microphone positions in meters, relative to the array center. The array
/// axis is `x`; directions are azimuths in the `x`-`y` plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<Point>,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<Point>) -> Result<Self> {
        ensure!(!mic_positions.is_empty(), Validation, "array needs at least one microphone");
        ensure!(
            mic_positions.iter().flatten().all(|v| v.is_finite()),
            Validation,
            "microphone positions must be finite"
        );
        Ok(Self { mic_positions })
    }

    /// Four-microphone linear array with offsets of 0, 40, 80 and 113 mm from
    /// the first microphone, centered on the centroid.
    pub fn kinect_like() -> Self {
        Self::linear(&[0.0, 0.040, 0.080, 0.113])
    }

    /// Linear array along `x` from offsets (meters), centered on their mean.
    pub fn linear(offsets: &[f64]) -> Self {
        let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
        Self {
            mic_positions: offsets.iter().map(|&x| [x - mean, 0.0, 0.0]).collect(),
        }
    }

    pub fn mic_count(&self) -> usize {
        self.mic_positions.len()
    }

    /// Absolute microphone positions for an array centered at `center`.
    pub fn placed_at(&self, center: &Point) -> Vec<Point> {
        self.mic_positions.iter().map(|p| add(p, center)).collect()
    }

    /// Whether every microphone lies on the `x` axis.
    pub fn is_linear_x(&self) -> bool {
        self.mic_positions
            .iter()
            .all(|p| p[1].abs() < 1e-12 && p[2].abs() < 1e-12)
    }
}

/// Unit vector at azimuth `doa_deg` in the array plane.
pub fn direction(doa_deg: f64) -> Point {
    let th = doa_deg.to_radians();
    [th.cos(), th.sin(), 0.0]
}

/// Direction of arrival in degrees of a source at `source` seen from an
/// array centered at `center` with its axis along `x`: the angle between the
/// array axis and the source direction, in `[0, 180]`. For a linear array it
/// fully determines the far-field inter-microphone delays.
pub fn doa_of(source: &Point, center: &Point) -> f64 {
    let d = sub(source, center);
    let norm = dot(&d, &d).sqrt();
    (d[0] / norm).clamp(-1.0, 1.0).acos().to_degrees()
}
