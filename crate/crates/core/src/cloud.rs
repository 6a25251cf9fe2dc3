//! Point clouds with optional intensity and semantic labels.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Label value of points excluded from every loss and metric.
pub const IGNORE_LABEL: u16 = 0;

/// A frame of `N >= 1` points. Labels are class ids `1..=C`, or
/// [`IGNORE_LABEL`].
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f32; 3]>,
    intensity: Option<Vec<f32>>,
    labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(
        coords: Vec<[f32; 3]>,
        intensity: Option<Vec<f32>>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::contract("a point cloud needs at least one point"));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("coordinates of point {i}")));
        }
        let n = coords.len();
        if intensity.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::contract(format!(
                "{n} points but a different number of intensities"
            )));
        }
        if labels.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::contract(format!(
                "{n} points but a different number of labels"
            )));
        }
        Ok(PointCloud {
            coords,
            intensity,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<u16>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::contract(format!(
                "{} points but {} labels",
                self.len(),
                labels.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Checks that every label is `IGNORE_LABEL` or in `1..=num_classes`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some((i, &l)) = labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l as usize > num_classes)
            {
                return Err(Error::contract(format!(
                    "point {i} has label {l}, outside 1..={num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Rotates about the vertical axis through the xy-centroid, then scales
    /// about the same point.
    pub fn transformed(&self, yaw: f32, scale: f32) -> PointCloud {
        let n = self.coords.len() as f64;
        let cx = self.coords.iter().map(|c| c[0] as f64).sum::<f64>() / n;
        let cy = self.coords.iter().map(|c| c[1] as f64).sum::<f64>() / n;
        let (s, c) = (libm::sin(yaw as f64), libm::cos(yaw as f64));
        let scale = scale as f64;
        let coords = self
            .coords
            .iter()
            .map(|p| {
                let (x, y) = (p[0] as f64 - cx, p[1] as f64 - cy);
                [
                    ((c * x - s * y) * scale + cx) as f32,
                    ((s * x + c * y) * scale + cy) as f32,
                    (p[2] as f64 * scale) as f32,
                ]
            })
            .collect();
        PointCloud {
            coords,
            intensity: self.intensity.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Random yaw rotation and global scaling, drawn from the supplied stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub random_yaw: bool,
    pub scale_min: f32,
    pub scale_max: f32,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        random_yaw: false,
        scale_min: 1.0,
        scale_max: 1.0,
    };

    pub fn apply<R: Rng + ?Sized>(&self, pc: &PointCloud, rng: &mut R) -> PointCloud {
        let yaw = if self.random_yaw {
            rng.random_range(0.0..core::f32::consts::TAU)
        } else {
            0.0
        };
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..self.scale_max)
        } else {
            self.scale_min
        };
        pc.transformed(yaw, scale)
    }
}
