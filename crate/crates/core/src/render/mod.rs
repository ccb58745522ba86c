//! Soft rasterization of a textured unit cube.
//!
//! Projection is orthographic. A pixel blends every face with weight
//! `sigmoid(EDGE_SHARPNESS * d) * sigmoid(FACING_SHARPNESS * n.v)`, where `d` is the
//! signed pixel distance to the projected face (positive inside). Because the
//! geometry does not depend on the texture, the rendered image is linear in the
//! texture: [`Rasterization`] holds the per-face sampling coordinates and blend
//! coefficients, and [`Rasterization::shade`] turns them into graph nodes.

mod mesh;
mod raster;

pub use mesh::{Face, Mesh, UvRect, FACE_NAMES};
pub use raster::{composite, composite_values, rasterize, Rasterization, RenderOutput};

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Edge sharpness in inverse pixels of signed distance.
pub const EDGE_SHARPNESS: f64 = 20.0;
/// Sharpness of the soft front-facing test on `n . view`.
pub const FACING_SHARPNESS: f64 = 50.0;
/// Depth assigned to pure background pixels.
pub const BACKGROUND_DEPTH: f64 = 8.0;
/// Camera offset along the view direction, in multiples of the pose distance.
const CAMERA_OFFSET: f64 = 3.0;

/// Camera placement relative to the cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Degrees in `[0, 360)`.
    pub azimuth: f64,
    /// Degrees in `[0, 50]`.
    pub elevation: f64,
    /// Uniform scale: projected size is inversely proportional to it.
    pub distance: f64,
}

impl Pose {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) || !self.distance.is_finite() {
            return Err(invalid(format!(
                "degenerate projection: distance {} must be positive",
                self.distance
            )));
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(invalid(format!(
                "azimuth {} outside [0, 360)",
                self.azimuth
            )));
        }
        if !(0.0..=50.0).contains(&self.elevation) {
            return Err(invalid(format!(
                "elevation {} outside [0, 50]",
                self.elevation
            )));
        }
        Ok(())
    }

    /// Unit vector from the cube towards the camera.
    pub fn view_dir(&self) -> [f64; 3] {
        let (sa, ca) = sin_cos_deg(self.azimuth);
        let (se, ce) = sin_cos_deg(self.elevation);
        [sa * ce, se, ca * ce]
    }

    /// Screen axes `(right, up)`; together with `view_dir` they form a right-handed frame.
    pub fn screen_axes(&self) -> ([f64; 3], [f64; 3]) {
        let (sa, ca) = sin_cos_deg(self.azimuth);
        let (se, ce) = sin_cos_deg(self.elevation);
        ([ca, 0.0, -sa], [-se * sa, ce, -se * ca])
    }
}

// Exact zeros at multiples of 90 degrees keep edge-on faces exactly edge-on.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let snap = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
    let (s, c) = deg.to_radians().sin_cos();
    (snap(s), snap(c))
}

/// Lambertian-plus-ambient lighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    /// In `[0.3, 1.0]`.
    pub ambient: f64,
    pub light_dir: [f64; 3],
}

impl Illumination {
    pub fn validate(&self) -> Result<()> {
        if !(0.3..=1.0).contains(&self.ambient) {
            return Err(invalid(format!(
                "ambient {} outside [0.3, 1]",
                self.ambient
            )));
        }
        let n = mesh::dot(self.light_dir, self.light_dir).sqrt();
        if !((n - 1.0).abs() <= 1e-9) {
            return Err(invalid(format!("light direction has norm {n}, expected 1")));
        }
        Ok(())
    }

    pub fn shade(&self, normal: [f64; 3]) -> f64 {
        self.ambient + (1.0 - self.ambient) * mesh::dot(normal, self.light_dir).max(0.0)
    }
}

/// Output image geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub height: usize,
    pub width: usize,
    /// Pixel position `(x, y)` of the cube center.
    pub center: [f64; 2],
    /// Pixels per cube unit at distance 1.
    pub scale: f64,
}

impl Viewport {
    /// Cube centered in a square image, edge about a quarter of the frame at distance 1.
    pub fn centered(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            center: [size as f64 / 2.0, size as f64 / 2.0],
            scale: 0.27 * size as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("viewport has a zero dimension"));
        }
        if !(self.scale > 0.0) || !self.center.iter().all(|c| c.is_finite()) {
            return Err(invalid("viewport scale must be positive and center finite"));
        }
        Ok(())
    }
}
