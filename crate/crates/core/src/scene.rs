//! Seeded generation of labeled views of the cube.

use crate::bbox::BBox;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::render::{composite, Illumination, Mesh, Pose, Rasterization, Viewport};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sampling ranges for views. Every range is `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub atlas_height: usize,
    pub atlas_width: usize,
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    pub distance: [f64; 2],
    pub ambient: [f64; 2],
    /// Range of the cube center, in pixels, along both image axes.
    pub center: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            atlas_height: 128,
            atlas_width: 192,
            azimuth: [0.0, 360.0],
            elevation: [0.0, 50.0],
            distance: [0.85, 1.15],
            ambient: [0.5, 1.0],
            center: [40.0, 88.0],
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(invalid(format!(
            "{name} range [{}, {}] must be ordered and within [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(invalid("image_size must be at least 16"));
        }
        Mesh::unit_cube(self.atlas_height, self.atlas_width)?;
        check_range("azimuth", self.azimuth, 0.0, 360.0)?;
        check_range("elevation", self.elevation, 0.0, 50.0)?;
        check_range("distance", self.distance, 1e-3, f64::INFINITY)?;
        check_range("ambient", self.ambient, 0.3, 1.0)?;
        check_range("center", self.center, 0.0, self.image_size as f64)?;
        Ok(())
    }

    pub fn mesh(&self) -> Result<Mesh> {
        Mesh::unit_cube(self.atlas_height, self.atlas_width)
    }
}

/// One labeled view.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub index: usize,
    pub pose: Pose,
    pub illumination: Illumination,
    pub viewport: Viewport,
    /// `(H, W, 3)` in `[0, 1]`.
    pub background: Tensor,
    /// Soft object coverage `(H, W)`.
    pub target_mask: Tensor,
    /// Renderer depth `(H, W)`.
    pub depth: Tensor,
    /// Bounding box of `target_mask > 0.5`, normalized.
    pub gt_box: BBox,
}

impl SceneSample {
    pub fn rasterization(&self, mesh: &Mesh) -> Result<Rasterization> {
        Rasterization::new(mesh, &self.pose, &self.illumination, &self.viewport)
    }

    /// The composited image of `texture` in this view; `raster` must belong to this view.
    pub fn render(&self, raster: &Rasterization, texture: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.constant(texture.clone());
        let obj = raster.shade(&mut g, t)?;
        let img = composite(&mut g, obj, &self.background, &self.target_mask)?;
        g.output("image", img);
        Ok(g.forward_defaults()?
            .remove("image")
            .expect("declared output"))
    }
}

/// Deterministic view source: view `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    config: SceneConfig,
    mesh: Mesh,
    seed: u64,
}

impl SceneGenerator {
    pub fn new(config: SceneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mesh = config.mesh()?;
        Ok(Self { config, mesh, seed })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Random stream private to view `index`; `salt` separates independent uses.
    pub fn rng(&self, index: usize, salt: u64) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index as u64);
        rng
    }

    pub fn sample(&self, index: usize) -> Result<SceneSample> {
        Ok(self.sample_with_raster(index)?.0)
    }

    /// The view together with its rasterization, which callers often need next.
    pub fn sample_with_raster(&self, index: usize) -> Result<(SceneSample, Rasterization)> {
        let c = &self.config;
        let mut rng = self.rng(index, 0);
        let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        let pose = Pose {
            azimuth: uniform(&mut rng, c.azimuth) % 360.0,
            elevation: uniform(&mut rng, c.elevation),
            distance: uniform(&mut rng, c.distance),
        };
        let light_az = rng.random_range(0.0..std::f64::consts::TAU);
        let light_el = rng.random_range(0.35..1.2f64);
        let illumination = Illumination {
            ambient: uniform(&mut rng, c.ambient),
            light_dir: [
                light_el.cos() * light_az.sin(),
                light_el.sin(),
                light_el.cos() * light_az.cos(),
            ],
        };
        let mut viewport = Viewport::centered(c.image_size);
        viewport.center = [uniform(&mut rng, c.center), uniform(&mut rng, c.center)];
        let background = random_background(&mut rng, c.image_size);

        let raster = Rasterization::new(&self.mesh, &pose, &illumination, &viewport)?;
        let target_mask = raster.screen_mask().clone();
        let gt_box = mask_box(&target_mask)
            .ok_or_else(|| Error::NoViews(format!("view {index} does not show the object")))?;
        let sample = SceneSample {
            index,
            pose,
            illumination,
            viewport,
            background,
            target_mask,
            depth: raster.depth().clone(),
            gt_box,
        };
        Ok((sample, raster))
    }

    pub fn samples(&self, range: std::ops::Range<usize>) -> Result<Vec<SceneSample>> {
        range.map(|i| self.sample(i)).collect()
    }

    pub fn view(&self, index: usize) -> Result<View> {
        let (sample, raster) = self.sample_with_raster(index)?;
        Ok(View { sample, raster })
    }

    pub fn views(&self, indices: impl IntoIterator<Item = usize>) -> Result<Vec<View>> {
        indices.into_iter().map(|i| self.view(i)).collect()
    }
}

/// A view with its rasterization, ready for texture-dependent rendering.
#[derive(Clone, Debug)]
pub struct View {
    pub sample: SceneSample,
    pub raster: Rasterization,
}

impl View {
    pub fn render(&self, texture: &Tensor) -> Result<Tensor> {
        self.sample.render(&self.raster, texture)
    }
}

/// Normalized bounding box of pixels with `mask > 0.5`.
pub fn mask_box(mask: &Tensor) -> Option<BBox> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..h {
        for j in 0..w {
            if mask.data()[i * w + j] > 0.5 {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    (r0 != usize::MAX).then(|| BBox {
        x1: c0 as f64 / w as f64,
        y1: r0 as f64 / h as f64,
        x2: (c1 + 1) as f64 / w as f64,
        y2: (r1 + 1) as f64 / h as f64,
    })
}

/// Bilinear upsampling of a random `grid x grid` lattice to `(h, w, channels)`.
fn smooth_field(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    channels: usize,
    grid: usize,
    lo: f64,
    hi: f64,
) -> Vec<f64> {
    let lattice: Vec<f64> = (0..grid * grid * channels)
        .map(|_| rng.random_range(lo..hi))
        .collect();
    let mut out = vec![0.0; h * w * channels];
    let span = (grid - 1) as f64;
    for i in 0..h {
        let y = i as f64 / (h - 1).max(1) as f64 * span;
        let y0 = (y.floor() as usize).min(grid - 2);
        let fy = y - y0 as f64;
        for j in 0..w {
            let x = j as f64 / (w - 1).max(1) as f64 * span;
            let x0 = (x.floor() as usize).min(grid - 2);
            let fx = x - x0 as f64;
            for c in 0..channels {
                let at = |r: usize, s: usize| lattice[(r * grid + s) * channels + c];
                out[(i * w + j) * channels + c] = (1.0 - fy)
                    * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            }
        }
    }
    out
}

/// Smooth low-frequency scenery.
pub fn random_background(rng: &mut impl Rng, size: usize) -> Tensor {
    let coarse = smooth_field(rng, size, size, 3, 4, 0.15, 0.85);
    let fine = smooth_field(rng, size, size, 3, 9, -0.1, 0.1);
    let data = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a + b + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts(vec![size, size, 3], data)
}

/// Uniform noise in `[0.25, 0.75]`.
pub fn noise_texture(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.25..0.75)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// A texture of the target class the surrogates learn to find. This is the
/// same noise family the attack starts from.
pub fn training_texture(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor {
    noise_texture(rng, shape)
}

/// A texture outside the target class: a flat color or a smooth field with
/// background-level noise.
pub fn distractor_texture(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor {
    let [h, w, c] = shape;
    if rng.random_bool(0.5) {
        let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.15..0.85)).collect();
        let data = (0..h * w).flat_map(|_| color.iter().copied()).collect();
        return Tensor::from_parts(shape.to_vec(), data);
    }
    let base = smooth_field(rng, h, w, c, 6, 0.1, 0.9);
    let data = base
        .into_iter()
        .map(|v| (v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_are_deterministic_and_valid() {
        let g = SceneGenerator::new(SceneConfig::default(), 7).unwrap();
        let a = g.sample(3).unwrap();
        let b = g.sample(3).unwrap();
        assert_eq!(a.background, b.background);
        assert_eq!(a.pose, b.pose);
        assert_ne!(g.sample(4).unwrap().pose, a.pose);
        a.pose.validate().unwrap();
        a.illumination.validate().unwrap();
        assert!(a.background.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (w, h) = (a.gt_box.x2 - a.gt_box.x1, a.gt_box.y2 - a.gt_box.y1);
        assert!(w > 0.15 && w < 0.6 && h > 0.15 && h < 0.6, "{:?}", a.gt_box);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let cfg = SceneConfig {
            elevation: [0.0, 60.0],
            ..SceneConfig::default()
        };
        assert!(SceneGenerator::new(cfg, 0).is_err());
    }

    #[test]
    fn mask_box_of_a_block() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.set(&[1, 2], 1.0);
        m.set(&[2, 1], 0.9);
        let b = mask_box(&m).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.25, 0.25, 0.75, 0.75));
        assert!(mask_box(&Tensor::zeros(&[2, 2])).is_none());
    }
}
