use super::mesh::{dot, Face, Mesh};
use super::{
    Illumination, Pose, Viewport, BACKGROUND_DEPTH, CAMERA_OFFSET, EDGE_SHARPNESS, FACING_SHARPNESS,
};
use crate::error::{invalid, Result};
use crate::graph::{kernels::sigmoid, Graph, NodeId};
use crate::tensor::Tensor;

/// Texture-independent result of rasterizing one view.
#[derive(Clone, Debug)]
pub struct Rasterization {
    height: usize,
    width: usize,
    layers: Vec<FaceLayer>,
    /// One flat index list per blend slot, gathering `(P, 3)` rows from the stacked layers.
    gather: Vec<Vec<usize>>,
    face_weights: Vec<Vec<f64>>,
    screen_mask: Tensor,
    depth: Tensor,
    visibility: Tensor,
}

/// Sampling coordinates and blend coefficients of one face over the pixels it touches.
#[derive(Clone, Debug)]
struct FaceLayer {
    uv: Tensor,
    coeff: Tensor,
}

/// Blend weights below this are dropped, which bounds every face to its
/// footprint plus about a pixel.
pub const MIN_WEIGHT: f64 = 1e-9;
const CULL_MARGIN: f64 = 2.0;

/// Screen-space projection of a face; `q(a, b) = origin + a * eu + b * ev`, y up.
struct Projected {
    origin: [f64; 2],
    eu: [f64; 2],
    ev: [f64; 2],
    area: f64,
}

struct Hit {
    distance: f64,
    a: f64,
    b: f64,
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

impl Projected {
    fn new(face: &Face, right: [f64; 3], up: [f64; 3], k: f64) -> Self {
        let p0 = face.point(0.0, 0.0);
        let proj = |p: [f64; 3]| [k * dot(p, right), k * dot(p, up)];
        let eu = proj(face.u);
        let ev = proj(face.v);
        Self {
            origin: proj(p0),
            eu,
            ev,
            area: cross2(eu, ev),
        }
    }

    fn vertex(&self, a: f64, b: f64) -> [f64; 2] {
        [
            self.origin[0] + a * self.eu[0] + b * self.ev[0],
            self.origin[1] + a * self.eu[1] + b * self.ev[1],
        ]
    }

    /// Signed distance (positive inside) and the face parameters of `q`, or of
    /// the closest boundary point when `q` is outside.
    fn locate(&self, q: [f64; 2]) -> Hit {
        const CORNERS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let scale =
            (self.eu[0].powi(2) + self.eu[1].powi(2)).max(self.ev[0].powi(2) + self.ev[1].powi(2));
        let solid = self.area.abs() > 1e-9 * scale && scale > 0.0;
        let orient = self.area.signum();

        let mut inside = solid;
        let mut inner = f64::INFINITY;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..4 {
            let (a0, b0) = CORNERS[i];
            let (a1, b1) = CORNERS[(i + 1) % 4];
            let p = self.vertex(a0, b0);
            let e = [self.vertex(a1, b1)[0] - p[0], self.vertex(a1, b1)[1] - p[1]];
            let rel = [q[0] - p[0], q[1] - p[1]];
            let len2 = e[0] * e[0] + e[1] * e[1];
            if solid {
                let side = orient * cross2(e, rel) / len2.sqrt();
                inner = inner.min(side);
                if side <= 0.0 {
                    inside = false;
                }
            }
            let t = if len2 > 0.0 {
                ((rel[0] * e[0] + rel[1] * e[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = ((rel[0] - t * e[0]).powi(2) + (rel[1] - t * e[1]).powi(2)).sqrt();
            if dist < best.0 {
                best = (dist, a0 + t * (a1 - a0), b0 + t * (b1 - b0));
            }
        }
        if inside {
            let rel = [q[0] - self.origin[0], q[1] - self.origin[1]];
            Hit {
                distance: inner,
                a: (cross2(rel, self.ev) / self.area).clamp(0.0, 1.0),
                b: (cross2(self.eu, rel) / self.area).clamp(0.0, 1.0),
            }
        } else {
            Hit {
                distance: -best.0,
                a: best.1,
                b: best.2,
            }
        }
    }
}

impl Rasterization {
    /// Rasterizes the cube geometry for one view.
    pub fn new(
        mesh: &Mesh,
        pose: &Pose,
        illum: &Illumination,
        viewport: &Viewport,
    ) -> Result<Self> {
        pose.validate()?;
        illum.validate()?;
        viewport.validate()?;
        let (h, w) = (viewport.height, viewport.width);
        let npix = h * w;
        let view = pose.view_dir();
        let (right, up) = pose.screen_axes();
        let k = viewport.scale / pose.distance;
        let [cx, cy] = viewport.center;

        let mut face_weights = Vec::with_capacity(6);
        let mut touched: Vec<(Vec<usize>, Vec<f64>, f64)> = Vec::with_capacity(6);
        let mut depth_num = vec![0.0; npix];
        let mut total = vec![0.0; npix];
        for face in mesh.faces() {
            let mut weights = vec![0.0; npix];
            let mut pixels = Vec::new();
            let mut uv = Vec::new();
            let facing = sigmoid(FACING_SHARPNESS * dot(face.normal, view));
            if facing >= MIN_WEIGHT {
                let proj = Projected::new(face, right, up, k);
                let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
                    .map(|(a, b)| proj.vertex(a, b));
                let (mut x0, mut x1, mut y0, mut y1) = (
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                );
                for q in corners {
                    x0 = x0.min(cx + q[0]);
                    x1 = x1.max(cx + q[0]);
                    y0 = y0.min(cy - q[1]);
                    y1 = y1.max(cy - q[1]);
                }
                let lo = |v: f64, n: usize| ((v - CULL_MARGIN).floor().max(0.0) as usize).min(n);
                let hi = |v: f64, n: usize| ((v + CULL_MARGIN).ceil().max(0.0) as usize).min(n);
                for i in lo(y0, h)..hi(y1, h) {
                    for j in lo(x0, w)..hi(x1, w) {
                        let q = [j as f64 + 0.5 - cx, cy - (i as f64 + 0.5)];
                        let hit = proj.locate(q);
                        let wt = sigmoid(EDGE_SHARPNESS * hit.distance) * facing;
                        if wt < MIN_WEIGHT {
                            continue;
                        }
                        let p = i * w + j;
                        weights[p] = wt;
                        total[p] += wt;
                        let z = CAMERA_OFFSET * pose.distance - dot(face.point(hit.a, hit.b), view);
                        depth_num[p] += wt * z;
                        let (x, y) = face.atlas_coords(hit.a, hit.b);
                        pixels.push(p);
                        uv.extend([x, y]);
                    }
                }
            }
            touched.push((pixels, uv, illum.shade(face.normal)));
            face_weights.push(weights);
        }

        let mut layers = Vec::new();
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); npix];
        let mut row = 0;
        for ((pixels, uv, shade), weights) in touched.into_iter().zip(&face_weights) {
            if pixels.is_empty() {
                continue;
            }
            let coeff: Vec<f64> = pixels
                .iter()
                .map(|&p| weights[p] * shade / total[p])
                .collect();
            for &p in &pixels {
                slots[p].push(row);
                row += 1;
            }
            let n = pixels.len();
            layers.push(FaceLayer {
                uv: Tensor::from_parts(vec![n, 2], uv),
                coeff: Tensor::from_parts(vec![n, 1], coeff),
            });
        }
        let zero_row = row;
        let nslots = slots.iter().map(Vec::len).max().unwrap_or(0);
        let gather = (0..nslots)
            .map(|s| {
                slots
                    .iter()
                    .flat_map(|rows| {
                        let r = rows.get(s).copied().unwrap_or(zero_row);
                        [3 * r, 3 * r + 1, 3 * r + 2]
                    })
                    .collect()
            })
            .collect();

        let mask: Vec<f64> = total.iter().map(|&t| t.min(1.0)).collect();
        let depth: Vec<f64> = (0..npix)
            .map(|p| {
                if total[p] > 0.0 {
                    mask[p] * depth_num[p] / total[p] + (1.0 - mask[p]) * BACKGROUND_DEPTH
                } else {
                    BACKGROUND_DEPTH
                }
            })
            .collect();

        let [th, tw, _] = mesh.texture_shape();
        let mut visibility = vec![0.0; th * tw];
        for face in mesh.faces() {
            if dot(face.normal, view) <= 1e-9 {
                continue;
            }
            let proj = Projected::new(face, right, up, k);
            let r = face.uv;
            for row in r.y0..r.y0 + r.height {
                for col in r.x0..r.x0 + r.width {
                    let (a, b) = face.texel_params(row, col);
                    let q = proj.vertex(a, b);
                    let (px, py) = (cx + q[0], cy - q[1]);
                    let on_screen = px >= 0.0 && px < w as f64 && py >= 0.0 && py < h as f64;
                    if on_screen && proj.locate(q).distance > 0.0 {
                        visibility[row * tw + col] = 1.0;
                    }
                }
            }
        }

        Ok(Self {
            height: h,
            width: w,
            layers,
            gather,
            face_weights,
            screen_mask: Tensor::from_parts(vec![h, w], mask),
            depth: Tensor::from_parts(vec![h, w], depth),
            visibility: Tensor::from_parts(vec![th, tw], visibility),
        })
    }

    pub fn screen_mask(&self) -> &Tensor {
        &self.screen_mask
    }

    pub fn depth(&self) -> &Tensor {
        &self.depth
    }

    /// Binary `(H_tex, W_tex)` map of texels seen in this view.
    pub fn texel_visibility(&self) -> &Tensor {
        &self.visibility
    }

    /// Per-face blend weight (soft coverage times soft facing) for every pixel, row-major.
    pub fn face_weights(&self) -> &[Vec<f64>] {
        &self.face_weights
    }

    /// Adds the shaded object image `(H, W, 3)` as a function of `texture`.
    pub fn shade(&self, g: &mut Graph, texture: NodeId) -> Result<NodeId> {
        let (h, w) = (self.height, self.width);
        if self.layers.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[h, w, 3])));
        }
        let mut parts = Vec::with_capacity(self.layers.len() + 1);
        for layer in &self.layers {
            let sampled = g.bilinear_sample(texture, layer.uv.clone())?;
            let c = g.constant(layer.coeff.clone());
            parts.push(g.mul(sampled, c)?);
        }
        parts.push(g.constant(Tensor::zeros(&[1, 3])));
        let stacked = g.concat(&parts, 0)?;
        let mut acc: Option<NodeId> = None;
        for idx in &self.gather {
            let term = g.masked_select(stacked, idx.clone())?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        g.reshape(acc.expect("at least one slot"), &[h, w, 3])
    }
}

/// Everything a single render produces.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Tensor,
    pub screen_mask: Tensor,
    pub depth: Tensor,
    pub texel_visibility: Tensor,
}

/// Renders `texture` on the cube. The texture must be `(H, W, 3)` with values in `[0, 1]`.
pub fn rasterize(
    mesh: &Mesh,
    texture: &Tensor,
    pose: &Pose,
    illum: &Illumination,
    viewport: &Viewport,
) -> Result<RenderOutput> {
    check_texture(mesh, texture)?;
    let raster = Rasterization::new(mesh, pose, illum, viewport)?;
    let mut g = Graph::new();
    let t = g.constant(texture.clone());
    let img = raster.shade(&mut g, t)?;
    g.output("image", img);
    let mut out = g.forward_defaults()?;
    Ok(RenderOutput {
        image: out.remove("image").expect("declared output"),
        screen_mask: raster.screen_mask,
        depth: raster.depth,
        texel_visibility: raster.visibility,
    })
}

pub(crate) fn check_texture(mesh: &Mesh, texture: &Tensor) -> Result<()> {
    if texture.shape() != mesh.texture_shape() {
        return Err(invalid(format!(
            "texture shape {:?} does not match atlas {:?}",
            texture.shape(),
            mesh.texture_shape()
        )));
    }
    if texture.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("texture values must lie in [0, 1]"));
    }
    Ok(())
}

/// Adds `mask * image + (1 - mask) * background` to the graph. `image` must be
/// `(H, W, 3)`, the background `(H, W, 3)` and the mask `(H, W)`.
pub fn composite(
    g: &mut Graph,
    image: NodeId,
    background: &Tensor,
    mask: &Tensor,
) -> Result<NodeId> {
    let shape = g.shape(image).to_vec();
    check_composite_shapes(&shape, background, mask)?;
    let m = g.constant(mask.clone().reshaped(&[shape[0], shape[1], 1])?);
    let rest = background.zip_map(&broadcast_mask(mask), |b, m| (1.0 - m) * b)?;
    let fg = g.mul(image, m)?;
    let bg = g.constant(rest);
    g.add(fg, bg)
}

/// Numeric form of [`composite`].
pub fn composite_values(image: &Tensor, background: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_composite_shapes(image.shape(), background, mask)?;
    let m = broadcast_mask(mask);
    let fg = image.zip_map(&m, |r, m| m * r)?;
    let bg = background.zip_map(&m, |b, m| (1.0 - m) * b)?;
    fg.zip_map(&bg, |a, b| a + b)
}

fn broadcast_mask(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let data = mask.data().iter().flat_map(|&m| [m; 3]).collect();
    Tensor::from_parts(vec![h, w, 3], data)
}

fn check_composite_shapes(image: &[usize], background: &Tensor, mask: &Tensor) -> Result<()> {
    let ok = image.len() == 3
        && image[2] == 3
        && background.shape() == image
        && mask.shape() == &image[..2];
    if !ok {
        return Err(invalid(format!(
            "composite shapes differ: image {image:?}, background {:?}, mask {:?}",
            background.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Mesh, Viewport, Illumination) {
        (
            Mesh::unit_cube(128, 192).unwrap(),
            Viewport::centered(128),
            Illumination {
                ambient: 1.0,
                light_dir: [0.0, 0.0, 1.0],
            },
        )
    }

    fn front() -> Pose {
        Pose {
            azimuth: 0.0,
            elevation: 0.0,
            distance: 1.0,
        }
    }

    fn ramp_texture() -> Tensor {
        let data = (0..128 * 192 * 3)
            .map(|i| ((i as f64) * 0.618).fract() * 0.8 + 0.1)
            .collect();
        Tensor::new(vec![128, 192, 3], data).unwrap()
    }

    #[test]
    fn ambient_only_front_view_reproduces_texture_samples() {
        let (mesh, vp, illum) = setup();
        let tex = ramp_texture();
        let out = rasterize(&mesh, &tex, &front(), &illum, &vp).unwrap();
        // Center pixel of the +z face: q = (0.5, -0.5) px from the cube center.
        let face = &mesh.faces()[4];
        let k = vp.scale;
        let (a, b) = (0.5 + 0.5 / k, 0.5 - 0.5 / k);
        let (x, y) = face.atlas_coords(a, b);
        let mut g = Graph::new();
        let t = g.constant(tex.clone());
        let uv = Tensor::new(vec![1, 2], vec![x, y]).unwrap();
        let s = g.bilinear_sample(t, uv).unwrap();
        g.output("s", s);
        let expect = g.forward_defaults().unwrap().remove("s").unwrap();
        for c in 0..3 {
            let got = out.image.at(&[64, 64, c]);
            assert!(
                (got - expect.data()[c]).abs() < 1e-12,
                "{got} vs {}",
                expect.data()[c]
            );
        }
    }

    #[test]
    fn front_view_sees_exactly_the_front_face() {
        let (mesh, vp, illum) = setup();
        let r = Rasterization::new(&mesh, &front(), &illum, &vp).unwrap();
        let vis = r.texel_visibility();
        for row in 0..128 {
            for col in 0..192 {
                let f = mesh.face_of_texel(row, col).unwrap();
                assert_eq!(vis.at(&[row, col]), if f == 4 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn gray_shading_example() {
        let (mesh, vp, _) = setup();
        let illum = Illumination {
            ambient: 0.5,
            light_dir: [0.0, 0.0, 1.0],
        };
        let tex = Tensor::full(&[128, 192, 3], 0.5);
        let out = rasterize(&mesh, &tex, &front(), &illum, &vp).unwrap();
        assert!((out.image.at(&[64, 64, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn composite_examples() {
        let img = Tensor::full(&[2, 2, 3], 1.0);
        let bg = Tensor::zeros(&[2, 2, 3]);
        let half = composite_values(&img, &bg, &Tensor::full(&[2, 2], 0.5)).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
        let ones = composite_values(&img, &bg, &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(ones, img);
        let zeros = composite_values(&img, &bg, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(zeros, bg);
        assert!(composite_values(&img, &bg, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mesh, vp, illum) = setup();
        let mut tex = Tensor::full(&[128, 192, 3], 0.5);
        tex.data_mut()[7] = 1.5;
        assert!(rasterize(&mesh, &tex, &front(), &illum, &vp).is_err());
        let tex = Tensor::full(&[128, 192, 3], 0.5);
        let bad = Pose {
            distance: 0.0,
            ..front()
        };
        assert!(rasterize(&mesh, &tex, &bad, &illum, &vp).is_err());
    }

    #[test]
    fn edge_on_face_does_not_cover() {
        let (mesh, vp, illum) = setup();
        let r = Rasterization::new(&mesh, &front(), &illum, &vp).unwrap();
        // +x is exactly edge-on from the front: facing weight is one half, coverage below.
        let side = &r.face_weights()[0];
        assert!(side.iter().all(|&w| w <= 0.25 + 1e-12));
    }
}
