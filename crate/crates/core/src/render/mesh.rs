//! The unit cube and its texture atlas.

use crate::error::{invalid, Result};

/// Axis-aligned rectangle of the texture atlas, in texels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UvRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl UvRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x0
            && col < self.x0 + self.width
            && row >= self.y0
            && row < self.y0 + self.height
    }
}

/// One square face. Points on the face are `center + (a - 0.5) * u + (b - 0.5) * v`
/// for `a, b` in `[0, 1]`, where `center = 0.5 * normal` and `u x v = normal`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Face {
    pub normal: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub uv: UvRect,
}

impl Face {
    pub fn point(&self, a: f64, b: f64) -> [f64; 3] {
        let mut p = [0.0; 3];
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = 0.5 * self.normal[i] + (a - 0.5) * self.u[i] + (b - 0.5) * self.v[i];
        }
        p
    }

    /// Continuous atlas coordinates (x right, y down) of the face point `(a, b)`,
    /// clamped to texel centers inside the face rectangle so faces never bleed.
    pub fn atlas_coords(&self, a: f64, b: f64) -> (f64, f64) {
        let r = &self.uv;
        let x = r.x0 as f64 + a * r.width as f64;
        let y = r.y0 as f64 + (1.0 - b) * r.height as f64;
        (
            x.clamp(r.x0 as f64 + 0.5, (r.x0 + r.width) as f64 - 0.5),
            y.clamp(r.y0 as f64 + 0.5, (r.y0 + r.height) as f64 - 0.5),
        )
    }

    /// Face parameters of the center of texel `(row, col)`, which must lie in the face rectangle.
    pub fn texel_params(&self, row: usize, col: usize) -> (f64, f64) {
        let r = &self.uv;
        let a = (col - r.x0) as f64 + 0.5;
        let b = (row - r.y0) as f64 + 0.5;
        (a / r.width as f64, 1.0 - b / r.height as f64)
    }
}

/// The axis-aligned unit cube centered at the origin.
///
/// Faces are ordered `+x, -x, +y, -y, +z, -z`; face `f` owns the atlas cell at
/// column `f % 3`, row `f / 3` of a 3x2 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    faces: [Face; 6],
    atlas_height: usize,
    atlas_width: usize,
}

pub const FACE_NAMES: [&str; 6] = ["+x", "-x", "+y", "-y", "+z", "-z"];

impl Mesh {
    pub fn unit_cube(atlas_height: usize, atlas_width: usize) -> Result<Self> {
        if atlas_width == 0
            || atlas_height == 0
            || !atlas_width.is_multiple_of(3)
            || !atlas_height.is_multiple_of(2)
        {
            return Err(invalid(format!(
                "atlas {atlas_height}x{atlas_width} must have width divisible by 3 and height by 2"
            )));
        }
        let fw = atlas_width / 3;
        let fh = atlas_height / 2;
        let frames: [([f64; 3], [f64; 3], [f64; 3]); 6] = [
            ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]),
            ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
            ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
            ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            ([0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ];
        let faces = std::array::from_fn(|f| {
            let (normal, u, v) = frames[f];
            Face {
                normal,
                u,
                v,
                uv: UvRect {
                    x0: (f % 3) * fw,
                    y0: (f / 3) * fh,
                    width: fw,
                    height: fh,
                },
            }
        });
        Ok(Self {
            faces,
            atlas_height,
            atlas_width,
        })
    }

    pub fn faces(&self) -> &[Face; 6] {
        &self.faces
    }

    /// Texture shape `(H, W, 3)` expected by this mesh.
    pub fn texture_shape(&self) -> [usize; 3] {
        [self.atlas_height, self.atlas_width, 3]
    }

    pub fn face_of_texel(&self, row: usize, col: usize) -> Option<usize> {
        self.faces.iter().position(|f| f.uv.contains(row, col))
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_right_handed_and_unit() {
        let mesh = Mesh::unit_cube(128, 192).unwrap();
        for f in mesh.faces() {
            assert_eq!(cross(f.u, f.v), f.normal);
            assert_eq!(dot(f.normal, f.normal), 1.0);
            assert_eq!(dot(f.u, f.normal), 0.0);
        }
    }

    #[test]
    fn atlas_rectangles_partition_the_texture() {
        let mesh = Mesh::unit_cube(128, 192).unwrap();
        for row in 0..128 {
            for col in 0..192 {
                let owners = mesh
                    .faces()
                    .iter()
                    .filter(|f| f.uv.contains(row, col))
                    .count();
                assert_eq!(owners, 1, "texel ({row},{col})");
            }
        }
        assert!(Mesh::unit_cube(128, 190).is_err());
    }

    #[test]
    fn corners_lie_on_the_cube() {
        let mesh = Mesh::unit_cube(128, 192).unwrap();
        for f in mesh.faces() {
            for (a, b) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                let p = f.point(a, b);
                assert!(p.iter().all(|c| c.abs() == 0.5));
            }
        }
    }

    #[test]
    fn texel_params_round_trip_through_atlas_coords() {
        let mesh = Mesh::unit_cube(128, 192).unwrap();
        let f = &mesh.faces()[4];
        let (a, b) = f.texel_params(75, 70);
        let (x, y) = f.atlas_coords(a, b);
        assert!((x - 70.5).abs() < 1e-12 && (y - 75.5).abs() < 1e-12);
    }
}
