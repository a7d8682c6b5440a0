//! Pinhole cameras and the world/image mappings used to lift depth maps.
//!
//! Conventions: extrinsics `E` map world to camera coordinates, camera axes
//! are x right, y down, z forward, and integer pixel coordinates address
//! pixel centers.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive and finite, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("similarity scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    BadExtrinsics(String),
}

/// Intrinsics, world-to-camera extrinsics, and image size of one view at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub view_id: u32,
    pub k: Matrix3<f64>,
    pub e: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

/// Outcome of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// In front of the camera. `in_bounds` tells whether the pixel falls on the image.
    Visible { pixel: [f64; 2], depth: f64, in_bounds: bool },
    /// Camera-space depth is not positive.
    BehindCamera { depth: f64 },
}

impl Projection {
    pub fn pixel(&self) -> Option<[f64; 2]> {
        match *self {
            Projection::Visible { pixel, .. } => Some(pixel),
            Projection::BehindCamera { .. } => None,
        }
    }
}

/// `x -> scale * R x + t`, applied to world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * (self.rotation * x) + self.translation
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * first.scale,
            rotation: self.rotation * first.rotation,
            translation: self.scale * (self.rotation * first.translation) + self.translation,
        }
    }
}

/// Row-major depths along the camera z axis; NaN marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f32::NAN; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Depth at `(row, col)` if it is strictly positive and finite.
    pub fn valid(&self, row: usize, col: usize) -> Option<f32> {
        let d = self.get(row, col);
        (d.is_finite() && d > 0.0).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite() && **d > 0.0).count()
    }
}

/// Build intrinsics from focal lengths and principal point.
pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

/// World-to-camera extrinsics for a camera at `eye` looking at `target`.
/// `up` is the world up direction; the image y axis points away from it.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Matrix4<f64> {
    let z = (target - eye).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye);
    rigid(&r, &t)
}

pub(crate) fn rigid(r: &Matrix3<f64>, t: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

impl Camera {
    pub fn new(view_id: u32, k: Matrix3<f64>, e: Matrix4<f64>, width: usize, height: usize) -> Result<Self, GeometryError> {
        let cam = Self {
            view_id,
            k,
            e,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(GeometryError::BadIntrinsics(
                "K must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(GeometryError::BadIntrinsics("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-5 || (r.determinant() - 1.0).abs() > 1e-5 {
            return Err(GeometryError::BadExtrinsics(format!(
                "rotation block is not orthonormal (error {err:.2e})"
            )));
        }
        let bottom = self.e.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(GeometryError::BadExtrinsics("last row must be (0, 0, 0, 1)".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.e.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.e.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation() * x + self.translation()
    }

    pub fn camera_to_world(&self, xc: &Vec3) -> Vec3 {
        self.rotation().transpose() * (xc - self.translation())
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Camera-frame direction through pixel `(u, v)`, scaled to unit depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.k;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vec3::new(x, y, 1.0)
    }

    /// Lift pixel `(u, v)` with camera-space depth `depth` into world coordinates:
    /// `x = E^-1 (K^-1 (u, v, 1)^T * depth)`.
    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, GeometryError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        if !self.in_bounds(u, v) {
            return Err(GeometryError::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.camera_to_world(&(self.pixel_ray(u, v) * depth)))
    }

    pub fn project_point(&self, x: &Vec3) -> Projection {
        let xc = self.world_to_camera(x);
        if xc.z <= 0.0 {
            return Projection::BehindCamera { depth: xc.z };
        }
        let p = self.k * (xc / xc.z);
        let (u, v) = (p.x, p.y);
        Projection::Visible {
            pixel: [u, v],
            depth: xc.z,
            in_bounds: self.in_bounds(u, v),
        }
    }

    /// Camera that sees the similarity-transformed world exactly as `self`
    /// sees the original one; camera-space depths scale by `s.scale`.
    pub fn apply_similarity(&self, s: &Similarity) -> Result<Camera, GeometryError> {
        if !(s.scale > 0.0) {
            return Err(GeometryError::NonPositiveScale(s.scale));
        }
        let rc = self.rotation();
        let r = s.rotation.matrix();
        let r_new = rc * r.transpose();
        let t_new = s.scale * self.translation() - r_new * s.translation;
        Ok(Camera {
            e: rigid(&r_new, &t_new),
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam() -> Camera {
        Camera::new(0, Matrix3::identity(), Matrix4::identity(), 1, 1).unwrap()
    }

    pub(crate) fn random_camera(rng: &mut impl Rng) -> Camera {
        let w = rng.random_range(8..200);
        let h = rng.random_range(8..200);
        let f = rng.random_range(20.0..400.0);
        let k = intrinsics(f, f * rng.random_range(0.8..1.2), w as f64 / 2.0, h as f64 / 2.0);
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::from_scaled_axis(axis);
        let t = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        Camera::new(1, k, rigid(rot.matrix(), &t), w, h).unwrap()
    }

    #[test]
    fn identity_camera_unprojects_to_unit_depth() {
        let x = identity_cam().unproject_pixel(0.0, 0.0, 1.0).unwrap();
        assert_eq!(x, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn translated_camera_inverse_transform() {
        let mut cam = identity_cam();
        cam.e = rigid(&Matrix3::identity(), &Vec3::new(0.0, 0.0, -5.0));
        let x = cam.unproject_pixel(0.0, 0.0, 1.0).unwrap();
        assert!((x - Vec3::new(0.0, 0.0, 6.0)).norm() < 1e-12);
    }

    #[test]
    fn unproject_errors() {
        let cam = identity_cam();
        assert_eq!(cam.unproject_pixel(0.0, 0.0, 0.0), Err(GeometryError::NonPositiveDepth(0.0)));
        assert!(matches!(cam.unproject_pixel(3.0, 0.0, 1.0), Err(GeometryError::PixelOutOfBounds { .. })));
    }

    #[test]
    fn projection_cases() {
        let cam = identity_cam();
        match cam.project_point(&Vec3::new(0.0, 0.0, 2.0)) {
            Projection::Visible { pixel, depth, .. } => {
                assert_eq!(pixel, [0.0, 0.0]);
                assert_eq!(depth, 2.0);
            }
            p => panic!("{p:?}"),
        }
        assert!(matches!(cam.project_point(&Vec3::new(0.0, 0.0, -1.0)), Projection::BehindCamera { .. }));
    }

    #[test]
    fn round_trip_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let u = rng.random_range(0.0..(cam.width - 1) as f64);
            let v = rng.random_range(0.0..(cam.height - 1) as f64);
            let d = rng.random_range(0.1..20.0);
            let x = cam.unproject_pixel(u, v, d).unwrap();
            let Projection::Visible { pixel, depth, .. } = cam.project_point(&x) else { panic!() };
            assert!((pixel[0] - u).abs() <= 1e-5 * u.abs().max(1.0));
            assert!((pixel[1] - v).abs() <= 1e-5 * v.abs().max(1.0));
            assert!((depth - d).abs() <= 1e-5 * d);
        }
    }

    #[test]
    fn constant_depth_is_planar() {
        let cam = Camera::new(0, intrinsics(10.0, 10.0, 4.0, 4.0), Matrix4::identity(), 8, 8).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                let x = cam.unproject_pixel(u as f64, v as f64, 2.5).unwrap();
                assert!((x.z - 2.5).abs() < 1e-6);
            }
        }
    }

    fn projections_agree(a: &Camera, xa: &Vec3, b: &Camera, xb: &Vec3, depth_ratio: f64, tol: f64) {
        let (Projection::Visible { pixel: pa, depth: da, .. }, Projection::Visible { pixel: pb, depth: db, .. }) =
            (a.project_point(xa), b.project_point(xb))
        else {
            panic!("behind camera")
        };
        assert!((pa[0] - pb[0]).abs() < tol && (pa[1] - pb[1]).abs() < tol, "{pa:?} vs {pb:?}");
        assert!((db - depth_ratio * da).abs() < tol * da.max(1.0));
    }

    #[test]
    fn similarity_identity_and_translation() {
        let cam = Camera::new(0, intrinsics(50.0, 50.0, 32.0, 32.0), look_at(Vec3::new(2.0, -3.0, 1.0), Vec3::zeros(), Vec3::z()), 64, 64).unwrap();
        let same = cam.apply_similarity(&Similarity::identity()).unwrap();
        assert!((same.e - cam.e).abs().max() < 1e-15);

        let s = Similarity::translation(Vec3::new(0.3, -1.0, 2.0));
        let moved = cam.apply_similarity(&s).unwrap();
        let x = Vec3::new(0.1, 0.2, 0.3);
        projections_agree(&cam, &x, &moved, &s.apply(&x), 1.0, 1e-6);
    }

    #[test]
    fn similarity_scale_doubles_depth() {
        let cam = Camera::new(0, intrinsics(50.0, 50.0, 32.0, 32.0), look_at(Vec3::new(2.0, -3.0, 1.0), Vec3::zeros(), Vec3::z()), 64, 64).unwrap();
        let s = Similarity {
            scale: 2.0,
            ..Similarity::identity()
        };
        let x = Vec3::new(0.1, 0.2, 0.3);
        projections_agree(&cam, &x, &cam.apply_similarity(&s).unwrap(), &s.apply(&x), 2.0, 1e-6);
        assert_eq!(
            cam.apply_similarity(&Similarity { scale: 0.0, ..Similarity::identity() }),
            Err(GeometryError::NonPositiveScale(0.0))
        );
    }

    #[test]
    fn similarity_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = Camera::new(0, intrinsics(50.0, 50.0, 32.0, 32.0), look_at(Vec3::new(2.0, -3.0, 1.0), Vec3::zeros(), Vec3::z()), 64, 64).unwrap();
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| Similarity {
                scale: rng.random_range(0.5..2.0),
                rotation: Rotation3::from_scaled_axis(Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
                translation: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            let (s1, s2) = (mk(&mut rng), mk(&mut rng));
            let seq = cam.apply_similarity(&s1).unwrap().apply_similarity(&s2).unwrap();
            let once = cam.apply_similarity(&s2.compose(&s1)).unwrap();
            let x = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let y = s2.apply(&s1.apply(&x));
            projections_agree(&seq, &y, &once, &y, 1.0, 1e-5);
        }
    }
}
