//! Vectors, pinhole cameras, rays and the ray/sphere support test.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half extent of the world box `[-0.5, 0.5]^3` every shape lives in.
pub const WORLD_HALF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    /// Unit vector along coordinate axis `axis` (0, 1 or 2).
    pub fn axis(axis: usize) -> Self {
        let mut v = Vec3::ZERO;
        match axis {
            0 => v.x = 1.0,
            1 => v.y = 1.0,
            2 => v.z = 1.0,
            _ => panic!("axis index {axis} out of range"),
        }
        v
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        self.into()
    }

    /// Clamp every component into the world box.
    pub fn clamp_to_world(self) -> Vec3 {
        self.map(|c| c.clamp(-WORLD_HALF, WORLD_HALF))
    }

    pub fn in_world(self) -> bool {
        [self.x, self.y, self.z]
            .iter()
            .all(|c| (-WORLD_HALF..=WORLD_HALF).contains(c))
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Pinhole camera. Serialized as
/// `{position, look_at, up, fov_deg, width, height}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    #[serde(rename = "fov_deg", with = "degrees")]
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rad: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(rad.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(f64::to_radians)
    }
}

/// Orthonormal camera basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    /// Camera at `position` looking at the origin with a 30 degree vertical
    /// field of view; falls back to +z as the up hint when the view is
    /// nearly vertical.
    pub fn looking_at_origin(position: Vec3, width: usize, height: usize) -> Camera {
        let forward = (-position).normalized();
        let up = if forward.y.abs() > 0.99 {
            Vec3::new(0.0, 0.0, 1.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        Camera {
            position,
            look_at: Vec3::ZERO,
            up,
            vertical_fov: 30f64.to_radians(),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera width and height must be >= 1".into()));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::Invalid(format!(
                "camera field of view {} rad out of range",
                self.vertical_fov
            )));
        }
        look_at_frame(self).map(|_| ())
    }

    fn tan_half_fov(&self) -> f64 {
        (0.5 * self.vertical_fov).tan()
    }

    /// Project a world point to continuous pixel coordinates. `None` for
    /// points at or behind the camera plane.
    pub fn project(&self, frame: &Frame, p: Vec3) -> Option<(f64, f64)> {
        let d = p - self.position;
        let depth = d.dot(frame.forward);
        if depth <= 1e-12 {
            return None;
        }
        let scale = depth * self.tan_half_fov();
        let half_h = 0.5 * self.height as f64;
        let x = d.dot(frame.right) / scale;
        let y = d.dot(frame.up) / scale;
        Some((0.5 * self.width as f64 + x * half_h, half_h - y * half_h))
    }

    /// Ray through continuous pixel coordinate `(px, py)` given a frame
    /// already computed for this camera.
    pub fn ray_with_frame(&self, frame: &Frame, px: f64, py: f64) -> Ray {
        let half_h = 0.5 * self.height as f64;
        let t = self.tan_half_fov();
        let sx = (px - 0.5 * self.width as f64) / half_h * t;
        let sy = (half_h - py) / half_h * t;
        let dir = frame.forward + frame.right * sx + frame.up * sy;
        Ray {
            origin: self.position,
            direction: dir.normalized(),
        }
    }
}

/// Right-handed orthonormal basis with `forward` pointing at `look_at`.
pub fn look_at_frame(cam: &Camera) -> Result<Frame> {
    let f = cam.look_at - cam.position;
    let fl = f.norm();
    if !(fl > 1e-12) || !f.is_finite() {
        return Err(Error::DegenerateCamera);
    }
    let forward = f / fl;
    let r = forward.cross(cam.up);
    let rl = r.norm();
    if !(rl > 1e-9 * cam.up.norm()) {
        return Err(Error::DegenerateCamera);
    }
    let right = r / rl;
    let up = right.cross(forward);
    Ok(Frame { right, up, forward })
}

/// Pinhole ray through continuous pixel `pix`; pixel `(u, v)` has its
/// center at `(u + 0.5, v + 0.5)`.
///
/// Panics on a degenerate camera; validate cameras at load time.
pub fn camera_ray(cam: &Camera, pix: (f64, f64)) -> Ray {
    let frame = look_at_frame(cam).expect("degenerate camera frame");
    cam.ray_with_frame(&frame, pix.0, pix.1)
}

/// Closest-approach parameter `t*` of a ray against a support sphere, or
/// `None` when the sphere misses the half-line. Tangent contact is a hit.
pub fn ray_sphere_intersect(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = center - ray.origin;
    let t = oc.dot(ray.direction);
    if t < 0.0 {
        return None;
    }
    let perp2 = (oc - ray.direction * t).norm_squared();
    (perp2 <= radius * radius).then_some(t)
}

/// Parametric interval where the ray is inside the axis-aligned box
/// `[-half, half]^3`, clipped to `t >= 0`.
pub fn ray_box_interval(ray: &Ray, half: f64) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-300 {
            if o < -half || o > half {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut lo, mut hi) = ((-half - o) * inv, (half - o) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Camera placement used by the data generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewLayout {
    /// Azimuth ring around +y at 30 degrees elevation.
    Ring,
    /// Fibonacci spiral over the whole sphere.
    Sphere,
}

/// `n` cameras at `radius` from the origin, all looking at it.
pub fn camera_layout(layout: ViewLayout, n: usize, radius: f64, width: usize, height: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let dir = match layout {
                ViewLayout::Ring => {
                    let elev = 30f64.to_radians();
                    let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    Vec3::new(elev.cos() * az.sin(), elev.sin(), elev.cos() * az.cos())
                }
                ViewLayout::Sphere => {
                    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    let y = 1.0 - (i as f64 + 0.5) * 2.0 / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let th = golden * i as f64;
                    Vec3::new(r * th.cos(), y, r * th.sin())
                }
            };
            Camera::looking_at_origin(dir * radius, width, height)
        })
        .collect()
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cams: Vec<Camera> = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let text = serde_json::to_string_pretty(cams).map_err(|e| Error::json("cameras", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn front_cam(fov: f64) -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, 2.0),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 1.0, 0.0),
            vertical_fov: fov,
            width: 64,
            height: 64,
        }
    }

    #[test]
    fn center_pixel_looks_down_axis() {
        let r = camera_ray(&front_cam(0.6), (32.0, 32.0));
        assert_eq!(r.origin, Vec3::new(0.0, 0.0, 2.0));
        assert!((r.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn left_edge_has_negative_x() {
        let r = camera_ray(&front_cam(0.6), (0.0, 32.0));
        assert!(r.direction.x < 0.0);
        assert!(r.direction.y.abs() < 1e-9);
    }

    #[test]
    fn pinhole_offset_matches_hand_geometry() {
        let cam = front_cam(2.0 * 0.5f64.atan());
        let r = camera_ray(&cam, (32.0 + 16.0, 32.0));
        assert!((r.direction.x / -r.direction.z - 0.25).abs() < 1e-12);
    }

    #[test]
    fn project_inverts_camera_ray() {
        let cam = front_cam(0.7);
        let frame = look_at_frame(&cam).unwrap();
        let r = camera_ray(&cam, (10.3, 50.25));
        let (u, v) = cam.project(&frame, r.at(1.7)).unwrap();
        assert!((u - 10.3).abs() < 1e-9 && (v - 50.25).abs() < 1e-9);
        assert!(cam.project(&frame, Vec3::new(0.0, 0.0, 3.0)).is_none());
    }

    #[test]
    fn sphere_hit_cases() {
        let ray = Ray {
            origin: Vec3::ZERO,
            direction: Vec3::new(1.0, 0.0, 0.0),
        };
        assert_eq!(ray_sphere_intersect(&ray, Vec3::new(3.0, 0.0, 0.0), 0.1), Some(3.0));
        assert_eq!(ray_sphere_intersect(&ray, Vec3::new(3.0, 0.15, 0.0), 0.1), None);
        // Tangent contact is inclusive.
        assert_eq!(ray_sphere_intersect(&ray, Vec3::new(2.0, 0.5, 0.0), 0.5), Some(2.0));
        // Behind the origin never hits, even when the origin is inside.
        assert_eq!(ray_sphere_intersect(&ray, Vec3::new(-0.05, 0.0, 0.0), 0.1), None);
    }

    #[test]
    fn frames() {
        let f = look_at_frame(&front_cam(0.5)).unwrap();
        assert!((f.forward - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((f.right - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        let mut side = front_cam(0.5);
        side.position = Vec3::new(2.0, 0.0, 0.0);
        let f = look_at_frame(&side).unwrap();
        assert!((f.forward - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);

        let mut bad = front_cam(0.5);
        bad.up = Vec3::new(0.0, 0.0, 3.0);
        assert!(matches!(look_at_frame(&bad), Err(Error::DegenerateCamera)));
    }

    #[test]
    fn camera_json_roundtrip() {
        let cams = camera_layout(ViewLayout::Sphere, 5, 2.0, 64, 48);
        let text = serde_json::to_string(&cams).unwrap();
        assert!(text.contains("\"fov_deg\""));
        let back: Vec<Camera> = serde_json::from_str(&text).unwrap();
        for (a, b) in cams.iter().zip(&back) {
            assert_eq!(a.position, b.position);
            assert!((a.vertical_fov - b.vertical_fov).abs() < 1e-15);
        }
    }

    #[test]
    fn layouts_are_valid() {
        for layout in [ViewLayout::Ring, ViewLayout::Sphere] {
            for c in camera_layout(layout, 24, 2.0, 64, 64) {
                c.validate().unwrap();
                assert!((c.position.norm() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rays_unit_and_distinct() {
        let cam = front_cam(0.5);
        let frame = look_at_frame(&cam).unwrap();
        let mut dirs = Vec::new();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let r = cam.ray_with_frame(&frame, u as f64 + 0.5, v as f64 + 0.5);
                assert!((r.direction.norm() - 1.0).abs() < 1e-9);
                dirs.push(r.direction);
            }
        }
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len().min(i + 70) {
                assert!((dirs[i] - dirs[j]).norm() > 1e-6);
            }
        }
    }

    fn arb_vec(r: f64) -> impl Strategy<Value = Vec3> {
        (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn frame_is_orthonormal(pos in arb_vec(3.0), target in arb_vec(0.5)) {
            let cam = Camera { position: pos, look_at: target, up: Vec3::new(0.0, 1.0, 0.0), vertical_fov: 0.5, width: 8, height: 8 };
            if let Ok(f) = look_at_frame(&cam) {
                prop_assert!(f.right.dot(f.up).abs() < 1e-9);
                prop_assert!(f.right.dot(f.forward).abs() < 1e-9);
                prop_assert!(f.up.dot(f.forward).abs() < 1e-9);
                prop_assert!((f.right.cross(f.up) - (-f.forward)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn sphere_test_matches_dense_march() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        for _ in 0..1000 {
            let origin = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalized();
            let center = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let tau = rng.random_range(0.05..0.5);
            let ray = Ray { origin, direction: dir };
            // March the half-line at step tau/100 out past the sphere.
            let step = tau / 100.0;
            let far = (center - origin).norm() + tau;
            let n = (far / step).ceil() as usize + 1;
            let mut min_d = f64::INFINITY;
            for k in 0..=n {
                min_d = min_d.min((ray.at(k as f64 * step) - center).norm());
            }
            let marched = min_d <= tau;
            let analytic = ray_sphere_intersect(&ray, center, tau);
            // The march sees the sphere when the origin is inside it even
            // though the closest approach lies behind; skip that case and
            // the step-size slack band around the boundary.
            let inside_origin = (origin - center).norm() <= tau;
            if inside_origin || (min_d - tau).abs() < step {
                continue;
            }
            assert_eq!(marched, analytic.is_some());
            hits += marched as usize;
        }
        assert!(hits > 10);
    }
}
