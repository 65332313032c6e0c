//! Pinhole camera model and ray generation.
//!
//! Convention: camera looks down -z with y up; a pixel (u, v) maps to the
//! camera-space direction [(u-cx)/fx, (v-cy)/fy, -1] before rotation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rigid transform, row-major 4x4.
    pub c2w: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, c2w: [f64; 16], width: usize, height: usize) -> Result<Self> {
        let cam = Camera { fx, fy, cx, cy, c2w, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::invalid(
                "camera",
                format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "zero image dimensions".to_string()));
        }
        if self.c2w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera", "non-finite pose entries".to_string()));
        }
        // ||R^T R - I|| over the rotation block
        let r = |i: usize, j: usize| self.c2w[i * 4 + j];
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r(k, i) * r(k, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                dev += (dot - want) * (dot - want);
            }
        }
        if dev.sqrt() >= 1e-6 {
            return Err(Error::invalid(
                "camera",
                format!("rotation block not orthonormal (deviation {:.3e})", dev.sqrt()),
            ));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.c2w[i * 4 + j];
            }
        }
        r
    }

    pub fn position(&self) -> [f64; 3] {
        [self.c2w[3], self.c2w[7], self.c2w[11]]
    }

    /// Unit ray direction through continuous pixel coordinates (u, v).
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let dc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, -1.0];
        let r = self.rotation();
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = r[i][0] * dc[0] + r[i][1] * dc[1] + r[i][2] * dc[2];
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Build the ray through pixel (u, v). Pixel coordinates are continuous;
/// callers usually pass pixel centers (x + 0.5, y + 0.5).
pub fn generate_ray(camera: &Camera, u: f64, v: f64, t_near: f64, t_far: f64) -> Result<Ray> {
    if t_near >= t_far {
        return Err(Error::invalid(
            "generate_ray",
            format!("t_near {t_near} must be below t_far {t_far}"),
        ));
    }
    if !(0.0..=camera.width as f64).contains(&u) || !(0.0..=camera.height as f64).contains(&v) {
        return Err(Error::invalid(
            "generate_ray",
            format!("pixel ({u}, {v}) outside {}x{} image", camera.width, camera.height),
        ));
    }
    Ok(Ray { origin: camera.position(), dir: camera.ray_direction(u, v), t_near, t_far })
}

/// A camera on a z-up orbit looking at the origin.
pub fn orbit_camera(
    radius: f64,
    azimuth: f64,
    elevation: f64,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
) -> Result<Camera> {
    let pos = [
        radius * elevation.cos() * azimuth.cos(),
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
    ];
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let forward = norm([-pos[0], -pos[1], -pos[2]]);
    let world_up = [0.0, 0.0, 1.0];
    let right = norm(cross(forward, world_up));
    let up = cross(right, forward);
    // camera axes in world coords: x = right, y = up, z = -forward
    let mut c2w = [0.0; 16];
    for i in 0..3 {
        c2w[i * 4] = right[i];
        c2w[i * 4 + 1] = up[i];
        c2w[i * 4 + 2] = -forward[i];
        c2w[i * 4 + 3] = pos[i];
    }
    c2w[15] = 1.0;
    Camera::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, c2w, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(w: usize, h: usize, fx: f64) -> Camera {
        let mut c2w = [0.0; 16];
        c2w[0] = 1.0;
        c2w[5] = 1.0;
        c2w[10] = 1.0;
        c2w[15] = 1.0;
        Camera::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, c2w, w, h).unwrap()
    }

    #[test]
    fn principal_point_looks_down_minus_z() {
        let cam = identity_cam(64, 64, 40.0);
        let r = generate_ray(&cam, 32.0, 32.0, 0.1, 4.0).unwrap();
        assert_eq!(r.dir, [0.0, 0.0, -1.0]);
    }

    #[test]
    fn directions_unit_norm() {
        let cam = identity_cam(48, 32, 25.0);
        for (u, v) in [(0.5, 0.5), (47.5, 31.5), (10.0, 20.0), (24.0, 16.0)] {
            let r = generate_ray(&cam, u, v, 0.1, 4.0).unwrap();
            let n = (r.dir[0] * r.dir[0] + r.dir[1] * r.dir[1] + r.dir[2] * r.dir[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn corner_of_90_degree_fov_at_45_degrees() {
        // fx = width/2 gives a 90-degree horizontal field of view: the ray
        // through u=0 satisfies tan(angle from axis) = |u-cx|/fx = 1
        let w = 64usize;
        let cam = identity_cam(w, w, w as f64 / 2.0);
        let r = generate_ray(&cam, 0.0, cam.cy, 0.1, 4.0).unwrap();
        let tan = (r.dir[0] / r.dir[2]).abs();
        assert!((tan - 1.0).abs() < 1e-12, "expected 45 degrees, tan={tan}");
    }

    #[test]
    fn rejects_degenerate_intrinsics_and_pose() {
        let mut c2w = [0.0; 16];
        c2w[0] = 1.0;
        c2w[5] = 1.0;
        c2w[10] = 1.0;
        c2w[15] = 1.0;
        assert!(Camera::new(0.0, 10.0, 8.0, 8.0, c2w, 16, 16).is_err());
        let mut skew = c2w;
        skew[0] = 2.0; // non-orthonormal rotation
        assert!(Camera::new(10.0, 10.0, 8.0, 8.0, skew, 16, 16).is_err());
    }

    #[test]
    fn orbit_camera_looks_at_origin() {
        let cam = orbit_camera(2.5, 0.7, 0.3, 40.0, 40.0, 48, 48).unwrap();
        let r = generate_ray(&cam, 24.0, 24.0, 0.1, 5.0).unwrap();
        // center ray must pass near the origin
        let t_closest = -(r.origin[0] * r.dir[0] + r.origin[1] * r.dir[1] + r.origin[2] * r.dir[2]);
        let p = r.at(t_closest);
        let dist = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!(dist < 1e-9, "center ray misses origin by {dist}");
    }
}
