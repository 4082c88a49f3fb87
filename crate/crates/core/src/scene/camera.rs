use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth below which a camera-frame point counts as behind the camera (meters).
pub const NEAR_EPS: f64 = 1e-6;

/// Rigid world-to-camera transform: `p_cam = rotation * p_world + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation by `angle` radians about the camera y axis, then `translation`.
    pub fn yaw(angle: f64, translation: [f64; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Camera frame to world frame.
    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let q = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }

    fn check(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::InvalidInput("camera rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("camera rotation determinant {det} != 1")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("camera translation is not finite".into()));
        }
        Ok(())
    }
}

/// Pinhole camera with a raster of `width x height` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

/// Where a point lands on the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pixel {
    Inside { u: f64, v: f64 },
    Outside { u: f64, v: f64 },
    Behind,
}

impl Pixel {
    /// Raster cell `(column, row)` by rounding to the nearest pixel center
    /// (ties round up). `None` when the point is behind, outside, or rounds
    /// off the raster edge.
    pub fn cell(self, width: usize, height: usize) -> Option<(usize, usize)> {
        match self {
            Pixel::Inside { u, v } => {
                let col = (u + 0.5).floor() as usize;
                let row = (v + 0.5).floor() as usize;
                (col < width && row < height).then_some((col, row))
            }
            _ => None,
        }
    }
}

impl Camera {
    /// Desk-scale default intrinsics with the given pose.
    pub fn desk(pose: Pose) -> Self {
        Self {
            fx: 80.0,
            fy: 80.0,
            cx: 48.0,
            cy: 36.0,
            width: 96,
            height: 72,
            pose,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput("principal point outside the raster".into()));
        }
        self.pose.check()
    }

    /// Projects a world-frame point.
    pub fn project_point(&self, p: [f64; 3]) -> Result<Pixel> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite point {p:?}")));
        }
        let [x, y, z] = self.pose.apply(p);
        if z <= NEAR_EPS {
            return Ok(Pixel::Behind);
        }
        let u = self.fx * x / z + self.cx;
        let v = self.fy * y / z + self.cy;
        if u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64 {
            Ok(Pixel::Inside { u, v })
        } else {
            Ok(Pixel::Outside { u, v })
        }
    }
}

/// Projects every point through `camera`.
pub fn project(points: &[[f64; 3]], camera: &Camera) -> Result<Vec<Pixel>> {
    camera.validate()?;
    points.iter().map(|&p| camera.project_point(p)).collect()
}
