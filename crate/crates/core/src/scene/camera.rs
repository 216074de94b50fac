use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera. Camera space looks down +z with x right and y down; pixel
/// `(u, v)` is evaluated at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// On-disk camera record: intrinsics plus a 4x4 world-to-camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub world_to_camera: [[f64; 4]; 4],
}

fn default_near() -> f64 {
    0.01
}

fn default_far() -> f64 {
    100.0
}

impl Camera {
    pub fn identity(width: usize, height: usize, f: f64) -> Self {
        Camera {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: default_near(),
            far: default_far(),
        }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up on screen.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        f: f64,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye))?;
        let down = [-up[0], -up[1], -up[2]];
        let right = normalize(cross(down, forward))?;
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = [-dot(right, eye), -dot(down, eye), -dot(forward, eye)];
        Ok(Camera {
            rotation,
            translation,
            ..Camera::identity(width, height, f)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(
                        "camera rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidArgument(format!(
                "bad clip range near={} far={}",
                self.near, self.far
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("bad camera intrinsics".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            dot(r[0], *p) + t[0],
            dot(r[1], *p) + t[1],
            dot(r[2], *p) + t[2],
        ]
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Same camera moved by a world-space offset.
    pub fn translated(&self, offset: [f64; 3]) -> Camera {
        let r = &self.rotation;
        let mut cam = self.clone();
        for i in 0..3 {
            cam.translation[i] -= dot(r[i], offset);
        }
        cam
    }

    pub fn to_json(&self) -> CameraJson {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.rotation[i]);
            m[i][3] = self.translation[i];
        }
        m[3][3] = 1.0;
        CameraJson {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            near: self.near,
            far: self.far,
            world_to_camera: m,
        }
    }

    pub fn from_json(j: &CameraJson) -> Result<Self> {
        let m = &j.world_to_camera;
        let mut rotation = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            rotation[i].copy_from_slice(&m[i][..3]);
            translation[i] = m[i][3];
        }
        let cam = Camera {
            rotation,
            translation,
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            near: j.near,
            far: j.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(a, a).sqrt();
    if n < 1e-12 {
        return Err(Error::InvalidArgument(
            "degenerate camera orientation".into(),
        ));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}
