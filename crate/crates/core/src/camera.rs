//! Pinhole camera with OpenCV axes: x right, y down, z forward.

use crate::error::{Error, Result};
use crate::vec3::{self, Mat3};

/// Default near plane distance.
pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// 3x3 intrinsics, row-major.
    pub intrinsics: [[f64; 3]; 3],
    /// 4x4 world-to-camera transform, row-major.
    pub extrinsics: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
        near: f64,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            extrinsics,
            width,
            height,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image has zero size"));
        }
        if !(self.near > 0.0) {
            return Err(Error::invalid("near plane must be positive"));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let r = self.rotation();
        let rtr = vec3::mat3_mul(&vec3::mat3_transpose(&r), &r);
        let id = vec3::identity3();
        for i in 0..3 {
            for j in 0..3 {
                if (rtr[i][j] - id[i][j]).abs() > 1e-6 {
                    return Err(Error::invalid("extrinsic rotation is not orthonormal"));
                }
            }
        }
        if det3(&r) <= 0.0 {
            return Err(Error::invalid("extrinsic rotation has negative determinant"));
        }
        let all = self
            .intrinsics
            .iter()
            .flatten()
            .chain(self.extrinsics.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("camera matrix".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `fov_y` in radians.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = vec3::sub(target, eye);
        if vec3::norm(forward) == 0.0 {
            return Err(Error::invalid("eye and target coincide"));
        }
        let forward = vec3::normalize(forward);
        let mut right = vec3::cross(forward, up);
        if vec3::norm(right) < 1e-9 {
            // Up is parallel to the view direction; pick any perpendicular.
            let alt = if forward[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            right = vec3::cross(forward, alt);
        }
        let right = vec3::normalize(right);
        let down = vec3::cross(forward, right);
        let r = [right, down, forward];
        let t = vec3::scale(vec3::mat3_vec(&r, eye), -1.0);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let intrinsics = [
            [f, 0.0, width as f64 / 2.0],
            [0.0, f, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Self::new(intrinsics, compose_extrinsics(&r, t), width, height, DEFAULT_NEAR)
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    pub fn rotation(&self) -> Mat3 {
        let e = &self.extrinsics;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3]]
    }

    /// Camera center in world coordinates.
    pub fn origin(&self) -> [f64; 3] {
        let rt = vec3::mat3_transpose(&self.rotation());
        vec3::scale(vec3::mat3_vec(&rt, self.translation()), -1.0)
    }

    pub fn world_to_camera(&self, x: [f64; 3]) -> [f64; 3] {
        vec3::add(vec3::mat3_vec(&self.rotation(), x), self.translation())
    }

    /// World point at camera depth `depth` seen through image point `uv`.
    pub fn unproject(&self, uv: [f64; 2], depth: f64) -> [f64; 3] {
        let xc = [
            (uv[0] - self.cx()) / self.fx() * depth,
            (uv[1] - self.cy()) / self.fy() * depth,
            depth,
        ];
        let rt = vec3::mat3_transpose(&self.rotation());
        vec3::mat3_vec(&rt, vec3::sub(xc, self.translation()))
    }

    /// World-space ray direction through image point `uv`, scaled so its
    /// camera-space z component is 1.
    pub fn ray_direction(&self, uv: [f64; 2]) -> [f64; 3] {
        let dc = [
            (uv[0] - self.cx()) / self.fx(),
            (uv[1] - self.cy()) / self.fy(),
            1.0,
        ];
        vec3::mat3_vec(&vec3::mat3_transpose(&self.rotation()), dc)
    }

    /// The same view after moving the whole scene by `offset`.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let r = self.rotation();
        let t = vec3::sub(self.translation(), vec3::mat3_vec(&r, offset));
        Self {
            extrinsics: compose_extrinsics(&r, t),
            ..self.clone()
        }
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

pub fn compose_extrinsics(r: &Mat3, t: [f64; 3]) -> [[f64; 4]; 4] {
    [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn det3(m: &Mat3) -> f64 {
    vec3::dot(m[0], vec3::cross(m[1], m[2]))
}

/// Pixel coordinates and camera depth of a world point. Points behind the
/// camera come back with negative depth; callers cull.
pub fn project_center(cam: &Camera, x: [f64; 3]) -> ([f64; 2], f64) {
    let xc = cam.world_to_camera(x);
    (
        [
            cam.fx() * xc[0] / xc[2] + cam.cx(),
            cam.fy() * xc[1] / xc[2] + cam.cy(),
        ],
        xc[2],
    )
}
