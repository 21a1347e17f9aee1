use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel centres sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Data(format!(
                "camera focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data("camera resolution must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Data(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Resolution of pyramid level `scale`: `ceil(dim / 2^scale)`.
    pub fn scaled_size(&self, scale: u32) -> (u32, u32) {
        let d = 1u32 << scale;
        (self.width.div_ceil(d), self.height.div_ceil(d))
    }

    /// Intrinsics scaled by `1/2^scale` with the matching pyramid resolution.
    pub fn at_scale(&self, scale: u32) -> CameraModel {
        let f = 1.0 / (1u64 << scale) as f64;
        let (width, height) = self.scaled_size(scale);
        CameraModel {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            width,
            height,
        }
    }
}

/// Camera for the sub-window `[u0, u0+w) × [v0, v0+h)` of the sensor.
pub fn crop_camera(camera: &CameraModel, origin: (u32, u32), size: (u32, u32)) -> Result<CameraModel> {
    let (u0, v0) = origin;
    let (w, h) = size;
    if w == 0 || h == 0 || u0 as u64 + w as u64 > camera.width as u64 || v0 as u64 + h as u64 > camera.height as u64 {
        return Err(Error::Data(format!(
            "crop window origin ({u0}, {v0}) size {w}x{h} exceeds {}x{} sensor",
            camera.width, camera.height
        )));
    }
    // the principal point may leave the crop window; only the sensor window is validated
    Ok(CameraModel {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx - u0 as f64,
        cy: camera.cy - v0 as f64,
        width: w,
        height: h,
    })
}

/// World-to-camera rigid transform, `p_cam = R·p_world + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Pose {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Data("pose rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-6 {
            return Err(Error::Data("pose rotation has determinant != +1".into()));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("pose translation is not finite".into()));
        }
        Ok(())
    }

    /// From a unit quaternion `(w, x, y, z)`, normalized on the way in.
    pub fn from_quaternion(q: [f64; 4], translation: [f64; 3]) -> Self {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Pose {
            rotation,
            translation,
        }
    }

    pub fn quaternion(&self) -> [f64; 4] {
        let m = &self.rotation;
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
        };
        if q[0] < 0.0 {
            q.map(|v| -v)
        } else {
            q
        }
    }

    /// Camera looking from `eye` at `target`; camera axes x right, y down, z forward.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Self {
        let fwd = normalize(sub(target, eye));
        let right = normalize(cross(fwd, up));
        let down = cross(fwd, right);
        let rotation = [right, down, fwd];
        let translation = [
            -dot(right, eye),
            -dot(down, eye),
            -dot(fwd, eye),
        ];
        Pose {
            rotation,
            translation,
        }
    }

    pub fn camera_center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 110.0, 64.0, 48.0, 128, 96).unwrap()
    }

    #[test]
    fn full_window_crop_is_identity() {
        assert_eq!(crop_camera(&cam(), (0, 0), (128, 96)).unwrap(), cam());
    }

    #[test]
    fn crop_shifts_principal_point() {
        let c = crop_camera(&cam(), (10, 20), (64, 64)).unwrap();
        assert_eq!((c.fx, c.fy), (100.0, 110.0));
        assert_eq!((c.cx, c.cy), (54.0, 28.0));
        assert_eq!((c.width, c.height), (64, 64));
    }

    #[test]
    fn crop_outside_sensor_fails() {
        assert!(crop_camera(&cam(), (100, 0), (64, 64)).is_err());
        assert!(crop_camera(&cam(), (0, 0), (0, 10)).is_err());
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn pyramid_sizes_use_ceil() {
        let c = CameraModel::new(1.0, 1.0, 0.0, 0.0, 17, 31).unwrap();
        assert_eq!(c.scaled_size(1), (9, 16));
        assert_eq!(c.scaled_size(3), (3, 4));
    }

    #[test]
    fn quaternion_round_trip() {
        let p = Pose::look_at([1.0, -2.0, 0.5], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        p.validate().unwrap();
        let q = p.quaternion();
        let back = Pose::from_quaternion(q, p.translation);
        for i in 0..3 {
            for j in 0..3 {
                assert!((back.rotation[i][j] - p.rotation[i][j]).abs() < 1e-12);
            }
        }
        let c = p.camera_center();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] + 2.0).abs() < 1e-12 && (c[2] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn double_crop_equals_summed_origin(
            u0 in 0u32..20, v0 in 0u32..20, u1 in 0u32..20, v1 in 0u32..20,
            w in 1u32..40, h in 1u32..30,
        ) {
            let c = cam();
            let first = crop_camera(&c, (u0, v0), (128 - u0, 96 - v0)).unwrap();
            let twice = crop_camera(&first, (u1, v1), (w, h)).unwrap();
            let once = crop_camera(&c, (u0 + u1, v0 + v1), (w, h)).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
