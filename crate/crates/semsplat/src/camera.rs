//! Pinhole camera with a rigid world-to-camera transform. Camera space is
//! right-handed with +z looking into the screen; pixel (0,0) is the top-left
//! corner and pixel centers sit at half-integer coordinates.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rigid transform.
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        let r = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let orth = r.transpose() * r;
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((orth[(i, j)] - want).abs());
            }
        }
        if max_dev > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "world-to-camera rotation block not orthonormal (max deviation {max_dev:.3e})"
            )));
        }
        Ok(Camera {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Rotation block of the view transform.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-space camera center.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Transforms a world point into camera space.
    pub fn to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Projects a camera-space point to pixel coordinates.
    pub fn project_cam(&self, t: Vector3<f64>) -> (f64, f64) {
        (
            self.fx * t.x / t.z + self.cx,
            self.fy * t.y / t.z + self.cy,
        )
    }

    /// Full perspective projection world → pixels, plus camera depth.
    pub fn project(&self, p: Vector3<f64>) -> (f64, f64, f64) {
        let t = self.to_camera(p);
        let (u, v) = self.project_cam(t);
        (u, v, t.z)
    }

    /// Camera at `eye` looking at `target` with `up` roughly vertical.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        // Rows of the rotation: camera x = right, y = down, z = forward.
        let mut w2c = Matrix4::identity();
        for k in 0..3 {
            w2c[(0, k)] = right[k];
            w2c[(1, k)] = down[k];
            w2c[(2, k)] = fwd[k];
        }
        let t = Vector3::new(-right.dot(&eye), -down.dot(&eye), -fwd.dot(&eye));
        w2c[(0, 3)] = t.x;
        w2c[(1, 3)] = t.y;
        w2c[(2, 3)] = t.z;
        Camera::new(
            w2c,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 1.0, -3.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            100.0,
            64,
            64,
        )
        .unwrap();
        let (u, v, z) = cam.project(Vector3::new(0.0, 1.0, 0.0));
        assert_abs_diff_eq!(u, 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(z, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn camera_position_round_trips() {
        let eye = Vector3::new(1.0, 2.0, -3.0);
        let cam = Camera::look_at(
            eye,
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            32,
            32,
        )
        .unwrap();
        let p = cam.position();
        assert_abs_diff_eq!(p.x, eye.x, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, eye.y, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, eye.z, epsilon = 1e-12);
        // A point in front of the camera has positive depth.
        let t = cam.to_camera(Vector3::new(0.0, 1.0, 0.0));
        assert!(t.z > 0.0);
    }

    #[test]
    fn rejects_bad_focal_and_rotation() {
        assert!(Camera::new(Matrix4::identity(), 0.0, 1.0, 0.0, 0.0, 8, 8).is_err());
        let mut skewed = Matrix4::identity();
        skewed[(0, 1)] = 0.1;
        assert!(Camera::new(skewed, 10.0, 10.0, 4.0, 4.0, 8, 8).is_err());
    }
}
