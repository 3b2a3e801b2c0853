//! LiDAR data: point clouds, object labels, calibration, synthetic scene
//! generation and point-cloud augmentation.
//!
//! Coordinates follow the usual LiDAR frame: x forward, y left, z up,
//! meters. Object yaw is measured counterclockwise from +x and stored in
//! (-pi, pi]; the camera-frame `rotation_y` of KITTI labels is mapped via
//! `yaw = -rotation_y - pi/2`.

mod augment;
mod kitti;
mod synth;

pub use augment::{augment, Augment};
pub use kitti::{
    format_label_line, parse_calibration, parse_labels, read_point_cloud, write_calibration,
    write_labels, write_point_cloud,
};
pub(crate) use kitti::parse_label_text;
pub use synth::{synth_scene, synth_scene_seeded, SceneSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in [0, 1] after normalization.
    pub intensity: f64,
}

/// Unordered 3D points with reflectance, LiDAR frame, meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Oriented 3D object in the LiDAR frame. `center.z` is the ground-plane
/// center (the bottom face), not the volumetric center.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLabel {
    pub class_name: String,
    /// (x, y, z) meters, LiDAR frame, z at the bottom face.
    pub center: [f64; 3],
    /// (height, width, length) meters.
    pub dims: [f64; 3],
    /// Radians in (-pi, pi], counterclockwise from +x.
    pub yaw: f64,
    pub truncation: f64,
    pub occlusion: i32,
    /// Height of the 2D camera box in pixels; used only for difficulty
    /// filtering. Negative means unknown.
    pub bbox_height_px: f64,
}

impl ObjectLabel {
    pub fn height(&self) -> f64 {
        self.dims[0]
    }
    pub fn width(&self) -> f64 {
        self.dims[1]
    }
    pub fn length(&self) -> f64 {
        self.dims[2]
    }
}

/// Rigid velodyne-to-camera transform plus the rectifying rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Row-major 3x4 [R | t].
    pub velo_to_cam: [[f64; 4]; 3],
    /// Row-major 3x3 rectifying rotation.
    pub rect: [[f64; 3]; 3],
}

fn rotation_is_orthonormal(r: &[[f64; 3]; 3], tol: f64) -> bool {
    // R * R^T == I within tol.
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > tol {
                return false;
            }
        }
    }
    true
}

impl Calibration {
    pub fn new(velo_to_cam: [[f64; 4]; 3], rect: [[f64; 3]; 3]) -> Result<Self> {
        let r = [
            [velo_to_cam[0][0], velo_to_cam[0][1], velo_to_cam[0][2]],
            [velo_to_cam[1][0], velo_to_cam[1][1], velo_to_cam[1][2]],
            [velo_to_cam[2][0], velo_to_cam[2][1], velo_to_cam[2][2]],
        ];
        if !rotation_is_orthonormal(&r, 1e-6) || !rotation_is_orthonormal(&rect, 1e-6) {
            return Err(Error::Config(
                "calibration rotation blocks are not orthonormal within 1e-6".into(),
            ));
        }
        Ok(Calibration { velo_to_cam, rect })
    }

    /// The fixed transform used for synthetic data: x_cam = -y, y_cam = -z,
    /// z_cam = x, rectification identity.
    pub fn synthetic() -> Self {
        Calibration {
            velo_to_cam: [
                [0.0, -1.0, 0.0, 0.0],
                [0.0, 0.0, -1.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
            ],
            rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn cam_from_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let t = &self.velo_to_cam;
        let v = [
            t[0][0] * p[0] + t[0][1] * p[1] + t[0][2] * p[2] + t[0][3],
            t[1][0] * p[0] + t[1][1] * p[1] + t[1][2] * p[2] + t[1][3],
            t[2][0] * p[0] + t[2][1] * p[1] + t[2][2] * p[2] + t[2][3],
        ];
        let r = &self.rect;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn velo_from_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rect;
        // rect^T * p
        let v = [
            r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
            r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
            r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
        ];
        let t = &self.velo_to_cam;
        let d = [v[0] - t[0][3], v[1] - t[1][3], v[2] - t[2][3]];
        // R^T * (v - t)
        [
            t[0][0] * d[0] + t[1][0] * d[1] + t[2][0] * d[2],
            t[0][1] * d[0] + t[1][1] * d[1] + t[2][1] * d[2],
            t[0][2] * d[0] + t[1][2] * d[1] + t[2][2] * d[2],
        ]
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a % TAU;
    if r > PI {
        r -= TAU;
    } else if r <= -PI {
        r += TAU;
    }
    r
}

/// Camera rotation_y to LiDAR yaw.
pub fn yaw_from_rotation_y(rotation_y: f64) -> f64 {
    wrap_angle(-rotation_y - std::f64::consts::FRAC_PI_2)
}

/// LiDAR yaw back to camera rotation_y.
pub fn rotation_y_from_yaw(yaw: f64) -> f64 {
    wrap_angle(-yaw - std::f64::consts::FRAC_PI_2)
}


#[cfg(test)]
mod tests {
    use super::test_support::random_rotation;
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn camera_round_trip_with_random_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let t = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ];
            let rect = random_rotation(&mut rng);
            let velo_to_cam = [
                [r[0][0], r[0][1], r[0][2], t[0]],
                [r[1][0], r[1][1], r[1][2], t[1]],
                [r[2][0], r[2][1], r[2][2], t[2]],
            ];
            let calib = Calibration::new(velo_to_cam, rect).unwrap();
            let p = [
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-3.0..3.0),
            ];
            let q = calib.velo_from_cam(calib.cam_from_velo(p));
            for i in 0..3 {
                assert!((p[i] - q[i]).abs() < 1e-6, "round trip drifted: {p:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let bad = [
            [1.0, 0.1, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        let rect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Calibration::new(bad, rect).is_err());
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        assert!((wrap_angle(PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!(wrap_angle(2.0 * PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_y_mapping_matches_convention() {
        // rotation_y = -pi/2 faces along LiDAR +x, i.e. yaw 0.
        assert!(yaw_from_rotation_y(-PI / 2.0).abs() < 1e-12);
        for ry in [-3.0, -1.5, 0.0, 0.7, 2.9] {
            let yaw = yaw_from_rotation_y(ry);
            let back = rotation_y_from_yaw(yaw);
            assert!((wrap_angle(back - ry)).abs() < 1e-12);
        }
    }
}
