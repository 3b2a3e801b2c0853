//! Point-cloud augmentation: horizontal flip and small global rotation
//! about the z-axis, applied consistently to points and labels.

use rand::Rng;

use super::{wrap_angle, ObjectLabel, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    /// Mirror across the x-z plane: y -> -y, yaw -> -yaw.
    HFlip,
    /// Rotation about the z-axis by `theta` radians.
    GlobalRotation { theta: f64 },
}

impl Augment {
    /// Draws a global rotation with theta uniform in [-5, 5] degrees.
    pub fn sample_rotation(rng: &mut impl Rng) -> Augment {
        let five = 5.0f64.to_radians();
        Augment::GlobalRotation {
            theta: rng.gen_range(-five..=five),
        }
    }
}

pub fn augment(cloud: &PointCloud, labels: &[ObjectLabel], mode: Augment) -> (PointCloud, Vec<ObjectLabel>) {
    match mode {
        Augment::HFlip => {
            let points = cloud
                .points
                .iter()
                .map(|p| Point { y: -p.y, ..*p })
                .collect();
            let labels = labels
                .iter()
                .map(|l| ObjectLabel {
                    center: [l.center[0], -l.center[1], l.center[2]],
                    yaw: wrap_angle(-l.yaw),
                    ..l.clone()
                })
                .collect();
            (PointCloud { points }, labels)
        }
        Augment::GlobalRotation { theta } => {
            let (s, c) = theta.sin_cos();
            let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
            let points = cloud
                .points
                .iter()
                .map(|p| {
                    let (x, y) = rot(p.x, p.y);
                    Point { x, y, ..*p }
                })
                .collect();
            let labels = labels
                .iter()
                .map(|l| {
                    let (x, y) = rot(l.center[0], l.center[1]);
                    ObjectLabel {
                        center: [x, y, l.center[2]],
                        yaw: wrap_angle(l.yaw + theta),
                        ..l.clone()
                    }
                })
                .collect();
            (PointCloud { points }, labels)
        }
    }
}
