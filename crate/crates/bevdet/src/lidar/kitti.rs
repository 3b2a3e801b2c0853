//! KITTI file formats: velodyne `.bin` point clouds, `label_2` text labels
//! and `calib` matrix files.

use std::fs;
use std::path::Path;

use super::{yaw_from_rotation_y, Calibration, ObjectLabel, Point, PointCloud};
use crate::error::{Error, Result};

/// Reads a velodyne `.bin`: little-endian f32 quadruplets (x, y, z,
/// intensity). Intensity is clamped to [0, 1]; non-finite values are
/// rejected with the offending point index.
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::malformed(
            path,
            format!("size {} is not a multiple of 16", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, quad) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes(quad[o..o + 4].try_into().unwrap()) as f64;
        let (x, y, z, intensity) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intensity.is_finite()) {
            return Err(Error::malformed(path, format!("non-finite value at point {i}")));
        }
        points.push(Point {
            x,
            y,
            z,
            intensity: intensity.clamp(0.0, 1.0),
        });
    }
    Ok(PointCloud { points })
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a KITTI label file into LiDAR-frame labels. Lines carry 15
/// whitespace-separated fields (an optional 16th score field is ignored);
/// `DontCare` entries are dropped.
pub fn parse_labels(path: &Path, calib: &Calibration) -> Result<Vec<ObjectLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_text(&text, calib)
}

pub(crate) fn parse_label_text(text: &str, calib: &Calibration) -> Result<Vec<ObjectLabel>> {
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::Parse {
                line: lineno + 1,
                reason: format!("expected 15 fields, got {}", fields.len()),
            });
        }
        if fields[0] == "DontCare" {
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                reason: format!("field {i} is not a number: {:?}", fields[i]),
            })
        };
        let truncation = num(1)?;
        let occlusion = num(2)? as i32;
        let (y1, y2) = (num(5)?, num(7)?);
        let dims = [num(8)?, num(9)?, num(10)?]; // h, w, l
        let cam = [num(11)?, num(12)?, num(13)?];
        let rotation_y = num(14)?;

        let center = calib.velo_from_cam(cam);
        labels.push(ObjectLabel {
            class_name: fields[0].to_string(),
            center,
            dims,
            yaw: yaw_from_rotation_y(rotation_y),
            truncation,
            occlusion,
            bbox_height_px: y2 - y1,
        });
    }
    Ok(labels)
}

/// Formats one label back into a KITTI line (the inverse of
/// [`parse_labels`]); alpha and the 2D box left/right are synthesized from
/// available fields where KITTI would compute them from the image.
pub fn format_label_line(label: &ObjectLabel, calib: &Calibration) -> String {
    let cam = calib.cam_from_velo(label.center);
    let ry = super::rotation_y_from_yaw(label.yaw);
    // 2D box: only the height matters downstream (difficulty filtering).
    let (y1, y2) = if label.bbox_height_px >= 0.0 {
        (100.0, 100.0 + label.bbox_height_px)
    } else {
        (-1.0, -1.0)
    };
    format!(
        "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.6}",
        label.class_name,
        label.truncation,
        label.occlusion,
        -10.0, // alpha unobserved
        0.0,
        y1,
        50.0,
        y2,
        label.dims[0],
        label.dims[1],
        label.dims[2],
        cam[0],
        cam[1],
        cam[2],
        ry
    )
}

pub fn write_labels(path: &Path, labels: &[ObjectLabel], calib: &Calibration) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&format_label_line(l, calib));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a KITTI calib file: lines `Tr_velo_to_cam: <12 floats>` and
/// `R0_rect: <9 floats>` (other lines ignored).
pub fn parse_calibration(path: &Path) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut velo_to_cam = None;
    let mut rect = None;
    for (lineno, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let parse_floats = |rest: &str, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: lineno + 1,
                    reason: format!("non-numeric value in {key}"),
                })?;
            if vals.len() != n {
                return Err(Error::Parse {
                    line: lineno + 1,
                    reason: format!("{key}: expected {n} values, got {}", vals.len()),
                });
            }
            Ok(vals)
        };
        match key.trim() {
            "Tr_velo_to_cam" => {
                let v = parse_floats(rest, 12)?;
                velo_to_cam = Some([
                    [v[0], v[1], v[2], v[3]],
                    [v[4], v[5], v[6], v[7]],
                    [v[8], v[9], v[10], v[11]],
                ]);
            }
            "R0_rect" => {
                let v = parse_floats(rest, 9)?;
                rect = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
            }
            _ => {}
        }
    }
    match (velo_to_cam, rect) {
        (Some(t), Some(r)) => Calibration::new(t, r),
        _ => Err(Error::malformed(path, "missing Tr_velo_to_cam or R0_rect line")),
    }
}

pub fn write_calibration(path: &Path, calib: &Calibration) -> Result<()> {
    let mut text = String::from("Tr_velo_to_cam:");
    for row in &calib.velo_to_cam {
        for v in row {
            text.push_str(&format!(" {v:.12e}"));
        }
    }
    text.push_str("\nR0_rect:");
    for row in &calib.rect {
        for v in row {
            text.push_str(&format!(" {v:.12e}"));
        }
    }
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn write_temp(bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        fs::write(&path, bytes).unwrap();
        (dir, path)
    }

    #[test]
    fn decodes_two_points_exactly() {
        let vals: [f32; 8] = [1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.25];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let (_d, path) = write_temp(&bytes);
        let cloud = read_point_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(
            cloud.points[0],
            Point { x: 1.0, y: 2.0, z: 3.0, intensity: 0.5 }
        );
        assert_eq!(
            cloud.points[1],
            Point { x: 4.0, y: 5.0, z: 6.0, intensity: 0.25 }
        );
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let (_d, path) = write_temp(&[]);
        assert!(read_point_cloud(&path).unwrap().is_empty());
    }

    #[test]
    fn non_multiple_of_16_is_malformed() {
        let (_d, path) = write_temp(&[0u8; 20]);
        match read_point_cloud(&path) {
            Err(Error::MalformedFile { reason, .. }) => assert!(reason.contains("multiple of 16")),
            other => panic!("expected malformed-file error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_point_reports_index() {
        let vals: [f32; 8] = [1.0, 2.0, 3.0, 0.5, f32::NAN, 5.0, 6.0, 0.25];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let (_d, path) = write_temp(&bytes);
        match read_point_cloud(&path) {
            Err(Error::MalformedFile { reason, .. }) => assert!(reason.contains("point 1")),
            other => panic!("expected malformed-file error, got {other:?}"),
        }
    }

    #[test]
    fn identity_ish_calib_maps_rotation_y_to_zero_yaw() {
        // With the synthetic transform, rotation_y = -pi/2 must give yaw 0.
        let calib = Calibration::synthetic();
        let line = format!(
            "Car 0.00 0 0.0 0.0 100.0 50.0 140.0 1.5 1.6 3.9 -3.0 1.73 10.0 {}",
            -PI / 2.0
        );
        let labels = parse_label_text(&line, &calib).unwrap();
        assert_eq!(labels.len(), 1);
        assert!(labels[0].yaw.abs() < 1e-9);
        // cam (-3, 1.73, 10) -> velo (10, 3, -1.73)
        assert!((labels[0].center[0] - 10.0).abs() < 1e-9);
        assert!((labels[0].center[1] - 3.0).abs() < 1e-9);
        assert!((labels[0].center[2] + 1.73).abs() < 1e-9);
        assert!((labels[0].bbox_height_px - 40.0).abs() < 1e-9);
    }

    #[test]
    fn dontcare_lines_are_dropped() {
        let calib = Calibration::synthetic();
        let text = "DontCare -1 -1 -10 500 160 560 190 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    Car 0.0 0 0.0 0 100 50 140 1.5 1.6 3.9 0.0 1.0 10.0 0.0\n";
        let labels = parse_label_text(text, &calib).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].class_name, "Car");
    }

    #[test]
    fn wrong_field_count_reports_line_number() {
        let calib = Calibration::synthetic();
        let text = "Car 0.0 0 0.0 0 100 50 140 1.5 1.6 3.9 0.0 1.0 10.0 0.0\nCar 1 2 3\n";
        match parse_label_text(text, &calib) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_line_round_trip() {
        let calib = Calibration::synthetic();
        let label = ObjectLabel {
            class_name: "Car".into(),
            center: [12.3456, -4.21, -1.6789],
            dims: [1.5, 1.66, 3.92],
            yaw: 0.7321,
            truncation: 0.0,
            occlusion: 1,
            bbox_height_px: 42.0,
        };
        let line = format_label_line(&label, &calib);
        let parsed = parse_label_text(&line, &calib).unwrap();
        assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        for i in 0..3 {
            assert!((p.center[i] - label.center[i]).abs() < 1e-3, "center {i}");
            assert!((p.dims[i] - label.dims[i]).abs() < 1e-3, "dims {i}");
        }
        assert!((p.yaw - label.yaw).abs() < 1e-4);
        assert_eq!(p.occlusion, 1);
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        let calib = Calibration::synthetic();
        write_calibration(&path, &calib).unwrap();
        let loaded = parse_calibration(&path).unwrap();
        assert_eq!(loaded, calib);
    }
}
