//! Post-processing: head outputs to oriented 3D detections.
//!
//! A 3x3 strict-maximum window suppression picks one pixel per group of
//! neighboring keypoint responses; box dimensions are exponentiated back
//! from log space, yaw comes from the best rotation bin's center, and the
//! pixel converts to world coordinates through the grid transform.

use std::fmt::Write as _;
use std::path::Path;

use crate::bev::{BevGrid, BevImage};
use crate::error::{Error, Result};
use crate::lidar::{rotation_y_from_yaw, Calibration};
use crate::model::Heads;
use crate::nn::{softmax_channels, Tensor4};
use crate::targets::{bin_to_angle, ClassTable, ROTATION_BINS};

/// One decoded oriented box in the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    /// Foreground probability at the keypoint, in [0, 1].
    pub score: f64,
    /// (x, y, z) meters; z is the decoded surface height at the keypoint,
    /// or 0 when no BEV frame was supplied.
    pub center: [f64; 3],
    /// (height, width, length) meters.
    pub dims: [f64; 3],
    /// Degrees in [0, 180); heading-free orientation.
    pub yaw_deg: f64,
}

/// A keypoint surviving window suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub score: f64,
}

/// 3x3 strict-maximum suppression over foreground probability.
///
/// A pixel survives when its best non-background probability is at least
/// `threshold` and strictly exceeds every neighbor's, with equal scores
/// broken toward the smaller (row, col). Results are sorted by descending
/// score, ties again by (row, col).
pub fn window_nms(class_probs: &Tensor4, threshold: f64) -> Vec<Keypoint> {
    assert_eq!(class_probs.batch(), 1, "window_nms operates on a single frame");
    assert!(
        class_probs.channels() >= 2,
        "need background + at least one class"
    );
    let (c, h, w) = (class_probs.channels(), class_probs.rows(), class_probs.cols());

    // Foreground score and class per pixel.
    let mut score = vec![0.0f64; h * w];
    let mut class = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = 1;
            for ch in 1..c {
                let p = class_probs.at(0, ch, y, x);
                if p > best {
                    best = p;
                    best_c = ch;
                }
            }
            score[y * w + x] = best;
            class[y * w + x] = best_c;
        }
    }

    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = score[y * w + x];
            if s < threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let ns = score[ny as usize * w + nx as usize];
                    if ns > s || (ns == s && (ny as usize, nx as usize) < (y, x)) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                out.push(Keypoint {
                    row: y,
                    col: x,
                    class_id: class[y * w + x],
                    score: s,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.row, a.col).cmp(&(b.row, b.col)))
    });
    out
}

/// Decode statistics worth surfacing to callers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Keypoints whose rotation argmax was the background bin; their yaw
    /// fell back to the best object bin.
    pub background_rotation_fallbacks: usize,
}

/// Decodes head outputs into detections for a single frame.
///
/// `bev` supplies the height plane used to recover z; without it z = 0.
pub fn decode(
    heads: &Heads,
    grid: &BevGrid,
    threshold: f64,
    bev: Option<&BevImage>,
) -> (Vec<Detection>, DecodeStats) {
    assert_eq!(heads.class_logits.batch(), 1, "decode operates on a single frame");
    assert_eq!(
        (heads.class_logits.rows(), heads.class_logits.cols()),
        (grid.rows, grid.cols),
        "head resolution does not match grid"
    );
    let probs = softmax_channels(&heads.class_logits);
    let keypoints = window_nms(&probs, threshold);

    let mut stats = DecodeStats::default();
    let mut detections = Vec::with_capacity(keypoints.len());
    for kp in keypoints {
        let (x, y) = grid.pixel_to_world(kp.row, kp.col);
        let z = bev
            .map(|img| {
                let i = img.idx(kp.row, kp.col);
                grid.denormalize_height(img.height[i])
            })
            .unwrap_or(0.0);

        let dims = [
            heads.box_pred.at(0, 0, kp.row, kp.col).exp(),
            heads.box_pred.at(0, 1, kp.row, kp.col).exp(),
            heads.box_pred.at(0, 2, kp.row, kp.col).exp(),
        ];

        // Best rotation bin; background argmax falls back to the best
        // object bin and is counted.
        let mut best_bin = 0;
        let mut best_v = f64::NEG_INFINITY;
        for b in 0..ROTATION_BINS {
            let v = heads.rot_logits.at(0, b, kp.row, kp.col);
            if v > best_v {
                best_v = v;
                best_bin = b;
            }
        }
        if best_bin == 0 {
            stats.background_rotation_fallbacks += 1;
            let mut alt = 1;
            let mut alt_v = f64::NEG_INFINITY;
            for b in 1..ROTATION_BINS {
                let v = heads.rot_logits.at(0, b, kp.row, kp.col);
                if v > alt_v {
                    alt_v = v;
                    alt = b;
                }
            }
            best_bin = alt;
        }

        detections.push(Detection {
            class_id: kp.class_id,
            score: kp.score,
            center: [x, y, z],
            dims,
            yaw_deg: bin_to_angle(best_bin),
        });
    }
    (detections, stats)
}

/// KITTI result lines: unestimated 2D-box fields are -1, alpha is -10,
/// location converts back to camera coordinates, score keeps 2 decimals.
pub fn detections_to_kitti(
    dets: &[Detection],
    calib: &Calibration,
    classes: &ClassTable,
) -> String {
    let mut out = String::new();
    for d in dets {
        let cam = calib.cam_from_velo(d.center);
        let ry = rotation_y_from_yaw(d.yaw_deg.to_radians());
        let name = classes.name_of(d.class_id).unwrap_or("Unknown");
        let _ = writeln!(
            out,
            "{name} -1 -1 -10 -1 -1 -1 -1 {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.6} {:.2}",
            d.dims[0], d.dims[1], d.dims[2], cam[0], cam[1], cam[2], ry, d.score
        );
    }
    out
}

/// CSV rows `frame,class,score,x,y,z,H,W,L,yaw_deg`, one line per
/// detection, with header.
pub fn detections_csv_header() -> &'static str {
    "frame,class,score,x,y,z,H,W,L,yaw_deg"
}

pub fn detection_csv_row(frame: &str, d: &Detection, classes: &ClassTable) -> String {
    format!(
        "{frame},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.3}",
        classes.name_of(d.class_id).unwrap_or("Unknown"),
        d.score,
        d.center[0],
        d.center[1],
        d.center[2],
        d.dims[0],
        d.dims[1],
        d.dims[2],
        d.yaw_deg
    )
}

/// Parses the CSV produced by [`detection_csv_row`] grouped by frame key.
pub fn parse_detections_csv(path: &Path) -> Result<Vec<(String, Detection)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let classes = ClassTable::default();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line.starts_with("frame,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse {
                line: lineno + 1,
                reason: format!("expected 10 csv fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                reason: format!("bad number {:?}", fields[i]),
            })
        };
        out.push((
            fields[0].to_string(),
            Detection {
                class_id: classes.id_of(fields[1]).unwrap_or(1),
                score: num(2)?,
                center: [num(3)?, num(4)?, num(5)?],
                dims: [num(6)?, num(7)?, num(8)?],
                yaw_deg: num(9)?,
            },
        ));
    }
    Ok(out)
}

/// Renders target maps as saturated one-hot heads, the test-side inverse of
/// the decoder. Oracle helper shared by round-trip tests and the `eval`
/// pipeline checks.
pub fn targets_to_oracle_heads(maps: &crate::targets::TargetMaps, num_classes: usize) -> Heads {
    const HOT: f64 = 40.0;
    let (h, w) = (maps.rows, maps.cols);
    let mut class_logits = Tensor4::zeros([1, num_classes, h, w]);
    let mut box_pred = Tensor4::zeros([1, 3, h, w]);
    let mut rot_logits = Tensor4::zeros([1, ROTATION_BINS, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            class_logits.set(0, maps.class_map[i] as usize, y, x, HOT);
            rot_logits.set(0, maps.rotbin_map[i] as usize, y, x, HOT);
            for k in 0..3 {
                box_pred.set(0, k, y, x, maps.box_map[k][i]);
            }
        }
    }
    Heads {
        class_logits,
        box_pred,
        rot_logits,
    }
}
