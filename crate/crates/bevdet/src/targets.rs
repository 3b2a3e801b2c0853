//! Per-pixel training targets from object labels.
//!
//! Each in-grid object stamps a 3x3 keypoint footprint at its ground-plane
//! center: the class id, the orientation bin of its yaw, and the
//! log-dimension regression triple. Everything else is background.
//!
//! Orientation is direction-free: yaw angles fold onto [0, 180) degrees
//! and quantize into 20 bins of 9 degrees; bin 0 is reserved for
//! background.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bev::{read_tgt_planes, write_tgt_planes, BevGrid, GridPos};
use crate::error::{Error, Result};
use crate::lidar::ObjectLabel;

pub const ROTATION_BINS: usize = 21;
pub const BIN_WIDTH_DEG: f64 = 9.0;

/// Maps class names to contiguous ids; background is always 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
}

impl Default for ClassTable {
    fn default() -> Self {
        ClassTable::new(&["Car"])
    }
}

impl ClassTable {
    pub fn new(names: &[&str]) -> Self {
        ClassTable {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        self.names.len() + 1
    }

    /// Class id for a name, if the table knows it. Background is 0.
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        if id == 0 {
            return Some("Background");
        }
        self.names.get(id - 1).map(|s| s.as_str())
    }
}

/// Per-pixel training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub rows: usize,
    pub cols: usize,
    /// Class ids, background 0.
    pub class_map: Vec<i32>,
    /// 3 planes: log height, log width, log length; 0 outside keypoints.
    pub box_map: [Vec<f64>; 3],
    /// Rotation bin ids in [0, 21); 0 is background.
    pub rotbin_map: Vec<i32>,
    /// Labels whose center fell outside the grid.
    pub skipped: usize,
}

impl TargetMaps {
    pub fn background(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        TargetMaps {
            rows,
            cols,
            class_map: vec![0; n],
            box_map: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            rotbin_map: vec![0; n],
            skipped: 0,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Fraction of pixels per class id, over `num_classes` ids.
    pub fn class_frequencies(&self, num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; num_classes];
        for &c in &self.class_map {
            counts[c as usize] += 1;
        }
        let total = self.class_map.len() as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Fraction of pixels per rotation bin.
    pub fn rotbin_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; ROTATION_BINS];
        for &b in &self.rotbin_map {
            counts[b as usize] += 1;
        }
        let total = self.rotbin_map.len() as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Folds a yaw in (-180, 180] degrees onto [0, 180): negative angles gain
/// 180, and 180 itself is the same orientation as 0.
pub fn map_angle(phi_deg: f64) -> f64 {
    assert!(
        phi_deg > -180.0 - 1e-9 && phi_deg <= 180.0 + 1e-9,
        "map_angle input {phi_deg} outside (-180, 180]"
    );
    let folded = if phi_deg >= 0.0 { phi_deg } else { 180.0 + phi_deg };
    if folded >= 180.0 {
        folded - 180.0
    } else {
        folded
    }
}

/// Bin id in [1, 20] for a folded angle in [0, 180).
pub fn angle_to_bin(phi_new_deg: f64) -> usize {
    debug_assert!((0.0..180.0).contains(&phi_new_deg));
    let bin = 1 + (phi_new_deg / BIN_WIDTH_DEG).floor() as usize;
    bin.min(20)
}

/// Center angle of an object bin in degrees.
pub fn bin_to_angle(bin: usize) -> f64 {
    assert!(
        (1..ROTATION_BINS).contains(&bin),
        "bin {bin} has no angle; background bin 0 is not an orientation"
    );
    (bin as f64 - 1.0) * BIN_WIDTH_DEG + BIN_WIDTH_DEG / 2.0
}

/// Builds target maps for one frame.
///
/// Each label whose center lies in the grid stamps the 3x3 neighborhood
/// around its center pixel. Overlapping stamps are resolved by
/// nearer-center-wins. Labels with non-positive dimensions are rejected;
/// labels with unknown class names or out-of-grid centers are counted in
/// `skipped`.
pub fn make_targets(
    labels: &[ObjectLabel],
    grid: &BevGrid,
    classes: &ClassTable,
) -> Result<TargetMaps> {
    let mut maps = TargetMaps::background(grid.rows, grid.cols);
    // distance from stamped pixel's world center to the owning label center
    let mut owner_dist: BTreeMap<usize, f64> = BTreeMap::new();

    for label in labels {
        if label.dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::BadLabel(format!(
                "non-positive dimensions {:?} on {}",
                label.dims, label.class_name
            )));
        }
        let Some(class_id) = classes.id_of(&label.class_name) else {
            maps.skipped += 1;
            continue;
        };
        let GridPos::Inside { row, col } = grid.world_to_pixel(label.center[0], label.center[1])
        else {
            maps.skipped += 1;
            continue;
        };

        let bin = angle_to_bin(map_angle(label.yaw.to_degrees())) as i32;
        let logs = [label.dims[0].ln(), label.dims[1].ln(), label.dims[2].ln()];

        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || c < 0 || r >= grid.rows as i64 || c >= grid.cols as i64 {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                let i = maps.idx(r, c);
                let (px, py) = grid.pixel_to_world(r, c);
                let dist = (px - label.center[0]).hypot(py - label.center[1]);
                if let Some(&prev) = owner_dist.get(&i) {
                    if dist >= prev {
                        continue;
                    }
                }
                owner_dist.insert(i, dist);
                maps.class_map[i] = class_id as i32;
                maps.rotbin_map[i] = bin;
                for k in 0..3 {
                    maps.box_map[k][i] = logs[k];
                }
            }
        }
    }
    Ok(maps)
}

/// Writes the `TGT1` variant of the raster format: integer planes (class,
/// rotation bin) as little-endian i32, then the three box planes as f32.
pub fn write_targets(path: &Path, maps: &TargetMaps) -> Result<()> {
    write_tgt_planes(
        path,
        maps.rows,
        maps.cols,
        &[&maps.class_map, &maps.rotbin_map],
        &[&maps.box_map[0], &maps.box_map[1], &maps.box_map[2]],
    )
}

pub fn read_targets(path: &Path) -> Result<TargetMaps> {
    let (rows, cols, mut ints, mut floats) = read_tgt_planes(path, 2, 3)?;
    let rotbin_map = ints.pop().unwrap();
    let class_map = ints.pop().unwrap();
    let l = floats.pop().unwrap();
    let w = floats.pop().unwrap();
    let h = floats.pop().unwrap();
    Ok(TargetMaps {
        rows,
        cols,
        class_map,
        box_map: [h, w, l],
        rotbin_map,
        skipped: 0,
    })
}
