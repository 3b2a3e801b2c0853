//! Bird's-eye-view rasterization.
//!
//! A point cloud becomes a 3-channel raster over the ground plane: a
//! normalized max-height plane, a binary occupancy plane and an intensity
//! plane that follows the highest point of each cell. Row 0 is the far end
//! of the x range (`x = x_max - r * cell`), so the image reads like a
//! top-down map with the sensor at the bottom.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lidar::PointCloud;

/// Grid geometry of the BEV raster.
///
/// x spans [0, x_max), y spans [-y_half, y_half), both at `cell` meters per
/// pixel; heights are clipped to [z_min, z_max] before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub x_max: f64,
    pub y_half: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Cell resolution in meters per pixel.
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        BevGrid {
            x_max: 51.2,
            y_half: 12.8,
            z_min: -2.73,
            z_max: 1.27,
            cell: 0.1,
            rows: 512,
            cols: 256,
        }
    }
}

/// Grid index or the out-of-grid marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPos {
    Inside { row: usize, col: usize },
    Outside,
}

impl BevGrid {
    pub fn new(x_max: f64, y_half: f64, z_min: f64, z_max: f64, cell: f64) -> Result<Self> {
        let rows_f = x_max / cell;
        let cols_f = 2.0 * y_half / cell;
        let rows = rows_f.round() as usize;
        let cols = cols_f.round() as usize;
        if (rows_f - rows as f64).abs() > 1e-9 || (cols_f - cols as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "grid extent must be an exact multiple of the cell size: {x_max} x {}, cell {cell}",
                2.0 * y_half
            )));
        }
        if z_max <= z_min {
            return Err(Error::Config("z_max must exceed z_min".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Config("grid must have at least one cell".into()));
        }
        Ok(BevGrid {
            x_max,
            y_half,
            z_min,
            z_max,
            cell,
            rows,
            cols,
        })
    }

    /// 64x32 grid at 0.1 m used by the desk-scale training setup.
    pub fn desk() -> Self {
        BevGrid::new(6.4, 1.6, -2.73, 1.27, 0.1).unwrap()
    }

    pub fn z_span(&self) -> f64 {
        self.z_max - self.z_min
    }

    /// World (x, y) to pixel indices; out-of-grid is a value, not an error.
    ///
    /// Cells are half-open [lo, hi) in world coordinates, so a point
    /// exactly on a cell boundary belongs to the cell on its low side
    /// (e.g. y = 0 falls in the column whose range starts at 0).
    pub fn world_to_pixel(&self, x: f64, y: f64) -> GridPos {
        let r = ((self.x_max - x) / self.cell).ceil() - 1.0;
        let c = ((self.y_half - y) / self.cell).ceil() - 1.0;
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            GridPos::Outside
        } else {
            GridPos::Inside {
                row: r as usize,
                col: c as usize,
            }
        }
    }

    /// Pixel indices to the world coordinates of the cell center.
    pub fn pixel_to_world(&self, row: usize, col: usize) -> (f64, f64) {
        assert!(
            row < self.rows && col < self.cols,
            "pixel ({row}, {col}) outside {}x{} grid",
            self.rows,
            self.cols
        );
        (
            self.x_max - (row as f64 + 0.5) * self.cell,
            self.y_half - (col as f64 + 0.5) * self.cell,
        )
    }

    /// Normalized height plane value for a (clipped) z.
    pub fn normalize_z(&self, z: f64) -> f64 {
        (z.clamp(self.z_min, self.z_max) - self.z_min) / self.z_span()
    }

    /// Inverse of [`normalize_z`].
    pub fn denormalize_height(&self, h: f64) -> f64 {
        h * self.z_span() + self.z_min
    }
}

/// The 3-channel BEV raster. Plane invariant: cells with occupancy 0 carry
/// height 0 and intensity 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    pub grid: BevGrid,
    /// rows x cols, normalized to [0, 1].
    pub height: Vec<f64>,
    /// rows x cols, 0.0 or 1.0.
    pub occupancy: Vec<f64>,
    /// rows x cols, [0, 1], from the max-z point of the cell.
    pub intensity: Vec<f64>,
}

impl BevImage {
    pub fn zeros(grid: BevGrid) -> Self {
        let n = grid.rows * grid.cols;
        BevImage {
            grid,
            height: vec![0.0; n],
            occupancy: vec![0.0; n],
            intensity: vec![0.0; n],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.grid.cols + col
    }
}

/// Rasterizes a cloud onto the grid.
///
/// Per cell: occupancy 1 iff at least one point maps there, height from the
/// max-z point (z clipped to the grid's range, then normalized), intensity
/// from that same point. Points outside the x/y extent are discarded;
/// points outside the z range only have z clipped. Equal-z ties resolve to
/// the higher intensity, keeping the result independent of point order.
pub fn encode_bev(cloud: &PointCloud, grid: &BevGrid) -> BevImage {
    let mut img = BevImage::zeros(*grid);
    // Raw best-z per occupied cell so ordering follows unclipped heights.
    let mut best_z = vec![f64::NEG_INFINITY; grid.rows * grid.cols];
    for p in &cloud.points {
        let GridPos::Inside { row, col } = grid.world_to_pixel(p.x, p.y) else {
            continue;
        };
        let i = row * grid.cols + col;
        let intensity = p.intensity.clamp(0.0, 1.0);
        if p.z > best_z[i] || (p.z == best_z[i] && intensity > img.intensity[i]) {
            best_z[i] = p.z;
            img.occupancy[i] = 1.0;
            img.height[i] = grid.normalize_z(p.z);
            img.intensity[i] = intensity;
        }
    }
    img
}

const BEV_MAGIC: &str = "BEV1";
const TGT_MAGIC: &str = "TGT1";

/// Writes the `BEV1` raster format: ASCII header line
/// `BEV1 <rows> <cols> <channels>`, then channel-major little-endian f32
/// (height, occupancy, intensity).
pub fn write_bev(path: &Path, img: &BevImage) -> Result<()> {
    let mut buf = Vec::with_capacity(img.height.len() * 12 + 32);
    writeln!(buf, "{BEV_MAGIC} {} {} 3", img.grid.rows, img.grid.cols).unwrap();
    for plane in [&img.height, &img.occupancy, &img.intensity] {
        for &v in plane.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(usize, usize, usize, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::malformed(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::malformed(path, "non-utf8 header"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::malformed(path, format!("expected {magic} header")));
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::malformed(path, "bad header dimensions"))
    };
    let rows = dim()?;
    let cols = dim()?;
    let channels = dim()?;
    Ok((rows, cols, channels, &bytes[nl + 1..]))
}

/// Reads a `BEV1` file. Grid geometry is not stored in the file; the
/// caller supplies it and the stored dimensions must match.
pub fn read_bev(path: &Path, grid: &BevGrid) -> Result<BevImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols, channels, body) = read_header(path, &bytes, BEV_MAGIC)?;
    if channels != 3 {
        return Err(Error::malformed(path, format!("expected 3 channels, got {channels}")));
    }
    if rows != grid.rows || cols != grid.cols {
        return Err(Error::Config(format!(
            "{}: stored raster is {rows}x{cols} but the configured grid is {}x{}",
            path.display(),
            grid.rows,
            grid.cols
        )));
    }
    let n = rows * cols;
    if body.len() != n * 3 * 4 {
        return Err(Error::malformed(path, format!("payload is {} bytes, expected {}", body.len(), n * 12)));
    }
    let read_plane = |k: usize| -> Vec<f64> {
        body[k * n * 4..(k + 1) * n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Ok(BevImage {
        grid: *grid,
        height: read_plane(0),
        occupancy: read_plane(1),
        intensity: read_plane(2),
    })
}

pub(crate) fn write_tgt_planes(
    path: &Path,
    rows: usize,
    cols: usize,
    int_planes: &[&[i32]],
    float_planes: &[&[f64]],
) -> Result<()> {
    let channels = int_planes.len() + float_planes.len();
    let mut buf = Vec::new();
    writeln!(buf, "{TGT_MAGIC} {rows} {cols} {channels}").unwrap();
    for plane in int_planes {
        assert_eq!(plane.len(), rows * cols);
        for &v in plane.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for plane in float_planes {
        assert_eq!(plane.len(), rows * cols);
        for &v in plane.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_tgt_planes(
    path: &Path,
    n_int: usize,
    n_float: usize,
) -> Result<(usize, usize, Vec<Vec<i32>>, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols, channels, body) = read_header(path, &bytes, TGT_MAGIC)?;
    if channels != n_int + n_float {
        return Err(Error::malformed(
            path,
            format!("expected {} channels, got {channels}", n_int + n_float),
        ));
    }
    let n = rows * cols;
    if body.len() != n * channels * 4 {
        return Err(Error::malformed(path, "truncated payload"));
    }
    let mut ints = Vec::with_capacity(n_int);
    for k in 0..n_int {
        ints.push(
            body[k * n * 4..(k + 1) * n * 4]
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    let mut floats = Vec::with_capacity(n_float);
    for k in 0..n_float {
        let off = (n_int + k) * n * 4;
        floats.push(
            body[off..off + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        );
    }
    Ok((rows, cols, ints, floats))
}

/// 8-bit grayscale PNG of the height plane, for eyeballing rasters.
pub fn write_height_png(path: &Path, img: &BevImage) -> Result<()> {
    let (w, h) = (img.grid.cols as u32, img.grid.rows as u32);
    let pixels: Vec<u8> = img
        .height
        .iter()
        .zip(&img.occupancy)
        .map(|(&hv, &occ)| if occ > 0.0 { (hv * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    let buf = image::GrayImage::from_raw(w, h, pixels)
        .expect("plane length matches dimensions");
    buf.save(path)
        .map_err(|e| Error::MalformedFile {
            path: path.into(),
            reason: format!("png encode failed: {e}"),
        })
}
