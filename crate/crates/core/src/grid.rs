//! Grid geometry, sparse/dense raster containers, grayscale conversion and
//! the file formats shared by all other modules.
//!
//! Rasters live on a north-up grid: row 0 is the northernmost row and the
//! origin is the outer corner of pixel (0, 0). Missing cells in a sparse
//! field are quiet NaN internally; consumers must query the mask, never the
//! sentinel.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geometry of a raster: pixel counts, pixel size and the easting/northing
/// of the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size_m: f64,
    pub origin_x_m: f64,
    pub origin_y_m: f64,
}

impl GridSpec {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size_m: f64,
        origin_x_m: f64,
        origin_y_m: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(pixel_size_m > 0.0) || !pixel_size_m.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {pixel_size_m}"
            )));
        }
        Ok(GridSpec {
            width,
            height,
            pixel_size_m,
            origin_x_m,
            origin_y_m,
        })
    }

    /// Square grid with origin (0, 0), a common case in tests and synthesis.
    pub fn square(side: usize, pixel_size_m: f64) -> Result<Self> {
        GridSpec::new(side, side, pixel_size_m, 0.0, side as f64 * pixel_size_m)
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Cell containing the point, or None when it falls outside the grid.
    pub fn cell_of(&self, easting_m: f64, northing_m: f64) -> Option<(usize, usize)> {
        let col = (easting_m - self.origin_x_m) / self.pixel_size_m;
        let row = (self.origin_y_m - northing_m) / self.pixel_size_m;
        if col < 0.0 || row < 0.0 {
            return None;
        }
        let (row, col) = (row as usize, col as usize);
        if row < self.height && col < self.width {
            Some((row, col))
        } else {
            None
        }
    }

    /// Easting/northing of the center of cell (row, col).
    pub fn center_of(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x_m + (col as f64 + 0.5) * self.pixel_size_m,
            self.origin_y_m - (row as f64 + 0.5) * self.pixel_size_m,
        )
    }
}

/// Scattered LOS velocity samples (mm/yr) on a grid with a presence mask.
#[derive(Debug, Clone)]
pub struct SparseVelocityField {
    spec: GridSpec,
    values: Array2<f64>,
    mask: Array2<bool>,
}

impl SparseVelocityField {
    /// Builds a field from a value array; every non-finite entry is treated
    /// as missing and normalised to NaN.
    pub fn from_values(spec: GridSpec, values: Array2<f64>) -> Result<Self> {
        if values.dim() != spec.shape() {
            return Err(Error::InvalidArgument(format!(
                "value shape {:?} does not match spec {:?}",
                values.dim(),
                spec.shape()
            )));
        }
        let mask = values.mapv(|v| v.is_finite());
        let values = values.mapv(|v| if v.is_finite() { v } else { f64::NAN });
        Ok(SparseVelocityField { spec, values, mask })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]]
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Iterates (row, col, value) over observed cells in row-major order.
    pub fn iter_observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(move |((r, c), _)| (r, c, self.values[[r, c]]))
    }

    pub fn write_raster(&self, path: &Path) -> Result<()> {
        write_raster(path, &self.spec, &self.values)
    }

    pub fn read_raster(path: &Path) -> Result<Self> {
        let (spec, values) = read_raster(path)?;
        SparseVelocityField::from_values(spec, values)
    }
}

/// Fully populated velocity raster (mm/yr).
#[derive(Debug, Clone)]
pub struct DenseVelocityGrid {
    spec: GridSpec,
    values: Array2<f64>,
}

impl DenseVelocityGrid {
    pub fn new(spec: GridSpec, values: Array2<f64>) -> Result<Self> {
        if values.dim() != spec.shape() {
            return Err(Error::InvalidArgument(format!(
                "value shape {:?} does not match spec {:?}",
                values.dim(),
                spec.shape()
            )));
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dense grid has non-finite value {v} at ({r}, {c})"
            )));
        }
        Ok(DenseVelocityGrid { spec, values })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn write_raster(&self, path: &Path) -> Result<()> {
        write_raster(path, &self.spec, &self.values)
    }

    pub fn read_raster(path: &Path) -> Result<Self> {
        let (spec, values) = read_raster(path)?;
        DenseVelocityGrid::new(spec, values)
    }
}

/// 8-bit grayscale image on a grid.
#[derive(Debug, Clone)]
pub struct Image8 {
    spec: GridSpec,
    pixels: Array2<u8>,
}

impl Image8 {
    pub fn new(spec: GridSpec, pixels: Array2<u8>) -> Result<Self> {
        if pixels.dim() != spec.shape() {
            return Err(Error::InvalidArgument(format!(
                "pixel shape {:?} does not match spec {:?}",
                pixels.dim(),
                spec.shape()
            )));
        }
        Ok(Image8 { spec, pixels })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    /// Writes a binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = format!("P5\n{} {}\n255\n", self.spec.width, self.spec.height);
        w.write_all(header.as_bytes())
            .and_then(|_| {
                for row in self.pixels.rows() {
                    w.write_all(row.as_slice().expect("row-major image"))?;
                }
                w.flush()
            })
            .map_err(|e| Error::io(path, e))
    }
}

/// Point counts from rasterization, including out-of-bounds drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterizeReport {
    pub n_points: usize,
    pub n_dropped: usize,
}

/// Bins scattered points onto a grid. Cells hit by several points hold the
/// mean of their velocities; out-of-bounds points are dropped and counted.
pub fn rasterize(
    points: &[(f64, f64, f64)],
    spec: &GridSpec,
) -> Result<(SparseVelocityField, RasterizeReport)> {
    if points.is_empty() {
        return Err(Error::NoData("no points to rasterize".into()));
    }
    let mut sums = Array2::<f64>::zeros(spec.shape());
    let mut counts = Array2::<u32>::zeros(spec.shape());
    let mut dropped = 0usize;
    for &(x, y, v) in points {
        match spec.cell_of(x, y) {
            Some((r, c)) => {
                sums[[r, c]] += v;
                counts[[r, c]] += 1;
            }
            None => dropped += 1,
        }
    }
    let values = ndarray::Zip::from(&sums)
        .and(&counts)
        .map_collect(|&s, &n| if n > 0 { s / n as f64 } else { f64::NAN });
    let field = SparseVelocityField::from_values(*spec, values)?;
    Ok((
        field,
        RasterizeReport {
            n_points: points.len(),
            n_dropped: dropped,
        },
    ))
}

/// Converts a wrapped velocity grid to grayscale with fixed [0, interval)
/// scaling, so identical wrapped physics yields identical pixels everywhere.
pub fn to_grayscale(wrapped: &DenseVelocityGrid, wrap_interval: f64) -> Result<Image8> {
    if !(wrap_interval > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wrap interval must be positive, got {wrap_interval}"
        )));
    }
    if let Some(((r, c), &v)) = wrapped
        .values()
        .indexed_iter()
        .find(|&(_, &v)| !(0.0..wrap_interval).contains(&v))
    {
        return Err(Error::InvalidArgument(format!(
            "unwrapped input: value {v} at ({r}, {c}) outside [0, {wrap_interval})"
        )));
    }
    let pixels = wrapped
        .values()
        .mapv(|v| ((v / wrap_interval * 256.0).floor() as i64).clamp(0, 255) as u8);
    Image8::new(*wrapped.spec(), pixels)
}

/// One row of the points CSV: header `x_m,y_m,vel_mm_yr`.
#[derive(Debug, Deserialize, Serialize)]
struct PointRow {
    x_m: f64,
    y_m: f64,
    vel_mm_yr: f64,
}

/// Reads scattered points from CSV. Malformed rows fail with a line number.
pub fn read_points_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut points = Vec::new();
    for result in reader.deserialize::<PointRow>() {
        match result {
            Ok(row) => points.push((row.x_m, row.y_m, row.vel_mm_yr)),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or_default();
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(points)
}

pub fn write_points_csv(path: &Path, points: &[(f64, f64, f64)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for &(x, y, v) in points {
        writer
            .serialize(PointRow {
                x_m: x,
                y_m: y,
                vel_mm_yr: v,
            })
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Sidecar header of the flat binary raster format.
#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    width: usize,
    height: usize,
    pixel_size_m: f64,
    origin_x_m: f64,
    origin_y_m: f64,
    dtype: String,
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes a raster as little-endian f32, row-major, top row first, with a
/// JSON sidecar header at `<path>.json`. Missing cells are quiet NaN.
pub fn write_raster(path: &Path, spec: &GridSpec, values: &Array2<f64>) -> Result<()> {
    if values.dim() != spec.shape() {
        return Err(Error::InvalidArgument(format!(
            "raster shape {:?} does not match spec {:?}",
            values.dim(),
            spec.shape()
        )));
    }
    let header = RasterHeader {
        width: spec.width,
        height: spec.height,
        pixel_size_m: spec.pixel_size_m,
        origin_x_m: spec.origin_x_m,
        origin_y_m: spec.origin_y_m,
        dtype: "f32le".into(),
    };
    let hp = header_path(path);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a raster written by [`write_raster`]. Values come back as f64 (the
/// f32 -> f64 embedding is exact, so a write/read cycle is value-identical).
pub fn read_raster(path: &Path) -> Result<(GridSpec, Array2<f64>)> {
    let hp = header_path(path);
    let header_text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: RasterHeader = serde_json::from_str(&header_text).map_err(|e| Error::Format {
        path: hp.clone(),
        message: e.to_string(),
    })?;
    if header.dtype != "f32le" {
        return Err(Error::Format {
            path: hp,
            message: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let spec = GridSpec::new(
        header.width,
        header.height,
        header.pixel_size_m,
        header.origin_x_m,
        header.origin_y_m,
    )?;
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected = spec.n_pixels() * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut values = Array2::<f64>::zeros(spec.shape());
    for (i, v) in values.iter_mut().enumerate() {
        let b = [
            bytes[4 * i],
            bytes[4 * i + 1],
            bytes[4 * i + 2],
            bytes[4 * i + 3],
        ];
        *v = f32::from_le_bytes(b) as f64;
    }
    Ok((spec, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec_10m(w: usize, h: usize) -> GridSpec {
        GridSpec::new(w, h, 10.0, 0.0, h as f64 * 10.0).unwrap()
    }

    #[test]
    fn rasterize_single_point_identity() {
        let spec = spec_10m(4, 4);
        let (field, report) = rasterize(&[(5.0, 35.0, 3.2)], &spec).unwrap();
        assert!(field.is_observed(0, 0));
        assert_eq!(field.values()[[0, 0]], 3.2);
        assert_eq!(field.n_observed(), 1);
        assert_eq!(report.n_dropped, 0);
    }

    #[test]
    fn rasterize_averages_points_in_same_cell() {
        let spec = spec_10m(4, 4);
        let (field, _) = rasterize(&[(5.0, 35.0, 2.0), (7.0, 33.0, 4.0)], &spec).unwrap();
        assert_eq!(field.values()[[0, 0]], 3.0);
    }

    #[test]
    fn rasterize_drops_out_of_bounds() {
        let spec = spec_10m(4, 4);
        let (field, report) = rasterize(&[(5.0, 35.0, 1.0), (-3.0, 35.0, 9.0)], &spec).unwrap();
        assert_eq!(report.n_dropped, 1);
        assert_eq!(field.n_observed(), 1);
    }

    #[test]
    fn rasterize_rejects_empty_input() {
        let spec = spec_10m(4, 4);
        assert!(matches!(rasterize(&[], &spec), Err(Error::NoData(_))));
    }

    #[test]
    fn grayscale_fixed_scaling() {
        let spec = spec_10m(3, 1);
        let grid = DenseVelocityGrid::new(spec, array![[0.0, 7.0, 13.999]]).unwrap();
        let img = to_grayscale(&grid, 14.0).unwrap();
        assert_eq!(img.pixels()[[0, 0]], 0);
        assert_eq!(img.pixels()[[0, 1]], 128);
        assert_eq!(img.pixels()[[0, 2]], 255);
    }

    #[test]
    fn grayscale_rejects_unwrapped_values() {
        let spec = spec_10m(1, 1);
        let grid = DenseVelocityGrid::new(spec, array![[14.0]]).unwrap();
        let err = to_grayscale(&grid, 14.0).unwrap_err();
        assert!(err.to_string().contains("unwrapped input"));
    }

    #[test]
    fn grayscale_monotone_in_value() {
        let spec = spec_10m(64, 1);
        let vals = Array2::from_shape_fn((1, 64), |(_, c)| c as f64 * 14.0 / 64.0);
        let grid = DenseVelocityGrid::new(spec, vals).unwrap();
        let img = to_grayscale(&grid, 14.0).unwrap();
        for c in 1..64 {
            assert!(img.pixels()[[0, c]] >= img.pixels()[[0, c - 1]]);
        }
    }

    #[test]
    fn sparse_field_mask_matches_finite_values() {
        let spec = spec_10m(2, 2);
        let field =
            SparseVelocityField::from_values(spec, array![[1.0, f64::NAN], [f64::INFINITY, -2.0]])
                .unwrap();
        assert_eq!(field.n_observed(), 2);
        assert!(field.is_observed(0, 0));
        assert!(!field.is_observed(0, 1));
        assert!(!field.is_observed(1, 0));
        assert!(field.values()[[1, 0]].is_nan());
    }

    #[test]
    fn dense_grid_rejects_nan() {
        let spec = spec_10m(2, 1);
        assert!(DenseVelocityGrid::new(spec, array![[1.0, f64::NAN]]).is_err());
    }

    #[test]
    fn points_csv_round_trip_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        let points = vec![(100.0, 200.0, -1.5), (40.0, 55.0, 2.25)];
        write_points_csv(&path, &points).unwrap();
        let back = read_points_csv(&path).unwrap();
        assert_eq!(points, back);
    }

    #[test]
    fn points_csv_reports_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "x_m,y_m,vel_mm_yr\n1.0,2.0,3.0\n100.0,abc,1\n").unwrap();
        match read_points_csv(&path).unwrap_err() {
            Error::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn raster_round_trip_is_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vel.f32");
        let spec = spec_10m(5, 3);
        // f32-representable values round-trip bit-exactly, NaN included.
        let mut values = Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64 * 0.25 - 1.5);
        values[[1, 2]] = f64::NAN;
        write_raster(&path, &spec, &values).unwrap();
        let (spec2, values2) = read_raster(&path).unwrap();
        assert_eq!(spec, spec2);
        for (a, b) in values.iter().zip(values2.iter()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn raster_read_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vel.f32");
        let spec = spec_10m(4, 4);
        write_raster(&path, &spec, &Array2::zeros((4, 4))).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_has_p5_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quicklook.pgm");
        let spec = spec_10m(3, 2);
        let img = Image8::new(spec, array![[0u8, 128, 255], [1, 2, 3]]).unwrap();
        img.write_pgm(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 1, 2, 3]);
    }

    #[test]
    fn cell_center_round_trip() {
        let spec = GridSpec::new(8, 6, 10.0, 1000.0, 2000.0).unwrap();
        let (e, n) = spec.center_of(2, 5);
        assert_eq!(spec.cell_of(e, n), Some((2, 5)));
        assert_eq!(spec.cell_of(e + 1e6, n), None);
    }
}
