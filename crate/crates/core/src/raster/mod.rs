//! Georeferenced single-band rasters.
//!
//! All grids live in a local projected CRS with metre units. The origin is
//! the north-west corner of the grid and values are stored row-major starting
//! at that corner, so row indices grow southwards and column indices
//! eastwards. Pixel `(r, c)` covers
//! `[origin_x + c*cs, origin_x + (c+1)*cs] x [origin_y - (r+1)*cs, origin_y - r*cs]`.

mod agt;
mod ascii;
mod landcover;
mod landscape;
mod tiles;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use agt::{read_agt1, read_agt1_header, write_agt1, AGT1_MAGIC};
pub use ascii::{parse_ascii_grid, read_ascii_header, write_ascii_grid};
pub use landcover::{class_index, ids, LandCoverClass, LandCoverTable, LANDCOVER_CLASS_COUNT};
pub use landscape::{effective_height, Landscape};
pub use tiles::{BBox, Tile, TileIndex, TileSource};

/// Which thematic band a raster carries; drives load-time validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    Dem,
    Landcover,
    Function,
}

/// Load-time plausibility rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationRules {
    pub dem_min_m: f64,
    pub dem_max_m: f64,
}

impl Default for ValidationRules {
    fn default() -> Self {
        Self {
            dem_min_m: -500.0,
            dem_max_m: 9000.0,
        }
    }
}

/// Header-level description of a grid without its values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, width: usize, height: usize) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Validation(format!("cell size must be positive, got {cell_size}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("degenerate grid {width}x{height}")));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::Validation("non-finite origin".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            cell_size,
            width,
            height,
        })
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            min_x: self.origin_x,
            max_x: self.origin_x + self.width as f64 * self.cell_size,
            min_y: self.origin_y - self.height as f64 * self.cell_size,
            max_y: self.origin_y,
        }
    }

    /// World coordinate of the centre of pixel `(row, col)`.
    pub fn pixel_to_world(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Pixel containing `(x, y)`; points on the east/south outer edge map to
    /// the last column/row.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.bounds().contains_closed(x, y) {
            return None;
        }
        let col = ((x - self.origin_x) / self.cell_size).floor() as i64;
        let row = ((self.origin_y - y) / self.cell_size).floor() as i64;
        let col = col.clamp(0, self.width as i64 - 1) as usize;
        let row = row.clamp(0, self.height as i64 - 1) as usize;
        Some((row, col))
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &GridGeometry) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.cell_size == other.cell_size
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
    }
}

/// A georeferenced single-band float grid (DEM, land cover, derived layers).
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrid {
    pub geometry: GridGeometry,
    pub nodata: f64,
    values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(geometry: GridGeometry, nodata: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Validation(format!(
                "expected {} values for {}x{} grid, got {}",
                geometry.len(),
                geometry.width,
                geometry.height,
                values.len()
            )));
        }
        Ok(Self {
            geometry,
            nodata,
            values,
        })
    }

    pub fn filled(geometry: GridGeometry, nodata: f64, value: f64) -> Self {
        Self {
            values: vec![value; geometry.len()],
            geometry,
            nodata,
        }
    }

    /// Build a grid by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(geometry: GridGeometry, nodata: f64, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(geometry.len());
        for r in 0..geometry.height {
            for c in 0..geometry.width {
                values.push(f(r, c));
            }
        }
        Self {
            geometry,
            nodata,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn cell_size(&self) -> f64 {
        self.geometry.cell_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || v == self.nodata
    }

    #[inline]
    pub fn raw(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.geometry.width + col]
    }

    /// Value at a pixel, `None` when it is nodata.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.raw(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let w = self.geometry.width;
        self.values[row * w + col] = v;
    }

    pub fn bounds(&self) -> BBox {
        self.geometry.bounds()
    }

    pub fn pixel_to_world(&self, row: usize, col: usize) -> (f64, f64) {
        self.geometry.pixel_to_world(row, col)
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        self.geometry.world_to_pixel(x, y)
    }

    /// Value of the pixel containing `(x, y)` (no interpolation).
    pub fn value_at(&self, x: f64, y: f64) -> Result<Option<f64>> {
        let (r, c) = self.world_to_pixel(x, y).ok_or(Error::OutOfDomain { x, y })?;
        Ok(self.get(r, c))
    }

    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.geometry.same_as(&other.geometry)
    }

    /// New grid with the same geometry and nodata sentinel.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.geometry, self.nodata, values)
    }

    /// Iterator over valid (non-nodata) values.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !self.is_nodata(*v))
    }

    /// `(min, max)` over valid values, `None` if every cell is nodata.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.valid_values().fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    /// Bilinear interpolation between pixel centres.
    ///
    /// When fewer than four of the surrounding centres hold data the value of
    /// the nearest valid one is returned; if none do, a nodata error.
    pub fn sample_height(&self, x: f64, y: f64) -> Result<f64> {
        let g = &self.geometry;
        if !g.bounds().contains_closed(x, y) {
            return Err(Error::OutOfDomain { x, y });
        }
        let fc = (x - g.origin_x) / g.cell_size - 0.5;
        let fr = (g.origin_y - y) / g.cell_size - 0.5;
        let c0 = (fc.floor() as i64).clamp(0, g.width as i64 - 1) as usize;
        let r0 = (fr.floor() as i64).clamp(0, g.height as i64 - 1) as usize;
        let c1 = (c0 + 1).min(g.width - 1);
        let r1 = (r0 + 1).min(g.height - 1);
        let tx = (fc - c0 as f64).clamp(0.0, 1.0);
        let ty = (fr - r0 as f64).clamp(0.0, 1.0);

        let corners = [
            ((1.0 - tx) * (1.0 - ty), r0, c0),
            (tx * (1.0 - ty), r0, c1),
            ((1.0 - tx) * ty, r1, c0),
            (tx * ty, r1, c1),
        ];
        let mut acc = 0.0;
        let mut valid = 0;
        let mut nearest: Option<(f64, f64)> = None;
        for (w, r, c) in corners {
            if let Some(v) = self.get(r, c) {
                acc += w * v;
                valid += 1;
                if nearest.is_none_or(|(bw, _)| w > bw) {
                    nearest = Some((w, v));
                }
            }
        }
        match (valid, nearest) {
            (4, _) => Ok(acc),
            (_, Some((_, v))) => Ok(v),
            _ => Err(Error::Nodata { x, y }),
        }
    }

    /// Nearest-pixel resampling onto `target`; cells outside this grid become nodata.
    pub fn resample_nearest(&self, target: &GridGeometry) -> RasterGrid {
        if self.geometry.same_as(target) {
            return self.clone();
        }
        RasterGrid::from_fn(*target, self.nodata, |r, c| {
            let (x, y) = target.pixel_to_world(r, c);
            match self.geometry.world_to_pixel(x, y) {
                Some((rr, cc)) => self.raw(rr, cc),
                None => self.nodata,
            }
        })
    }

    /// Apply `f` to every valid cell; nodata cells are carried through.
    pub fn map_valid(&self, mut f: impl FnMut(f64) -> f64) -> RasterGrid {
        let values = self
            .values
            .iter()
            .map(|&v| if self.is_nodata(v) { v } else { f(v) })
            .collect();
        RasterGrid {
            geometry: self.geometry,
            nodata: self.nodata,
            values,
        }
    }

    /// Check the band against its kind-specific rules.
    pub fn validate(&self, kind: BandKind, rules: &ValidationRules) -> Result<()> {
        let mut offending = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            if self.is_nodata(v) {
                continue;
            }
            let bad = match kind {
                BandKind::Dem => !(rules.dem_min_m..=rules.dem_max_m).contains(&v),
                BandKind::Landcover => class_index(v).is_none(),
                BandKind::Function => !(v >= 0.0 && v.fract() == 0.0 && v < u16::MAX as f64),
            };
            if bad {
                offending.push((i / self.geometry.width, i % self.geometry.width, v));
            }
        }
        if offending.is_empty() {
            return Ok(());
        }
        let listed: Vec<String> = offending
            .iter()
            .take(10)
            .map(|(r, c, v)| format!("({r},{c})={v}"))
            .collect();
        let what = match kind {
            BandKind::Dem => format!(
                "DEM values outside [{}, {}] m",
                rules.dem_min_m, rules.dem_max_m
            ),
            BandKind::Landcover => format!("land-cover ids outside 0..{}", LANDCOVER_CLASS_COUNT - 1),
            BandKind::Function => "function ids must be non-negative integers".into(),
        };
        Err(Error::Validation(format!(
            "{what}: {} offending cell(s): {}{}",
            offending.len(),
            listed.join(", "),
            if offending.len() > 10 { ", ..." } else { "" }
        )))
    }
}

/// Load a raster, sniffing the format (AGT1 magic, otherwise ESRI ASCII),
/// and validate it for its band kind with the default rules.
pub fn load_raster(path: impl AsRef<Path>, kind: BandKind) -> Result<RasterGrid> {
    load_raster_with(path, kind, &ValidationRules::default())
}

pub fn load_raster_with(path: impl AsRef<Path>, kind: BandKind, rules: &ValidationRules) -> Result<RasterGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let grid = if bytes.starts_with(&AGT1_MAGIC) {
        agt::decode_agt1(&bytes)?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
            offset: e.valid_up_to(),
            message: "file is neither AGT1 nor UTF-8 text".into(),
        })?;
        parse_ascii_grid(text)?
    };
    grid.validate(kind, rules)?;
    Ok(grid)
}

/// Read only the geometry of a raster file.
pub fn read_header(path: impl AsRef<Path>) -> Result<GridGeometry> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
        if n == 4 && head == AGT1_MAGIC {
            return read_agt1_header(path);
        }
    }
    read_ascii_header(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(w: usize, h: usize, cs: f64) -> GridGeometry {
        GridGeometry::new(0.0, h as f64 * cs, cs, w, h).unwrap()
    }

    #[test]
    fn constant_field_samples_constant() {
        let g = RasterGrid::filled(geo(4, 4, 10.0), -9999.0, 50.0);
        for (x, y) in [(1.0, 1.0), (20.0, 20.0), (39.9, 0.1), (15.0, 35.0)] {
            assert_eq!(g.sample_height(x, y).unwrap(), 50.0);
        }
    }

    #[test]
    fn bilinear_on_plane_midpoint() {
        // centres at x = 0, 10, 20 carry z = x/10
        let geometry = GridGeometry::new(-5.0, 15.0, 10.0, 3, 2).unwrap();
        let g = RasterGrid::from_fn(geometry, -9999.0, |_, c| c as f64);
        assert!((g.sample_height(5.0, 5.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((g.sample_height(12.5, 5.0).unwrap() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn outside_bounds_is_out_of_domain() {
        let g = RasterGrid::filled(geo(3, 3, 10.0), -9999.0, 1.0);
        assert!(matches!(g.sample_height(-10.0, 5.0), Err(Error::OutOfDomain { .. })));
        assert!(matches!(g.sample_height(5.0, 40.0), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn nodata_degrades_to_nearest_then_errors() {
        let mut g = RasterGrid::filled(geo(2, 2, 10.0), -9999.0, 7.0);
        g.set(0, 0, -9999.0);
        g.set(1, 1, 3.0);
        // (12, 8) is closest to the centre of pixel (1,1) at (15, 5)
        assert_eq!(g.sample_height(12.0, 8.0).unwrap(), 3.0);
        let all = RasterGrid::filled(geo(2, 2, 10.0), -9999.0, -9999.0);
        assert!(matches!(all.sample_height(10.0, 10.0), Err(Error::Nodata { .. })));
    }

    #[test]
    fn pixel_world_round_trip() {
        let g = GridGeometry::new(1234.5, 9876.25, 2.5, 17, 9).unwrap();
        for r in 0..g.height {
            for c in 0..g.width {
                let (x, y) = g.pixel_to_world(r, c);
                assert_eq!(g.world_to_pixel(x, y), Some((r, c)));
            }
        }
    }

    #[test]
    fn landcover_band_rejects_class_19() {
        let mut g = RasterGrid::filled(geo(3, 3, 1.0), 255.0, 4.0);
        g.set(1, 2, 19.0);
        let err = g.validate(BandKind::Landcover, &ValidationRules::default()).unwrap_err();
        assert!(err.to_string().contains("(1,2)=19"), "{err}");
    }

    #[test]
    fn dem_window_violation_lists_cells() {
        let mut g = RasterGrid::filled(geo(3, 3, 1.0), -9999.0, 100.0);
        g.set(2, 0, 12000.0);
        let err = g.validate(BandKind::Dem, &ValidationRules::default()).unwrap_err();
        assert!(err.to_string().contains("(2,0)=12000"), "{err}");
        // nodata is never range-checked
        g.set(2, 0, -9999.0);
        g.validate(BandKind::Dem, &ValidationRules::default()).unwrap();
    }
}
