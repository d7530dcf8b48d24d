//! Tiled raster index with lazy, load-once tile access.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use super::{load_raster_with, read_header, BandKind, GridGeometry, RasterGrid, ValidationRules};
use crate::error::{Error, Result};

/// Axis-aligned bounding box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn contains_closed(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    /// Half-open ownership test: west and north edges belong to the box,
    /// east and south edges to the neighbour.
    pub fn owns(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x < self.max_x && y > self.min_y && y <= self.max_y
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }

    fn overlap_area(&self, o: &BBox) -> f64 {
        let w = self.max_x.min(o.max_x) - self.min_x.max(o.min_x);
        let h = self.max_y.min(o.max_y) - self.min_y.max(o.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

#[derive(Clone, Debug)]
pub enum TileSource {
    Memory,
    File { path: PathBuf, kind: BandKind },
}

#[derive(Debug)]
pub struct Tile {
    pub geometry: GridGeometry,
    pub source: TileSource,
    rules: ValidationRules,
    grid: OnceCell<Arc<RasterGrid>>,
}

impl Tile {
    pub fn bbox(&self) -> BBox {
        self.geometry.bounds()
    }

    pub fn is_loaded(&self) -> bool {
        self.grid.get().is_some()
    }

    fn load(&self) -> Result<&Arc<RasterGrid>> {
        self.grid.get_or_try_init(|| match &self.source {
            TileSource::Memory => unreachable!("in-memory tiles are initialised at construction"),
            TileSource::File { path, kind } => {
                let grid = load_raster_with(path, *kind, &self.rules)?;
                if !grid.geometry.same_as(&self.geometry) {
                    return Err(Error::Geometry(format!(
                        "{} changed geometry since it was indexed",
                        path.display()
                    )));
                }
                Ok(Arc::new(grid))
            }
        })
    }
}

/// A set of tiles sharing one pixel lattice (same cell size, aligned origins).
#[derive(Debug)]
pub struct TileIndex {
    tiles: Vec<Tile>,
    cell_size: f64,
    anchor_x: f64,
    anchor_y: f64,
    bounds: BBox,
}

impl TileIndex {
    fn build(tiles: Vec<Tile>) -> Result<Self> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::arg("tile index needs at least one tile"))?;
        let cs = first.geometry.cell_size;
        let (ax, ay) = (first.geometry.origin_x, first.geometry.origin_y);
        let mut bounds = first.bbox();
        for t in &tiles {
            let g = &t.geometry;
            if (g.cell_size - cs).abs() > 1e-9 * cs {
                return Err(Error::Geometry(format!(
                    "tile cell size {} differs from {cs}",
                    g.cell_size
                )));
            }
            let off_x = (g.origin_x - ax) / cs;
            let off_y = (ay - g.origin_y) / cs;
            if (off_x - off_x.round()).abs() > 1e-6 || (off_y - off_y.round()).abs() > 1e-6 {
                return Err(Error::Geometry(format!(
                    "tile origin ({}, {}) is not aligned to the shared pixel lattice",
                    g.origin_x, g.origin_y
                )));
            }
            bounds = bounds.union(&t.bbox());
        }
        for (i, a) in tiles.iter().enumerate() {
            for b in &tiles[i + 1..] {
                if a.bbox().overlap_area(&b.bbox()) > 0.0 {
                    return Err(Error::Geometry(format!(
                        "tiles overlap: {:?} and {:?}",
                        a.bbox(),
                        b.bbox()
                    )));
                }
            }
        }
        Ok(Self {
            tiles,
            cell_size: cs,
            anchor_x: ax,
            anchor_y: ay,
            bounds,
        })
    }

    pub fn from_grid(grid: RasterGrid) -> Self {
        Self::from_grids(vec![grid]).expect("a single grid is always a valid index")
    }

    pub fn from_grids(grids: Vec<RasterGrid>) -> Result<Self> {
        let tiles = grids
            .into_iter()
            .map(|g| Tile {
                geometry: g.geometry,
                source: TileSource::Memory,
                rules: ValidationRules::default(),
                grid: OnceCell::with_value(Arc::new(g)),
            })
            .collect();
        Self::build(tiles)
    }

    /// Index files by reading only their headers; values load on first use.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], kind: BandKind, rules: ValidationRules) -> Result<Self> {
        let tiles = paths
            .iter()
            .map(|p| {
                let path = p.as_ref().to_path_buf();
                Ok(Tile {
                    geometry: read_header(&path)?,
                    source: TileSource::File { path, kind },
                    rules,
                    grid: OnceCell::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(tiles)
    }

    /// Index every `.asc` / `.agt` file in a directory (sorted by name), or a
    /// single file if `path` is not a directory.
    pub fn open(path: impl AsRef<Path>, kind: BandKind, rules: ValidationRules) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_dir() {
            return Self::from_files(&[path], kind, rules);
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("asc") | Some("agt")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::arg(format!("no .asc/.agt tiles in {}", path.display())));
        }
        Self::from_files(&files, kind, rules)
    }

    /// Cut one grid into `block x block` pixel tiles.
    pub fn split_grid(grid: &RasterGrid, block: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::arg("block size must be positive"));
        }
        let g = &grid.geometry;
        let mut grids = Vec::new();
        for r0 in (0..g.height).step_by(block) {
            for c0 in (0..g.width).step_by(block) {
                let h = block.min(g.height - r0);
                let w = block.min(g.width - c0);
                let (ox, oy) = (
                    g.origin_x + c0 as f64 * g.cell_size,
                    g.origin_y - r0 as f64 * g.cell_size,
                );
                let geo = GridGeometry::new(ox, oy, g.cell_size, w, h)?;
                grids.push(RasterGrid::from_fn(geo, grid.nodata, |r, c| grid.raw(r0 + r, c0 + c)));
            }
        }
        Self::from_grids(grids)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Bounding box of the union of all tiles.
    pub fn bounds(&self) -> BBox {
        self.bounds
    }

    /// Grid of tile `i`, loading it on first access.
    pub fn grid(&self, i: usize) -> Result<Arc<RasterGrid>> {
        self.tiles
            .get(i)
            .ok_or_else(|| Error::arg(format!("tile {i} out of range")))?
            .load()
            .cloned()
    }

    /// The single tile owning `(x, y)`.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        self.tiles
            .iter()
            .position(|t| t.bbox().owns(x, y))
            .or_else(|| self.tiles.iter().position(|t| t.bbox().contains_closed(x, y)))
    }

    /// Lattice index `(row, col)` of a tile-local pixel, shared across tiles.
    pub fn global_pixel(&self, tile: usize, row: usize, col: usize) -> (i64, i64) {
        let g = &self.tiles[tile].geometry;
        let dr = ((self.anchor_y - g.origin_y) / self.cell_size).round() as i64;
        let dc = ((g.origin_x - self.anchor_x) / self.cell_size).round() as i64;
        (row as i64 + dr, col as i64 + dc)
    }

    /// Global lattice pixel `(row, col)` containing `(x, y)`; pixels may lie
    /// outside every tile.
    pub fn lattice_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((self.anchor_y - y) / self.cell_size).floor() as i64,
            ((x - self.anchor_x) / self.cell_size).floor() as i64,
        )
    }

    /// World coordinate of the centre of a lattice pixel.
    pub fn lattice_center(&self, row: i64, col: i64) -> (f64, f64) {
        (
            self.anchor_x + (col as f64 + 0.5) * self.cell_size,
            self.anchor_y - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Value of a lattice pixel; `Err(OutOfDomain)` when no tile holds it.
    pub fn lattice_value(&self, row: i64, col: i64) -> Result<Option<f64>> {
        let (x, y) = self.lattice_center(row, col);
        self.value_at(x, y)
    }

    /// Value of the pixel containing `(x, y)`; `Ok(None)` for nodata.
    pub fn value_at(&self, x: f64, y: f64) -> Result<Option<f64>> {
        let i = self.locate(x, y).ok_or(Error::OutOfDomain { x, y })?;
        self.grid(i)?.value_at(x, y)
    }

    /// Bilinear height from the owning tile.
    pub fn sample_height(&self, x: f64, y: f64) -> Result<f64> {
        if self.locate(x, y).is_none() {
            return Err(Error::OutOfDomain { x, y });
        }
        if self.tiles.len() == 1 {
            return self.grid(0)?.sample_height(x, y);
        }
        // bilinear on the shared lattice so seams interpolate like interiors
        let fc = (x - self.anchor_x) / self.cell_size - 0.5;
        let fr = (self.anchor_y - y) / self.cell_size - 0.5;
        let (c0, r0) = (fc.floor() as i64, fr.floor() as i64);
        let (tx, ty) = (fc - c0 as f64, fr - r0 as f64);
        let corners = [
            ((1.0 - tx) * (1.0 - ty), r0, c0),
            (tx * (1.0 - ty), r0, c0 + 1),
            ((1.0 - tx) * ty, r0 + 1, c0),
            (tx * ty, r0 + 1, c0 + 1),
        ];
        let mut acc = 0.0;
        let mut valid = 0;
        let mut nearest: Option<(f64, f64)> = None;
        for (w, r, c) in corners {
            let v = match self.lattice_value(r, c) {
                Ok(v) => v,
                Err(Error::OutOfDomain { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some(v) = v {
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

    /// Load every tile (used for region-wide statistics).
    pub fn load_all(&self) -> Result<Vec<Arc<RasterGrid>>> {
        (0..self.tiles.len()).map(|i| self.grid(i)).collect()
    }

    /// One grid over the bounding box; pixels outside every tile are nodata.
    pub fn mosaic(&self, nodata: f64) -> Result<RasterGrid> {
        let b = self.bounds;
        let cs = self.cell_size;
        let width = ((b.max_x - b.min_x) / cs).round() as usize;
        let height = ((b.max_y - b.min_y) / cs).round() as usize;
        let geo = GridGeometry::new(b.min_x, b.max_y, cs, width, height)?;
        let mut out = RasterGrid::filled(geo, nodata, nodata);
        for i in 0..self.tiles.len() {
            let g = self.grid(i)?;
            for r in 0..g.height() {
                for c in 0..g.width() {
                    if let Some(v) = g.get(r, c) {
                        let (x, y) = g.pixel_to_world(r, c);
                        if let Some((rr, cc)) = geo.world_to_pixel(x, y) {
                            out.set(rr, cc, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
