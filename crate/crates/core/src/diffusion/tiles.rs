//! AGX1 tile container and its JSON sidecar.
//!
//! Layout (little-endian): magic `AGX1`; u32 version, H, W, n_cond, flags;
//! `n_cond + 2` f32 planes of H x W, row-major from the north-west corner,
//! in the order conditioning..., obs_z, mask; u32 CRC32 (IEEE) of every byte
//! between the magic and the footer.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::NormalizerState;
use crate::error::{Error, Result};
use crate::raster::{GridGeometry, RasterGrid};
use crate::sampling::SatGeometry;
use crate::stats::percentile;
use crate::terrain::TerrainDerivatives;

pub const AGX1_MAGIC: [u8; 4] = *b"AGX1";
pub const AGX1_VERSION: u32 = 1;
pub const COND_CHANNELS: usize = 5;
pub const COND_NAMES: [&str; COND_CHANNELS] = ["dem_norm", "slope_norm", "aspect_sin", "aspect_cos", "landcover_id"];
/// The obs_z plane holds a model prediction rather than sparse observations.
pub const FLAG_PREDICTION: u32 = 1;
/// Land-cover id written where the class is unknown.
pub const LANDCOVER_MISSING: f32 = -1.0;
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AgxTile {
    pub flags: u32,
    pub cond: Vec<Array2<f32>>,
    pub obs_z: Array2<f32>,
    pub mask: Array2<f32>,
}

impl AgxTile {
    pub fn dim(&self) -> (usize, usize) {
        self.obs_z.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d.0 == 0 || d.1 == 0 {
            return Err(Error::Validation("tile has an empty plane".into()));
        }
        if self.mask.dim() != d || self.cond.iter().any(|c| c.dim() != d) {
            return Err(Error::Validation("tile planes differ in shape".into()));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Validation("tile mask is not binary".into()));
        }
        Ok(())
    }

    pub fn observed_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1.0).count() as f64 / self.mask.len() as f64
    }
}

pub fn encode_agx1(tile: &AgxTile) -> Result<Vec<u8>> {
    tile.validate()?;
    let (h, w) = tile.dim();
    let planes = tile.cond.len() + 2;
    let mut buf = Vec::with_capacity(HEADER_LEN + planes * h * w * 4 + 4);
    buf.extend_from_slice(&AGX1_MAGIC);
    for v in [AGX1_VERSION, h as u32, w as u32, tile.cond.len() as u32, tile.flags] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for plane in tile.cond.iter().chain([&tile.obs_z, &tile.mask]) {
        for v in plane.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

pub fn decode_agx1(bytes: &[u8], path: &Path) -> Result<AgxTile> {
    let parse = |offset: usize, message: String| Error::Parse { offset, message };
    if bytes.len() < HEADER_LEN + 4 {
        return Err(parse(bytes.len(), "truncated AGX1 header".into()));
    }
    if bytes[..4] != AGX1_MAGIC {
        return Err(parse(0, "bad magic, expected AGX1".into()));
    }
    let version = u32_at(bytes, 4);
    if version != AGX1_VERSION {
        return Err(parse(4, format!("unsupported version {version}")));
    }
    let (h, w, n_cond, flags) = (
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
        u32_at(bytes, 20),
    );
    if h == 0 || w == 0 {
        return Err(parse(8, format!("degenerate tile {h}x{w}")));
    }
    let plane_bytes = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse(8, "tile dimensions overflow".into()))?;
    let expected = (n_cond + 2)
        .checked_mul(plane_bytes)
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| parse(16, "tile dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(parse(
            bytes.len().min(expected),
            format!("expected {expected} bytes for {h}x{w} with {n_cond} conditioning planes, found {}", bytes.len()),
        ));
    }
    let body_end = expected - 4;
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[4..body_end]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let plane = |i: usize| -> Array2<f32> {
        let start = HEADER_LEN + i * plane_bytes;
        let vals: Vec<f32> = bytes[start..start + plane_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Array2::from_shape_vec((h, w), vals).expect("plane length checked")
    };
    let tile = AgxTile {
        flags,
        cond: (0..n_cond).map(plane).collect(),
        obs_z: plane(n_cond),
        mask: plane(n_cond + 1),
    };
    tile.validate()?;
    Ok(tile)
}

pub fn write_agx1(path: impl AsRef<Path>, tile: &AgxTile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_agx1(tile)?).map_err(|e| Error::io(path, e))
}

pub fn read_agx1(path: impl AsRef<Path>) -> Result<AgxTile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_agx1(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGeo {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileMeta {
    pub elev_deg: f64,
    pub az_deg: f64,
    pub alt_km: f64,
    pub eta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub geo: TileGeo,
}

impl TileMeta {
    pub fn normalizer(&self) -> NormalizerState {
        NormalizerState {
            eta: self.eta,
            mu: self.mu,
            sigma: self.sigma,
        }
    }
}

/// `<dir>/<name>.meta.json` for `<dir>/<name>.agx`.
pub fn meta_path(tile_path: &Path) -> PathBuf {
    tile_path.with_extension("meta.json")
}

pub fn write_meta(path: impl AsRef<Path>, meta: &TileMeta) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<TileMeta> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Scale to [0, 1] between `lo` and `hi`, clamping outside.
pub fn robust_minmax(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Region rasters the conditioning planes are cut from.
pub struct RegionLayers<'a> {
    pub dem: &'a RasterGrid,
    pub derivs: &'a TerrainDerivatives,
    /// Nearest-resampled onto the DEM grid when not aligned.
    pub landcover: Option<&'a RasterGrid>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    pub excess_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub geometry: SatGeometry,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub tile_size: usize,
    /// Also write windows without any observation.
    pub keep_empty: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            tile_size: 256,
            keep_empty: false,
        }
    }
}

/// Full-region conditioning planes (DEM p1/p99 min-max, slope / 90,
/// aspect sine and cosine with zeros on flat cells, land-cover id).
pub fn conditioning_planes(layers: &RegionLayers<'_>) -> Result<Vec<Array2<f32>>> {
    let dem = layers.dem;
    let geo = dem.geometry;
    if !layers.derivs.slope.geometry.same_as(&geo) {
        return Err(Error::Geometry("terrain derivatives are not on the DEM grid".into()));
    }
    let lo = percentile(dem.valid_values(), 1.0).ok_or_else(|| Error::Validation("DEM holds no valid cells".into()))?;
    let hi = percentile(dem.valid_values(), 99.0).expect("valid cells exist");
    let lc = layers.landcover.map(|g| g.resample_nearest(&geo));
    let shape = (geo.height, geo.width);
    let d = layers.derivs;
    let mut planes = vec![Array2::<f32>::zeros(shape); COND_CHANNELS];
    for r in 0..geo.height {
        for c in 0..geo.width {
            if let Some(z) = dem.get(r, c) {
                planes[0][(r, c)] = robust_minmax(z, lo, hi) as f32;
            }
            if let Some(s) = d.slope.get(r, c) {
                planes[1][(r, c)] = (s / 90.0).clamp(0.0, 1.0) as f32;
            }
            if let Some(a) = d.aspect.get(r, c) {
                if !d.is_flat(r, c) {
                    let (s, co) = a.to_radians().sin_cos();
                    planes[2][(r, c)] = s as f32;
                    planes[3][(r, c)] = co as f32;
                }
            }
            planes[4][(r, c)] = lc
                .as_ref()
                .and_then(|g| g.get(r, c))
                .and_then(crate::raster::class_index)
                .map_or(LANDCOVER_MISSING, f32::from);
        }
    }
    Ok(planes)
}

/// Write one tile per (geometry, window) and its sidecar; returns the tile
/// paths in geometry-then-window order.
pub fn export_tiles(
    layers: &RegionLayers<'_>,
    sets: &[ObservationSet],
    normalizer: &NormalizerState,
    cfg: &ExportConfig,
    out_dir: impl AsRef<Path>,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    if cfg.tile_size == 0 {
        return Err(Error::arg("tile size must be positive"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cond = conditioning_planes(layers)?;
    let geo = layers.dem.geometry;
    let ts = cfg.tile_size;

    // observations binned to pixels (mean in dB), NaN where unobserved
    let mut binned = Vec::with_capacity(sets.len());
    let mut jobs = Vec::new();
    for (gi, set) in sets.iter().enumerate() {
        let mut sum = Array2::<f64>::zeros((geo.height, geo.width));
        let mut count = Array2::<u32>::zeros((geo.height, geo.width));
        for o in &set.observations {
            let (r, c) = geo.world_to_pixel(o.x, o.y).ok_or(Error::OutOfDomain { x: o.x, y: o.y })?;
            if !o.excess_db.is_finite() {
                return Err(Error::arg(format!("non-finite observation at ({}, {})", o.x, o.y)));
            }
            sum[(r, c)] += o.excess_db;
            count[(r, c)] += 1;
        }
        for r0 in (0..geo.height).step_by(ts) {
            for c0 in (0..geo.width).step_by(ts) {
                let (h, w) = (ts.min(geo.height - r0), ts.min(geo.width - c0));
                let any = (r0..r0 + h).any(|r| (c0..c0 + w).any(|c| count[(r, c)] > 0));
                if any || cfg.keep_empty {
                    jobs.push((gi, r0, c0, h, w));
                }
            }
        }
        binned.push(ndarray::Zip::from(&sum).and(&count).map_collect(|&s, &n| if n > 0 { s / n as f64 } else { f64::NAN }));
    }

    jobs.par_iter()
        .map(|&(gi, r0, c0, h, w)| {
            let window = |p: &Array2<f32>| p.slice(ndarray::s![r0..r0 + h, c0..c0 + w]).to_owned();
            let obs = binned[gi].slice(ndarray::s![r0..r0 + h, c0..c0 + w]);
            let mut obs_z = Array2::<f32>::zeros((h, w));
            let mut mask = Array2::<f32>::zeros((h, w));
            for (&db, (z, m)) in obs.iter().zip(obs_z.iter_mut().zip(mask.iter_mut())) {
                if db.is_finite() {
                    *z = normalizer.normalize(db)? as f32;
                    *m = 1.0;
                }
            }
            let tile = AgxTile {
                flags: 0,
                cond: cond.iter().map(window).collect(),
                obs_z,
                mask,
            };
            let g = &sets[gi].geometry;
            let (ox, oy) = (geo.origin_x + c0 as f64 * geo.cell_size, geo.origin_y - r0 as f64 * geo.cell_size);
            let meta = TileMeta {
                elev_deg: g.elev_deg,
                az_deg: g.az_deg,
                alt_km: g.alt_km,
                eta: normalizer.eta,
                mu: normalizer.mu,
                sigma: normalizer.sigma,
                geo: TileGeo {
                    origin_x: ox,
                    origin_y: oy,
                    cell_size: geo.cell_size,
                },
            };
            let path = out_dir.join(format!("{stem}_g{gi:03}_r{r0:05}_c{c0:05}.agx"));
            write_agx1(&path, &tile)?;
            write_meta(meta_path(&path), &meta)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportedTile {
    pub path: PathBuf,
    pub meta: TileMeta,
    pub tile: AgxTile,
    /// obs_z plane denormalised to excess dB; nodata where outside the
    /// normaliser's range.
    pub excess_db: RasterGrid,
}

pub const IMPORT_NODATA: f64 = -9999.0;

/// Read tiles and sidecars and convert their obs_z planes back to dB.
pub fn import_predictions<P: AsRef<Path> + Sync>(paths: &[P]) -> Result<Vec<ImportedTile>> {
    paths
        .par_iter()
        .map(|p| {
            let path = p.as_ref();
            let tile = read_agx1(path)?;
            let meta = read_meta(meta_path(path))?;
            let (h, w) = tile.dim();
            let geo = GridGeometry::new(meta.geo.origin_x, meta.geo.origin_y, meta.geo.cell_size, w, h)?;
            let norm = meta.normalizer();
            let vals = tile
                .obs_z
                .iter()
                .zip(&tile.mask)
                .map(|(&z, &m)| {
                    if tile.flags & FLAG_PREDICTION == 0 && m == 0.0 {
                        return IMPORT_NODATA;
                    }
                    norm.denormalize(z as f64).unwrap_or(IMPORT_NODATA)
                })
                .collect();
            Ok(ImportedTile {
                path: path.to_path_buf(),
                meta,
                excess_db: RasterGrid::new(geo, IMPORT_NODATA, vals)?,
                tile,
            })
        })
        .collect()
}

/// Paste imported tiles onto a target grid by pixel centre; later tiles win.
pub fn mosaic(tiles: &[ImportedTile], target: &GridGeometry) -> RasterGrid {
    let mut out = RasterGrid::filled(*target, IMPORT_NODATA, IMPORT_NODATA);
    for t in tiles {
        let g = &t.excess_db;
        for r in 0..g.height() {
            for c in 0..g.width() {
                let Some(v) = g.get(r, c) else { continue };
                let (x, y) = g.pixel_to_world(r, c);
                if let Some((rr, cc)) = target.world_to_pixel(x, y) {
                    out.set(rr, cc, v);
                }
            }
        }
    }
    out
}
