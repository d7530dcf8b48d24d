//! Raster ray tracing of a single link: which pixels the ground track crosses,
//! how far the (earth-curvature corrected) ray clears each of them, and the
//! resulting LOS/NLOS verdict with the profile of obstructing pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_box, ground_segment, GeometryConfig, GroundSegment, LinkSpec};
use crate::raster::{GridGeometry, Landscape, TileIndex};

pub const DEFAULT_RHO_THRESHOLD: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "LOS")]
    Los,
    #[serde(rename = "NLOS")]
    Nlos,
}

impl Verdict {
    pub fn is_los(self) -> bool {
        self == Verdict::Los
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Los => "LOS",
            Verdict::Nlos => "NLOS",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    /// Horizontal distance from the UT, metres.
    pub dist_h: f64,
    /// Effective (ground + canopy) height.
    pub terrain_height: f64,
    pub canopy_height: f64,
    /// Link height minus effective height; negative when the ray is blocked.
    pub clearance: f64,
    /// Fresnel clarity; `None` within one cell of either end.
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathProfile {
    pub entries: Vec<ProfileEntry>,
    /// Over every traversed pixel; `None` if none was traversed.
    pub min_clearance: Option<f64>,
    pub min_rho: Option<f64>,
    pub verdict: Verdict,
    pub segment: GroundSegment,
    pub wavelength: f64,
}

impl PathProfile {
    /// UT-side 3D distance of a profile entry.
    pub fn ray_distance(&self, e: &ProfileEntry) -> f64 {
        self.segment.split(e.dist_h).1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub rho_threshold: f64,
    #[serde(flatten)]
    pub geometry: GeometryConfig,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            rho_threshold: DEFAULT_RHO_THRESHOLD,
            geometry: GeometryConfig::default(),
        }
    }
}

/// First Fresnel zone radius, metres.
pub fn fresnel_radius(wavelength: f64, d1: f64, d2: f64) -> Result<f64> {
    if !(d1 >= 0.0 && d2 >= 0.0) || d1 + d2 <= 0.0 {
        return Err(Error::arg(format!("Fresnel radius needs d1 + d2 > 0, got {d1}, {d2}")));
    }
    Ok((wavelength * d1 * d2 / (d1 + d2)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockHit {
    pub tile: usize,
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Tiles whose bounding boxes the segment touches, ordered by entry parameter.
pub fn clip_blocks(p_s: (f64, f64), p_e: (f64, f64), tiles: &TileIndex) -> Result<Vec<BlockHit>> {
    if p_s == p_e {
        return Err(Error::arg("cannot clip a zero-length segment"));
    }
    let mut hits: Vec<BlockHit> = tiles
        .tiles()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            clip_to_box(p_s, p_e, &t.bbox()).map(|(t0, t1)| BlockHit {
                tile: i,
                t_enter: t0,
                t_exit: t1,
            })
        })
        .collect();
    hits.sort_by(|a, b| a.t_enter.total_cmp(&b.t_enter).then(a.tile.cmp(&b.tile)));
    Ok(hits)
}

/// Integer line from `a` to `b` inclusive. Along the major axis every step
/// advances one pixel; the minor coordinate is the exact offset rounded with
/// ties towards the start point.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (dx, dy) = ((b.0 - a.0).abs(), (b.1 - a.1).abs());
    let (sx, sy) = ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    let steep = dy > dx;
    let (major, minor) = if steep { (dy, dx) } else { (dx, dy) };
    let mut out = Vec::with_capacity(major as usize + 1);
    let (mut x, mut y) = a;
    let mut d = 2 * minor - major;
    for _ in 0..=major {
        out.push((x, y));
        if d > 0 {
            if steep {
                x += sx;
            } else {
                y += sy;
            }
            d -= 2 * major;
        }
        d += 2 * minor;
        if steep {
            y += sy;
        } else {
            x += sx;
        }
    }
    out
}

/// Pixels `(row, col)` of `block` crossed by the part of the segment inside it.
pub fn traverse_pixels(p_s: (f64, f64), p_e: (f64, f64), block: &GridGeometry) -> Vec<(usize, usize)> {
    let Some((t0, t1)) = clip_to_box(p_s, p_e, &block.bounds()) else {
        return Vec::new();
    };
    let at = |t: f64| (p_s.0 + t * (p_e.0 - p_s.0), p_s.1 + t * (p_e.1 - p_s.1));
    let to_px = |p: (f64, f64)| {
        let (r, c) = block.world_to_pixel(p.0, p.1).expect("clipped point lies in block");
        (c as i64, r as i64)
    };
    bresenham(to_px(at(t0)), to_px(at(t1)))
        .into_iter()
        .map(|(c, r)| (r as usize, c as usize))
        .collect()
}

struct Sample {
    dist_h: f64,
    ground: f64,
    canopy: f64,
}

/// Lattice pixels under the segment with their heights, sorted by horizontal
/// distance. The UT's own pixel is skipped.
fn sample_pixels(seg: &GroundSegment, land: &Landscape) -> Result<Vec<Sample>> {
    let dem = &land.dem;
    let hits = clip_blocks(seg.start, seg.end, dem)?;
    let gap = |t0: f64, t1: f64| Error::Coverage {
        from_m: t0 * seg.length_m,
        to_m: t1 * seg.length_m,
    };
    let mut reached = 0.0f64;
    for h in &hits {
        if h.t_enter > reached + 1e-9 {
            return Err(gap(reached, h.t_enter));
        }
        reached = reached.max(h.t_exit);
    }
    if reached < 1.0 - 1e-9 {
        return Err(gap(reached, 1.0));
    }

    // one Bresenham line on the shared lattice keeps results independent of tiling
    let cs = dem.cell_size();
    let nudge = 1e-9 * cs;
    let ut_pixel = dem.lattice_pixel(seg.start.0, seg.start.1);
    let last = seg.point_at((seg.length_m - nudge).max(0.0));
    let end_pixel = dem.lattice_pixel(last.0, last.1);
    let mut out = Vec::new();
    for (c, r) in bresenham((ut_pixel.1, ut_pixel.0), (end_pixel.1, end_pixel.0)) {
        if (r, c) == ut_pixel {
            continue;
        }
        let (x, y) = dem.lattice_center(r, c);
        let dist_h = ((x - seg.start.0) * seg.direction.0 + (y - seg.start.1) * seg.direction.1).max(0.0);
        let (ground, canopy) = land.pixel_heights(r, c).map_err(|e| match e {
            Error::Nodata { .. } | Error::OutOfDomain { .. } => Error::Coverage {
                from_m: (dist_h - cs / 2.0).max(0.0),
                to_m: dist_h + cs / 2.0,
            },
            e => e,
        })?;
        out.push(Sample { dist_h, ground, canopy });
    }
    out.sort_by(|a, b| a.dist_h.total_cmp(&b.dist_h));
    Ok(out)
}

/// Decide LOS/NLOS for `link` and collect the obstructing pixels.
pub fn trace_link(link: &LinkSpec, land: &Landscape, cfg: &TraceConfig) -> Result<PathProfile> {
    let seg = ground_segment(link, land, &cfg.geometry)?;
    let wavelength = link.wavelength();
    let mut profile = PathProfile {
        entries: Vec::new(),
        min_clearance: None,
        min_rho: None,
        verdict: Verdict::Los,
        segment: seg,
        wavelength,
    };
    if seg.length_m <= 0.0 {
        return Ok(profile);
    }
    let cs = land.dem.cell_size();
    let cos_el = seg.elevation_rad.cos();
    for s in sample_pixels(&seg, land)? {
        let h_eff = s.ground + s.canopy;
        let clearance = seg.link_height(s.dist_h) - h_eff;
        let (d1, d2) = seg.split(s.dist_h);
        let rho = if d1 > cs && d2 > cs {
            Some(clearance * cos_el / fresnel_radius(wavelength, d1, d2)?)
        } else {
            None
        };
        profile.min_clearance = Some(profile.min_clearance.map_or(clearance, |m| m.min(clearance)));
        if let Some(r) = rho {
            profile.min_rho = Some(profile.min_rho.map_or(r, |m| m.min(r)));
        }
        if clearance < 0.0 || rho.is_some_and(|r| r < cfg.rho_threshold) {
            let entry = ProfileEntry {
                dist_h: s.dist_h,
                terrain_height: h_eff,
                canopy_height: s.canopy,
                clearance,
                rho,
            };
            match profile.entries.last_mut() {
                // equal distances: keep the worse pixel so dist_h stays strictly increasing
                Some(last) if last.dist_h == entry.dist_h => {
                    if entry.clearance < last.clearance {
                        *last = entry;
                    }
                }
                _ => profile.entries.push(entry),
            }
        }
    }
    if !profile.entries.is_empty() {
        profile.verdict = Verdict::Nlos;
    }
    Ok(profile)
}
