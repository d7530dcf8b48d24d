//! Reflection capability of the ground and specular candidates around a UT.
//!
//! The terrain score is a weighted sum of three normalised terms:
//! `T = wS (1 - S~) + wR (1 - R~) + wK clamp((1 - K~) / 2, 0, 1)`
//! where `S~`, `R~` are slope and roughness scaled to [0, 1] between their 2nd
//! and 98th percentiles and `K~` is signed curvature scaled to [-1, 1] by the
//! larger of those percentiles' magnitudes. Flat, smooth and concave ground
//! scores high. Land cover then scales it: `R = T (1 + beta)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LinkSpec, SPEED_OF_LIGHT};
use crate::raster::{class_index, LandCoverTable, Landscape, RasterGrid};
use crate::stats::percentile;
use crate::terrain::TerrainDerivatives;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionWeights {
    pub w_slope: f64,
    pub w_roughness: f64,
    pub w_curvature: f64,
}

impl Default for ReflectionWeights {
    fn default() -> Self {
        Self {
            w_slope: 0.4,
            w_roughness: 0.4,
            w_curvature: 0.2,
        }
    }
}

impl ReflectionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_slope, self.w_roughness, self.w_curvature];
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::arg("reflection weights must be non-negative"));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("reflection weights sum to {}, expected 1", w.iter().sum::<f64>())));
        }
        Ok(())
    }
}

/// Scaling constants for the three sub-scores, fixed once per region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalization {
    pub slope: (f64, f64),
    pub roughness: (f64, f64),
    pub curvature_scale: f64,
}

const LOW_PCT: f64 = 2.0;
const HIGH_PCT: f64 = 98.0;

impl ScoreNormalization {
    pub fn from_derivatives(d: &TerrainDerivatives) -> Result<Self> {
        let range = |g: &RasterGrid| -> Result<(f64, f64)> {
            let lo = percentile(g.valid_values(), LOW_PCT);
            let hi = percentile(g.valid_values(), HIGH_PCT);
            lo.zip(hi).ok_or_else(|| Error::arg("derivative layer holds no valid cells"))
        };
        let (klo, khi) = range(&d.curvature)?;
        Ok(Self {
            slope: range(&d.slope)?,
            roughness: range(&d.roughness)?,
            curvature_scale: klo.abs().max(khi.abs()),
        })
    }
}

fn unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi - lo <= 0.0 {
        return if v > hi { 1.0 } else { 0.0 };
    }
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Terrain score of one pixel.
pub fn reflect_score(slope: f64, roughness: f64, curvature: f64, n: &ScoreNormalization, w: &ReflectionWeights) -> f64 {
    let s = unit(slope, n.slope);
    let r = unit(roughness, n.roughness);
    let k = if n.curvature_scale > 0.0 {
        (curvature / n.curvature_scale).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let concave = ((1.0 - k) / 2.0).clamp(0.0, 1.0);
    w.w_slope * (1.0 - s) + w.w_roughness * (1.0 - r) + w.w_curvature * concave
}

pub fn terrain_reflect_score(d: &TerrainDerivatives, w: &ReflectionWeights) -> Result<RasterGrid> {
    w.validate()?;
    if !d.slope.same_geometry(&d.roughness) || !d.slope.same_geometry(&d.curvature) {
        return Err(Error::arg("derivative layers have mismatched geometry"));
    }
    let n = ScoreNormalization::from_derivatives(d)?;
    let vals = d
        .slope
        .values()
        .iter()
        .zip(d.roughness.values())
        .zip(d.curvature.values())
        .map(|((&s, &r), &k)| {
            if d.slope.is_nodata(s) || d.roughness.is_nodata(r) || d.curvature.is_nodata(k) {
                d.slope.nodata
            } else {
                reflect_score(s, r, k, &n, w)
            }
        })
        .collect();
    d.slope.with_values(vals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionMap {
    /// R >= 0, aligned to the terrain-score grid.
    pub grid: RasterGrid,
    pub weights: ReflectionWeights,
    pub betas: Vec<f64>,
}

/// Scale terrain scores by the land-cover factor `1 + beta`. Land-cover
/// nodata yields nodata.
pub fn apply_landcover(
    t: &RasterGrid,
    landcover: &RasterGrid,
    table: &LandCoverTable,
    weights: ReflectionWeights,
) -> Result<ReflectionMap> {
    table.validate()?;
    let aligned = landcover.same_geometry(t);
    let mut vals = Vec::with_capacity(t.values().len());
    for r in 0..t.height() {
        for c in 0..t.width() {
            let Some(score) = t.get(r, c) else {
                vals.push(t.nodata);
                continue;
            };
            let lc = if aligned {
                landcover.get(r, c)
            } else {
                let (x, y) = t.pixel_to_world(r, c);
                landcover.value_at(x, y).map_err(|_| {
                    Error::Geometry(format!("land cover does not cover ({x}, {y})"))
                })?
            };
            let Some(lc) = lc else {
                vals.push(t.nodata);
                continue;
            };
            let class = class_index(lc)
                .and_then(|id| table.get(id))
                .ok_or_else(|| Error::Validation(format!("unknown land-cover class {lc} at ({r},{c})")))?;
            vals.push(score * (1.0 + class.beta_reflect));
        }
    }
    Ok(ReflectionMap {
        grid: t.with_values(vals)?,
        weights,
        betas: table.classes().iter().map(|c| c.beta_reflect).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingConfig {
    pub r_min_m: f64,
    pub r_max_m: f64,
    pub growth: f64,
    pub angles: usize,
    /// Keep candidates with R strictly above this percentile of the map.
    pub keep_percentile: f64,
    /// ... and strictly above this absolute value.
    pub r_floor: f64,
    pub tolerance_deg: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            r_min_m: 10.0,
            r_max_m: 5000.0,
            growth: 1.5,
            angles: 16,
            keep_percentile: 90.0,
            r_floor: 0.3,
            tolerance_deg: 5.0,
        }
    }
}

impl RingConfig {
    pub fn radii(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut r = self.r_min_m;
        while r <= self.r_max_m * (1.0 + 1e-12) {
            out.push(r);
            r *= self.growth;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionCandidate {
    pub x: f64,
    pub y: f64,
    pub r_value: f64,
    /// Angle between the surface normal and the direction to the satellite.
    pub incidence_deg: f64,
    /// Angle between the surface normal and the direction to the UT.
    pub reflection_deg: f64,
    /// Angle between the mirrored satellite ray and the direction to the UT.
    pub specular_error_deg: f64,
    pub validated: bool,
    pub path_excess_m: f64,
    pub delay_s: f64,
    pub relative_power_db: f64,
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Upward unit normal of a plane with the given slope and uphill aspect.
pub fn surface_normal(slope_deg: f64, aspect_deg: f64) -> Vec3 {
    let (ss, cs) = slope_deg.to_radians().sin_cos();
    let (sa, ca) = aspect_deg.to_radians().sin_cos();
    [-ss * sa, -ss * ca, cs]
}

/// Unit vector from the ground towards the satellite.
pub fn satellite_direction(link: &LinkSpec) -> Vec3 {
    let (se, ce) = link.elevation_rad().sin_cos();
    let (dx, dy) = link.direction();
    [ce * dx, ce * dy, se]
}

/// Ring-sampled reflection candidates around the UT of `link`.
///
/// `derivs` must be computed on a grid that covers the candidates; land
/// heights come from `land`. Candidates are deduplicated by map pixel.
pub fn candidate_ring(
    link: &LinkSpec,
    map: &ReflectionMap,
    derivs: &TerrainDerivatives,
    land: &Landscape,
    cfg: &RingConfig,
) -> Result<Vec<ReflectionCandidate>> {
    let Some(cut) = percentile(map.grid.valid_values(), cfg.keep_percentile) else {
        return Ok(Vec::new());
    };
    let threshold = cut.max(cfg.r_floor);
    let ut: Vec3 = [
        link.ut_x,
        link.ut_y,
        land.ground_height(link.ut_x, link.ut_y)? + link.ut_height_agl,
    ];
    let sat = satellite_direction(link);
    let slant = link.slant_range_m();
    let tol = cfg.tolerance_deg;
    let az0 = link.azimuth_deg.to_radians();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();

    for radius in cfg.radii() {
        for k in 0..cfg.angles {
            let a = az0 + std::f64::consts::TAU * k as f64 / cfg.angles as f64;
            let (x, y) = (ut[0] + radius * a.sin(), ut[1] + radius * a.cos());
            let Some(pix) = map.grid.world_to_pixel(x, y) else { continue };
            let Some(rv) = map.grid.get(pix.0, pix.1) else { continue };
            if !(rv > threshold) || !seen.insert(pix) {
                continue;
            }
            let (Ok(Some(slope)), Ok(Some(aspect))) = (derivs.slope.value_at(x, y), derivs.aspect.value_at(x, y)) else {
                continue;
            };
            let Ok(z) = land.ground_height(x, y) else { continue };

            let n = surface_normal(slope, aspect);
            let to_ut = [ut[0] - x, ut[1] - y, ut[2] - z];
            let mirrored = {
                let k = 2.0 * dot(sat, n);
                [k * n[0] - sat[0], k * n[1] - sat[1], k * n[2] - sat[2]]
            };
            let specular_error = angle_deg(mirrored, to_ut);
            // plane-wave path difference: UT->P->satellite minus UT->satellite
            let excess = norm(to_ut) + dot(to_ut, sat);
            let spreading = 20.0 * ((slant + excess) / slant).log10();
            out.push(ReflectionCandidate {
                x,
                y,
                r_value: rv,
                incidence_deg: angle_deg(sat, n),
                reflection_deg: angle_deg(to_ut, n),
                specular_error_deg: specular_error,
                validated: specular_error <= tol && dot(sat, n) > 0.0 && dot(to_ut, n) > 0.0,
                path_excess_m: excess,
                delay_s: excess / SPEED_OF_LIGHT,
                relative_power_db: 20.0 * rv.min(1.0).log10() - spreading,
            });
        }
    }
    Ok(out)
}

pub fn write_candidates_csv(path: impl AsRef<Path>, candidates: &[ReflectionCandidate]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
    for c in candidates {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ids, GridGeometry};
    use crate::terrain::derive_terrain;
    use proptest::prelude::*;

    fn geo(n: usize, cs: f64) -> GridGeometry {
        GridGeometry::new(-(n as f64) * cs / 2.0, n as f64 * cs / 2.0, cs, n, n).unwrap()
    }

    #[test]
    fn flat_smooth_plane_score() {
        let d = derive_terrain(&RasterGrid::filled(geo(10, 5.0), -9999.0, 3.0)).unwrap();
        let t = terrain_reflect_score(&d, &ReflectionWeights::default()).unwrap();
        assert!(t.values().iter().all(|&v| (v - 0.9).abs() < 1e-12));
        let w = ReflectionWeights {
            w_slope: 0.5,
            w_roughness: 0.5,
            w_curvature: 0.0,
        };
        let t = terrain_reflect_score(&d, &w).unwrap();
        assert!(t.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn steepest_roughest_pixel_keeps_only_curvature_term() {
        let n = ScoreNormalization {
            slope: (0.0, 30.0),
            roughness: (0.0, 10.0),
            curvature_scale: 0.1,
        };
        let w = ReflectionWeights::default();
        assert!((reflect_score(30.0, 10.0, 0.0, &n, &w) - 0.5 * w.w_curvature).abs() < 1e-12);
        assert!((reflect_score(45.0, 99.0, 0.0, &n, &w) - 0.5 * w.w_curvature).abs() < 1e-12);
        // concave ground scores above neutral
        assert!(reflect_score(0.0, 0.0, -0.1, &n, &w) > reflect_score(0.0, 0.0, 0.0, &n, &w));
    }

    #[test]
    fn landcover_multipliers() {
        let g = geo(2, 1.0);
        let t = RasterGrid::filled(g, -1.0, 0.8);
        let lc = RasterGrid::new(
            g,
            255.0,
            vec![ids::WATER as f64, ids::MIXED_FOREST as f64, ids::BARREN as f64, 255.0],
        )
        .unwrap();
        let m = apply_landcover(&t, &lc, &LandCoverTable::default(), ReflectionWeights::default()).unwrap();
        assert!((m.grid.raw(0, 0) - 1.2).abs() < 1e-12);
        assert!((m.grid.raw(0, 1) - 0.72).abs() < 1e-12);
        assert_eq!(m.grid.raw(1, 0), 0.8);
        assert!(m.grid.get(1, 1).is_none());
        let bad = RasterGrid::filled(g, 255.0, 42.0);
        assert!(matches!(
            apply_landcover(&t, &bad, &LandCoverTable::default(), ReflectionWeights::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let w = ReflectionWeights {
            w_slope: 0.5,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn radii_grow_geometrically() {
        let r = RingConfig::default().radii();
        assert_eq!(r[0], 10.0);
        assert_eq!(r[1], 15.0);
        assert!(r.last().copied().unwrap() <= 5000.0);
        assert!(r.last().copied().unwrap() * 1.5 > 5000.0);
    }

    struct Scene {
        land: Landscape,
        derivs: TerrainDerivatives,
        map: ReflectionMap,
        link: LinkSpec,
        water: (usize, usize),
    }

    /// Flat barren plain with one water pixel at the mirror point of a 25 deg link.
    fn scene() -> Scene {
        let g = geo(40, 5.0);
        let dem = RasterGrid::filled(g, -9999.0, 0.0);
        let radius = 10.0 * 1.5f64.powi(4); // 50.625 m, on the ring grid
        let el = 25.0f64;
        let h = radius * el.to_radians().tan();
        // satellite to the north, mirror point due north of the UT
        let link = LinkSpec::new(2.5, 2.5, el, 0.0, 500.0, 12e9).unwrap().with_ut_height(h);
        let water = g.world_to_pixel(2.5, 2.5 + radius).unwrap();
        let lc = RasterGrid::from_fn(g, 255.0, |r, c| {
            if (r, c) == water { ids::WATER as f64 } else { ids::BARREN as f64 }
        });
        let derivs = derive_terrain(&dem).unwrap();
        let t = terrain_reflect_score(&derivs, &ReflectionWeights::default()).unwrap();
        let map = apply_landcover(&t, &lc, &LandCoverTable::default(), ReflectionWeights::default()).unwrap();
        let land = Landscape::from_grids(dem, Some(lc), LandCoverTable::default()).unwrap();
        Scene { land, derivs, map, link, water }
    }

    #[test]
    fn uniform_map_yields_nothing() {
        let s = scene();
        let uniform = ReflectionMap {
            grid: s.map.grid.map_valid(|_| 0.9),
            ..s.map.clone()
        };
        let c = candidate_ring(&s.link, &uniform, &s.derivs, &s.land, &RingConfig::default()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn mirror_water_pixel_is_validated() {
        let s = scene();
        let c = candidate_ring(&s.link, &s.map, &s.derivs, &s.land, &RingConfig::default()).unwrap();
        assert_eq!(c.len(), 1);
        let cand = c[0];
        assert!(cand.validated);
        assert!(cand.specular_error_deg < 1e-9);
        assert!((cand.incidence_deg - cand.reflection_deg).abs() < 1e-9);
        assert!((cand.r_value - 1.35).abs() < 1e-12);
        assert_eq!(s.map.grid.world_to_pixel(cand.x, cand.y), Some(s.water));
        // excess path of a ground bounce for a plane wave: 2 h sin(el)
        let h = s.link.ut_height_agl;
        assert!((cand.path_excess_m - 2.0 * h * 25f64.to_radians().sin()).abs() < 1e-9);
        assert!(cand.relative_power_db < 0.0 && cand.relative_power_db > -1e-3);
    }

    #[test]
    fn tilted_surface_rejected() {
        let mut s = scene();
        let (r, c) = s.water;
        s.derivs.slope.set(r, c, 20.0);
        s.derivs.aspect.set(r, c, 90.0);
        let cands = candidate_ring(&s.link, &s.map, &s.derivs, &s.land, &RingConfig::default()).unwrap();
        assert_eq!(cands.len(), 1);
        assert!(!cands[0].validated);
        assert!(cands[0].specular_error_deg > 5.0);
    }

    #[test]
    fn offset_invariance() {
        let dem = RasterGrid::from_fn(geo(20, 5.0), -9999.0, |r, c| ((r * 7 + c * 3) % 11) as f64);
        let a = terrain_reflect_score(&derive_terrain(&dem).unwrap(), &ReflectionWeights::default()).unwrap();
        let b = terrain_reflect_score(&derive_terrain(&dem.map_valid(|v| v + 1000.0)).unwrap(), &ReflectionWeights::default()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn score_monotone(s in 0.0f64..60.0, ds in 0.0f64..30.0, r in 0.0f64..20.0, dr in 0.0f64..10.0, k in -0.2f64..0.2) {
            let n = ScoreNormalization { slope: (1.0, 40.0), roughness: (0.5, 12.0), curvature_scale: 0.1 };
            let w = ReflectionWeights::default();
            let base = reflect_score(s, r, k, &n, &w);
            prop_assert!(reflect_score(s + ds, r, k, &n, &w) <= base);
            prop_assert!(reflect_score(s, r + dr, k, &n, &w) <= base);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn water_beats_forest(t in 1e-6f64..1.0) {
            let g = geo(1, 1.0);
            let tg = RasterGrid::filled(g, -1.0, t);
            let table = LandCoverTable::default();
            let water = apply_landcover(&tg, &RasterGrid::filled(g, 255.0, ids::WATER as f64), &table, ReflectionWeights::default()).unwrap();
            let forest = apply_landcover(&tg, &RasterGrid::filled(g, 255.0, ids::MIXED_FOREST as f64), &table, ReflectionWeights::default()).unwrap();
            prop_assert!(water.grid.raw(0, 0) > forest.grid.raw(0, 0));
            prop_assert!(forest.grid.raw(0, 0) >= 0.0);
        }
    }
}
