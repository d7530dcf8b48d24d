//! Per-link channel estimation, region sweeps and validation metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GroundSegment, LinkSpec, DEFAULT_UT_HEIGHT_AGL, EARTH_RADIUS_M};
use crate::losses::{
    atmosphere_loss, bullington_loss, fspl, nearest_weather, segment_vegetation, twdp_stats, vegetation_loss,
    AtmosphereLoss, DiffractionLoss, DiffractionPath, LossBreakdown, LossTables, RayPoint, TwdpStats, VegSegment,
    WeatherRecord,
};
use crate::raster::{GridGeometry, Landscape, RasterGrid};
use crate::reflection::{candidate_ring, ReflectionCandidate, ReflectionMap, RingConfig};
use crate::sampling::ManifestRow;
use crate::terrain::TerrainDerivatives;
use crate::trace::{fresnel_radius, trace_link, PathProfile, TraceConfig, Verdict};

/// Reflection inputs: the R map and the derivatives it was built from.
#[derive(Clone, Debug)]
pub struct ReflectionLayer {
    pub map: ReflectionMap,
    pub derivs: TerrainDerivatives,
}

/// Everything a link estimate reads besides the link itself.
#[derive(Debug)]
pub struct Scene {
    pub land: Landscape,
    pub reflection: Option<ReflectionLayer>,
    pub weather: Vec<WeatherRecord>,
}

impl Scene {
    pub fn new(land: Landscape) -> Self {
        Self {
            land,
            reflection: None,
            weather: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub trace: TraceConfig,
    pub tables: LossTables,
    pub ring: RingConfig,
    pub atmosphere: bool,
    pub multipath: bool,
    /// Copied into every estimate; left empty for byte-reproducible output.
    pub timestamp: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            trace: TraceConfig::default(),
            tables: LossTables::default(),
            ring: RingConfig::default(),
            atmosphere: true,
            multipath: true,
            timestamp: None,
        }
    }
}

/// Weather used when no record is available: dry, cloudless.
pub fn clear_sky(x: f64, y: f64) -> WeatherRecord {
    WeatherRecord {
        x,
        y,
        rain_mm_h: 0.0,
        cloud_lwc: 0.0,
        temp_c: 15.0,
        pressure_hpa: 1013.25,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub point_id: usize,
    pub link: LinkSpec,
    pub verdict: Verdict,
    pub min_clearance_m: Option<f64>,
    pub min_rho: Option<f64>,
    pub profile_len: usize,
    pub breakdown: LossBreakdown,
    pub diffraction: DiffractionLoss,
    pub vegetation_segments: Vec<VegSegment>,
    pub atmosphere: AtmosphereLoss,
    pub reflection: Option<ReflectionCandidate>,
    pub twdp: Option<TwdpStats>,
    pub timestamp: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub d_m: f64,
    pub h_m: f64,
    pub clr_m: f64,
}

/// Per-link trace record as written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub point_id: usize,
    pub elev: f64,
    pub az: f64,
    pub alt_km: f64,
    pub verdict: Verdict,
    pub min_clearance_m: Option<f64>,
    pub min_rho: Option<f64>,
    pub profile: Vec<ProfilePoint>,
}

impl TraceRecord {
    pub fn new(point_id: usize, link: &LinkSpec, p: &PathProfile) -> Self {
        Self {
            point_id,
            elev: link.elevation_deg,
            az: link.azimuth_deg,
            alt_km: link.altitude_km,
            verdict: p.verdict,
            min_clearance_m: p.min_clearance,
            min_rho: p.min_rho,
            profile: p
                .entries
                .iter()
                .map(|e| ProfilePoint {
                    d_m: e.dist_h,
                    h_m: e.terrain_height,
                    clr_m: e.clearance,
                })
                .collect(),
        }
    }
}

fn link_label(point_id: usize, link: &LinkSpec) -> String {
    format!(
        "point {point_id} el {} az {} alt {} km",
        link.elevation_deg, link.azimuth_deg, link.altitude_km
    )
}

/// Ground distance from the UT to the sub-satellite point.
pub fn ground_distance_m(elevation_deg: f64, altitude_km: f64) -> f64 {
    let el = elevation_deg.to_radians();
    let r = EARTH_RADIUS_M;
    let psi = (r * el.cos() / (r + altitude_km * 1000.0)).acos() - el;
    r * psi.max(0.0)
}

/// Vegetation segments along the traced slant path. The ray is inside a
/// class only where it passes below that pixel's canopy top.
fn vegetation_segments(seg: &GroundSegment, land: &Landscape, tables: &LossTables) -> Result<Vec<VegSegment>> {
    if land.landcover.is_none() || seg.length_m <= 0.0 {
        return Ok(Vec::new());
    }
    let cos_el = seg.elevation_rad.cos();
    let s_max = seg.length_m / cos_el;
    let type_at = |s: f64| -> Option<u8> {
        let d = (s * cos_el).min(seg.length_m);
        let (x, y) = seg.point_at(d);
        let class = land.class_at(x, y)?;
        if !class.is_vegetation {
            return None;
        }
        let (row, col) = land.dem.lattice_pixel(x, y);
        let (ground, canopy) = land.pixel_heights(row, col).ok()?;
        (seg.link_height(d) < ground + canopy).then_some(class.class_id)
    };
    let veg = |id: u8| land.classes.get(id).is_some_and(|c| c.is_vegetation);
    let segs = segment_vegetation(type_at, veg, s_max, tables.veg_step_m, tables.veg_tolerance_m)?;
    Ok(segs.into_iter().filter(|s| s.length() > 0.0).collect())
}

/// Obstructing points in the ray frame, with canopy removed wherever an
/// extinction segment already accounts for it.
fn diffraction_points(profile: &PathProfile, segs: &[VegSegment], cs: f64, rho_threshold: f64) -> Result<Vec<(f64, f64)>> {
    let seg = &profile.segment;
    let cos_el = seg.elevation_rad.cos();
    let half = 0.5 * cs * std::f64::consts::SQRT_2 / cos_el;
    let mut out = Vec::new();
    for e in &profile.entries {
        let s = e.dist_h / cos_el;
        let covered = e.canopy_height > 0.0 && segs.iter().any(|v| v.s_in <= s + half && v.s_out >= s - half);
        let (clearance, rho) = if covered {
            let clr = seg.link_height(e.dist_h) - (e.terrain_height - e.canopy_height);
            let rho = match e.rho {
                Some(_) => {
                    let (d1, d2) = seg.split(e.dist_h);
                    Some(clr * cos_el / fresnel_radius(profile.wavelength, d1, d2)?)
                }
                None => None,
            };
            (clr, rho)
        } else {
            (e.clearance, e.rho)
        };
        if clearance < 0.0 || rho.is_some_and(|r| r < rho_threshold) {
            out.push((e.dist_h, clearance));
        }
    }
    Ok(out)
}

/// Full loss decomposition for one link.
pub fn estimate_link(point_id: usize, link: &LinkSpec, scene: &Scene, cfg: &EngineConfig) -> Result<ChannelEstimate> {
    estimate_inner(point_id, link, scene, cfg).map_err(|e| e.for_link(link_label(point_id, link)))
}

fn estimate_inner(point_id: usize, link: &LinkSpec, scene: &Scene, cfg: &EngineConfig) -> Result<ChannelEstimate> {
    let land = &scene.land;
    let profile = trace_link(link, land, &cfg.trace)?;
    let seg = profile.segment;
    let slant = link.slant_range_m();
    let fspl_db = fspl(link.frequency_hz, slant)?;

    let vegetation_segments = vegetation_segments(&seg, land, &cfg.tables)?;
    let veg_db = vegetation_loss(&vegetation_segments, link.frequency_hz, &cfg.tables.vegetation)?;

    let diffraction = if profile.verdict == Verdict::Nlos {
        let pts = diffraction_points(&profile, &vegetation_segments, land.dem.cell_size(), cfg.trace.rho_threshold)?;
        let cos_el = seg.elevation_rad.cos();
        let path = DiffractionPath {
            points: pts
                .iter()
                .map(|&(d, clr)| RayPoint {
                    s: d / cos_el,
                    excess: -clr,
                })
                .collect(),
            smooth: pts
                .iter()
                .map(|&(d, _)| RayPoint {
                    s: d / cos_el,
                    excess: seg.ut_ground_m - seg.link_height(d),
                })
                .collect(),
            total_m: slant,
            ground_m: ground_distance_m(link.elevation_deg, link.altitude_km),
            ut_height_m: link.ut_height_agl,
            sat_height_m: link.altitude_km * 1000.0,
            frequency_hz: link.frequency_hz,
            wavelength: link.wavelength(),
        };
        bullington_loss(&path)
    } else {
        bullington_loss(&DiffractionPath {
            points: Vec::new(),
            smooth: Vec::new(),
            total_m: slant,
            ground_m: 0.0,
            ut_height_m: link.ut_height_agl,
            sat_height_m: link.altitude_km * 1000.0,
            frequency_hz: link.frequency_hz,
            wavelength: link.wavelength(),
        })
    };

    let atmosphere = if cfg.atmosphere {
        let clear = clear_sky(link.ut_x, link.ut_y);
        let w = nearest_weather(&scene.weather, link.ut_x, link.ut_y).unwrap_or(&clear);
        atmosphere_loss(link.elevation_deg, link.frequency_hz, w, &cfg.tables.atmosphere)?
    } else {
        AtmosphereLoss {
            gas_db: 0.0,
            cloud_db: 0.0,
            rain_db: 0.0,
            total_db: 0.0,
        }
    };

    // multipath only with a validated specular partner for the direct wave
    let (reflection, twdp) = match (&scene.reflection, cfg.multipath) {
        (Some(layer), true) => {
            let cands = candidate_ring(link, &layer.map, &layer.derivs, land, &cfg.ring)?;
            let best = cands
                .into_iter()
                .filter(|c| c.validated)
                .max_by(|a, b| a.relative_power_db.total_cmp(&b.relative_power_db));
            let twdp = best.map(|c| twdp_stats(Some(c.relative_power_db), cfg.tables.diffuse_rel_db));
            (best, twdp)
        }
        _ => (None, None),
    };
    let multipath_db = twdp.map_or(0.0, |t| t.multipath_db);

    let breakdown = LossBreakdown::new(fspl_db, diffraction.total_db, veg_db, atmosphere.total_db, multipath_db);
    let terms = [
        breakdown.diffraction_db,
        breakdown.vegetation_db,
        breakdown.atmosphere_db,
        breakdown.multipath_db,
    ];
    if terms.iter().any(|t| !t.is_finite()) || breakdown.diffraction_db < 0.0 || breakdown.vegetation_db < 0.0 {
        return Err(Error::Validation(format!("inconsistent loss breakdown {breakdown:?}")));
    }
    Ok(ChannelEstimate {
        point_id,
        link: *link,
        verdict: profile.verdict,
        min_clearance_m: profile.min_clearance,
        min_rho: profile.min_rho,
        profile_len: profile.entries.len(),
        breakdown,
        diffraction,
        vegetation_segments,
        atmosphere,
        reflection,
        twdp,
        timestamp: cfg.timestamp.clone(),
    })
}

/// Build the link of a manifest row.
pub fn manifest_link(row: &ManifestRow, frequency_hz: f64, ut_height_agl: f64) -> Result<LinkSpec> {
    Ok(LinkSpec::new(row.x, row.y, row.elev_deg, row.az_deg, row.alt_km, frequency_hz)?.with_ut_height(ut_height_agl))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkFailure {
    pub point_id: usize,
    pub elev_deg: f64,
    pub az_deg: f64,
    pub alt_km: f64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElevationRate {
    pub elev_deg: f64,
    pub links: usize,
    pub nlos: usize,
    pub rate: f64,
    pub mean_excess_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub links: usize,
    pub failures: usize,
    pub obstruction_rate_by_elevation: Vec<ElevationRate>,
    pub mean_excess_db: f64,
    pub max_excess_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub estimates: Vec<ChannelEstimate>,
    pub failures: Vec<LinkFailure>,
    pub report: RegionReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub frequency_hz: f64,
    pub ut_height_agl: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            frequency_hz: 12e9,
            ut_height_agl: DEFAULT_UT_HEIGHT_AGL,
        }
    }
}

/// Obstruction rate and mean excess per elevation.
pub fn region_report(estimates: &[ChannelEstimate], failures: usize) -> RegionReport {
    let mut by_el: BTreeMap<u64, (f64, usize, usize, f64)> = BTreeMap::new();
    for e in estimates {
        let el = e.link.elevation_deg;
        let slot = by_el.entry(el.to_bits()).or_insert((el, 0, 0, 0.0));
        slot.1 += 1;
        slot.2 += usize::from(e.verdict == Verdict::Nlos);
        slot.3 += e.breakdown.total_excess_db;
    }
    let mut rates: Vec<ElevationRate> = by_el
        .into_values()
        .map(|(el, n, nlos, sum)| ElevationRate {
            elev_deg: el,
            links: n,
            nlos,
            rate: nlos as f64 / n as f64,
            mean_excess_db: sum / n as f64,
        })
        .collect();
    rates.sort_by(|a, b| a.elev_deg.total_cmp(&b.elev_deg));
    let excess: Vec<f64> = estimates.iter().map(|e| e.breakdown.total_excess_db).collect();
    RegionReport {
        links: estimates.len(),
        failures,
        obstruction_rate_by_elevation: rates,
        mean_excess_db: crate::stats::mean(&excess).unwrap_or(0.0),
        max_excess_db: excess.iter().copied().fold(0.0, f64::max),
    }
}

/// Evaluate every manifest row in parallel; failures are collected and the
/// sweep continues. Output order follows the manifest.
pub fn region_sweep(rows: &[ManifestRow], scene: &Scene, cfg: &EngineConfig, sweep: &SweepConfig) -> Result<SweepOutcome> {
    if rows.is_empty() {
        return Err(Error::arg("sample design is empty"));
    }
    let results: Vec<std::result::Result<ChannelEstimate, LinkFailure>> = rows
        .par_iter()
        .map(|row| {
            manifest_link(row, sweep.frequency_hz, sweep.ut_height_agl)
                .and_then(|link| estimate_link(row.point_id, &link, scene, cfg))
                .map_err(|e| LinkFailure {
                    point_id: row.point_id,
                    elev_deg: row.elev_deg,
                    az_deg: row.az_deg,
                    alt_km: row.alt_km,
                    error: e.to_string(),
                })
        })
        .collect();
    let mut estimates = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => estimates.push(e),
            Err(f) => failures.push(f),
        }
    }
    let report = region_report(&estimates, failures.len());
    Ok(SweepOutcome {
        estimates,
        failures,
        report,
    })
}

/// Inverse-distance-weighted rendering of scattered values onto a grid.
/// A pixel centre coinciding with a sample takes that sample's value.
pub fn idw_raster(samples: &[(f64, f64, f64)], geometry: &GridGeometry, power: f64, nodata: f64) -> Result<RasterGrid> {
    if samples.is_empty() {
        return Err(Error::arg("no samples to interpolate"));
    }
    let rows: Vec<Vec<f64>> = (0..geometry.height)
        .into_par_iter()
        .map(|r| {
            (0..geometry.width)
                .map(|c| {
                    let (x, y) = geometry.pixel_to_world(r, c);
                    let (mut num, mut den) = (0.0, 0.0);
                    for &(sx, sy, v) in samples {
                        let d = (sx - x).hypot(sy - y);
                        if d < 1e-9 {
                            return v;
                        }
                        let w = d.powf(-power);
                        num += w * v;
                        den += w;
                    }
                    num / den
                })
                .collect()
        })
        .collect();
    RasterGrid::new(*geometry, nodata, rows.concat())
}

/// One IDW heat map of mean total excess per ground point for every
/// elevation present. Rendering only: values between samples are not physical.
pub fn attenuation_maps(estimates: &[ChannelEstimate], geometry: &GridGeometry) -> Result<Vec<(f64, RasterGrid)>> {
    // elevation bits -> point -> (x, y, excess sum, count)
    type PointSums = BTreeMap<usize, (f64, f64, f64, usize)>;
    let mut by_el: BTreeMap<u64, PointSums> = BTreeMap::new();
    for e in estimates {
        let pts = by_el.entry(e.link.elevation_deg.to_bits()).or_default();
        let p = pts.entry(e.point_id).or_insert((e.link.ut_x, e.link.ut_y, 0.0, 0));
        p.2 += e.breakdown.total_excess_db;
        p.3 += 1;
    }
    let mut out = Vec::new();
    for (bits, pts) in by_el {
        let samples: Vec<(f64, f64, f64)> = pts.values().map(|&(x, y, s, n)| (x, y, s / n as f64)).collect();
        out.push((f64::from_bits(bits), idw_raster(&samples, geometry, 2.0, -9999.0)?));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

pub fn first_differences(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Fraction of steps where both series move in the same direction
/// (signs of first differences; a zero step matches only a zero step).
pub fn sign_agreement(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::arg("sign agreement needs at least two samples"));
    }
    let sign = |v: f64| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 };
    let (dx, dy) = (first_differences(x), first_differences(y));
    let hits = dx.iter().zip(&dy).filter(|(a, b)| sign(**a) == sign(**b)).count();
    Ok(hits as f64 / dx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value of the t-test with n - 2 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::arg("pearson needs at least three samples"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    // P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2), and df/(df+t^2) = 1 - r^2
    let df = (n - 2) as f64;
    let p_value = statrs::function::beta::beta_reg(df / 2.0, 0.5, (1.0 - r * r).max(0.0));
    Ok(Correlation { r, p_value, n })
}

/// Moving average with circular padding over `window` samples (centred,
/// the extra sample of an even window on the leading side).
pub fn moving_average_circular(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > x.len() {
        return Err(Error::arg(format!("window {window} outside 1..={}", x.len())));
    }
    let n = x.len() as isize;
    let lead = (window / 2) as isize;
    Ok((0..n)
        .map(|i| (0..window as isize).map(|k| x[(i - lead + k).rem_euclid(n) as usize]).sum::<f64>() / window as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryConfig;
    use crate::losses::{fresnel_parameter, knife_edge_loss};
    use crate::raster::{ids, LandCoverTable};
    use crate::reflection::{apply_landcover, terrain_reflect_score, ReflectionWeights};
    use crate::terrain::derive_terrain;
    use proptest::prelude::*;

    fn geo(w: usize, h: usize, cs: f64) -> GridGeometry {
        GridGeometry::new(0.0, h as f64 * cs, cs, w, h).unwrap()
    }

    fn no_curve() -> EngineConfig {
        EngineConfig {
            trace: TraceConfig {
                geometry: GeometryConfig {
                    earth_curvature: false,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn isolated(mut cfg: EngineConfig) -> EngineConfig {
        cfg.atmosphere = false;
        cfg.multipath = false;
        cfg
    }

    fn scene(dem: RasterGrid, lc: Option<RasterGrid>) -> Scene {
        Scene::new(Landscape::from_grids(dem, lc, LandCoverTable::default()).unwrap())
    }

    #[test]
    fn flat_clear_high_link_has_no_excess() {
        let g = geo(30, 30, 10.0);
        let lc = RasterGrid::filled(g, 255.0, ids::BARREN as f64);
        let s = scene(RasterGrid::filled(g, -9999.0, 0.0), Some(lc));
        let link = LinkSpec::new(150.0, 150.0, 85.0, 40.0, 550.0, 12e9).unwrap();
        let e = estimate_link(0, &link, &s, &isolated(EngineConfig::default())).unwrap();
        assert_eq!(e.verdict, Verdict::Los);
        assert_eq!(e.breakdown.total_excess_db, 0.0);
        assert_eq!(e.breakdown.total_db, e.breakdown.fspl_db);
        // clear-sky gas absorption alone stays small
        let e = estimate_link(0, &link, &s, &EngineConfig::default()).unwrap();
        assert!(e.breakdown.total_excess_db > 0.0 && e.breakdown.total_excess_db < 0.2);
        assert_eq!(e.breakdown.total_excess_db, e.atmosphere.gas_db);
    }

    #[test]
    fn wall_collapses_to_knife_edge() {
        let g = geo(40, 3, 10.0);
        let dem = RasterGrid::from_fn(g, -9999.0, |_, c| if c == 10 { 50.0 } else { 0.0 });
        let s = scene(dem, None);
        let link = LinkSpec::new(5.0, 15.0, 25.0, 90.0, 500.0, 12e9).unwrap();
        let e = estimate_link(3, &link, &s, &isolated(no_curve())).unwrap();
        assert_eq!(e.verdict, Verdict::Nlos);
        assert_eq!(e.profile_len, 1);
        // independent chain: hand geometry -> nu -> J(nu)
        let el = 25f64.to_radians();
        let d = 100.0;
        let clr = 1.5 + d * el.tan() - 50.0;
        assert!((clr + 1.87).abs() < 0.01);
        let d2 = d / el.cos();
        let d1 = link.slant_range_m() - d2;
        let want = knife_edge_loss(fresnel_parameter(-clr, d1, d2, link.wavelength()));
        assert!((e.breakdown.total_excess_db - want).abs() < 0.01);
        assert_eq!(e.diffraction.spherical_delta_db, 0.0);
        assert_eq!(e.point_id, 3);
    }

    #[test]
    fn forest_belt_counts_only_as_vegetation() {
        let g = geo(20, 3, 10.0);
        let lc = RasterGrid::from_fn(g, 255.0, |_, c| {
            if (1..=3).contains(&c) { ids::MIXED_FOREST as f64 } else { ids::BARREN as f64 }
        });
        let s = scene(RasterGrid::filled(g, -9999.0, 0.0), Some(lc));
        let link = LinkSpec::new(5.0, 15.0, 30.0, 90.0, 500.0, 12e9).unwrap();
        let cfg = isolated(no_curve());
        let e = estimate_link(0, &link, &s, &cfg).unwrap();
        assert_eq!(e.verdict, Verdict::Nlos);
        assert_eq!(e.breakdown.diffraction_db, 0.0);
        assert_eq!(e.breakdown.total_excess_db, e.breakdown.vegetation_db);
        // analytic entry at the belt edge and exit where the ray tops the canopy
        let el = 30f64.to_radians();
        let (s_in, s_out) = (5.0 / el.cos(), (15.0 - 1.5) / el.tan() / el.cos());
        assert_eq!(e.vegetation_segments.len(), 1);
        let v = e.vegetation_segments[0];
        let tol = cfg.tables.veg_tolerance_m;
        assert!((v.s_in - s_in).abs() <= tol && (v.s_out - s_out).abs() <= tol);
        let oracle = cfg.tables.vegetation.classes[ids::MIXED_FOREST as usize].loss(12e9, s_out - s_in);
        assert!((e.breakdown.vegetation_db - oracle).abs() < 0.1);
    }

    #[test]
    fn water_mirror_adds_multipath() {
        let g = GridGeometry::new(-100.0, 100.0, 5.0, 40, 40).unwrap();
        let dem = RasterGrid::filled(g, -9999.0, 0.0);
        let radius = 10.0 * 1.5f64.powi(4);
        let el = 25.0f64;
        let link = LinkSpec::new(2.5, 2.5, el, 0.0, 500.0, 12e9)
            .unwrap()
            .with_ut_height(radius * el.to_radians().tan());
        let water = g.world_to_pixel(2.5, 2.5 + radius).unwrap();
        let lc = RasterGrid::from_fn(g, 255.0, |r, c| {
            if (r, c) == water { ids::WATER as f64 } else { ids::BARREN as f64 }
        });
        let derivs = derive_terrain(&dem).unwrap();
        let t = terrain_reflect_score(&derivs, &ReflectionWeights::default()).unwrap();
        let map = apply_landcover(&t, &lc, &LandCoverTable::default(), ReflectionWeights::default()).unwrap();
        let mut s = scene(dem, Some(lc));
        s.reflection = Some(ReflectionLayer { map, derivs });
        let e = estimate_link(0, &link, &s, &EngineConfig::default()).unwrap();
        let refl = e.reflection.expect("mirror candidate");
        assert!(refl.validated);
        let tw = e.twdp.unwrap();
        assert!(tw.delta > 0.99);
        assert_eq!(e.breakdown.multipath_db, tw.multipath_db);
        let sum = e.breakdown.diffraction_db + e.breakdown.vegetation_db + e.breakdown.atmosphere_db + e.breakdown.multipath_db;
        assert!((e.breakdown.total_excess_db - sum).abs() < 1e-12);
    }

    #[test]
    fn errors_name_the_link() {
        let s = scene(RasterGrid::filled(geo(5, 5, 10.0), -9999.0, 0.0), None);
        let link = LinkSpec::new(500.0, 500.0, 30.0, 0.0, 500.0, 12e9).unwrap();
        let err = estimate_link(7, &link, &s, &EngineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Link { .. }));
        assert!(err.to_string().contains("point 7"));
    }

    #[test]
    fn ground_distance_limits() {
        assert!(ground_distance_m(90.0, 500.0).abs() < 1e-6);
        // horizon: cos(psi) = R / (R + h)
        let want = EARTH_RADIUS_M * (EARTH_RADIUS_M / (EARTH_RADIUS_M + 500e3)).acos();
        assert!((ground_distance_m(1e-9, 500.0) - want).abs() < 1e-3);
    }

    fn ridge_scene() -> Scene {
        let g = geo(80, 80, 10.0);
        let dem = RasterGrid::from_fn(g, -9999.0, |r, c| {
            let x = c as f64 * 10.0;
            let y = r as f64 * 10.0;
            40.0 * (x / 90.0).sin().abs() + 25.0 * (y / 130.0).cos().abs()
        });
        scene(dem, None)
    }

    fn cross_rows(n: usize) -> Vec<ManifestRow> {
        let mut rows = Vec::new();
        for p in 0..n {
            let x = 200.0 + (p % 10) as f64 * 40.0 + 3.0;
            let y = 200.0 + (p / 10) as f64 * 40.0 + 7.0;
            for el in [25.0, 40.0, 55.0, 70.0, 85.0] {
                for az in [0.0, 60.0, 120.0, 180.0, 240.0, 300.0] {
                    rows.push(ManifestRow {
                        point_id: p,
                        x,
                        y,
                        cluster: 0,
                        terrain: 0,
                        landcover: 0,
                        function: 0,
                        elev_deg: el,
                        az_deg: az,
                        alt_km: 550.0,
                    });
                }
            }
        }
        rows
    }

    #[test]
    fn ridge_sweep_trend_and_determinism() {
        let s = ridge_scene();
        let rows = cross_rows(40);
        let cfg = EngineConfig::default();
        let a = region_sweep(&rows, &s, &cfg, &SweepConfig::default()).unwrap();
        assert!(a.failures.is_empty());
        let rates: Vec<f64> = a.report.obstruction_rate_by_elevation.iter().map(|r| r.rate).collect();
        assert_eq!(rates.len(), 5);
        assert!(rates[0] > rates[4]);
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| region_sweep(&rows, &s, &cfg, &SweepConfig::default()).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn flat_region_never_obstructed() {
        let s = scene(RasterGrid::filled(geo(80, 80, 10.0), -9999.0, 12.0), None);
        let out = region_sweep(&cross_rows(5), &s, &EngineConfig::default(), &SweepConfig::default()).unwrap();
        assert!(out.report.obstruction_rate_by_elevation.iter().all(|r| r.rate == 0.0));
        assert!(region_sweep(&[], &s, &EngineConfig::default(), &SweepConfig::default()).is_err());
    }

    #[test]
    fn sweep_collects_failures() {
        let s = scene(RasterGrid::filled(geo(80, 80, 10.0), -9999.0, 12.0), None);
        let mut rows = cross_rows(1);
        rows[0].x = -5000.0;
        let out = region_sweep(&rows, &s, &EngineConfig::default(), &SweepConfig::default()).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.estimates.len(), rows.len() - 1);
        assert_eq!(out.report.failures, 1);
    }

    #[test]
    fn idw_examples() {
        let g = geo(4, 4, 10.0);
        let samples = [(5.0, 35.0, 3.0), (35.0, 5.0, 9.0)];
        let r = idw_raster(&samples, &g, 2.0, -1.0).unwrap();
        assert_eq!(r.raw(0, 0), 3.0);
        assert_eq!(r.raw(3, 3), 9.0);
        // equidistant from both samples
        assert!((r.raw(1, 2) - 6.0).abs() < 1e-12 || (r.raw(2, 1) - 6.0).abs() < 1e-12);
        let c = idw_raster(&[(1.0, 1.0, 4.0), (20.0, 30.0, 4.0)], &g, 2.0, -1.0).unwrap();
        assert!(c.values().iter().all(|v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn metric_examples() {
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() + i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert!(c.p_value < 1e-6);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-12);
        assert_eq!(sign_agreement(&x, &x).unwrap(), 1.0);
        assert_eq!(sign_agreement(&x, &neg).unwrap(), 0.0);
        assert!(matches!(pearson(&x, &[1.0; 10]), Err(Error::UndefinedCorrelation(_))));
        assert!(sign_agreement(&x, &x[..5]).is_err());
        assert_eq!(sign_agreement(&[0.0, 1.0, 1.0], &[0.0, 2.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn pearson_p_value_matches_t_distribution() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = [2.0, 1.0, 4.0, 3.0, 7.0, 5.0, 6.0, 9.0];
        let c = pearson(&x, &y).unwrap();
        let df = 6.0;
        let t = c.r * (df / (1.0 - c.r * c.r)).sqrt();
        let oracle = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()));
        assert!((c.p_value - oracle).abs() < 1e-9);
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average_circular(&[2.0; 7], 3).unwrap(), vec![2.0; 7]);
        let m = moving_average_circular(&[0.0, 3.0, 6.0], 3).unwrap();
        assert_eq!(m, vec![3.0, 3.0, 3.0]);
        assert!(moving_average_circular(&[1.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn moving_average_preserves_mean(x in proptest::collection::vec(-100.0f64..100.0, 1..200), w in 1usize..80) {
            prop_assume!(w <= x.len());
            let m = moving_average_circular(&x, w).unwrap();
            let a = x.iter().sum::<f64>() / x.len() as f64;
            let b = m.iter().sum::<f64>() / m.len() as f64;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn los_estimates_carry_no_diffraction(x in 60.0f64..740.0, y in 60.0f64..740.0, el in 10.0f64..89.0, az in 0.0f64..360.0) {
            let s = ridge_scene();
            let link = LinkSpec::new(x, y, el, az, 550.0, 12e9).unwrap();
            if let Ok(e) = estimate_link(0, &link, &s, &EngineConfig::default()) {
                if e.verdict == Verdict::Los {
                    prop_assert_eq!(e.breakdown.diffraction_db, 0.0);
                    prop_assert_eq!(e.profile_len, 0);
                }
                prop_assert!((e.breakdown.total_db - e.breakdown.fspl_db - e.breakdown.total_excess_db).abs() < 1e-9);
            }
        }
    }
}
