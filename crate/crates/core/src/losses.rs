//! Loss terms of a single link: free space, terrain diffraction, vegetation
//! extinction, atmosphere and multipath.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EFFECTIVE_EARTH_RADIUS_M;
use crate::raster::{LandCoverTable, LANDCOVER_CLASS_COUNT};

/// Free-space path loss in dB.
pub fn fspl(frequency_hz: f64, distance_m: f64) -> Result<f64> {
    if !(frequency_hz > 0.0) || !(distance_m > 0.0) {
        return Err(Error::arg(format!(
            "free-space loss needs positive frequency and distance, got {frequency_hz} Hz, {distance_m} m"
        )));
    }
    Ok(20.0 * (distance_m / 1000.0).log10() + 20.0 * (frequency_hz / 1e6).log10() + 32.45)
}

/// Single knife-edge diffraction loss J(v), dB.
pub fn knife_edge_loss(nu: f64) -> f64 {
    if nu <= -0.78 {
        return 0.0;
    }
    let a = nu - 0.1;
    6.9 + 20.0 * ((a * a + 1.0).sqrt() + a).log10()
}

/// Fresnel-Kirchhoff parameter of an edge `h` above the direct ray at
/// distances `d1`, `d2` from the two ends.
pub fn fresnel_parameter(h: f64, d1: f64, d2: f64, wavelength: f64) -> f64 {
    h * (2.0 * (d1 + d2) / (wavelength * d1 * d2)).sqrt()
}

/// A profile point in the frame of the direct ray: `s` along the ray from
/// the UT, `excess` height above the ray (positive = obstructing).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayPoint {
    pub s: f64,
    pub excess: f64,
}

/// Bullington equivalent knife edge over a path of length `total`.
///
/// Points at or beyond either end are ignored; an empty set gives 0 dB.
pub fn bullington_core(points: &[RayPoint], total: f64, wavelength: f64) -> f64 {
    let pts: Vec<RayPoint> = points.iter().copied().filter(|p| p.s > 0.0 && p.s < total).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let m1 = pts.iter().map(|p| p.excess / p.s).fold(f64::NEG_INFINITY, f64::max);
    if m1 < 0.0 {
        // ray clears every point: strongest sub-path edge
        let nu = pts
            .iter()
            .map(|p| fresnel_parameter(p.excess, p.s, total - p.s, wavelength))
            .fold(f64::NEG_INFINITY, f64::max);
        return knife_edge_loss(nu);
    }
    let m2 = pts.iter().map(|p| p.excess / (total - p.s)).fold(f64::NEG_INFINITY, f64::max);
    let s_b = m2 * total / (m1 + m2);
    let h_b = m1 * s_b;
    if !(s_b > 0.0 && s_b < total) {
        // both slopes zero: edge grazes the ray
        return knife_edge_loss(0.0);
    }
    knife_edge_loss(fresnel_parameter(h_b, s_b, total - s_b, wavelength))
}

/// Smooth-earth first-term diffraction loss (dB, may be negative = no loss)
/// for a path of ground length `d_m` between antennas `h1_m` and `h2_m` above
/// a spherical earth of radius `ae_m`.
pub fn spherical_earth_loss(d_m: f64, h1_m: f64, h2_m: f64, frequency_hz: f64, ae_m: f64) -> f64 {
    let f = frequency_hz / 1e6;
    let ae = ae_m / 1000.0;
    let d = d_m / 1000.0;
    let x = 2.188 * f.powf(1.0 / 3.0) * ae.powf(-2.0 / 3.0) * d;
    let y = |h: f64| 9.575e-3 * f.powf(2.0 / 3.0) * ae.powf(-1.0 / 3.0) * h;
    let fx = if x >= 1.6 {
        11.0 + 10.0 * x.log10() - 17.6 * x
    } else {
        -20.0 * x.log10() - 5.6488 * x.powf(1.425)
    };
    let g = |b: f64| {
        if b > 2.0 {
            17.6 * (b - 1.1).sqrt() - 5.0 * (b - 1.1).log10() - 8.0
        } else {
            20.0 * (b + 0.1 * b.powi(3)).log10()
        }
    };
    -(fx + g(y(h1_m.max(1e-3))) + g(y(h2_m.max(1e-3))))
}

/// Inputs for the delta-Bullington diffraction of one link.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionPath {
    /// Obstructing points along the ray.
    pub points: Vec<RayPoint>,
    /// Smooth-earth surface sampled along the ray, same frame.
    pub smooth: Vec<RayPoint>,
    /// UT-to-satellite ray length, m.
    pub total_m: f64,
    /// Great-circle ground distance to the sub-satellite point, m.
    pub ground_m: f64,
    pub ut_height_m: f64,
    pub sat_height_m: f64,
    pub frequency_hz: f64,
    pub wavelength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffractionLoss {
    pub bullington_db: f64,
    pub spherical_delta_db: f64,
    pub total_db: f64,
}

/// Bullington loss on the actual profile plus `max(0, L_sph - L_bull_smooth)`.
pub fn bullington_loss(path: &DiffractionPath) -> DiffractionLoss {
    if path.points.is_empty() {
        return DiffractionLoss {
            bullington_db: 0.0,
            spherical_delta_db: 0.0,
            total_db: 0.0,
        };
    }
    let bull = bullington_core(&path.points, path.total_m, path.wavelength).max(0.0);
    let sph = spherical_earth_loss(
        path.ground_m,
        path.ut_height_m,
        path.sat_height_m,
        path.frequency_hz,
        EFFECTIVE_EARTH_RADIUS_M,
    );
    let smooth = bullington_core(&path.smooth, path.total_m, path.wavelength);
    let delta = (sph - smooth).max(0.0);
    DiffractionLoss {
        bullington_db: bull,
        spherical_delta_db: delta,
        total_db: bull + delta,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VegSegment {
    /// Slant distance from the UT where the ray enters the canopy.
    pub s_in: f64,
    pub s_out: f64,
    pub class_id: u8,
}

impl VegSegment {
    pub fn length(&self) -> f64 {
        self.s_out - self.s_in
    }
}

/// Split `[0, s_max]` into vegetation segments by coarse stepping and
/// bisection of every type change.
///
/// `type_at(s)` is the land-cover class the ray is inside at slant distance
/// `s` (`None` in open air); `is_vegetation` tells which classes count.
pub fn segment_vegetation(
    type_at: impl Fn(f64) -> Option<u8>,
    is_vegetation: impl Fn(u8) -> bool,
    s_max: f64,
    ds: f64,
    eps: f64,
) -> Result<Vec<VegSegment>> {
    if !(ds > eps && eps > 0.0) {
        return Err(Error::arg(format!("need step > tolerance > 0, got {ds}, {eps}")));
    }
    let veg = |t: Option<u8>| t.is_some_and(&is_vegetation);
    let mut out = Vec::new();
    let mut s = 0.0;
    let mut prev = type_at(0.0);
    // a path that starts inside vegetation enters it at 0
    let mut open: Option<(f64, u8)> = prev.filter(|&c| is_vegetation(c)).map(|c| (0.0, c));

    while s < s_max {
        let next = (s + ds).min(s_max);
        let t = type_at(next);
        if t != prev {
            let (mut l, mut r) = (s, next);
            let tl = type_at(l);
            let tr = t;
            while r - l > eps {
                let m = 0.5 * (l + r);
                let tm = type_at(m);
                if tm == tl {
                    l = m;
                } else if tm == tr {
                    r = m;
                } else {
                    // a third type: keep the first change after l
                    r = m;
                }
            }
            let s_star = 0.5 * (l + r);
            // the type after the boundary decides entry or exit
            let after = type_at(r);
            match (open, veg(after)) {
                (None, true) => open = Some((s_star, after.expect("vegetation has a class"))),
                (Some((s_in, class_id)), false) => {
                    out.push(VegSegment {
                        s_in,
                        s_out: s_star,
                        class_id,
                    });
                    open = None;
                }
                _ => {}
            }
        }
        prev = t;
        s = next;
    }
    if let Some((s_in, class_id)) = open {
        out.push(VegSegment {
            s_in,
            s_out: s_max,
            class_id,
        });
    }
    Ok(out)
}

/// Per-class power-law extinction `A f_MHz^B d^C`, saturating at `max_db`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VegetationCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub max_db: f64,
}

impl Default for VegetationCoefficients {
    fn default() -> Self {
        Self {
            a: 0.25,
            b: 0.39,
            c: 0.25,
            max_db: 30.0,
        }
    }
}

impl VegetationCoefficients {
    pub fn loss(&self, frequency_hz: f64, length_m: f64) -> f64 {
        let raw = self.a * (frequency_hz / 1e6).powf(self.b) * length_m.powf(self.c);
        self.max_db * (1.0 - (-raw / self.max_db).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VegetationTable {
    /// Indexed by land-cover class id.
    pub classes: Vec<VegetationCoefficients>,
}

impl Default for VegetationTable {
    fn default() -> Self {
        Self {
            classes: vec![VegetationCoefficients::default(); LANDCOVER_CLASS_COUNT],
        }
    }
}

pub fn vegetation_loss(segments: &[VegSegment], frequency_hz: f64, table: &VegetationTable) -> Result<f64> {
    let mut total = 0.0;
    for s in segments {
        if !(s.length() >= 0.0) {
            return Err(Error::Validation(format!(
                "vegetation segment [{}, {}] has negative length",
                s.s_in, s.s_out
            )));
        }
        let coef = table
            .classes
            .get(s.class_id as usize)
            .ok_or_else(|| Error::Validation(format!("no vegetation coefficients for class {}", s.class_id)))?;
        total += coef.loss(frequency_hz, s.length());
    }
    Ok(total)
}

/// One row of the frequency-indexed atmosphere table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereRow {
    pub frequency_ghz: f64,
    /// Zenith gaseous attenuation, dB.
    pub gas_zenith_db: f64,
    /// Cloud specific attenuation per unit columnar liquid water, dB per kg/m^2.
    pub cloud_db_per_kg_m2: f64,
    pub rain_k: f64,
    pub rain_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtmosphereTable {
    pub rows: Vec<AtmosphereRow>,
    /// Effective rain height above the UT, km.
    pub rain_height_km: f64,
}

impl Default for AtmosphereTable {
    fn default() -> Self {
        let row = |f, gas, cloud, k, alpha| AtmosphereRow {
            frequency_ghz: f,
            gas_zenith_db: gas,
            cloud_db_per_kg_m2: cloud,
            rain_k: k,
            rain_alpha: alpha,
        };
        Self {
            rows: vec![
                row(1.0, 0.035, 0.001, 0.0000387, 0.912),
                row(2.0, 0.037, 0.004, 0.000154, 0.963),
                row(4.0, 0.040, 0.016, 0.000650, 1.121),
                row(6.0, 0.043, 0.036, 0.00175, 1.308),
                row(8.0, 0.047, 0.064, 0.00454, 1.327),
                row(10.0, 0.053, 0.100, 0.0101, 1.276),
                row(12.0, 0.062, 0.144, 0.0188, 1.217),
                row(15.0, 0.085, 0.225, 0.0367, 1.154),
                row(20.0, 0.390, 0.400, 0.0751, 1.099),
                row(25.0, 0.480, 0.620, 0.124, 1.061),
                row(30.0, 0.250, 0.880, 0.187, 1.021),
                row(35.0, 0.290, 1.150, 0.263, 0.979),
                row(40.0, 0.360, 1.420, 0.350, 0.939),
            ],
            rain_height_km: 3.0,
        }
    }
}

impl AtmosphereTable {
    /// Table row interpolated at `frequency_hz`: gas and cloud linearly,
    /// rain k log-log and alpha linear in log frequency.
    pub fn at(&self, frequency_hz: f64) -> Result<AtmosphereRow> {
        let f = frequency_hz / 1e9;
        let rows = &self.rows;
        let first = rows.first().ok_or_else(|| Error::Config("empty atmosphere table".into()))?;
        let last = rows.last().expect("non-empty");
        if !(f >= first.frequency_ghz && f <= last.frequency_ghz) {
            return Err(Error::arg(format!(
                "{f} GHz outside the atmosphere table [{}, {}] GHz",
                first.frequency_ghz, last.frequency_ghz
            )));
        }
        let i = rows.partition_point(|r| r.frequency_ghz < f);
        if rows[i].frequency_ghz == f {
            return Ok(rows[i]);
        }
        let (a, b) = (rows[i - 1], rows[i]);
        let t = (f - a.frequency_ghz) / (b.frequency_ghz - a.frequency_ghz);
        let tl = (f.ln() - a.frequency_ghz.ln()) / (b.frequency_ghz.ln() - a.frequency_ghz.ln());
        let lin = |x: f64, y: f64| x + (y - x) * t;
        Ok(AtmosphereRow {
            frequency_ghz: f,
            gas_zenith_db: lin(a.gas_zenith_db, b.gas_zenith_db),
            cloud_db_per_kg_m2: lin(a.cloud_db_per_kg_m2, b.cloud_db_per_kg_m2),
            rain_k: (a.rain_k.ln() + (b.rain_k.ln() - a.rain_k.ln()) * tl).exp(),
            rain_alpha: a.rain_alpha + (b.rain_alpha - a.rain_alpha) * tl,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("empty atmosphere table".into()));
        }
        if self.rows.windows(2).any(|w| w[1].frequency_ghz <= w[0].frequency_ghz) {
            return Err(Error::Config("atmosphere table frequencies must increase".into()));
        }
        if self.rows.iter().any(|r| r.frequency_ghz <= 0.0 || r.rain_k <= 0.0) {
            return Err(Error::Config("atmosphere table needs positive frequency and rain k".into()));
        }
        Ok(())
    }
}

/// Surface weather at one location. Temperature and pressure are carried for
/// provenance; the table-driven model does not use them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub x: f64,
    pub y: f64,
    pub rain_mm_h: f64,
    /// Columnar cloud liquid water, kg/m^2.
    pub cloud_lwc: f64,
    pub temp_c: f64,
    pub pressure_hpa: f64,
}

pub fn read_weather_csv(path: impl AsRef<Path>) -> Result<Vec<WeatherRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let w: WeatherRecord = rec?;
        if w.rain_mm_h < 0.0 || w.cloud_lwc < 0.0 {
            return Err(Error::Validation(format!(
                "{}: negative rain or cloud water at ({}, {})",
                path.display(),
                w.x,
                w.y
            )));
        }
        out.push(w);
    }
    Ok(out)
}

/// Weather record closest to `(x, y)`; `None` for an empty set.
pub fn nearest_weather(records: &[WeatherRecord], x: f64, y: f64) -> Option<&WeatherRecord> {
    records
        .iter()
        .min_by(|a, b| (a.x - x).hypot(a.y - y).total_cmp(&(b.x - x).hypot(b.y - y)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereLoss {
    pub gas_db: f64,
    pub cloud_db: f64,
    pub rain_db: f64,
    pub total_db: f64,
}

pub fn atmosphere_loss(
    elevation_deg: f64,
    frequency_hz: f64,
    weather: &WeatherRecord,
    table: &AtmosphereTable,
) -> Result<AtmosphereLoss> {
    if !(elevation_deg > 0.0 && elevation_deg <= 90.0) {
        return Err(Error::arg(format!("elevation {elevation_deg} outside (0, 90]")));
    }
    let row = table.at(frequency_hz)?;
    let csc = 1.0 / elevation_deg.to_radians().sin();
    let gas = row.gas_zenith_db * csc;
    let cloud = row.cloud_db_per_kg_m2 * weather.cloud_lwc * csc;
    let rain = if weather.rain_mm_h > 0.0 {
        row.rain_k * weather.rain_mm_h.powf(row.rain_alpha) * table.rain_height_km * csc
    } else {
        0.0
    };
    Ok(AtmosphereLoss {
        gas_db: gas,
        cloud_db: cloud,
        rain_db: rain,
        total_db: gas + cloud + rain,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwdpStats {
    /// (direct + reflected) / diffuse, dB.
    pub k_db: f64,
    pub delta: f64,
    /// Phase-averaged total power relative to the direct path, linear.
    pub mean_power_ratio: f64,
    /// Minus the phase-averaged log power relative to the direct path:
    /// positive = fade, negative = gain.
    pub multipath_db: f64,
}

pub const TWDP_QUADRATURE_POINTS: usize = 256;

/// TWDP parameters and fade statistic of a direct path plus the strongest
/// reflection (`reflection_rel_db` relative to direct) and diffuse power.
pub fn twdp_stats(reflection_rel_db: Option<f64>, diffuse_rel_db: f64) -> TwdpStats {
    let pd = 1.0;
    let pr = reflection_rel_db.map_or(0.0, |db| 10f64.powf(db / 10.0));
    let pdiff = 10f64.powf(diffuse_rel_db / 10.0);
    let delta = if pr > 0.0 { 2.0 * (pd * pr).sqrt() / (pd + pr) } else { 0.0 };
    let (a, b) = (pd.sqrt(), pr.sqrt());
    let n = TWDP_QUADRATURE_POINTS;
    let (mut mean_p, mut mean_log) = (0.0, 0.0);
    for k in 0..n {
        let phi = std::f64::consts::TAU * (k as f64 + 0.5) / n as f64;
        let p = a * a + b * b + 2.0 * a * b * phi.cos() + pdiff;
        mean_p += p;
        mean_log += 10.0 * (p / pd).log10();
    }
    TwdpStats {
        k_db: 10.0 * ((pd + pr) / pdiff).log10(),
        delta,
        mean_power_ratio: mean_p / n as f64 / pd,
        multipath_db: -mean_log / n as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fspl_db: f64,
    pub diffraction_db: f64,
    pub vegetation_db: f64,
    pub atmosphere_db: f64,
    pub multipath_db: f64,
    pub total_excess_db: f64,
    pub total_db: f64,
}

impl LossBreakdown {
    pub fn new(fspl_db: f64, diffraction_db: f64, vegetation_db: f64, atmosphere_db: f64, multipath_db: f64) -> Self {
        let excess = diffraction_db + vegetation_db + atmosphere_db + multipath_db;
        Self {
            fspl_db,
            diffraction_db,
            vegetation_db,
            atmosphere_db,
            multipath_db,
            total_excess_db: excess,
            total_db: fspl_db + excess,
        }
    }
}

/// All tables the loss models read, loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossTables {
    pub vegetation: VegetationTable,
    pub atmosphere: AtmosphereTable,
    /// Diffuse multipath power relative to the direct path, dB.
    pub diffuse_rel_db: f64,
    pub veg_step_m: f64,
    pub veg_tolerance_m: f64,
}

impl Default for LossTables {
    fn default() -> Self {
        Self {
            vegetation: VegetationTable::default(),
            atmosphere: AtmosphereTable::default(),
            diffuse_rel_db: -20.0,
            veg_step_m: 5.0,
            veg_tolerance_m: 0.25,
        }
    }
}

impl LossTables {
    pub fn validate(&self, classes: &LandCoverTable) -> Result<()> {
        self.atmosphere.validate()?;
        if self.vegetation.classes.len() != classes.classes().len() {
            return Err(Error::Config(format!(
                "vegetation table has {} rows, land-cover table {}",
                self.vegetation.classes.len(),
                classes.classes().len()
            )));
        }
        if self.vegetation.classes.iter().any(|c| !(c.max_db > 0.0)) {
            return Err(Error::Config("vegetation caps must be positive".into()));
        }
        if !(self.veg_step_m > self.veg_tolerance_m && self.veg_tolerance_m > 0.0) {
            return Err(Error::Config("vegetation step must exceed a positive tolerance".into()));
        }
        Ok(())
    }
}
