//! Link geometry: slant range and the horizontal ground track under a link.
//!
//! Azimuths are compass bearings (0 = north = +y, 90 = east = +x).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BBox, Landscape};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const EFFECTIVE_EARTH_RADIUS_M: f64 = EARTH_RADIUS_M * 4.0 / 3.0;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_UT_HEIGHT_AGL: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub ut_x: f64,
    pub ut_y: f64,
    pub ut_height_agl: f64,
    /// Degrees in (0, 90].
    pub elevation_deg: f64,
    /// Degrees in [0, 360).
    pub azimuth_deg: f64,
    pub altitude_km: f64,
    pub frequency_hz: f64,
}

impl LinkSpec {
    pub fn new(
        ut_x: f64,
        ut_y: f64,
        elevation_deg: f64,
        azimuth_deg: f64,
        altitude_km: f64,
        frequency_hz: f64,
    ) -> Result<Self> {
        let link = Self {
            ut_x,
            ut_y,
            ut_height_agl: DEFAULT_UT_HEIGHT_AGL,
            elevation_deg,
            azimuth_deg: azimuth_deg.rem_euclid(360.0),
            altitude_km,
            frequency_hz,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn with_ut_height(mut self, agl: f64) -> Self {
        self.ut_height_agl = agl;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.elevation_deg > 0.0 && self.elevation_deg <= 90.0) {
            return Err(Error::arg(format!("elevation {} outside (0, 90]", self.elevation_deg)));
        }
        if !(0.0..360.0).contains(&self.azimuth_deg) {
            return Err(Error::arg(format!("azimuth {} outside [0, 360)", self.azimuth_deg)));
        }
        if !(self.altitude_km > 0.0) {
            return Err(Error::arg(format!("altitude {} km must be positive", self.altitude_km)));
        }
        if !(self.frequency_hz > 0.0) {
            return Err(Error::arg(format!("frequency {} Hz must be positive", self.frequency_hz)));
        }
        if !(self.ut_height_agl >= 0.0) || !self.ut_x.is_finite() || !self.ut_y.is_finite() {
            return Err(Error::arg("invalid UT position or antenna height"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    pub fn elevation_rad(&self) -> f64 {
        self.elevation_deg.to_radians()
    }

    /// Unit horizontal direction towards the satellite, `(east, north)`.
    pub fn direction(&self) -> (f64, f64) {
        let az = self.azimuth_deg.to_radians();
        (az.sin(), az.cos())
    }

    pub fn slant_range_m(&self) -> f64 {
        slant_range_km(self.elevation_deg, self.altitude_km) * 1000.0
    }
}

/// Distance from a ground terminal to a satellite at `altitude_km` seen at
/// `elevation_deg`, on a spherical earth.
pub fn slant_range_km(elevation_deg: f64, altitude_km: f64) -> f64 {
    let r = EARTH_RADIUS_M / 1000.0;
    if elevation_deg >= 90.0 {
        return altitude_km;
    }
    let s = elevation_deg.to_radians().sin();
    ((r * s).powi(2) + 2.0 * r * altitude_km + altitude_km * altitude_km).sqrt() - r * s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    /// Trace stops once the link is this far above the highest terrain.
    pub height_margin_m: f64,
    /// Apply the 4/3-earth bulge correction to link heights.
    pub earth_curvature: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            height_margin_m: 100.0,
            earth_curvature: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentEnd {
    /// Link rose above every possible obstacle.
    Height,
    /// Segment left the loaded rasters first.
    Boundary,
}

/// Horizontal projection of a link, from the UT to the truncation point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundSegment {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub length_m: f64,
    pub direction: (f64, f64),
    pub ut_ground_m: f64,
    /// Absolute antenna height.
    pub antenna_m: f64,
    pub elevation_rad: f64,
    pub slant_m: f64,
    pub earth_curvature: bool,
    pub end_reason: SegmentEnd,
}

impl GroundSegment {
    /// Straight-line link height above datum at horizontal distance `d`.
    pub fn raw_height(&self, dist_h: f64) -> f64 {
        self.antenna_m + dist_h * self.elevation_rad.tan()
    }

    /// UT-side and satellite-side 3D distances of the link point above `dist_h`.
    pub fn split(&self, dist_h: f64) -> (f64, f64) {
        let d2 = dist_h / self.elevation_rad.cos();
        ((self.slant_m - d2).max(0.0), d2)
    }

    /// Link height including the earth-bulge correction when enabled.
    pub fn link_height(&self, dist_h: f64) -> f64 {
        let raw = self.raw_height(dist_h);
        if !self.earth_curvature {
            return raw;
        }
        let (d1, d2) = self.split(dist_h);
        curvature_correction(raw, d1, d2)
    }

    pub fn point_at(&self, dist_h: f64) -> (f64, f64) {
        (
            self.start.0 + dist_h * self.direction.0,
            self.start.1 + dist_h * self.direction.1,
        )
    }
}

/// `H_raw - d1 d2 / (2 R_eff)` on the 4/3 earth.
pub fn curvature_correction(raw_height: f64, d1: f64, d2: f64) -> f64 {
    raw_height - d1 * d2 / (2.0 * EFFECTIVE_EARTH_RADIUS_M)
}

/// Horizontal distance at which the link height reaches `target`.
fn height_crossing(antenna: f64, el: f64, slant: f64, target: f64, curvature: bool) -> f64 {
    if antenna >= target {
        return 0.0;
    }
    if el >= std::f64::consts::FRAC_PI_2 - 1e-12 {
        return 0.0;
    }
    let (s, c) = el.sin_cos();
    if !curvature {
        return (target - antenna) / el.tan();
    }
    // in UT-side 3D distance u: u^2/(2Re) + u (sin el - slant/(2Re)) + (antenna - target) = 0
    let a = 1.0 / (2.0 * EFFECTIVE_EARTH_RADIUS_M);
    let b = s - slant * a;
    let k = antenna - target;
    let u = (-b + (b * b - 4.0 * a * k).sqrt()) / (2.0 * a);
    u * c
}

/// Parameter interval `[t0, t1]` of the segment `p0 + t (p1 - p0)`, `t in [0, 1]`,
/// inside `bbox` (Liang-Barsky). Touching the boundary counts as inside.
pub fn clip_to_box(p0: (f64, f64), p1: (f64, f64), bbox: &BBox) -> Option<(f64, f64)> {
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, p0.0 - bbox.min_x),
        (dx, bbox.max_x - p0.0),
        (-dy, p0.1 - bbox.min_y),
        (dy, bbox.max_y - p0.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Ground track of `link`, truncated where nothing in `land` can reach the
/// link any more or where the rasters end.
pub fn ground_segment(link: &LinkSpec, land: &Landscape, cfg: &GeometryConfig) -> Result<GroundSegment> {
    link.validate()?;
    let bounds = land.dem.bounds();
    if !bounds.contains_closed(link.ut_x, link.ut_y) {
        return Err(Error::OutOfDomain {
            x: link.ut_x,
            y: link.ut_y,
        });
    }
    let ut_ground = land.ground_height(link.ut_x, link.ut_y)?;
    let antenna = ut_ground + link.ut_height_agl;
    let el = link.elevation_rad();
    let slant = link.slant_range_m();
    let target = land.max_effective_height() + cfg.height_margin_m;
    let reach = height_crossing(antenna, el, slant, target, cfg.earth_curvature);

    let dir = link.direction();
    let start = (link.ut_x, link.ut_y);
    let mut length = reach;
    let mut end_reason = SegmentEnd::Height;
    if reach > 0.0 {
        let far = (start.0 + reach * dir.0, start.1 + reach * dir.1);
        if let Some((_, t1)) = clip_to_box(start, far, &bounds) {
            if t1 < 1.0 {
                length = reach * t1;
                end_reason = SegmentEnd::Boundary;
            }
        }
    }
    Ok(GroundSegment {
        start,
        end: (start.0 + length * dir.0, start.1 + length * dir.1),
        length_m: length,
        direction: dir,
        ut_ground_m: ut_ground,
        antenna_m: antenna,
        elevation_rad: el,
        slant_m: slant,
        earth_curvature: cfg.earth_curvature,
        end_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridGeometry, LandCoverTable, RasterGrid};
    use proptest::prelude::*;

    fn land(max_h: f64) -> Landscape {
        // 2 km square, all zero except one high pixel in a corner
        let geo = GridGeometry::new(-1000.0, 1000.0, 10.0, 200, 200).unwrap();
        let dem = RasterGrid::from_fn(geo, -9999.0, |r, c| if r == 199 && c == 199 { max_h } else { 0.0 });
        Landscape::from_grids(dem, None, LandCoverTable::default()).unwrap()
    }

    fn flat_cfg() -> GeometryConfig {
        GeometryConfig {
            height_margin_m: 0.0,
            earth_curvature: false,
        }
    }

    #[test]
    fn slant_range_examples() {
        assert_eq!(slant_range_km(90.0, 500.0), 500.0);
        assert_eq!(slant_range_km(90.0, 1200.0), 1200.0);
        let horizon = (2.0f64 * 6371.0 * 500.0 + 500.0 * 500.0).sqrt();
        assert!((slant_range_km(1e-9, 500.0) - horizon).abs() < 1e-3);
        assert!((horizon - 2573.1).abs() < 0.05);
    }

    #[test]
    fn slant_range_matches_law_of_cosines() {
        // independent check: triangle earth-centre / UT / satellite
        for &(el, h) in &[(25.0, 500.0), (55.0, 850.0), (85.0, 1200.0)] {
            let d = slant_range_km(el, h);
            let r = 6371.0f64;
            let angle = (90.0f64 + el).to_radians();
            let rs2 = r * r + d * d - 2.0 * r * d * angle.cos();
            assert!((rs2.sqrt() - (r + h)).abs() < 1e-6);
        }
    }

    #[test]
    fn steep_link_short_segment() {
        let l = LinkSpec::new(0.0, 0.0, 85.0, 30.0, 500.0, 12e9).unwrap().with_ut_height(0.0);
        let seg = ground_segment(&l, &land(200.0), &flat_cfg()).unwrap();
        assert!((seg.length_m - 200.0 / 85f64.to_radians().tan()).abs() < 1e-9);
        assert!((seg.length_m - 17.5).abs() < 0.05);
        assert_eq!(seg.end_reason, SegmentEnd::Height);
    }

    #[test]
    fn azimuth_axes() {
        let land = land(200.0);
        let north = ground_segment(&LinkSpec::new(0.0, 0.0, 60.0, 0.0, 500.0, 12e9).unwrap(), &land, &flat_cfg()).unwrap();
        assert!(north.end.0.abs() < 1e-9 && north.end.1 > 0.0);
        let east = ground_segment(&LinkSpec::new(0.0, 0.0, 25.0, 90.0, 500.0, 12e9).unwrap(), &land, &flat_cfg()).unwrap();
        assert!(east.end.1.abs() < 1e-9 && east.end.0 > 0.0);
        let want = (200.0 - 1.5) / 25f64.to_radians().tan();
        assert!((east.length_m - want).abs() < 1e-9);
    }

    #[test]
    fn boundary_truncation() {
        let l = LinkSpec::new(900.0, 0.0, 5.0, 90.0, 500.0, 12e9).unwrap();
        let seg = ground_segment(&l, &land(200.0), &flat_cfg()).unwrap();
        assert_eq!(seg.end_reason, SegmentEnd::Boundary);
        assert!((seg.length_m - 100.0).abs() < 1e-9);
    }

    #[test]
    fn ut_outside_is_out_of_domain() {
        let l = LinkSpec::new(5000.0, 0.0, 45.0, 0.0, 500.0, 12e9).unwrap();
        assert!(matches!(
            ground_segment(&l, &land(10.0), &GeometryConfig::default()),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn curvature_crossing_hits_target() {
        let l = LinkSpec::new(0.0, 0.0, 25.0, 45.0, 500.0, 12e9).unwrap();
        let cfg = GeometryConfig::default();
        let seg = ground_segment(&l, &land(150.0), &cfg).unwrap();
        assert!((seg.link_height(seg.length_m) - 250.0).abs() < 1e-6);
    }

    #[test]
    fn curvature_correction_values() {
        assert_eq!(curvature_correction(10.0, 0.0, 5000.0), 10.0);
        assert_eq!(curvature_correction(10.0, 5000.0, 0.0), 10.0);
        let c = 10.0 - curvature_correction(10.0, 5000.0, 5000.0);
        assert!((c - 1.4715).abs() < 1e-3);
    }

    #[test]
    fn invalid_links_rejected() {
        assert!(LinkSpec::new(0.0, 0.0, 0.0, 0.0, 500.0, 12e9).is_err());
        assert!(LinkSpec::new(0.0, 0.0, 91.0, 0.0, 500.0, 12e9).is_err());
        assert!(LinkSpec::new(0.0, 0.0, 45.0, 0.0, 500.0, 0.0).is_err());
        let l = LinkSpec::new(0.0, 0.0, 45.0, 0.0, 500.0, 12e9).unwrap();
        assert!((l.wavelength() * l.frequency_hz / SPEED_OF_LIGHT - 1.0).abs() < 1e-9);
    }

    #[test]
    fn liang_barsky_example() {
        let b = BBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 4.0,
            max_y: 4.0,
        };
        let (t0, t1) = clip_to_box((-2.0, 1.0), (6.0, 3.0), &b).unwrap();
        assert!((t0 - 0.25).abs() < 1e-12 && (t1 - 0.75).abs() < 1e-12);
        assert!(clip_to_box((5.0, 5.0), (6.0, 6.0), &b).is_none());
        assert!(clip_to_box((-1.0, 4.0), (5.0, 4.0), &b).is_some());
    }

    proptest! {
        #[test]
        fn azimuth_rotation_preserves_length(az in 0.0f64..360.0, phi in 0.0f64..360.0, el in 10.0f64..89.0) {
            let land = land(120.0);
            let cfg = GeometryConfig::default();
            let a = ground_segment(&LinkSpec::new(0.0, 0.0, el, az, 500.0, 12e9).unwrap(), &land, &cfg).unwrap();
            let b = ground_segment(&LinkSpec::new(0.0, 0.0, el, az + phi, 500.0, 12e9).unwrap(), &land, &cfg).unwrap();
            prop_assume!(a.end_reason == SegmentEnd::Height && b.end_reason == SegmentEnd::Height);
            prop_assert!((a.length_m - b.length_m).abs() < 1e-9);
            let (s, c) = (-phi.to_radians()).sin_cos();
            let rot = (a.end.0 * c - a.end.1 * s, a.end.0 * s + a.end.1 * c);
            prop_assert!((rot.0 - b.end.0).abs() < 1e-6 && (rot.1 - b.end.1).abs() < 1e-6);
        }

        #[test]
        fn link_height_monotone(el in 20.0f64..90.0, d in 0.0f64..5000.0, step in 0.1f64..100.0) {
            let l = LinkSpec::new(0.0, 0.0, el, 0.0, 500.0, 12e9).unwrap();
            let seg = ground_segment(&l, &land(50.0), &GeometryConfig::default()).unwrap();
            prop_assert!(seg.link_height(d + step) > seg.link_height(d));
            prop_assert_eq!(seg.link_height(0.0), seg.ut_ground_m + l.ut_height_agl);
        }
    }
}
