//! Per-pixel terrain derivatives and Weiss landform classes.
//!
//! Conventions:
//! - slope and aspect come from Horn's 3x3 finite differences;
//! - aspect is the compass azimuth of steepest ascent (a surface rising to the
//!   east has aspect 90 degrees), flagged flat when the gradient vanishes;
//! - curvature is the negated 4-neighbour Laplacian, so concave cells
//!   (bowls) are negative;
//! - TPI in the derivative set uses the 8-neighbour ring, Weiss uses two
//!   square annuli given in pixels.
//!
//! Missing neighbours (grid border, nodata) are linearly extrapolated: edge
//! neighbours mirror the opposite neighbour through the centre (or take the
//! centre value), corners complete the plane through the adjacent edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

const FLAT_GRADIENT: f64 = 1e-10;
pub const WEISS_NODATA: f64 = 255.0;

#[derive(Clone, Debug)]
pub struct TerrainDerivatives {
    /// Degrees in [0, 90).
    pub slope: RasterGrid,
    /// Degrees in [0, 360); 0 where `flat` is set.
    pub aspect: RasterGrid,
    pub flat: Vec<bool>,
    /// Max minus min of the 3x3 window, metres.
    pub roughness: RasterGrid,
    /// 1/m, negative = concave.
    pub curvature: RasterGrid,
    pub tpi: RasterGrid,
    pub tri: RasterGrid,
    /// Pixels computed from fewer than four valid neighbours.
    pub sparse: Vec<bool>,
}

impl TerrainDerivatives {
    pub fn is_flat(&self, row: usize, col: usize) -> bool {
        self.flat[row * self.slope.width() + col]
    }
}

fn window(dem: &RasterGrid, r: usize, c: usize) -> [[Option<f64>; 3]; 3] {
    let mut w = [[None; 3]; 3];
    for (i, dr) in (-1i64..=1).enumerate() {
        for (j, dc) in (-1i64..=1).enumerate() {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < dem.height() && (cc as usize) < dem.width() {
                w[i][j] = dem.get(rr as usize, cc as usize);
            }
        }
    }
    w
}

fn filled(w: &[[Option<f64>; 3]; 3]) -> [[f64; 3]; 3] {
    let z = w[1][1].expect("centre is valid");
    let mut out = [[z; 3]; 3];
    // edge neighbours mirror through the centre
    for (i, j) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
        out[i][j] = match (w[i][j], w[2 - i][2 - j]) {
            (Some(v), _) => v,
            (None, Some(opp)) => 2.0 * z - opp,
            (None, None) => z,
        };
    }
    // corners complete the local plane through the two adjacent edges
    for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        out[i][j] = w[i][j].unwrap_or(out[i][1] + out[1][j] - z);
    }
    out
}

/// Horn gradient `(dz/dx east, dz/dy north)` from a filled window.
fn horn(z: &[[f64; 3]; 3], cs: f64) -> (f64, f64) {
    let dzdx = ((z[0][2] + 2.0 * z[1][2] + z[2][2]) - (z[0][0] + 2.0 * z[1][0] + z[2][0])) / (8.0 * cs);
    let dzdy = ((z[0][0] + 2.0 * z[0][1] + z[0][2]) - (z[2][0] + 2.0 * z[2][1] + z[2][2])) / (8.0 * cs);
    (dzdx, dzdy)
}

/// Slope (deg) and uphill aspect (deg) from a gradient; aspect `None` when flat.
pub fn slope_aspect(dzdx: f64, dzdy: f64) -> (f64, Option<f64>) {
    let g = dzdx.hypot(dzdy);
    let slope = g.atan().to_degrees();
    if g <= FLAT_GRADIENT {
        return (slope, None);
    }
    let az = dzdx.atan2(dzdy).to_degrees().rem_euclid(360.0);
    (slope, Some(if az >= 360.0 { 0.0 } else { az }))
}

pub fn derive_terrain(dem: &RasterGrid) -> Result<TerrainDerivatives> {
    let (w, h) = (dem.width(), dem.height());
    if w < 3 || h < 3 {
        return Err(Error::Size(format!("terrain derivatives need at least 3x3 cells, got {w}x{h}")));
    }
    let has_full_window = (1..h - 1).any(|r| {
        (1..w - 1).any(|c| window(dem, r, c).iter().flatten().all(Option::is_some))
    });
    if !has_full_window {
        return Err(Error::Size("no complete 3x3 neighbourhood of valid cells".into()));
    }

    let cs = dem.cell_size();
    let nd = dem.nodata;
    let n = w * h;
    let mut slope = vec![nd; n];
    let mut aspect = vec![nd; n];
    let mut rough = vec![nd; n];
    let mut curv = vec![nd; n];
    let mut tpi = vec![nd; n];
    let mut tri = vec![nd; n];
    let mut flat = vec![false; n];
    let mut sparse = vec![false; n];

    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let win = window(dem, r, c);
            let Some(z) = win[1][1] else { continue };
            let full = filled(&win);

            let (dzdx, dzdy) = horn(&full, cs);
            let (s, a) = slope_aspect(dzdx, dzdy);
            slope[i] = s;
            aspect[i] = a.unwrap_or(0.0);
            flat[i] = a.is_none();

            let neighbours: Vec<f64> = win
                .iter()
                .enumerate()
                .flat_map(|(a, row)| row.iter().enumerate().map(move |(b, v)| (a, b, v)))
                .filter(|&(a, b, _)| !(a == 1 && b == 1))
                .filter_map(|(_, _, v)| *v)
                .collect();
            sparse[i] = neighbours.len() < 4;

            let (lo, hi) = neighbours
                .iter()
                .fold((z, z), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            rough[i] = hi - lo;

            let lap = full[0][1] + full[2][1] + full[1][0] + full[1][2] - 4.0 * z;
            curv[i] = -lap / (cs * cs);

            if neighbours.is_empty() {
                tpi[i] = 0.0;
                tri[i] = 0.0;
            } else {
                let k = neighbours.len() as f64;
                tpi[i] = z - neighbours.iter().sum::<f64>() / k;
                tri[i] = (neighbours.iter().map(|v| (v - z).powi(2)).sum::<f64>() / k).sqrt();
            }
        }
    }

    let mk = |v: Vec<f64>| dem.with_values(v).expect("same geometry");
    Ok(TerrainDerivatives {
        slope: mk(slope),
        aspect: mk(aspect),
        flat,
        roughness: mk(rough),
        curvature: mk(curv),
        tpi: mk(tpi),
        tri: mk(tri),
        sparse,
    })
}

/// TPI over a square annulus: centre minus the mean of valid cells whose
/// Chebyshev distance from the centre lies in `[inner, outer]`.
pub fn tpi_annulus(dem: &RasterGrid, inner: usize, outer: usize) -> Result<RasterGrid> {
    if inner == 0 || inner > outer {
        return Err(Error::arg(format!("invalid annulus [{inner}, {outer}]")));
    }
    let (w, h) = (dem.width(), dem.height());
    // summed-area tables of values and valid counts, (h+1) x (w+1)
    let mut sum = vec![0.0; (w + 1) * (h + 1)];
    let mut cnt = vec![0i64; (w + 1) * (h + 1)];
    for r in 0..h {
        for c in 0..w {
            let (v, k) = dem.get(r, c).map_or((0.0, 0), |v| (v, 1));
            let i = (r + 1) * (w + 1) + c + 1;
            sum[i] = v + sum[i - 1] + sum[i - (w + 1)] - sum[i - (w + 1) - 1];
            cnt[i] = k + cnt[i - 1] + cnt[i - (w + 1)] - cnt[i - (w + 1) - 1];
        }
    }
    let rect = |r: usize, c: usize, rad: usize| -> (f64, i64) {
        let r0 = r.saturating_sub(rad);
        let c0 = c.saturating_sub(rad);
        let r1 = (r + rad + 1).min(h);
        let c1 = (c + rad + 1).min(w);
        let at = |rr: usize, cc: usize| rr * (w + 1) + cc;
        (
            sum[at(r1, c1)] - sum[at(r0, c1)] - sum[at(r1, c0)] + sum[at(r0, c0)],
            cnt[at(r1, c1)] - cnt[at(r0, c1)] - cnt[at(r1, c0)] + cnt[at(r0, c0)],
        )
    };
    let mut out = vec![dem.nodata; w * h];
    for r in 0..h {
        for c in 0..w {
            let Some(z) = dem.get(r, c) else { continue };
            let (so, co) = rect(r, c, outer);
            let (si, ci) = rect(r, c, inner - 1);
            let k = co - ci;
            out[r * w + c] = if k == 0 { 0.0 } else { z - (so - si) / k as f64 };
        }
    }
    dem.with_values(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum WeissClass {
    Valley = 0,
    LowerSlope = 1,
    Flat = 2,
    MiddleSlope = 3,
    UpperSlope = 4,
    Ridge = 5,
}

impl WeissClass {
    pub const ALL: [WeissClass; 6] = [
        WeissClass::Valley,
        WeissClass::LowerSlope,
        WeissClass::Flat,
        WeissClass::MiddleSlope,
        WeissClass::UpperSlope,
        WeissClass::Ridge,
    ];

    pub fn from_id(v: f64) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| *c as u8 as f64 == v)
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeissThresholds {
    /// |standardised large-scale TPI| at or beyond which a cell is ridge/valley.
    pub ridge_valley_sigma: f64,
    /// Small-scale standardised TPI separating upper/middle/lower slopes.
    pub slope_position_sigma: f64,
    /// Cells strictly below this slope (deg) and not ridge/valley are flat.
    pub slope_flat_deg: f64,
}

impl Default for WeissThresholds {
    fn default() -> Self {
        Self {
            ridge_valley_sigma: 1.0,
            slope_position_sigma: 0.5,
            slope_flat_deg: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainConfig {
    pub tpi_small_radius: usize,
    pub tpi_large_radius: usize,
    pub weiss: WeissThresholds,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            tpi_small_radius: 3,
            tpi_large_radius: 15,
            weiss: WeissThresholds::default(),
        }
    }
}

fn standardized(g: &RasterGrid) -> Vec<Option<f64>> {
    let vals: Vec<f64> = g.valid_values().collect();
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    g.values()
        .iter()
        .map(|&v| {
            if g.is_nodata(v) {
                None
            } else if sd > 1e-12 * (1.0 + mean.abs()) {
                Some((v - mean) / sd)
            } else {
                Some(0.0)
            }
        })
        .collect()
}

pub fn classify_weiss(
    tpi_small: &RasterGrid,
    tpi_large: &RasterGrid,
    slope: &RasterGrid,
    thresholds: &WeissThresholds,
) -> Result<RasterGrid> {
    if !tpi_small.same_geometry(tpi_large) || !tpi_small.same_geometry(slope) {
        return Err(Error::Geometry("Weiss inputs must share grid geometry".into()));
    }
    let zs = standardized(tpi_small);
    let zl = standardized(tpi_large);
    let t = thresholds;
    let classes = zs
        .iter()
        .zip(&zl)
        .zip(slope.values())
        .map(|((s, l), &sl)| {
            let (Some(s), Some(l)) = (s, l) else {
                return WEISS_NODATA;
            };
            if slope.is_nodata(sl) {
                return WEISS_NODATA;
            }
            let class = if *l >= t.ridge_valley_sigma {
                WeissClass::Ridge
            } else if *l <= -t.ridge_valley_sigma {
                WeissClass::Valley
            } else if sl < t.slope_flat_deg {
                WeissClass::Flat
            } else if *s >= t.slope_position_sigma {
                WeissClass::UpperSlope
            } else if *s <= -t.slope_position_sigma {
                WeissClass::LowerSlope
            } else {
                WeissClass::MiddleSlope
            };
            class.id() as f64
        })
        .collect();
    let mut out = tpi_small.with_values(classes)?;
    out.nodata = WEISS_NODATA;
    Ok(out)
}

/// Weiss classes straight from a DEM with the configured windows.
pub fn weiss_from_dem(dem: &RasterGrid, derivs: &TerrainDerivatives, cfg: &TerrainConfig) -> Result<RasterGrid> {
    let small = tpi_annulus(dem, 1, cfg.tpi_small_radius)?;
    let large = tpi_annulus(dem, 1, cfg.tpi_large_radius)?;
    classify_weiss(&small, &large, &derivs.slope, &cfg.weiss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridGeometry;
    use proptest::prelude::*;

    fn dem_from(rows: &[Vec<f64>], cs: f64) -> RasterGrid {
        let h = rows.len();
        let w = rows[0].len();
        let geo = GridGeometry::new(0.0, h as f64 * cs, cs, w, h).unwrap();
        RasterGrid::new(geo, -9999.0, rows.concat()).unwrap()
    }

    fn dem_fn(w: usize, h: usize, cs: f64, f: impl Fn(usize, usize) -> f64) -> RasterGrid {
        let geo = GridGeometry::new(0.0, h as f64 * cs, cs, w, h).unwrap();
        RasterGrid::from_fn(geo, -9999.0, f)
    }

    #[test]
    fn constant_dem_has_zero_derivatives() {
        let d = derive_terrain(&dem_fn(5, 4, 10.0, |_, _| 123.0)).unwrap();
        for layer in [&d.slope, &d.roughness, &d.curvature, &d.tpi, &d.tri] {
            assert!(layer.values().iter().all(|&v| v == 0.0));
        }
        assert!(d.flat.iter().all(|&f| f));
    }

    #[test]
    fn east_rising_plane() {
        // +1 m per 10 m cell eastward
        let d = derive_terrain(&dem_fn(6, 6, 10.0, |_, c| c as f64)).unwrap();
        let expected = 0.1f64.atan().to_degrees();
        for r in 0..6 {
            for c in 0..6 {
                assert!((d.slope.raw(r, c) - expected).abs() < 1e-9, "slope at ({r},{c})");
                assert!((d.aspect.raw(r, c) - 90.0).abs() < 1e-9);
                assert!(d.curvature.raw(r, c).abs() < 1e-12);
            }
        }
        assert!((expected - 5.7106).abs() < 1e-4);
    }

    #[test]
    fn bowl_is_concave_with_negative_tpi() {
        let d = derive_terrain(&dem_from(
            &[vec![1.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]],
            10.0,
        ))
        .unwrap();
        assert!(d.curvature.raw(1, 1) < 0.0);
        assert!((d.curvature.raw(1, 1) + 4.0 / 100.0).abs() < 1e-12);
        assert_eq!(d.tpi.raw(1, 1), -1.0);
        assert_eq!(d.roughness.raw(1, 1), 1.0);
        assert_eq!(d.tri.raw(1, 1), 1.0);
    }

    #[test]
    fn too_small_dem_is_size_error() {
        assert!(matches!(
            derive_terrain(&dem_fn(2, 5, 1.0, |_, _| 0.0)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn corner_pixel_flagged_sparse() {
        let d = derive_terrain(&dem_fn(4, 4, 1.0, |r, c| (r + c) as f64)).unwrap();
        assert!(d.sparse[0]);
        assert!(!d.sparse[5]);
    }

    #[test]
    fn north_facing_and_west_facing_aspects() {
        // rises northwards: row 0 is north, so height decreases with row
        let d = derive_terrain(&dem_fn(5, 5, 1.0, |r, _| 10.0 - r as f64)).unwrap();
        assert!(d.aspect.raw(2, 2).abs() < 1e-9);
        let d = derive_terrain(&dem_fn(5, 5, 1.0, |_, c| 10.0 - c as f64)).unwrap();
        assert!((d.aspect.raw(2, 2) - 270.0).abs() < 1e-9);
    }

    #[test]
    fn annulus_tpi_matches_brute_force() {
        let dem = dem_fn(9, 8, 5.0, |r, c| ((r * 7 + c * 13) % 11) as f64);
        let t = tpi_annulus(&dem, 2, 3).unwrap();
        for r in 0..8i64 {
            for c in 0..9i64 {
                let mut s = 0.0;
                let mut k = 0;
                for rr in 0..8i64 {
                    for cc in 0..9i64 {
                        let d = (rr - r).abs().max((cc - c).abs());
                        if (2..=3).contains(&d) {
                            s += dem.raw(rr as usize, cc as usize);
                            k += 1;
                        }
                    }
                }
                let want = dem.raw(r as usize, c as usize) - s / k as f64;
                assert!((t.raw(r as usize, c as usize) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weiss_constant_is_flat() {
        let dem = dem_fn(20, 20, 10.0, |_, _| 5.0);
        let d = derive_terrain(&dem).unwrap();
        let w = weiss_from_dem(&dem, &d, &TerrainConfig::default()).unwrap();
        assert!(w.values().iter().all(|&v| v == WeissClass::Flat.id() as f64));
    }

    #[test]
    fn weiss_gaussian_ridge() {
        // ridge along the middle column; flanks wider than the large window
        let dem = dem_fn(41, 41, 10.0, |_, c| {
            let x = c as f64 - 20.0;
            200.0 * (-x * x / (2.0 * 6.0f64.powi(2))).exp()
        });
        let d = derive_terrain(&dem).unwrap();
        let w = weiss_from_dem(&dem, &d, &TerrainConfig::default()).unwrap();
        for r in 0..41 {
            assert_eq!(w.raw(r, 20), WeissClass::Ridge.id() as f64, "crest row {r}");
        }
        assert!(w.values().iter().all(|&v| v != WeissClass::Valley.id() as f64));
    }

    #[test]
    fn weiss_zero_flat_threshold_never_flat() {
        let dem = dem_fn(30, 30, 10.0, |r, c| ((r as f64 * 0.3).sin() + (c as f64 * 0.2).cos()) * 50.0);
        let d = derive_terrain(&dem).unwrap();
        let cfg = TerrainConfig {
            weiss: WeissThresholds {
                slope_flat_deg: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let w = weiss_from_dem(&dem, &d, &cfg).unwrap();
        assert!(w.values().iter().all(|&v| v != WeissClass::Flat.id() as f64));
    }

    #[test]
    fn weiss_geometry_mismatch() {
        let a = dem_fn(5, 5, 1.0, |_, _| 0.0);
        let b = dem_fn(6, 5, 1.0, |_, _| 0.0);
        assert!(matches!(
            classify_weiss(&a, &b, &a, &WeissThresholds::default()),
            Err(Error::Geometry(_))
        ));
    }

    fn small_dem() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (3usize..7, 3usize..7).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), proptest::collection::vec(-50i32..50, w * h))
                .prop_map(|(w, h, v)| (w, h, v.into_iter().map(f64::from).collect()))
        })
    }

    proptest! {
        #[test]
        fn rotation_by_90_rotates_aspect((w, h, vals) in small_dem()) {
            let geo = GridGeometry::new(0.0, h as f64, 1.0, w, h).unwrap();
            let dem = RasterGrid::new(geo, -9999.0, vals).unwrap();
            // clockwise: new(r, c) = old(h-1-c, r), new is h wide and w tall
            let rgeo = GridGeometry::new(0.0, w as f64, 1.0, h, w).unwrap();
            let rot = RasterGrid::from_fn(rgeo, -9999.0, |r, c| dem.raw(h - 1 - c, r));
            let a = derive_terrain(&dem).unwrap();
            let b = derive_terrain(&rot).unwrap();
            for r in 0..w {
                for c in 0..h {
                    let (orow, ocol) = (h - 1 - c, r);
                    let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
                    prop_assert!(close(b.slope.raw(r, c), a.slope.raw(orow, ocol)));
                    prop_assert!(close(b.roughness.raw(r, c), a.roughness.raw(orow, ocol)));
                    prop_assert!(close(b.tri.raw(r, c), a.tri.raw(orow, ocol)));
                    prop_assert!(close(b.curvature.raw(r, c).abs(), a.curvature.raw(orow, ocol).abs()));
                    prop_assert_eq!(b.is_flat(r, c), a.is_flat(orow, ocol));
                    if !a.is_flat(orow, ocol) {
                        let want = (a.aspect.raw(orow, ocol) + 90.0).rem_euclid(360.0);
                        let diff = (b.aspect.raw(r, c) - want).rem_euclid(360.0);
                        prop_assert!(diff < 1e-6 || diff > 360.0 - 1e-6, "aspect {} vs {}", b.aspect.raw(r, c), want);
                    }
                }
            }
        }

        #[test]
        fn offset_and_scale_behaviour((w, h, vals) in small_dem(), offset in -100i32..100, scale in 1u32..5) {
            let geo = GridGeometry::new(0.0, h as f64, 1.0, w, h).unwrap();
            let dem = RasterGrid::new(geo, -9999.0, vals.clone()).unwrap();
            let shifted = dem.map_valid(|v| v + offset as f64);
            let scaled = dem.map_valid(|v| v * scale as f64);
            let a = derive_terrain(&dem).unwrap();
            let s = derive_terrain(&shifted).unwrap();
            let k = derive_terrain(&scaled).unwrap();
            let c = scale as f64;
            for i in 0..w * h {
                let (av, sv) = (a.slope.values()[i], s.slope.values()[i]);
                prop_assert!((av - sv).abs() < 1e-9);
                prop_assert!((a.tpi.values()[i] - s.tpi.values()[i]).abs() < 1e-9);
                prop_assert!((a.curvature.values()[i] - s.curvature.values()[i]).abs() < 1e-9);
                let tan_a = av.to_radians().tan();
                let tan_k = k.slope.values()[i].to_radians().tan();
                prop_assert!((tan_k - c * tan_a).abs() < 1e-9 * (1.0 + tan_k.abs()));
                prop_assert!((k.roughness.values()[i] - c * a.roughness.values()[i]).abs() < 1e-9);
                prop_assert!((k.tpi.values()[i] - c * a.tpi.values()[i]).abs() < 1e-9);
                prop_assert!((k.tri.values()[i] - c * a.tri.values()[i]).abs() < 1e-9);
            }
        }
    }
}
