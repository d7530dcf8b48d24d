//! Region clustering and stratified selection of ground sample points and
//! satellite geometries.
//!
//! Cluster quotas follow `W_i = rho_i (alpha wT + beta wF + gamma wL + delta wE)`
//! with `rho_i` the cluster's pixel share; within a cluster each
//! (terrain, land cover, function) combination gets a share proportional to
//! `wT(t) wF(f) wL(l)` with a per-combination floor `s_min`. Both levels are
//! rounded by largest remainder so the integer quotas add up exactly.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ids, RasterGrid, LANDCOVER_CLASS_COUNT};
use crate::stats::percentile;
use crate::terrain::WeissClass;

const WEISS_CLASS_COUNT: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Index of the nearest centroid for every point.
pub fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.par_iter().map(|p| nearest(p, centroids).0).collect()
}

/// Lloyd's algorithm with k-means++ seeding, deterministic for a seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::arg("k-means needs k >= 1"));
    }
    if k > points.len() {
        return Err(Error::arg(format!("k = {k} exceeds the {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::arg("feature vectors must be finite and equally long"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignment = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let next = assign(points, &centroids);
        let changed = next != assignment;
        assignment = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // re-seed from the point worst served by its centroid
                let far = (0..points.len())
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centroids[assignment[a]])
                            .total_cmp(&dist2(&points[b], &centroids[assignment[b]]))
                            .then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    let old = assignment[i];
                    counts[old] -= 1;
                    for (s, v) in sums[old].iter_mut().zip(&points[i]) {
                        *s -= v;
                    }
                    assignment[i] = j;
                    counts[j] = 1;
                    sums[j] = points[i].clone();
                }
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    Ok(KMeans {
        centroids,
        assignment,
        inertia,
        iterations,
    })
}

/// Integer shares of `total` proportional to `weights` (largest remainder,
/// ties to the lower index). All-zero weights split evenly.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for MixtureCoefficients {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.25,
            gamma: 0.25,
            delta: 0.25,
        }
    }
}

impl MixtureCoefficients {
    pub fn validate(&self) -> Result<()> {
        let c = [self.alpha, self.beta, self.gamma, self.delta];
        if c.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::arg("mixture coefficients must be non-negative"));
        }
        let s: f64 = c.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("mixture coefficients sum to {s}, expected 1")));
        }
        Ok(())
    }
}

/// Per-class weighting factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorTables {
    /// Indexed by Weiss class id.
    pub terrain: Vec<f64>,
    /// Indexed by land-cover class id.
    pub landcover: Vec<f64>,
    /// Indexed by function id; ids beyond the table use `function_default`.
    pub function: Vec<f64>,
    pub function_default: f64,
}

impl Default for FactorTables {
    fn default() -> Self {
        Self {
            terrain: vec![1.0; WEISS_CLASS_COUNT],
            landcover: vec![1.0; LANDCOVER_CLASS_COUNT],
            function: Vec::new(),
            function_default: 1.0,
        }
    }
}

impl FactorTables {
    pub fn validate(&self) -> Result<()> {
        if self.terrain.len() != WEISS_CLASS_COUNT || self.landcover.len() != LANDCOVER_CLASS_COUNT {
            return Err(Error::arg(format!(
                "factor tables need {WEISS_CLASS_COUNT} terrain and {LANDCOVER_CLASS_COUNT} land-cover entries"
            )));
        }
        let all = self
            .terrain
            .iter()
            .chain(&self.landcover)
            .chain(&self.function)
            .chain(std::iter::once(&self.function_default));
        for &w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::arg("weighting factors must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn omega_t(&self, t: u8) -> f64 {
        self.terrain.get(t as usize).copied().unwrap_or(0.0)
    }

    pub fn omega_l(&self, l: u8) -> f64 {
        self.landcover.get(l as usize).copied().unwrap_or(0.0)
    }

    pub fn omega_f(&self, f: u32) -> f64 {
        self.function.get(f as usize).copied().unwrap_or(self.function_default)
    }

    pub fn combination_weight(&self, k: &Combination) -> f64 {
        self.omega_t(k.terrain) * self.omega_f(k.function) * self.omega_l(k.landcover)
    }

    /// Multiply every factor by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let m = |v: &Vec<f64>| v.iter().map(|x| x * c).collect();
        Self {
            terrain: m(&self.terrain),
            landcover: m(&self.landcover),
            function: m(&self.function),
            function_default: self.function_default * c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Balanced,
    Los,
    Reflection,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Preset::Balanced),
            "los" => Ok(Preset::Los),
            "reflection" => Ok(Preset::Reflection),
            _ => Err(Error::arg(format!("unknown preset '{s}' (balanced, los, reflection)"))),
        }
    }
}

impl Preset {
    /// Mixture coefficients and factor tables for the analysis goal.
    pub fn parameters(self) -> (MixtureCoefficients, FactorTables) {
        let mut t = FactorTables::default();
        match self {
            Preset::Balanced => (MixtureCoefficients::default(), t),
            Preset::Los => {
                t.terrain[WeissClass::Ridge.id() as usize] = 2.0;
                t.terrain[WeissClass::Valley.id() as usize] = 2.0;
                t.landcover[ids::WATER as usize] = 0.5;
                let c = MixtureCoefficients {
                    alpha: 0.4,
                    beta: 0.1,
                    gamma: 0.1,
                    delta: 0.4,
                };
                (c, t)
            }
            Preset::Reflection => {
                t.landcover[ids::WATER as usize] = 2.0;
                t.landcover[ids::SNOW_ICE as usize] = 2.0;
                t.landcover[ids::WETLAND as usize] = 1.5;
                let c = MixtureCoefficients {
                    alpha: 0.1,
                    beta: 0.1,
                    gamma: 0.6,
                    delta: 0.2,
                };
                (c, t)
            }
        }
    }
}

/// Feature combination `(terrain, landcover, function)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combination {
    pub terrain: u8,
    pub landcover: u8,
    pub function: u32,
}

/// One candidate pixel with its classes and continuous features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelFeatures {
    pub x: f64,
    pub y: f64,
    pub combination: Combination,
    pub elevation: f64,
    pub slope: f64,
    pub roughness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    pub size: usize,
    pub omega_t: f64,
    pub omega_f: f64,
    pub omega_l: f64,
    pub mean_elevation: f64,
}

/// Area-weighted factor means per cluster.
pub fn cluster_stats(pixels: &[PixelFeatures], assignment: &[usize], k: usize, tables: &FactorTables) -> Vec<ClusterStats> {
    let mut acc = vec![[0.0f64; 5]; k];
    for (p, &a) in pixels.iter().zip(assignment) {
        let c = &p.combination;
        let e = &mut acc[a];
        e[0] += 1.0;
        e[1] += tables.omega_t(c.terrain);
        e[2] += tables.omega_f(c.function);
        e[3] += tables.omega_l(c.landcover);
        e[4] += p.elevation;
    }
    acc.iter()
        .map(|e| {
            let n = e[0].max(1.0);
            ClusterStats {
                size: e[0] as usize,
                omega_t: e[1] / n,
                omega_f: e[2] / n,
                omega_l: e[3] / n,
                mean_elevation: e[4] / n,
            }
        })
        .collect()
}

/// Cluster weights `W_i`; the elevation factor is the min-max normalised mean
/// cluster elevation (1 for every cluster when all means coincide).
pub fn cluster_weights(stats: &[ClusterStats], coeffs: &MixtureCoefficients) -> Result<Vec<f64>> {
    coeffs.validate()?;
    let n: usize = stats.iter().map(|s| s.size).sum();
    if n == 0 {
        return Err(Error::arg("clusters hold no pixels"));
    }
    let (lo, hi) = stats
        .iter()
        .filter(|s| s.size > 0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.mean_elevation), hi.max(s.mean_elevation))
        });
    Ok(stats
        .iter()
        .map(|s| {
            if s.size == 0 {
                return 0.0;
            }
            let omega_e = if hi > lo { (s.mean_elevation - lo) / (hi - lo) } else { 1.0 };
            let rho = s.size as f64 / n as f64;
            rho * (coeffs.alpha * s.omega_t + coeffs.beta * s.omega_f + coeffs.gamma * s.omega_l + coeffs.delta * omega_e)
        })
        .collect())
}

/// Integer cluster quotas summing to `total`.
pub fn cluster_quotas(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::arg("all cluster weights are zero"));
    }
    Ok(largest_remainder(weights, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinationQuotas {
    pub quotas: Vec<(Combination, usize)>,
    /// Samples beyond the cluster quota forced by the `s_min` floors.
    pub overflow: usize,
}

/// Per-combination quotas within one cluster.
///
/// Combinations whose proportional share falls below `s_min` are pinned at
/// `s_min`; the rest of the budget is shared proportionally among the others
/// and rounded by largest remainder. When the floors alone exceed the
/// budget every combination gets `s_min` and the excess is reported.
pub fn allocate_combination_quotas(
    combos: &[(Combination, f64)],
    s_i: usize,
    s_min: usize,
) -> CombinationQuotas {
    let n = combos.len();
    if n == 0 {
        return CombinationQuotas {
            quotas: Vec::new(),
            overflow: 0,
        };
    }
    if n * s_min >= s_i {
        return CombinationQuotas {
            quotas: combos.iter().map(|(k, _)| (*k, s_min)).collect(),
            overflow: n * s_min - s_i,
        };
    }
    let mut pinned = vec![false; n];
    loop {
        let free_budget = (s_i - s_min * pinned.iter().filter(|&&p| p).count()) as f64;
        let free_w: f64 = combos.iter().zip(&pinned).filter(|(_, p)| !**p).map(|((_, w), _)| w).sum();
        let mut changed = false;
        for (i, (_, w)) in combos.iter().enumerate() {
            if pinned[i] {
                continue;
            }
            let share = if free_w > 0.0 { w / free_w * free_budget } else { 0.0 };
            if share < s_min as f64 {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
    let budget = s_i - s_min * (n - free.len());
    let shares = largest_remainder(&free.iter().map(|&i| combos[i].1).collect::<Vec<_>>(), budget);
    let mut quotas: Vec<(Combination, usize)> = combos.iter().map(|(k, _)| (*k, s_min)).collect();
    for (&i, q) in free.iter().zip(shares) {
        quotas[i].1 = q;
    }
    CombinationQuotas { quotas, overflow: 0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundSample {
    pub point_id: usize,
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
    pub combination: Combination,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub cluster: usize,
    pub combination: Combination,
    pub quota: usize,
    pub drawn: usize,
}

/// Spatial hash for minimum-distance checks.
struct SpacingIndex {
    cell: f64,
    d2: f64,
    buckets: HashMap<(i64, i64), Vec<(f64, f64)>>,
}

impl SpacingIndex {
    fn new(d_min: f64) -> Self {
        Self {
            cell: d_min.max(1e-9),
            d2: d_min * d_min,
            buckets: HashMap::new(),
        }
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    fn admits(&self, x: f64, y: f64) -> bool {
        if self.d2 <= 0.0 {
            return true;
        }
        let (kx, ky) = self.key(x, y);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = self.buckets.get(&(kx + dx, ky + dy)) {
                    if b.iter().any(|&(px, py)| (px - x).powi(2) + (py - y).powi(2) < self.d2) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, x: f64, y: f64) {
        let k = self.key(x, y);
        self.buckets.entry(k).or_default().push((x, y));
    }
}

/// A quota-bearing stratum: candidate locations of one combination in one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum {
    pub cluster: usize,
    pub combination: Combination,
    pub quota: usize,
    pub candidates: Vec<(f64, f64)>,
}

/// Uniform random draws per stratum with a global minimum spacing.
///
/// Each stratum tries at most `retry_factor * quota` candidates (all of them
/// when the factor is 0); unfilled quotas are reported.
pub fn draw_points(strata: &[Stratum], d_min: f64, seed: u64, retry_factor: usize) -> (Vec<GroundSample>, Vec<Shortfall>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = SpacingIndex::new(d_min);
    let mut points = Vec::new();
    let mut short = Vec::new();
    for st in strata {
        if st.quota == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..st.candidates.len()).collect();
        order.shuffle(&mut rng);
        let budget = if retry_factor == 0 {
            order.len()
        } else {
            (retry_factor * st.quota).min(order.len())
        };
        let mut drawn = 0;
        for &i in &order[..budget] {
            if drawn == st.quota {
                break;
            }
            let (x, y) = st.candidates[i];
            if index.admits(x, y) {
                index.insert(x, y);
                points.push(GroundSample {
                    point_id: points.len(),
                    x,
                    y,
                    cluster: st.cluster,
                    combination: st.combination,
                });
                drawn += 1;
            }
        }
        if drawn < st.quota {
            short.push(Shortfall {
                cluster: st.cluster,
                combination: st.combination,
                quota: st.quota,
                drawn,
            });
        }
    }
    (points, short)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatGeometry {
    pub elev_deg: f64,
    pub az_deg: f64,
    pub alt_km: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SatelliteGridConfig {
    pub elevation_start: f64,
    pub elevation_stop: f64,
    pub elevation_step: f64,
    pub azimuth_start: f64,
    pub azimuth_stop: f64,
    pub azimuth_step: f64,
    pub altitudes_km: Vec<f64>,
}

impl Default for SatelliteGridConfig {
    fn default() -> Self {
        Self {
            elevation_start: 25.0,
            elevation_stop: 85.0,
            elevation_step: 15.0,
            azimuth_start: 0.0,
            azimuth_stop: 300.0,
            azimuth_step: 60.0,
            altitudes_km: vec![500.0, 850.0, 1200.0],
        }
    }
}

fn progression(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if stop < start {
        return Err(Error::arg(format!("range [{start}, {stop}] is empty")));
    }
    if start == stop {
        return Ok(vec![start]);
    }
    if !(step > 0.0) {
        return Err(Error::arg("grid step must be positive"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

impl SatelliteGridConfig {
    pub fn single(elev_deg: f64, az_deg: f64, alt_km: f64) -> Self {
        Self {
            elevation_start: elev_deg,
            elevation_stop: elev_deg,
            elevation_step: 1.0,
            azimuth_start: az_deg,
            azimuth_stop: az_deg,
            azimuth_step: 1.0,
            altitudes_km: vec![alt_km],
        }
    }

    pub fn elevations(&self) -> Result<Vec<f64>> {
        progression(self.elevation_start, self.elevation_stop, self.elevation_step)
    }
}

/// All (elevation, azimuth, altitude) combinations, elevation-major.
pub fn satellite_grid(cfg: &SatelliteGridConfig) -> Result<Vec<SatGeometry>> {
    let els = cfg.elevations()?;
    if els.iter().any(|&e| !(e > 0.0 && e <= 90.0)) {
        return Err(Error::arg("grid elevations must lie in (0, 90]"));
    }
    let azs = progression(cfg.azimuth_start, cfg.azimuth_stop, cfg.azimuth_step)?;
    if cfg.altitudes_km.is_empty() || cfg.altitudes_km.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::arg("grid needs at least one positive altitude"));
    }
    let mut out = Vec::with_capacity(els.len() * azs.len() * cfg.altitudes_km.len());
    for &e in &els {
        for &a in &azs {
            for &h in &cfg.altitudes_km {
                out.push(SatGeometry {
                    elev_deg: e,
                    az_deg: a.rem_euclid(360.0),
                    alt_km: h,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Point `i` is paired with geometry `i mod G`.
    Assigned,
    /// Every point with every geometry.
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub k: usize,
    pub budget: usize,
    pub s_min: usize,
    pub d_min_m: f64,
    pub retry_factor: usize,
    pub max_iter: usize,
    /// k-means is fitted on at most this many pixels (evenly strided);
    /// all pixels are then assigned to the nearest centroid.
    pub max_fit_pixels: usize,
    pub preset: Preset,
    /// Override the preset's coefficients and tables when set.
    pub coefficients: Option<MixtureCoefficients>,
    pub factors: Option<FactorTables>,
    pub satellites: SatelliteGridConfig,
    pub pairing: Pairing,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k: 12,
            budget: 1000,
            s_min: 1,
            d_min_m: 100.0,
            retry_factor: 50,
            max_iter: 100,
            max_fit_pixels: 20_000,
            preset: Preset::Balanced,
            coefficients: None,
            factors: None,
            satellites: SatelliteGridConfig::default(),
            pairing: Pairing::Assigned,
        }
    }
}

impl SamplingConfig {
    pub fn parameters(&self) -> (MixtureCoefficients, FactorTables) {
        let (c, f) = self.preset.parameters();
        (self.coefficients.unwrap_or(c), self.factors.clone().unwrap_or(f))
    }
}

/// Rasters the sampler reads; all are resampled onto the DEM grid.
pub struct SamplingInputs<'a> {
    pub dem: &'a RasterGrid,
    pub weiss: &'a RasterGrid,
    pub slope: &'a RasterGrid,
    pub roughness: &'a RasterGrid,
    pub landcover: &'a RasterGrid,
    pub function: Option<&'a RasterGrid>,
}

/// Candidate pixels with every class defined.
pub fn collect_pixels(inputs: &SamplingInputs<'_>) -> Vec<PixelFeatures> {
    let geo = inputs.dem.geometry;
    let align = |g: &RasterGrid| g.resample_nearest(&geo);
    let (weiss, slope, rough, lc) = (
        align(inputs.weiss),
        align(inputs.slope),
        align(inputs.roughness),
        align(inputs.landcover),
    );
    let func = inputs.function.map(align);
    let mut out = Vec::new();
    for r in 0..geo.height {
        for c in 0..geo.width {
            let (Some(z), Some(t), Some(s), Some(ro), Some(l)) = (
                inputs.dem.get(r, c),
                weiss.get(r, c),
                slope.get(r, c),
                rough.get(r, c),
                lc.get(r, c),
            ) else {
                continue;
            };
            let (Some(t), Some(l)) = (WeissClass::from_id(t), crate::raster::class_index(l)) else {
                continue;
            };
            let f = match &func {
                Some(g) => match g.get(r, c) {
                    Some(v) if v >= 0.0 && v.fract() == 0.0 => v as u32,
                    _ => continue,
                },
                None => 0,
            };
            let (x, y) = geo.pixel_to_world(r, c);
            out.push(PixelFeatures {
                x,
                y,
                combination: Combination {
                    terrain: t.id(),
                    landcover: l,
                    function: f,
                },
                elevation: z,
                slope: s,
                roughness: ro,
            });
        }
    }
    out
}

/// Clustering features: one-hot classes plus robustly standardised
/// slope, roughness and elevation.
pub fn feature_vectors(pixels: &[PixelFeatures]) -> Vec<Vec<f64>> {
    let functions: Vec<u32> = {
        let mut f: Vec<u32> = pixels.iter().map(|p| p.combination.function).collect();
        f.sort_unstable();
        f.dedup();
        f
    };
    let robust = |get: fn(&PixelFeatures) -> f64| {
        let v: Vec<f64> = pixels.iter().map(get).collect();
        let med = percentile(v.iter().copied(), 50.0).unwrap_or(0.0);
        let iqr = percentile(v.iter().copied(), 75.0).unwrap_or(0.0) - percentile(v.iter().copied(), 25.0).unwrap_or(0.0);
        (med, if iqr > 0.0 { iqr } else { 1.0 })
    };
    let scales = [
        robust(|p| p.slope),
        robust(|p| p.roughness),
        robust(|p| p.elevation),
    ];
    let dim = WEISS_CLASS_COUNT + LANDCOVER_CLASS_COUNT + functions.len() + 3;
    pixels
        .iter()
        .map(|p| {
            let mut v = vec![0.0; dim];
            let c = &p.combination;
            v[c.terrain as usize] = 1.0;
            v[WEISS_CLASS_COUNT + c.landcover as usize] = 1.0;
            let fi = functions.binary_search(&c.function).expect("function id collected");
            v[WEISS_CLASS_COUNT + LANDCOVER_CLASS_COUNT + fi] = 1.0;
            let base = dim - 3;
            for (j, (x, (m, s))) in [p.slope, p.roughness, p.elevation].into_iter().zip(scales).enumerate() {
                v[base + j] = (x - m) / s;
            }
            v
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub omega_t: f64,
    pub omega_f: f64,
    pub omega_l: f64,
    pub mean_elevation: f64,
    pub weight: f64,
    pub quota: usize,
    pub overflow: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationQuota {
    pub cluster: usize,
    pub combination: Combination,
    pub weight: f64,
    pub quota: usize,
    pub available: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDesign {
    pub clusters: Vec<ClusterSummary>,
    pub combinations: Vec<CombinationQuota>,
    pub points: Vec<GroundSample>,
    pub shortfalls: Vec<Shortfall>,
    pub satellites: Vec<SatGeometry>,
    pub pairing: Pairing,
    pub inertia: f64,
}

/// Full sampling pipeline: cluster, allocate, draw, attach geometries.
pub fn design_samples(inputs: &SamplingInputs<'_>, cfg: &SamplingConfig, seed: u64) -> Result<SampleDesign> {
    let (coeffs, tables) = cfg.parameters();
    coeffs.validate()?;
    tables.validate()?;
    let satellites = satellite_grid(&cfg.satellites)?;
    let pixels = collect_pixels(inputs);
    if pixels.is_empty() {
        return Err(Error::Validation("no pixel has every sampling layer defined".into()));
    }
    let features = feature_vectors(&pixels);
    let k = cfg.k.min(pixels.len());
    let stride = pixels.len().div_ceil(cfg.max_fit_pixels.max(k).max(1));
    let fit: Vec<Vec<f64>> = features.iter().step_by(stride).cloned().collect();
    let km = kmeans(&fit, k.min(fit.len()), seed, cfg.max_iter)?;
    let assignment = if stride == 1 { km.assignment.clone() } else { assign(&features, &km.centroids) };
    let k = km.centroids.len();

    let stats = cluster_stats(&pixels, &assignment, k, &tables);
    let weights = cluster_weights(&stats, &coeffs)?;
    let quotas = cluster_quotas(&weights, cfg.budget)?;

    let mut by_combo: Vec<BTreeMap<Combination, Vec<(f64, f64)>>> = vec![BTreeMap::new(); k];
    for (p, &a) in pixels.iter().zip(&assignment) {
        by_combo[a].entry(p.combination).or_default().push((p.x, p.y));
    }
    let mut clusters = Vec::with_capacity(k);
    let mut combinations = Vec::new();
    let mut strata = Vec::new();
    for i in 0..k {
        let combos: Vec<(Combination, f64)> = by_combo[i].keys().map(|c| (*c, tables.combination_weight(c))).collect();
        let cq = allocate_combination_quotas(&combos, quotas[i], cfg.s_min);
        for ((combo, q), (_, w)) in cq.quotas.iter().zip(&combos) {
            let cand = &by_combo[i][combo];
            combinations.push(CombinationQuota {
                cluster: i,
                combination: *combo,
                weight: *w,
                quota: *q,
                available: cand.len(),
            });
            strata.push(Stratum {
                cluster: i,
                combination: *combo,
                quota: *q,
                candidates: cand.clone(),
            });
        }
        let s = &stats[i];
        clusters.push(ClusterSummary {
            cluster: i,
            size: s.size,
            omega_t: s.omega_t,
            omega_f: s.omega_f,
            omega_l: s.omega_l,
            mean_elevation: s.mean_elevation,
            weight: weights[i],
            quota: quotas[i],
            overflow: cq.overflow,
        });
    }
    let (points, shortfalls) = draw_points(&strata, cfg.d_min_m, seed.wrapping_add(1), cfg.retry_factor);
    Ok(SampleDesign {
        clusters,
        combinations,
        points,
        shortfalls,
        satellites,
        pairing: cfg.pairing,
        inertia: km.inertia,
    })
}

/// One link to evaluate: a ground point and a satellite geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub point_id: usize,
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
    pub terrain: u8,
    pub landcover: u8,
    pub function: u32,
    pub elev_deg: f64,
    pub az_deg: f64,
    pub alt_km: f64,
}

impl SampleDesign {
    pub fn manifest(&self) -> Vec<ManifestRow> {
        let row = |p: &GroundSample, g: &SatGeometry| ManifestRow {
            point_id: p.point_id,
            x: p.x,
            y: p.y,
            cluster: p.cluster,
            terrain: p.combination.terrain,
            landcover: p.combination.landcover,
            function: p.combination.function,
            elev_deg: g.elev_deg,
            az_deg: g.az_deg,
            alt_km: g.alt_km,
        };
        match self.pairing {
            Pairing::Assigned => self
                .points
                .iter()
                .map(|p| row(p, &self.satellites[p.point_id % self.satellites.len()]))
                .collect(),
            Pairing::Cross => self
                .points
                .iter()
                .flat_map(|p| self.satellites.iter().map(move |g| row(p, g)))
                .collect(),
        }
    }
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Smallest pairwise distance between samples (infinite for fewer than two).
pub fn min_pairwise_distance(points: &[GroundSample]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.min((a.x - b.x).hypot(a.y - b.y));
        }
    }
    best
}
