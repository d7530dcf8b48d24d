//! Framework-independent diffusion math: loss normalisation, noise
//! schedules, the forward process, v-parameterisation, soft gating and a
//! deterministic DDIM inpainting sampler over a pluggable denoiser.
//!
//! Fields are `Array2<f64>` planes; conditioning is a `C x H x W` stack.

mod tiles;

pub use tiles::*;

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile;

pub const MIN_OBSERVATIONS: usize = 10;
const SIGMA_FLOOR: f64 = 1e-6;
const IQR_TO_SIGMA: f64 = 1.349;

/// asinh / robust z-score normalisation of excess loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub eta: f64,
    pub mu: f64,
    pub sigma: f64,
}

fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn fit_normalizer(observations_db: &[f64]) -> Result<NormalizerState> {
    let finite: Vec<f64> = observations_db.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < MIN_OBSERVATIONS {
        return Err(Error::Fit(format!(
            "need at least {MIN_OBSERVATIONS} finite observations, got {}",
            finite.len()
        )));
    }
    let lin: Vec<f64> = finite.iter().map(|&d| db_to_lin(d)).collect();
    let eta = percentile(lin.iter().copied(), 80.0).expect("non-empty");
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Fit(format!("degenerate power scale {eta}")));
    }
    let n: Vec<f64> = lin.iter().map(|m| (m / eta).asinh()).collect();
    let mu = percentile(n.iter().copied(), 50.0).expect("non-empty");
    let iqr = percentile(n.iter().copied(), 75.0).expect("non-empty") - percentile(n.iter().copied(), 25.0).expect("non-empty");
    Ok(NormalizerState {
        eta,
        mu,
        sigma: (iqr / IQR_TO_SIGMA).max(SIGMA_FLOOR),
    })
}

impl NormalizerState {
    pub fn normalize(&self, m_db: f64) -> Result<f64> {
        if !m_db.is_finite() {
            return Err(Error::arg(format!("cannot normalise {m_db}")));
        }
        Ok(((db_to_lin(m_db) / self.eta).asinh() - self.mu) / self.sigma)
    }

    pub fn denormalize(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::arg(format!("cannot denormalise {z}")));
        }
        let lin = self.eta * (z * self.sigma + self.mu).sinh();
        if !(lin > 0.0) {
            return Err(Error::arg(format!("z = {z} maps to non-positive power")));
        }
        Ok(10.0 * lin.log10())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ScheduleKind {
    /// `abar(t) = f(t) / f(0)`, `f(t) = cos^2(((t/T + s) / (1 + s)) pi/2)`.
    Cosine { s: f64 },
    /// Linear betas, scaled by 1000/T so the endpoint stays near zero.
    Linear { beta_start: f64, beta_end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            kind: ScheduleKind::Cosine { s: 0.008 },
        }
    }
}

/// `abar[t]` for `t = 0..=T` with `abar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t_max = cfg.steps;
        if t_max == 0 {
            return Err(Error::arg("schedule needs at least one step"));
        }
        let alpha_bar: Vec<f64> = match cfg.kind {
            ScheduleKind::Cosine { s } => {
                if !(s >= 0.0) {
                    return Err(Error::arg("cosine offset must be non-negative"));
                }
                let f = |t: usize| {
                    let c = ((t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
                    c * c
                };
                let f0 = f(0);
                (0..=t_max).map(|t| if t == 0 { 1.0 } else { f(t) / f0 }).collect()
            }
            ScheduleKind::Linear { beta_start, beta_end } => {
                let scale = 1000.0 / t_max as f64;
                let (b0, b1) = (beta_start * scale, beta_end * scale);
                if !(b0 > 0.0 && b1 >= b0 && b1 < 1.0) {
                    return Err(Error::arg(format!("linear betas {b0}..{b1} outside (0, 1)")));
                }
                let mut out = vec![1.0];
                let mut acc = 1.0;
                for t in 1..=t_max {
                    let beta = if t_max == 1 {
                        b0
                    } else {
                        b0 + (b1 - b0) * (t - 1) as f64 / (t_max - 1) as f64
                    };
                    acc *= 1.0 - beta;
                    out.push(acc);
                }
                out
            }
        };
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::arg("schedule is not strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    /// Explicit `abar[0..=T]`: starts at 1, non-increasing, within [0, 1].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::arg("schedule must start at abar = 1 and have at least one step"));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::arg("abar must be non-increasing within [0, 1]"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `(alpha_t, sigma_t) = (sqrt(abar), sqrt(1 - abar))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::arg(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::arg(format!("shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Unit Gaussian field from a seed.
pub fn gaussian_field(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// `x_t = alpha_t x0 + sigma_t eps` with the supplied noise.
pub fn noised(x0: &Array2<f64>, eps: &Array2<f64>, t: usize, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check(t)?;
    same_shape(x0, eps)?;
    let (a, sg) = s.coefficients(t);
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + sg * e))
}

/// Forward process with seeded noise; returns `(x_t, eps)`.
pub fn forward_noise(x0: &Array2<f64>, t: usize, s: &NoiseSchedule, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    s.check(t)?;
    let eps = gaussian_field(x0.dim(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((noised(x0, &eps, t, s)?, eps))
}

/// `v_t = alpha_t eps - sigma_t x0`.
pub fn v_target(x0: &Array2<f64>, eps: &Array2<f64>, t: usize, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check(t)?;
    same_shape(x0, eps)?;
    let (a, sg) = s.coefficients(t);
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * e - sg * x))
}

/// `x0_hat = alpha_t x_t - sigma_t v`.
pub fn reconstruct_x0(x_t: &Array2<f64>, v: &Array2<f64>, t: usize, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check(t)?;
    same_shape(x_t, v)?;
    let (a, sg) = s.coefficients(t);
    Ok(Zip::from(x_t).and(v).map_collect(|&x, &v| a * x - sg * v))
}

/// `eps_hat = sigma_t x_t + alpha_t v`.
pub fn reconstruct_eps(x_t: &Array2<f64>, v: &Array2<f64>, t: usize, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check(t)?;
    same_shape(x_t, v)?;
    let (a, sg) = s.coefficients(t);
    Ok(Zip::from(x_t).and(v).map_collect(|&x, &v| sg * x + a * v))
}

/// `x_raw * m_prob^gamma`, elementwise.
pub fn soft_gate(x_raw: &Array2<f64>, m_prob: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    same_shape(x_raw, m_prob)?;
    if !(gamma > 0.0) {
        return Err(Error::arg(format!("gating exponent must be positive, got {gamma}")));
    }
    if m_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::arg("blockage probabilities must lie in [0, 1]"));
    }
    Ok(Zip::from(x_raw).and(m_prob).map_collect(|&x, &p| x * p.powf(gamma)))
}

/// Model predicting `v` from a noisy field. One sampler drives one
/// denoiser at a time.
pub trait Denoiser {
    fn predict_v(&mut self, x_t: &Array2<f64>, t: usize, cond: &Array3<f64>) -> Result<Array2<f64>>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Array2<f64>, usize, &Array3<f64>) -> Result<Array2<f64>>,
{
    fn predict_v(&mut self, x_t: &Array2<f64>, t: usize, cond: &Array3<f64>) -> Result<Array2<f64>> {
        self(x_t, t, cond)
    }
}

/// Returns the exact `v` of a known clean field: the noise is whatever
/// makes `x_t = alpha_t x0 + sigma_t eps` hold.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Array2<f64>,
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn predict_v(&mut self, x_t: &Array2<f64>, t: usize, _cond: &Array3<f64>) -> Result<Array2<f64>> {
        let (a, sg) = self.schedule.coefficients(t);
        let eps = Zip::from(x_t).and(&self.x0).map_collect(|&x, &x0| (x - a * x0) / sg);
        v_target(&self.x0, &eps, t, &self.schedule)
    }
}

/// Observation mask: `true` where the pixel is observed.
pub fn mask_from_f64(m: &Array2<f64>) -> Result<Array2<bool>> {
    if m.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::arg("mask must be binary"));
    }
    Ok(m.mapv(|v| v == 1.0))
}

/// Deterministic (eta = 0) DDIM inpainting. Observed pixels are re-noised
/// to each step and masked in; at t = 0 they equal `x0_obs` exactly.
pub fn ddim_inpaint<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    x0_obs: &Array2<f64>,
    mask: &Array2<bool>,
    cond: &Array3<f64>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    if x0_obs.dim() != mask.dim() {
        return Err(Error::arg(format!("mask {:?} vs field {:?}", mask.dim(), x0_obs.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_field(x0_obs.dim(), &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let v = denoiser
            .predict_v(&x, t, cond)
            .map_err(|e| Error::Denoiser {
                step: t,
                message: e.to_string(),
            })?;
        if v.dim() != x.dim() || v.iter().any(|p| !p.is_finite()) {
            return Err(Error::Denoiser {
                step: t,
                message: "prediction has the wrong shape or non-finite values".into(),
            });
        }
        let x0_hat = reconstruct_x0(&x, &v, t, schedule)?;
        let eps_hat = reconstruct_eps(&x, &v, t, schedule)?;
        let (a_prev, s_prev) = if t > 1 { schedule.coefficients(t - 1) } else { (1.0, 0.0) };
        let noise = gaussian_field(x.dim(), &mut rng);
        let mut next = Zip::from(&x0_hat).and(&eps_hat).map_collect(|&x0, &e| a_prev * x0 + s_prev * e);
        Zip::from(&mut next)
            .and(mask)
            .and(x0_obs)
            .and(&noise)
            .for_each(|n, &m, &obs, &e| {
                if m {
                    *n = if t > 1 { a_prev * obs + s_prev * e } else { obs };
                }
            });
        x = next;
    }
    Ok(x)
}
