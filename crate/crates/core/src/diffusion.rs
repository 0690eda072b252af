//! Noise schedules, the forward perturbation, the probability-flow ODE and
//! its fixed-step solvers, plus closed-form Gaussian references.
//!
//! Time runs from the clean end `kappa` up to the noisy end `t_max`. All
//! operations are pure functions of their arguments.

use candle_core::{DType, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, LabRng};

pub const DEFAULT_KAPPA: f64 = 0.002;
pub const DEFAULT_T_MAX: f64 = 80.0;
pub const DEFAULT_GRID_INTERVALS: usize = 100;

/// Relative slack when checking that a time lies inside `[kappa, t_max]`.
const TIME_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    /// `alpha(t) = 1`, `sigma(t) = t`.
    VarianceExploding,
    /// Linear-beta variance-preserving process.
    VariancePreserving { beta_min: f64, beta_max: f64 },
}

/// The pair of functions `alpha(t)`, `sigma(t)` on `[kappa, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub kappa: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VarianceExploding,
            kappa: DEFAULT_KAPPA,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl NoiseSchedule {
    pub fn variance_exploding(kappa: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VarianceExploding, kappa, t_max)
    }

    pub fn new(kind: ScheduleKind, kappa: f64, t_max: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::config("kappa", format!("must be positive, got {kappa}")));
        }
        if !(t_max > kappa && t_max.is_finite()) {
            return Err(Error::config("t_max", format!("must exceed kappa, got {t_max}")));
        }
        if let ScheduleKind::VariancePreserving { beta_min, beta_max } = kind {
            if !(beta_min > 0.0 && beta_max >= beta_min) {
                return Err(Error::config("beta", "need 0 < beta_min <= beta_max"));
            }
        }
        Ok(Self { kind, kappa, t_max })
    }

    pub fn is_variance_exploding(&self) -> bool {
        matches!(self.kind, ScheduleKind::VarianceExploding)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let lo = self.kappa * (1.0 - TIME_SLACK);
        let hi = self.t_max * (1.0 + TIME_SLACK);
        if t.is_finite() && t >= lo && t <= hi {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "time {t} outside [{}, {}]",
                self.kappa, self.t_max
            )))
        }
    }

    fn beta(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 0.0,
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                beta_min + t * (beta_max - beta_min)
            }
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 1.0,
            ScheduleKind::VariancePreserving { beta_min, beta_max } => {
                (-0.5 * (beta_min * t + 0.5 * (beta_max - beta_min) * t * t)).exp()
            }
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => t,
            ScheduleKind::VariancePreserving { .. } => {
                let a = self.alpha(t);
                (1.0 - a * a).max(0.0).sqrt()
            }
        }
    }

    /// `d log alpha / dt`, the linear drift coefficient `f_t`.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// `g^2(t) = d sigma^2/dt - 2 (d log alpha/dt) sigma^2`.
    pub fn g2(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 2.0 * t,
            ScheduleKind::VariancePreserving { .. } => {
                let a2 = self.alpha(t).powi(2);
                let s2 = 1.0 - a2;
                let dsigma2 = self.beta(t) * a2;
                dsigma2 - 2.0 * self.drift_coeff(t) * s2
            }
        }
    }
}

/// Ordered times `kappa = t_0 < t_1 < ... < t_N = t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(kappa: f64, t_max: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::config("intervals", "need at least one interval"));
        }
        let step = (t_max - kappa) / intervals as f64;
        let mut points: Vec<f64> = (0..=intervals).map(|i| kappa + step * i as f64).collect();
        points[intervals] = t_max;
        Self::from_points(points)
    }

    /// Karras-style spacing, dense near `kappa`.
    pub fn power(kappa: f64, t_max: f64, intervals: usize, rho: f64) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::config("intervals", "need at least one interval"));
        }
        if !(rho > 0.0) {
            return Err(Error::config("rho", "must be positive"));
        }
        let a = kappa.powf(1.0 / rho);
        let b = t_max.powf(1.0 / rho);
        let mut points: Vec<f64> = (0..=intervals)
            .map(|i| (a + (b - a) * i as f64 / intervals as f64).powf(rho))
            .collect();
        points[0] = kappa;
        points[intervals] = t_max;
        Self::from_points(points)
    }

    pub fn for_schedule(schedule: &NoiseSchedule, intervals: usize) -> Result<Self> {
        Self::uniform(schedule.kappa, schedule.t_max, intervals)
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("grid", "need at least two points"));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("grid", "points must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn intervals(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn t(&self, n: usize) -> f64 {
        self.points[n]
    }

    /// Largest spacing `max |t_{n+1} - t_n|`.
    pub fn max_step(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Times from `t_hi` down to `t_lo`, inclusive, in integration order.
    pub fn descending(&self, lo: usize, hi: usize) -> Result<Vec<f64>> {
        if lo > hi || hi > self.intervals() {
            return Err(Error::Domain(format!(
                "grid segment {lo}..={hi} outside 0..={}",
                self.intervals()
            )));
        }
        Ok(self.points[lo..=hi].iter().rev().copied().collect())
    }
}

/// `x_t = alpha(t) x0 + sigma(t) eps`.
pub fn forward_perturb(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    schedule.check_time(t)?;
    same_shape(x0, eps, "forward_perturb")?;
    let a = schedule.alpha(t);
    let noisy = (eps * schedule.sigma(t))?;
    let scaled = if a == 1.0 { x0.clone() } else { (x0 * a)? };
    Ok((scaled + noisy)?)
}

/// Per-sample forward perturbation: entry `b` of the leading axis uses `ts[b]`.
pub fn forward_perturb_batch(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    ts: &[f64],
    eps: &Tensor,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_perturb_batch")?;
    for &t in ts {
        schedule.check_time(t)?;
    }
    let alphas: Vec<f64> = ts.iter().map(|&t| schedule.alpha(t)).collect();
    let sigmas: Vec<f64> = ts.iter().map(|&t| schedule.sigma(t)).collect();
    let a = per_sample(&alphas, x0)?;
    let s = per_sample(&sigmas, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Right-hand side of the PF-ODE: `f_t x - g^2(t) score / 2`.
pub fn pf_ode_drift(schedule: &NoiseSchedule, x: &Tensor, t: f64, score: &Tensor) -> Result<Tensor> {
    same_shape(x, score, "pf_ode_drift")?;
    let f = schedule.drift_coeff(t);
    let half_g2 = 0.5 * schedule.g2(t);
    let diffusion = (score * (-half_g2))?;
    if f == 0.0 {
        Ok(diffusion)
    } else {
        Ok(((x * f)? + diffusion)?)
    }
}

/// A time-dependent vector field `dx/dt`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// PF-ODE velocity built from a score function.
pub struct ScoreField<'a, S> {
    pub schedule: &'a NoiseSchedule,
    pub score: S,
}

impl<S> VelocityField for ScoreField<'_, S>
where
    S: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let score = (self.score)(x, t)?;
        pf_ode_drift(self.schedule, x, t, &score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    #[default]
    Euler,
    Heun,
}

impl SolverMethod {
    /// Global order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            SolverMethod::Euler => 1,
            SolverMethod::Heun => 2,
        }
    }

    pub fn evals_per_step(self) -> usize {
        match self {
            SolverMethod::Euler => 1,
            SolverMethod::Heun => 2,
        }
    }
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            other => Err(Error::config("solver", format!("unknown solver `{other}`"))),
        }
    }
}

/// One fixed step from `t_from` down to `t_to`.
pub fn ode_step(
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    field: &impl VelocityField,
    method: SolverMethod,
) -> Result<Tensor> {
    if t_to > t_from {
        return Err(Error::Domain(format!(
            "ode_step integrates toward the clean end, got {t_from} -> {t_to}"
        )));
    }
    if t_to == t_from {
        return Ok(x.clone());
    }
    let h = t_to - t_from;
    let v1 = field.velocity(x, t_from)?;
    match method {
        SolverMethod::Euler => Ok((x + (v1 * h)?)?),
        SolverMethod::Heun => {
            let predicted = (x + (&v1 * h)?)?;
            let v2 = field.velocity(&predicted, t_to)?;
            Ok((x + ((v1 + v2)? * (0.5 * h))?)?)
        }
    }
}

/// Chain [`ode_step`] over `times`, which must be strictly decreasing.
pub fn solve_pf_ode(
    x_start: &Tensor,
    times: &[f64],
    field: &impl VelocityField,
    method: SolverMethod,
) -> Result<Tensor> {
    if times.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Domain(
            "solve_pf_ode needs strictly decreasing times".into(),
        ));
    }
    let mut x = x_start.clone();
    for w in times.windows(2) {
        x = ode_step(&x, w[0], w[1], field, method)?;
    }
    Ok(x)
}

/// Diagonal Gaussian data distribution under the variance-exploding
/// schedule, with every quantity of interest in closed form.
///
/// `mu0` and `var0` broadcast against the trailing dimensions of the data.
#[derive(Debug, Clone)]
pub struct GaussianAnalytic {
    pub mu0: Tensor,
    pub var0: Tensor,
    pub kappa: f64,
}

impl GaussianAnalytic {
    /// Vector-valued data of dimension `mu0.len()`.
    pub fn new(mu0: Vec<f64>, var0: Vec<f64>, kappa: f64) -> Result<Self> {
        let d = mu0.len();
        Self::with_shape(mu0, var0, d, kappa)
    }

    /// Parameters laid out with `param_shape`, e.g. `(C, 1, 1)` for
    /// per-channel statistics of video latents.
    pub fn with_shape(
        mu0: Vec<f64>,
        var0: Vec<f64>,
        param_shape: impl Into<Shape>,
        kappa: f64,
    ) -> Result<Self> {
        if mu0.len() != var0.len() {
            return Err(Error::Contract("mu0 and var0 lengths differ".into()));
        }
        if var0.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Contract("var0 must be positive".into()));
        }
        let shape = param_shape.into();
        let dev = candle_core::Device::Cpu;
        Ok(Self {
            mu0: Tensor::from_vec(mu0, shape.clone(), &dev)?,
            var0: Tensor::from_vec(var0, shape, &dev)?,
            kappa,
        })
    }

    fn params(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        Ok((self.mu0.to_dtype(dtype)?, self.var0.to_dtype(dtype)?))
    }

    /// `(var0 + a) / (var0 + b)` cast to `dtype`, computed in f64.
    fn var_ratio(&self, a: f64, b: f64, dtype: DType) -> Result<Tensor> {
        let r = ((&self.var0 + a)? / (&self.var0 + b)?)?;
        Ok(r.to_dtype(dtype)?)
    }

    /// Marginal variance at time `t`.
    pub fn marginal_var(&self, t: f64) -> Result<Tensor> {
        Ok((&self.var0 + t * t)?)
    }

    pub fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let (mu, _) = self.params(x.dtype())?;
        let var_t = self.marginal_var(t)?.to_dtype(x.dtype())?;
        Ok(x.broadcast_sub(&mu)?.broadcast_div(&var_t)?.neg()?)
    }

    /// `E[x0 | x_t]`.
    pub fn posterior_mean(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let (mu, _) = self.params(x.dtype())?;
        let gain = self.var_ratio(0.0, t * t, x.dtype())?;
        Ok(x.broadcast_sub(&mu)?.broadcast_mul(&gain)?.broadcast_add(&mu)?)
    }

    /// Exact PF-ODE flow from time `t` to time `s`.
    pub fn trajectory(&self, x: &Tensor, t: f64, s: f64) -> Result<Tensor> {
        let (mu, _) = self.params(x.dtype())?;
        let gain = self.var_ratio(s * s, t * t, x.dtype())?.sqrt()?;
        Ok(x.broadcast_sub(&mu)?.broadcast_mul(&gain)?.broadcast_add(&mu)?)
    }

    /// Exact consistency map `f*(x, t)`: the trajectory's endpoint at kappa.
    pub fn consistency(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.trajectory(x, t, self.kappa)
    }

    /// Per-sample versions, leading axis indexed by `ts`.
    pub fn consistency_batch(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.map_rows(x, ts, |row, t| self.consistency(row, t))
    }

    pub fn posterior_mean_batch(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.map_rows(x, ts, |row, t| self.posterior_mean(row, t))
    }

    fn map_rows(
        &self,
        x: &Tensor,
        ts: &[f64],
        f: impl Fn(&Tensor, f64) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let b = x.dim(0)?;
        if b != ts.len() {
            return Err(Error::Contract(format!("{} times for batch of {b}", ts.len())));
        }
        let rows = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| f(&x.narrow(0, i, 1)?, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Draws from the marginal `p_t`.
    pub fn sample(&self, rng: &mut LabRng, shape: impl Into<Shape>, t: f64, dtype: DType) -> Result<Tensor> {
        let eps = seeds::randn(rng, shape, DType::F64)?;
        let std = self.marginal_var(t)?.sqrt()?;
        Ok(eps
            .broadcast_mul(&std)?
            .broadcast_add(&self.mu0)?
            .to_dtype(dtype)?)
    }
}

/// Broadcastable `(B, 1, ..., 1)` tensor of per-sample scalars matching `like`.
pub fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = like.dim(0)?;
    if values.len() != b {
        return Err(Error::Contract(format!(
            "{} per-sample values for batch of {b}",
            values.len()
        )));
    }
    let mut shape = vec![1usize; like.rank()];
    shape[0] = b;
    let t = Tensor::from_vec(values.to_vec(), shape, like.device())?;
    Ok(t.to_dtype(like.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn vec_f64(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
        sxy / sxx
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        vec_f64(a)
            .iter()
            .zip(vec_f64(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ve_schedule_basics() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sigma(s.kappa), s.kappa);
        for i in 0..50 {
            let t = s.kappa + i as f64 * 1.6;
            assert_eq!(s.g2(t), 2.0 * t);
            assert!(s.sigma(t + 0.1) > s.sigma(t));
        }
    }

    #[test]
    fn vp_schedule_g2_matches_finite_difference() {
        let s = NoiseSchedule::new(
            ScheduleKind::VariancePreserving {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            1e-3,
            1.0,
        )
        .unwrap();
        for &t in &[0.01, 0.2, 0.5, 0.9] {
            let h = 1e-6;
            let ds2 = (s.sigma(t + h).powi(2) - s.sigma(t - h).powi(2)) / (2.0 * h);
            let dla = (s.alpha(t + h).ln() - s.alpha(t - h).ln()) / (2.0 * h);
            let g2 = ds2 - 2.0 * dla * s.sigma(t).powi(2);
            assert!((g2 - s.g2(t)).abs() < 1e-5 * s.g2(t).max(1.0));
            assert!(s.g2(t) >= 0.0);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::variance_exploding(0.0, 1.0).is_err());
        assert!(NoiseSchedule::variance_exploding(1.0, 0.5).is_err());
    }

    #[test]
    fn grid_defaults() {
        let g = TimeGrid::for_schedule(&NoiseSchedule::default(), DEFAULT_GRID_INTERVALS).unwrap();
        assert_eq!(g.intervals(), 100);
        assert_eq!(g.t(0), DEFAULT_KAPPA);
        assert_eq!(g.t(100), DEFAULT_T_MAX);
        assert!(g.points().windows(2).all(|w| w[1] > w[0]));
        let p = TimeGrid::power(0.002, 80.0, 18, 7.0).unwrap();
        assert!(p.points().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.descending(3, 5).unwrap(), vec![g.t(5), g.t(4), g.t(3)]);
        assert!(g.descending(5, 101).is_err());
    }

    #[test]
    fn perturb_boundary_and_zero_data() {
        let s = NoiseSchedule::default();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[0.3f32, -1.7, 2.25], &dev).unwrap();
        let zeros = x0.zeros_like().unwrap();
        let at_kappa = forward_perturb(&s, &x0, s.kappa, &zeros).unwrap();
        assert_eq!(at_kappa.to_vec1::<f32>().unwrap(), x0.to_vec1::<f32>().unwrap());

        let eps = Tensor::new(&[1.0f32, -0.5, 0.25], &dev).unwrap();
        let only_noise = forward_perturb(&s, &zeros, 3.0, &eps).unwrap();
        assert_eq!(only_noise.to_vec1::<f32>().unwrap(), vec![3.0, -1.5, 0.75]);

        assert!(matches!(forward_perturb(&s, &x0, 81.0, &eps), Err(Error::Domain(_))));
        assert!(matches!(forward_perturb(&s, &x0, 0.001, &eps), Err(Error::Domain(_))));
        let short = Tensor::new(&[1.0f32], &dev).unwrap();
        assert!(matches!(forward_perturb(&s, &x0, 1.0, &short), Err(Error::Contract(_))));
    }

    #[test]
    fn perturbed_variance_matches_marginal() {
        let s = NoiseSchedule::default();
        let n = 100_000;
        let mut rng = seeds::rng_from(11);
        let x0 = seeds::randn(&mut rng, n, DType::F64).unwrap();
        let eps = seeds::randn(&mut rng, n, DType::F64).unwrap();
        let xt = vec_f64(&forward_perturb(&s, &x0, 2.0, &eps).unwrap());
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // standard error of a normal sample variance: var * sqrt(2 / (n - 1))
        let se = 5.0 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 5.0).abs() < 3.0 * se, "variance {var}");
    }

    #[test]
    fn drift_examples() {
        let s = NoiseSchedule::default();
        let dev = Device::Cpu;
        let x = Tensor::new(&[2.0f64, -1.0], &dev).unwrap();
        let zero = x.zeros_like().unwrap();
        assert_eq!(vec_f64(&pf_ode_drift(&s, &x, 5.0, &zero).unwrap()), vec![0.0, 0.0]);

        let g = GaussianAnalytic::new(vec![0.0], vec![1.0], s.kappa).unwrap();
        let x = Tensor::new(&[2.0f64], &dev).unwrap();
        let drift = pf_ode_drift(&s, &x, 1.0, &g.score(&x, 1.0).unwrap()).unwrap();
        assert!((vec_f64(&drift)[0] - 1.0).abs() < 1e-15);

        let bad = Tensor::new(&[1.0f64, 2.0], &dev).unwrap();
        assert!(matches!(pf_ode_drift(&s, &x, 1.0, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn drift_matches_trajectory_derivative_at_kappa() {
        let s = NoiseSchedule::default();
        let g = GaussianAnalytic::new(vec![0.5, -1.0], vec![1.0, 4.0], s.kappa).unwrap();
        let x = Tensor::new(&[2.0f64, 3.0], &Device::Cpu).unwrap();
        let t = s.kappa;
        let h = 1e-5;
        let fwd = vec_f64(&g.trajectory(&x, t, t + h).unwrap());
        let bwd = vec_f64(&g.trajectory(&x, t, t - h).unwrap());
        let drift = vec_f64(&pf_ode_drift(&s, &x, t, &g.score(&x, t).unwrap()).unwrap());
        for i in 0..2 {
            let fd = (fwd[i] - bwd[i]) / (2.0 * h);
            assert!((fd - drift[i]).abs() <= 1e-4 * drift[i].abs(), "{fd} vs {}", drift[i]);
        }
    }

    fn gaussian_field(
        g: &GaussianAnalytic,
        s: &NoiseSchedule,
    ) -> impl Fn(&Tensor, f64) -> Result<Tensor> {
        let g = g.clone();
        let s = *s;
        move |x: &Tensor, t: f64| pf_ode_drift(&s, x, t, &g.score(x, t)?)
    }

    #[test]
    fn zero_width_step_is_identity() {
        let s = NoiseSchedule::default();
        let g = GaussianAnalytic::new(vec![0.0], vec![1.0], s.kappa).unwrap();
        let x = Tensor::new(&[1.5f64], &Device::Cpu).unwrap();
        let field = gaussian_field(&g, &s);
        for m in [SolverMethod::Euler, SolverMethod::Heun] {
            assert_eq!(vec_f64(&ode_step(&x, 3.0, 3.0, &field, m).unwrap()), vec![1.5]);
        }
        assert!(matches!(
            ode_step(&x, 3.0, 4.0, &field, SolverMethod::Euler),
            Err(Error::Domain(_))
        ));
    }

    fn local_error_slope(method: SolverMethod) -> f64 {
        let s = NoiseSchedule::default();
        let g = GaussianAnalytic::new(vec![0.0, 0.5], vec![1.0, 4.0], s.kappa).unwrap();
        let field = gaussian_field(&g, &s);
        let x = Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let t = 2.0;
        let hs = [0.4, 0.2, 0.1, 0.05, 0.025];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let num = ode_step(&x, t, t - h, &field, method).unwrap();
                let exact = g.trajectory(&x, t, t - h).unwrap();
                max_abs_diff(&num, &exact)
            })
            .collect();
        fit_slope(&hs, &errs)
    }

    #[test]
    fn euler_local_error_is_second_order() {
        let slope = local_error_slope(SolverMethod::Euler);
        assert!((slope - 2.0).abs() <= 0.3, "slope {slope}");
    }

    #[test]
    fn heun_local_error_is_third_order() {
        let slope = local_error_slope(SolverMethod::Heun);
        assert!((slope - 3.0).abs() <= 0.4, "slope {slope}");
    }

    fn theorem_gaussian() -> GaussianAnalytic {
        GaussianAnalytic::new(vec![0.5, -1.0, 2.0], vec![64.0, 100.0, 144.0], DEFAULT_KAPPA).unwrap()
    }

    fn global_error_slope(method: SolverMethod) -> f64 {
        let s = NoiseSchedule::default();
        let g = theorem_gaussian();
        let field = gaussian_field(&g, &s);
        let mut rng = seeds::rng_from(5);
        let x_t = g.sample(&mut rng, (256, 3), s.t_max, DType::F64).unwrap();
        let exact = g.consistency(&x_t, s.t_max).unwrap();
        let ns = [10usize, 20, 40, 80, 160];
        let errs: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let grid = TimeGrid::for_schedule(&s, n).unwrap();
                let times = grid.descending(0, n).unwrap();
                let num = solve_pf_ode(&x_t, &times, &field, method).unwrap();
                max_abs_diff(&num, &exact)
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        let dts: Vec<f64> = ns.iter().map(|&n| (s.t_max - s.kappa) / n as f64).collect();
        fit_slope(&dts, &errs)
    }

    #[test]
    fn euler_global_error_is_first_order() {
        let slope = global_error_slope(SolverMethod::Euler);
        assert!((slope - 1.0).abs() <= 0.15, "slope {slope}");
    }

    #[test]
    fn heun_global_error_is_second_order() {
        let slope = global_error_slope(SolverMethod::Heun);
        assert!((slope - 2.0).abs() <= 0.25, "slope {slope}");
    }

    #[test]
    fn single_interval_solve_equals_one_step() {
        let s = NoiseSchedule::default();
        let g = theorem_gaussian();
        let field = gaussian_field(&g, &s);
        let x = Tensor::new(&[[3.0f64, 1.0, -4.0]], &Device::Cpu).unwrap();
        for m in [SolverMethod::Euler, SolverMethod::Heun] {
            let a = solve_pf_ode(&x, &[10.0, 9.2], &field, m).unwrap();
            let b = ode_step(&x, 10.0, 9.2, &field, m).unwrap();
            assert_eq!(vec_f64(&a), vec_f64(&b));
        }
        assert_eq!(
            vec_f64(&solve_pf_ode(&x, &[], &field, SolverMethod::Euler).unwrap()),
            vec_f64(&x)
        );
        assert!(solve_pf_ode(&x, &[1.0, 2.0], &field, SolverMethod::Euler).is_err());
    }

    #[test]
    fn mean_is_a_fixed_point() {
        let s = NoiseSchedule::default();
        let g = theorem_gaussian();
        let field = gaussian_field(&g, &s);
        let grid = TimeGrid::for_schedule(&s, 40).unwrap();
        let mu = g.mu0.unsqueeze(0).unwrap();
        for m in [SolverMethod::Euler, SolverMethod::Heun] {
            let out = solve_pf_ode(&mu, &grid.descending(0, 23).unwrap(), &field, m).unwrap();
            assert_eq!(vec_f64(&out), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn consistency_map_has_semigroup_property() {
        let g = theorem_gaussian();
        let mut rng = seeds::rng_from(9);
        let x_t = g.sample(&mut rng, (64, 3), 30.0, DType::F64).unwrap();
        for &s_time in &[0.002, 0.7, 5.0, 29.0] {
            let x_s = g.trajectory(&x_t, 30.0, s_time).unwrap();
            let a = g.consistency(&x_t, 30.0).unwrap();
            let b = g.consistency(&x_s, s_time).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn solve_then_exact_inversion_recovers_start() {
        let s = NoiseSchedule::default();
        let g = theorem_gaussian();
        let field = gaussian_field(&g, &s);
        let mut rng = seeds::rng_from(21);
        let x_t = g.sample(&mut rng, (32, 3), s.t_max, DType::F64).unwrap();
        let mut prev = f64::INFINITY;
        for n in [10usize, 40, 160] {
            let grid = TimeGrid::for_schedule(&s, n).unwrap();
            let end = solve_pf_ode(&x_t, &grid.descending(0, n).unwrap(), &field, SolverMethod::Heun)
                .unwrap();
            let back = g.trajectory(&end, s.kappa, s.t_max).unwrap();
            let err = max_abs_diff(&back, &x_t);
            assert!(err < prev);
            prev = err;
        }
    }
}
