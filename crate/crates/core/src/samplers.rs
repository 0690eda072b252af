//! Few-step consistency sampling, the time-travel sampler, guidance at
//! inference, sampler time grids and function-evaluation accounting.

use std::cell::Cell;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::consistency::{Condition, ConsistencyModel, Parametrization};
use crate::diffusion::{per_sample, NoiseSchedule, TimeGrid};
use crate::distill::{cfg_phi_hat, Teacher};
use crate::error::{Error, Result};
use crate::seeds::{self, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Spacing {
    Uniform,
    Power { rho: f64 },
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::Uniform
    }
}

impl Spacing {
    fn grid(self, kappa: f64, t_max: f64, intervals: usize) -> Result<TimeGrid> {
        match self {
            Spacing::Uniform => TimeGrid::uniform(kappa, t_max, intervals),
            Spacing::Power { rho } => TimeGrid::power(kappa, t_max, intervals, rho),
        }
    }
}

/// Coarse `k`-step grid and its one-step-finer companion, both ascending
/// from kappa to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    pub k: usize,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

impl SamplerSchedule {
    /// Every interior fine point sits strictly inside its coarse interval:
    /// `coarse[i] < fine[i + 1] < coarse[i + 1]` for `i` in `0..k`.
    pub fn is_interleaved(&self) -> bool {
        (0..self.k).all(|i| self.coarse[i] < self.fine[i + 1] && self.fine[i + 1] < self.coarse[i + 1])
    }
}

pub fn build_schedule(k: usize, spacing: Spacing, kappa: f64, t_max: f64) -> Result<SamplerSchedule> {
    if k < 1 {
        return Err(Error::config("sampler.steps", "need at least one step"));
    }
    let coarse = spacing.grid(kappa, t_max, k)?.points().to_vec();
    let fine = spacing.grid(kappa, t_max, k + 1)?.points().to_vec();
    let s = SamplerSchedule { k, coarse, fine };
    if !s.is_interleaved() {
        return Err(Error::config(
            "sampler.spacing",
            format!("{spacing:?} grids for k = {k} do not interleave"),
        ));
    }
    Ok(s)
}

/// Where sampler noise comes from.
pub trait NoiseSource {
    fn draw(&mut self, like: &Tensor) -> Result<Tensor>;
}

pub struct SeededNoise(pub LabRng);

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        Self(seeds::rng_from(seed))
    }
}

impl NoiseSource for SeededNoise {
    fn draw(&mut self, like: &Tensor) -> Result<Tensor> {
        seeds::randn(&mut self.0, like.shape(), like.dtype())
    }
}

/// Every draw is exactly zero.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, like: &Tensor) -> Result<Tensor> {
        Ok(like.zeros_like()?)
    }
}

/// Counts network evaluations (one per batched call) of the wrapped model.
pub struct Counting<'a> {
    pub inner: &'a dyn ConsistencyModel,
    calls: Cell<usize>,
}

impl<'a> Counting<'a> {
    pub fn new(inner: &'a dyn ConsistencyModel) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl ConsistencyModel for Counting<'_> {
    fn parametrization(&self) -> &Parametrization {
        self.inner.parametrization()
    }

    fn raw(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.raw(x, t, cond)
    }
}

/// Guidance on the raw output: `F(c0) + scale (F(c) - F(c0))`.
pub struct Guided<'a> {
    pub inner: &'a dyn ConsistencyModel,
    pub scale: f64,
}

impl ConsistencyModel for Guided<'_> {
    fn parametrization(&self) -> &Parametrization {
        self.inner.parametrization()
    }

    fn raw(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor> {
        let uncond = self.inner.raw(x, t, &cond.zeroed()?)?;
        let conditional = self.inner.raw(x, t, cond)?;
        if self.scale == 1.0 {
            return Ok(conditional);
        }
        Ok((&uncond + ((conditional - &uncond)? * self.scale)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub latents: Tensor,
    pub nfe: usize,
    /// Every consistency-function output in evaluation order, with its time.
    pub trace: Vec<(f64, Tensor)>,
}

fn times(x: &Tensor, t: f64) -> Result<Vec<f64>> {
    Ok(vec![t; x.dim(0)?])
}

/// `alpha(t) x0 + sigma(t) eps`, the re-noising step between evaluations.
fn renoise(schedule: &NoiseSchedule, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    Ok(((x0 * schedule.alpha(t))? + (eps * schedule.sigma(t))?)?)
}

/// Plain multistep consistency sampling: one evaluation per coarse step.
pub fn consistency_sample(
    cf: &dyn ConsistencyModel,
    schedule: &NoiseSchedule,
    cond: &Condition,
    shape: &[usize],
    sched: &SamplerSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<SampleResult> {
    let counted = Counting::new(cf);
    let template = Tensor::zeros(shape, DType::F32, &candle_core::Device::Cpu)?;
    let t_top = sched.coarse[sched.k];
    let mut x = (noise.draw(&template)? * schedule.sigma(t_top))?;
    let mut trace = Vec::with_capacity(sched.k);
    let mut f = x.clone();
    for i in (1..=sched.k).rev() {
        let t = sched.coarse[i];
        // Inference only: detach so no autograd graph accumulates across steps.
        f = counted.apply(&x, &times(&x, t)?, cond)?.detach();
        trace.push((t, f.clone()));
        if i > 1 {
            let eps = noise.draw(&f)?;
            x = renoise(schedule, &f, sched.coarse[i - 1], &eps)?;
        }
    }
    Ok(SampleResult {
        latents: f,
        nfe: counted.calls(),
        trace,
    })
}

/// [`consistency_sample`] with guidance applied to every evaluation.
pub fn cfg_sample(
    cf: &dyn ConsistencyModel,
    schedule: &NoiseSchedule,
    cond: &Condition,
    shape: &[usize],
    sched: &SamplerSchedule,
    scale: f64,
    noise: &mut dyn NoiseSource,
) -> Result<SampleResult> {
    let counted = Counting::new(cf);
    let guided = Guided {
        inner: &counted,
        scale,
    };
    let mut r = consistency_sample(&guided, schedule, cond, shape, sched, noise)?;
    r.nfe = counted.calls();
    Ok(r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsOptions {
    /// Draw a separate noise tensor at every injection site instead of
    /// sharing one per step.
    pub independent_noise: bool,
    /// Permit more than one coarse step.
    pub allow_multistep: bool,
}

/// Time-travel sampling: each coarse step evaluates at `t^k_{i+1}`, travels
/// down to the finer grid's `t^{k+1}_{i+1}`, evaluates again and recombines.
/// Two evaluations per step.
pub fn tts_sample(
    cf: &dyn ConsistencyModel,
    schedule: &NoiseSchedule,
    cond: &Condition,
    shape: &[usize],
    sched: &SamplerSchedule,
    opts: TtsOptions,
    noise: &mut dyn NoiseSource,
) -> Result<SampleResult> {
    if sched.k > 1 && !opts.allow_multistep {
        return Err(Error::config(
            "sampler.tts_allow_multistep",
            format!("time-travel sampling is limited to one step, got k = {}", sched.k),
        ));
    }
    let counted = Counting::new(cf);
    let p = *cf.parametrization();
    let template = Tensor::zeros(shape, DType::F32, &candle_core::Device::Cpu)?;
    let mut eps0 = noise.draw(&template)?;
    let mut x = (&eps0 * schedule.sigma(sched.coarse[sched.k]))?;
    let mut trace = Vec::with_capacity(2 * sched.k);
    for i in (0..sched.k).rev() {
        let (t_hi, t_mid, t_lo) = (sched.coarse[i + 1], sched.fine[i + 1], sched.coarse[i]);
        let (s_hi, s_mid) = (schedule.sigma(t_hi), schedule.sigma(t_mid));
        let mut site = |first: bool, eps0: &Tensor| -> Result<Tensor> {
            if opts.independent_noise && !first {
                noise.draw(eps0)
            } else {
                Ok(eps0.clone())
            }
        };

        let f_hi = counted.apply(&x, &times(&x, t_hi)?, cond)?.detach();
        trace.push((t_hi, f_hi.clone()));
        let eps_hat = ((site(true, &eps0)? + ((&x - &f_hi)? / s_hi)?)? * 0.5)?;
        let x_mid = (&f_hi + (eps_hat * s_mid)?)?;

        let raw_mid = counted.raw(&x_mid, &times(&x_mid, t_mid)?, cond)?.detach();
        let f_mid = p.combine(&x_mid, &times(&x_mid, t_mid)?, &raw_mid)?;
        trace.push((t_mid, f_mid.clone()));
        let eps_hat = ((site(false, &eps0)? + ((&x_mid - &f_mid)? / s_mid)?)? * 0.5)?;

        let skip = (&f_mid + (eps_hat * s_hi)?)? * p.c_skip(t_hi);
        let mut next = (skip? + (raw_mid * p.c_out(t_hi))?)?;
        if i > 0 {
            next = (next + (site(false, &eps0)? * schedule.sigma(t_lo))?)?;
            eps0 = noise.draw(&eps0)?;
        }
        x = next;
    }
    Ok(SampleResult {
        latents: x,
        nfe: counted.calls(),
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Cm,
    Tts,
    Cfg,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cm" => Ok(Self::Cm),
            "tts" => Ok(Self::Tts),
            "cfg" => Ok(Self::Cfg),
            other => Err(Error::config("sampler", format!("unknown sampler `{other}`"))),
        }
    }
}

/// Analytic evaluation count for `kind` at `k` steps.
pub fn expected_nfe(kind: SamplerKind, k: usize) -> usize {
    match kind {
        SamplerKind::Cm => k,
        SamplerKind::Tts | SamplerKind::Cfg => 2 * k,
    }
}

/// Euler integration of the guided teacher ODE over a descending grid.
pub fn teacher_sample(
    teacher: &dyn Teacher,
    schedule: &NoiseSchedule,
    cond: &Condition,
    shape: &[usize],
    grid: &TimeGrid,
    guidance: f64,
    noise: &mut dyn NoiseSource,
) -> Result<Tensor> {
    let template = Tensor::zeros(shape, DType::F32, &candle_core::Device::Cpu)?;
    let pts = grid.points();
    let mut x = (noise.draw(&template)? * schedule.sigma(pts[pts.len() - 1]))?;
    for w in pts.windows(2).rev() {
        let (t_to, t_from) = (w[0], w[1]);
        let v = cfg_phi_hat(teacher, &x, &times(&x, t_from)?, cond, guidance)?.detach();
        x = (x + (v * (t_to - t_from))?)?;
    }
    Ok(x)
}

/// Per-sample scaling helper shared with the distillation engine.
pub fn scale_rows(x: &Tensor, values: &[f64]) -> Result<Tensor> {
    Ok(x.broadcast_mul(&per_sample(values, x)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::{GaussianConsistency, ZeroNet};
    use crate::diffusion::{GaussianAnalytic, DEFAULT_KAPPA, DEFAULT_T_MAX};

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn one_step_uniform_schedule() {
        let s = build_schedule(1, Spacing::Uniform, DEFAULT_KAPPA, DEFAULT_T_MAX).unwrap();
        assert_eq!(s.coarse, vec![DEFAULT_KAPPA, DEFAULT_T_MAX]);
        assert_eq!(s.fine.len(), 3);
        assert!((s.fine[1] - (DEFAULT_KAPPA + DEFAULT_T_MAX) / 2.0).abs() < 1e-12);
        assert!(s.is_interleaved());
    }

    #[test]
    fn schedules_interleave() {
        for k in 1..=64 {
            for spacing in [Spacing::Uniform, Spacing::Power { rho: 7.0 }] {
                let s = build_schedule(k, spacing, DEFAULT_KAPPA, DEFAULT_T_MAX).unwrap();
                assert!(s.is_interleaved(), "{spacing:?} k={k}");
            }
        }
        assert!(matches!(
            build_schedule(0, Spacing::Uniform, DEFAULT_KAPPA, DEFAULT_T_MAX),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn nfe_accounting_and_determinism() {
        let schedule = NoiseSchedule::default();
        let model = ZeroNet(Parametrization::default());
        let cond = Condition::none();
        let shape = [2usize, 3];
        for k in 1..=3 {
            let sched = build_schedule(k, Spacing::Uniform, DEFAULT_KAPPA, DEFAULT_T_MAX).unwrap();
            let a = consistency_sample(&model, &schedule, &cond, &shape, &sched, &mut SeededNoise::new(9)).unwrap();
            let b = consistency_sample(&model, &schedule, &cond, &shape, &sched, &mut SeededNoise::new(9)).unwrap();
            assert_eq!(a.nfe, k);
            assert_eq!(flat(&a.latents), flat(&b.latents));
            let c = cfg_sample(&model, &schedule, &cond, &shape, &sched, 1.5, &mut SeededNoise::new(9)).unwrap();
            assert_eq!(c.nfe, 2 * k);
            let opts = TtsOptions {
                allow_multistep: true,
                ..Default::default()
            };
            let t = tts_sample(&model, &schedule, &cond, &shape, &sched, opts, &mut SeededNoise::new(9)).unwrap();
            assert_eq!(t.nfe, 2 * k);
            let t2 = tts_sample(&model, &schedule, &cond, &shape, &sched, opts, &mut SeededNoise::new(9)).unwrap();
            assert_eq!(flat(&t.latents), flat(&t2.latents));
            assert_eq!(t.trace.len(), t2.trace.len());
        }
        let sched = build_schedule(2, Spacing::Uniform, DEFAULT_KAPPA, DEFAULT_T_MAX).unwrap();
        let r = tts_sample(&model, &schedule, &cond, &shape, &sched, TtsOptions::default(), &mut ZeroNoise);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn unit_guidance_matches_plain_sampling() {
        let g = GaussianAnalytic::new(vec![0.3, -0.1], vec![0.5, 1.5], DEFAULT_KAPPA).unwrap();
        let model = GaussianConsistency::new(g);
        let schedule = NoiseSchedule::default();
        let sched = build_schedule(2, Spacing::Uniform, DEFAULT_KAPPA, DEFAULT_T_MAX).unwrap();
        let a = consistency_sample(&model, &schedule, &Condition::none(), &[4, 2], &sched, &mut SeededNoise::new(1)).unwrap();
        let b = cfg_sample(&model, &schedule, &Condition::none(), &[4, 2], &sched, 1.0, &mut SeededNoise::new(1)).unwrap();
        assert_eq!(flat(&a.latents), flat(&b.latents));
        assert_eq!(b.nfe, 2 * a.nfe);
    }

    #[test]
    fn oracle_outputs_sit_on_the_clean_slice() {
        let g = GaussianAnalytic::new(vec![0.3, -0.1], vec![0.5, 1.5], DEFAULT_KAPPA).unwrap();
        let model = GaussianConsistency::new(g);
        let schedule = NoiseSchedule::default();
        let sched = build_schedule(3, Spacing::Power { rho: 7.0 }, DEFAULT_KAPPA, DEFAULT_T_MAX).unwrap();
        let r = consistency_sample(&model, &schedule, &Condition::none(), &[8, 2], &sched, &mut SeededNoise::new(2)).unwrap();
        for (_, f) in &r.trace {
            let again = model.apply(f, &times(f, DEFAULT_KAPPA).unwrap(), &Condition::none()).unwrap();
            assert_eq!(flat(&again), flat(f));
        }
    }
}
