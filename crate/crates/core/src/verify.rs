//! Training-free checks: exact identities of the building blocks and
//! oracle-based numerical checks against a Gaussian with a closed-form
//! consistency map. Shared by the `verify` command and the acceptance run.

use std::fmt;

use candle_core::{DType, Device, Tensor};

use crate::consistency::{
    consistency_apply, ema_update, Condition, ConsistencyModel, DenoiserNet, GaussianConsistency, LoraAdapter,
    LoraConfig, NetConfig, NetModel, Parametrization,
};
use crate::diffusion::{GaussianAnalytic, NoiseSchedule, SolverMethod, DEFAULT_KAPPA};
use crate::discriminator::{self, d_hinge_loss, g_hinge_loss, scalar_logits, DiscConfig};
use crate::distill::{cfg_phi_hat, huber_d, DenoiserTeacher, Teacher};
use crate::error::Result;
use crate::eval;
use crate::nn::{Init, ParamSet, ParamSpec};
use crate::samplers::{
    build_schedule, cfg_sample, consistency_sample, expected_nfe, tts_sample, Guided, NoiseSource, SamplerKind,
    SeededNoise, Spacing, TtsOptions,
};
use crate::seeds::{self, LabRng};

#[derive(Debug, Clone)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

/// Tolerances and sizes of the oracle checks.
#[derive(Debug, Clone)]
pub struct OracleSettings {
    pub grid_sizes: Vec<usize>,
    pub probes: usize,
    pub pushforward_samples: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            grid_sizes: vec![10, 20, 40, 80, 160],
            probes: eval::THEOREM_PROBES,
            pushforward_samples: 100_000,
            seed: 0,
        }
    }
}

pub const EULER_SLOPE: (f64, f64) = (1.0, 0.15);
pub const HEUN_SLOPE: (f64, f64) = (2.0, 0.25);
pub const HUBER_UNIT: f64 = 0.999_000_50;

fn run(id: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { id, name, passed, detail },
        Err(e) => Check {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn exact_checks() -> Vec<Check> {
    vec![
        run(1, "boundary identity", boundary_identity),
        run(2, "huber unit values", huber_values),
        run(3, "hinge unit values", hinge_values),
        run(4, "guidance identities", guidance_identities),
        run(5, "sub-pixel upsampler", upsampler),
        run(6, "schedule interleaving and NFE", interleaving_and_nfe),
        run(7, "EMA and LoRA round trip", ema_and_lora),
    ]
}

pub fn oracle_checks(s: &OracleSettings) -> Vec<Check> {
    vec![
        run(8, "solver order on the Gaussian oracle", || solver_order(s)),
        run(9, "multi-step target accuracy", || multistep(s.seed)),
        run(10, "one-step Gaussian pushforward", || pushforward(s.pushforward_samples, s.seed)),
    ]
}

fn max_abs(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_scalar::<f64>()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn test_net() -> Result<DenoiserNet> {
    DenoiserNet::new(NetConfig {
        latent_channels: 4,
        width: 8,
        blocks: 1,
        embed_dim: 6,
        fourier_features: 2,
        temporal_kernel: 3,
    })
}

/// Every parameter drawn at random (no zero-initialized output layer), so
/// the raw output and its dependence on the condition are far from trivial.
fn dense_params(net: &DenoiserNet, rng: &mut LabRng) -> Result<ParamSet> {
    let mut spec = ParamSpec::default();
    for (n, shape, _) in net.spec().entries() {
        let fan = shape.iter().skip(1).product::<usize>().max(1);
        spec.push(n.clone(), shape.clone(), Init::FanIn(fan));
    }
    spec.init(rng)
}

fn random_cond(rng: &mut LabRng, b: usize) -> Result<Condition> {
    Ok(Condition::new(
        seeds::randn(rng, (b, 4, 4, 4), DType::F32)?,
        seeds::randn(rng, (b, 6), DType::F32)?,
    ))
}

fn boundary_identity() -> Result<(bool, String)> {
    let mut rng = seeds::rng_from(11);
    let net = test_net()?;
    let params = dense_params(&net, &mut rng)?;
    let p = Parametrization::default();
    let model = NetModel::new(&net, &params, p);
    let x = seeds::randn(&mut rng, (100, 3, 4, 4, 4), DType::F32)?;
    let cond = random_cond(&mut rng, 100)?;
    let via_apply = max_abs(&consistency_apply(&model, &x, p.kappa, &cond)?, &x)?;
    // the coefficient formula itself, without the short cut
    let raw = model.raw(&x, &vec![p.kappa; 100], &cond)?;
    let raw_norm = scalar(&raw.abs()?.mean_all()?)?;
    let via_formula = max_abs(&((&x * p.c_skip(p.kappa))? + (raw * p.c_out(p.kappa))?)?, &x)?;
    let passed = via_apply == 0.0 && via_formula == 0.0 && raw_norm > 1e-3;
    Ok((
        passed,
        format!("100 inputs, max |f(x,kappa) - x| = {via_apply:e} (apply), {via_formula:e} (coefficients); mean |F| = {raw_norm:.3}"),
    ))
}

fn huber_values() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let x = Tensor::new(&[0.3f64, -0.4, 1.2], &dev)?;
    let same = scalar(&huber_d(&x, &x, 0.001)?)?;
    // unit distance spread over three coordinates
    let dir = Tensor::new(&[2.0f64 / 3.0, -1.0 / 3.0, 2.0 / 3.0], &dev)?;
    let unit = scalar(&huber_d(&(&x + &dir)?, &x, 0.001)?)?;
    let passed = same == 0.0 && (unit - HUBER_UNIT).abs() <= 1e-8;
    Ok((passed, format!("d(x,x) = {same:e}; d at distance 1, c = 0.001: {unit:.10} (want {HUBER_UNIT:.8} +- 1e-8)")))
}

fn hinge_values() -> Result<(bool, String)> {
    let separated = scalar(&d_hinge_loss(&scalar_logits(&[2.0])?, &scalar_logits(&[-3.0])?)?)?;
    let undecided = scalar(&d_hinge_loss(&scalar_logits(&[0.0])?, &scalar_logits(&[0.0])?)?)?;
    let generator = scalar(&g_hinge_loss(&scalar_logits(&[-1.0])?)?)?;
    let passed = separated == 0.0 && undecided == 2.0 && generator == 2.0;
    Ok((
        passed,
        format!("D(2,-3) = {separated}, D(0,0) = {undecided}, G(-1) = {generator} (want 0, 2, 2)"),
    ))
}

fn guidance_identities() -> Result<(bool, String)> {
    let mut rng = seeds::rng_from(12);
    let net = test_net()?;
    let params = dense_params(&net, &mut rng)?;
    let model = NetModel::new(&net, &params, Parametrization::default());
    let x = seeds::randn(&mut rng, (4, 3, 4, 4, 4), DType::F32)?;
    let t = [0.7, 3.0, 11.0, 40.0];
    let cond = random_cond(&mut rng, 4)?;
    let zero = cond.zeroed()?;

    let conditional = model.raw(&x, &t, &cond)?;
    let unconditional = model.raw(&x, &t, &zero)?;
    let cond_effect = max_abs(&conditional, &unconditional)?;
    let mut worst_one: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;

    let g1 = Guided { inner: &model, scale: 1.0 };
    worst_one = worst_one.max(max_abs(&g1.raw(&x, &t, &cond)?, &conditional)?);
    let teacher = DenoiserTeacher {
        denoiser: NetModel::new(&net, &params, Parametrization::default()),
        schedule: NoiseSchedule::default(),
    };
    worst_one = worst_one.max(max_abs(&cfg_phi_hat(&teacher, &x, &t, &cond, 1.0)?, &teacher.velocity(&x, &t, &cond)?)?);

    let v_uncond = teacher.velocity(&x, &t, &zero)?;
    for w in [0.0, 0.5, 1.5, 3.0, 7.5] {
        let g = Guided { inner: &model, scale: w };
        worst_zero = worst_zero.max(max_abs(&g.raw(&x, &t, &zero)?, &unconditional)?);
        worst_zero = worst_zero.max(max_abs(&cfg_phi_hat(&teacher, &x, &t, &zero, w)?, &v_uncond)?);
    }
    let passed = worst_one == 0.0 && worst_zero == 0.0 && cond_effect > 1e-4;
    Ok((
        passed,
        format!(
            "w = 1 vs conditional: {worst_one:e}; c_zero vs unconditional over w in {{0, 0.5, 1.5, 3, 7.5}}: {worst_zero:e}; condition effect {cond_effect:.3e}"
        ),
    ))
}

fn upsampler() -> Result<(bool, String)> {
    let d = discriminator::untrained(DiscConfig::default(), 12, 3)?;
    let l = seeds::randn(&mut seeds::rng_from(13), (2, 3, 12, 16, 16), DType::F32)?;
    let shape = d.upsample_latent(&l)?.dims().to_vec();
    let shape_ok = shape == [2, 3, 3, 64, 64];

    // identity 1x1 projection on 3 r^2 = 48 channels: the output must be a
    // permutation of the input with the documented placement
    let r = 4;
    let c = 3 * r * r;
    let mut proj = ParamSet::new();
    proj.insert("p.weight", &Tensor::eye(c, DType::F32, &Device::Cpu)?.reshape((c, c, 1, 1))?)?;
    proj.insert("p.bias", &Tensor::zeros(c, DType::F32, &Device::Cpu)?)?;
    let (b, t, h, w) = (1, 2, 16, 16);
    let n = b * t * c * h * w;
    let input = Tensor::arange(0u32, n as u32, &Device::Cpu)?.to_dtype(DType::F32)?.reshape((b, t, c, h, w))?;
    let out = discriminator::upsample_latent(&proj, "p", &input, r)?;
    let vals: Vec<f32> = out.flatten_all()?.to_vec1()?;
    let mut sorted: Vec<u32> = vals.iter().map(|&v| v as u32).collect();
    sorted.sort_unstable();
    let bijective = sorted.iter().enumerate().all(|(i, &v)| v as usize == i);
    // channel ch * r^2 + i r + j of pixel (y, x) lands at (ch, y r + i, x r + j)
    let full = out.reshape((b * t, 3, h * r, w * r))?;
    let mut placed = true;
    for k in 0..b * t {
        let frame = full.get(k)?.to_vec3::<f32>()?;
        for ch in 0..3 {
            for (i, j, y, x) in [(0, 0, 0, 0), (1, 2, 3, 5), (3, 3, 15, 15), (2, 1, 7, 9)] {
                let src = ((k * c + ch * r * r + i * r + j) * h + y) * w + x;
                placed &= frame[ch][y * r + i][x * r + j] as usize == src;
            }
        }
    }
    let passed = shape_ok && bijective && placed;
    Ok((
        passed,
        format!("(2,3,12,16,16) -> {shape:?}; identity projection bijective: {bijective}, placement: {placed}"),
    ))
}

fn interleaving_and_nfe() -> Result<(bool, String)> {
    let mut bad = Vec::new();
    for spacing in [Spacing::Uniform, Spacing::Power { rho: 7.0 }] {
        for k in 1..=32 {
            match build_schedule(k, spacing, DEFAULT_KAPPA, 80.0) {
                Ok(s) if s.is_interleaved() => {}
                _ => bad.push(format!("{spacing:?} k={k}")),
            }
        }
    }
    let schedule = NoiseSchedule::default();
    let p = Parametrization::default();
    let zero = crate::consistency::ZeroNet(p);
    let cond = Condition::none();
    let shape = [1, 2, 4, 2, 2];
    let mut nfe_bad = Vec::new();
    let multi = TtsOptions {
        independent_noise: false,
        allow_multistep: true,
    };
    for k in 1..=8 {
        let s = build_schedule(k, Spacing::Uniform, DEFAULT_KAPPA, 80.0)?;
        let cm = consistency_sample(&zero, &schedule, &cond, &shape, &s, &mut SeededNoise::new(k as u64))?.nfe;
        let tts = tts_sample(&zero, &schedule, &cond, &shape, &s, multi, &mut SeededNoise::new(k as u64))?.nfe;
        let cfg = cfg_sample(&zero, &schedule, &cond, &shape, &s, 1.5, &mut SeededNoise::new(k as u64))?.nfe;
        for (kind, got) in [(SamplerKind::Cm, cm), (SamplerKind::Tts, tts), (SamplerKind::Cfg, cfg)] {
            if got != expected_nfe(kind, k) {
                nfe_bad.push(format!("{kind:?} k={k}: {got}"));
            }
        }
    }
    let one = build_schedule(1, Spacing::Power { rho: 7.0 }, DEFAULT_KAPPA, 80.0)?;
    let tts1 = tts_sample(&zero, &schedule, &cond, &shape, &one, TtsOptions::default(), &mut SeededNoise::new(0))?.nfe;
    let passed = bad.is_empty() && nfe_bad.is_empty() && tts1 == 2;
    Ok((
        passed,
        format!(
            "interleaving k<=32 (uniform, power 7) violations: {bad:?}; NFE mismatches k<=8: {nfe_bad:?}; one-step TTS NFE {tts1}"
        ),
    ))
}

fn ema_and_lora() -> Result<(bool, String)> {
    let mut rng = seeds::rng_from(14);
    // EMA: every entry equals decay * s + (1 - decay) * theta in f32
    let mut shadow = ParamSet::new();
    let mut theta = ParamSet::new();
    shadow.insert("a", &seeds::randn(&mut rng, (7, 5), DType::F32)?)?;
    theta.insert("a", &seeds::randn(&mut rng, (7, 5), DType::F32)?)?;
    let mut ema_diff: f64 = 0.0;
    for decay in [0.0, 0.5, 0.95, 0.999, 1.0] {
        let s = shadow.deep_clone()?;
        let before: Vec<f32> = s.get("a")?.as_tensor().flatten_all()?.to_vec1()?;
        let th: Vec<f32> = theta.get("a")?.as_tensor().flatten_all()?.to_vec1()?;
        ema_update(decay, &s, &theta)?;
        let after: Vec<f32> = s.get("a")?.as_tensor().flatten_all()?.to_vec1()?;
        for ((b, t), a) in before.iter().zip(&th).zip(&after) {
            let want = decay * *b as f64 + (1.0 - decay) * *t as f64;
            ema_diff = ema_diff.max((want - *a as f64).abs() / want.abs().max(1.0));
        }
    }
    let scalar_set = |v: f32| -> Result<ParamSet> {
        let mut s = ParamSet::new();
        s.insert("p", &Tensor::new(&[v], &Device::Cpu)?)?;
        Ok(s)
    };
    let s = scalar_set(1.0)?;
    ema_update(0.95, &s, &scalar_set(0.0)?)?;
    let example = s.get("p")?.as_tensor().to_vec1::<f32>()?[0];

    let net = test_net()?;
    let base = net.init(&mut rng)?;
    let lora = LoraAdapter::new(&base, |_| true, LoraConfig { rank: 2, alpha: 2.0 }, &mut rng)?;
    for (name, var) in lora.factors.iter() {
        if name.ends_with(".lora_b") {
            var.set(&(seeds::randn(&mut rng, var.dims(), DType::F32)? * 0.1)?)?;
        }
    }
    let merged = lora.merge(&base)?;
    let restored = lora.unmerge(&merged)?;
    let mut lora_rel: f64 = 0.0;
    let mut moved = false;
    for (name, var) in base.iter() {
        let norm = scalar(&var.as_tensor().sqr()?.sum_all()?)?.sqrt().max(1e-12);
        let diff = scalar(&(var.as_tensor() - restored.get(name)?.as_tensor())?.sqr()?.sum_all()?)?.sqrt();
        lora_rel = lora_rel.max(diff / norm);
        moved |= max_abs(var.as_tensor(), merged.get(name)?.as_tensor())? > 0.0;
    }
    let passed = ema_diff <= 1e-7 && example == 0.95 && lora_rel <= 1e-6 && moved;
    Ok((
        passed,
        format!(
            "EMA max rel error {ema_diff:.2e} (f32), 0.95*1 + 0.05*0 = {example}; LoRA merge/unmerge max rel error {lora_rel:.2e}"
        ),
    ))
}

fn solver_order(s: &OracleSettings) -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut passed = true;
    for (method, (want, tol)) in [(SolverMethod::Euler, EULER_SLOPE), (SolverMethod::Heun, HEUN_SLOPE)] {
        let r = eval::verify_theorem_a1(method, &s.grid_sizes, s.probes, s.seed)?;
        let ok = (r.slope - want).abs() <= tol && !r.non_monotone;
        passed &= ok;
        parts.push(format!("{} slope {:.3} (want {want} +- {tol}, CI +-{:.3})", r.method, r.slope, r.half_width));
    }
    Ok((passed, parts.join("; ")))
}

fn multistep(seed: u64) -> Result<(bool, String)> {
    let rows = eval::multistep_vs_singlestep_report(&[1, 2, 3, 4, 5], 1.6, 5.6, seed)?;
    let passed = rows.windows(2).all(|w| w[1].endpoint_rms < w[0].endpoint_rms);
    let errs: Vec<String> = rows.iter().map(|r| format!("m={}: {:.3e}", r.m, r.endpoint_rms)).collect();
    Ok((passed, format!("endpoint RMS over gap [1.6, 5.6]: {}", errs.join(", "))))
}

/// Feeds the exact terminal marginal through the sampler as its prior
/// noise, so the sampler code path is what gets checked.
struct Preset(Option<Tensor>);

impl NoiseSource for Preset {
    fn draw(&mut self, like: &Tensor) -> Result<Tensor> {
        match self.0.take() {
            Some(t) => Ok(t.to_dtype(like.dtype())?),
            None => Ok(like.zeros_like()?),
        }
    }
}

fn pushforward(n: usize, seed: u64) -> Result<(bool, String)> {
    let mu = [0.7, -1.2];
    let var = [0.5, 2.0];
    let g = GaussianAnalytic::new(mu.to_vec(), var.to_vec(), DEFAULT_KAPPA)?;
    let schedule = NoiseSchedule::default();
    let cf = GaussianConsistency::new(g.clone());
    let mut rng = seeds::rng_for(seed, "pushforward");
    let x_top = g.sample(&mut rng, (n, 2), schedule.t_max, DType::F64)?;
    let eps = (x_top / schedule.sigma(schedule.t_max))?;
    let sched = build_schedule(1, Spacing::Uniform, DEFAULT_KAPPA, schedule.t_max)?;
    let out = consistency_sample(&cf, &schedule, &Condition::none(), &[n, 2], &sched, &mut Preset(Some(eps)))?
        .latents
        .to_dtype(DType::F64)?;
    let mean: Vec<f64> = out.mean(0)?.to_vec1()?;
    let centered = out.broadcast_sub(&out.mean_keepdim(0)?)?;
    let sample_var: Vec<f64> = (centered.sqr()?.sum(0)? / (n as f64 - 1.0))?.to_vec1()?;
    let mut passed = true;
    let mut parts = Vec::new();
    for d in 0..2 {
        let want_var = var[d] + DEFAULT_KAPPA * DEFAULT_KAPPA;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        let zm = (mean[d] - mu[d]) / se_mean;
        let zv = (sample_var[d] - want_var) / se_var;
        passed &= zm.abs() <= 3.0 && zv.abs() <= 3.0;
        parts.push(format!(
            "dim {d}: mean {:.4} ({zm:+.2} SE), var {:.4} ({zv:+.2} SE)",
            mean[d], sample_var[d]
        ));
    }
    Ok((passed, format!("{n} samples; {}", parts.join("; "))))
}
