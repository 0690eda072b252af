//! Teacher pretraining and the two distillation stages.
//!
//! Stage 1 trains only the student's LoRA factors against clean latents
//! with a Huber plus adversarial objective. Stage 2 distils the guided
//! teacher ODE into the student: targets come from `m` teacher Euler steps
//! followed by the EMA student, predictions from the online student one gap
//! higher, and the same discriminator keeps training alongside.

use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::Optimizer;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{
    Condition, ConditionEncoder, ConsistencyModel, DenoiserNet, EmaState, LoraAdapter, LoraConfig, LoraView,
    NetModel, Parametrization,
};
use crate::container::Container;
use crate::diffusion::{forward_perturb_batch, per_sample, GaussianAnalytic, NoiseSchedule, TimeGrid};
use crate::discriminator::{d_hinge_loss, Discriminator};
use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};
use crate::seeds::{self, LabRng};

/// Something that supplies the probability-flow velocity `dx/dt`.
pub trait Teacher {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor>;
}

/// Teacher defined by a denoiser `D(x, t, c)` estimating the clean sample.
pub struct DenoiserTeacher<M> {
    pub denoiser: M,
    pub schedule: NoiseSchedule,
}

impl<M: ConsistencyModel> Teacher for DenoiserTeacher<M> {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor> {
        let d = self.denoiser.apply(x, t, cond)?;
        velocity_from_denoised(&self.schedule, x, t, &d)
    }
}

/// `dx/dt = f x - g^2/2 * score` with `score = (alpha D - x) / sigma^2`.
pub fn velocity_from_denoised(schedule: &NoiseSchedule, x: &Tensor, t: &[f64], d: &Tensor) -> Result<Tensor> {
    let mut on_x = Vec::with_capacity(t.len());
    let mut on_d = Vec::with_capacity(t.len());
    for &ti in t {
        let s2 = schedule.sigma(ti).powi(2);
        let h = 0.5 * schedule.g2(ti);
        on_x.push(schedule.drift_coeff(ti) + h / s2);
        on_d.push(-h * schedule.alpha(ti) / s2);
    }
    Ok((x.broadcast_mul(&per_sample(&on_x, x)?)? + d.broadcast_mul(&per_sample(&on_d, d)?)?)?)
}

/// Exact-score teacher for a Gaussian data distribution; ignores the condition.
pub struct GaussianTeacher {
    pub gaussian: GaussianAnalytic,
    pub schedule: NoiseSchedule,
}

impl Teacher for GaussianTeacher {
    fn velocity(&self, x: &Tensor, t: &[f64], _cond: &Condition) -> Result<Tensor> {
        let d = self.gaussian.posterior_mean_batch(x, t)?;
        velocity_from_denoised(&self.schedule, x, t, &d)
    }
}

/// Guided velocity `Phi(c0) + w (Phi(c) - Phi(c0))`.
pub fn cfg_phi_hat(teacher: &dyn Teacher, x: &Tensor, t: &[f64], cond: &Condition, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        return teacher.velocity(x, t, cond);
    }
    let uncond = teacher.velocity(x, t, &cond.zeroed()?)?;
    if w == 0.0 {
        return Ok(uncond);
    }
    let conditional = teacher.velocity(x, t, cond)?;
    Ok((&uncond + ((conditional - &uncond)? * w)?)?)
}

/// From `x` at `t_{n+m}` down to `t_n` by `m` guided Euler steps along the
/// grid; row `b` uses `n[b]`.
pub fn multistep_solve_target(
    teacher: &dyn Teacher,
    x: &Tensor,
    grid: &TimeGrid,
    n: &[usize],
    m: usize,
    cond: &Condition,
    w: f64,
) -> Result<Tensor> {
    if let Some(&bad) = n.iter().find(|&&ni| ni + m > grid.intervals()) {
        return Err(Error::Domain(format!(
            "target segment {bad}+{m} exceeds grid of {} intervals",
            grid.intervals()
        )));
    }
    let mut x = x.clone();
    for j in 0..m {
        let from: Vec<f64> = n.iter().map(|&ni| grid.t(ni + m - j)).collect();
        let step: Vec<f64> = n
            .iter()
            .map(|&ni| grid.t(ni + m - j - 1) - grid.t(ni + m - j))
            .collect();
        if step.iter().all(|&h| h == 0.0) {
            continue;
        }
        // Targets carry no gradient; detaching per step keeps memory flat.
        let v = cfg_phi_hat(teacher, &x, &from, cond, w)?.detach();
        x = (&x + v.broadcast_mul(&per_sample(&step, &x)?)?)?;
    }
    Ok(x)
}

/// `sqrt(||x - y||^2 + c^2) - c` over the flattened tensors.
pub fn huber_d(x: &Tensor, y: &Tensor, c: f64) -> Result<Tensor> {
    let sq = (x - y)?.sqr()?.sum_all()?;
    Ok(sq.affine(1.0, c * c)?.sqrt()?.affine(1.0, -c)?)
}

/// [`huber_d`] per leading-axis row, shape `(B,)`.
pub fn huber_rows(x: &Tensor, y: &Tensor, c: f64) -> Result<Tensor> {
    let b = x.dim(0)?;
    let sq = (x - y)?.sqr()?.reshape((b, ()))?.sum(1)?;
    Ok(sq.affine(1.0, c * c)?.sqrt()?.affine(1.0, -c)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeighting {
    /// `1 / (t_{n+m} - t_n)`.
    #[default]
    InverseGap,
    Uniform,
}

impl TimeWeighting {
    pub fn weight(self, t_lo: f64, t_hi: f64) -> f64 {
        match self {
            TimeWeighting::InverseGap => 1.0 / (t_hi - t_lo),
            TimeWeighting::Uniform => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    /// Log-normal time proposal `ln t ~ N(p_mean, p_std^2)`, used for half the batch.
    pub p_mean: f64,
    pub p_std: f64,
    pub sample_steps: usize,
    pub sample_rho: f64,
    pub guidance: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            cond_dropout: 0.1,
            p_mean: -1.2,
            p_std: 1.2,
            sample_steps: 25,
            sample_rho: 7.0,
            guidance: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_lgp: f64,
    pub lambda_acd: f64,
    pub huber_c: f64,
    /// Teacher Euler steps per target.
    pub m: usize,
    /// Guidance strength baked into the targets.
    pub cfg_scale: f64,
    pub ema_decay: f64,
    pub lora: LoraConfig,
    pub time_weighting: TimeWeighting,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stage 2 also trains the base temporal blocks.
    pub stage2_train_temporal: bool,
    /// Std of Gaussian noise added to Stage-1 real samples; 0 disables.
    pub real_noise_std: f64,
    pub checkpoint_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_lgp: 0.1,
            lambda_acd: 0.1,
            huber_c: 0.001,
            m: 5,
            cfg_scale: 1.5,
            ema_decay: 0.95,
            lora: LoraConfig::default(),
            time_weighting: TimeWeighting::InverseGap,
            stage1_iters: 300,
            stage2_iters: 600,
            batch_size: 8,
            lr: 1e-4,
            stage2_train_temporal: true,
            real_noise_std: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("distill.m", "must be at least 1"));
        }
        if self.lambda_lgp < 0.0 || self.lambda_acd < 0.0 {
            return Err(Error::config("distill.lambda", "adversarial weights must be non-negative"));
        }
        if !(self.huber_c > 0.0) {
            return Err(Error::config("distill.huber_c", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("distill.ema_decay", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("distill.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Everything the networks need besides their weights.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub net: DenoiserNet,
    pub param: Parametrization,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub encoder: ConditionEncoder,
}

impl ModelContext {
    pub fn model<'a>(&'a self, weights: &'a ParamSet) -> NetModel<'a, &'a ParamSet> {
        NetModel::new(&self.net, weights, self.param)
    }

    pub fn teacher<'a>(&'a self, weights: &'a ParamSet) -> DenoiserTeacher<NetModel<'a, &'a ParamSet>> {
        DenoiserTeacher {
            denoiser: self.model(weights),
            schedule: self.schedule,
        }
    }

    pub fn condition(&self, x0: &Tensor) -> Result<Condition> {
        Condition::from_latents(&self.encoder, x0)
    }
}

fn check_finite(v: f64, step: u64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            step: step as usize,
            msg: format!("{what} is not finite"),
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Random rows of `data`.
pub fn draw_batch(data: &Tensor, batch: usize, rng: &mut LabRng) -> Result<Tensor> {
    let n = data.dim(0)?;
    let idx: Vec<u32> = (0..batch).map(|_| rng.random_range(0..n) as u32).collect();
    Ok(data.index_select(&Tensor::new(idx.as_slice(), data.device())?, 0)?)
}

/// Per-sample teacher training times: half log-normal, half grid points.
fn teacher_times(cfg: &TeacherConfig, ctx: &ModelContext, b: usize, rng: &mut LabRng) -> Vec<f64> {
    (0..b)
        .map(|i| {
            if i % 2 == 0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (cfg.p_mean + cfg.p_std * z)
                    .exp()
                    .clamp(ctx.schedule.kappa, ctx.schedule.t_max)
            } else {
                ctx.grid.t(rng.random_range(0..=ctx.grid.intervals()))
            }
        })
        .collect()
}

/// Denoising regression for the teacher; returns the trained weights and
/// the per-step loss trace.
pub fn train_teacher(
    ctx: &ModelContext,
    data: &Tensor,
    cfg: &TeacherConfig,
    rng: &mut LabRng,
) -> Result<(ParamSet, Vec<f64>)> {
    let params = ctx.net.init(rng)?;
    let mut opt = nn::adam(params.all_vars(), cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let sd2 = ctx.param.sigma_data.powi(2);
    for step in 0..cfg.steps {
        let x0 = draw_batch(data, cfg.batch_size, rng)?;
        let t = teacher_times(cfg, ctx, cfg.batch_size, rng);
        let eps = seeds::randn(rng, x0.shape(), DType::F32)?;
        let xt = forward_perturb_batch(&ctx.schedule, &x0, &t, &eps)?;
        let drop: Vec<bool> = (0..cfg.batch_size).map(|_| rng.random::<f64>() < cfg.cond_dropout).collect();
        let cond = ctx.condition(&x0)?.drop_rows(&drop)?;
        let d = ctx.model(&params).apply(&xt, &t, &cond)?;
        let weights: Vec<f64> = t.iter().map(|&ti| (ti * ti + sd2) / (ti * ti * sd2)).collect();
        let per = (d - &x0)?.sqr()?.reshape((cfg.batch_size, ()))?.mean(1)?;
        let loss = (per * Tensor::new(weights.iter().map(|&w| w as f32).collect::<Vec<_>>(), x0.device())?)?.mean_all()?;
        let lv = check_finite(scalar(&loss)?, step as u64, "teacher loss")?;
        losses.push(lv);
        opt.backward_step(&loss)?;
    }
    Ok((params, losses))
}

/// A student: frozen-by-default base weights plus an unmerged LoRA adapter.
#[derive(Debug, Clone)]
pub struct Student {
    pub base: ParamSet,
    pub lora: LoraAdapter,
}

impl Student {
    pub fn from_teacher(teacher: &ParamSet, lora: LoraConfig, rng: &mut LabRng) -> Result<Self> {
        let base = teacher.deep_clone()?;
        let lora = LoraAdapter::new(&base, |_| true, lora, rng)?;
        Ok(Self { base, lora })
    }

    pub fn view(&self) -> LoraView<'_> {
        LoraView {
            base: &self.base,
            lora: Some(&self.lora),
        }
    }

    pub fn model<'a>(&'a self, ctx: &'a ModelContext) -> NetModel<'a, LoraView<'a>> {
        NetModel::new(&ctx.net, self.view(), ctx.param)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let factors = self.lora.factors.deep_clone()?;
        let base = self.base.deep_clone()?;
        let lora = LoraAdapter::from_factors(&base, self.lora.cfg, factors)?;
        Ok(Self { base, lora })
    }

    /// Parameters trained in `stage` (shared storage).
    pub fn trainable(&self, stage: u8, train_temporal: bool) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, var) in self.lora.factors.iter() {
            set.insert_var(format!("lora.{name}"), var.clone());
        }
        if stage == 2 && train_temporal {
            for (name, var) in self.base.iter() {
                if DenoiserNet::is_temporal(name) {
                    set.insert_var(format!("base.{name}"), var.clone());
                }
            }
        }
        set
    }

    pub fn export(&self, prefix: &str, c: &mut Container) {
        self.base.export(&format!("{prefix}base."), c);
        self.lora.factors.export(&format!("{prefix}lora."), c);
    }

    pub fn import(prefix: &str, c: &Container, lora: LoraConfig) -> Result<Self> {
        let base = ParamSet::import(&format!("{prefix}base."), c)?;
        if base.is_empty() {
            return Err(Error::Contract(format!("checkpoint has no `{prefix}base.` tensors")));
        }
        let factors = ParamSet::import(&format!("{prefix}lora."), c)?;
        let lora = LoraAdapter::from_factors(&base, lora, factors)?;
        Ok(Self { base, lora })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_huber: f64,
    pub ema_gap: f64,
}

pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("step,stage,d_loss,g_adv,g_huber,ema_gap\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.stage, r.d_loss, r.g_adv, r.g_huber, r.ema_gap
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mutable state of one distillation run.
pub struct TrainingState<'a> {
    pub ctx: &'a ModelContext,
    pub cfg: DistillConfig,
    pub teacher: &'a ParamSet,
    pub student: Student,
    pub ema: Option<(Student, EmaState)>,
    pub disc: Discriminator,
    pub stage: u8,
    pub step: u64,
    pub rng: LabRng,
    gen_vars: ParamSet,
    gen_opt: candle_nn::AdamW,
    disc_opt: candle_nn::AdamW,
}

impl<'a> TrainingState<'a> {
    pub fn new(
        ctx: &'a ModelContext,
        cfg: DistillConfig,
        teacher: &'a ParamSet,
        student: Student,
        disc: Discriminator,
        stage: u8,
        rng: LabRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let gen_vars = student.trainable(stage, cfg.stage2_train_temporal);
        let gen_opt = nn::adam(gen_vars.all_vars(), cfg.lr)?;
        let disc_opt = nn::adam(disc.heads.all_vars(), disc.cfg.lr)?;
        let ema = if stage == 2 {
            let copy = student.deep_clone()?;
            let state = EmaState {
                decay: cfg.ema_decay,
                shadow: copy.trainable(2, cfg.stage2_train_temporal),
            };
            Some((copy, state))
        } else {
            None
        };
        Ok(Self {
            ctx,
            cfg,
            teacher,
            student,
            ema,
            disc,
            stage,
            step: 0,
            rng,
            gen_vars,
            gen_opt,
            disc_opt,
        })
    }

    fn ema_gap(&self) -> Result<f64> {
        let Some((_, ema)) = &self.ema else { return Ok(0.0) };
        let mut sq = 0.0;
        let mut n = 0usize;
        for (name, s) in ema.shadow.iter() {
            let th = self.gen_vars.get(name)?;
            sq += scalar(&(s.as_tensor() - th.as_tensor())?.sqr()?.sum_all()?)?;
            n += s.elem_count();
        }
        Ok((sq / n.max(1) as f64).sqrt())
    }

    fn disc_update(&mut self, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let loss = d_hinge_loss(&self.disc.discriminate(real)?, &self.disc.discriminate(&fake.detach())?)?;
        let v = check_finite(scalar(&loss)?, self.step, "discriminator loss")?;
        self.disc_opt.backward_step(&loss)?;
        Ok(v)
    }

    fn gen_update(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.gen_opt.step(&grads)?;
        Ok(())
    }

    /// One Stage-1 update on clean latents `x0`.
    pub fn lgp_step(&mut self, x0: &Tensor) -> Result<LossRecord> {
        if self.stage != 1 {
            return Err(Error::Contract("lgp_step called outside stage 1".into()));
        }
        let b = x0.dim(0)?;
        let n: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=self.ctx.grid.intervals())).collect();
        let eps = seeds::randn(&mut self.rng, x0.shape(), DType::F32)?;
        let real = if self.cfg.real_noise_std > 0.0 {
            (x0 + (seeds::randn(&mut self.rng, x0.shape(), DType::F32)? * self.cfg.real_noise_std)?)?
        } else {
            x0.clone()
        };
        let t: Vec<f64> = n.iter().map(|&ni| self.ctx.grid.t(ni)).collect();
        let xt = forward_perturb_batch(&self.ctx.schedule, x0, &t, &eps)?;
        let cond = self.ctx.condition(x0)?;
        let pred = self.student.model(self.ctx).apply(&xt, &t, &cond)?;

        // With a zero adversarial weight the discriminator cannot influence
        // the student, so it is not run at all.
        let adversarial = self.cfg.lambda_lgp > 0.0;
        let d_loss = if adversarial { self.disc_update(&real, &pred)? } else { 0.0 };
        let (g_adv, huber) = if adversarial {
            lgp_generator_terms(&self.disc, x0, &pred, self.cfg.huber_c)?
        } else {
            (pred.zeros_like()?.sum_all()?, huber_rows(x0, &pred, self.cfg.huber_c)?.mean_all()?)
        };
        let total = ((&g_adv * self.cfg.lambda_lgp)? + &huber)?;
        let rec = LossRecord {
            step: self.step,
            stage: 1,
            d_loss,
            g_adv: check_finite(scalar(&g_adv)?, self.step, "generator adversarial loss")?,
            g_huber: check_finite(scalar(&huber)?, self.step, "generator Huber loss")?,
            ema_gap: 0.0,
        };
        self.gen_update(&total)?;
        self.step += 1;
        Ok(rec)
    }

    /// One Stage-2 update on clean latents `x0`.
    pub fn acd_step(&mut self, x0: &Tensor) -> Result<LossRecord> {
        if self.stage != 2 {
            return Err(Error::Contract("acd_step called outside stage 2".into()));
        }
        let b = x0.dim(0)?;
        let top = self.ctx.grid.intervals() - self.cfg.m;
        let n: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..=top)).collect();
        let eps = seeds::randn(&mut self.rng, x0.shape(), DType::F32)?;
        let cond = self.ctx.condition(x0)?;
        let (ema_student, _) = self.ema.as_ref().expect("stage 2 has an EMA");
        let teacher = self.ctx.teacher(self.teacher);
        let terms = acd_terms(
            self.ctx,
            &self.cfg,
            &self.student.model(self.ctx),
            &ema_student.model(self.ctx),
            &teacher,
            x0,
            &cond,
            &n,
            &eps,
        )?;

        let adversarial = self.cfg.lambda_acd > 0.0;
        let d_loss = if adversarial {
            self.disc_update(&terms.target, &terms.pred)?
        } else {
            0.0
        };
        let g_adv = if adversarial {
            self.disc.generator_loss(&self.disc.discriminate(&terms.pred)?)?
        } else {
            terms.pred.zeros_like()?.sum_all()?
        };
        let total = ((&g_adv * self.cfg.lambda_acd)? + &terms.huber)?;
        let rec_adv = check_finite(scalar(&g_adv)?, self.step, "generator adversarial loss")?;
        let rec_huber = check_finite(scalar(&terms.huber)?, self.step, "generator Huber loss")?;
        self.gen_update(&total)?;
        if let Some((_, ema)) = &mut self.ema {
            ema.update(&self.gen_vars)?;
        }
        let rec = LossRecord {
            step: self.step,
            stage: 2,
            d_loss,
            g_adv: rec_adv,
            g_huber: rec_huber,
            ema_gap: self.ema_gap()?,
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn step_on(&mut self, x0: &Tensor) -> Result<LossRecord> {
        match self.stage {
            1 => self.lgp_step(x0),
            _ => self.acd_step(x0),
        }
    }

    /// Student, EMA (stage 2) and discriminator heads as a checkpoint.
    pub fn checkpoint(&self, meta: &CheckpointMeta) -> Result<Container> {
        let manifest = toml::to_string(meta).map_err(|e| Error::Contract(format!("checkpoint metadata: {e}")))?;
        let mut c = Container::new(manifest);
        self.student.export("student.", &mut c);
        if let Some((ema, _)) = &self.ema {
            ema.export("ema.", &mut c);
        }
        self.disc.heads.export("disc.", &mut c);
        Ok(c)
    }
}

/// Stage-1 generator terms: the configured adversarial loss on `pred` and
/// the batch-mean Huber distance to the clean latents.
pub fn lgp_generator_terms(disc: &Discriminator, x0: &Tensor, pred: &Tensor, c: f64) -> Result<(Tensor, Tensor)> {
    let g_adv = disc.generator_loss(&disc.discriminate(pred)?)?;
    let huber = huber_rows(x0, pred, c)?.mean_all()?;
    Ok((g_adv, huber))
}

/// Stage-2 tensors before the adversarial terms.
pub struct AcdTerms {
    /// EMA consistency output at `t_n` on the teacher-solved point, detached.
    pub target: Tensor,
    /// Online student output at `t_{n+m}`.
    pub pred: Tensor,
    /// Time-weighted batch-mean Huber distance between the two.
    pub huber: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn acd_terms(
    ctx: &ModelContext,
    cfg: &DistillConfig,
    student: &dyn ConsistencyModel,
    ema: &dyn ConsistencyModel,
    teacher: &dyn Teacher,
    x0: &Tensor,
    cond: &Condition,
    n: &[usize],
    eps: &Tensor,
) -> Result<AcdTerms> {
    let m = cfg.m;
    let t_lo: Vec<f64> = n.iter().map(|&ni| ctx.grid.t(ni)).collect();
    let t_hi: Vec<f64> = n.iter().map(|&ni| ctx.grid.t(ni + m)).collect();
    let x_hi = forward_perturb_batch(&ctx.schedule, x0, &t_hi, eps)?;
    let solved = multistep_solve_target(teacher, &x_hi, &ctx.grid, n, m, cond, cfg.cfg_scale)?.detach();
    let target = ema.apply(&solved, &t_lo, cond)?.detach();
    let pred = student.apply(&x_hi, &t_hi, cond)?;
    let weights: Vec<f64> = t_lo
        .iter()
        .zip(&t_hi)
        .map(|(&lo, &hi)| cfg.time_weighting.weight(lo, hi))
        .collect();
    let rows = huber_rows(&target, &pred, cfg.huber_c)?;
    let w = Tensor::new(weights.iter().map(|&v| v as f32).collect::<Vec<_>>(), rows.device())?.to_dtype(rows.dtype())?;
    let huber = (rows * w)?.mean_all()?;
    Ok(AcdTerms { target, pred, huber })
}

/// Metadata stored with every model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub stage: u8,
    pub step: u64,
    pub schedule: crate::diffusion::ScheduleKind,
    pub kappa: f64,
    pub t_max: f64,
    pub sigma_data: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ema_decay: f64,
    pub net: crate::consistency::NetConfig,
    pub backbone_checksum: String,
    pub teacher_checksum: String,
}

/// Run `iters` updates of the state's stage, calling `on_checkpoint` every
/// `cfg.checkpoint_every` steps (if non-zero).
pub fn run_stage(
    state: &mut TrainingState<'_>,
    data: &Tensor,
    iters: usize,
    on_checkpoint: &mut dyn FnMut(&TrainingState<'_>) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    let mut records = Vec::with_capacity(iters);
    for i in 0..iters {
        let x0 = draw_batch(data, state.cfg.batch_size, &mut state.rng)?;
        records.push(state.step_on(&x0)?);
        let every = state.cfg.checkpoint_every;
        if every > 0 && (i + 1) % every == 0 && i + 1 < iters {
            on_checkpoint(state)?;
        }
    }
    Ok(records)
}

/// Convenience for trainable-variable lists in tests and tools.
pub fn vars_of(set: &ParamSet) -> Vec<Var> {
    set.all_vars()
}
