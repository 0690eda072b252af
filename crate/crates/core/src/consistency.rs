//! Consistency-function parametrization, the factorized spatio-temporal
//! denoiser, first-frame conditioning, EMA targets and LoRA adapters.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{per_sample, GaussianAnalytic, DEFAULT_KAPPA};
use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamSet, ParamSpec, Weights};
use crate::seeds::{self, LabRng};

pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

/// Boundary-respecting skip/output coefficients around a free-form network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parametrization {
    pub sigma_data: f64,
    pub kappa: f64,
}

impl Default for Parametrization {
    fn default() -> Self {
        Self {
            sigma_data: DEFAULT_SIGMA_DATA,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl Parametrization {
    pub fn c_skip(&self, t: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        let d = t - self.kappa;
        sd2 / (d * d + sd2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        let sd = self.sigma_data;
        sd * (t - self.kappa) / (sd * sd + t * t).sqrt()
    }

    /// Input scaling so the network sees unit-variance inputs.
    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    pub fn c_noise(&self, t: f64) -> f64 {
        0.25 * t.ln()
    }

    pub fn check_times(&self, t: &[f64]) -> Result<()> {
        match t.iter().find(|&&v| !(v >= self.kappa) || !v.is_finite()) {
            Some(v) => Err(Error::Domain(format!(
                "consistency function evaluated at t = {v} below kappa = {}",
                self.kappa
            ))),
            None => Ok(()),
        }
    }

    /// `c_skip(t) x + c_out(t) raw`, returning `x` untouched when every `t` is kappa.
    pub fn combine(&self, x: &Tensor, t: &[f64], raw: &Tensor) -> Result<Tensor> {
        self.check_times(t)?;
        if t.iter().all(|&v| v == self.kappa) {
            return Ok(x.clone());
        }
        let skip: Vec<f64> = t.iter().map(|&v| self.c_skip(v)).collect();
        let out: Vec<f64> = t.iter().map(|&v| self.c_out(v)).collect();
        let skip = per_sample(&skip, x)?;
        let out = per_sample(&out, x)?;
        Ok((x.broadcast_mul(&skip)? + raw.broadcast_mul(&out)?)?)
    }
}

/// Image conditioning: the clean first latent frame and its embedding.
///
/// The all-zero condition (both parts zero) is the unconditional input used
/// by classifier-free guidance.
#[derive(Debug, Clone)]
pub struct Condition {
    /// `(B, C, H, W)` first latent frame.
    pub frame: Option<Tensor>,
    /// `(B, E)` embedding vector.
    pub embedding: Option<Tensor>,
}

impl Condition {
    /// No conditioning at all, for models that ignore it.
    pub fn none() -> Self {
        Self {
            frame: None,
            embedding: None,
        }
    }

    pub fn new(frame: Tensor, embedding: Tensor) -> Self {
        Self {
            frame: Some(frame),
            embedding: Some(embedding),
        }
    }

    /// Condition from clip latents `(B, T, C, H, W)`: first frame plus its embedding.
    pub fn from_latents(encoder: &ConditionEncoder, latents: &Tensor) -> Result<Self> {
        let frame = latents.narrow(1, 0, 1)?.squeeze(1)?;
        let embedding = encoder.embed(&frame)?;
        Ok(Self::new(frame, embedding))
    }

    /// `c_zero`: same layout, every entry exactly zero.
    pub fn zeroed(&self) -> Result<Self> {
        Ok(Self {
            frame: self.frame.as_ref().map(|f| f.zeros_like()).transpose()?,
            embedding: self.embedding.as_ref().map(|e| e.zeros_like()).transpose()?,
        })
    }

    pub fn is_zero(&self) -> Result<bool> {
        for t in self.frame.iter().chain(self.embedding.iter()) {
            if t.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()? != 0.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Batch rows `idx` of the condition.
    pub fn select(&self, idx: &[u32]) -> Result<Self> {
        let ids = Tensor::new(idx, &Device::Cpu)?;
        Ok(Self {
            frame: self.frame.as_ref().map(|f| f.contiguous()?.index_select(&ids, 0)).transpose()?,
            embedding: self
                .embedding
                .as_ref()
                .map(|e| e.contiguous()?.index_select(&ids, 0))
                .transpose()?,
        })
    }

    /// Zero the condition of the rows where `drop[b]` is true.
    pub fn drop_rows(&self, drop: &[bool]) -> Result<Self> {
        let keep: Vec<f32> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let mask = |t: &Tensor| -> Result<Tensor> {
            let m = per_sample(&keep.iter().map(|&v| v as f64).collect::<Vec<_>>(), t)?;
            Ok(t.broadcast_mul(&m)?)
        };
        Ok(Self {
            frame: self.frame.as_ref().map(mask).transpose()?,
            embedding: self.embedding.as_ref().map(mask).transpose()?,
        })
    }
}

/// Fixed random-feature embedding of a latent frame: `tanh(P vec(frame) + b)`.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    frame_dims: (usize, usize, usize),
    projection: Tensor,
    bias: Tensor,
}

impl ConditionEncoder {
    pub fn new(frame_dims: (usize, usize, usize), dim: usize, seed: u64) -> Result<Self> {
        let (c, h, w) = frame_dims;
        let n = c * h * w;
        let mut rng = seeds::rng_from(seed);
        let scale = (1.0 / n as f64).sqrt() * 4.0;
        let p: Vec<f32> = (0..dim * n)
            .map(|_| (Distribution::<f64>::sample(&StandardNormal, &mut rng) * scale) as f32)
            .collect();
        let b: Vec<f32> = (0..dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f32>>();
        Ok(Self {
            frame_dims,
            projection: Tensor::from_vec(p, (dim, n), &Device::Cpu)?,
            bias: Tensor::from_vec(b, dim, &Device::Cpu)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.bias.dims()[0]
    }

    /// `(B, C, H, W) -> (B, E)`.
    pub fn embed(&self, frame: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = frame.dims4()?;
        if (c, h, w) != self.frame_dims {
            return Err(Error::Contract(format!(
                "condition frame {:?} does not match encoder {:?}",
                (c, h, w),
                self.frame_dims
            )));
        }
        let flat = frame.to_dtype(DType::F32)?.reshape((b, c * h * w))?;
        Ok(flat
            .matmul(&self.projection.t()?)?
            .broadcast_add(&self.bias)?
            .tanh()?)
    }

    /// The all-zero embedding of the same dimension.
    pub fn zero_embedding(&self, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.dim()), DType::F32, &Device::Cpu)?)
    }
}

/// Anything that can be evaluated as a consistency function `f(x, t, c)`.
pub trait ConsistencyModel {
    fn parametrization(&self) -> &Parametrization;

    /// Free-form network output `F(x, t, c)`.
    fn raw(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor>;

    /// `c_skip(t) x + c_out(t) F(x, t, c)`.
    fn apply(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor> {
        let p = self.parametrization();
        p.check_times(t)?;
        if t.iter().all(|&v| v == p.kappa) {
            return Ok(x.clone());
        }
        let raw = self.raw(x, t, cond)?;
        p.combine(x, t, &raw)
    }
}

/// Single-time convenience wrapper around [`ConsistencyModel::apply`].
pub fn consistency_apply(
    cf: &dyn ConsistencyModel,
    x: &Tensor,
    t: f64,
    cond: &Condition,
) -> Result<Tensor> {
    let b = x.dim(0)?;
    cf.apply(x, &vec![t; b], cond)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub fourier_features: usize,
    pub temporal_kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            width: 32,
            blocks: 2,
            embed_dim: 16,
            fourier_features: 4,
            temporal_kernel: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.latent_channels == 0 {
            return Err(Error::config("model.width", "must be positive"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config("model.temporal_kernel", "must be odd"));
        }
        Ok(())
    }

    fn time_features(&self) -> usize {
        1 + 2 * self.fourier_features
    }
}

/// Factorized spatio-temporal denoiser: 2D residual blocks per frame, each
/// followed by a residual 1D convolution over the frame axis.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub cfg: NetConfig,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn spec(&self) -> ParamSpec {
        let c = &self.cfg;
        let w = c.width;
        let mut s = ParamSpec::default();
        s.linear("time.fc1", c.time_features() + c.embed_dim, w);
        s.linear("time.fc2", w, w);
        s.conv2d("in", 2 * c.latent_channels, w, 3);
        for i in 0..c.blocks {
            s.conv2d(&format!("block{i}.conv1"), w, w, 3);
            s.linear(&format!("block{i}.emb"), w, w);
            s.conv2d(&format!("block{i}.conv2"), w, w, 3);
            s.conv1d(&format!("block{i}.temporal"), w, w, c.temporal_kernel);
        }
        s.conv2d_zero("out", w, c.latent_channels, 3);
        s
    }

    pub fn init(&self, rng: &mut LabRng) -> Result<ParamSet> {
        self.spec().init(rng)
    }

    pub fn is_temporal(name: &str) -> bool {
        name.contains(".temporal.")
    }

    fn time_embedding(&self, t: &[f64], param: &Parametrization) -> Result<Tensor> {
        let nf = self.cfg.fourier_features;
        let mut feats = Vec::with_capacity(t.len() * (1 + 2 * nf));
        for &v in t {
            let c = param.c_noise(v);
            feats.push(c as f32);
            for k in 0..nf {
                let f = std::f64::consts::PI * (1u64 << k) as f64;
                feats.push((f * c).sin() as f32);
                feats.push((f * c).cos() as f32);
            }
        }
        Ok(Tensor::from_vec(feats, (t.len(), 1 + 2 * nf), &Device::Cpu)?)
    }

    /// Raw output `F(x, t, c)` for latents `(B, T, C, H, W)`.
    pub fn forward(
        &self,
        w: &dyn Weights,
        x: &Tensor,
        t: &[f64],
        cond: &Condition,
        param: &Parametrization,
    ) -> Result<Tensor> {
        let (b, frames, c, h, wd) = x.dims5()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Contract(format!(
                "denoiser expects {} latent channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        if t.len() != b {
            return Err(Error::Contract(format!("{} times for batch of {b}", t.len())));
        }
        let width = self.cfg.width;
        let c_in: Vec<f64> = t.iter().map(|&v| param.c_in(v)).collect();
        let scaled = x.to_dtype(DType::F32)?.broadcast_mul(&per_sample(&c_in, x)?.to_dtype(DType::F32)?)?;
        let frame = match &cond.frame {
            Some(f) => {
                if f.dims() != [b, c, h, wd] {
                    return Err(Error::Contract(format!(
                        "condition frame {:?} does not match latents {:?}",
                        f.dims(),
                        x.dims()
                    )));
                }
                f.to_dtype(DType::F32)?
            }
            None => Tensor::zeros((b, c, h, wd), DType::F32, &Device::Cpu)?,
        };
        let frame = frame
            .unsqueeze(1)?
            .broadcast_as((b, frames, c, h, wd))?
            .contiguous()?;
        let input = Tensor::cat(&[&scaled, &frame], 2)?.reshape((b * frames, 2 * c, h, wd))?;

        let embed = match &cond.embedding {
            Some(e) if e.dims() == [b, self.cfg.embed_dim] => e.to_dtype(DType::F32)?,
            Some(e) => {
                return Err(Error::Contract(format!(
                    "condition embedding {:?}, expected ({b}, {})",
                    e.dims(),
                    self.cfg.embed_dim
                )))
            }
            None => Tensor::zeros((b, self.cfg.embed_dim), DType::F32, &Device::Cpu)?,
        };
        let emb_in = Tensor::cat(&[&self.time_embedding(t, param)?, &embed], 1)?;
        let emb = nn::linear(w, "time.fc1", &emb_in)?.silu()?;
        let emb = nn::linear(w, "time.fc2", &emb)?.silu()?;

        let mut hcur = nn::conv2d(w, "in", &input, 1, 1)?;
        let pad = self.cfg.temporal_kernel / 2;
        for i in 0..self.cfg.blocks {
            let shift = nn::linear(w, &format!("block{i}.emb"), &emb)?
                .unsqueeze(1)?
                .broadcast_as((b, frames, width))?
                .reshape((b * frames, width, 1, 1))?;
            let r = nn::conv2d(w, &format!("block{i}.conv1"), &hcur.silu()?, 1, 1)?;
            let r = r.broadcast_add(&shift)?;
            let r = nn::conv2d(w, &format!("block{i}.conv2"), &r.silu()?, 1, 1)?;
            hcur = (hcur + r)?;

            let seq = hcur.reshape((b, frames, width, h, wd))?.silu()?;
            let tr = nn::temporal_conv(w, &format!("block{i}.temporal"), &seq, pad)?
                .reshape((b * frames, width, h, wd))?;
            hcur = (hcur + tr)?;
        }
        let out = nn::conv2d(w, "out", &hcur.silu()?, 1, 1)?;
        Ok(out.reshape((b, frames, c, h, wd))?)
    }
}

/// A [`DenoiserNet`] bound to a set of weights.
pub struct NetModel<'a, W: Weights> {
    pub net: &'a DenoiserNet,
    pub weights: W,
    pub param: Parametrization,
}

impl<'a, W: Weights> NetModel<'a, W> {
    pub fn new(net: &'a DenoiserNet, weights: W, param: Parametrization) -> Self {
        Self { net, weights, param }
    }
}

impl<W: Weights> ConsistencyModel for NetModel<'_, W> {
    fn parametrization(&self) -> &Parametrization {
        &self.param
    }

    fn raw(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor> {
        let out = self.net.forward(&self.weights, x, t, cond, &self.param)?;
        Ok(out.to_dtype(x.dtype())?)
    }
}

/// `F = 0`: the consistency function reduces to `c_skip(t) x`.
pub struct ZeroNet(pub Parametrization);

impl ConsistencyModel for ZeroNet {
    fn parametrization(&self) -> &Parametrization {
        &self.0
    }

    fn raw(&self, x: &Tensor, _t: &[f64], _cond: &Condition) -> Result<Tensor> {
        Ok(x.zeros_like()?)
    }
}

/// The exact consistency map of a Gaussian, dressed as a network so that
/// samplers and losses can run against ground truth.
pub struct GaussianConsistency {
    pub gaussian: GaussianAnalytic,
    pub param: Parametrization,
}

impl GaussianConsistency {
    pub fn new(gaussian: GaussianAnalytic) -> Self {
        let param = Parametrization {
            kappa: gaussian.kappa,
            ..Default::default()
        };
        Self { gaussian, param }
    }
}

impl ConsistencyModel for GaussianConsistency {
    fn parametrization(&self) -> &Parametrization {
        &self.param
    }

    fn raw(&self, x: &Tensor, t: &[f64], _cond: &Condition) -> Result<Tensor> {
        let exact = self.gaussian.consistency_batch(x, t)?;
        let skip: Vec<f64> = t.iter().map(|&v| self.param.c_skip(v)).collect();
        let inv_out: Vec<f64> = t
            .iter()
            .map(|&v| {
                let o = self.param.c_out(v);
                if o == 0.0 {
                    0.0
                } else {
                    1.0 / o
                }
            })
            .collect();
        let residual = (exact - x.broadcast_mul(&per_sample(&skip, x)?)?)?;
        Ok(residual.broadcast_mul(&per_sample(&inv_out, x)?)?)
    }

    fn apply(&self, x: &Tensor, t: &[f64], _cond: &Condition) -> Result<Tensor> {
        self.param.check_times(t)?;
        if t.iter().all(|&v| v == self.param.kappa) {
            return Ok(x.clone());
        }
        self.gaussian.consistency_batch(x, t)
    }
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamSet,
}

impl EmaState {
    pub fn new(decay: f64, init: &ParamSet) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config("distill.ema_decay", format!("{decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            shadow: init.deep_clone()?,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * theta` for every shadow entry.
    pub fn update(&mut self, theta: &ParamSet) -> Result<()> {
        ema_update(self.decay, &self.shadow, theta)
    }
}

pub fn ema_update(decay: f64, shadow: &ParamSet, theta: &ParamSet) -> Result<()> {
    for (name, s) in shadow.iter() {
        let th = theta
            .get(name)
            .map_err(|_| Error::Contract(format!("EMA: `{name}` missing from online parameters")))?;
        if th.dims() != s.dims() {
            return Err(Error::Contract(format!(
                "EMA: `{name}` shape {:?} vs {:?}",
                th.dims(),
                s.dims()
            )));
        }
        let next = if decay == 0.0 {
            th.as_tensor().copy()?
        } else if decay == 1.0 {
            continue;
        } else {
            ((s.as_tensor() * decay)? + (th.as_tensor() * (1.0 - decay))?)?
        };
        s.set(&next)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 8.0 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank deltas `scale * B A` on selected weight matrices.
///
/// Convolution kernels are treated as `(out, in * k...)` matrices.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub cfg: LoraConfig,
    pub factors: ParamSet,
    targets: Vec<(String, Vec<usize>)>,
}

impl LoraAdapter {
    /// Adapter on every rank >= 2 `.weight` of `base` accepted by `target`,
    /// with `A` random and `B` zero so the adapted network starts at `base`.
    pub fn new(
        base: &ParamSet,
        target: impl Fn(&str) -> bool,
        cfg: LoraConfig,
        rng: &mut LabRng,
    ) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::config("lora.rank", "must be positive"));
        }
        let mut spec = ParamSpec::default();
        let mut targets = Vec::new();
        for (name, var) in base.iter() {
            if !name.ends_with(".weight") || var.rank() < 2 || !target(name) {
                continue;
            }
            let dims = var.dims().to_vec();
            let out = dims[0];
            let inn: usize = dims[1..].iter().product();
            if cfg.rank > out.min(inn) {
                return Err(Error::config(
                    "lora.rank",
                    format!("rank {} exceeds min dimension {} of `{name}`", cfg.rank, out.min(inn)),
                ));
            }
            spec.push(format!("{name}.lora_a"), vec![cfg.rank, inn], Init::FanIn(inn));
            spec.push(format!("{name}.lora_b"), vec![out, cfg.rank], Init::Zeros);
            targets.push((name.to_string(), dims));
        }
        Ok(Self {
            cfg,
            factors: spec.init(rng)?,
            targets,
        })
    }

    /// Rebuild an adapter around previously saved factors.
    pub fn from_factors(base: &ParamSet, cfg: LoraConfig, factors: ParamSet) -> Result<Self> {
        let mut targets = Vec::new();
        for name in factors.names() {
            if let Some(target) = name.strip_suffix(".lora_a") {
                let dims = base.get(target)?.dims().to_vec();
                targets.push((target.to_string(), dims));
            }
        }
        Ok(Self { cfg, factors, targets })
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.targets.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_target(&self, name: &str) -> bool {
        self.targets.iter().any(|(n, _)| n == name)
    }

    /// Delta for weight `name`, shaped like the weight.
    pub fn delta(&self, name: &str) -> Result<Option<Tensor>> {
        let Some((_, dims)) = self.targets.iter().find(|(n, _)| n == name) else {
            return Ok(None);
        };
        let a = self.factors.get(&format!("{name}.lora_a"))?.as_tensor();
        let b = self.factors.get(&format!("{name}.lora_b"))?.as_tensor();
        let d = (b.matmul(a)? * self.cfg.scale())?.reshape(dims.clone())?;
        Ok(Some(d))
    }

    /// Base weights with every delta folded in.
    pub fn merge(&self, base: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, var) in base.iter() {
            let t = match self.delta(name)? {
                Some(d) => (var.as_tensor() + d)?,
                None => var.as_tensor().copy()?,
            };
            out.insert(name, &t)?;
        }
        Ok(out)
    }

    /// Inverse of [`LoraAdapter::merge`].
    pub fn unmerge(&self, merged: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, var) in merged.iter() {
            let t = match self.delta(name)? {
                Some(d) => (var.as_tensor() - d)?,
                None => var.as_tensor().copy()?,
            };
            out.insert(name, &t)?;
        }
        Ok(out)
    }
}

/// Base weights with an unmerged adapter applied on the fly.
#[derive(Clone, Copy)]
pub struct LoraView<'a> {
    pub base: &'a ParamSet,
    pub lora: Option<&'a LoraAdapter>,
}

impl Weights for LoraView<'_> {
    fn weight(&self, name: &str) -> Result<Tensor> {
        let w = self.base.weight(name)?;
        match self.lora.map(|l| l.delta(name)).transpose()?.flatten() {
            Some(d) => Ok((w + d)?),
            None => Ok(w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DEFAULT_T_MAX;

    fn small_net() -> DenoiserNet {
        DenoiserNet::new(NetConfig {
            latent_channels: 4,
            width: 8,
            blocks: 1,
            embed_dim: 6,
            fourier_features: 2,
            temporal_kernel: 3,
        })
        .unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    fn random_cond(rng: &mut LabRng, b: usize, c: usize, h: usize, w: usize, e: usize) -> Condition {
        Condition::new(
            seeds::randn(rng, (b, c, h, w), DType::F32).unwrap(),
            seeds::randn(rng, (b, e), DType::F32).unwrap(),
        )
    }

    #[test]
    fn boundary_coefficients_are_exact() {
        let p = Parametrization::default();
        assert_eq!(p.c_skip(p.kappa), 1.0);
        assert_eq!(p.c_out(p.kappa), 0.0);
        assert!(p.c_skip(DEFAULT_T_MAX) < 1e-4);
    }

    #[test]
    fn boundary_identity_is_bitwise() {
        let net = small_net();
        let mut rng = seeds::rng_from(4);
        // every entry random, so F is far from zero
        let mut spec = ParamSpec::default();
        for (n, shape, _) in net.spec().entries() {
            spec.push(n.clone(), shape.clone(), Init::FanIn(4));
        }
        let params = spec.init(&mut rng).unwrap();
        let model = NetModel::new(&net, &params, Parametrization::default());
        let x = seeds::randn(&mut rng, (2, 3, 4, 4, 4), DType::F32).unwrap();
        let cond = random_cond(&mut rng, 2, 4, 4, 4, 6);
        let out = consistency_apply(&model, &x, DEFAULT_KAPPA, &cond).unwrap();
        assert_eq!(flat(&out), flat(&x));
        assert!(matches!(
            consistency_apply(&model, &x, 0.001, &cond),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_network_gives_skip_scaling() {
        let p = Parametrization::default();
        let x = Tensor::new(&[[1.0f32, -2.0]], &Device::Cpu).unwrap();
        let out = consistency_apply(&ZeroNet(p), &x, 1.3, &Condition::none()).unwrap();
        let s = p.c_skip(1.3) as f32;
        assert_eq!(flat(&out), vec![s, -2.0 * s]);
    }

    #[test]
    fn output_shape_matches_input() {
        let net = small_net();
        let mut rng = seeds::rng_from(1);
        let params = net.init(&mut rng).unwrap();
        let model = NetModel::new(&net, &params, Parametrization::default());
        for (b, t) in [(1usize, 2usize), (3, 5)] {
            let x = seeds::randn(&mut rng, (b, t, 4, 6, 6), DType::F32).unwrap();
            let cond = random_cond(&mut rng, b, 4, 6, 6, 6);
            let ts: Vec<f64> = (0..b).map(|i| 0.5 + i as f64).collect();
            assert_eq!(model.apply(&x, &ts, &cond).unwrap().dims(), x.dims());
        }
    }

    #[test]
    fn gaussian_consistency_matches_exact_map() {
        let g = GaussianAnalytic::new(vec![0.2, -0.4], vec![0.5, 2.0], DEFAULT_KAPPA).unwrap();
        let cf = GaussianConsistency::new(g.clone());
        let x = Tensor::new(&[[3.0f64, -1.0], [0.5, 0.25]], &Device::Cpu).unwrap();
        let via_raw = cf.parametrization().combine(&x, &[4.0, 9.0], &cf.raw(&x, &[4.0, 9.0], &Condition::none()).unwrap()).unwrap();
        let exact = g.consistency_batch(&x, &[4.0, 9.0]).unwrap();
        let a = via_raw.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = exact.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_embedding_is_deterministic_and_distinct() {
        let enc = ConditionEncoder::new((4, 3, 3), 8, 17).unwrap();
        let zero = Tensor::zeros((1, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let a = flat(&enc.embed(&zero).unwrap());
        assert_eq!(a, flat(&enc.embed(&zero).unwrap()));
        assert!(a.iter().any(|&v| v != 0.0));
        assert!(flat(&enc.zero_embedding(1).unwrap()).iter().all(|&v| v == 0.0));

        let mut rng = seeds::rng_from(2);
        let frames = seeds::uniform(&mut rng, (100, 4, 3, 3), 0.0, 1.0).unwrap();
        let emb: Vec<Vec<f32>> = (0..100)
            .map(|i| flat(&enc.embed(&frames.narrow(0, i, 1).unwrap()).unwrap()))
            .collect();
        for i in 0..100 {
            for j in i + 1..100 {
                assert_ne!(emb[i], emb[j]);
            }
        }
        let wrong = Tensor::zeros((1, 4, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.embed(&wrong), Err(Error::Contract(_))));
    }

    fn scalar_set(v: f32) -> ParamSet {
        let mut s = ParamSet::new();
        s.insert("p", &Tensor::new(&[v], &Device::Cpu).unwrap()).unwrap();
        s
    }

    #[test]
    fn ema_examples() {
        let mut ema = EmaState::new(0.95, &scalar_set(1.0)).unwrap();
        ema.update(&scalar_set(0.0)).unwrap();
        assert_eq!(flat(ema.shadow.get("p").unwrap().as_tensor()), vec![0.95f32]);

        let mut ema = EmaState::new(0.0, &scalar_set(3.0)).unwrap();
        ema.update(&scalar_set(-7.5)).unwrap();
        assert_eq!(flat(ema.shadow.get("p").unwrap().as_tensor()), vec![-7.5f32]);

        let mut ema = EmaState::new(1.0, &scalar_set(3.0)).unwrap();
        ema.update(&scalar_set(-7.5)).unwrap();
        assert_eq!(flat(ema.shadow.get("p").unwrap().as_tensor()), vec![3.0f32]);

        let mut other = ParamSet::new();
        other.insert("p", &Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(ema.update(&other), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_lora_matches_base_and_round_trips() {
        let net = small_net();
        let mut rng = seeds::rng_from(8);
        let base = net.init(&mut rng).unwrap();
        let lora = LoraAdapter::new(&base, |_| true, LoraConfig { rank: 2, alpha: 2.0 }, &mut rng).unwrap();
        let x = seeds::randn(&mut rng, (2, 3, 4, 4, 4), DType::F32).unwrap();
        let cond = random_cond(&mut rng, 2, 4, 4, 4, 6);
        let p = Parametrization::default();
        let plain = NetModel::new(&net, &base, p).raw(&x, &[1.0, 2.0], &cond).unwrap();
        let view = LoraView { base: &base, lora: Some(&lora) };
        let adapted = NetModel::new(&net, view, p).raw(&x, &[1.0, 2.0], &cond).unwrap();
        assert_eq!(flat(&plain), flat(&adapted));

        // non-zero B, then merge and unmerge
        for name in lora.factors.names().filter(|n| n.ends_with(".lora_b")).collect::<Vec<_>>() {
            let v = lora.factors.get(name).unwrap();
            v.set(&seeds::randn(&mut rng, v.dims(), DType::F32).unwrap()).unwrap();
        }
        let merged = lora.merge(&base).unwrap();
        let restored = lora.unmerge(&merged).unwrap();
        for (name, var) in base.iter() {
            let a = flat(var.as_tensor());
            let b = flat(restored.get(name).unwrap().as_tensor());
            let norm = a.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let diff = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f32>().sqrt();
            assert!(diff / norm <= 1e-6, "{name}: {}", diff / norm);
        }
    }

    #[test]
    fn lora_rank_above_min_dim_is_rejected() {
        let mut base = ParamSet::new();
        base.insert("l.weight", &Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let r = LoraAdapter::new(&base, |_| true, LoraConfig { rank: 4, alpha: 1.0 }, &mut seeds::rng_from(0));
        assert!(matches!(r, Err(Error::Config { .. })));
    }
}
