//! Decoder-free video discriminator working directly on latents.
//!
//! Latents are lifted to pixel resolution by a learned 1x1 projection and a
//! sub-pixel shuffle, passed frame-by-frame through a frozen convolutional
//! backbone, and scored by small trainable heads: 2D heads per frame and 1D
//! heads across frames, one pair per backbone level.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamSet, ParamSpec, Weights};
use crate::seeds::{self, LabRng};
use crate::toyworld::{self, ToyVideoConfig};

/// Weights whose values are used as constants: no gradient reaches them.
pub struct Frozen<'a>(pub &'a ParamSet);

impl Weights for Frozen<'_> {
    fn weight(&self, name: &str) -> Result<Tensor> {
        Ok(self.0.get(name)?.as_tensor().detach())
    }
}

/// `(n, c r^2, h, w) -> (n, c, h r, w r)`; channel `c r^2 + i r + j` lands at
/// offset `(i, j)` inside each `r x r` block.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, cr, h, w) = x.dims4()?;
    if cr % (r * r) != 0 {
        return Err(Error::Contract(format!("{cr} channels not divisible by r^2 = {}", r * r)));
    }
    let c = cr / (r * r);
    Ok(x.reshape(vec![n, c, r, r, h, w])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .reshape((n, c, h * r, w * r))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `ReLU(1 - D(fake))`.
    #[default]
    Hinge,
    /// `-D(fake)`.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub upsample_factor: usize,
    pub pixel_channels: usize,
    /// Channel width of each backbone level; every level halves resolution.
    pub levels: Vec<usize>,
    pub temporal_kernel: usize,
    pub generator_loss: GeneratorLoss,
    pub lr: f64,
    pub backbone_steps: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            upsample_factor: 4,
            pixel_channels: 3,
            levels: vec![8, 16, 32],
            temporal_kernel: 3,
            generator_loss: GeneratorLoss::Hinge,
            lr: 2e-4,
            backbone_steps: 300,
            backbone_batch: 32,
            backbone_lr: 3e-3,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.upsample_factor == 0 || self.levels.is_empty() {
            return Err(Error::config("discriminator.levels", "need r >= 1 and at least one level"));
        }
        if self.temporal_kernel == 0 {
            return Err(Error::config("discriminator.temporal_kernel", "must be positive"));
        }
        Ok(())
    }
}

/// Frozen per-frame feature pyramid.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub levels: Vec<usize>,
    pub pixel_channels: usize,
    pub params: ParamSet,
}

impl Backbone {
    fn spec(levels: &[usize], pixel_channels: usize, classes: usize) -> ParamSpec {
        let mut s = ParamSpec::default();
        let mut c_in = pixel_channels;
        for (i, &c) in levels.iter().enumerate() {
            s.conv2d(&format!("level{i}"), c_in, c, 3);
            c_in = c;
        }
        s.linear("classifier", c_in, classes);
        s
    }

    /// Feature maps of every level for frames `(n, c, h, w)` in `[-1, 1]`.
    pub fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let w = Frozen(&self.params);
        Self::features_with(&w, self.levels.len(), frames)
    }

    fn features_with(w: &dyn Weights, levels: usize, frames: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = frames.clone();
        let mut out = Vec::with_capacity(levels);
        for i in 0..levels {
            h = nn::leaky_relu(&nn::conv2d(w, &format!("level{i}"), &h, 1, 2)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Clip embedding: every level mean-pooled over space and frames, concatenated.
    ///
    /// `clips` are pixels `(b, t, c, h, w)` in `[0, 1]`.
    pub fn embed_clips(&self, clips: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = clips.dims5()?;
        let frames = clips
            .to_dtype(DType::F32)?
            .reshape((b * t, c, h, w))?
            .affine(2.0, -1.0)?;
        let pooled = self
            .features(&frames)?
            .into_iter()
            .map(|f| {
                let ch = f.dim(1)?;
                Ok(f.mean_keepdim(3)?
                    .mean_keepdim(2)?
                    .reshape((b, t, ch))?
                    .mean(1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    /// Briefly train the pyramid to classify toy frames (shape kind x
    /// quadrant), at both pixel resolution and `scale` times it, then freeze.
    /// Returns the backbone and its final training accuracy.
    pub fn pretrain(
        cfg: &DiscConfig,
        toy: &ToyVideoConfig,
        scale: usize,
        rng: &mut LabRng,
    ) -> Result<(Self, f64)> {
        cfg.validate()?;
        let classes = toyworld::label_count(toy);
        let params = Self::spec(&cfg.levels, cfg.pixel_channels, classes).init(rng)?;
        let scaled = ToyVideoConfig {
            height: toy.height * scale,
            width: toy.width * scale,
            min_half_size: toy.min_half_size * scale,
            max_half_size: toy.max_half_size * scale,
            ..toy.clone()
        };
        let mut opt = nn::adam(params.all_vars(), cfg.backbone_lr)?;
        let mut correct_recent = Vec::new();
        for step in 0..cfg.backbone_steps {
            let frame_cfg = if step % 2 == 0 { toy } else { &scaled };
            let mut frames = Vec::with_capacity(cfg.backbone_batch);
            let mut labels = Vec::with_capacity(cfg.backbone_batch);
            for _ in 0..cfg.backbone_batch {
                let (f, l) = toyworld::labelled_frame(frame_cfg, rng)?;
                frames.push(f);
                labels.push(l);
            }
            let x = Tensor::stack(&frames, 0)?.affine(2.0, -1.0)?;
            let feats = Self::features_with(&params, cfg.levels.len(), &x)?;
            let last = feats.last().expect("at least one level");
            let pooled = last.mean(3)?.mean(2)?;
            let logits = nn::linear(&params, "classifier", &pooled)?;
            let loss = nn::cross_entropy(&logits, &labels)?;
            let lv = loss.to_scalar::<f32>()?;
            if !lv.is_finite() {
                return Err(Error::Numerical {
                    step,
                    msg: "backbone pretraining loss is not finite".into(),
                });
            }
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
            if step + 20 >= cfg.backbone_steps {
                let pred = logits.argmax(1)?.to_vec1::<u32>()?;
                correct_recent.extend(pred.iter().zip(&labels).map(|(p, l)| (p == l) as u32 as f64));
            }
        }
        let acc = if correct_recent.is_empty() {
            0.0
        } else {
            correct_recent.iter().sum::<f64>() / correct_recent.len() as f64
        };
        Ok((
            Self {
                levels: cfg.levels.clone(),
                pixel_channels: cfg.pixel_channels,
                params,
            },
            acc,
        ))
    }

    pub fn from_params(cfg: &DiscConfig, params: ParamSet) -> Result<Self> {
        for i in 0..cfg.levels.len() {
            let w = params.get(&format!("level{i}.weight"))?;
            if w.dims()[0] != cfg.levels[i] {
                return Err(Error::Contract(format!(
                    "backbone level {i} has {} channels, config says {}",
                    w.dims()[0],
                    cfg.levels[i]
                )));
            }
        }
        Ok(Self {
            levels: cfg.levels.clone(),
            pixel_channels: cfg.pixel_channels,
            params,
        })
    }
}

/// Trainable upsampler + heads on top of a frozen backbone.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscConfig,
    pub latent_channels: usize,
    pub backbone: Backbone,
    /// Upsampler projection and head parameters: the only trainable part.
    pub heads: ParamSet,
}

impl Discriminator {
    pub fn head_spec(cfg: &DiscConfig, latent_channels: usize) -> ParamSpec {
        let r = cfg.upsample_factor;
        let mut s = ParamSpec::default();
        s.conv2d("up.proj", latent_channels, cfg.pixel_channels * r * r, 1);
        for (i, &c) in cfg.levels.iter().enumerate() {
            s.conv2d(&format!("spatial{i}.conv"), c, c, 3);
            s.conv2d(&format!("spatial{i}.out"), c, 1, 1);
            s.conv1d(&format!("temporal{i}.conv"), c, c, cfg.temporal_kernel);
            s.conv1d(&format!("temporal{i}.out"), c, 1, 1);
        }
        s
    }

    pub fn new(cfg: DiscConfig, latent_channels: usize, backbone: Backbone, rng: &mut LabRng) -> Result<Self> {
        cfg.validate()?;
        let heads = Self::head_spec(&cfg, latent_channels).init(rng)?;
        Ok(Self {
            cfg,
            latent_channels,
            backbone,
            heads,
        })
    }

    /// `(b, t, c, h, w) -> (b, t, c', r h, r w)` with `c' = pixel_channels`.
    pub fn upsample_latent(&self, l: &Tensor) -> Result<Tensor> {
        upsample_latent(&self.heads, "up.proj", l, self.cfg.upsample_factor)
    }

    /// One logit per clip: the mean over every spatial and temporal head map.
    pub fn discriminate(&self, l: &Tensor) -> Result<Tensor> {
        let (b, t, _, _, _) = l.dims5()?;
        if t < self.cfg.temporal_kernel {
            return Err(Error::config(
                "discriminator.temporal_kernel",
                format!("{t} frames is shorter than the temporal kernel {}", self.cfg.temporal_kernel),
            ));
        }
        let up = self.upsample_latent(l)?;
        let (_, _, c, h, w) = up.dims5()?;
        let feats = self.backbone.features(&up.reshape((b * t, c, h, w))?)?;
        let mut per_head = Vec::with_capacity(2 * feats.len());
        for (i, f) in feats.iter().enumerate() {
            let (_, fc, fh, fw) = f.dims4()?;
            let s = nn::conv2d(&self.heads, &format!("spatial{i}.conv"), f, 1, 1)?;
            let s = nn::conv2d(&self.heads, &format!("spatial{i}.out"), &nn::leaky_relu(&s)?, 0, 1)?;
            per_head.push(s.reshape((b, t * fh * fw))?.mean(1)?);

            let seq = f.reshape((b, t, fc, fh, fw))?;
            let tm = nn::temporal_conv(&self.heads, &format!("temporal{i}.conv"), &seq, 0)?;
            let tm = nn::temporal_conv(&self.heads, &format!("temporal{i}.out"), &nn::leaky_relu(&tm)?, 0)?;
            let steps = tm.dim(1)?;
            per_head.push(tm.reshape((b, fh * fw * steps))?.mean(1)?);
        }
        Ok(Tensor::stack(&per_head, 1)?.mean(1)?)
    }

    pub fn generator_loss(&self, fake_logit: &Tensor) -> Result<Tensor> {
        match self.cfg.generator_loss {
            GeneratorLoss::Hinge => g_hinge_loss(fake_logit),
            GeneratorLoss::Negative => Ok(fake_logit.mean_all()?.neg()?),
        }
    }
}

pub fn upsample_latent(w: &dyn Weights, proj: &str, l: &Tensor, r: usize) -> Result<Tensor> {
    let (b, t, c, h, wd) = l.dims5()?;
    let flat = l.to_dtype(DType::F32)?.reshape((b * t, c, h, wd))?;
    let projected = nn::conv2d(w, proj, &flat, 0, 1)?;
    let up = pixel_shuffle(&projected, r)?;
    let (_, c2, h2, w2) = up.dims4()?;
    Ok(up.reshape((b, t, c2, h2, w2))?)
}

/// `mean ReLU(1 - real) + mean ReLU(1 + fake)`.
pub fn d_hinge_loss(real_logit: &Tensor, fake_logit: &Tensor) -> Result<Tensor> {
    let real = real_logit.neg()?.affine(1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_logit.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// `mean ReLU(1 - fake)`.
pub fn g_hinge_loss(fake_logit: &Tensor) -> Result<Tensor> {
    Ok(fake_logit.neg()?.affine(1.0, 1.0)?.relu()?.mean_all()?)
}

/// Stand-alone seeded discriminator for tests and tools that need no
/// trained backbone.
pub fn untrained(cfg: DiscConfig, latent_channels: usize, seed: u64) -> Result<Discriminator> {
    let mut rng = seeds::rng_from(seed);
    let params = Backbone::spec(&cfg.levels, cfg.pixel_channels, 1).init(&mut rng)?;
    let backbone = Backbone::from_params(&cfg, params)?;
    Discriminator::new(cfg, latent_channels, backbone, &mut rng)
}

pub fn scalar_logits(values: &[f32]) -> Result<Tensor> {
    Ok(Tensor::new(values, &Device::Cpu)?)
}
