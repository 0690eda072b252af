//! Named parameter sets and the handful of functional layers the networks use.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::seeds::LabRng;

/// Resolves a parameter tensor by name.
pub trait Weights {
    fn weight(&self, name: &str) -> Result<Tensor>;
}

impl<W: Weights + ?Sized> Weights for &W {
    fn weight(&self, name: &str) -> Result<Tensor> {
        (**self).weight(name)
    }
}

/// Ordered map of named trainable variables.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<Var> {
        let var = Var::from_tensor(&tensor.to_dtype(DType::F32)?)?;
        self.vars.insert(name.into(), var.clone());
        Ok(var)
    }

    /// Register an existing variable, sharing its storage.
    pub fn insert_var(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose names satisfy `keep`, in name order.
    pub fn select(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Subset sharing storage with `self`: updates through either are visible in both.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Independent copy: new storage, new variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), &v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrite values of every variable also present in `src`.
    pub fn assign_from(&self, src: &ParamSet) -> Result<()> {
        for (k, v) in &self.vars {
            if let Ok(s) = src.get(k) {
                v.set(s.as_tensor())?;
            }
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, container: &mut Container) {
        for (k, v) in &self.vars {
            container.push(format!("{prefix}{k}"), v.as_tensor().clone());
        }
    }

    pub fn import(prefix: &str, container: &Container) -> Result<Self> {
        let mut out = Self::new();
        for (name, t) in container.with_prefix(prefix) {
            out.insert(name, t)?;
        }
        Ok(out)
    }
}

impl Weights for ParamSet {
    fn weight(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.as_tensor().clone())
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(3 / fan_in)`.
    FanIn(usize),
    Zeros,
}

/// Declarative list of parameter shapes.
#[derive(Debug, Clone, Default)]
pub struct ParamSpec {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl ParamSpec {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.entries.push((name.into(), shape, init));
    }

    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.push(format!("{name}.weight"), vec![c_out, c_in, k, k], Init::FanIn(c_in * k * k));
        self.push(format!("{name}.bias"), vec![c_out], Init::Zeros);
    }

    pub fn conv2d_zero(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.push(format!("{name}.weight"), vec![c_out, c_in, k, k], Init::Zeros);
        self.push(format!("{name}.bias"), vec![c_out], Init::Zeros);
    }

    pub fn conv1d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.push(format!("{name}.weight"), vec![c_out, c_in, k], Init::FanIn(c_in * k));
        self.push(format!("{name}.bias"), vec![c_out], Init::Zeros);
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.push(format!("{name}.weight"), vec![d_out, d_in], Init::FanIn(d_in));
        self.push(format!("{name}.bias"), vec![d_out], Init::Zeros);
    }

    pub fn entries(&self) -> &[(String, Vec<usize>, Init)] {
        &self.entries
    }

    pub fn init(&self, rng: &mut LabRng) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (name, shape, init) in &self.entries {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match *init {
                Init::Zeros => vec![0.0; n],
                Init::FanIn(fan_in) => {
                    let bound = (3.0 / fan_in.max(1) as f64).sqrt() as f32;
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
            };
            set.insert(name.clone(), &Tensor::from_vec(data, shape.clone(), &Device::Cpu)?)?;
        }
        Ok(set)
    }
}

pub fn conv2d(w: &dyn Weights, name: &str, x: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?;
    let bias = w.weight(&format!("{name}.bias"))?;
    crate::unfold::conv2d(x, &weight, &bias, stride, padding)
}

pub fn conv1d(w: &dyn Weights, name: &str, x: &Tensor, padding: usize) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?;
    let bias = w.weight(&format!("{name}.bias"))?;
    let y = x.conv1d(&weight, padding, 1, 1, 1)?;
    Ok(y.broadcast_add(&bias.reshape((1, (), 1))?)?)
}

/// 1D convolution over the frame axis of `(b, t, c, h, w)` with a
/// `(c_out, c_in, k)` kernel, as one unfold and one matmul (much faster
/// than a per-pixel `conv1d`, forward and backward).
pub fn temporal_conv(w: &dyn Weights, name: &str, x: &Tensor, padding: usize) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?;
    let bias = w.weight(&format!("{name}.bias"))?;
    let (c_out, c_in, k) = weight.dims3()?;
    let (b, t, c, h, wd) = x.dims5()?;
    if t + 2 * padding < k {
        return Err(crate::error::Error::Contract(format!("{t} frames is shorter than kernel {k}")));
    }
    let t_out = t + 2 * padding + 1 - k;
    // Frames become the rows of a (t, h * w) image convolved by a (k, 1) kernel.
    let img = x.permute((0, 2, 1, 3, 4))?.reshape((b, c, t, h * wd))?;
    let cols = crate::unfold::unfold(&img, (k, 1), (1, 1), (padding, 0))?;
    let wm = weight.reshape((c_out, c_in * k))?;
    let y = wm.matmul(&cols)?.broadcast_add(&bias.reshape((c_out, 1))?)?;
    Ok(y.reshape((c_out, b, t_out, h, wd))?.permute((1, 2, 0, 3, 4))?)
}

/// `x @ W^T + b` over the last axis of a rank-2 input.
pub fn linear(w: &dyn Weights, name: &str, x: &Tensor) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?;
    let bias = w.weight(&format!("{name}.bias"))?;
    Ok(x.matmul(&weight.t()?)?.broadcast_add(&bias)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.2)?)
}

/// Mean cross-entropy of `logits (n, k)` against integer `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let targets = Tensor::new(labels, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &targets)?)
}

/// Adam without weight decay over `vars`.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    let params = candle_nn::ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn spec_init_is_seeded_and_shaped() {
        let mut spec = ParamSpec::default();
        spec.conv2d("c", 3, 4, 3);
        spec.linear("l", 5, 2);
        let a = spec.init(&mut seeds::rng_from(1)).unwrap();
        let b = spec.init(&mut seeds::rng_from(1)).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_eq!(a.get("c.weight").unwrap().dims(), &[4, 3, 3, 3]);
        assert_eq!(a.element_count(), 4 * 27 + 4 + 10 + 2);
    }

    #[test]
    fn temporal_conv_matches_per_pixel_conv1d() {
        let mut spec = ParamSpec::default();
        spec.conv1d("tc", 4, 5, 3);
        let w = spec.init(&mut seeds::rng_from(3)).unwrap();
        let x = seeds::randn(&mut seeds::rng_from(4), (2, 6, 4, 3, 2), DType::F32).unwrap();
        for pad in [0, 1] {
            let fast = temporal_conv(&w, "tc", &x, pad).unwrap();
            let seq = x.permute((0, 3, 4, 2, 1)).unwrap().reshape((2 * 3 * 2, 4, 6)).unwrap();
            let t_out = 6 + 2 * pad - 2;
            let slow = conv1d(&w, "tc", &seq, pad)
                .unwrap()
                .reshape((2, 3, 2, 5, t_out))
                .unwrap()
                .permute((0, 4, 3, 1, 2))
                .unwrap();
            assert_eq!(fast.dims(), slow.dims());
            let diff = (fast - slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-5, "pad {pad}: {diff}");
        }
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut spec = ParamSpec::default();
        spec.linear("l", 3, 3);
        let a = spec.init(&mut seeds::rng_from(2)).unwrap();
        let b = a.deep_clone().unwrap();
        let before = a.checksum().unwrap();
        b.get("l.weight")
            .unwrap()
            .set(&Tensor::zeros((3, 3), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(a.checksum().unwrap(), before);
        assert_ne!(b.checksum().unwrap(), before);
    }
}
