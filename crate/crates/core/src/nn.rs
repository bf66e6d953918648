//! Parameter storage, a handful of layers built from candle primitives, and Adam.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Named trainable tensors. Iteration order is the sorted name order, which
/// keeps hashing, saving and optimizer updates deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Returns the parameter, creating it with `init` if absent. Each
    /// parameter draws from its own stream keyed by `(seed, name)`.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let u = Uniform::new_inclusive(-b, b);
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
            Init::Normal(sd) => {
                let d = Normal::new(0.0, sd).expect("valid sigma");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.num_params_with_prefix("")
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn hash_with_prefix(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn hash(&self) -> Result<String> {
        self.hash_with_prefix("")
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }

    /// Overwrites values of parameters present in `path`; unknown names are
    /// added. Returns the names that were loaded.
    pub fn load(&mut self, path: &Path) -> Result<Vec<String>> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.load_map(map, "")
    }

    /// Loads only the parameters whose name starts with `prefix`.
    pub fn load_prefix(&mut self, path: &Path, prefix: &str) -> Result<Vec<String>> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.load_map(map, prefix)
    }

    fn load_map(&mut self, map: HashMap<String, Tensor>, prefix: &str) -> Result<Vec<String>> {
        let mut names: Vec<_> = map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        names.sort();
        for name in &names {
            let t = map[name].to_dtype(self.dtype)?;
            match self.vars.get(name) {
                Some(v) => {
                    if v.dims() != t.dims() {
                        return Err(Error::Shape(format!(
                            "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                            t.dims(),
                            v.dims()
                        )));
                    }
                    v.set(&t)?;
                }
                None => {
                    self.vars.insert(name.clone(), Var::from_tensor(&t)?);
                }
            }
        }
        Ok(names)
    }
}

/// Dense layer, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Ok(Self {
            weight: ps.get(&format!("{name}.weight"), &[d_in, d_out], Init::Uniform(bound))?,
            bias: Some(ps.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar") = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.get(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.get(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Gated linear unit over the last dimension.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let d = x.dim(D::Minus1)? / 2;
    let a = x.narrow(D::Minus1, 0, d)?;
    let b = x.narrow(D::Minus1, d, d)?;
    Ok(a.mul(&sigmoid(&b)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 500,
            grad_clip: 5.0,
        }
    }
}

impl AdamConfig {
    /// Linear warmup to `lr`, then inverse square-root decay. `step` is 1-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.lr * (step / warm).min((warm / step).sqrt())
    }
}

/// Adam whose moments live in named tensors so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter in `ps` whose name passes `trainable`.
    /// Returns the pre-clip global gradient norm.
    pub fn update(
        &mut self,
        ps: &ParamStore,
        grads: &candle_core::backprop::GradStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let mut live = Vec::new();
        let mut sq = 0.0;
        for (name, var) in ps.iter() {
            if !trainable(name) {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar_f64(&g.sqr()?.sum_all()?)?;
                live.push((name, var, g));
            }
        }
        let norm = sq.sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, var, g) in live {
            // Gradients carry the backward graph; detach so the moments don't
            // keep every step's activations alive.
            let g = (g.detach() * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.cfg.eps)?;
            let delta = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (delta * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.state_tensors(), path)?;
        Ok(())
    }

    pub fn load(cfg: AdamConfig, step: usize, path: &Path) -> Result<Self> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut a = Adam::new(cfg);
        a.step = step;
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m.") {
                a.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                a.v.insert(name.to_string(), t);
            }
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::new(DType::F32, 5);
        let mut b = ParamStore::new(DType::F32, 5);
        a.get("x", &[3, 4], Init::Normal(1.0)).unwrap();
        a.get("y", &[2], Init::Normal(1.0)).unwrap();
        b.get("y", &[2], Init::Normal(1.0)).unwrap();
        b.get("x", &[3, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert!(a.get("x", &[4, 3], Init::Zeros).is_err());
        assert_eq!(a.num_params(), 14);
    }

    #[test]
    fn save_load_is_bit_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new(DType::F32, 1);
        Linear::new(&mut a, "l", 5, 3).unwrap();
        a.save(&dir.path().join("p.safetensors")).unwrap();
        let mut b = ParamStore::new(DType::F32, 99);
        Linear::new(&mut b, "l", 5, 3).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        b.load(&dir.path().join("p.safetensors")).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.save(&dir.path().join("q.safetensors")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("p.safetensors")).unwrap(),
            std::fs::read(dir.path().join("q.safetensors")).unwrap()
        );
    }

    #[test]
    fn layer_norm_statistics() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&mut ps, "ln", 6).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 9.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 6.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let x = Tensor::new(&[[0.5f64, -1.0, 2.0], [3.0, 3.0, 3.0]], &Device::Cpu).unwrap();
        let p = softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        let lp = log_softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        for r in 0..2 {
            assert!((p[r].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..3 {
                assert!((p[r][c].ln() - lp[r][c]).abs() < 1e-12);
            }
        }
        assert!((p[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_then_inverse_sqrt() {
        let c = AdamConfig {
            lr: 1.0,
            warmup_steps: 100,
            ..Default::default()
        };
        assert!((c.lr_at(50) - 0.5).abs() < 1e-12);
        assert!((c.lr_at(100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(400) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let w = ps.get("w", &[3], Init::Zeros).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            warmup_steps: 1,
            ..Default::default()
        });
        for _ in 0..300 {
            let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.update(&ps, &g, |_| true).unwrap();
        }
        let got = w.to_vec1::<f64>().unwrap();
        for (g, t) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - t).abs() < 1e-2, "{got:?}");
        }
    }
}
