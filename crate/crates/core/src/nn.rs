//! Parameter storage and the small set of layers both networks are built
//! from. Initialisation draws from the counter-based RNG keyed by parameter
//! name, so a model built twice with the same seed is bit-identical.

use std::collections::BTreeMap;
use std::fmt::Display;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{MmgtError, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Uniform(f64),
    Values(Vec<f64>),
}

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(MmgtError::invalid(format!("duplicate parameter '{name}'")));
        }
        let numel: usize = shape.iter().product();
        let mut rng = CounterRng::labeled(self.seed, &name);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Normal(std) => (0..numel).map(|_| std * rng.normal()).collect(),
            Init::Uniform(b) => (0..numel).map(|_| b * (2.0 * rng.uniform() - 1.0)).collect(),
            Init::Values(v) => {
                if v.len() != numel {
                    return Err(MmgtError::shape(format!(
                        "initial values for '{name}' have {} elements, shape needs {numel}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; every layer holding it sees the change.
    pub fn assign(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| MmgtError::invalid(format!("unknown parameter '{name}'")))?;
        if var.elem_count() != values.len() {
            return Err(MmgtError::shape(format!(
                "parameter '{name}' has {} elements, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn assign_tensor(&self, name: &str, values: &Tensor) -> Result<()> {
        let v: Vec<f32> = values.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        self.assign(name, &v)
    }

    /// Parameter values as f32, for checkpoints.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let data: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                Ok((name.clone(), var.dims().to_vec(), data))
            })
            .collect()
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Flattens all leading axes, applies `f` to the resulting matrix and
/// restores them.
fn on_rows(x: &Tensor, out_dim: usize, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| MmgtError::shape("scalar input to a row-wise layer"))?;
    let rows = x.elem_count() / last.max(1);
    let y = f(&x.reshape((rows, last))?)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: Some(scope.param("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn zeros(scope: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[out_dim, in_dim], Init::Zeros)?,
            bias: Some(scope.param("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn no_bias(scope: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn with_init(scope: &mut Scope, in_dim: usize, out_dim: usize, weight: Init, bias: Init) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[out_dim, in_dim], weight)?,
            bias: Some(scope.param("bias", &[out_dim], bias)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        on_rows(x, self.out_dim(), |m| {
            let y = m.matmul(&self.weight.t()?)?;
            Ok(match &self.bias {
                Some(b) => y.broadcast_add(b)?,
                None => y,
            })
        })
    }
}

/// Normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: scope.param("gain", &[dim], Init::Const(1.0))?,
            shift: scope.param("shift", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Group normalisation for `B x C x H x W` feature maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &mut Scope, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(MmgtError::invalid(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gain: scope.param("gain", &[channels], Init::Const(1.0))?,
            shift: scope.param("shift", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        let gain = self.gain.reshape((1, c, 1, 1))?;
        let shift = self.shift.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gain)?.broadcast_add(&shift)?)
    }
}

/// Same-padded, stride-1 square convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(scope: &mut Scope, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self::with_init(scope, in_ch, out_ch, kernel, Init::Uniform(bound))
    }

    pub fn zeros(scope: &mut Scope, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Self::with_init(scope, in_ch, out_ch, kernel, Init::Zeros)
    }

    fn with_init(scope: &mut Scope, in_ch: usize, out_ch: usize, kernel: usize, init: Init) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(MmgtError::invalid("convolution kernels must be odd"));
        }
        Ok(Self {
            weight: scope.param("weight", &[out_ch, in_ch, kernel, kernel], init)?,
            bias: scope.param("bias", &[out_ch], Init::Zeros)?,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims()[0];
        let y = if self.padding == 0 {
            // 1x1: a matmul over channels is much cheaper than im2col.
            let (b, c, h, w) = x.dims4()?;
            let rows = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
            let w2 = self.weight.reshape((out_ch, c))?;
            rows.matmul(&w2.t()?)?
                .reshape((b, h, w, out_ch))?
                .permute((0, 3, 1, 2))?
                .contiguous()?
        } else {
            x.conv2d(&self.weight, self.padding, 1, 1, 1)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x / (x.neg()?.exp()? + 1.0)?)?)
}

/// Softmax over the last axis. The fused candle-nn kernel has no backward
/// pass, so this uses the composite form.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs. The output projection is zero-initialised so a residual branch
/// starts as the identity.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(scope: &mut Scope, query_dim: usize, kv_dim: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MmgtError::invalid(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::no_bias(&mut scope.sub("q"), query_dim, dim)?,
            k: Linear::no_bias(&mut scope.sub("k"), kv_dim, dim)?,
            v: Linear::no_bias(&mut scope.sub("v"), kv_dim, dim)?,
            out: Linear::zeros(&mut scope.sub("out"), dim, query_dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention probabilities `B x H x Nq x Nk`.
    pub fn weights(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let dk = q.dim(D::Minus1)? as f64;
        let scores = (q.matmul(&k.t()?)? / dk.sqrt())?;
        softmax_last(&scores)
    }

    /// `softmax(Q K^T / sqrt(d_k)) V`, heads concatenated, before the output
    /// projection.
    pub fn attend(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, nq, _) = query.dims3()?;
        let (bk, _, _) = context.dims3()?;
        if b != bk {
            return Err(MmgtError::shape(format!(
                "query batch {b} differs from context batch {bk}"
            )));
        }
        let weights = self.weights(query, context)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let y = weights.matmul(&v)?;
        let dim = self.v.out_dim();
        Ok(y.transpose(1, 2)?.contiguous()?.reshape((b, nq, dim))?)
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.attend(query, context)?)
    }
}

/// Sinusoidal features for scalar inputs (diffusion timesteps): `B -> B x dim`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            out.push(if i < half { (tv * freq).cos() } else { (tv * freq).sin() });
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal position table `len x dim`, flattened row-major.
pub fn sinusoid_table(len: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

/// Errors out if any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: &'static str) -> Result<()> {
    let s = x.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(MmgtError::NonFinite(what))
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-positive `max_norm` disables it.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(MmgtError::NonFinite("gradient norm"));
    }
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * k)?);
            }
        }
    }
    Ok(norm)
}

/// Mean of all elements as f64.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.mean(0)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_reproducible() {
        let mut a = ParamStore::new(3, DType::F64);
        let mut b = ParamStore::new(3, DType::F64);
        let la = Linear::new(&mut a.root().sub("x"), 4, 5).unwrap();
        // different creation order must not change values
        let _ = Linear::new(&mut b.root().sub("y"), 2, 2).unwrap();
        let lb = Linear::new(&mut b.root().sub("x"), 4, 5).unwrap();
        let va: Vec<f64> = la.weight.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = lb.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0, DType::F32);
        let mut root = s.root();
        root.param("a", &[1], Init::Zeros).unwrap();
        assert!(root.param("a", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn assign_is_visible_through_layers() {
        let mut s = ParamStore::new(0, DType::F32);
        let lin = Linear::new(&mut s.root().sub("l"), 2, 1).unwrap();
        s.assign("l.weight", &[1.0, 2.0]).unwrap();
        s.assign("l.bias", &[0.5]).unwrap();
        let x = Tensor::new(&[[1f32, 1.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f32>> = lin.forward(&x).unwrap().to_vec2().unwrap();
        assert_eq!(y, vec![vec![3.5]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [-100.0, 0.0, 100.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_by_one_conv_matches_general_path() {
        let mut s = ParamStore::new(1, DType::F64);
        let c = Conv2d::new(&mut s.root().sub("c"), 3, 4, 1).unwrap();
        let mut rng = CounterRng::new(2, 2);
        let x = Tensor::from_vec(rng.normal_vec(2 * 3 * 5 * 5), (2, 3, 5, 5), &Device::Cpu).unwrap();
        let fast: Vec<f64> = c.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let slow = x
            .conv2d(&c.weight, 0, 1, 1, 1)
            .unwrap()
            .broadcast_add(&c.bias.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let slow: Vec<f64> = slow.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_clip_caps_joint_norm() {
        let a = Var::from_vec(vec![3.0f64, 0.0], 2, &Device::Cpu).unwrap();
        let b = Var::from_vec(vec![4.0f64], 1, &Device::Cpu).unwrap();
        let loss = (a.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap()
            + (b.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let vars = [a.clone(), b.clone()];
        let mut grads = loss.unwrap().backward().unwrap();
        assert_eq!(clip_grad_norm(&mut grads, &vars, 10.0).unwrap(), 5.0);
        assert_eq!(clip_grad_norm(&mut grads, &vars, 1.0).unwrap(), 5.0);
        let ga: Vec<f64> = grads.get(a.as_tensor()).unwrap().to_vec1().unwrap();
        let gb: Vec<f64> = grads.get(b.as_tensor()).unwrap().to_vec1().unwrap();
        assert!((ga[0] - 0.6).abs() < 1e-15 && (gb[0] - 0.8).abs() < 1e-15);
    }
}
