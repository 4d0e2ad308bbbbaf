//! Parameter storage and the small set of layers the models are built from.
//!
//! All parameters are `f64` and initialized from a seeded ChaCha stream so a
//! model is a pure function of its configuration and seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    /// Ones on the leading diagonal of a 2-D shape.
    Eye,
}

/// Named parameters in deterministic (sorted) order.
///
/// A trainable store hands out variable tensors that record gradients; a
/// frozen store hands out detached tensors, so nothing upstream of them can
/// ever be updated through it.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    trainable: bool,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: BTreeMap::new(), trainable: true, rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, trainable: bool) -> Result<Self> {
        let vars = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t.to_dtype(DTYPE)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self { vars, trainable, rng: ChaCha8Rng::seed_from_u64(0), device: Device::Cpu })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Fetch `name`, creating it with `init` on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if !self.vars.contains_key(name) {
            if !self.trainable {
                return Err(Error::Checkpoint(format!("frozen store has no parameter `{name}`")));
            }
            let count: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; count],
                Init::Ones => vec![1.0; count],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..count).map(|_| dist.sample(&mut self.rng)).collect()
                }
                Init::Uniform(b) => (0..count).map(|_| self.rng.random_range(-b..=b)).collect(),
                Init::Eye => {
                    let cols = shape.last().copied().unwrap_or(1);
                    (0..count).map(|i| if i / cols == i % cols { 1.0 } else { 0.0 }).collect()
                }
            };
            let t = Tensor::from_vec(data, shape, &self.device)?;
            self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        }
        let var = &self.vars[name];
        if var.dims() != shape {
            return Err(Error::Shape(format!("parameter `{name}` is {:?}, requested {:?}", var.dims(), shape)));
        }
        Ok(if self.trainable { var.as_tensor().clone() } else { var.as_tensor().detach() })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent frozen copy of every parameter.
    pub fn frozen_copy(&self) -> Result<Self> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_tensors(tensors, false)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect()
    }

    /// Raw bits of every parameter, for exact comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<u64>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), data.into_iter().map(f64::to_bits).collect()))
            })
            .collect()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.get(&join(prefix, "weight"), &[input, output], Init::Uniform(bound))?;
        let bias = store.get(&join(prefix, "bias"), &[output], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn no_bias(store: &mut ParamStore, prefix: &str, input: usize, output: usize, init: Init) -> Result<Self> {
        let weight = store.get(&join(prefix, "weight"), &[input, output], init)?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&join(prefix, "gamma"), &[dim], Init::Ones)?,
            beta: store.get(&join(prefix, "beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis; the max shift is a constant for autodiff.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `log(1 + e^x)`, computed stably.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // log1p(y) for y = e^-|x|; below 1e-8 the series `y` is exact to f64
    let y = x.abs()?.neg()?.exp()?;
    let small = y.lt(1e-8)?;
    let tail = small.where_cond(&y, &(&y + 1.0)?.log()?)?;
    Ok((x.relu()? + tail)?)
}

/// Sinusoidal features `(len, dim)` for the given positions.
pub fn sinusoidal(positions: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0.0f64; positions.len() * dim];
    for (r, p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data[r * dim + i] = (p * freq).sin();
            data[r * dim + half + i] = (p * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?)
}

pub fn frame_positions(len: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let pos: Vec<f64> = (0..len).map(|t| t as f64).collect();
    sinusoidal(&pos, dim, device)
}

/// Multi-head scaled dot-product attention with separate query and key/value sources.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels do not split into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &join(prefix, "q"), dim, dim)?,
            k: Linear::new(store, &join(prefix, "k"), dim, dim)?,
            v: Linear::new(store, &join(prefix, "v"), dim, dim)?,
            o: Linear::new(store, &join(prefix, "o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query (B, Nq, C)` attends over `context (B, Nk, C)`; `bias` is added
    /// to the `(B, H, Nq, Nk)` scores before the softmax.
    pub fn forward(&self, query: &Tensor, context: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, nq, c) = query.dims3()?;
        let (bk, _, ck) = context.dims3()?;
        if bk != b || ck != c {
            return Err(Error::Shape(format!("attention query {:?} vs context {:?}", query.dims(), context.dims())));
        }
        let dh = c / self.heads;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(context)?)?;
        let v = self.split(&self.v.forward(context)?)?;
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, c))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &join(prefix, "up"), dim, hidden)?,
            down: Linear::new(store, &join(prefix, "down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &join(prefix, "attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), dim)?,
            ff: FeedForward::new(store, &join(prefix, "ff"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, None)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Pre-norm transformer decoder layer: self-attention among the queries,
/// cross-attention into the memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), dim)?,
            self_attn: MultiHeadAttention::new(store, &join(prefix, "self_attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &join(prefix, "cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(store, &join(prefix, "norm3"), dim)?,
            ff: FeedForward::new(store, &join(prefix, "ff"), dim, hidden)?,
        })
    }

    pub fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(queries)?;
        let x = (queries + self.self_attn.forward(&h, &h, None)?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, None)?)?;
        let h = self.norm3.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Windowed local attention with learned, input-independent queries.
///
/// Frame `t` attends over frames `t - w/2 ..= t + (w - 1) - w/2` of its input
/// (clipped at the sequence ends) with one learned query vector per head and a
/// learned bias per relative offset. The output keeps the sequence length.
#[derive(Debug, Clone)]
pub struct LocalAttention {
    query: Tensor,
    offset_bias: Tensor,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    window: usize,
}

impl LocalAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 || window == 0 {
            return Err(Error::Config(format!("local attention with dim {dim}, {heads} heads, window {window}")));
        }
        Ok(Self {
            query: store.get(&join(prefix, "query"), &[heads, 1, dim / heads], Init::Normal(0.02))?,
            offset_bias: store.get(&join(prefix, "offset_bias"), &[heads, window], Init::Zeros)?,
            k: Linear::new(store, &join(prefix, "k"), dim, dim)?,
            v: Linear::new(store, &join(prefix, "v"), dim, dim)?,
            o: Linear::new(store, &join(prefix, "o"), dim, dim)?,
            heads,
            window,
        })
    }

    /// `(T, T)` window index per pair (or `window` outside the band) plus mask.
    fn band(&self, len: usize, device: &Device) -> Result<(Tensor, Tensor)> {
        let before = self.window / 2;
        let mut idx = Vec::with_capacity(len * len);
        let mut mask = Vec::with_capacity(len * len);
        for t in 0..len {
            for j in 0..len {
                let rel = j as i64 - t as i64 + before as i64;
                if rel >= 0 && (rel as usize) < self.window {
                    idx.push(rel as u32);
                    mask.push(0.0f64);
                } else {
                    idx.push(0);
                    mask.push(-1e30);
                }
            }
        }
        Ok((Tensor::from_vec(idx, len * len, device)?, Tensor::from_vec(mask, (len, len), device)?))
    }

    /// `x (T, C)` -> `(T, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (len, c) = x.dims2()?;
        let dh = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((len, self.heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        // (H, 1, T): one score per key frame, shared by every window covering it
        let content = (self.query.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        let (idx, mask) = self.band(len, x.device())?;
        let rel = self.offset_bias.index_select(&idx, 1)?.reshape((self.heads, len, len))?;
        let scores = rel.broadcast_add(&content)?.broadcast_add(&mask)?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.reshape((len, c))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct LocalEncoderLayer {
    norm1: LayerNorm,
    attn: LocalAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl LocalEncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        window: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), dim)?,
            attn: LocalAttention::new(store, &join(prefix, "attn"), dim, heads, window)?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), dim)?,
            ff: FeedForward::new(store, &join(prefix, "ff"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.ff.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// 1-D temporal convolution with replicate padding, `(T, Cin)` -> `(T, Cout)`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    proj: Linear,
    kernel: usize,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {kernel}")));
        }
        Ok(Self { proj: Linear::new(store, prefix, input * kernel, output)?, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let len = x.dim(0)?;
        let pad = self.kernel / 2;
        let first = x.narrow(0, 0, 1)?;
        let last = x.narrow(0, len - 1, 1)?;
        let mut parts = vec![first; pad];
        parts.push(x.clone());
        parts.extend(std::iter::repeat_n(last, pad));
        let padded = Tensor::cat(&parts, 0)?;
        let taps: Vec<Tensor> = (0..self.kernel).map(|k| padded.narrow(0, k, len)).collect::<candle_core::Result<_>>()?;
        self.proj.forward(&Tensor::cat(&taps, 1)?)
    }
}
