//! Parameterised layers built on [`Graph`] ops.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

type Result<T> = core::result::Result<T, TensorError>;

pub const NORM_EPS: f64 = 1e-5;

/// Affine map with weight `[out×in]` and optional bias `[out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut l = Self::without_bias(store, rng, name, fan_in, fan_out);
        l.b = Some(store.init(format!("{name}.bias"), &[fan_out], Init::Zeros, rng));
        l
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.init(format!("{name}.weight"), &[fan_out, fan_in], Init::Uniform { fan_in, gain: 1.0 }, rng);
        Linear { w, b: None, fan_in, fan_out }
    }

    /// Row-vector form: `x[T×in] → x·Wᵀ + b`.
    pub fn rows(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul_t(x, w, false, true)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.bias_last(y, b)
            }
            None => Ok(y),
        }
    }

    /// Column-vector form: `x[in×N] → W·x + b`.
    pub fn cols(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(w, x)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.bias_first(y, b)
            }
            None => Ok(y),
        }
    }

    /// Per-pixel application to a `C×H×W` map (a 1×1 convolution with bias).
    pub fn pointwise(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (h, w) = spatial(g, x)?;
        let flat = g.reshape(x, &[self.fan_in, h * w])?;
        let y = self.cols(g, store, flat)?;
        g.reshape(y, &[self.fan_out, h, w])
    }
}

fn spatial(g: &Graph, x: Var) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [_, h, w] => Ok((h, w)),
        ref s => Err(TensorError::dim("spatial", format!("expected C×H×W, got {s:?}"))),
    }
}

/// Two affine maps with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        Mlp2 {
            l1: Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1]),
            l2: Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2]),
        }
    }

    pub fn cols(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.cols(g, store, x)?;
        let h = g.relu(h);
        self.l2.cols(g, store, h)
    }

    pub fn rows(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.rows(g, store, x)?;
        let h = g.relu(h);
        self.l2.rows(g, store, h)
    }
}

/// Normalises the whole `C×H×W` tensor, then applies a per-channel gain and bias.
pub fn channel_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let flat = g.reshape(x, &[1, n])?;
    let normed = g.normalize_last(flat, NORM_EPS)?;
    let normed = g.reshape(normed, &shape)?;
    let scaled = g.mul_first(normed, gain)?;
    g.bias_first(scaled, bias)
}

/// Convolution (or transposed convolution), normalisation and ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvNormRelu {
    pub w: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn same3(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec { in_ch, out_ch, kernel: 3, stride: 1, pad: 1 }
    }
}

impl ConvNormRelu {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec) -> Self {
        Self::build(store, rng, name, spec, false)
    }

    pub fn transposed(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec) -> Self {
        Self::build(store, rng, name, spec, true)
    }

    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec, transposed: bool) -> Self {
        let k = spec.kernel;
        let shape = if transposed { [spec.in_ch, spec.out_ch, k, k] } else { [spec.out_ch, spec.in_ch, k, k] };
        let w =
            store.init(format!("{name}.weight"), &shape, Init::Uniform { fan_in: spec.in_ch * k * k, gain: 1.0 }, rng);
        let gain = store.init(format!("{name}.norm.gain"), &[spec.out_ch], Init::Ones, rng);
        let bias = store.init(format!("{name}.norm.bias"), &[spec.out_ch], Init::Zeros, rng);
        ConvNormRelu { w, gain, bias, stride: spec.stride, pad: spec.pad, transposed }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = if self.transposed {
            g.conv_transpose2d(x, w, self.stride, self.pad)?
        } else {
            g.conv2d(x, w, self.stride, self.pad)?
        };
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = channel_norm(g, y, gain, bias)?;
        Ok(g.relu(y))
    }
}

/// Applies a stack of blocks in order.
pub fn run_stack(blocks: &[ConvNormRelu], g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, store, x)?;
    }
    Ok(x)
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.init(format!("{name}.gain"), &[dim], Init::Ones, rng),
            bias: store.init(format!("{name}.bias"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, NORM_EPS)
    }
}

/// Scaled dot-product attention with `heads` heads over row-token inputs `[T×n]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            // a key bias shifts every score in a row equally, so softmax ignores it
            k: Linear::without_bias(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var) -> Result<Var> {
        Ok(self.forward_with_probs(g, store, queries, keys)?.0)
    }

    /// Also returns each head's `[Tq×Tk]` attention matrix.
    pub fn forward_with_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.rows(g, store, queries)?;
        let k = self.k.rows(g, store, keys)?;
        let v = self.v.rows(g, store, keys)?;
        let dim = self.q.fan_out;
        let dh = dim / self.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let s = g.matmul_t(qh, kh, false, true)?;
            let s = g.scale(s, scale);
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((self.o.rows(g, store, cat)?, probs))
    }
}

/// Post-norm encoder block: self-attention and a feed-forward network, each followed by a
/// residual connection and layer normalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp2,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), dim),
            ffn: Mlp2::new(store, rng, &format!("{name}.ffn"), [dim, ffn, dim]),
            norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn.rows(g, store, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

/// Post-norm decoder block: self-attention over queries, cross-attention into the encoder
/// memory, then a feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp2,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dim, heads),
            norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dim, heads),
            norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), dim),
            ffn: Mlp2::new(store, rng, &format!("{name}.ffn"), [dim, ffn, dim]),
            norm3: LayerNorm::new(store, rng, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, memory: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, store, q, q)?;
        let q = g.add(q, a)?;
        let q = self.norm1.forward(g, store, q)?;
        let c = self.cross_attn.forward(g, store, q, memory)?;
        let q = g.add(q, c)?;
        let q = self.norm2.forward(g, store, q)?;
        let f = self.ffn.rows(g, store, q)?;
        let q = g.add(q, f)?;
        self.norm3.forward(g, store, q)
    }
}

/// Fixed 2-D sinusoidal position code, `[H·W × n]` in row-major cell order. The first half of
/// the channels encodes the row, the second half the column. `n` must be a multiple of 4.
pub fn sinusoidal_2d(h: usize, w: usize, n: usize) -> Tensor {
    assert!(n.is_multiple_of(4), "position code width {n} must be a multiple of 4");
    let half = n / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| 1.0 / math::powf(10_000.0, (2 * i) as f64 / half as f64)).collect();
    let mut out = Tensor::zeros(&[h * w, n]);
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * n;
            let data = out.data_mut();
            for (i, f) in freqs.iter().enumerate() {
                data[row + 2 * i] = math::sin(y as f64 * f);
                data[row + 2 * i + 1] = math::cos(y as f64 * f);
                data[row + half + 2 * i] = math::sin(x as f64 * f);
                data[row + half + 2 * i + 1] = math::cos(x as f64 * f);
            }
        }
    }
    out
}
