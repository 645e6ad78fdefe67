//! Parameterised layers on top of the tape: linear maps, layer norm, convolutions,
//! multi-head attention and pre-norm Transformer blocks.

use matrn_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Additive attention bias for disallowed pairs; `exp` of it underflows to exactly 0.
pub const MASKED: f64 = -1e9;

/// Registers freshly initialised parameters under a name prefix.
pub struct Init<'a, F: Float> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Float> Init<'_, F> {
    pub fn add(&mut self, name: &str, t: Tensor<F>) -> Result<ParamId> {
        Ok(self.store.add(name, t)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape))
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::trunc_normal(shape, std, self.rng);
        self.add(name, t)
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], -a, a, self.rng);
        self.add(name, t)
    }

    /// He-normal conv kernel `[out, in, k, k]`.
    pub fn he(&mut self, name: &str, shape: &[usize; 4]) -> Result<ParamId> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let t = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.add(name, t)
    }

    pub fn seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// A tape together with the parameters to bind from.
#[derive(Clone, Copy)]
pub struct Ctx<'t, F: Float> {
    pub tape: &'t Tape<F>,
    pub store: &'t ParamStore<F>,
}

impl<'t, F: Float> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &'t ParamStore<F>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, F> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = init.xavier(&format!("{name}.w"), fan_in, fan_out)?;
        let b = if bias { Some(init.zeros(&format!("{name}.b"), &[fan_out])?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let y = x.matmul(cx.p(self.w))?;
        Ok(match self.b {
            Some(b) => y.add(cx.p(b))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: init.ones(&format!("{name}.g"), &[dim])?, beta: init.zeros(&format!("{name}.b"), &[dim])? })
    }

    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(x.layer_norm(cx.p(self.gamma), cx.p(self.beta), Self::EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new<F: Float>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: init.he(&format!("{name}.w"), &[cout, cin, kernel, kernel])?,
            b: init.zeros(&format!("{name}.b"), &[cout])?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(x.conv2d(cx.p(self.w), Some(cx.p(self.b)), self.stride, self.padding)?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    fn split_heads<'t, F: Float>(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let s = x.shape();
        let (b, l, d) = (s[0], s[1], s[2]);
        Ok(x.reshape(&[b, l, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])?)
    }

    /// `query: [B, Lq, D]`, `memory: [B, Lk, D]`, `bias: [Lq, Lk]` additive.
    /// Returns the output `[B, Lq, D]` and the weights `[B, heads, Lq, Lk]`.
    pub fn forward<'t, F: Float>(
        &self,
        cx: &Ctx<'t, F>,
        query: Var<'t, F>,
        memory: Var<'t, F>,
        bias: Option<Var<'t, F>>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let s = query.shape();
        if s.len() != 3 || memory.shape().len() != 3 || memory.shape()[0] != s[0] {
            return Err(Error::Input(format!("attention inputs {:?} and {:?}", s, memory.shape())));
        }
        let (b, lq, d) = (s[0], s[1], s[2]);
        let q = self.split_heads(self.q.forward(cx, query)?)?;
        let k = self.split_heads(self.k.forward(cx, memory)?)?;
        let v = self.split_heads(self.v.forward(cx, memory)?)?;
        let dh = d / self.heads;
        let mut scores = q.bmm_nt(k)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.add(bias)?;
        }
        let weights = scores.softmax(3)?;
        let ctx = weights.bmm(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, d])?;
        Ok((self.o.forward(cx, ctx)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden, true)?,
            down: Linear::new(init, &format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward<'t, F: Float>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        self.down.forward(cx, self.up.forward(cx, x)?.gelu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        cx: &Ctx<'t, F>,
        x: Var<'t, F>,
        bias: Option<Var<'t, F>>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let h = self.ln1.forward(cx, x)?;
        let (a, weights) = self.attn.forward(cx, h, h, bias)?;
        let x = x.add(a)?;
        let x = x.add(self.ffn.forward(cx, self.ln2.forward(cx, x)?)?)?;
        Ok((x, weights))
    }
}

/// Pre-norm block whose queries attend to a separate memory sequence.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(init, &format!("{name}.ln_q"), dim)?,
            ln_kv: LayerNorm::new(init, &format!("{name}.ln_kv"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        cx: &Ctx<'t, F>,
        x: Var<'t, F>,
        memory: Var<'t, F>,
        bias: Option<Var<'t, F>>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let q = self.ln_q.forward(cx, x)?;
        let m = self.ln_kv.forward(cx, memory)?;
        let (a, weights) = self.attn.forward(cx, q, m, bias)?;
        let x = x.add(a)?;
        let x = x.add(self.ffn.forward(cx, self.ln2.forward(cx, x)?)?)?;
        Ok((x, weights))
    }
}

/// Sinusoidal table `[len, dim]`: channel `2i` is `sin(p / 10000^(2i/dim))`, `2i+1` the cosine.
pub fn sinusoidal_1d<F: Float>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = vec![0.0f64; len * dim];
    fill_sinusoid(&mut data, len, dim, 0, dim, |p| p as f64);
    Tensor::from_f64(&[len, dim], &data).expect("shape matches")
}

/// Writes a sinusoid of `pos(p)` into channels `[c0, c0 + width)` of each row.
pub(crate) fn fill_sinusoid(
    data: &mut [f64],
    rows: usize,
    dim: usize,
    c0: usize,
    width: usize,
    pos: impl Fn(usize) -> f64,
) {
    for r in 0..rows {
        let p = pos(r);
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data[r * dim + c0 + 2 * i] = (p * freq).sin();
            if c0 + 2 * i + 1 < c0 + width {
                data[r * dim + c0 + 2 * i + 1] = (p * freq).cos();
            }
        }
    }
}

/// Attention bias `[rows, cols]` with [`MASKED`] where `blocked(row, col)`.
pub fn mask_bias<F: Float>(rows: usize, cols: usize, blocked: impl Fn(usize, usize) -> bool) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|i| if blocked(i / cols, i % cols) { F::from_f64_lossy(MASKED) } else { F::zero() })
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches")
}
