//! Differentiable building blocks, written against candle primitives so the
//! whole graph supports backprop in both f32 and f64.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use super::params::ParamStore;
use super::Mode;
use crate::error::Result;
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-5;
/// Additive attention bias for padded keys.
pub const MASK_BIAS: f64 = -1e9;

pub fn linear(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Linear> {
    linear_std(ps, name, d_in, d_out, (1.0 / d_in as f64).sqrt(), rng)
}

pub fn linear_std(
    ps: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<Linear> {
    let w = ps.normal(&format!("{name}.w"), (d_out, d_in), std, rng)?;
    let b = ps.zeros(&format!("{name}.b"), d_out)?;
    Ok(Linear::new(w, Some(b)))
}

/// Softmax over the last axis; the max shift is detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Tanh-approximated GELU built from primitive ops, so the backward pass
/// uses exact constants.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + (x.sqr()? * x)?.affine(0.044715, 0.0)?)? * c)?;
    Ok(((inner.tanh()? + 1.0)? * x)?.affine(0.5, 0.0)?)
}

/// Row-wise L2 normalisation.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean over positions with mask 1. `x`: (B,S,d), `mask`: (B,S).
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?;
    let sum = x.broadcast_mul(&m)?.sum(1)?;
    let count = mask.sum_keepdim(1)?;
    Ok(sum.broadcast_div(&count)?)
}

/// Mean over `[visual ∥ text]` positions that gives each present modality
/// half the weight. `x`: (B,M+L,d); masks (B,M) and (B,L).
pub fn modality_mean(x: &Tensor, visual_mask: &Tensor, text_mask: &Tensor) -> Result<Tensor> {
    let vm: Vec<Vec<f64>> = visual_mask.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    let tm: Vec<Vec<f64>> = text_mask.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    let (b, m, l) = (vm.len(), visual_mask.dims()[1], text_mask.dims()[1]);
    let mut w = Vec::with_capacity(b * (m + l));
    for (v, t) in vm.iter().zip(&tm) {
        let (nv, nt) = (v.iter().sum::<f64>(), t.iter().sum::<f64>());
        let share_v = match (nv > 0.0, nt > 0.0) {
            (true, true) => 0.5,
            (true, false) => 1.0,
            _ => 0.0,
        };
        w.extend(v.iter().map(|&x| if nv > 0.0 { x * share_v / nv } else { 0.0 }));
        w.extend(t.iter().map(|&x| if nt > 0.0 { x * (1.0 - share_v) / nt } else { 0.0 }));
    }
    let w = Tensor::from_vec(w, (b, m + l, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&w)?.sum(1)?)
}

/// `(B,S)` 0/1 mask → `(B,1,1,S)` additive bias.
pub fn attention_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, s) = mask.dims2()?;
    let bias = ((mask.ones_like()? - mask)? * MASK_BIAS)?;
    Ok(bias.reshape((b, 1, 1, s))?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.ones(&format!("{name}.w"), d)?,
            bias: ps.zeros(&format!("{name}.b"), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    n_heads: usize,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, n_heads: usize, ff_mult: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(ps, name, d, n_heads, ff_mult, false, rng)
    }

    /// Block whose residual branches start at zero, so it is the identity
    /// map at initialisation.
    pub fn new_identity(ps: &mut ParamStore, name: &str, d: usize, n_heads: usize, ff_mult: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(ps, name, d, n_heads, ff_mult, true, rng)
    }

    fn build(ps: &mut ParamStore, name: &str, d: usize, n_heads: usize, ff_mult: usize, identity: bool, rng: &mut Rng) -> Result<Self> {
        let branch_std = |fan_in: usize| if identity { 0.0 } else { (1.0 / fan_in as f64).sqrt() };
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            qkv: linear(ps, &format!("{name}.qkv"), d, 3 * d, rng)?,
            out: linear_std(ps, &format!("{name}.out"), d, d, branch_std(d), rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            ff1: linear(ps, &format!("{name}.ff1"), d, ff_mult * d, rng)?,
            ff2: linear_std(ps, &format!("{name}.ff2"), ff_mult * d, d, branch_std(ff_mult * d), rng)?,
            n_heads,
        })
    }

    fn attention(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let dh = d / self.n_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, s, 3, self.n_heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let probs = softmax_last(&scores.broadcast_add(bias)?)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        Ok(self.out.forward(&ctx)?)
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?, bias)?)?;
        let h = gelu(&self.ff1.forward(&self.ln2.forward(&x)?)?)?;
        Ok((&x + self.ff2.forward(&h)?)?)
    }
}

/// Normalisation used inside the convolutional stages.
#[derive(Debug, Clone)]
pub enum ConvNorm {
    /// Per-sample group statistics.
    Group { groups: usize, weight: Tensor, bias: Tensor },
    /// Batch statistics in training, running estimates in evaluation.
    Batch { name: String, weight: Tensor, bias: Tensor },
}

const BN_MOMENTUM: f64 = 0.1;

impl ConvNorm {
    pub fn group(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let groups = (1..=4).rev().find(|g| channels % g == 0).unwrap_or(1);
        Ok(ConvNorm::Group {
            groups,
            weight: ps.ones(&format!("{name}.w"), channels)?,
            bias: ps.zeros(&format!("{name}.b"), channels)?,
        })
    }

    pub fn batch(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let dtype = ps.dtype();
        ps.set_buffer(&format!("{name}.running_mean"), Tensor::zeros(channels, dtype, ps.device())?);
        ps.set_buffer(&format!("{name}.running_var"), Tensor::ones(channels, dtype, ps.device())?);
        Ok(ConvNorm::Batch {
            name: name.to_string(),
            weight: ps.ones(&format!("{name}.w"), channels)?,
            bias: ps.zeros(&format!("{name}.b"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ps: &ParamStore, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (normed, weight, bias) = match self {
            ConvNorm::Group { groups, weight, bias } => {
                let g = x.reshape((n, *groups, (c / groups) * h * w))?;
                let mean = g.mean_keepdim(2)?;
                let centered = g.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(2)?;
                let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?.reshape((n, c, h, w))?;
                (normed, weight, bias)
            }
            ConvNorm::Batch { name, weight, bias } => {
                let mean_key = format!("{name}.running_mean");
                let var_key = format!("{name}.running_var");
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = x.mean_keepdim((0, 2, 3))?;
                        let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
                        let rm = ps.buffer(&mean_key).expect("running mean registered");
                        let rv = ps.buffer(&var_key).expect("running var registered");
                        let m = mean.detach().flatten_all()?;
                        let v = var.detach().flatten_all()?;
                        ps.set_buffer(&mean_key, ((rm * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?);
                        ps.set_buffer(&var_key, ((rv * (1.0 - BN_MOMENTUM))? + (v * BN_MOMENTUM)?)?);
                        (mean, var)
                    }
                    Mode::Eval => (
                        ps.buffer(&mean_key).expect("running mean registered").reshape((1, c, 1, 1))?,
                        ps.buffer(&var_key).expect("running var registered").reshape((1, c, 1, 1))?,
                    ),
                };
                let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
                (normed, weight, bias)
            }
        };
        let weight = weight.reshape((1, c, 1, 1))?;
        let bias = bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&weight)?.broadcast_add(&bias)?)
    }
}

/// 3×3 stride-2 convolution, normalisation, GELU.
#[derive(Debug, Clone)]
pub struct ConvStage {
    kernel: Tensor,
    bias: Tensor,
    norm: ConvNorm,
}

impl ConvStage {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        batch_norm: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let kernel = ps.normal(&format!("{name}.conv.w"), (c_out, c_in, 3, 3), std, rng)?;
        let bias = ps.zeros(&format!("{name}.conv.b"), c_out)?;
        let norm_name = format!("{name}.norm");
        let norm = if batch_norm {
            ConvNorm::batch(ps, &norm_name, c_out)?
        } else {
            ConvNorm::group(ps, &norm_name, c_out)?
        };
        Ok(Self { kernel, bias, norm })
    }

    pub fn forward(&self, x: &Tensor, ps: &ParamStore, mode: Mode) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = x
            .conv2d(&self.kernel, 1, 2, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        gelu(&self.norm.forward(&y, ps, mode)?)
    }
}
