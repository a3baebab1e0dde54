//! Building blocks: linear maps, layer norm, attention and transformer blocks.

use rand::Rng;

use super::params::{Bound, Init, ParamId};
use crate::error::Result;
use crate::tensor::Var;

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: init.xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out),
            b: init.zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn zeroed<R: Rng>(init: &mut Init<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: init.zeros(format!("{name}.weight"), &[d_in, d_out]),
            b: init.zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p.get(self.w))?.add_bias(p.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        Self {
            gamma: init.ones(format!("{name}.weight"), &[d]),
            beta: init.zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

/// Scaled dot-product attention over `heads` column groups of `q`, `k`, `v`.
fn multi_head<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow_cols(h * dh, dh)?;
        let kh = k.narrow_cols(h * dh, dh)?;
        let vh = v.narrow_cols(h * dh, dh)?;
        let att = qh.matmul_bt(kh)?.scale(scale).softmax(1)?;
        outs.push(att.matmul(vh)?);
    }
    if heads == 1 {
        Ok(outs.pop().unwrap())
    } else {
        q.graph().concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let qkv = self.qkv.forward(p, x)?;
        let d = self.dim;
        let q = qkv.narrow_cols(0, d)?;
        let k = qkv.narrow_cols(d, d)?;
        let v = qkv.narrow_cols(2 * d, d)?;
        let o = multi_head(q, k, v, self.heads)?;
        self.proj.forward(p, o)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    norm1: Norm,
    attn: SelfAttention,
    norm2: Norm,
    mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm1: Norm::new(init, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(init, &format!("{name}.attn"), dim, heads),
            norm2: Norm::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let a = self.attn.forward(p, self.norm1.forward(p, x)?)?;
        let x = x.add(a)?;
        let m = self.mlp.forward(p, self.norm2.forward(p, x)?)?;
        x.add(m)
    }
}

/// Attention from `query` rows onto `context` rows with separate projections.
#[derive(Clone, Debug)]
pub(crate) struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        let out_name = format!("{name}.out");
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            out: if zero_out {
                Linear::zeroed(init, &out_name, dim, dim)
            } else {
                Linear::new(init, &out_name, dim, dim)
            },
            heads,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, query: Var<'g>, context: Var<'g>) -> Result<Var<'g>> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, context)?;
        let v = self.v.forward(p, context)?;
        let o = multi_head(q, k, v, self.heads)?;
        self.out.forward(p, o)
    }
}

/// Two-way block between a sparse text token and the dense tokens: the text
/// token first attends to the image, then the image attends back to it.
#[derive(Clone, Debug)]
pub(crate) struct TextBlock {
    norm_t1: Norm,
    norm_x1: Norm,
    token_to_image: CrossAttention,
    norm_t2: Norm,
    mlp: Mlp,
    norm_x2: Norm,
    norm_t3: Norm,
    image_to_token: CrossAttention,
}

impl TextBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm_t1: Norm::new(init, &format!("{name}.norm_t1"), dim),
            norm_x1: Norm::new(init, &format!("{name}.norm_x1"), dim),
            token_to_image: CrossAttention::new(init, &format!("{name}.token_to_image"), dim, heads, false),
            norm_t2: Norm::new(init, &format!("{name}.norm_t2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, 2 * dim),
            norm_x2: Norm::new(init, &format!("{name}.norm_x2"), dim),
            norm_t3: Norm::new(init, &format!("{name}.norm_t3"), dim),
            image_to_token: CrossAttention::new(init, &format!("{name}.image_to_token"), dim, heads, true),
        }
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g, '_>,
        token: Var<'g>,
        x: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let a = self.token_to_image.forward(
            p,
            self.norm_t1.forward(p, token)?,
            self.norm_x1.forward(p, x)?,
        )?;
        let token = token.add(a)?;
        let token = token.add(self.mlp.forward(p, self.norm_t2.forward(p, token)?)?)?;
        let b = self.image_to_token.forward(
            p,
            self.norm_x2.forward(p, x)?,
            self.norm_t3.forward(p, token)?,
        )?;
        Ok((token, x.add(b)?))
    }
}

/// `C×H×W` convolution with square kernel.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            w: init.xavier(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, c_out * k * k),
            b: init.zeros(format!("{name}.bias"), &[c_out]),
            stride,
            pad: 0,
        }
    }

    pub fn zeroed<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            w: init.zeros(format!("{name}.weight"), &[c_out, c_in, k, k]),
            b: init.zeros(format!("{name}.bias"), &[c_out]),
            stride,
            pad: 0,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p.get(self.w), p.get(self.b), self.stride, self.pad)
    }
}

/// Transposed convolution with `kernel = stride` (exact upsampling by `stride`).
#[derive(Clone, Debug)]
pub(crate) struct ConvUp {
    w: ParamId,
    b: ParamId,
    factor: usize,
}

impl ConvUp {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c_in: usize, c_out: usize, factor: usize) -> Self {
        let kk = factor * factor;
        Self {
            w: init.xavier(format!("{name}.weight"), &[c_in, c_out, factor, factor], c_in * kk, c_out * kk),
            b: init.zeros(format!("{name}.bias"), &[c_out]),
            factor,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv_transpose2d(p.get(self.w), p.get(self.b), self.factor)
    }
}
