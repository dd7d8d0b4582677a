//! Dual-attention transformer trunk: per-layer row attention over an
//! example's tokens, followed in pre-training by inter-sample attention
//! (ISA) across the batch in a projected `d'`-dimensional space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Tokens;
use crate::error::{Error, Result};
use crate::graph::{GeluKind, Var};
use crate::nn::{key_bias, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamStore, Session};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
    Inference,
}

impl Mode {
    pub fn uses_isa(self) -> bool {
        self == Mode::Pretrain
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over non-padding tokens.
    #[default]
    Mean,
    /// Output at a learned summary token.
    Cls,
}

#[derive(Clone, Debug)]
pub struct TrunkShape {
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub d_prime: usize,
    pub isa_heads: usize,
    pub isa_ffn_dim: usize,
    pub isa: bool,
    pub spectral: bool,
    pub gelu: GeluKind,
}

/// Projection-based inter-sample attention: each example's `N x d` tokens
/// are flattened, projected to `d'`, attended across the batch, passed
/// through a feed-forward block at `d'` and projected back.
#[derive(Clone, Debug)]
pub struct IsaBlock {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub restore: Linear,
    pub n: usize,
    pub d: usize,
}

impl IsaBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: &TrunkShape, rng: &mut R) -> Self {
        let nd = c.n * c.d;
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), nd, c.d_prime, true, c.spectral, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c.d_prime),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                c.d_prime,
                c.isa_heads,
                c.isa_heads > 1,
                c.spectral,
                rng,
            ),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                c.d_prime,
                c.isa_ffn_dim,
                c.d_prime,
                c.spectral,
                c.gelu,
                rng,
            ),
            restore: Linear::new(store, &format!("{name}.restore"), c.d_prime, nd, true, c.spectral, rng),
            n: c.n,
            d: c.d,
        }
    }

    /// Block output (without the surrounding residual) for `x: [B, N, d]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.n || shape[2] != self.d {
            return Err(Error::shape("isa_forward", &shape, &[0, self.n, self.d]));
        }
        let b = shape[0];
        let flat = s.g.reshape(x, &[b, self.n * self.d])?;
        let p = self.proj.forward(s, flat)?;
        let p = self.norm.forward(s, p)?;
        let dp = self.proj.d_out;
        let p = s.g.reshape(p, &[1, b, dp])?;
        let a = self.attn.forward(s, p, None)?;
        let a = s.g.reshape(a, &[b, dp])?;
        let f = self.ffn.forward(s, a)?;
        let r = self.restore.forward(s, f)?;
        s.g.reshape(r, &[b, self.n, self.d])
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.proj, &self.restore];
        v.extend(self.attn.linears());
        v.extend(self.ffn.linears());
        v
    }
}

#[derive(Clone, Debug)]
pub struct TrunkLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub isa: Option<IsaBlock>,
}

impl TrunkLayer {
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, bias: Option<Var>, mode: Mode) -> Result<Var> {
        let h = self.attn_norm.forward(s, x)?;
        let a = self.attn.forward(s, h, bias)?;
        let x = s.g.add(x, a)?;
        let h = self.ffn_norm.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        let x = s.g.add(x, f)?;
        match &self.isa {
            Some(isa) if mode.uses_isa() => {
                let i = isa.forward(s, x)?;
                s.g.add(x, i)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trunk {
    pub layers: Vec<TrunkLayer>,
    pub final_norm: Option<LayerNorm>,
    pub pooling: Pooling,
    pub n: usize,
    pub d: usize,
}

/// Trunk outputs: per-token states `[B, N, d]` and pooled `[B, d]`.
pub struct TrunkOut {
    pub tokens: Var,
    pub pooled: Var,
}

impl Trunk {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, c: &TrunkShape, pooling: Pooling, rng: &mut R) -> Result<Self> {
        if c.heads == 0 || c.d % c.heads != 0 {
            return Err(Error::Config(format!("d={} is not divisible by heads={}", c.d, c.heads)));
        }
        if c.isa && (c.d_prime == 0 || c.isa_heads == 0 || c.d_prime % c.isa_heads != 0) {
            return Err(Error::Config(format!(
                "d_prime={} must be >= 1 and divisible by isa_heads={}",
                c.d_prime, c.isa_heads
            )));
        }
        let layers = (0..c.layers)
            .map(|l| {
                let name = format!("trunk.{l}");
                TrunkLayer {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), c.d),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), c.d, c.heads, true, c.spectral, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), c.d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), c.d, c.ffn_dim, c.d, c.spectral, c.gelu, rng),
                    isa: c.isa.then(|| IsaBlock::new(store, &format!("{name}.isa"), c, rng)),
                }
            })
            .collect::<Vec<_>>();
        let final_norm = (c.layers > 0).then(|| LayerNorm::new(store, "trunk.final_norm", c.d));
        Ok(Self {
            layers,
            final_norm,
            pooling,
            n: c.n,
            d: c.d,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, tokens: &Tokens, mode: Mode) -> Result<TrunkOut> {
        let shape = s.g.shape(tokens.x).to_vec();
        let b = shape[0];
        let n = shape[1];
        let bias = if tokens.mask.iter().flatten().all(|&m| m) {
            None
        } else {
            Some(s.constant(key_bias(&tokens.mask)))
        };
        let mut x = tokens.x;
        for layer in &self.layers {
            x = layer.forward(s, x, bias, mode)?;
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(s, x)?;
        }
        let mut w = vec![T::zero(); b * n];
        for (r, m) in tokens.mask.iter().enumerate() {
            match self.pooling {
                Pooling::Mean => {
                    let cnt = m.iter().filter(|&&v| v).count().max(1);
                    let inv = T::one() / T::of(cnt as f64);
                    for (j, &v) in m.iter().enumerate() {
                        if v {
                            w[r * n + j] = inv;
                        }
                    }
                }
                Pooling::Cls => w[r * n] = T::one(),
            }
        }
        let w = s.constant(Tensor::new(&[b, 1, n], w)?);
        let pooled = s.g.matmul(w, x)?;
        let pooled = s.g.reshape(pooled, &[b, self.d])?;
        Ok(TrunkOut { tokens: x, pooled })
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.attn.linears());
            v.extend(l.ffn.linears());
            if let Some(isa) = &l.isa {
                v.extend(isa.linears());
            }
        }
        v
    }
}
