//! Building blocks: (spectrally normalized) linear maps, layer norm,
//! feed-forward blocks and multi-head attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{GeluKind, Var};
use crate::params::{ParamId, ParamStore, Session};
use crate::spectral::{power_iteration, random_unit};
use crate::tensor::{Real, Tensor};

pub const SN_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct SpectralState {
    u: ParamId,
    v: ParamId,
}

/// `y = x W (+ b)` with `W` stored as `[in, out]`. When spectral
/// normalization is on, the forward pass uses `W / sigma(W)`; the stored `W`
/// is what the optimizer updates.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    sn: Option<SpectralState>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / d_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Tensor::from_fn(&[d_in, d_out], |_| T::of(normal.sample(rng)));
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        let sn = spectral.then(|| {
            let u0 = random_unit::<T, _>(d_in, rng);
            let u = store.add_buffer(format!("{name}.sn_u"), Tensor::from_vec(u0));
            let v = store.add_buffer(format!("{name}.sn_v"), Tensor::zeros(&[d_out]));
            SpectralState { u, v }
        });
        let lin = Self {
            w,
            b,
            sn,
            d_in,
            d_out,
        };
        // Converge the initial estimate so the first forward pass is already normalized.
        lin.refresh_spectral(store, 30);
        lin
    }

    pub fn is_spectral(&self) -> bool {
        self.sn.is_some()
    }

    /// Advance the persisted power-iteration state by `iters` steps.
    pub fn refresh_spectral<T: Real>(&self, store: &mut ParamStore<T>, iters: usize) {
        let Some(sn) = &self.sn else { return };
        let u0 = store.get(sn.u).data().to_vec();
        let p = power_iteration(store.get(self.w), &u0, iters).expect("shapes fixed at construction");
        *store.get_mut(sn.u) = Tensor::from_vec(p.u);
        *store.get_mut(sn.v) = Tensor::from_vec(p.v);
    }

    /// Current sigma estimate `u^T W v`.
    pub fn sigma<T: Real>(&self, store: &ParamStore<T>) -> Option<T> {
        let sn = self.sn.as_ref()?;
        Some(crate::graph::bilinear(
            store.get(self.w).data(),
            store.get(sn.u).data(),
            store.get(sn.v).data(),
        ))
    }

    /// The weight as used in the forward pass.
    pub fn effective_weight<T: Real>(&self, s: &mut Session<'_, T>) -> Result<Var> {
        let w = s.p(self.w);
        match &self.sn {
            Some(sn) => {
                let (u, v) = (s.buffer(sn.u), s.buffer(sn.v));
                s.g.spectral_normalize(w, u.data(), v.data(), T::of(SN_EPS))
            }
            None => Ok(w),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = self.effective_weight(s)?;
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.g.layer_norm(x, g, b, T::of(Self::EPS))
    }
}

/// Two-layer position-wise feed-forward block with a gelu in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub gelu: GeluKind,
}

impl FeedForward {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        d_out: usize,
        spectral: bool,
        gelu: GeluKind,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, spectral, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d_out, true, spectral, rng),
            gelu,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.g.gelu(h, self.gelu);
        self.down.forward(s, h)
    }

    pub fn linears(&self) -> [&Linear; 2] {
        [&self.up, &self.down]
    }
}

/// Scaled dot-product attention over the second-to-last axis of
/// `x: [B, N, d]`, split into `heads` heads of width `d / heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Output projection merging heads; absent for the single-head form
    /// `softmax(QK^T/sqrt(d)) V`.
    pub o: Option<Linear>,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        out_proj: bool,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && d % heads == 0, "d={d} not divisible by heads={heads}");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, spectral, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, spectral, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, spectral, rng),
            o: out_proj.then(|| Linear::new(store, &format!("{name}.o"), d, d, true, spectral, rng)),
            heads,
        }
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.q, &self.k, &self.v];
        v.extend(self.o.as_ref());
        v
    }

    /// `x: [B, N, d]`; `key_bias`, when given, is an additive `[B, 1, 1, N]`
    /// constant holding `0` for visible keys and `-inf` for masked ones.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, key_bias: Option<Var>) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        let [b, n, d] = shape[..] else {
            return Err(crate::error::Error::shape("attention", &shape, &[]));
        };
        let h = self.heads;
        let dh = d / h;
        let split = |s: &mut Session<'_, T>, t: Var| -> Result<Var> {
            let t = s.g.reshape(t, &[b, n, h, dh])?;
            s.g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let (q, k, v) = (split(s, q)?, split(s, k)?, split(s, v)?);
        let kt = s.g.transpose(k)?;
        let scores = s.g.matmul(q, kt)?;
        let mut scores = s.g.scale(scores, T::one() / T::of(dh as f64).sqrt());
        if let Some(bias) = key_bias {
            scores = s.g.add(scores, bias)?;
        }
        let attn = s.g.softmax(scores);
        let ctx = s.g.matmul(attn, v)?;
        let ctx = s.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.g.reshape(ctx, &[b, n, d])?;
        match &self.o {
            Some(o) => o.forward(s, ctx),
            None => Ok(ctx),
        }
    }
}

/// Additive key mask `[B, 1, 1, N]` from a `[B, N]` 0/1 mask.
pub fn key_bias<T: Real>(mask: &[Vec<bool>]) -> Tensor<T> {
    let b = mask.len();
    let n = mask.first().map_or(0, Vec::len);
    let data = mask
        .iter()
        .flat_map(|row| row.iter().map(|&m| if m { T::zero() } else { T::neg_infinity() }))
        .collect();
    Tensor::new(&[b, 1, 1, n], data).expect("mask rows share a length")
}
