//! Per-feature encoders mapping a batch of snapshots to a `[B, N, d]` token
//! tensor plus a key mask marking padding tokens.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{FeatureKind, FeatureSchema, FeatureValue, Snapshot};
use crate::error::{Error, Result};
use crate::graph::{GeluKind, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

/// Embedding-to-token MLP: `dim -> hidden -> d` with a gelu in between.
#[derive(Clone, Debug)]
pub struct Projector {
    pub up: Linear,
    pub down: Linear,
    pub gelu: GeluKind,
}

impl Projector {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        d: usize,
        gelu: GeluKind,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, false, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, false, rng),
            gelu,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.g.gelu(h, self.gelu);
        self.down.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub enum FeatureEncoder {
    Numeric { freq: ParamId, missing: ParamId },
    Categorical { table: ParamId, missing: ParamId },
    Embedding { proj: Projector, missing: ParamId },
    MultiEmbedding { proj: Projector, pad: ParamId, k: usize },
}

/// Geometric frequency ladder from `lo` to `hi` with `n` rungs.
pub fn geometric_frequencies(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (r * i as f64).exp()).collect()
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub d: usize,
    pub features: Vec<FeatureEncoder>,
    /// Optional learned summary token prepended to every example.
    pub cls: Option<ParamId>,
}

/// Encoded batch: tokens `[B, N, d]` and `mask[b][n]` (`false` = padding).
pub struct Tokens {
    pub x: Var,
    pub mask: Vec<Vec<bool>>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        schema: &FeatureSchema,
        d: usize,
        projector_hidden: usize,
        freq_range: (f64, f64),
        gelu: GeluKind,
        cls: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(format!("token dim d must be even and positive, got {d}")));
        }
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let row = |rng: &mut R, shape: &[usize]| Tensor::<T>::from_fn(shape, |_| T::of(normal.sample(rng)));
        let mut features = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            let name = format!("enc.{}", f.name);
            features.push(match &f.kind {
                FeatureKind::Numeric => {
                    let freqs = geometric_frequencies(d / 2, freq_range.0, freq_range.1);
                    FeatureEncoder::Numeric {
                        freq: store.add(format!("{name}.freq"), Tensor::from_vec(freqs.into_iter().map(T::of).collect())),
                        missing: store.add(format!("{name}.missing"), row(rng, &[d])),
                    }
                }
                FeatureKind::Categorical { vocab_size } | FeatureKind::MultiCategorical { vocab_size } => {
                    FeatureEncoder::Categorical {
                        table: store.add(format!("{name}.table"), row(rng, &[*vocab_size, d])),
                        missing: store.add(format!("{name}.missing"), row(rng, &[d])),
                    }
                }
                FeatureKind::Embedding { dim } => FeatureEncoder::Embedding {
                    proj: Projector::new(store, &format!("{name}.proj"), *dim, projector_hidden, d, gelu, rng),
                    missing: store.add(format!("{name}.missing"), row(rng, &[d])),
                },
                FeatureKind::MultiEmbedding { dim, max_count } => FeatureEncoder::MultiEmbedding {
                    proj: Projector::new(store, &format!("{name}.proj"), *dim, projector_hidden, d, gelu, rng),
                    pad: store.add(format!("{name}.pad"), row(rng, &[d])),
                    k: *max_count,
                },
            });
        }
        let cls = cls.then(|| store.add("enc.cls", row(rng, &[d])));
        Ok(Self { d, features, cls })
    }

    /// Tokens per example, including the summary token when present.
    pub fn token_count(&self) -> usize {
        let base: usize = self
            .features
            .iter()
            .map(|f| match f {
                FeatureEncoder::MultiEmbedding { k, .. } => *k,
                _ => 1,
            })
            .sum();
        base + usize::from(self.cls.is_some())
    }

    /// Index of the first token of each feature.
    pub fn token_offsets(&self) -> Vec<usize> {
        let mut at = usize::from(self.cls.is_some());
        self.features
            .iter()
            .map(|f| {
                let o = at;
                at += match f {
                    FeatureEncoder::MultiEmbedding { k, .. } => *k,
                    _ => 1,
                };
                o
            })
            .collect()
    }

    /// `present ⊙ token + (1 - present) ⊙ fallback` with a `[rows, 1]` mask.
    fn blend<T: Real>(s: &mut Session<'_, T>, token: Var, fallback: Var, present: &[bool]) -> Result<Var> {
        let m: Vec<T> = present.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
        let inv: Vec<T> = present.iter().map(|&p| if p { T::zero() } else { T::one() }).collect();
        let m = s.constant(Tensor::new(&[present.len(), 1], m)?);
        let inv = s.constant(Tensor::new(&[present.len(), 1], inv)?);
        let a = s.g.mul(token, m)?;
        let b = s.g.mul(fallback, inv)?;
        s.g.add(a, b)
    }

    /// Sinusoidal encoding `[sin(x f_1 pi), cos(x f_1 pi), ...]` of a `[B, 1]` input.
    pub fn sinusoid<T: Real>(s: &mut Session<'_, T>, x: Var, freq: Var) -> Result<Var> {
        let b = s.g.shape(x)[0];
        let half = s.g.shape(freq)[0];
        let arg = s.g.mul(x, freq)?;
        let arg = s.g.scale(arg, T::of(std::f64::consts::PI));
        let sin = s.g.sin(arg);
        let cos = s.g.cos(arg);
        let sin = s.g.reshape(sin, &[b, half, 1])?;
        let cos = s.g.reshape(cos, &[b, half, 1])?;
        let both = s.g.concat(&[sin, cos], 2)?;
        s.g.reshape(both, &[b, 2 * half])
    }

    /// Encode one feature for the whole batch: `[B, k, d]` and its mask.
    fn encode_feature<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        fi: usize,
        batch: &[&Snapshot],
        schema: &FeatureSchema,
    ) -> Result<(Var, Vec<Vec<bool>>)> {
        let b = batch.len();
        let d = self.d;
        let spec = &schema.features[fi];
        let bad = |row: usize, message: String| Error::Data {
            row,
            feature: spec.name.clone(),
            message,
        };
        let one = |b: usize| vec![vec![true]; b];
        match &self.features[fi] {
            FeatureEncoder::Numeric { freq, missing } => {
                let mut xs = Vec::with_capacity(b);
                let mut present = Vec::with_capacity(b);
                for (r, snap) in batch.iter().enumerate() {
                    match &snap.values[fi] {
                        FeatureValue::Numeric(v) => {
                            xs.push(T::of(v.unwrap_or(0.0)));
                            present.push(v.is_some());
                        }
                        _ => return Err(bad(r, "expected a numeric value".into())),
                    }
                }
                let x = s.constant(Tensor::new(&[b, 1], xs)?);
                let f = s.p(*freq);
                let se = Self::sinusoid(s, x, f)?;
                let miss = s.p(*missing);
                let tok = Self::blend(s, se, miss, &present)?;
                Ok((s.g.reshape(tok, &[b, 1, d])?, one(b)))
            }
            FeatureEncoder::Categorical { table, missing } => {
                let vocab = s.store().get(*table).shape()[0];
                let mut lists = Vec::with_capacity(b);
                let mut present = Vec::with_capacity(b);
                for (r, snap) in batch.iter().enumerate() {
                    let (list, p) = match &snap.values[fi] {
                        FeatureValue::Categorical(Some(c)) => (vec![*c], true),
                        FeatureValue::Categorical(None) => (vec![], false),
                        FeatureValue::MultiCategorical(Some(cs)) => (cs.clone(), true),
                        FeatureValue::MultiCategorical(None) => (vec![], false),
                        _ => return Err(bad(r, "expected a categorical value".into())),
                    };
                    if let Some(c) = list.iter().find(|&&c| c >= vocab) {
                        return Err(bad(r, format!("category index {c} >= vocab_size {vocab}")));
                    }
                    lists.push(list);
                    present.push(p);
                }
                let t = s.p(*table);
                let emb = s.g.gather_sum(t, &lists)?;
                let miss = s.p(*missing);
                let tok = Self::blend(s, emb, miss, &present)?;
                Ok((s.g.reshape(tok, &[b, 1, d])?, one(b)))
            }
            FeatureEncoder::Embedding { proj, missing } => {
                let dim = proj.up.d_in;
                let mut xs = Vec::with_capacity(b * dim);
                let mut present = Vec::with_capacity(b);
                for (r, snap) in batch.iter().enumerate() {
                    match &snap.values[fi] {
                        FeatureValue::Embedding(Some(v)) => {
                            if v.len() != dim {
                                return Err(bad(r, format!("embedding has dim {} but schema says {dim}", v.len())));
                            }
                            xs.extend(v.iter().map(|&x| T::of(x as f64)));
                            present.push(true);
                        }
                        FeatureValue::Embedding(None) => {
                            xs.extend(std::iter::repeat_n(T::zero(), dim));
                            present.push(false);
                        }
                        _ => return Err(bad(r, "expected an embedding value".into())),
                    }
                }
                let x = s.constant(Tensor::new(&[b, dim], xs)?);
                let h = proj.forward(s, x)?;
                let miss = s.p(*missing);
                let tok = Self::blend(s, h, miss, &present)?;
                Ok((s.g.reshape(tok, &[b, 1, d])?, one(b)))
            }
            FeatureEncoder::MultiEmbedding { proj, pad, k } => {
                let dim = proj.up.d_in;
                let k = *k;
                let mut xs = Vec::with_capacity(b * k * dim);
                let mut mask = Vec::with_capacity(b);
                for (r, snap) in batch.iter().enumerate() {
                    let FeatureValue::MultiEmbedding(assets) = &snap.values[fi] else {
                        return Err(bad(r, "expected a multi-embedding value".into()));
                    };
                    if assets.len() > k {
                        return Err(bad(r, format!("{} assets exceed max_count {k}", assets.len())));
                    }
                    let mut m = vec![false; k];
                    for (j, a) in assets.iter().enumerate() {
                        if a.vector.len() != dim {
                            return Err(bad(r, format!("asset has dim {} but schema says {dim}", a.vector.len())));
                        }
                        xs.extend(a.vector.iter().map(|&x| T::of(x as f64)));
                        m[j] = true;
                    }
                    xs.extend(std::iter::repeat_n(T::zero(), (k - assets.len()) * dim));
                    mask.push(m);
                }
                let x = s.constant(Tensor::new(&[b * k, dim], xs)?);
                let h = proj.forward(s, x)?;
                let p = s.p(*pad);
                let flat: Vec<bool> = mask.iter().flatten().copied().collect();
                let tok = Self::blend(s, h, p, &flat)?;
                Ok((s.g.reshape(tok, &[b, k, d])?, mask))
            }
        }
    }

    /// Assemble the token set of a batch. No positional information is
    /// added: the example is an unordered set of feature tokens.
    pub fn encode<T: Real>(&self, s: &mut Session<'_, T>, batch: &[&Snapshot], schema: &FeatureSchema) -> Result<Tokens> {
        if schema.features.len() != self.features.len() {
            return Err(Error::Schema(format!(
                "encoder built for {} features, schema has {}",
                self.features.len(),
                schema.features.len()
            )));
        }
        let b = batch.len();
        if b == 0 {
            return Err(Error::Invalid("cannot encode an empty batch".into()));
        }
        for (r, snap) in batch.iter().enumerate() {
            if snap.values.len() != schema.features.len() {
                return Err(Error::Data {
                    row: r,
                    feature: String::new(),
                    message: format!("{} values for {} features", snap.values.len(), schema.features.len()),
                });
            }
        }
        let mut parts = Vec::with_capacity(self.features.len() + 1);
        let mut mask: Vec<Vec<bool>> = vec![Vec::with_capacity(self.token_count()); b];
        if let Some(cls) = self.cls {
            let c = s.p(cls);
            let zeros = s.constant(Tensor::zeros(&[b, 1, self.d]));
            parts.push(s.g.add(zeros, c)?);
            mask.iter_mut().for_each(|m| m.push(true));
        }
        for fi in 0..self.features.len() {
            let (tok, m) = self.encode_feature(s, fi, batch, schema)?;
            parts.push(tok);
            for (row, mrow) in mask.iter_mut().zip(m) {
                row.extend(mrow);
            }
        }
        let x = if parts.len() == 1 { parts[0] } else { s.g.concat(&parts, 1)? };
        Ok(Tokens { x, mask })
    }

    /// Learned frequencies of numeric features and all other encoder
    /// parameters, grouped by encoder class.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut num = Vec::new();
        let mut cat = Vec::new();
        let mut proj = Vec::new();
        let mut other = Vec::new();
        for f in &self.features {
            match f {
                FeatureEncoder::Numeric { freq, missing } => {
                    num.push(*freq);
                    other.push(*missing);
                }
                FeatureEncoder::Categorical { table, missing } => {
                    cat.push(*table);
                    other.push(*missing);
                }
                FeatureEncoder::Embedding { proj: p, missing } => {
                    proj.extend([p.up.w, p.down.w]);
                    other.push(*missing);
                }
                FeatureEncoder::MultiEmbedding { proj: p, pad, .. } => {
                    proj.extend([p.up.w, p.down.w]);
                    other.push(*pad);
                }
            }
        }
        other.extend(self.cls);
        vec![("numeric_freq", num), ("categorical_table", cat), ("projector", proj), ("missing", other)]
    }
}
