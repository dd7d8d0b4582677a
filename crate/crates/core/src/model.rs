//! Model configuration and the assembled model: encoder, trunk,
//! reconstruction decoders and per-task output heads over one parameter
//! store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureSchema, Snapshot};
use crate::encoder::{Encoder, Tokens};
use crate::error::{Error, Result};
use crate::graph::{GeluKind, Var};
use crate::nn::{FeedForward, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::substream;
use crate::sngp::{mean_field_probs, softmax, SngpConfig, SngpHead};
use crate::tensor::Real;
use crate::trunk::{Mode, Pooling, Trunk, TrunkOut, TrunkShape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Sngp,
    /// Plain linear softmax head.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// ISA projected width; defaults to `4 d`.
    pub d_prime: Option<usize>,
    pub isa_heads: usize,
    /// ISA feed-forward width; defaults to `d_prime`.
    pub isa_ffn_dim: Option<usize>,
    pub isa: bool,
    pub spectral: bool,
    pub gelu: GeluKind,
    pub pooling: Pooling,
    /// Hidden width of embedding projectors; defaults to `d`.
    pub projector_hidden: Option<usize>,
    /// Initial numeric frequency ladder `[lo, hi]`.
    pub freq_range: (f64, f64),
    pub head: HeadKind,
    pub sngp: SngpConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 8,
            layers: 6,
            ffn_dim: 512,
            d_prime: None,
            isa_heads: 1,
            isa_ffn_dim: None,
            isa: true,
            spectral: true,
            gelu: GeluKind::Tanh,
            pooling: Pooling::Mean,
            projector_hidden: None,
            freq_range: (0.05, 5.0),
            head: HeadKind::Sngp,
            sngp: SngpConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn d_prime(&self) -> usize {
        self.d_prime.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d % 2 != 0 {
            return bad(format!("model.d must be even and >= 2, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("model.d={} must be divisible by model.heads={}", self.d, self.heads));
        }
        if self.ffn_dim == 0 {
            return bad("model.ffn_dim must be >= 1".into());
        }
        let dp = self.d_prime();
        if self.isa && (dp == 0 || self.isa_heads == 0 || dp % self.isa_heads != 0) {
            return bad(format!("model.d_prime={dp} must be >= 1 and divisible by model.isa_heads={}", self.isa_heads));
        }
        if self.isa_ffn_dim == Some(0) || self.projector_hidden == Some(0) {
            return bad("hidden widths must be >= 1".into());
        }
        let (lo, hi) = self.freq_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("model.freq_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"));
        }
        self.sngp.validate()
    }

    /// Stable digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug)]
pub enum TaskHead {
    Sngp(SngpHead),
    Dense(Linear),
}

impl TaskHead {
    pub fn trainable(&self) -> Vec<ParamId> {
        match self {
            TaskHead::Sngp(h) => vec![h.beta.w],
            TaskHead::Dense(l) => [Some(l.w), l.b].into_iter().flatten().collect(),
        }
    }
}

/// Reconstruction decoders reading per-feature trunk tokens, plus the
/// projection used by the contrastive term.
#[derive(Clone, Debug)]
pub struct Decoders {
    /// Shared by all numeric features.
    pub numeric: Option<FeedForward>,
    /// One per non-numeric feature (output widths differ by feature).
    pub per_feature: Vec<Option<FeedForward>>,
    pub contrastive: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub task: String,
    pub probs: Vec<f64>,
    pub variance: Option<f64>,
    pub calibrated: bool,
}

/// Per-task head outputs for a batch, row-major.
pub struct HeadOutputs {
    pub logits: Vec<f64>,
    pub classes: usize,
    /// Random features `[B, d_rf]` for SNGP heads.
    pub phi: Option<(Vec<f64>, usize)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub trunk: Trunk,
    pub decoders: Decoders,
    pub heads: Vec<TaskHead>,
}

/// Forward state of one pass: encoded tokens and trunk outputs.
pub struct Forward {
    pub tokens: Tokens,
    pub out: TrunkOut,
}

impl Model {
    pub fn new(config: &ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut store = ParamStore::<f32>::new();
        let mut rng = substream(seed, "init");
        let mut sngp_rng = substream(seed, "sngp");
        let c = config;
        let encoder = Encoder::new(
            &mut store,
            schema,
            c.d,
            c.projector_hidden.unwrap_or(c.d),
            c.freq_range,
            c.gelu,
            c.pooling == Pooling::Cls,
            &mut rng,
        )?;
        let shape = TrunkShape {
            n: encoder.token_count(),
            d: c.d,
            layers: c.layers,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            d_prime: c.d_prime(),
            isa_heads: c.isa_heads,
            isa_ffn_dim: c.isa_ffn_dim.unwrap_or(c.d_prime()),
            isa: c.isa,
            spectral: c.spectral,
            gelu: c.gelu,
        };
        let trunk = Trunk::new(&mut store, &shape, c.pooling, &mut rng)?;
        let decoders = Self::build_decoders(&mut store, schema, c, &mut rng);
        let heads = schema
            .tasks
            .iter()
            .map(|t| {
                let name = format!("head.{}", t.name);
                match c.head {
                    HeadKind::Sngp => TaskHead::Sngp(SngpHead::new(&mut store, &name, c.d, t.classes, &c.sngp, &mut sngp_rng)),
                    HeadKind::Dense => TaskHead::Dense(Linear::new(&mut store, &name, c.d, t.classes, true, false, &mut rng)),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            schema: schema.clone(),
            store,
            encoder,
            trunk,
            decoders,
            heads,
        })
    }

    fn build_decoders<R: Rng + ?Sized>(store: &mut ParamStore<f32>, schema: &FeatureSchema, c: &ModelConfig, rng: &mut R) -> Decoders {
        let d = c.d;
        let has_numeric = schema.features.iter().any(|f| f.kind == FeatureKind::Numeric);
        let numeric = has_numeric.then(|| FeedForward::new(store, "dec.numeric", d, d, 1, false, c.gelu, rng));
        let per_feature = schema
            .features
            .iter()
            .map(|f| {
                let out = match f.kind {
                    FeatureKind::Numeric => return None,
                    FeatureKind::Categorical { vocab_size } | FeatureKind::MultiCategorical { vocab_size } => vocab_size,
                    FeatureKind::Embedding { dim } | FeatureKind::MultiEmbedding { dim, .. } => dim,
                };
                Some(FeedForward::new(store, &format!("dec.{}", f.name), d, d, out, false, c.gelu, rng))
            })
            .collect();
        let contrastive = FeedForward::new(store, "dec.contrastive", d, d, d, false, c.gelu, rng);
        Decoders {
            numeric,
            per_feature,
            contrastive,
        }
    }

    /// Encode and run the trunk on a batch over any store cast of this model.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, batch: &[&Snapshot], mode: Mode) -> Result<Forward> {
        let tokens = self.encoder.encode(s, batch, &self.schema)?;
        let out = self.trunk.forward(s, &tokens, mode)?;
        Ok(Forward { tokens, out })
    }

    /// Training-time logits of task `t` (no mean-field adjustment).
    pub fn logits<T: Real>(&self, s: &mut Session<'_, T>, pooled: Var, t: usize) -> Result<Var> {
        match &self.heads[t] {
            TaskHead::Sngp(h) => {
                let phi = h.features(s, pooled)?;
                h.logits(s, phi)
            }
            TaskHead::Dense(l) => l.forward(s, pooled),
        }
    }

    pub fn spectral_linears(&self) -> Vec<&Linear> {
        self.trunk.linears().into_iter().filter(|l| l.is_spectral()).collect()
    }

    /// Advance every spectral layer's power iteration by `iters` steps.
    pub fn refresh_spectral(&mut self, iters: usize) {
        let ls: Vec<Linear> = self.spectral_linears().into_iter().cloned().collect();
        for l in ls {
            l.refresh_spectral(&mut self.store, iters);
        }
    }

    /// Trainable parameters of the task heads.
    pub fn head_params(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(TaskHead::trainable).collect()
    }

    /// Pooled embeddings `[B, d]` in inference mode.
    pub fn embed(&self, batch: &[&Snapshot]) -> Result<Vec<Vec<f32>>> {
        let mut s = Session::new(&self.store);
        let f = self.forward(&mut s, batch, Mode::Inference)?;
        let d = self.config.d;
        Ok(s.g.value(f.out.pooled).data().chunks(d).map(<[f32]>::to_vec).collect())
    }

    /// Raw head outputs for every task in inference mode.
    pub fn head_outputs(&self, batch: &[&Snapshot]) -> Result<Vec<HeadOutputs>> {
        let mut s = Session::new(&self.store);
        let f = self.forward(&mut s, batch, Mode::Inference)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for (t, head) in self.heads.iter().enumerate() {
            let classes = self.schema.tasks[t].classes;
            match head {
                TaskHead::Sngp(h) => {
                    let phi = h.features(&mut s, f.out.pooled)?;
                    let lg = h.logits(&mut s, phi)?;
                    out.push(HeadOutputs {
                        logits: s.g.value(lg).data().iter().map(|&x| x as f64).collect(),
                        classes,
                        phi: Some((s.g.value(phi).data().iter().map(|&x| x as f64).collect(), h.config.d_rf)),
                    });
                }
                TaskHead::Dense(l) => {
                    let lg = l.forward(&mut s, f.out.pooled)?;
                    out.push(HeadOutputs {
                        logits: s.g.value(lg).data().iter().map(|&x| x as f64).collect(),
                        classes,
                        phi: None,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Calibrated predictions `[row][task]`. SNGP heads without a fitted
    /// precision fall back to plain softmax with `calibrated = false`.
    pub fn predict(&self, batch: &[&Snapshot]) -> Result<Vec<Vec<Prediction>>> {
        let outs = self.head_outputs(batch)?;
        let mut rows: Vec<Vec<Prediction>> = vec![Vec::with_capacity(outs.len()); batch.len()];
        for (t, o) in outs.iter().enumerate() {
            let task = &self.schema.tasks[t].name;
            let var = match (&self.heads[t], &o.phi) {
                (TaskHead::Sngp(h), Some((phi, _))) => h.variance(&self.store, phi)?,
                _ => None,
            };
            let kappa = self.config.sngp.kappa;
            for (r, lg) in o.logits.chunks(o.classes).enumerate() {
                let v = var.as_ref().map(|v| v[r]);
                let probs = match v {
                    Some(v) => mean_field_probs(lg, v, kappa),
                    None => softmax(lg),
                };
                rows[r].push(Prediction {
                    task: task.clone(),
                    probs,
                    variance: v,
                    calibrated: v.is_some(),
                });
            }
        }
        Ok(rows)
    }

    /// [`Model::predict`] over many snapshots in fixed-size chunks.
    pub fn predict_all(&self, snaps: &[&Snapshot], chunk: usize) -> Result<Vec<Vec<Prediction>>> {
        let mut out = Vec::with_capacity(snaps.len());
        for c in snaps.chunks(chunk.max(1)) {
            out.extend(self.predict(c)?);
        }
        Ok(out)
    }

    /// Fit every SNGP head's precision on `snaps` (inference mode).
    pub fn fit_covariance(&mut self, snaps: &[&Snapshot], chunk: usize) -> Result<()> {
        let n_tasks = self.heads.len();
        let mut phis: Vec<Vec<f64>> = vec![Vec::new(); n_tasks];
        let mut ps: Vec<Vec<f64>> = vec![Vec::new(); n_tasks];
        for c in snaps.chunks(chunk.max(1)) {
            for (t, o) in self.head_outputs(c)?.into_iter().enumerate() {
                let Some((phi, _)) = o.phi else { continue };
                phis[t].extend(phi);
                for lg in o.logits.chunks(o.classes) {
                    let p = softmax(lg);
                    ps[t].push(p.iter().copied().fold(0.0, f64::max));
                }
            }
        }
        for (t, head) in self.heads.iter_mut().enumerate() {
            if let TaskHead::Sngp(h) = head {
                h.fit_covariance(&mut self.store, &phis[t], &ps[t])?;
            }
        }
        Ok(())
    }

    /// Forget cached factorizations after the store was replaced.
    pub fn reset_caches(&mut self) {
        for h in &mut self.heads {
            if let TaskHead::Sngp(h) = h {
                h.reset_cache();
            }
        }
    }
}
