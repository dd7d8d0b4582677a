use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::assets::AssetCriterion;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical { vocab_size: usize },
    MultiCategorical { vocab_size: usize },
    Embedding { dim: usize },
    MultiEmbedding { dim: usize, max_count: usize },
}

impl FeatureKind {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureKind::Numeric => "numeric",
            FeatureKind::Categorical { .. } => "categorical",
            FeatureKind::MultiCategorical { .. } => "multi_categorical",
            FeatureKind::Embedding { .. } => "embedding",
            FeatureKind::MultiEmbedding { .. } => "multi_embedding",
        }
    }

    /// Tokens this feature contributes to an example.
    pub fn token_count(&self) -> usize {
        match self {
            FeatureKind::MultiEmbedding { max_count, .. } => *max_count,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    #[default]
    Zscore,
    Minmax,
    Identity,
}

/// Numeric normalization. Unset statistics are fitted on load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    #[serde(default)]
    pub method: NormMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    /// Apply `sign(x) * ln(1 + |x|)` before scaling (heavy-tailed counts).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub log1p: bool,
}

impl Normalization {
    fn pre(&self, x: f64) -> f64 {
        if self.log1p {
            x.signum() * x.abs().ln_1p()
        } else {
            x
        }
    }

    fn post_inv(&self, y: f64) -> f64 {
        if self.log1p {
            y.signum() * y.abs().exp_m1()
        } else {
            y
        }
    }

    pub fn is_fitted(&self) -> bool {
        match self.method {
            NormMethod::Zscore => self.mean.is_some() && self.std.is_some(),
            NormMethod::Minmax => self.min.is_some() && self.max.is_some(),
            NormMethod::Identity => true,
        }
    }

    /// Fill in unset statistics from raw observed values.
    pub fn fit(&mut self, raw: &[f64]) {
        let xs: Vec<f64> = raw.iter().map(|&x| self.pre(x)).collect();
        let n = xs.len().max(1) as f64;
        match self.method {
            NormMethod::Zscore => {
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                self.mean.get_or_insert(mean);
                self.std.get_or_insert(var.sqrt());
            }
            NormMethod::Minmax => {
                let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                self.min.get_or_insert(if lo.is_finite() { lo } else { 0.0 });
                self.max.get_or_insert(if hi.is_finite() { hi } else { 1.0 });
            }
            NormMethod::Identity => {}
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let x = self.pre(x);
        match self.method {
            NormMethod::Zscore => {
                let std = self.std.unwrap_or(1.0);
                (x - self.mean.unwrap_or(0.0)) / if std > 0.0 { std } else { 1.0 }
            }
            NormMethod::Minmax => {
                let (lo, hi) = (self.min.unwrap_or(0.0), self.max.unwrap_or(1.0));
                let span = if hi > lo { hi - lo } else { 1.0 };
                (x - lo) / span
            }
            NormMethod::Identity => x,
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        let x = match self.method {
            NormMethod::Zscore => {
                let std = self.std.unwrap_or(1.0);
                y * if std > 0.0 { std } else { 1.0 } + self.mean.unwrap_or(0.0)
            }
            NormMethod::Minmax => {
                let (lo, hi) = (self.min.unwrap_or(0.0), self.max.unwrap_or(1.0));
                let span = if hi > lo { hi - lo } else { 1.0 };
                y * span + lo
            }
            NormMethod::Identity => y,
        };
        self.post_inv(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    /// Source column; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Category tokens; when absent, cells hold integer indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    /// Selection rule applied when a multi-embedding cell holds more than
    /// `max_count` assets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_selection: Option<AssetCriterion>,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        Self::new(name, FeatureKind::Numeric)
    }

    pub fn categorical(name: &str, vocab_size: usize) -> Self {
        Self::new(name, FeatureKind::Categorical { vocab_size })
    }

    pub fn new(name: &str, kind: FeatureKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            column: None,
            normalization: None,
            vocab: None,
            asset_selection: None,
        }
    }

    pub fn column(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization.clone().unwrap_or_default()
    }
}

fn default_gamma() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub classes: usize,
    /// Label tokens in class order; when absent, cells hold class indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    /// Focal-loss focusing parameter.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl TaskSpec {
    pub fn binary(name: &str) -> Self {
        Self {
            name: name.to_string(),
            column: None,
            classes: 2,
            labels: None,
            gamma: default_gamma(),
            class_weights: None,
        }
    }

    pub fn column(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }
}

fn default_missing() -> Vec<String> {
    ["", "?", "NA", "nan", "NaN"].iter().map(|s| s.to_string()).collect()
}

fn default_multi_sep() -> char {
    '|'
}

fn default_delimiter() -> char {
    ','
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_column: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_multi_sep")]
    pub multi_separator: char,
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>, tasks: Vec<TaskSpec>) -> Result<Self> {
        let s = Self {
            features,
            tasks,
            id_column: None,
            timestamp_column: None,
            delimiter: default_delimiter(),
            multi_separator: default_multi_sep(),
            missing_tokens: default_missing(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            let bad = |what: &str| Error::Schema(format!("feature `{}`: {what} must be >= 1", f.name));
            match &f.kind {
                FeatureKind::Numeric => {}
                FeatureKind::Categorical { vocab_size } | FeatureKind::MultiCategorical { vocab_size } => {
                    if *vocab_size < 1 {
                        return Err(bad("vocab_size"));
                    }
                    if let Some(v) = &f.vocab {
                        if v.len() != *vocab_size {
                            return Err(Error::Schema(format!(
                                "feature `{}`: vocab lists {} tokens but vocab_size is {vocab_size}",
                                f.name,
                                v.len()
                            )));
                        }
                    }
                }
                FeatureKind::Embedding { dim } => {
                    if *dim < 1 {
                        return Err(bad("dim"));
                    }
                }
                FeatureKind::MultiEmbedding { dim, max_count } => {
                    if *dim < 1 {
                        return Err(bad("dim"));
                    }
                    if *max_count < 1 {
                        return Err(bad("max_count"));
                    }
                }
            }
        }
        let mut task_names = HashSet::new();
        for t in &self.tasks {
            if !task_names.insert(t.name.as_str()) {
                return Err(Error::Schema(format!("duplicate task name `{}`", t.name)));
            }
            if t.classes < 2 {
                return Err(Error::Schema(format!("task `{}`: class count must be >= 2", t.name)));
            }
            if let Some(l) = &t.labels {
                if l.len() != t.classes {
                    return Err(Error::Schema(format!(
                        "task `{}`: {} labels for {} classes",
                        t.name,
                        l.len(),
                        t.classes
                    )));
                }
            }
            if t.gamma < 0.0 {
                return Err(Error::Schema(format!("task `{}`: gamma must be >= 0", t.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Total token count N of an encoded example.
    pub fn token_count(&self) -> usize {
        self.features.iter().map(|f| f.kind.token_count()).sum()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Same schema restricted to `keep` (by feature name, original order).
    pub fn restrict(&self, keep: &[String]) -> Self {
        let mut s = self.clone();
        s.features.retain(|f| keep.contains(&f.name));
        s
    }
}
