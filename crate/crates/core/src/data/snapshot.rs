use serde::{Deserialize, Serialize};

use crate::data::assets::Asset;
use crate::data::schema::{FeatureKind, FeatureSchema};
use crate::error::{Error, Result};

/// The value of one feature in one example. Numerics are held normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureValue {
    Numeric(Option<f64>),
    Categorical(Option<usize>),
    MultiCategorical(Option<Vec<usize>>),
    Embedding(Option<Vec<f32>>),
    MultiEmbedding(Vec<Asset>),
}

impl FeatureValue {
    pub fn is_missing(&self) -> bool {
        match self {
            FeatureValue::Numeric(v) => v.is_none(),
            FeatureValue::Categorical(v) => v.is_none(),
            FeatureValue::MultiCategorical(v) => v.is_none(),
            FeatureValue::Embedding(v) => v.is_none(),
            FeatureValue::MultiEmbedding(v) => v.is_empty(),
        }
    }

    pub fn missing(kind: &FeatureKind) -> Self {
        match kind {
            FeatureKind::Numeric => FeatureValue::Numeric(None),
            FeatureKind::Categorical { .. } => FeatureValue::Categorical(None),
            FeatureKind::MultiCategorical { .. } => FeatureValue::MultiCategorical(None),
            FeatureKind::Embedding { .. } => FeatureValue::Embedding(None),
            FeatureKind::MultiEmbedding { .. } => FeatureValue::MultiEmbedding(Vec::new()),
        }
    }
}

/// One example: a value per schema feature plus optional per-task labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub timestamp: Option<f64>,
    pub values: Vec<FeatureValue>,
    #[serde(default)]
    pub labels: Vec<Option<usize>>,
}

impl Snapshot {
    pub fn all_missing(schema: &FeatureSchema) -> Self {
        Self {
            id: None,
            timestamp: None,
            values: schema.features.iter().map(|f| FeatureValue::missing(&f.kind)).collect(),
            labels: vec![None; schema.tasks.len()],
        }
    }

    pub fn label(&self, task: usize) -> Option<usize> {
        self.labels.get(task).copied().flatten()
    }

    /// Checks every value against the schema kind, vocabulary and dims.
    pub fn validate(&self, schema: &FeatureSchema, row: usize) -> Result<()> {
        if self.values.len() != schema.features.len() {
            return Err(Error::Data {
                row,
                feature: String::new(),
                message: format!("{} values for {} features", self.values.len(), schema.features.len()),
            });
        }
        for (f, v) in schema.features.iter().zip(&self.values) {
            let err = |message: String| Error::Data {
                row,
                feature: f.name.clone(),
                message,
            };
            match (&f.kind, v) {
                (FeatureKind::Numeric, FeatureValue::Numeric(x)) => {
                    if x.is_some_and(|x| !x.is_finite()) {
                        return Err(err("non-finite numeric value".into()));
                    }
                }
                (FeatureKind::Categorical { vocab_size }, FeatureValue::Categorical(c)) => {
                    if let Some(c) = c {
                        if c >= vocab_size {
                            return Err(err(format!("category index {c} >= vocab_size {vocab_size}")));
                        }
                    }
                }
                (FeatureKind::MultiCategorical { vocab_size }, FeatureValue::MultiCategorical(cs)) => {
                    for c in cs.iter().flatten() {
                        if c >= vocab_size {
                            return Err(err(format!("category index {c} >= vocab_size {vocab_size}")));
                        }
                    }
                }
                (FeatureKind::Embedding { dim }, FeatureValue::Embedding(e)) => {
                    if let Some(e) = e {
                        if e.len() != *dim {
                            return Err(err(format!("embedding has dim {} but schema says {dim}", e.len())));
                        }
                    }
                }
                (FeatureKind::MultiEmbedding { dim, max_count }, FeatureValue::MultiEmbedding(a)) => {
                    if a.len() > *max_count {
                        return Err(err(format!("{} assets exceed max_count {max_count}", a.len())));
                    }
                    if let Some(bad) = a.iter().find(|a| a.vector.len() != *dim) {
                        return Err(err(format!(
                            "asset embedding has dim {} but schema says {dim}",
                            bad.vector.len()
                        )));
                    }
                }
                (kind, _) => return Err(err(format!("value does not match kind {}", kind.label()))),
            }
        }
        for (t, l) in schema.tasks.iter().zip(&self.labels) {
            if let Some(l) = l {
                if *l >= t.classes {
                    return Err(Error::Data {
                        row,
                        feature: t.name.clone(),
                        message: format!("label {l} >= class count {}", t.classes),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A schema with its examples. Immutable once loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub snapshots: Vec<Snapshot>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            snapshots: idx.iter().map(|&i| self.snapshots[i].clone()).collect(),
        }
    }

    /// Labels of `task` (`None` where missing).
    pub fn labels(&self, task: usize) -> Vec<Option<usize>> {
        self.snapshots.iter().map(|s| s.label(task)).collect()
    }

    /// Keep only the named features (in schema order).
    pub fn restrict(&self, keep: &[String]) -> Dataset {
        let schema = self.schema.restrict(keep);
        let cols: Vec<usize> = self
            .schema
            .features
            .iter()
            .enumerate()
            .filter(|(_, f)| keep.contains(&f.name))
            .map(|(i, _)| i)
            .collect();
        Dataset {
            schema,
            snapshots: self
                .snapshots
                .iter()
                .map(|s| Snapshot {
                    values: cols.iter().map(|&c| s.values[c].clone()).collect(),
                    ..s.clone()
                })
                .collect(),
        }
    }
}
