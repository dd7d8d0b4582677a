//! Delimited-text datasets with an optional little-endian f32 sidecar for
//! embedding features.
//!
//! Cell formats:
//! * numeric: a real number
//! * categorical: a vocabulary token, or an integer index when the schema has
//!   no vocabulary
//! * multi-categorical: tokens joined by the schema's `multi_separator`; an
//!   empty cell is the empty set
//! * embedding: the element offset of the vector inside the sidecar
//! * multi-embedding: `offset[:timestamp[:engagement]]` entries joined by the
//!   `multi_separator`; an empty cell means no assets
//!
//! Any of the schema's `missing_tokens` marks a missing value (for
//! multi-valued features the empty cell is a value, not a missing marker).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::data::assets::{select_top_k_assets, Asset};
use crate::data::schema::{FeatureKind, FeatureSchema, FeatureSpec};
use crate::data::snapshot::{Dataset, FeatureValue, Snapshot};
use crate::error::{Error, Result};

/// Reads a little-endian `f32` embedding sidecar.
pub fn read_sidecar(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "embedding sidecar {} has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

struct Ctx<'a> {
    schema: &'a FeatureSchema,
    sidecar: Option<&'a [f32]>,
}

impl Ctx<'_> {
    fn is_missing(&self, cell: &str) -> bool {
        self.schema.missing_tokens.iter().any(|m| m == cell)
    }

    fn category(&self, f: &FeatureSpec, tok: &str, vocab_size: usize, row: usize) -> Result<usize> {
        let err = |message: String| Error::Data {
            row,
            feature: f.name.clone(),
            message,
        };
        let idx = match &f.vocab {
            Some(v) => v
                .iter()
                .position(|t| t == tok)
                .ok_or_else(|| err(format!("token `{tok}` not in vocabulary")))?,
            None => tok
                .parse::<usize>()
                .map_err(|_| err(format!("`{tok}` is not a category index")))?,
        };
        if idx >= vocab_size {
            return Err(err(format!("category index {idx} >= vocab_size {vocab_size}")));
        }
        Ok(idx)
    }

    fn vector(&self, f: &FeatureSpec, off: &str, dim: usize, row: usize) -> Result<Vec<f32>> {
        let err = |message: String| Error::Data {
            row,
            feature: f.name.clone(),
            message,
        };
        let side = self
            .sidecar
            .ok_or_else(|| err("embedding feature present but no embeddings sidecar given".into()))?;
        let off: usize = off
            .trim()
            .parse()
            .map_err(|_| err(format!("`{off}` is not a sidecar offset")))?;
        side.get(off..off + dim)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| err(format!("sidecar range {off}..{} out of bounds", off + dim)))
    }

    fn parse(&self, f: &FeatureSpec, cell: &str, row: usize) -> Result<FeatureValue> {
        let cell = cell.trim();
        let sep = self.schema.multi_separator;
        let missing = self.is_missing(cell);
        Ok(match &f.kind {
            FeatureKind::Numeric => FeatureValue::Numeric(if missing {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|_| Error::Data {
                    row,
                    feature: f.name.clone(),
                    message: format!("`{cell}` is not a number"),
                })?)
            }),
            FeatureKind::Categorical { vocab_size } => FeatureValue::Categorical(if missing {
                None
            } else {
                Some(self.category(f, cell, *vocab_size, row)?)
            }),
            FeatureKind::MultiCategorical { vocab_size } => {
                if cell.is_empty() {
                    FeatureValue::MultiCategorical(Some(Vec::new()))
                } else if missing {
                    FeatureValue::MultiCategorical(None)
                } else {
                    let mut v = cell
                        .split(sep)
                        .map(|t| self.category(f, t.trim(), *vocab_size, row))
                        .collect::<Result<Vec<_>>>()?;
                    v.sort_unstable();
                    v.dedup();
                    FeatureValue::MultiCategorical(Some(v))
                }
            }
            FeatureKind::Embedding { dim } => FeatureValue::Embedding(if missing {
                None
            } else {
                Some(self.vector(f, cell, *dim, row)?)
            }),
            FeatureKind::MultiEmbedding { dim, max_count } => {
                if missing || cell.is_empty() {
                    return Ok(FeatureValue::MultiEmbedding(Vec::new()));
                }
                let mut assets = Vec::new();
                for entry in cell.split(sep) {
                    let mut parts = entry.split(':');
                    let vector = self.vector(f, parts.next().unwrap_or(""), *dim, row)?;
                    let mut num = |what: &str| -> Result<f64> {
                        match parts.next() {
                            None => Ok(0.0),
                            Some(t) => t.trim().parse().map_err(|_| Error::Data {
                                row,
                                feature: f.name.clone(),
                                message: format!("bad asset {what} `{t}`"),
                            }),
                        }
                    };
                    let timestamp = num("timestamp")?;
                    let engagement = num("engagement")?;
                    assets.push(Asset {
                        vector,
                        timestamp,
                        engagement,
                    });
                }
                let criterion = f.asset_selection.unwrap_or_default();
                FeatureValue::MultiEmbedding(select_top_k_assets(&assets, *max_count, criterion))
            }
        })
    }
}

/// Reads a dataset. Numerics are normalized with the schema's statistics;
/// statistics the schema leaves unset are fitted on this file and recorded in
/// the returned dataset's schema.
pub fn load_dataset(data_path: &Path, schema_path: &Path, embeddings: Option<&Path>) -> Result<Dataset> {
    let schema = FeatureSchema::load(schema_path)?;
    let text = std::fs::read_to_string(data_path).map_err(|e| Error::io(data_path, e))?;
    let sidecar = embeddings.map(read_sidecar).transpose()?;
    parse_dataset(&text, schema, sidecar.as_deref())
}

pub fn parse_dataset(text: &str, mut schema: FeatureSchema, sidecar: Option<&[f32]>) -> Result<Dataset> {
    schema.validate()?;
    if text.trim().is_empty() {
        return Ok(Dataset {
            schema,
            snapshots: Vec::new(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in data header")))
    };
    let feat_cols = schema.features.iter().map(|f| col(f.column())).collect::<Result<Vec<_>>>()?;
    let task_cols = schema.tasks.iter().map(|t| col(t.column())).collect::<Result<Vec<_>>>()?;
    let id_col = schema.id_column.as_deref().map(col).transpose()?;
    let ts_col = schema.timestamp_column.as_deref().map(col).transpose()?;

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;

    // Raw numerics first: unset normalization statistics are fitted on them.
    let ctx = Ctx {
        schema: &schema,
        sidecar,
    };
    let mut rows: Vec<Snapshot> = Vec::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let row = r + 1;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let values = schema
            .features
            .iter()
            .zip(&feat_cols)
            .map(|(f, &c)| ctx.parse(f, get(c), row))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = Vec::with_capacity(schema.tasks.len());
        for (t, &c) in schema.tasks.iter().zip(&task_cols) {
            let cell = get(c).trim();
            if ctx.is_missing(cell) {
                labels.push(None);
                continue;
            }
            let err = |message: String| Error::Data {
                row,
                feature: t.name.clone(),
                message,
            };
            let l = match &t.labels {
                Some(ls) => ls
                    .iter()
                    .position(|x| x == cell)
                    .ok_or_else(|| err(format!("label `{cell}` not among task labels")))?,
                None => cell
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.fract() == 0.0 && *x >= 0.0)
                    .map(|x| x as usize)
                    .ok_or_else(|| err(format!("`{cell}` is not a class index")))?,
            };
            if l >= t.classes {
                return Err(err(format!("label {l} >= class count {}", t.classes)));
            }
            labels.push(Some(l));
        }
        let timestamp = match ts_col {
            Some(c) => {
                let cell = get(c).trim();
                if ctx.is_missing(cell) {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|_| Error::Data {
                        row,
                        feature: "timestamp".into(),
                        message: format!("`{cell}` is not a number"),
                    })?)
                }
            }
            None => None,
        };
        rows.push(Snapshot {
            id: id_col.map(|c| get(c).trim().to_string()),
            timestamp,
            values,
            labels,
        });
    }

    for (fi, f) in schema.features.iter_mut().enumerate() {
        if f.kind != FeatureKind::Numeric {
            continue;
        }
        let mut norm = f.normalization();
        if !norm.is_fitted() {
            let raw: Vec<f64> = rows
                .iter()
                .filter_map(|s| match s.values[fi] {
                    FeatureValue::Numeric(x) => x,
                    _ => None,
                })
                .collect();
            norm.fit(&raw);
        }
        for s in &mut rows {
            if let FeatureValue::Numeric(Some(x)) = &mut s.values[fi] {
                *x = norm.apply(*x);
            }
        }
        f.normalization = Some(norm);
    }
    Ok(Dataset {
        schema,
        snapshots: rows,
    })
}

fn fmt_vector(side: &mut Vec<f32>, v: &[f32]) -> String {
    let off = side.len();
    side.extend_from_slice(v);
    off.to_string()
}

/// Writes `ds` back out: a schema (with fitted normalization), the data file
/// with raw (de-normalized) numerics, and the embedding sidecar when the
/// schema has embedding features.
pub fn save_dataset(ds: &Dataset, data_path: &Path, schema_path: &Path, embeddings: Option<&Path>) -> Result<()> {
    let schema = &ds.schema;
    let sep = schema.multi_separator.to_string();
    let mut side: Vec<f32> = Vec::new();
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_path(data_path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", data_path.display())))?;
    let mut header: Vec<String> = schema.features.iter().map(|f| f.column().to_string()).collect();
    header.extend(schema.tasks.iter().map(|t| t.column().to_string()));
    header.extend(schema.id_column.clone());
    header.extend(schema.timestamp_column.clone());
    wtr.write_record(&header)?;
    let missing = schema.missing_tokens.iter().find(|t| !t.is_empty()).cloned().unwrap_or_else(|| "?".into());
    for s in &ds.snapshots {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for (f, v) in schema.features.iter().zip(&s.values) {
            let tok = |i: usize| match &f.vocab {
                Some(v) => v[i].clone(),
                None => i.to_string(),
            };
            rec.push(match v {
                FeatureValue::Numeric(None)
                | FeatureValue::Categorical(None)
                | FeatureValue::MultiCategorical(None)
                | FeatureValue::Embedding(None) => missing.clone(),
                FeatureValue::Numeric(Some(x)) => format!("{}", f.normalization().invert(*x)),
                FeatureValue::Categorical(Some(c)) => tok(*c),
                FeatureValue::MultiCategorical(Some(cs)) => cs.iter().map(|&c| tok(c)).collect::<Vec<_>>().join(&sep),
                FeatureValue::Embedding(Some(e)) => fmt_vector(&mut side, e),
                FeatureValue::MultiEmbedding(a) => a
                    .iter()
                    .map(|a| format!("{}:{}:{}", fmt_vector(&mut side, &a.vector), a.timestamp, a.engagement))
                    .collect::<Vec<_>>()
                    .join(&sep),
            });
        }
        for (t, l) in schema.tasks.iter().zip(&s.labels) {
            rec.push(match (l, &t.labels) {
                (None, _) => missing.clone(),
                (Some(l), Some(ls)) => ls[*l].clone(),
                (Some(l), None) => l.to_string(),
            });
        }
        if schema.id_column.is_some() {
            rec.push(s.id.clone().unwrap_or_default());
        }
        if schema.timestamp_column.is_some() {
            rec.push(s.timestamp.map(|t| t.to_string()).unwrap_or_else(|| missing.clone()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(data_path, e))?;
    schema.save(schema_path)?;
    if !side.is_empty() || embeddings.is_some() {
        let path = embeddings.ok_or_else(|| {
            Error::Invalid("dataset has embedding features; an embeddings sidecar path is required".into())
        })?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let bytes: Vec<u8> = side.iter().flat_map(|x| x.to_le_bytes()).collect();
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
