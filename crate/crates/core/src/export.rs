//! Pooled-embedding export: a raw little-endian `f32` sidecar, a
//! tab-separated index and an optional 2-D PCA projection for plotting.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Snapshot;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub rows: usize,
    pub dim: usize,
    pub vectors: PathBuf,
    pub index: PathBuf,
    pub pca: Option<PathBuf>,
}

/// Embeds `snaps` in chunks of `chunk` rows.
pub fn embed_all(model: &Model, snaps: &[&Snapshot], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(snaps.len());
    for c in snaps.chunks(chunk.max(1)) {
        out.extend(model.embed(c)?);
    }
    Ok(out)
}

/// Projection onto the two leading principal components (descending
/// eigenvalue order; each axis signed so its largest-magnitude loading is
/// positive).
pub fn pca_2d(x: &[Vec<f32>]) -> Vec<[f64; 2]> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j] as f64);
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    let cov = c.transpose() * &c / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 { v.iter().map(|x| -x).collect() } else { v }
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = c.row(i).iter().zip(axis).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

fn sibling(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<prefix>.f32` (row-major `rows x d`), `<prefix>.tsv` with
/// `row id label` per line (label of the first task, blank if unknown) and,
/// when `pca` is set, `<prefix>.pca.tsv` with `row id pc1 pc2`.
pub fn export_embeddings(model: &Model, snaps: &[&Snapshot], chunk: usize, prefix: &Path, pca: bool) -> Result<ExportSummary> {
    let emb = embed_all(model, snaps, chunk)?;
    let vectors = sibling(prefix, ".f32");
    let index = sibling(prefix, ".tsv");
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| Error::io(p, e)
    };
    let mut w = BufWriter::new(std::fs::File::create(&vectors).map_err(io(&vectors))?);
    for row in &emb {
        for x in row {
            w.write_all(&x.to_le_bytes()).map_err(io(&vectors))?;
        }
    }
    w.flush().map_err(io(&vectors))?;
    let id = |i: usize| snaps[i].id.clone().unwrap_or_else(|| i.to_string());
    let mut w = BufWriter::new(std::fs::File::create(&index).map_err(io(&index))?);
    writeln!(w, "row\tid\tlabel").map_err(io(&index))?;
    for i in 0..snaps.len() {
        let label = snaps[i].label(0).map(|l| l.to_string()).unwrap_or_default();
        writeln!(w, "{i}\t{}\t{label}", id(i)).map_err(io(&index))?;
    }
    w.flush().map_err(io(&index))?;
    let pca_path = if pca {
        let p = sibling(prefix, ".pca.tsv");
        let mut w = BufWriter::new(std::fs::File::create(&p).map_err(io(&p))?);
        writeln!(w, "row\tid\tpc1\tpc2").map_err(io(&p))?;
        for (i, q) in pca_2d(&emb).iter().enumerate() {
            writeln!(w, "{i}\t{}\t{}\t{}", id(i), q[0], q[1]).map_err(io(&p))?;
        }
        w.flush().map_err(io(&p))?;
        Some(p)
    } else {
        None
    };
    Ok(ExportSummary {
        rows: emb.len(),
        dim: model.config.d,
        vectors,
        index,
        pca: pca_path,
    })
}

/// Reads a `.f32` sidecar back as rows of width `dim`.
pub fn read_vectors(path: &Path, dim: usize) -> Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if dim == 0 || bytes.len() % (4 * dim) != 0 {
        return Err(Error::Invalid(format!("{} bytes is not a whole number of {dim}-wide rows", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4 * dim)
        .map(|r| r.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        .collect())
}
