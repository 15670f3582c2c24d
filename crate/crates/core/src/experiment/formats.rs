//! On-disk formats of pipeline artifacts.
//!
//! Line-delimited JSON files open with a header record carrying
//! `format_version` and `kind`. Matrices are stored as a small binary
//! container (magic, rows, cols, little-endian f64). Floats in text files
//! use shortest round-trip formatting, so every artifact reloads exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unitizer::Codebook;

pub const FORMAT_VERSION: u32 = 1;
const MATRIX_MAGIC: &[u8; 8] = b"S2UTMAT1";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn jsonl_string<T: Serialize>(kind: &str, records: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
    })?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, records: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, jsonl_string(kind, records)?.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.kind != kind || header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: expected {kind} v{FORMAT_VERSION}, found {} v{}",
            path.display(),
            header.kind,
            header.format_version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok(out)
}

pub fn matrix_bytes(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(mut bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |m: &str| Error::Format(format!("matrix: {m}"));
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MATRIX_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 8];
    bytes.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    let rows = u64::from_le_bytes(word) as usize;
    bytes.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    let cols = u64::from_le_bytes(word) as usize;
    if bytes.len() != 8 * rows * cols {
        return Err(bad("size does not match shape"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_atomic(path, &matrix_bytes(m))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    matrix_from_bytes(&std::fs::read(path)?)
}

/// Codebook as text: a `k dim fit_seed inertia` line, then one centroid per line.
pub fn codebook_string(cb: &Codebook) -> String {
    let mut out = format!(
        "# s2ut codebook v{FORMAT_VERSION}\n{} {} {} {}\n",
        cb.k(),
        cb.dim(),
        cb.fit_seed,
        cb.inertia
    );
    for row in cb.centroids.rows() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_codebook(text: &str) -> Result<Codebook> {
    let bad = |m: &str| Error::Format(format!("codebook: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(&*format!("# s2ut codebook v{FORMAT_VERSION}")) {
        return Err(bad("missing header"));
    }
    let meta: Vec<&str> = lines.next().ok_or_else(|| bad("missing shape line"))?.split(' ').collect();
    if meta.len() != 4 {
        return Err(bad("shape line needs 4 fields"));
    }
    let k: usize = meta[0].parse().map_err(|_| bad("k"))?;
    let dim: usize = meta[1].parse().map_err(|_| bad("dim"))?;
    let seed: u64 = meta[2].parse().map_err(|_| bad("fit_seed"))?;
    let inertia: f64 = meta[3].parse().map_err(|_| bad("inertia"))?;
    let mut data = Vec::with_capacity(k * dim);
    for line in lines.by_ref().take(k) {
        let row: Vec<f64> = line
            .split(' ')
            .map(|x| x.parse().map_err(|_| bad("centroid value")))
            .collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(bad("centroid has the wrong dimension"));
        }
        data.extend(row);
    }
    if data.len() != k * dim || lines.next().is_some() {
        return Err(bad("wrong number of centroids"));
    }
    let centroids = Array2::from_shape_vec((k, dim), data).map_err(|e| bad(&e.to_string()))?;
    Codebook::new(centroids, seed, inertia)
}
