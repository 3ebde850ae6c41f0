//! Binary embedding files and JSON-lines task manifests.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! magic        5 bytes  "SELX1"
//! d            u32
//! n_items      u32
//! n_conditions u32
//! n_items records:
//!   item_id    u64
//!   label      u8
//!   age        f32
//!   sex        u8
//!   laterality u8
//!   condition  u32      (u32::MAX for No-Finding)
//!   embedding  d x f32
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ClinicalFeatures, ItemStore, LabeledEmbedding, Task};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 5] = b"SELX1";
const HEADER_LEN: usize = 5 + 12;

fn record_len(d: usize) -> usize {
    8 + 1 + 4 + 1 + 1 + 4 + 4 * d
}

/// Serializes a store. Embedding values must be representable as `f32`
/// to round-trip exactly.
pub fn write_store(store: &ItemStore, out: &mut impl Write) -> Result<()> {
    let d = store.dim();
    out.write_all(EMBEDDING_MAGIC)?;
    out.write_all(&(d as u32).to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    out.write_all(&store.n_conditions().to_le_bytes())?;
    let mut rec = Vec::with_capacity(record_len(d));
    for item in store.items() {
        rec.clear();
        rec.extend_from_slice(&item.item_id.to_le_bytes());
        rec.push(item.label);
        rec.extend_from_slice(&(item.clinical.age as f32).to_le_bytes());
        rec.push(item.clinical.sex);
        rec.push(item.clinical.laterality);
        rec.extend_from_slice(&item.condition.to_le_bytes());
        for &x in &item.embedding {
            rec.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out.write_all(&rec)?;
    }
    Ok(())
}

/// Parses an embedding file image. `origin` names the source in errors.
pub fn read_store(bytes: &[u8], origin: &str) -> Result<ItemStore> {
    let err = |reason: String| Error::load(origin, reason);
    if bytes.len() < HEADER_LEN {
        return Err(err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..5] != EMBEDDING_MAGIC {
        return Err(err(format!(
            "bad magic {:?}, expected \"SELX1\"",
            String::from_utf8_lossy(&bytes[..5])
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let d = u32_at(5) as usize;
    let n_items = u32_at(9) as usize;
    let n_conditions = u32_at(13);
    if d == 0 {
        return Err(err("header declares d = 0".into()));
    }
    let rlen = record_len(d);
    let body = &bytes[HEADER_LEN..];
    let expected = rlen
        .checked_mul(n_items)
        .ok_or_else(|| err("header sizes overflow".into()))?;
    if body.len() < expected {
        let complete = body.len() / rlen;
        let partial_floats = (body.len() % rlen).saturating_sub(rlen - 4 * d) / 4;
        return Err(err(format!(
            "truncated: header declares {n_items} records of d={d}, record {complete} is incomplete \
             ({partial_floats} of {d} embedding floats present)"
        )));
    }
    if body.len() > expected {
        return Err(err(format!(
            "{} trailing bytes after {n_items} records (dimension disagreement?)",
            body.len() - expected
        )));
    }
    let mut items = Vec::with_capacity(n_items);
    for (i, rec) in body.chunks_exact(rlen).enumerate() {
        let item_id = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let label = rec[8];
        let age = f32::from_le_bytes(rec[9..13].try_into().unwrap()) as f64;
        let sex = rec[13];
        let laterality = rec[14];
        let condition = u32::from_le_bytes(rec[15..19].try_into().unwrap());
        let embedding: Vec<f64> = rec[19..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(j) = embedding.iter().position(|x| !x.is_finite()) {
            return Err(err(format!(
                "item index {i} (id {item_id}): non-finite embedding value at position {j}"
            )));
        }
        if label > 1 {
            return Err(err(format!("item index {i}: label {label} not in {{0,1}}")));
        }
        items.push(LabeledEmbedding {
            item_id,
            embedding,
            label,
            condition,
            clinical: ClinicalFeatures {
                age,
                sex,
                laterality,
            },
        });
    }
    ItemStore::new(d, n_conditions, items).map_err(|e| err(e.to_string()))
}

pub fn save_embedding_file(store: &ItemStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    write_store(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<ItemStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    read_store(&bytes, &path.display().to_string())
}

/// One JSON object per line, one task per object.
pub fn write_manifest(tasks: &[Task], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Task>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut tasks = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Task = serde_json::from_str(&line)
            .map_err(|e| Error::load(path, format!("line {}: {e}", lineno + 1)))?;
        tasks.push(t);
    }
    Ok(tasks)
}
