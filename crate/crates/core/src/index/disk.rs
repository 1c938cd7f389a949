//! On-disk index directory:
//!
//! - `manifest.json` — version, checkpoint hash, top-N, counts
//! - `docs.txt`      — doc ids, one per line, ordinal order
//! - `postings.bin`  — delta-encoded posting lists, little-endian
//! - `dense.bin`     — row-major f64 matrix, little-endian
//!
//! Loaders treat all files as untrusted: every length field is bounded
//! before allocation and structural invariants are re-checked.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DenseIndex, DocTable, ImpactIndex};

pub const POSTINGS_MAGIC: &[u8; 4] = b"DIDX";
pub const DENSE_MAGIC: &[u8; 4] = b"DDNS";
pub const FORMAT_VERSION: u32 = 1;

const MAX_DOCS: u64 = 1 << 28;
const MAX_VOCAB: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum IndexIoError {
    #[error("bad magic bytes in {0}")]
    BadMagic(&'static str),
    #[error("unsupported index format version {0}")]
    BadVersion(u32),
    #[error("corrupt index data: {0}")]
    Corrupt(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn corrupt(msg: impl Into<String>) -> IndexIoError {
    IndexIoError::Corrupt(msg.into())
}

/// Index directory metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub checkpoint_hash: String,
    pub top_n: Option<u32>,
    pub num_docs: u64,
    pub vocab_size: u32,
    pub embed_dim: u64,
    pub total_postings: u64,
    pub clamped_impacts: u64,
}

pub fn write_varint<W: Write>(w: &mut W, mut v: u64) -> std::io::Result<()> {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            w.write_all(&[byte])?;
            return Ok(());
        }
        w.write_all(&[byte | 0x80])?;
    }
}

pub fn read_varint<R: Read>(r: &mut R) -> Result<u64, IndexIoError> {
    let mut out = 0u64;
    let mut shift = 0u32;
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let b = byte[0];
        if shift >= 63 && b > 1 {
            return Err(corrupt("varint overflow"));
        }
        out |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(out);
        }
        shift += 7;
        if shift > 63 {
            return Err(corrupt("varint too long"));
        }
    }
}

/// Serializes the posting lists with per-list delta encoding.
pub fn write_postings<W: Write>(w: &mut W, index: &ImpactIndex) -> std::io::Result<()> {
    w.write_all(POSTINGS_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(index.vocab_size())?;
    w.write_u64::<LittleEndian>(index.num_docs() as u64)?;
    for term in 0..index.vocab_size() {
        let list = index.postings(term);
        write_varint(w, list.len() as u64)?;
        let mut prev = 0u32;
        for &(ordinal, impact) in list {
            write_varint(w, (ordinal - prev) as u64)?;
            w.write_u16::<LittleEndian>(impact)?;
            prev = ordinal;
        }
    }
    Ok(())
}

/// Parses posting lists written by [`write_postings`], revalidating the
/// structural invariants (sorted unique ordinals in range).
pub fn read_postings<R: Read>(
    mut r: R,
    doc_table: DocTable,
    top_n: Option<u32>,
    checkpoint_hash: String,
) -> Result<ImpactIndex, IndexIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POSTINGS_MAGIC {
        return Err(IndexIoError::BadMagic("postings"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(IndexIoError::BadVersion(version));
    }
    let vocab_size = r.read_u32::<LittleEndian>()?;
    if vocab_size as u64 > MAX_VOCAB {
        return Err(corrupt(format!("vocab size {vocab_size} too large")));
    }
    let num_docs = r.read_u64::<LittleEndian>()?;
    if num_docs > MAX_DOCS {
        return Err(corrupt(format!("doc count {num_docs} too large")));
    }
    if num_docs != doc_table.len() as u64 {
        return Err(corrupt(format!(
            "postings cover {num_docs} docs but the doc table has {}",
            doc_table.len()
        )));
    }

    let mut postings: Vec<Vec<(u32, u16)>> = vec![Vec::new(); vocab_size as usize];
    let mut doc_nonzeros = vec![0u32; num_docs as usize];
    let mut total = 0u64;
    for list in postings.iter_mut() {
        let len = read_varint(&mut r)?;
        if len > num_docs {
            return Err(corrupt(format!("posting list of length {len} over {num_docs} docs")));
        }
        list.reserve_exact(len as usize);
        let mut prev: Option<u32> = None;
        for _ in 0..len {
            let delta = read_varint(&mut r)?;
            let ordinal = match prev {
                None => delta,
                Some(p) => {
                    if delta == 0 {
                        return Err(corrupt("duplicate doc ordinal in posting list"));
                    }
                    p as u64 + delta
                }
            };
            if ordinal >= num_docs {
                return Err(corrupt(format!("doc ordinal {ordinal} out of range")));
            }
            let impact = r.read_u16::<LittleEndian>()?;
            if impact == 0 {
                return Err(corrupt("zero impact stored in posting list"));
            }
            list.push((ordinal as u32, impact));
            doc_nonzeros[ordinal as usize] += 1;
            total += 1;
            prev = Some(ordinal as u32);
        }
    }

    Ok(ImpactIndex {
        vocab_size,
        postings,
        doc_table,
        doc_nonzeros,
        total_postings: total,
        top_n,
        checkpoint_hash,
    })
}

pub fn write_dense<W: Write>(w: &mut W, index: &DenseIndex) -> std::io::Result<()> {
    w.write_all(DENSE_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(index.num_docs() as u64)?;
    w.write_u64::<LittleEndian>(index.dim() as u64)?;
    for &v in index.raw_rows() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_dense<R: Read>(
    mut r: R,
    doc_table: DocTable,
    checkpoint_hash: String,
) -> Result<DenseIndex, IndexIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DENSE_MAGIC {
        return Err(IndexIoError::BadMagic("dense"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(IndexIoError::BadVersion(version));
    }
    let num_docs = r.read_u64::<LittleEndian>()?;
    let dim = r.read_u64::<LittleEndian>()?;
    if num_docs > MAX_DOCS || dim > 1 << 20 {
        return Err(corrupt("dense matrix dimensions too large"));
    }
    if num_docs != doc_table.len() as u64 {
        return Err(corrupt(format!(
            "dense matrix covers {num_docs} docs but the doc table has {}",
            doc_table.len()
        )));
    }
    let len = (num_docs * dim) as usize;
    let mut rows = vec![0.0f64; len];
    for v in rows.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
        if !v.is_finite() {
            return Err(corrupt("non-finite value in dense matrix"));
        }
    }
    Ok(DenseIndex { dim: dim as usize, rows, doc_table, checkpoint_hash })
}

fn read_doc_table(text: &str) -> Result<DocTable, IndexIoError> {
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    DocTable::from_ids(ids).map_err(|e| corrupt(e.to_string()))
}

/// Saves an index pair plus manifest into a directory.
pub fn save_index_dir(
    dir: &Path,
    impact: &ImpactIndex,
    dense: &DenseIndex,
    clamped_impacts: u64,
) -> Result<IndexManifest, IndexIoError> {
    std::fs::create_dir_all(dir)?;
    let manifest = IndexManifest {
        version: FORMAT_VERSION,
        checkpoint_hash: impact.checkpoint_hash().to_string(),
        top_n: impact.top_n(),
        num_docs: impact.num_docs() as u64,
        vocab_size: impact.vocab_size(),
        embed_dim: dense.dim() as u64,
        total_postings: impact.total_postings(),
        clamped_impacts,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| IndexIoError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), manifest_json + "\n")?;

    let mut docs = String::new();
    for id in impact.doc_table().ids() {
        docs.push_str(id);
        docs.push('\n');
    }
    std::fs::write(dir.join("docs.txt"), docs)?;

    let mut postings = Vec::new();
    write_postings(&mut postings, impact)?;
    std::fs::write(dir.join("postings.bin"), postings)?;

    let mut dense_bytes = Vec::new();
    write_dense(&mut dense_bytes, dense)?;
    std::fs::write(dir.join("dense.bin"), dense_bytes)?;
    Ok(manifest)
}

/// Loads an index directory written by [`save_index_dir`].
pub fn load_index_dir(dir: &Path) -> Result<(ImpactIndex, DenseIndex, IndexManifest), IndexIoError> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: IndexManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| IndexIoError::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(IndexIoError::BadVersion(manifest.version));
    }
    let docs_text = std::fs::read_to_string(dir.join("docs.txt"))?;
    let doc_table = read_doc_table(&docs_text)?;

    let postings_bytes = std::fs::read(dir.join("postings.bin"))?;
    let impact = read_postings(
        postings_bytes.as_slice(),
        doc_table.clone(),
        manifest.top_n,
        manifest.checkpoint_hash.clone(),
    )?;
    if impact.total_postings() != manifest.total_postings {
        return Err(corrupt(format!(
            "manifest claims {} postings, file has {}",
            manifest.total_postings,
            impact.total_postings()
        )));
    }

    let dense_bytes = std::fs::read(dir.join("dense.bin"))?;
    let dense = read_dense(dense_bytes.as_slice(), doc_table, manifest.checkpoint_hash.clone())?;
    if dense.dim() as u64 != manifest.embed_dim {
        return Err(corrupt("dense dimension does not match manifest"));
    }
    Ok((impact, dense, manifest))
}
