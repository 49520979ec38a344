use std::path::{Path, PathBuf};

use dexlab_numcore::Rng;
use sha2::{Digest, Sha256};

use crate::error::{input_err, Result};

pub const DEFAULT_VAL_FRACTION: f64 = 0.02;

/// Byte-level token stream with a fixed train/validation boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u8>,
    /// First validation token; everything before it is training data.
    pub split: usize,
    /// SHA-256 of the token stream, hex encoded.
    pub fingerprint: String,
}

impl Corpus {
    pub fn from_bytes(tokens: Vec<u8>, val_fraction: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(input_err("corpus is empty"));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(input_err(format!("val fraction {val_fraction} not in [0, 1)")));
        }
        let val = ((tokens.len() as f64) * val_fraction).round() as usize;
        let split = tokens.len() - val;
        let fingerprint = Sha256::digest(&tokens)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(Self {
            tokens,
            split,
            fingerprint,
        })
    }

    pub fn train(&self) -> &[u8] {
        &self.tokens[..self.split]
    }

    pub fn val(&self) -> &[u8] {
        &self.tokens[self.split..]
    }
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for entry in std::fs::read_dir(p)? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Reads files (directories are walked) in sorted path order and
/// concatenates their bytes.
pub fn ingest_text<P: AsRef<Path>>(paths: &[P], val_fraction: f64) -> Result<Corpus> {
    let mut files = Vec::new();
    for p in paths {
        let p = p.as_ref();
        if !p.exists() {
            return Err(input_err(format!("corpus path {} does not exist", p.display())));
        }
        collect_files(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    let mut tokens = Vec::new();
    for f in &files {
        tokens.extend(std::fs::read(f)?);
    }
    if tokens.is_empty() {
        return Err(input_err("corpus files hold no bytes"));
    }
    Corpus::from_bytes(tokens, val_fraction)
}

/// A random window of `len` tokens from `data`.
pub fn sample_window(rng: &mut Rng, data: &[u8], len: usize) -> Result<Vec<usize>> {
    if data.len() < len {
        return Err(input_err(format!(
            "corpus slice of {} tokens is shorter than one sequence of {len}",
            data.len()
        )));
    }
    let start = rng.below(data.len() - len + 1);
    Ok(data[start..start + len].iter().map(|&b| b as usize).collect())
}
