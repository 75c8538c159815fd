//! Versioned on-disk cache of a task sequence.
//!
//! The container stores the construction recipe (settings, per-task
//! transforms, split index lists) rather than materialized pixels;
//! materialization is a pure function of the recipe and the base IDX data,
//! so the recipe reproduces the sequence exactly at a fraction of the size.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"DSEQ"
//! version  u32 (currently 1)
//! confhash [u8; 32]   caller-supplied configuration hash
//! seed     u64
//! plen     u64        payload length in bytes
//! payload  JSON recipe
//! checksum [u8; 32]   SHA-256 of payload
//! ```

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sequence::{SequenceSettings, TaskSequence, TaskSpec};
use super::ImageSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DSEQ";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Recipe {
    name: String,
    settings: SequenceSettings,
    specs: Vec<TaskSpec>,
    train_idx: Vec<u32>,
    val_idx: Vec<u32>,
    test_idx: Vec<u32>,
    pool_len: usize,
    test_len: usize,
}

/// Result of probing an existing cache file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    /// Valid cache for the given configuration hash.
    Hit,
    /// No file present.
    Missing,
    /// Present but unreadable, corrupt, or built for another configuration.
    Stale,
}

pub fn write_sequence_cache(
    path: &Path,
    config_hash: &[u8; 32],
    seed: u64,
    seq: &TaskSequence,
    pool_len: usize,
    test_len: usize,
) -> Result<()> {
    let (train_idx, val_idx, test_idx) = seq.split_indices();
    let recipe = Recipe {
        name: seq.base_dataset_name.clone(),
        settings: seq.settings,
        specs: seq.specs().to_vec(),
        train_idx: train_idx.to_vec(),
        val_idx: val_idx.to_vec(),
        test_idx: test_idx.to_vec(),
        pool_len,
        test_len,
    };
    let payload =
        serde_json::to_vec(&recipe).map_err(|e| Error::Format(format!("encode recipe: {e}")))?;
    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_u32::<LittleEndian>(VERSION)?;
    f.write_all(config_hash)?;
    f.write_u64::<LittleEndian>(seed)?;
    f.write_u64::<LittleEndian>(payload.len() as u64)?;
    f.write_all(&payload)?;
    f.write_all(&Sha256::digest(&payload))?;
    Ok(())
}

/// Probes a cache file without materializing it.
pub fn cache_status(path: &Path, config_hash: &[u8; 32]) -> CacheStatus {
    match read_header_and_payload(path) {
        Ok((hash, _, _)) if &hash == config_hash => CacheStatus::Hit,
        Ok(_) => CacheStatus::Stale,
        Err(_) if !path.exists() => CacheStatus::Missing,
        Err(_) => CacheStatus::Stale,
    }
}

fn read_header_and_payload(path: &Path) -> Result<([u8; 32], u64, Vec<u8>)> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a sequence cache", path.display())));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: cache version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let mut hash = [0u8; 32];
    f.read_exact(&mut hash)?;
    let seed = f.read_u64::<LittleEndian>()?;
    let plen = f.read_u64::<LittleEndian>()? as usize;
    let mut payload = vec![0u8; plen];
    f.read_exact(&mut payload)
        .map_err(|_| Error::Length(format!("{}: truncated payload", path.display())))?;
    let mut checksum = [0u8; 32];
    f.read_exact(&mut checksum)
        .map_err(|_| Error::Length(format!("{}: missing checksum", path.display())))?;
    if checksum != *Sha256::digest(&payload) {
        return Err(Error::Format(format!("{}: checksum mismatch", path.display())));
    }
    Ok((hash, seed, payload))
}

/// Reads a cache file and rebuilds the sequence over the given base data.
///
/// Returns the sequence along with the stored configuration hash and seed.
pub fn read_sequence_cache(
    path: &Path,
    pool: ImageSet,
    test: ImageSet,
) -> Result<(TaskSequence, [u8; 32], u64)> {
    let (hash, seed, payload) = read_header_and_payload(path)?;
    let recipe: Recipe = serde_json::from_slice(&payload)
        .map_err(|e| Error::Format(format!("{}: bad recipe: {e}", path.display())))?;
    if recipe.pool_len != pool.len() || recipe.test_len != test.len() {
        return Err(Error::Consistency(format!(
            "cache was built over {}+{} base rows, data dir has {}+{}",
            recipe.pool_len,
            recipe.test_len,
            pool.len(),
            test.len()
        )));
    }
    let seq = TaskSequence::from_recipe(
        pool,
        test,
        &recipe.name,
        recipe.settings,
        recipe.specs,
        recipe.train_idx,
        recipe.val_idx,
        recipe.test_idx,
    )?;
    Ok((seq, hash, seed))
}
