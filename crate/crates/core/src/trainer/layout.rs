//! Row orderings shared by clients and the plaintext reference.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Opaque id hash exposed to the coordinator instead of raw identifiers.
pub fn hash_id(id: &str) -> String {
    hex::encode(Sha256::digest(id.as_bytes()))
}

fn seeded(parts: &[&[u8]]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Permutation of `rows` aligned rows for one reshuffle round. Every source
/// derives it from the pool seed alone.
pub fn round_order(rows: usize, pool_seed: u64, round: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = seeded(&[
        b"round",
        &pool_seed.to_le_bytes(),
        &(rows as u64).to_le_bytes(),
        &(round as u64).to_le_bytes(),
    ]);
    order.shuffle(&mut rng);
    order
}

/// Splits an ordering into mini-batches; only the last may be short.
pub fn batch_chunks(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Selected rows of `x`, zero-padded to `batch` rows.
pub fn gather_rows(x: ArrayView2<'_, f64>, rows: &[usize], batch: usize) -> Array2<f64> {
    let mut out = Array2::zeros((batch.max(rows.len()), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

/// Inner join on id hashes followed by a seeded shuffle.
///
/// Returns, per source, the local row index of every aligned position.
pub fn entity_resolution_stub(id_hashes: &[Vec<String>], coordinator_seed: u64) -> Result<Vec<Vec<usize>>> {
    if id_hashes.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let indexed: Vec<HashMap<&str, usize>> = id_hashes
        .iter()
        .map(|ids| {
            let mut m = HashMap::with_capacity(ids.len());
            for (i, id) in ids.iter().enumerate() {
                m.entry(id.as_str()).or_insert(i);
            }
            m
        })
        .collect();
    let mut common: BTreeMap<&str, ()> = BTreeMap::new();
    for id in indexed[0].keys() {
        if indexed[1..].iter().all(|m| m.contains_key(id)) {
            common.insert(id, ());
        }
    }
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let mut order: Vec<&str> = common.into_keys().collect();
    order.shuffle(&mut seeded(&[b"align", &coordinator_seed.to_le_bytes()]));
    Ok(indexed
        .iter()
        .map(|m| order.iter().map(|id| m[id]).collect())
        .collect())
}
