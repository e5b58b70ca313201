use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{batch_chunks, gather_rows, round_order};
use super::server::LabelBlock;
use super::{DatasetType, SourceMeta, TrainingPlan};
use crate::encoding::FixedPointCodec;
use crate::error::{Error, Result};
use crate::feip::{MiPartyKey, SiPublicKey};
use crate::protocols::{s2phc_client_encrypt_int, s2pvc_client_encrypt_int, EncryptedBatch};

/// Local data of one source. Features must lie in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub meta: SourceMeta,
    pub x: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    /// Entity identifiers for vertical alignment; row numbers when absent.
    pub ids: Option<Vec<String>>,
}

impl SourceData {
    pub fn new(source_id: usize, dataset_type: DatasetType, x: Array2<f64>, labels: Option<Vec<usize>>) -> Self {
        SourceData {
            meta: SourceMeta {
                source_id,
                dataset_type,
                sample_count: x.nrows(),
                feature_count: x.ncols(),
                has_labels: labels.is_some(),
            },
            x,
            labels,
            ids: None,
        }
    }

    pub fn id_hashes(&self) -> Vec<String> {
        match &self.ids {
            Some(ids) => ids.iter().map(|id| super::hash_id(id)).collect(),
            None => (0..self.x.nrows()).map(|i| super::hash_id(&i.to_string())).collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.x.dim() != (self.meta.sample_count, self.meta.feature_count) {
            return Err(Error::ShapeMismatch("data does not match its meta information".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.x.nrows() {
                return Err(Error::LengthMismatch {
                    expected: self.x.nrows(),
                    actual: labels.len(),
                });
            }
        }
        if self.labels.is_some() != self.meta.has_labels {
            return Err(Error::InconsistentMeta("label flag does not match the data".into()));
        }
        if let Some(ids) = &self.ids {
            if ids.len() != self.x.nrows() {
                return Err(Error::LengthMismatch {
                    expected: self.x.nrows(),
                    actual: ids.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientKeys {
    pub si_public: SiPublicKey,
    pub mi_party: Option<MiPartyKey>,
}

/// Secrets shared inside the client pool and unknown to the server.
#[derive(Debug, Clone, Default)]
pub struct ClientContext {
    pub pool_seed: u64,
    /// Local row of every aligned position, for vertical members.
    pub alignment: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessedSource {
    pub source_id: usize,
    pub round: usize,
    pub ff_batches: Vec<EncryptedBatch>,
    pub bp_batches: Vec<EncryptedBatch>,
    pub labels: Option<Vec<LabelBlock>>,
}

/// Plaintext mini-batches of one source for one reshuffle round, padded to
/// the batch size, with labels from label holders.
pub fn source_round_batches(
    source: &SourceData,
    plan: &TrainingPlan,
    ctx: &ClientContext,
    round: usize,
) -> Result<Vec<(Array2<f64>, Option<LabelBlock>)>> {
    let rows: Vec<usize> = match source.meta.dataset_type {
        DatasetType::Full => (0..source.x.nrows()).collect(),
        DatasetType::Partial => ctx
            .alignment
            .clone()
            .unwrap_or_else(|| (0..source.x.nrows()).collect()),
    };
    if rows.iter().any(|&r| r >= source.x.nrows()) {
        return Err(Error::InvalidArgument("alignment refers to a missing row".into()));
    }
    let batch = plan.hyper.batch_size;
    if batch > rows.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} exceeds the {} aligned rows",
            rows.len()
        )));
    }
    let order = round_order(rows.len(), ctx.pool_seed, round);
    Ok(batch_chunks(&order, batch)
        .into_iter()
        .map(|chunk| {
            let local: Vec<usize> = chunk.iter().map(|&i| rows[i]).collect();
            let x = gather_rows(source.x.view(), &local, batch);
            let labels = source.labels.as_ref().map(|l| LabelBlock {
                labels: local.iter().map(|&r| l[r]).collect(),
            });
            (x, labels)
        })
        .collect())
}

fn encrypt_ff<R: Rng + ?Sized>(
    codec: &FixedPointCodec,
    source: &SourceData,
    plan: &TrainingPlan,
    keys: &ClientKeys,
    x: ArrayView2<'_, i64>,
    rng: &mut R,
) -> Result<EncryptedBatch> {
    match source.meta.dataset_type {
        DatasetType::Full => s2phc_client_encrypt_int(codec, &keys.si_public, x, source.meta.source_id, rng),
        DatasetType::Partial => {
            let party = keys
                .mi_party
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("vertical member without a party key".into()))?;
            if plan.slot_of(source.meta.source_id) != Some(party.source_id()) {
                return Err(Error::InconsistentMeta(format!(
                    "source {} holds party key for slot {}",
                    source.meta.source_id,
                    party.source_id()
                )));
            }
            s2pvc_client_encrypt_int(codec, party, x, rng)
        }
    }
}

/// Encrypts one round: ff batches over `X_batch`, bp batches over its
/// transpose, fresh randomness every call.
pub fn client_preprocess<R: Rng + ?Sized>(
    source: &SourceData,
    plan: &TrainingPlan,
    keys: &ClientKeys,
    ctx: &ClientContext,
    round: usize,
    rng: &mut R,
) -> Result<PreprocessedSource> {
    source.check()?;
    let codec = FixedPointCodec::unit(plan.eps_client)?;
    let batches = source_round_batches(source, plan, ctx, round)?;
    let mut ff_batches = Vec::with_capacity(batches.len());
    let mut bp_batches = Vec::with_capacity(batches.len());
    let mut labels = source.meta.has_labels.then(Vec::new);
    for (x, l) in batches {
        let x_int = codec.encode_matrix(x.view())?;
        ff_batches.push(encrypt_ff(&codec, source, plan, keys, x_int.view(), rng)?);
        bp_batches.push(s2phc_client_encrypt_int(
            &codec,
            &keys.si_public,
            x_int.t(),
            source.meta.source_id,
            rng,
        )?);
        if let (Some(all), Some(l)) = (labels.as_mut(), l) {
            all.push(l);
        }
    }
    Ok(PreprocessedSource {
        source_id: source.meta.source_id,
        round,
        ff_batches,
        bp_batches,
        labels,
    })
}
