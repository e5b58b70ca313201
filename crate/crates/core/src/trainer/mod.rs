//! End-to-end training: meta exchange, client preprocessing, entity
//! alignment, the privacy guard and the server loop.

mod client;
mod layout;
mod server;
mod session;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Hyperparams};

pub use client::{client_preprocess, source_round_batches, ClientContext, ClientKeys, PreprocessedSource, SourceData};
pub use layout::{batch_chunks, entity_resolution_stub, gather_rows, hash_id, round_order};
pub use server::{
    assemble_round, decode_matrix, encode_server, hybrid_compose, sanitize_columns, train_loop, BatchMetrics,
    CipherBatch, EncryptedLayer, FirstLayer, FixedPointLayer, FloatLayer, LabelBlock, PhaseTimes, StreamItem,
};
pub use session::{reference_round, run_session, server_train, Pipeline, SessionConfig, SessionOutcome, SessionSetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetType {
    /// Every feature of its own samples.
    #[serde(rename = "t_f")]
    Full,
    /// A slice of the features of shared samples.
    #[serde(rename = "t_p")]
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub source_id: usize,
    pub dataset_type: DatasetType,
    pub sample_count: usize,
    pub feature_count: usize,
    pub has_labels: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Hpt,
    Vpt,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceGroup {
    Horizontal { source_id: usize },
    /// Members in ascending source id; member `i` holds multi-input slot `i + 1`.
    Vertical { members: Vec<usize>, widths: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSkeleton {
    pub mode: TrainingMode,
    pub groups: Vec<SourceGroup>,
    pub n_feature: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub hyper: Hyperparams,
    pub shuffle_period: usize,
    pub eps_client: u32,
    pub eps_server: u32,
    /// Hidden and output widths; the input width comes from the sources.
    pub layers: Vec<usize>,
    pub hidden: Activation,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub mode: TrainingMode,
    pub groups: Vec<SourceGroup>,
    pub n_feature: usize,
    pub arch: Vec<usize>,
    pub hidden: Activation,
    pub hyper: Hyperparams,
    pub shuffle_period: usize,
    pub eps_client: u32,
    pub eps_server: u32,
    pub tau: usize,
}

impl TrainingPlan {
    pub fn build(skeleton: PlanSkeleton, opts: &PlanOptions, metas: &[SourceMeta]) -> Result<Self> {
        if opts.layers.is_empty() {
            return Err(Error::InvalidArgument("at least an output layer is required".into()));
        }
        if opts.hyper.batch_size == 0 || opts.hyper.epochs == 0 || opts.shuffle_period == 0 {
            return Err(Error::InvalidArgument(
                "batch size, epochs and shuffle period must be positive".into(),
            ));
        }
        let min_samples = metas.iter().map(|m| m.sample_count).min().unwrap_or(0);
        if opts.hyper.batch_size > min_samples {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds the smallest source ({min_samples} samples)",
                opts.hyper.batch_size
            )));
        }
        let mut arch = vec![skeleton.n_feature];
        arch.extend(&opts.layers);
        Ok(TrainingPlan {
            mode: skeleton.mode,
            groups: skeleton.groups,
            n_feature: skeleton.n_feature,
            arch,
            hidden: opts.hidden,
            hyper: opts.hyper.clone(),
            shuffle_period: opts.shuffle_period,
            eps_client: opts.eps_client,
            eps_server: opts.eps_server,
            tau: opts.tau,
        })
    }

    /// Number of distinct batch orderings used over the whole run.
    pub fn n_shuffle(&self) -> usize {
        self.hyper.epochs.div_ceil(self.shuffle_period)
    }

    pub fn round_of_epoch(&self, epoch: usize) -> usize {
        epoch / self.shuffle_period
    }

    pub fn classes(&self) -> usize {
        *self.arch.last().expect("non-empty architecture")
    }

    pub fn vertical_group(&self) -> Option<(&[usize], &[usize])> {
        self.groups.iter().find_map(|g| match g {
            SourceGroup::Vertical { members, widths } => Some((members.as_slice(), widths.as_slice())),
            SourceGroup::Horizontal { .. } => None,
        })
    }

    /// Multi-input slot of a vertical member.
    pub fn slot_of(&self, source_id: usize) -> Option<usize> {
        self.vertical_group()
            .and_then(|(members, _)| members.iter().position(|&m| m == source_id))
            .map(|i| i + 1)
    }
}

/// Validates the sources' meta information and derives the training mode.
///
/// Every full-feature source labels its own samples; the partial-feature
/// sources form one vertical group with exactly one label holder.
pub fn exchange_meta(sources: &[SourceMeta]) -> Result<(PlanSkeleton, Vec<SourceMeta>)> {
    if sources.is_empty() {
        return Err(Error::InconsistentMeta("no sources".into()));
    }
    let mut metas = sources.to_vec();
    metas.sort_by_key(|m| m.source_id);
    if let Some(w) = metas.windows(2).find(|w| w[0].source_id == w[1].source_id) {
        return Err(Error::DuplicateSource(w[0].source_id));
    }
    if metas.iter().any(|m| m.sample_count == 0 || m.feature_count == 0) {
        return Err(Error::InconsistentMeta("empty source".into()));
    }
    let (full, partial): (Vec<&SourceMeta>, Vec<&SourceMeta>) =
        metas.iter().partition(|m| m.dataset_type == DatasetType::Full);

    let mut groups = Vec::new();
    let mut n_feature = None;
    if let Some(first) = full.first() {
        if full.iter().any(|m| m.feature_count != first.feature_count) {
            return Err(Error::InconsistentMeta("full-feature sources differ in feature count".into()));
        }
        if let Some(m) = full.iter().find(|m| !m.has_labels) {
            return Err(Error::InconsistentMeta(format!(
                "full-feature source {} holds no labels for its samples",
                m.source_id
            )));
        }
        n_feature = Some(first.feature_count);
        groups.extend(full.iter().map(|m| SourceGroup::Horizontal { source_id: m.source_id }));
    }
    if let Some(first) = partial.first() {
        if partial.iter().any(|m| m.sample_count != first.sample_count) {
            return Err(Error::InconsistentMeta("partial-feature sources differ in sample count".into()));
        }
        let holders = partial.iter().filter(|m| m.has_labels).count();
        if holders != 1 {
            return Err(Error::InconsistentMeta(format!(
                "{holders} partial-feature sources hold labels, expected exactly one"
            )));
        }
        let widths: Vec<usize> = partial.iter().map(|m| m.feature_count).collect();
        let total = widths.iter().sum();
        if let Some(f) = n_feature {
            if f != total {
                return Err(Error::InconsistentMeta(format!(
                    "vertical group covers {total} features, full sources have {f}"
                )));
            }
        }
        n_feature = Some(total);
        groups.push(SourceGroup::Vertical {
            members: partial.iter().map(|m| m.source_id).collect(),
            widths,
        });
    }
    let mode = match (full.is_empty(), partial.is_empty()) {
        (false, true) => TrainingMode::Hpt,
        (true, false) => TrainingMode::Vpt,
        _ => TrainingMode::Hybrid,
    };
    Ok((
        PlanSkeleton {
            mode,
            groups,
            n_feature: n_feature.expect("at least one source"),
        },
        metas,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardVerdict {
    Pass,
    Refuse { epochs: usize, shuffles: usize, features: usize },
}

/// Passes iff `epochs / shuffles < features`, compared exactly.
pub fn privacy_guard(epochs: usize, shuffles: usize, features: usize) -> GuardVerdict {
    if shuffles > 0 && (epochs as u128) < (features as u128) * (shuffles as u128) {
        GuardVerdict::Pass
    } else {
        GuardVerdict::Refuse {
            epochs,
            shuffles,
            features,
        }
    }
}

pub fn privacy_guard_check(plan: &TrainingPlan, n_feature: usize) -> GuardVerdict {
    privacy_guard(plan.hyper.epochs, plan.n_shuffle(), n_feature)
}

/// Turns a refusal into an error unless explicitly overridden.
pub fn enforce_guard(plan: &TrainingPlan, unsafe_override: bool) -> Result<()> {
    match privacy_guard_check(plan, plan.n_feature) {
        GuardVerdict::Pass => Ok(()),
        GuardVerdict::Refuse {
            epochs,
            shuffles,
            features,
        } => {
            if unsafe_override {
                log::warn!("privacy guard overridden: {epochs} epochs over {shuffles} shuffles with {features} features");
                Ok(())
            } else {
                Err(Error::PrivacyGuardRefused {
                    epochs,
                    shuffles,
                    features,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: usize, t: DatasetType, samples: usize, features: usize, labels: bool) -> SourceMeta {
        SourceMeta {
            source_id: id,
            dataset_type: t,
            sample_count: samples,
            feature_count: features,
            has_labels: labels,
        }
    }

    #[test]
    fn hpt_and_vpt_plans() {
        let hpt: Vec<_> = (1..=5).map(|i| meta(i, DatasetType::Full, 12000, 784, true)).collect();
        let (plan, _) = exchange_meta(&hpt).unwrap();
        assert_eq!(plan.mode, TrainingMode::Hpt);
        assert_eq!(plan.groups.len(), 5);
        assert_eq!(plan.n_feature, 784);

        let widths = [157, 157, 157, 157, 156];
        let vpt: Vec<_> = (1..=5)
            .map(|i| meta(i, DatasetType::Partial, 60000, widths[i - 1], i == 3))
            .collect();
        let (plan, _) = exchange_meta(&vpt).unwrap();
        assert_eq!(plan.mode, TrainingMode::Vpt);
        assert_eq!(plan.n_feature, 784);
        assert_eq!(
            plan.groups,
            vec![SourceGroup::Vertical {
                members: vec![1, 2, 3, 4, 5],
                widths: widths.to_vec()
            }]
        );
    }

    #[test]
    fn inconsistent_meta() {
        let bad_rows = [meta(1, DatasetType::Partial, 10, 2, true), meta(2, DatasetType::Partial, 11, 2, false)];
        assert!(matches!(exchange_meta(&bad_rows), Err(Error::InconsistentMeta(_))));
        let bad_cols = [meta(1, DatasetType::Full, 10, 3, true), meta(2, DatasetType::Full, 10, 4, true)];
        assert!(exchange_meta(&bad_cols).is_err());
        let two_holders = [meta(1, DatasetType::Partial, 10, 2, true), meta(2, DatasetType::Partial, 10, 2, true)];
        assert!(exchange_meta(&two_holders).is_err());
        let hybrid_mismatch = [
            meta(1, DatasetType::Full, 10, 5, true),
            meta(2, DatasetType::Partial, 10, 2, true),
            meta(3, DatasetType::Partial, 10, 2, false),
        ];
        assert!(exchange_meta(&hybrid_mismatch).is_err());
        let dup = [meta(1, DatasetType::Full, 10, 5, true), meta(1, DatasetType::Full, 10, 5, true)];
        assert!(matches!(exchange_meta(&dup), Err(Error::DuplicateSource(1))));
        assert!(exchange_meta(&[]).is_err());
    }

    #[test]
    fn hybrid_plan() {
        let metas = [
            meta(3, DatasetType::Partial, 8, 2, false),
            meta(1, DatasetType::Full, 8, 4, true),
            meta(2, DatasetType::Partial, 8, 2, true),
        ];
        let (plan, sorted) = exchange_meta(&metas).unwrap();
        assert_eq!(plan.mode, TrainingMode::Hybrid);
        assert_eq!(sorted.iter().map(|m| m.source_id).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(plan.groups[0], SourceGroup::Horizontal { source_id: 1 });
        assert_eq!(
            plan.groups[1],
            SourceGroup::Vertical {
                members: vec![2, 3],
                widths: vec![2, 2]
            }
        );
    }

    #[test]
    fn guard_table() {
        assert_eq!(privacy_guard(10, 10, 784), GuardVerdict::Pass);
        assert!(matches!(privacy_guard(800, 1, 784), GuardVerdict::Refuse { .. }));
        assert!(matches!(privacy_guard(784, 1, 784), GuardVerdict::Refuse { .. }));
        assert_eq!(privacy_guard(783, 1, 784), GuardVerdict::Pass);
        assert!(matches!(privacy_guard(1568, 2, 784), GuardVerdict::Refuse { .. }));
        assert_eq!(privacy_guard(1567, 2, 784), GuardVerdict::Pass);
        assert!(matches!(privacy_guard(1, 0, 784), GuardVerdict::Refuse { .. }));
    }

    #[test]
    fn shuffle_rounds() {
        let metas = [meta(1, DatasetType::Full, 8, 4, true)];
        let (skel, metas) = exchange_meta(&metas).unwrap();
        let opts = PlanOptions {
            hyper: Hyperparams {
                learning_rate: 0.1,
                l2: 0.0,
                batch_size: 4,
                epochs: 5,
                seed: 0,
            },
            shuffle_period: 2,
            eps_client: 2,
            eps_server: 2,
            layers: vec![3, 2],
            hidden: Activation::Sigmoid,
            tau: 2,
        };
        let plan = TrainingPlan::build(skel.clone(), &opts, &metas).unwrap();
        assert_eq!(plan.arch, vec![4, 3, 2]);
        assert_eq!(plan.n_shuffle(), 3);
        assert_eq!(plan.round_of_epoch(4), 2);
        let mut big = opts.clone();
        big.hyper.batch_size = 9;
        assert!(TrainingPlan::build(skel, &big, &metas).is_err());
    }
}
