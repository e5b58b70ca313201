use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::client::{client_preprocess, source_round_batches, ClientContext, ClientKeys, SourceData};
use super::layout::entity_resolution_stub;
use super::server::{
    assemble_round, hybrid_compose, train_loop, BatchMetrics, EncryptedLayer, FixedPointLayer, FloatLayer, LabelBlock,
    StreamItem,
};
use super::{enforce_guard, exchange_meta, PlanOptions, SourceGroup, SourceMeta, TrainingPlan};
use crate::authority::{Authority, KeyRequestRecord, KeyService};
use crate::dlog::{DlogMode, DlogSolver};
use crate::encoding::{product_bound, FixedPointCodec};
use crate::error::{Error, Result};
use crate::feip::SiPublicKey;
use crate::group::GroupParams;
use crate::nn::MlpModel;
use crate::protocols::ServerEvalConfig;

/// Deterministic RNG for one labelled purpose.
pub(crate) fn derived_rng(tag: &str, seed: u64, a: u64, b: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for v in [seed, a, b] {
        h.update(v.to_le_bytes());
    }
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Everything derived from the meta exchange: the plan, the vertical
/// alignment and the sizes of the authority's keys.
#[derive(Debug, Clone)]
pub struct SessionSetup {
    pub plan: TrainingPlan,
    pub metas: Vec<SourceMeta>,
    pub alignment: BTreeMap<usize, Vec<usize>>,
    pub si_eta: usize,
    pub etas: Vec<usize>,
}

impl SessionSetup {
    pub fn derive(metas: &[SourceMeta], opts: &PlanOptions, id_hashes: &BTreeMap<usize, Vec<String>>) -> Result<Self> {
        let (skeleton, metas) = exchange_meta(metas)?;
        let plan = TrainingPlan::build(skeleton, opts, &metas)?;
        let mut alignment = BTreeMap::new();
        let mut etas = vec![1];
        if let Some((members, widths)) = plan.vertical_group() {
            let lists = members
                .iter()
                .map(|id| id_hashes.get(id).cloned().ok_or(Error::MissingSource(*id)))
                .collect::<Result<Vec<_>>>()?;
            let perms = entity_resolution_stub(&lists, plan.hyper.seed)?;
            if perms[0].len() < plan.hyper.batch_size {
                return Err(Error::InvalidArgument(format!(
                    "only {} aligned rows for batch size {}",
                    perms[0].len(),
                    plan.hyper.batch_size
                )));
            }
            alignment.extend(members.iter().copied().zip(perms));
            etas = widths.to_vec();
        }
        let si_eta = plan.n_feature.max(plan.hyper.batch_size);
        Ok(SessionSetup {
            plan,
            metas,
            alignment,
            si_eta,
            etas,
        })
    }

    pub fn server_codec(&self) -> Result<FixedPointCodec> {
        FixedPointCodec::unit(self.plan.eps_server)
    }

    pub fn solver_bound(&self) -> Result<u64> {
        let eta = self.si_eta.max(self.etas.iter().sum());
        Ok(product_bound(
            &FixedPointCodec::unit(self.plan.eps_client)?,
            &self.server_codec()?,
            eta,
        ))
    }

    pub fn solver(&self, params: &GroupParams, mode: DlogMode) -> Result<DlogSolver> {
        DlogSolver::build(params, self.solver_bound()?, mode)
    }

    pub fn authority(&self, params: &GroupParams) -> Result<Authority> {
        let mut rng = derived_rng("authority", self.plan.hyper.seed, 0, 0);
        Authority::init(
            params,
            self.si_eta,
            &self.etas,
            self.etas.len(),
            self.plan.tau,
            self.server_codec()?.limit() as u64,
            &mut rng,
        )
    }

    pub fn client_context(&self, source_id: usize, pool_seed: u64) -> ClientContext {
        ClientContext {
            pool_seed,
            alignment: self.alignment.get(&source_id).cloned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub params: GroupParams,
    pub dlog_mode: DlogMode,
    pub options: PlanOptions,
    pub pool_seed: u64,
    pub unsafe_override: bool,
    pub authority_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    /// Clients encrypt, the server trains through the authority.
    Encrypted,
    /// Same fixed-point arithmetic on plaintext integers.
    Reference,
    /// Float products without encoding.
    Float,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub model: MlpModel,
    pub plan: TrainingPlan,
    pub metrics: Vec<BatchMetrics>,
    pub key_log: Vec<KeyRequestRecord>,
}

/// Server side of a run: guard first, then the batch loop.
#[allow(clippy::too_many_arguments)]
pub fn server_train<F, O>(
    plan: &TrainingPlan,
    keys: &mut dyn KeyService,
    solver: &DlogSolver,
    si_public: &SiPublicKey,
    etas: Vec<usize>,
    unsafe_override: bool,
    load_round: F,
    observe: O,
) -> Result<MlpModel>
where
    F: FnMut(usize) -> Result<Vec<StreamItem<super::CipherBatch>>>,
    O: FnMut(&BatchMetrics, &MlpModel),
{
    enforce_guard(plan, unsafe_override)?;
    let mut layer = EncryptedLayer {
        cfg: ServerEvalConfig {
            codec: FixedPointCodec::unit(plan.eps_server)?,
            solver,
            si_public,
            etas,
        },
        keys,
        eps_client: plan.eps_client,
        tau: plan.tau,
    };
    train_loop(plan, &mut layer, load_round, observe)
}

/// Plaintext stream of one round with the exact layout the clients use.
pub fn reference_round(
    plan: &TrainingPlan,
    sources: &BTreeMap<usize, &SourceData>,
    contexts: &BTreeMap<usize, ClientContext>,
    round: usize,
) -> Result<Vec<StreamItem<Array2<f64>>>> {
    let batches_of = |id: usize| -> Result<Vec<(Array2<f64>, Option<LabelBlock>)>> {
        let src = sources.get(&id).ok_or(Error::MissingSource(id))?;
        let ctx = contexts.get(&id).cloned().unwrap_or_default();
        source_round_batches(src, plan, &ctx, round)
    };
    let mut groups = Vec::new();
    for group in &plan.groups {
        match group {
            SourceGroup::Horizontal { source_id } => {
                groups.push(
                    batches_of(*source_id)?
                        .into_iter()
                        .map(|(x, l)| {
                            Ok(StreamItem {
                                batch: x,
                                labels: l.ok_or_else(|| Error::InconsistentMeta("missing labels".into()))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            SourceGroup::Vertical { members, .. } => {
                let per_member = members.iter().map(|&id| batches_of(id)).collect::<Result<Vec<_>>>()?;
                let count = per_member[0].len();
                let mut items = Vec::with_capacity(count);
                for k in 0..count {
                    let parts: Vec<_> = per_member.iter().map(|m| m[k].0.view()).collect();
                    let x = concatenate(Axis(1), &parts).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                    let labels = per_member
                        .iter()
                        .find_map(|m| m[k].1.clone())
                        .ok_or_else(|| Error::InconsistentMeta("vertical group has no labels".into()))?;
                    items.push(StreamItem { batch: x, labels });
                }
                groups.push(items);
            }
        }
    }
    hybrid_compose(groups)
}

/// Runs the authority, all clients and the server in one process.
pub fn run_session<O>(
    sources: &[SourceData],
    cfg: &SessionConfig,
    pipeline: Pipeline,
    mut observe: O,
) -> Result<SessionOutcome>
where
    O: FnMut(&BatchMetrics, &MlpModel),
{
    for s in sources {
        s.check()?;
    }
    let metas: Vec<SourceMeta> = sources.iter().map(|s| s.meta.clone()).collect();
    let hashes: BTreeMap<usize, Vec<String>> = sources
        .iter()
        .filter(|s| s.meta.dataset_type == super::DatasetType::Partial)
        .map(|s| (s.meta.source_id, s.id_hashes()))
        .collect();
    let setup = SessionSetup::derive(&metas, &cfg.options, &hashes)?;
    let plan = setup.plan.clone();
    let by_id: BTreeMap<usize, &SourceData> = sources.iter().map(|s| (s.meta.source_id, s)).collect();
    let contexts: BTreeMap<usize, ClientContext> = by_id
        .keys()
        .map(|&id| (id, setup.client_context(id, cfg.pool_seed)))
        .collect();
    let mut metrics = Vec::new();
    let mut record = |m: &BatchMetrics, model: &MlpModel| {
        metrics.push(m.clone());
        observe(m, model);
    };

    let (model, key_log) = match pipeline {
        Pipeline::Encrypted => {
            enforce_guard(&plan, cfg.unsafe_override)?;
            let mut authority = setup.authority(&cfg.params)?;
            if let Some(path) = &cfg.authority_log {
                authority = authority.with_log_file(path)?;
            }
            let si_public = authority.si_public_key().clone();
            let mut keys = BTreeMap::new();
            for (&id, src) in &by_id {
                let mi_party = match plan.slot_of(id) {
                    Some(slot) if src.meta.dataset_type == super::DatasetType::Partial => {
                        Some(authority.register_source(slot)?.mi_party)
                    }
                    _ => None,
                };
                keys.insert(
                    id,
                    ClientKeys {
                        si_public: si_public.clone(),
                        mi_party,
                    },
                );
            }
            let solver = setup.solver(&cfg.params, cfg.dlog_mode)?;
            let load_round = |round: usize| {
                let pre = by_id
                    .iter()
                    .map(|(&id, src)| {
                        let mut rng = derived_rng("client", cfg.pool_seed, id as u64, round as u64);
                        client_preprocess(src, &plan, &keys[&id], &contexts[&id], round, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                assemble_round(&plan, pre)
            };
            let model = server_train(
                &plan,
                &mut authority,
                &solver,
                &si_public,
                setup.etas.clone(),
                cfg.unsafe_override,
                load_round,
                &mut record,
            )?;
            (model, authority.log().to_vec())
        }
        Pipeline::Reference => {
            let codec = FixedPointCodec::unit(plan.eps_client)?;
            let mut layer = FixedPointLayer {
                codec: setup.server_codec()?,
                eps_client: plan.eps_client,
                tau: plan.tau,
            };
            let load_round = |round: usize| {
                reference_round(&plan, &by_id, &contexts, round)?
                    .into_iter()
                    .map(|item| {
                        Ok(StreamItem {
                            batch: codec.encode_matrix(item.batch.view())?,
                            labels: item.labels,
                        })
                    })
                    .collect()
            };
            (train_loop(&plan, &mut layer, load_round, &mut record)?, Vec::new())
        }
        Pipeline::Float => {
            let load_round = |round: usize| reference_round(&plan, &by_id, &contexts, round);
            (train_loop(&plan, &mut FloatLayer, load_round, &mut record)?, Vec::new())
        }
    };
    Ok(SessionOutcome {
        model,
        plan,
        metrics,
        key_log,
    })
}
