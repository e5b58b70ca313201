use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::client::PreprocessedSource;
use super::{SourceGroup, TrainingPlan};
use crate::authority::KeyService;
use crate::encoding::{decode_product, FixedPointCodec};
use crate::error::{Error, Result};
use crate::nn::{self, MlpModel};
use crate::protocols::{int_matmul, s2phc_server_eval_int, s2pvc_server_eval_int, EncryptedBatch, ServerEvalConfig};

/// Plaintext labels of the real rows of one mini-batch, in batch order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBlock {
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StreamItem<B> {
    pub batch: B,
    pub labels: LabelBlock,
}

#[derive(Debug, Clone)]
pub enum CipherBatch {
    Horizontal { ff: EncryptedBatch, bp: EncryptedBatch },
    /// Member batches in ascending source id.
    Vertical { ff: Vec<EncryptedBatch>, bp: Vec<EncryptedBatch> },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimes {
    pub keyreq: Duration,
    pub decrypt: Duration,
    pub plain: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub t_keyreq_ms: f64,
    pub t_decrypt_ms: f64,
    pub t_plain_ms: f64,
}

/// Interleaves the groups' batches round-robin.
pub fn hybrid_compose<T>(groups: Vec<Vec<T>>) -> Result<Vec<T>> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every group needs at least one batch".into()));
    }
    let total = groups.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = groups.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for it in iters.iter_mut() {
            out.extend(it.next());
        }
    }
    Ok(out)
}

fn take_source(map: &mut BTreeMap<usize, PreprocessedSource>, id: usize) -> Result<PreprocessedSource> {
    map.remove(&id).ok_or(Error::MissingSource(id))
}

fn check_counts(src: &PreprocessedSource) -> Result<usize> {
    let n = src.ff_batches.len();
    if src.bp_batches.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: src.bp_batches.len(),
        });
    }
    if let Some(l) = &src.labels {
        if l.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: l.len() });
        }
    }
    for (ff, bp) in src.ff_batches.iter().zip(&src.bp_batches) {
        if ff.shape.0 != bp.shape.1 || ff.shape.1 != bp.shape.0 {
            return Err(Error::ShapeMismatch(format!(
                "source {}: ff {:?} and bp {:?} are not transposes",
                src.source_id, ff.shape, bp.shape
            )));
        }
    }
    Ok(n)
}

/// Groups one round of preprocessed sources into the training stream.
pub fn assemble_round(plan: &TrainingPlan, sources: Vec<PreprocessedSource>) -> Result<Vec<StreamItem<CipherBatch>>> {
    let round = sources.first().map(|s| s.round);
    let mut map = BTreeMap::new();
    for s in sources {
        if Some(s.round) != round {
            return Err(Error::InconsistentMeta("sources sent different rounds".into()));
        }
        let id = s.source_id;
        if map.insert(id, s).is_some() {
            return Err(Error::DuplicateSource(id));
        }
    }
    let mut groups = Vec::with_capacity(plan.groups.len());
    for group in &plan.groups {
        match group {
            SourceGroup::Horizontal { source_id } => {
                let src = take_source(&mut map, *source_id)?;
                check_counts(&src)?;
                let labels = src
                    .labels
                    .ok_or_else(|| Error::InconsistentMeta(format!("source {source_id} sent no labels")))?;
                groups.push(
                    src.ff_batches
                        .into_iter()
                        .zip(src.bp_batches)
                        .zip(labels)
                        .map(|((ff, bp), labels)| StreamItem {
                            batch: CipherBatch::Horizontal { ff, bp },
                            labels,
                        })
                        .collect(),
                );
            }
            SourceGroup::Vertical { members, .. } => {
                let srcs = members
                    .iter()
                    .map(|&id| take_source(&mut map, id))
                    .collect::<Result<Vec<_>>>()?;
                let n = check_counts(&srcs[0])?;
                for s in &srcs[1..] {
                    if check_counts(s)? != n {
                        return Err(Error::InconsistentMeta("vertical members sent different batch counts".into()));
                    }
                }
                let mut holders = srcs.iter().filter_map(|s| s.labels.clone());
                let labels = holders
                    .next()
                    .ok_or_else(|| Error::InconsistentMeta("vertical group sent no labels".into()))?;
                if holders.next().is_some() {
                    return Err(Error::InconsistentMeta("several vertical members sent labels".into()));
                }
                let mut ff: Vec<_> = srcs.iter().map(|s| s.ff_batches.clone().into_iter()).collect();
                let mut bp: Vec<_> = srcs.into_iter().map(|s| s.bp_batches.into_iter()).collect();
                groups.push(
                    labels
                        .into_iter()
                        .map(|labels| StreamItem {
                            batch: CipherBatch::Vertical {
                                ff: ff.iter_mut().map(|it| it.next().expect("counts checked")).collect(),
                                bp: bp.iter_mut().map(|it| it.next().expect("counts checked")).collect(),
                            },
                            labels,
                        })
                        .collect(),
                );
            }
        }
    }
    if let Some(&id) = map.keys().next() {
        return Err(Error::UnknownSource(id));
    }
    hybrid_compose(groups)
}

/// Zeroes every column with between 1 and `tau - 1` non-zero entries, which
/// the authority would refuse to key.
pub fn sanitize_columns(m: &mut Array2<i64>, tau: usize) {
    for mut col in m.columns_mut() {
        let nz = col.iter().filter(|&&v| v != 0).count();
        if nz > 0 && nz < tau {
            col.fill(0);
        }
    }
}

/// Server-side encoding shared by the encrypted and reference pipelines:
/// clamp into the codec range, round, sanitize.
pub fn encode_server(codec: &FixedPointCodec, m: &Array2<f64>, tau: usize) -> Result<Array2<i64>> {
    let clamped = m.mapv(|v| codec.clamp(v));
    let mut out = codec.encode_matrix(clamped.view())?;
    sanitize_columns(&mut out, tau);
    Ok(out)
}

pub fn decode_matrix(z: &Array2<i64>, eps_client: u32, eps_server: u32) -> Array2<f64> {
    z.mapv(|v| decode_product(v, eps_client, eps_server))
}

/// Source of the two first-layer products `X W_1` and `X^T sigma`.
pub trait FirstLayer {
    type Batch;

    fn forward(&mut self, batch: &Self::Batch, w1: &Array2<f64>, times: &mut PhaseTimes) -> Result<Array2<f64>>;

    fn backward(&mut self, batch: &Self::Batch, sigma: &Array2<f64>, times: &mut PhaseTimes) -> Result<Array2<f64>>;
}

/// Products over ciphertexts with keys from an authority.
pub struct EncryptedLayer<'a> {
    pub cfg: ServerEvalConfig<'a>,
    pub keys: &'a mut dyn KeyService,
    pub eps_client: u32,
    pub tau: usize,
}

impl FirstLayer for EncryptedLayer<'_> {
    type Batch = CipherBatch;

    fn forward(&mut self, batch: &CipherBatch, w1: &Array2<f64>, times: &mut PhaseTimes) -> Result<Array2<f64>> {
        let w = encode_server(&self.cfg.codec, w1, self.tau)?;
        let out = match batch {
            CipherBatch::Horizontal { ff, .. } => {
                s2phc_server_eval_int(std::slice::from_ref(ff), w.view(), &self.cfg, self.keys)?
            }
            CipherBatch::Vertical { ff, .. } => s2pvc_server_eval_int(ff, w.view(), &self.cfg, self.keys)?,
        };
        times.keyreq += out.t_keyreq;
        times.decrypt += out.t_decrypt;
        Ok(decode_matrix(&out.z, self.eps_client, self.cfg.eps_server()))
    }

    fn backward(&mut self, batch: &CipherBatch, sigma: &Array2<f64>, times: &mut PhaseTimes) -> Result<Array2<f64>> {
        let s = encode_server(&self.cfg.codec, sigma, self.tau)?;
        let out = match batch {
            CipherBatch::Horizontal { bp, .. } => {
                s2phc_server_eval_int(std::slice::from_ref(bp), s.view(), &self.cfg, self.keys)?
            }
            CipherBatch::Vertical { bp, .. } => s2phc_server_eval_int(bp, s.view(), &self.cfg, self.keys)?,
        };
        times.keyreq += out.t_keyreq;
        times.decrypt += out.t_decrypt;
        Ok(decode_matrix(&out.z, self.eps_client, self.cfg.eps_server()))
    }
}

/// Plaintext reference: the same encode and decode steps around exact
/// integer products.
pub struct FixedPointLayer {
    pub codec: FixedPointCodec,
    pub eps_client: u32,
    pub tau: usize,
}

impl FirstLayer for FixedPointLayer {
    type Batch = Array2<i64>;

    fn forward(&mut self, x: &Array2<i64>, w1: &Array2<f64>, times: &mut PhaseTimes) -> Result<Array2<f64>> {
        let started = Instant::now();
        let w = encode_server(&self.codec, w1, self.tau)?;
        let z = int_matmul(x.view(), w.view());
        times.decrypt += started.elapsed();
        Ok(decode_matrix(&z, self.eps_client, self.codec.precision()))
    }

    fn backward(&mut self, x: &Array2<i64>, sigma: &Array2<f64>, times: &mut PhaseTimes) -> Result<Array2<f64>> {
        let started = Instant::now();
        let s = encode_server(&self.codec, sigma, self.tau)?;
        let z = int_matmul(x.t(), s.view());
        times.decrypt += started.elapsed();
        Ok(decode_matrix(&z, self.eps_client, self.codec.precision()))
    }
}

/// Float products without any encoding.
pub struct FloatLayer;

impl FirstLayer for FloatLayer {
    type Batch = Array2<f64>;

    fn forward(&mut self, x: &Array2<f64>, w1: &Array2<f64>, _: &mut PhaseTimes) -> Result<Array2<f64>> {
        Ok(x.dot(w1))
    }

    fn backward(&mut self, x: &Array2<f64>, sigma: &Array2<f64>, _: &mut PhaseTimes) -> Result<Array2<f64>> {
        Ok(x.t().dot(sigma))
    }
}

fn train_step<L: FirstLayer>(
    model: &mut MlpModel,
    plan: &TrainingPlan,
    layer: &mut L,
    item: &StreamItem<L::Batch>,
    bound: f64,
    times: &mut PhaseTimes,
) -> Result<f64> {
    let valid = item.labels.labels.len();
    let a1_pre = layer.forward(&item.batch, &model.weights[0], times)?;
    let started = Instant::now();
    let y = nn::one_hot(&item.labels.labels, a1_pre.nrows(), plan.classes())?;
    let acts = nn::feed_forward_from(a1_pre, model)?;
    let loss = nn::cross_entropy(acts.output().view(), y.view(), valid);
    let (rest, sigma) = nn::gradients(&acts, model, y.view(), valid, plan.hyper.l2)?;
    times.plain += started.elapsed();
    let xt_sigma = layer.backward(&item.batch, &sigma, times)?;
    let started = Instant::now();
    let mut grads = Vec::with_capacity(model.layers());
    grads.push(nn::first_layer_gradient(xt_sigma, model, valid, plan.hyper.l2));
    grads.extend(rest);
    nn::apply_grads(model, &grads, plan.hyper.learning_rate, bound)?;
    times.plain += started.elapsed();
    Ok(loss)
}

/// The server loop: one stream per reshuffle round, loaded when the epoch
/// enters it.
pub fn train_loop<L, F, O>(plan: &TrainingPlan, layer: &mut L, mut load_round: F, mut observe: O) -> Result<MlpModel>
where
    L: FirstLayer,
    F: FnMut(usize) -> Result<Vec<StreamItem<L::Batch>>>,
    O: FnMut(&BatchMetrics, &MlpModel),
{
    let mut model = nn::init_weights(&plan.arch, plan.hidden, plan.hyper.seed)?;
    let bound = FixedPointCodec::unit(plan.eps_server)?.value_bound();
    let mut current: Option<(usize, Vec<StreamItem<L::Batch>>)> = None;
    let mut step = 0usize;
    for epoch in 0..plan.hyper.epochs {
        let round = plan.round_of_epoch(epoch);
        if current.as_ref().map(|c| c.0) != Some(round) {
            let stream = load_round(round).map_err(|e| Error::BatchFailed {
                batch: step,
                source: Box::new(e),
            })?;
            current = Some((round, stream));
        }
        let stream = &current.as_ref().expect("loaded above").1;
        for (b, item) in stream.iter().enumerate() {
            let mut times = PhaseTimes::default();
            let loss = train_step(&mut model, plan, layer, item, bound, &mut times).map_err(|e| Error::BatchFailed {
                batch: step,
                source: Box::new(e),
            })?;
            observe(
                &BatchMetrics {
                    epoch,
                    batch: b,
                    loss,
                    t_keyreq_ms: times.keyreq.as_secs_f64() * 1e3,
                    t_decrypt_ms: times.decrypt.as_secs_f64() * 1e3,
                    t_plain_ms: times.plain.as_secs_f64() * 1e3,
                },
                &model,
            );
            step += 1;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn compose_round_robin() {
        let out = hybrid_compose(vec![vec!["si0", "si1", "si2"], vec!["mi0", "mi1"]]).unwrap();
        assert_eq!(out, ["si0", "mi0", "si1", "mi1", "si2"]);
        assert!(hybrid_compose(vec![vec![1], vec![]]).is_err());
        assert!(hybrid_compose::<u8>(vec![]).is_err());
    }

    #[test]
    fn sanitize_sparse_columns() {
        let mut m = array![[0, 5, 1, 0], [0, 0, 2, 0], [0, 0, 0, 3]];
        sanitize_columns(&mut m, 2);
        assert_eq!(m, array![[0, 0, 1, 0], [0, 0, 2, 0], [0, 0, 0, 0]]);
        let mut m = array![[1, 1], [1, 0], [1, 0]];
        sanitize_columns(&mut m, 3);
        assert_eq!(m, array![[1, 0], [1, 0], [1, 0]]);
    }

    #[test]
    fn server_encoding_clamps() {
        let codec = FixedPointCodec::unit(2).unwrap();
        let m = array![[1.7, 0.004], [-3.0, 0.016]];
        assert_eq!(encode_server(&codec, &m, 2).unwrap(), array![[100, 0], [-100, 0]]);
        assert_eq!(encode_server(&codec, &m, 1).unwrap(), array![[100, 0], [-100, 2]]);
    }
}
