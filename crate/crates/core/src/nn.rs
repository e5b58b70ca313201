//! Bias-free MLP with sigmoid or relu hidden layers and a softmax output,
//! trained by mini-batch SGD on cross-entropy.
//!
//! Layer `l` (1-based) maps `A_{l-1}` to `A_l = f(A_{l-1} W_l)`. The first
//! product `X W_1` and the first gradient `X^T sigma` are supplied from the
//! outside so they can be computed over encrypted data.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the pre-activation and activation.
    fn derivative(self, z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => a.mapv(|s| s * (1.0 - s)),
            Activation::Relu => z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub arch: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub hidden: Activation,
    pub seed: u64,
    pub step: u64,
}

/// Forward state of one mini-batch: `z[l-1]` and `a[l-1]` hold layer `l`.
#[derive(Debug, Clone)]
pub struct BatchActivations {
    pub z: Vec<Array2<f64>>,
    pub a: Vec<Array2<f64>>,
}

impl BatchActivations {
    pub fn output(&self) -> &Array2<f64> {
        self.a.last().expect("at least one layer")
    }
}

impl MlpModel {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.arch.len() < 2 || self.weights.len() != self.arch.len() - 1 {
            return Err(Error::ShapeMismatch("architecture needs at least one layer".into()));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.dim() != (self.arch[l], self.arch[l + 1]) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} has shape {:?}, expected {:?}",
                    l + 1,
                    w.dim(),
                    (self.arch[l], self.arch[l + 1])
                )));
            }
        }
        Ok(())
    }
}

/// Uniform in `±1/sqrt(n_in)` per layer, deterministic per seed.
pub fn init_weights(arch: &[usize], hidden: Activation, seed: u64) -> Result<MlpModel> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::InvalidArgument(format!("invalid architecture {arch:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = arch
        .windows(2)
        .map(|pair| {
            let limit = 1.0 / (pair[0] as f64).sqrt();
            Array2::from_shape_simple_fn((pair[0], pair[1]), || rng.gen_range(-limit..=limit))
        })
        .collect();
    Ok(MlpModel {
        arch: arch.to_vec(),
        weights,
        hidden,
        seed,
        step: 0,
    })
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Continues the forward pass from the first-layer pre-activation.
pub fn feed_forward_from(a1_pre: Array2<f64>, model: &MlpModel) -> Result<BatchActivations> {
    let layers = model.layers();
    if a1_pre.ncols() != model.arch[1] {
        return Err(Error::ShapeMismatch(format!(
            "first-layer input has {} columns, expected {}",
            a1_pre.ncols(),
            model.arch[1]
        )));
    }
    let mut z = vec![a1_pre];
    let mut a = Vec::with_capacity(layers);
    for l in 0..layers {
        let act = if l + 1 == layers {
            softmax_rows(&z[l])
        } else {
            model.hidden.apply(&z[l])
        };
        if l + 1 < layers {
            z.push(act.dot(&model.weights[l + 1]));
        }
        a.push(act);
    }
    Ok(BatchActivations { z, a })
}

/// Full plaintext forward pass.
pub fn feed_forward(x: ArrayView2<'_, f64>, model: &MlpModel) -> Result<BatchActivations> {
    if x.ncols() != model.arch[0] {
        return Err(Error::ShapeMismatch(format!(
            "input has {} features, model expects {}",
            x.ncols(),
            model.arch[0]
        )));
    }
    feed_forward_from(x.dot(&model.weights[0]), model)
}

/// Gradients of layers `2..=L` and `sigma = delta_1`.
///
/// Rows at index `valid` and beyond are padding: their error is zeroed and
/// averages use `valid` as the batch size.
pub fn gradients(
    acts: &BatchActivations,
    model: &MlpModel,
    y: ArrayView2<'_, f64>,
    valid: usize,
    l2: f64,
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    let layers = model.layers();
    let out = acts.output();
    if out.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs outputs {:?}",
            y.dim(),
            out.dim()
        )));
    }
    if valid == 0 || valid > out.nrows() {
        return Err(Error::InvalidArgument(format!("invalid row count {valid}")));
    }
    let mut delta = out - &y;
    delta.slice_mut(ndarray::s![valid.., ..]).fill(0.0);
    let batch = valid as f64;
    let mut grads = vec![Array2::zeros((0, 0)); layers - 1];
    for l in (1..layers).rev() {
        // delta currently belongs to layer l + 1 (0-based index l)
        let mut g = acts.a[l - 1].t().dot(&delta) / batch;
        if l2 != 0.0 {
            g.scaled_add(l2, &model.weights[l]);
        }
        grads[l - 1] = g;
        let back = delta.dot(&model.weights[l].t());
        delta = back * model.hidden.derivative(&acts.z[l - 1], &acts.a[l - 1]);
    }
    Ok((grads, delta))
}

/// `grad_1 = (X^T sigma) / valid + l2 W_1`, given the product `X^T sigma`.
pub fn first_layer_gradient(xt_sigma: Array2<f64>, model: &MlpModel, valid: usize, l2: f64) -> Array2<f64> {
    let mut g = xt_sigma / valid as f64;
    if l2 != 0.0 {
        g.scaled_add(l2, &model.weights[0]);
    }
    g
}

/// `W <- W - alpha grad`, then clamps every weight into `±bound`.
pub fn apply_grads(model: &mut MlpModel, grads: &[Array2<f64>], alpha: f64, bound: f64) -> Result<()> {
    if grads.len() != model.layers() {
        return Err(Error::LengthMismatch {
            expected: model.layers(),
            actual: grads.len(),
        });
    }
    let mut clamped = 0usize;
    for (w, g) in model.weights.iter_mut().zip(grads) {
        if w.dim() != g.dim() {
            return Err(Error::ShapeMismatch("gradient shape differs from weights".into()));
        }
        w.scaled_add(-alpha, g);
        w.mapv_inplace(|v| {
            if v.abs() > bound {
                clamped += 1;
                v.clamp(-bound, bound)
            } else {
                v
            }
        });
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} weights to the encoding bound {bound}");
    }
    model.step += 1;
    Ok(())
}

/// Mean cross-entropy over the first `valid` rows.
pub fn cross_entropy(out: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, valid: usize) -> f64 {
    let mut total = 0.0;
    for (o, t) in out.rows().into_iter().zip(y.rows()).take(valid) {
        for (&p, &yv) in o.iter().zip(t.iter()) {
            if yv != 0.0 {
                total -= yv * p.max(1e-12).ln();
            }
        }
    }
    total / valid.max(1) as f64
}

pub fn one_hot(labels: &[usize], rows: usize, classes: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((rows, classes));
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument(format!("label {c} outside {classes} classes")));
        }
        y[[i, c]] = 1.0;
    }
    Ok(y)
}

pub fn predict(model: &MlpModel, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let acts = feed_forward(x, model)?;
    Ok(acts
        .output()
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

pub fn accuracy(model: &MlpModel, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, x)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Vec<usize>,
    activations: CheckpointActivations,
    seed: u64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointActivations {
    hidden: Activation,
    output: String,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NNEMDCK1";

/// Magic, u32 LE header length, JSON header, then every weight matrix
/// row-major as f64 LE.
pub fn write_checkpoint<W: Write>(model: &MlpModel, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: model.arch.clone(),
        activations: CheckpointActivations {
            hidden: model.hidden,
            output: "softmax".into(),
        },
        seed: model.seed,
        step: model.step,
    })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for w in &model.weights {
        for row in w.rows() {
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &MlpModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory");
    buf
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<MlpModel> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Malformed("not a checkpoint file".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if header.arch.len() < 2 {
        return Err(Error::Malformed("checkpoint architecture too short".into()));
    }
    let mut weights = Vec::new();
    for pair in header.arch.windows(2) {
        let mut data = Vec::with_capacity(pair[0] * pair[1]);
        let mut buf = [0u8; 8];
        for _ in 0..pair[0] * pair[1] {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        weights.push(
            Array2::from_shape_vec((pair[0], pair[1]), data)
                .map_err(|e| Error::Malformed(e.to_string()))?,
        );
    }
    Ok(MlpModel {
        arch: header.arch,
        weights,
        hidden: header.activations.hidden,
        seed: header.seed,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn loss_of(model: &MlpModel, x: &Array2<f64>, y: &Array2<f64>, l2: f64) -> f64 {
        let acts = feed_forward(x.view(), model).unwrap();
        let reg: f64 = model.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum();
        cross_entropy(acts.output().view(), y.view(), x.nrows()) + 0.5 * l2 * reg
    }

    fn all_grads(model: &MlpModel, x: &Array2<f64>, y: &Array2<f64>, l2: f64) -> Vec<Array2<f64>> {
        let acts = feed_forward(x.view(), model).unwrap();
        let (rest, sigma) = gradients(&acts, model, y.view(), x.nrows(), l2).unwrap();
        let mut grads = vec![first_layer_gradient(x.t().dot(&sigma), model, x.nrows(), l2)];
        grads.extend(rest);
        grads
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_weights(&[4, 3, 2], Activation::Sigmoid, 7).unwrap();
        let b = init_weights(&[4, 3, 2], Activation::Sigmoid, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights[0].dim(), (4, 3));
        assert_eq!(a.weights[1].dim(), (3, 2));
        assert!(a.weights.iter().flatten().all(|w| w.abs() <= 1.0));
        assert!(init_weights(&[4], Activation::Sigmoid, 0).is_err());
    }

    #[test]
    fn forward_examples() {
        let m = init_weights(&[4, 3, 2], Activation::Sigmoid, 1).unwrap();
        let acts = feed_forward_from(Array2::zeros((2, 3)), &m).unwrap();
        assert!(acts.a[0].iter().all(|&v| v == 0.5));
        let single = init_weights(&[4, 3], Activation::Sigmoid, 1).unwrap();
        let acts = feed_forward_from(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]], &single).unwrap();
        for row in acts.output().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert!(feed_forward_from(Array2::zeros((2, 4)), &m).is_err());
    }

    #[test]
    fn forward_matches_naive_loops() {
        let m = init_weights(&[3, 4, 2], Activation::Sigmoid, 5).unwrap();
        let x = array![[0.1, 0.9, -0.3], [0.5, 0.5, 0.5]];
        let got = feed_forward(x.view(), &m).unwrap();
        for i in 0..2 {
            let mut h = [0.0; 4];
            for (j, hj) in h.iter_mut().enumerate() {
                let s: f64 = (0..3).map(|k| x[[i, k]] * m.weights[0][[k, j]]).sum();
                *hj = 1.0 / (1.0 + (-s).exp());
            }
            let o: Vec<f64> = (0..2).map(|j| (0..4).map(|k| h[k] * m.weights[1][[k, j]]).sum()).collect();
            let e: Vec<f64> = o.iter().map(|v| v.exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..2 {
                assert!((got.output()[[i, j]] - e[j] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_fit_has_zero_error() {
        let m = init_weights(&[2, 2], Activation::Sigmoid, 3).unwrap();
        let acts = feed_forward(array![[0.3, 0.1]].view(), &m).unwrap();
        let y = acts.output().clone();
        let (grads, sigma) = gradients(&acts, &m, y.view(), 1, 0.0).unwrap();
        assert!(grads.is_empty());
        assert!(sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_differences() {
        for (hidden, seed) in [(Activation::Sigmoid, 11u64), (Activation::Relu, 12)] {
            let mut m = init_weights(&[4, 5, 3, 2], hidden, seed).unwrap();
            let x = array![[0.1, 0.7, 0.3, 0.9], [0.8, 0.2, 0.5, 0.4], [0.3, 0.3, 0.9, 0.1], [0.6, 0.0, 0.2, 0.7]];
            let y = one_hot(&[0, 1, 1, 0], 4, 2).unwrap();
            let l2 = 0.05;
            let grads = all_grads(&m, &x, &y, l2);
            let h = 1e-6;
            for l in 0..m.layers() {
                for idx in 0..m.weights[l].len() {
                    let (r, c) = (idx / m.weights[l].ncols(), idx % m.weights[l].ncols());
                    let orig = m.weights[l][[r, c]];
                    m.weights[l][[r, c]] = orig + h;
                    let up = loss_of(&m, &x, &y, l2);
                    m.weights[l][[r, c]] = orig - h;
                    let down = loss_of(&m, &x, &y, l2);
                    m.weights[l][[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads[l][[r, c]];
                    let scale = numeric.abs().max(analytic.abs()).max(1e-3);
                    assert!((numeric - analytic).abs() / scale < 1e-5, "layer {l} ({r},{c}): {numeric} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn l2_adds_exactly_scaled_weights() {
        let m = init_weights(&[3, 4, 2], Activation::Sigmoid, 2).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let y = one_hot(&[1], 1, 2).unwrap();
        let acts = feed_forward(x.view(), &m).unwrap();
        let (g0, _) = gradients(&acts, &m, y.view(), 1, 0.0).unwrap();
        let (g1, _) = gradients(&acts, &m, y.view(), 1, 0.1).unwrap();
        let diff = &g1[0] - &g0[0];
        let want = &m.weights[1] * 0.1;
        for (a, b) in diff.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn updates() {
        let mut m = init_weights(&[2, 3, 2], Activation::Sigmoid, 4).unwrap();
        let before = m.clone();
        let zeros: Vec<_> = m.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        apply_grads(&mut m, &zeros, 0.5, 1.0).unwrap();
        assert_eq!(m.weights, before.weights);
        let x = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        let y = one_hot(&[0, 0, 1, 1], 4, 2).unwrap();
        let g = all_grads(&m, &x, &y, 0.0);
        apply_grads(&mut m, &g, 0.0, 1.0).unwrap();
        assert_eq!(m.weights, before.weights);
        let l0 = loss_of(&m, &x, &y, 0.0);
        apply_grads(&mut m, &g, 0.5, 1.0).unwrap();
        assert!(loss_of(&m, &x, &y, 0.0) < l0);
        let huge: Vec<_> = m.weights.iter().map(|w| Array2::from_elem(w.dim(), -100.0)).collect();
        apply_grads(&mut m, &huge, 1.0, 1.0).unwrap();
        assert!(m.weights.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn padded_rows_are_ignored() {
        let m = init_weights(&[2, 3, 2], Activation::Sigmoid, 8).unwrap();
        let x = array![[0.2, 0.4], [0.6, 0.1]];
        let y = one_hot(&[1, 0], 2, 2).unwrap();
        let padded_x = array![[0.2, 0.4], [0.6, 0.1], [0.0, 0.0]];
        let padded_y = one_hot(&[1, 0], 3, 2).unwrap();
        let a = feed_forward(x.view(), &m).unwrap();
        let b = feed_forward(padded_x.view(), &m).unwrap();
        let (ga, sa) = gradients(&a, &m, y.view(), 2, 0.0).unwrap();
        let (gb, sb) = gradients(&b, &m, padded_y.view(), 2, 0.0).unwrap();
        assert_eq!(ga, gb);
        assert_eq!(sa.row(0), sb.row(0));
        assert!(sb.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = init_weights(&[4, 3, 2], Activation::Relu, 9).unwrap();
        m.step = 17;
        let bytes = checkpoint_bytes(&m);
        assert_eq!(bytes.len(), 8 + 4 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize + 8 * 18);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(&b"garbage!...."[..]).is_err());
    }

    #[test]
    fn accuracy_in_unit_interval() {
        let m = init_weights(&[2, 2], Activation::Sigmoid, 0).unwrap();
        let acc = accuracy(&m, array![[0.0, 1.0], [1.0, 0.0]].view(), &[0, 1]).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
