//! Secure products `X·W` where `X` arrives encrypted from the sources and
//! `W` is held by the server in the clear.
//!
//! Horizontal: every source encrypts whole rows under the single-input
//! scheme. Vertical: every source encrypts its column slice of each row
//! under the multi-input scheme.

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::authority::KeyService;
use crate::dlog::DlogSolver;
use crate::encoding::{decode_product, product_bound, FixedPointCodec};
use crate::error::{Error, Result};
use crate::feip::multi::check_sources;
use crate::feip::{
    mi_decrypt_many, mi_encrypt, si_decrypt_many, si_encrypt, MiCiphertext, MiFunctionalKey,
    MiPartyKey, SiCiphertext, SiFunctionalKey, SiPublicKey,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchKind {
    HptRowCipher,
    VptSliceCipher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchRows {
    Si(Vec<SiCiphertext>),
    Mi(Vec<MiCiphertext>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedBatch {
    pub kind: BatchKind,
    pub source_id: usize,
    /// rows and columns of the plaintext integer matrix
    pub shape: (usize, usize),
    pub eps_client: u32,
    pub rows: BatchRows,
}

impl EncryptedBatch {
    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    /// Checks kind, row count and ciphertext lengths against the header.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ShapeMismatch(msg));
        match (&self.kind, &self.rows) {
            (BatchKind::HptRowCipher, BatchRows::Si(rows)) => {
                if rows.len() != self.shape.0 {
                    return bad(format!("{} rows declared, {} present", self.shape.0, rows.len()));
                }
                if rows.iter().any(|ct| ct.cts.len() != self.shape.1) {
                    return bad(format!("ciphertext length differs from {} columns", self.shape.1));
                }
            }
            (BatchKind::VptSliceCipher, BatchRows::Mi(rows)) => {
                if rows.len() != self.shape.0 {
                    return bad(format!("{} rows declared, {} present", self.shape.0, rows.len()));
                }
                if rows.iter().any(|ct| ct.c.len() < self.shape.1 || ct.source_id != self.source_id) {
                    return bad("slice ciphertext inconsistent with header".into());
                }
            }
            (_, BatchRows::Si(r)) if r.is_empty() => {}
            (_, BatchRows::Mi(r)) if r.is_empty() => {}
            _ => return bad("batch kind does not match its ciphertexts".into()),
        }
        Ok(())
    }
}

/// Integer product plus time spent fetching keys and decrypting.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub z: Array2<i64>,
    pub t_keyreq: Duration,
    pub t_decrypt: Duration,
}

/// Server-side settings shared by both protocols.
pub struct ServerEvalConfig<'a> {
    pub codec: FixedPointCodec,
    pub solver: &'a DlogSolver,
    pub si_public: &'a SiPublicKey,
    pub etas: Vec<usize>,
}

impl ServerEvalConfig<'_> {
    pub fn eps_server(&self) -> u32 {
        self.codec.precision()
    }

    pub fn eta(&self) -> usize {
        self.si_public.eta()
    }
}

pub fn s2phc_client_encrypt<R: Rng + ?Sized>(
    codec: &FixedPointCodec,
    pk: &SiPublicKey,
    x: ArrayView2<'_, f64>,
    source_id: usize,
    rng: &mut R,
) -> Result<EncryptedBatch> {
    let x_int = codec.encode_matrix(x)?;
    s2phc_client_encrypt_int(codec, pk, x_int.view(), source_id, rng)
}

/// Same as [`s2phc_client_encrypt`] for an already encoded matrix.
pub fn s2phc_client_encrypt_int<R: Rng + ?Sized>(
    codec: &FixedPointCodec,
    pk: &SiPublicKey,
    x: ArrayView2<'_, i64>,
    source_id: usize,
    rng: &mut R,
) -> Result<EncryptedBatch> {
    let (r, c) = x.dim();
    if c > pk.eta() {
        return Err(Error::ShapeMismatch(format!("{c} columns exceed eta {}", pk.eta())));
    }
    let limit = codec.limit() as u64;
    let rows = x
        .rows()
        .into_iter()
        .map(|row| si_encrypt(pk, &row.to_vec(), limit, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedBatch {
        kind: BatchKind::HptRowCipher,
        source_id,
        shape: (r, c),
        eps_client: codec.precision(),
        rows: BatchRows::Si(rows),
    })
}

pub fn s2pvc_client_encrypt<R: Rng + ?Sized>(
    codec: &FixedPointCodec,
    pk: &MiPartyKey,
    x_slice: ArrayView2<'_, f64>,
    rng: &mut R,
) -> Result<EncryptedBatch> {
    let x_int = codec.encode_matrix(x_slice)?;
    s2pvc_client_encrypt_int(codec, pk, x_int.view(), rng)
}

/// Slices narrower than the source's `eta_i` are zero-padded.
pub fn s2pvc_client_encrypt_int<R: Rng + ?Sized>(
    codec: &FixedPointCodec,
    pk: &MiPartyKey,
    x_slice: ArrayView2<'_, i64>,
    rng: &mut R,
) -> Result<EncryptedBatch> {
    let (r, c) = x_slice.dim();
    if c > pk.eta() {
        return Err(Error::ShapeMismatch(format!(
            "slice of {c} columns exceeds eta_{} = {}",
            pk.source_id(),
            pk.eta()
        )));
    }
    let limit = codec.limit() as u64;
    let rows = x_slice
        .rows()
        .into_iter()
        .map(|row| {
            let mut padded = row.to_vec();
            padded.resize(pk.eta(), 0);
            mi_encrypt(pk, &padded, limit, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedBatch {
        kind: BatchKind::VptSliceCipher,
        source_id: pk.source_id(),
        shape: (r, c),
        eps_client: codec.precision(),
        rows: BatchRows::Mi(rows),
    })
}

fn common_eps(batches: &[EncryptedBatch]) -> Result<u32> {
    let eps = batches
        .first()
        .map(|b| b.eps_client)
        .ok_or_else(|| Error::InvalidArgument("no batches to evaluate".into()))?;
    if batches.iter().any(|b| b.eps_client != eps) {
        return Err(Error::InconsistentMeta("sources disagree on the client precision".into()));
    }
    Ok(eps)
}

fn check_solver(cfg: &ServerEvalConfig<'_>, eps_client: u32, eta: usize) -> Result<()> {
    let client = FixedPointCodec::unit(eps_client)?;
    let need = product_bound(&client, &cfg.codec, eta);
    if cfg.solver.bound() < need {
        return Err(Error::InvalidArgument(format!(
            "dlog bound {} is below the product bound {need}",
            cfg.solver.bound()
        )));
    }
    Ok(())
}

/// Horizontal evaluation on integers. Batches are concatenated in the order
/// given; callers sort them by source id.
pub fn s2phc_server_eval_int(
    batches: &[EncryptedBatch],
    w: ArrayView2<'_, i64>,
    cfg: &ServerEvalConfig<'_>,
    keys: &mut dyn KeyService,
) -> Result<EvalOutput> {
    let eps = common_eps(batches)?;
    let c = batches[0].cols();
    for b in batches {
        b.validate()?;
        if b.kind != BatchKind::HptRowCipher {
            return Err(Error::ShapeMismatch("expected row ciphertexts".into()));
        }
        if b.cols() != c {
            return Err(Error::ShapeMismatch("batches differ in column count".into()));
        }
    }
    if w.nrows() != c || c > cfg.eta() {
        return Err(Error::ShapeMismatch(format!(
            "server matrix has {} rows for {c} client columns (eta {})",
            w.nrows(),
            cfg.eta()
        )));
    }
    check_solver(cfg, eps, c)?;

    let started = Instant::now();
    let mut fks: Vec<SiFunctionalKey> = Vec::new();
    let mut live = Vec::new();
    for (j, col) in w.columns().into_iter().enumerate() {
        let y = col.to_vec();
        if y.iter().all(|&v| v == 0) {
            continue;
        }
        fks.push(keys.request_si_key(&y)?);
        live.push(j);
    }
    let t_keyreq = started.elapsed();

    let started = Instant::now();
    let total_rows: usize = batches.iter().map(EncryptedBatch::rows).sum();
    let mut z = Array2::<i64>::zeros((total_rows, w.ncols()));
    let mut r = 0;
    for b in batches {
        let BatchRows::Si(rows) = &b.rows else {
            unreachable!("validated above")
        };
        for ct in rows {
            if !fks.is_empty() {
                let vals = si_decrypt_many(cfg.si_public, ct, &fks, cfg.solver)?;
                for (&j, v) in live.iter().zip(vals) {
                    z[[r, j]] = v;
                }
            }
            r += 1;
        }
    }
    Ok(EvalOutput {
        z,
        t_keyreq,
        t_decrypt: started.elapsed(),
    })
}

pub fn s2phc_server_eval(
    batches: &[EncryptedBatch],
    w: ArrayView2<'_, f64>,
    cfg: &ServerEvalConfig<'_>,
    keys: &mut dyn KeyService,
) -> Result<Array2<f64>> {
    let w_int = cfg.codec.encode_matrix(w)?;
    let out = s2phc_server_eval_int(batches, w_int.view(), cfg, keys)?;
    let eps = batches[0].eps_client;
    Ok(out.z.mapv(|v| decode_product(v, eps, cfg.eps_server())))
}

/// Vertical evaluation on integers; `batches` holds one slice batch per
/// source, in any order.
pub fn s2pvc_server_eval_int(
    batches: &[EncryptedBatch],
    w: ArrayView2<'_, i64>,
    cfg: &ServerEvalConfig<'_>,
    keys: &mut dyn KeyService,
) -> Result<EvalOutput> {
    let eps = common_eps(batches)?;
    let n = cfg.etas.len();
    if batches.len() > n {
        return Err(Error::CapacityExceeded { n });
    }
    let mut ordered: Vec<&EncryptedBatch> = batches.iter().collect();
    ordered.sort_by_key(|b| b.source_id);
    for (i, b) in ordered.iter().enumerate() {
        b.validate()?;
        if b.kind != BatchKind::VptSliceCipher {
            return Err(Error::ShapeMismatch("expected slice ciphertexts".into()));
        }
        if i > 0 && ordered[i - 1].source_id == b.source_id {
            return Err(Error::DuplicateSource(b.source_id));
        }
    }
    for id in 1..=n {
        if !ordered.iter().any(|b| b.source_id == id) {
            return Err(Error::MissingSource(id));
        }
    }
    let rows = ordered[0].rows();
    if ordered.iter().any(|b| b.rows() != rows) {
        return Err(Error::ShapeMismatch("sources differ in row count".into()));
    }
    let widths: Vec<usize> = ordered.iter().map(|b| b.cols()).collect();
    let total: usize = widths.iter().sum();
    let eta_total: usize = cfg.etas.iter().sum();
    if w.nrows() != total || total > eta_total {
        return Err(Error::ShapeMismatch(format!(
            "server matrix has {} rows for {total} client columns (eta total {eta_total})",
            w.nrows()
        )));
    }
    if widths.iter().zip(&cfg.etas).any(|(c, e)| c > e) {
        return Err(Error::ShapeMismatch("slice wider than its eta_i".into()));
    }
    check_solver(cfg, eps, eta_total)?;

    let started = Instant::now();
    let mut fks: Vec<MiFunctionalKey> = Vec::new();
    let mut live = Vec::new();
    for (j, col) in w.columns().into_iter().enumerate() {
        if col.iter().all(|&v| v == 0) {
            continue;
        }
        let mut y = Vec::with_capacity(eta_total);
        let mut offset = 0;
        for (&width, &eta) in widths.iter().zip(&cfg.etas) {
            y.extend(col.iter().skip(offset).take(width));
            y.resize(y.len() + eta - width, 0);
            offset += width;
        }
        fks.push(keys.request_mi_key(&y)?);
        live.push(j);
    }
    let t_keyreq = started.elapsed();

    let started = Instant::now();
    let params = cfg.si_public.params();
    let mut z = Array2::<i64>::zeros((rows, w.ncols()));
    if !fks.is_empty() {
        for r in 0..rows {
            let row: Vec<MiCiphertext> = ordered
                .iter()
                .map(|b| match &b.rows {
                    BatchRows::Mi(cts) => cts[r].clone(),
                    BatchRows::Si(_) => unreachable!("validated above"),
                })
                .collect();
            check_sources(&row, &cfg.etas)?;
            let vals = mi_decrypt_many(params, &row, &fks, cfg.solver)?;
            for (&j, v) in live.iter().zip(vals) {
                z[[r, j]] = v;
            }
        }
    }
    Ok(EvalOutput {
        z,
        t_keyreq,
        t_decrypt: started.elapsed(),
    })
}

pub fn s2pvc_server_eval(
    batches: &[EncryptedBatch],
    w: ArrayView2<'_, f64>,
    cfg: &ServerEvalConfig<'_>,
    keys: &mut dyn KeyService,
) -> Result<Array2<f64>> {
    let w_int = cfg.codec.encode_matrix(w)?;
    let out = s2pvc_server_eval_int(batches, w_int.view(), cfg, keys)?;
    let eps = batches[0].eps_client;
    Ok(out.z.mapv(|v| decode_product(v, eps, cfg.eps_server())))
}

/// Plain integer product, the reference for both protocols.
pub fn int_matmul(x: ArrayView2<'_, i64>, w: ArrayView2<'_, i64>) -> Array2<i64> {
    let mut z = Array2::<i64>::zeros((x.nrows(), w.ncols()));
    for (i, xr) in x.rows().into_iter().enumerate() {
        for (j, wc) in w.columns().into_iter().enumerate() {
            z[[i, j]] = xr.iter().zip(wc.iter()).map(|(a, b)| a * b).sum();
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authority::Authority;
    use crate::dlog::DlogMode;
    use crate::group::GroupParams;
    use ndarray::{array, s, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        authority: Authority,
        solver: DlogSolver,
        codec: FixedPointCodec,
        rng: ChaCha8Rng,
    }

    fn fixture(eta: usize, etas: &[usize]) -> Fixture {
        let params = GroupParams::named("test64").unwrap();
        let codec = FixedPointCodec::unit(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let authority = Authority::init(&params, eta, etas, etas.len(), 2, 100, &mut rng).unwrap();
        let solver = DlogSolver::build(&params, 10_000_000, DlogMode::Bsgs).unwrap();
        Fixture {
            authority,
            solver,
            codec,
            rng,
        }
    }

    fn hpt(f: &mut Fixture, xs: &[Array2<f64>], w: &Array2<f64>) -> Result<Array2<f64>> {
        let pk = f.authority.si_public_key().clone();
        let batches: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| s2phc_client_encrypt(&f.codec, &pk, x.view(), i + 1, &mut f.rng).unwrap())
            .collect();
        let Fixture { authority, solver, codec, .. } = f;
        let cfg = ServerEvalConfig {
            codec: *codec,
            solver,
            si_public: &pk,
            etas: authority.mi_master_keys().etas(),
        };
        s2phc_server_eval(&batches, w.view(), &cfg, authority)
    }

    #[test]
    fn two_sources_horizontal() {
        let mut f = fixture(3, &[3]);
        let x1 = array![[0.1, 0.2, 0.3], [0.5, -0.5, 0.25]];
        let x2 = array![[1.0, 0.0, -1.0], [0.01, 0.02, 0.03]];
        let w = Array2::from_elem((3, 2), 1.0);
        let z = hpt(&mut f, &[x1.clone(), x2.clone()], &w).unwrap();
        let x = ndarray::concatenate![ndarray::Axis(0), x1, x2];
        let want = x.dot(&w);
        for (a, b) in z.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(f.authority.log().len(), 2);
    }

    #[test]
    fn zero_input_and_sparse_column() {
        let mut f = fixture(3, &[3]);
        let z = hpt(&mut f, &[Array2::zeros((2, 3))], &Array2::from_elem((3, 2), 0.5)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let w = array![[1.0, 0.3], [0.0, 0.3], [0.0, 0.3]];
        let err = hpt(&mut f, &[Array2::from_elem((2, 3), 0.1)], &w).unwrap_err();
        assert!(matches!(err, Error::FilterRejected(_)));
        let too_wide = s2phc_client_encrypt(
            &f.codec,
            &f.authority.si_public_key().clone(),
            Array2::zeros((1, 4)).view(),
            1,
            &mut f.rng,
        );
        assert!(too_wide.is_err());
    }

    #[test]
    fn vertical_matches_concatenation() {
        let mut f = fixture(5, &[2, 3]);
        let keys1 = f.authority.register_source(1).unwrap();
        let keys2 = f.authority.register_source(2).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5], [-0.5, 0.0, 0.25, 1.0, -1.0], [0.0; 5]];
        let w = array![[0.5, -0.1], [0.2, 0.3], [0.0, 0.7], [-1.0, 0.01], [0.33, 0.9]];
        let b1 = s2pvc_client_encrypt(&f.codec, &keys1.mi_party, x.slice(s![.., ..2]), &mut f.rng).unwrap();
        let b2 = s2pvc_client_encrypt(&f.codec, &keys2.mi_party, x.slice(s![.., 2..]), &mut f.rng).unwrap();
        let wi = f.codec.encode_matrix(w.view()).unwrap();
        let xi = f.codec.encode_matrix(x.view()).unwrap();
        let Fixture { authority, solver, codec, .. } = &mut f;
        let pk = authority.si_public_key().clone();
        let cfg = ServerEvalConfig {
            codec: *codec,
            solver,
            si_public: &pk,
            etas: vec![2, 3],
        };
        let out = s2pvc_server_eval_int(&[b2.clone(), b1.clone()], wi.view(), &cfg, authority).unwrap();
        assert_eq!(out.z, int_matmul(xi.view(), wi.view()));
        assert!(matches!(
            s2pvc_server_eval_int(&[b1], wi.view(), &cfg, authority),
            Err(Error::MissingSource(2))
        ));
    }

    #[test]
    fn narrow_slice_is_padded() {
        let mut f = fixture(4, &[2, 2]);
        let k1 = f.authority.register_source(1).unwrap();
        let k2 = f.authority.register_source(2).unwrap();
        let x = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let b1 = s2pvc_client_encrypt(&f.codec, &k1.mi_party, x.slice(s![.., ..1]), &mut f.rng).unwrap();
        let b2 = s2pvc_client_encrypt(&f.codec, &k2.mi_party, x.slice(s![.., 1..]), &mut f.rng).unwrap();
        assert_eq!(b1.shape, (2, 1));
        let w = array![[0.5, 0.1], [0.2, 0.3], [0.9, 0.7]];
        let pk = f.authority.si_public_key().clone();
        let Fixture { authority, solver, codec, .. } = &mut f;
        let cfg = ServerEvalConfig {
            codec: *codec,
            solver,
            si_public: &pk,
            etas: vec![2, 2],
        };
        let z = s2pvc_server_eval(&[b1, b2], w.view(), &cfg, authority).unwrap();
        for (a, b) in z.iter().zip(x.dot(&w).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_serde_round_trip() {
        let mut f = fixture(2, &[2]);
        let pk = f.authority.si_public_key().clone();
        let b = s2phc_client_encrypt(&f.codec, &pk, array![[0.5, -0.5]].view(), 3, &mut f.rng).unwrap();
        let back: EncryptedBatch = serde_json::from_str(&serde_json::to_string(&b).unwrap()).unwrap();
        assert_eq!(back, b);
        let keys = f.authority.register_source(1).unwrap();
        let m = s2pvc_client_encrypt(&f.codec, &keys.mi_party, array![[0.5]].view(), &mut f.rng).unwrap();
        let back: EncryptedBatch = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }
}
