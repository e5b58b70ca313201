//! Multi-input scheme: `n` encryptors each hold one slice of the vector.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_limit, flat_mont, pow_with, signed_dot, BaseTables, RowBase};
use crate::dlog::DlogSolver;
use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupParams, Scalar};

#[derive(Debug, Clone)]
pub struct MiMasterKeys {
    params: GroupParams,
    a: Scalar,
    /// per source, `eta_i` rows of `(W_j0, W_j1)`
    w: Vec<Vec<[Scalar; 2]>>,
    u: Vec<Vec<Scalar>>,
    g_pow_a: [GroupElement; 2],
    g_pow_wa: Vec<Vec<GroupElement>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiPartyKey {
    source_id: usize,
    params: GroupParams,
    g_pow_a: [GroupElement; 2],
    g_pow_wa: Vec<GroupElement>,
    u: Vec<Scalar>,
    #[serde(skip)]
    cache: Arc<PartyCache>,
}

#[derive(Debug, Default)]
struct PartyCache {
    /// tables for `g^a` followed by every `g^{(Wa)_j}`
    tables: BaseTables,
    /// `g^{u_j}` in Montgomery form
    g_pow_u: OnceLock<Vec<Vec<u64>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiCiphertext {
    pub source_id: usize,
    pub t: [GroupElement; 2],
    pub c: Vec<GroupElement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiFunctionalKey {
    pub d: Vec<[Scalar; 2]>,
    pub z: Scalar,
    pub y: Vec<i64>,
    pub etas: Vec<usize>,
}

impl MiMasterKeys {
    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn etas(&self) -> Vec<usize> {
        self.w.iter().map(Vec::len).collect()
    }

    pub fn total_eta(&self) -> usize {
        self.w.iter().map(Vec::len).sum()
    }

    pub fn a(&self) -> &Scalar {
        &self.a
    }

    pub fn w(&self, source_id: usize) -> Option<&[[Scalar; 2]]> {
        self.w.get(source_id.checked_sub(1)?).map(Vec::as_slice)
    }

    pub fn u(&self, source_id: usize) -> Option<&[Scalar]> {
        self.u.get(source_id.checked_sub(1)?).map(Vec::as_slice)
    }

    pub fn g_pow_a(&self) -> &[GroupElement; 2] {
        &self.g_pow_a
    }

    pub fn g_pow_wa(&self, source_id: usize) -> Option<&[GroupElement]> {
        self.g_pow_wa.get(source_id.checked_sub(1)?).map(Vec::as_slice)
    }
}

impl MiPartyKey {
    pub fn source_id(&self) -> usize {
        self.source_id
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn eta(&self) -> usize {
        self.u.len()
    }

    pub fn g_pow_a(&self) -> &[GroupElement; 2] {
        &self.g_pow_a
    }

    pub fn g_pow_wa(&self) -> &[GroupElement] {
        &self.g_pow_wa
    }

    pub fn u(&self) -> &[Scalar] {
        &self.u
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_pow_wa.len() != self.u.len() || self.u.is_empty() {
            return Err(Error::InvalidArgument("party key length mismatch".into()));
        }
        let members = self.g_pow_a.iter().chain(&self.g_pow_wa);
        for e in members {
            if !self.params.contains(e.value()) {
                return Err(Error::NotInSubgroup);
            }
        }
        Ok(())
    }

    fn bases(&self) -> Vec<GroupElement> {
        std::iter::once(self.g_pow_a[1].clone())
            .chain(self.g_pow_wa.iter().cloned())
            .collect()
    }
}

pub fn mi_setup<R: Rng + ?Sized>(
    params: &GroupParams,
    etas: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<MiMasterKeys> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one source is required".into()));
    }
    if etas.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: etas.len(),
        });
    }
    if etas.contains(&0) {
        return Err(Error::InvalidArgument("every eta_i must be at least 1".into()));
    }
    let a = params.sample_scalar(rng);
    let w: Vec<Vec<[Scalar; 2]>> = etas
        .iter()
        .map(|&eta| {
            (0..eta)
                .map(|_| [params.sample_scalar(rng), params.sample_scalar(rng)])
                .collect()
        })
        .collect();
    let u: Vec<Vec<Scalar>> = etas
        .iter()
        .map(|&eta| (0..eta).map(|_| params.sample_scalar(rng)).collect())
        .collect();
    let g_pow_a = [params.generator(), params.exp_g(&a)];
    let g_pow_wa = w
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|[w0, w1]| params.exp_g(&params.scalar_add(w0, &params.scalar_mul(w1, &a))))
                .collect()
        })
        .collect();
    Ok(MiMasterKeys {
        params: params.clone(),
        a,
        w,
        u,
        g_pow_a,
        g_pow_wa,
    })
}

/// Public material for source `source_id` in `1..=n`.
pub fn mi_party_key(master: &MiMasterKeys, source_id: usize) -> Result<MiPartyKey> {
    let i = source_id
        .checked_sub(1)
        .filter(|&i| i < master.n())
        .ok_or(Error::UnknownSource(source_id))?;
    Ok(MiPartyKey {
        source_id,
        params: master.params.clone(),
        g_pow_a: master.g_pow_a.clone(),
        g_pow_wa: master.g_pow_wa[i].clone(),
        u: master.u[i].clone(),
        cache: Arc::default(),
    })
}

pub fn mi_derive_key(master: &MiMasterKeys, y: &[i64], limit: u64) -> Result<MiFunctionalKey> {
    if y.len() != master.total_eta() {
        return Err(Error::LengthMismatch {
            expected: master.total_eta(),
            actual: y.len(),
        });
    }
    check_limit(y, limit)?;
    let params = &master.params;
    let mut d = Vec::with_capacity(master.n());
    let mut z_parts = Vec::with_capacity(master.n());
    let mut offset = 0;
    for (w_i, u_i) in master.w.iter().zip(&master.u) {
        let y_i = &y[offset..offset + w_i.len()];
        offset += w_i.len();
        d.push([
            signed_dot(params, y_i, w_i.iter().map(|r| r[0].value())),
            signed_dot(params, y_i, w_i.iter().map(|r| r[1].value())),
        ]);
        z_parts.push(signed_dot(params, y_i, u_i.iter().map(Scalar::value)));
    }
    let z = z_parts
        .iter()
        .fold(params.scalar(0u8.into()), |acc, zi| params.scalar_add(&acc, zi));
    Ok(MiFunctionalKey {
        d,
        z,
        y: y.to_vec(),
        etas: master.etas(),
    })
}

pub fn mi_encrypt<R: Rng + ?Sized>(
    pk: &MiPartyKey,
    x: &[i64],
    limit: u64,
    rng: &mut R,
) -> Result<MiCiphertext> {
    let r = pk.params.sample_scalar(rng);
    encrypt_with(pk, x, limit, &r)
}

/// Encryption with caller-chosen randomness, for white-box checks.
#[cfg(any(test, feature = "white-box"))]
pub fn mi_encrypt_with_r(pk: &MiPartyKey, x: &[i64], limit: u64, r: &Scalar) -> Result<MiCiphertext> {
    encrypt_with(pk, x, limit, r)
}

fn encrypt_with(pk: &MiPartyKey, x: &[i64], limit: u64, r: &Scalar) -> Result<MiCiphertext> {
    if x.len() != pk.eta() {
        return Err(Error::LengthMismatch {
            expected: pk.eta(),
            actual: x.len(),
        });
    }
    check_limit(x, limit)?;
    let params = &pk.params;
    let m = params.mont();
    let bases = pk.bases();
    let tables = pk.cache.tables.get(params, &bases);
    let g_pow_u = pk
        .cache
        .g_pow_u
        .get_or_init(|| pk.u.iter().map(|u| params.g_pow_mont(u.value())).collect());

    let t0 = params.from_mont(&params.g_pow_mont(r.value()));
    let t1 = params.from_mont(&pow_with(params, tables, 0, &bases[0], r));
    let c = x
        .iter()
        .enumerate()
        .map(|(j, &xj)| {
            let mut cj = pow_with(params, tables, j + 1, &bases[j + 1], r);
            m.mul_assign(&mut cj, &g_pow_u[j]);
            if xj != 0 {
                m.mul_assign(&mut cj, &params.g_pow_signed_mont(xj));
            }
            params.from_mont(&cj)
        })
        .collect();
    Ok(MiCiphertext {
        source_id: pk.source_id,
        t: [t0, t1],
        c,
    })
}

/// `cts` holds exactly one ciphertext per source, in id order.
pub fn mi_decrypt(
    params: &GroupParams,
    cts: &[MiCiphertext],
    fk: &MiFunctionalKey,
    solver: &DlogSolver,
) -> Result<i64> {
    Ok(mi_decrypt_many(params, cts, std::slice::from_ref(fk), solver)?[0])
}

pub(crate) fn check_sources(cts: &[MiCiphertext], etas: &[usize]) -> Result<()> {
    if cts.len() > etas.len() {
        return Err(Error::CapacityExceeded { n: etas.len() });
    }
    for (i, &eta) in etas.iter().enumerate() {
        let id = i + 1;
        match cts.get(i) {
            Some(ct) if ct.source_id == id => {
                if ct.c.len() != eta {
                    return Err(Error::LengthMismatch {
                        expected: eta,
                        actual: ct.c.len(),
                    });
                }
            }
            Some(ct) if cts[..i].iter().any(|c| c.source_id == ct.source_id) => {
                return Err(Error::DuplicateSource(ct.source_id));
            }
            _ => return Err(Error::MissingSource(id)),
        }
    }
    Ok(())
}

/// Decrypts one row (all sources) under several keys.
pub fn mi_decrypt_many(
    params: &GroupParams,
    cts: &[MiCiphertext],
    keys: &[MiFunctionalKey],
    solver: &DlogSolver,
) -> Result<Vec<i64>> {
    let Some(first) = keys.first() else {
        return Ok(Vec::new());
    };
    check_sources(cts, &first.etas)?;
    for fk in keys {
        if fk.etas != first.etas || fk.d.len() != fk.etas.len() {
            return Err(Error::ShapeMismatch("functional keys disagree on the partition".into()));
        }
        let total: usize = fk.etas.iter().sum();
        if fk.y.len() != total {
            return Err(Error::LengthMismatch {
                expected: total,
                actual: fk.y.len(),
            });
        }
    }
    let m = params.mont();
    let all_c: Vec<GroupElement> = cts.iter().flat_map(|ct| ct.c.iter().cloned()).collect();
    let flat = flat_mont(params, &all_c);
    let t_bases: Vec<[RowBase; 2]> = cts
        .iter()
        .map(|ct| {
            [
                RowBase::new(params, &ct.t[0], keys.len()),
                RowBase::new(params, &ct.t[1], keys.len()),
            ]
        })
        .collect();
    let mut nums = Vec::with_capacity(keys.len());
    let mut dens = Vec::with_capacity(keys.len());
    for fk in keys {
        let (num, mut den) = m.multi_exp_signed(&flat, &fk.y);
        for (t, d) in t_bases.iter().zip(&fk.d) {
            for k in 0..2 {
                if !d[k].is_zero() {
                    m.mul_assign(&mut den, &t[k].pow(params, &d[k]));
                }
            }
        }
        if !fk.z.is_zero() {
            m.mul_assign(&mut den, &params.g_pow_mont(fk.z.value()));
        }
        nums.push(num);
        dens.push(den);
    }
    m.batch_invert(&mut dens);
    nums.iter_mut()
        .zip(&dens)
        .map(|(num, den)| {
            m.mul_assign(num, den);
            solver.solve_mont(num)
        })
        .collect()
}
