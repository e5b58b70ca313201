//! Single-input scheme: one encryptor holds the whole vector.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_limit, flat_mont, pow_with, signed_dot, BaseTables, RowBase};
use crate::dlog::DlogSolver;
use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupParams, Scalar};

#[derive(Debug, Clone)]
pub struct SiMasterSecret {
    params: GroupParams,
    s: Vec<Scalar>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiPublicKey {
    params: GroupParams,
    h: Vec<GroupElement>,
    #[serde(skip)]
    tables: Arc<BaseTables>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiCiphertext {
    pub ct0: GroupElement,
    pub cts: Vec<GroupElement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiFunctionalKey {
    pub sk: Scalar,
    pub y: Vec<i64>,
}

impl SiMasterSecret {
    pub fn s(&self) -> &[Scalar] {
        &self.s
    }

    pub fn eta(&self) -> usize {
        self.s.len()
    }
}

impl SiPublicKey {
    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn h(&self) -> &[GroupElement] {
        &self.h
    }

    pub fn eta(&self) -> usize {
        self.h.len()
    }

    /// Rejects keys whose elements fall outside the group.
    pub fn validate(&self) -> Result<()> {
        if self.h.is_empty() {
            return Err(Error::InvalidArgument("empty public key".into()));
        }
        for h in &self.h {
            if !self.params.contains(h.value()) {
                return Err(Error::NotInSubgroup);
            }
        }
        Ok(())
    }
}

impl SiCiphertext {
    pub fn len(&self) -> usize {
        self.cts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cts.is_empty()
    }
}

pub fn si_setup<R: Rng + ?Sized>(
    params: &GroupParams,
    eta: usize,
    rng: &mut R,
) -> Result<(SiPublicKey, SiMasterSecret)> {
    if eta == 0 {
        return Err(Error::InvalidArgument("eta must be at least 1".into()));
    }
    let s: Vec<Scalar> = (0..eta).map(|_| params.sample_scalar(rng)).collect();
    let h = s.iter().map(|si| params.exp_g(si)).collect();
    Ok((
        SiPublicKey {
            params: params.clone(),
            h,
            tables: Arc::default(),
        },
        SiMasterSecret {
            params: params.clone(),
            s,
        },
    ))
}

/// `sk = <y, s> mod p`; entries of `y` must not exceed `limit` in magnitude.
pub fn si_derive_key(msk: &SiMasterSecret, y: &[i64], limit: u64) -> Result<SiFunctionalKey> {
    if y.len() > msk.eta() {
        return Err(Error::LengthMismatch {
            expected: msk.eta(),
            actual: y.len(),
        });
    }
    check_limit(y, limit)?;
    Ok(SiFunctionalKey {
        sk: signed_dot(&msk.params, y, msk.s.iter().map(Scalar::value)),
        y: y.to_vec(),
    })
}

pub fn si_encrypt<R: Rng + ?Sized>(
    pk: &SiPublicKey,
    x: &[i64],
    limit: u64,
    rng: &mut R,
) -> Result<SiCiphertext> {
    let r = pk.params.sample_scalar(rng);
    encrypt_with(pk, x, limit, &r)
}

/// Encryption with caller-chosen randomness, for white-box checks.
#[cfg(any(test, feature = "white-box"))]
pub fn si_encrypt_with_r(pk: &SiPublicKey, x: &[i64], limit: u64, r: &Scalar) -> Result<SiCiphertext> {
    encrypt_with(pk, x, limit, r)
}

fn encrypt_with(pk: &SiPublicKey, x: &[i64], limit: u64, r: &Scalar) -> Result<SiCiphertext> {
    if x.len() > pk.eta() {
        return Err(Error::LengthMismatch {
            expected: pk.eta(),
            actual: x.len(),
        });
    }
    check_limit(x, limit)?;
    let params = &pk.params;
    let m = params.mont();
    let tables = pk.tables.get(params, &pk.h);
    let ct0 = params.from_mont(&params.g_pow_mont(r.value()));
    let cts = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let mut c = pow_with(params, tables, i, &pk.h[i], r);
            if xi != 0 {
                m.mul_assign(&mut c, &params.g_pow_signed_mont(xi));
            }
            params.from_mont(&c)
        })
        .collect();
    Ok(SiCiphertext { ct0, cts })
}

pub fn si_decrypt(
    pk: &SiPublicKey,
    ct: &SiCiphertext,
    fk: &SiFunctionalKey,
    solver: &DlogSolver,
) -> Result<i64> {
    Ok(si_decrypt_many(pk, ct, std::slice::from_ref(fk), solver)?[0])
}

/// Decrypts one ciphertext under several keys, sharing the per-row work.
pub fn si_decrypt_many(
    pk: &SiPublicKey,
    ct: &SiCiphertext,
    keys: &[SiFunctionalKey],
    solver: &DlogSolver,
) -> Result<Vec<i64>> {
    let params = &pk.params;
    let m = params.mont();
    for fk in keys {
        if fk.y.len() != ct.cts.len() {
            return Err(Error::LengthMismatch {
                expected: ct.cts.len(),
                actual: fk.y.len(),
            });
        }
    }
    let flat = flat_mont(params, &ct.cts);
    let ct0 = RowBase::new(params, &ct.ct0, keys.len());
    let mut nums = Vec::with_capacity(keys.len());
    let mut dens = Vec::with_capacity(keys.len());
    for fk in keys {
        let (num, mut den) = m.multi_exp_signed(&flat, &fk.y);
        if !fk.sk.is_zero() {
            m.mul_assign(&mut den, &ct0.pow(params, &fk.sk));
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
