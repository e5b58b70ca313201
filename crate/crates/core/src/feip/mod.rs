//! Inner-product functional encryption over the safe-prime group.

pub mod multi;
pub mod single;

use std::sync::OnceLock;

use num_bigint::BigUint;

pub use multi::{
    mi_decrypt, mi_decrypt_many, mi_derive_key, mi_encrypt, mi_party_key, mi_setup, MiCiphertext,
    MiFunctionalKey, MiMasterKeys, MiPartyKey,
};
pub use single::{
    si_decrypt, si_decrypt_many, si_derive_key, si_encrypt, si_setup, SiCiphertext,
    SiFunctionalKey, SiMasterSecret, SiPublicKey,
};

#[cfg(any(test, feature = "white-box"))]
pub use multi::mi_encrypt_with_r;
#[cfg(any(test, feature = "white-box"))]
pub use single::si_encrypt_with_r;

use crate::error::{Error, Result};
use crate::group::{FixedBaseTable, GroupElement, GroupParams, Scalar};

/// Upper bound on memory spent on fixed-base tables per key.
pub const FIXED_BASE_BUDGET: usize = 256 << 20;

/// Ciphertext rows decrypted under at least this many keys get a
/// fixed-base table for their full-size bases.
const ROW_TABLE_MIN_KEYS: usize = 6;

pub(crate) fn check_limit(v: &[i64], limit: u64) -> Result<()> {
    match v.iter().find(|x| x.unsigned_abs() > limit) {
        Some(&value) => Err(Error::EncodedBoundExceeded {
            value,
            limit: limit.min(i64::MAX as u64) as i64,
        }),
        None => Ok(()),
    }
}

/// `Σ y_i s_i mod p` with signed `y`.
pub(crate) fn signed_dot<'a>(
    params: &GroupParams,
    y: &[i64],
    s: impl Iterator<Item = &'a BigUint>,
) -> Scalar {
    let mut pos = BigUint::default();
    let mut neg = BigUint::default();
    for (&yi, si) in y.iter().zip(s) {
        if yi > 0 {
            pos += si * yi.unsigned_abs();
        } else if yi < 0 {
            neg += si * yi.unsigned_abs();
        }
    }
    let p = params.order();
    params.scalar(pos % p + p - neg % p)
}

pub(crate) fn flat_mont(params: &GroupParams, elems: &[GroupElement]) -> Vec<u64> {
    let mut out = Vec::with_capacity(elems.len() * params.mont().limbs());
    for e in elems {
        out.extend_from_slice(&params.to_mont(e));
    }
    out
}

/// Lazily built fixed-base tables for a list of public bases.
#[derive(Debug, Default)]
pub(crate) struct BaseTables(OnceLock<Option<Vec<FixedBaseTable>>>);

impl BaseTables {
    pub(crate) fn get(&self, params: &GroupParams, bases: &[GroupElement]) -> Option<&[FixedBaseTable]> {
        self.0
            .get_or_init(|| {
                let bits = params.order().bits() as usize;
                let need = bases.len() * FixedBaseTable::footprint(params.mont().limbs(), bits);
                if need > FIXED_BASE_BUDGET {
                    log::warn!("fixed-base tables need {need} bytes, over budget; using plain exponentiation");
                    return None;
                }
                let m = params.mont();
                Some(
                    bases
                        .iter()
                        .map(|b| FixedBaseTable::new(m, &params.to_mont(b), bits))
                        .collect(),
                )
            })
            .as_deref()
    }
}

/// Exponentiation of one full-size base under many exponents.
pub(crate) enum RowBase {
    Table(FixedBaseTable),
    Plain(Vec<u64>),
}

impl RowBase {
    pub(crate) fn new(params: &GroupParams, base: &GroupElement, uses: usize) -> Self {
        let b = params.to_mont(base);
        if uses >= ROW_TABLE_MIN_KEYS {
            RowBase::Table(FixedBaseTable::new(params.mont(), &b, params.order().bits() as usize))
        } else {
            RowBase::Plain(b)
        }
    }

    pub(crate) fn pow(&self, params: &GroupParams, e: &Scalar) -> Vec<u64> {
        match self {
            RowBase::Table(t) => t.pow(params.mont(), &e.value().to_u64_digits()),
            RowBase::Plain(b) => params.mont().pow_big(b, e.value()),
        }
    }
}

/// `base^e` through a table when one is available.
pub(crate) fn pow_with(params: &GroupParams, tables: Option<&[FixedBaseTable]>, i: usize, base: &GroupElement, e: &Scalar) -> Vec<u64> {
    match tables {
        Some(t) => t[i].pow(params.mont(), &e.value().to_u64_digits()),
        None => params.mont().pow_big(&params.to_mont(base), e.value()),
    }
}
