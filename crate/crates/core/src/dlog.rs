//! Bounded discrete logarithms `g^f -> f` for `|f| <= f_b`.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use num_bigint::BigUint;
use num_integer::Roots;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupParams};

/// Full-table entry cap used by [`DlogSolver::build`].
pub const DEFAULT_FULL_TABLE_CAP: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DlogMode {
    FullTable,
    #[default]
    Bsgs,
}

impl std::str::FromStr for DlogMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-table" | "full" => Ok(DlogMode::FullTable),
            "bsgs" => Ok(DlogMode::Bsgs),
            other => Err(Error::InvalidArgument(format!("unknown dlog mode `{other}`"))),
        }
    }
}

// Keys are limbs of group elements, already uniformly spread.
#[derive(Default)]
struct PassThrough(u64);

impl Hasher for PassThrough {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ u64::from(b);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v;
    }
}

type LimbMap<V> = HashMap<u64, V, BuildHasherDefault<PassThrough>>;

pub struct DlogSolver {
    params: GroupParams,
    bound: u64,
    mode: DlogMode,
    /// low Montgomery limb -> exponent (full table) or baby index (bsgs)
    table: LimbMap<i64>,
    /// entries whose low limb collided with an earlier one
    overflow: LimbMap<Vec<i64>>,
    stride: u64,
    k_min: i64,
    k_max: i64,
    giant_up: Vec<u64>,
    giant_down: Vec<u64>,
}

impl std::fmt::Debug for DlogSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DlogSolver")
            .field("bound", &self.bound)
            .field("mode", &self.mode)
            .field("table_len", &self.table_len())
            .field("stride", &self.stride)
            .finish()
    }
}

impl DlogSolver {
    pub fn build(params: &GroupParams, bound: u64, mode: DlogMode) -> Result<Self> {
        Self::build_with_cap(params, bound, mode, DEFAULT_FULL_TABLE_CAP)
    }

    pub fn build_with_cap(
        params: &GroupParams,
        bound: u64,
        mode: DlogMode,
        full_table_cap: u64,
    ) -> Result<Self> {
        if bound == 0 {
            return Err(Error::InvalidArgument("dlog bound must be at least 1".into()));
        }
        let span = 2 * u128::from(bound) + 1;
        if BigUint::from(span) >= *params.order() {
            return Err(Error::InvalidArgument(format!(
                "2*{bound}+1 must stay below the group order"
            )));
        }
        if bound > i64::MAX as u64 / 4 {
            return Err(Error::InvalidArgument(format!("dlog bound {bound} too large")));
        }
        let mont = params.mont();
        let mut solver = DlogSolver {
            params: params.clone(),
            bound,
            mode,
            table: LimbMap::default(),
            overflow: LimbMap::default(),
            stride: 0,
            k_min: 0,
            k_max: 0,
            giant_up: Vec::new(),
            giant_down: Vec::new(),
        };
        match mode {
            DlogMode::FullTable => {
                if span > u128::from(full_table_cap) {
                    return Err(Error::TableTooLarge {
                        entries: span,
                        cap: full_table_cap,
                    });
                }
                solver.table.reserve(span as usize);
                let f0 = -(bound as i64);
                let mut cur = params.g_pow_signed_mont(f0);
                for f in f0..=bound as i64 {
                    solver.insert(cur[0], f);
                    mont.mul_assign(&mut cur, params.g_mont());
                }
            }
            DlogMode::Bsgs => {
                let mut m = span.sqrt();
                if m * m < span {
                    m += 1;
                }
                let m = m as u64;
                solver.stride = m;
                solver.table.reserve(m as usize);
                let mut cur = mont.one().to_vec();
                for j in 0..m as i64 {
                    solver.insert(cur[0], j);
                    mont.mul_assign(&mut cur, params.g_mont());
                }
                solver.k_min = -(bound.div_ceil(m) as i64);
                solver.k_max = (bound / m) as i64;
                solver.giant_up = params.g_pow_signed_mont(-(m as i64));
                solver.giant_down = params.g_pow_signed_mont(m as i64);
            }
        }
        log::debug!("built {:?}", solver);
        Ok(solver)
    }

    fn insert(&mut self, key: u64, value: i64) {
        if self.table.contains_key(&key) {
            self.overflow.entry(key).or_default().push(value);
        } else {
            self.table.insert(key, value);
        }
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn mode(&self) -> DlogMode {
        self.mode
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    /// Number of stored entries.
    pub fn table_len(&self) -> usize {
        self.table.len() + self.overflow.values().map(Vec::len).sum::<usize>()
    }

    /// Giant-step stride; zero in full-table mode.
    pub fn stride(&self) -> u64 {
        self.stride
    }

    pub fn solve(&self, h: &GroupElement) -> Result<i64> {
        self.solve_mont(&self.params.to_mont(h))
    }

    fn candidates(&self, key: u64) -> impl Iterator<Item = i64> + '_ {
        self.table
            .get(&key)
            .copied()
            .into_iter()
            .chain(self.overflow.get(&key).into_iter().flatten().copied())
    }

    fn verify(&self, f: i64, h: &[u64]) -> bool {
        f.unsigned_abs() <= self.bound && self.params.g_pow_signed_mont(f) == h
    }

    /// `h` in Montgomery form.
    pub(crate) fn solve_mont(&self, h: &[u64]) -> Result<i64> {
        let not_found = Error::NotInRange { bound: self.bound };
        match self.mode {
            DlogMode::FullTable => self
                .candidates(h[0])
                .find(|&f| self.verify(f, h))
                .ok_or(not_found),
            DlogMode::Bsgs => {
                let mont = self.params.mont();
                let m = self.stride as i64;
                let check = |cur: &[u64], k: i64| {
                    self.candidates(cur[0])
                        .map(|j| k * m + j)
                        .find(|&f| self.verify(f, h))
                };
                // walk giant steps outward from k = 0 so small |f| resolve first
                let mut up = h.to_vec();
                let mut down = h.to_vec();
                let (mut k_up, mut k_down) = (0i64, 0i64);
                if self.k_max >= 0 {
                    if let Some(f) = check(&up, 0) {
                        return Ok(f);
                    }
                }
                while k_up < self.k_max || k_down > self.k_min {
                    if k_up < self.k_max {
                        k_up += 1;
                        mont.mul_assign(&mut up, &self.giant_up);
                        if let Some(f) = check(&up, k_up) {
                            return Ok(f);
                        }
                    }
                    if k_down > self.k_min {
                        k_down -= 1;
                        mont.mul_assign(&mut down, &self.giant_down);
                        if let Some(f) = check(&down, k_down) {
                            return Ok(f);
                        }
                    }
                }
                Err(not_found)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test64() -> GroupParams {
        GroupParams::named("test64").unwrap()
    }

    fn g_to(params: &GroupParams, f: i64) -> GroupElement {
        params.exp_g(&params.scalar_from_i64(f))
    }

    #[test]
    fn table_sizes() {
        let p = test64();
        let full = DlogSolver::build(&p, 10, DlogMode::FullTable).unwrap();
        assert_eq!(full.table_len(), 21);
        let bsgs = DlogSolver::build(&p, 10, DlogMode::Bsgs).unwrap();
        assert_eq!(bsgs.table_len(), 5);
        assert_eq!(bsgs.stride(), 5);
        let big = DlogSolver::build(&p, 10_000_000, DlogMode::Bsgs).unwrap();
        assert_eq!(big.table_len(), 4473);
    }

    #[test]
    fn small_cases() {
        let p = test64();
        for mode in [DlogMode::FullTable, DlogMode::Bsgs] {
            let s = DlogSolver::build(&p, 100, mode).unwrap();
            assert_eq!(s.solve(&p.identity()).unwrap(), 0);
            assert_eq!(s.solve(&p.exp_g(&p.scalar(5u8.into()))).unwrap(), 5);
            assert_eq!(s.solve(&p.inv(&p.exp_g(&p.scalar(3u8.into())))).unwrap(), -3);
            assert!(matches!(s.solve(&g_to(&p, 101)), Err(Error::NotInRange { bound: 100 })));
            assert!(matches!(s.solve(&g_to(&p, -101)), Err(Error::NotInRange { .. })));
        }
    }

    #[test]
    fn modes_agree_exhaustively() {
        let p = test64();
        let full = DlogSolver::build(&p, 3000, DlogMode::FullTable).unwrap();
        let bsgs = DlogSolver::build(&p, 3000, DlogMode::Bsgs).unwrap();
        let mut cur = p.g_pow_signed_mont(-3001);
        for f in -3001i64..=3001 {
            let a = full.solve_mont(&cur).ok();
            let b = bsgs.solve_mont(&cur).ok();
            assert_eq!(a, b);
            assert_eq!(a, (f.abs() <= 3000).then_some(f));
            p.mont().mul_assign(&mut cur, p.g_mont());
        }
    }

    #[test]
    fn caps_and_aliasing() {
        let p = test64();
        assert!(matches!(
            DlogSolver::build_with_cap(&p, 10_000_000_000, DlogMode::FullTable, 100_000_000),
            Err(Error::TableTooLarge { .. })
        ));
        assert!(DlogSolver::build(&p, 0, DlogMode::Bsgs).is_err());
        let tiny = GroupParams::new(23u8.into(), 11u8.into(), 4u8.into()).unwrap();
        assert!(DlogSolver::build(&tiny, 5, DlogMode::Bsgs).is_err());
        let s = DlogSolver::build(&tiny, 4, DlogMode::Bsgs).unwrap();
        for f in -4i64..=4 {
            assert_eq!(s.solve(&g_to(&tiny, f)).unwrap(), f);
        }
        assert!(s.solve(&g_to(&tiny, 5)).is_err());
    }
}
