//! Montgomery arithmetic over little-endian `u64` limbs.
//!
//! Elements are plain limb slices of exactly `limbs()` words holding the
//! Montgomery image `a·R mod m` with `R = 2^(64·limbs)`. Nothing here is
//! constant time.

use num_bigint::BigUint;

/// Largest supported modulus, in limbs (4097-bit safe prime for lambda 4096).
pub const MAX_LIMBS: usize = 66;

const WINDOW: usize = 4;
const WINDOW_ENTRIES: usize = (1 << WINDOW) - 1;

#[derive(Debug, Clone)]
pub struct Montgomery {
    n: usize,
    modulus: Box<[u64]>,
    /// `-m^{-1} mod 2^64`
    m_inv: u64,
    r2: Box<[u64]>,
    one: Box<[u64]>,
    modulus_minus_two: Box<[u64]>,
}

impl Montgomery {
    /// `modulus` must be odd and greater than 2.
    pub fn new(modulus: &BigUint) -> Self {
        assert!(modulus.bit(0), "Montgomery modulus must be odd");
        let digits = modulus.to_u64_digits();
        let n = digits.len().max(2);
        assert!(n <= MAX_LIMBS, "modulus too large");
        let mut m = vec![0u64; n];
        m[..digits.len()].copy_from_slice(&digits);

        // Newton iteration for m^{-1} mod 2^64; each step doubles the correct bits.
        let mut inv: u64 = 1;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(m[0].wrapping_mul(inv)));
        }

        let r = BigUint::from(1u8) << (64 * n);
        let one = pad(&(&r % modulus).to_u64_digits(), n);
        let r2 = pad(&((&r * &r) % modulus).to_u64_digits(), n);
        let mm2 = pad(&(modulus - 2u8).to_u64_digits(), n);
        Montgomery {
            n,
            modulus: m.into_boxed_slice(),
            m_inv: inv.wrapping_neg(),
            r2: r2.into_boxed_slice(),
            one: one.into_boxed_slice(),
            modulus_minus_two: mm2.into_boxed_slice(),
        }
    }

    #[inline]
    pub fn limbs(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn one(&self) -> &[u64] {
        &self.one
    }

    #[inline]
    pub fn is_one(&self, a: &[u64]) -> bool {
        a == &*self.one
    }

    pub fn to_mont(&self, x: &BigUint) -> Vec<u64> {
        let modulus = self.modulus_big();
        let reduced;
        let x = if x >= &modulus {
            reduced = x % &modulus;
            &reduced
        } else {
            x
        };
        let raw = pad(&x.to_u64_digits(), self.n);
        let mut out = vec![0u64; self.n];
        self.mul(&raw, &self.r2, &mut out);
        out
    }

    pub fn from_mont(&self, a: &[u64]) -> BigUint {
        let mut unit = vec![0u64; self.n];
        unit[0] = 1;
        let mut out = vec![0u64; self.n];
        self.mul(a, &unit, &mut out);
        limbs_to_big(&out)
    }

    pub fn modulus_big(&self) -> BigUint {
        limbs_to_big(&self.modulus)
    }

    #[inline]
    pub fn mul(&self, a: &[u64], b: &[u64], out: &mut [u64]) {
        macro_rules! dispatch {
            ($($k:literal),*) => {
                match self.n {
                    $($k => {
                        let r = mul_fixed::<$k>(
                            a.try_into().expect("operand limb count"),
                            b.try_into().expect("operand limb count"),
                            (&*self.modulus).try_into().expect("modulus limb count"),
                            self.m_inv,
                        );
                        out.copy_from_slice(&r);
                    })*
                    _ => mul_dyn(a, b, &self.modulus, self.m_inv, out),
                }
            };
        }
        dispatch!(2, 3, 4, 8, 9, 16, 17, 32, 33)
    }

    #[inline]
    pub fn mul_assign(&self, acc: &mut [u64], b: &[u64]) {
        let mut tmp = [0u64; MAX_LIMBS];
        let tmp = &mut tmp[..self.n];
        self.mul(acc, b, tmp);
        acc.copy_from_slice(tmp);
    }

    #[inline]
    pub fn square_assign(&self, acc: &mut [u64]) {
        let mut tmp = [0u64; MAX_LIMBS];
        let tmp = &mut tmp[..self.n];
        self.mul(acc, acc, tmp);
        acc.copy_from_slice(tmp);
    }

    /// `base^exp` for an exponent given as little-endian `u64` digits.
    pub fn pow(&self, base: &[u64], exp: &[u64]) -> Vec<u64> {
        let bits = digits_bits(exp);
        if bits == 0 {
            return self.one.to_vec();
        }
        if bits <= 16 {
            return self.pow_small(base, exp[0]);
        }
        let n = self.n;
        let mut table = vec![0u64; (WINDOW_ENTRIES + 1) * n];
        table[..n].copy_from_slice(&self.one);
        table[n..2 * n].copy_from_slice(base);
        for d in 2..=WINDOW_ENTRIES {
            let (prev, cur) = table.split_at_mut(d * n);
            self.mul(&prev[(d - 1) * n..], base, &mut cur[..n]);
        }
        let windows = bits.div_ceil(WINDOW);
        let top = window_digit(exp, windows - 1);
        let mut acc = table[top * n..(top + 1) * n].to_vec();
        for k in (0..windows - 1).rev() {
            for _ in 0..WINDOW {
                self.square_assign(&mut acc);
            }
            let d = window_digit(exp, k);
            if d != 0 {
                self.mul_assign(&mut acc, &table[d * n..(d + 1) * n]);
            }
        }
        acc
    }

    pub fn pow_big(&self, base: &[u64], exp: &BigUint) -> Vec<u64> {
        self.pow(base, &exp.to_u64_digits())
    }

    /// Left-to-right square and multiply for short exponents.
    pub fn pow_small(&self, base: &[u64], exp: u64) -> Vec<u64> {
        if exp == 0 {
            return self.one.to_vec();
        }
        let mut acc = base.to_vec();
        for bit in (0..63 - exp.leading_zeros()).rev() {
            self.square_assign(&mut acc);
            if (exp >> bit) & 1 == 1 {
                self.mul_assign(&mut acc, base);
            }
        }
        acc
    }

    /// Inverse by Fermat's little theorem; the modulus must be prime.
    pub fn invert(&self, a: &[u64]) -> Vec<u64> {
        self.pow(a, &self.modulus_minus_two)
    }

    /// Inverts every element in place with a single field inversion.
    pub fn batch_invert(&self, values: &mut [Vec<u64>]) {
        if values.is_empty() {
            return;
        }
        let n = self.n;
        let mut prefix = vec![0u64; values.len() * n];
        prefix[..n].copy_from_slice(&values[0]);
        for i in 1..values.len() {
            let (done, rest) = prefix.split_at_mut(i * n);
            self.mul(&done[(i - 1) * n..], &values[i], &mut rest[..n]);
        }
        let mut inv = self.invert(&prefix[(values.len() - 1) * n..]);
        for i in (1..values.len()).rev() {
            let mut this = vec![0u64; n];
            self.mul(&inv, &prefix[(i - 1) * n..i * n], &mut this);
            self.mul_assign(&mut inv, &values[i]);
            values[i] = this;
        }
        values[0] = inv;
    }

    /// Signed multi-exponentiation with short exponents.
    ///
    /// Returns `(num, den)` with `num = Π_{e>0} b^e` and `den = Π_{e<0} b^{-e}`,
    /// so the full product is `num / den`. `bases` is a flat buffer of
    /// `exps.len()` elements.
    pub fn multi_exp_signed(&self, bases: &[u64], exps: &[i64]) -> (Vec<u64>, Vec<u64>) {
        debug_assert_eq!(bases.len(), exps.len() * self.n);
        let mut max_pos = 0u64;
        let mut max_neg = 0u64;
        let mut nnz = 0usize;
        let mut popcount = 0u64;
        for &e in exps {
            if e > 0 {
                max_pos = max_pos.max(e as u64);
            } else if e < 0 {
                max_neg = max_neg.max(e.unsigned_abs());
            }
            if e != 0 {
                nnz += 1;
                popcount += u64::from(e.unsigned_abs().count_ones());
            }
        }
        let bits = |m: u64| u64::from(64 - m.leading_zeros());
        let bucket_cost = nnz as u64 + 2 * (max_pos + max_neg);
        let straus_cost = popcount + bits(max_pos) + bits(max_neg);
        if bucket_cost <= straus_cost && max_pos.max(max_neg) <= 1 << 16 {
            (
                self.bucket_product(bases, exps, false, max_pos),
                self.bucket_product(bases, exps, true, max_neg),
            )
        } else {
            (
                self.straus_product(bases, exps, false, max_pos),
                self.straus_product(bases, exps, true, max_neg),
            )
        }
    }

    fn bucket_product(&self, bases: &[u64], exps: &[i64], negative: bool, max: u64) -> Vec<u64> {
        if max == 0 {
            return self.one.to_vec();
        }
        let n = self.n;
        let max = max as usize;
        let mut buckets = vec![0u64; (max + 1) * n];
        let mut present = vec![false; max + 1];
        for (i, &e) in exps.iter().enumerate() {
            if e == 0 || (e < 0) != negative {
                continue;
            }
            let k = e.unsigned_abs() as usize;
            let base = &bases[i * n..(i + 1) * n];
            let slot = &mut buckets[k * n..(k + 1) * n];
            if present[k] {
                self.mul_assign(slot, base);
            } else {
                slot.copy_from_slice(base);
                present[k] = true;
            }
        }
        // Π_k B_k^k = Π_k Π_{j>=k} B_j
        let mut running: Option<Vec<u64>> = None;
        let mut acc: Option<Vec<u64>> = None;
        for k in (1..=max).rev() {
            if present[k] {
                let bucket = &buckets[k * n..(k + 1) * n];
                match running.as_mut() {
                    Some(r) => self.mul_assign(r, bucket),
                    None => running = Some(bucket.to_vec()),
                }
            }
            if let Some(r) = running.as_ref() {
                match acc.as_mut() {
                    Some(a) => self.mul_assign(a, r),
                    None => acc = Some(r.clone()),
                }
            }
        }
        acc.unwrap_or_else(|| self.one.to_vec())
    }

    fn straus_product(&self, bases: &[u64], exps: &[i64], negative: bool, max: u64) -> Vec<u64> {
        if max == 0 {
            return self.one.to_vec();
        }
        let n = self.n;
        let mut acc = self.one.to_vec();
        let mut started = false;
        for bit in (0..64 - max.leading_zeros()).rev() {
            if started {
                self.square_assign(&mut acc);
            }
            for (i, &e) in exps.iter().enumerate() {
                if e == 0 || (e < 0) != negative {
                    continue;
                }
                if (e.unsigned_abs() >> bit) & 1 == 1 {
                    let base = &bases[i * n..(i + 1) * n];
                    if started {
                        self.mul_assign(&mut acc, base);
                    } else {
                        acc.copy_from_slice(base);
                        started = true;
                    }
                }
            }
        }
        acc
    }
}

/// Precomputed powers `base^(d·16^k)` for fast exponentiation of a fixed base.
#[derive(Debug, Clone)]
pub struct FixedBaseTable {
    n: usize,
    windows: usize,
    table: Vec<u64>,
}

impl FixedBaseTable {
    pub fn new(ctx: &Montgomery, base: &[u64], exp_bits: usize) -> Self {
        let n = ctx.limbs();
        let windows = exp_bits.max(1).div_ceil(WINDOW);
        let mut table = vec![0u64; windows * WINDOW_ENTRIES * n];
        let mut power = base.to_vec();
        for k in 0..windows {
            let start = k * WINDOW_ENTRIES * n;
            table[start..start + n].copy_from_slice(&power);
            for d in 1..WINDOW_ENTRIES {
                let (prev, cur) = table.split_at_mut(start + d * n);
                ctx.mul(&prev[start + (d - 1) * n..], &power, &mut cur[..n]);
            }
            if k + 1 < windows {
                for _ in 0..WINDOW {
                    ctx.square_assign(&mut power);
                }
            }
        }
        FixedBaseTable { n, windows, table }
    }

    /// Approximate memory footprint in bytes for a table over `exp_bits` exponents.
    pub fn footprint(limbs: usize, exp_bits: usize) -> usize {
        exp_bits.max(1).div_ceil(WINDOW) * WINDOW_ENTRIES * limbs * 8
    }

    #[inline]
    fn entry(&self, k: usize, d: usize) -> &[u64] {
        let at = (k * WINDOW_ENTRIES + d - 1) * self.n;
        &self.table[at..at + self.n]
    }

    /// Exponents wider than the table are not supported.
    pub fn pow(&self, ctx: &Montgomery, exp: &[u64]) -> Vec<u64> {
        let bits = digits_bits(exp);
        assert!(bits <= self.windows * WINDOW, "exponent wider than fixed-base table");
        let mut acc: Option<Vec<u64>> = None;
        for k in 0..bits.div_ceil(WINDOW) {
            let d = window_digit(exp, k);
            if d != 0 {
                match acc.as_mut() {
                    Some(a) => ctx.mul_assign(a, self.entry(k, d)),
                    None => acc = Some(self.entry(k, d).to_vec()),
                }
            }
        }
        acc.unwrap_or_else(|| ctx.one().to_vec())
    }

    pub fn pow_u64(&self, ctx: &Montgomery, exp: u64) -> Vec<u64> {
        self.pow(ctx, &[exp])
    }
}

#[inline(always)]
fn mul_fixed<const N: usize>(a: &[u64; N], b: &[u64; N], m: &[u64; N], m_inv: u64) -> [u64; N] {
    let mut t = [0u64; N];
    let mut t_hi: u64 = 0;
    for &ai in a.iter() {
        let ai = ai as u128;
        let mut carry: u128 = 0;
        for j in 0..N {
            let s = t[j] as u128 + ai * b[j] as u128 + carry;
            t[j] = s as u64;
            carry = s >> 64;
        }
        let s = t_hi as u128 + carry;
        t_hi = s as u64;
        let t_top = (s >> 64) as u64;

        let q = t[0].wrapping_mul(m_inv) as u128;
        let s = t[0] as u128 + q * m[0] as u128;
        let mut carry = s >> 64;
        for j in 1..N {
            let s = t[j] as u128 + q * m[j] as u128 + carry;
            t[j - 1] = s as u64;
            carry = s >> 64;
        }
        let s = t_hi as u128 + carry;
        t[N - 1] = s as u64;
        t_hi = t_top + (s >> 64) as u64;
    }
    let mut out = [0u64; N];
    if t_hi != 0 || !less_than(&t, m) {
        let mut borrow = 0u64;
        for j in 0..N {
            let (d1, b1) = t[j].overflowing_sub(m[j]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            out[j] = d2;
            borrow = (b1 | b2) as u64;
        }
    } else {
        out = t;
    }
    out
}

fn mul_dyn(a: &[u64], b: &[u64], m: &[u64], m_inv: u64, out: &mut [u64]) {
    let n = m.len();
    let mut t = [0u64; MAX_LIMBS];
    let mut t_hi: u64 = 0;
    for &ai in a.iter().take(n) {
        let ai = ai as u128;
        let mut carry: u128 = 0;
        for j in 0..n {
            let s = t[j] as u128 + ai * b[j] as u128 + carry;
            t[j] = s as u64;
            carry = s >> 64;
        }
        let s = t_hi as u128 + carry;
        t_hi = s as u64;
        let t_top = (s >> 64) as u64;

        let q = t[0].wrapping_mul(m_inv) as u128;
        let s = t[0] as u128 + q * m[0] as u128;
        let mut carry = s >> 64;
        for j in 1..n {
            let s = t[j] as u128 + q * m[j] as u128 + carry;
            t[j - 1] = s as u64;
            carry = s >> 64;
        }
        let s = t_hi as u128 + carry;
        t[n - 1] = s as u64;
        t_hi = t_top + (s >> 64) as u64;
    }
    if t_hi != 0 || !less_than(&t[..n], m) {
        let mut borrow = 0u64;
        for j in 0..n {
            let (d1, b1) = t[j].overflowing_sub(m[j]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            out[j] = d2;
            borrow = (b1 | b2) as u64;
        }
    } else {
        out.copy_from_slice(&t[..n]);
    }
}

#[inline]
fn less_than(a: &[u64], b: &[u64]) -> bool {
    for j in (0..a.len()).rev() {
        if a[j] != b[j] {
            return a[j] < b[j];
        }
    }
    false
}

fn pad(digits: &[u64], n: usize) -> Vec<u64> {
    let mut v = vec![0u64; n];
    v[..digits.len()].copy_from_slice(digits);
    v
}

pub(crate) fn limbs_to_big(limbs: &[u64]) -> BigUint {
    let bytes: Vec<u8> = limbs.iter().flat_map(|l| l.to_le_bytes()).collect();
    BigUint::from_bytes_le(&bytes)
}

fn digits_bits(exp: &[u64]) -> usize {
    for (i, &d) in exp.iter().enumerate().rev() {
        if d != 0 {
            return i * 64 + (64 - d.leading_zeros() as usize);
        }
    }
    0
}

#[inline]
fn window_digit(exp: &[u64], k: usize) -> usize {
    let bit = k * WINDOW;
    let limb = bit / 64;
    let off = bit % 64;
    if limb >= exp.len() {
        return 0;
    }
    // WINDOW divides 64, so a digit never straddles limbs.
    ((exp[limb] >> off) & ((1 << WINDOW) - 1)) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::RandBigInt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moduli() -> Vec<BigUint> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        [65u64, 130, 256, 512, 520, 1000]
            .iter()
            .map(|&bits| {
                let mut m = rng.gen_biguint(bits);
                m.set_bit(bits - 1, true);
                m.set_bit(0, true);
                m
            })
            .collect()
    }

    #[test]
    fn mul_matches_bignum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in moduli() {
            let ctx = Montgomery::new(&m);
            for _ in 0..50 {
                let a = rng.gen_biguint_below(&m);
                let b = rng.gen_biguint_below(&m);
                let (am, bm) = (ctx.to_mont(&a), ctx.to_mont(&b));
                let mut out = vec![0; ctx.limbs()];
                ctx.mul(&am, &bm, &mut out);
                assert_eq!(ctx.from_mont(&out), (&a * &b) % &m);
            }
        }
    }

    #[test]
    fn pow_and_fixed_base_match_modpow() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in moduli() {
            let ctx = Montgomery::new(&m);
            let base = rng.gen_biguint_below(&m);
            let bm = ctx.to_mont(&base);
            let table = FixedBaseTable::new(&ctx, &bm, m.bits() as usize);
            for _ in 0..10 {
                let e = rng.gen_biguint_below(&m);
                let want = base.modpow(&e, &m);
                assert_eq!(ctx.from_mont(&ctx.pow_big(&bm, &e)), want);
                assert_eq!(ctx.from_mont(&table.pow(&ctx, &e.to_u64_digits())), want);
            }
            assert!(ctx.is_one(&ctx.pow(&bm, &[])));
            assert_eq!(ctx.from_mont(&ctx.pow_small(&bm, 5)), base.modpow(&BigUint::from(5u8), &m));
        }
    }

    #[test]
    fn batch_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // prime modulus: 2^127 - 1
        let m = (BigUint::from(1u8) << 127) - 1u8;
        let ctx = Montgomery::new(&m);
        let xs: Vec<BigUint> = (0..7).map(|_| rng.gen_biguint_below(&m) + 1u8).collect();
        let mut vals: Vec<Vec<u64>> = xs.iter().map(|x| ctx.to_mont(x)).collect();
        ctx.batch_invert(&mut vals);
        for (x, inv) in xs.iter().zip(&vals) {
            assert_eq!((x * ctx.from_mont(inv)) % &m, BigUint::from(1u8));
        }
    }

    #[test]
    fn multi_exp_both_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = (BigUint::from(1u8) << 127) - 1u8;
        let ctx = Montgomery::new(&m);
        for (len, range) in [(40usize, 3i64), (40, 5000), (3, 100), (10, 0)] {
            let xs: Vec<BigUint> = (0..len).map(|_| rng.gen_biguint_below(&m) + 1u8).collect();
            let exps: Vec<i64> = (0..len)
                .map(|_| if range == 0 { 0 } else { rand::Rng::gen_range(&mut rng, -range..=range) })
                .collect();
            let flat: Vec<u64> = xs.iter().flat_map(|x| ctx.to_mont(x)).collect();
            let (num, den) = ctx.multi_exp_signed(&flat, &exps);
            let mut want_num = BigUint::from(1u8);
            let mut want_den = BigUint::from(1u8);
            for (x, &e) in xs.iter().zip(&exps) {
                let p = x.modpow(&BigUint::from(e.unsigned_abs()), &m);
                if e > 0 {
                    want_num = want_num * p % &m;
                } else if e < 0 {
                    want_den = want_den * p % &m;
                }
            }
            assert_eq!(ctx.from_mont(&num), want_num);
            assert_eq!(ctx.from_mont(&den), want_den);
        }
    }
}
