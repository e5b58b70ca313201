//! Safe-prime group `Z_P^*` restricted to its subgroup of prime order `p`,
//! `P = 2p + 1`.

pub mod mont;
mod prime;

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use mont::{FixedBaseTable, Montgomery};
pub use prime::{is_probable_prime, MR_ROUNDS};

use crate::error::{Error, Result};

pub const MIN_LAMBDA: u32 = 64;
pub const MAX_LAMBDA: u32 = 4096;

const TEST64_P: &str = "1fc5b7a32d0e9d9c7";
const DEMO512_P: &str = "89602eb656e04fe4f78038778e2dd302b0c2b23bca92b0b5e2c8122bb3a91103\
677696cb932cee9e999120ea00b6fddea803079a75f5c848b30ff66df3f1d17f";
const SECURE2048_P: &str = "ffffffffffffffffc90fdaa22168c234c4c6628b80dc1cd129024e088a67cc74\
020bbea63b139b22514a08798e3404ddef9519b3cd3a431b302b0a6df25f14374fe1356d6d51c245e485b576625e\
7ec6f44c42e9a637ed6b0bff5cb6f406b7edee386bfb5a899fa5ae9f24117c4b1fe649286651ece45b3dc2007cb8\
a163bf0598da48361c55d39a69163fa8fd24cf5f83655d23dca3ad961c62f356208552bb9ed529077096966d670c\
354e4abc9804f1746c08ca18217c32905e462e36ce3be39e772c180e86039b2783a2ec07a28fb5c55df06f4c52c9\
de2bcbf6955817183995497cea956ae515d2261898fa051015728e5a8aacaa68ffffffffffffffff";

/// Names accepted by [`GroupParams::named`].
pub const NAMED_SETS: [&str; 3] = ["test64", "demo512", "secure2048"];

struct Inner {
    modulus: BigUint,
    order: BigUint,
    generator: BigUint,
    lambda: u32,
    mont: Montgomery,
    g_mont: Vec<u64>,
    g_tables: OnceLock<(FixedBaseTable, FixedBaseTable)>,
}

/// Public group description. Cloning is cheap.
#[derive(Clone)]
pub struct GroupParams {
    inner: Arc<Inner>,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("P", &format_args!("{:x}", self.inner.modulus))
            .field("p", &format_args!("{:x}", self.inner.order))
            .field("g", &format_args!("{:x}", self.inner.generator))
            .field("lambda", &self.inner.lambda)
            .finish()
    }
}

impl PartialEq for GroupParams {
    fn eq(&self, other: &Self) -> bool {
        self.inner.modulus == other.inner.modulus
            && self.inner.order == other.inner.order
            && self.inner.generator == other.inner.generator
            && self.inner.lambda == other.inner.lambda
    }
}

impl Eq for GroupParams {}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scalar(BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

impl Scalar {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl GroupParams {
    /// Validates and builds parameters with `lambda = bit-length(p)`.
    pub fn new(modulus: BigUint, order: BigUint, generator: BigUint) -> Result<Self> {
        let lambda = order.bits() as u32;
        Self::with_lambda(modulus, order, generator, lambda)
    }

    pub fn with_lambda(
        modulus: BigUint,
        order: BigUint,
        generator: BigUint,
        lambda: u32,
    ) -> Result<Self> {
        if modulus != &order * 2u8 + 1u8 {
            return Err(Error::InvalidParams("P != 2p + 1".into()));
        }
        if !is_probable_prime(&order) || !is_probable_prime(&modulus) {
            return Err(Error::InvalidParams("P or p is not prime".into()));
        }
        if (order.bits() as u32) < lambda {
            return Err(Error::InvalidParams(format!(
                "bit-length of p is {} < lambda {lambda}",
                order.bits()
            )));
        }
        Self::check_generator(&modulus, &order, &generator)?;
        Ok(Self::unchecked(modulus, order, generator, lambda))
    }

    fn check_generator(modulus: &BigUint, order: &BigUint, generator: &BigUint) -> Result<()> {
        if generator < &BigUint::from(2u8) || generator >= modulus {
            return Err(Error::InvalidParams("generator outside [2, P-1]".into()));
        }
        if !generator.modpow(order, modulus).is_one() {
            return Err(Error::InvalidParams(
                "generator does not lie in the order-p subgroup".into(),
            ));
        }
        Ok(())
    }

    fn unchecked(modulus: BigUint, order: BigUint, generator: BigUint, lambda: u32) -> Self {
        let mont = Montgomery::new(&modulus);
        let g_mont = mont.to_mont(&generator);
        GroupParams {
            inner: Arc::new(Inner {
                modulus,
                order,
                generator,
                lambda,
                mont,
                g_mont,
                g_tables: OnceLock::new(),
            }),
        }
    }

    /// One of [`NAMED_SETS`]. The embedded constants are verified by tests,
    /// so only the cheap generator check runs here.
    pub fn named(name: &str) -> Result<Self> {
        let hex_p = match name {
            "test64" => TEST64_P,
            "demo512" => DEMO512_P,
            "secure2048" => SECURE2048_P,
            other => return Err(Error::UnknownParamSet(other.to_string())),
        };
        let modulus = BigUint::parse_bytes(hex_p.as_bytes(), 16).expect("embedded constant");
        let order: BigUint = (&modulus - 1u8) >> 1;
        let generator = BigUint::from(4u8);
        let lambda = order.bits() as u32;
        Self::check_generator(&modulus, &order, &generator)?;
        Ok(Self::unchecked(modulus, order, generator, lambda))
    }

    pub fn modulus(&self) -> &BigUint {
        &self.inner.modulus
    }

    pub fn order(&self) -> &BigUint {
        &self.inner.order
    }

    pub fn generator(&self) -> GroupElement {
        GroupElement(self.inner.generator.clone())
    }

    pub fn lambda(&self) -> u32 {
        self.inner.lambda
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement(BigUint::one())
    }

    /// Accepts `value` only if it lies in the order-p subgroup.
    pub fn element(&self, value: BigUint) -> Result<GroupElement> {
        if self.contains(&value) {
            Ok(GroupElement(value))
        } else {
            Err(Error::NotInSubgroup)
        }
    }

    pub fn contains(&self, value: &BigUint) -> bool {
        !value.is_zero()
            && value < &self.inner.modulus
            && value.modpow(&self.inner.order, &self.inner.modulus).is_one()
    }

    pub fn scalar(&self, value: BigUint) -> Scalar {
        if value < self.inner.order {
            Scalar(value)
        } else {
            Scalar(value % &self.inner.order)
        }
    }

    /// Folds a signed integer into `Z_p` as `p - |v|` for negative `v`.
    pub fn scalar_from_i64(&self, v: i64) -> Scalar {
        let mag = self.scalar(BigUint::from(v.unsigned_abs()));
        if v < 0 {
            self.scalar_neg(&mag)
        } else {
            mag
        }
    }

    pub fn scalar_add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        self.scalar(&a.0 + &b.0)
    }

    pub fn scalar_mul(&self, a: &Scalar, b: &Scalar) -> Scalar {
        self.scalar(&a.0 * &b.0)
    }

    pub fn scalar_neg(&self, a: &Scalar) -> Scalar {
        if a.0.is_zero() {
            a.clone()
        } else {
            Scalar(&self.inner.order - &a.0)
        }
    }

    /// `None` for zero.
    pub fn scalar_inv(&self, a: &Scalar) -> Option<Scalar> {
        if a.0.is_zero() {
            return None;
        }
        let e = &self.inner.order - 2u8;
        Some(Scalar(a.0.modpow(&e, &self.inner.order)))
    }

    pub fn sample_scalar<R: Rng + ?Sized>(&self, rng: &mut R) -> Scalar {
        Scalar(rng.gen_biguint_below(&self.inner.order))
    }

    pub fn exp(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        let m = &self.inner.mont;
        let b = m.to_mont(&base.0);
        GroupElement(m.from_mont(&m.pow_big(&b, &e.0)))
    }

    pub fn exp_g(&self, e: &Scalar) -> GroupElement {
        let m = &self.inner.mont;
        GroupElement(m.from_mont(&self.g_pow_mont(&e.0)))
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement((&a.0 * &b.0) % &self.inner.modulus)
    }

    pub fn inv(&self, a: &GroupElement) -> GroupElement {
        let m = &self.inner.mont;
        GroupElement(m.from_mont(&m.invert(&m.to_mont(&a.0))))
    }

    pub(crate) fn mont(&self) -> &Montgomery {
        &self.inner.mont
    }

    pub(crate) fn to_mont(&self, a: &GroupElement) -> Vec<u64> {
        self.inner.mont.to_mont(&a.0)
    }

    pub(crate) fn from_mont(&self, a: &[u64]) -> GroupElement {
        GroupElement(self.inner.mont.from_mont(a))
    }

    pub(crate) fn g_mont(&self) -> &[u64] {
        &self.inner.g_mont
    }

    fn g_tables(&self) -> &(FixedBaseTable, FixedBaseTable) {
        self.inner.g_tables.get_or_init(|| {
            let m = &self.inner.mont;
            let bits = self.inner.order.bits() as usize;
            let g_inv = m.invert(&self.inner.g_mont);
            (
                FixedBaseTable::new(m, &self.inner.g_mont, bits),
                FixedBaseTable::new(m, &g_inv, bits),
            )
        })
    }

    /// `g^e` in Montgomery form for `e < p`.
    pub(crate) fn g_pow_mont(&self, e: &BigUint) -> Vec<u64> {
        self.g_tables().0.pow(&self.inner.mont, &e.to_u64_digits())
    }

    /// `g^f` in Montgomery form for a small signed `f`.
    pub(crate) fn g_pow_signed_mont(&self, f: i64) -> Vec<u64> {
        let (pos, neg) = self.g_tables();
        if f >= 0 {
            pos.pow_u64(&self.inner.mont, f as u64)
        } else {
            neg.pow_u64(&self.inner.mont, f.unsigned_abs())
        }
    }
}

/// Default candidate budget for [`group_gen`].
pub fn default_attempt_budget(lambda: u32) -> usize {
    50 * (lambda as usize).pow(2)
}

/// Random safe-prime group with `bit-length(p) = lambda` and `g = 4`.
pub fn group_gen<R: Rng + ?Sized>(lambda: u32, rng: &mut R) -> Result<GroupParams> {
    group_gen_with_budget(lambda, default_attempt_budget(lambda), rng)
}

pub fn group_gen_with_budget<R: Rng + ?Sized>(
    lambda: u32,
    max_attempts: usize,
    rng: &mut R,
) -> Result<GroupParams> {
    if !(MIN_LAMBDA..=MAX_LAMBDA).contains(&lambda) {
        return Err(Error::InvalidParams(format!(
            "lambda must lie in [{MIN_LAMBDA}, {MAX_LAMBDA}], got {lambda}"
        )));
    }
    let bits = u64::from(lambda);
    for _ in 0..max_attempts {
        let mut q = rng.gen_biguint(bits);
        q.set_bit(bits - 1, true);
        q.set_bit(0, true);
        if !prime::sieve_safe_candidate(&q) {
            continue;
        }
        if !is_probable_prime(&q) {
            continue;
        }
        let big = &q * 2u8 + 1u8;
        if !is_probable_prime(&big) {
            continue;
        }
        log::debug!("safe prime found for lambda {lambda}");
        return GroupParams::with_lambda(big, q, BigUint::from(4u8), lambda);
    }
    Err(Error::GenerationTimeout {
        attempts: max_attempts,
    })
}

/// Lowercase hex without leading zeros; zero is `"0"`.
pub fn to_hex(v: &BigUint) -> String {
    format!("{v:x}")
}

pub fn from_hex(s: &str) -> Result<BigUint> {
    let canonical = !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        && (s == "0" || !s.starts_with('0'));
    if !canonical {
        return Err(Error::Malformed(format!("non-canonical hex integer `{s}`")));
    }
    BigUint::parse_bytes(s.as_bytes(), 16)
        .ok_or_else(|| Error::Malformed(format!("bad hex integer `{s}`")))
}

/// `#[serde(with = "hex_big")]` for `BigUint` fields.
pub mod hex_big {
    use super::*;

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&to_hex(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl Serialize for GroupElement {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        hex_big::serialize(&self.0, s)
    }
}

/// Range and membership are checked against a `GroupParams` by the consumer.
impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = hex_big::deserialize(d)?;
        if v.is_zero() {
            return Err(serde::de::Error::custom("group element cannot be zero"));
        }
        Ok(GroupElement(v))
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        hex_big::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        hex_big::deserialize(d).map(Scalar)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    #[serde(rename = "P", with = "hex_big")]
    modulus: BigUint,
    #[serde(with = "hex_big")]
    p: BigUint,
    #[serde(with = "hex_big")]
    g: BigUint,
    lambda: u32,
}

impl Serialize for GroupParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsRecord {
            modulus: self.inner.modulus.clone(),
            p: self.inner.order.clone(),
            g: self.inner.generator.clone(),
            lambda: self.inner.lambda,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ParamsRecord::deserialize(d)?;
        GroupParams::with_lambda(r.modulus, r.p, r.g, r.lambda).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GroupParams {
        GroupParams::new(23u8.into(), 11u8.into(), 4u8.into()).unwrap()
    }

    #[test]
    fn named_sets_pass_full_validation() {
        for name in NAMED_SETS {
            let g = GroupParams::named(name).unwrap();
            let again = GroupParams::with_lambda(
                g.modulus().clone(),
                g.order().clone(),
                g.generator().value().clone(),
                g.lambda(),
            )
            .unwrap();
            assert_eq!(g, again);
        }
        let t = GroupParams::named("test64").unwrap();
        assert_eq!(t.lambda(), 64);
        assert_eq!(t.order().bits(), 64);
        assert_eq!(GroupParams::named("demo512").unwrap().modulus().bits(), 512);
        assert!(matches!(GroupParams::named("x"), Err(Error::UnknownParamSet(_))));
    }

    #[test]
    fn tiny_group_exhaustive() {
        let g = tiny();
        // subgroup of order 11 in Z_23^*: the quadratic residues
        let members: Vec<u32> = (1..23).filter(|v| g.contains(&BigUint::from(*v))).collect();
        assert_eq!(members, vec![1, 2, 3, 4, 6, 8, 9, 12, 13, 16, 18]);
        let four = g.generator();
        assert_eq!(g.exp(&four, &g.scalar(2u8.into())).value(), &BigUint::from(16u8));
        assert_eq!(g.exp(&four, &g.scalar(0u8.into())), g.identity());
        for e in 0u8..11 {
            assert_eq!(g.exp(&four, &g.scalar(e.into())), g.exp_g(&g.scalar(e.into())));
        }
    }

    #[test]
    fn rejects_bad_generators_and_non_safe_primes() {
        assert!(GroupParams::new(23u8.into(), 11u8.into(), 1u8.into()).is_err());
        // 5 is a non-residue mod 23, so it has order 22
        assert!(GroupParams::new(23u8.into(), 11u8.into(), 5u8.into()).is_err());
        assert!(GroupParams::new(25u8.into(), 12u8.into(), 4u8.into()).is_err());
        assert!(GroupParams::with_lambda(23u8.into(), 11u8.into(), 4u8.into(), 5).is_err());
    }

    #[test]
    fn generation_at_lambda_64_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = group_gen(64, &mut rng).unwrap();
        assert_eq!(g.order().bits(), 64);
        assert!(is_probable_prime(g.order()) && is_probable_prime(g.modulus()));
        assert!(g.generator().value().modpow(g.order(), g.modulus()).is_one());
        assert!(matches!(
            group_gen_with_budget(512, 1, &mut rng),
            Err(Error::GenerationTimeout { attempts: 1 })
        ));
        assert!(group_gen(32, &mut rng).is_err());
        assert!(group_gen(5000, &mut rng).is_err());
    }

    #[test]
    fn inverse_exponent_round_trip() {
        let g = GroupParams::named("demo512").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let b = g.exp_g(&g.sample_scalar(&mut rng));
            let e = g.sample_scalar(&mut rng);
            let back = g.exp(&g.exp(&b, &e), &g.scalar_inv(&e).unwrap());
            assert_eq!(back, b);
            assert_eq!(g.mul(&b, &g.inv(&b)), g.identity());
        }
        assert_eq!(g.inv(&g.identity()), g.identity());
    }

    #[test]
    fn signed_generator_powers() {
        let g = GroupParams::named("test64").unwrap();
        for f in [-70000i64, -5, -1, 0, 1, 3, 99999] {
            let want = g.exp_g(&g.scalar_from_i64(f));
            assert_eq!(g.from_mont(&g.g_pow_signed_mont(f)), want);
        }
    }

    #[test]
    fn serialization_shape() {
        let g = tiny();
        let json = serde_json::to_value(&g).unwrap();
        assert_eq!(json, serde_json::json!({"P": "17", "p": "b", "g": "4", "lambda": 4}));
        let back: GroupParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_hex(&BigUint::zero()), "0");
        assert!(from_hex("0a").is_err());
        assert!(from_hex("AB").is_err());
        assert!(from_hex("").is_err());
        assert_eq!(from_hex("ab").unwrap(), BigUint::from(171u8));
        let s: Scalar = serde_json::from_str("\"0\"").unwrap();
        assert!(s.is_zero());
    }

    #[test]
    fn sampling_is_seeded() {
        let g = GroupParams::named("test64").unwrap();
        let a = g.sample_scalar(&mut ChaCha8Rng::seed_from_u64(9));
        let b = g.sample_scalar(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.value() < g.order());
    }
}
