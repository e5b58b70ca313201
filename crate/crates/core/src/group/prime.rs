use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const MR_ROUNDS: usize = 64;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// Miller-Rabin with `MR_ROUNDS` random bases.
///
/// Bases come from a generator seeded by `n` itself so the verdict is
/// reproducible.
pub fn is_probable_prime(n: &BigUint) -> bool {
    if n < &BigUint::from(2u8) {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;

    let mut seed = [0u8; 32];
    for (slot, b) in seed.iter_mut().zip(n.to_bytes_le()) {
        *slot = b;
    }
    let mut rng = ChaCha20Rng::from_seed(seed);
    let two = BigUint::from(2u8);
    let upper = n - &one; // exclusive

    'witness: for _ in 0..MR_ROUNDS {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
            if x == one {
                return false;
            }
        }
        return false;
    }
    true
}

/// Cheap rejection for `q` and `2q + 1` by trial division.
pub fn sieve_safe_candidate(q: &BigUint) -> bool {
    for &sp in SMALL_PRIMES.iter().skip(1) {
        let r = (q % sp).to_u32_digits().first().copied().unwrap_or(0);
        let big_r = (2 * u64::from(r) + 1) % u64::from(sp);
        let q_is_sp = q == &BigUint::from(sp);
        if (r == 0 && !q_is_sp) || big_r == 0 {
            return false;
        }
    }
    q.is_odd()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_trial_division_below_5000() {
        for n in 0u32..5000 {
            let naive = n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(is_probable_prime(&BigUint::from(n)), naive, "n = {n}");
        }
    }

    #[test]
    fn rejects_carmichael_and_accepts_mersenne() {
        for c in [561u64, 41041, 825265, 321197185, 5394826801] {
            assert!(!is_probable_prime(&BigUint::from(c)));
        }
        let m127 = (BigUint::one() << 127) - 1u8;
        assert!(is_probable_prime(&m127));
        assert!(!is_probable_prime(&(&m127 * &m127)));
    }
}
