//! Universal hashing `h(x) = ((a*x + b) mod p) mod m`.
//!
//! A hash is four integers, so any projection matrix built on top of it is
//! stored in O(1) memory and each entry is computed in O(1) time.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::seed::{self, tag};

/// Lower bound for the modulus so that `a` and `b` are drawn from a large field
/// even when the domain is tiny.
const MIN_PRIME_FLOOR: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UniversalHash {
    a: u64,
    b: u64,
    p: u64,
    m: u64,
}

impl UniversalHash {
    /// Draws `a` and `b` from a generator seeded with `seed`. The modulus is the
    /// smallest prime above `max(domain_size, range, 2^31)`.
    pub fn new(seed: u64, domain_size: u64, range: u64) -> Result<Self> {
        if range == 0 {
            return Err(FairError::invalid("hash range must be at least 1"));
        }
        if domain_size == 0 {
            return Err(FairError::invalid("hash domain must be at least 1"));
        }
        let floor = domain_size.max(range).max(MIN_PRIME_FLOOR);
        let p = next_prime_above(floor)
            .ok_or_else(|| FairError::invalid("no 64-bit prime above hash domain"))?;
        let mut rng = seed::rng_for(seed, &[]);
        let a = rng.random_range(1..p);
        let b = rng.random_range(0..p);
        Ok(Self { a, b, p, m: range })
    }

    /// Builds a hash from explicit parameters. `m == p` is accepted so that the
    /// identity map `a=1, b=0, m=p` can be expressed.
    pub fn from_parts(a: u64, b: u64, p: u64, m: u64) -> Result<Self> {
        if !is_prime(p) {
            return Err(FairError::invalid(format!("modulus {p} is not prime")));
        }
        if a == 0 || a >= p {
            return Err(FairError::invalid(format!(
                "multiplier {a} not in [1, {p})"
            )));
        }
        if b >= p {
            return Err(FairError::invalid(format!("offset {b} not in [0, {p})")));
        }
        if m == 0 || m > p {
            return Err(FairError::invalid(format!("range {m} not in [1, {p}]")));
        }
        Ok(Self { a, b, p, m })
    }

    #[inline]
    pub fn eval(&self, x: u64) -> u64 {
        debug_assert!(x < self.p, "hash input {x} outside domain {}", self.p);
        let v = (self.a as u128 * x as u128 + self.b as u128) % self.p as u128;
        (v % self.m as u128) as u64
    }

    pub fn a(&self) -> u64 {
        self.a
    }

    pub fn b(&self) -> u64 {
        self.b
    }

    pub fn prime(&self) -> u64 {
        self.p
    }

    pub fn range(&self) -> u64 {
        self.m
    }
}

/// `x -> ±1` built from an independent two-bucket universal hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignHash(UniversalHash);

impl SignHash {
    pub fn new(seed: u64, domain_size: u64) -> Result<Self> {
        let derived = seed::derive_seed(seed, &[tag::SIGN]);
        Ok(Self(UniversalHash::new(derived, domain_size, 2)?))
    }

    #[inline]
    pub fn sign(&self, x: u64) -> f64 {
        if self.0.eval(x) == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for all 64-bit inputs.
pub fn is_prime(n: u64) -> bool {
    const SMALL: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &q in &SMALL {
        if n.is_multiple_of(q) {
            return n == q;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &w in &SMALL {
        let mut x = pow_mod(w, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest prime strictly greater than `n`.
pub fn next_prime_above(n: u64) -> Option<u64> {
    let mut c = n.checked_add(1)?;
    while !is_prime(c) {
        c = c.checked_add(1)?;
    }
    Some(c)
}
