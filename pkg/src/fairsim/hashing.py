"""Universal hash family h(x) = ((a*x + b) % p) % m.

A single (a, b, p, m) tuple implicitly defines an entire n x m binary
projection matrix (one non-zero per row, located by the hash), so the
projection costs O(1) memory no matter how large n gets.  All arithmetic
is done in Python integers (scalar path) or uint64 (vector path, with an
explicit no-overflow precondition), so intermediates never wrap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Primes are chosen above this floor so that one canonical modulus serves
# every realistic domain and bucket count.
PRIME_FLOOR = 1 << 31


def _is_prime(n: int) -> bool:
    from sympy import isprime

    return bool(isprime(n))


def smallest_prime_above(threshold: int) -> int:
    """Smallest prime strictly greater than `threshold` (deterministic)."""
    from sympy import nextprime

    return int(nextprime(threshold))


@dataclass(frozen=True)
class UniversalHash:
    """One member of the universal family: x -> ((a*x + b) % p) % m."""

    a: int
    b: int
    p: int
    m: int

    def __post_init__(self):
        if not (self.m >= 1 and self.p > self.m):
            raise ValueError(f"need p > m >= 1, got p={self.p}, m={self.m}")
        if not (1 <= self.a <= self.p - 1):
            raise ValueError(f"need 1 <= a <= p-1, got a={self.a}")
        if not (0 <= self.b <= self.p - 1):
            raise ValueError(f"need 0 <= b <= p-1, got b={self.b}")
        if not _is_prime(self.p):
            raise ValueError(f"modulus p={self.p} is not prime")

    def eval(self, x: int) -> int:
        """Bucket of a single key, 0 <= x < p."""
        return ((self.a * x + self.b) % self.p) % self.m

    def eval_array(self, xs: np.ndarray) -> np.ndarray:
        """Buckets for an int array of keys, vectorized.

        Uses uint64 intermediates; valid while a*x + b < 2**64, which holds
        for any p below 2**32 (the canonical construction keeps p barely
        above 2**31).  Larger moduli fall back to exact Python integers.
        """
        xs = np.asarray(xs)
        if self.p < (1 << 32):
            v = xs.astype(np.uint64)
            out = (np.uint64(self.a) * v + np.uint64(self.b)) % np.uint64(self.p)
            return (out % np.uint64(self.m)).astype(np.int64)
        return np.array([self.eval(int(x)) for x in xs.ravel()], dtype=np.int64).reshape(xs.shape)


@dataclass(frozen=True)
class SignHash:
    """Random sign map x -> {+1, -1}, built from a two-bucket UniversalHash."""

    inner: UniversalHash

    def __post_init__(self):
        if self.inner.m != 2:
            raise ValueError("sign hash requires a 2-bucket inner hash")

    def eval(self, x: int) -> int:
        return 1 - 2 * self.inner.eval(x)

    def eval_array(self, xs: np.ndarray) -> np.ndarray:
        return 1 - 2 * self.inner.eval_array(xs)


def new_universal_hash(seed, domain_size: int, num_buckets: int) -> UniversalHash:
    """Draw a hash with range `num_buckets` from a seeded PRNG.

    The modulus is the smallest prime above max(domain_size, num_buckets,
    2**31); fixing that rule makes seed -> hash reproducible everywhere.
    `seed` is anything numpy's default_rng accepts (int or sequence of ints).
    """
    if domain_size < 1:
        raise ValueError(f"domain_size must be >= 1, got {domain_size}")
    if num_buckets < 1:
        raise ValueError(f"num_buckets must be >= 1, got {num_buckets}")
    p = smallest_prime_above(max(domain_size, num_buckets, PRIME_FLOOR))
    rng = np.random.default_rng(seed)
    a = int(rng.integers(1, p))
    b = int(rng.integers(0, p))
    return UniversalHash(a=a, b=b, p=p, m=num_buckets)


def new_sign_hash(seed, domain_size: int) -> SignHash:
    """Independent +/-1 hash over the same domain (off by default upstream)."""
    return SignHash(new_universal_hash(seed, domain_size, 2))
