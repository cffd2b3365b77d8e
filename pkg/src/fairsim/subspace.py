"""Implicit hashed projection subspaces and the reduce/recover operations.

A family holds one base hash h: {0..n-1} -> {0..m_max-1}.  The subspace of
dimension m (a power of 2 dividing m_max) places row a's single non-zero in
column h(a) % m, which is exactly the clip-and-add construction: each column
of the small matrix is the sum of m_max/m columns of the big one, so every
family member's column space nests inside every larger member's.  None of
these matrices is ever materialized outside `dense_matrix`, a capped test
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hashing import SignHash, UniversalHash, new_sign_hash, new_universal_hash

# Hard cap for the dense oracle; anything bigger defeats its purpose.
DENSE_CAP = 1 << 20


def is_power_of_two(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def greatest_power_of_two_at_most(x: int) -> int:
    if x < 1:
        raise ValueError(f"no power of 2 is <= {x}")
    return 1 << (int(x).bit_length() - 1)


@dataclass(frozen=True)
class SubspaceFamily:
    """A consistent-and-collapsible set of subspaces sharing one base hash."""

    n: int
    m_max: int
    base_hash: UniversalHash
    sign_hash: SignHash | None = None
    use_identity_at_full: bool = True

    def __post_init__(self):
        if not is_power_of_two(self.m_max) or not (1 <= self.m_max <= self.n):
            raise ValueError(f"m_max must be a power of 2 in [1, n], got {self.m_max} (n={self.n})")
        if self.base_hash.m != self.m_max:
            raise ValueError(f"base hash range {self.base_hash.m} != m_max {self.m_max}")
        if self.base_hash.p <= self.n - 1:
            raise ValueError("base hash modulus must exceed the largest row index")

    @classmethod
    def from_seed(cls, n: int, m_max: int, seed, with_signs: bool = False,
                  use_identity_at_full: bool = True) -> "SubspaceFamily":
        seed = list(np.atleast_1d(seed).astype(np.int64))
        base = new_universal_hash(seed + [0], n, m_max)
        sign = new_sign_hash(seed + [1], n) if with_signs else None
        return cls(n=n, m_max=m_max, base_hash=base, sign_hash=sign,
                   use_identity_at_full=use_identity_at_full)

    def subspace(self, m: int) -> "Subspace":
        return Subspace(family=self, m=m)

    def identity_subspace(self) -> "Subspace":
        return Subspace(family=self, m=self.n, identity=True)


@dataclass(frozen=True)
class Subspace:
    """One device's implicit n x m projection, m a power of 2 dividing m_max."""

    family: SubspaceFamily
    m: int
    identity: bool = False

    def __post_init__(self):
        if self.identity:
            if self.m != self.family.n:
                raise ValueError("identity subspace must have m = n")
            return
        if not is_power_of_two(self.m) or self.family.m_max % self.m != 0:
            raise ValueError(f"m={self.m} must be a power of 2 dividing m_max={self.family.m_max}")

    @property
    def n(self) -> int:
        return self.family.n

    def row_buckets(self, rows: np.ndarray) -> np.ndarray:
        """Column index of the single non-zero in each given row."""
        if self.identity:
            return np.asarray(rows, dtype=np.int64)
        return self.family.base_hash.eval_array(rows) % self.m

    def row_signs(self, rows: np.ndarray) -> np.ndarray | None:
        """Values of the non-zeros (+/-1), or None when the sign map is off."""
        if self.identity or self.family.sign_hash is None:
            return None
        return self.family.sign_hash.eval_array(rows)

    def reduce(self, theta: np.ndarray) -> np.ndarray:
        """Project theta onto the subspace, expressed in the device basis.

        psi[j] is the signed mean of the theta entries hashed to bucket j,
        the least-squares solution of min ||S psi - theta||; empty buckets
        get 0, the minimum-norm choice.
        """
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.n},)")
        if self.identity:
            return theta.copy()
        rows = np.arange(self.n)
        buckets = self.row_buckets(rows)
        signs = self.row_signs(rows)
        signed = theta if signs is None else theta * signs
        sums = np.bincount(buckets, weights=signed, minlength=self.m)
        counts = np.bincount(buckets, minlength=self.m)
        psi = np.zeros(self.m)
        occupied = counts > 0
        psi[occupied] = sums[occupied] / counts[occupied]
        return psi

    def recover(self, psi: np.ndarray) -> np.ndarray:
        """Map device coordinates back to the full space: theta = S psi."""
        psi = np.asarray(psi, dtype=np.float64)
        if psi.shape != (self.m,):
            raise ValueError(f"psi has shape {psi.shape}, expected ({self.m},)")
        if self.identity:
            return psi.copy()
        rows = np.arange(self.n)
        theta = psi[self.row_buckets(rows)]
        signs = self.row_signs(rows)
        return theta if signs is None else theta * signs

    def recover_slice(self, psi: np.ndarray, start: int, stop: int) -> np.ndarray:
        """recover(psi)[start:stop] in O(stop-start) time and memory."""
        if not (0 <= start < stop <= self.n):
            raise ValueError(f"bad slice [{start}, {stop}) for n={self.n}")
        psi = np.asarray(psi, dtype=np.float64)
        if psi.shape != (self.m,):
            raise ValueError(f"psi has shape {psi.shape}, expected ({self.m},)")
        if self.identity:
            return psi[start:stop].copy()
        rows = np.arange(start, stop)
        out = psi[self.row_buckets(rows)]
        signs = self.row_signs(rows)
        return out if signs is None else out * signs

    def scatter_grad(self, start: int, grad_slice: np.ndarray, accum: np.ndarray) -> None:
        """accum += S[start:start+len, :]^T grad_slice (adjoint of recovery).

        Unnormalized sum on purpose: the forward map is the raw binary S, so
        its adjoint is S^T with no count division.  Handles colliding rows
        within the slice.
        """
        grad_slice = np.asarray(grad_slice, dtype=np.float64)
        if accum.shape != (self.m,):
            raise ValueError(f"accum has shape {accum.shape}, expected ({self.m},)")
        if start + grad_slice.shape[0] > self.n or start < 0:
            raise ValueError(f"slice [{start}, {start + grad_slice.shape[0]}) exceeds n={self.n}")
        if self.identity:
            accum[start:start + grad_slice.shape[0]] += grad_slice
            return
        rows = np.arange(start, start + grad_slice.shape[0])
        signs = self.row_signs(rows)
        signed = grad_slice if signs is None else grad_slice * signs
        np.add.at(accum, self.row_buckets(rows), signed)

    def dense_matrix(self) -> np.ndarray:
        """Materialize S (test oracle only; refuses anything large)."""
        if self.n * self.m > DENSE_CAP:
            raise ValueError(f"dense oracle capped at n*m <= {DENSE_CAP}, got {self.n * self.m}")
        rows = np.arange(self.n)
        buckets = self.row_buckets(rows)
        signs = self.row_signs(rows)
        S = np.zeros((self.n, self.m))
        S[rows, buckets] = 1.0 if signs is None else signs
        return S


def subspace_for_capacity(family: SubspaceFamily, alpha: float) -> Subspace:
    """Subspace sized for a device holding an alpha fraction of the model.

    alpha = 1 maps to the exact identity (full-capacity devices run plain
    federated averaging); otherwise the dimension is the greatest power of 2
    at most floor(alpha * n), capped at the family maximum.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if alpha == 1.0 and family.use_identity_at_full:
        return family.identity_subspace()
    # Tiny epsilon so exact-integer capacities survive float division.
    budget = int(np.floor(alpha * family.n + 1e-9))
    if budget < 1:
        raise ValueError(f"capacity alpha={alpha} leaves no room for a single parameter (n={family.n})")
    m = min(greatest_power_of_two_at_most(budget), family.m_max)
    return family.subspace(m)
