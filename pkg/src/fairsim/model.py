"""Collaborative-filtering client model over a hashed embedding table.

The item table is virtual: num_items * dim parameters live compressed in a
psi vector of the device's subspace, and only the d-sized slices needed for
a step are ever realized.  The user vector is exact, device-local state.
Training is plain per-example SGD; gradients w.r.t. psi flow through the
projection adjoint (scatter_grad).
"""

from __future__ import annotations

import math

import numpy as np

from .subspace import Subspace


class MemoryMeter:
    """Counts resident parameter values (floats), a test hook for the
    compression contract: peak must stay near psi-size + touched rows."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, count: int) -> None:
        self.current += count
        self.peak = max(self.peak, self.current)

    def release(self, count: int) -> None:
        self.current -= count


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _softplus(x: float) -> float:
    # log(1 + e^x), stable for large |x|
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


class HashedEmbeddingTable:
    """Virtual num_items x dim table stored as psi in a subspace over
    n = num_items * dim."""

    def __init__(self, num_items: int, dim: int, subspace: Subspace,
                 psi: np.ndarray | None = None, meter: MemoryMeter | None = None):
        if subspace.n != num_items * dim:
            raise ValueError(f"subspace covers n={subspace.n}, table needs {num_items * dim}")
        self.num_items = num_items
        self.dim = dim
        self.subspace = subspace
        if psi is None:
            psi = np.zeros(subspace.m)
        else:
            psi = np.asarray(psi, dtype=np.float64)
            if psi.shape != (subspace.m,):
                raise ValueError(f"psi has shape {psi.shape}, expected ({subspace.m},)")
        self.psi = psi
        self.meter = meter
        if meter is not None:
            meter.alloc(self.psi.size)

    def lookup(self, row: int) -> np.ndarray:
        """Realize one embedding row from psi (partial recovery)."""
        if not (0 <= row < self.num_items):
            raise ValueError(f"row {row} out of range [0, {self.num_items})")
        return self.subspace.recover_slice(self.psi, row * self.dim, (row + 1) * self.dim)

    def apply_row_grad(self, row: int, grad: np.ndarray, scale: float) -> None:
        """psi += scale * S_row^T grad for a single embedding row."""
        self.subspace.scatter_grad(row * self.dim, grad * scale, self.psi)


class ClientModel:
    """Dot-product scorer: score(item) = <user_vec, table[item]>.

    The user vector never leaves the device and is never hashed.
    """

    def __init__(self, user_vec: np.ndarray, items: HashedEmbeddingTable,
                 learning_rate: float, l2: float = 1e-6):
        user_vec = np.asarray(user_vec, dtype=np.float64)
        if user_vec.shape != (items.dim,):
            raise ValueError(f"user_vec has shape {user_vec.shape}, expected ({items.dim},)")
        if learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        self.user_vec = user_vec
        self.items = items
        self.learning_rate = learning_rate
        self.l2 = l2
        if items.meter is not None:
            items.meter.alloc(user_vec.size)

    def score(self, item: int) -> float:
        return float(self.user_vec @ self.items.lookup(item))

    # -- pairwise ranking loss ------------------------------------------

    def _bpr_parts(self, pos_item: int, neg_item: int):
        if pos_item == neg_item:
            raise ValueError(f"positive and negative item coincide ({pos_item})")
        u = self.user_vec
        e_pos = self.items.lookup(pos_item)
        e_neg = self.items.lookup(neg_item)
        margin = float(u @ e_pos) - float(u @ e_neg)
        loss = _softplus(-margin)
        if self.l2 != 0.0:
            loss += self.l2 * (float(u @ u) + float(e_pos @ e_pos) + float(e_neg @ e_neg))
        return loss, margin, e_pos, e_neg

    def bpr_loss(self, pos_item: int, neg_item: int) -> float:
        """-ln sigma(score(pos) - score(neg)) + L2 term, no update."""
        return self._bpr_parts(pos_item, neg_item)[0]

    def bpr_step(self, pos_item: int, neg_item: int) -> float:
        """One SGD step on the pairwise loss; returns the pre-update loss."""
        meter = self.items.meter
        if meter is not None:
            meter.alloc(2 * self.items.dim)
        loss, margin, e_pos, e_neg = self._bpr_parts(pos_item, neg_item)
        g = _sigmoid(margin) - 1.0  # d loss / d margin
        two_l2 = 2.0 * self.l2
        g_user = g * (e_pos - e_neg) + two_l2 * self.user_vec
        g_pos = g * self.user_vec + two_l2 * e_pos
        g_neg = (-g) * self.user_vec + two_l2 * e_neg
        lr = self.learning_rate
        self.user_vec -= lr * g_user
        self.items.apply_row_grad(pos_item, g_pos, -lr)
        self.items.apply_row_grad(neg_item, g_neg, -lr)
        if meter is not None:
            meter.release(2 * self.items.dim)
        return loss

    # -- rating regression loss -----------------------------------------

    def mse_loss(self, item: int, rating: float) -> float:
        err = self.score(item) - rating
        return err * err

    def mse_step(self, item: int, rating: float) -> float:
        """One SGD step on (score - rating)^2; returns the pre-update loss."""
        if not math.isfinite(rating):
            raise ValueError(f"rating must be finite, got {rating}")
        meter = self.items.meter
        if meter is not None:
            meter.alloc(self.items.dim)
        e = self.items.lookup(item)
        err = float(self.user_vec @ e) - rating
        g = 2.0 * err
        lr = self.learning_rate
        g_user = g * e
        g_item = g * self.user_vec
        self.user_vec -= lr * g_user
        self.items.apply_row_grad(item, g_item, -lr)
        if meter is not None:
            meter.release(self.items.dim)
        return err * err
