"""Convergence bench: homogeneous rounds on strongly convex quadratics.

Each device owns F_i(theta) = 0.5 ||A_i theta - b_i||^2 with its own target,
so the global optimum is a genuine compromise.  The bench runs the round
protocol with every device sharing one subspace, compares F(theta_t) against
the subspace-restricted optimum solved in closed form by a dense oracle, and
checks that the spectrum of the orthonormalized restriction S~^T H S~ stays
inside [mu, L] (smoothness / strong convexity carry over unchanged).

The step size is horizon-tuned: eta = min(1/lmax, 12/(T*lmin)) over the
restricted spectrum, i.e. as aggressive as stability allows but capped so
round T lands around e^-24 of the initial gap, far above float noise.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .subspace import SubspaceFamily, is_power_of_two

MAX_BENCH_DIM = 256
EIG_TOL = 1e-8
NOISE = 0.25
TAG_BENCH = 201
INIT_SCALE_BENCH = 1.0


@dataclass
class ConvergenceReport:
    n: int
    m: int
    num_devices: int
    rounds: int
    local_steps: int
    seed: int
    mu: float
    lipschitz: float
    eig_min: float
    eig_max: float
    eig_in_range: bool
    learning_rate: float
    gaps: list  # (round, F(theta_round) - F(theta*_sub)) at checkpoints

    def gap_at(self, round_num: int) -> float:
        for rnd, gap in self.gaps:
            if rnd == round_num:
                return gap
        raise KeyError(f"no checkpoint at round {round_num}")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name in ("n", "m", "num_devices", "rounds", "local_steps", "seed"):
            writer.writerow([name, getattr(self, name)])
        writer.writerow(["mu", repr(self.mu)])
        writer.writerow(["L", repr(self.lipschitz)])
        writer.writerow(["eig_min", repr(self.eig_min)])
        writer.writerow(["eig_max", repr(self.eig_max)])
        writer.writerow(["eig_in_range", str(self.eig_in_range)])
        writer.writerow(["learning_rate", repr(self.learning_rate)])
        for rnd, gap in self.gaps:
            writer.writerow([f"gap@{rnd}", repr(gap)])
        return buf.getvalue()


def quadratic_bench(n: int, m: int, num_devices: int, rounds: int,
                    local_steps: int = 1, seed: int = 0,
                    checkpoints=None) -> ConvergenceReport:
    """Run the bench and report gaps plus the spectrum-preservation check."""
    if not (1 <= n <= MAX_BENCH_DIM):
        raise ValueError(f"n must be in [1, {MAX_BENCH_DIM}], got {n}")
    if m != n and not (is_power_of_two(m) and m <= n):
        raise ValueError(f"m must equal n or be a power of 2 <= n, got m={m}, n={n}")
    if num_devices < 1 or rounds < 1 or local_steps < 1:
        raise ValueError("num_devices, rounds and local_steps must all be >= 1")

    rng = np.random.default_rng([seed, TAG_BENCH])
    A = [np.eye(n) + (NOISE / np.sqrt(n)) * rng.standard_normal((n, n))
         for _ in range(num_devices)]
    targets = [rng.standard_normal(n) for _ in range(num_devices)]
    b = [A_i @ t_i for A_i, t_i in zip(A, targets)]

    H = sum(A_i.T @ A_i for A_i in A) / num_devices
    g = sum(A_i.T @ b_i for A_i, b_i in zip(A, b)) / num_devices
    h_eigs = np.linalg.eigvalsh(H)
    mu, lipschitz = float(h_eigs[0]), float(h_eigs[-1])
    if mu <= 1e-10 * lipschitz:
        raise ValueError(f"quadratic is (near-)singular: mu={mu:.3e}, L={lipschitz:.3e}")

    if m == n:
        family = SubspaceFamily.from_seed(n, 1, [seed, TAG_BENCH])
        sub = family.identity_subspace()
    else:
        family = SubspaceFamily.from_seed(n, m, [seed, TAG_BENCH])
        sub = family.subspace(m)

    S = sub.dense_matrix()
    counts = (S != 0).sum(axis=0).astype(np.float64)
    occupied = counts > 0
    S_occ = S[:, occupied]
    S_orth = S_occ / np.sqrt(counts[occupied])
    restricted = S_orth.T @ H @ S_orth
    r_eigs = np.linalg.eigvalsh(restricted)
    eig_min, eig_max = float(r_eigs[0]), float(r_eigs[-1])
    eig_in_range = (eig_min >= mu - EIG_TOL) and (eig_max <= lipschitz + EIG_TOL)

    # Dynamics run in the raw binary basis; its restricted spectrum sets eta.
    M_eff = S_occ.T @ H @ S_occ
    m_eigs = np.linalg.eigvalsh(M_eff)
    lmin_eff, lmax_eff = float(m_eigs[0]), float(m_eigs[-1])
    lr = min(1.0 / lmax_eff, 12.0 / (rounds * lmin_eff))

    # Closed-form subspace optimum (dense oracle; pinv zeroes empty buckets).
    StHS = S.T @ H @ S
    psi_star = np.linalg.pinv(StHS) @ (S.T @ g)
    theta_star = S @ psi_star

    def objective(theta):
        return 0.5 * float(np.mean([np.sum((A_i @ theta - b_i) ** 2)
                                    for A_i, b_i in zip(A, b)]))

    f_star = objective(theta_star)
    P = [A_i @ S for A_i in A]
    Pt_b = [P_i.T @ b_i for P_i, b_i in zip(P, b)]

    wanted = {1, max(1, rounds // 4), max(1, rounds // 2), rounds}
    if checkpoints is not None:
        wanted |= {int(c) for c in checkpoints if 1 <= int(c) <= rounds}

    theta = INIT_SCALE_BENCH * np.random.default_rng([seed, TAG_BENCH, 1]).standard_normal(n)
    gaps = []
    for rnd in range(1, rounds + 1):
        psi = sub.reduce(theta)
        agg = np.zeros(n)
        for i in range(num_devices):
            psi_i = psi.copy()
            for _ in range(local_steps):
                grad = P[i].T @ (P[i] @ psi_i) - Pt_b[i]
                psi_i -= lr * grad
            agg += sub.recover(psi_i) / num_devices
        theta = agg
        if rnd in wanted:
            gaps.append((rnd, objective(theta) - f_star))

    return ConvergenceReport(
        n=n, m=m, num_devices=num_devices, rounds=rounds, local_steps=local_steps,
        seed=seed, mu=mu, lipschitz=lipschitz, eig_min=eig_min, eig_max=eig_max,
        eig_in_range=eig_in_range, learning_rate=lr, gaps=gaps)
