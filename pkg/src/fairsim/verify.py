"""Dense-oracle verification suites behind the `verify` command.

Every suite re-derives its expected answers from materialized matrices and
closed forms (pinv projectors, eigendecompositions, an independent dense
federated-averaging loop) rather than from the hash-implicit code paths it
is checking.  All suites are seeded and finish in seconds.
"""

from __future__ import annotations

import math

import numpy as np

from . import federation
from .data import split_train_test, synth_lowrank
from .federation import (MODE_FAIR_HET, RunConfig, Trainer,
                         parse_capacity_scheme)
from .quadratic import quadratic_bench
from .subspace import SubspaceFamily

PROJECTION_TOL = 1e-10
COLLAPSE_TOL = 1e-12
COINCIDENCE_TOL = 1e-12
SUITE_SEED = 7001


def projection_suite(cases: int = 100) -> tuple[bool, str]:
    """recover(reduce(theta)) must equal the dense projector S(S^T S)^+ S^T theta."""
    worst = 0.0
    for case in range(cases):
        rng = np.random.default_rng([SUITE_SEED, 1, case])
        m = int(rng.choice([2, 4, 8, 16]))
        n = int(rng.integers(max(8, m), 65))
        family = SubspaceFamily.from_seed(n, m, [SUITE_SEED, 1, case, 1])
        sub = family.subspace(m)
        theta = rng.standard_normal(n)
        S = sub.dense_matrix()
        expected = S @ (np.linalg.pinv(S.T @ S) @ (S.T @ theta))
        got = sub.recover(sub.reduce(theta))
        worst = max(worst, float(np.max(np.abs(got - expected))))
    return worst < PROJECTION_TOL, f"{cases} cases, worst |err| = {worst:.3e}"


def _fold_matrix(m_j: int, m_i: int) -> np.ndarray:
    """m_j x m_i indicator: column c of S_j feeds column c % m_i of S_i."""
    C = np.zeros((m_j, m_i))
    C[np.arange(m_j), np.arange(m_j) % m_i] = 1.0
    return C


def collapsibility_suite(num_families: int = 50, corrupt_hook=None) -> tuple[bool, str]:
    """Each smaller matrix must be exactly the stated column-sum of each larger one."""
    worst = 0.0
    pairs = 0
    for fam_idx in range(num_families):
        rng = np.random.default_rng([SUITE_SEED, 2, fam_idx])
        n = int(rng.integers(8, 129))
        max_pow = min(n, 64).bit_length() - 1
        m_max = 1 << int(rng.integers(1, max_pow + 1))
        family = SubspaceFamily.from_seed(n, m_max, [SUITE_SEED, 2, fam_idx, 1])
        ms = [1 << k for k in range(m_max.bit_length())]
        dense = {}
        for m in ms:
            S = family.subspace(m).dense_matrix()
            if corrupt_hook is not None:
                S = corrupt_hook(S, m)
            dense[m] = S
        for i, m_i in enumerate(ms):
            for m_j in ms[i + 1:]:
                resid = float(np.max(np.abs(dense[m_i] - dense[m_j] @ _fold_matrix(m_j, m_i))))
                worst = max(worst, resid)
                pairs += 1
    return worst < COLLAPSE_TOL, f"{num_families} families / {pairs} pairs, worst residual = {worst:.3e}"


def lemma1_suite(instances: int = 20) -> tuple[bool, str]:
    """Spectrum of the orthonormal restriction must stay inside [mu, L]."""
    failures = 0
    margin = math.inf
    for k in range(instances):
        rng = np.random.default_rng([SUITE_SEED, 3, k])
        n = int(rng.integers(16, 129))
        m = int(rng.choice([4, 8, 16, 32]))
        report = quadratic_bench(n=n, m=min(m, 1 << (n.bit_length() - 1)),
                                 num_devices=4, rounds=1, seed=1000 + k)
        if not report.eig_in_range:
            failures += 1
        margin = min(margin, report.eig_min - report.mu, report.lipschitz - report.eig_max)
    return failures == 0, f"{instances} instances, {failures} out of [mu, L], min margin = {margin:.3e}"


# -- independent dense federated-averaging reference ----------------------

def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def dense_fedavg_reference(dataset, cfg: RunConfig, dim: int, l2: float) -> list:
    """Plain federated averaging with a dense item table; no hashing code.

    Consumes the exact RNG streams documented in `federation` and returns
    the server parameter vector after every round.
    """
    num_users, num_items = dataset.num_users, dataset.num_items
    n = num_items * dim
    theta = federation.INIT_SCALE * np.random.default_rng(
        [cfg.seed, federation.TAG_INIT]).standard_normal(n)
    user_vecs = np.stack([
        federation.INIT_SCALE * np.random.default_rng(
            [cfg.seed, federation.TAG_USER, d]).standard_normal(dim)
        for d in range(num_users)])

    train_items, train_pos_sets, counts = [], [], []
    for u in range(num_users):
        sel = (dataset.users == u) & ~dataset.is_test
        items = dataset.items[sel]
        train_items.append(items)
        train_pos_sets.append(set(items.tolist()))
        counts.append(int(sel.sum()))

    lr = cfg.learning_rate
    trajectory = []
    for rnd in range(cfg.rounds):
        rng = np.random.default_rng([cfg.seed, federation.TAG_SAMPLE, rnd])
        k = min(cfg.devices_per_round, num_users)
        sampled = np.sort(rng.choice(np.arange(num_users), size=k, replace=False))

        updates = []
        for dev in sampled:
            dev = int(dev)
            table = theta.reshape(num_items, dim).copy()
            u = user_vecs[dev]
            local = np.random.default_rng([cfg.seed, federation.TAG_LOCAL, rnd, dev])
            items = train_items[dev]
            n_i = len(items)
            budget = cfg.local_epochs * n_i
            steps = 0
            while steps < budget:
                for idx in local.permutation(n_i):
                    if steps >= budget:
                        break
                    pos = int(items[idx])
                    neg = None
                    while neg is None:
                        cand = int(local.integers(num_items))
                        if cand not in train_pos_sets[dev]:
                            neg = cand
                    e_pos = table[pos].copy()
                    e_neg = table[neg].copy()
                    margin = float(u @ e_pos) - float(u @ e_neg)
                    g = _sigmoid(margin) - 1.0
                    two_l2 = 2.0 * l2
                    g_user = g * (e_pos - e_neg) + two_l2 * u
                    g_pos = g * u + two_l2 * e_pos
                    g_neg = (-g) * u + two_l2 * e_neg
                    u -= lr * g_user
                    table[pos] += (-lr) * g_pos
                    table[neg] += (-lr) * g_neg
                    steps += 1
            updates.append((dev, table.ravel(), counts[dev]))

        total = sum(c for _, _, c in updates)
        agg = np.zeros(n)
        for _, flat, c in updates:
            weight = c / total if total > 0 else 1.0 / len(updates)
            agg += weight * flat
        theta = agg
        trajectory.append(theta.copy())
    return trajectory


def fedavg_coincidence_suite(rounds: int = 20) -> tuple[bool, str]:
    """Full-capacity runs must match the dense reference per coordinate."""
    ds = split_train_test(
        synth_lowrank(num_users=8, num_items=30, latent_dim=4, density=0.2,
                      noise_sd=0.0, seed=11, kind="implicit"),
        holdout_per_user=2, seed=12)
    cfg = RunConfig(mode=MODE_FAIR_HET, rounds=rounds, devices_per_round=4,
                    local_epochs=2, learning_rate=0.05, seed=13)
    scheme = parse_capacity_scheme("1x", ds.num_users)
    trainer = Trainer(ds, scheme, cfg, dim=4, l2=1e-6)
    reference = dense_fedavg_reference(ds, cfg, dim=4, l2=1e-6)
    worst = 0.0
    for rnd in range(rounds):
        trainer.run_round()
        worst = max(worst, float(np.max(np.abs(trainer.server.theta - reference[rnd]))))
    return worst < COINCIDENCE_TOL, f"{rounds} rounds, worst |theta diff| = {worst:.3e}"


SUITES = (
    ("projection", projection_suite),
    ("collapsibility", collapsibility_suite),
    ("lemma1-eigens", lemma1_suite),
    ("fedavg-coincidence", fedavg_coincidence_suite),
)


def suite_names() -> list:
    return [name for name, _ in SUITES]


def run_all(report=print) -> bool:
    """Run every suite, print one PASS/FAIL line each; True iff all pass."""
    all_ok = True
    first_failure = None
    for name, fn in SUITES:
        ok, detail = fn()
        report(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            all_ok = False
            if first_failure is None:
                first_failure = name
    if not all_ok:
        report(f"first failing suite: {first_failure}")
    return all_ok
