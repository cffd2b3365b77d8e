"""The round protocol: reduce -> local train -> recover -> weighted average.

Every source of randomness is derived statelessly from the run seed:

    server init      default_rng([seed, TAG_INIT])
    user vector i    default_rng([seed, TAG_USER, i])
    round sampling   default_rng([seed, TAG_SAMPLE, round])
    local training   default_rng([seed, TAG_LOCAL, round, device])
    hash family      default_rng([seed, TAG_FAMILY(, device), k])

so runs are resumable round-by-round and a reference implementation can
replay the exact streams.  Within a round, sampled devices may train
concurrently (each owns its model and stream); aggregation always reduces
in ascending device id, so results do not depend on scheduling.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import IMPLICIT, DevicePartition, InteractionDataset, sample_negatives
from .metrics import MetricsLog, evaluate_server, metric_name_for
from .model import ClientModel, HashedEmbeddingTable
from .subspace import (SubspaceFamily, greatest_power_of_two_at_most,
                       subspace_for_capacity)

MODE_FAIR_HET = "FAIR-HET"
MODE_FAIR_HOM = "FAIR-HOM"
MODE_FULL_TRN = "FULL-TRN"
MODE_FEDAVG = "FEDAVG"
MODES = (MODE_FAIR_HET, MODE_FAIR_HOM, MODE_FULL_TRN, MODE_FEDAVG)

CONSISTENT = "consistent"
INCONSISTENT = "inconsistent"

# Seed-derivation tags (part of the determinism contract, see module doc).
TAG_INIT = 101
TAG_USER = 102
TAG_SAMPLE = 103
TAG_LOCAL = 104
TAG_FAMILY = 105

INIT_SCALE = 0.1
SCHEME_RE = re.compile(r"^[1-9][0-9]*x(-[1-9][0-9]*x)*$")


class DivergenceError(RuntimeError):
    """Non-finite parameters showed up; carries the offending device id."""

    def __init__(self, device_id, message):
        super().__init__(message)
        self.device_id = device_id


@dataclass(frozen=True)
class CapacityScheme:
    """'A1x-A2x-...' -> per-device compression factors, alpha = 1/factor.

    Devices ordered by id split into near-equal contiguous groups, one
    factor per group (device d falls in group floor(d * groups / N)).
    """

    spec: str
    factors: tuple
    device_factors: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 / self.device_factors

    @property
    def num_devices(self) -> int:
        return len(self.device_factors)


def parse_capacity_scheme(spec: str, num_devices: int) -> CapacityScheme:
    if not SCHEME_RE.match(spec):
        raise ValueError(f"malformed capacity scheme '{spec}' (expected e.g. '1x-4x')")
    factors = tuple(int(part[:-1]) for part in spec.split("-"))
    groups = len(factors)
    if num_devices < groups:
        raise ValueError(f"scheme '{spec}' has {groups} groups but only {num_devices} devices")
    device_factors = np.array([factors[d * groups // num_devices] for d in range(num_devices)],
                              dtype=np.float64)
    return CapacityScheme(spec=spec, factors=factors, device_factors=device_factors)


@dataclass
class RunConfig:
    mode: str
    rounds: int
    devices_per_round: int
    local_epochs: int
    learning_rate: float
    seed: int
    eval_every: int = 10
    subspaces: str = CONSISTENT
    local_unit: str = "epochs"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.devices_per_round < 1:
            raise ValueError(f"devices_per_round must be >= 1, got {self.devices_per_round}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.subspaces not in (CONSISTENT, INCONSISTENT):
            raise ValueError(f"subspaces must be '{CONSISTENT}' or '{INCONSISTENT}', got '{self.subspaces}'")
        if self.local_unit not in ("epochs", "steps"):
            raise ValueError(f"local_unit must be 'epochs' or 'steps', got '{self.local_unit}'")


@dataclass
class ServerState:
    theta: np.ndarray
    round_num: int = 0


@dataclass
class ClientUpdate:
    device_id: int
    psi: np.ndarray
    num_samples: int


def _threads_from_env() -> int:
    raw = os.environ.get("FAIR_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"FAIR_THREADS must be an integer, got '{raw}'") from None
    if value < 0:
        raise ValueError(f"FAIR_THREADS must be >= 0, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


def resolve_alphas(mode: str, scheme: CapacityScheme) -> np.ndarray:
    """Per-device capacities after applying the mode's semantics."""
    base = scheme.alphas
    if mode == MODE_FAIR_HET or mode == MODE_FULL_TRN:
        return base.copy()
    if mode == MODE_FAIR_HOM:
        return np.full(len(base), base.min())
    return np.ones(len(base))  # FEDAVG


class Trainer:
    """Holds server state, per-device state, and runs rounds."""

    def __init__(self, dataset: InteractionDataset, scheme, cfg: RunConfig,
                 dim: int = 8, l2: float = 1e-6, eval_k: int = 20):
        if isinstance(scheme, str):
            scheme = parse_capacity_scheme(scheme, dataset.num_users)
        if scheme.num_devices != dataset.num_users:
            raise ValueError(f"scheme resolved for {scheme.num_devices} devices, dataset has {dataset.num_users} users")
        if cfg.devices_per_round > dataset.num_users:
            raise ValueError(f"devices_per_round={cfg.devices_per_round} exceeds {dataset.num_users} devices")
        self.dataset = dataset
        self.scheme = scheme
        self.cfg = cfg
        self.dim = dim
        self.l2 = l2
        self.eval_k = eval_k
        self.num_devices = dataset.num_users
        self.n = dataset.num_items * dim

        self.alphas = resolve_alphas(cfg.mode, scheme)
        if cfg.mode == MODE_FULL_TRN:
            self.eligible = np.flatnonzero(self.alphas == 1.0)
            if len(self.eligible) == 0:
                raise ValueError("FULL-TRN needs at least one full-capacity (1x) device")
        else:
            self.eligible = np.arange(self.num_devices)

        self.subspaces = self._build_subspaces()
        self.partition = DevicePartition.from_dataset(dataset)

        init_rng = np.random.default_rng([cfg.seed, TAG_INIT])
        self.server = ServerState(theta=INIT_SCALE * init_rng.standard_normal(self.n))
        self.user_vecs = np.stack([
            INIT_SCALE * np.random.default_rng([cfg.seed, TAG_USER, d]).standard_normal(dim)
            for d in range(self.num_devices)])
        self.log = MetricsLog()
        self.threads = _threads_from_env()

    def _build_subspaces(self):
        cfg = self.cfg
        hashed_budgets = [
            greatest_power_of_two_at_most(int(np.floor(a * self.n + 1e-9)))
            for a in self.alphas if a < 1.0]
        if cfg.subspaces == CONSISTENT:
            m_max = max(hashed_budgets, default=1)
            family = SubspaceFamily.from_seed(self.n, m_max, [cfg.seed, TAG_FAMILY])
            return [subspace_for_capacity(family, a) for a in self.alphas]
        out = []
        for d, a in enumerate(self.alphas):
            if a == 1.0:
                m_max = 1
            else:
                m_max = greatest_power_of_two_at_most(int(np.floor(a * self.n + 1e-9)))
            family = SubspaceFamily.from_seed(self.n, m_max, [cfg.seed, TAG_FAMILY, d])
            out.append(subspace_for_capacity(family, a))
        return out

    # -- one round --------------------------------------------------------

    def _local_train(self, model: ClientModel, device: int, rng, epochs: int):
        items = self.partition.train_items[device]
        ratings = self.partition.train_ratings[device]
        n_i = len(items)
        if n_i == 0 or epochs == 0:
            return 0.0, 0
        implicit = self.dataset.kind == IMPLICIT
        budget = epochs if self.cfg.local_unit == "steps" else epochs * n_i
        loss_sum, steps = 0.0, 0
        while steps < budget:
            for idx in rng.permutation(n_i):
                if steps >= budget:
                    break
                if implicit:
                    pos = int(items[idx])
                    neg = sample_negatives(self.dataset, device, 1, rng)[0]
                    loss_sum += model.bpr_step(pos, neg)
                else:
                    loss_sum += model.mse_step(int(items[idx]), float(ratings[idx]))
                steps += 1
        return loss_sum, steps

    def _train_device(self, device: int, epochs: int):
        sub = self.subspaces[device]
        psi = sub.reduce(self.server.theta)
        table = HashedEmbeddingTable(self.dataset.num_items, self.dim, sub, psi=psi)
        model = ClientModel(self.user_vecs[device], table, self.cfg.learning_rate, self.l2)
        rng = np.random.default_rng([self.cfg.seed, TAG_LOCAL, self.server.round_num, device])
        loss_sum, steps = self._local_train(model, device, rng, epochs)
        update = ClientUpdate(device_id=device, psi=table.psi,
                              num_samples=int(self.partition.sample_counts[device]))
        return update, loss_sum, steps

    def run_round(self, sampled=None, epochs_override=None) -> float:
        """Train the sampled devices and aggregate; returns mean step loss.

        `epochs_override` is a test hook (e.g. 0 local steps turns the round
        into a pure project-and-average); the config contract keeps E >= 1.
        """
        if sampled is None:
            sampled = self.sample_devices(self.server.round_num)
        sampled = np.sort(np.asarray(sampled, dtype=np.int64))
        if len(sampled) == 0:
            raise ValueError("cannot run a round with no sampled devices")
        epochs = self.cfg.local_epochs if epochs_override is None else epochs_override

        if self.threads > 1 and len(sampled) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda d: self._train_device(int(d), epochs), sampled))
        else:
            results = [self._train_device(int(d), epochs) for d in sampled]

        total_samples = sum(r[0].num_samples for r in results)
        agg = np.zeros(self.n)
        for update, _, _ in results:  # ascending device id: results follow sorted order
            recovered = self.subspaces[update.device_id].recover(update.psi)
            if not np.all(np.isfinite(recovered)):
                raise DivergenceError(update.device_id,
                                      f"device {update.device_id} returned non-finite parameters "
                                      f"at round {self.server.round_num + 1}")
            weight = (update.num_samples / total_samples) if total_samples > 0 else 1.0 / len(results)
            agg += weight * recovered
        if not np.all(np.isfinite(agg)):
            raise DivergenceError(-1, f"aggregated parameters non-finite at round {self.server.round_num + 1}")
        self.server.theta = agg
        self.server.round_num += 1

        loss_total = sum(r[1] for r in results)
        step_total = sum(r[2] for r in results)
        return loss_total / step_total if step_total else 0.0

    def sample_devices(self, round_num: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, TAG_SAMPLE, round_num])
        k = min(self.cfg.devices_per_round, len(self.eligible))
        return rng.choice(self.eligible, size=k, replace=False)

    def evaluate(self) -> float:
        return evaluate_server(self.server.theta, self.dataset, self.user_vecs, k=self.eval_k)

    def run(self, until: int | None = None) -> MetricsLog:
        """Run rounds up to `until` (default: the configured total)."""
        cfg = self.cfg
        target = cfg.rounds if until is None else min(until, cfg.rounds)
        while self.server.round_num < target:
            loss = self.run_round()
            rnd = self.server.round_num
            self.log.append(rnd, cfg.mode, self.scheme.spec, cfg.seed, "loss", loss)
            if rnd % cfg.eval_every == 0 or rnd == cfg.rounds:
                value = self.evaluate()
                self.log.append(rnd, cfg.mode, self.scheme.spec, cfg.seed,
                                metric_name_for(self.dataset.kind), value)
        return self.log


def run_training(cfg: RunConfig, dataset: InteractionDataset, scheme,
                 dim: int = 8, l2: float = 1e-6) -> MetricsLog:
    """One-shot convenience wrapper around Trainer."""
    return Trainer(dataset, scheme, cfg, dim=dim, l2=l2).run()
