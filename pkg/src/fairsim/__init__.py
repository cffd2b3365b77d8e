"""fairsim: federated averaging in hashed random subspaces.

Devices of heterogeneous memory capacity train projections of one server
model: a universal hash implicitly defines each device's binary projection
matrix, capacities map to nested ("consistent and collapsible") subspaces,
and rounds run reduce -> local SGD -> recover -> weighted averaging.
"""

__version__ = "0.1.0"

from .data import (DataError, DevicePartition, InteractionDataset, load_csv,
                   sample_negatives, split_train_test, synth_lowrank)
from .federation import (CapacityScheme, ClientUpdate, DivergenceError,
                         RunConfig, ServerState, Trainer,
                         parse_capacity_scheme, run_training)
from .hashing import SignHash, UniversalHash, new_sign_hash, new_universal_hash
from .metrics import MetricsLog, evaluate_server, ndcg_at_k
from .model import ClientModel, HashedEmbeddingTable, MemoryMeter
from .quadratic import ConvergenceReport, quadratic_bench
from .subspace import Subspace, SubspaceFamily, subspace_for_capacity

__all__ = [
    "CapacityScheme", "ClientModel", "ClientUpdate", "ConvergenceReport",
    "DataError", "DevicePartition", "DivergenceError", "HashedEmbeddingTable",
    "InteractionDataset", "MemoryMeter", "MetricsLog", "RunConfig",
    "ServerState", "SignHash", "Subspace", "SubspaceFamily", "Trainer",
    "UniversalHash", "evaluate_server", "load_csv", "ndcg_at_k",
    "new_sign_hash", "new_universal_hash", "parse_capacity_scheme",
    "quadratic_bench", "run_training", "sample_negatives", "split_train_test",
    "subspace_for_capacity", "synth_lowrank",
]
