"""Distributed reduced-order modeling toolkit.

Partitioned snapshot I/O, Gram-based dimensionality reduction that never
forms the full basis, regularized quadratic operator learning with a
distributed hyperparameter search, reduced-model rollout, postprocessing,
and a scaling benchmark harness.
"""

from .comm import ArgminKey, CommHandle, run_ranks
from .dimred import (ReductionFactors, choose_r_by_energy, eig_factors,
                     global_gram, local_gram, reduced_trajectory)
from .opinf import RomOperators, grid_search, solve_regularized_lsq
from .pipeline import TrainConfig, TrainResult, train_rank, write_outputs
from .rollout import ReducedTrajectory
from .store import (DatasetHeader, PartitionPlan, SnapshotPartition,
                    plan_partition, read_manifest, read_partition,
                    write_dataset)
from .transforms import TransformParams, center_scale, inverse_transform, lift

__version__ = "0.1.0"

__all__ = [
    "ArgminKey", "CommHandle", "run_ranks",
    "ReductionFactors", "choose_r_by_energy", "eig_factors", "global_gram",
    "local_gram", "reduced_trajectory",
    "RomOperators", "grid_search", "solve_regularized_lsq",
    "TrainConfig", "TrainResult", "train_rank", "write_outputs",
    "ReducedTrajectory",
    "DatasetHeader", "PartitionPlan", "SnapshotPartition", "plan_partition",
    "read_manifest", "read_partition", "write_dataset",
    "TransformParams", "center_scale", "inverse_transform", "lift",
    "__version__",
]
