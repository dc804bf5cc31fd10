"""Per-variable lifting, centering, and max-abs scaling of local row blocks.

All stages are entry-wise per rank except the scale factors, which need one
max all-reduce. Forward order is lift -> center -> scale; the inverse applies
unscale -> uncenter -> unlift (auxiliary lifted rows are dropped).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import sidecar
from .comm import CommHandle
from .errors import DegenerateVariableError, SingularLiftError, UsageError
from .store import VARIABLE_ALIGNED, SnapshotPartition

IDENTITY = "identity"

STAGE_LIFT = "lift"
STAGE_CENTER = "center"
STAGE_SCALE = "scale"


def parse_lift_spec(spec: str) -> list[int]:
    """Return the variable indices to lift reciprocally ([] for identity)."""
    spec = (spec or IDENTITY).strip()
    if spec == IDENTITY:
        return []
    if spec.startswith("reciprocal:"):
        try:
            return [int(tok) for tok in spec.split(":", 1)[1].split(",") if tok]
        except ValueError as exc:
            raise UsageError(f"bad lift spec {spec!r}") from exc
    raise UsageError(f"unknown lift spec {spec!r}; use 'identity' or 'reciprocal:K[,K...]'")


@dataclass
class TransformParams:
    """Everything needed to invert the forward pipeline on one rank's rows."""

    stages: tuple
    lift_spec: str
    n_vars_original: int
    n_vars_lifted: int
    rows_per_var: int
    means: np.ndarray          # one entry per (lifted) local row
    scales: np.ndarray         # one entry per lifted variable, global
    var_index: np.ndarray      # lifted local row -> variable
    cell_index: np.ndarray     # lifted local row -> cell

    def __post_init__(self):
        if STAGE_SCALE in self.stages and np.any(self.scales <= 0):
            bad = int(np.argmin(self.scales))
            raise DegenerateVariableError(bad)
        if len(self.means) != len(self.var_index):
            raise UsageError("one mean entry per local row is required")


def lift(partition: SnapshotPartition, lifting_spec: str) -> SnapshotPartition:
    """Entry-wise lifting; reciprocal specs append auxiliary variables.

    The appended variable ``n_vars + j`` holds the reciprocal of source
    variable ``recip[j]`` at the same cells. No communication happens here.
    """
    recip = parse_lift_spec(lifting_spec)
    if not recip:
        return partition
    for var in recip:
        if not 0 <= var < partition.n_vars:
            raise UsageError(f"lift spec names variable {var}, dataset has "
                             f"{partition.n_vars}")

    aux_blocks, aux_vars, aux_cells = [], [], []
    aux_of_var = dict(partition.aux_of_var)
    for j, var in enumerate(recip):
        rows = np.flatnonzero(partition.var_index == var)
        source = partition.block[rows, :]
        zero = np.argwhere(source == 0.0)
        if zero.size:
            row, col = zero[0]
            raise SingularLiftError(variable=var, time_index=int(col))
        aux_blocks.append(1.0 / source)
        aux_vars.append(np.full(len(rows), partition.n_vars + j, dtype=np.int64))
        aux_cells.append(partition.cell_index[rows])
        aux_of_var[partition.n_vars + j] = var

    plan = partition.plan
    extra_per_rank = np.zeros(plan.p, dtype=np.int64)
    for var in recip:
        lo = var * plan.rows_per_var
        hi = lo + plan.rows_per_var
        for rank in range(plan.p):
            for a, b in plan.global_row_runs(rank):
                extra_per_rank[rank] += max(0, min(b, hi) - max(a, lo))
    m_counts = np.asarray(plan.row_counts) + extra_per_rank
    gram_offset = int(np.sum(m_counts[: partition.rank]))

    return SnapshotPartition(
        plan=plan, rank=partition.rank,
        block=np.vstack([partition.block] + aux_blocks),
        var_index=np.concatenate([partition.var_index] + aux_vars),
        cell_index=np.concatenate([partition.cell_index] + aux_cells),
        n_vars=partition.n_vars + len(recip),
        rows_per_var=partition.rows_per_var,
        gram_offset=gram_offset, gram_total=int(np.sum(m_counts)),
        aux_of_var=aux_of_var,
    )


def _require_whole_rows(partition: SnapshotPartition) -> None:
    if partition.n_vars > len(partition.aux_of_var) + 1 \
            and partition.plan.mode != VARIABLE_ALIGNED:
        raise UsageError(
            "centering needs a variable-aligned partition (whole variables "
            "per cell range) when the dataset has multiple variables")


def center_scale(partition: SnapshotPartition, comm: CommHandle,
                 lift_spec: str = IDENTITY) -> tuple[SnapshotPartition, TransformParams]:
    """Center each row by its temporal mean, then scale each variable by the
    global max-abs of the centered data (one max all-reduce).

    The returned block lies in [-1, 1] exactly. A variable whose centered
    data is identically zero everywhere raises ``DegenerateVariableError``.
    """
    _require_whole_rows(partition)
    block = partition.block
    means = block.mean(axis=1)
    centered = block - means[:, None]

    n_vars = partition.n_vars
    local_max = np.zeros(n_vars)
    abs_centered = np.abs(centered)
    for v in range(n_vars):
        rows = partition.var_index == v
        if np.any(rows):
            local_max[v] = abs_centered[rows].max()
    scales = comm.allreduce_max_vector(local_max)
    if np.any(scales == 0.0):
        raise DegenerateVariableError(int(np.argmin(scales)))

    scaled = centered / scales[partition.var_index][:, None]
    params = TransformParams(
        stages=((STAGE_LIFT,) if partition.aux_of_var else ())
        + (STAGE_CENTER, STAGE_SCALE),
        lift_spec=lift_spec if partition.aux_of_var else IDENTITY,
        n_vars_original=n_vars - len(partition.aux_of_var),
        n_vars_lifted=n_vars,
        rows_per_var=partition.rows_per_var,
        means=means, scales=scales,
        var_index=partition.var_index.copy(),
        cell_index=partition.cell_index.copy(),
    )
    return replace(partition, block=scaled), params


def identity_params(partition: SnapshotPartition) -> TransformParams:
    """Params for a pipeline that applied no transforms."""
    return TransformParams(
        stages=(), lift_spec=IDENTITY,
        n_vars_original=partition.n_vars, n_vars_lifted=partition.n_vars,
        rows_per_var=partition.rows_per_var,
        means=np.zeros(partition.n_local_rows),
        scales=np.ones(partition.n_vars),
        var_index=partition.var_index.copy(),
        cell_index=partition.cell_index.copy(),
    )


def apply_stored(partition: SnapshotPartition, params: TransformParams) -> SnapshotPartition:
    """Re-apply center/scale with stored values (post-lift block expected)."""
    if partition.n_local_rows != len(params.means):
        raise UsageError("params/layout mismatch: row counts differ")
    block = partition.block
    if STAGE_CENTER in params.stages:
        block = block - params.means[:, None]
    if STAGE_SCALE in params.stages:
        block = block / params.scales[partition.var_index][:, None]
    return replace(partition, block=block)


def inverse_transform(block: np.ndarray, params: TransformParams) -> np.ndarray:
    """Apply stage inverses in reverse order; auxiliary lifted rows are dropped."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape[0] != len(params.means):
        raise UsageError(
            f"params/layout mismatch: block has {block.shape[0]} rows, params "
            f"describe {len(params.means)}")
    out = block
    for stage in reversed(params.stages):
        if stage == STAGE_SCALE:
            out = out * params.scales[params.var_index][:, None]
        elif stage == STAGE_CENTER:
            out = out + params.means[:, None]
        elif stage == STAGE_LIFT:
            out = out[params.var_index < params.n_vars_original, :]
        else:
            raise UsageError(f"unknown transform stage {stage!r}")
    return out


# ---------------------------------------------------------------------------
# sidecar (global, rank-count independent)

def save_params(params: TransformParams, comm: CommHandle, path) -> None:
    """Assemble the global mean field over ranks and write one sidecar.

    Means are keyed by (variable, cell) in variable-major order so a later
    invocation may reload them under any partition. Collective: every rank
    must call; rank 0 writes.
    """
    local = struct.pack("<Q", len(params.means)) \
        + params.var_index.astype("<i8").tobytes() \
        + params.cell_index.astype("<i8").tobytes() \
        + params.means.astype("<f8").tobytes()
    gathered = comm.allgather_bytes(local)

    rpv = params.rows_per_var
    means_global = np.zeros(params.n_vars_lifted * rpv)
    for blob in gathered:
        (count,) = struct.unpack_from("<Q", blob, 0)
        vi = np.frombuffer(blob, dtype="<i8", count=count, offset=8)
        ci = np.frombuffer(blob, dtype="<i8", count=count, offset=8 + 8 * count)
        mu = np.frombuffer(blob, dtype="<f8", count=count, offset=8 + 16 * count)
        means_global[vi * rpv + ci] = mu

    if comm.rank == 0:
        sidecar.write_arrays(path, {
            "stage_codes": np.frombuffer(
                ",".join(params.stages).encode(), dtype=np.uint8),
            "lift_spec": np.frombuffer(params.lift_spec.encode(), dtype=np.uint8),
            "n_vars_original": params.n_vars_original,
            "n_vars_lifted": params.n_vars_lifted,
            "rows_per_var": rpv,
            "means_global": means_global,
            "scales": params.scales,
        })


def load_params_local(path, partition: SnapshotPartition) -> TransformParams:
    """Slice the global sidecar down to one (already lifted) partition."""
    data = sidecar.read_arrays(path)
    stages = bytes(data["stage_codes"]).decode()
    stages = tuple(stages.split(",")) if stages else ()
    rpv = int(data["rows_per_var"])
    if int(data["n_vars_lifted"]) != partition.n_vars or rpv != partition.rows_per_var:
        raise UsageError("params/layout mismatch: sidecar describes a different layout")
    means_global = data["means_global"]
    rows = partition.var_index * rpv + partition.cell_index
    return TransformParams(
        stages=stages,
        lift_spec=bytes(data["lift_spec"]).decode(),
        n_vars_original=int(data["n_vars_original"]),
        n_vars_lifted=int(data["n_vars_lifted"]),
        rows_per_var=rpv,
        means=means_global[rows],
        scales=data["scales"],
        var_index=partition.var_index.copy(),
        cell_index=partition.cell_index.copy(),
    )
