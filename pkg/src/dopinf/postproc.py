"""On-demand basis blocks, reconstruction to original coordinates, error
metrics, and probe extraction.

Basis blocks are computed only when a reconstruction or probe asks for them;
training never forms the basis. Block operations are pure per rank; the
orthonormality check and the error reduction each use one sum all-reduce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .comm import CommHandle
from .errors import UsageError
from .rollout import ReducedTrajectory
from .store import SnapshotPartition
from .transforms import TransformParams, inverse_transform


@dataclass
class BasisPartition:
    """One rank's rows of the global rank-r basis."""

    rank: int
    block: np.ndarray            # m_i x r
    var_index: np.ndarray
    cell_index: np.ndarray

    @property
    def r(self) -> int:
        return self.block.shape[1]


def basis_partition(partition: SnapshotPartition, t_r: np.ndarray) -> BasisPartition:
    """Local basis rows from the transformed training block, O(m_i n_t r)."""
    if t_r.ndim != 2 or t_r.shape[1] < 1:
        raise UsageError(f"projection factor must be n_t x r with r >= 1, got {t_r.shape}")
    if partition.block.shape[1] != t_r.shape[0]:
        raise UsageError(
            f"shape mismatch: block {partition.block.shape} against factor {t_r.shape}")
    return BasisPartition(
        rank=partition.rank, block=partition.block @ t_r,
        var_index=partition.var_index, cell_index=partition.cell_index)


def orthonormality_error(handle: CommHandle, basis: BasisPartition) -> float:
    """Frobenius distance of the concatenated basis gram from the identity."""
    gram = handle.allreduce_sum_matrix(basis.block.T @ basis.block)
    return float(np.linalg.norm(gram - np.eye(basis.r)))


def reconstruct(basis: BasisPartition, trajectory: ReducedTrajectory,
                params: TransformParams) -> np.ndarray:
    """Map reduced coordinates back to this rank's original-coordinate rows.

    Computes the local basis-times-trajectory product (O(m_i n_p r)) and then
    applies the inverse transforms; auxiliary lifted rows are dropped.
    """
    if basis.r != trajectory.r:
        raise UsageError(
            f"basis has r={basis.r} but trajectory has r={trajectory.r}")
    if params is None:
        raise UsageError("transform parameters are required for reconstruction")
    return inverse_transform(basis.block @ trajectory.columns, params)


@dataclass
class ErrorTable:
    """Per-variable, per-time relative errors plus time-averaged summaries."""

    per_time: np.ndarray        # n_vars x n_instants
    summary: np.ndarray         # n_vars
    absolute_flag: np.ndarray   # True where the reference norm was zero

    def write_csv(self, path) -> None:
        n_vars, n_p = self.per_time.shape
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t," + ",".join(f"var{v}" for v in range(n_vars)) + "\n")
            for j in range(n_p):
                row = ",".join(repr(float(v)) for v in self.per_time[:, j])
                fh.write(f"{j},{row}\n")
            fh.write("mean," + ",".join(repr(float(v)) for v in self.summary) + "\n")


def relative_error(handle: CommHandle, approx: np.ndarray, reference: np.ndarray,
                   var_index: np.ndarray, n_vars: int) -> ErrorTable:
    """Relative 2-norm error per variable and time instant across all ranks.

    Squared norms are reduced with one sum all-reduce; a zero reference norm
    switches that (variable, time) entry to absolute error and flags it.
    """
    if approx.shape != reference.shape:
        raise UsageError(
            f"shape mismatch: approx {approx.shape} vs reference {reference.shape}")
    n_p = approx.shape[1]
    partial = np.zeros((2 * n_vars, n_p))
    diff_sq = (approx - reference) ** 2
    ref_sq = reference**2
    for v in range(n_vars):
        rows = var_index == v
        if np.any(rows):
            partial[v, :] = diff_sq[rows, :].sum(axis=0)
            partial[n_vars + v, :] = ref_sq[rows, :].sum(axis=0)
    total = handle.allreduce_sum_matrix(partial)
    diff_norm = np.sqrt(total[:n_vars, :])
    ref_norm = np.sqrt(total[n_vars:, :])
    absolute = ref_norm == 0.0
    denom = np.where(absolute, 1.0, ref_norm)
    per_time = diff_norm / denom
    return ErrorTable(per_time=per_time, summary=per_time.mean(axis=1),
                      absolute_flag=absolute)


def probe(block: np.ndarray, var_index: np.ndarray, cell_index: np.ndarray,
          probes: list[tuple[int, int]], n_vars: int, rows_per_var: int) -> dict:
    """Time series for the probes this rank owns; non-owners get nothing.

    Probes are (variable index, cell index) pairs addressing exact grid rows.
    """
    for var, cell in probes:
        if not (0 <= var < n_vars and 0 <= cell < rows_per_var):
            raise UsageError(f"probe (var={var}, cell={cell}) outside global range")
    lookup = {(int(v), int(c)): i
              for i, (v, c) in enumerate(zip(var_index, cell_index))}
    return {pair: block[lookup[pair], :].copy()
            for pair in probes if pair in lookup}


def write_probe_csv(path, times: np.ndarray, probes: list[tuple[int, int]],
                    series: dict) -> None:
    """CSV with one column per probe, named by (variable, cell)."""
    missing = [p for p in probes if p not in series]
    if missing:
        raise UsageError(f"series missing for probes {missing}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(f"v{v}c{c}" for v, c in probes) + "\n")
        for j, t in enumerate(times):
            row = ",".join(repr(float(series[p][j])) for p in probes)
            fh.write(f"{float(t)!r},{row}\n")
