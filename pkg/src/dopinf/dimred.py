"""Gram-based dimensionality reduction without forming the full POD basis.

Local Gram products, global Gram assembly, eigendecomposition, singular
values, the projection factor mapping the Gram matrix to reduced coordinates,
and energy-based rank selection.

Determinism contract: the global Gram matrix is accumulated over fixed global
row panels (the union of balanced split boundaries for 1, 2, 4, and 8 parts,
plus the active partition's own edges). Each panel is reduced in ascending
rank order and the panel results are folded in ascending panel order on every
rank. Whenever each panel is wholly owned by one rank - true for any rank
count in {1, 2, 4, 8} on an unpermuted row layout - the resulting matrix is
bit-identical across those rank counts, which is what makes whole-pipeline
outputs byte-comparable between runs with different parallelism.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import sidecar
from .comm import CommHandle
from .errors import NumericalError, RankDeficiencyWarning, UsageError
from .store import SnapshotPartition

_PANEL_PARTS = (1, 2, 4, 8)
SYMMETRY_RTOL = 1e-12


def panel_boundaries(total_rows: int, p: int = 1) -> np.ndarray:
    """Global row boundaries of the Gram accumulation panels."""
    cuts = {0, total_rows}
    for parts in set(_PANEL_PARTS) | {p}:
        parts = min(parts, total_rows)
        if parts < 1:
            continue
        base, rem = divmod(total_rows, parts)
        off = 0
        for k in range(parts):
            off += base + (1 if k < rem else 0)
            cuts.add(off)
    return np.array(sorted(cuts), dtype=np.int64)


def local_gram_panels(partition: SnapshotPartition) -> list[np.ndarray | None]:
    """This rank's contribution to each global panel (None if not owned).

    A panel fully inside the local block is one dense product; a panel
    straddling a block edge contributes its local piece only.
    """
    block = np.ascontiguousarray(partition.block, dtype=np.float64)
    lo = partition.gram_offset
    hi = lo + block.shape[0]
    bounds = panel_boundaries(partition.gram_total, partition.plan.p)
    out: list[np.ndarray | None] = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        pa, pb = max(a, lo), min(b, hi)
        if pa >= pb:
            out.append(None)
        else:
            piece = block[pa - lo : pb - lo, :]
            out.append(piece.T @ piece)
    return out


def local_gram(partition: SnapshotPartition) -> np.ndarray:
    """Dense local Gram product of the (transformed) block, O(m_i n_t^2).

    Symmetric positive semi-definite; accumulated panel by panel in ascending
    global row order.
    """
    n_t = partition.block.shape[1]
    acc = np.zeros((n_t, n_t))
    for panel in local_gram_panels(partition):
        if panel is not None:
            acc += panel
    return acc


def global_gram(handle: CommHandle, local_grams) -> np.ndarray:
    """All-reduce the local Grams so every rank holds the global Gram matrix.

    ``local_grams`` is the panel list from :func:`local_gram_panels`, or a
    single already-accumulated local Gram matrix (one reduction, used when
    cross-rank-count byte stability is not needed).
    """
    if isinstance(local_grams, np.ndarray):
        return handle.allreduce_sum_matrix(local_grams)
    shaped = [g for g in local_grams if g is not None]
    if not shaped:
        raise UsageError("rank owns no rows; empty partitions are not supported")
    zero = np.zeros_like(shaped[0])
    acc = np.zeros_like(shaped[0])
    for panel in local_grams:
        acc += handle.allreduce_sum_matrix(zero if panel is None else panel)
    return acc


@dataclass
class ReductionFactors:
    """Spectral factors of the global Gram matrix plus the projection factor.

    ``t_r`` maps the Gram matrix straight to reduced coordinates; eigenvalues
    are clamped at ``n_t * lambda_1 * 2**-52`` and excluded from ``t_r`` so
    the inverse square root never blows up on near-null modes.
    """

    gram: np.ndarray
    eigenvalues: np.ndarray      # clamped, descending
    eigenvectors: np.ndarray     # n_t x n_t, sign-fixed columns
    singular_values: np.ndarray
    energy: np.ndarray           # cumulative retained-energy ratios
    t_r: np.ndarray              # n_t x r
    r: int                       # effective (possibly truncated) rank
    r_requested: int

    @property
    def n_t(self) -> int:
        return self.gram.shape[0]

    def truncated(self, r: int) -> "ReductionFactors":
        """Same factors with a smaller retained dimension."""
        if not 1 <= r <= self.t_r.shape[1]:
            raise UsageError(f"r={r} outside 1..{self.t_r.shape[1]}")
        return ReductionFactors(
            gram=self.gram, eigenvalues=self.eigenvalues,
            eigenvectors=self.eigenvectors,
            singular_values=self.singular_values, energy=self.energy,
            t_r=self.t_r[:, :r], r=r, r_requested=r)

    def save(self, path) -> None:
        sidecar.write_arrays(path, {
            "gram": self.gram, "eigenvalues": self.eigenvalues,
            "eigenvectors": self.eigenvectors,
            "singular_values": self.singular_values, "energy": self.energy,
            "t_r": self.t_r, "r": self.r, "r_requested": self.r_requested,
        })

    @staticmethod
    def load(path) -> "ReductionFactors":
        data = sidecar.read_arrays(path)
        return ReductionFactors(
            gram=data["gram"], eigenvalues=data["eigenvalues"],
            eigenvectors=data["eigenvectors"],
            singular_values=data["singular_values"], energy=data["energy"],
            t_r=data["t_r"], r=int(data["r"]),
            r_requested=int(data["r_requested"]))


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    vectors = vectors.copy()
    leads = np.abs(vectors).argmax(axis=0)
    for k, lead in enumerate(leads):
        if vectors[lead, k] < 0:
            vectors[:, k] = -vectors[:, k]
    return vectors


def retained_energy(eigenvalues: np.ndarray) -> np.ndarray:
    """Cumulative squared-singular-value fractions."""
    cum = np.cumsum(eigenvalues)
    total = cum[-1]
    if total <= 0:
        raise NumericalError("all-zero spectrum: no energy to retain")
    return cum / total


def eig_factors(D: np.ndarray, r_request: int) -> ReductionFactors:
    """Full symmetric eigendecomposition of the global Gram matrix.

    Eigenpairs are sorted by descending eigenvalue; eigenvalues below the
    numerical-rank threshold are clamped to zero and excluded from the
    projection factor. Requesting more than the numerical rank truncates with
    a ``RankDeficiencyWarning`` instead of failing.
    """
    D = np.asarray(D, dtype=np.float64)
    n_t = D.shape[0]
    if D.ndim != 2 or D.shape[1] != n_t:
        raise UsageError(f"gram matrix must be square, got {D.shape}")
    if not 1 <= r_request <= n_t:
        raise UsageError(f"r_request={r_request} outside 1..{n_t}")
    d_norm = np.linalg.norm(D)
    asym = np.linalg.norm(D - D.T)
    if d_norm > 0 and asym > SYMMETRY_RTOL * d_norm:
        raise NumericalError(
            f"gram matrix is not symmetric: |D - D^T| / |D| = {asym / d_norm:.3e}")

    lam, vecs = np.linalg.eigh(D)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vecs = fix_signs(vecs[:, order])

    eps_rank = n_t * max(lam[0], 0.0) * 2.0**-52
    lam = np.where(lam > eps_rank, lam, 0.0)
    numerical_rank = int(np.count_nonzero(lam))

    r = r_request
    if r_request > numerical_rank:
        warnings.warn(
            f"requested r={r_request} exceeds numerical rank "
            f"{numerical_rank}; truncating", RankDeficiencyWarning,
            stacklevel=2)
        r = numerical_rank
    if r == 0:
        raise NumericalError("gram matrix has numerical rank 0")

    sigma = np.sqrt(lam)
    t_r = vecs[:, :r] * (1.0 / sigma[:r])
    return ReductionFactors(
        gram=D, eigenvalues=lam, eigenvectors=vecs, singular_values=sigma,
        energy=retained_energy(lam), t_r=t_r, r=r, r_requested=r_request)


def choose_r_by_energy(eigenvalues: np.ndarray, energy: float) -> int:
    """Smallest r whose cumulative energy fraction reaches the threshold."""
    if not 0.0 < energy <= 1.0:
        raise UsageError(f"energy threshold {energy} outside (0, 1]")
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(eigenvalues < 0) or np.any(np.diff(eigenvalues) > 0):
        raise UsageError("eigenvalues must be nonnegative and sorted descending")
    ratios = retained_energy(eigenvalues)
    return int(np.argmax(ratios >= energy)) + 1


def reduced_trajectory(t_r: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Reduced training coordinates from the small factors only, O(r n_t^2)."""
    if t_r.shape[0] != D.shape[0] or D.shape[0] != D.shape[1]:
        raise UsageError(
            f"shape mismatch: t_r {t_r.shape} against gram {D.shape}")
    return t_r.T @ D
