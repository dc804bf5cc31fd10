"""Desk-scale data generators for verification.

Two sources: exact-subspace quadratic systems (operator-level ground truth,
snapshots of numerical rank exactly r*) and a periodic 1-D viscous Burgers
solver (a quadratic PDE with genuine truncation error). Both write the
standard dataset container; generation is single-rank and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sidecar
from .errors import CflError, NumericalError, UsageError
from .opinf import RomOperators, n_quad_features
from .rollout import DISCRETE, rollout
from .store import DatasetHeader, write_dataset, write_dataset_from

_MAX_REDRAWS = 10


@dataclass
class SyntheticTruth:
    """Ground-truth reduced dynamics behind an exact-subspace dataset."""

    r_star: int
    ops: RomOperators
    basis: np.ndarray        # n x r*, orthonormal columns
    q0: np.ndarray
    seed: int
    n_t: int

    def reduced_reference(self, n_cols: int) -> np.ndarray:
        """True reduced trajectory extended to ``n_cols`` instants."""
        traj = rollout(self.ops, self.q0, n_cols - 1)
        if traj.diverged:
            raise NumericalError("ground-truth dynamics diverged on extension")
        return traj.columns

    def reference_matrix(self, n_cols: int) -> np.ndarray:
        """Full-coordinate reference snapshots (training plus extension)."""
        return self.basis @ self.reduced_reference(n_cols)

    def save(self, path) -> None:
        sidecar.write_arrays(path, {
            "r_star": self.r_star, "c": self.ops.c, "A": self.ops.A,
            "Hc": self.ops.Hc, "basis": self.basis, "q0": self.q0,
            "seed": self.seed, "n_t": self.n_t,
        })

    @staticmethod
    def load(path) -> "SyntheticTruth":
        data = sidecar.read_arrays(path)
        ops = RomOperators(c=data["c"], A=data["A"], Hc=data["Hc"], form=DISCRETE)
        return SyntheticTruth(
            r_star=int(data["r_star"]), ops=ops, basis=data["basis"],
            q0=data["q0"], seed=int(data["seed"]), n_t=int(data["n_t"]))


def _draw_stable_ops(rng: np.random.Generator, r: int) -> RomOperators:
    A = rng.standard_normal((r, r))
    radius = np.max(np.abs(np.linalg.eigvals(A)))
    A *= 0.95 / radius
    Hc = 0.02 * rng.standard_normal((r, n_quad_features(r))) / max(r, 1)
    c = 0.01 * rng.standard_normal(r)
    return RomOperators(c=c, A=A, Hc=Hc, form=DISCRETE)


def gen_subspace_quadratic(n: int, r_star: int, n_t: int, seed: int,
                           path, shard_count: int = 2) -> tuple[Path, SyntheticTruth]:
    """Roll out random stable quadratic dynamics in r* dimensions, embed them
    through a random orthonormal basis, and write the dataset.

    The written snapshots have numerical rank exactly r*. Divergent draws are
    redrawn (same stream) up to a bounded count.
    """
    if n_t < 2 * r_star:
        raise UsageError(f"n_t={n_t} must be at least 2*r_star={2 * r_star}")
    if r_star > n:
        raise UsageError(f"r_star={r_star} exceeds state dimension n={n}")
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_REDRAWS):
        ops = _draw_stable_ops(rng, r_star)
        q0 = rng.standard_normal(r_star)
        traj = rollout(ops, q0, n_t - 1)
        if not traj.diverged and np.abs(traj.columns).max() < 1e3:
            break
    else:
        raise NumericalError(
            f"no stable operator draw in {_MAX_REDRAWS} attempts (seed={seed})")

    basis, _ = np.linalg.qr(rng.standard_normal((n, r_star)))
    header = DatasetHeader(n_rows=n, n_cols=n_t, n_vars=1, rows_per_var=n)
    reduced = traj.columns
    manifest = write_dataset_from(lambda s, c: basis[s : s + c, :] @ reduced,
                                  header, shard_count, path)
    truth = SyntheticTruth(r_star=r_star, ops=ops, basis=basis, q0=q0,
                           seed=seed, n_t=n_t)
    return manifest, truth


# ---------------------------------------------------------------------------
# 1-D periodic viscous Burgers

def _burgers_ic(spec: str, x: np.ndarray) -> np.ndarray:
    name, _, arg = (spec or "sine").partition(":")
    amp = float(arg) if arg else 1.0
    if name == "zero":
        return np.zeros_like(x)
    if name == "sine":
        return amp * np.sin(2.0 * np.pi * x)
    if name == "gauss":
        return amp * np.exp(-(((x - 0.5) / 0.1) ** 2))
    raise UsageError(f"unknown initial-condition spec {spec!r}")


def burgers_rhs(u: np.ndarray, dx: float, viscosity: float) -> np.ndarray:
    """Central differences for both the flux and diffusion terms."""
    flux = 0.5 * u * u
    adv = (np.roll(flux, -1) - np.roll(flux, 1)) / (2.0 * dx)
    diff = (np.roll(u, -1) - 2.0 * u + np.roll(u, 1)) / (dx * dx)
    return -adv + viscosity * diff


def burgers_max_dt(dx: float, viscosity: float, u0: np.ndarray) -> float:
    bounds = []
    if viscosity > 0:
        bounds.append(0.5 * dx * dx / viscosity)
    umax = np.abs(u0).max()
    if umax > 0:
        bounds.append(0.5 * dx / umax)
    return min(bounds) if bounds else np.inf


def gen_burgers(n_x: int, viscosity: float, n_t: int, dt: float, ic_spec: str,
                path, shard_count: int = 2, save_stride: int = 1) -> Path:
    """Integrate periodic viscous Burgers with RK4 and save ``n_t`` snapshots
    (the initial condition plus every ``save_stride``-th step)."""
    if n_x < 4:
        raise UsageError(f"n_x={n_x} too small for central differences")
    if n_t < 1 or save_stride < 1:
        raise UsageError("n_t and save_stride must be >= 1")
    if viscosity < 0:
        raise UsageError(f"viscosity={viscosity} must be nonnegative")
    if dt <= 0:
        raise UsageError(f"dt={dt} must be positive")
    dx = 1.0 / n_x
    x = np.arange(n_x) * dx
    u = _burgers_ic(ic_spec, x)
    dt_max = burgers_max_dt(dx, viscosity, u)
    if dt > dt_max:
        raise CflError(dt, dt_max)

    snapshots = np.empty((n_x, n_t))
    snapshots[:, 0] = u
    for col in range(1, n_t):
        for _ in range(save_stride):
            k1 = burgers_rhs(u, dx, viscosity)
            k2 = burgers_rhs(u + 0.5 * dt * k1, dx, viscosity)
            k3 = burgers_rhs(u + 0.5 * dt * k2, dx, viscosity)
            k4 = burgers_rhs(u + dt * k3, dx, viscosity)
            u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        snapshots[:, col] = u

    header = DatasetHeader(n_rows=n_x, n_cols=n_t, n_vars=1, rows_per_var=n_x)
    return write_dataset(snapshots, header, shard_count, path)


# ---------------------------------------------------------------------------
# single-rank references (test oracles)

def serial_center_scale(matrix: np.ndarray, n_vars: int = 1) -> np.ndarray:
    """Single-rank centering and max-abs scaling, independent of the
    distributed path."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows_per_var = matrix.shape[0] // n_vars
    centered = matrix - matrix.mean(axis=1, keepdims=True)
    out = np.empty_like(centered)
    for v in range(n_vars):
        sl = slice(v * rows_per_var, (v + 1) * rows_per_var)
        out[sl] = centered[sl] / np.abs(centered[sl]).max()
    return out


def oracle_serial_pod(matrix: np.ndarray, r: int):
    """Thin-SVD reference: basis, reduced coordinates, singular values.

    Applies the shared sign convention (largest-magnitude entry of each right
    singular vector positive) so results are directly comparable with the
    Gram-based path.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if not 1 <= r <= matrix.shape[1]:
        raise UsageError(f"r={r} outside 1..{matrix.shape[1]}")
    left, sigma, right_t = np.linalg.svd(matrix, full_matrices=False)
    for k in range(right_t.shape[0]):
        lead = int(np.argmax(np.abs(right_t[k, :])))
        if right_t[k, lead] < 0:
            right_t[k, :] = -right_t[k, :]
            left[:, k] = -left[:, k]
    v_r = left[:, :r]
    return v_r, v_r.T @ matrix, sigma
