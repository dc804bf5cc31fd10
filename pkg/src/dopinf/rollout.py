"""Time evolution of the reduced model.

Discrete form iterates the learned map directly; continuous form integrates
with classical fixed-step RK4. Divergence never raises out of a rollout: the
finite prefix comes back flagged so the regularization search can treat it as
infeasibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sidecar
from .errors import NumericalError, UsageError

DISCRETE = "discrete"
CONTINUOUS = "continuous"


class DivergenceSignal(NumericalError):
    """A step produced a non-finite coefficient."""

    def __init__(self, mode: int, step: int):
        self.mode = mode
        self.step = step
        super().__init__(f"mode {mode} became non-finite at step {step}")


@dataclass
class ReducedTrajectory:
    """Reduced coordinates per time instant, with divergence bookkeeping."""

    columns: np.ndarray          # r x n_instants
    times: np.ndarray
    provenance: str              # "projected-training" | "rollout"
    diverged: bool = False
    first_bad_index: int = -1
    bad_mode: int = -1

    @property
    def r(self) -> int:
        return self.columns.shape[0]

    @property
    def n_instants(self) -> int:
        return self.columns.shape[1]

    def save(self, path) -> None:
        sidecar.write_arrays(path, {
            "columns": self.columns, "times": self.times,
            "provenance": np.frombuffer(self.provenance.encode(), dtype=np.uint8),
            "diverged": int(self.diverged),
            "first_bad_index": self.first_bad_index,
            "bad_mode": self.bad_mode,
        })

    @staticmethod
    def load(path) -> "ReducedTrajectory":
        data = sidecar.read_arrays(path)
        return ReducedTrajectory(
            columns=data["columns"], times=data["times"],
            provenance=bytes(data["provenance"]).decode(),
            diverged=bool(int(data["diverged"])),
            first_bad_index=int(data["first_bad_index"]),
            bad_mode=int(data["bad_mode"]))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t," + ",".join(f"q{k + 1}" for k in range(self.r)) + "\n")
            for j in range(self.n_instants):
                row = ",".join(repr(float(v)) for v in self.columns[:, j])
                fh.write(f"{float(self.times[j])!r},{row}\n")


def step_discrete(ops, q: np.ndarray) -> np.ndarray:
    """One iteration of the discrete reduced map."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = ops.apply(q)
    bad = ~np.isfinite(out)
    if bad.any():
        raise DivergenceSignal(mode=int(np.argmax(bad)), step=-1)
    return out


def rk4_step(ops, q: np.ndarray, dt: float) -> np.ndarray:
    k1 = ops.apply(q)
    k2 = ops.apply(q + 0.5 * dt * k1)
    k3 = ops.apply(q + 0.5 * dt * k2)
    k4 = ops.apply(q + dt * k3)
    return q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(ops, q0: np.ndarray, n_steps: int, dt: float | None = None) -> ReducedTrajectory:
    """Evolve the reduced model for ``n_steps`` steps from ``q0``.

    The initial state is column 0. On divergence the finite prefix is
    returned with the flag set; nothing is raised.
    """
    q0 = np.asarray(q0, dtype=np.float64).ravel()
    if n_steps < 0:
        raise UsageError(f"n_steps={n_steps} must be >= 0")
    if ops.form == CONTINUOUS:
        if dt is None or dt <= 0:
            raise UsageError("continuous rollout needs dt > 0")
    elif ops.form != DISCRETE:
        raise UsageError(f"unknown model form {ops.form!r}")

    r = len(q0)
    columns = np.empty((r, n_steps + 1))
    columns[:, 0] = q0
    q = q0
    diverged = False
    bad_index = -1
    bad_mode = -1
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            q = ops.apply(q) if ops.form == DISCRETE else rk4_step(ops, q, dt)
            finite = np.isfinite(q)
            if not finite.all():
                diverged = True
                bad_index = step
                bad_mode = int(np.argmax(~finite))
                columns = columns[:, :step]
                break
            columns[:, step] = q

    if ops.form == DISCRETE:
        times = np.arange(columns.shape[1], dtype=np.float64)
    else:
        times = np.arange(columns.shape[1], dtype=np.float64) * dt
    return ReducedTrajectory(
        columns=columns, times=times, provenance="rollout",
        diverged=diverged, first_bad_index=bad_index, bad_mode=bad_mode)
