"""Regularized quadratic operator learning with a distributed grid search.

The regression uses the compact symmetrized quadratic form (r(r+1)/2 columns,
w_kl = q_k q_l for k <= l) so duplicated Kronecker columns never make the
least-squares problem exactly rank deficient; an expansion back to the full
r x r^2 operator is provided for compatibility checks.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from . import rollout as rollout_mod
from . import sidecar
from .comm import ArgminKey, CommHandle
from .errors import (NoFeasiblePairError, SingularSystemError,
                     UnderdeterminedError, UsageError)

DISCRETE = rollout_mod.DISCRETE
CONTINUOUS = rollout_mod.CONTINUOUS


def quad_index_pairs(r: int) -> tuple[np.ndarray, np.ndarray]:
    """(k, l) index arrays, k <= l, ordering the compact quadratic features."""
    k, l = np.triu_indices(r)
    return k, l


def n_quad_features(r: int) -> int:
    return r * (r + 1) // 2


def n_regression_columns(r: int) -> int:
    return r + n_quad_features(r) + 1


def squared_features(states: np.ndarray) -> np.ndarray:
    """Compact quadratic features of each column: rows q_k q_l for k <= l."""
    k, l = quad_index_pairs(states.shape[0])
    return states[k, :] * states[l, :]


def expand_quadratic(hc: np.ndarray) -> np.ndarray:
    """Compact operator -> full Kronecker operator acting on q (x) q."""
    r = hc.shape[0]
    k, l = quad_index_pairs(r)
    full = np.zeros((r, r * r))
    for col, (a, b) in enumerate(zip(k, l)):
        if a == b:
            full[:, a * r + b] = hc[:, col]
        else:
            full[:, a * r + b] = 0.5 * hc[:, col]
            full[:, b * r + a] = 0.5 * hc[:, col]
    return full


def compress_quadratic(h_full: np.ndarray) -> np.ndarray:
    """Full Kronecker operator -> compact operator (symmetric part)."""
    r = h_full.shape[0]
    k, l = quad_index_pairs(r)
    hc = np.empty((r, len(k)))
    for col, (a, b) in enumerate(zip(k, l)):
        if a == b:
            hc[:, col] = h_full[:, a * r + b]
        else:
            hc[:, col] = h_full[:, a * r + b] + h_full[:, b * r + a]
    return hc


def max_admissible_r(n_rows: int) -> int:
    """Largest r with r + r(r+1)/2 + 1 <= n_rows (compact quadratic form)."""
    r = 0
    while n_regression_columns(r + 1) <= n_rows:
        r += 1
    return r


def max_admissible_r_full(n_rows: int) -> int:
    """Same bound under the full Kronecker convention (r + r^2 + 1 columns)."""
    r = 0
    while (r + 1) + (r + 1) ** 2 + 1 <= n_rows:
        r += 1
    return r


def regression_rows(n_t: int, form: str) -> int:
    """Data rows the regression can use for a given snapshot count."""
    return n_t - 1 if form == DISCRETE else n_t


@dataclass
class RomOperators:
    """Constant, linear, and compact quadratic reduced operators."""

    c: np.ndarray        # (r,)
    A: np.ndarray        # (r, r)
    Hc: np.ndarray       # (r, r(r+1)/2)
    form: str = DISCRETE
    beta1: float = 0.0
    beta2: float = 0.0
    dt: float = 0.0

    def __post_init__(self):
        r = len(self.c)
        if self.A.shape != (r, r) or self.Hc.shape != (r, n_quad_features(r)):
            raise UsageError(
                f"inconsistent operator shapes: c{self.c.shape} A{self.A.shape} "
                f"Hc{self.Hc.shape}")
        if self.form not in (DISCRETE, CONTINUOUS):
            raise UsageError(f"unknown model form {self.form!r}")

    @property
    def r(self) -> int:
        return len(self.c)

    @cached_property
    def _quad_idx(self):
        return quad_index_pairs(self.r)

    def apply(self, q: np.ndarray) -> np.ndarray:
        """A q + Hc w(q) + c (the discrete map / continuous right-hand side)."""
        k, l = self._quad_idx
        return self.A @ q + self.Hc @ (q[k] * q[l]) + self.c

    def expand_h(self) -> np.ndarray:
        return expand_quadratic(self.Hc)

    def frobenius_norm(self) -> float:
        """Norm of the stacked operator block [A | Hc | c]."""
        return float(np.sqrt(np.sum(self.A**2) + np.sum(self.Hc**2)
                             + np.sum(self.c**2)))

    def to_bytes(self) -> bytes:
        return pickle.dumps({
            "c": self.c, "A": self.A, "Hc": self.Hc, "form": self.form,
            "beta1": self.beta1, "beta2": self.beta2, "dt": self.dt,
        }, protocol=4)

    @staticmethod
    def from_bytes(blob: bytes) -> "RomOperators":
        return RomOperators(**pickle.loads(blob))

    def save(self, path) -> None:
        sidecar.write_arrays(path, {
            "c": self.c, "A": self.A, "Hc": self.Hc,
            "form_code": 0 if self.form == DISCRETE else 1,
            "beta1": self.beta1, "beta2": self.beta2, "dt": self.dt,
        })

    @staticmethod
    def load(path) -> "RomOperators":
        data = sidecar.read_arrays(path)
        return RomOperators(
            c=data["c"], A=data["A"], Hc=data["Hc"],
            form=DISCRETE if int(data["form_code"]) == 0 else CONTINUOUS,
            beta1=float(data["beta1"]), beta2=float(data["beta2"]),
            dt=float(data["dt"]))


def finite_difference_dt(qhat: np.ndarray, dt: float) -> np.ndarray:
    """Second-order time derivative: central interior, one-sided at both ends."""
    if qhat.shape[1] < 3:
        raise UsageError("continuous form needs at least 3 snapshots")
    if dt <= 0:
        raise UsageError(f"dt={dt} must be positive")
    dq = np.empty_like(qhat)
    dq[:, 1:-1] = (qhat[:, 2:] - qhat[:, :-2]) / (2.0 * dt)
    dq[:, 0] = (-3.0 * qhat[:, 0] + 4.0 * qhat[:, 1] - qhat[:, 2]) / (2.0 * dt)
    dq[:, -1] = (3.0 * qhat[:, -1] - 4.0 * qhat[:, -2] + qhat[:, -3]) / (2.0 * dt)
    return dq


def build_data_matrix(qhat: np.ndarray, form: str = DISCRETE,
                      dt: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Regression data and right-hand side from reduced training coordinates.

    Row j of the data matrix is [q_j | w(q_j) | 1]. The discrete form pairs
    columns 1..n_t-1 with columns 2..n_t (the one-column shift); the
    continuous form pairs every column with a finite-difference derivative.
    """
    qhat = np.asarray(qhat, dtype=np.float64)
    if qhat.ndim != 2 or qhat.shape[1] < 2:
        raise UsageError("reduced data must be r x n_t with n_t >= 2")
    r, n_t = qhat.shape
    if form == DISCRETE:
        states = qhat[:, :-1]
        rhs = qhat[:, 1:].T.copy()
    elif form == CONTINUOUS:
        states = qhat
        rhs = finite_difference_dt(qhat, dt).T
    else:
        raise UsageError(f"unknown model form {form!r}")

    dmat = np.empty((states.shape[1], n_regression_columns(r)))
    dmat[:, :r] = states.T
    dmat[:, r : r + n_quad_features(r)] = squared_features(states).T
    dmat[:, -1] = 1.0
    return dmat, rhs


def regularizer_diagonal(r: int, beta1: float, beta2: float) -> np.ndarray:
    """Tikhonov weights: beta1 on linear+constant columns, beta2 on quadratic."""
    gamma = np.empty(n_regression_columns(r))
    gamma[:r] = beta1
    gamma[r : r + n_quad_features(r)] = beta2
    gamma[-1] = beta1
    return gamma


SOLVER_NORMAL = "normal"
SOLVER_QR = "qr"


def solve_regularized_lsq(dmat: np.ndarray, rhs: np.ndarray, beta1: float,
                          beta2: float, form: str = DISCRETE,
                          dt: float = 0.0,
                          solver: str = SOLVER_NORMAL) -> RomOperators:
    """Solve the regularized least squares for all operator rows at once.

    Default path: normal equations with one SPD factorization shared across
    the right-hand sides. The 'qr' path solves the stacked system
    [D; Gamma^(1/2)] via an orthogonal factorization for ill-conditioned
    studies.
    """
    if beta1 < 0 or beta2 < 0:
        raise UsageError("regularization weights must be nonnegative")
    r = rhs.shape[1]
    if dmat.shape != (rhs.shape[0], n_regression_columns(r)):
        raise UsageError(
            f"data matrix {dmat.shape} inconsistent with rhs {rhs.shape}")
    if dmat.shape[0] < dmat.shape[1]:
        raise UnderdeterminedError(r, dmat.shape[0],
                                   max_admissible_r(dmat.shape[0]))
    gamma = regularizer_diagonal(r, beta1, beta2)
    if solver == SOLVER_NORMAL:
        normal = dmat.T @ dmat
        normal[np.diag_indices_from(normal)] += gamma
        try:
            factor = scipy.linalg.cho_factor(normal, lower=True,
                                             check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                "regularized normal matrix is singular; use beta1, beta2 > 0 "
                "or reduce r") from exc
        ops_t = scipy.linalg.cho_solve(factor, dmat.T @ rhs, check_finite=False)
    elif solver == SOLVER_QR:
        n_cols = dmat.shape[1]
        stacked = np.vstack([dmat, np.diag(np.sqrt(gamma))])
        padded = np.vstack([rhs, np.zeros((n_cols, r))])
        ops_t, _, rank, _ = scipy.linalg.lstsq(stacked, padded,
                                               check_finite=False)
        if rank < n_cols:
            raise SingularSystemError(
                "stacked regression is rank deficient; use beta1, beta2 > 0 "
                "or reduce r")
    else:
        raise UsageError(f"unknown solver {solver!r}")
    ops = ops_t.T
    return RomOperators(
        c=ops[:, -1].copy(), A=ops[:, :r].copy(),
        Hc=ops[:, r : r + n_quad_features(r)].copy(),
        form=form, beta1=beta1, beta2=beta2, dt=dt)


@dataclass(frozen=True)
class TrainingStats:
    """Per-mode mean and max deviation of the reduced training data."""

    mean: np.ndarray
    max_dev: np.ndarray

    @staticmethod
    def from_reduced(qhat: np.ndarray) -> "TrainingStats":
        mean = qhat.mean(axis=1)
        return TrainingStats(mean=mean,
                             max_dev=np.abs(qhat - mean[:, None]).max(axis=1))


def stability_check(trial: np.ndarray, stats: TrainingStats, tau: float) -> bool:
    """Growth constraint: every mode's trial deviation from the training mean
    stays within (1 + tau) times its training deviation.

    Modes with zero training deviation must stay within 1e-12 of the largest
    deviation across modes. Any non-finite trial value is infeasible.
    """
    if not 0.0 < tau < 1.0:
        raise UsageError(f"tau={tau} outside (0, 1)")
    if trial.shape[0] != len(stats.mean):
        raise UsageError(
            f"trial has {trial.shape[0]} modes, stats describe {len(stats.mean)}")
    if not np.isfinite(trial).all():
        return False
    dev = np.abs(trial - stats.mean[:, None]).max(axis=1)
    bound = (1.0 + tau) * stats.max_dev
    flat = stats.max_dev == 0.0
    if flat.any():
        bound[flat] = 1e-12 * stats.max_dev.max()
    return bool(np.all(dev <= bound))


@dataclass(frozen=True)
class CandidateRecord:
    beta1: float
    beta2: float
    error: float         # +inf when infeasible
    feasible: bool
    rank: int
    fit_error: float     # raw training error, +inf when the rollout died early


@dataclass
class RegSearchOutcome:
    """Everything the grid search decided, identical on every rank."""

    betas1: tuple
    betas2: tuple
    n_candidates: int
    records: list = field(default_factory=list)
    winner: tuple = (np.nan, np.nan)
    owner_rank: int = -1
    tau: float = 0.0
    trial_steps: int = 0

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("beta1,beta2,error,feasible,rank\n")
            for rec in self.records:
                fh.write(f"{float(rec.beta1)!r},{float(rec.beta2)!r},{float(rec.error)!r},"
                         f"{int(rec.feasible)},{rec.rank}\n")


def _evaluate_pair(qhat: np.ndarray, beta1: float, beta2: float, dmat, rhs,
                   stats: TrainingStats, tau: float, n_trial: int, form: str,
                   dt: float, rank: int, solver: str = SOLVER_NORMAL):
    """Solve, roll out over the trial horizon, score, and check feasibility."""
    n_t = qhat.shape[1]
    try:
        ops = solve_regularized_lsq(dmat, rhs, beta1, beta2, form=form, dt=dt,
                                    solver=solver)
    except SingularSystemError:
        rec = CandidateRecord(beta1, beta2, float("inf"), False, rank, float("inf"))
        return rec, None
    traj = rollout_mod.rollout(ops, qhat[:, 0], n_trial, dt=dt or None)
    if traj.diverged or traj.n_instants < n_t:
        fit = float("inf")
        feasible = False
    else:
        fit = float(np.mean((traj.columns[:, :n_t] - qhat) ** 2))
        feasible = np.isfinite(fit) and stability_check(traj.columns, stats, tau)
    rec = CandidateRecord(beta1, beta2, fit if feasible else float("inf"),
                          feasible, rank, fit)
    return rec, ops


def select_winner(records: list[CandidateRecord]) -> CandidateRecord:
    """Lexicographic argmin over (error, beta1, beta2, rank)."""
    return min(records, key=lambda c: (c.error, c.beta1, c.beta2, c.rank))


def grid_search(handle: CommHandle, qhat: np.ndarray, betas1, betas2,
                tau: float, trial_steps: int, form: str = DISCRETE,
                dt: float = 0.0,
                solver: str = SOLVER_NORMAL) -> tuple[RomOperators, RegSearchOutcome]:
    """Distributed search over the regularization grid.

    Pairs are laid out in row-major grid order and handed to ranks in
    contiguous blocks; the grid is padded by repeating the last pair when the
    rank count does not divide it (duplicates cannot change the argmin). Each
    candidate is solved, rolled out from the first training column over
    max(trial_steps, training steps) steps, scored by mean squared error
    against the training coordinates, and checked against the growth
    constraint. One argmin reduction plus one owner broadcast make the
    winning operators identical on every rank.
    """
    qhat = np.asarray(qhat, dtype=np.float64)
    betas1 = [float(b) for b in betas1]
    betas2 = [float(b) for b in betas2]
    if not betas1 or not betas2:
        raise UsageError("regularization grids must be nonempty")
    if form == CONTINUOUS and dt <= 0:
        raise UsageError("continuous-form search needs dt > 0")
    pairs = [(b1, b2) for b1 in betas1 for b2 in betas2]
    n_real = len(pairs)
    while len(pairs) % handle.size:
        pairs.append(pairs[-1])
    chunk = len(pairs) // handle.size
    mine = pairs[handle.rank * chunk : (handle.rank + 1) * chunk]

    n_t = qhat.shape[1]
    rows = regression_rows(n_t, form)
    if n_regression_columns(qhat.shape[0]) > rows:
        raise UnderdeterminedError(qhat.shape[0], rows, max_admissible_r(rows))
    n_trial = max(int(trial_steps), n_t - 1)
    dmat, rhs = build_data_matrix(qhat, form=form, dt=dt if dt else 1.0)
    stats = TrainingStats.from_reduced(qhat)

    records: list[CandidateRecord] = []
    ops_by_pair: dict[tuple, RomOperators] = {}
    for beta1, beta2 in dict.fromkeys(mine):  # padded duplicates solved once
        rec, ops = _evaluate_pair(qhat, beta1, beta2, dmat, rhs, stats, tau,
                                  n_trial, form, dt, handle.rank, solver)
        records.append(rec)
        if ops is not None:
            ops_by_pair[(beta1, beta2)] = ops

    local_best = select_winner(records) if records else None
    key = ArgminKey(
        error=local_best.error if local_best else float("inf"),
        beta1=local_best.beta1 if local_best else float("inf"),
        beta2=local_best.beta2 if local_best else float("inf"),
        owner=handle.rank)
    winner = handle.allreduce_argmin(key)

    if not np.isfinite(winner.error):
        fit_best = min(records, key=lambda c: (c.fit_error, c.beta1, c.beta2)) \
            if records else None
        fit_key = ArgminKey(
            error=fit_best.fit_error if fit_best else float("inf"),
            beta1=fit_best.beta1 if fit_best else float("inf"),
            beta2=fit_best.beta2 if fit_best else float("inf"),
            owner=handle.rank)
        best = handle.allreduce_argmin(fit_key)
        raise NoFeasiblePairError(best.error, (best.beta1, best.beta2))

    blob = None
    if handle.rank == winner.owner:
        blob = ops_by_pair[(winner.beta1, winner.beta2)].to_bytes()
    ops = RomOperators.from_bytes(handle.broadcast_bytes(blob, root=winner.owner))

    gathered = handle.allgather_bytes(pickle.dumps(records, protocol=4))
    by_pair: dict[tuple, CandidateRecord] = {}
    for blob_r in gathered:  # ascending rank order; keep first evaluation
        for rec in pickle.loads(blob_r):
            by_pair.setdefault((rec.beta1, rec.beta2), rec)
    order = {pair: i for i, pair in enumerate(dict.fromkeys(pairs))}
    all_records = sorted(by_pair.values(), key=lambda c: order[(c.beta1, c.beta2)])

    outcome = RegSearchOutcome(
        betas1=tuple(betas1), betas2=tuple(betas2), n_candidates=n_real,
        records=all_records, winner=(winner.beta1, winner.beta2),
        owner_rank=winner.owner, tau=tau, trial_steps=n_trial)
    return ops, outcome


def log_grid(lo: float, hi: float, count: int) -> list[float]:
    """Log-spaced candidate values, inclusive of both endpoints."""
    if count < 1:
        raise UsageError("grid count must be >= 1")
    if lo <= 0 or hi <= 0:
        raise UsageError("log-spaced grids need positive bounds")
    if count == 1:
        return [float(lo)]
    return [float(v) for v in np.logspace(np.log10(lo), np.log10(hi), count)]
