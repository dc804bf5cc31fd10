"""End-to-end training pipeline: partition, read, transform, reduce, learn.

Each rank runs the same function; after the Gram reduction every rank holds
identical factors and operators, so any rank could write the outputs (rank 0
does). Phase timings are fenced with barriers and never touch the numerics.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dimred, opinf, store, transforms
from .comm import CommHandle
from .errors import RankDeficiencyWarning, UsageError
from .rollout import CONTINUOUS, DISCRETE, ReducedTrajectory

TRANSFORM_NONE = "none"
TRANSFORM_CENTER_SCALE = "center-scale"

PARTITION_AUTO = "auto"
PARTITION_ROWS = "rows"
PARTITION_VARS = "vars"


@dataclass
class TrainConfig:
    """Everything one training invocation depends on."""

    manifest: Path
    r: int | None = None
    energy: float | None = None
    betas1: tuple = (1e-8,)
    betas2: tuple = (1e-8,)
    tau: float = 0.3
    form: str = DISCRETE
    trial_steps: int = 0
    dt: float = 0.0
    transform: str = TRANSFORM_CENTER_SCALE
    lift_spec: str = transforms.IDENTITY
    train_cols: int | None = None
    partition_mode: str = PARTITION_AUTO
    row_limit: int | None = None
    solver: str = opinf.SOLVER_NORMAL
    seed: int = 0

    def __post_init__(self):
        if (self.r is None) == (self.energy is None):
            raise UsageError("exactly one of r and energy must be given")
        if self.form not in (DISCRETE, CONTINUOUS):
            raise UsageError(f"unknown model form {self.form!r}")
        if self.transform not in (TRANSFORM_NONE, TRANSFORM_CENTER_SCALE):
            raise UsageError(f"unknown transform {self.transform!r}")
        if self.partition_mode not in (PARTITION_AUTO, PARTITION_ROWS, PARTITION_VARS):
            raise UsageError(f"unknown partition mode {self.partition_mode!r}")
        if self.solver not in (opinf.SOLVER_NORMAL, opinf.SOLVER_QR):
            raise UsageError(f"unknown solver {self.solver!r}")


@dataclass
class PhaseTimes:
    io: float = 0.0
    compute: float = 0.0
    learn: float = 0.0
    comm: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"io": self.io, "compute": self.compute, "learn": self.learn,
                "comm": self.comm, "total": self.total}


@dataclass
class TrainResult:
    """Per-rank view of a finished run (factors/operators identical on all)."""

    factors: dimred.ReductionFactors
    qhat: np.ndarray
    ops: opinf.RomOperators
    outcome: opinf.RegSearchOutcome
    params: transforms.TransformParams
    partition: store.SnapshotPartition      # transformed training block
    timings: PhaseTimes = field(default_factory=PhaseTimes)
    n_train_cols: int = 0


def resolve_partition_mode(config: TrainConfig, manifest: store.Manifest) -> str:
    if config.partition_mode == PARTITION_ROWS:
        return store.ROW_BALANCED
    if config.partition_mode == PARTITION_VARS:
        return store.VARIABLE_ALIGNED
    needs_vars = (config.transform != TRANSFORM_NONE
                  or config.lift_spec != transforms.IDENTITY)
    return store.VARIABLE_ALIGNED if needs_vars and manifest.n_vars > 1 \
        else store.ROW_BALANCED


def select_factors(D: np.ndarray, config: TrainConfig) -> dimred.ReductionFactors:
    """Reduction factors at the requested r or energy threshold."""
    if config.r is not None:
        return dimred.eig_factors(D, config.r)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        full = dimred.eig_factors(D, D.shape[0])
    r = dimred.choose_r_by_energy(full.eigenvalues, config.energy)
    return full.truncated(min(r, full.r))


def train_rank(handle: CommHandle, config: TrainConfig,
               fence_phases: bool = True) -> TrainResult:
    """Run the full training workflow on one rank."""
    clock = time.perf_counter
    marks = [0.0] * 4
    comm_marks = [0.0] * 4

    def fence(slot: int):
        if fence_phases:
            handle.barrier()
        marks[slot] = clock()
        comm_marks[slot] = handle.comm_seconds

    fence(0)
    manifest = store.read_manifest(config.manifest)
    n_rows = config.row_limit or manifest.n_rows
    mode = resolve_partition_mode(config, manifest)
    rpv = manifest.rows_per_var if n_rows == manifest.n_rows else n_rows
    plan = store.plan_partition(n_rows, handle.size, mode, rows_per_var=rpv)
    raw = store.read_partition(manifest, plan, handle.rank,
                               n_cols=config.train_cols)
    fence(1)

    lifted = transforms.lift(raw, config.lift_spec)
    if config.transform == TRANSFORM_CENTER_SCALE:
        part, params = transforms.center_scale(lifted, handle,
                                               lift_spec=config.lift_spec)
    else:
        part, params = lifted, transforms.identity_params(lifted)
    D = dimred.global_gram(handle, dimred.local_gram_panels(part))
    factors = select_factors(D, config)
    qhat = dimred.reduced_trajectory(factors.t_r, D)
    fence(2)

    ops, outcome = opinf.grid_search(
        handle, qhat, config.betas1, config.betas2, config.tau,
        config.trial_steps, form=config.form, dt=config.dt,
        solver=config.solver)
    fence(3)

    comm_total = comm_marks[3] - comm_marks[0]
    timings = PhaseTimes(
        io=(marks[1] - marks[0]) - (comm_marks[1] - comm_marks[0]),
        compute=(marks[2] - marks[1]) - (comm_marks[2] - comm_marks[1]),
        learn=(marks[3] - marks[2]) - (comm_marks[3] - comm_marks[2]),
        comm=comm_total,
        total=marks[3] - marks[0],
    )
    return TrainResult(
        factors=factors, qhat=qhat, ops=ops, outcome=outcome, params=params,
        partition=part, timings=timings, n_train_cols=qhat.shape[1])


def training_trajectory(result: TrainResult, dt: float = 0.0) -> ReducedTrajectory:
    n_t = result.qhat.shape[1]
    times = np.arange(n_t, dtype=np.float64)
    if result.ops.form == CONTINUOUS and dt > 0:
        times = times * dt
    return ReducedTrajectory(columns=result.qhat, times=times,
                             provenance="projected-training")


def write_spectrum_csv(path, factors: dimred.ReductionFactors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,sigma,lambda,cumulative_energy\n")
        for k in range(len(factors.singular_values)):
            fh.write(f"{k + 1},{float(factors.singular_values[k])!r},"
                     f"{float(factors.eigenvalues[k])!r},"
                     f"{float(factors.energy[k])!r}\n")


def write_outputs(handle: CommHandle, result: TrainResult, config: TrainConfig,
                  out_dir, figures: bool = True) -> dict:
    """Persist all run artifacts. Collective: every rank must call (the
    transform sidecar gathers the global mean field)."""
    out = Path(out_dir)
    if handle.rank == 0:
        out.mkdir(parents=True, exist_ok=True)
    handle.barrier()
    paths = {
        "factors": out / "factors.bin",
        "operators": out / "operators.bin",
        "params": out / "params.bin",
        "reduced": out / "reduced.bin",
        "search_log": out / "search_log.csv",
        "spectrum_csv": out / "spectrum.csv",
        "summary": out / "summary.txt",
    }
    transforms.save_params(result.params, handle, paths["params"])
    if handle.rank == 0:
        result.factors.save(paths["factors"])
        result.ops.save(paths["operators"])
        result.outcome.write_log(paths["search_log"])
        training_trajectory(result, config.dt).save(paths["reduced"])
        write_spectrum_csv(paths["spectrum_csv"], result.factors)
        winner = result.outcome.winner
        lines = [
            f"r={result.factors.r}",
            f"n_train_cols={result.n_train_cols}",
            f"form={config.form}",
            f"beta1_opt={float(winner[0])!r}",
            f"beta2_opt={float(winner[1])!r}",
            f"owner_rank={result.outcome.owner_rank}",
            f"candidates={result.outcome.n_candidates}",
            f"feasible={sum(rec.feasible for rec in result.outcome.records)}",
            f"retained_energy={float(result.factors.energy[result.factors.r - 1])!r}",
        ]
        paths["summary"].write_text("\n".join(lines) + "\n", encoding="utf-8")
        if figures:
            from . import plots
            paths["spectrum_png"] = out / "spectrum.png"
            plots.save_spectrum_figure(result.factors, paths["spectrum_png"])
    handle.barrier()
    return paths
