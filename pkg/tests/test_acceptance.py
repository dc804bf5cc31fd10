"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The scaling smoke test at
the end generates a ~3.8 GiB dataset and takes the bulk of the runtime; its
wall-clock assertions require a machine with at least 4 cores and are skipped
(with the measured numbers still printed) on smaller hosts.
"""

import os
import time

import numpy as np
import pytest

from dopinf import bench, dimred, opinf, postproc, store, synth
from dopinf.comm import run_ranks
from dopinf.opinf import CandidateRecord, select_winner
from dopinf.pipeline import TrainConfig, train_rank, write_outputs
from dopinf.rollout import rollout
from oracles import max_r_integer_scan
from test_dimred import distributed_gram, partition_of

BACKENDS = ("loopback", "inproc", "socket")
P_SWEEP = (1, 2, 4)

COMPARED_SIDECARS = ("factors.bin", "operators.bin", "params.bin",
                     "reduced.bin", "spectrum.csv")


def report(criterion: int, ok: bool, detail: str):
    print(f"ACCEPTANCE {criterion:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def frobenius_relative(approx, reference):
    return float(np.linalg.norm(approx - reference) / np.linalg.norm(reference))


def per_snapshot_relative(approx, reference):
    norms = np.linalg.norm(reference, axis=0)
    norms[norms == 0.0] = 1.0
    return np.linalg.norm(approx - reference, axis=0) / norms


# ---------------------------------------------------------------------------
# criterion 1: Gram-split exactness

def test_criterion_01_gram_split_exactness(rng):
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(50):
        m = int(rng.integers(8, 2001))
        n_t = int(rng.integers(2, 65))
        matrix = rng.standard_normal((m, n_t))
        serial = matrix.T @ matrix
        for p in (1, 2, 3, 5):
            D = distributed_gram(matrix, p)
            rel = np.linalg.norm(D - serial) / np.linalg.norm(serial)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-13 and elapsed < 5.0,
           f"50 cases, p in {{1,2,3,5}}: worst relative gap {worst:.3e} "
           f"(tol 1e-13), {elapsed:.2f} s (< 5 s)")


# ---------------------------------------------------------------------------
# criterion 2: projection equivalence (Gram path vs thin-SVD oracle)

def test_criterion_02_projection_equivalence(rng):
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(20):
        m = int(rng.integers(30, 200))
        n_t = int(rng.integers(8, 40))
        matrix = rng.standard_normal((m, n_t))
        sigma = np.linalg.svd(matrix, compute_uv=False)
        if np.min(np.abs(np.diff(sigma))) < 1e-6 * sigma[0]:
            continue  # regenerate-distinct guard; Gaussian ties are measure zero
        r = max(1, n_t // 2)
        D = distributed_gram(matrix, 2)
        factors = dimred.eig_factors(D, r)
        qhat = dimred.reduced_trajectory(factors.t_r, D)
        _, qhat_oracle, _ = synth.oracle_serial_pod(matrix, r)
        worst = max(worst, float(np.max(np.abs(qhat - qhat_oracle))))
    elapsed = time.perf_counter() - t0
    report(2, worst <= 1e-10 and elapsed < 5.0,
           f"20 cases: worst |reduced - oracle| {worst:.3e} (tol 1e-10), "
           f"{elapsed:.2f} s (< 5 s)")


# ---------------------------------------------------------------------------
# criterion 3: singular values from the Gram path match the SVD oracle

def test_criterion_03_singular_value_correspondence(rng):
    worst = 0.0
    for case in range(20):
        m = int(rng.integers(20, 400))
        n_t = int(rng.integers(4, 48))
        matrix = rng.standard_normal((m, n_t))
        D = distributed_gram(matrix, 3)
        factors = dimred.eig_factors(D, min(n_t, m))
        _, _, sigma_oracle = synth.oracle_serial_pod(matrix, 1)
        eps = n_t * factors.eigenvalues[0] * 2.0**-52
        keep = factors.eigenvalues > eps
        rel = np.abs(factors.singular_values[keep] - sigma_oracle[keep]) \
            / sigma_oracle[keep]
        worst = max(worst, float(rel.max()))
    report(3, worst <= 1e-10,
           f"sigma vs SVD oracle above clamp: worst relative {worst:.3e} "
           "(tol 1e-10)")


# ---------------------------------------------------------------------------
# criterion 4: basis orthonormality for p in {1,2,4}

def test_criterion_04_basis_orthonormality(rng):
    worst = 0.0
    for case in range(10):
        m = int(rng.integers(40, 200))
        n_t = int(rng.integers(8, 24))
        matrix = rng.standard_normal((m, n_t))
        r = max(1, n_t // 2)
        D = distributed_gram(matrix, 1)
        factors = dimred.eig_factors(D, r)
        for p in P_SWEEP:
            plan = store.plan_partition(m, p)

            def worker(handle):
                part = partition_of(matrix, plan, handle.rank)
                basis = postproc.basis_partition(part, factors.t_r)
                return postproc.orthonormality_error(handle, basis)

            worst = max(worst, max(run_ranks(p, worker, backend="loopback")))
    report(4, worst <= 1e-8,
           f"10 datasets, p in {{1,2,4}}: worst |V^T V - I|_F {worst:.3e} "
           "(tol 1e-8)")


# ---------------------------------------------------------------------------
# criteria 5-7 share these fixtures

RECOVERY = dict(n=5000, r_star=8, n_t=400, seed=11)
BURGERS = dict(n_x=256, viscosity=0.01, n_train=500, n_pred=250, dt=5e-4,
               save_stride=2)


@pytest.fixture(scope="module")
def recovery_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("recovery")
    manifest, truth = synth.gen_subspace_quadratic(
        RECOVERY["n"], RECOVERY["r_star"], RECOVERY["n_t"], RECOVERY["seed"],
        tmp / "recovery.manifest", shard_count=4)
    return manifest, truth


@pytest.fixture(scope="module")
def burgers_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("burgers")
    manifest = synth.gen_burgers(
        BURGERS["n_x"], BURGERS["viscosity"],
        BURGERS["n_train"] + BURGERS["n_pred"], BURGERS["dt"], "sine",
        tmp / "burgers.manifest", shard_count=4,
        save_stride=BURGERS["save_stride"])
    return manifest


def recovery_config(manifest):
    n_t = RECOVERY["n_t"]
    return TrainConfig(manifest=manifest, r=RECOVERY["r_star"],
                       betas1=(1e-10,), betas2=(1e-10,), tau=0.3,
                       transform="none", trial_steps=2 * n_t - 1)


def burgers_config(manifest):
    n_total = BURGERS["n_train"] + BURGERS["n_pred"]
    return TrainConfig(manifest=manifest, energy=0.999,
                       betas1=tuple(opinf.log_grid(1e-10, 1e-2, 8)),
                       betas2=tuple(opinf.log_grid(1e-10, 1e-2, 8)),
                       tau=0.3, transform="center-scale",
                       train_cols=BURGERS["n_train"],
                       trial_steps=n_total - 1)


def reconstruct_full(result, n_steps):
    traj = rollout(result.ops, result.qhat[:, 0], n_steps)
    assert not traj.diverged
    basis = postproc.basis_partition(result.partition, result.factors.t_r)
    return postproc.reconstruct(basis, traj, result.params)


def test_criterion_05_operator_recovery(recovery_dataset):
    t0 = time.perf_counter()
    manifest, truth = recovery_dataset
    n_t = RECOVERY["n_t"]
    cfg = recovery_config(manifest)
    result = run_ranks(1, train_rank, backend="loopback", args=(cfg,))[0]
    recon = reconstruct_full(result, 2 * n_t - 1)
    reference = truth.reference_matrix(2 * n_t)
    train_err = frobenius_relative(recon[:, :n_t], reference[:, :n_t])
    extrap_err = frobenius_relative(recon[:, n_t:], reference[:, n_t:])
    elapsed = time.perf_counter() - t0
    report(5, train_err <= 1e-6 and extrap_err <= 1e-4 and elapsed < 30.0,
           f"n=5000 r*=8 n_t=400 beta=1e-10: training error {train_err:.3e} "
           f"(tol 1e-6), extrapolation {extrap_err:.3e} (tol 1e-4), "
           f"{elapsed:.1f} s (< 30 s)")


def test_criterion_06_burgers_end_to_end(burgers_dataset):
    t0 = time.perf_counter()
    manifest = burgers_dataset
    n_train, n_pred = BURGERS["n_train"], BURGERS["n_pred"]
    cfg = burgers_config(manifest)
    result = run_ranks(1, train_rank, backend="loopback", args=(cfg,))[0]
    feasible = sum(rec.feasible for rec in result.outcome.records)
    recon = reconstruct_full(result, n_train + n_pred - 1)
    reference = store.read_full(store.read_manifest(manifest))
    errors = per_snapshot_relative(recon, reference)
    train_err = float(errors[:n_train].mean())
    pred_err = float(errors[n_train:].mean())
    elapsed = time.perf_counter() - t0
    report(6, feasible >= 1 and train_err <= 0.05 and pred_err <= 0.15
           and elapsed < 120.0,
           f"nx=256 nu=0.01 E%=0.999 grid 8x8 tau=0.3: r={result.factors.r}, "
           f"{feasible} feasible, training {train_err:.4f} (tol 0.05), "
           f"prediction {pred_err:.4f} (tol 0.15), {elapsed:.1f} s (< 120 s)")


def test_criterion_07_cross_p_and_backend_determinism(
        recovery_dataset, burgers_dataset, tmp_path):
    digests = {}
    for label, manifest, cfg in (
            ("recovery", recovery_dataset[0], recovery_config(recovery_dataset[0])),
            ("burgers", burgers_dataset, burgers_config(burgers_dataset))):
        for p in P_SWEEP:
            for backend in BACKENDS:
                out = tmp_path / f"{label}-p{p}-{backend}"

                def worker(handle):
                    res = train_rank(handle, cfg)
                    write_outputs(handle, res, cfg, out, figures=False)

                run_ranks(p, worker, backend=backend)
                digests[(label, p, backend)] = {
                    name: (out / name).read_bytes() for name in COMPARED_SIDECARS}
        baseline = digests[(label, 1, "loopback")]
        for p in P_SWEEP:
            for backend in BACKENDS:
                got = digests[(label, p, backend)]
                for name in COMPARED_SIDECARS:
                    assert got[name] == baseline[name], \
                        f"{label} p={p} {backend}: {name} differs from p=1 loopback"
    report(7, True,
           "recovery and burgers sidecars byte-identical for p in {1,2,4} "
           "across loopback/inproc/socket")


# ---------------------------------------------------------------------------
# criterion 8: grid-search constraint and tie-break semantics

def test_criterion_08_grid_search_semantics():
    # a candidate whose trial rollout overgrows is excluded even though its
    # training error is minimal (exact fit of growing data)
    qhat = np.array([[1.0, 2.0, 4.0, 8.0, 16.0]])

    def worker(handle):
        return opinf.grid_search(handle, qhat, [0.0, 1e6], [1e6], 0.2,
                                 trial_steps=12)

    ops, outcome = run_ranks(2, worker, backend="loopback")[0]
    by_pair = {(rec.beta1, rec.beta2): rec for rec in outcome.records}
    exact_fit = by_pair[(0.0, 1e6)]
    excluded_ok = (exact_fit.fit_error <= 1e-10 and not exact_fit.feasible
                   and outcome.winner == (1e6, 1e6))

    ties = [CandidateRecord(0.3, 0.1, 0.5, True, 0, 0.5),
            CandidateRecord(0.1, 0.9, 0.5, True, 1, 0.5),
            CandidateRecord(0.1, 0.2, 0.5, True, 2, 0.5),
            CandidateRecord(0.1, 0.2, 0.5, True, 1, 0.5)]
    tie_winner = select_winner(ties)
    tie_ok = (tie_winner.beta1, tie_winner.beta2, tie_winner.rank) == (0.1, 0.2, 1)
    report(8, excluded_ok and tie_ok,
           "minimal-error infeasible candidate excluded; lexicographic "
           "(error, beta1, beta2, rank) tie-break verified")


# ---------------------------------------------------------------------------
# criterion 9: admissible-r bound

def test_criterion_09_admissible_r_bound():
    ok = True
    for rows in (10, 100, 500, 2535, 2536, 5000):
        ok &= opinf.max_admissible_r(rows) == max_r_integer_scan(rows)
        ok &= opinf.max_admissible_r_full(rows) == max_r_integer_scan(rows, True)
    # 2536 snapshots, discrete form -> 2535 regression rows
    compact = opinf.max_admissible_r(2535)
    full = opinf.max_admissible_r_full(2535)
    ok &= compact == 69 and full == 49
    report(9, ok,
           f"integer-scan oracle matches; 2536 snapshots (discrete) admit "
           f"r_max={compact} compact / {full} full-Kronecker. A previously "
           f"reported bound of 68 for this snapshot count does not match "
           f"either convention; the toolkit exposes both computed bounds")


# ---------------------------------------------------------------------------
# criterion 10: scaling smoke test (>= 4M x 128 synthetic dataset)

SMOKE_ROWS = 4_000_000
SMOKE_COLS = 128


@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    manifest, _ = synth.gen_subspace_quadratic(
        SMOKE_ROWS, 8, SMOKE_COLS, seed=87, path=tmp / "smoke.manifest",
        shard_count=8)
    yield manifest
    for entry in store.read_manifest(manifest).shards:
        entry.path.unlink(missing_ok=True)


def test_criterion_10_scaling_smoke(smoke_dataset, tmp_path):
    config = TrainConfig(
        manifest=smoke_dataset, r=8,
        betas1=tuple(opinf.log_grid(1e-10, 1e-6, 2)),
        betas2=tuple(opinf.log_grid(1e-10, 1e-6, 2)),
        transform="none", trial_steps=0)
    t0 = time.perf_counter()
    rows = bench.run_strong(smoke_dataset, list(P_SWEEP), config,
                            repetitions=3, backend="inproc")
    elapsed = time.perf_counter() - t0

    report_path = tmp_path / "smoke_report.csv"
    bench.write_report_csv(rows, report_path)
    parsed = bench.parse_report_csv(report_path)
    schema_ok = (
        [r["p"] for r in parsed] == list(P_SWEEP)
        and all(set(bench.REPORT_COLUMNS) == set(r) for r in parsed)
        and parsed[0]["speedup_or_efficiency"] == 1.0
        and all(r["reps"] == 3 for r in parsed))
    totals = [r["total_mean"] for r in parsed]
    print(f"ACCEPTANCE 10 measured totals (s) at p=1,2,4: "
          f"{', '.join(f'{t:.2f}' for t in totals)} on {os.cpu_count()} cores")
    report(10, schema_ok,
           f"phase report schema valid for {SMOKE_ROWS}x{SMOKE_COLS} dataset, "
           f"harness wall time {elapsed:.0f} s")

    if os.cpu_count() < 4:
        pytest.skip(
            f"wall-time assertions stipulate a 4-core machine; this host has "
            f"{os.cpu_count()} core(s). Measured totals: {totals}")
    assert all(a >= b for a, b in zip(totals, totals[1:])), \
        f"total time must be non-increasing in p, got {totals}"
    assert elapsed < 300.0, f"runtime {elapsed:.0f} s exceeds 5 min"


# ---------------------------------------------------------------------------
# criterion 11: RK4 order and scalar Tikhonov closed forms

def test_criterion_11_rk4_and_tikhonov():
    from dopinf.opinf import RomOperators, n_quad_features
    ops = RomOperators(c=np.zeros(1), A=np.array([[-1.0]]),
                       Hc=np.zeros((1, n_quad_features(1))), form="continuous")
    one = rollout(ops, [1.0], 1, dt=0.1)
    hand_value_ok = abs(one.columns[0, 1] - 0.9048375) <= 1e-12
    errors = []
    for dt in (0.1, 0.05):
        traj = rollout(ops, [1.0], int(round(1.0 / dt)), dt=dt)
        errors.append(abs(traj.columns[0, -1] - np.exp(-1.0)))
    ratio = errors[0] / errors[1]
    order_ok = 12.0 <= ratio <= 20.0

    # minimize (a - 2)^2 + beta a^2 -> a = 2/(1+beta)
    tik_ok = True
    for beta in (0.0, 0.5, 1.0, 3.0):
        normal = np.array([[1.0 + beta]])
        a = np.linalg.solve(normal, np.array([[2.0]]))[0, 0]
        tik_ok &= abs(a - 2.0 / (1.0 + beta)) <= 1e-14
    report(11, hand_value_ok and order_ok and tik_ok,
           f"RK4 single step matches 0.9048375; halving dt shrinks error "
           f"{ratio:.1f}x (within [12, 20]); scalar Tikhonov closed form exact")
