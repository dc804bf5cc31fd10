import time

import numpy as np
import pytest

from dopinf.errors import UsageError
from dopinf.opinf import RomOperators, expand_quadratic, n_quad_features
from dopinf.rollout import (CONTINUOUS, DISCRETE, DivergenceSignal,
                            ReducedTrajectory, rollout, step_discrete)
from oracles import quadratic_apply_full_kronecker


def make_ops(c=None, A=None, Hc=None, r=1, form=DISCRETE):
    return RomOperators(
        c=np.zeros(r) if c is None else np.asarray(c, dtype=float),
        A=np.zeros((r, r)) if A is None else np.asarray(A, dtype=float),
        Hc=np.zeros((r, n_quad_features(r))) if Hc is None
        else np.asarray(Hc, dtype=float),
        form=form)


class TestStepDiscrete:
    def test_scalar_linear(self):
        ops = make_ops(A=[[0.5]])
        assert np.array_equal(step_discrete(ops, np.array([1.0])), [0.5])

    def test_constant_map(self):
        ops = make_ops(c=[1.0])
        for q in ([0.0], [5.0], [-2.0]):
            assert np.array_equal(step_discrete(ops, np.array(q)), [1.0])

    def test_matches_full_kronecker_oracle(self, rng):
        r = 2
        ops = make_ops(c=rng.standard_normal(r),
                       A=rng.standard_normal((r, r)),
                       Hc=rng.standard_normal((r, 3)), r=r)
        h_full = expand_quadratic(ops.Hc)
        q = rng.standard_normal(r)
        expected = ops.A @ q + quadratic_apply_full_kronecker(h_full, q) + ops.c
        assert np.allclose(step_discrete(ops, q), expected, atol=1e-12)

    def test_non_finite_signals_mode(self):
        ops = make_ops(A=[[1e308]])
        with pytest.raises(DivergenceSignal) as err:
            step_discrete(ops, np.array([1e308]))
        assert err.value.mode == 0


class TestRollout:
    def test_geometric_decay(self):
        ops = make_ops(A=[[0.5]])
        traj = rollout(ops, [1.0], 3)
        assert np.allclose(traj.columns, [[1.0, 0.5, 0.25, 0.125]])
        assert not traj.diverged

    def test_zero_steps_is_initial_column(self):
        ops = make_ops(A=[[0.5]])
        traj = rollout(ops, [3.0], 0)
        assert traj.columns.shape == (1, 1)
        assert traj.columns[0, 0] == 3.0

    def test_rk4_single_step_hand_value(self):
        # dq/dt = -q, dt = 0.1: factor 1 - h + h^2/2 - h^3/6 + h^4/24
        ops = make_ops(A=[[-1.0]], form=CONTINUOUS)
        traj = rollout(ops, [1.0], 1, dt=0.1)
        assert abs(traj.columns[0, 1] - 0.9048375) <= 1e-12

    def test_rk4_fourth_order_convergence(self):
        ops = make_ops(A=[[-1.0]], form=CONTINUOUS)
        errors = []
        for dt in (0.1, 0.05):
            steps = int(round(1.0 / dt))
            traj = rollout(ops, [1.0], steps, dt=dt)
            errors.append(abs(traj.columns[0, -1] - np.exp(-1.0)))
        ratio = errors[0] / errors[1]
        assert 12.0 <= ratio <= 20.0

    def test_linear_closed_form_over_100_steps(self):
        lam = np.array([0.97, -0.5, 0.99])
        ops = make_ops(A=np.diag(lam), r=3)
        q0 = np.array([1.0, 2.0, -1.5])
        traj = rollout(ops, q0, 100)
        ks = np.arange(101)
        expected = q0[:, None] * lam[:, None] ** ks[None, :]
        assert np.max(np.abs(traj.columns - expected)) <= 1e-12

    def test_divergence_returns_flagged_prefix(self):
        ops = make_ops(A=[[1e200]])
        traj = rollout(ops, [1e200], 10)
        assert traj.diverged
        assert traj.first_bad_index >= 1
        assert traj.columns.shape[1] == traj.first_bad_index
        assert np.isfinite(traj.columns).all()

    def test_continuous_requires_dt(self):
        ops = make_ops(A=[[-1.0]], form=CONTINUOUS)
        with pytest.raises(UsageError):
            rollout(ops, [1.0], 3)
        with pytest.raises(UsageError):
            rollout(ops, [1.0], 3, dt=-0.5)

    def test_negative_steps_rejected(self):
        with pytest.raises(UsageError):
            rollout(make_ops(A=[[0.5]]), [1.0], -1)

    def test_wall_time_independent_of_embedding_dimension(self, rng):
        # the rollout touches only (r, n_steps)-sized state; operators learned
        # from any full dimension n produce identical per-step cost
        ops = make_ops(A=0.5 * np.eye(4), r=4)
        q0 = np.ones(4)
        rollout(ops, q0, 200)  # warm-up
        t0 = time.perf_counter()
        rollout(ops, q0, 2000)
        base = time.perf_counter() - t0
        t0 = time.perf_counter()
        rollout(ops, q0, 2000)
        again = time.perf_counter() - t0
        assert again <= 5.0 * base + 0.05


class TestTrajectoryIO:
    def test_sidecar_round_trip(self, tmp_path, rng):
        traj = ReducedTrajectory(columns=rng.standard_normal((2, 5)),
                                 times=np.arange(5.0), provenance="rollout")
        traj.save(tmp_path / "t.bin")
        back = ReducedTrajectory.load(tmp_path / "t.bin")
        assert np.array_equal(back.columns, traj.columns)
        assert back.provenance == "rollout"
        assert not back.diverged

    def test_csv_export(self, tmp_path):
        traj = ReducedTrajectory(columns=np.array([[1.0, 2.0], [3.0, 4.0]]),
                                 times=np.array([0.0, 1.0]),
                                 provenance="rollout")
        traj.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,q1,q2"
        assert lines[1] == "0.0,1.0,3.0"
        assert lines[2] == "1.0,2.0,4.0"
