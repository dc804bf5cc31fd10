import subprocess
import sys

import numpy as np
import pytest

from dopinf import store
from dopinf.cli import main, parse_grid, parse_probes

SIDE_BY_SIDE = ("factors.bin", "operators.bin", "params.bin", "reduced.bin")


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def quad_run(tmp_path_factory):
    """Generated dataset plus a completed p=1 training run."""
    tmp = tmp_path_factory.mktemp("cliquad")
    data = tmp / "data"
    assert run_cli("gen-quadratic", "--n", "300", "--r-star", "3",
                   "--nt", "40", "--seed", "5", "--out", str(data)) == 0
    manifest = data / "quadratic.manifest"
    run1 = tmp / "run1"
    assert run_cli("train", "--data", str(manifest), "--ranks", "1",
                   "--backend", "inproc", "--r", "3",
                   "--beta1", "1e-10", "--beta2", "1e-10",
                   "--transform", "none", "--out", str(run1)) == 0
    return manifest, run1, tmp


class TestGenerateAndInspect:
    def test_inspect_prints_header_and_bounds(self, quad_run, capsys):
        manifest, _, _ = quad_run
        assert run_cli("inspect", "--data", str(manifest)) == 0
        out = capsys.readouterr().out
        assert "n_rows=300 n_cols=40" in out
        assert "max_r discrete compact=" in out
        assert "full=" in out

    def test_gen_burgers(self, tmp_path, capsys):
        out = tmp_path / "bdata"
        assert run_cli("gen-burgers", "--nx", "32", "--viscosity", "0.02",
                       "--nt", "10", "--dt", "5e-4", "--out", str(out)) == 0
        manifest = store.read_manifest(out / "burgers.manifest")
        assert manifest.n_rows == 32 and manifest.n_cols == 10


class TestTrain:
    def test_cross_p_sidecars_byte_identical(self, quad_run, tmp_path):
        manifest, run1, _ = quad_run
        run4 = tmp_path / "run4"
        assert run_cli("train", "--data", str(manifest), "--ranks", "4",
                       "--backend", "inproc", "--r", "3",
                       "--beta1", "1e-10", "--beta2", "1e-10",
                       "--transform", "none", "--out", str(run4)) == 0
        for name in SIDE_BY_SIDE:
            assert (run4 / name).read_bytes() == (run1 / name).read_bytes(), name

    def test_socket_spawn_matches_inproc(self, quad_run, tmp_path):
        manifest, run1, _ = quad_run
        out = tmp_path / "sock"
        proc = subprocess.run(
            [sys.executable, "-m", "dopinf", "train", "--data", str(manifest),
             "--ranks", "2", "--backend", "socket", "--r", "3",
             "--beta1", "1e-10", "--beta2", "1e-10", "--transform", "none",
             "--out", str(out)],
            capture_output=True, text=True, timeout=180)
        assert proc.returncode == 0, proc.stderr
        for name in SIDE_BY_SIDE:
            assert (out / name).read_bytes() == (run1 / name).read_bytes(), name

    def test_figures_written_by_default(self, quad_run):
        _, run1, _ = quad_run
        assert (run1 / "spectrum.png").exists()
        assert (run1 / "spectrum.csv").exists()
        assert (run1 / "search_log.csv").exists()


class TestRolloutReconstructProbe:
    def test_rollout_zero_steps(self, quad_run, tmp_path, capsys):
        _, run1, _ = quad_run
        out = tmp_path / "roll0"
        assert run_cli("rollout", "--ops", str(run1 / "operators.bin"),
                       "--reduced", str(run1 / "reduced.bin"),
                       "--steps", "0", "--out", str(out)) == 0
        lines = (out / "trajectory.csv").read_text().splitlines()
        assert len(lines) == 2  # header plus the initial column only

    def test_reconstruct_recovers_training_data(self, quad_run, tmp_path):
        manifest, run1, _ = quad_run
        out = tmp_path / "recon"
        assert run_cli("reconstruct", "--data", str(manifest),
                       "--run", str(run1),
                       "--trajectory", str(run1 / "reduced.bin"),
                       "--ranks", "2", "--out", str(out)) == 0
        recon = store.read_full(store.read_manifest(out / "reconstructed.manifest"))
        original = store.read_full(store.read_manifest(manifest))
        # exact-subspace data at r = r*: reconstruction is essentially exact
        assert np.max(np.abs(recon - original)) <= 1e-9 * np.abs(original).max()

    def test_probe_matches_rows(self, quad_run, tmp_path):
        manifest, _, _ = quad_run
        out = tmp_path / "probes.csv"
        assert run_cli("probe", "--data", str(manifest),
                       "--probes", "0:0,0:7", "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,v0c0,v0c7"
        matrix = store.read_full(store.read_manifest(manifest))
        first = [float(tok) for tok in lines[1].split(",")]
        assert first[1] == matrix[0, 0]
        assert first[2] == matrix[7, 0]

    def test_probe_out_of_range(self, quad_run, tmp_path):
        manifest, _, _ = quad_run
        status = run_cli("probe", "--data", str(manifest),
                         "--probes", "3:0", "--out", str(tmp_path / "p.csv"))
        assert status == 2  # usage error


class TestBenchCli:
    def test_bench_strong_report_and_figure(self, quad_run, tmp_path):
        manifest, _, _ = quad_run
        out = tmp_path / "bench"
        assert run_cli("bench-strong", "--data", str(manifest),
                       "--p-list", "1,2", "--reps", "3", "--r", "3",
                       "--grid", "1x1", "--out", str(out)) == 0
        assert (out / "strong_report.csv").exists()
        assert (out / "strong_report.png").exists()
        from dopinf.bench import parse_report_csv
        rows = parse_report_csv(out / "strong_report.csv")
        assert [r["p"] for r in rows] == [1, 2]


class TestExitCodes:
    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("train", "--definitely-not-a-flag")
        assert exc.value.code == 2

    def test_missing_dataset_is_io_error(self, tmp_path):
        status = run_cli("inspect", "--data", str(tmp_path / "nope.manifest"))
        assert status == 4

    def test_numerical_failure_exit_three(self, tmp_path):
        data = tmp_path / "bdata"
        assert run_cli("gen-burgers", "--nx", "32", "--viscosity", "0.02",
                       "--nt", "10", "--dt", "5e-4", "--out", str(data)) == 0
        # 10 snapshots admit at most r=2; requesting r=5 is underdetermined
        status = run_cli("train", "--data", str(data / "burgers.manifest"),
                         "--ranks", "1", "--r", "5",
                         "--beta1", "1e-8", "--beta2", "1e-8",
                         "--out", str(tmp_path / "bad"))
        assert status == 3


class TestParsers:
    def test_grid_specs(self):
        assert parse_grid("1e-4") == (1e-4,)
        grid = parse_grid("1e-4:1e-2:3")
        assert len(grid) == 3
        assert grid[0] == pytest.approx(1e-4)
        assert grid[-1] == pytest.approx(1e-2)

    def test_probe_spec(self):
        assert parse_probes("0:5,2:17") == [(0, 5), (2, 17)]
