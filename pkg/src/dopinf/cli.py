"""Single entry point wiring all modules into reproducible commands."""

from __future__ import annotations

import argparse
import os
import pickle
import socket as socketlib
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import (bench, dimred, opinf, pipeline, postproc, sidecar, store,
               synth, transforms)
from .comm import DEFAULT_TIMEOUT, BACKENDS, SocketComm, run_ranks
from .errors import DopinfError, UsageError
from .rollout import CONTINUOUS, DISCRETE, ReducedTrajectory, rollout


def parse_grid(text: str) -> tuple:
    """'min:max:count' (log-spaced) or a single value."""
    parts = text.split(":")
    if len(parts) == 1:
        return (float(parts[0]),)
    if len(parts) == 3:
        return tuple(opinf.log_grid(float(parts[0]), float(parts[1]), int(parts[2])))
    raise UsageError(f"bad grid spec {text!r}; use 'value' or 'min:max:count'")


def parse_probes(text: str) -> list[tuple[int, int]]:
    probes = []
    for item in text.split(","):
        var, _, cell = item.partition(":")
        try:
            probes.append((int(var), int(cell)))
        except ValueError as exc:
            raise UsageError(f"bad probe {item!r}; use VAR:CELL") from exc
    return probes


def parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _add_common_run_flags(sub):
    sub.add_argument("--data", required=True, help="dataset manifest path")
    sub.add_argument("--ranks", type=int, default=1)
    sub.add_argument("--backend", choices=BACKENDS, default="inproc")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip rendering PNG figures next to the CSV reports")


def _add_train_flags(sub):
    _add_common_run_flags(sub)
    group = sub.add_mutually_exclusive_group(required=True)
    group.add_argument("--r", type=int, help="reduced dimension")
    group.add_argument("--energy", type=float,
                       help="retained-energy threshold in (0, 1]")
    sub.add_argument("--beta1", default="1e-8", help="grid spec min:max:count")
    sub.add_argument("--beta2", default="1e-8", help="grid spec min:max:count")
    sub.add_argument("--tau", type=float, default=0.3)
    sub.add_argument("--form", choices=(DISCRETE, CONTINUOUS), default=DISCRETE)
    sub.add_argument("--trial-steps", type=int, default=0,
                     help="trial horizon in steps (>= training steps)")
    sub.add_argument("--dt", type=float, default=0.0,
                     help="time step for the continuous form")
    sub.add_argument("--transform", choices=(pipeline.TRANSFORM_NONE,
                                             pipeline.TRANSFORM_CENTER_SCALE),
                     default=pipeline.TRANSFORM_CENTER_SCALE)
    sub.add_argument("--lift", default=transforms.IDENTITY,
                     help="'identity' or 'reciprocal:K[,K...]'")
    sub.add_argument("--train-cols", type=int, default=None,
                     help="train on the leading N snapshot columns")
    sub.add_argument("--partition", choices=(pipeline.PARTITION_AUTO,
                                             pipeline.PARTITION_ROWS,
                                             pipeline.PARTITION_VARS),
                     default=pipeline.PARTITION_AUTO)
    sub.add_argument("--solver", choices=(opinf.SOLVER_NORMAL, opinf.SOLVER_QR),
                     default=opinf.SOLVER_NORMAL,
                     help="least-squares path; 'qr' for ill-conditioned studies")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--rank", type=int, default=None,
                     help="socket mode: join as this rank instead of spawning")
    sub.add_argument("--peers", default=None,
                     help="socket mode: rendezvous HOST:PORT[,HOST:PORT...]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dopinf",
        description="distributed reduced-order modeling over partitioned "
                    "snapshot datasets")
    subs = parser.add_subparsers(dest="command", required=True)

    gq = subs.add_parser("gen-quadratic",
                         help="exact-subspace quadratic verification dataset")
    gq.add_argument("--n", type=int, required=True)
    gq.add_argument("--r-star", type=int, required=True)
    gq.add_argument("--nt", type=int, required=True)
    gq.add_argument("--seed", type=int, default=0)
    gq.add_argument("--shards", type=int, default=2)
    gq.add_argument("--out", required=True, help="output directory")

    gb = subs.add_parser("gen-burgers", help="1-D viscous Burgers dataset")
    gb.add_argument("--nx", type=int, required=True)
    gb.add_argument("--viscosity", type=float, required=True)
    gb.add_argument("--nt", type=int, required=True)
    gb.add_argument("--dt", type=float, required=True)
    gb.add_argument("--ic", default="sine", help="zero | sine[:amp] | gauss[:amp]")
    gb.add_argument("--save-stride", type=int, default=1)
    gb.add_argument("--shards", type=int, default=2)
    gb.add_argument("--out", required=True, help="output directory")

    tr = subs.add_parser("train", help="run the full training workflow")
    _add_train_flags(tr)

    ro = subs.add_parser("rollout", help="evolve a trained reduced model")
    ro.add_argument("--ops", required=True, help="operators sidecar")
    ro.add_argument("--reduced", required=True,
                    help="reduced training trajectory sidecar (initial state)")
    ro.add_argument("--steps", type=int, required=True)
    ro.add_argument("--dt", type=float, default=0.0)
    ro.add_argument("--out", required=True, help="output directory")

    rc = subs.add_parser("reconstruct",
                         help="map a reduced trajectory back to original coordinates")
    rc.add_argument("--data", required=True, help="training dataset manifest")
    rc.add_argument("--run", required=True,
                    help="training output directory (factors/params sidecars)")
    rc.add_argument("--trajectory", required=True,
                    help="reduced trajectory sidecar to reconstruct")
    rc.add_argument("--ranks", type=int, default=1)
    rc.add_argument("--backend", choices=BACKENDS, default="inproc")
    rc.add_argument("--shards", type=int, default=1)
    rc.add_argument("--out", required=True, help="output directory")

    pr = subs.add_parser("probe", help="extract (variable, cell) time series")
    pr.add_argument("--data", required=True, help="dataset manifest")
    pr.add_argument("--probes", required=True, help="VAR:CELL[,VAR:CELL...]")
    pr.add_argument("--out", required=True, help="output CSV path")

    for mode in ("bench-strong", "bench-weak"):
        bn = subs.add_parser(mode, help=f"{mode.split('-')[1]} scaling harness")
        bn.add_argument("--data", required=True)
        bn.add_argument("--p-list", default="1,2,4")
        bn.add_argument("--reps", type=int, default=3)
        bn.add_argument("--r", type=int, default=8)
        bn.add_argument("--grid", default="2x2",
                        help="strong mode: hyperparameter grid AxB")
        bn.add_argument("--base-rows", type=int, default=None,
                        help="weak mode: rows per rank")
        bn.add_argument("--backend", choices=BACKENDS, default="inproc")
        bn.add_argument("--reduce", choices=("ordered", "tree"), default="tree",
                        help="collective fold used during benchmark runs")
        bn.add_argument("--out", required=True, help="output directory")
        bn.add_argument("--no-figures", action="store_true")

    ins = subs.add_parser("inspect", help="print dataset header and r bounds")
    ins.add_argument("--data", required=True)
    return parser


def _train_config(args) -> pipeline.TrainConfig:
    return pipeline.TrainConfig(
        manifest=Path(args.data),
        r=args.r, energy=args.energy,
        betas1=parse_grid(args.beta1), betas2=parse_grid(args.beta2),
        tau=args.tau, form=args.form, trial_steps=args.trial_steps,
        dt=args.dt, transform=args.transform, lift_spec=args.lift,
        train_cols=args.train_cols, partition_mode=args.partition,
        solver=args.solver, seed=args.seed)


def _train_worker(handle, config, out_dir, figures):
    result = pipeline.train_rank(handle, config)
    pipeline.write_outputs(handle, result, config, out_dir, figures=figures)
    return result.outcome.winner


def _free_port() -> int:
    probe = socketlib.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    return port


def _spawn_socket_ranks(argv: list[str], ranks: int) -> int:
    """Re-invoke this command once per rank with --rank/--peers filled in."""
    address = f"127.0.0.1:{_free_port()}"
    children = [
        subprocess.Popen(
            [sys.executable, "-m", "dopinf", *argv,
             "--rank", str(rank), "--peers", address],
            env=os.environ.copy())
        for rank in range(ranks)
    ]
    status = 0
    for child in children:
        status = max(status, child.wait())
    return status


def cmd_train(args, argv) -> int:
    config = _train_config(args)
    figures = not args.no_figures
    rank = args.rank
    peers = args.peers
    if rank is None and os.environ.get("DOPINF_RANK") is not None:
        rank = int(os.environ["DOPINF_RANK"])
        peers = peers or os.environ.get("DOPINF_PEERS")

    if args.backend == "socket" and rank is None:
        return _spawn_socket_ranks(argv, args.ranks)
    if args.backend == "socket":
        if not peers:
            raise UsageError("socket mode with --rank needs --peers HOST:PORT")
        host, _, port = peers.split(",")[0].partition(":")
        with SocketComm(rank, args.ranks, (host, int(port)),
                        timeout=DEFAULT_TIMEOUT) as handle:
            winner = _train_worker(handle, config, args.out, figures)
    else:
        winners = run_ranks(args.ranks, _train_worker, backend=args.backend,
                            args=(config, args.out, figures))
        winner = winners[0]
    print(f"train: wrote {args.out} (beta1={winner[0]:.6e} beta2={winner[1]:.6e})")
    return 0


def cmd_gen_quadratic(args) -> int:
    out = Path(args.out)
    manifest, truth = synth.gen_subspace_quadratic(
        args.n, args.r_star, args.nt, args.seed,
        out / "quadratic.manifest", shard_count=args.shards)
    truth.save(out / "quadratic.truth.bin")
    print(f"gen-quadratic: wrote {manifest} ({args.n} rows x {args.nt} cols)")
    return 0


def cmd_gen_burgers(args) -> int:
    out = Path(args.out)
    manifest = synth.gen_burgers(
        args.nx, args.viscosity, args.nt, args.dt, args.ic,
        out / "burgers.manifest", shard_count=args.shards,
        save_stride=args.save_stride)
    print(f"gen-burgers: wrote {manifest} ({args.nx} rows x {args.nt} cols)")
    return 0


def cmd_rollout(args) -> int:
    ops = opinf.RomOperators.load(args.ops)
    reduced = ReducedTrajectory.load(args.reduced)
    dt = args.dt or (ops.dt if ops.dt > 0 else None)
    traj = rollout(ops, reduced.columns[:, 0], args.steps, dt=dt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj.save(out / "trajectory.bin")
    traj.to_csv(out / "trajectory.csv")
    note = " (diverged)" if traj.diverged else ""
    print(f"rollout: wrote {out / 'trajectory.csv'} "
          f"({traj.n_instants} instants){note}")
    return 0


def _reconstruct_worker(handle, manifest_path, run_dir, traj_path, out_dir,
                        shards):
    run_dir = Path(run_dir)
    manifest = store.read_manifest(manifest_path)
    factors = dimred.ReductionFactors.load(run_dir / "factors.bin")
    sidecar_path = run_dir / "params.bin"
    lift_spec = bytes(sidecar.read_arrays(sidecar_path)["lift_spec"]).decode()
    traj = ReducedTrajectory.load(traj_path)

    mode = store.VARIABLE_ALIGNED if manifest.n_vars > 1 else store.ROW_BALANCED
    plan = store.plan_partition(manifest.n_rows, handle.size, mode,
                                rows_per_var=manifest.rows_per_var)
    raw = store.read_partition(manifest, plan, handle.rank,
                               n_cols=factors.n_t)
    lifted = transforms.lift(raw, lift_spec)
    params = transforms.load_params_local(sidecar_path, lifted)
    part = transforms.apply_stored(lifted, params)
    basis = postproc.basis_partition(part, factors.t_r)
    block = postproc.reconstruct(basis, traj, params)

    keep = params.var_index < params.n_vars_original
    payload = pickle.dumps((params.var_index[keep], params.cell_index[keep],
                            block), protocol=4)
    gathered = handle.allgather_bytes(payload)
    out_path = None
    if handle.rank == 0:
        full = np.empty((manifest.n_rows, traj.n_instants))
        rpv = manifest.rows_per_var
        for blob in gathered:
            vi, ci, rows = pickle.loads(blob)
            full[vi * rpv + ci, :] = rows
        header = store.DatasetHeader(
            n_rows=manifest.n_rows, n_cols=traj.n_instants,
            n_vars=manifest.n_vars, rows_per_var=rpv)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        out_path = store.write_dataset(full, header, shards,
                                       out / "reconstructed.manifest")
    handle.barrier()
    return str(out_path) if out_path else ""


def cmd_reconstruct(args) -> int:
    results = run_ranks(args.ranks, _reconstruct_worker, backend=args.backend,
                        args=(args.data, args.run, args.trajectory, args.out,
                              args.shards))
    print(f"reconstruct: wrote {results[0]}")
    return 0


def cmd_probe(args) -> int:
    manifest = store.read_manifest(args.data)
    probes = parse_probes(args.probes)
    series = {}
    for var, cell in probes:
        if not (0 <= var < manifest.n_vars and 0 <= cell < manifest.rows_per_var):
            raise UsageError(f"probe (var={var}, cell={cell}) outside global range")
        row = var * manifest.rows_per_var + cell
        series[(var, cell)] = store.read_rows(manifest, row, 1)[0, :]
    times = np.arange(manifest.n_cols, dtype=np.float64)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    postproc.write_probe_csv(out, times, probes, series)
    print(f"probe: wrote {out} ({len(probes)} probes x {manifest.n_cols} instants)")
    return 0


def cmd_bench(args, mode: str) -> int:
    p_list = parse_int_list(args.p_list)
    config = pipeline.TrainConfig(
        manifest=Path(args.data), r=args.r,
        betas1=(1e-8,), betas2=(1e-8,),
        transform=pipeline.TRANSFORM_NONE, trial_steps=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "strong":
        g1, g2 = (int(tok) for tok in args.grid.lower().split("x"))
        config = pipeline.TrainConfig(
            manifest=Path(args.data), r=args.r,
            betas1=tuple(opinf.log_grid(1e-10, 1e-4, g1)),
            betas2=tuple(opinf.log_grid(1e-10, 1e-4, g2)),
            transform=pipeline.TRANSFORM_NONE, trial_steps=0)
        rows = bench.run_strong(args.data, p_list, config,
                                repetitions=args.reps, backend=args.backend,
                                reduce_mode=args.reduce)
        report = out / "strong_report.csv"
    else:
        if args.base_rows is None:
            raise UsageError("bench-weak needs --base-rows")
        rows = bench.run_weak(args.data, args.base_rows, p_list, config,
                              repetitions=args.reps, backend=args.backend,
                              reduce_mode=args.reduce)
        report = out / "weak_report.csv"
    bench.write_report_csv(rows, report)
    if not args.no_figures:
        from . import plots
        plots.save_scaling_figure(rows, report.with_suffix(".png"))
    for row in rows:
        print(row.csv_line())
    print(f"bench: wrote {report}")
    return 0


def cmd_inspect(args) -> int:
    manifest = store.read_manifest(args.data)
    rows_discrete = opinf.regression_rows(manifest.n_cols, DISCRETE)
    rows_continuous = opinf.regression_rows(manifest.n_cols, CONTINUOUS)
    print(f"n_rows={manifest.n_rows} n_cols={manifest.n_cols} "
          f"n_vars={manifest.n_vars} rows_per_var={manifest.rows_per_var} "
          f"shards={len(manifest.shards)}")
    print(f"max_r discrete compact={opinf.max_admissible_r(rows_discrete)} "
          f"full={opinf.max_admissible_r_full(rows_discrete)}")
    print(f"max_r continuous compact={opinf.max_admissible_r(rows_continuous)} "
          f"full={opinf.max_admissible_r_full(rows_continuous)}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-quadratic":
            return cmd_gen_quadratic(args)
        if args.command == "gen-burgers":
            return cmd_gen_burgers(args)
        if args.command == "train":
            return cmd_train(args, argv)
        if args.command == "rollout":
            return cmd_rollout(args)
        if args.command == "reconstruct":
            return cmd_reconstruct(args)
        if args.command == "probe":
            return cmd_probe(args)
        if args.command == "bench-strong":
            return cmd_bench(args, "strong")
        if args.command == "bench-weak":
            return cmd_bench(args, "weak")
        if args.command == "inspect":
            return cmd_inspect(args)
        raise UsageError(f"unknown command {args.command!r}")
    except DopinfError as exc:
        print(f"dopinf: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
