"""Command-line experiment driver.

    snde <command> --config PATH [--system NAME] [--seed N] [--gamma X] [--out DIR]

Commands: generate, train, eval, sweep-gamma, measure, report. Every
command writes ``config.txt`` (the resolved configuration) next to its
artifacts. Exit status: 0 success, 1 usage or configuration error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from snde import evaluation as ev
from snde.config import ConfigError, ExperimentConfig, parse_config, serialize
from snde.num_core import SolverStats, Trajectory, integrate, uniform_grid
from snde.systems import get_system
from snde.training import (
    MEASURE_STREAM,
    Checkpoint,
    TrajectorySet,
    generate_dataset,
    ground_truth,
    ic_seed,
    load_checkpoint,
    model_field,
    save_checkpoint,
    train,
)

log = logging.getLogger("snde")

COMMANDS = ("generate", "train", "eval", "sweep-gamma", "measure", "report")
DATASET = "dataset.csv"
DATASET_META = "dataset.meta"
CHECKPOINT = "checkpoint.txt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(ds: TrajectorySet, out: Path) -> None:
    n = ds.trajectories[0].n
    with open(out / DATASET, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "t"] + [f"u_{i}" for i in range(n)])
        for k, traj in enumerate(ds.trajectories):
            for t, u in zip(traj.times, traj.states):
                w.writerow([k, repr(float(t))] + [repr(float(x)) for x in u])
    meta = [f"system={ds.system}", f"seed={ds.seed}", f"n_trajectories={len(ds)}", f"n={n}"]
    for k, ref in enumerate(ds.references):
        meta.append(f"reference_{k}=" + ",".join(repr(float(x)) for x in np.atleast_1d(ref)))
    (out / DATASET_META).write_text("\n".join(meta) + "\n")


def read_dataset(out: Path) -> TrajectorySet:
    meta = dict(line.split("=", 1) for line in (out / DATASET_META).read_text().splitlines() if line)
    data = np.loadtxt(out / DATASET, delimiter=",", skiprows=1, ndmin=2)
    n_traj = int(meta["n_trajectories"])
    if data.shape[1] != int(meta["n"]) + 2:
        raise ValueError(f"{out / DATASET}: column count does not match state dimension {meta['n']}")
    trajs = []
    for k in range(n_traj):
        rows = data[data[:, 0] == k]
        trajs.append(Trajectory(rows[:, 1], rows[:, 2:]))
    refs = np.array([[float(x) for x in meta[f"reference_{k}"].split(",")] for k in range(n_traj)])
    return TrajectorySet(meta["system"], int(meta["seed"]), tuple(trajs), refs,
                         tuple(SolverStats() for _ in trajs))


# ---------------------------------------------------------------------------
# commands


def _snapshot(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize(cfg, include_out_dir=False))


def _dataset_for(cfg: ExperimentConfig) -> TrajectorySet:
    out = Path(cfg.out_dir)
    if (out / DATASET).exists():
        ds = read_dataset(out)
        if ds.system == cfg.system and ds.seed == cfg.seed and len(ds) == cfg.training.n_trajectories:
            return ds
        log.info("existing dataset does not match the config; regenerating")
    return cmd_generate(cfg)


def cmd_generate(cfg: ExperimentConfig) -> TrajectorySet:
    out = Path(cfg.out_dir)
    _snapshot(cfg, out)
    ds = generate_dataset(cfg.system, cfg.training.n_trajectories, cfg.seed)
    write_dataset(ds, out)
    print(f"wrote {len(ds)} trajectories to {out / DATASET}")
    return ds


def cmd_train(cfg: ExperimentConfig, out: Path | None = None) -> Checkpoint:
    out = Path(cfg.out_dir) if out is None else out
    _snapshot(cfg, out)
    ds = _dataset_for(cfg)
    ckpt = train(cfg.training, ds,
                 callback=lambda e, tl, vl, d: log.info("epoch %d train %.4g val %.4g", e, tl, vl))
    save_checkpoint(ckpt, out / CHECKPOINT)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "diverged"])
        for e, tl, vl, d in ckpt.history:
            w.writerow([e, repr(tl), repr(vl), d])
    _, tl, vl, _ = ckpt.history[-1]
    print(f"trained {cfg.training.epochs} epochs: train loss {tl:.4g}, val loss {vl:.4g}")
    return ckpt


def cmd_eval(cfg: ExperimentConfig, out: Path | None = None) -> list[ev.EvalReport]:
    out = Path(cfg.out_dir) if out is None else out
    _snapshot(cfg, out)
    if cfg.eval_model == "ground-truth":
        reports = ev.evaluate_model(None, cfg.system, cfg.n_test_trials, cfg.eval_horizon, cfg.seed)
    else:
        path = out / CHECKPOINT
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}; run `snde train` first")
        ckpt = load_checkpoint(path)
        reports = ev.evaluate_model(ckpt, cfg.system, cfg.n_test_trials, cfg.eval_horizon, cfg.seed,
                                    gamma=cfg.training.gamma)
    evdir = out / "eval"
    evdir.mkdir(exist_ok=True)
    for r in reports:
        ev.write_trial_csv(r, evdir / f"trial_{r.trial:04d}.csv")
    ev.write_stats_csv(reports, evdir / "stats.csv")
    final = np.array([r.state_error[-1] if not r.diverged else np.inf for r in reports])
    mean_err = float(np.mean([np.mean(r.state_error) for r in reports]))
    print(f"{len(reports)} trials: mean relative error {mean_err:.3g}, "
          f"median final error {np.median(final):.3g}, diverged {sum(r.diverged for r in reports)}")
    return reports


def cmd_report(cfg: ExperimentConfig, out: Path | None = None) -> None:
    out = Path(cfg.out_dir) if out is None else out
    evdir = out / "eval"
    files = sorted(evdir.glob("trial_*.csv"))
    if not files:
        raise FileNotFoundError(f"no trial reports in {evdir}; run `snde eval` first")
    _snapshot(cfg, out)
    reports = [ev.read_trial_csv(f, i) for i, f in enumerate(files)]
    ev.write_aggregate_csv(ev.aggregate(reports, "state_error"), out / "aggregate_state.csv")
    ev.write_aggregate_csv(ev.aggregate(reports, "constraint_error"), out / "aggregate_constraint.csv")
    print(f"aggregated {len(reports)} trials into {out}")


def _gamma_dir(out: Path, gamma: float) -> Path:
    return out / f"gamma_{gamma:g}"


def cmd_sweep(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out_dir)
    _snapshot(cfg, out)
    _dataset_for(cfg)
    for gamma in cfg.gamma_sweep:
        sub = cfg.replace(gamma=float(gamma), eval_model="checkpoint")
        gdir = _gamma_dir(out, gamma)
        cmd_train(sub, gdir)
        cmd_eval(sub, gdir)
        cmd_report(sub, gdir)


def _write_histogram(h: ev.BoxHistogram, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"bin_{i}" for i in range(h.weights.ndim)] + ["weight"])
        for idx in zip(*np.nonzero(h.weights)):
            w.writerow(list(idx) + [repr(float(h.weights[idx]))])


def cmd_measure(cfg: ExperimentConfig) -> None:
    """Occupation histograms of one long trajectory; halves of the ground
    truth are compared with each other and, given a checkpoint, with the model."""
    out = Path(cfg.out_dir)
    _snapshot(cfg, out)
    system = get_system(cfg.system)
    u0 = system.sample_ic(ic_seed(cfg.seed, MEASURE_STREAM, 0))
    times = uniform_grid(cfg.measure_horizon, system.dt)
    truth, _ = ground_truth(system, u0, times)
    angular = system.angular or (False,) * system.n
    grid = ev.default_grid([truth], angular, cfg.grid_bins, cfg.grid_margin)
    half = cfg.measure_horizon / 2
    first = Trajectory(truth.times[truth.times <= half], truth.states[truth.times <= half])
    second = Trajectory(truth.times[truth.times > half], truth.states[truth.times > half])
    hists = {
        "truth": ev.occupation_measure(truth, grid, cfg.burn_in),
        "truth_first_half": ev.occupation_measure(first, grid, cfg.burn_in),
        "truth_second_half": ev.occupation_measure(second, grid, 0.0),
    }
    rows = [("truth_halves", ev.hellinger(hists["truth_first_half"], hists["truth_second_half"]))]
    ckpt_path = out / CHECKPOINT
    if cfg.eval_model == "checkpoint" and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        manifold = system.constraint_for(u0)
        try:
            pred, _ = integrate(model_field(ckpt, cfg.training.gamma), u0, 0.0, times,
                                cfg.training.controller(),
                                args={"params": ckpt.params.flat, "ref": manifold.reference},
                                breakpoints=system.breakpoints(0.0, cfg.measure_horizon))
        except Exception as exc:  # diverged models still get a histogram of what was reached
            pred = getattr(exc, "trajectory", None)
            if pred is None:
                raise
        hists["model"] = ev.occupation_measure(pred, grid, cfg.burn_in)
        rows.append(("model_vs_truth", ev.hellinger(hists["model"], hists["truth"])))
    mdir = out / "measure"
    mdir.mkdir(exist_ok=True)
    for name, h in hists.items():
        _write_histogram(h, mdir / f"hist_{name}.csv")
    with open(mdir / "hellinger.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "hellinger", "grid", "seed"])
        for name, d in rows:
            w.writerow([name, repr(d), grid.describe(), cfg.seed])
    for name, d in rows:
        print(f"hellinger {name}: {d:.4f} (grid {grid.describe()})")


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snde", description="Stabilized neural ODE experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key=value configuration file")
    p.add_argument("--system", help="override the configured system")
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-gamma": cmd_sweep,
    "measure": cmd_measure,
    "report": cmd_report,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {"system": args.system, "seed": args.seed, "gamma": args.gamma,
                     "out_dir": args.out_dir}
        cfg = parse_config(args.config, overrides)
        cfg.check_writable()
    except (UsageError, ConfigError) as exc:
        print(f"snde: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        _HANDLERS[args.command](cfg)
    except Exception as exc:
        print(f"snde: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
