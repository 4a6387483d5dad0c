"""Metrics: relative errors, stable time, solver statistics, invariant measures."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import math
import os
import warnings
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from snde.num_core import (
    IntegrationError,
    SolverStats,
    StepController,
    TRAINING_CONTROLLER,
    Trajectory,
    integrate,
    uniform_grid,
)
from snde.stabilization import ConstraintManifold
from snde.systems import SystemDefinition, get_system
from snde.training import EVAL_STREAM, Checkpoint, ground_truth, ic_seed, model_field, oracle_field

E_STAB = 1e3
# Integration of a model is abandoned once |u| exceeds this multiple of the
# largest ground-truth magnitude; the relative error is then far above E_STAB.
DIVERGENCE_FACTOR = 1e4


def thread_count() -> int:
    """Worker threads for trial fan-out, from ``SNDE_THREADS`` (default: all cores)."""
    raw = os.environ.get("SNDE_THREADS", "")
    if raw.strip():
        n = int(raw)
        if n < 1:
            raise ValueError("SNDE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def relative_error_series(truth: Trajectory, pred: Trajectory) -> np.ndarray:
    """``|u(t) - u_hat(t)| / |u(t)|`` at every time point."""
    if truth.times.shape != pred.times.shape or np.any(truth.times != pred.times):
        raise ValueError("trajectories must share the same time grid")
    norms = np.linalg.norm(truth.states, axis=1)
    if np.any(norms == 0):
        raise ValueError("relative error undefined where the true state is zero")
    return np.linalg.norm(truth.states - pred.states, axis=1) / norms


def constraint_error_series(manifold: ConstraintManifold, pred: Trajectory, ref=None) -> np.ndarray:
    """``|g(u_hat(t))| / |reference|``; absolute ``|g|`` if the reference is zero."""
    ref = np.asarray(manifold._ref(ref), dtype=float)
    g = jax.vmap(lambda u, t: manifold.g(u, t, ref))(jnp.asarray(pred.states), jnp.asarray(pred.times))
    err = np.linalg.norm(np.asarray(g), axis=1)
    scale = np.linalg.norm(ref)
    if scale == 0:
        warnings.warn(f"{manifold.name}: zero reference, reporting absolute constraint error",
                      RuntimeWarning, stacklevel=2)
        return err
    return err / scale


def stable_time(errors, times, threshold: float = E_STAB) -> float:
    """Largest ``t`` with ``E(t) < threshold``.

    The crossing after the last sub-threshold sample is located by linear
    interpolation; if the final sample is below threshold the final time is
    returned, and 0 if no sample is.
    """
    errors = np.asarray(errors, dtype=float)
    times = np.asarray(times, dtype=float)
    if errors.shape != times.shape:
        raise ValueError("errors and times must be aligned")
    below = np.flatnonzero(errors < threshold)
    if below.size == 0:
        return 0.0
    j = below[-1]
    if j == len(times) - 1:
        return float(times[j])
    e0, e1 = errors[j], errors[j + 1]
    if not np.isfinite(e1):
        return float(times[j])
    frac = (threshold - e0) / (e1 - e0)
    return float(times[j] + frac * (times[j + 1] - times[j]))


# ---------------------------------------------------------------------------
# invariant measures


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Regular box grid; angular dimensions always span ``[-pi, pi)``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    bins: tuple[int, ...]
    angular: tuple[bool, ...]

    def __post_init__(self):
        d = len(self.bins)
        if not (len(self.lower) == len(self.upper) == len(self.angular) == d):
            raise ValueError("grid specification lengths differ")
        lower = tuple(-math.pi if a else float(lo) for lo, a in zip(self.lower, self.angular))
        upper = tuple(math.pi if a else float(hi) for hi, a in zip(self.upper, self.angular))
        if any(hi <= lo for lo, hi in zip(lower, upper)) or any(b < 1 for b in self.bins):
            raise ValueError("invalid grid bounds or bin counts")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        object.__setattr__(self, "angular", tuple(bool(a) for a in self.angular))

    def describe(self) -> str:
        parts = []
        for lo, hi, b, a in zip(self.lower, self.upper, self.bins, self.angular):
            parts.append(f"{b}{'a' if a else ''}[{lo:.6g},{hi:.6g}]")
        return " x ".join(parts)


def default_grid(trajectories: Sequence[Trajectory], angular: Sequence[bool], bins: int = 20,
                 margin: float = 0.1) -> GridSpec:
    """Grid with ``bins`` per dimension; non-angular bounds are the data
    envelope widened by ``margin`` of its range on each side."""
    states = np.concatenate([t.states for t in trajectories])
    lo, hi = states.min(axis=0), states.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-12)
    d = states.shape[1]
    return GridSpec(tuple(lo - pad), tuple(hi + pad), (bins,) * d, tuple(angular))


@dataclasses.dataclass(frozen=True)
class BoxHistogram:
    grid: GridSpec
    weights: np.ndarray     # shape grid.bins, sums to one
    n_samples: int
    n_clamped: int


def wrap_angle(x):
    return np.mod(np.asarray(x) + np.pi, 2 * np.pi) - np.pi


def occupation_measure(trajectory: Trajectory, grid: GridSpec, burn_in: float = 0.0) -> BoxHistogram:
    """Normalized visit frequencies of the samples after ``burn_in`` seconds.

    Samples outside a non-angular bound are put in the edge bin and counted
    in ``n_clamped``.
    """
    keep = trajectory.times >= trajectory.times[0] + burn_in
    x = trajectory.states[keep]
    if x.shape[0] == 0:
        raise ValueError("no samples after burn-in")
    if x.shape[1] != len(grid.bins):
        raise ValueError("grid dimension does not match the state dimension")
    lower, upper, bins = np.array(grid.lower), np.array(grid.upper), np.array(grid.bins)
    ang = np.array(grid.angular)
    x = np.where(ang, wrap_angle(x), x)
    outside = ((x < lower) | (x > upper)) & ~ang
    idx = np.floor((x - lower) / (upper - lower) * bins).astype(int)
    idx = np.clip(idx, 0, bins - 1)
    flat = np.ravel_multi_index(tuple(idx.T), tuple(bins))
    counts = np.bincount(flat, minlength=int(np.prod(bins))).astype(float)
    weights = (counts / counts.sum()).reshape(tuple(bins))
    return BoxHistogram(grid, weights, int(x.shape[0]), int(np.any(outside, axis=1).sum()))


def hellinger(p: BoxHistogram, q: BoxHistogram) -> float:
    """``|sqrt(p) - sqrt(q)|_2 / sqrt(2)``, in ``[0, 1]``."""
    if p.grid != q.grid:
        raise ValueError("histograms are on different grids")
    d = np.sqrt(p.weights) - np.sqrt(q.weights)
    return float(min(1.0, np.sqrt(0.5 * np.sum(d * d))))


# ---------------------------------------------------------------------------
# model evaluation


@dataclasses.dataclass
class EvalReport:
    times: np.ndarray
    state_error: np.ndarray
    constraint_error: np.ndarray
    stable_time: float
    stats: SolverStats
    trial: int
    seed: int
    gamma: float
    model_kind: str
    diverged: bool = False

    def __post_init__(self):
        if not (len(self.times) == len(self.state_error) == len(self.constraint_error)):
            raise ValueError("error series must match the time grid")


def evaluate_trial(field, params, system: SystemDefinition, trial: int, horizon: float, seed: int,
                   controller: StepController = TRAINING_CONTROLLER, gamma: float = 0.0,
                   model_kind: str = "") -> EvalReport:
    """Integrate the model and the ground truth from one fresh initial condition."""
    u0 = system.sample_ic(ic_seed(seed, EVAL_STREAM, trial))
    grid = uniform_grid(horizon, system.dt)
    truth, _ = ground_truth(system, u0, grid)
    manifold = system.constraint_for(u0)
    args = {"params": jnp.asarray(params, dtype=float), "ref": manifold.reference}
    bound = DIVERGENCE_FACTOR * max(1.0, float(np.max(np.abs(truth.states))))
    diverged = False
    try:
        pred, stats = integrate(field, u0, 0.0, grid, controller, args=args,
                                breakpoints=system.breakpoints(0.0, horizon), max_norm=bound)
    except IntegrationError as exc:
        pred, stats, diverged = exc.trajectory, exc.stats, True
    k = len(pred)
    head = Trajectory(truth.times[:k], truth.states[:k])
    state_err = relative_error_series(head, pred)
    constraint_err = constraint_error_series(manifold, pred)
    return EvalReport(
        times=pred.times, state_error=state_err, constraint_error=constraint_err,
        stable_time=stable_time(state_err, pred.times), stats=stats, trial=trial, seed=seed,
        gamma=gamma, model_kind=model_kind, diverged=diverged,
    )


def evaluate_field(field, params, system: SystemDefinition | str, n_trials: int, horizon: float,
                   seed: int, controller: StepController = TRAINING_CONTROLLER, gamma: float = 0.0,
                   model_kind: str = "") -> list[EvalReport]:
    """Run ``n_trials`` independent trials; results are ordered by trial index
    and independent of the thread count."""
    if isinstance(system, str):
        system = get_system(system)
    run = lambda i: evaluate_trial(field, params, system, i, horizon, seed, controller, gamma, model_kind)
    workers = min(thread_count(), n_trials)
    if workers <= 1:
        return [run(i) for i in range(n_trials)]
    with concurrent.futures.ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, range(n_trials)))


def evaluate_model(checkpoint: Checkpoint | None, system: SystemDefinition | str, n_trials: int,
                   horizon: float, seed: int, gamma: float | None = None) -> list[EvalReport]:
    """Evaluate a trained checkpoint (``None``: the ground-truth oracle field).

    Test initial conditions come from a seed stream disjoint from training.
    """
    if isinstance(system, str):
        system = get_system(system)
    if checkpoint is None:
        return evaluate_field(oracle_field(system), np.zeros(0), system, n_trials, horizon, seed,
                              TRAINING_CONTROLLER, 0.0, "ground-truth")
    cfg = checkpoint.config
    if cfg.system != system.name:
        raise ValueError(f"checkpoint was trained on {cfg.system}, not {system.name}")
    g = cfg.gamma if gamma is None else gamma
    return evaluate_field(model_field(checkpoint, g), checkpoint.params.flat, system, n_trials,
                          horizon, seed, cfg.controller(), g, cfg.model_kind)


# ---------------------------------------------------------------------------
# aggregation and CSV output


def _padded(reports: Sequence[EvalReport], attr: str) -> tuple[np.ndarray, np.ndarray]:
    """(times, matrix trials x times); diverged trials are padded with inf."""
    longest = max(reports, key=lambda r: len(r.times))
    times = longest.times
    mat = np.full((len(reports), len(times)), np.inf)
    for i, r in enumerate(reports):
        values = getattr(r, attr)
        mat[i, : len(values)] = values
    return times, mat


def aggregate(reports: Sequence[EvalReport], attr: str = "state_error") -> dict[str, np.ndarray]:
    """Mean and normal-approximation 95% interval across trials per time point."""
    times, mat = _padded(reports, attr)
    n = mat.shape[0]
    with np.errstate(invalid="ignore"):
        mean = mat.mean(axis=0)
        sd = mat.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
        half = 1.96 * sd / math.sqrt(n)
    return {"t": times, "mean": mean, "ci_low": mean - half, "ci_high": mean + half,
            "median": np.median(mat, axis=0)}


def _num(x) -> str:
    return repr(float(x))


def write_trial_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "rel_err_state", "rel_err_constraint"])
        for t, s, c in zip(report.times, report.state_error, report.constraint_error):
            w.writerow([_num(t), _num(s), _num(c)])


def read_trial_csv(path: str | Path, trial: int = 0) -> EvalReport:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return EvalReport(data[:, 0], data[:, 1], data[:, 2], stable_time(data[:, 1], data[:, 0]),
                      SolverStats(), trial, 0, math.nan, "")


def write_aggregate_csv(agg: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mean", "ci_low", "ci_high"])
        for row in zip(agg["t"], agg["mean"], agg["ci_low"], agg["ci_high"]):
            w.writerow([_num(x) for x in row])


def write_stats_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "accepted", "rejected", "rhs_evals", "stable_time"])
        for r in reports:
            w.writerow([r.trial, r.stats.accepted, r.stats.rejected, r.stats.rhs_evals,
                        _num(r.stable_time)])
