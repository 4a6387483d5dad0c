"""Explicit embedded Runge-Kutta integration with adaptive step control.

Vector fields have the signature ``field(u, t, args) -> du`` and must be
written with ``jax.numpy`` so the whole adaptive loop can be compiled.
``field`` is a static jit argument: pass the same (hashable) object to
reuse compiled code, and route anything that changes between calls
(parameters, reference constants) through ``args``.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Any, Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from snde import _dop853

Field = Callable[[jax.Array, Any, Any], jax.Array]

# Output times closer than this (relative) to a breakpoint are merged with it.
_MERGE_RTOL = 1e-12
# Step sizes below this fraction of the integration span count as underflow.
_HMIN_FRACTION = 1e-13

STATUS_RUNNING = 0
STATUS_DONE = 1
STATUS_UNDERFLOW = 2
STATUS_MAX_STEPS = 3
STATUS_NORM_EXCEEDED = 4

_STATUS_TEXT = {
    STATUS_UNDERFLOW: "step size underflow (stiff or diverged)",
    STATUS_MAX_STEPS: "maximum number of steps exceeded",
    STATUS_NORM_EXCEEDED: "state norm exceeded the divergence bound",
}


@dataclasses.dataclass(frozen=True, eq=False)
class ButcherTableau:
    """Coefficients of an explicit embedded Runge-Kutta pair.

    ``b`` gives the propagated solution of order ``order``; ``b_hat`` the
    embedded solution of order ``embedded_order`` used for the error
    estimate. Instances hash by identity so they can be static jit args.
    """

    name: str
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    order: int
    embedded_order: int

    def __post_init__(self):
        s = len(self.c)
        if self.a.shape != (s, s) or len(self.b) != s or len(self.b_hat) != s:
            raise ValueError(f"{self.name}: inconsistent tableau shapes")
        if np.any(np.triu(self.a) != 0.0):
            raise ValueError(f"{self.name}: coupling matrix must be strictly lower triangular")
        if abs(self.b.sum() - 1.0) > 1e-12 or abs(self.b_hat.sum() - 1.0) > 1e-12:
            raise ValueError(f"{self.name}: weights must sum to one")
        if np.max(np.abs(self.a.sum(axis=1) - self.c)) > 1e-12:
            raise ValueError(f"{self.name}: row sums of a must equal c")
        if self.order <= self.embedded_order:
            raise ValueError(f"{self.name}: propagated order must exceed embedded order")

    @property
    def stages(self) -> int:
        return len(self.c)

    def __repr__(self):
        return f"ButcherTableau({self.name}, {self.order}({self.embedded_order}))"


def _tsit5() -> ButcherTableau:
    c = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
    a = np.zeros((7, 7))
    a[1, :1] = [0.161]
    a[2, :2] = [-0.008480655492356989, 0.335480655492357]
    a[3, :3] = [2.897153057105493, -6.359448489975075, 4.3622954328695815]
    a[4, :4] = [5.325864828439257, -11.748883564062828, 7.4955393428898365,
                -0.09249506636175525]
    a[5, :5] = [5.86145544294642, -12.92096931784711, 8.159367898576159,
                -0.071584973281401, -0.028269050394068383]
    a[6, :6] = [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
                -3.290069515436081, 2.324710524099774]
    b = a[6].copy()
    b_tilde = np.array([
        -0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995,
        -0.1447110071732629, 0.5823571654525552, -0.45808210592918697,
        0.015151515151515152,
    ])
    return ButcherTableau("Tsit5", c, a, b, b - b_tilde, order=5, embedded_order=4)


def _dop853_tableau() -> ButcherTableau:
    return ButcherTableau(
        "DOP853", _dop853.C, _dop853.A, _dop853.B, _dop853.B_HAT, order=8, embedded_order=5
    )


TSIT5 = _tsit5()
DOP853 = _dop853_tableau()


@dataclasses.dataclass(frozen=True)
class StepController:
    """Proportional step-size controller settings."""

    atol: float = 1e-6
    rtol: float = 1e-6
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    initial_step: float | None = None

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.safety < 1:
            raise ValueError("safety factor must lie in (0, 1)")
        if not self.min_factor < 1 < self.max_factor:
            raise ValueError("growth factors must bracket 1")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ValueError("initial step must be positive")


TRAINING_CONTROLLER = StepController(atol=1e-6, rtol=1e-6)
GROUND_TRUTH_CONTROLLER = StepController(atol=1e-12, rtol=1e-12)


@dataclasses.dataclass(frozen=True)
class Trajectory:
    """States sampled on a strictly increasing time grid."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or times.ndim != 1 or states.shape[0] != times.shape[0]:
            raise ValueError("states must be a (len(times), n) matrix")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(states))):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def __len__(self):
        return len(self.times)


@dataclasses.dataclass(frozen=True)
class SolverStats:
    accepted: int = 0
    rejected: int = 0
    rhs_evals: int = 0

    def __add__(self, other: SolverStats) -> SolverStats:
        return SolverStats(
            self.accepted + other.accepted,
            self.rejected + other.rejected,
            self.rhs_evals + other.rhs_evals,
        )


class IntegrationError(RuntimeError):
    """Integration stopped early; carries the partial trajectory."""

    def __init__(self, reason: str, trajectory: Trajectory, stats: SolverStats, t_reached: float):
        super().__init__(f"{reason} at t={t_reached:.6g}")
        self.reason = reason
        self.trajectory = trajectory
        self.stats = stats
        self.t_reached = t_reached


class StepFailure(ArithmeticError):
    """A Runge-Kutta stage produced a non-finite value."""


def uniform_grid(horizon: float, dt: float, t0: float = 0.0) -> np.ndarray:
    """Sample times ``t0, t0 + dt, ...`` up to ``t0 + horizon`` inclusive.

    Rounded to 12 decimals so that e.g. ``15 * 0.1`` is exactly ``1.5``.
    """
    n = int(np.floor(horizon / dt + 1e-9)) + 1
    return np.round(t0 + np.arange(n) * dt, 12)


# ---------------------------------------------------------------------------
# single step


def _stages(field, tableau, t, u, h, args, tcap):
    """Return (u_high, u_low) for one step; stage times are clipped to tcap."""
    k = []
    for i in range(tableau.stages):
        ui = u
        for j in range(i):
            aij = tableau.a[i, j]
            if aij != 0.0:
                ui = ui + (h * aij) * k[j]
        ti = jnp.minimum(t + tableau.c[i] * h, tcap)
        k.append(field(ui, ti, args))
    du_high = sum(float(bi) * ki for bi, ki in zip(tableau.b, k) if bi != 0.0)
    du_low = sum(float(bi) * ki for bi, ki in zip(tableau.b_hat, k) if bi != 0.0)
    return u + h * du_high, u + h * du_low


@functools.partial(jax.jit, static_argnames=("field", "tableau"))
def _rk_step_jit(field, tableau, t, u, h, args):
    return _stages(field, tableau, t, u, h, args, jnp.inf)


def rk_step(field: Field, t: float, u, h: float, args=None, tableau: ButcherTableau = TSIT5):
    """One step of an embedded pair.

    Returns ``(u_high, u_low)``; their difference is the local error
    estimate. Raises :class:`StepFailure` if any stage is non-finite.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    u = jnp.asarray(u, dtype=float)
    u_high, u_low = _rk_step_jit(field, tableau, float(t), u, float(h), args)
    u_high, u_low = np.asarray(u_high), np.asarray(u_low)
    if not (np.all(np.isfinite(u_high)) and np.all(np.isfinite(u_low))):
        raise StepFailure(f"non-finite stage value for step t={t}, h={h}")
    return u_high, u_low


# ---------------------------------------------------------------------------
# adaptive loop


class SolveResult(NamedTuple):
    """Raw output of :func:`solve`; arrays sized by the static limits."""

    out: jax.Array        # (K, n) states at the targets, valid up to ``n_out``
    n_out: jax.Array      # targets reached
    land: jax.Array       # (K,) accepted-step count at which each target was hit
    hs: jax.Array         # (record,) accepted step sizes, zero-padded
    ts: jax.Array         # (record,) start time of each accepted step
    caps: jax.Array       # (record,) stage-time cap of each accepted step
    accepted: jax.Array
    rejected: jax.Array
    rhs_evals: jax.Array
    status: jax.Array
    t: jax.Array


def _rms(x):
    return jnp.sqrt(jnp.mean(x * x))


def _initial_step(field, tableau, t0, u0, args, atol, rtol, tcap):
    f0 = field(u0, t0, args)
    scale = atol + rtol * jnp.abs(u0)
    d0 = _rms(u0 / scale)
    d1 = _rms(f0 / scale)
    h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / d1)
    h0 = jnp.where(jnp.isfinite(h0), h0, 1e-6)
    f1 = field(u0 + h0 * f0, jnp.minimum(t0 + h0, tcap), args)
    d2 = _rms((f1 - f0) / scale) / h0
    dmax = jnp.maximum(d1, d2)
    h1 = jnp.where(
        dmax <= 1e-15,
        jnp.maximum(1e-6, h0 * 1e-3),
        (0.01 / dmax) ** (1.0 / (tableau.order + 1)),
    )
    h = jnp.minimum(100.0 * h0, h1)
    return jnp.where(jnp.isfinite(h) & (h > 0), h, 1e-6)


def solve(field, tableau, u0, t0, targets, restart, args, controls, *, max_steps, record):
    """Traceable adaptive integration from ``t0`` through every target.

    ``controls`` is the array ``[atol, rtol, safety, min_factor, max_factor,
    initial_step (<= 0 for automatic), max_norm]``. ``restart[k]`` marks
    targets that are discontinuities of the field: steps ending there
    evaluate the left limit and the step size is re-initialized afterwards.
    When ``record > 0`` accepted steps are logged for :func:`replay`;
    more than ``record`` accepted steps ends the solve with
    ``STATUS_MAX_STEPS``.
    """
    atol, rtol, safety, fmin, fmax, h_given, max_norm = (controls[i] for i in range(7))
    u0 = jnp.asarray(u0, dtype=float)
    targets = jnp.asarray(targets, dtype=float)
    n_targets = targets.shape[0]
    span = targets[-1] - t0
    hmin = _HMIN_FRACTION * span
    exponent = -1.0 / (tableau.embedded_order + 1)
    stages = tableau.stages
    rec = max(record, 1)

    h_auto = _initial_step(field, tableau, t0, u0, args, atol, rtol, jnp.inf)
    h_start = jnp.where(h_given > 0, h_given, h_auto)
    rhs0 = jnp.where(h_given > 0, 0, 2)

    state = dict(
        t=jnp.asarray(t0, dtype=float),
        u=u0,
        h=h_start,
        k=jnp.asarray(0),
        out=jnp.zeros((n_targets,) + u0.shape),
        land=jnp.zeros(n_targets, dtype=int),
        hs=jnp.zeros(rec),
        ts=jnp.zeros(rec),
        caps=jnp.full(rec, jnp.inf),
        accepted=jnp.asarray(0),
        rejected=jnp.asarray(0),
        rhs=jnp.asarray(rhs0),
        status=jnp.asarray(STATUS_RUNNING),
    )

    def cond(s):
        return s["status"] == STATUS_RUNNING

    def body(s):
        t, u, h, k = s["t"], s["u"], s["h"], s["k"]
        target = targets[k]
        remaining = target - t
        lands = h >= remaining
        h_try = jnp.where(lands, remaining, h)
        is_break = restart[k]
        cap = jnp.where(lands & is_break, jnp.nextafter(target, -jnp.inf), jnp.inf)
        u_high, u_low = _stages(field, tableau, t, u, h_try, args, cap)

        scale = atol + rtol * jnp.maximum(jnp.abs(u), jnp.abs(u_high))
        err = _rms((u_high - u_low) / scale)
        finite = jnp.isfinite(err) & jnp.all(jnp.isfinite(u_high))
        err = jnp.where(finite, err, jnp.inf)
        accept = err <= 1.0

        factor = jnp.clip(safety * err**exponent, fmin, fmax)
        factor = jnp.where(accept, factor, jnp.minimum(factor, 1.0))
        h_next = h_try * factor
        # a step shortened to hit a target should not shrink the next one
        h_next = jnp.where(accept & lands, jnp.maximum(h_next, h), h_next)

        t_new = jnp.where(lands, target, t + h_try)
        t_new = jnp.where(accept, t_new, t)
        u_new = jnp.where(accept, u_high, u)
        n_acc = s["accepted"] + accept.astype(int)
        hit = accept & lands

        idx = s["accepted"]
        hs = jnp.where(accept, s["hs"].at[idx].set(h_try, mode="drop"), s["hs"])
        ts = jnp.where(accept, s["ts"].at[idx].set(t, mode="drop"), s["ts"])
        caps = jnp.where(accept, s["caps"].at[idx].set(cap, mode="drop"), s["caps"])

        out = jnp.where(hit, s["out"].at[k].set(u_high), s["out"])
        land = jnp.where(hit, s["land"].at[k].set(n_acc), s["land"])
        k_new = k + hit.astype(int)
        done = k_new >= n_targets

        do_restart = hit & is_break & ~done
        h_next = lax.cond(
            do_restart,
            lambda: _initial_step(field, tableau, t_new, u_new, args, atol, rtol, jnp.inf),
            lambda: h_next,
        )
        rhs = s["rhs"] + stages + 2 * do_restart.astype(int)
        n_rej = s["rejected"] + (~accept).astype(int)

        status = jnp.where(done, STATUS_DONE, STATUS_RUNNING)
        running = status == STATUS_RUNNING
        status = jnp.where(running & (h_next < hmin), STATUS_UNDERFLOW, status)
        blown = accept & (jnp.max(jnp.abs(u_new)) > max_norm)
        status = jnp.where(running & blown, STATUS_NORM_EXCEEDED, status)
        over = (n_acc + n_rej >= max_steps)
        if record > 0:
            over = over | (n_acc >= record)
        status = jnp.where((status == STATUS_RUNNING) & over, STATUS_MAX_STEPS, status)

        return dict(
            t=t_new, u=u_new, h=h_next, k=jnp.minimum(k_new, n_targets - 1),
            out=out, land=land, hs=hs, ts=ts, caps=caps,
            accepted=n_acc, rejected=n_rej, rhs=rhs, status=status,
        )

    s = lax.while_loop(cond, body, state)
    n_out = jnp.where(s["status"] == STATUS_DONE, n_targets, s["k"])
    return SolveResult(
        out=s["out"], n_out=n_out, land=s["land"], hs=s["hs"], ts=s["ts"], caps=s["caps"],
        accepted=s["accepted"], rejected=s["rejected"], rhs_evals=s["rhs"],
        status=s["status"], t=s["t"],
    )


_solve_jit = jax.jit(solve, static_argnames=("field", "tableau", "max_steps", "record"))


def replay(field, tableau, u0, result: SolveResult, args):
    """Re-run the accepted steps of ``result`` as a differentiable function of
    ``u0`` and ``args``; step sizes and times are constants.

    Returns the states at the targets, shape ``(K, n)``.
    """
    u0 = jnp.asarray(u0, dtype=float)
    hs = lax.stop_gradient(result.hs)
    ts = lax.stop_gradient(result.ts)
    caps = lax.stop_gradient(result.caps)

    def step(u, xs):
        h, t, cap = xs
        u_next = lax.cond(
            h > 0,
            lambda: _stages(field, tableau, t, u, h, args, cap)[0],
            lambda: u,
        )
        return u_next, u_next

    _, states = lax.scan(step, u0, (hs, ts, caps))
    states = jnp.concatenate([u0[None], states], axis=0)
    return states[result.land]


def controls_array(controller: StepController, max_norm: float = np.inf) -> np.ndarray:
    h0 = controller.initial_step if controller.initial_step is not None else 0.0
    return np.array([
        controller.atol, controller.rtol, controller.safety,
        controller.min_factor, controller.max_factor, h0, max_norm,
    ])


def merge_breakpoints(targets: np.ndarray, breakpoints: Sequence[float], t0: float):
    """Insert field discontinuities into the target list.

    Returns ``(merged_targets, is_output, restart)``.
    """
    targets = np.asarray(targets, dtype=float)
    merged = {float(t): [True, False] for t in targets}
    t_end = targets[-1]
    for b in sorted(float(b) for b in breakpoints):
        if b <= t0 or b >= t_end:
            if b == t_end:
                merged[t_end][1] = True
            continue
        near = targets[np.abs(targets - b) <= _MERGE_RTOL * max(1.0, abs(b))]
        if near.size:
            merged[float(near[0])][1] = True
        else:
            merged.setdefault(b, [False, True])[1] = True
    times = np.array(sorted(merged))
    is_output = np.array([merged[t][0] for t in times])
    restart = np.array([merged[t][1] for t in times])
    return times, is_output, restart


def integrate(
    field: Field,
    u0,
    t0: float,
    output_times,
    controller: StepController | None = None,
    *,
    args=None,
    tableau: ButcherTableau = TSIT5,
    breakpoints: Sequence[float] = (),
    max_steps: int = 5_000_000,
    max_norm: float = np.inf,
) -> tuple[Trajectory, SolverStats]:
    """Integrate ``field`` and sample the solution exactly at ``output_times``.

    Steps are shortened to land on every output time (no dense output).
    ``breakpoints`` are times where the field is discontinuous; the solver
    lands on them and restarts.

    Raises
    ------
    IntegrationError
        On step-size underflow, too many steps, or when ``max(|u|)``
        exceeds ``max_norm``. The exception carries the trajectory up to
        the last output time reached.
    """
    controller = controller or TRAINING_CONTROLLER
    times = np.asarray(output_times, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("output_times must be a non-empty vector")
    if np.any(np.diff(times) <= 0):
        raise ValueError("output_times must be strictly increasing")
    if times[0] < t0:
        raise ValueError("first output time precedes t0")
    if not np.all(np.isfinite(u0)):
        raise ValueError("initial state is not finite")

    include_start = times[0] == t0
    targets = times[1:] if include_start else times
    if targets.size == 0:
        return Trajectory(times[:1], u0[None, :]), SolverStats()

    merged, is_output, restart = merge_breakpoints(targets, breakpoints, t0)
    res = _solve_jit(
        field, tableau, u0, float(t0), merged, restart, args,
        controls_array(controller, max_norm), max_steps=max_steps, record=0,
    )
    n_out = int(res.n_out)
    out = np.asarray(res.out)[:n_out]
    keep = is_output[:n_out]
    states = out[keep]
    if include_start:
        states = np.concatenate([u0[None, :], states], axis=0)
    n_rows = states.shape[0]
    stats = SolverStats(int(res.accepted), int(res.rejected), int(res.rhs_evals))
    status = int(res.status)
    if status != STATUS_DONE:
        partial = Trajectory(times[:n_rows], states.reshape(n_rows, -1))
        raise IntegrationError(_STATUS_TEXT[status], partial, stats, float(res.t))
    # exact landing: the returned grid is the request
    return Trajectory(times, states), stats
