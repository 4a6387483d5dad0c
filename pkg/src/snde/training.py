"""Datasets, losses, optimizer and the training loop."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from snde import num_core
from snde.neural_field import FieldSpec, MlpParams, assemble_field, layer_shapes, mlp_init
from snde.num_core import (
    DOP853,
    GROUND_TRUTH_CONTROLLER,
    TSIT5,
    SolverStats,
    StepController,
    Trajectory,
    integrate,
    uniform_grid,
)
from snde.stabilization import StabilizedField
from snde.systems import SystemDefinition, get_system

log = logging.getLogger(__name__)

MODEL_KINDS = ("node", "so-node", "hybrid")
_FIELD_KIND = {"node": "neural", "so-node": "second-order-neural", "hybrid": "hybrid"}

# Loss reported for chunks whose solve failed.
DIVERGED_LOSS = 1e10

# Table 4 of the reference experiments: gamma, width, max / min learning rate.
SYSTEM_DEFAULTS = {
    "two_body": dict(gamma=8.0, hidden_width=128, lr_max=1e-3, lr_min=1e-5),
    "rigid_body": dict(gamma=32.0, hidden_width=64, lr_max=1e-4, lr_min=1e-5),
    "dc_converter": dict(gamma=8.0, hidden_width=64, lr_max=5e-3, lr_min=1e-5),
    "robot_arm": dict(gamma=16.0, hidden_width=128, lr_max=1e-3, lr_min=1e-5),
    "double_pendulum": dict(gamma=16.0, hidden_width=128, lr_max=1e-2, lr_min=1e-4),
    "double_pendulum_hybrid": dict(gamma=16.0, hidden_width=128, lr_max=1e-2, lr_min=1e-4,
                                   n_trajectories=1),
}


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    system: str = "rigid_body"
    model_kind: str = "node"
    gamma: float = 32.0
    hidden_layers: int = 2
    hidden_width: int = 64
    epochs: int = 1000
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 1e-6
    seed: int = 0
    atol: float = 1e-6
    rtol: float = 1e-6
    n_trajectories: int = 40
    chunk_len: int = 3
    split_ratio: float = 0.75
    stabilize_from_epoch: int = 0
    max_chunk_steps: int = 256

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError("need lr_max >= lr_min > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.chunk_len < 2:
            raise ValueError("chunk_len must be >= 2")
        if self.hidden_layers < 0 or self.hidden_width < 1:
            raise ValueError("invalid network size")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if not 0 < self.split_ratio <= 1:
            raise ValueError("split_ratio must lie in (0, 1]")
        if self.weight_decay < 0 or self.atol <= 0 or self.rtol <= 0:
            raise ValueError("weight_decay must be >= 0 and tolerances > 0")

    @classmethod
    def for_system(cls, system: str, **overrides) -> TrainingConfig:
        """Defaults for ``system`` (model kind and Table 4 values) plus overrides."""
        defn = get_system(system)
        values = dict(system=system, model_kind=defn.model_kind, **SYSTEM_DEFAULTS[system])
        values.update(overrides)
        return cls(**values)

    def controller(self) -> StepController:
        return StepController(atol=self.atol, rtol=self.rtol)


# ---------------------------------------------------------------------------
# data


@dataclasses.dataclass(frozen=True)
class TrajectorySet:
    system: str
    seed: int
    trajectories: tuple[Trajectory, ...]
    references: np.ndarray      # (n_traj, m)
    stats: tuple[SolverStats, ...]

    def __len__(self):
        return len(self.trajectories)


def ic_seed(seed: int, stream: int, index: int) -> np.random.SeedSequence:
    """Independent RNG stream per (run seed, purpose, item index)."""
    return np.random.SeedSequence([int(seed), int(stream), int(index)])


TRAIN_STREAM, EVAL_STREAM, MEASURE_STREAM = 0, 1, 2


def ground_truth(system: SystemDefinition, u0, times, t0: float = 0.0) -> tuple[Trajectory, SolverStats]:
    """High-accuracy reference solution (8th-order pair, tolerances 1e-12)."""
    times = np.asarray(times, dtype=float)
    return integrate(
        system.field, u0, t0, times, GROUND_TRUTH_CONTROLLER, tableau=DOP853,
        breakpoints=system.breakpoints(t0, float(times[-1])),
    )


def generate_dataset(system: SystemDefinition | str, n_traj: int, seed: int,
                     horizon: float | None = None) -> TrajectorySet:
    """``n_traj`` ground-truth trajectories on the system's uniform grid."""
    if isinstance(system, str):
        system = get_system(system)
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    trajs, refs, stats = [], [], []
    for i in range(n_traj):
        u0 = system.sample_ic(ic_seed(seed, TRAIN_STREAM, i))
        grid = uniform_grid(horizon if horizon is not None else system.horizon_for(u0), system.dt)
        try:
            traj, st = ground_truth(system, u0, grid)
        except num_core.IntegrationError as exc:
            raise RuntimeError(f"ground truth for trajectory {i} failed: {exc}") from exc
        trajs.append(traj)
        refs.append(system.constraint_for(u0).reference)
        stats.append(st)
    return TrajectorySet(system.name, seed, tuple(trajs), np.array(refs), tuple(stats))


@dataclasses.dataclass(frozen=True)
class ChunkDataset:
    """Fixed-length windows of sample points, tagged train/validation."""

    times: np.ndarray       # (N, L)
    states: np.ndarray      # (N, L, n)
    refs: np.ndarray        # (N, m)
    source: np.ndarray      # (N, 2): trajectory index, first sample index
    train: np.ndarray       # (N,) bool

    def __len__(self):
        return len(self.times)

    def subset(self, train: bool) -> ChunkDataset:
        mask = self.train == train
        return ChunkDataset(self.times[mask], self.states[mask], self.refs[mask],
                            self.source[mask], self.train[mask])


def chunk_and_split(trajectories: TrajectorySet, chunk_len: int = 3, ratio: float = 0.75,
                    seed: int = 0) -> ChunkDataset:
    """Consecutive disjoint windows of ``chunk_len`` points, shuffled and split.

    Tail points that do not fill a window are dropped.
    """
    times, states, refs, source = [], [], [], []
    for i, traj in enumerate(trajectories.trajectories):
        if len(traj) < chunk_len:
            raise ValueError(f"trajectory {i} has {len(traj)} points, fewer than chunk_len={chunk_len}")
        for start in range(0, len(traj) - chunk_len + 1, chunk_len):
            times.append(traj.times[start:start + chunk_len])
            states.append(traj.states[start:start + chunk_len])
            refs.append(trajectories.references[i])
            source.append((i, start))
    perm = np.random.default_rng(seed).permutation(len(times))
    n_train = int(round(ratio * len(times)))
    train = np.zeros(len(times), dtype=bool)
    train[:n_train] = True
    return ChunkDataset(
        np.array(times)[perm], np.array(states)[perm], np.array(refs)[perm],
        np.array(source)[perm], train,
    )


def chunk_restarts(system: SystemDefinition, times: np.ndarray) -> np.ndarray:
    """(N, L-1) flags for chunk targets that coincide with field discontinuities."""
    restart = np.zeros((times.shape[0], times.shape[1] - 1), dtype=bool)
    if system.toggle_period is None:
        return restart
    for c, row in enumerate(times):
        for b in system.breakpoints(row[0], row[-1]):
            hit = np.flatnonzero(np.abs(row[1:] - b) <= 1e-9)
            if hit.size == 0:
                raise ValueError(f"discontinuity at t={b} falls between samples {row}")
            restart[c, hit[0]] = True
    return restart


# ---------------------------------------------------------------------------
# models


def model_spec(system: SystemDefinition, kind: str, hidden_width: int, hidden_layers: int) -> FieldSpec:
    n_phys = system.n - int(system.lifted_time)
    n_in = n_phys + system.aux_width
    if kind == "so-node":
        n_out = n_phys // 2
    elif kind == "hybrid":
        if not system.hybrid_slots:
            raise ValueError(f"{system.name} has no hybrid variant")
        n_out = len(system.hybrid_slots)
    else:
        n_out = n_phys
    return FieldSpec(
        kind=_FIELD_KIND[kind],
        n=system.n,
        known=system.field if kind == "hybrid" else None,
        shapes=layer_shapes(n_in, n_out, hidden_width, hidden_layers),
        aux=system.aux,
        aux_width=system.aux_width,
        lifted_time=system.lifted_time,
        learned_slots=system.hybrid_slots if kind == "hybrid" else (),
    )


def build_field(system: SystemDefinition, kind: str, hidden_width: int, hidden_layers: int,
                gamma: float):
    """Model vector field; wrapped in the stabilization when ``gamma > 0``."""
    base = assemble_field(model_spec(system, kind, hidden_width, hidden_layers))
    if gamma > 0:
        return StabilizedField(base, system.manifold, float(gamma))
    return base


def oracle_field(system: SystemDefinition):
    """The ground truth wrapped as a model field (ignores ``params``)."""
    return assemble_field(FieldSpec("ground-truth", system.n, known=system.field))


# ---------------------------------------------------------------------------
# loss


class Chunk(NamedTuple):
    times: np.ndarray
    states: np.ndarray
    ref: np.ndarray
    restart: np.ndarray | None = None


def _chunk_solve(field, record, params, times, states, ref, restart, controls):
    args = {"params": params, "ref": ref}
    return num_core.solve(
        field, TSIT5, states[0], times[0], times[1:], restart, args, controls,
        max_steps=100 * max(record, 1), record=record,
    )


def _chunk_value(field, record, params, times, states, ref, restart, controls):
    res = _chunk_solve(field, record, params, times, states, ref, restart, controls)
    loss = jnp.sum((res.out - states[1:]) ** 2)
    ok = (res.status == num_core.STATUS_DONE) & jnp.isfinite(loss)
    return jnp.where(ok, loss, DIVERGED_LOSS), ok


def _replay_tiers(record: int) -> list[int]:
    tiers = [t for t in (8, 32) if t < record]
    return tiers + [record]


def _chunk_value_and_grad(field, record, params, times, states, ref, restart, controls):
    res = _chunk_solve(field, record, lax.stop_gradient(params), times, states, ref, restart, controls)

    # Replay only as many recorded steps as were taken: the scan over the
    # zero-padded tail costs as much as real steps under reverse mode.
    def branch(length):
        short = res._replace(hs=res.hs[:length], ts=res.ts[:length], caps=res.caps[:length])

        def loss_fn(p):
            pred = num_core.replay(field, TSIT5, states[0], short, {"params": p, "ref": ref})
            return jnp.sum((pred - states[1:]) ** 2)

        return lambda: jax.value_and_grad(loss_fn)(params)

    tiers = _replay_tiers(record)
    index = jnp.searchsorted(jnp.asarray(tiers), res.accepted)
    index = jnp.minimum(index, len(tiers) - 1)
    loss, grad = lax.switch(index, [branch(t) for t in tiers])
    ok = (res.status == num_core.STATUS_DONE) & jnp.isfinite(loss) & jnp.all(jnp.isfinite(grad))
    return jnp.where(ok, loss, DIVERGED_LOSS), grad, ok


_chunk_value_jit = jax.jit(_chunk_value, static_argnames=("field", "record"))
_chunk_value_and_grad_jit = jax.jit(_chunk_value_and_grad, static_argnames=("field", "record"))


def _prepare_chunk(chunk: Chunk):
    times = np.asarray(chunk.times, dtype=float)
    restart = chunk.restart
    if restart is None:
        restart = np.zeros(len(times) - 1, dtype=bool)
    return times, np.asarray(chunk.states, dtype=float), np.atleast_1d(np.asarray(chunk.ref, dtype=float)), restart


def chunk_loss(field, chunk: Chunk, params=None, controller: StepController | None = None,
               max_steps: int = 256) -> tuple[float, bool]:
    """Squared error of the prediction at the chunk's points after the first.

    Returns ``(loss, ok)``; a failed solve gives ``(DIVERGED_LOSS, False)``.
    """
    times, states, ref, restart = _prepare_chunk(chunk)
    controls = num_core.controls_array(controller or num_core.TRAINING_CONTROLLER)
    params = jnp.zeros(0) if params is None else jnp.asarray(params, dtype=float)
    loss, ok = _chunk_value_jit(field, max_steps, params, times, states, ref, restart, controls)
    return float(loss), bool(ok)


def chunk_loss_and_grad(field, chunk: Chunk, params, controller: StepController | None = None,
                        max_steps: int = 256):
    """Loss and its parameter gradient through the recorded solver steps."""
    times, states, ref, restart = _prepare_chunk(chunk)
    controls = num_core.controls_array(controller or num_core.TRAINING_CONTROLLER)
    loss, grad, ok = _chunk_value_and_grad_jit(
        field, max_steps, jnp.asarray(params, dtype=float), times, states, ref, restart, controls
    )
    return float(loss), np.asarray(grad), bool(ok)


def frozen_step_loss(field, chunk: Chunk, params, controller: StepController | None = None,
                     max_steps: int = 256) -> Callable:
    """Chunk loss as a function of the parameters with the solver steps frozen
    at those chosen for ``params``. This is the discrete computation that
    :func:`chunk_loss_and_grad` differentiates."""
    times, states, ref, restart = _prepare_chunk(chunk)
    controls = num_core.controls_array(controller or num_core.TRAINING_CONTROLLER)
    args = {"params": jnp.asarray(params, dtype=float), "ref": ref}
    res = num_core._solve_jit(field, TSIT5, states[0], times[0], times[1:], restart, args,
                              controls, max_steps=100 * max_steps, record=max_steps)
    if int(res.status) != num_core.STATUS_DONE:
        raise num_core.IntegrationError("chunk solve failed", None, SolverStats(), float(res.t))

    @jax.jit
    def loss(p):
        pred = num_core.replay(field, TSIT5, states[0], res, {"params": p, "ref": ref})
        return jnp.sum((pred - states[1:]) ** 2)

    return loss


# ---------------------------------------------------------------------------
# optimizer


class AdamState(NamedTuple):
    m: jax.Array
    v: jax.Array
    step: jax.Array


def adam_init(params) -> AdamState:
    z = jnp.zeros_like(jnp.asarray(params, dtype=float))
    return AdamState(z, z, jnp.asarray(0))


def adamw_step(params, grads, state: AdamState, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update: decoupled decay ``w -= lr * wd * w`` then bias-corrected Adam.

    Works on numpy or jax arrays; raises on non-finite gradients when
    called eagerly.
    """
    if not isinstance(grads, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(grads))):
        raise FloatingPointError("non-finite gradient")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    params = params - lr * wd * params
    params = params - lr * m_hat / (jnp.sqrt(v_hat) + eps)
    return params, AdamState(m, v, step)


def lr_at_epoch(k: int, epochs: int, lr_max: float, lr_min: float) -> float:
    """Exponential decay from ``lr_max`` at epoch 0 to ``lr_min`` at the last epoch."""
    if not 0 <= k < epochs:
        raise ValueError("epoch index out of range")
    if epochs == 1:
        return lr_max
    return lr_max * (lr_min / lr_max) ** (k / (epochs - 1))


# ---------------------------------------------------------------------------
# training loop


def _epoch(field, record, params, opt, times, states, refs, restarts, order, lr, wd, controls):
    def one(carry, i):
        p, o = carry
        loss, grad, ok = _chunk_value_and_grad(
            field, record, p, times[i], states[i], refs[i], restarts[i], controls
        )
        grad = jnp.where(ok, grad, 0.0)
        p_new, o_new = adamw_step(p, grad, o, lr, wd)
        p = jnp.where(ok, p_new, p)
        o = jax.tree_util.tree_map(lambda a, b: jnp.where(ok, a, b), o_new, o)
        return (p, o), (loss, ok)

    (params, opt), (losses, oks) = lax.scan(one, (params, opt), order)
    return params, opt, losses, oks


def _validate(field, record, params, times, states, refs, restarts, controls):
    def one(i):
        return _chunk_value(field, record, params, times[i], states[i], refs[i], restarts[i], controls)

    return lax.map(one, jnp.arange(times.shape[0]))


_epoch_jit = jax.jit(_epoch, static_argnames=("field", "record"))
_validate_jit = jax.jit(_validate, static_argnames=("field", "record"))


@dataclasses.dataclass
class Checkpoint:
    config: TrainingConfig
    params: MlpParams
    epoch: int
    history: list[tuple[int, float, float, int]]   # epoch, train loss, val loss, diverged

    def __post_init__(self):
        from snde.neural_field import n_params
        expected = layer_shapes(1, 1, self.config.hidden_width, self.config.hidden_layers)
        if len(self.params.shapes) != len(expected):
            raise ValueError("parameter layers do not match the config")
        if self.params.flat.size != n_params(self.params.shapes):
            raise ValueError("parameter count inconsistent with layer shapes")
        if len(self.history) != self.epoch:
            raise ValueError("loss history length must equal completed epochs")


class TrainingDiverged(RuntimeError):
    pass


def _dataset_arrays(system, chunks: ChunkDataset):
    restarts = chunk_restarts(system, chunks.times)
    return (jnp.asarray(chunks.times), jnp.asarray(chunks.states),
            jnp.asarray(chunks.refs), jnp.asarray(restarts))


def train(config: TrainingConfig, dataset: TrajectorySet | None = None,
          callback: Callable[[int, float, float, int], None] | None = None) -> Checkpoint:
    """Train a model per ``config``; deterministic for a fixed seed.

    One optimizer step per training chunk, chunk order reshuffled every
    epoch. Chunks whose solve fails are skipped and counted; more than
    half failing in one epoch aborts with :class:`TrainingDiverged`.
    """
    system = get_system(config.system)
    if dataset is None:
        dataset = generate_dataset(system, config.n_trajectories, config.seed)
    elif dataset.system != system.name:
        raise ValueError(f"dataset is for {dataset.system}, config for {system.name}")
    chunks = chunk_and_split(dataset, config.chunk_len, config.split_ratio, config.seed)
    train_arr = _dataset_arrays(system, chunks.subset(True))
    val_set = chunks.subset(False)
    val_arr = _dataset_arrays(system, val_set) if len(val_set) else None
    n_train = len(train_arr[0])

    spec = model_spec(system, config.model_kind, config.hidden_width, config.hidden_layers)
    init = mlp_init(spec.shapes, config.seed)
    plain = build_field(system, config.model_kind, config.hidden_width, config.hidden_layers, 0.0)
    stabilized = build_field(system, config.model_kind, config.hidden_width,
                             config.hidden_layers, config.gamma)
    controls = jnp.asarray(num_core.controls_array(config.controller()))
    rng = np.random.default_rng(ic_seed(config.seed, TRAIN_STREAM, 10**6))
    record = config.max_chunk_steps

    params = jnp.asarray(init.flat)
    opt = adam_init(params)
    history = []
    for epoch in range(config.epochs):
        field = stabilized if epoch >= config.stabilize_from_epoch else plain
        lr = lr_at_epoch(epoch, config.epochs, config.lr_max, config.lr_min)
        order = jnp.asarray(rng.permutation(n_train))
        params, opt, losses, oks = _epoch_jit(
            field, record, params, opt, *train_arr, order, lr, config.weight_decay, controls
        )
        oks = np.asarray(oks)
        n_div = int(np.sum(~oks))
        if n_div > 0.5 * n_train:
            raise TrainingDiverged(
                f"epoch {epoch}: {n_div} of {n_train} training chunks failed to integrate"
            )
        losses = np.asarray(losses)
        train_loss = float(np.mean(losses[oks])) if oks.any() else math.nan
        if val_arr is not None:
            vl, vok = (np.asarray(a) for a in _validate_jit(field, record, params, *val_arr, controls))
            val_loss = float(np.mean(vl[vok])) if vok.any() else math.nan
            n_div += int(np.sum(~vok))
        else:
            val_loss = math.nan
        history.append((epoch, train_loss, val_loss, n_div))
        if callback is not None:
            callback(epoch, train_loss, val_loss, n_div)
        log.debug("epoch %d lr %.3g train %.6g val %.6g diverged %d",
                  epoch, lr, train_loss, val_loss, n_div)
    return Checkpoint(config, MlpParams(np.asarray(params), spec.shapes), config.epochs, history)


def model_field(checkpoint: Checkpoint, gamma: float | None = None):
    """The checkpoint's vector field, stabilized with its own or an explicit gamma."""
    cfg = checkpoint.config
    system = get_system(cfg.system)
    return build_field(system, cfg.model_kind, cfg.hidden_width, cfg.hidden_layers,
                       cfg.gamma if gamma is None else gamma)


# ---------------------------------------------------------------------------
# checkpoint files


def config_items(config) -> list[tuple[str, str]]:
    return [(f.name, _fmt(getattr(config, f.name))) for f in dataclasses.fields(config)]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _coerce(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def training_config_from_items(items: dict[str, str]) -> TrainingConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainingConfig)}
    unknown = set(items) - set(fields)
    if unknown:
        raise ValueError(f"unknown training keys: {sorted(unknown)}")
    return TrainingConfig(**{k: _coerce(fields[k], v) for k, v in items.items()})


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Text checkpoint; parameters are written with 17 significant digits."""
    lines = ["# snde checkpoint", "[config]"]
    lines += [f"{k}={v}" for k, v in config_items(checkpoint.config)]
    lines += [f"epoch={checkpoint.epoch}", "[layers]"]
    lines += [f"{i},{o}" for i, o in checkpoint.params.shapes]
    lines.append("[params]")
    lines += [format(float(x), ".17g") for x in checkpoint.params.flat]
    lines += ["[history]", "epoch,train_loss,val_loss,diverged"]
    lines += [f"{e},{format(tl, '.17g')},{format(vl, '.17g')},{d}" for e, tl, vl, d in checkpoint.history]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise ValueError(f"{path}:{lineno}: content before first section")
        else:
            sections[current].append(line)
    for name in ("config", "layers", "params", "history"):
        if name not in sections:
            raise ValueError(f"{path}: missing [{name}] section")
    items = dict(line.split("=", 1) for line in sections["config"])
    epoch = int(items.pop("epoch"))
    config = training_config_from_items(items)
    shapes = tuple(tuple(int(x) for x in line.split(",")) for line in sections["layers"])
    flat = np.array([float(x) for x in sections["params"]])
    history = []
    for line in sections["history"][1:]:
        e, tl, vl, d = line.split(",")
        history.append((int(e), float(tl), float(vl), int(d)))
    return Checkpoint(config, MlpParams(flat, shapes), epoch, history)
