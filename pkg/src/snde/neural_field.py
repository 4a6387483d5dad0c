"""ReLU MLPs and the vector fields built from them.

Parameters live in one flat vector; each layer stores its weight matrix
(``out x in``, row-major) followed by its bias.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import jax.numpy as jnp
import numpy as np

KINDS = ("ground-truth", "neural", "second-order-neural", "hybrid")

Shapes = tuple[tuple[int, int], ...]


def _check_shapes(shapes) -> Shapes:
    shapes = tuple((int(i), int(o)) for i, o in shapes)
    if not shapes:
        raise ValueError("need at least one layer")
    for (_, out), (nxt, _) in zip(shapes, shapes[1:]):
        if out != nxt:
            raise ValueError(f"layer shapes {shapes} are not chain-compatible")
    if any(i <= 0 or o <= 0 for i, o in shapes):
        raise ValueError("layer widths must be positive")
    return shapes


def n_params(shapes) -> int:
    return sum(i * o + o for i, o in shapes)


def layer_shapes(n_in: int, n_out: int, width: int, hidden_layers: int) -> Shapes:
    widths = [n_in] + [width] * hidden_layers + [n_out]
    return tuple(zip(widths[:-1], widths[1:]))


@dataclasses.dataclass(frozen=True)
class MlpParams:
    flat: np.ndarray
    shapes: Shapes

    def __post_init__(self):
        shapes = _check_shapes(self.shapes)
        flat = np.asarray(self.flat, dtype=float)
        if flat.shape != (n_params(shapes),):
            raise ValueError(f"expected {n_params(shapes)} parameters, got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "shapes", shapes)


def mlp_init(shapes: Sequence[tuple[int, int]], seed: int) -> MlpParams:
    """Glorot-uniform weights and zero biases."""
    shapes = _check_shapes(shapes)
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in shapes:
        limit = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-limit, limit, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return MlpParams(np.concatenate(chunks), shapes)


def mlp_apply(shapes: Shapes, flat, x):
    """Traceable forward pass: affine + ReLU on hidden layers, affine output."""
    offset = 0
    for layer, (n_in, n_out) in enumerate(shapes):
        W = flat[offset:offset + n_in * n_out].reshape(n_out, n_in)
        offset += n_in * n_out
        b = flat[offset:offset + n_out]
        offset += n_out
        x = W @ x + b
        if layer < len(shapes) - 1:
            # relu'(0) = 0
            x = jnp.maximum(x, 0.0)
    return x


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (params.shapes[0][0],):
        raise ValueError(f"input has shape {x.shape}, network expects ({params.shapes[0][0]},)")
    return np.asarray(mlp_apply(params.shapes, jnp.asarray(params.flat), jnp.asarray(x)))


@dataclasses.dataclass(frozen=True)
class FieldSpec:
    """Description of a vector field ``(u, t, args) -> du``.

    kind
        ``ground-truth``: ``known`` alone. ``neural``: the network maps
        (state, aux) to the derivative. ``second-order-neural``: state is
        ``(q, v)`` and the network returns only the acceleration.
        ``hybrid``: ``known`` with the ``learned_slots`` components
        replaced by network outputs.
    lifted_time
        The last state coordinate is time with derivative 1; it is not fed
        to the network.
    aux
        Extra network inputs ``aux(u, t)`` of width ``aux_width`` (control
        signals, path velocities).
    learned
        Replacement for the MLP, ``learned(flat, x)``; used in tests.
    """

    kind: str
    n: int
    known: Callable | None = None
    shapes: Shapes | None = None
    aux: Callable | None = None
    aux_width: int = 0
    lifted_time: bool = False
    learned_slots: tuple[int, ...] = ()
    learned: Callable | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.shapes is not None:
            object.__setattr__(self, "shapes", _check_shapes(self.shapes))
        if self.kind == "ground-truth":
            if self.known is None:
                raise ValueError("ground-truth field needs a known part")
            return
        if self.shapes is None and self.learned is None:
            raise ValueError(f"{self.kind} field needs a network")
        if (self.aux is None) != (self.aux_width == 0):
            raise ValueError("aux map and aux_width must be given together")
        n_phys = self.n - int(self.lifted_time)
        if self.kind == "second-order-neural":
            if n_phys % 2:
                raise ValueError("second-order fields need an even state dimension")
            expected_out = n_phys // 2
        elif self.kind == "hybrid":
            if self.known is None or not self.learned_slots:
                raise ValueError("hybrid field needs a known part and learned slots")
            expected_out = len(self.learned_slots)
        else:
            expected_out = n_phys
        if self.shapes is not None:
            if self.shapes[-1][1] != expected_out:
                raise ValueError(
                    f"network output width {self.shapes[-1][1]} != required {expected_out}"
                )
            if self.shapes[0][0] != n_phys + self.aux_width:
                raise ValueError(
                    f"network input width {self.shapes[0][0]} != state {n_phys} + aux {self.aux_width}"
                )

    @property
    def n_physical(self) -> int:
        return self.n - int(self.lifted_time)


@dataclasses.dataclass(frozen=True)
class AssembledField:
    """Callable vector field for a :class:`FieldSpec`; reads ``args["params"]``."""

    spec: FieldSpec

    def _net(self, args, x):
        spec = self.spec
        if spec.learned is not None:
            return spec.learned(args["params"] if args else None, x)
        return mlp_apply(spec.shapes, args["params"], x)

    def _inputs(self, u, t):
        x = u[: self.spec.n_physical]
        if self.spec.aux is not None:
            x = jnp.concatenate([x, jnp.atleast_1d(self.spec.aux(u, t))])
        return x

    def __call__(self, u, t, args):
        spec = self.spec
        if spec.kind == "ground-truth":
            return spec.known(u, t, args)
        if spec.kind == "hybrid":
            du = spec.known(u, t, args)
            return du.at[jnp.asarray(spec.learned_slots)].set(self._net(args, self._inputs(u, t)))
        out = self._net(args, self._inputs(u, t))
        if spec.kind == "second-order-neural":
            k = spec.n_physical // 2
            out = jnp.concatenate([u[k: 2 * k], out])
        if spec.lifted_time:
            out = jnp.concatenate([out, jnp.ones(1, dtype=out.dtype)])
        return out


def assemble_field(spec: FieldSpec) -> AssembledField:
    """Validate ``spec`` against its aux map and return the callable field."""
    if spec.aux is not None:
        probe = np.atleast_1d(np.asarray(spec.aux(jnp.zeros(spec.n), 0.0)))
        if probe.shape != (spec.aux_width,):
            raise ValueError(
                f"aux map returned width {probe.shape[0]}, expected {spec.aux_width}"
            )
    return AssembledField(spec)
