"""Benchmark systems: ground-truth dynamics, constraints and initial conditions."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Mapping

import jax.numpy as jnp
import numpy as np

from snde.stabilization import ConstraintManifold


class FieldError(ArithmeticError):
    """The ground-truth field is undefined at the requested state."""


@dataclasses.dataclass(frozen=True, eq=False)
class SystemDefinition:
    """Everything needed to simulate one benchmark and learn it.

    ``field`` is the ground truth ``(u, t, args) -> du``. ``manifold`` has
    no reference; use :meth:`constraint_for` to capture one from an
    initial state. ``model_kind`` is the default learned model
    (``node``, ``so-node`` or ``hybrid``).
    """

    name: str
    n: int
    field: Callable
    manifold: ConstraintManifold
    sampler: Callable[[np.random.Generator], np.ndarray]
    dt: float
    horizon: float | None
    params: Mapping[str, float]
    model_kind: str = "node"
    aux: Callable | None = None
    aux_width: int = 0
    lifted_time: bool = False
    angular: tuple[bool, ...] = ()
    toggle_period: float | None = None
    hybrid_slots: tuple[int, ...] = ()
    period: Callable[[np.ndarray], float] | None = None

    def sample_ic(self, seed) -> np.ndarray:
        """Initial state drawn from ``numpy.random.default_rng(seed)``."""
        return np.asarray(self.sampler(np.random.default_rng(seed)), dtype=float)

    def constraint_for(self, u0, t0: float = 0.0) -> ConstraintManifold:
        return self.manifold.capture(u0, t0)

    def horizon_for(self, u0) -> float:
        if self.horizon is not None:
            return self.horizon
        return self.period(np.asarray(u0, dtype=float))

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        """Discontinuities of the field strictly inside ``(t0, t1]``."""
        if self.toggle_period is None:
            return []
        k0 = math.floor(t0 / self.toggle_period) + 1
        k1 = math.floor(t1 / self.toggle_period + 1e-12)
        return [round(k * self.toggle_period, 12) for k in range(k0, k1 + 1)]

    def evaluate(self, u, t: float = 0.0) -> np.ndarray:
        """Ground-truth derivative at one state; raises :class:`FieldError` if undefined."""
        du = np.asarray(self.field(jnp.asarray(u, dtype=float), t, None))
        if not np.all(np.isfinite(du)):
            raise FieldError(f"{self.name}: field undefined at u={np.asarray(u)}")
        return du


# ---------------------------------------------------------------------------
# two-body


def two_body_field(u, t, args):
    x, y, vx, vy = u[0], u[1], u[2], u[3]
    r3 = (x * x + y * y) ** 1.5
    return jnp.stack([vx, vy, -x / r3, -y / r3])


def angular_momentum(u, t=0.0):
    return jnp.atleast_1d(u[0] * u[3] - u[1] * u[2])


def two_body_initial_state(e: float) -> np.ndarray:
    return np.array([1.0 - e, 0.0, 0.0, math.sqrt((1.0 - e) / (1.0 + e))])


def orbital_period(u0) -> float:
    """Kepler period from the vis-viva relation ``v^2 = 2/r - 1/a``."""
    r0 = math.hypot(u0[0], u0[1])
    v2 = u0[2] ** 2 + u0[3] ** 2
    inv_a = 2.0 / r0 - v2
    if inv_a <= 0:
        raise ValueError("initial state is not on a bound orbit")
    return 2.0 * math.pi * (1.0 / inv_a) ** 1.5


def two_body() -> SystemDefinition:
    return SystemDefinition(
        name="two_body",
        n=4,
        field=two_body_field,
        manifold=ConstraintManifold("angular_momentum", angular_momentum, n=4, m=1),
        sampler=lambda rng: two_body_initial_state(rng.uniform(0.5, 0.7)),
        dt=0.1,
        horizon=None,
        params={"e_low": 0.5, "e_high": 0.7},
        model_kind="so-node",
        period=orbital_period,
    )


# ---------------------------------------------------------------------------
# rigid body

INERTIA = (2.0, 1.0, 2.0 / 3.0)


def rigid_body_field(u, t, args):
    i1, i2, i3 = INERTIA
    y1, y2, y3 = u[0], u[1], u[2]
    return jnp.stack([
        (1.0 / i3 - 1.0 / i2) * y2 * y3,
        (1.0 / i1 - 1.0 / i3) * y3 * y1,
        (1.0 / i2 - 1.0 / i1) * y1 * y2,
    ])


def squared_norm(u, t=0.0):
    return jnp.atleast_1d(jnp.sum(u * u))


def casimir(u) -> float:
    return 0.5 * float(np.sum(np.square(u)))


def rigid_body() -> SystemDefinition:
    def sample(rng):
        phi = rng.uniform(0.5, 1.5)
        return np.array([math.cos(phi), 0.0, math.sin(phi)])

    return SystemDefinition(
        name="rigid_body",
        n=3,
        field=rigid_body_field,
        manifold=ConstraintManifold("casimir", squared_norm, n=3, m=1),
        sampler=sample,
        dt=0.1,
        horizon=15.0,
        params=dict(zip(("I1", "I2", "I3"), INERTIA)),
    )


# ---------------------------------------------------------------------------
# DC-to-DC converter

C1, C2, L3 = 0.1, 0.2, 0.5
TOGGLE = 1.5


def switch_state(t):
    """Square wave starting at 0 and toggling every 1.5 s (right-continuous)."""
    k = jnp.floor(t / TOGGLE)
    k = jnp.where(k * TOGGLE > t, k - 1, k)
    k = jnp.where((k + 1) * TOGGLE <= t, k + 1, k)
    return jnp.mod(k, 2.0)


def dc_field(u, t, args):
    v1, v2, i3 = u[0], u[1], u[2]
    s = switch_state(t)
    return jnp.stack([
        (1.0 - s) * i3 / C1,
        s * i3 / C2,
        (-(1.0 - s) * v1 - s * v2) / L3,
    ])


def circuit_quantity(u, t=0.0):
    return jnp.atleast_1d(C1 * u[0] ** 2 + C2 * u[1] ** 2 + L3 * u[2] ** 2)


def circuit_energy(u) -> float:
    return 0.5 * float(circuit_quantity(jnp.asarray(u, dtype=float))[0])


def dc_converter() -> SystemDefinition:
    return SystemDefinition(
        name="dc_converter",
        n=3,
        field=dc_field,
        manifold=ConstraintManifold("energy", circuit_quantity, n=3, m=1),
        sampler=lambda rng: rng.uniform(0.0, 1.0, size=3),
        dt=0.1,
        horizon=10.0,
        params={"C1": C1, "C2": C2, "L3": L3, "toggle_period": TOGGLE},
        aux=lambda u, t: jnp.atleast_1d(switch_state(t)),
        aux_width=1,
        toggle_period=TOGGLE,
    )


# ---------------------------------------------------------------------------
# robot arm


def endpoint(theta):
    return jnp.stack([jnp.sum(jnp.cos(theta)), jnp.sum(jnp.sin(theta))])


def endpoint_jacobian(theta):
    return jnp.stack([-jnp.sin(theta), jnp.cos(theta)])


def path_offset(tau):
    """``e0 - p(tau)``: the prescribed line motion along x."""
    return jnp.stack([jnp.sin(2 * jnp.pi * tau) / (2 * jnp.pi), jnp.zeros_like(tau)])


def path_velocity(tau):
    return jnp.stack([-jnp.cos(2 * jnp.pi * tau), jnp.zeros_like(tau)])


def robot_arm_field(u, t, args):
    theta, tau = u[:3], u[3]
    J = endpoint_jacobian(theta)
    dtheta = J.T @ jnp.linalg.solve(J @ J.T, path_velocity(tau))
    return jnp.concatenate([dtheta, jnp.ones(1)])


def path_quantity(u, t=0.0):
    # e(theta) - p(tau) + e0 == e(theta) + (sin(2 pi tau) / 2 pi, 0)
    return endpoint(u[:3]) + path_offset(u[3])


def robot_arm() -> SystemDefinition:
    def sample(rng):
        th = rng.uniform(math.pi / 8, math.pi / 4)
        return np.array([th, -th, th, 0.0])

    return SystemDefinition(
        name="robot_arm",
        n=4,
        field=robot_arm_field,
        manifold=ConstraintManifold(
            "prescribed_path", path_quantity, n=4, m=2, mask=(True, True, True, False)
        ),
        sampler=sample,
        dt=0.1,
        horizon=5.0,
        params={"segment_length": 1.0},
        aux=lambda u, t: path_velocity(u[3]),
        aux_width=2,
        lifted_time=True,
    )


# ---------------------------------------------------------------------------
# double pendulum

M1 = M2 = 1.0
L1 = L2 = 1.0
GRAV = 9.81


def double_pendulum_field(u, t, args):
    th1, th2, w1, w2 = u[0], u[1], u[2], u[3]
    d = th1 - th2
    den = 2 * M1 + M2 - M2 * jnp.cos(2 * d)
    a1 = (
        -GRAV * (2 * M1 + M2) * jnp.sin(th1)
        - M2 * GRAV * jnp.sin(th1 - 2 * th2)
        - 2 * jnp.sin(d) * M2 * (w2**2 * L2 + w1**2 * L1 * jnp.cos(d))
    ) / (L1 * den)
    a2 = (
        2 * jnp.sin(d)
        * (w1**2 * L1 * (M1 + M2) + GRAV * (M1 + M2) * jnp.cos(th1) + w2**2 * L2 * M2 * jnp.cos(d))
    ) / (L2 * den)
    return jnp.stack([w1, w2, a1, a2])


def pendulum_energy(u, t=0.0):
    th1, th2, w1, w2 = u[0], u[1], u[2], u[3]
    kinetic = 0.5 * M1 * L1**2 * w1**2 + 0.5 * M2 * (
        L1**2 * w1**2 + L2**2 * w2**2 + 2 * L1 * L2 * w1 * w2 * jnp.cos(th1 - th2)
    )
    potential = -(M1 + M2) * GRAV * L1 * jnp.cos(th1) - M2 * GRAV * L2 * jnp.cos(th2)
    return jnp.atleast_1d(kinetic + potential)


def double_pendulum(hybrid: bool = False) -> SystemDefinition:
    def sample(rng):
        phi = rng.uniform(math.pi / 4, 3 * math.pi / 4)
        return np.array([phi, phi, 0.0, 0.0])

    return SystemDefinition(
        name="double_pendulum_hybrid" if hybrid else "double_pendulum",
        n=4,
        field=double_pendulum_field,
        manifold=ConstraintManifold("energy", pendulum_energy, n=4, m=1),
        sampler=sample,
        dt=0.05,
        horizon=60.0 if hybrid else 10.0,
        params={"m1": M1, "m2": M2, "l1": L1, "l2": L2, "g": GRAV},
        model_kind="hybrid" if hybrid else "so-node",
        angular=(True, True, False, False),
        hybrid_slots=(3,) if hybrid else (),
    )


_BUILDERS = {
    "two_body": two_body,
    "rigid_body": rigid_body,
    "dc_converter": dc_converter,
    "robot_arm": robot_arm,
    "double_pendulum": double_pendulum,
    "double_pendulum_hybrid": lambda: double_pendulum(hybrid=True),
}

SYSTEM_NAMES = tuple(_BUILDERS)

_CACHE: dict[str, SystemDefinition] = {}


def get_system(name: str) -> SystemDefinition:
    """Shared instance per name (so compiled solvers are reused)."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}")
    if name not in _CACHE:
        _CACHE[name] = _BUILDERS[name]()
    return _CACHE[name]
