"""Constraint manifolds and the pseudoinverse stabilization term.

A :class:`ConstraintManifold` is described by a conserved quantity
``q(u, t)`` and a per-trajectory reference value ``q0`` captured at the
initial state, so that ``g(u, t) = q(u, t) - q0`` vanishes on the manifold.
:class:`StabilizedField` adds ``-gamma * G^+(u) g(u)`` to a base field.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from snde.num_core import Trajectory

# Condition number of G G^T above which a configuration counts as singular.
MAX_CONDITION = 1e12


class SingularConfigurationError(ValueError):
    """The constraint Jacobian lost full row rank (e.g. a collinear arm)."""


@dataclasses.dataclass(frozen=True)
class ConstraintManifold:
    """Zero set of ``g(u, t) = quantity(u, t) - reference``.

    ``mask`` flags the state coordinates that the stabilization may move;
    ``None`` means all of them. ``reference`` is excluded from equality and
    hashing: compiled code must receive it through ``args["ref"]``.
    """

    name: str
    quantity: Callable
    n: int
    m: int
    mask: tuple[bool, ...] | None = None
    reference: np.ndarray | None = dataclasses.field(default=None, compare=False)

    def __post_init__(self):
        if not self.m < self.n:
            raise ValueError("need fewer constraints than state dimensions")
        if self.mask is not None and len(self.mask) != self.n:
            raise ValueError("mask length must equal the state dimension")
        if self.reference is not None:
            ref = np.asarray(self.reference, dtype=float).reshape(self.m)
            if not np.all(np.isfinite(ref)):
                raise ValueError("reference constants must be finite")
            object.__setattr__(self, "reference", ref)

    def capture(self, u0, t0: float = 0.0) -> ConstraintManifold:
        """Copy of this manifold with the reference taken at ``u0``."""
        ref = np.asarray(self.quantity(jnp.asarray(u0, dtype=float), t0), dtype=float)
        return dataclasses.replace(self, reference=ref.reshape(self.m))

    def _ref(self, ref):
        if ref is not None:
            return ref
        if self.reference is None:
            raise ValueError(f"manifold {self.name!r} has no reference constants")
        return self.reference

    def g(self, u, t=0.0, ref=None):
        return jnp.atleast_1d(self.quantity(u, t)) - self._ref(ref)

    def jacobian(self, u, t=0.0):
        """Full constraint Jacobian ``dg/du`` (m x n), forward mode."""
        return jax.jacfwd(lambda v: jnp.atleast_1d(self.quantity(v, t)))(u)

    def stabilized_jacobian(self, u, t=0.0):
        """Jacobian restricted to the stabilized coordinates (other columns zero)."""
        G = self.jacobian(u, t)
        if self.mask is None:
            return G
        return G * jnp.asarray(self.mask, dtype=float)


def pinv_apply(G, r):
    """``G^T (G G^T)^{-1} r`` via Cholesky, with an SVD pseudoinverse fallback."""
    m = G.shape[0]
    M = G @ G.T
    if m == 1:
        return G[0] * (r[0] / M[0, 0])
    L = jnp.linalg.cholesky(M)
    diag = jnp.diag(L)
    well_posed = jnp.all(jnp.isfinite(L)) & ((jnp.min(diag) / jnp.max(diag)) ** 2 > 1.0 / MAX_CONDITION)

    def chol():
        y = jax.scipy.linalg.cho_solve((L, True), r)
        return G.T @ y

    def svd():
        return jnp.linalg.pinv(G, rtol=1.0 / MAX_CONDITION) @ r

    return lax.cond(well_posed, chol, svd)


@dataclasses.dataclass(frozen=True)
class StabilizedField:
    """``u' = f(u, t) - gamma * F(u) g(u)`` with ``F = G^+`` by default.

    The reference constants come from ``args["ref"]``. With ``gamma == 0``
    the base field is returned untouched and the stabilization term is
    never evaluated.
    """

    base: Callable
    manifold: ConstraintManifold
    gamma: float
    apply_matrix: Callable = pinv_apply

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")

    def __call__(self, u, t, args):
        f = self.base(u, t, args)
        if self.gamma == 0:
            return f
        return f - self.gamma * self.term(u, t, args["ref"])

    def term(self, u, t, ref):
        r = self.manifold.g(u, t, ref)
        G = self.manifold.stabilized_jacobian(u, t)
        return self.apply_matrix(G, r)


def _checked_system(manifold: ConstraintManifold, u, t):
    G = np.asarray(manifold.stabilized_jacobian(jnp.asarray(u, dtype=float), t))
    M = G @ G.T
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularConfigurationError(
            f"{manifold.name}: G G^T is singular at u={np.asarray(u)} (cond={cond:.3g})"
        )
    return G, M


def stabilization_term(manifold: ConstraintManifold, u, t: float = 0.0, ref=None) -> np.ndarray:
    """``G^+(u) g(u)`` evaluated eagerly, with a rank check."""
    u = np.asarray(u, dtype=float)
    G, M = _checked_system(manifold, u, t)
    r = np.asarray(manifold.g(jnp.asarray(u), t, ref))
    return G.T @ np.linalg.solve(M, r)


def stabilized_rhs(sfield: StabilizedField, u, t: float = 0.0, args=None) -> np.ndarray:
    """Evaluate a stabilized field eagerly at one state."""
    args = dict(args or {})
    args.setdefault("ref", sfield.manifold._ref(None))
    u = np.asarray(u, dtype=float)
    f = np.asarray(sfield.base(jnp.asarray(u), t, args))
    if sfield.gamma == 0:
        return f
    return f - sfield.gamma * stabilization_term(sfield.manifold, u, t, args["ref"])


def gamma_lower_bound(field, manifold: ConstraintManifold, probes, t: float = 0.0,
                      args=None, ref=None) -> float:
    """Smallest gamma that makes the manifold attracting at the probe states.

    Computes ``max ||G(u) f(u)|| / ||g(u)||`` over the probes. For
    ``F = G^+`` the matrix ``G F`` is the identity, so its smallest
    eigenvalue is one. Probes must lie off the manifold.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.shape[0] == 0:
        raise ValueError("need at least one probe state")
    ref = manifold._ref(ref)
    best = 0.0
    for u in probes:
        uj = jnp.asarray(u)
        gv = np.asarray(manifold.g(uj, t, ref))
        gnorm = np.linalg.norm(gv)
        if gnorm == 0:
            raise ValueError(f"probe {u} lies on the manifold")
        Gf = np.asarray(manifold.jacobian(uj, t)) @ np.asarray(field(uj, t, args))
        best = max(best, float(np.linalg.norm(Gf) / gnorm))
    return best


def lyapunov_series(manifold: ConstraintManifold, trajectory: Trajectory, ref=None) -> np.ndarray:
    """``V = |g|^2 / 2`` at every saved state."""
    ref = manifold._ref(ref)
    g = jax.vmap(lambda u, t: manifold.g(u, t, ref))(
        jnp.asarray(trajectory.states), jnp.asarray(trajectory.times)
    )
    g = np.asarray(g)
    return 0.5 * np.sum(g * g, axis=1)
