"""Jacobians and gradients, backed by JAX.

Forward mode is used for constraint Jacobians (few inputs, few outputs);
reverse mode for scalar training losses. Gradients through the adaptive
solver are taken on the discrete computation with step sizes held
constant (see :func:`snde.num_core.replay`). :func:`fd_check` is the
independent central-difference oracle.
"""

from __future__ import annotations

from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np


class NonFiniteError(FloatingPointError):
    pass


def jacobian(func: Callable, u) -> np.ndarray:
    """Forward-mode Jacobian of ``func: R^n -> R^m`` at ``u`` (m x n)."""
    u = jnp.asarray(u, dtype=float)
    out = np.atleast_1d(np.asarray(func(u)))
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise NonFiniteError(f"function output component {bad[0]} is not finite")
    J = np.asarray(jax.jacfwd(lambda v: jnp.atleast_1d(func(v)))(u))
    bad_rows = np.flatnonzero(~np.all(np.isfinite(J), axis=1))
    if bad_rows.size:
        raise NonFiniteError(f"derivative of component {bad_rows[0]} is not finite")
    return J.reshape(out.size, u.size)


def loss_gradient(loss: Callable, params) -> np.ndarray:
    """Reverse-mode gradient of a scalar ``loss(params)``."""
    value, grad = jax.value_and_grad(loss)(jnp.asarray(params, dtype=float))
    if not np.isfinite(float(value)):
        raise NonFiniteError(f"loss is not finite ({float(value)})")
    grad = np.asarray(grad)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteError(f"gradient component {bad[0]} is not finite")
    return grad


def fd_gradient(loss: Callable, params, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    params = np.asarray(params, dtype=float)
    grad = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        grad[i] = (float(loss(params + e)) - float(loss(params - e))) / (2 * h)
    return grad


def fd_check(loss: Callable, params, h: float = 1e-5) -> float:
    """Max relative deviation between :func:`loss_gradient` and central differences.

    The deviation is measured as ``max|g_ad - g_fd| / max(max|g_fd|, 1e-12)``
    so that components that are zero in both do not blow up the ratio.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    g_ad = loss_gradient(loss, params)
    g_fd = fd_gradient(loss, params, h)
    scale = max(float(np.max(np.abs(g_fd))), 1e-12)
    return float(np.max(np.abs(g_ad - g_fd)) / scale)
