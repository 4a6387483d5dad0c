import jax.numpy as jnp
import numpy as np
import pytest

from snde.diff_engine import NonFiniteError, fd_check, fd_gradient, jacobian, loss_gradient
from snde.neural_field import layer_shapes, mlp_apply, mlp_init


def test_jacobian_hand_values():
    J = jacobian(lambda u: jnp.stack([u[0] ** 2, u[0] * u[1]]), [2.0, 3.0])
    np.testing.assert_array_equal(J, [[4.0, 0.0], [3.0, 2.0]])
    J = jacobian(lambda u: 0.5 * (u[0] ** 2 + u[1] ** 2 - 1.0), [1.0, 0.0])
    np.testing.assert_array_equal(J, [[1.0, 0.0]])


def test_affine_jacobian_is_constant():
    A = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    f = lambda u: jnp.asarray(A) @ u + 1.0
    rng = np.random.default_rng(0)
    for _ in range(3):
        np.testing.assert_array_equal(jacobian(f, rng.normal(size=3)), A)


def test_jacobian_names_bad_component():
    with pytest.raises(NonFiniteError, match="component 1"):
        jacobian(lambda u: jnp.stack([u[0], 1.0 / u[1]]), [1.0, 0.0])


def test_forward_reverse_agree():
    g = lambda u: jnp.sin(u[0]) * u[1] ** 3 + jnp.exp(u[2])
    u = np.array([0.3, -1.2, 0.7])
    np.testing.assert_allclose(jacobian(g, u)[0], loss_gradient(g, u), rtol=1e-12)


def test_quadratic_gradient():
    th = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(loss_gradient(lambda p: 0.5 * jnp.sum(p * p), th), th)
    assert fd_check(lambda p: 0.5 * jnp.sum(p * p), th) < 1e-8


def test_symmetric_loss_at_zero():
    assert fd_check(lambda p: jnp.sum(p ** 4) + jnp.sum(p ** 2), np.zeros(4)) < 1e-8


def test_nonfinite_loss_raises():
    with pytest.raises(NonFiniteError):
        loss_gradient(lambda p: jnp.log(p[0]), np.array([-1.0]))
    with pytest.raises(NonFiniteError, match="component 0"):
        loss_gradient(lambda p: jnp.sqrt(p[0]) + p[1], np.array([0.0, 1.0]))


def test_mlp_squared_error_matches_fd():
    shapes = layer_shapes(3, 2, 8, 1)
    params = mlp_init(shapes, 0).flat
    x, y = jnp.array([0.4, -0.3, 0.9]), jnp.array([0.1, 0.2])
    loss = lambda p: jnp.sum((mlp_apply(shapes, p, x) - y) ** 2)
    assert fd_check(loss, params) < 1e-6


def test_two_layer_mlp_fd_check():
    shapes = layer_shapes(2, 1, 8, 2)
    params = mlp_init(shapes, 3).flat
    loss = lambda p: jnp.sum(mlp_apply(shapes, p, jnp.array([0.7, -0.2])) ** 2)
    assert fd_check(loss, params) < 1e-5


def test_gradient_deterministic():
    shapes = layer_shapes(2, 2, 4, 1)
    p = mlp_init(shapes, 1).flat
    loss = lambda q: jnp.sum(mlp_apply(shapes, q, jnp.ones(2)) ** 2)
    assert np.array_equal(loss_gradient(loss, p), loss_gradient(loss, p))


def test_fd_gradient_and_bad_step():
    np.testing.assert_allclose(fd_gradient(lambda p: jnp.sum(p ** 2), np.array([1.0, 2.0])), [2.0, 4.0])
    with pytest.raises(ValueError):
        fd_check(lambda p: jnp.sum(p), np.ones(2), h=0.0)
