import math

import jax.numpy as jnp
import numpy as np
import pytest

from snde.diff_engine import fd_check
from snde.neural_field import mlp_init
from snde.num_core import Trajectory
from snde.stabilization import StabilizedField
from snde.systems import get_system
from snde.training import (
    DIVERGED_LOSS,
    Chunk,
    TrainingConfig,
    TrainingDiverged,
    TrajectorySet,
    adam_init,
    adamw_step,
    build_field,
    chunk_and_split,
    chunk_loss,
    chunk_loss_and_grad,
    frozen_step_loss,
    generate_dataset,
    load_checkpoint,
    lr_at_epoch,
    model_spec,
    oracle_field,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def rigid_small():
    return generate_dataset("rigid_body", 5, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        TrainingConfig(lr_max=1e-5, lr_min=1e-4)
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainingConfig(chunk_len=1)


def test_table_defaults():
    cfg = TrainingConfig.for_system("two_body")
    assert (cfg.gamma, cfg.hidden_width, cfg.hidden_layers, cfg.model_kind) == (8.0, 128, 2, "so-node")
    cfg = TrainingConfig.for_system("rigid_body")
    assert (cfg.gamma, cfg.hidden_width, cfg.lr_max, cfg.lr_min) == (32.0, 64, 1e-4, 1e-5)


def test_dataset_shapes_and_determinism(rigid_small):
    assert len(rigid_small) == 5
    assert all(t.states.shape == (151, 3) for t in rigid_small.trajectories)
    again = generate_dataset("rigid_body", 5, 0)
    assert all(np.array_equal(a.states, b.states) for a, b in zip(rigid_small.trajectories, again.trajectories))
    dp = generate_dataset("double_pendulum", 1, 0)
    assert len(dp.trajectories[0]) == 201


def test_chunking_arithmetic():
    traj = Trajectory(np.arange(151) * 0.1, np.zeros((151, 3)))
    ts = TrajectorySet("rigid_body", 0, (traj,) * 40, np.ones((40, 1)), ())
    ch = chunk_and_split(ts, 3, 0.75, 0)
    assert len(ch) == 2000
    assert ch.train.sum() == 1500
    one = chunk_and_split(TrajectorySet("x", 0, (Trajectory(np.arange(3.0), np.zeros((3, 1))),),
                                        np.ones((1, 1)), ()), 3)
    assert len(one) == 1
    with pytest.raises(ValueError):
        chunk_and_split(TrajectorySet("x", 0, (Trajectory(np.arange(2.0), np.zeros((2, 1))),),
                                      np.ones((1, 1)), ()), 3)


def test_chunk_partition(rigid_small):
    ch = chunk_and_split(rigid_small, 3, 0.75, 4)
    seen = set()
    for (traj, start), times in zip(ch.source, ch.times):
        src = rigid_small.trajectories[traj].times
        assert np.array_equal(times, src[start:start + 3])
        pts = {(traj, start + k) for k in range(3)}
        assert not seen & pts
        seen |= pts
    again = chunk_and_split(rigid_small, 3, 0.75, 4)
    assert np.array_equal(ch.source, again.source) and np.array_equal(ch.train, again.train)


def test_chunk_loss_examples(rigid_small):
    s = get_system("rigid_body")
    traj = rigid_small.trajectories[0]
    chunk = Chunk(traj.times[:3], traj.states[:3], rigid_small.references[0])
    loss, ok = chunk_loss(oracle_field(s), chunk)
    assert ok and loss < 1e-8
    zero = lambda u, t, a: jnp.zeros_like(u)
    loss, ok = chunk_loss(zero, chunk)
    expected = np.sum((traj.states[1:3] - traj.states[0]) ** 2)
    assert ok and loss == pytest.approx(expected, rel=1e-12)
    flat = Chunk(traj.times[:3], np.repeat(traj.states[:1], 3, 0), rigid_small.references[0])
    assert chunk_loss(zero, flat) == (0.0, True)


def test_chunk_loss_divergence_sentinel():
    blow = lambda u, t, a: u * u * 1e3
    chunk = Chunk(np.array([0.0, 0.1, 0.2]), np.ones((3, 1)), np.zeros(1))
    loss, ok = chunk_loss(blow, chunk)
    assert not ok and loss == DIVERGED_LOSS


def test_gradient_matches_frozen_step_fd(rigid_small):
    s = get_system("rigid_body")
    field = build_field(s, "node", 8, 1, 4.0)
    assert isinstance(field, StabilizedField)
    p = mlp_init(model_spec(s, "node", 8, 1).shapes, 0).flat
    traj = rigid_small.trajectories[1]
    chunk = Chunk(traj.times[:3], traj.states[:3], rigid_small.references[1])
    loss, grad, ok = chunk_loss_and_grad(field, chunk, p)
    frozen = frozen_step_loss(field, chunk, p)
    assert ok and float(frozen(jnp.asarray(p))) == pytest.approx(loss, rel=1e-12)
    assert fd_check(frozen, p, h=1e-6) < 1e-6


def test_adamw_examples():
    p, st = adamw_step(np.array([1.0]), np.array([1.0]), adam_init(np.array([1.0])), 0.1, 0.0)
    assert abs(float(p[0]) - 0.9) < 1e-8
    p, _ = adamw_step(np.array([1.0, -2.0]), np.zeros(2), adam_init(np.zeros(2)), 0.1, 0.0)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    p, _ = adamw_step(np.array([3.0]), np.zeros(1), adam_init(np.zeros(1)), 0.1, 1e-6)
    assert float(p[0]) == 3.0 * (1 - 1e-7)
    with pytest.raises(FloatingPointError):
        adamw_step(np.array([1.0]), np.array([np.nan]), adam_init(np.zeros(1)), 0.1, 0.0)


def test_adamw_decreases_quadratic():
    w = np.array([2.0, -1.0])
    st = adam_init(w)
    f = lambda x: float(np.sum(x * x))
    start = f(w)
    for _ in range(2):
        w, st = adamw_step(w, 2 * w, st, 0.1, 1e-6)
    assert f(np.asarray(w)) < start


def test_lr_schedule():
    assert lr_at_epoch(0, 1000, 1e-3, 1e-5) == 1e-3
    assert lr_at_epoch(999, 1000, 1e-3, 1e-5) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at_epoch(1, 3, 1e-3, 1e-5) == pytest.approx(1e-4, rel=1e-12)
    lrs = [lr_at_epoch(k, 20, 1e-2, 1e-4) for k in range(20)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at_epoch(20, 20, 1e-2, 1e-4)


def test_gamma_zero_is_plain_field():
    s = get_system("rigid_body")
    assert not isinstance(build_field(s, "node", 8, 1, 0.0), StabilizedField)


@pytest.fixture(scope="module")
def smoke_run(rigid_small):
    cfg = TrainingConfig.for_system("rigid_body", n_trajectories=5, epochs=50, hidden_width=16,
                                    lr_max=1e-2, lr_min=1e-3)
    return cfg, train(cfg, rigid_small)


def test_training_progress(smoke_run):
    _, ck = smoke_run
    assert ck.epoch == 50 and len(ck.history) == 50
    assert ck.history[-1][2] < 0.5 * ck.history[0][2]
    assert all(h[3] == 0 for h in ck.history)


def test_training_deterministic_and_checkpoint_roundtrip(smoke_run, rigid_small, tmp_path):
    cfg, ck = smoke_run
    short = TrainingConfig(**{**cfg.__dict__, "epochs": 3})
    a, b = train(short, rigid_small), train(short, rigid_small)
    assert np.array_equal(a.params.flat, b.params.flat) and a.history == b.history
    path = tmp_path / "ck.txt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.config == ck.config and back.epoch == ck.epoch
    assert np.array_equal(back.params.flat, ck.params.flat)
    assert back.params.shapes == ck.params.shapes
    assert back.history == ck.history
    save_checkpoint(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_training_aborts_when_everything_diverges(rigid_small):
    cfg = TrainingConfig.for_system("rigid_body", n_trajectories=5, epochs=1, hidden_width=8,
                                    max_chunk_steps=1)
    with pytest.raises(TrainingDiverged):
        train(cfg, rigid_small)


def test_dataset_system_mismatch(rigid_small):
    with pytest.raises(ValueError):
        train(TrainingConfig.for_system("dc_converter", epochs=1), rigid_small)
