import itertools

import numpy as np
import pytest

from deformgrids.errors import InputError, NumericalError
from deformgrids.geometry import TriMesh, icosphere
from deformgrids.gradients import GradientBundle
from deformgrids.grid import DeformationGrid, GridLevel, GridSequence, build_pruned
from deformgrids.objective import Objective
from deformgrids.optimizer import (
    AFTER_ADAM,
    BEFORE_ADAM,
    NO_PRECOND_LR_SCALE,
    OptimizationState,
    OptimSchedule,
    Optimizer,
    run,
)

TRI = TriMesh(np.eye(3), [[0, 1, 2]])


def full_level(level):
    r = 2 * level - 1
    return GridLevel(level, np.array(list(itertools.product(range(r), repeat=3))))


def one_grid(*levels):
    return GridSequence(0, [DeformationGrid(list(levels))], [])


def plain_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam trajectory for a sequence of gradients."""
    p = np.zeros_like(grads[0])
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def drive(grids, sched, grad_seq, mesh=TRI):
    opt = Optimizer(grids, mesh, sched)
    X = mesh.vertices.copy()
    state = OptimizationState.create(grids, X, len(grad_seq))
    for g in grad_seq:
        opt.step(state, grids, X, GradientBundle([g], [], np.zeros_like(X)))
    return grids.grids[0].params, X


def test_schedule_closed_forms():
    s = OptimSchedule()
    assert s.level_lr(1) == 5e-3 and s.level_lambda(1) == 0.25
    assert s.level_lr(10) == pytest.approx(5e-3 * 1.1 ** 9, rel=1e-15)
    assert s.level_lambda(10) == pytest.approx(0.25 * 1.5 ** 9, rel=1e-15)
    off = OptimSchedule(precondition=False)
    assert off.grid_lr(4) == pytest.approx(NO_PRECOND_LR_SCALE * s.level_lr(4), rel=1e-15)


def test_schedule_validation():
    with pytest.raises(InputError):
        OptimSchedule(lr=0.0)
    with pytest.raises(InputError):
        OptimSchedule(beta1=1.0)
    with pytest.raises(InputError):
        OptimSchedule(precondition_order="sideways")


@pytest.mark.parametrize("order", [BEFORE_ADAM, AFTER_ADAM])
def test_zero_gradient_leaves_parameters(order):
    grids = one_grid(GridLevel(1, [[0, 0, 0]]), full_level(2))
    grids.grids[0].params[:] = 0.3
    p, X = drive(grids, OptimSchedule(precondition_order=order), [np.zeros((28, 6))] * 3)
    assert np.all(p == 0.3)
    np.testing.assert_array_equal(X, TRI.vertices)


def test_single_vertex_is_plain_adam():
    # a lone vertex has an empty Laplacian, so smoothing is the identity
    rng = np.random.default_rng(0)
    seq = [rng.normal(size=(1, 6)) for _ in range(12)]
    p, _ = drive(one_grid(GridLevel(1, [[0, 0, 0]])), OptimSchedule(), seq)
    np.testing.assert_allclose(p, plain_adam(seq, 5e-3), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("order", [BEFORE_ADAM, AFTER_ADAM])
def test_constant_field_is_plain_adam(order):
    # constants lie in the Laplacian null space of a connected level
    rng = np.random.default_rng(1)
    seq = [np.tile(rng.normal(size=6), (27, 1)) for _ in range(8)]
    p, _ = drive(one_grid(full_level(2)), OptimSchedule(precondition_order=order), seq)
    np.testing.assert_allclose(p, plain_adam(seq, 5e-3 * 1.1), rtol=1e-9, atol=1e-13)


@pytest.mark.parametrize("order", [BEFORE_ADAM, AFTER_ADAM])
def test_tiny_lambda_is_plain_adam(order):
    rng = np.random.default_rng(2)
    seq = [rng.normal(size=(27, 6)) for _ in range(10)]
    sched = OptimSchedule(lam=1e-12, lam_growth=1.0, precondition_order=order)
    p, _ = drive(one_grid(full_level(2)), sched, seq)
    want = plain_adam(seq, 5e-3 * 1.1)
    assert np.abs(p - want).max() / np.abs(want).max() < 1e-6


def test_orders_differ_on_rough_gradients():
    rng = np.random.default_rng(3)
    seq = [rng.normal(size=(27, 6)) for _ in range(4)]
    a, _ = drive(one_grid(full_level(2)), OptimSchedule(precondition_order=BEFORE_ADAM), seq)
    b, _ = drive(one_grid(full_level(2)), OptimSchedule(precondition_order=AFTER_ADAM), seq)
    assert np.abs(a - b).max() > 1e-4
    # smoothing the Adam direction can only shrink it
    assert np.linalg.norm(b) <= np.linalg.norm(plain_adam(seq, 5e-3 * 1.1)) + 1e-12


def test_no_precond_scales_grid_lr_only():
    rng = np.random.default_rng(4)
    seq = [rng.normal(size=(27, 6)) for _ in range(5)]
    p, _ = drive(one_grid(full_level(2)), OptimSchedule(precondition=False), seq)
    np.testing.assert_allclose(p, plain_adam(seq, NO_PRECOND_LR_SCALE * 5e-3 * 1.1), rtol=1e-12)
    opt = Optimizer(one_grid(full_level(2)), TRI, OptimSchedule(precondition=False))
    assert opt.grid_precond is None and opt.mesh_precond is not None


def test_topology_mismatch_rejected():
    grids = one_grid(full_level(2))
    opt = Optimizer(grids, TRI)
    state = OptimizationState.create(grids, TRI.vertices, 5)
    X = TRI.vertices.copy()
    with pytest.raises(InputError):
        opt.step(state, grids, X, GradientBundle([np.zeros((26, 6))], [], np.zeros_like(X)))
    with pytest.raises(InputError):
        opt.step(state, grids, X, GradientBundle([], [], np.zeros_like(X)))
    with pytest.raises(InputError):
        opt.step(state, grids, X, GradientBundle([np.zeros((27, 6))], [], np.zeros((4, 3))))
    bad = np.zeros((27, 6))
    bad[5, 1] = np.inf
    with pytest.raises(NumericalError):
        opt.step(state, grids, X, GradientBundle([bad], [], np.zeros_like(X)))


def test_static_instance_stays_at_zero():
    ico = icosphere(1, 0.5)
    frames = [ico.vertices] * 3
    grids = build_pruned(2, frames, 1)
    obj = Objective(frames, 1, ico.edges)
    res = run(obj, ico, grids, OptimSchedule(epochs=5, log_every=1))
    assert all(h["total"] == 0.0 for h in res.history)
    assert all(np.all(g.params == 0.0) for g in res.grids.grids)
    np.testing.assert_array_equal(res.vertices, ico.vertices)


def test_snapshot_is_best_and_inputs_untouched():
    rng = np.random.default_rng(5)
    ico = icosphere(1, 0.5)
    shifts = [0.0, 0.15, 0.3]
    frames = [ico.vertices + [s, 0, 0] + rng.normal(scale=0.01, size=ico.vertices.shape) for s in shifts]
    grids = build_pruned(2, frames, 0)
    obj = Objective(frames, 0, ico.edges)
    before = [g.params.copy() for g in grids.grids]
    res = run(obj, ico, grids, OptimSchedule(epochs=60, log_every=1))
    assert len(res.history) == 61
    assert all(res.best_loss <= h["total"] for h in res.history)
    assert res.history[res.best_epoch]["total"] == res.best_loss
    assert res.best_loss < res.history[0]["total"]
    assert all(np.array_equal(a, g.params) for a, g in zip(before, grids.grids))
    # reruns are bit-identical
    again = run(obj, ico, grids, OptimSchedule(epochs=60, log_every=1))
    assert again.best_loss == res.best_loss
    np.testing.assert_array_equal(again.vertices, res.vertices)


def test_doubling_budget_does_not_raise_final_loss():
    rng = np.random.default_rng(5)
    ico = icosphere(1, 0.5)
    frames = [ico.vertices + [s, 0, 0] + rng.normal(scale=0.01, size=ico.vertices.shape) for s in (0.0, 0.15, 0.3)]
    grids = build_pruned(2, frames, 0)
    obj = Objective(frames, 0, ico.edges)
    short = run(obj, ico, grids, OptimSchedule(epochs=40, log_every=40))
    long = run(obj, ico, grids, OptimSchedule(epochs=80, log_every=80))
    assert long.final.total <= short.final.total
