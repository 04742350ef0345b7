"""
Tests for the KCL constraint system, the global projection and Kaczmarz.
"""

import numpy as np
import pytest

from kclflow.core.acpf_solver import branch_flows, nr_solve
from kclflow.core.errors.grid import IsolatedBusError
from kclflow.core.errors.projection import DimMismatchError
from kclflow.core.grid_model import BusKind, remove_branch
from kclflow.core.kcl_projection import (
    ConstraintCache,
    affine_layer,
    build_operator,
    build_system,
    default_ordering,
    kcl_residual,
    normal_vectors,
    project_bus,
    project_global,
    project_global_backward,
    project_kaczmarz,
    pseudoinverse,
)
from tests.conftest import make_grid


def random_system(grid, rng):
    """Constraint system with random injections plus a random starting FlowSet."""
    sys = build_system(grid, rng.standard_normal(grid.n_bus), rng.standard_normal(grid.n_bus))
    y = rng.standard_normal(4 * grid.n_branch)
    return sys, y


def kkt_projection(a, b, y):
    """argmin ||z - y|| s.t. A z + b = 0 from the KKT system."""
    n_rows, n_cols = a.shape
    kkt = np.block([[np.eye(n_cols), a.T], [a, np.zeros((n_rows, n_rows))]])
    rhs = np.concatenate([y, -b])
    return np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n_cols]


def test_operator_shape_and_rank(grid14):
    op = build_operator(grid14)
    assert op.a.shape == (28, 80)
    assert op.a_pinv.shape == (80, 28)
    assert op.rank == 28
    assert op.topology_hash == grid14.topology_hash()


def test_normal_vectors_are_binary(mesh5):
    """Every flow column belongs to exactly one P row or one Q row."""
    normals = normal_vectors(mesh5)
    a = np.vstack([normals.p.toarray(), normals.q.toarray()])
    assert set(np.unique(a)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a.sum(axis=0), np.ones(4 * mesh5.n_branch))


def test_zero_residual_at_power_flow_solution(grid14):
    """Solved flows satisfy A y + b = 0 with b = -injection."""
    sol = nr_solve(grid14)
    flows = branch_flows(grid14, sol)
    sys = build_system(grid14, -sol.p_inj, -sol.q_inj)
    assert np.max(np.abs(kcl_residual(sys, flows))) <= 1e-6


@pytest.mark.parametrize("fixture", ["triangle3", "mesh5", "grid14"])
def test_penrose_identities(fixture, request):
    op = build_operator(request.getfixturevalue(fixture))
    a, a_pinv = op.a, op.a_pinv
    np.testing.assert_allclose(a @ a_pinv @ a, a, atol=1e-10)
    np.testing.assert_allclose(a_pinv @ a @ a_pinv, a_pinv, atol=1e-10)
    np.testing.assert_allclose((a @ a_pinv).T, a @ a_pinv, atol=1e-10)
    np.testing.assert_allclose((a_pinv @ a).T, a_pinv @ a, atol=1e-10)


def test_pseudoinverse_of_rank_deficient_matrix():
    a = np.array([[1.0, 1.0], [2.0, 2.0]])
    a_pinv, s, rank = pseudoinverse(a)
    assert rank == 1
    assert s[1] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(a @ a_pinv @ a, a, atol=1e-12)


@pytest.mark.parametrize("fixture", ["triangle3", "mesh5", "grid14"])
def test_projection_matches_kkt_oracle(fixture, request, rng):
    grid = request.getfixturevalue(fixture)
    sys, y = random_system(grid, rng)
    projected = project_global(sys, y)
    np.testing.assert_allclose(projected, kkt_projection(sys.a, sys.b, y), atol=1e-8)
    assert np.max(np.abs(kcl_residual(sys, projected))) <= 1e-10


def random_connected_grid(rng, max_buses=12):
    """Random spanning tree plus a few chords, with random branch orientation."""
    n = int(rng.integers(2, max_buses + 1))
    pairs = {tuple(sorted((i, int(rng.integers(0, i))))) for i in range(1, n)}
    for _ in range(int(rng.integers(0, n))):
        i, j = (int(v) for v in rng.choice(n, size=2, replace=False))
        pairs.add(tuple(sorted((i, j))))
    branches = []
    for i, j in sorted(pairs):
        f, t = (i, j) if rng.random() < 0.5 else (j, i)
        branches.append((f, t, float(rng.uniform(0.01, 0.1)), float(rng.uniform(0.05, 0.3))))
    buses = [(BusKind.SLACK, 0.0, 0.0, 1.0)] + [(BusKind.PQ, -0.1, -0.05, 1.0)] * (n - 1)
    return make_grid(buses, branches, name=f"random{n}")


@pytest.mark.parametrize("seed", range(60))
def test_projections_on_random_grids_match_kkt(seed):
    rng = np.random.default_rng(seed)
    grid = random_connected_grid(rng)
    sys, y = random_system(grid, rng)
    oracle = kkt_projection(sys.a, sys.b, y)

    projected = project_global(sys, y)
    assert np.max(np.abs(projected - oracle)) <= 1e-9
    assert np.max(np.abs(project_global(sys, projected) - projected)) <= 1e-10

    a, a_pinv = sys.a, sys.a_pinv
    np.testing.assert_allclose(a @ a_pinv @ a, a, atol=1e-10)
    np.testing.assert_allclose(a_pinv @ a @ a_pinv, a_pinv, atol=1e-10)

    # Rows of A have disjoint supports, so one sweep in any order is the projection
    for ordering in ("fixed", "random"):
        result = project_kaczmarz(sys, y, ordering=ordering, sweeps=1, tol=1e-12, seed=seed)
        assert np.max(np.abs(result.flows - oracle)) <= 1e-9

    stepped = y
    for row in default_ordering(grid.n_bus):
        bus, which = row % grid.n_bus, "P" if row < grid.n_bus else "Q"
        stepped = project_bus(sys, stepped, bus, which)
    assert np.max(np.abs(stepped - oracle)) <= 1e-9


def test_single_branch_projection_example(two_bus):
    sys = build_system(two_bus, [-1.0, 0.97], [0.0, 0.0])
    projected = project_global(sys, np.array([0.9, -0.9, 0.1, -0.1]))
    np.testing.assert_allclose(projected, [1.0, -0.97, 0.0, 0.0], atol=1e-12)
    result = project_kaczmarz(sys, np.array([0.9, -0.9, 0.1, -0.1]), tol=1e-12)
    assert result.sweeps_used == 1
    np.testing.assert_allclose(result.flows, projected, atol=1e-12)


def test_star_bus_projection_example(star3):
    """Two outgoing p_from of 0.4 under P_net = -1 both move to 0.5."""
    sys = build_system(star3, [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    y = np.array([0.4, 0.4, -0.3, -0.2, 0.1, 0.1, 0.0, 0.0])
    out = project_bus(sys, y, 0, "P")
    np.testing.assert_allclose(out[:2], [0.5, 0.5], atol=1e-12)
    np.testing.assert_array_equal(out[2:], y[2:])
    np.testing.assert_allclose(project_bus(sys, out, 0, "P"), out, atol=1e-12)


def test_per_bus_projections_reject_batched_injections(mesh5, rng):
    sys, y = random_system(mesh5, rng)
    batched = sys.__class__(sys.operator, np.stack([sys.b, sys.b]))
    with pytest.raises(DimMismatchError):
        project_kaczmarz(batched, y)
    with pytest.raises(DimMismatchError):
        project_bus(batched, y, 0, "P")


def test_projection_is_idempotent(grid14, rng):
    sys, y = random_system(grid14, rng)
    once = project_global(sys, y)
    np.testing.assert_allclose(project_global(sys, once), once, atol=1e-12)


def test_feasible_input_is_unchanged(grid14):
    sol = nr_solve(grid14)
    flows = branch_flows(grid14, sol)
    sys = build_system(grid14, -sol.p_inj, -sol.q_inj)
    np.testing.assert_allclose(project_global(sys, flows), flows, atol=1e-6)


def test_batched_projection_matches_single(mesh5, rng):
    sys, _ = random_system(mesh5, rng)
    batch = rng.standard_normal((5, 4 * mesh5.n_branch))
    projected = project_global(sys, batch)
    assert projected.shape == batch.shape
    for row, out in zip(batch, projected):
        np.testing.assert_allclose(project_global(sys, row), out, atol=1e-12)


def test_backward_matches_finite_differences(mesh5, rng):
    """Directional derivatives agree with the vector-Jacobian product."""
    sys, y = random_system(mesh5, rng)
    upstream = rng.standard_normal(y.size)
    grad_y, grad_b = project_global_backward(sys, upstream)

    dy = rng.standard_normal(y.size)
    db = rng.standard_normal(sys.b.size)
    eps = 1e-6
    plus = np.dot(upstream, project_global(sys.__class__(sys.operator, sys.b + eps * db), y + eps * dy))
    minus = np.dot(upstream, project_global(sys.__class__(sys.operator, sys.b - eps * db), y - eps * dy))
    numeric = (plus - minus) / (2 * eps)
    assert numeric == pytest.approx(np.dot(grad_y, dy) + np.dot(grad_b, db), rel=1e-6, abs=1e-8)


def test_backward_grad_y_lies_in_null_space(grid14, rng):
    sys, _ = random_system(grid14, rng)
    grad_y, _ = project_global_backward(sys, rng.standard_normal(4 * grid14.n_branch))
    np.testing.assert_allclose(sys.a @ grad_y, 0.0, atol=1e-10)


def test_affine_layer_equivalence(mesh5, rng):
    sys, y = random_system(mesh5, rng)
    w, c = affine_layer(sys)
    np.testing.assert_allclose(w @ y + c, project_global(sys, y), atol=1e-12)


def test_project_bus_fixes_one_row(mesh5, rng):
    """A single hyperplane step zeroes its row and leaves the others alone."""
    sys, y = random_system(mesh5, rng)
    before = kcl_residual(sys, y)
    after = kcl_residual(sys, project_bus(sys, y, 2, "Q"))
    row = mesh5.n_bus + 2
    assert after[row] == pytest.approx(0.0, abs=1e-12)
    others = np.arange(before.size) != row
    np.testing.assert_allclose(after[others], before[others], atol=1e-12)


def test_project_bus_rejects_bad_arguments(mesh5, rng):
    sys, y = random_system(mesh5, rng)
    with pytest.raises(ValueError):
        project_bus(sys, y, 0, "X")
    with pytest.raises(DimMismatchError):
        project_bus(sys, y, 7, "P")


def test_default_ordering():
    assert default_ordering(3) == [0, 3, 1, 4, 2, 5]


@pytest.mark.parametrize("ordering", ["fixed", "random", "weighted"])
def test_kaczmarz_converges_to_global_projection(grid14, rng, ordering):
    sys, y = random_system(grid14, rng)
    result = project_kaczmarz(sys, y, ordering=ordering, sweeps=500, tol=1e-10, seed=7)
    assert result.converged
    assert result.residual <= 1e-10
    np.testing.assert_allclose(result.flows, project_global(sys, y), atol=1e-8)


def test_kaczmarz_distance_is_non_increasing(mesh5, rng):
    sys, y = random_system(mesh5, rng)
    result = project_kaczmarz(sys, y, ordering="random", sweeps=20, tol=1e-12, seed=1, record=True)
    distances = np.array(result.distance_history)
    assert np.all(np.diff(distances) <= 1e-12)
    assert result.residual_history[0] > result.residual_history[-1]


def test_kaczmarz_explicit_ordering(triangle3, rng):
    sys, y = random_system(triangle3, rng)
    order = list(reversed(default_ordering(triangle3.n_bus)))
    result = project_kaczmarz(sys, y, ordering=order, sweeps=50, tol=1e-10)
    assert result.converged
    with pytest.raises(DimMismatchError):
        project_kaczmarz(sys, y, ordering=[0, 1, 2])


def test_kaczmarz_on_feasible_input_does_no_sweeps(grid14):
    sol = nr_solve(grid14)
    sys = build_system(grid14, -sol.p_inj, -sol.q_inj)
    result = project_kaczmarz(sys, branch_flows(grid14, sol), tol=1e-6)
    assert result.converged
    assert result.sweeps_used == 0


def test_kaczmarz_rejects_bad_arguments(triangle3, rng):
    sys, y = random_system(triangle3, rng)
    with pytest.raises(ValueError):
        project_kaczmarz(sys, y, sweeps=0)
    with pytest.raises(ValueError):
        project_kaczmarz(sys, y, ordering="spiral")
    with pytest.raises(DimMismatchError):
        project_kaczmarz(sys, np.zeros((2, y.size)))


def test_isolated_bus_is_rejected():
    grid = make_grid([(BusKind.SLACK, 0.0, 0.0, 1.0)], [])
    with pytest.raises(IsolatedBusError):
        build_operator(grid)


def test_dimension_checks(triangle3, rng):
    with pytest.raises(DimMismatchError):
        build_system(triangle3, np.zeros(2), np.zeros(3))
    sys, _ = random_system(triangle3, rng)
    with pytest.raises(DimMismatchError):
        project_global(sys, np.zeros(5))


def test_cache_reuses_operators(mesh5):
    cache = ConstraintCache()
    assert len(cache) == 0
    first = cache.get_or_build(mesh5)
    assert cache.get_or_build(mesh5) is first
    assert (cache.hits, cache.misses) == (1, 1)
    cache.get_or_build(remove_branch(mesh5, 3))
    assert len(cache) == 2
    assert mesh5.topology_hash() in cache

    sys = build_system(mesh5, np.zeros(5), np.zeros(5), cache=cache)
    assert sys.operator is first
    other = sys.with_injections(np.ones(5), np.ones(5))
    assert other.operator is first
    np.testing.assert_array_equal(other.b, np.ones(10))
