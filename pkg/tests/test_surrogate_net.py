"""
Tests for the graph surrogate: shapes, layer semantics and the reverse pass.
"""

import numpy as np
import pytest

from kclflow.core.errors.grid import IsolatedBusError
from kclflow.core.errors.surrogate import ShapeMismatchError, StaleTapeError
from kclflow.core.grid_model import BusKind
from kclflow.core.kcl_projection import build_operator, build_system, kcl_residual, project_flows
from kclflow.core.surrogate_net import (
    PARAM_NAMES,
    GraphIndex,
    attention_refine,
    attention_weights,
    backward,
    forward,
    init_params,
    message_pass,
)
from tests.conftest import make_grid


@pytest.fixture
def small_params():
    return init_params(hidden_dim=5, heads=2, attention_dim=3, seed=1)


def inputs_for(grid, rng, batch=2):
    x = rng.standard_normal((batch, grid.n_bus, 3))
    e = rng.standard_normal((grid.n_branch, 2))
    b = rng.standard_normal((batch, 2 * grid.n_bus))
    return x, e, b


def zero_params(params):
    for name in PARAM_NAMES:
        getattr(params, name)[...] = 0.0
    return params


def test_init_shapes(small_params):
    small_params.validate()
    assert small_params.hidden_dim == 5
    assert small_params.heads == 2
    assert small_params.attention_dim == 3
    for name, value in small_params.tensors():
        assert value.shape == small_params.expected_shapes()[name]
    for bias in ("b1", "b2", "be1", "be2"):
        assert not np.any(getattr(small_params, bias))


def test_init_is_deterministic():
    first, second = init_params(8, 2, seed=4), init_params(8, 2, seed=4)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(first, name), getattr(second, name))
    assert first.attention_dim == 8
    assert not np.array_equal(first.W1, init_params(8, 2, seed=5).W1)


def test_init_rejects_empty_layers():
    with pytest.raises(ShapeMismatchError):
        init_params(hidden_dim=0)
    with pytest.raises(ShapeMismatchError):
        init_params(heads=0)


def test_validate_rejects_bad_arrays(small_params):
    broken = small_params.copy()
    broken.We2 = np.zeros((5, 3))
    with pytest.raises(ShapeMismatchError):
        broken.validate()
    broken = small_params.copy()
    broken.b1[0] = np.nan
    with pytest.raises(ShapeMismatchError):
        broken.validate()


def test_graph_index(mesh5):
    graph = GraphIndex.from_grid(mesh5)
    assert graph.n_messages == 2 * mesh5.n_branch
    np.testing.assert_array_equal(np.bincount(graph.recv, minlength=5), [2, 3, 3, 3, 1])
    np.testing.assert_array_equal(graph.s_recv.sum(axis=1), [2, 3, 3, 3, 1])
    assert graph.topology_hash == mesh5.topology_hash()


def test_isolated_bus_is_rejected():
    grid = make_grid([(BusKind.SLACK, 0.0, 0.0, 1.0)], [])
    with pytest.raises(IsolatedBusError):
        GraphIndex.from_grid(grid)


def test_forward_shapes(mesh5, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    x, e, _ = inputs_for(mesh5, rng, batch=3)
    y, tape = forward(small_params, graph, x, e, with_projection=False)
    assert y.shape == (3, 24)
    assert tape.alpha.shape == (3, 2, 12)
    single, _ = forward(small_params, graph, x[0], e, with_projection=False)
    assert single.shape == (24,)
    np.testing.assert_allclose(single, y[0], atol=1e-12)


def test_forward_rejects_bad_shapes(mesh5, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    x, e, _ = inputs_for(mesh5, rng)
    with pytest.raises(ShapeMismatchError):
        forward(small_params, graph, x[:, :4], e, with_projection=False)
    with pytest.raises(ShapeMismatchError):
        forward(small_params, graph, x, e[:3], with_projection=False)
    with pytest.raises(ShapeMismatchError):
        forward(small_params, graph, x, e)


def test_projection_operator_must_match_topology(mesh5, triangle3, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    x, e, b = inputs_for(mesh5, rng)
    with pytest.raises(ShapeMismatchError):
        forward(small_params, graph, x, e, build_operator(triangle3), b)


def test_zero_weights_decode_the_output_bias(triangle3, small_params, rng):
    """With all weights zero the prediction is the decoder bias on every branch."""
    params = zero_params(small_params.copy())
    params.be2[:] = [1.0, 2.0, 3.0, 4.0]
    graph = GraphIndex.from_grid(triangle3)
    x, e, _ = inputs_for(triangle3, rng, batch=1)
    y, _ = forward(params, graph, x, e, with_projection=False)
    np.testing.assert_allclose(y[0], np.repeat([1.0, 2.0, 3.0, 4.0], 3))


def test_message_pass_sums_over_neighbours(mesh5, small_params, rng):
    """Constant messages aggregate to degree times the message."""
    params = zero_params(small_params.copy())
    params.b2[:] = 1.5
    graph = GraphIndex.from_grid(mesh5)
    x, e, _ = inputs_for(mesh5, rng, batch=1)
    x1 = message_pass(params, graph, x[0], e)
    assert x1.shape == (5, 5)
    np.testing.assert_allclose(x1, 1.5 * np.array([2, 3, 3, 3, 1])[:, None] * np.ones((1, 5)))


def test_attention_is_a_distribution_per_receiver(mesh5, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    x1 = rng.standard_normal((2, 5, 5))
    e = rng.standard_normal((mesh5.n_branch, 2))
    alpha = attention_weights(small_params, graph, x1, e)
    assert alpha.shape == (2, 2, 12)
    assert np.all(alpha >= 0)
    per_receiver = np.stack([alpha[..., graph.recv == bus].sum(axis=-1) for bus in range(5)], axis=-1)
    np.testing.assert_allclose(per_receiver, 1.0, atol=1e-12)


def test_uniform_attention_averages_neighbours(mesh5, small_params, rng):
    """Zero attention vectors give equal weights, so X'' is the neighbour mean."""
    params = small_params.copy()
    params.avec[...] = 0.0
    graph = GraphIndex.from_grid(mesh5)
    x1 = rng.standard_normal((5, 5))
    e = rng.standard_normal((mesh5.n_branch, 2))
    x2 = attention_refine(params, graph, x1, e)
    expected = np.stack([x1[graph.send[graph.recv == bus]].mean(axis=0) for bus in range(5)])
    np.testing.assert_allclose(x2, expected, atol=1e-12)


def test_attention_refine_checks_hidden_width(mesh5, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    with pytest.raises(ShapeMismatchError):
        attention_refine(small_params, graph, rng.standard_normal((5, 4)), rng.standard_normal((6, 2)))


@pytest.mark.parametrize("fixture", ["mesh5", "grid14"])
def test_projected_output_satisfies_kcl(fixture, request, rng):
    grid = request.getfixturevalue(fixture)
    params = init_params(hidden_dim=8, heads=2, seed=0)
    graph = GraphIndex.from_grid(grid)
    x, e, b = inputs_for(grid, rng, batch=4)
    operator = build_operator(grid)
    y, tape = forward(params, graph, x, e, operator, b)
    residual = y @ operator.a.T + b
    assert np.max(np.abs(residual)) <= 1e-8
    np.testing.assert_allclose(y, project_flows(operator, tape.y_raw, b), atol=1e-12)


def test_forward_accepts_a_constraint_system(triangle3, small_params, rng):
    graph = GraphIndex.from_grid(triangle3)
    x, e, _ = inputs_for(triangle3, rng, batch=1)
    sys = build_system(triangle3, rng.standard_normal(3), rng.standard_normal(3))
    y, _ = forward(small_params, graph, x[0], e, sys)
    assert np.max(np.abs(kcl_residual(sys, y))) <= 1e-8


@pytest.mark.parametrize("with_projection", [True, False])
def test_backward_matches_finite_differences(mesh5, small_params, rng, with_projection):
    """Every parameter gradient agrees with central differences of <w, y>."""
    graph = GraphIndex.from_grid(mesh5)
    operator = build_operator(mesh5)
    x, e, b = inputs_for(mesh5, rng)
    w = rng.standard_normal((2, 4 * mesh5.n_branch))

    def loss(params):
        y, _ = forward(params, graph, x, e, operator, b, with_projection=with_projection)
        return float(np.sum(w * y))

    _, tape = forward(small_params, graph, x, e, operator, b, with_projection=with_projection)
    grads = backward(small_params, graph, tape, w)
    assert list(grads) == list(PARAM_NAMES)

    eps = 1e-6
    for name in PARAM_NAMES:
        value = getattr(small_params, name)
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + eps
            plus = loss(small_params)
            value[idx] = original - eps
            minus = loss(small_params)
            value[idx] = original
            numeric[idx] = (plus - minus) / (2 * eps)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-6, err_msg=name)


def test_backward_of_squeezed_output(triangle3, small_params, rng):
    graph = GraphIndex.from_grid(triangle3)
    x, e, _ = inputs_for(triangle3, rng, batch=1)
    y, tape = forward(small_params, graph, x[0], e, with_projection=False)
    grads = backward(small_params, graph, tape, np.ones_like(y))
    assert grads["be2"].shape == (4,)
    np.testing.assert_allclose(grads["be2"], np.full(4, triangle3.n_branch))


def test_stale_tape_is_rejected(mesh5, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    x, e, _ = inputs_for(mesh5, rng)
    y, tape = forward(small_params, graph, x, e, with_projection=False)
    with pytest.raises(StaleTapeError):
        backward(small_params.copy(), graph, tape, np.ones_like(y))
    small_params.bump()
    with pytest.raises(StaleTapeError):
        backward(small_params, graph, tape, np.ones_like(y))


def test_backward_checks_gradient_shape(mesh5, small_params, rng):
    graph = GraphIndex.from_grid(mesh5)
    x, e, _ = inputs_for(mesh5, rng)
    _, tape = forward(small_params, graph, x, e, with_projection=False)
    with pytest.raises(ShapeMismatchError):
        backward(small_params, graph, tape, np.ones((2, 5)))


def test_forward_is_deterministic(grid14, rng):
    graph = GraphIndex.from_grid(grid14)
    x, e, _ = inputs_for(grid14, rng)
    params = init_params(hidden_dim=6, heads=3, seed=2)
    first, _ = forward(params, graph, x, e, with_projection=False)
    second, _ = forward(params, graph, x, e, with_projection=False)
    np.testing.assert_array_equal(first, second)


def relabel(grid, bus_perm, branch_order):
    """Grid with old bus i renamed bus_perm[i] and new branch k taken from old branch_order[k]."""
    inverse = np.argsort(bus_perm)
    buses = [grid.buses[i] for i in inverse]
    branches = [grid.branches[k] for k in branch_order]
    return make_grid(
        [(bus.kind, bus.p_nom, bus.q_nom, bus.vm_nom) for bus in buses],
        [(int(bus_perm[br.from_bus]), int(bus_perm[br.to_bus]), br.r, br.x) for br in branches],
        name="relabelled",
    )


def test_forward_is_permutation_equivariant(mesh5, rng):
    """Relabelling buses and branches permutes the projected flows the same way."""
    params = init_params(hidden_dim=6, heads=2, seed=4)
    n, m = mesh5.n_bus, mesh5.n_branch
    bus_perm = rng.permutation(n)
    branch_order = rng.permutation(m)
    relabelled = relabel(mesh5, bus_perm, branch_order)

    x, e, b = inputs_for(mesh5, rng, batch=3)
    x_new = np.empty_like(x)
    x_new[:, bus_perm] = x
    b_new = np.empty_like(b)
    b_new[:, bus_perm] = b[:, :n]
    b_new[:, n + bus_perm] = b[:, n:]

    y, _ = forward(params, GraphIndex.from_grid(mesh5), x, e, build_operator(mesh5), b)
    y_new, _ = forward(
        params, GraphIndex.from_grid(relabelled), x_new, e[branch_order], build_operator(relabelled), b_new
    )
    expected = y.reshape(3, 4, m)[..., branch_order].reshape(3, 4 * m)
    np.testing.assert_allclose(y_new, expected, atol=1e-10)
