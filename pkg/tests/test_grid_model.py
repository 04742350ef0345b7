"""
Tests for the grid data model and its topology queries.
"""

from collections import deque

import numpy as np
import pytest

from kclflow.core.errors.grid import GridValidationError, SlackAdjacentError, WouldIslandError
from kclflow.core.grid_model import (
    BusKind,
    EndpointRole,
    adjacency,
    check_connected,
    degrees,
    eligible_contingencies,
    grid_from_json,
    grid_to_json,
    is_slack_adjacent,
    load_grid,
    remove_branch,
    save_grid,
)
from tests.conftest import make_grid


def bfs_connected(n_bus, edges):
    """Reference connectivity check by breadth-first search."""
    neighbours = [[] for _ in range(n_bus)]
    for f, t in edges:
        neighbours[f].append(t)
        neighbours[t].append(f)
    seen = {0}
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other in neighbours[node]:
            if other not in seen:
                seen.add(other)
                queue.append(other)
    return len(seen) == n_bus


def test_grid_properties(triangle3):
    """Basic counts, slack lookup and endpoint arrays."""
    assert triangle3.n_bus == 3
    assert triangle3.n_branch == 3
    assert triangle3.slack_bus == 0
    src, dst = triangle3.from_to()
    assert src.tolist() == [0, 1, 0]
    assert dst.tolist() == [1, 2, 2]
    assert triangle3.edge_attrs().shape == (3, 2)
    assert triangle3.bus_kinds() == [BusKind.SLACK, BusKind.PV, BusKind.PQ]


def test_adjacency_and_degrees(mesh5):
    """Every branch appears once at each endpoint with the right role."""
    incident = adjacency(mesh5)
    assert (0, EndpointRole.FROM) in incident[0]
    assert (0, EndpointRole.TO) in incident[1]
    assert sum(len(entries) for entries in incident) == 2 * mesh5.n_branch
    assert degrees(mesh5).tolist() == [len(entries) for entries in incident]


def test_ieee14_counts(grid14):
    """The IEEE14 fixture lowers to 14 buses and 20 branches."""
    assert grid14.n_bus == 14
    assert grid14.n_branch == 20
    assert grid14.bus_kinds().count(BusKind.SLACK) == 1


def test_rejects_two_slacks():
    """Exactly one slack is required."""
    with pytest.raises(GridValidationError) as exc_info:
        make_grid(
            [(BusKind.SLACK, 0, 0, 1.0), (BusKind.SLACK, 0, 0, 1.0)],
            [(0, 1, 0.01, 0.1)],
        )
    assert exc_info.value.invariant == "single-slack"


def test_rejects_disconnected_grid():
    """A grid with two components is invalid."""
    with pytest.raises(GridValidationError) as exc_info:
        make_grid(
            [(BusKind.SLACK, 0, 0, 1.0), (BusKind.PQ, 0, 0, 1.0), (BusKind.PQ, 0, 0, 1.0), (BusKind.PQ, 0, 0, 1.0)],
            [(0, 1, 0.01, 0.1), (2, 3, 0.01, 0.1)],
        )
    assert exc_info.value.invariant == "connected"


@pytest.mark.parametrize("branch,invariant", [
    ((1, 1, 0.01, 0.1), "branch-self-loop"),
    ((0, 1, -0.01, 0.1), "branch-rx"),
    ((0, 1, 0.0, 0.0), "branch-impedance"),
    ((0, 5, 0.01, 0.1), "branch-endpoints"),
])
def test_rejects_bad_branches(branch, invariant):
    """Self loops, negative resistance, zero impedance and dangling endpoints."""
    with pytest.raises(GridValidationError) as exc_info:
        make_grid([(BusKind.SLACK, 0, 0, 1.0), (BusKind.PQ, 0, 0, 1.0)], [branch])
    assert exc_info.value.invariant == invariant


def test_rejects_nonpositive_vm():
    with pytest.raises(GridValidationError):
        make_grid([(BusKind.SLACK, 0, 0, 0.0), (BusKind.PQ, 0, 0, 1.0)], [(0, 1, 0.01, 0.1)])


def test_parallel_branches_are_allowed():
    """Two lines between the same buses form a valid multigraph."""
    grid = make_grid(
        [(BusKind.SLACK, 0, 0, 1.0), (BusKind.PQ, -0.1, 0, 1.0)],
        [(0, 1, 0.01, 0.1), (0, 1, 0.02, 0.2)],
    )
    assert grid.n_branch == 2
    assert degrees(grid).tolist() == [2, 2]


def test_check_connected_matches_bfs(grid14):
    """Removing any single branch: networkx agrees with a plain BFS."""
    src, dst = grid14.from_to()
    edges = list(zip(src.tolist(), dst.tolist()))
    for branch_id in range(grid14.n_branch):
        remaining = [e for k, e in enumerate(edges) if k != branch_id]
        assert check_connected(grid14, branch_id) == bfs_connected(grid14.n_bus, remaining)


def test_remove_branch_reindexes(mesh5):
    """The N-1 grid drops the branch and keeps ids dense."""
    reduced = remove_branch(mesh5, 2)
    assert reduced.n_branch == mesh5.n_branch - 1
    assert [br.id for br in reduced.branches] == list(range(reduced.n_branch))
    pairs = [(br.from_bus, br.to_bus) for br in reduced.branches]
    assert (1, 2) not in pairs
    assert reduced.topology_hash() != mesh5.topology_hash()


def test_remove_branch_rejects_slack_adjacent(mesh5):
    assert is_slack_adjacent(mesh5, 0)
    with pytest.raises(SlackAdjacentError):
        remove_branch(mesh5, 0)


def test_remove_branch_rejects_islanding(mesh5):
    """Branch 3-4 is the only connection of bus 4."""
    with pytest.raises(WouldIslandError):
        remove_branch(mesh5, 5)


def test_remove_branch_rejects_unknown_id(mesh5):
    with pytest.raises(GridValidationError):
        remove_branch(mesh5, 99)


def test_eligible_contingencies(mesh5, two_bus):
    """Only the inner loop branches of the mesh are admissible."""
    assert eligible_contingencies(mesh5) == [2, 3, 4]
    assert eligible_contingencies(two_bus) == []


def test_eligible_contingencies_ieee14(grid14):
    """No admissible contingency touches the slack or islands a bus."""
    eligible = eligible_contingencies(grid14)
    assert eligible
    for branch_id in eligible:
        assert not is_slack_adjacent(grid14, branch_id)
        reduced = remove_branch(grid14, branch_id)
        assert reduced.n_branch == grid14.n_branch - 1


def test_topology_hash_is_stable(triangle3):
    """Same topology gives the same hash; changing an impedance changes it."""
    again = grid_from_json(grid_to_json(triangle3))
    assert again.topology_hash() == triangle3.topology_hash()
    modified = make_grid(
        [(BusKind.SLACK, 0.0, 0.0, 1.05), (BusKind.PV, 0.4, 0.0, 1.02), (BusKind.PQ, -0.6, -0.2, 1.0)],
        [(0, 1, 0.02, 0.06), (1, 2, 0.03, 0.09), (0, 2, 0.025, 0.081)],
    )
    assert modified.topology_hash() != triangle3.topology_hash()


def test_json_round_trip(grid14, temp_dir):
    """Canonical JSON reloads to an equal grid with aliased field names."""
    text = grid_to_json(grid14)
    assert '"from"' in text and '"vm"' in text
    path = temp_dir / "grid.json"
    save_grid(grid14, path)
    loaded = load_grid(path)
    assert loaded == grid14
    assert np.array_equal(loaded.edge_attrs(), grid14.edge_attrs())
