"""
Grid data model.

Buses, branches and whole grids in per-unit, plus the topology queries every
other module relies on. Grids are frozen pydantic models: once validated they
are immutable and can be shared between worker processes.

The canonical JSON form is the by-alias dump of ``Grid``::

    {"base_mva": 100.0,
     "buses": [{"id": 0, "kind": "slack", "p": 0.0, "q": 0.0, "vm": 1.06, "va": 0.0}, ...],
     "branches": [{"id": 0, "from": 0, "to": 1, "r": 0.01938, "x": 0.05917}, ...]}
"""

import hashlib
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors.base import make_context
from .errors.grid import GridValidationError, SlackAdjacentError, WouldIslandError

logger = logging.getLogger(__name__)


class BusKind(str, Enum):
    """Bus categories."""
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class EndpointRole(str, Enum):
    """Which end of a branch a bus sits on."""
    FROM = "from"
    TO = "to"


class Bus(BaseModel):
    """A bus with its nominal operating values in per-unit."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: int = Field(..., ge=0)
    kind: BusKind
    p_nom: float = Field(..., alias="p")
    q_nom: float = Field(..., alias="q")
    vm_nom: float = Field(..., alias="vm")
    va_nom: float = Field(0.0, alias="va")

    @model_validator(mode="after")
    def check_values(self) -> "Bus":
        """vm_nom must be positive and every field finite."""
        values = (self.p_nom, self.q_nom, self.vm_nom, self.va_nom)
        if not all(math.isfinite(v) for v in values):
            raise GridValidationError(
                f"Bus {self.id} has non-finite values",
                invariant="bus-finite",
                context=make_context("grid_model.Bus", bus_id=self.id)
            )
        if self.vm_nom <= 0:
            raise GridValidationError(
                f"Bus {self.id} has non-positive vm_nom {self.vm_nom}",
                invariant="bus-vm-positive",
                context=make_context("grid_model.Bus", bus_id=self.id, vm_nom=self.vm_nom)
            )
        return self


class Branch(BaseModel):
    """A series r + jx line between two buses."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: int = Field(..., ge=0)
    from_bus: int = Field(..., alias="from", ge=0)
    to_bus: int = Field(..., alias="to", ge=0)
    r: float
    x: float

    @model_validator(mode="after")
    def check_values(self) -> "Branch":
        """No self loops, r >= 0 and a non-zero impedance."""
        if self.from_bus == self.to_bus:
            raise GridValidationError(
                f"Branch {self.id} connects bus {self.from_bus} to itself",
                invariant="branch-self-loop",
                context=make_context("grid_model.Branch", branch_id=self.id)
            )
        if not (math.isfinite(self.r) and math.isfinite(self.x)) or self.r < 0:
            raise GridValidationError(
                f"Branch {self.id} has invalid resistance/reactance ({self.r}, {self.x})",
                invariant="branch-rx",
                context=make_context("grid_model.Branch", branch_id=self.id, r=self.r, x=self.x)
            )
        if self.r * self.r + self.x * self.x <= 0:
            raise GridValidationError(
                f"Branch {self.id} has zero series impedance",
                invariant="branch-impedance",
                context=make_context("grid_model.Branch", branch_id=self.id)
            )
        return self


class Grid(BaseModel):
    """Static topology and electrical parameters of a power grid."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    base_mva: float = Field(100.0, gt=0)
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    name: str = ""
    # Original case-file bus numbers, indexed by dense bus id (metadata only)
    bus_numbers: Optional[Tuple[int, ...]] = None

    @field_validator("buses")
    def check_bus_ids(cls, v: Tuple[Bus, ...]) -> Tuple[Bus, ...]:
        """Bus ids must be dense and ordered."""
        for position, bus in enumerate(v):
            if bus.id != position:
                raise GridValidationError(
                    f"Bus at position {position} has id {bus.id}",
                    invariant="bus-ids-dense",
                    context=make_context("grid_model.Grid", position=position, bus_id=bus.id)
                )
        return v

    @field_validator("branches")
    def check_branch_ids(cls, v: Tuple[Branch, ...]) -> Tuple[Branch, ...]:
        """Branch ids must be dense and ordered."""
        for position, branch in enumerate(v):
            if branch.id != position:
                raise GridValidationError(
                    f"Branch at position {position} has id {branch.id}",
                    invariant="branch-ids-dense",
                    context=make_context("grid_model.Grid", position=position, branch_id=branch.id)
                )
        return v

    @model_validator(mode="after")
    def check_topology(self) -> "Grid":
        """Endpoints exist, exactly one slack, and the graph is connected."""
        n_bus = len(self.buses)
        if n_bus == 0:
            raise GridValidationError("Grid has no buses", invariant="non-empty")
        for branch in self.branches:
            if branch.from_bus >= n_bus or branch.to_bus >= n_bus:
                raise GridValidationError(
                    f"Branch {branch.id} references a missing bus",
                    invariant="branch-endpoints",
                    context=make_context(
                        "grid_model.Grid", branch_id=branch.id,
                        from_bus=branch.from_bus, to_bus=branch.to_bus
                    )
                )
        slacks = [bus.id for bus in self.buses if bus.kind == BusKind.SLACK]
        if len(slacks) != 1:
            raise GridValidationError(
                f"Grid must have exactly one slack bus, found {len(slacks)}",
                invariant="single-slack",
                context=make_context("grid_model.Grid", slack_buses=slacks)
            )
        if self.bus_numbers is not None and len(self.bus_numbers) != n_bus:
            raise GridValidationError(
                "bus_numbers metadata does not match the bus count",
                invariant="bus-numbers-length"
            )
        if not check_connected(self):
            raise GridValidationError(
                "Grid is not connected",
                invariant="connected",
                context=make_context("grid_model.Grid", name=self.name)
            )
        return self

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def slack_bus(self) -> int:
        """Dense id of the slack bus."""
        return next(bus.id for bus in self.buses if bus.kind == BusKind.SLACK)

    def from_to(self) -> Tuple[np.ndarray, np.ndarray]:
        """Branch endpoint arrays (from, to), each of length |E|."""
        src = np.fromiter((br.from_bus for br in self.branches), dtype=np.int64, count=self.n_branch)
        dst = np.fromiter((br.to_bus for br in self.branches), dtype=np.int64, count=self.n_branch)
        return src, dst

    def edge_attrs(self) -> np.ndarray:
        """|E| x 2 array of (r, x)."""
        return np.array([[br.r, br.x] for br in self.branches], dtype=float).reshape(self.n_branch, 2)

    def bus_kinds(self) -> List[BusKind]:
        return [bus.kind for bus in self.buses]

    def topology_hash(self) -> str:
        """Stable digest of the bus count and the ordered branch set."""
        payload = {
            "n_bus": self.n_bus,
            "branches": [[br.from_bus, br.to_bus, repr(br.r), repr(br.x)] for br in self.branches],
        }
        digest = hashlib.sha256(json.dumps(payload, separators=(",", ":")).encode("utf-8"))
        return digest.hexdigest()[:16]


def _build_graph(grid: Grid, removed_branch: Optional[int] = None) -> nx.MultiGraph:
    """Undirected multigraph of the grid, optionally without one branch."""
    graph = nx.MultiGraph()
    graph.add_nodes_from(range(len(grid.buses)))
    for branch in grid.branches:
        if branch.id == removed_branch:
            continue
        graph.add_edge(branch.from_bus, branch.to_bus, key=branch.id)
    return graph


def adjacency(grid: Grid) -> List[List[Tuple[int, EndpointRole]]]:
    """Per-bus lists of (branch id, endpoint role)."""
    incident: List[List[Tuple[int, EndpointRole]]] = [[] for _ in grid.buses]
    for branch in grid.branches:
        incident[branch.from_bus].append((branch.id, EndpointRole.FROM))
        incident[branch.to_bus].append((branch.id, EndpointRole.TO))
    return incident


def degrees(grid: Grid) -> np.ndarray:
    """Number of incident branches per bus."""
    src, dst = grid.from_to()
    return np.bincount(src, minlength=grid.n_bus) + np.bincount(dst, minlength=grid.n_bus)


def check_connected(grid: Grid, removed_branch: Optional[int] = None) -> bool:
    """True iff the undirected graph without ``removed_branch`` is connected."""
    graph = _build_graph(grid, removed_branch)
    if graph.number_of_nodes() <= 1:
        return True
    return nx.is_connected(graph)


def is_slack_adjacent(grid: Grid, branch_id: int) -> bool:
    branch = grid.branches[branch_id]
    slack = grid.slack_bus
    return branch.from_bus == slack or branch.to_bus == slack


def remove_branch(grid: Grid, branch_id: int) -> Grid:
    """Return the N-1 grid without ``branch_id``; remaining branches are re-indexed densely."""
    if branch_id < 0 or branch_id >= grid.n_branch:
        raise GridValidationError(
            f"Branch {branch_id} does not exist",
            invariant="branch-exists",
            context=make_context("grid_model.remove_branch", branch_id=branch_id, n_branch=grid.n_branch)
        )
    if is_slack_adjacent(grid, branch_id):
        raise SlackAdjacentError(branch_id, grid.slack_bus)
    if not check_connected(grid, branch_id):
        raise WouldIslandError(branch_id)

    kept = [br for br in grid.branches if br.id != branch_id]
    branches = tuple(
        Branch(id=new_id, from_bus=br.from_bus, to_bus=br.to_bus, r=br.r, x=br.x)
        for new_id, br in enumerate(kept)
    )
    logger.debug("Removed branch %d from grid '%s'", branch_id, grid.name)
    return Grid(
        base_mva=grid.base_mva,
        buses=grid.buses,
        branches=branches,
        name=grid.name,
        bus_numbers=grid.bus_numbers,
    )


def eligible_contingencies(grid: Grid) -> List[int]:
    """Branch ids whose removal is an admissible N-1 contingency."""
    return [
        br.id for br in grid.branches
        if not is_slack_adjacent(grid, br.id) and check_connected(grid, br.id)
    ]


def grid_to_json(grid: Grid) -> str:
    """Canonical JSON text of ``grid``."""
    return grid.model_dump_json(by_alias=True, indent=2)


def grid_from_json(text: str) -> Grid:
    """Parse canonical grid JSON."""
    return Grid.model_validate_json(text)


def save_grid(grid: Grid, path: Union[str, Path]) -> None:
    Path(path).write_text(grid_to_json(grid), encoding="utf-8")


def load_grid(path: Union[str, Path]) -> Grid:
    return grid_from_json(Path(path).read_text(encoding="utf-8"))
