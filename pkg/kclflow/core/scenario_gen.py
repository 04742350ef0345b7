"""
Scenario generation.

Draws perturbed operating points around a grid's nominal values, optionally
removes one admissible branch (N-1), labels each point with the
Newton-Raphson oracle and assembles datasets with train/val/test splits and
normalization statistics.

Every scenario index derives its random stream from ``(seed, index, attempt)``,
so the dataset is identical for any number of workers.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from kclflow.schemas.dataset import (
    DatasetHeader,
    NormalizationStats,
    Regime,
    SamplingConfig,
    Scenario,
    SplitTag,
)
from .acpf_solver import PowerFlowInputs, branch_flows, build_ybus, nr_solve
from .errors.base import make_context
from .errors.solver import SolverError
from .errors.training import EmptySplitError, TooManyDivergencesError, TrainingError
from .grid_model import Grid, eligible_contingencies, remove_branch
from .kcl_projection import ConstraintCache, residual

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-6
_STD_FLOOR = 1e-12


class Dataset(BaseModel):
    """Header plus ordered scenarios."""
    header: DatasetHeader
    scenarios: List[Scenario]

    def split(self, tag: Union[SplitTag, str]) -> List[Scenario]:
        tag = SplitTag(tag)
        return [s for s in self.scenarios if s.split == tag]

    def split_sizes(self) -> Dict[str, int]:
        return {tag.value: len(self.split(tag)) for tag in SplitTag}

    def topology_hashes(self) -> List[str]:
        return sorted({s.grid_ref for s in self.scenarios})

    @property
    def regime(self) -> Regime:
        return self.header.regime


def scenario_seed(seed: int, index: int, attempt: int) -> int:
    """64-bit seed of one scenario attempt."""
    state = np.random.SeedSequence([seed, index, attempt]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def sample_scenario(
    grid: Grid,
    seed: Union[int, np.random.Generator],
    sampling: Optional[SamplingConfig] = None,
) -> PowerFlowInputs:
    """Draw per-bus (P, Q, Vm) around the nominal values.

    P, Q and Vm are normal around their nominals with the configured
    standard deviation; Vm is clipped to [vm_clip_min, vm_clip_max] and the
    slack keeps its nominal Vm and angle.
    """
    sampling = sampling or SamplingConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = sampling.std

    p_nom = np.array([bus.p_nom for bus in grid.buses])
    q_nom = np.array([bus.q_nom for bus in grid.buses])
    vm_nom = np.array([bus.vm_nom for bus in grid.buses])

    p = rng.normal(p_nom, std)
    q = rng.normal(q_nom, std)
    vm = np.clip(rng.normal(vm_nom, std), sampling.vm_clip_min, sampling.vm_clip_max)

    slack = grid.slack_bus
    vm[slack] = vm_nom[slack]
    return PowerFlowInputs(
        p_spec=p,
        q_spec=q,
        vm_spec=vm,
        va_slack=grid.buses[slack].va_nom,
    )


def edge_statistics(grid: Grid) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Mean and std of the (r, x) edge attributes of ``grid``."""
    attrs = grid.edge_attrs()
    mean = attrs.mean(axis=0) if attrs.size else np.zeros(2)
    std = attrs.std(axis=0) if attrs.size else np.ones(2)
    std = np.where(std < _STD_FLOOR, 1.0, std)
    return (float(mean[0]), float(mean[1])), (float(std[0]), float(std[1]))


@dataclass
class _Job:
    """Everything a worker needs to generate one scenario."""
    grid: Grid
    regime: Regime
    seed: int
    sampling: SamplingConfig
    eligible: Sequence[int]
    topologies: Dict[int, Grid] = field(default_factory=dict)

    def topology(self, branch_id: Optional[int]) -> Grid:
        if branch_id is None:
            return self.grid
        if branch_id not in self.topologies:
            self.topologies[branch_id] = remove_branch(self.grid, branch_id)
        return self.topologies[branch_id]


def generate_scenario(job: _Job, index: int) -> Scenario:
    """Draw, solve and label scenario ``index``, resampling on divergence."""
    for attempt in range(job.sampling.max_attempts):
        seed = scenario_seed(job.seed, index, attempt)
        rng = np.random.default_rng(seed)
        removed: Optional[int] = None
        if job.regime == Regime.N1:
            removed = int(job.eligible[rng.integers(len(job.eligible))])
        topology = job.topology(removed)
        inputs = sample_scenario(topology, rng, job.sampling)
        admittance = build_ybus(topology)
        try:
            sol = nr_solve(
                topology, inputs,
                tol=job.sampling.solver_tol,
                max_iter=job.sampling.solver_max_iter,
                admittance=admittance,
            )
        except SolverError as e:
            logger.warning("Scenario %d attempt %d failed (%s); resampling", index, attempt, e.error_code)
            continue

        flows = branch_flows(topology, sol, admittance)
        return Scenario(
            index=index,
            grid_ref=topology.topology_hash(),
            removed_branch=removed,
            seed=seed,
            attempts=attempt + 1,
            node_inputs=[tuple(row) for row in np.column_stack([sol.p_inj, sol.q_inj, sol.vm]).tolist()],
            target_flows=flows.tolist(),
            net_p=(-sol.p_inj).tolist(),
            net_q=(-sol.q_inj).tolist(),
        )

    raise TooManyDivergencesError(
        index, job.sampling.max_attempts,
        context=make_context("scenario_gen.make_dataset", grid=job.grid.name, seed=job.seed)
    )


def _generate_chunk(job: _Job, indices: Sequence[int]) -> List[Scenario]:
    return [generate_scenario(job, index) for index in indices]


def _chunks(count: int, n_chunks: int) -> List[List[int]]:
    return [list(chunk) for chunk in np.array_split(np.arange(count), n_chunks) if chunk.size]


def make_dataset(
    grid: Grid,
    count: int,
    regime: Union[Regime, str] = Regime.N,
    seed: int = 0,
    sampling: Optional[SamplingConfig] = None,
    workers: int = 1,
) -> Dataset:
    """Generate ``count`` labelled scenarios.

    Args:
        grid: Base grid
        count: Number of scenarios (>= 1)
        regime: "n" or "n1"
        seed: Master seed
        sampling: Sampling and solver parameters
        workers: Worker processes; output does not depend on this

    Raises:
        TooManyDivergencesError: A scenario index failed on every attempt
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    regime = Regime(regime)
    sampling = sampling or SamplingConfig()
    eligible: List[int] = []
    if regime == Regime.N1:
        eligible = eligible_contingencies(grid)
        if not eligible:
            raise TrainingError(
                message=f"Grid '{grid.name}' has no admissible N-1 contingency",
                error_code="TRAIN-GEN-N1-001"
            )
        logger.info("%d of %d branches are admissible contingencies", len(eligible), grid.n_branch)

    job = _Job(grid=grid, regime=regime, seed=seed, sampling=sampling, eligible=eligible)
    logger.info("Generating %d %s-regime scenarios for '%s' with %d worker(s)",
                count, regime.value, grid.name, workers)

    if workers <= 1:
        scenarios = _generate_chunk(job, range(count))
    else:
        chunks = _chunks(count, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_generate_chunk, [job] * len(chunks), chunks)
            scenarios = [scenario for chunk in results for scenario in chunk]

    edge_mean, edge_std = edge_statistics(grid)
    header = DatasetHeader(
        topology_hash=grid.topology_hash(),
        grid_name=grid.name,
        n_bus=grid.n_bus,
        n_branch=grid.n_branch,
        regime=regime,
        seed=seed,
        count=count,
        sampling=sampling,
        edge_mean=edge_mean,
        edge_std=edge_std,
        attempts=sum(s.attempts for s in scenarios),
    )
    resampled = header.attempts - count
    if resampled:
        logger.warning("%d scenario draws diverged and were resampled", resampled)
    return Dataset(header=header, scenarios=scenarios)


def node_statistics(scenarios: Iterable[Scenario]) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-feature mean and std over every bus of every scenario."""
    stacked = np.concatenate([s.node_array() for s in scenarios], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < _STD_FLOOR, 1.0, std)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def split_sizes(count: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    """(train, val, test) sizes; the test split takes the remainder."""
    n_train = int(round(fractions[0] * count))
    n_val = min(int(round(fractions[1] * count)), count - n_train)
    return n_train, n_val, count - n_train - n_val


def split_dataset(
    ds: Dataset,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    stats: Optional[NormalizationStats] = None,
) -> Dataset:
    """Shuffle deterministically, tag train/val/test and attach normalization stats.

    Node statistics come from the train split; N-1 datasets have no train
    split and must be given the training dataset's ``stats``.

    Raises:
        EmptySplitError: A split with a positive fraction got no scenario
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise TrainingError(
            message=f"Split fractions must be three non-negative numbers summing to 1, got {fractions}",
            error_code="TRAIN-SPLIT-FRACTIONS-001"
        )
    if ds.regime == Regime.N1 and fractions[0] > 0:
        raise TrainingError(
            message="N-1 scenarios cannot be placed in the train split",
            error_code="TRAIN-SPLIT-N1-001",
            suggestions=["Use fractions like (0, 0, 1) for N-1 datasets"]
        )

    sizes = split_sizes(len(ds.scenarios), fractions)
    for tag, fraction, size in zip(SplitTag, fractions, sizes):
        if fraction > 0 and size == 0:
            raise EmptySplitError(tag.value)

    order = np.random.default_rng(seed).permutation(len(ds.scenarios))
    tags = [SplitTag.TRAIN] * sizes[0] + [SplitTag.VAL] * sizes[1] + [SplitTag.TEST] * sizes[2]
    assignment = {int(position): tag for position, tag in zip(order, tags)}
    scenarios = [
        s.model_copy(update={"split": assignment[position]})
        for position, s in enumerate(ds.scenarios)
    ]

    if stats is None:
        train = [s for s in scenarios if s.split == SplitTag.TRAIN]
        if not train:
            raise EmptySplitError(SplitTag.TRAIN.value)
        node_mean, node_std = node_statistics(train)
        stats = NormalizationStats(
            node_mean=node_mean,
            node_std=node_std,
            edge_mean=ds.header.edge_mean,
            edge_std=ds.header.edge_std,
        )

    header = ds.header.model_copy(update={
        "normalization": stats,
        "split_seed": seed,
        "split_fractions": tuple(fractions),
    })
    logger.info("Split %d scenarios into train/val/test = %d/%d/%d", len(scenarios), *sizes)
    return Dataset(header=header, scenarios=scenarios)


@dataclass
class DatasetCheck:
    """Outcome of ``validate_dataset``."""
    checked: int
    max_residual: float
    failures: List[int]

    @property
    def ok(self) -> bool:
        return not self.failures


def scenario_topology(grid: Grid, scenario: Scenario, topologies: Optional[Dict[int, Grid]] = None) -> Grid:
    """Post-contingency grid of ``scenario``."""
    if scenario.removed_branch is None:
        return grid
    if topologies is None:
        return remove_branch(grid, scenario.removed_branch)
    if scenario.removed_branch not in topologies:
        topologies[scenario.removed_branch] = remove_branch(grid, scenario.removed_branch)
    return topologies[scenario.removed_branch]


def validate_dataset(
    ds: Dataset,
    grid: Grid,
    cache: Optional[ConstraintCache] = None,
    tol: float = FEASIBILITY_TOL,
) -> DatasetCheck:
    """Check every scenario's target flows satisfy KCL with its own injections."""
    if cache is None:
        cache = ConstraintCache()
    topologies: Dict[int, Grid] = {}
    failures: List[int] = []
    worst = 0.0
    for scenario in ds.scenarios:
        topology = scenario_topology(grid, scenario, topologies)
        if topology.topology_hash() != scenario.grid_ref:
            failures.append(scenario.index)
            continue
        operator = cache.get_or_build(topology)
        b = np.concatenate([scenario.net_p_array(), scenario.net_q_array()])
        value = float(np.max(np.abs(residual(operator, scenario.flows_array(), b))))
        worst = max(worst, value)
        if value > tol:
            failures.append(scenario.index)

    if failures:
        logger.warning("%d of %d scenarios fail the feasibility check", len(failures), len(ds.scenarios))
    return DatasetCheck(checked=len(ds.scenarios), max_residual=worst, failures=failures)


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    """Write ``ds`` as JSON-lines: header first, then one scenario per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(ds.header.model_dump_json() + "\n")
        for scenario in ds.scenarios:
            fh.write(scenario.model_dump_json() + "\n")
    logger.info("Wrote %d scenarios to %s", len(ds.scenarios), path)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a JSON-lines dataset written by ``save_dataset``."""
    path = Path(path)
    header: Optional[DatasetHeader] = None
    scenarios: List[Scenario] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                if header is None:
                    header = DatasetHeader.model_validate_json(line)
                else:
                    scenarios.append(Scenario.model_validate_json(line))
            except ValidationError as e:
                raise TrainingError(
                    message=f"{path}:{line_number}: malformed dataset line",
                    error_code="TRAIN-DATA-FORMAT-001",
                    details={"path": str(path), "line": line_number, "errors": e.errors(include_url=False)}
                ) from e
    if header is None:
        raise TrainingError(
            message=f"{path} is empty",
            error_code="TRAIN-DATA-FORMAT-002",
            details={"path": str(path)}
        )
    return Dataset(header=header, scenarios=scenarios)
