"""
Training and evaluation of the flow surrogate.

Training minimises the mean squared error of raw p.u. flows with AdamW;
the projection layer (when enabled) is part of the model, so no physics
penalty enters the loss. Evaluation reports the MSE together with the
active, reactive and combined KCL mismatch of the predictions.
"""

import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from kclflow.schemas.checkpoint import CheckpointMeta, TrainConfig
from kclflow.schemas.dataset import NormalizationStats, Regime, Scenario, SplitTag
from kclflow.schemas.report import EpochRecord, EvalReport, RunMetrics, TrainLog
from .errors.base import make_context
from .errors.projection import DimMismatchError
from .errors.surrogate import ShapeMismatchError
from .errors.training import EmptySplitError, NonFiniteLossError, TopologyMismatchError, TrainingError
from .grid_model import Grid
from .kcl_projection import ConstraintCache, KCLOperator, build_operator, residual
from .scenario_gen import Dataset, scenario_topology
from .surrogate_net import GraphIndex, SurrogateParams, backward, forward, init_params, PARAM_NAMES

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256


class KCLMetrics(NamedTuple):
    l_p: float
    l_q: float
    l_kcl: float


@dataclass
class TopologyBatch:
    """Normalized inputs and raw targets of all scenarios sharing one topology."""
    graph: GraphIndex
    operator: KCLOperator
    edges: np.ndarray
    x: np.ndarray
    b: np.ndarray
    y: np.ndarray
    indices: List[int]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class Checkpoint:
    """Trained weights plus everything needed to apply them to a dataset."""
    params: SurrogateParams
    normalization: NormalizationStats
    config: TrainConfig
    grid_hash: str = ""
    data_hash: str = ""
    train_data_path: Optional[str] = None

    def meta(self) -> CheckpointMeta:
        return CheckpointMeta(
            hidden_dim=self.params.hidden_dim,
            heads=self.params.heads,
            attention_dim=self.params.attention_dim,
            leaky_slope=self.params.leaky_slope,
            normalization=self.normalization,
            config=self.config,
            grid_hash=self.grid_hash,
            data_hash=self.data_hash,
            train_data_path=self.train_data_path,
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainLog
    # Wall time per epoch, reported in the run manifest rather than the log
    epoch_seconds: List[float] = field(default_factory=list)


@dataclass
class AdamWState:
    """First and second moment estimates plus the step counter."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: SurrogateParams) -> "AdamWState":
        return cls(m=params.zeros_like(), v=params.zeros_like())


@dataclass
class _MetricSums:
    sq_error: float = 0.0
    elements: int = 0
    sq_p: float = 0.0
    sq_q: float = 0.0
    bus_rows: int = 0
    scenarios: int = 0

    def add(self, operator: KCLOperator, pred: np.ndarray, target: np.ndarray, b: np.ndarray) -> None:
        self.sq_error += float(np.sum((pred - target) ** 2))
        self.elements += pred.size
        res = residual(operator, pred, b)
        n = operator.n_bus
        self.sq_p += float(np.sum(res[..., :n] ** 2))
        self.sq_q += float(np.sum(res[..., n:] ** 2))
        self.bus_rows += res[..., :n].size
        self.scenarios += pred.shape[0]

    @property
    def mse(self) -> float:
        return self.sq_error / self.elements

    def kcl(self) -> KCLMetrics:
        l_p = self.sq_p / self.bus_rows
        l_q = self.sq_q / self.bus_rows
        return KCLMetrics(l_p, l_q, 0.5 * (l_p + l_q))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over every component and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatchError("prediction/target", target.shape, pred.shape)
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def kcl_metric(
    grid: Union[Grid, KCLOperator],
    net_p: np.ndarray,
    net_q: np.ndarray,
    pred: np.ndarray,
    cache: Optional[ConstraintCache] = None,
) -> KCLMetrics:
    """Mean squared active/reactive injection mismatch of predicted flows.

    Works on a single FlowSet or a batch (leading axis); means run over
    every bus of every scenario.
    """
    if isinstance(grid, KCLOperator):
        operator = grid
    else:
        operator = cache.get_or_build(grid) if cache is not None else build_operator(grid)
    net_p = np.asarray(net_p, dtype=float)
    net_q = np.asarray(net_q, dtype=float)
    for what, values in (("net_p", net_p), ("net_q", net_q)):
        if values.shape[-1] != operator.n_bus:
            raise DimMismatchError(what, (operator.n_bus,), tuple(values.shape))
    res = residual(operator, pred, np.concatenate([net_p, net_q], axis=-1))
    n = operator.n_bus
    l_p = float(np.mean(res[..., :n] ** 2))
    l_q = float(np.mean(res[..., n:] ** 2))
    return KCLMetrics(l_p, l_q, 0.5 * (l_p + l_q))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to a global L2 norm of at most ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(
    params: SurrogateParams,
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    cfg: TrainConfig,
) -> SurrogateParams:
    """One AdamW update of ``params`` in place (decay, then the Adam step)."""
    if cfg.grad_clip is not None:
        clip_gradients(grads, cfg.grad_clip)
    beta1, beta2 = cfg.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name in PARAM_NAMES:
        p = getattr(params, name)
        g = grads[name]
        p *= 1.0 - cfg.lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)

    params.bump()
    return params


def _group_key(scenario: Scenario) -> int:
    return -1 if scenario.removed_branch is None else scenario.removed_branch


def prepare_batches(
    scenarios: Sequence[Scenario],
    grid: Grid,
    stats: NormalizationStats,
    cache: Optional[ConstraintCache] = None,
) -> List[TopologyBatch]:
    """Group scenarios by topology and stack their normalized arrays."""
    if cache is None:
        cache = ConstraintCache()
    by_topology: Dict[int, List[int]] = {}
    for position, scenario in enumerate(scenarios):
        by_topology.setdefault(_group_key(scenario), []).append(position)

    topologies: Dict[int, Grid] = {}
    batches = []
    for key in sorted(by_topology):
        members = [scenarios[i] for i in by_topology[key]]
        topology = scenario_topology(grid, members[0], topologies)
        if topology.topology_hash() != members[0].grid_ref:
            raise TopologyMismatchError(
                f"Scenario {members[0].index} does not belong to grid '{grid.name}'",
                context=make_context("train_eval.prepare_batches", grid_ref=members[0].grid_ref)
            )
        batches.append(TopologyBatch(
            graph=GraphIndex.from_grid(topology),
            operator=cache.get_or_build(topology),
            edges=stats.normalize_edges(topology.edge_attrs()),
            x=np.stack([stats.normalize_nodes(s.node_array()) for s in members]),
            b=np.stack([np.concatenate([s.net_p_array(), s.net_q_array()]) for s in members]),
            y=np.stack([s.flows_array() for s in members]),
            indices=[s.index for s in members],
        ))
    return batches


def score_batches(
    params: SurrogateParams,
    batches: Sequence[TopologyBatch],
    with_projection: bool,
    batch_size: int = EVAL_BATCH_SIZE,
) -> _MetricSums:
    sums = _MetricSums()
    for group in batches:
        for start in range(0, len(group), batch_size):
            rows = slice(start, start + batch_size)
            pred, _ = forward(params, group.graph, group.x[rows], group.edges,
                              group.operator, group.b[rows], with_projection)
            sums.add(group.operator, pred, group.y[rows], group.b[rows])
    return sums


def _minibatches(batches: Sequence[TopologyBatch], batch_size: int, rng: np.random.Generator):
    plan = []
    for group_id, group in enumerate(batches):
        order = rng.permutation(len(group))
        for start in range(0, len(group), batch_size):
            plan.append((group_id, order[start:start + batch_size]))
    return [plan[i] for i in rng.permutation(len(plan))]


def _require_training_data(dataset: Dataset, grid: Grid) -> NormalizationStats:
    if dataset.regime != Regime.N:
        raise TrainingError(
            message="Training data must come from the N regime",
            error_code="TRAIN-TRAIN-REGIME-001"
        )
    if dataset.header.normalization is None:
        raise TrainingError(
            message="Dataset has no normalization statistics; split it first",
            error_code="TRAIN-TRAIN-STATS-001",
            suggestions=["Run split_dataset before training"]
        )
    if dataset.header.topology_hash != grid.topology_hash():
        raise TopologyMismatchError(
            f"Dataset topology {dataset.header.topology_hash} does not match grid '{grid.name}'",
            details={"dataset": dataset.header.topology_hash, "grid": grid.topology_hash()}
        )
    return dataset.header.normalization


def train(
    dataset: Dataset,
    grid: Grid,
    cfg: TrainConfig,
    cache: Optional[ConstraintCache] = None,
    data_hash: str = "",
    train_data_path: Optional[str] = None,
) -> TrainResult:
    """Fit a surrogate on the train split of ``dataset``.

    Args:
        dataset: Split N-regime dataset with normalization statistics
        grid: Base grid the dataset was generated on
        cfg: Training configuration
        cache: Shared constraint cache
        data_hash: Content hash of the dataset file, recorded in the checkpoint
        train_data_path: Dataset location, recorded for later retraining

    Returns:
        TrainResult with the checkpoint and the per-epoch log

    Raises:
        EmptySplitError: The dataset has no train scenario
        NonFiniteLossError: A batch loss became NaN or infinite
    """
    stats = _require_training_data(dataset, grid)
    train_scenarios = dataset.split(SplitTag.TRAIN)
    if not train_scenarios:
        raise EmptySplitError(SplitTag.TRAIN.value)
    val_scenarios = dataset.split(SplitTag.VAL)

    if cache is None:
        cache = ConstraintCache()
    train_batches = prepare_batches(train_scenarios, grid, stats, cache)
    val_batches = prepare_batches(val_scenarios, grid, stats, cache) if val_scenarios else []

    params = init_params(cfg.hidden_dim, cfg.heads, seed=cfg.seed,
                         attention_dim=cfg.attention_dim, leaky_slope=cfg.leaky_slope)
    state = AdamWState.zeros(params)
    rng = np.random.default_rng([cfg.seed, 1])
    log = TrainLog(seed=cfg.seed, with_projection=cfg.with_projection)
    epoch_seconds: List[float] = []
    if val_batches:
        log.initial_val_mse = score_batches(params, val_batches, cfg.with_projection).mse

    logger.info(
        "Training on %d scenarios (%d val), %d epochs, batch %d, projection=%s, seed=%d",
        len(train_scenarios), len(val_scenarios), cfg.epochs, cfg.batch_size, cfg.with_projection, cfg.seed
    )

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        sums = _MetricSums()
        for batch_no, (group_id, rows) in enumerate(_minibatches(train_batches, cfg.batch_size, rng)):
            group = train_batches[group_id]
            pred, tape = forward(params, group.graph, group.x[rows], group.edges,
                                 group.operator, group.b[rows], cfg.with_projection)
            loss, grad = mse_loss(pred, group.y[rows])
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, batch_no, loss, context=make_context(
                    "train_eval.train", seed=cfg.seed, lr=cfg.lr
                ))
            sums.add(group.operator, pred, group.y[rows], group.b[rows])
            grads = backward(params, group.graph, tape, grad)
            adamw_step(params, grads, state, cfg)

        record = EpochRecord(
            epoch=epoch,
            train_mse=sums.mse,
            train_kcl=sums.kcl().l_kcl,
        )
        if val_batches:
            val = score_batches(params, val_batches, cfg.with_projection)
            record.val_mse = val.mse
            record.val_kcl = val.kcl().l_kcl
        log.epochs.append(record)
        epoch_seconds.append(time.perf_counter() - started)
        logger.info(
            "Epoch %d/%d train_mse=%.6f train_kcl=%.3e val_mse=%s val_kcl=%s",
            epoch, cfg.epochs, record.train_mse, record.train_kcl,
            "-" if record.val_mse is None else f"{record.val_mse:.6f}",
            "-" if record.val_kcl is None else f"{record.val_kcl:.3e}",
        )

    checkpoint = Checkpoint(
        params=params,
        normalization=stats,
        config=cfg,
        grid_hash=grid.topology_hash(),
        data_hash=data_hash,
        train_data_path=train_data_path,
    )
    return TrainResult(checkpoint=checkpoint, log=log, epoch_seconds=epoch_seconds)


def check_compatible(checkpoint: Checkpoint, dataset: Dataset, grid: Grid) -> None:
    """Raise TopologyMismatchError unless ``dataset`` can be scored with ``checkpoint``."""
    if dataset.header.topology_hash != grid.topology_hash():
        raise TopologyMismatchError(
            f"Dataset topology {dataset.header.topology_hash} does not match grid '{grid.name}'",
            details={"dataset": dataset.header.topology_hash, "grid": grid.topology_hash()}
        )
    stats = dataset.header.normalization
    if stats is None:
        raise TopologyMismatchError("Dataset has no normalization statistics")
    ours = checkpoint.normalization
    for name in ("node_mean", "node_std", "edge_mean", "edge_std"):
        if not np.allclose(getattr(ours, name), getattr(stats, name), rtol=1e-12, atol=0.0):
            raise TopologyMismatchError(
                f"Normalization '{name}' of the checkpoint differs from the dataset header",
                details={"checkpoint": list(getattr(ours, name)), "dataset": list(getattr(stats, name))}
            )


def _test_scenarios(dataset: Dataset, split: Union[SplitTag, str]) -> List[Scenario]:
    scenarios = dataset.split(split)
    if not scenarios:
        raise EmptySplitError(SplitTag(split).value)
    return scenarios


def score(
    checkpoint: Checkpoint,
    dataset: Dataset,
    grid: Grid,
    split: Union[SplitTag, str] = SplitTag.TEST,
    cache: Optional[ConstraintCache] = None,
    with_projection: Optional[bool] = None,
) -> RunMetrics:
    """Metrics of one checkpoint on one split."""
    check_compatible(checkpoint, dataset, grid)
    with_projection = checkpoint.config.with_projection if with_projection is None else with_projection
    batches = prepare_batches(_test_scenarios(dataset, split), grid, checkpoint.normalization, cache)
    sums = score_batches(checkpoint.params, batches, with_projection)
    kcl = sums.kcl()
    return RunMetrics(
        seed=checkpoint.config.seed,
        mse=sums.mse,
        l_p=kcl.l_p,
        l_q=kcl.l_q,
        kcl_violation=kcl.l_kcl,
        scenarios=sums.scenarios,
    )


def build_report(
    per_run: Sequence[RunMetrics],
    dataset: Dataset,
    with_projection: bool,
    config: Optional[TrainConfig] = None,
) -> EvalReport:
    """Aggregate per-run metrics into mean (and population std when runs > 1)."""
    def stat(name: str) -> Tuple[float, Optional[float]]:
        values = np.array([getattr(r, name) for r in per_run])
        return float(values.mean()), (float(values.std()) if len(values) > 1 else None)

    mse, mse_std = stat("mse")
    l_p, l_p_std = stat("l_p")
    l_q, l_q_std = stat("l_q")
    return EvalReport(
        grid_name=dataset.header.grid_name,
        topology_hash=dataset.header.topology_hash,
        regime=dataset.regime,
        with_projection=with_projection,
        runs=len(per_run),
        seeds=[r.seed for r in per_run],
        per_run=list(per_run),
        mse=mse,
        l_p=l_p,
        l_q=l_q,
        kcl_violation=0.5 * (l_p + l_q),
        mse_std=mse_std,
        l_p_std=l_p_std,
        l_q_std=l_q_std,
        kcl_violation_std=stat("kcl_violation")[1],
        config=config.model_dump() if config is not None else {},
    )


def evaluate_runs(
    train_dataset: Dataset,
    test_datasets: Sequence[Dataset],
    grid: Grid,
    cfg: TrainConfig,
    runs: int,
    cache: Optional[ConstraintCache] = None,
    split: Union[SplitTag, str] = SplitTag.TEST,
) -> List[EvalReport]:
    """Retrain with seeds 0..runs-1 and score every run on each test dataset."""
    if runs < 1:
        raise TrainingError(message=f"runs must be >= 1, got {runs}", error_code="TRAIN-EVAL-RUNS-001")
    if cache is None:
        cache = ConstraintCache()
    per_dataset: List[List[RunMetrics]] = [[] for _ in test_datasets]
    for seed in range(runs):
        logger.info("Run %d/%d (seed %d)", seed + 1, runs, seed)
        result = train(train_dataset, grid, cfg.model_copy(update={"seed": seed}), cache)
        for metrics, test in zip(per_dataset, test_datasets):
            metrics.append(score(result.checkpoint, test, grid, split, cache))
    return [
        build_report(metrics, test, cfg.with_projection, cfg)
        for metrics, test in zip(per_dataset, test_datasets)
    ]


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    grid: Grid,
    runs: int = 1,
    train_dataset: Optional[Dataset] = None,
    cache: Optional[ConstraintCache] = None,
    split: Union[SplitTag, str] = SplitTag.TEST,
) -> EvalReport:
    """Score ``checkpoint`` on the test split of ``dataset``.

    With ``runs > 1`` the checkpoint's configuration is retrained from seeds
    0..runs-1 on ``train_dataset`` and the report carries mean and std.

    Raises:
        TopologyMismatchError: Normalization or topology disagree with the dataset
        EmptySplitError: The dataset has no scenario in ``split``
    """
    check_compatible(checkpoint, dataset, grid)
    if runs > 1:
        if train_dataset is None:
            raise TrainingError(
                message=f"Evaluating {runs} runs needs the training dataset to retrain from",
                error_code="TRAIN-EVAL-RUNS-002"
            )
        return evaluate_runs(train_dataset, [dataset], grid, checkpoint.config, runs, cache, split)[0]
    metrics = score(checkpoint, dataset, grid, split, cache)
    return build_report([metrics], dataset, checkpoint.config.with_projection, checkpoint.config)


def time_inference(
    checkpoint: Checkpoint,
    dataset: Dataset,
    grid: Grid,
    split: Union[SplitTag, str] = SplitTag.TEST,
    cache: Optional[ConstraintCache] = None,
) -> float:
    """Mean wall time of one surrogate forward pass per scenario, in seconds."""
    batches = prepare_batches(_test_scenarios(dataset, split), grid, checkpoint.normalization, cache)
    started = time.perf_counter()
    sums = score_batches(checkpoint.params, batches, checkpoint.config.with_projection)
    return (time.perf_counter() - started) / sums.scenarios


_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    """Write weights and JSON metadata into one ``.npz`` container."""
    path = Path(path)
    arrays = {"metadata": np.array(checkpoint.meta().model_dump_json()), **checkpoint.params.as_dict()}
    # Fixed entry timestamps: the same checkpoint always yields the same bytes
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in arrays.items():
            entry = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            with archive.open(entry, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(value), allow_pickle=False)
    logger.info("Saved checkpoint (%d parameters) to %s", checkpoint.params.num_parameters(), path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        TrainingError: The file is not a valid checkpoint
        ShapeMismatchError: Stored arrays disagree with the stored hyper-parameters
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = CheckpointMeta.model_validate(json.loads(str(data["metadata"])))
            arrays = {name: np.array(data[name], dtype=float) for name in PARAM_NAMES}
    except (KeyError, ValueError, ValidationError) as e:
        raise TrainingError(
            message=f"{path} is not a valid checkpoint: {e}",
            error_code="TRAIN-CKPT-FORMAT-001",
            details={"path": str(path)}
        ) from e

    params = SurrogateParams(**arrays, leaky_slope=meta.leaky_slope)
    params.validate()
    if (params.hidden_dim, params.heads, params.attention_dim) != (meta.hidden_dim, meta.heads, meta.attention_dim):
        raise ShapeMismatchError(
            "checkpoint dimensions",
            (meta.hidden_dim, meta.heads, meta.attention_dim),
            (params.hidden_dim, params.heads, params.attention_dim),
        )
    return Checkpoint(
        params=params,
        normalization=meta.normalization,
        config=meta.config,
        grid_hash=meta.grid_hash,
        data_hash=meta.data_hash,
        train_data_path=meta.train_data_path,
    )
