"""
Command implementations for the kclflow CLI.

Each ``cmd_*`` function takes the parsed arguments plus the resolved
settings, writes its artifacts and a manifest beside them, and returns an
exit code.
"""

import json
import logging
import time
from argparse import Namespace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from kclflow.config import Settings, get_settings, read_config_file
from kclflow.core.acpf_solver import branch_flows, build_ybus, nr_solve
from kclflow.core.case_parser import fixture_path, lower_case, parse_case_file, load_grid_file
from kclflow.core.errors.base import EXIT_OK, ConfigurationError, make_context
from kclflow.core.errors.management import (
    ArtifactIOError,
    CommandError,
    FixtureMissingError,
    with_management_error_handling,
)
from kclflow.core.grid_model import Grid, save_grid
from kclflow.core.kcl_projection import (
    ConstraintCache,
    build_system,
    kcl_residual,
    project_global,
    project_kaczmarz,
)
from kclflow.core.logging import run_log
from kclflow.core.scenario_gen import (
    Dataset,
    load_dataset,
    make_dataset,
    sample_scenario,
    save_dataset,
    scenario_seed,
    scenario_topology,
    split_dataset,
    validate_dataset,
)
from kclflow.core.surrogate_net import init_params
from kclflow.core.train_eval import (
    Checkpoint,
    evaluate,
    evaluate_runs,
    load_checkpoint,
    save_checkpoint,
    time_inference,
    train,
)
from kclflow.schemas.checkpoint import TrainConfig
from kclflow.schemas.dataset import Regime, SamplingConfig
from kclflow.schemas.report import ReproSummary, SummaryRow

from .monitoring import (
    RunRecorder,
    check_disk_space,
    file_sha256,
    manifest_path_for,
    print_json,
    print_summary,
)

logger = logging.getLogger("management.commands")

REPRO_SCALES: Dict[str, Dict[str, int]] = {
    "desk": {"n_count": 2000, "n1_count": 500, "runs": 3},
    "full": {"n_count": 20000, "n1_count": 5000, "runs": 10},
}
REPRO_GRIDS = ("case14", "case118")
MODEL_VARIANTS = (("projected", True), ("ablation", False))
N1_FRACTIONS = (0.0, 0.0, 1.0)


def _coerce(value: str) -> Any:
    """JSON lists in config files become tuples; everything else stays text for pydantic."""
    text = value.strip()
    if text.startswith("[") or text.startswith("("):
        return tuple(float(v) for v in text.strip("[]()").split(",") if v.strip())
    return text


def load_settings(config_path: Optional[str] = None, **overrides: Any) -> Settings:
    """Settings with precedence ``overrides`` > config file > environment > defaults."""
    values: Dict[str, Any] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ArtifactIOError(f"Config file not found: {path}", path=str(path))
        values.update({k: _coerce(v) for k, v in read_config_file(str(path)).items()})
    values.update({k: v for k, v in overrides.items() if v is not None})
    if not values:
        return get_settings()
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigurationError(
            message=f"Invalid settings: {e.errors(include_url=False)}",
            error_code="CFG-LOAD-002",
            context=make_context("management.commands.load_settings", config=config_path)
        ) from e


def resolve_grid(ref: str) -> Grid:
    """Load a grid from a file path or a fixture name such as ``case14``."""
    path = Path(ref)
    if path.is_file():
        return load_grid_file(path)
    fixture = fixture_path(ref)
    if fixture.is_file():
        return lower_case(parse_case_file(fixture))
    raise FixtureMissingError(ref)


def _input_path(ref: str) -> Optional[Path]:
    path = Path(ref)
    if path.is_file():
        return path
    fixture = fixture_path(ref)
    return fixture if fixture.is_file() else None


def _ensure_parent(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Union[str, Path], payload: Any) -> Path:
    path = _ensure_parent(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _recorder(command: str, args: Namespace, settings: Settings) -> RunRecorder:
    return RunRecorder(command, getattr(args, "argv", []), settings.model_dump(mode="json"))


def _finish_stdout_run(recorder: RunRecorder, settings: Settings, command: str) -> Path:
    """Write the manifest of a run that printed its result instead of writing a file."""
    return recorder.finish(Path(settings.manifest_dir) / f"{command}.manifest.json")


def _train_config(args: Namespace, settings: Settings) -> TrainConfig:
    overrides = {
        "lr": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "grad_clip": getattr(args, "grad_clip", None),
        "seed": getattr(args, "seed", None),
    }
    if getattr(args, "no_projection", False):
        overrides["with_projection"] = False
    return TrainConfig.from_settings(settings, **overrides)


@with_management_error_handling
def cmd_import(args: Namespace, settings: Settings) -> int:
    """Parse a case file (or fixture) and write canonical grid JSON."""
    recorder = _recorder("import", args, settings)
    source = _input_path(args.case)
    if source is None:
        raise FixtureMissingError(args.case)
    recorder.add_input(source)
    with recorder.stage("parse"):
        raw = parse_case_file(source)
        grid = lower_case(raw)
    for warning in raw.warnings:
        logger.warning(warning)
    if raw.ignored_cells:
        logger.info("Ignored %d cells outside the consumed columns", raw.ignored_cells)

    out = _ensure_parent(args.out)
    save_grid(grid, out)
    recorder.add_output(out)
    recorder.finish(manifest_path_for(out))
    logger.info("Imported '%s': %d buses, %d branches, topology %s",
                grid.name, grid.n_bus, grid.n_branch, grid.topology_hash())
    return EXIT_OK


@with_management_error_handling
def cmd_generate(args: Namespace, settings: Settings) -> int:
    """Generate, split and validate a scenario dataset."""
    recorder = _recorder("generate", args, settings)
    check_disk_space(Path(args.out).parent, settings.min_free_disk_mb)
    grid = resolve_grid(args.grid)
    source = _input_path(args.grid)
    if source is not None:
        recorder.add_input(source)
    regime = Regime(args.regime)
    sampling = SamplingConfig.from_settings(settings)
    recorder.seed("generate", args.seed)
    recorder.seed("split", args.split_seed)

    with recorder.stage("generate"):
        ds = make_dataset(grid, args.count, regime, args.seed, sampling, settings.workers)

    with recorder.stage("split"):
        if regime == Regime.N1:
            if not args.stats_from:
                raise CommandError(
                    "N-1 datasets need --stats-from <train dataset> for normalization statistics",
                    command="generate"
                )
            stats_ds = load_dataset(args.stats_from)
            recorder.add_input(args.stats_from)
            if stats_ds.header.normalization is None:
                raise CommandError(f"{args.stats_from} carries no normalization statistics", command="generate")
            ds = split_dataset(ds, N1_FRACTIONS, args.split_seed, stats=stats_ds.header.normalization)
        else:
            ds = split_dataset(ds, settings.split_fractions, args.split_seed)

    with recorder.stage("validate"):
        check = validate_dataset(ds, grid)
    if not check.ok:
        raise CommandError(
            f"{len(check.failures)} scenarios violate KCL (max residual {check.max_residual:.3e})",
            command="generate"
        )

    out = _ensure_parent(args.out)
    save_dataset(ds, out)
    recorder.add_output(out)
    recorder.finish(manifest_path_for(out))
    logger.info("Dataset %s: %s, max KCL residual %.2e", out, ds.split_sizes(), check.max_residual)
    return EXIT_OK


@with_management_error_handling
def cmd_solve(args: Namespace, settings: Settings) -> int:
    """Run the Newton-Raphson oracle on a grid's nominal (or sampled) operating point."""
    recorder = _recorder("solve", args, settings)
    grid = resolve_grid(args.grid)
    inputs = None
    if args.seed is not None:
        inputs = sample_scenario(grid, scenario_seed(args.seed, 0, 0), SamplingConfig.from_settings(settings))
        recorder.seed("sample", args.seed)

    with recorder.stage("solve"):
        admittance = build_ybus(grid)
        solution = nr_solve(grid, inputs, settings.solver_tol, settings.solver_max_iter, admittance)
        flows = branch_flows(grid, solution, admittance)

    payload = solution.to_dict()
    payload.update({"grid": grid.name, "topology_hash": grid.topology_hash(), "flows": flows.tolist()})
    logger.info("Converged in %d iterations, max mismatch %.3e", solution.iterations, solution.max_mismatch)
    if args.out:
        out = _write_json(args.out, payload)
        recorder.add_output(out)
        recorder.finish(manifest_path_for(out))
    else:
        print_json(payload)
        _finish_stdout_run(recorder, settings, "solve")
    return EXIT_OK


def _projection_input(args: Namespace, grid: Grid) -> Tuple[Grid, np.ndarray, np.ndarray, np.ndarray]:
    """(topology, flows, net_p, net_q) from --flows or from --data/--index with noise."""
    if args.flows:
        payload = json.loads(Path(args.flows).read_text(encoding="utf-8"))
        try:
            return grid, np.asarray(payload["flows"]), np.asarray(payload["net_p"]), np.asarray(payload["net_q"])
        except KeyError as e:
            raise CommandError(f"{args.flows} lacks field {e}", command="project") from e

    if not args.data:
        raise CommandError("Give either --flows or --data", command="project")
    ds = load_dataset(args.data)
    matches = [s for s in ds.scenarios if s.index == args.index]
    if not matches:
        raise CommandError(f"Scenario {args.index} not found in {args.data}", command="project")
    scenario = matches[0]
    topology = scenario_topology(grid, scenario)
    rng = np.random.default_rng(args.seed)
    flows = scenario.flows_array() + rng.normal(0.0, args.noise, scenario.flows_array().shape)
    return topology, flows, scenario.net_p_array(), scenario.net_q_array()


@with_management_error_handling
def cmd_project(args: Namespace, settings: Settings) -> int:
    """Project a FlowSet onto the KCL-feasible set."""
    recorder = _recorder("project", args, settings)
    grid = resolve_grid(args.grid)
    topology, flows, net_p, net_q = _projection_input(args, grid)
    system = build_system(topology, net_p, net_q, rtol=settings.svd_rtol)
    before = float(np.max(np.abs(kcl_residual(system, flows))))

    with recorder.stage("project"):
        if args.method == "pinv":
            projected = project_global(system, flows)
            extra: Dict[str, Any] = {}
        else:
            result = project_kaczmarz(system, flows, ordering=args.ordering, sweeps=args.sweeps,
                                      tol=settings.kaczmarz_tol, seed=args.seed)
            projected = result.flows
            extra = {"sweeps_used": result.sweeps_used, "converged": result.converged}

    payload = {
        "method": args.method,
        "topology_hash": topology.topology_hash(),
        "residual_before": before,
        "residual_after": float(np.max(np.abs(kcl_residual(system, projected)))),
        "distance": float(np.linalg.norm(projected - flows)),
        "flows": projected.tolist(),
        **extra,
    }
    logger.info("KCL residual %.3e -> %.3e (%s)", payload["residual_before"], payload["residual_after"], args.method)
    if args.out:
        out = _write_json(args.out, payload)
        recorder.add_output(out)
        recorder.finish(manifest_path_for(out))
    else:
        print_json({k: v for k, v in payload.items() if k != "flows"})
        _finish_stdout_run(recorder, settings, "project")
    return EXIT_OK


@with_management_error_handling
def cmd_train(args: Namespace, settings: Settings) -> int:
    """Train a surrogate and write a checkpoint plus its training log."""
    cfg = _train_config(args, settings)
    recorder = RunRecorder("train", getattr(args, "argv", []), {
        **settings.model_dump(mode="json"), "train": cfg.model_dump(mode="json")
    })
    check_disk_space(Path(args.out).parent, settings.min_free_disk_mb)
    grid = resolve_grid(args.grid)
    ds = load_dataset(args.data)
    data_record = recorder.add_input(args.data)
    recorder.seed("train", cfg.seed)

    with recorder.stage("train"):
        result = train(ds, grid, cfg, data_hash=data_record.sha256,
                       train_data_path=str(Path(args.data).resolve()))
    if result.epoch_seconds:
        recorder.manifest.timings["train:epoch_mean_s"] = float(np.mean(result.epoch_seconds))

    out = _ensure_parent(args.out)
    save_checkpoint(result.checkpoint, out)
    recorder.add_output(out)
    log_path = out.with_name(out.name + ".log.json")
    log_path.write_text(result.log.model_dump_json(indent=2), encoding="utf-8")
    recorder.add_output(log_path)
    recorder.finish(manifest_path_for(out))
    final = result.log.final
    if final is not None:
        logger.info("Final train MSE %.6f, val MSE %s", final.train_mse, final.val_mse)
    return EXIT_OK


@with_management_error_handling
def cmd_eval(args: Namespace, settings: Settings) -> int:
    """Score a checkpoint on a test split and write an EvalReport."""
    recorder = _recorder("eval", args, settings)
    checkpoint = load_checkpoint(args.ckpt)
    recorder.add_input(args.ckpt)
    ds = load_dataset(args.data)
    recorder.add_input(args.data)
    grid = resolve_grid(args.grid)
    runs = settings.runs if args.runs is None else args.runs

    train_ds: Optional[Dataset] = None
    if runs > 1:
        train_path = args.train_data or checkpoint.train_data_path
        if not train_path or not Path(train_path).is_file():
            raise CommandError("--runs > 1 needs --train-data (or a checkpoint that records it)", command="eval")
        if checkpoint.data_hash and file_sha256(train_path) != checkpoint.data_hash:
            logger.warning("Training data %s differs from the data the checkpoint was trained on", train_path)
        train_ds = load_dataset(train_path)
        recorder.add_input(train_path)

    with recorder.stage("evaluate"):
        report = evaluate(checkpoint, ds, grid, runs=runs, train_dataset=train_ds)

    cells = report.cells()
    logger.info("MSE %s, KCL violation %s over %d run(s)", cells["mse"], cells["kcl_violation"], report.runs)
    if args.report:
        out = _write_json(args.report, report.model_dump(mode="json"))
        recorder.add_output(out)
        recorder.finish(manifest_path_for(out))
    else:
        print_json(report.model_dump(mode="json"))
        _finish_stdout_run(recorder, settings, "eval")
    return EXIT_OK


def _time_oracle(grid: Grid, ds: Dataset, settings: Settings, samples: int = 20) -> float:
    """Mean Newton-Raphson solve time over the first ``samples`` scenarios, in seconds."""
    sampling = SamplingConfig.from_settings(settings)
    admittance = build_ybus(grid)
    chosen = [s for s in ds.scenarios if s.removed_branch is None][:samples]
    started = time.perf_counter()
    for scenario in chosen:
        inputs = sample_scenario(grid, scenario.seed, sampling)
        nr_solve(grid, inputs, settings.solver_tol, settings.solver_max_iter, admittance)
    return (time.perf_counter() - started) / max(len(chosen), 1)


def run_repro(
    workdir: Union[str, Path],
    settings: Settings,
    scale: str = "desk",
    grids: Sequence[str] = REPRO_GRIDS,
    recorder: Optional[RunRecorder] = None,
    counts: Optional[Dict[str, int]] = None,
) -> ReproSummary:
    """Generate data, train the projected model and the ablation, and tabulate test metrics per grid and regime."""
    if scale not in REPRO_SCALES:
        raise CommandError(f"Unknown scale '{scale}'", command="repro")
    plan = {**REPRO_SCALES[scale], **(counts or {})}
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    check_disk_space(workdir, settings.min_free_disk_mb)
    recorder = recorder or RunRecorder("repro", [], settings.model_dump(mode="json"))
    sampling = SamplingConfig.from_settings(settings)
    base_cfg = TrainConfig.from_settings(settings)
    summary = ReproSummary(scale=scale)

    for name in grids:
        fixture = fixture_path(name)
        if not fixture.is_file():
            raise FixtureMissingError(str(fixture))
        recorder.add_input(fixture)
        grid = lower_case(parse_case_file(fixture))
        cache = ConstraintCache(settings.svd_rtol)

        with recorder.stage(f"{name}:generate"):
            train_ds = split_dataset(
                make_dataset(grid, plan["n_count"], Regime.N, 0, sampling, settings.workers),
                settings.split_fractions, seed=0,
            )
            n1_ds = split_dataset(
                make_dataset(grid, plan["n1_count"], Regime.N1, 1, sampling, settings.workers),
                N1_FRACTIONS, seed=1, stats=train_ds.header.normalization,
            )
        for tag, ds in (("n", train_ds), ("n1", n1_ds)):
            path = workdir / f"{name}_{tag}.jsonl"
            save_dataset(ds, path)
            recorder.add_output(path)
        recorder.seed(f"{name}:n", 0)
        recorder.seed(f"{name}:n1", 1)

        for model, with_projection in MODEL_VARIANTS:
            cfg = base_cfg.model_copy(update={"with_projection": with_projection})
            with recorder.stage(f"{name}:{model}"):
                reports = evaluate_runs(train_ds, [train_ds, n1_ds], grid, cfg, plan["runs"], cache)
            for report in reports:
                cells = report.cells()
                summary.rows.append(SummaryRow(
                    grid=name, model=model, regime=report.regime,
                    mse=cells["mse"], kcl_violation=cells["kcl_violation"], report=report,
                ))

        timed_model = Checkpoint(
            params=init_params(base_cfg.hidden_dim, base_cfg.heads, seed=0,
                               attention_dim=base_cfg.attention_dim, leaky_slope=base_cfg.leaky_slope),
            normalization=train_ds.header.normalization,
            config=base_cfg,
        )
        recorder.manifest.timings[f"{name}:oracle_s"] = _time_oracle(grid, train_ds, settings)
        recorder.manifest.timings[f"{name}:surrogate_s"] = time_inference(timed_model, train_ds, grid, cache=cache)

    out = workdir / "summary.json"
    out.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    recorder.add_output(out)
    return summary


@with_management_error_handling
def cmd_repro(args: Namespace, settings: Settings) -> int:
    """Run the full experiment and print the result tables."""
    recorder = _recorder("repro", args, settings)
    workdir = Path(args.workdir)
    counts = {k: v for k, v in {"n_count": args.n_count, "n1_count": args.n1_count, "runs": args.runs}.items()
              if v is not None}
    try:
        with run_log(workdir / "repro.log", settings.log_level):
            summary = run_repro(workdir, settings, args.scale, args.grids, recorder, counts)
    except BaseException as e:
        recorder.fail(e)
        recorder.finish(workdir / "repro.manifest.json")
        raise
    recorder.finish(workdir / "repro.manifest.json")
    print_summary(summary)
    return EXIT_OK


COMMANDS = {
    "import": cmd_import,
    "generate": cmd_generate,
    "solve": cmd_solve,
    "project": cmd_project,
    "train": cmd_train,
    "eval": cmd_eval,
    "repro": cmd_repro,
}


def dispatch(args: Namespace, settings: Settings) -> int:
    handler = COMMANDS.get(args.command)
    if handler is None:
        raise CommandError(
            "Please specify a command. Use -h for help.",
            command=args.command,
            context=make_context("management.commands.dispatch", command=args.command)
        )
    return handler(args, settings)
