"""
Case file ingest.

Reads MATPOWER-style ``.m`` case text (``mpc.baseMVA``, ``mpc.bus``,
``mpc.gen``, ``mpc.branch``) into a ``RawCase`` and lowers it to a validated
per-unit ``Grid``. Only the columns the surrogate uses are consumed; ratings,
taps, shunts and charging are skipped and counted in ``ignored_cells``.
"""

import logging
import math
import re
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field

from .errors.base import make_context
from .errors.parser import (
    CaseSyntaxError,
    DanglingReferenceError,
    MissingTableError,
    MultipleSlackError,
    NoSlackError,
)
from .grid_model import Branch, Bus, BusKind, Grid, grid_from_json

logger = logging.getLogger(__name__)

# MATPOWER bus type codes
_TYPE_CODES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}

# Minimum column count per table and the column indices we read
_MIN_COLUMNS = {"bus": 9, "gen": 6, "branch": 4}
_USED_COLUMNS = {
    "bus": (0, 1, 2, 3, 7, 8),
    "gen": (0, 1, 2, 5, 7),
    "branch": (0, 1, 2, 3, 10),
}
_REQUIRED_TABLES = ("bus", "gen", "branch")

_FUNCTION_RE = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")
_ASSIGN_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


class BusRow(BaseModel):
    """One row of the bus table (MW/MVAr, degrees)."""
    number: int
    type_code: int
    pd: float
    qd: float
    vm: float
    va: float
    line: int = 0


class GenRow(BaseModel):
    """One row of the generator table."""
    bus: int
    pg: float
    qg: float
    vg: float
    status: int = 1
    line: int = 0


class BranchRow(BaseModel):
    """One row of the branch table."""
    fbus: int
    tbus: int
    r: float
    x: float
    status: int = 1
    line: int = 0


class RawCase(BaseModel):
    """Tables of a case file before per-unit lowering."""
    name: str = ""
    base_mva: float = Field(..., gt=0)
    buses: List[BusRow]
    gens: List[GenRow]
    branches: List[BranchRow]
    ignored_cells: int = 0
    warnings: List[str] = Field(default_factory=list)

    def counts(self) -> Tuple[int, int, int]:
        """(bus rows, gen rows, branch rows)."""
        return len(self.buses), len(self.gens), len(self.branches)


def _parse_number(token: str, line_number: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise CaseSyntaxError(
            f"'{token}' is not a number",
            line_number,
            context=make_context("case_parser.parse_case_text", token=token)
        )
    if not math.isfinite(value):
        raise CaseSyntaxError(f"'{token}' is not finite", line_number)
    return value


def _as_int(value: float, what: str, line_number: int) -> int:
    if value != int(value):
        raise CaseSyntaxError(f"{what} must be an integer, got {value}", line_number)
    return int(value)


def _read_row(table: str, cells: List[float], line_number: int) -> BaseModel:
    """Build the typed row for ``table`` from its numeric cells."""
    if len(cells) < _MIN_COLUMNS[table]:
        raise CaseSyntaxError(
            f"'{table}' row has {len(cells)} columns, at least {_MIN_COLUMNS[table]} required",
            line_number
        )

    if table == "bus":
        type_code = _as_int(cells[1], "bus type", line_number)
        if type_code not in _TYPE_CODES:
            raise CaseSyntaxError(f"unsupported bus type code {type_code}", line_number)
        return BusRow(
            number=_as_int(cells[0], "bus number", line_number),
            type_code=type_code,
            pd=cells[2],
            qd=cells[3],
            vm=cells[7],
            va=cells[8],
            line=line_number,
        )
    if table == "gen":
        status = _as_int(cells[7], "gen status", line_number) if len(cells) > 7 else 1
        return GenRow(
            bus=_as_int(cells[0], "gen bus", line_number),
            pg=cells[1],
            qg=cells[2],
            vg=cells[5],
            status=status,
            line=line_number,
        )
    status = _as_int(cells[10], "branch status", line_number) if len(cells) > 10 else 1
    return BranchRow(
        fbus=_as_int(cells[0], "branch fbus", line_number),
        tbus=_as_int(cells[1], "branch tbus", line_number),
        r=cells[2],
        x=cells[3],
        status=status,
        line=line_number,
    )


def parse_case_text(source: str) -> RawCase:
    """Parse MATPOWER-style case text.

    Args:
        source: Full text of the case file

    Returns:
        RawCase with one row per data line of each consumed matrix

    Raises:
        CaseSyntaxError: A row is malformed (carries the line number)
        MissingTableError: baseMVA, bus, gen or branch is absent or empty
    """
    name = ""
    base_mva: Optional[float] = None
    rows: Dict[str, List[BaseModel]] = defaultdict(list)
    seen_tables = set()
    ignored_cells = 0
    seen_numbers: Dict[int, int] = {}

    current: Optional[str] = None
    start_line = 0

    for line_number, raw_line in enumerate(source.splitlines(), start=1):
        line = raw_line.split("%", 1)[0].strip()
        if not line:
            continue

        if current is None:
            match = _FUNCTION_RE.match(line)
            if match:
                name = match.group(1)
                continue
            match = _ASSIGN_RE.match(line)
            if not match:
                continue
            key, rest = match.group(1), match.group(2).strip()
            if rest.startswith("[") or rest.startswith("{"):
                current = key
                start_line = line_number
                seen_tables.add(key)
                line = rest[1:].strip()
                if not line:
                    continue
            elif key == "baseMVA":
                base_mva = _parse_number(rest.rstrip(";").strip(), line_number)
                continue
            else:
                continue

        # Inside a matrix: rows end with ';', the matrix with ']' or '}'
        closed = False
        for closer in ("]", "}"):
            if closer in line:
                line = line.split(closer, 1)[0]
                closed = True
                break

        if current in _REQUIRED_TABLES:
            for segment in line.split(";"):
                tokens = segment.replace(",", " ").split()
                if not tokens:
                    continue
                cells = [_parse_number(tok, line_number) for tok in tokens]
                row = _read_row(current, cells, line_number)
                used = sum(1 for idx in _USED_COLUMNS[current] if idx < len(cells))
                ignored_cells += len(cells) - used
                if isinstance(row, BusRow):
                    if row.number in seen_numbers:
                        raise CaseSyntaxError(
                            f"bus number {row.number} already defined on line {seen_numbers[row.number]}",
                            line_number
                        )
                    seen_numbers[row.number] = line_number
                rows[current].append(row)

        if closed:
            logger.debug("Read table '%s' (lines %d-%d)", current, start_line, line_number)
            current = None

    if current is not None:
        raise CaseSyntaxError(f"matrix '{current}' is never closed", start_line)
    if base_mva is None:
        raise MissingTableError("baseMVA")
    if base_mva <= 0:
        raise CaseSyntaxError(f"baseMVA must be positive, got {base_mva}", 0)
    for table in _REQUIRED_TABLES:
        if table not in seen_tables or not rows[table]:
            raise MissingTableError(table)

    warnings = [
        f"line {row.line}: out-of-service {table} row will be dropped"
        for table in ("gen", "branch")
        for row in rows[table]
        if row.status == 0
    ]
    raw = RawCase(
        name=name,
        base_mva=base_mva,
        buses=rows["bus"],
        gens=rows["gen"],
        branches=rows["branch"],
        ignored_cells=ignored_cells,
        warnings=warnings,
    )
    for warning in warnings:
        logger.warning(warning)
    logger.info(
        "Parsed case '%s': %d buses, %d gens, %d branches (%d ignored cells)",
        name, *raw.counts(), ignored_cells
    )
    return raw


def lower_case(raw: RawCase) -> Grid:
    """Convert a RawCase into a per-unit Grid.

    Raises:
        NoSlackError: No bus has type code 3
        MultipleSlackError: More than one bus has type code 3
        DanglingReferenceError: A gen or branch row names an unknown bus
    """
    slack_numbers = [row.number for row in raw.buses if row.type_code == 3]
    if not slack_numbers:
        raise NoSlackError()
    if len(slack_numbers) > 1:
        raise MultipleSlackError(slack_numbers)

    index = {row.number: position for position, row in enumerate(raw.buses)}
    base = raw.base_mva

    pg = [0.0] * len(raw.buses)
    qg = [0.0] * len(raw.buses)
    vg: List[Optional[float]] = [None] * len(raw.buses)
    out_of_service_gens = 0
    for gen in raw.gens:
        if gen.bus not in index:
            raise DanglingReferenceError("gen", gen.bus)
        if gen.status == 0:
            out_of_service_gens += 1
            continue
        position = index[gen.bus]
        pg[position] += gen.pg
        qg[position] += gen.qg
        if vg[position] is None:
            vg[position] = gen.vg

    buses = []
    for position, row in enumerate(raw.buses):
        kind = _TYPE_CODES[row.type_code]
        if kind == BusKind.PV and vg[position] is None:
            logger.warning("PV bus %d has no in-service generator; treated as PQ", row.number)
            kind = BusKind.PQ
        vm = vg[position] if kind != BusKind.PQ and vg[position] is not None else row.vm
        buses.append(Bus(
            id=position,
            kind=kind,
            p_nom=(pg[position] - row.pd) / base,
            q_nom=(qg[position] - row.qd) / base,
            vm_nom=vm,
            va_nom=math.radians(row.va),
        ))

    branches = []
    dropped = 0
    for row in raw.branches:
        for bus_number in (row.fbus, row.tbus):
            if bus_number not in index:
                raise DanglingReferenceError("branch", bus_number)
        if row.status == 0:
            dropped += 1
            continue
        branches.append(Branch(
            id=len(branches),
            from_bus=index[row.fbus],
            to_bus=index[row.tbus],
            r=row.r,
            x=row.x,
        ))

    if out_of_service_gens or dropped:
        logger.warning(
            "Case '%s': dropped %d out-of-service generators and %d out-of-service branches",
            raw.name, out_of_service_gens, dropped
        )

    grid = Grid(
        base_mva=base,
        buses=tuple(buses),
        branches=tuple(branches),
        name=raw.name,
        bus_numbers=tuple(row.number for row in raw.buses),
    )
    logger.info("Lowered case '%s' to a grid with %d buses and %d branches",
                raw.name, grid.n_bus, grid.n_branch)
    return grid


def parse_case_file(path: Union[str, Path]) -> RawCase:
    """Read and parse a UTF-8 case file."""
    return parse_case_text(Path(path).read_text(encoding="utf-8"))


def load_grid_file(path: Union[str, Path]) -> Grid:
    """Load a grid from either canonical JSON (``.json``) or case text."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return grid_from_json(path.read_text(encoding="utf-8"))
    return lower_case(parse_case_file(path))


def fixture_path(name: str) -> Path:
    """Path of a checked-in case fixture such as ``case14``."""
    return Path(__file__).resolve().parent.parent / "data" / "cases" / f"{name}.m"
