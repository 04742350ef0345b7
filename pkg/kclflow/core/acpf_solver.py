"""
AC power-flow oracle.

Series-only admittance assembly, a polar Newton-Raphson solver with a dense
LU step, and the branch-flow / injection bookkeeping used to label datasets.

Sign conventions: bus injections are positive for generation, branch flows
are positive when power leaves the bus and enters the line. A ``FlowSet`` is
a flat array of length 4|E| ordered (all p_from, all p_to, all q_from,
all q_to).
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, LinAlgWarning, lu_factor, lu_solve

from .errors.base import make_context
from .errors.projection import DimMismatchError
from .errors.solver import DivergedError, SingularJacobianError, ZeroImpedanceError
from .grid_model import BusKind, Grid

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


@dataclass(frozen=True)
class Admittance:
    """Bus admittance matrix Y = G + jB plus per-branch series admittances."""
    ybus: sp.csr_matrix
    branch_g: np.ndarray
    branch_b: np.ndarray

    @property
    def g(self) -> sp.csr_matrix:
        return self.ybus.real

    @property
    def b(self) -> sp.csr_matrix:
        return self.ybus.imag


@dataclass(frozen=True)
class PowerFlowInputs:
    """Specified values per bus.

    Only the entries a bus kind specifies are read: P and Q at PQ buses,
    P and Vm at PV buses, Vm at the slack (whose angle is ``va_slack``).
    """
    p_spec: np.ndarray
    q_spec: np.ndarray
    vm_spec: np.ndarray
    va_slack: float = 0.0


@dataclass(frozen=True)
class PFSolution:
    """Converged operating point."""
    vm: np.ndarray
    va: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    max_mismatch: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "vm": self.vm.tolist(),
            "va": self.va.tolist(),
            "p_inj": self.p_inj.tolist(),
            "q_inj": self.q_inj.tolist(),
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
        }


def nominal_inputs(grid: Grid) -> PowerFlowInputs:
    """Specified values taken from the grid's nominal bus data."""
    return PowerFlowInputs(
        p_spec=np.array([bus.p_nom for bus in grid.buses]),
        q_spec=np.array([bus.q_nom for bus in grid.buses]),
        vm_spec=np.array([bus.vm_nom for bus in grid.buses]),
        va_slack=grid.buses[grid.slack_bus].va_nom,
    )


def build_ybus(grid: Grid) -> Admittance:
    """Assemble the series-only bus admittance matrix.

    Raises:
        ZeroImpedanceError: A branch has r = x = 0
    """
    n = grid.n_bus
    src, dst = grid.from_to()
    rx = grid.edge_attrs()
    r, x = rx[:, 0], rx[:, 1]
    z2 = r * r + x * x
    zero = np.flatnonzero(z2 <= 0)
    if zero.size:
        raise ZeroImpedanceError(
            int(zero[0]),
            context=make_context("acpf_solver.build_ybus", branch_id=int(zero[0]))
        )

    g = r / z2
    b = -x / z2
    y = g + 1j * b

    rows = np.concatenate([src, dst, src, dst])
    cols = np.concatenate([dst, src, src, dst])
    data = np.concatenate([-y, -y, y, y])
    # coo -> csr sums duplicates, so parallel branches accumulate
    ybus = sp.coo_matrix((data, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    return Admittance(ybus=ybus, branch_g=g, branch_b=b)


def complex_voltage(vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    return vm * np.exp(1j * va)


def calculated_injections(admittance: Admittance, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    """Complex power injections S = V * conj(Y V)."""
    v = complex_voltage(vm, va)
    return v * np.conj(admittance.ybus @ v)


def bus_index_sets(grid: Grid) -> Tuple[np.ndarray, np.ndarray]:
    """(pvpq, pq) bus index arrays, each ascending."""
    kinds = grid.bus_kinds()
    pq = np.array([i for i, kind in enumerate(kinds) if kind == BusKind.PQ], dtype=np.int64)
    pvpq = np.array([i for i, kind in enumerate(kinds) if kind != BusKind.SLACK], dtype=np.int64)
    return pvpq, pq


def mismatch(
    admittance: Admittance,
    vm: np.ndarray,
    va: np.ndarray,
    inputs: PowerFlowInputs,
    pvpq: np.ndarray,
    pq: np.ndarray,
) -> np.ndarray:
    """Specified minus calculated injections: (dP at pv+pq, dQ at pq)."""
    s = calculated_injections(admittance, vm, va)
    dp = inputs.p_spec[pvpq] - s.real[pvpq]
    dq = inputs.q_spec[pq] - s.imag[pq]
    return np.concatenate([dp, dq])


def jacobian(
    admittance: Admittance,
    vm: np.ndarray,
    va: np.ndarray,
    pvpq: np.ndarray,
    pq: np.ndarray,
) -> np.ndarray:
    """Dense Jacobian of the calculated injections w.r.t. (va[pvpq], vm[pq])."""
    y = admittance.ybus.toarray()
    v = complex_voltage(vm, va)
    current = y @ v
    v_norm = v / vm

    diag_v = np.diag(v)
    diag_i = np.diag(current)
    diag_vnorm = np.diag(v_norm)

    ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
    ds_dvm = diag_v @ np.conj(y @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm

    j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
    j12 = ds_dvm.real[np.ix_(pvpq, pq)]
    j21 = ds_dva.imag[np.ix_(pq, pvpq)]
    j22 = ds_dvm.imag[np.ix_(pq, pq)]
    return np.block([[j11, j12], [j21, j22]])


def _newton_step(jac: np.ndarray, f: np.ndarray, iteration: int) -> np.ndarray:
    """Solve jac @ dx = f with a dense LU factorisation."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            lu, piv = lu_factor(jac)
            dx = lu_solve((lu, piv), f)
    except (LinAlgError, LinAlgWarning, ValueError) as e:
        raise SingularJacobianError(
            iteration,
            context=make_context("acpf_solver.nr_solve", iteration=iteration, error=str(e))
        ) from e
    if not np.all(np.isfinite(dx)):
        raise SingularJacobianError(iteration)
    return dx


def nr_solve(
    grid: Grid,
    inputs: Optional[PowerFlowInputs] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    admittance: Optional[Admittance] = None,
) -> PFSolution:
    """Solve the AC power-flow equations by Newton-Raphson from a flat start.

    Args:
        grid: Validated grid
        inputs: Specified values; defaults to the grid's nominal values
        tol: Convergence threshold on the infinity norm of the mismatch (p.u.)
        max_iter: Maximum number of Newton steps
        admittance: Pre-built admittance for ``grid``

    Returns:
        PFSolution with injections at every bus, slack and PV reactive included

    Raises:
        DivergedError: max_iter reached, or the mismatch became non-finite
        SingularJacobianError: The Jacobian could not be factorised
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    inputs = inputs if inputs is not None else nominal_inputs(grid)
    admittance = admittance if admittance is not None else build_ybus(grid)
    pvpq, pq = bus_index_sets(grid)
    n_pvpq = pvpq.size

    # Flat start: Vm = 1 and Va = 0 for unknowns
    vm = np.ones(grid.n_bus)
    va = np.zeros(grid.n_bus)
    specified_vm = np.array([kind != BusKind.PQ for kind in grid.bus_kinds()])
    vm[specified_vm] = inputs.vm_spec[specified_vm]
    va[grid.slack_bus] = inputs.va_slack

    iteration = 0
    while True:
        f = mismatch(admittance, vm, va, inputs, pvpq, pq)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        logger.debug("NR iteration %d: max mismatch %.3e", iteration, norm)
        if not np.isfinite(norm):
            raise DivergedError(iteration, norm)
        if norm <= tol:
            break
        if iteration >= max_iter:
            raise DivergedError(
                iteration, norm,
                context=make_context("acpf_solver.nr_solve", grid=grid.name, tol=tol)
            )
        jac = jacobian(admittance, vm, va, pvpq, pq)
        dx = _newton_step(jac, f, iteration)
        va[pvpq] += dx[:n_pvpq]
        vm[pq] += dx[n_pvpq:]
        iteration += 1

    s = calculated_injections(admittance, vm, va)
    return PFSolution(
        vm=vm,
        va=va,
        p_inj=s.real.copy(),
        q_inj=s.imag.copy(),
        iterations=iteration,
        max_mismatch=norm,
    )


def flows_from_state(
    grid: Grid,
    vm: np.ndarray,
    va: np.ndarray,
    admittance: Optional[Admittance] = None,
) -> np.ndarray:
    """FlowSet for an arbitrary voltage state."""
    admittance = admittance if admittance is not None else build_ybus(grid)
    g, b = admittance.branch_g, admittance.branch_b
    src, dst = grid.from_to()
    vi, vj = vm[src], vm[dst]
    theta = va[src] - va[dst]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    vivj = vi * vj

    p_from = g * vi ** 2 - vivj * (g * cos_t + b * sin_t)
    q_from = -b * vi ** 2 - vivj * (g * sin_t - b * cos_t)
    p_to = g * vj ** 2 - vivj * (g * cos_t - b * sin_t)
    q_to = -b * vj ** 2 - vivj * (-g * sin_t - b * cos_t)
    return np.concatenate([p_from, p_to, q_from, q_to])


def branch_flows(grid: Grid, sol: PFSolution, admittance: Optional[Admittance] = None) -> np.ndarray:
    """FlowSet of a solved operating point."""
    return flows_from_state(grid, sol.vm, sol.va, admittance)


def split_flows(flows: np.ndarray, n_branch: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(p_from, p_to, q_from, q_to) views of a FlowSet."""
    if flows.shape[-1] != 4 * n_branch:
        raise DimMismatchError("FlowSet", (4 * n_branch,), tuple(flows.shape))
    p_from, p_to, q_from, q_to = np.split(flows, 4, axis=-1)
    return p_from, p_to, q_from, q_to


def net_injections_from_flows(grid: Grid, flows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-bus calculated injections (P_calc, Q_calc) obtained by summing branch flows."""
    flows = np.asarray(flows, dtype=float)
    p_from, p_to, q_from, q_to = split_flows(flows, grid.n_branch)
    src, dst = grid.from_to()
    n = grid.n_bus
    p_calc = np.bincount(src, weights=p_from, minlength=n) + np.bincount(dst, weights=p_to, minlength=n)
    q_calc = np.bincount(src, weights=q_from, minlength=n) + np.bincount(dst, weights=q_to, minlength=n)
    return p_calc, q_calc
