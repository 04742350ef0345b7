"""
KCL constraint system and projections.

For a topology with N buses and |E| branches the KCL equations are
``A y + b = 0`` where ``A`` is 2N x 4|E| (P rows for buses 0..N-1, then Q rows)
and ``b = (P_net, Q_net)`` with ``P_net = -injection``. ``A`` and its
pseudoinverse depend only on the topology and are cached per topology hash;
``b`` changes per scenario.

Every projection accepts a single FlowSet of shape (4|E|,) or a batch of
shape (B, 4|E|) with matching (2N,) or (B, 2N) injections.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import svd

from .errors.base import make_context
from .errors.grid import IsolatedBusError
from .errors.projection import DimMismatchError
from .grid_model import Grid, degrees

logger = logging.getLogger(__name__)

DEFAULT_SVD_RTOL = 1e-10


@dataclass(frozen=True)
class NormalVectors:
    """Per-bus 0/1 normal vectors a^{P,i} (rows of ``p``) and a^{Q,i} (rows of ``q``)."""
    p: sp.csr_matrix
    q: sp.csr_matrix


@dataclass(frozen=True)
class KCLOperator:
    """Topology-dependent part of the constraint system."""
    a: np.ndarray
    a_pinv: np.ndarray
    singular_values: np.ndarray
    rank: int
    topology_hash: str
    n_bus: int
    n_branch: int
    # Column indices of every row of A (rows have disjoint supports)
    row_support: Tuple[np.ndarray, ...] = field(repr=False)

    @property
    def n_rows(self) -> int:
        return 2 * self.n_bus

    @property
    def n_flows(self) -> int:
        return 4 * self.n_branch

    def row_norms_sq(self) -> np.ndarray:
        return np.array([support.size for support in self.row_support], dtype=float)

    def null_projector(self) -> np.ndarray:
        """I - A^+ A, the orthogonal projector onto null(A)."""
        return np.eye(self.n_flows) - self.a_pinv @ self.a


@dataclass(frozen=True)
class ConstraintSystem:
    """A topology operator bound to one scenario's net injections."""
    operator: KCLOperator
    b: np.ndarray

    @property
    def a(self) -> np.ndarray:
        return self.operator.a

    @property
    def a_pinv(self) -> np.ndarray:
        return self.operator.a_pinv

    @property
    def topology_hash(self) -> str:
        return self.operator.topology_hash

    def with_injections(self, net_p: np.ndarray, net_q: np.ndarray) -> "ConstraintSystem":
        """Same topology, different scenario."""
        return ConstraintSystem(self.operator, _stack_injections(self.operator, net_p, net_q))


def normal_vectors(grid: Grid) -> NormalVectors:
    """Sparse normal vectors of every bus constraint."""
    n, m = grid.n_bus, grid.n_branch
    src, dst = grid.from_to()
    edges = np.arange(m)
    rows = np.concatenate([src, dst])
    cols = np.concatenate([edges, m + edges])
    ones = np.ones(rows.size)
    a_p = sp.csr_matrix((ones, (rows, cols)), shape=(n, 4 * m))
    a_q = sp.csr_matrix((ones, (rows, cols + 2 * m)), shape=(n, 4 * m))
    return NormalVectors(p=a_p, q=a_q)


def _check_degrees(grid: Grid) -> None:
    isolated = np.flatnonzero(degrees(grid) == 0)
    if isolated.size:
        raise IsolatedBusError(
            int(isolated[0]),
            context=make_context("kcl_projection.build_operator", grid=grid.name)
        )


def pseudoinverse(a: np.ndarray, rtol: float = DEFAULT_SVD_RTOL) -> Tuple[np.ndarray, np.ndarray, int]:
    """Moore-Penrose pseudoinverse via SVD, zeroing singular values below rtol * s_max.

    Returns:
        (A^+, singular values, numerical rank)
    """
    u, s, vt = svd(a, full_matrices=False)
    if s.size == 0:
        return np.zeros(a.shape[::-1]), s, 0
    cutoff = rtol * s[0]
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T, s, int(keep.sum())


def build_operator(grid: Grid, rtol: float = DEFAULT_SVD_RTOL) -> KCLOperator:
    """Assemble A and A^+ for ``grid``.

    Raises:
        IsolatedBusError: A bus has no incident branch
    """
    _check_degrees(grid)
    normals = normal_vectors(grid)
    a = sp.vstack([normals.p, normals.q]).toarray()
    a_pinv, s, rank = pseudoinverse(a, rtol)
    support = tuple(np.flatnonzero(row) for row in a)

    if rank < a.shape[0]:
        logger.warning("KCL matrix for '%s' is rank deficient: %d < %d", grid.name, rank, a.shape[0])
    return KCLOperator(
        a=a,
        a_pinv=a_pinv,
        singular_values=s,
        rank=rank,
        topology_hash=grid.topology_hash(),
        n_bus=grid.n_bus,
        n_branch=grid.n_branch,
        row_support=support,
    )


class ConstraintCache:
    """Thread-safe get-or-build cache of KCL operators keyed by topology hash."""

    def __init__(self, rtol: float = DEFAULT_SVD_RTOL):
        self.rtol = rtol
        self._operators: Dict[str, KCLOperator] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get_or_build(self, grid: Grid) -> KCLOperator:
        key = grid.topology_hash()
        with self._lock:
            operator = self._operators.get(key)
            if operator is not None:
                self.hits += 1
                return operator
            self.misses += 1
            operator = build_operator(grid, self.rtol)
            self._operators[key] = operator
            logger.debug("Built KCL operator %s (%d x %d)", key, *operator.a.shape)
            return operator

    def __len__(self) -> int:
        return len(self._operators)

    def __contains__(self, topology_hash: str) -> bool:
        return topology_hash in self._operators


def _stack_injections(operator: KCLOperator, net_p: np.ndarray, net_q: np.ndarray) -> np.ndarray:
    net_p = np.asarray(net_p, dtype=float)
    net_q = np.asarray(net_q, dtype=float)
    for what, values in (("net_p", net_p), ("net_q", net_q)):
        if values.shape[-1] != operator.n_bus:
            raise DimMismatchError(what, (operator.n_bus,), tuple(values.shape))
    return np.concatenate([net_p, net_q], axis=-1)


def build_system(
    grid: Grid,
    net_p: np.ndarray,
    net_q: np.ndarray,
    cache: Optional[ConstraintCache] = None,
    rtol: float = DEFAULT_SVD_RTOL,
) -> ConstraintSystem:
    """Constraint system of ``grid`` for one scenario's net injections."""
    operator = cache.get_or_build(grid) if cache is not None else build_operator(grid, rtol)
    return ConstraintSystem(operator, _stack_injections(operator, net_p, net_q))


def _check_flows(operator: KCLOperator, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim not in (1, 2) or y.shape[-1] != operator.n_flows:
        raise DimMismatchError("FlowSet", (operator.n_flows,), tuple(y.shape))
    return y


def _check_b(operator: KCLOperator, b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape[-1] != operator.n_rows:
        raise DimMismatchError("b", (operator.n_rows,), tuple(b.shape))
    return b


def residual(operator: KCLOperator, y: np.ndarray, b: np.ndarray) -> np.ndarray:
    """A y + b, batched over leading axes."""
    y = _check_flows(operator, y)
    return y @ operator.a.T + _check_b(operator, b)


def project_flows(operator: KCLOperator, y: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y - A^+ (A y + b), batched over leading axes."""
    return y - residual(operator, y, b) @ operator.a_pinv.T


def project_flows_backward(operator: KCLOperator, upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of ``project_flows`` w.r.t. (y, b)."""
    upstream = _check_flows(operator, upstream)
    grad_b = -(upstream @ operator.a_pinv)
    grad_y = upstream + grad_b @ operator.a
    return grad_y, grad_b


def kcl_residual(sys: ConstraintSystem, y: np.ndarray) -> np.ndarray:
    """KCL residual r = A y + b."""
    return residual(sys.operator, y, sys.b)


def project_global(sys: ConstraintSystem, y: np.ndarray) -> np.ndarray:
    """Euclidean-closest KCL-feasible FlowSet to ``y``."""
    return project_flows(sys.operator, y, sys.b)


def project_global_backward(sys: ConstraintSystem, upstream_grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of project_global w.r.t. y and b.

    grad_y = (I - A^+ A) upstream, grad_b = -A^+^T upstream.
    """
    return project_flows_backward(sys.operator, upstream_grad)


def affine_layer(sys: ConstraintSystem) -> Tuple[np.ndarray, np.ndarray]:
    """(W, c) such that project_global(sys, y) == W @ y + c."""
    return sys.operator.null_projector(), -(sys.a_pinv @ sys.b)


def _row_index(operator: KCLOperator, bus: int, which: str) -> int:
    if which not in ("P", "Q"):
        raise ValueError(f"which must be 'P' or 'Q', got {which!r}")
    if bus < 0 or bus >= operator.n_bus:
        raise DimMismatchError("bus index", (operator.n_bus,), (bus,))
    return bus if which == "P" else operator.n_bus + bus


def _single_b(sys: ConstraintSystem) -> np.ndarray:
    """The injections of ``sys`` as one (2N,) vector; per-bus projections are not batched."""
    b = np.asarray(sys.b, dtype=float)
    if b.shape != (sys.operator.n_rows,):
        raise DimMismatchError("b", (sys.operator.n_rows,), tuple(b.shape))
    return b


def _hyperplane_step(operator: KCLOperator, y: np.ndarray, b: np.ndarray, row: int) -> None:
    """In-place projection of ``y`` onto the hyperplane of constraint ``row``."""
    support = operator.row_support[row]
    if support.size == 0:
        bus = row % operator.n_bus
        raise IsolatedBusError(bus)
    violation = y[support].sum() + b[row]
    y[support] -= violation / support.size


def project_bus(sys: ConstraintSystem, y: np.ndarray, bus: int, which: str = "P") -> np.ndarray:
    """Project ``y`` onto the single P or Q constraint of ``bus``."""
    operator = sys.operator
    y = _check_flows(operator, y)
    if y.ndim != 1:
        raise DimMismatchError("FlowSet", (operator.n_flows,), tuple(y.shape))
    out = y.copy()
    _hyperplane_step(operator, out, _single_b(sys), _row_index(operator, bus, which))
    return out


def default_ordering(n_bus: int) -> List[int]:
    """Bus ascending, P before Q per bus."""
    order: List[int] = []
    for bus in range(n_bus):
        order.extend((bus, n_bus + bus))
    return order


@dataclass
class KaczmarzResult:
    """Output of ``project_kaczmarz``."""
    flows: np.ndarray
    sweeps_used: int
    residual: float
    converged: bool = False
    residual_history: List[float] = field(default_factory=list)
    distance_history: List[float] = field(default_factory=list)


def project_kaczmarz(
    sys: ConstraintSystem,
    y: np.ndarray,
    ordering: Union[str, Sequence[int]] = "fixed",
    sweeps: int = 100,
    tol: float = 1e-6,
    seed: Optional[int] = None,
    record: bool = False,
    reference: Optional[np.ndarray] = None,
) -> KaczmarzResult:
    """Sequential per-bus hyperplane projections.

    Args:
        sys: Constraint system
        y: Starting FlowSet
        ordering: "fixed" (bus ascending, P before Q), "random" (fresh
            permutation each sweep), "weighted" (rows drawn with probability
            proportional to their squared norm) or an explicit permutation of
            the 2N constraint rows
        sweeps: Maximum number of sweeps
        tol: Stop once ||A y + b||_inf <= tol
        seed: Seed for the randomized orderings
        record: Keep per-sweep residuals and per-step distances to ``reference``
        reference: Feasible point for the distance trace (default: project_global(y))

    Returns:
        KaczmarzResult with the final flows, sweeps used and final residual
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    operator = sys.operator
    y = _check_flows(operator, y)
    if y.ndim != 1:
        raise DimMismatchError("FlowSet", (operator.n_flows,), tuple(y.shape))
    n_rows = operator.n_rows
    b = _single_b(sys)
    rng = np.random.default_rng(seed)

    if isinstance(ordering, str):
        if ordering not in ("fixed", "random", "weighted"):
            raise ValueError(f"unknown ordering {ordering!r}")
        fixed_order = default_ordering(operator.n_bus)
    else:
        fixed_order = [int(i) for i in ordering]
        if sorted(fixed_order) != list(range(n_rows)):
            raise DimMismatchError("ordering", (n_rows,), (len(fixed_order),))
        ordering = "fixed"

    weights = operator.row_norms_sq()
    weights = weights / weights.sum()

    if record and reference is None:
        reference = project_global(sys, y)

    out = y.copy()
    result = KaczmarzResult(flows=out, sweeps_used=0, residual=float(np.max(np.abs(kcl_residual(sys, out)))))
    if record:
        result.residual_history.append(result.residual)
        result.distance_history.append(float(np.linalg.norm(out - reference)))
    if result.residual <= tol:
        result.converged = True
        return result

    for sweep in range(1, sweeps + 1):
        if ordering == "random":
            order = rng.permutation(n_rows)
        elif ordering == "weighted":
            order = rng.choice(n_rows, size=n_rows, p=weights)
        else:
            order = fixed_order
        for row in order:
            _hyperplane_step(operator, out, b, int(row))
            if record:
                result.distance_history.append(float(np.linalg.norm(out - reference)))

        result.sweeps_used = sweep
        result.residual = float(np.max(np.abs(kcl_residual(sys, out))))
        if record:
            result.residual_history.append(result.residual)
        if result.residual <= tol:
            result.converged = True
            break

    logger.debug("Kaczmarz (%s) finished after %d sweeps, residual %.3e",
                 ordering, result.sweeps_used, result.residual)
    return result
