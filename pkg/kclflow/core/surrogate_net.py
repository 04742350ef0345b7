"""
Graph surrogate for branch flows.

One message-passing layer, one multi-head attention layer, a learnable skip
from the raw node features, an edge decoder producing (p_from, p_to, q_from,
q_to) per branch, and optionally the KCL projection as the last layer.
Forward and reverse passes are written out in numpy and operate on batches
of shape (B, N, 3); weights use the row-vector convention ``z @ W``.

Each undirected branch carries a message in both directions. For message
``m`` the receiving bus is ``recv[m]`` and the sending bus ``send[m]``.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors.base import make_context
from .errors.grid import IsolatedBusError
from .errors.surrogate import ShapeMismatchError, StaleTapeError
from .grid_model import Grid, degrees
from .kcl_projection import ConstraintSystem, KCLOperator, project_flows, project_flows_backward

logger = logging.getLogger(__name__)

NODE_FEATURES = 3
EDGE_FEATURES = 2
OUTPUTS_PER_EDGE = 4

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wa", "avec", "Wskip", "We1", "be1", "We2", "be2")


def leaky_relu(u: np.ndarray, slope: float) -> np.ndarray:
    return np.where(u > 0, u, slope * u)


def leaky_relu_grad(u: np.ndarray, slope: float) -> np.ndarray:
    return np.where(u > 0, 1.0, slope)


@dataclass
class SurrogateParams:
    """Trainable weights plus the architecture hyper-parameters they imply."""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wa: np.ndarray
    avec: np.ndarray
    Wskip: np.ndarray
    We1: np.ndarray
    be1: np.ndarray
    We2: np.ndarray
    be2: np.ndarray
    leaky_slope: float = 0.01
    # Bumped on every in-place update so tapes can detect staleness
    version: int = 0

    @property
    def hidden_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def heads(self) -> int:
        return self.Wa.shape[0]

    @property
    def attention_dim(self) -> int:
        return self.Wa.shape[2]

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        h, k, ha = self.hidden_dim, self.heads, self.attention_dim
        edge_in = 2 * h + EDGE_FEATURES
        return {
            "W1": (2 * NODE_FEATURES + EDGE_FEATURES, h),
            "b1": (h,),
            "W2": (h, h),
            "b2": (h,),
            "Wa": (k, edge_in, ha),
            "avec": (k, ha),
            "Wskip": (NODE_FEATURES, h),
            "We1": (edge_in, h),
            "be1": (h,),
            "We2": (h, OUTPUTS_PER_EDGE),
            "be2": (OUTPUTS_PER_EDGE,),
        }

    def validate(self) -> None:
        """Check every array has the shape the hyper-parameters imply and is finite."""
        for name, shape in self.expected_shapes().items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ShapeMismatchError(name, shape, value.shape)
            if not np.all(np.isfinite(value)):
                raise ShapeMismatchError(name, "finite values", "non-finite entries")

    def tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.tensors())

    def copy(self) -> "SurrogateParams":
        return SurrogateParams(
            **{name: value.copy() for name, value in self.tensors()},
            leaky_slope=self.leaky_slope,
        )

    def num_parameters(self) -> int:
        return int(sum(value.size for _, value in self.tensors()))

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.tensors()}

    def bump(self) -> None:
        self.version += 1


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def init_params(
    hidden_dim: int = 64,
    heads: int = 4,
    seed: int = 0,
    attention_dim: Optional[int] = None,
    leaky_slope: float = 0.01,
) -> SurrogateParams:
    """Xavier-normal weights and zero biases."""
    if hidden_dim < 1 or heads < 1:
        raise ShapeMismatchError("hidden_dim/heads", ">= 1", (hidden_dim, heads))
    attention_dim = attention_dim or hidden_dim
    h, k, ha = hidden_dim, heads, attention_dim
    msg_in = 2 * NODE_FEATURES + EDGE_FEATURES
    edge_in = 2 * h + EDGE_FEATURES
    rng = np.random.default_rng(seed)

    params = SurrogateParams(
        W1=_xavier(rng, msg_in, h, (msg_in, h)),
        b1=np.zeros(h),
        W2=_xavier(rng, h, h, (h, h)),
        b2=np.zeros(h),
        Wa=_xavier(rng, edge_in, ha, (k, edge_in, ha)),
        avec=_xavier(rng, ha, 1, (k, ha)),
        Wskip=_xavier(rng, NODE_FEATURES, h, (NODE_FEATURES, h)),
        We1=_xavier(rng, edge_in, h, (edge_in, h)),
        be1=np.zeros(h),
        We2=_xavier(rng, h, OUTPUTS_PER_EDGE, (h, OUTPUTS_PER_EDGE)),
        be2=np.zeros(OUTPUTS_PER_EDGE),
        leaky_slope=leaky_slope,
    )
    logger.debug("Initialised surrogate with %d parameters (H=%d, K=%d)", params.num_parameters(), h, k)
    return params


@dataclass(frozen=True)
class GraphIndex:
    """Index arrays and sparse 0/1 scatter matrices of one topology."""
    n_bus: int
    n_branch: int
    src: np.ndarray
    dst: np.ndarray
    recv: np.ndarray
    send: np.ndarray
    msg_edge: np.ndarray
    s_recv: sp.csr_array = field(repr=False)
    s_send: sp.csr_array = field(repr=False)
    s_src: sp.csr_array = field(repr=False)
    s_dst: sp.csr_array = field(repr=False)
    topology_hash: str = ""

    @classmethod
    def from_grid(cls, grid: Grid) -> "GraphIndex":
        isolated = np.flatnonzero(degrees(grid) == 0)
        if isolated.size:
            raise IsolatedBusError(
                int(isolated[0]),
                context=make_context("surrogate_net.GraphIndex", grid=grid.name)
            )
        src, dst = grid.from_to()
        m = grid.n_branch
        recv = np.concatenate([src, dst])
        send = np.concatenate([dst, src])
        return cls(
            n_bus=grid.n_bus,
            n_branch=m,
            src=src,
            dst=dst,
            recv=recv,
            send=send,
            msg_edge=np.concatenate([np.arange(m), np.arange(m)]),
            s_recv=_scatter(recv, grid.n_bus),
            s_send=_scatter(send, grid.n_bus),
            s_src=_scatter(src, grid.n_bus),
            s_dst=_scatter(dst, grid.n_bus),
            topology_hash=grid.topology_hash(),
        )

    @property
    def n_messages(self) -> int:
        return self.recv.size


def _scatter(index: np.ndarray, n: int) -> sp.csr_array:
    """n x len(index) sparse matrix with a 1 at (index[j], j)."""
    cols = np.arange(index.size)
    return sp.csr_array((np.ones(index.size), (index, cols)), shape=(n, index.size))


def _segment_sum(scatter: sp.csr_array, values: np.ndarray, axis: int = 1) -> np.ndarray:
    """Apply ``scatter`` along ``axis`` of a batched array: sums rows sharing a segment."""
    moved = np.moveaxis(values, axis, 0)
    out = scatter @ moved.reshape(moved.shape[0], -1)
    return np.moveaxis(out.reshape((scatter.shape[0],) + moved.shape[1:]), 0, axis)


def _weight_grad(inputs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Sum over batch and rows of the outer products inputs^T grad."""
    return inputs.reshape(-1, inputs.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])


@dataclass
class ForwardTape:
    """Intermediates of one forward pass."""
    params_id: int
    params_version: int
    topology_hash: str
    with_projection: bool
    squeeze: bool
    x: np.ndarray
    e: np.ndarray
    z_msg: np.ndarray
    u1: np.ndarray
    a1: np.ndarray
    h_msg: np.ndarray
    x1: np.ndarray
    z_att: np.ndarray
    s_att: np.ndarray
    l_att: np.ndarray
    logits: np.ndarray
    alpha: np.ndarray
    abar: np.ndarray
    x1_send: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    z_edge: np.ndarray
    u2: np.ndarray
    a2: np.ndarray
    y_raw: np.ndarray
    y: np.ndarray
    operator: Optional[KCLOperator] = None


def _check_inputs(graph: GraphIndex, x: np.ndarray, e: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (graph.n_bus, NODE_FEATURES):
        raise ShapeMismatchError("node features", ("B", graph.n_bus, NODE_FEATURES), x.shape)
    if e.shape != (graph.n_branch, EDGE_FEATURES):
        raise ShapeMismatchError("edge attributes", (graph.n_branch, EDGE_FEATURES), e.shape)
    return x, squeeze


def _message_inputs(graph: GraphIndex, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    batch = x.shape[0]
    e_msg = np.broadcast_to(e[graph.msg_edge], (batch, graph.n_messages, EDGE_FEATURES))
    return np.concatenate([x[:, graph.recv], x[:, graph.send], e_msg], axis=-1)


def _message_pass(params: SurrogateParams, graph: GraphIndex, x: np.ndarray, e: np.ndarray):
    z_msg = _message_inputs(graph, x, e)
    u1 = z_msg @ params.W1 + params.b1
    a1 = leaky_relu(u1, params.leaky_slope)
    h_msg = a1 @ params.W2 + params.b2
    x1 = _segment_sum(graph.s_recv, h_msg)
    return z_msg, u1, a1, h_msg, x1


def message_pass(params: SurrogateParams, graph: GraphIndex, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Sum over neighbours of MLP messages: X' of shape (B, N, H) (or (N, H))."""
    e = np.asarray(e, dtype=float)
    x, squeeze = _check_inputs(graph, x, e)
    x1 = _message_pass(params, graph, x, e)[-1]
    return x1[0] if squeeze else x1


def _segment_softmax(graph: GraphIndex, logits: np.ndarray) -> np.ndarray:
    """Softmax of (B, K, M) logits over the messages sharing a receiver."""
    group_max = np.full(logits.shape[:-1] + (graph.n_bus,), -np.inf)
    np.maximum.at(group_max, (slice(None), slice(None), graph.recv), logits)
    ex = np.exp(logits - group_max[..., graph.recv])
    denom = _segment_sum(graph.s_recv, ex, axis=-1)
    return ex / denom[..., graph.recv]


def _attention(params: SurrogateParams, graph: GraphIndex, x1: np.ndarray, e: np.ndarray):
    z_att = _message_inputs_hidden(graph, x1, e)
    # (B, 1, M, D) @ (K, D, Ha) -> (B, K, M, Ha)
    s_att = z_att[:, None] @ params.Wa
    l_att = leaky_relu(s_att, params.leaky_slope)
    logits = (l_att @ params.avec[..., None])[..., 0]
    alpha = _segment_softmax(graph, logits)
    abar = alpha.mean(axis=1)
    x1_send = x1[:, graph.send]
    x2 = _segment_sum(graph.s_recv, abar[..., None] * x1_send)
    return z_att, s_att, l_att, logits, alpha, abar, x1_send, x2


def _message_inputs_hidden(graph: GraphIndex, x1: np.ndarray, e: np.ndarray) -> np.ndarray:
    batch = x1.shape[0]
    e_msg = np.broadcast_to(e[graph.msg_edge], (batch, graph.n_messages, EDGE_FEATURES))
    return np.concatenate([x1[:, graph.recv], x1[:, graph.send], e_msg], axis=-1)


def attention_weights(params: SurrogateParams, graph: GraphIndex, x1: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Per-head attention coefficients, shape (B, K, M)."""
    x1 = np.asarray(x1, dtype=float)
    if x1.ndim == 2:
        x1 = x1[None]
    return _attention(params, graph, x1, np.asarray(e, dtype=float))[4]


def attention_refine(params: SurrogateParams, graph: GraphIndex, x1: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Attention-weighted neighbour sum X'' of shape (B, N, H) (or (N, H))."""
    x1 = np.asarray(x1, dtype=float)
    squeeze = x1.ndim == 2
    if squeeze:
        x1 = x1[None]
    if x1.shape[1:] != (graph.n_bus, params.hidden_dim):
        raise ShapeMismatchError("X'", ("B", graph.n_bus, params.hidden_dim), x1.shape)
    x2 = _attention(params, graph, x1, np.asarray(e, dtype=float))[-1]
    return x2[0] if squeeze else x2


def _resolve_projection(
    system: Optional[Union[ConstraintSystem, KCLOperator]],
    b: Optional[np.ndarray],
) -> Tuple[Optional[KCLOperator], Optional[np.ndarray]]:
    if isinstance(system, ConstraintSystem):
        return system.operator, system.b if b is None else b
    return system, b


def forward(
    params: SurrogateParams,
    graph: GraphIndex,
    x: np.ndarray,
    e: np.ndarray,
    system: Optional[Union[ConstraintSystem, KCLOperator]] = None,
    b: Optional[np.ndarray] = None,
    with_projection: bool = True,
) -> Tuple[np.ndarray, ForwardTape]:
    """Predict FlowSets for a batch of scenarios on one topology.

    Args:
        params: Network weights
        graph: Topology index
        x: Normalized node features, (N, 3) or (B, N, 3)
        e: Normalized edge attributes, (|E|, 2)
        system: Constraint system or bare operator of the topology
        b: Net injections (2N,) or (B, 2N); taken from ``system`` if omitted
        with_projection: Apply the KCL projection as the last layer

    Returns:
        (flows of shape (4|E|,) or (B, 4|E|), tape for ``backward``)
    """
    e = np.asarray(e, dtype=float)
    x, squeeze = _check_inputs(graph, x, e)
    operator, b = _resolve_projection(system, b)
    if with_projection:
        if operator is None or b is None:
            raise ShapeMismatchError("projection", "constraint system and injections", None)
        if operator.topology_hash != graph.topology_hash:
            raise ShapeMismatchError("projection topology", graph.topology_hash, operator.topology_hash)

    z_msg, u1, a1, h_msg, x1 = _message_pass(params, graph, x, e)
    z_att, s_att, l_att, logits, alpha, abar, x1_send, x2 = _attention(params, graph, x1, e)
    x3 = x2 + x @ params.Wskip

    batch = x.shape[0]
    e_edge = np.broadcast_to(e, (batch, graph.n_branch, EDGE_FEATURES))
    z_edge = np.concatenate([x3[:, graph.src], x3[:, graph.dst], e_edge], axis=-1)
    u2 = z_edge @ params.We1 + params.be1
    a2 = leaky_relu(u2, params.leaky_slope)
    y_hat = a2 @ params.We2 + params.be2
    # (B, |E|, 4) -> (B, 4|E|) ordered p_from, p_to, q_from, q_to
    y_raw = y_hat.transpose(0, 2, 1).reshape(batch, OUTPUTS_PER_EDGE * graph.n_branch)
    y = project_flows(operator, y_raw, b) if with_projection else y_raw

    tape = ForwardTape(
        params_id=id(params),
        params_version=params.version,
        topology_hash=graph.topology_hash,
        with_projection=with_projection,
        squeeze=squeeze,
        x=x, e=e,
        z_msg=z_msg, u1=u1, a1=a1, h_msg=h_msg, x1=x1,
        z_att=z_att, s_att=s_att, l_att=l_att, logits=logits, alpha=alpha, abar=abar,
        x1_send=x1_send, x2=x2, x3=x3,
        z_edge=z_edge, u2=u2, a2=a2,
        y_raw=y_raw, y=y,
        operator=operator if with_projection else None,
    )
    return (y[0] if squeeze else y), tape


def backward(
    params: SurrogateParams,
    graph: GraphIndex,
    tape: ForwardTape,
    grad_output: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dOutput.

    Raises:
        StaleTapeError: The tape was recorded with other (or since updated) parameters
    """
    if tape.params_id != id(params) or tape.params_version != params.version:
        raise StaleTapeError(context=make_context(
            "surrogate_net.backward", tape_version=tape.params_version, params_version=params.version
        ))
    if tape.topology_hash != graph.topology_hash:
        raise StaleTapeError()

    g = np.asarray(grad_output, dtype=float)
    if tape.squeeze and g.ndim == 1:
        g = g[None]
    if g.shape != tape.y.shape:
        raise ShapeMismatchError("output gradient", tape.y.shape, g.shape)

    slope = params.leaky_slope
    h = params.hidden_dim
    k = params.heads
    batch = g.shape[0]
    grads: Dict[str, np.ndarray] = {}

    # Projection layer
    if tape.with_projection:
        g, _ = project_flows_backward(tape.operator, g)

    # Edge decoder
    g_yhat = g.reshape(batch, OUTPUTS_PER_EDGE, graph.n_branch).transpose(0, 2, 1)
    grads["We2"] = _weight_grad(tape.a2, g_yhat)
    grads["be2"] = g_yhat.sum(axis=(0, 1))
    g_u2 = (g_yhat @ params.We2.T) * leaky_relu_grad(tape.u2, slope)
    grads["We1"] = _weight_grad(tape.z_edge, g_u2)
    grads["be1"] = g_u2.sum(axis=(0, 1))
    g_zedge = g_u2 @ params.We1.T
    g_x3 = _segment_sum(graph.s_src, g_zedge[..., :h]) + _segment_sum(graph.s_dst, g_zedge[..., h:2 * h])

    # Skip connection
    grads["Wskip"] = _weight_grad(tape.x, g_x3)
    g_x2 = g_x3

    # Attention aggregation: x2 = S_recv @ (abar * x1[send])
    g_weighted = g_x2[:, graph.recv]
    g_abar = np.sum(g_weighted * tape.x1_send, axis=-1)
    g_x1 = _segment_sum(graph.s_send, tape.abar[..., None] * g_weighted)

    # Head mean, then softmax over each receiver's messages
    g_alpha = np.broadcast_to(g_abar[:, None, :] / k, tape.alpha.shape)
    weighted = tape.alpha * g_alpha
    group_sum = _segment_sum(graph.s_recv, weighted, axis=-1)
    g_logits = weighted - tape.alpha * group_sum[..., graph.recv]

    # Attention scores
    grads["avec"] = (g_logits[..., None, :] @ tape.l_att).sum(axis=(0, 2))
    g_latt = g_logits[..., None] * params.avec[None, :, None, :]
    g_satt = g_latt * leaky_relu_grad(tape.s_att, slope)
    z_flat = tape.z_att.reshape(-1, tape.z_att.shape[-1])
    g_heads = g_satt.transpose(1, 0, 2, 3).reshape(k, -1, g_satt.shape[-1])
    grads["Wa"] = z_flat.T @ g_heads
    g_zatt = (g_satt @ params.Wa.transpose(0, 2, 1)).sum(axis=1)
    g_x1 = g_x1 + _segment_sum(graph.s_recv, g_zatt[..., :h]) + _segment_sum(graph.s_send, g_zatt[..., h:2 * h])

    # Message MLP and sum aggregation
    g_hmsg = g_x1[:, graph.recv]
    grads["W2"] = _weight_grad(tape.a1, g_hmsg)
    grads["b2"] = g_hmsg.sum(axis=(0, 1))
    g_u1 = (g_hmsg @ params.W2.T) * leaky_relu_grad(tape.u1, slope)
    grads["W1"] = _weight_grad(tape.z_msg, g_u1)
    grads["b1"] = g_u1.sum(axis=(0, 1))

    return {name: grads[name] for name in PARAM_NAMES}
