"""Gated graph network over CFG nodes carrying dataflow features.

Messages are MLP-transformed neighbor states summed along edge direction;
node updates run a standard GRU cell; the graph embedding is the pooled
final node state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .minic import ControlFlowGraph

__all__ = [
    "GgnnConfig",
    "GruParams",
    "Ggnn",
    "mlp_aggregate",
    "gru_update",
]


@dataclass(frozen=True)
class GgnnConfig:
    state_dim: int = 16
    steps: int = 5
    mlp_hidden: tuple[int, ...] = (16,)
    pooling: str = "mean"  # mean | sum
    feature_dim: int | None = None  # None: equals state_dim (no projection)
    reverse_edges: bool = False
    profile: str = "desk"

    def __post_init__(self):
        if self.state_dim <= 0 or any(h <= 0 for h in self.mlp_hidden):
            raise ValueError("GGNN dims must be positive")
        if self.pooling not in ("mean", "sum"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.profile == "paper" and self.state_dim != 256:
            raise ValueError("paper profile pins state_dim=256")

    @classmethod
    def desk(cls, **over) -> "GgnnConfig":
        return cls(**over)

    @classmethod
    def paper(cls) -> "GgnnConfig":
        return cls(state_dim=256, mlp_hidden=(256,), profile="paper")

    @property
    def layer_count(self) -> int:
        """MLP linear layers plus the GRU layer (paper profile: 2 + 1 = 3)."""
        return len(self.mlp_hidden) + 2

    @property
    def in_dim(self) -> int:
        return self.feature_dim if self.feature_dim is not None else self.state_dim


@dataclass
class GruParams:
    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")}


def mlp_forward(x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """ReLU MLP; the final layer is linear."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = ag.add(ag.matmul(h, ag.transpose(w)), b)
        if i < len(layers) - 1:
            h = ag.relu(h)
    return h


def mlp_aggregate(
    states: Tensor,
    edges: list[tuple[int, int]],
    mlp_layers: list[tuple[Tensor, Tensor]],
) -> Tensor:
    """Per-node incoming message: sum over in-neighbors of MLP(state).

    Duplicate edges count twice (multiset semantics); isolated nodes get a
    zero message.
    """
    n = states.shape[0]
    adj_t = np.zeros((n, n), dtype=states.dtype)
    for src, dst in edges:
        if not (0 <= src < n and 0 <= dst < n):
            raise ValueError(f"edge ({src}, {dst}) references missing node (n={n})")
        adj_t[dst, src] += 1.0
    transformed = mlp_forward(states, mlp_layers)
    return ag.matmul(Tensor(adj_t), transformed)


def gru_update(state: Tensor, message: Tensor, p: GruParams) -> Tensor:
    """Standard GRU cell applied row-wise: update/reset gates, candidate, blend."""
    if state.shape != message.shape:
        raise ag.ShapeError(f"gru dims differ: state {state.shape} vs message {message.shape}")
    z = ag.sigmoid(ag.add(ag.add(ag.matmul(message, ag.transpose(p.wz)), ag.matmul(state, ag.transpose(p.uz))), p.bz))
    r = ag.sigmoid(ag.add(ag.add(ag.matmul(message, ag.transpose(p.wr)), ag.matmul(state, ag.transpose(p.ur))), p.br))
    cand = ag.tanh(
        ag.add(ag.add(ag.matmul(message, ag.transpose(p.wh)), ag.matmul(ag.mul(r, state), ag.transpose(p.uh))), p.bh)
    )
    keep = ag.add(Tensor(np.ones(z.shape, dtype=z.dtype)), ag.scale(z, -1.0))  # 1 - z
    return ag.add(ag.mul(keep, state), ag.mul(z, cand))


class Ggnn:
    """Message-passing network producing one embedding per graph."""

    def __init__(self, config: GgnnConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.state_dim

        def mat(rows, cols, std):
            return Tensor(rng.normal(0.0, std, size=(rows, cols)).astype(dtype), requires_grad=True)

        def vec(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        dims = [d, *config.mlp_hidden, d]
        self.mlp_layers = [
            (mat(dims[i + 1], dims[i], dims[i] ** -0.5), vec(dims[i + 1])) for i in range(len(dims) - 1)
        ]
        self.gru = GruParams(
            wz=mat(d, d, d**-0.5), uz=mat(d, d, d**-0.5), bz=vec(d),
            wr=mat(d, d, d**-0.5), ur=mat(d, d, d**-0.5), br=vec(d),
            wh=mat(d, d, d**-0.5), uh=mat(d, d, d**-0.5), bh=vec(d),
        )
        self.w_in: Tensor | None = None
        if config.in_dim != d:
            self.w_in = mat(d, config.in_dim, config.in_dim**-0.5)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.mlp_layers):
            params[f"gnn.mlp{i}.w"] = w
            params[f"gnn.mlp{i}.b"] = b
        for name, t in self.gru.tensors().items():
            params[f"gnn.gru.{name}"] = t
        if self.w_in is not None:
            params["gnn.w_in"] = self.w_in
        return params

    def forward(self, cfg: ControlFlowGraph, features: np.ndarray) -> Tensor:
        """Run ``steps`` rounds of aggregate+update and pool node states."""
        edges = list(cfg.edges)
        if self.config.reverse_edges:
            edges = edges + [(d, s) for s, d in cfg.edges]
        n = len(cfg.nodes)
        if features.shape[0] != n:
            raise ValueError(f"features rows {features.shape[0]} != node count {n}")
        h = Tensor(np.asarray(features, dtype=self.mlp_layers[0][0].dtype))
        if self.w_in is not None:
            h = ag.matmul(h, ag.transpose(self.w_in))
        elif features.shape[1] != self.config.state_dim:
            raise ValueError(
                f"feature width {features.shape[1]} != state dim {self.config.state_dim} "
                "and no input projection configured"
            )
        for _ in range(self.config.steps):
            msg = mlp_aggregate(h, edges, self.mlp_layers)
            h = gru_update(h, msg, self.gru)
        pool = np.full((1, n), 1.0 / n if self.config.pooling == "mean" else 1.0, dtype=h.dtype)
        pooled = ag.matmul(Tensor(pool), h)
        return ag.select_row(pooled, 0)
