"""Adaptive high-/low-pass hypergraph filter branches."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

DTYPE = torch.float64
HIGH, LOW = "high", "low"


DENSE_MAX_VERTICES = 4096


def to_torch_sparse(mat) -> torch.Tensor:
    coo = sp.coo_matrix(mat)
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(
        idx, torch.from_numpy(coo.data.astype(np.float64)), coo.shape, check_invariants=True
    ).coalesce()


def to_torch_adj(mat, dense_max: int = DENSE_MAX_VERTICES) -> torch.Tensor:
    """Compute layout for an adjacency: dense for small graphs (much faster on CPU), sparse otherwise."""
    if mat.shape[0] <= dense_max:
        return torch.from_numpy(sp.csr_matrix(mat).toarray())
    return to_torch_sparse(mat)


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return torch.from_numpy(rng.uniform(-bound, bound, size=(n_in, n_out)))


def init_embedding(n: int, d: int, rng: np.random.Generator) -> torch.Tensor:
    """Uniform Glorot table of shape (n, d)."""
    if n < 1 or d < 1:
        raise ValueError("embedding table needs n >= 1 and d >= 1")
    return glorot(rng, n, d)


def init_low_user(walk_feats: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Initial shared user representations from return-probability features."""
    if walk_feats.shape[1] != weight.shape[0]:
        raise ValueError(f"walk features have {walk_feats.shape[1]} steps, transform expects {weight.shape[0]}")
    return walk_feats @ weight + bias


def _spmm(adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if adj.is_sparse:
        return torch.sparse.mm(adj, x)
    return adj @ x


def propagate(adj, x, weight, bias, beta, pass_kind, activation=torch.tanh, mask=None):
    """One filtering layer.

    high: ``((1 - beta) I - A) X W + b``; low: ``((1 + beta) I + A) X W + b``,
    followed by ``activation``. ``mask`` is an already-scaled dropout mask for ``x``.
    """
    if mask is not None:
        x = x * mask
    ax = _spmm(adj, x)
    if pass_kind == HIGH:
        filtered = (1.0 - beta) * x - ax
    elif pass_kind == LOW:
        filtered = (1.0 + beta) * x + ax
    else:
        raise ValueError(f"unknown pass kind {pass_kind!r}")
    out = filtered @ weight + bias
    return activation(out) if activation is not None else out


class HypergraphFilter(nn.Module):
    """Trainable parameters of one filter (one side of one branch).

    ``init_kind`` is ``"embedding"`` (a lookup table) or ``"walk"`` (a linear map
    of walk features, used only for the low-pass user filter).
    """

    def __init__(
        self,
        n_entities: int,
        dim: int,
        n_layers: int,
        pass_kind: str,
        rng: np.random.Generator,
        init_kind: str = "embedding",
        walk_steps: Optional[int] = None,
        dropout: float = 0.3,
    ):
        super().__init__()
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if pass_kind not in (HIGH, LOW):
            raise ValueError(f"unknown pass kind {pass_kind!r}")
        self.pass_kind = pass_kind
        self.init_kind = init_kind
        self.dropout = dropout
        self.n_entities = n_entities
        if init_kind == "embedding":
            self.embedding = nn.Parameter(init_embedding(n_entities, dim, rng))
        elif init_kind == "walk":
            if not walk_steps or walk_steps < 1:
                raise ValueError("walk init needs walk_steps >= 1")
            self.walk_weight = nn.Parameter(glorot(rng, walk_steps, dim))
            self.walk_bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        else:
            raise ValueError(f"unknown init kind {init_kind!r}")
        self.weights = nn.ParameterList([nn.Parameter(glorot(rng, dim, dim)) for _ in range(n_layers)])
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(dim, dtype=DTYPE)) for _ in range(n_layers)])
        self.betas = nn.ParameterList([nn.Parameter(torch.zeros((), dtype=DTYPE)) for _ in range(n_layers)])

    def initial(self, walk_feats: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.init_kind == "embedding":
            return self.embedding
        if walk_feats is None:
            raise ValueError("walk-initialised filter needs walk features")
        return init_low_user(walk_feats, self.walk_weight, self.walk_bias)

    def forward(self, adj, walk_feats=None, rng: Optional[np.random.Generator] = None, activation=torch.tanh):
        """Representations after all layers. Dropout is used only when training and ``rng`` is given."""
        x = self.initial(walk_feats)
        use_dropout = self.training and rng is not None and self.dropout > 0
        for w, b, beta in zip(self.weights, self.biases, self.betas):
            mask = None
            if use_dropout:
                keep = rng.random(tuple(x.shape)) >= self.dropout
                mask = torch.from_numpy(keep / (1.0 - self.dropout))
            x = propagate(adj, x, w, b, beta, self.pass_kind, activation=activation, mask=mask)
        return x

    def check_finite(self) -> bool:
        return all(torch.isfinite(p).all() for p in self.parameters())


def forward_branch(user_adj, item_adj, user_filter, item_filter, walk_feats=None, rng=None):
    """Run both sides of one branch, returning (user reps, item reps)."""
    if user_filter.pass_kind != item_filter.pass_kind:
        raise ValueError("user and item filters of a branch must share a pass kind")
    users = user_filter(user_adj, walk_feats=walk_feats, rng=rng)
    items = item_filter(item_adj, rng=rng)
    return users, items
