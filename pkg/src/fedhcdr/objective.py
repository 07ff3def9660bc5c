"""Training losses: sampled recommendation loss, softplus MI transfer term and
the hypergraph contrastive loss, plus the bilinear discriminators they use.

Every loss returns a scalar tensor; gradients come from autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from torch import nn

from .filters import glorot

LOG_EPS = 1e-7
MI_TRANSFER, HCL = "mi_transfer", "hcl"


class Discriminator(nn.Module):
    """Bilinear critic ``a^T B b``; the HCL variant squashes through a logistic."""

    def __init__(self, dim: int, kind: str, rng: np.random.Generator):
        super().__init__()
        if kind not in (MI_TRANSFER, HCL):
            raise ValueError(f"unknown discriminator kind {kind!r}")
        self.kind = kind
        self.B = nn.Parameter(glorot(rng, dim, dim))

    def raw(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        # row-wise a_i^T B b_i; b may be a single vector broadcast over rows
        return ((a @ self.B) * b).sum(dim=-1)

    def forward(self, a, b):
        s = self.raw(a, b)
        return torch.sigmoid(s) if self.kind == HCL else s


@dataclass
class LossReport:
    rec_loss: float = 0.0
    mi_term: float = 0.0
    hcl_loss: float = 0.0
    total: float = 0.0


def scores(U, V, users, items):
    """Dot-product scores; ``items`` may be (B,) or (B, k)."""
    u = U[users]
    if items.dim() == 1:
        return (u * V[items]).sum(-1)
    return (u.unsqueeze(1) * V[items]).sum(-1)


def rec_loss(U, V, users, pos_items, neg_items):
    """Negative-sampling loss summed over the batch edges.

    ``neg_items`` has shape (B, k): k sampled negatives for each positive edge.
    """
    users = torch.as_tensor(users)
    pos = scores(U, V, users, torch.as_tensor(pos_items))
    neg = scores(U, V, users, torch.as_tensor(neg_items))
    return -(F.logsigmoid(pos).sum() + F.logsigmoid(-neg).sum())


def full_softmax_loss(U, V, edges):
    """Exact multi-class cross-entropy over the whole item set (test oracle only)."""
    edges = torch.as_tensor(edges)
    logits = U[edges[:, 0]] @ V.T
    return -(logits.gather(1, edges[:, 1:2]).squeeze(1) - torch.logsumexp(logits, dim=1)).sum()


def negative_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """For every row u, a uniformly chosen row index different from u."""
    if n < 2:
        raise ValueError("negative pairing needs at least two users")
    return (np.arange(n) + rng.integers(1, n, size=n)) % n


def mi_term(X, Y, disc: Discriminator, neg_index):
    """Softplus (Jensen-Shannon) MI estimate between row-aligned X and Y.

    Positive pairs are (x_u, y_u); negatives pair x_{neg_index[u]} with y_u.
    """
    neg_index = torch.as_tensor(neg_index)
    pos = disc.raw(X, Y)
    neg = disc.raw(X[neg_index], Y)
    return -F.softplus(-pos).sum() - F.softplus(neg).sum()


def perturb_adjacency(A, p_drop: float, rng: np.random.Generator) -> sp.csr_matrix:
    """Drop each undirected edge of a symmetric adjacency with probability ``p_drop``."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError("p_drop must lie in [0, 1)")
    A = sp.csr_matrix(A)
    if p_drop == 0.0:
        return A.copy()
    upper = sp.triu(A, k=1).tocoo()
    keep = rng.random(upper.nnz) >= p_drop
    kept = sp.coo_matrix((upper.data[keep], (upper.row[keep], upper.col[keep])), shape=A.shape)
    diag = sp.diags(A.diagonal())
    return (kept + kept.T + diag).tocsr()


def readout(U):
    if U.shape[0] == 0:
        raise ValueError("readout of an empty representation matrix")
    return U.mean(dim=0)


def _log_clamped(p):
    return torch.log(p.clamp(LOG_EPS, 1.0 - LOG_EPS))


def hcl_loss(U_clean, U_pert, z, disc: Discriminator):
    """Contrastive loss between clean node embeddings, their edge-dropped
    counterparts and the clean readout ``z``, scored in both argument orders."""
    if disc.kind != HCL:
        raise ValueError("hcl_loss needs an hcl discriminator")
    node_first = _log_clamped(disc(U_clean, z)) + _log_clamped(1.0 - disc(U_pert, z))
    zz = z.expand_as(U_clean)
    summary_first = _log_clamped(disc(zz, U_clean)) + _log_clamped(1.0 - disc(zz, U_pert))
    return -(node_first + summary_first).sum()


def high_total(rec, mi, lam):
    return rec - lam * mi


def low_total(rec, hcl, mi, lam, gamma, mi_sign=1.0):
    return rec + gamma * hcl - mi_sign * lam * mi


def branch_total(branch, rec, mi=0.0, hcl=0.0, lam=0.0, gamma=0.0, mi_sign=1.0):
    if branch == "high":
        return high_total(rec, mi, lam)
    if branch == "low":
        return low_total(rec, hcl, mi, lam, gamma, mi_sign)
    raise ValueError(f"unknown branch {branch!r}")
