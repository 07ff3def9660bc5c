"""Derived matrices of a user (or item) hypergraph built from a binary incidence matrix.

Vertices are rows of ``H`` and hyperedges are columns. Pass ``A_k`` for the user
hypergraph and ``A_k.T`` for the item hypergraph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEGREE_EPS = 1e-12
DEFAULT_WALK_STEPS = 3


@dataclass(frozen=True)
class HypergraphBundle:
    H: sp.csr_matrix
    P: np.ndarray  # hyperedge debias weights (diagonal)
    D_vert: np.ndarray
    D_edge: np.ndarray
    D_tilde: np.ndarray
    A: sp.csr_matrix
    L: sp.csr_matrix
    M: sp.csr_matrix
    walk_features: np.ndarray
    zero_degree: np.ndarray  # vertex indices whose weighted degree is zero

    @property
    def n_vertices(self) -> int:
        return self.H.shape[0]


def _csr(H) -> sp.csr_matrix:
    return sp.csr_matrix(H, dtype=np.float64)


def debias_diagonal(H) -> np.ndarray:
    """Popularity debias weights: ``1 - deg(e) / sum_e deg(e)``."""
    H = _csr(H)
    d_edge = np.asarray(H.sum(axis=0)).ravel()
    if np.any(d_edge <= 0):
        raise ValueError("hyperedge with zero degree; filter it upstream")
    return 1.0 - d_edge / d_edge.sum()


def degree_diagonals(H, P):
    """Return (weighted vertex degrees, hyperedge degrees)."""
    H = _csr(H)
    d_vert = H @ np.asarray(P, dtype=np.float64)
    d_edge = np.asarray(H.sum(axis=0)).ravel()
    return np.asarray(d_vert).ravel(), d_edge


def zero_degree_vertices(d_vert) -> np.ndarray:
    return np.flatnonzero(np.asarray(d_vert) <= 0)


def selfloop_correction(H, P, D_edge) -> np.ndarray:
    H = _csr(H)
    D_edge = np.asarray(D_edge, dtype=np.float64)
    w = np.divide(P, D_edge, out=np.zeros_like(D_edge), where=D_edge > 0)
    return np.asarray(H @ w).ravel()


def _guarded(d_vert):
    d = np.asarray(d_vert, dtype=np.float64).copy()
    d[d <= 0] = DEGREE_EPS
    return d


def _core(H, P, D_edge, D_tilde) -> sp.csr_matrix:
    """``H P D_edge^{-1} H^T - D_tilde`` with the (analytically zero) diagonal removed."""
    H = _csr(H)
    w = np.divide(P, D_edge, out=np.zeros_like(D_edge, dtype=np.float64), where=D_edge > 0)
    G = (H @ sp.diags(w) @ H.T).tocsr()
    G = G - sp.diags(D_tilde)
    # binary H makes diag(G) zero; drop rounding residue so diag(A) == 0 exactly
    G = G.tolil()
    G.setdiag(0.0)
    G = G.tocsr()
    G.eliminate_zeros()
    return G


def adjacency_and_laplacian(H):
    H = _csr(H)
    P = debias_diagonal(H)
    d_vert, d_edge = degree_diagonals(H, P)
    d_tilde = selfloop_correction(H, P, d_edge)
    return _adjacency_from_parts(H, P, d_vert, d_edge, d_tilde)


def _adjacency_from_parts(H, P, d_vert, d_edge, d_tilde):
    G = _core(H, P, d_edge, d_tilde)
    s = sp.diags(1.0 / np.sqrt(_guarded(d_vert)))
    A = (s @ G @ s).tocsr()
    # enforce exact symmetry against rounding in the sparse products
    A = ((A + A.T) * 0.5).tocsr()
    L = (sp.identity(A.shape[0], format="csr") - A).tocsr()
    return A, L


def markov_matrix(H) -> sp.csr_matrix:
    H = _csr(H)
    P = debias_diagonal(H)
    d_vert, d_edge = degree_diagonals(H, P)
    d_tilde = selfloop_correction(H, P, d_edge)
    return _markov_from_parts(H, P, d_vert, d_edge, d_tilde)


def _markov_from_parts(H, P, d_vert, d_edge, d_tilde):
    G = _core(H, P, d_edge, d_tilde)
    return (sp.diags(1.0 / _guarded(d_vert)) @ G).tocsr()


def walk_features(M, steps: int = DEFAULT_WALK_STEPS) -> np.ndarray:
    """Stack ``diag(M^t)`` for t = 1..steps as columns."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    M = sp.csr_matrix(M)
    cols = []
    power = M.copy()
    for t in range(steps):
        if t:
            power = (power @ M).tocsr()
        cols.append(power.diagonal())
    return np.column_stack(cols)


def build_bundle(H, steps: int = DEFAULT_WALK_STEPS) -> HypergraphBundle:
    H = _csr(H)
    P = debias_diagonal(H)
    d_vert, d_edge = degree_diagonals(H, P)
    d_tilde = selfloop_correction(H, P, d_edge)
    A, L = _adjacency_from_parts(H, P, d_vert, d_edge, d_tilde)
    M = _markov_from_parts(H, P, d_vert, d_edge, d_tilde)
    return HypergraphBundle(
        H=H,
        P=P,
        D_vert=d_vert,
        D_edge=d_edge,
        D_tilde=d_tilde,
        A=A,
        L=L,
        M=M,
        walk_features=walk_features(M, steps),
        zero_degree=zero_degree_vertices(d_vert),
    )


def dump_triplets(matrix, path) -> None:
    """Write a sparse matrix as ``row col value`` lines (debug cross-checking)."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")
