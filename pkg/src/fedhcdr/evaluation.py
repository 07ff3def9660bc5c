"""Leave-one-out Top-K ranking evaluation against sampled negatives."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

OPTIMISTIC, PESSIMISTIC, PESSIMISTIC_HALF = "optimistic", "pessimistic", "pessimistic-half"
TIE_POLICIES = (OPTIMISTIC, PESSIMISTIC, PESSIMISTIC_HALF)


def rank_of(target_score: float, negative_scores, tie_policy: str = PESSIMISTIC_HALF) -> int:
    neg = np.asarray(negative_scores, dtype=np.float64)
    if not np.isfinite(target_score) or not np.all(np.isfinite(neg)):
        raise ValueError("non-finite score")
    greater = int(np.count_nonzero(neg > target_score))
    ties = int(np.count_nonzero(neg == target_score))
    return 1 + greater + _tie_penalty(ties, tie_policy)


def _tie_penalty(ties, tie_policy):
    if tie_policy == OPTIMISTIC:
        return 0
    if tie_policy == PESSIMISTIC:
        return ties
    if tie_policy == PESSIMISTIC_HALF:
        return (ties + 1) // 2
    raise ValueError(f"unknown tie policy {tie_policy!r}")


def ranks_from_matrix(scores: np.ndarray, tie_policy: str = PESSIMISTIC_HALF) -> np.ndarray:
    """Column 0 holds the target score, the rest are negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    target = scores[:, :1]
    greater = (scores[:, 1:] > target).sum(axis=1)
    ties = (scores[:, 1:] == target).sum(axis=1)
    return 1 + greater + _tie_penalty(ties, tie_policy)


@dataclass
class RankingResult:
    ranks: np.ndarray
    mrr: float
    hr: float
    ndcg: float
    k: int = 10

    @property
    def n_users(self) -> int:
        return len(self.ranks)

    def as_dict(self) -> Dict[str, float]:
        return {"MRR": self.mrr, f"HR@{self.k}": self.hr, f"NDCG@{self.k}": self.ndcg}


def metrics_from_ranks(ranks, k: int = 10) -> RankingResult:
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    if ranks.min() < 1:
        raise ValueError("ranks start at 1")
    hit = ranks <= k
    gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return RankingResult(
        ranks=ranks,
        mrr=float(np.mean(1.0 / ranks)),
        hr=float(np.mean(hit)),
        ndcg=float(np.mean(gains)),
        k=k,
    )


def ndcg_contribution(rank: int, k: int = 10) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class EvalCandidates:
    """Per held-out edge: the target item followed by its sampled negatives."""

    users: np.ndarray
    items: List[np.ndarray]


def sample_candidates(heldout, user_items, n_items, n_negatives, seed) -> EvalCandidates:
    """Fix the candidate lists for one split.

    Negatives exclude everything the user interacted with. When the catalogue
    has fewer free items than ``n_negatives``, all free items are used.
    """
    rng = np.random.default_rng(seed)
    users, items = [], []
    for u, target in np.asarray(heldout, dtype=np.int64).reshape(-1, 2):
        mask = np.ones(n_items, dtype=bool)
        mask[user_items[u]] = False
        free = np.flatnonzero(mask)
        take = min(n_negatives, len(free))
        neg = rng.choice(free, size=take, replace=False) if take < len(free) else free
        users.append(u)
        items.append(np.concatenate([[target], neg]).astype(np.int64))
    return EvalCandidates(np.asarray(users, dtype=np.int64), items)


def evaluate_candidates(
    score_fn: Callable[[int, np.ndarray], np.ndarray],
    cands: EvalCandidates,
    k: int = 10,
    tie_policy: str = PESSIMISTIC_HALF,
) -> RankingResult:
    ranks = np.empty(len(cands.users), dtype=np.int64)
    for j, (u, items) in enumerate(zip(cands.users, cands.items)):
        s = np.asarray(score_fn(int(u), items), dtype=np.float64)
        ranks[j] = rank_of(s[0], s[1:], tie_policy)
    return metrics_from_ranks(ranks, k)


def evaluate(client, split: str = "valid", n_negatives: int = 999, k: int = 10,
             seed: Optional[int] = None, tie_policy: str = PESSIMISTIC_HALF) -> RankingResult:
    """Rank each held-out item of ``split`` among sampled negatives using the client's scores."""
    cands = client.eval_candidates(split, n_negatives, seed)
    if len(cands.users) == 0:
        raise ValueError(f"split {split!r} is empty")
    return evaluate_candidates(client.scorer(), cands, k, tie_policy)
