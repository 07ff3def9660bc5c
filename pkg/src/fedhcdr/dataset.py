"""Interaction ingestion, multi-domain scenario building, splits and negative sampling."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    pass


class MalformedLineError(DatasetError):
    def __init__(self, path, line_no, line):
        super().__init__(f"{path}:{line_no}: malformed line {line!r}")
        self.line_no = line_no


class EmptyScenarioError(DatasetError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    domain_tag: str
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DatasetError("user_id and item_id must be non-empty")


@dataclass
class InteractionSet:
    """One domain's interactions over the shared user universe.

    Edge arrays have shape (n, 2) holding (user_index, item_index).
    """

    name: str
    n_users: int
    n_items: int
    train_edges: np.ndarray
    valid_edges: np.ndarray
    test_edges: np.ndarray
    user_index_map: Dict[str, int]
    item_index_map: Dict[str, int]
    flagged_users: List[int] = field(default_factory=list)

    def all_edges(self) -> np.ndarray:
        return np.concatenate([self.train_edges, self.valid_edges, self.test_edges])

    def user_items(self) -> List[np.ndarray]:
        """Sorted item indices per user over train+valid+test."""
        return _group_items(self.all_edges(), self.n_users)

    def incidence(self) -> sp.csr_matrix:
        return incidence_matrix(self.train_edges, self.n_users, self.n_items)

    @property
    def density(self) -> float:
        return len(self.train_edges) / float(self.n_users * self.n_items)


@dataclass
class Scenario:
    name: str
    domains: List[InteractionSet]

    def __post_init__(self):
        if self.domains:
            ref = self.domains[0]
            for d in self.domains[1:]:
                if d.n_users != ref.n_users or d.user_index_map != ref.user_index_map:
                    raise DatasetError("domains do not share one user universe")

    @property
    def n_users(self) -> int:
        return self.domains[0].n_users


def load_interactions(path, domain_tag: str) -> List[RawInteraction]:
    """Read a TSV of ``user<TAB>item[<TAB>timestamp]`` lines, dropping repeated pairs."""
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise MalformedLineError(path, line_no, line)
            ts = None
            if len(parts) == 3:
                try:
                    ts = int(parts[2])
                except ValueError:
                    raise MalformedLineError(path, line_no, line) from None
            key = (parts[0], parts[1])
            if key in seen:
                continue
            seen.add(key)
            out.append(RawInteraction(parts[0], parts[1], domain_tag, ts))
    return out


def _stage_counts(stage, pairs):
    return {"stage": stage,
            "users": len(set.union(*[{u for u, _ in dom} for dom in pairs])) if pairs else 0,
            "items": [len({i for _, i in dom}) for dom in pairs],
            "interactions": [len(dom) for dom in pairs]}


def _filter_fixed_point(pairs, min_user_inter, min_item_inter, trace=None):
    """pairs: list (per domain) of sets of (user, item). Returns filtered copies.

    When ``trace`` is a list, per-stage counts are appended to it.
    """
    pairs = [set(p) for p in pairs]
    if trace is not None:
        trace.append(_stage_counts("raw", pairs))
    n_pass = 0
    while True:
        n_pass += 1
        changed = False
        for k, dom in enumerate(pairs):
            item_count = defaultdict(int)
            for _, i in dom:
                item_count[i] += 1
            keep = {(u, i) for (u, i) in dom if item_count[i] >= min_item_inter}
            if len(keep) != len(dom):
                changed = True
                pairs[k] = keep
        if trace is not None:
            trace.append(_stage_counts(f"pass {n_pass}: item filter", pairs))

        user_total = defaultdict(int)
        for dom in pairs:
            for u, _ in dom:
                user_total[u] += 1
        users_per_domain = [{u for u, _ in dom} for dom in pairs]
        common = set.intersection(*users_per_domain) if users_per_domain else set()
        good = {u for u in common if user_total[u] >= min_user_inter}
        for k, dom in enumerate(pairs):
            keep = {(u, i) for (u, i) in dom if u in good}
            if len(keep) != len(dom):
                changed = True
                pairs[k] = keep
        if trace is not None:
            trace.append(_stage_counts(f"pass {n_pass}: user filter + overlap", pairs))
        if not changed:
            return pairs


def filter_report(raw: Dict[str, List[RawInteraction]], min_user_inter: int = 5, min_item_inter: int = 10):
    """Counts after every filter stage (for comparing against published dataset statistics)."""
    trace: List[dict] = []
    _filter_fixed_point([{(r.user_id, r.item_id) for r in raw[t]} for t in raw], min_user_inter, min_item_inter,
                        trace)
    return trace


def leave_one_out_split(
    edges: Sequence[Sequence[int]],
    rng: np.random.Generator,
    item_train_counts: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[int]]:
    """Hold out one validation and one test interaction per user.

    ``edges[u]`` lists user u's items. Users with fewer than three interactions keep
    everything in train and are returned in the flagged list. When
    ``item_train_counts`` is given (counts over all edges, mutated in place), a
    held-out item is only chosen if it keeps at least one train occurrence.
    """
    train, valid, test, flagged = [], [], [], []
    for u, items in enumerate(edges):
        items = list(items)
        if len(items) < 3:
            train.extend((u, i) for i in items)
            if items:
                flagged.append(u)
            continue
        if item_train_counts is None:
            eligible = list(range(len(items)))
        else:
            eligible = [j for j, i in enumerate(items) if item_train_counts[i] >= 2]
        if len(eligible) < 2:
            train.extend((u, i) for i in items)
            flagged.append(u)
            continue
        pick = rng.choice(len(eligible), size=2, replace=False)
        v_pos, t_pos = eligible[pick[0]], eligible[pick[1]]
        valid.append((u, items[v_pos]))
        test.append((u, items[t_pos]))
        if item_train_counts is not None:
            item_train_counts[items[v_pos]] -= 1
            item_train_counts[items[t_pos]] -= 1
        train.extend((u, i) for j, i in enumerate(items) if j not in (v_pos, t_pos))
    return _as_edges(train), _as_edges(valid), _as_edges(test), flagged


def _as_edges(pairs) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _group_items(edges: np.ndarray, n_users: int) -> List[np.ndarray]:
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    bounds = np.searchsorted(e[:, 0], np.arange(n_users + 1))
    return [e[bounds[u]:bounds[u + 1], 1] for u in range(n_users)]


def build_scenario(
    raw: Dict[str, List[RawInteraction]],
    min_user_inter: int = 5,
    min_item_inter: int = 10,
    name: str = "scenario",
    seed: int = 0,
) -> Scenario:
    """Filter to a fully-overlapping user set and split every domain.

    Item filtering (per domain), user filtering (total interactions over all
    domains) and the overlap restriction are repeated until nothing changes.
    """
    if len(raw) < 2:
        raise DatasetError("a scenario needs at least two domains")
    for tag, inter in raw.items():
        if not inter:
            raise DatasetError(f"domain {tag!r} has no interactions")

    tags = list(raw)
    pairs = _filter_fixed_point(
        [{(r.user_id, r.item_id) for r in raw[t]} for t in tags], min_user_inter, min_item_inter
    )
    users = sorted({u for u, _ in pairs[0]})
    if not users:
        raise EmptyScenarioError("filtering left zero users")
    user_map = {u: j for j, u in enumerate(users)}

    seeds = np.random.SeedSequence(seed).spawn(len(tags))
    domains = []
    for tag, dom, ss in zip(tags, pairs, seeds):
        item_map = {i: j for j, i in enumerate(sorted({i for _, i in dom}))}
        per_user = [[] for _ in users]
        for u, i in sorted(dom):
            per_user[user_map[u]].append(item_map[i])
        counts = np.bincount([item_map[i] for _, i in dom], minlength=len(item_map))
        train, valid, test, flagged = leave_one_out_split(
            per_user, np.random.default_rng(ss), item_train_counts=counts
        )
        domains.append(
            InteractionSet(
                name=tag,
                n_users=len(users),
                n_items=len(item_map),
                train_edges=train,
                valid_edges=valid,
                test_edges=test,
                user_index_map=dict(user_map),
                item_index_map=item_map,
                flagged_users=flagged,
            )
        )
    return Scenario(name=name, domains=domains)


def scenario_pairs(scenario: Scenario) -> Dict[str, List[RawInteraction]]:
    """Turn a scenario back into raw interactions (train+valid+test)."""
    out = {}
    for dom in scenario.domains:
        inv_u = {v: k for k, v in dom.user_index_map.items()}
        inv_i = {v: k for k, v in dom.item_index_map.items()}
        out[dom.name] = [RawInteraction(inv_u[u], inv_i[i], dom.name) for u, i in dom.all_edges()]
    return out


def sample_negatives(user: int, k: int, exclusion, n_items: int, rng: np.random.Generator) -> List[int]:
    """Draw ``k`` distinct items uniformly from the items the user never touched."""
    if k == 0:
        return []
    mask = np.ones(n_items, dtype=bool)
    mask[np.asarray(list(exclusion), dtype=np.int64)] = False
    candidates = np.flatnonzero(mask)
    if k > len(candidates):
        raise DatasetError(f"user {user}: {k} negatives requested, {len(candidates)} candidates")
    return rng.choice(candidates, size=k, replace=False).tolist()


class NegativeSampler:
    """Vectorised uniform negative sampling by rejection against known interactions."""

    def __init__(self, n_items: int, user_items: List[np.ndarray]):
        self.n_items = n_items
        keys = [u * n_items + np.asarray(items, dtype=np.int64) for u, items in enumerate(user_items)]
        self._keys = np.sort(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
        sizes = np.array([len(x) for x in user_items])
        if np.any(sizes >= n_items):
            raise DatasetError("some user interacted with every item; no negatives available")

    def _known(self, users, items):
        q = users * self.n_items + items
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == q

    def sample(self, users: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        out = rng.integers(0, self.n_items, size=(len(users), k))
        rep = np.repeat(users[:, None], k, axis=1)
        bad = self._known(rep, out)
        while bad.any():
            out[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad[bad] = self._known(rep[bad], out[bad])
        return out


def incidence_matrix(train_edges, n_users: int, n_items: int) -> sp.csr_matrix:
    e = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e[:, 0].max() >= n_users or e[:, 1].max() >= n_items):
        raise DatasetError("edge index out of range")
    data = np.ones(len(e))
    mat = sp.csr_matrix((data, (e[:, 0], e[:, 1])), shape=(n_users, n_items))
    mat.sum_duplicates()
    mat.data[:] = 1.0
    return mat


def load_scenario(domain_files: Dict[str, Path], min_user_inter=5, min_item_inter=10, name="scenario", seed=0):
    raw = {tag: load_interactions(path, tag) for tag, path in domain_files.items()}
    return build_scenario(raw, min_user_inter, min_item_inter, name=name, seed=seed)
