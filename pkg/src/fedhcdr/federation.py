"""In-process simulation of the local-global bi-directional transfer protocol.

Each domain is a :class:`Client` holding a high-pass branch (theta, never shared)
and a low-pass branch (phi). Only the low-pass user filter parameters, the shared
user representations and the train edge count ever travel to the server.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import objective as obj
from .dataset import InteractionSet, NegativeSampler, Scenario
from .evaluation import PESSIMISTIC_HALF, TIE_POLICIES, EvalCandidates, RankingResult, evaluate, sample_candidates
from .filters import DTYPE, HIGH, LOW, HypergraphFilter, to_torch_adj
from .hypergraph import build_bundle

log = logging.getLogger(__name__)

SERVER_SEED_KEY = 10_000
_EVAL_KEYS = {"valid": 100, "test": 101}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dim: int = 32
    n_layers: int = 2
    walk_steps: int = 3
    dropout: float = 0.3
    lam: float = 2.0
    gamma: float = 2.0
    p_drop: float = 0.2
    local_epochs: int = 3
    batch_size: int = 1024
    lr: float = 1e-3
    n_rec_negatives: int = 1
    rounds: int = 60
    patience: int = 5
    seed: int = 0
    federated: bool = True
    mi_sign: float = 1.0
    n_eval_negatives: int = 999
    eval_k: int = 10
    tie_policy: str = PESSIMISTIC_HALF

    def errors(self) -> List[str]:
        errs = []
        for name in ("dim", "n_layers", "walk_steps", "local_epochs", "batch_size", "rounds", "patience",
                     "n_rec_negatives", "n_eval_negatives", "eval_k"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"dropout must lie in [0, 1) (got {self.dropout})")
        if not 0.0 <= self.p_drop < 1.0:
            errs.append(f"p_drop must lie in [0, 1) (got {self.p_drop})")
        if not self.lr > 0:
            errs.append(f"lr must be > 0 (got {self.lr})")
        for name in ("lam", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                label = "lambda" if name == "lam" else name
                errs.append(f"{label} must be finite and >= 0 (got {v})")
        if self.mi_sign not in (1.0, -1.0):
            errs.append(f"mi_sign must be +1 or -1 (got {self.mi_sign})")
        if self.tie_policy not in TIE_POLICIES:
            errs.append(f"tie_policy must be one of {TIE_POLICIES} (got {self.tie_policy!r})")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **kw})


SERVER_TO_CLIENT, CLIENT_TO_SERVER = "server->client", "client->server"
_PAYLOAD_KEYS = {
    SERVER_TO_CLIENT: frozenset({"phi_u", "global_users"}),
    CLIENT_TO_SERVER: frozenset({"phi_u", "shared_users", "edge_count"}),
}


@dataclass(frozen=True)
class RoundMessage:
    direction: str
    round: int
    peer: int  # domain id of the client end
    payload: Dict[str, object]

    def __post_init__(self):
        if self.direction not in _PAYLOAD_KEYS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if set(self.payload) != _PAYLOAD_KEYS[self.direction]:
            raise ValueError(f"{self.direction} payload must carry exactly {sorted(_PAYLOAD_KEYS[self.direction])}")


def _clone_state(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def server_aggregate(payloads: Sequence[Tuple[Dict[str, torch.Tensor], torch.Tensor, int]]):
    """Edge-count weighted average of (phi_u, shared user reps, |E_k|) payloads."""
    if not payloads:
        raise ValueError("nothing to aggregate")
    total = float(sum(p[2] for p in payloads))
    if total <= 0:
        raise ValueError("edge counts must be positive")
    weights = [p[2] / total for p in payloads]
    ref_phi, ref_u, _ = payloads[0]
    for phi, users, _ in payloads[1:]:
        if set(phi) != set(ref_phi) or any(phi[k].shape != ref_phi[k].shape for k in ref_phi):
            raise ValueError("phi_u payloads differ in structure")
        if users.shape != ref_u.shape:
            raise ValueError("shared user payloads differ in shape")

    def avg(tensors):
        out = weights[0] * tensors[0]
        for w, t in zip(weights[1:], tensors[1:]):
            out = out + w * t
        return out

    phi = {k: avg([p[0][k] for p in payloads]) for k in ref_phi}
    users = avg([p[1] for p in payloads])
    return phi, users


class Server:
    def __init__(self, n_users: int, cfg: TrainConfig):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(SERVER_SEED_KEY,)))
        init = HypergraphFilter(n_users, cfg.dim, cfg.n_layers, LOW, rng, init_kind="walk",
                                walk_steps=cfg.walk_steps, dropout=cfg.dropout)
        self.global_phi_u = _clone_state(init)
        self.global_users = torch.zeros(n_users, cfg.dim, dtype=DTYPE)
        self.round = 0

    def broadcast(self, peer: int) -> RoundMessage:
        return RoundMessage(SERVER_TO_CLIENT, self.round, peer,
                            {"phi_u": {k: v.clone() for k, v in self.global_phi_u.items()},
                             "global_users": self.global_users.clone()})

    def aggregate(self, messages: Sequence[RoundMessage]):
        msgs = sorted(messages, key=lambda m: m.peer)
        self.global_phi_u, self.global_users = server_aggregate(
            [(m.payload["phi_u"], m.payload["shared_users"], m.payload["edge_count"]) for m in msgs]
        )
        self.round += 1

    def state(self) -> Dict[str, torch.Tensor]:
        out = {f"phi_u.{k}": v.clone() for k, v in self.global_phi_u.items()}
        out["global_users"] = self.global_users.clone()
        return out

    def load_state(self, state: Dict[str, torch.Tensor]):
        self.global_phi_u = {k[len("phi_u."):]: v.clone() for k, v in state.items() if k.startswith("phi_u.")}
        self.global_users = state["global_users"].clone()


@dataclass
class StepStats:
    rec_loss: float = 0.0
    mi_term: float = 0.0
    hcl_loss: float = 0.0
    n: int = 0

    def add(self, rec=0.0, mi=0.0, hcl=0.0):
        self.rec_loss += rec
        self.mi_term += mi
        self.hcl_loss += hcl

    def mean(self) -> Dict[str, float]:
        n = max(self.n, 1)
        return {"rec_loss": self.rec_loss / n, "mi_term": self.mi_term / n, "hcl_loss": self.hcl_loss / n}


class Client:
    """One domain: its data, hypergraph bundles, both branches, critics and optimisers."""

    def __init__(self, domain_id: int, data: InteractionSet, cfg: TrainConfig):
        self.domain_id = domain_id
        self.data = data
        self.cfg = cfg
        self.name = data.name
        self.edge_count = int(len(data.train_edges))
        if self.edge_count == 0:
            raise ValueError(f"domain {data.name!r} has no train edges")

        H = data.incidence()
        self.user_bundle = build_bundle(H, cfg.walk_steps)
        self.item_bundle = build_bundle(H.T.tocsr(), cfg.walk_steps)
        self.user_adj = to_torch_adj(self.user_bundle.A)
        self.item_adj = to_torch_adj(self.item_bundle.A)
        self.walk_feats = torch.from_numpy(self.user_bundle.walk_features)

        ss = np.random.SeedSequence(cfg.seed, spawn_key=(domain_id,))
        init_ss, batch_ss, high_ss, low_ss = ss.spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.high_rng = np.random.default_rng(high_ss)
        self.low_rng = np.random.default_rng(low_ss)

        n_u, n_i, d, L = data.n_users, data.n_items, cfg.dim, cfg.n_layers
        self.model = nn.ModuleDict({
            "hhf_user": HypergraphFilter(n_u, d, L, HIGH, init_rng, dropout=cfg.dropout),
            "hhf_item": HypergraphFilter(n_i, d, L, HIGH, init_rng, dropout=cfg.dropout),
            "lhf_user": HypergraphFilter(n_u, d, L, LOW, init_rng, init_kind="walk",
                                         walk_steps=cfg.walk_steps, dropout=cfg.dropout),
            "lhf_item": HypergraphFilter(n_i, d, L, LOW, init_rng, dropout=cfg.dropout),
            "disc_eg": obj.Discriminator(d, obj.MI_TRANSFER, init_rng),
            "disc_se": obj.Discriminator(d, obj.MI_TRANSFER, init_rng),
            "disc_hcl": obj.Discriminator(d, obj.HCL, init_rng),
        })
        m = self.model
        self.theta_params = [*m["hhf_user"].parameters(), *m["hhf_item"].parameters(), *m["disc_eg"].parameters()]
        self.phi_params = [*m["lhf_user"].parameters(), *m["lhf_item"].parameters(),
                           *m["disc_se"].parameters(), *m["disc_hcl"].parameters()]
        self.theta_opt = torch.optim.Adam(self.theta_params, lr=cfg.lr)
        self.phi_opt = torch.optim.Adam(self.phi_params, lr=cfg.lr)

        self.sampler = NegativeSampler(n_i, data.user_items())
        self._pert_adj = self.user_adj
        self._cands: Dict[tuple, EvalCandidates] = {}

    # ---- federated parameter exchange -------------------------------------------------

    def phi_u(self) -> Dict[str, torch.Tensor]:
        return _clone_state(self.model["lhf_user"])

    def set_phi_u(self, state: Dict[str, torch.Tensor]):
        own = self.model["lhf_user"].state_dict()
        if set(own) != set(state):
            raise ValueError("received phi_u does not match the local low-pass user filter")
        with torch.no_grad():
            for k, v in state.items():
                if own[k].shape != v.shape:
                    raise ValueError(f"phi_u.{k}: expected shape {tuple(own[k].shape)}, got {tuple(v.shape)}")
                own[k].copy_(v)

    # ---- forward helpers --------------------------------------------------------------

    def _exclusive_users(self, rng=None):
        return self.model["hhf_user"](self.user_adj, rng=rng)

    def _shared_users(self, adj=None, rng=None):
        return self.model["lhf_user"](self.user_adj if adj is None else adj, walk_feats=self.walk_feats, rng=rng)

    @torch.no_grad()
    def shared_users(self) -> torch.Tensor:
        self.model.eval()
        return self._shared_users()

    @torch.no_grad()
    def representations(self):
        """(U_e, V_e, U_s, V_s) as numpy arrays, without dropout."""
        self.model.eval()
        m = self.model
        return (
            self._exclusive_users().numpy(),
            m["hhf_item"](self.item_adj).numpy(),
            self._shared_users().numpy(),
            m["lhf_item"](self.item_adj).numpy(),
        )

    def scorer(self):
        U_e, V_e, U_s, V_s = self.representations()

        def score(user, items):
            return U_e[user] @ V_e[items].T + U_s[user] @ V_s[items].T

        return score

    def predict_scores(self, user: int, items) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        if not 0 <= user < self.data.n_users:
            raise IndexError(f"unknown user index {user}")
        if len(items) and (items.min() < 0 or items.max() >= self.data.n_items):
            raise IndexError("unknown item index")
        return self.scorer()(user, items)

    # ---- training ---------------------------------------------------------------------

    def _check(self, value: torch.Tensor, where: str):
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite loss in {where} (domain {self.name!r}): {value.item()}")

    def high_step(self, users, pos, neg, global_users: Optional[torch.Tensor], where="high step"):
        cfg = self.cfg
        self.model.train()
        self.theta_opt.zero_grad()
        U_e = self._exclusive_users(self.high_rng)
        V_e = self.model["hhf_item"](self.item_adj, rng=self.high_rng)
        rec = obj.rec_loss(U_e, V_e, users, pos, neg)
        mi = torch.zeros((), dtype=DTYPE)
        if cfg.lam > 0 and global_users is not None:
            pairing = obj.negative_pairing(U_e.shape[0], self.high_rng)
            mi = obj.mi_term(U_e, global_users, self.model["disc_eg"], pairing)
        total = obj.high_total(rec, mi, cfg.lam)
        self._check(total, where)
        total.backward()
        self.theta_opt.step()
        return rec.item(), mi.item()

    def low_step(self, users, pos, neg, where="low step"):
        cfg = self.cfg
        exclusive = None
        if cfg.lam > 0:
            with torch.no_grad():
                self.model["hhf_user"].eval()
                exclusive = self._exclusive_users()
        self.model.train()
        self.phi_opt.zero_grad()
        U_s = self._shared_users(rng=self.low_rng)
        V_s = self.model["lhf_item"](self.item_adj, rng=self.low_rng)
        rec = obj.rec_loss(U_s, V_s, users, pos, neg)
        hcl = torch.zeros((), dtype=DTYPE)
        if cfg.gamma > 0:
            U_p = self._shared_users(adj=self._pert_adj, rng=self.low_rng)
            hcl = obj.hcl_loss(U_s, U_p, obj.readout(U_s), self.model["disc_hcl"])
        mi = torch.zeros((), dtype=DTYPE)
        if exclusive is not None:
            pairing = obj.negative_pairing(U_s.shape[0], self.low_rng)
            mi = obj.mi_term(U_s, exclusive, self.model["disc_se"], pairing)
        total = obj.low_total(rec, hcl, mi, cfg.lam, cfg.gamma, cfg.mi_sign)
        self._check(total, where)
        total.backward()
        self.phi_opt.step()
        return rec.item(), mi.item(), hcl.item()

    def epoch_batches(self):
        """Shuffle train edges and attach sampled negatives, one tuple per mini-batch."""
        edges = self.data.train_edges
        order = self.batch_rng.permutation(len(edges))
        for start in range(0, len(edges), self.cfg.batch_size):
            b = edges[order[start:start + self.cfg.batch_size]]
            neg = self.sampler.sample(b[:, 0], self.cfg.n_rec_negatives, self.batch_rng)
            yield torch.from_numpy(b[:, 0]), torch.from_numpy(b[:, 1]), torch.from_numpy(neg)

    def resample_perturbation(self):
        if self.cfg.gamma > 0:
            self._pert_adj = to_torch_adj(obj.perturb_adjacency(self.user_bundle.A, self.cfg.p_drop, self.low_rng))

    def run_epoch(self, global_users: Optional[torch.Tensor] = None, tag: str = "") -> StepStats:
        stats = StepStats()
        self.resample_perturbation()
        for j, (users, pos, neg) in enumerate(self.epoch_batches()):
            where = f"{tag} batch {j}"
            h_rec, h_mi = self.high_step(users, pos, neg, global_users, where=where + " high")
            l_rec, l_mi, l_hcl = self.low_step(users, pos, neg, where=where + " low")
            stats.add(h_rec + l_rec, h_mi + l_mi, l_hcl)
            stats.n += 1
        return stats

    def local_round(self, incoming: Optional[RoundMessage], round_idx: int) -> Tuple[Optional[RoundMessage], StepStats]:
        """Receive the broadcast (if federated), train, and build the upload."""
        global_users = None
        if incoming is not None:
            self.set_phi_u(incoming.payload["phi_u"])
            if round_idx > 0:
                global_users = incoming.payload["global_users"]
                if global_users.shape != (self.data.n_users, self.cfg.dim):
                    raise ValueError("global user representations have the wrong shape")
        stats = StepStats()
        for e in range(self.cfg.local_epochs):
            s = self.run_epoch(global_users, tag=f"round {round_idx} epoch {e}")
            stats.add(s.rec_loss, s.mi_term, s.hcl_loss)
            stats.n += s.n
        if incoming is None:
            return None, stats
        out = RoundMessage(CLIENT_TO_SERVER, round_idx, self.domain_id,
                           {"phi_u": self.phi_u(), "shared_users": self.shared_users().clone(),
                            "edge_count": self.edge_count})
        return out, stats

    # ---- evaluation & persistence -----------------------------------------------------

    def eval_candidates(self, split: str, n_negatives: int, seed: Optional[int] = None) -> EvalCandidates:
        key = (split, n_negatives, seed)
        if key not in self._cands:
            heldout = {"valid": self.data.valid_edges, "test": self.data.test_edges}[split]
            if seed is None:
                seed = np.random.SeedSequence(self.cfg.seed, spawn_key=(self.domain_id, _EVAL_KEYS[split]))
            self._cands[key] = sample_candidates(heldout, self.data.user_items(), self.data.n_items,
                                                 n_negatives, seed)
        return self._cands[key]

    def evaluate(self, split: str) -> RankingResult:
        return evaluate(self, split, self.cfg.n_eval_negatives, self.cfg.eval_k, tie_policy=self.cfg.tie_policy)

    def state(self) -> Dict[str, torch.Tensor]:
        return _clone_state(self.model)

    def load_state(self, state: Dict[str, torch.Tensor]):
        self.model.load_state_dict(state)


def build_clients(scenario: Scenario, cfg: TrainConfig) -> List[Client]:
    return [Client(k, dom, cfg) for k, dom in enumerate(scenario.domains)]


def train_standalone(client: Client, epochs: int) -> StepStats:
    """Plain alternating local training of both branches, no server involved."""
    stats = StepStats()
    for e in range(epochs):
        s = client.run_epoch(None, tag=f"standalone epoch {e}")
        stats.add(s.rec_loss, s.mi_term, s.hcl_loss)
        stats.n += s.n
    return stats


@dataclass
class TrainingResult:
    clients: List[Client]
    server: Optional[Server]
    history: List[Dict[str, object]] = field(default_factory=list)
    best_round: int = -1
    rounds_run: int = 0
    trace: Optional[List[RoundMessage]] = None


class Federation:
    """Synchronous round scheduler: broadcast, local training, aggregation barrier."""

    def __init__(self, scenario: Scenario, cfg: TrainConfig, trace: Optional[list] = None):
        cfg.validate()
        self.cfg = cfg
        self.scenario = scenario
        self.clients = build_clients(scenario, cfg)
        self.server = Server(scenario.n_users, cfg) if cfg.federated else None
        self.trace = trace
        self.round = 0

    def _record(self, msg):
        if self.trace is not None:
            self.trace.append(msg)

    def run_round(self) -> List[StepStats]:
        t = self.round
        stats = []
        uploads = []
        for client in self.clients:
            incoming = None
            if self.server is not None:
                incoming = self.server.broadcast(client.domain_id)
                self._record(incoming)
            out, s = client.local_round(incoming, t)
            stats.append(s)
            if out is not None:
                self._record(out)
                uploads.append(out)
        if self.server is not None:
            self.server.aggregate(uploads)
        self.round += 1
        return stats

    def snapshot(self):
        return ([c.state() for c in self.clients], self.server.state() if self.server else None)

    def restore(self, snap):
        states, server_state = snap
        for c, s in zip(self.clients, states):
            c.load_state(s)
        if self.server is not None and server_state is not None:
            self.server.load_state(server_state)


def run_training(scenario: Scenario, cfg: TrainConfig, trace: Optional[list] = None,
                 restore_best: bool = True) -> TrainingResult:
    """Run up to ``cfg.rounds`` rounds with validation-MRR early stopping."""
    fed = Federation(scenario, cfg, trace)
    history = []
    best_mrr, best_round, best_snap, stale = -1.0, -1, None, 0
    for t in range(cfg.rounds):
        stats = fed.run_round()
        mrrs = []
        for client, s in zip(fed.clients, stats):
            res = client.evaluate("valid")
            mrrs.append(res.mrr)
            history.append({"round": t, "domain": client.name, **s.mean(),
                            "val_MRR": res.mrr, f"val_HR@{cfg.eval_k}": res.hr,
                            f"val_NDCG@{cfg.eval_k}": res.ndcg})
        avg = float(np.mean(mrrs))
        log.info("round %d: mean validation MRR %.5f", t, avg)
        if avg > best_mrr:
            best_mrr, best_round, stale = avg, t, 0
            best_snap = fed.snapshot() if restore_best else None
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after round %d (best round %d)", t, best_round)
                break
    if restore_best and best_snap is not None:
        fed.restore(best_snap)
    return TrainingResult(fed.clients, fed.server, history, best_round, fed.round, trace)
