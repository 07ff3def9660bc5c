"""Acceptance gate: one test per criterion A1-A10, each printing a PASS/FAIL/SKIP line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -s``; the summary of
all criteria is also printed at the end of every pytest session.
"""
import functools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest
from fedhcdr import cli
from fedhcdr import evaluation as ev
from fedhcdr import federation as fed
from fedhcdr import filters as fl
from fedhcdr import objective as obj
from fedhcdr.config import VARIANT_OVERRIDES
from fedhcdr.dataset import Scenario, build_scenario, filter_report, load_interactions, load_scenario
from fedhcdr.hypergraph import build_bundle
from fedhcdr.synthetic import SyntheticSpec, generate_synthetic
from oracles import dense_hypergraph, fd_gradient_errors, naive_metrics, random_incidence, rational_reference


def criterion(key):
    """Record PASS/FAIL (with the returned or raised detail) for the session summary."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except pytest.skip.Exception as exc:
                conftest.ACCEPTANCE[key] = ("SKIP", str(exc))
                print(f"{key}: SKIP - {exc}")
                raise
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                conftest.ACCEPTANCE[key] = ("FAIL", msg)
                print(f"{key}: FAIL - {msg}")
                raise
            detail = f"{detail} ({time.perf_counter() - t0:.1f}s)".strip()
            conftest.ACCEPTANCE[key] = ("PASS", detail)
            print(f"{key}: PASS - {detail}")

        return inner

    return wrap


@criterion("A1")
def test_A1_matrix_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240101)
    worst, worst_sym = 0.0, 0.0
    for _ in range(200):
        H = random_incidence(rng, max_v=20, max_e=20)
        b = build_bundle(H, steps=3)
        ref = dense_hypergraph(H)
        for key in ("P", "D_vert", "D_edge", "D_tilde"):
            worst = max(worst, np.abs(getattr(b, key) - ref[key]).max())
        for key in ("A", "L", "M"):
            worst = max(worst, np.abs(getattr(b, key).toarray() - ref[key]).max())
        A = b.A.toarray()
        worst_sym = max(worst_sym, np.abs(np.diag(A)).max(), np.abs(A - A.T).max())
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-10, f"max deviation {worst:.3e}"
    assert worst_sym <= 1e-12, f"diag/symmetry deviation {worst_sym:.3e}"
    assert elapsed < 30, f"took {elapsed:.1f}s"
    return f"200 instances, max deviation {worst:.2e}, diag/sym {worst_sym:.1e}"


@criterion("A2")
def test_A2_reference_instance():
    H = np.array([[1.0, 1.0], [1.0, 0.0]])
    b = build_bundle(H, steps=2)
    r = math.sqrt(3) / 6
    np.testing.assert_allclose(b.A.toarray(), [[0, r], [r, 0]], atol=1e-12, rtol=0)
    np.testing.assert_allclose(b.M.toarray(), [[0, 1 / 6], [1 / 2, 0]], atol=1e-12, rtol=0)
    np.testing.assert_allclose(b.walk_features[:, 1], [1 / 12, 1 / 12], atol=1e-12, rtol=0)
    exact = rational_reference([[1, 1], [1, 0]])
    from fractions import Fraction
    assert exact["M"] == [[0, Fraction(1, 6)], [Fraction(1, 2), 0]]
    assert exact["M2_diag"] == [Fraction(1, 12), Fraction(1, 12)]
    assert exact["A_squared"][0][1] == Fraction(1, 12)  # (sqrt(3)/6)^2
    return "A, M, diag(M^2) match exact rationals"


@criterion("A3")
def test_A3_spectral_property():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        H = random_incidence(rng, max_v=12, max_e=12)
        b = build_bundle(H)
        lam, Q = np.linalg.eigh(b.L.toarray())
        n = len(lam)
        adj = fl.to_torch_adj(b.A)
        eye, zero = torch.eye(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64)
        for beta in (0.0, 0.5):
            high = fl.propagate(adj, torch.from_numpy(Q), eye, zero, beta, fl.HIGH, activation=None).numpy()
            low = fl.propagate(adj, torch.from_numpy(Q), eye, zero, beta, fl.LOW, activation=None).numpy()
            worst = max(worst, np.abs(high - Q * (lam - beta)).max(), np.abs(low - Q * (2 + beta - lam)).max())
    assert worst <= 1e-8, f"max deviation {worst:.3e}"
    return f"100 instances x 2 betas, max deviation {worst:.2e}"


def _grad_setup(seed, n_users=7, n_items=9, d=5):
    rng = np.random.default_rng(seed)
    H = random_incidence(rng, max_v=n_users, max_e=n_items, min_v=n_users, min_e=n_items)
    ub, ib = build_bundle(H), build_bundle(H.T)
    Au, Ai = fl.to_torch_adj(ub.A), fl.to_torch_adj(ib.A)
    wf = torch.from_numpy(ub.walk_features)
    mods = {
        "hhf_user": fl.HypergraphFilter(n_users, d, 2, fl.HIGH, rng),
        "hhf_item": fl.HypergraphFilter(n_items, d, 2, fl.HIGH, rng),
        "lhf_user": fl.HypergraphFilter(n_users, d, 2, fl.LOW, rng, init_kind="walk", walk_steps=3),
        "lhf_item": fl.HypergraphFilter(n_items, d, 2, fl.LOW, rng),
        "disc_eg": obj.Discriminator(d, obj.MI_TRANSFER, rng),
        "disc_se": obj.Discriminator(d, obj.MI_TRANSFER, rng),
        "disc_hcl": obj.Discriminator(d, obj.HCL, rng),
    }
    with torch.no_grad():
        # move betas and biases off zero so their gradients are exercised generically
        for m in mods.values():
            for name, p in m.named_parameters():
                if "betas" in name or "biases" in name or "walk_bias" in name:
                    p.copy_(torch.from_numpy(rng.uniform(-0.3, 0.3, size=tuple(p.shape))))
            m.eval()
    e = np.argwhere(H > 0)
    users, pos = torch.from_numpy(e[:, 0]), torch.from_numpy(e[:, 1])
    neg = torch.from_numpy(rng.integers(0, n_items, size=(len(e), 2)))
    pert = fl.to_torch_adj(obj.perturb_adjacency(ub.A, 0.3, rng))
    pairing = obj.negative_pairing(n_users, rng)
    U_g = torch.from_numpy(rng.standard_normal((n_users, d)))
    return mods, Au, Ai, wf, users, pos, neg, pert, pairing, U_g


@criterion("A4")
def test_A4_gradient_check():
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for seed in range(3):
        mods, Au, Ai, wf, users, pos, neg, pert, pairing, U_g = _grad_setup(seed)

        def high_rep():
            return mods["hhf_user"](Au), mods["hhf_item"](Ai)

        def low_rep():
            return mods["lhf_user"](Au, walk_feats=wf), mods["lhf_item"](Ai)

        def low_pert():
            return mods["lhf_user"](pert, walk_feats=wf)

        lam, gamma = 2.0, 2.0
        with torch.no_grad():
            U_e_const = mods["hhf_user"](Au)
        losses = {
            "rec_high": lambda: obj.rec_loss(*high_rep(), users, pos, neg),
            "rec_low": lambda: obj.rec_loss(*low_rep(), users, pos, neg),
            "mi_eg": lambda: obj.mi_term(high_rep()[0], U_g, mods["disc_eg"], pairing),
            "mi_se": lambda: obj.mi_term(low_rep()[0], U_e_const, mods["disc_se"], pairing),
            "hcl": lambda: (lambda U: obj.hcl_loss(U, low_pert(), obj.readout(U), mods["disc_hcl"]))(low_rep()[0]),
            "high_total": lambda: obj.high_total(obj.rec_loss(*high_rep(), users, pos, neg),
                                                 obj.mi_term(high_rep()[0], U_g, mods["disc_eg"], pairing), lam),
            "low_total": lambda: (lambda U, V: obj.low_total(
                obj.rec_loss(U, V, users, pos, neg),
                obj.hcl_loss(U, low_pert(), obj.readout(U), mods["disc_hcl"]),
                obj.mi_term(U, U_e_const, mods["disc_se"], pairing), lam, gamma))(*low_rep()),
        }
        groups = {
            "rec_high": ["hhf_user", "hhf_item"],
            "rec_low": ["lhf_user", "lhf_item"],
            "mi_eg": ["hhf_user", "disc_eg"],
            "mi_se": ["lhf_user", "disc_se"],
            "hcl": ["lhf_user", "disc_hcl"],
            "high_total": ["hhf_user", "hhf_item", "disc_eg"],
            "low_total": ["lhf_user", "lhf_item", "disc_se", "disc_hcl"],
        }
        for name, fn in losses.items():
            params = {f"{m}.{p}": t for m in groups[name] for p, t in mods[m].named_parameters()}
            errs = fd_gradient_errors(fn, params)
            for pname, err in errs.items():
                checked += 1
                assert err < 1e-3, f"{name} / {pname}: relative error {err:.2e}"
                worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"took {elapsed:.1f}s"
    return f"{checked} (loss, parameter) pairs, worst relative error {worst:.1e}"


def _tiny(tmp_path, n_domains=3, n_users=30, seed=0):
    spec = SyntheticSpec(n_domains=n_domains, n_users=n_users, items_per_domain=40, interactions_per_user=8,
                         seed=seed)
    return load_scenario(generate_synthetic(spec, tmp_path / f"tiny{seed}"), 5, 1, name="tiny", seed=seed)


@criterion("A5")
def test_A5_federation_identity(tmp_path):
    sc = _tiny(tmp_path)
    sc = Scenario(sc.name, sc.domains[:1])
    cfg = fed.TrainConfig(dim=8, batch_size=64, lam=0.0, gamma=0.0, rounds=3, n_eval_negatives=50)
    federation = fed.Federation(sc, cfg)
    for _ in range(3):
        federation.run_round()
    ref = fed.Client(0, sc.domains[0], cfg)
    ref.set_phi_u(fed.Server(sc.n_users, cfg).global_phi_u)
    fed.train_standalone(ref, 3 * cfg.local_epochs)
    a, b = federation.clients[0].state(), ref.state()
    dist = max((a[k] - b[k]).abs().max().item() for k in a)
    assert dist <= 1e-6, f"parameter distance {dist:.3e}"
    one = lambda v, c: ({"x": torch.tensor(v, dtype=torch.float64)}, torch.tensor([v], dtype=torch.float64), c)
    phi, users = fed.server_aggregate([one(1.0, 3), one(2.0, 1)])
    assert phi["x"].item() == 1.25 and users.item() == 1.25
    return f"parameter distance {dist:.1e}; aggregate = 1.25"


@criterion("A6")
def test_A6_metric_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        scores = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(2, 51))))
        res = ev.metrics_from_ranks(ev.ranks_from_matrix(scores))
        ref = naive_metrics(scores.tolist())
        worst = max(worst, abs(res.mrr - ref[0]), abs(res.hr - ref[1]), abs(res.ndcg - ref[2]))
    assert worst <= 1e-12, f"max deviation {worst:.3e}"
    r1, r4, r11 = (ev.metrics_from_ranks([r]) for r in (1, 4, 11))
    assert (r1.mrr, r1.hr, r1.ndcg) == (1.0, 1.0, 1.0)
    assert r4.ndcg == 1 / math.log2(5)
    assert (r11.mrr, r11.hr, r11.ndcg) == (1 / 11, 0.0, 0.0)
    return f"1000 score sets, max deviation {worst:.1e}; rank 1/4/11 exact"


@criterion("A7")
def test_A7_privacy_trace(tmp_path):
    spec = SyntheticSpec(n_users=60, items_per_domain=80, interactions_per_user=10, seed=1)
    sc = load_scenario(generate_synthetic(spec, tmp_path / "a7"), 5, 1, name="a7", seed=1)
    cfg = fed.TrainConfig(dim=8, batch_size=256, rounds=3, n_eval_negatives=99)
    trace = []
    res = fed.run_training(sc, cfg, trace=trace)
    allowed_phi = set(res.clients[0].model["lhf_user"].state_dict())
    violations = []
    for m in trace:
        p = m.payload
        if set(p["phi_u"]) != allowed_phi:
            violations.append(f"round {m.round} peer {m.peer}: phi_u keys {sorted(p['phi_u'])}")
        if m.direction == fed.CLIENT_TO_SERVER:
            if set(p) != {"phi_u", "shared_users", "edge_count"}:
                violations.append(f"round {m.round} peer {m.peer}: upload keys {sorted(p)}")
            if not isinstance(p["edge_count"], int):
                violations.append(f"round {m.round} peer {m.peer}: edge_count is {type(p['edge_count'])}")
            if tuple(p["shared_users"].shape) != (sc.n_users, cfg.dim):
                violations.append(f"round {m.round} peer {m.peer}: U^s shape {tuple(p['shared_users'].shape)}")
        elif set(p) != {"phi_u", "global_users"}:
            violations.append(f"round {m.round} peer {m.peer}: broadcast keys {sorted(p)}")
    assert len(trace) == 2 * 3 * res.rounds_run
    assert not violations, "; ".join(violations[:5])
    return f"{len(trace)} messages, 0 violations"


A8_SEEDS = (0, 1, 2, 3, 4)
A8_VARIANTS = ("full", "no_hcl", "no_hsd_no_hcl", "local_only")
# desk-scale settings not fixed by the criterion
A8_BATCH = 256
A8_INTERACTIONS = 19


def run_ablation(root, seeds=A8_SEEDS, rounds=30, dim=16):
    """Test MRR (mean over domains) per (seed, variant)."""
    out = {}
    for seed in seeds:
        spec = SyntheticSpec(n_domains=3, n_users=200, items_per_domain=300, interactions_per_user=A8_INTERACTIONS,
                             rho=0.8, seed=seed)
        sc = load_scenario(generate_synthetic(spec, Path(root) / f"seed{seed}"), 5, 1, name="a8", seed=seed)
        for variant in A8_VARIANTS:
            cfg = fed.TrainConfig(dim=dim, rounds=rounds, batch_size=A8_BATCH, seed=seed,
                                  **VARIANT_OVERRIDES[variant])
            res = fed.run_training(sc, cfg)
            out[seed, variant] = float(np.mean([c.evaluate("test").mrr for c in res.clients]))
            print(f"  A8 seed {seed} {variant:>14}: test MRR {out[seed, variant]:.4f} "
                  f"(best round {res.best_round}, ran {res.rounds_run})", flush=True)
    return out


@criterion("A8")
def test_A8_directional_ablation(tmp_path):
    t0 = time.perf_counter()
    per = run_ablation(tmp_path)
    elapsed = time.perf_counter() - t0
    mean = {v: float(np.mean([per[s, v] for s in A8_SEEDS])) for v in A8_VARIANTS}
    chain = mean["full"] >= mean["no_hcl"] >= mean["no_hsd_no_hcl"]
    summary = (", ".join(f"{v}={mean[v]:.4f}" for v in A8_VARIANTS)
               + f"; chain full>=no_hcl>=no_hsd_no_hcl {'holds' if chain else 'does not hold'}")
    print(f"  A8 seed means: {summary}")
    assert elapsed < 600, f"took {elapsed:.0f}s ({summary})"
    assert mean["full"] > mean["local_only"], f"full does not beat local_only: {summary}"
    return summary


FKCB_TABLE = {
    # domain: (users, items, train, valid, test)
    "Food": (1898, 11880, 36097, 1898, 1898),
    "Kitchen": (1898, 18828, 44021, 1898, 1898),
    "Clothing": (1898, 16546, 20919, 1898, 1898),
    "Beauty": (1898, 12023, 30067, 1898, 1898),
}
FKCB_ENV = "FEDHCDR_FKCB_DIR"


@criterion("A9")
def test_A9_dataset_statistics():
    root = os.environ.get(FKCB_ENV)
    files = {d: Path(root) / f"{d}.tsv" for d in FKCB_TABLE} if root else {}
    if not files or not all(p.exists() for p in files.values()):
        pytest.skip(f"raw FKCB files absent (set {FKCB_ENV} to a directory with Food/Kitchen/Clothing/Beauty.tsv)")
    raw = {d: load_interactions(p, d) for d, p in files.items()}
    stages = filter_report(raw, 5, 10)
    sc = build_scenario(raw, 5, 10, name="FKCB")
    mismatches = []
    for dom in sc.domains:
        got = (dom.n_users, dom.n_items, len(dom.train_edges), len(dom.valid_edges), len(dom.test_edges))
        if got != FKCB_TABLE[dom.name]:
            mismatches.append(f"{dom.name}: got {got}, expected {FKCB_TABLE[dom.name]}")
    if mismatches:
        for st in stages:
            print(f"  A9 {st['stage']}: users {st['users']}, items {st['items']}, interactions {st['interactions']}")
    assert not mismatches, "; ".join(mismatches)
    return "FKCB statistics reproduced"


@criterion("A10")
def test_A10_determinism(tmp_path):
    cfg = tmp_path / "a10.ini"
    cfg.write_text("rounds = 3\ndim = 8\nbatch_size = 128\nn_eval_negatives = 99\nmin_item_inter = 1\n"
                   "synthetic_n_users = 40\nsynthetic_items_per_domain = 60\nsynthetic_interactions_per_user = 10\n",
                   encoding="utf-8")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["run", "--config", str(cfg), "--seed", "11", "--out", str(out)]) == 0
        outs.append((out / cli.METRICS_FILE).read_bytes())
    assert outs[0] == outs[1], "metrics CSVs differ"
    return f"two runs, identical {len(outs[0])}-byte metrics CSVs"
