"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -s`` or directly with
``python tests/test_acceptance.py``. The lines are printed even when pytest captures
output, and each criterion's test fails when its line says FAIL.
"""
from __future__ import annotations

import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

from structpretrain import adapt as A  # noqa: E402
from structpretrain import autodiff as ad  # noqa: E402
from structpretrain import model as M  # noqa: E402
from structpretrain import pretrain as PT  # noqa: E402
from structpretrain import synth  # noqa: E402
from structpretrain.centrality import (betweenness, centrality_targets, eigenvector_centrality,  # noqa: E402
                                       subgraph_centrality)
from structpretrain.checkpoint import file_checksum  # noqa: E402
from structpretrain.cli import main as cli_main  # noqa: E402
from structpretrain.features import clustering_coeffs, collective_influence, core_numbers  # noqa: E402
from structpretrain.graph import build_graph  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}


def report(capsys, num: int, ok: bool, detail: str, elapsed: float) -> None:
    RESULTS[num] = (ok, detail)
    line = f"[acceptance] criterion {num}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}"
    if capsys is None:
        print(line, flush=True)
    else:
        with capsys.disabled():
            print("\n" + line, flush=True)


def complete(n):
    return build_graph([(u, v) for u in range(n) for v in range(u + 1, n)], n)


def random_graph(rng, n_max, connected=False):
    n = int(rng.integers(1 if not connected else 2, n_max + 1))
    p = rng.uniform(0.05, 0.9)
    edges = oracles.random_edges(rng, n, p)
    if connected:
        # random spanning tree keeps the graph connected
        edges = edges + [(int(rng.integers(0, v)), v) for v in range(1, n)]
    return build_graph(edges, n)


# ---------------------------------------------------------------------------
# 1. structural features

def criterion_1():
    rng = np.random.default_rng(1)
    bad = []
    for i in range(1000):
        g = random_graph(rng, 10)
        e = g.edges().tolist()
        if core_numbers(g).tolist() != oracles.core_numbers(g.n, e).tolist():
            bad.append((i, "core"))
        if not np.array_equal(clustering_coeffs(g), oracles.clustering(g.n, e)):
            bad.append((i, "clustering"))
        if not np.array_equal(collective_influence(g), oracles.collective_influence(g.n, e)):
            bad.append((i, "ci"))
    return not bad, f"1000 graphs n<=10, exact mismatches: {len(bad)} {bad[:3]}", 30.0


# ---------------------------------------------------------------------------
# 2. centralities

def criterion_2():
    rng = np.random.default_rng(2)
    worst_bc = 0.0
    for _ in range(200):
        g = random_graph(rng, 9, connected=True)
        worst_bc = max(worst_bc, float(np.max(np.abs(betweenness(g) - oracles.betweenness(g.n, g.edges().tolist())))))
    worst_sc = worst_res = worst_expm = 0.0
    for _ in range(60):
        g = random_graph(rng, 64, connected=True)
        eig = subgraph_centrality(g, method="eig")
        ser = subgraph_centrality(g, method="series")
        worst_sc = max(worst_sc, float(np.max(np.abs(ser - eig) / np.abs(eig))))
        a = g.adjacency().toarray().astype(float)
        ref = np.diag(scipy.linalg.expm(a))
        worst_expm = max(worst_expm, float(np.max(np.abs(eig - ref) / ref)))
        x = eigenvector_centrality(g)
        lam = x @ a @ x / (x @ x)
        worst_res = max(worst_res, float(np.linalg.norm(a @ x - lam * x) / np.linalg.norm(x)))
    k2 = subgraph_centrality(complete(2))[0]
    k3 = subgraph_centrality(complete(3))[0]
    k3_closed = math.exp(2) / 3 + 2 * math.exp(-1) / 3
    p3 = betweenness(build_graph([(0, 1), (1, 2)], 3))[1]
    hand = (abs(k2 - math.cosh(1)) < 1e-12 and abs(k2 - 1.543081) < 5e-7
            and abs(k3 - k3_closed) < 1e-12 and abs(p3 - 1 / 3) < 1e-15)
    ok = worst_bc <= 1e-10 and worst_sc <= 1e-6 and worst_res < 1e-6 and hand
    detail = (f"betweenness max err {worst_bc:.1e} (<=1e-10); subgraph eig/series max rel {worst_sc:.1e} (<=1e-6), "
              f"eig/expm {worst_expm:.1e}; eigvec residual max {worst_res:.1e} (<1e-6); K2={k2:.7f} (cosh 1); "
              f"K3={k3:.7f} = e^2/3+2/(3e) exactly [listed 2.708349 differs by {abs(k3 - 2.708349):.1e}: "
              f"the listed figure is an arithmetic slip]; P3 centre={p3:.15f}")
    return ok, detail, 120.0


# ---------------------------------------------------------------------------
# 3. gradients of the full composite

def composite_sample(seed):
    rng = np.random.default_rng([3, seed])
    n = 12
    clusters = np.repeat(np.arange(3), 4)
    while True:
        edges = [(u, v) for u in range(n) for v in range(u + 1, n)
                 if rng.random() < (0.6 if clusters[u] == clusters[v] else 0.15)]
        g = build_graph(edges, n)
        if 5 <= g.m <= 50:
            break
    cg = synth.CorpusGraph(graph=g, clusters=clusters, centrality=centrality_targets(g).as_matrix(),
                           regime="sparse-uniform", split="train")
    return PT.make_sample(cg, PT.PretrainConfig(n_pos=8, n_neg=8), rng), rng


def loss_params(params, cfg, which):
    names = [n for comp in M.encoder_param_names(cfg) for n in comp]
    task = {0: "rec", 1: "rank", 2: "cluster"}[which]
    names += [f"mix.{task}.psi", f"mix.{task}.alpha"]
    names += [k for k in params if k.startswith(f"{task}.")]
    return [params[k] for k in names]


def criterion_3():
    cfg = M.ModelConfig(hidden_dim=8, num_layers=3)
    worst, worst_off = 0.0, 0.0
    for seed in range(20):
        sample, rng = composite_sample(seed)
        params = M.init_pretrain_params(cfg, rng)
        for which in range(3):
            f = lambda: PT.sample_losses(sample, params, cfg)[which]  # noqa: E731
            on_path = loss_params(params, cfg, which)
            err = ad.grad_check(f, on_path, h=1e-5, max_coords=8, rng=np.random.default_rng([seed, which]))
            worst = max(worst, err)
            with ad.Tape() as tape:
                loss = f()
            off = [p for p in params.values() if all(p is not q for q in on_path)]
            worst_off = max([worst_off] + [float(np.abs(g).max()) for g in tape.backward(loss, off)])
    ok = worst < 1e-4 and worst_off == 0.0
    return ok, (f"20 seeds x 3 losses, d=8 n=12 L=3: max rel err {worst:.2e} (<1e-4; "
                f"|ad-fd|/max(1,|ad|,|fd|), 8 sampled coords per array); off-path grads max {worst_off}"), 120.0


# ---------------------------------------------------------------------------
# 4. generator fidelity

def criterion_4():
    rng = np.random.default_rng(4)
    K, per, reps = 4, 24, 500
    levels = np.array([0.3, 0.45, 0.6, 0.75, 0.9, 1.05, 1.25, 1.5])
    clusters = np.repeat(np.arange(K), per)
    theta = np.tile(np.repeat(levels, per // len(levels)), K)
    P = np.full((K, K), 0.06) + np.diag([0.2, 0.25, 0.3, 0.22])
    n = len(clusters)
    iu, iv = np.triu_indices(n, 1)
    lev = np.searchsorted(levels, theta)
    cu, cv = clusters[iu], clusters[iv]
    lu, lv = lev[iu], lev[iv]
    key = (np.minimum(cu, cv) * K + np.maximum(cu, cv)) * 64 + np.where(
        cu < cv, lu * 8 + lv, np.where(cu > cv, lv * 8 + lu, np.minimum(lu, lv) * 8 + np.maximum(lu, lv)))
    classes, inv = np.unique(key, return_inverse=True)
    counts = np.zeros(len(classes))
    for _ in range(reps):
        g = synth.sample_block_graph(clusters, theta, P, rng)
        hit = g.has_edges(np.stack([iu, iv], axis=1))
        counts += np.bincount(inv, weights=hit, minlength=len(classes))
    trials = np.bincount(inv, minlength=len(classes)) * reps
    p = (theta[iu] * theta[iv] * P[cu, cv])
    p_class = np.bincount(inv, weights=p) / np.bincount(inv)
    assert np.allclose(p_class[inv], p)  # each class has a single nominal probability
    assert 0 < p.min() and p.max() < 1  # no clipping, so theta_u theta_v P is the exact edge probability
    se = np.sqrt(p_class * (1 - p_class) / trials)
    z = np.abs(counts / trials - p_class) / se
    frac = float(np.mean(z <= 3))
    return frac >= 0.99, (f"{len(classes)} pair classes (cluster pair x theta levels), {reps} samples: "
                          f"{100 * frac:.2f}% within 3 SE (>=99%), max |z|={z.max():.2f}"), 120.0


# ---------------------------------------------------------------------------
# 5 and 9. pre-training convergence and beta diagnostics

def toy_corpus(master_seed, count=50, n=(100, 300)):
    ranges = synth.DcbmRanges(n=n)
    corpus = synth.corpus_from_generated([synth.generate_indexed(i, ranges, master_seed) for i in range(count)])
    n_train, _ = synth.split_sizes(count)
    for c in corpus[n_train:]:
        c.split = "val"
    return corpus


_PRETRAIN_RUNS: dict[int, PT.PretrainResult] = {}


def convergence_runs():
    if not _PRETRAIN_RUNS:
        corpus = toy_corpus(master_seed=5)
        cfg = M.ModelConfig(hidden_dim=64, num_layers=3)
        for seed in range(3):
            pcfg = PT.PretrainConfig(graphs_per_step=8, max_steps=300, val_every=300, seed=seed)
            _PRETRAIN_RUNS[seed] = PT.pretrain_run(corpus, pcfg, cfg)
    return _PRETRAIN_RUNS


def criterion_5():
    runs = convergence_runs()
    parts, ok = [], True
    for seed, res in runs.items():
        cells = []
        for name in ("L_rec", "L_rank", "L_cluster"):
            series = np.array([getattr(m, name) for m in res.metrics])
            start, end = series[:5].mean(), series[-5:].mean()
            drop = 1 - end / start
            ok &= drop >= 0.5
            cells.append(f"{name} {start:.3f}->{end:.3f} ({100 * drop:.0f}%)")
        parts.append(f"seed {seed}: " + ", ".join(cells))
    return ok, ("need >=50% drop from the step 1-5 mean to the step 296-300 mean; " + "; ".join(parts)
                + ". The L_rec target sits below the Bayes-optimal loss of the generator (see notes)"), 600.0


def criterion_9(tmp_dir: Path):
    runs = convergence_runs()
    worst = 0.0
    for res in runs.values():
        for m in res.metrics:
            for row in m.beta.values():
                worst = max(worst, abs(math.fsum(row) - 1.0))
    # the CLI log carries the same rows; check it on the determinism run directory
    rows = list(csv.DictReader(open(tmp_dir / "a" / "beta.csv")))
    by_key: dict[tuple, float] = {}
    for r in rows:
        by_key[(r["step"], r["task"])] = by_key.get((r["step"], r["task"]), 0.0) + float(r["beta"])
    worst_cli = max(abs(v - 1.0) for v in by_key.values())
    summary = json.loads((tmp_dir / "a" / "summary.json").read_text())
    final = runs[0].metrics[-1].beta
    emitted = set(summary["final_beta"]) == set(M.PRETRAIN_TASKS)
    ok = worst <= 1e-12 and worst_cli <= 1e-12 and emitted
    fb = ", ".join(f"{t}=[{', '.join(f'{b:.4f}' for b in row)}]" for t, row in final.items())
    return ok, (f"max |sum(beta)-1| {worst:.1e} over {sum(len(r.metrics) for r in runs.values())} steps, "
                f"{worst_cli:.1e} in beta.csv; final beta (seed 0): {fb}"), None


# ---------------------------------------------------------------------------
# 6. transfer gain

CORPUS_SEED_6 = 2024
PRETRAIN_SEED_6 = 1
PRETRAIN_STEPS_6 = 1000


def criterion_6():
    cfg = M.ModelConfig(hidden_dim=64, num_layers=3)
    corpus = toy_corpus(master_seed=CORPUS_SEED_6)
    pcfg = PT.PretrainConfig(graphs_per_step=8, max_steps=PRETRAIN_STEPS_6, val_every=50, seed=PRETRAIN_SEED_6)
    res = PT.pretrain_run(corpus, pcfg, cfg)
    ft = A.FinetuneConfig(epochs=100, lr=1e-3)
    b = A.DEFAULT_BOUNDARY
    pre, base, rand = [], [], []
    for s in range(10):
        task = A.make_synthetic_task("node", np.random.default_rng([2000, s]), node_cfg=A.NodeTaskConfig())
        pre.append(A.run_cell(res.best_arrays, task, cfg, b, "pretrained", s, ft)["micro_f1"])
        base.append(A.run_cell(None, task, cfg, b, "scratch", s, ft)["micro_f1"])
        rand.append(A.run_cell(res.best_arrays, task, cfg, b, "random", s, ft)["micro_f1"])
    pre, base, rand = map(np.array, (pre, base, rand))
    gain = 100 * float((pre - base).mean())
    wins = int(np.sum(pre > base))
    ok = gain >= 2.0 and wins >= 8
    return ok, (f"node task n=300 K=4 10% labels, b={b}, 100 epochs: pretrained {100 * pre.mean():.2f} vs "
                f"random-init {100 * base.mean():.2f} micro-F1, gain {gain:+.2f} pts (>=2), wins {wins}/10 (>=8); "
                f"[random above b only: {100 * rand.mean():.2f}]; pretraining best step {res.best_step}"), 1200.0


# ---------------------------------------------------------------------------
# 7. freeze contract and sweep table

def criterion_7():
    cfg = M.ModelConfig(hidden_dim=16, num_layers=3)
    arrays = M.snapshot(M.init_pretrain_params(cfg, np.random.default_rng(7)))
    task = A.make_synthetic_task("node", np.random.default_rng(77), node_cfg=A.NodeTaskConfig(n=120))
    broken = []
    for b in range(cfg.num_layers + 2):
        model = A.load_with_boundary(arrays, b, cfg, "node", task.num_classes, np.random.default_rng(b))
        before = M.snapshot(model.params)
        A.finetune(model, task, epochs=100, lr=1e-2)
        for k in model.frozen:
            if model.params[k].value.tobytes() != before[k].tobytes():
                broken.append((b, k))
        moved = [k for k in model.trainable_names() if not np.array_equal(model.params[k].value, before[k])]
        if not moved:
            broken.append((b, "nothing trained"))
    sweep = A.boundary_sweep(arrays, task, cfg, list(range(cfg.num_layers + 2)), range(5), A.FinetuneConfig(epochs=5))
    cells = {(r["boundary"], r["init_mode"]) for r in sweep.summary}
    full = cells == {(b, m) for b in range(cfg.num_layers + 2) for m in ("pretrained", "random")}
    ok = not broken and full and len(sweep.rows) == 5 * 2 * 5
    return ok, (f"b in 0..{cfg.num_layers + 1}, 100 epochs: frozen-param changes {broken}; sweep table "
                f"{len(sweep.summary)} cells x 5 seeds ({len(sweep.rows)} rows, pretrained and random)"), None


# ---------------------------------------------------------------------------
# 8. determinism

def criterion_8(tmp_dir: Path):
    corpus_dir = tmp_dir / "corpus"
    small = ["--set", "gen.n=60,100", "--set", "model.hidden_dim=16", "--set", "pretrain.graphs_per_step=4",
             "--set", "pretrain.val_every=5"]
    assert cli_main(["gen-corpus", "--count", "10", "--seed", "8", "--out", str(corpus_dir)] + small) == 0
    out = {}
    for name in ("a", "b"):
        code = cli_main(["pretrain", "--corpus", str(corpus_dir / "manifest.jsonl"), "--out", str(tmp_dir / name),
                         "--steps", "12", "--seed", "8", "--deterministic"] + small)
        assert code == 0
        d = tmp_dir / name
        out[name] = ((d / "metrics.jsonl").read_bytes(), file_checksum(d / "best.ckpt"),
                     file_checksum(d / "last.ckpt"), (d / "beta.csv").read_bytes())
    same = out["a"] == out["b"]
    return same, (f"two --deterministic pretrain runs: metrics identical={out['a'][0] == out['b'][0]}, "
                  f"best.ckpt sha256 {out['a'][1][:16]} vs {out['b'][1][:16]}, "
                  f"last.ckpt identical={out['a'][2] == out['b'][2]}"), None


# ---------------------------------------------------------------------------
# pytest wrappers

def _run(capsys, num, fn, *args):
    t0 = time.perf_counter()
    ok, detail, budget = fn(*args)
    elapsed = time.perf_counter() - t0
    if budget is not None:
        within = elapsed < budget
        detail += f"; runtime {elapsed:.0f}s (< {budget:.0f}s: {'yes' if within else 'no'})"
        ok = ok and within
    report(capsys, num, ok, detail, elapsed)
    return ok


@pytest.fixture(scope="module")
def tmp_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def test_criterion_1_feature_oracles(capsys):
    assert _run(capsys, 1, criterion_1)


def test_criterion_2_centrality_oracles(capsys):
    assert _run(capsys, 2, criterion_2)


def test_criterion_3_gradients(capsys):
    assert _run(capsys, 3, criterion_3)


def test_criterion_4_generator_fidelity(capsys):
    assert _run(capsys, 4, criterion_4)


def test_criterion_5_pretraining_convergence(capsys):
    assert _run(capsys, 5, criterion_5)


def test_criterion_6_transfer_gain(capsys):
    assert _run(capsys, 6, criterion_6)


def test_criterion_7_freeze_contract(capsys):
    assert _run(capsys, 7, criterion_7)


def test_criterion_8_determinism(capsys, tmp_dir):
    assert _run(capsys, 8, criterion_8, tmp_dir)


def test_criterion_9_beta_diagnostics(capsys, tmp_dir):
    if not (tmp_dir / "a" / "beta.csv").exists():
        criterion_8(tmp_dir)
    assert _run(capsys, 9, criterion_9, tmp_dir)


if __name__ == "__main__":
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        for num, fn, args in ((1, criterion_1, ()), (2, criterion_2, ()), (3, criterion_3, ()),
                              (4, criterion_4, ()), (5, criterion_5, ()), (6, criterion_6, ()),
                              (7, criterion_7, ()), (8, criterion_8, (d,)), (9, criterion_9, (d,))):
            _run(None, num, fn, *args)
    print(f"[acceptance] {sum(ok for ok, _ in RESULTS.values())}/{len(RESULTS)} criteria pass")
