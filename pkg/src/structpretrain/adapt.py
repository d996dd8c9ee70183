"""Fix-tune boundary adaptation of a pre-trained encoder to node, link and graph classification."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .checkpoint import Checkpoint, CheckpointError
from .features import assemble_features
from .graph import Graph, build_graph, norm_adjacency, sample_non_edges
from .synth import (REGIMES, DcbmParams, DcbmRanges, generate_dcbm, generate_in_regime,
                    truncated_power_law_mean)

log = logging.getLogger(__name__)

TASK_KINDS = ("node", "link", "graph")
INIT_MODES = ("pretrained", "random", "scratch")
DEFAULT_BOUNDARY = 1  # embedding frozen, every GCN block tuned
HEAD_GCN_LAYERS = 2
RESULT_COLUMNS = ("task", "boundary", "init_mode", "seed", "micro_f1", "epochs", "wall_time")


class AdaptError(ValueError):
    pass


# ---------------------------------------------------------------------------
# boundary

@dataclass(frozen=True)
class FixTuneBoundary:
    """Components with index < b are frozen: 0 is E, l is GCN block l."""
    b: int
    num_layers: int

    def __post_init__(self):
        if not 0 <= self.b <= self.num_layers + 1:
            raise AdaptError(f"boundary {self.b} outside [0, {self.num_layers + 1}]")

    def frozen_names(self, cfg: M.ModelConfig) -> list[str]:
        groups = M.encoder_param_names(cfg)
        return [name for comp in groups[:self.b] for name in comp]

    @classmethod
    def default(cls, cfg: M.ModelConfig) -> "FixTuneBoundary":
        return cls(DEFAULT_BOUNDARY, cfg.num_layers)


# ---------------------------------------------------------------------------
# tasks

@dataclass
class DownstreamTask:
    kind: str
    graphs: list[Graph]
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    pairs: np.ndarray | None = None   # link task: (P, 2) node pairs scored on graphs[0]
    name: str = ""
    info: dict = field(default_factory=dict)
    _inputs: list | None = field(default=None, repr=False)

    def validate(self) -> "DownstreamTask":
        if self.kind not in TASK_KINDS:
            raise AdaptError(f"unknown task kind {self.kind!r}")
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise AdaptError("labels outside [0, num_classes)")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise AdaptError("train and test indices overlap")
        if len(self.train_idx) == 0 or len(self.test_idx) == 0:
            raise AdaptError("empty train or test split")
        expected = {"node": self.graphs[0].n, "graph": len(self.graphs),
                    "link": 0 if self.pairs is None else len(self.pairs)}[self.kind]
        if len(labels) != expected:
            raise AdaptError(f"{self.kind} task has {len(labels)} labels for {expected} items")
        return self

    def inputs(self) -> list[tuple[np.ndarray, object]]:
        """(normalized features, normalized adjacency) per graph, computed once."""
        if self._inputs is None:
            self._inputs = [(assemble_features(g).normalized, norm_adjacency(g)) for g in self.graphs]
        return self._inputs


def stratified_split(labels: np.ndarray, train_fraction: float, rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per class, ceil(fraction * count) items (at least 1, at most count - 1 when possible) go to train."""
    labels = np.asarray(labels)
    train = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        k = max(1, math.ceil(train_fraction * len(idx)))
        if len(idx) > 1:
            k = min(k, len(idx) - 1)
        train.append(rng.choice(idx, size=k, replace=False))
    train = np.sort(np.concatenate(train))
    test = np.setdiff1d(np.arange(len(labels)), train)
    return train, test


@dataclass(frozen=True)
class NodeTaskConfig:
    """One DCBM graph labelled by cluster.

    Every cluster has within/between ratio ``p_div_q`` unless ``ratio_spread`` > 1, in
    which case the ratios are spread geometrically over a factor ``ratio_spread`` around
    ``p_div_q`` (randomly assigned), making cluster identity visible in local structure.
    """
    n: int = 300
    K: int = 4
    p_div_q: float = 4.5
    gamma: float = 3.0
    mean_degree: float = 10.0
    ratio_spread: float = 1.0
    label_fraction: float = 0.1


def heterogeneous_block_matrix(K: int, q: float, ratios: np.ndarray) -> np.ndarray:
    P = np.full((K, K), q)
    P[np.diag_indices(K)] = q * np.asarray(ratios, dtype=np.float64)
    return P


def make_node_task(cfg: NodeTaskConfig, rng: np.random.Generator) -> DownstreamTask:
    K = cfg.K
    if cfg.ratio_spread < 1 or cfg.p_div_q <= 0:
        raise AdaptError("need ratio_spread >= 1 and p_div_q > 0")
    half = math.sqrt(cfg.ratio_spread)
    ratios = rng.permutation(cfg.p_div_q * np.geomspace(1 / half, half, K))
    theta_min, theta_max = 0.2, 5.0
    mt = truncated_power_law_mean(cfg.gamma, theta_min, theta_max)
    # expected degree = n * E[theta]^2 * q * (sum_c r_c + K^2 - K) / K^2
    q = cfg.mean_degree * K * K / (cfg.n * mt * mt * (ratios.sum() + K * K - K))
    P = heterogeneous_block_matrix(K, q, ratios)
    scale = 1.0
    if P.max() > 1.0:
        scale = math.sqrt(P.max())
        P = P / P.max()
    params = DcbmParams(n=cfg.n, K=K, p_div_q=float(ratios.max()), k=1.0, gamma=cfg.gamma,
                        q_base=float(P.min()), mean_degree=cfg.mean_degree,
                        theta_min=theta_min, theta_max=theta_max, theta_scale=scale)
    gg = generate_dcbm(params, rng, P=P)
    labels = gg.clusters.astype(np.int64)
    train, test = stratified_split(labels, cfg.label_fraction, rng)
    return DownstreamTask("node", [gg.graph], labels, train, test, num_classes=K, name="synthetic-node",
                          info={"ratios": ratios.tolist(), "mean_degree": gg.mean_degree}).validate()


def make_link_task(ranges: DcbmRanges, rng: np.random.Generator, holdout: float = 0.1,
                   train_fraction: float = 0.5) -> DownstreamTask:
    """Held-out edges (label 1) against as many original non-edges (label 0)."""
    from .synth import sample_dcbm_params
    gg = generate_dcbm(sample_dcbm_params(ranges, rng), rng)
    g = gg.graph
    edges = g.edges()
    k = max(1, int(round(holdout * len(edges))))
    if k >= len(edges):
        raise AdaptError("graph too small to hold out edges")
    held = rng.choice(len(edges), size=k, replace=False)
    keep = np.ones(len(edges), dtype=bool)
    keep[held] = False
    observed = build_graph(edges[keep], g.n)
    neg = sample_non_edges(g, k, rng)
    pairs = np.concatenate([edges[held], neg])
    labels = np.concatenate([np.ones(k, np.int64), np.zeros(len(neg), np.int64)])
    train, test = stratified_split(labels, train_fraction, rng)
    return DownstreamTask("link", [observed], labels, train, test, num_classes=2, pairs=pairs,
                          name="synthetic-link").validate()


def make_graph_task(ranges: DcbmRanges, rng: np.random.Generator, per_regime: int = 50,
                    train_fraction: float = 0.9) -> DownstreamTask:
    graphs, labels = [], []
    for label, regime in enumerate(REGIMES):
        for _ in range(per_regime):
            graphs.append(generate_in_regime(regime, ranges, rng).graph)
            labels.append(label)
    labels = np.asarray(labels, dtype=np.int64)
    train, test = stratified_split(labels, train_fraction, rng)
    return DownstreamTask("graph", graphs, labels, train, test, num_classes=len(REGIMES),
                          name="synthetic-graph").validate()


def make_synthetic_task(kind: str, rng: np.random.Generator, node_cfg: NodeTaskConfig | None = None,
                        ranges: DcbmRanges | None = None, **kw) -> DownstreamTask:
    if kind == "node":
        return make_node_task(node_cfg or NodeTaskConfig(), rng)
    ranges = ranges or DcbmRanges(n=(60, 120))
    if kind == "link":
        return make_link_task(ranges, rng, **kw)
    if kind == "graph":
        return make_graph_task(ranges, rng, **kw)
    raise AdaptError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")


# ---------------------------------------------------------------------------
# adapted model

@dataclass
class AdaptedModel:
    cfg: M.ModelConfig
    kind: str
    num_classes: int
    boundary: FixTuneBoundary
    init_mode: str
    params: M.Params
    frozen: frozenset[str]

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]


def _encoder_arrays(ckpt: Checkpoint | dict | None) -> dict[str, np.ndarray] | None:
    if ckpt is None:
        return None
    return ckpt.arrays if isinstance(ckpt, Checkpoint) else ckpt


def check_config_match(ckpt_cfg: M.ModelConfig, cfg: M.ModelConfig) -> None:
    diff = {k: {"checkpoint": a, "requested": b}
            for k, a, b in ((f, getattr(ckpt_cfg, f), getattr(cfg, f))
                            for f in ("hidden_dim", "num_layers", "activation", "bn_eps"))
            if a != b}
    if diff:
        raise CheckpointError("checkpoint config does not match the requested model", {"differs": diff})


def init_head(params: M.Params, kind: str, num_classes: int, cfg: M.ModelConfig,
              rng: np.random.Generator) -> None:
    d = cfg.hidden_dim
    M.init_mixing(params, "down", cfg)
    if kind == "node":
        for l in range(1, HEAD_GCN_LAYERS + 1):
            M.init_gcn_block(params, f"head.gcn.{l}", d, rng)
    if kind == "link":
        M.init_ntn(params, "head.ntn", d, rng, out_dim=num_classes)
    else:
        M._add(params, "head.out.W", M.glorot(rng, (d, num_classes), d, num_classes))
        M._add(params, "head.out.b", np.zeros(num_classes))


def load_with_boundary(ckpt: Checkpoint | dict | None, b: int, cfg: M.ModelConfig, kind: str,
                       num_classes: int, rng: np.random.Generator, init_mode: str = "pretrained"
                       ) -> AdaptedModel:
    """Encoder from ``ckpt`` with components below ``b`` frozen plus a fresh mixing set and head.

    ``init_mode``: "pretrained" loads every encoder component; "random" loads only the
    frozen components and re-initializes the rest; "scratch" ignores the checkpoint.
    """
    if init_mode not in INIT_MODES:
        raise AdaptError(f"unknown init mode {init_mode!r}")
    if kind not in TASK_KINDS:
        raise AdaptError(f"unknown task kind {kind!r}")
    if isinstance(ckpt, Checkpoint):
        check_config_match(ckpt.model_config(), cfg)
    boundary = FixTuneBoundary(b, cfg.num_layers)
    params = M.init_encoder(cfg, rng)
    arrays = _encoder_arrays(ckpt)
    groups = M.encoder_param_names(cfg)
    if init_mode != "scratch":
        if arrays is None:
            raise AdaptError(f"init mode {init_mode!r} needs a checkpoint")
        load_groups = groups if init_mode == "pretrained" else groups[:b]
        for name in (n for comp in load_groups for n in comp):
            if name not in arrays:
                raise CheckpointError(f"checkpoint lacks encoder parameter {name}", {"missing": [name]})
            if arrays[name].shape != params[name].shape:
                raise CheckpointError(f"shape mismatch for {name}",
                                      {"expected": params[name].shape, "found": arrays[name].shape})
            params[name] = ad.parameter(np.array(arrays[name], dtype=np.float64), name=name)
    init_head(params, kind, num_classes, cfg, rng)
    return AdaptedModel(cfg=cfg, kind=kind, num_classes=num_classes, boundary=boundary,
                        init_mode=init_mode, params=params, frozen=frozenset(boundary.frozen_names(cfg)))


def _down_representation(model: AdaptedModel, x, a_hat) -> ad.Tensor:
    layers = M.encode(x, a_hat, model.params, model.cfg)
    return M.task_representation(layers, model.params, "down")


def _linear(h: ad.Tensor, params: M.Params) -> ad.Tensor:
    return ad.add(ad.matmul(h, params["head.out.W"]), params["head.out.b"])


def task_logits(model: AdaptedModel, task: DownstreamTask, items: np.ndarray) -> ad.Tensor:
    """Class logits for the selected nodes / pairs / graphs, shape (len(items), C)."""
    p = model.params
    items = np.asarray(items, dtype=np.int64)
    if task.kind == "node":
        x, a_hat = task.inputs()[0]
        h = _down_representation(model, x, a_hat)
        for l in range(1, HEAD_GCN_LAYERS + 1):
            h = M.block(p, f"head.gcn.{l}", h, a_hat, model.cfg)
        return _linear(ad.gather_rows(h, items), p)
    if task.kind == "link":
        x, a_hat = task.inputs()[0]
        f = _down_representation(model, x, a_hat)
        pairs = task.pairs[items]
        xu, xv = ad.gather_rows(f, pairs[:, 0]), ad.gather_rows(f, pairs[:, 1])
        fwd = M.ntn_head(M.ntn_forward(xu, xv, p, "head.ntn"), p, "head.ntn")
        bwd = M.ntn_head(M.ntn_forward(xv, xu, p, "head.ntn"), p, "head.ntn")
        return ad.scale(ad.add(fwd, bwd), 0.5)
    pooled = []
    inputs = task.inputs()
    for i in items:
        x, a_hat = inputs[i]
        pooled.append(ad.mean_rows(_down_representation(model, x, a_hat)))
    return _linear(ad.concat([ad.reshape(t, (1, model.cfg.hidden_dim)) for t in pooled]), p)


def predict(model: AdaptedModel, task: DownstreamTask, items: np.ndarray) -> np.ndarray:
    return np.argmax(task_logits(model, task, items).value, axis=1)


# ---------------------------------------------------------------------------
# training and evaluation

def micro_f1(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Global TP / (TP + (FP + FN) / 2) summed over classes."""
    pred = np.asarray(predictions).ravel()
    true = np.asarray(labels).ravel()
    if pred.size != true.size:
        raise ad.ContractError("predictions and labels differ in length")
    if pred.size == 0:
        raise ad.ContractError("micro_f1 of an empty set is undefined")
    classes = np.union1d(pred, true)
    tp = fp = fn = 0
    for c in classes:
        tp += int(np.sum((pred == c) & (true == c)))
        fp += int(np.sum((pred == c) & (true != c)))
        fn += int(np.sum((pred != c) & (true == c)))
    return tp / (tp + 0.5 * (fp + fn))


@dataclass
class FinetuneResult:
    model: AdaptedModel
    losses: list[float]
    train_f1: float
    test_f1: float
    epochs: int
    wall_time: float


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 100
    lr: float = 1e-3


def finetune(model: AdaptedModel, task: DownstreamTask, epochs: int = 100, lr: float = 1e-3
             ) -> FinetuneResult:
    """Full-batch Adam on the training split; frozen parameters are never handed to the optimizer."""
    task.validate()
    if epochs < 0:
        raise AdaptError("epochs must be >= 0")
    t0 = time.perf_counter()
    names = model.trainable_names()
    plist = [model.params[k] for k in names]
    opt = ad.Adam(lr=lr)
    losses = []
    y_train = task.labels[task.train_idx]
    for epoch in range(epochs):
        with ad.Tape() as tape:
            loss = ad.cross_entropy(task_logits(model, task, task.train_idx), y_train)
        value = loss.item()
        if not math.isfinite(value):
            raise AdaptError(f"non-finite fine-tuning loss at epoch {epoch}")
        losses.append(value)
        grads = tape.backward(loss, plist)
        opt.step(model.params, dict(zip(names, grads)))
    train_f1 = micro_f1(predict(model, task, task.train_idx), y_train)
    test_f1 = micro_f1(predict(model, task, task.test_idx), task.labels[task.test_idx])
    return FinetuneResult(model, losses, train_f1, test_f1, epochs, time.perf_counter() - t0)


def adapt_seed(seed: int, b: int, mode: str) -> np.random.Generator:
    """Head / re-initialization randomness for one sweep cell.

    The mode is deliberately not part of the seed: pretrained and random cells with the
    same seed share their head initialization.
    """
    return np.random.default_rng([int(seed), int(b), 7])


def run_cell(ckpt, task: DownstreamTask, cfg: M.ModelConfig, b: int, mode: str, seed: int,
             ft: FinetuneConfig) -> dict:
    model = load_with_boundary(ckpt, b, cfg, task.kind, task.num_classes, adapt_seed(seed, b, mode), mode)
    res = finetune(model, task, ft.epochs, ft.lr)
    return {"task": task.kind, "boundary": b, "init_mode": mode, "seed": seed, "micro_f1": res.test_f1,
            "epochs": res.epochs, "wall_time": res.wall_time}


@dataclass
class SweepResult:
    rows: list[dict]
    summary: list[dict]


def summarize(rows: Sequence[dict]) -> list[dict]:
    keys = []
    for r in rows:
        k = (r["task"], r["boundary"], r["init_mode"])
        if k not in keys:
            keys.append(k)
    out = []
    for task, b, mode in keys:
        vals = np.array([r["micro_f1"] for r in rows
                         if (r["task"], r["boundary"], r["init_mode"]) == (task, b, mode)])
        out.append({"task": task, "boundary": b, "init_mode": mode, "n_seeds": len(vals),
                    "mean_f1": float(vals.mean()), "std_f1": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
    return out


def boundary_sweep(ckpt, task: DownstreamTask, cfg: M.ModelConfig, b_values: Sequence[int],
                   seeds: Sequence[int], ft: FinetuneConfig = FinetuneConfig(),
                   modes: Sequence[str] = ("pretrained", "random")) -> SweepResult:
    """Fine-tune every (b, mode, seed) cell; summary has one row per (b, mode)."""
    rows = [run_cell(ckpt, task, cfg, b, mode, s, ft) for b in b_values for mode in modes for s in seeds]
    return SweepResult(rows, summarize(rows))


def write_results_csv(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("micro_f1", "wall_time") else r[k]) for k in RESULT_COLUMNS})


def write_summary_csv(path: str | os.PathLike, summary: Sequence[dict]) -> None:
    cols = ("task", "boundary", "init_mode", "n_seeds", "mean_f1", "std_f1")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow(r)
