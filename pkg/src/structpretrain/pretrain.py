"""Self-supervised losses (link reconstruction, centrality ranking, cluster preserving) and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .features import assemble_features
from .graph import MaskedGraph, PairBatch, mask_edges, norm_adjacency, sample_pair_batch
from .synth import ConfigError, CorpusGraph

log = logging.getLogger(__name__)

RANK_TIE_RTOL = 1e-9


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    mask_fraction: float = 0.2
    graphs_per_step: int = 32
    n_pos: int = 128
    n_neg: int = 256
    lr: float = 1e-3
    max_steps: int = 1000
    val_every: int = 50
    seed: int = 0
    cluster_support_fraction: float = 0.5
    val_seed: int = 12345

    def validate(self) -> "PretrainConfig":
        for name in ("mask_fraction", "cluster_support_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        for name in ("graphs_per_step", "n_pos", "n_neg", "max_steps", "val_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        return self


@dataclass
class StepMetrics:
    step: int
    L_rec: float
    L_rank: float
    L_cluster: float
    L_total: float
    wall_time: float = 0.0
    beta: dict = field(default_factory=dict)
    val_total: float | None = None

    def record(self, with_time: bool = True) -> dict:
        rec = {k: v for k, v in asdict(self).items() if v is not None}
        if not with_time:
            rec.pop("wall_time", None)
        return rec


# ---------------------------------------------------------------------------
# losses

def loss_rec(pair_logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of the link logits."""
    if pair_logits.value.size != np.asarray(labels).size:
        raise ad.ShapeError("loss_rec", "one label per pair logit required")
    return ad.bce_with_logits(pair_logits, labels)


def rank_terms(targets: np.ndarray, pairs: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per centrality: (u, v, R) for pairs whose scores differ; R = 1 when s_u > s_v.

    Relative differences below RANK_TIE_RTOL count as ties and are skipped.
    """
    out = []
    u, v = pairs[:, 0], pairs[:, 1]
    for s in range(targets.shape[1]):
        su, sv = targets[u, s], targets[v, s]
        tol = RANK_TIE_RTOL * np.maximum(np.abs(su), np.abs(sv))
        keep = np.abs(su - sv) > tol
        out.append((u[keep], v[keep], (su[keep] > sv[keep]).astype(np.float64)))
    return out


def loss_rank(scores: Sequence[Tensor], targets: np.ndarray, pairs: np.ndarray) -> Tensor:
    """Pairwise logistic ranking loss averaged over every (centrality, untied pair) term."""
    diffs, labels = [], []
    for s_hat, (u, v, r) in zip(scores, rank_terms(targets, pairs)):
        if len(u) == 0:
            continue
        diffs.append(ad.sub(ad.gather_rows(s_hat, u), ad.gather_rows(s_hat, v)))
        labels.append(r)
    if not diffs:
        log.warning("all ranking pairs tied on every centrality; L_rank set to 0")
        return Tensor(0.0)
    return ad.bce_with_logits(ad.concat(diffs), np.concatenate(labels))


def rank_probability(s_u: float, s_v: float) -> float:
    """Estimated P(u ranks above v) = exp(du)/(1 + exp(du)) with du = s_u - s_v."""
    return float(ad._sigmoid(np.array([s_u - s_v]))[0])


def loss_cluster(query_rows: Tensor, query_targets: np.ndarray, cluster_rows: Tensor,
                 params: M.Params, prefix: str = "cluster.ntn") -> Tensor:
    """Mean -log P(v in its own cluster), with P a softmax of S(v, C) over clusters."""
    return ad.cross_entropy(M.cluster_logits(query_rows, cluster_rows, params, prefix), query_targets)


# ---------------------------------------------------------------------------
# per-graph training sample

@dataclass
class GraphSample:
    masked: MaskedGraph
    x: np.ndarray
    a_hat: sp.csr_matrix
    batch: PairBatch
    centrality: np.ndarray
    supports: list[np.ndarray]   # support node ids, one array per present cluster
    queries: np.ndarray          # node ids scored against clusters
    query_targets: np.ndarray    # index into ``supports`` for each query
    support_fallback: bool = False


def choose_cluster_support(clusters: np.ndarray, candidates: np.ndarray, fraction: float,
                           rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray, np.ndarray, bool]:
    """Sample ``fraction`` of every cluster as support; query the candidates outside the supports.

    Returns (supports, queries, query cluster index, fallback flag). When every candidate
    landed in a support set the candidates are queried anyway and the flag is raised.
    """
    present = np.unique(clusters)
    in_support = np.zeros(len(clusters), dtype=bool)
    supports = []
    for c in present:
        members = np.nonzero(clusters == c)[0]
        size = max(1, math.ceil(fraction * len(members)))
        chosen = np.sort(rng.choice(members, size=size, replace=False))
        in_support[chosen] = True
        supports.append(chosen)
    lookup = {int(c): i for i, c in enumerate(present)}
    candidates = np.unique(candidates)
    queries = candidates[~in_support[candidates]]
    fallback = len(queries) == 0
    if fallback:
        queries = candidates
    targets = np.array([lookup[int(c)] for c in clusters[queries]], dtype=np.int64)
    return supports, queries, targets, fallback


def make_sample(cg: CorpusGraph, cfg: PretrainConfig, rng: np.random.Generator) -> GraphSample:
    masked = mask_edges(cg.graph, cfg.mask_fraction, rng)
    if len(masked.removed) == 0:
        raise TrainingError(f"graph {cg.name or '?'} has no edges to mask (m={cg.graph.m})")
    feats = assemble_features(masked.noised)
    batch = sample_pair_batch(masked, cfg.n_pos, cfg.n_neg, rng)
    supports, queries, qt, fallback = choose_cluster_support(
        cg.clusters, batch.nodes(), cfg.cluster_support_fraction, rng)
    return GraphSample(masked=masked, x=feats.normalized, a_hat=norm_adjacency(masked.noised),
                       batch=batch, centrality=cg.centrality, supports=supports, queries=queries,
                       query_targets=qt, support_fallback=fallback)


def sample_losses(sample: GraphSample, params: M.Params, cfg: M.ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    layers = M.encode(sample.x, sample.a_hat, params, cfg)
    f_rec = M.task_representation(layers, params, "rec")
    f_rank = M.task_representation(layers, params, "rank")
    f_cluster = M.task_representation(layers, params, "cluster")
    pairs = sample.batch.pairs
    l_rec = loss_rec(M.link_logits(f_rec, pairs, params), sample.batch.labels)
    l_rank = loss_rank(M.rank_scores(f_rank, params), sample.centrality, pairs)
    cluster_rows = ad.concat([M.cluster_embed(ad.gather_rows(f_cluster, s), params) for s in sample.supports])
    l_cluster = loss_cluster(ad.gather_rows(f_cluster, sample.queries), sample.query_targets,
                             cluster_rows, params)
    return l_rec, l_rank, l_cluster


def task_betas(params: M.Params, tasks: Sequence[str]) -> dict[str, list[float]]:
    return {t: M.layer_weights(params[f"mix.{t}.psi"]).value.tolist() for t in tasks}


def _check_finite(step: int, values: dict, context: str) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at step {step} ({context}): {bad}")


def pretrain_step(graphs: Sequence[CorpusGraph], params: M.Params, opt: ad.Adam, cfg: PretrainConfig,
                  model_cfg: M.ModelConfig, rng: np.random.Generator, step: int = 0) -> StepMetrics:
    """One Adam update on the batch-averaged sum of the three losses."""
    cfg.validate()
    t0 = time.perf_counter()
    names = list(params)
    plist = [params[k] for k in names]
    acc = [np.zeros_like(p.value) for p in plist]
    sums = np.zeros(3)
    for cg in graphs:
        try:
            sample = make_sample(cg, cfg, rng)
        except Exception as exc:
            raise TrainingError(f"step {step}: building sample for {cg.name or 'graph'} failed: {exc}") from exc
        with ad.Tape() as tape:
            l_rec, l_rank, l_cluster = sample_losses(sample, params, model_cfg)
            total = ad.add(ad.add(l_rec, l_rank), l_cluster)
        vals = np.array([l_rec.item(), l_rank.item(), l_cluster.item()])
        _check_finite(step, dict(zip(("L_rec", "L_rank", "L_cluster"), vals)), cg.name or "graph")
        for a, g in zip(acc, tape.backward(total, plist)):
            a += g
        sums += vals
    B = len(graphs)
    opt.step(params, {k: a / B for k, a in zip(names, acc)})
    mean = sums / B
    return StepMetrics(step=step, L_rec=float(mean[0]), L_rank=float(mean[1]), L_cluster=float(mean[2]),
                       L_total=float(mean.sum()), wall_time=time.perf_counter() - t0,
                       beta=task_betas(params, model_cfg.tasks))


def validation_loss(graphs: Sequence[CorpusGraph], params: M.Params, cfg: PretrainConfig,
                    model_cfg: M.ModelConfig) -> float:
    """Mean total loss over ``graphs`` with masking/sampling fixed by ``cfg.val_seed``."""
    total = 0.0
    for i, cg in enumerate(graphs):
        rng = np.random.default_rng([cfg.val_seed, i])
        sample = make_sample(cg, cfg, rng)
        total += sum(t.item() for t in sample_losses(sample, params, model_cfg))
    return total / len(graphs)


@dataclass
class PretrainResult:
    best_arrays: dict[str, np.ndarray]
    best_val: float
    best_step: int
    initial_val: float
    metrics: list[StepMetrics]
    final_arrays: dict[str, np.ndarray]
    optimizer: ad.Adam


def pretrain_run(corpus: Sequence[CorpusGraph], cfg: PretrainConfig, model_cfg: M.ModelConfig,
                 on_step: Callable[[StepMetrics], None] | None = None,
                 params: M.Params | None = None) -> PretrainResult:
    """Train on the ``train`` split, keep the parameters with the lowest validation loss."""
    cfg.validate()
    train = [c for c in corpus if c.split == "train"]
    val = [c for c in corpus if c.split == "val"]
    if not train or not val:
        raise ConfigError("corpus needs both train and val graphs")
    rng = np.random.default_rng([cfg.seed, 0])
    if params is None:
        params = M.init_pretrain_params(model_cfg, np.random.default_rng([cfg.seed, 1]))
    opt = ad.Adam(lr=cfg.lr)
    best_val = initial_val = validation_loss(val, params, cfg, model_cfg)
    _check_finite(0, {"val_total": best_val}, "validation")
    best_arrays, best_step = M.snapshot(params), 0
    metrics = []
    B = min(cfg.graphs_per_step, len(train))
    for step in range(1, cfg.max_steps + 1):
        chosen = np.sort(rng.choice(len(train), size=B, replace=False))
        m = pretrain_step([train[i] for i in chosen], params, opt, cfg, model_cfg, rng, step)
        if step % cfg.val_every == 0 or step == cfg.max_steps:
            m.val_total = validation_loss(val, params, cfg, model_cfg)
            _check_finite(step, {"val_total": m.val_total}, "validation")
            if m.val_total < best_val:
                best_val, best_arrays, best_step = m.val_total, M.snapshot(params), step
        metrics.append(m)
        if on_step is not None:
            on_step(m)
    return PretrainResult(best_arrays=best_arrays, best_val=best_val, best_step=best_step,
                          initial_val=initial_val, metrics=metrics, final_arrays=M.snapshot(params),
                          optimizer=opt)
