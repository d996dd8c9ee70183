"""Degree-corrected stochastic block model graphs and pre-training corpora."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .centrality import CENTRALITY_NAMES, CentralityScores, centrality_targets
from .graph import Graph, _from_canonical, read_graph, write_graph

REGIMES = ("dense-powerlaw", "dense-uniform", "sparse-powerlaw", "sparse-uniform")
DENSE_MEAN_DEGREE = 15.0
POWERLAW_MAX_GAMMA = 4.0
DEFAULT_TRAIN_FRACTION = 900 / 1024


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DcbmRanges:
    n: tuple[int, int] = (100, 2000)
    K: tuple[int, int] = (2, 10)
    p_div_q: tuple[float, float] = (3.0, 6.0)
    k: tuple[float, float] = (0.1, 2.0)
    gamma: tuple[float, float] = (2.0, 10.0)
    mean_degree: tuple[float, float] = (5.0, 50.0)
    theta_min: float = 0.2
    theta_max: float = 5.0

    def validate(self) -> "DcbmRanges":
        for name in ("n", "K", "p_div_q", "k", "gamma", "mean_degree"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"range {name}=[{lo}, {hi}] is empty or inverted")
        if self.n[0] < 2 or self.K[0] < 2:
            raise ConfigError("need n >= 2 and K >= 2")
        if self.p_div_q[0] <= 1:
            raise ConfigError("p_div_q must exceed 1")
        if self.k[0] <= 0 or self.mean_degree[0] <= 0:
            raise ConfigError("k and mean_degree must be positive")
        if self.gamma[0] <= 1:
            raise ConfigError("gamma must exceed 1")
        if not 0 < self.theta_min < self.theta_max:
            raise ConfigError("need 0 < theta_min < theta_max")
        return self


@dataclass(frozen=True)
class DcbmParams:
    n: int
    K: int
    p_div_q: float
    k: float
    gamma: float
    q_base: float
    mean_degree: float
    theta_min: float = 0.2
    theta_max: float = 5.0
    theta_scale: float = 1.0
    seed: int | None = None

    def validate(self) -> "DcbmParams":
        if not 2 <= self.K <= self.n:
            raise ConfigError(f"need 2 <= K <= n, got K={self.K}, n={self.n}")
        if not 0 < self.q_base <= 1 or self.p_div_q * self.q_base > 1 + 1e-12:
            raise ConfigError("block probabilities must lie in (0, 1]")
        if not 0 < self.theta_min < self.theta_max:
            raise ConfigError("need 0 < theta_min < theta_max")
        return self

    def block_matrix(self) -> np.ndarray:
        P = np.full((self.K, self.K), self.q_base)
        np.fill_diagonal(P, self.p_div_q * self.q_base)
        return P


@dataclass
class GeneratedGraph:
    graph: Graph
    clusters: np.ndarray
    theta: np.ndarray
    P: np.ndarray
    regime: str
    params: DcbmParams | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_degree(self) -> float:
        return 2.0 * self.graph.m / self.graph.n


def truncated_power_law_mean(gamma: float, lo: float, hi: float) -> float:
    """Mean of the density proportional to x^-gamma on [lo, hi]."""
    def antideriv(p):  # integral of x^(p-1) on [lo, hi]
        if abs(p) < 1e-12:
            return np.log(hi / lo)
        return (hi ** p - lo ** p) / p
    return float(antideriv(2.0 - gamma) / antideriv(1.0 - gamma))


def sample_truncated_power_law(size: int, gamma: float, lo: float, hi: float,
                               rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the density proportional to x^-gamma on [lo, hi] (gamma > 1)."""
    u = rng.random(size)
    e = 1.0 - gamma
    a, b = lo ** e, hi ** e
    return (a + u * (b - a)) ** (1.0 / e)


def base_probability(n: int, K: int, p_div_q: float, mean_theta: float, mean_degree: float) -> float:
    """Inter-cluster probability that targets the requested expected mean degree.

    May exceed ``1 / p_div_q``; :func:`fold_block_scale` moves the excess into theta.
    """
    return float(mean_degree / (n * mean_theta ** 2 * (p_div_q / K + (K - 1) / K)))


def fold_block_scale(q_raw: float, p_div_q: float) -> tuple[float, float]:
    """Split ``q_raw`` into a valid ``q_base`` and a theta multiplier preserving theta_u theta_v P."""
    top = q_raw * p_div_q
    if top <= 1.0:
        return q_raw, 1.0
    return q_raw / top, float(np.sqrt(top))


def sample_dcbm_params(ranges: DcbmRanges, rng: np.random.Generator, seed: int | None = None) -> DcbmParams:
    ranges.validate()
    n = int(rng.integers(ranges.n[0], ranges.n[1] + 1))
    K = int(rng.integers(ranges.K[0], ranges.K[1] + 1))
    K = min(K, n)
    p_div_q = float(rng.uniform(*ranges.p_div_q))
    k = float(rng.uniform(*ranges.k))
    gamma = float(rng.uniform(*ranges.gamma))
    mean_degree = float(rng.uniform(*ranges.mean_degree))
    mean_theta = k * truncated_power_law_mean(gamma, ranges.theta_min, ranges.theta_max)
    q_base, theta_scale = fold_block_scale(base_probability(n, K, p_div_q, mean_theta, mean_degree), p_div_q)
    return DcbmParams(n=n, K=K, p_div_q=p_div_q, k=k, gamma=gamma, q_base=q_base,
                      mean_degree=mean_degree, theta_min=ranges.theta_min,
                      theta_max=ranges.theta_max, theta_scale=theta_scale, seed=seed).validate()


def sample_block_graph(clusters: np.ndarray, theta: np.ndarray, P: np.ndarray,
                       rng: np.random.Generator, row_block: int = 256) -> Graph:
    """One Bernoulli draw per unordered pair with probability clip(theta_u theta_v P[c_u, c_v], 0, 1)."""
    clusters = np.asarray(clusters, dtype=np.int64)
    theta = np.asarray(theta, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    n = len(clusters)
    cols = np.arange(n)
    lo_parts, hi_parts = [], []
    for start in range(0, n, row_block):
        rows = np.arange(start, min(start + row_block, n))
        p = theta[rows, None] * theta[None, :] * P[clusters[rows][:, None], clusters[None, :]]
        hit = (rng.random(p.shape) < np.clip(p, 0.0, 1.0)) & (cols[None, :] > rows[:, None])
        u, v = np.nonzero(hit)
        lo_parts.append(u + start)
        hi_parts.append(v)
    if lo_parts:
        lo = np.concatenate(lo_parts)
        hi = np.concatenate(hi_parts)
    else:
        lo = hi = np.zeros(0, np.int64)
    return _from_canonical(n, lo, hi)


def classify_regime(mean_degree: float, gamma: float) -> str:
    density = "dense" if mean_degree >= DENSE_MEAN_DEGREE else "sparse"
    shape = "powerlaw" if gamma <= POWERLAW_MAX_GAMMA else "uniform"
    return f"{density}-{shape}"


def generate_dcbm(params: DcbmParams, rng: np.random.Generator,
                  P: np.ndarray | None = None) -> GeneratedGraph:
    """Sample clusters, degree weights and adjacency. ``P`` overrides the two-level block matrix."""
    params.validate()
    clusters = rng.integers(0, params.K, size=params.n)
    theta = params.k * params.theta_scale * sample_truncated_power_law(
        params.n, params.gamma, params.theta_min, params.theta_max, rng)
    if P is None:
        P = params.block_matrix()
    g = sample_block_graph(clusters, theta, P, rng)
    regime = classify_regime(2.0 * g.m / g.n, params.gamma)
    return GeneratedGraph(graph=g, clusters=clusters, theta=theta, P=np.asarray(P, float),
                          regime=regime, params=params)


def regime_ranges(ranges: DcbmRanges, regime: str) -> DcbmRanges:
    """Restrict ``ranges`` so that draws land in ``regime`` with high probability."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    density, shape = regime.split("-")
    g_lo, g_hi = ranges.gamma
    if shape == "powerlaw":
        gamma = (g_lo, min(g_hi, POWERLAW_MAX_GAMMA))
    else:
        gamma = (max(g_lo, POWERLAW_MAX_GAMMA + 1e-6), g_hi)
    d_lo, d_hi = ranges.mean_degree
    if density == "dense":
        mean_degree = (max(d_lo, 1.4 * DENSE_MEAN_DEGREE), max(d_hi, 1.4 * DENSE_MEAN_DEGREE))
    else:
        mean_degree = (d_lo, min(d_hi, 0.7 * DENSE_MEAN_DEGREE))
    out = replace(ranges, gamma=gamma, mean_degree=mean_degree)
    try:
        return out.validate()
    except ConfigError as exc:
        raise ConfigError(f"ranges cannot produce regime {regime}: {exc}") from None


def generate_in_regime(regime: str, ranges: DcbmRanges, rng: np.random.Generator,
                       max_tries: int = 100) -> GeneratedGraph:
    sub = regime_ranges(ranges, regime)
    for _ in range(max_tries):
        gg = generate_dcbm(sample_dcbm_params(sub, rng), rng)
        if gg.regime == regime:
            return gg
    raise ConfigError(f"could not realise regime {regime} in {max_tries} draws")


def graph_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(index)])


def generate_indexed(index: int, ranges: DcbmRanges, master_seed: int,
                     force_regimes: bool = False) -> GeneratedGraph:
    ss = graph_seed(master_seed, index)
    rng = np.random.default_rng(ss)
    if force_regimes:
        return generate_in_regime(REGIMES[index % len(REGIMES)], ranges, rng)
    return generate_dcbm(sample_dcbm_params(ranges, rng, seed=int(ss.generate_state(1)[0])), rng)


def _sidecar(gg: GeneratedGraph, scores: CentralityScores) -> dict:
    return {
        "params": asdict(gg.params) if gg.params is not None else None,
        "regime": gg.regime,
        "mean_degree": gg.mean_degree,
        "theta": gg.theta.tolist(),
        "P": gg.P.tolist(),
        "centrality": {name: getattr(scores, name).tolist() for name in CENTRALITY_NAMES},
        "centrality_methods": scores.methods,
    }


def split_sizes(count: int, train_fraction: float = DEFAULT_TRAIN_FRACTION) -> tuple[int, int]:
    n_train = int(round(count * train_fraction))
    if count >= 2:
        n_train = min(max(n_train, 1), count - 1)
    return n_train, count - n_train


def generate_corpus(count: int, ranges: DcbmRanges, master_seed: int, out_dir: str | os.PathLike,
                    force_regimes: bool = False,
                    train_fraction: float = DEFAULT_TRAIN_FRACTION) -> list[dict]:
    """Write ``count`` graphs plus sidecars and ``manifest.jsonl``; returns the manifest records."""
    ranges.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, _ = split_sizes(count, train_fraction)
    manifest = []
    for i in range(count):
        gg = generate_indexed(i, ranges, master_seed, force_regimes)
        scores = centrality_targets(gg.graph)
        stem = f"graph_{i:05d}"
        write_graph(out / f"{stem}.txt", gg.graph, gg.clusters)
        with open(out / f"{stem}.json", "w", encoding="ascii", newline="\n") as fh:
            json.dump(_sidecar(gg, scores), fh, sort_keys=True)
            fh.write("\n")
        manifest.append({"index": i, "path": f"{stem}.txt", "sidecar": f"{stem}.json",
                         "split": "train" if i < n_train else "val", "regime": gg.regime})
    with open(out / "manifest.jsonl", "w", encoding="ascii", newline="\n") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


@dataclass
class CorpusGraph:
    graph: Graph
    clusters: np.ndarray
    centrality: np.ndarray  # (n, 4) in CENTRALITY_NAMES order
    regime: str
    split: str
    name: str = ""


def load_corpus(manifest_path: str | os.PathLike) -> list[CorpusGraph]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    items = []
    with open(manifest_path, encoding="ascii") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            g, clusters = read_graph(root / rec["path"])
            with open(root / rec["sidecar"], encoding="ascii") as sfh:
                side = json.load(sfh)
            cent = np.stack([np.asarray(side["centrality"][k], float) for k in CENTRALITY_NAMES], axis=1)
            items.append(CorpusGraph(graph=g, clusters=clusters, centrality=cent,
                                     regime=rec["regime"], split=rec["split"], name=rec["path"]))
    return items


def corpus_from_generated(graphs: list[GeneratedGraph], split: str = "train") -> list[CorpusGraph]:
    """In-memory corpus entries (targets computed on the spot)."""
    return [CorpusGraph(graph=gg.graph, clusters=gg.clusters,
                        centrality=centrality_targets(gg.graph).as_matrix(),
                        regime=gg.regime, split=split) for gg in graphs]
