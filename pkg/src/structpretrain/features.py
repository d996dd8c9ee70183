"""The four local node features (degree, core number, 1-hop CI, clustering) and their normalization."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .graph import Graph, open_text_out

FEATURE_NAMES = ("degree", "core_number", "collective_influence", "clustering_coeff")


def degrees(g: Graph) -> np.ndarray:
    return g.degrees().astype(np.int64)


def core_numbers(g: Graph) -> np.ndarray:
    """k-core decomposition by bucketed min-degree peeling (Batagelj & Zaversnik), O(n + m)."""
    n = g.n
    deg = g.degrees().astype(np.int64).tolist()
    if n == 0:
        return np.zeros(0, np.int64)
    max_deg = max(deg)
    bin_counts = [0] * (max_deg + 1)
    for d in deg:
        bin_counts[d] += 1
    start = 0
    bin_start = [0] * (max_deg + 1)
    for d in range(max_deg + 1):
        bin_start[d] = start
        start += bin_counts[d]
    pos = [0] * n
    vert = [0] * n
    for v in range(n):
        pos[v] = bin_start[deg[v]]
        vert[pos[v]] = v
        bin_start[deg[v]] += 1
    for d in range(max_deg, 0, -1):
        bin_start[d] = bin_start[d - 1]
    bin_start[0] = 0
    indptr = g.indptr.tolist()
    indices = g.indices.tolist()
    for i in range(n):
        v = vert[i]
        dv = deg[v]
        for j in range(indptr[v], indptr[v + 1]):
            u = indices[j]
            du = deg[u]
            if du > dv:
                pu = pos[u]
                pw = bin_start[du]
                w = vert[pw]
                if u != w:
                    pos[u], pos[w] = pw, pu
                    vert[pu], vert[pw] = w, u
                bin_start[du] += 1
                deg[u] = du - 1
    return np.asarray(deg, dtype=np.int64)


def collective_influence(g: Graph, L: int = 1) -> np.ndarray:
    """CI_1(v) = (deg(v) - 1) * sum over neighbours u of (deg(u) - 1)."""
    if L != 1:
        raise ValueError("only the 1-hop collective influence is supported")
    deg = g.degrees().astype(np.float64)
    excess = np.maximum(deg - 1.0, 0.0)
    neighbour_sum = g.adjacency() @ excess
    return excess * neighbour_sum


def triangles(g: Graph) -> np.ndarray:
    a = g.adjacency()
    return np.asarray((a @ a).multiply(a).sum(axis=1)).ravel() / 2.0


def clustering_coeffs(g: Graph) -> np.ndarray:
    deg = g.degrees().astype(np.float64)
    tri = triangles(g)
    out = np.zeros(g.n)
    ok = deg >= 2
    out[ok] = 2.0 * tri[ok] / (deg[ok] * (deg[ok] - 1.0))
    return out


@dataclass(frozen=True)
class LocalFeatures:
    raw: np.ndarray         # (n, 4) in FEATURE_NAMES order
    normalized: np.ndarray  # (n, 4), first three min-max scaled
    col_min: np.ndarray     # (3,)
    col_max: np.ndarray     # (3,)

    @property
    def n(self) -> int:
        return self.raw.shape[0]


def minmax_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    out = np.zeros_like(x, dtype=np.float64)
    ok = span > 0
    out[:, ok] = (x[:, ok] - lo[ok]) / span[ok]
    return out, lo, hi


def assemble_features(g: Graph) -> LocalFeatures:
    raw = np.stack([
        degrees(g).astype(np.float64),
        core_numbers(g).astype(np.float64),
        collective_influence(g),
        clustering_coeffs(g),
    ], axis=1)
    scaled, lo, hi = minmax_columns(raw[:, :3])
    normalized = np.concatenate([scaled, raw[:, 3:]], axis=1)
    return LocalFeatures(raw=raw, normalized=normalized, col_min=lo, col_max=hi)


def write_features_csv(path, feats: LocalFeatures) -> None:
    """Eight columns (raw then normalized features) per node; ``path`` may be an open stream."""
    header = [f"raw_{k}" for k in FEATURE_NAMES] + [f"norm_{k}" for k in FEATURE_NAMES]
    with open_text_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for v in range(feats.n):
            w.writerow([repr(float(x)) for x in feats.raw[v]] + [repr(float(x)) for x in feats.normalized[v]])
