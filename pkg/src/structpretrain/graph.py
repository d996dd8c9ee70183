"""Undirected simple graphs, normalized adjacency, edge masking and pair sampling."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphInputError(ValueError):
    """Malformed edge list or graph file. ``index`` is the offending line/edge index."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (line {index})")
        self.index = index


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected simple graph stored as sorted CSR adjacency.

    ``indptr``/``indices`` hold the symmetric adjacency; ``edge_array`` holds each
    undirected edge once as ``(u, v)`` with ``u < v`` in lexicographic order.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    edge_array: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def m(self) -> int:
        return int(self.edge_array.shape[0])

    def adj(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> np.ndarray:
        return self.edge_array

    def edge_keys(self) -> np.ndarray:
        """Sorted int64 keys ``u * n + v`` (u < v), for vectorized membership tests."""
        keys = self._cache.get("keys")
        if keys is None:
            keys = self.edge_array[:, 0].astype(np.int64) * self.n + self.edge_array[:, 1]
            keys.flags.writeable = False
            self._cache["keys"] = keys
        return keys

    def has_edges(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        keys = self.edge_keys()
        if len(keys) == 0:
            return np.zeros(len(pairs), dtype=bool)
        q = lo * self.n + hi
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q

    def has_edge(self, u: int, v: int) -> bool:
        return bool(self.has_edges(np.array([[u, v]]))[0])

    def adjacency(self) -> sp.csr_matrix:
        """0/1 float64 adjacency matrix (cached, do not mutate)."""
        a = self._cache.get("A")
        if a is None:
            data = np.ones(len(self.indices), dtype=np.float64)
            a = sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))
            self._cache["A"] = a
        return a

    def components(self) -> np.ndarray:
        labels = self._cache.get("components")
        if labels is None:
            _, labels = sp.csgraph.connected_components(self.adjacency(), directed=False)
            self._cache["components"] = labels
        return labels

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.edge_array, other.edge_array)

    def __hash__(self):
        return hash((self.n, self.edge_array.tobytes()))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, m={self.m})"


def _from_canonical(n: int, lo: np.ndarray, hi: np.ndarray) -> Graph:
    # lo < hi, deduplicated and sorted by (lo, hi)
    edge_array = np.stack([lo, hi], axis=1).astype(np.int64) if len(lo) else np.zeros((0, 2), np.int64)
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    indices = cols.astype(np.int64)
    for arr in (edge_array, indptr, indices):
        arr.flags.writeable = False
    return Graph(n=n, indptr=indptr, indices=indices, edge_array=edge_array)


def build_graph(edge_list: Iterable[Sequence[int]] | np.ndarray, n: int) -> Graph:
    """Build a simple undirected graph; self-loops are dropped, duplicates merged."""
    if n < 1:
        raise GraphInputError(f"node count must be >= 1, got {n}")
    edges = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list,
                       dtype=np.int64)
    if edges.size == 0:
        edges = edges.reshape(0, 2)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise GraphInputError("edge list must contain (u, v) pairs")
    bad = np.nonzero((edges < 0).any(axis=1) | (edges >= n).any(axis=1))[0]
    if len(bad):
        i = int(bad[0])
        raise GraphInputError(f"node id out of range [0, {n}) in edge {tuple(edges[i])}", index=i)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    keys = np.unique(lo[keep] * n + hi[keep])
    return _from_canonical(n, keys // n, keys % n)


def norm_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetric normalized adjacency with self-loops, D~^-1/2 (A + I) D~^-1/2."""
    a_tilde = (g.adjacency() + sp.identity(g.n, format="csr")).tocsr()
    a_tilde.sort_indices()
    d_inv_sqrt = 1.0 / np.sqrt(np.asarray(a_tilde.sum(axis=1)).ravel())
    out = sp.diags(d_inv_sqrt) @ a_tilde @ sp.diags(d_inv_sqrt)
    out = out.tocsr()
    out.sort_indices()
    return out


@dataclass(frozen=True)
class MaskedGraph:
    noised: Graph
    removed: np.ndarray  # (k, 2), u < v
    original: Graph


def mask_edges(g: Graph, fraction: float, rng: np.random.Generator) -> MaskedGraph:
    """Remove ``round(fraction * m)`` edges chosen uniformly without replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"mask fraction must lie in [0, 1], got {fraction}")
    k = round(fraction * g.m)  # round-half-to-even
    if k == 0:
        return MaskedGraph(noised=g, removed=np.zeros((0, 2), np.int64), original=g)
    drop = np.zeros(g.m, dtype=bool)
    drop[rng.choice(g.m, size=k, replace=False)] = True
    kept = g.edge_array[~drop]
    noised = _from_canonical(g.n, kept[:, 0].copy(), kept[:, 1].copy())
    removed = g.edge_array[drop].copy()
    removed.flags.writeable = False
    return MaskedGraph(noised=noised, removed=removed, original=g)


@dataclass(frozen=True)
class PairBatch:
    pairs: np.ndarray   # (P, 2): positives first, then negatives
    labels: np.ndarray  # (P,) float64 in {0, 1}

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def pos_pairs(self) -> np.ndarray:
        return self.pairs[self.labels == 1]

    @property
    def neg_pairs(self) -> np.ndarray:
        return self.pairs[self.labels == 0]

    def nodes(self) -> np.ndarray:
        return np.unique(self.pairs)


def _all_non_edges(g: Graph) -> np.ndarray:
    iu, ju = np.triu_indices(g.n, k=1)
    pairs = np.stack([iu, ju], axis=1).astype(np.int64)
    return pairs[~g.has_edges(pairs)]


def sample_non_edges(g: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct non-adjacent pairs of ``g`` (fewer only if fewer exist)."""
    n = g.n
    total = n * (n - 1) // 2 - g.m
    if total <= 0:
        raise SamplingError("graph has no non-edges to sample negatives from")
    if count >= total or total <= 4 * count:
        pool = _all_non_edges(g)
        take = min(count, len(pool))
        return pool[np.sort(rng.choice(len(pool), size=take, replace=False))] if take < len(pool) else pool
    seen: set[int] = set()
    out: list[tuple[int, int]] = []
    while len(out) < count:
        draw = rng.integers(0, n, size=(2 * (count - len(out)) + 8, 2))
        lo = np.minimum(draw[:, 0], draw[:, 1])
        hi = np.maximum(draw[:, 0], draw[:, 1])
        ok = (lo != hi)
        lo, hi = lo[ok], hi[ok]
        ok = ~g.has_edges(np.stack([lo, hi], axis=1))
        for a, b in zip(lo[ok].tolist(), hi[ok].tolist()):
            key = a * n + b
            if key not in seen:
                seen.add(key)
                out.append((a, b))
                if len(out) == count:
                    break
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def sample_pair_batch(mg: MaskedGraph, n_pos: int, n_neg: int, rng: np.random.Generator) -> PairBatch:
    """Positives from the masked-out edges, negatives from non-edges of the original graph."""
    if len(mg.removed) == 0:
        raise SamplingError("no removed edges to draw positive pairs from")
    take = min(n_pos, len(mg.removed))
    pos = mg.removed[np.sort(rng.choice(len(mg.removed), size=take, replace=False))]
    neg = sample_non_edges(mg.original, n_neg, rng) if n_neg > 0 else np.zeros((0, 2), np.int64)
    pairs = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return PairBatch(pairs=pairs, labels=labels)


# ---------------------------------------------------------------------------
# Text format:  "n m" / m lines "u v" (u < v, sorted) / optional "#clusters" + n ids.
# Lines starting with '%' are comments.

def format_graph(g: Graph, clusters: Sequence[int] | None = None) -> str:
    lines = [f"{g.n} {g.m}"]
    lines.extend(f"{u} {v}" for u, v in g.edge_array.tolist())
    if clusters is not None:
        if len(clusters) != g.n:
            raise ValueError("cluster vector length must equal n")
        lines.append("#clusters")
        lines.extend(str(int(c)) for c in clusters)
    return "\n".join(lines) + "\n"


def write_graph(path: str | os.PathLike, g: Graph, clusters: Sequence[int] | None = None) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_graph(g, clusters))


def parse_graph(text: str, symmetrize: bool = True) -> tuple[Graph, np.ndarray | None]:
    """Parse the graph text format. Returns ``(graph, clusters or None)``.

    Edges are accepted in either orientation (directed inputs are symmetrized);
    malformed lines raise :class:`GraphInputError` carrying the 1-based line number.
    """
    header = None
    edges: list[tuple[int, int]] = []
    edge_lines: list[int] = []
    clusters: list[int] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        if line == "#clusters":
            if header is None:
                raise GraphInputError("'#clusters' before header", lineno)
            clusters = []
            continue
        parts = line.split()
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise GraphInputError(f"non-integer token in {line!r}", lineno) from None
        if header is None:
            if len(vals) != 2:
                raise GraphInputError("header must be 'n m'", lineno)
            header = vals
        elif clusters is not None:
            if len(vals) != 1:
                raise GraphInputError("cluster line must hold a single id", lineno)
            clusters.append(vals[0])
        else:
            if len(vals) != 2:
                raise GraphInputError("edge line must be 'u v'", lineno)
            edges.append((vals[0], vals[1]))
            edge_lines.append(lineno)
    if header is None:
        raise GraphInputError("empty graph file")
    n, m = header
    if len(edges) != m:
        raise GraphInputError(f"header declares {m} edges, found {len(edges)}")
    for (u, v), lineno in zip(edges, edge_lines):
        if not (0 <= u < n and 0 <= v < n):
            raise GraphInputError(f"node id out of range [0, {n}) in edge ({u}, {v})", lineno)
    if not symmetrize and any(u >= v for u, v in edges):
        raise GraphInputError("edges must satisfy u < v")
    g = build_graph(edges, n)
    cl = None
    if clusters is not None:
        if len(clusters) != n:
            raise GraphInputError(f"expected {n} cluster ids, found {len(clusters)}")
        cl = np.asarray(clusters, dtype=np.int64)
    return g, cl


def read_graph(path: str | os.PathLike) -> tuple[Graph, np.ndarray | None]:
    with open(path, "r", encoding="ascii") as fh:
        return parse_graph(fh.read())


def open_text_out(target):
    """Context manager yielding a text stream for a path, or ``target`` itself if it has ``write``."""
    import contextlib
    if hasattr(target, "write"):
        return contextlib.nullcontext(target)
    return open(target, "w", newline="")
