"""Eigenvector, betweenness, closeness and subgraph centrality (the ranking targets)."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .graph import Graph, open_text_out

CENTRALITY_NAMES = ("eigenvector", "betweenness", "closeness", "subgraph")

EIG_CUTOFF = 512
SERIES_MIN_ORDER = 30


class ConvergenceError(ArithmeticError):
    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} after {iterations} iterations")
        self.iterations = iterations


def _dense_times_adj(x: np.ndarray, a) -> np.ndarray:
    # x @ A for symmetric sparse A; scipy only implements sparse @ dense efficiently.
    return np.asarray(a @ x.T).T


def _bfs_levels(g: Graph, sources: np.ndarray):
    """Level-synchronous BFS from a block of sources at once.

    Returns ``(dist, sigma, levels)`` where ``dist``/``sigma`` are (b, n) arrays of hop
    distance (-1 when unreachable) and shortest-path counts, and ``levels[d]`` is the
    boolean (b, n) mask of nodes at distance ``d``.
    """
    a = g.adjacency()
    b = len(sources)
    rows = np.arange(b)
    dist = np.full((b, g.n), -1, dtype=np.int64)
    sigma = np.zeros((b, g.n))
    frontier = np.zeros((b, g.n), dtype=bool)
    dist[rows, sources] = 0
    sigma[rows, sources] = 1.0
    frontier[rows, sources] = True
    levels = [frontier]
    d = 0
    while True:
        reach = _dense_times_adj(np.where(frontier, sigma, 0.0), a)
        new = (reach > 0) & (dist < 0)
        if not new.any():
            break
        d += 1
        sigma[new] = reach[new]
        dist[new] = d
        frontier = new
        levels.append(new)
    return dist, sigma, levels


def betweenness(g: Graph, block: int = 128) -> np.ndarray:
    """Brandes dependency accumulation over all sources, scaled by 1 / (n (n - 1)).

    The sum runs over ordered source/target pairs, so an undirected pair counts twice.
    """
    n = g.n
    bc = np.zeros(n)
    if n < 3 or g.m == 0:
        return bc
    a = g.adjacency()
    for start in range(0, n, block):
        src = np.arange(start, min(start + block, n))
        _, sigma, levels = _bfs_levels(g, src)
        delta = np.zeros_like(sigma)
        safe_sigma = np.where(sigma > 0, sigma, 1.0)
        for d in range(len(levels) - 1, 0, -1):
            coef = np.where(levels[d], (1.0 + delta) / safe_sigma, 0.0)
            back = _dense_times_adj(coef, a)
            delta += np.where(levels[d - 1], sigma * back, 0.0)
        delta[np.arange(len(src)), src] = 0.0
        bc += delta.sum(axis=0)
    return bc / (n * (n - 1))


def closeness(g: Graph, block: int = 256) -> np.ndarray:
    """1 / sum of distances to reachable nodes, times (reachable - 1) / (n - 1)."""
    n = g.n
    out = np.zeros(n)
    if n < 2:
        return out
    for start in range(0, n, block):
        src = np.arange(start, min(start + block, n))
        dist, _, _ = _bfs_levels(g, src)
        reach = (dist >= 0).sum(axis=1)
        total = np.where(dist > 0, dist, 0).sum(axis=1).astype(np.float64)
        ok = total > 0
        out[src[ok]] = (1.0 / total[ok]) * (reach[ok] - 1) / (n - 1)
    return out


def eigenvector_centrality(g: Graph, tol: float = 1e-8, max_iter: int = 10000) -> np.ndarray:
    """Perron vector of each connected component by power iteration.

    Iterates on A + I (same eigenvectors, removes the bipartite sign oscillation).
    Each component's unit Perron vector is weighted by sqrt(component size) before
    the whole vector is normalized; nodes of edgeless components score 0.
    """
    n = g.n
    comp = g.components()
    deg = g.degrees()
    n_comp = int(comp.max()) + 1
    comp_edges = np.bincount(comp, weights=deg, minlength=n_comp)
    active = comp_edges[comp] > 0
    x = np.where(active, 1.0, 0.0)
    if not active.any():
        return x
    a = g.adjacency()

    def per_component_normalize(v):
        norms = np.sqrt(np.bincount(comp, weights=v * v, minlength=n_comp))
        norms[norms == 0] = 1.0
        return v / norms[comp]

    x = per_component_normalize(x)
    for it in range(1, max_iter + 1):
        x_new = per_component_normalize(a @ x + x)
        diff = np.sqrt(np.bincount(comp, weights=(x_new - x) ** 2, minlength=n_comp)).max()
        x = x_new
        if diff < tol:
            break
    else:
        raise ConvergenceError("eigenvector centrality did not converge", max_iter)
    sizes = np.bincount(comp, minlength=n_comp).astype(np.float64)
    x = x * np.sqrt(sizes[comp])
    return x / np.linalg.norm(x)


def spectral_radius(g: Graph) -> float:
    if g.m == 0:
        return 0.0
    if g.n <= EIG_CUTOFF:
        return float(np.linalg.eigvalsh(g.adjacency().toarray())[-1])
    val = spla.eigsh(g.adjacency(), k=1, which="LA", return_eigenvectors=False)
    return float(val[0])


def _subgraph_eig(g: Graph) -> np.ndarray:
    try:
        lam, vec = np.linalg.eigh(g.adjacency().toarray())
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigendecomposition failed: {exc}", 0) from exc
    return (vec ** 2) @ np.exp(lam)


def _subgraph_series(g: Graph, order: int = SERIES_MIN_ORDER, block: int = 256,
                     rtol: float = 1e-14) -> np.ndarray:
    """diag(sum_k A^k / k!) from sparse products with blocks of identity columns.

    At least ``order`` terms are summed; summation continues while the geometric tail
    bound (valid once k + 1 > 2 * spectral radius) exceeds ``rtol`` of the diagonal.
    """
    n = g.n
    a = g.adjacency()
    rho = spectral_radius(g)
    out = np.empty(n)
    for start in range(0, n, block):
        cols = np.arange(start, min(start + block, n))
        rows = np.arange(len(cols))
        term = np.zeros((n, len(cols)))
        term[cols, rows] = 1.0
        acc = term[cols, rows].copy()
        k = 0
        while True:
            k += 1
            term = np.asarray(a @ term) / k
            acc += term[cols, rows]
            if k >= order and k + 1 > 2 * rho:
                tail = 2.0 * np.sqrt((term ** 2).sum(axis=0))
                if np.all(tail <= rtol * acc):
                    break
        out[cols] = acc
    return out


def subgraph_centrality(g: Graph, method: str = "auto", order: int = SERIES_MIN_ORDER) -> np.ndarray:
    """Weighted closed-walk count diag(exp(A))."""
    if method == "auto":
        method = "eig" if g.n <= EIG_CUTOFF else "series"
    if method == "eig":
        return _subgraph_eig(g)
    if method == "series":
        return _subgraph_series(g, order=order)
    raise ValueError(f"unknown subgraph centrality method {method!r}")


@dataclass(frozen=True)
class CentralityScores:
    eigenvector: np.ndarray
    betweenness: np.ndarray
    closeness: np.ndarray
    subgraph: np.ndarray
    methods: dict = field(default_factory=dict)

    def as_matrix(self) -> np.ndarray:
        """(n, 4) matrix in CENTRALITY_NAMES column order."""
        return np.stack([getattr(self, k) for k in CENTRALITY_NAMES], axis=1)

    @classmethod
    def from_matrix(cls, mat, methods=None) -> "CentralityScores":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(*(mat[:, i].copy() for i in range(4)), methods=dict(methods or {}))


def centrality_targets(g: Graph, eig_tol: float = 1e-8) -> CentralityScores:
    sc_method = "eig" if g.n <= EIG_CUTOFF else "series"
    return CentralityScores(
        eigenvector=eigenvector_centrality(g, tol=eig_tol),
        betweenness=betweenness(g),
        closeness=closeness(g),
        subgraph=subgraph_centrality(g, method=sc_method),
        methods={"eigenvector": f"power-iteration(A+I), tol={eig_tol:g}",
                 "betweenness": "brandes, 1/(n(n-1))",
                 "closeness": "bfs, component-corrected",
                 "subgraph": sc_method},
    )


def write_centrality_csv(path, scores: CentralityScores) -> None:
    """Node id plus the four centralities per row; ``path`` may be an open stream."""
    mat = scores.as_matrix()
    with open_text_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("node",) + CENTRALITY_NAMES)
        for v, row in enumerate(mat):
            w.writerow([v] + [repr(float(x)) for x in row])
