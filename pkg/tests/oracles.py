"""Slow reference implementations straight from the definitions (no shared code with the package)."""
from itertools import combinations

import numpy as np


def adjacency_sets(n, edges):
    adj = [set() for _ in range(n)]
    for u, v in edges:
        u, v = int(u), int(v)
        if u != v:
            adj[u].add(v)
            adj[v].add(u)
    return adj


def random_edges(rng, n, p):
    return [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]


def core_numbers(n, edges):
    """max k such that some induced subgraph containing v has minimum degree >= k (all 2^n subsets)."""
    if n == 0:
        return np.zeros(0, dtype=int)
    A = np.zeros((n, n), dtype=int)
    for u, v in edges:
        if u != v:
            A[u, v] = A[v, u] = 1
    subsets = ((np.arange(1, 2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    inner = subsets.astype(int) @ A  # inner[S, v] = neighbours of v inside S
    mindeg = np.where(subsets, inner, n + 1).min(axis=1)
    return np.array([mindeg[subsets[:, v]].max() for v in range(n)])


def clustering(n, edges):
    adj = adjacency_sets(n, edges)
    out = np.zeros(n)
    for v in range(n):
        d = len(adj[v])
        if d < 2:
            continue
        t = sum(1 for a, b in combinations(sorted(adj[v]), 2) if b in adj[a])
        out[v] = 2.0 * t / (d * (d - 1))
    return out


def collective_influence(n, edges):
    adj = adjacency_sets(n, edges)
    deg = [len(a) for a in adj]
    return np.array([(deg[v] - 1) * sum(deg[u] - 1 for u in adj[v]) if deg[v] > 0 else 0
                     for v in range(n)], dtype=float)


def _bfs(adj, s):
    dist = {s: 0}
    frontier = [s]
    while frontier:
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    nxt.append(w)
        frontier = nxt
    return dist


def all_shortest_paths(adj, s, t, dist_s):
    """Every shortest s-t path as an explicit node list."""
    if t not in dist_s:
        return []
    paths = []

    def walk(path):
        u = path[-1]
        if u == t:
            paths.append(list(path))
            return
        for w in adj[u]:
            if dist_s.get(w) == dist_s[u] + 1 and dist_s[w] <= dist_s[t]:
                path.append(w)
                walk(path)
                path.pop()

    walk([s])
    return paths


def betweenness(n, edges):
    """sum over ordered pairs s != t of (# shortest paths through v) / (# shortest paths), / (n(n-1))."""
    adj = adjacency_sets(n, edges)
    bc = np.zeros(n)
    if n < 2:
        return bc
    for s in range(n):
        dist_s = _bfs(adj, s)
        for t in range(n):
            if t == s:
                continue
            paths = all_shortest_paths(adj, s, t, dist_s)
            if not paths:
                continue
            for p in paths:
                for v in p[1:-1]:
                    bc[v] += 1.0 / len(paths)
    return bc / (n * (n - 1))


def closeness(n, edges):
    adj = adjacency_sets(n, edges)
    out = np.zeros(n)
    for v in range(n):
        dist = _bfs(adj, v)
        total = sum(dist.values())
        if total > 0:
            out[v] = (len(dist) - 1) / (n - 1) / total
    return out


def subgraph_taylor(n, edges, terms=200):
    """diag of sum_k A^k / k! with exact small-integer matrix powers held as floats."""
    A = np.zeros((n, n))
    for u, v in edges:
        A[u, v] = A[v, u] = 1.0
    term = np.eye(n)
    acc = np.eye(n)
    for k in range(1, terms):
        term = term @ A / k
        acc += term
    return np.diag(acc).copy()
