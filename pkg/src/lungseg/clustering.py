"""Density-based clustering of embedding vectors (HDBSCAN).

The full pipeline is implemented here rather than wrapped from a library:

  1. pairwise Euclidean distances,
  2. core distance of each point = distance to its min_samples-th nearest
     neighbor, counting the point itself as the first neighbor (the common
     library convention),
  3. mutual reachability distance max(core_i, core_j, d_ij),
  4. minimum spanning tree of the mutual reachability graph (Prim),
  5. single-linkage merge tree from the sorted MST edges,
  6. condensed cluster tree at min_cluster_size,
  7. cluster extraction maximizing stability (excess of mass), with ties
     between a parent and the sum of its children resolved in favor of the
     children.

Zero-distance groups are treated as atomic: a merge at distance 0 never
splits into sub-clusters, which keeps stabilities free of inf - inf
artifacts when the input contains duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterAssignment:
    """Cluster ids per input vector (-1 for noise) and per-cluster stability."""

    labels: np.ndarray
    stability: dict[int, float]

    @property
    def n_clusters(self) -> int:
        return len(self.stability)


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return d


def _mst_prim(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Dense-graph Prim starting at node 0; ties broken by lowest index."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = weights[0].copy()
    best_from = np.zeros(n, dtype=np.intp)
    in_tree[0] = True
    best[0] = np.inf
    edges = []
    for _ in range(n - 1):
        j = int(np.argmin(best))
        edges.append((int(best_from[j]), j, float(best[j])))
        in_tree[j] = True
        best[j] = np.inf
        closer = weights[j] < best
        closer &= ~in_tree
        best[closer] = weights[j][closer]
        best_from[closer] = j
    return edges


def _single_linkage(edges: list[tuple[int, int, float]], n: int) -> np.ndarray:
    """Merge tree in (left, right, distance, size) rows; new ids start at n."""
    order = sorted(range(len(edges)), key=lambda k: edges[k][2])
    parent = np.arange(2 * n - 1, dtype=np.intp)
    size = np.ones(2 * n - 1, dtype=np.intp)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    rows = np.empty((n - 1, 4), dtype=np.float64)
    nxt = n
    for i, k in enumerate(order):
        a, b, dist = edges[k]
        ra, rb = find(a), find(b)
        rows[i] = (ra, rb, dist, size[ra] + size[rb])
        parent[ra] = parent[rb] = nxt
        size[nxt] = size[ra] + size[rb]
        nxt += 1
    return rows


def _subtree_leaves(linkage: np.ndarray, n: int, node: int) -> list[int]:
    leaves, stack = [], [node]
    while stack:
        cur = stack.pop()
        if cur < n:
            leaves.append(cur)
        else:
            row = linkage[cur - n]
            stack.extend((int(row[0]), int(row[1])))
    return leaves


def _condense(linkage: np.ndarray, n: int, min_cluster_size: int):
    """Condensed tree rows (parent, child, lambda, size); clusters numbered from n.

    Child ids below n are points; ids n and above are clusters, root = n.
    """
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows: list[tuple[int, int, float, int]] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node < n:
            continue
        cluster = relabel[node]
        left, right = int(linkage[node - n][0]), int(linkage[node - n][1])
        dist = linkage[node - n][2]
        lam = 1.0 / dist if dist > 0.0 else np.inf
        lc = int(linkage[left - n][3]) if left >= n else 1
        rc = int(linkage[right - n][3]) if right >= n else 1
        if dist == 0.0:
            # Atomic zero-distance group: all points leave together.
            for leaf in _subtree_leaves(linkage, n, node):
                rows.append((cluster, leaf, np.inf, 1))
            continue
        if lc >= min_cluster_size and rc >= min_cluster_size:
            for child, count in ((left, lc), (right, rc)):
                relabel[child] = next_label
                rows.append((cluster, next_label, lam, count))
                next_label += 1
                stack.append(child)
        elif lc < min_cluster_size and rc < min_cluster_size:
            for child in (left, right):
                for leaf in _subtree_leaves(linkage, n, child):
                    rows.append((cluster, leaf, lam, 1))
        else:
            keep, shed = (left, right) if lc >= min_cluster_size else (right, left)
            relabel[keep] = cluster
            for leaf in _subtree_leaves(linkage, n, shed):
                rows.append((cluster, leaf, lam, 1))
            stack.append(keep)
    return rows


def _stabilities(rows, n: int) -> dict[int, float]:
    births = {n: 0.0}
    for parent, child, lam, _ in rows:
        if child >= n:
            births[child] = lam
    stab = {c: 0.0 for c in births}
    for parent, child, lam, size in rows:
        stab[parent] += (lam - births[parent]) * size
    return stab


def _extract_eom(rows, stab: dict[int, float], n: int) -> set[int]:
    """Excess-of-mass cluster selection; the root cluster is never selected."""
    kids: dict[int, list[int]] = {c: [] for c in stab}
    parent_of: dict[int, int] = {}
    for parent, child, _, _ in rows:
        if child >= n:
            kids[parent].append(child)
            parent_of[child] = parent
    chosen: dict[int, bool] = {}
    subtree: dict[int, float] = {}
    for c in sorted(stab, reverse=True):
        if c == n:
            continue
        child_sum = sum(subtree[k] for k in kids[c])
        if kids[c] and child_sum >= stab[c]:
            chosen[c] = False
            subtree[c] = child_sum
        else:
            chosen[c] = True
            subtree[c] = stab[c]
    selected = set()
    for c in sorted(chosen):  # parents first: ids increase downward
        if not chosen[c]:
            continue
        anc = parent_of.get(c)
        blocked = False
        while anc is not None and anc != n:
            if anc in selected:
                blocked = True
                break
            anc = parent_of.get(anc)
        if not blocked:
            selected.add(c)
    return selected


def hdbscan_cluster(
    vectors, min_cluster_size: int, min_samples: int
) -> ClusterAssignment:
    """Cluster vectors by density; returns labels (-1 noise) and stabilities.

    All-identical input is a single cluster with no noise. The partition is
    invariant to input order (up to cluster relabeling) and to uniform
    rescaling of the vectors.
    """
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("vectors must be a nonempty (n, d) array")
    n = x.shape[0]
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    if not 1 <= min_samples <= n:
        raise ValueError("min_samples must be in [1, n]")

    dist = _pairwise_distances(x)
    if n == 1 or float(dist.max()) == 0.0:
        return ClusterAssignment(
            labels=np.zeros(n, dtype=np.intp), stability={0: np.inf}
        )

    core = np.sort(dist, axis=1)[:, min_samples - 1]
    reach = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(reach, 0.0)

    edges = _mst_prim(reach)
    linkage = _single_linkage(edges, n)
    rows = _condense(linkage, n, min_cluster_size)
    stab = _stabilities(rows, n)
    selected = _extract_eom(rows, stab, n)

    parent_of_cluster = {child: parent for parent, child, _, _ in rows if child >= n}
    point_home = {child: parent for parent, child, _, _ in rows if child < n}
    raw = np.full(n, -1, dtype=np.intp)
    for point, home in point_home.items():
        c = home
        while c is not None:
            if c in selected:
                raw[point] = c
                break
            c = parent_of_cluster.get(c)

    out_ids: dict[int, int] = {}
    for point in range(n):  # relabel clusters by first member
        c = raw[point]
        if c >= 0 and c not in out_ids:
            out_ids[c] = len(out_ids)
    labels = np.array([out_ids[c] if c >= 0 else -1 for c in raw], dtype=np.intp)
    stability = {out_ids[c]: float(stab[c]) for c in selected if c in out_ids}
    return ClusterAssignment(labels=labels, stability=stability)
