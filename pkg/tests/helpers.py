"""Small structure builders shared by several test modules."""

from collections import deque


def bfs_tree_clusters(n, edges, root=0):
    """Pair clusters of a tree ordered so each adds exactly one new variable."""
    nb = {v: [] for v in range(n)}
    for a, b in edges:
        nb[a].append(b)
        nb[b].append(a)
    seen = {root}
    out = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(nb[u]):
            if v not in seen:
                seen.add(v)
                out.append(tuple(sorted((u, v))))
                queue.append(v)
    return out


def cluster_tree_edges(clusters):
    """Edges joining each ordered pair cluster to the earlier cluster holding its separator."""
    edges = []
    seen = set(clusters[0])
    for k in range(1, len(clusters)):
        old = next(v for v in clusters[k] if v in seen)
        parent = next(j for j in range(k) if old in clusters[j])
        edges.append((parent, k))
        seen.update(clusters[k])
    return edges
