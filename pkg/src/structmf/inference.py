"""Exact inference: min-fill triangulation, junction trees, marginals and KL.

The same engine evaluates the conditional averages needed by the mean field
updates (inside an approximation Q) and serves as the exact reference for
small target models.  Everything is kept in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .model import LogTable, TargetModel, as_scope, expand, log_joint, marginalize, sum_tables

DEFAULT_WIDTH_LIMIT = 12
ZERO_MASS = 1e-300


class IntractableError(ValueError):
    """Raised when a required clique exceeds the width limit."""


@dataclass(frozen=True)
class EliminationOrder:
    order: tuple[int, ...]
    induced_width: int
    cliques: tuple[tuple[int, ...], ...]


def _adjacency(scopes, n_vars):
    adj = {v: set() for v in range(n_vars)}
    for s in scopes:
        for v in s:
            adj[v].update(u for u in s if u != v)
    return adj


def _fill_in(adj, v):
    nb = list(adj[v])
    return sum(1 for i in range(len(nb)) for j in range(i + 1, len(nb)) if nb[j] not in adj[nb[i]])


def _min_fill(adj, candidates):
    """Greedy min-fill elimination of ``candidates``; mutates ``adj``."""
    remaining = set(candidates)
    order, cliques, width = [], [], 0
    while remaining:
        v = min(remaining, key=lambda u: (_fill_in(adj, u), u))
        nb = adj[v]
        for a in nb:
            adj[a].update(nb - {a})
            adj[a].discard(v)
        cliques.append(as_scope(nb | {v}))
        width = max(width, len(nb))
        order.append(v)
        remaining.discard(v)
        del adj[v]
    return order, cliques, width


def build_elimination_order(clusters, n_vars: int) -> EliminationOrder:
    """Min-fill greedy order over the graph whose cliques are ``clusters``.

    Ties go to the lowest variable id; ``induced_width`` is exact for the
    returned order.
    """
    clusters = [as_scope(c) for c in clusters]
    covered = {v for c in clusters for v in c}
    missing = sorted(set(range(n_vars)) - covered)
    if missing:
        raise ValueError(f"variables {missing} are not covered by any cluster")
    order, cliques, width = _min_fill(_adjacency(clusters, n_vars), range(n_vars))
    return EliminationOrder(tuple(order), width, tuple(cliques))


def induced_width(clusters, order) -> int:
    """Induced width of eliminating ``order`` on the graph of ``clusters``."""
    adj = _adjacency([as_scope(c) for c in clusters], len(order))
    width = 0
    for v in order:
        nb = adj.pop(v)
        width = max(width, len(nb))
        for a in nb:
            adj[a].update(nb - {a})
            adj[a].discard(v)
    return width


@dataclass(frozen=True)
class CompiledTree:
    """Junction tree with log potentials.

    ``edges`` holds ``(i, j, separator)`` with ``i < j``.  Once calibrated,
    every node potential is the unnormalised log marginal of its clique and
    every separator table the unnormalised log marginal of the separator, so
    that ``sum(nodes) - sum(separators)`` reproduces the summed input factors.
    """

    cliques: tuple[tuple[int, ...], ...]
    potentials: tuple[LogTable, ...]
    edges: tuple[tuple[int, int, tuple[int, ...]], ...]
    separators: tuple[LogTable, ...]
    cards: tuple[int, ...]
    factors: tuple[LogTable, ...]
    width_limit: int = DEFAULT_WIDTH_LIMIT
    calibrated: bool = False
    log_z: float | None = None

    @property
    def nodes(self):
        return list(zip(self.cliques, self.potentials))

    @property
    def n_vars(self) -> int:
        return len(self.cards)

    def neighbours(self):
        nb = {i: [] for i in range(len(self.cliques))}
        for k, (i, j, _) in enumerate(self.edges):
            nb[i].append((j, k))
            nb[j].append((i, k))
        return nb

    def clique_containing(self, scope) -> int | None:
        s = set(scope)
        best = None
        for k, c in enumerate(self.cliques):
            if s.issubset(c) and (best is None or len(c) < len(self.cliques[best])):
                best = k
        return best


def check_running_intersection(cliques, edges) -> bool:
    """Every variable's containing cliques induce a connected subtree."""
    nb = {i: set() for i in range(len(cliques))}
    for i, j, *_ in edges:
        nb[i].add(j)
        nb[j].add(i)
    variables = {v for c in cliques for v in c}
    for v in variables:
        holders = {k for k, c in enumerate(cliques) if v in c}
        start = next(iter(holders))
        seen, stack = {start}, [start]
        while stack:
            k = stack.pop()
            for m in nb[k]:
                if m in holders and m not in seen:
                    seen.add(m)
                    stack.append(m)
        if seen != holders:
            return False
    return True


def _is_tree(n_nodes, edges) -> bool:
    if len(edges) != n_nodes - 1:
        return False
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, *_ in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            return False
        parent[ri] = rj
    return True


def _max_spanning_tree(cliques):
    candidates = []
    for i in range(len(cliques)):
        for j in range(i + 1, len(cliques)):
            sep = as_scope(set(cliques[i]) & set(cliques[j]))
            candidates.append((-len(sep), i, j, sep))
    candidates.sort()
    parent = list(range(len(cliques)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for _, i, j, sep in candidates:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((i, j, sep))
    return tuple(edges)


def compile_junction_tree(clusters, factors: Sequence[LogTable], cards: Sequence[int],
                          width_limit: int = DEFAULT_WIDTH_LIMIT,
                          calibrate_tree: bool = True) -> CompiledTree:
    """Triangulate, join cliques by a maximum spanning tree and load factors.

    The factor scopes are always part of the triangulated graph, so each
    factor lands in the first clique that contains it.
    """
    cards = tuple(int(c) for c in cards)
    factors = tuple(factors)
    scopes = [as_scope(c) for c in clusters] + [f.scope for f in factors]
    n = len(cards)
    for v in {v for s in scopes for v in s}:
        if v >= n:
            raise ValueError(f"unknown variable {v}")
    order, elim_cliques, width = _min_fill(_adjacency(scopes, n), range(n))
    if width > width_limit:
        raise IntractableError(f"induced width {width} exceeds the width limit {width_limit}")
    cliques = []
    for c in sorted(set(elim_cliques), key=lambda c: (-len(c), c)):
        if not any(set(c) < set(d) for d in cliques):
            cliques.append(c)
    cliques = tuple(sorted(cliques)) or ((),)
    edges = _max_spanning_tree(cliques)
    if not check_running_intersection(cliques, edges):
        raise AssertionError("junction tree violates the running intersection property")
    loads = [[] for _ in cliques]
    for a, f in enumerate(factors):
        home = next((k for k, c in enumerate(cliques) if set(f.scope) <= set(c)), None)
        if home is None:
            raise ValueError(f"factor {a} over {f.scope} fits no clique")
        loads[home].append(f)
    potentials = tuple(LogTable(c, sum_tables(ld, c, cards)) for c, ld in zip(cliques, loads))
    separators = tuple(LogTable.zeros(sep, cards) for _, _, sep in edges)
    tree = CompiledTree(cliques, potentials, edges, separators, cards, factors, width_limit)
    return calibrate(tree) if calibrate_tree else tree


def _schedule(tree: CompiledTree, root: int = 0):
    """Parent pointers and a root-first node order (per connected tree)."""
    nb = tree.neighbours()
    parent = {root: (None, None)}
    order = [root]
    for k in order:
        for m, e in nb[k]:
            if m not in parent:
                parent[m] = (k, e)
                order.append(m)
    return order, parent


def calibrate(tree: CompiledTree) -> CompiledTree:
    """Two-pass Hugin propagation in log space."""
    pots = [p.values.copy() for p in tree.potentials]
    seps = [s.values.copy() for s in tree.separators]
    cards = tree.cards
    order, parent = _schedule(tree)

    def send(src, dst, e):
        sep = tree.edges[e][2]
        new = marginalize(pots[src], tree.cliques[src], sep)
        pots[dst] = pots[dst] + expand(new - seps[e], sep, tree.cliques[dst], cards)
        seps[e] = np.asarray(new)

    for k in reversed(order[1:]):
        p, e = parent[k]
        send(k, p, e)
    for k in order[1:]:
        p, e = parent[k]
        send(p, k, e)
    root = order[0]
    log_z = float(logsumexp(pots[root])) if pots[root].size else 0.0
    return CompiledTree(
        tree.cliques,
        tuple(LogTable(c, v) for c, v in zip(tree.cliques, pots)),
        tree.edges,
        tuple(LogTable(sep, v) for (_, _, sep), v in zip(tree.edges, seps)),
        cards, tree.factors, tree.width_limit, True, log_z,
    )


def tree_log_joint(tree: CompiledTree) -> np.ndarray:
    """Dense ``sum(node potentials) - sum(separator potentials)`` (enumeration)."""
    full = tuple(range(tree.n_vars))
    out = sum_tables(tree.potentials, full, tree.cards)
    return out - sum_tables(tree.separators, full, tree.cards)


def rip_order(tree: CompiledTree, root: int = 0) -> list[int]:
    """Clique indices ordered so every clique's separator lies in a predecessor."""
    return _schedule(tree, root)[0]


def eliminate(factors: Sequence[LogTable], keep, cards: Sequence[int],
              width_limit: int = DEFAULT_WIDTH_LIMIT) -> np.ndarray:
    """Variable elimination: unnormalised log table over ``keep``.

    Factors not connected to ``keep`` only add a constant and are dropped.
    """
    keep = as_scope(keep)
    n = len(cards)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in factors:
        for v in f.scope[1:]:
            parent[find(v)] = find(f.scope[0])
    roots = {find(v) for v in keep}
    tables = [(f.scope, f.values) for f in factors if f.scope and find(f.scope[0]) in roots]
    present = {v for s, _ in tables for v in s}
    adj = _adjacency([s for s, _ in tables], n)
    order, _, width = _min_fill({v: adj[v] for v in present}, present - set(keep))
    if width > width_limit:
        raise IntractableError(f"elimination width {width} exceeds the width limit {width_limit}")
    for v in order:
        involved = [t for t in tables if v in t[0]]
        tables = [t for t in tables if v not in t[0]]
        scope = as_scope({u for s, _ in involved for u in s})
        total = np.zeros([cards[u] for u in scope])
        for s, vals in involved:
            total = total + expand(vals, s, scope, cards)
        rest = tuple(u for u in scope if u != v)
        tables.append((rest, logsumexp(total, axis=scope.index(v))))
    out = np.zeros([cards[v] for v in keep])
    for s, vals in tables:
        out = out + expand(vals, s, keep, cards)
    return out


def marginal(tree: CompiledTree, target) -> LogTable:
    """Normalised log marginal over ``target``.

    Read off a clique when one contains ``target``; otherwise fall back to
    variable elimination over the tree's factors.
    """
    target = as_scope(target)
    for v in target:
        if v >= tree.n_vars:
            raise ValueError(f"unknown variable {v}")
    if not tree.calibrated:
        tree = calibrate(tree)
    k = tree.clique_containing(target)
    if k is not None:
        vals = marginalize(tree.potentials[k].values, tree.cliques[k], target) - tree.log_z
        return LogTable(target, vals)
    vals = eliminate(tree.factors, target, tree.cards, tree.width_limit)
    return LogTable(target, vals - logsumexp(vals))


def conditional_expectation(tree: CompiledTree, f: LogTable, given) -> np.ndarray:
    """``sum_d Q(d | c = s) f(d)`` for every state ``s`` of ``given``.

    The conditional is formed in log space, so states of tiny but nonzero
    mass keep their exact conditional average; only states whose log mass
    is not finite get the unconditional average.
    """
    given = as_scope(given)
    union = as_scope(set(f.scope) | set(given))
    log_joint_u = marginal(tree, union).values
    fvals = expand(f.values, f.scope, union, tree.cards)
    axes = tuple(i for i, v in enumerate(union) if v not in given)
    if not axes:
        return np.array(fvals, dtype=float)
    log_mass = logsumexp(log_joint_u, axis=axes)
    safe = np.isfinite(log_mass)
    cond = np.exp(log_joint_u - expand(np.where(safe, log_mass, 0.0), given, union, tree.cards))
    out = np.sum(cond * fvals, axis=axes)
    if not np.all(safe):
        out = np.where(safe, out, float(np.sum(np.exp(log_joint_u) * fvals)))
    return np.asarray(out, dtype=float)


def brute_force_marginals(model: TargetModel, targets, max_states: int = 2 ** 24):
    """Marginals and ``log Z`` by enumerating every joint state."""
    if model.n_states > max_states:
        raise IntractableError(f"{model.n_states} joint states exceed the cap {max_states}")
    lj = log_joint(model.cards, model.factors)
    log_z = float(logsumexp(lj)) if lj.size else 0.0
    full = tuple(range(model.n_vars))
    out = []
    for t in targets:
        t = as_scope(t)
        out.append(LogTable(t, marginalize(lj, full, t) - log_z))
    return out, log_z


def exact_tree(model: TargetModel, width_limit: int = DEFAULT_WIDTH_LIMIT) -> CompiledTree:
    """Calibrated junction tree of the target model itself."""
    return compile_junction_tree([f.scope for f in model.factors], model.factors,
                                 model.cards, width_limit)


def expected_sum(tree: CompiledTree, tables: Sequence[LogTable]) -> float:
    """``sum_k <t_k>`` under the normalised tree distribution."""
    total = 0.0
    for t in tables:
        if not t.scope:
            total += float(t.values)
            continue
        p = np.exp(marginal(tree, t.scope).values)
        total += float(np.sum(p * t.values))
    return total


def q_entropy_term(tree: CompiledTree) -> float:
    """``<log Q>`` for the distribution encoded by the tree's factors.

    Uses ``log Q = sum_C log Q(C) - sum_S log Q(S)`` on the calibrated tree;
    the normalised clique logs avoid cancelling large potential offsets
    against ``log_z``.
    """
    if not tree.calibrated:
        tree = calibrate(tree)
    total = 0.0
    for tables, sign in ((tree.potentials, 1.0), (tree.separators, -1.0)):
        for t in tables:
            lq = t.values - tree.log_z
            total += sign * float(np.sum(np.exp(lq) * lq))
    return total


def kl_divergence(q_tree: CompiledTree, p: TargetModel, mode: str = "exact",
                  log_z_p: float | None = None) -> float:
    """``D(Q, P)`` in ``exact`` mode, ``D(Q, P) - log Z_P`` in ``free_energy`` mode."""
    if mode not in ("exact", "free_energy"):
        raise ValueError(f"unknown mode {mode!r}")
    if not q_tree.calibrated:
        q_tree = calibrate(q_tree)
    value = q_entropy_term(q_tree) - expected_sum(q_tree, p.factors)
    if mode == "free_energy":
        return value
    if log_z_p is None:
        log_z_p = p.log_z
    if log_z_p is None:
        raise ValueError("exact KL needs log Z of the target; pass log_z_p or set model.log_z")
    return value + log_z_p


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """``max_A |P(A) - Q(A)|`` for distributions on the same finite space."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def max_single_variable_discrepancy(p_marginals, q_marginals) -> float:
    """Largest event discrepancy over events on one variable."""
    return max((total_variation(np.exp(a.values), np.exp(b.values))
                for a, b in zip(p_marginals, q_marginals)), default=0.0)
