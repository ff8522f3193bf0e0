"""Junction-tree shaped approximations kept consistent by DistributeEvidence.

``Q(x) = prod_g Phi_g(c_g) / prod_(g,d) Phi_gd(s_gd)``, with every node table
equal to the clique marginal ``Q(c_g)``.  Tables are stored as probabilities.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .inference import (
    DEFAULT_WIDTH_LIMIT,
    CompiledTree,
    _is_tree,
    calibrate,
    check_running_intersection,
    compile_junction_tree,
)
from .meanfield import _components, average_terms, coordinate_descent
from .model import PROB_FLOOR, LogTable, TargetModel, as_scope, expand, sum_tables

CONSISTENCY_TOL = 1e-9


class InconsistentTreeError(ValueError):
    pass


def _project(values, scope, keep):
    axes = tuple(i for i, v in enumerate(scope) if v not in set(keep))
    return values.sum(axis=axes) if axes else values


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class JunctionTreeApprox:
    nodes: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, int], ...]
    node_potentials: tuple[np.ndarray, ...] = field(repr=False)
    sep_potentials: tuple[np.ndarray, ...] = field(repr=False)
    cards: tuple[int, ...]
    width_limit: int = DEFAULT_WIDTH_LIMIT

    def __post_init__(self):
        if not _is_tree(len(self.nodes), self.edges):
            raise ValueError("edges do not form a tree over the nodes")
        if not check_running_intersection(self.nodes, self.edges):
            raise ValueError("cluster tree violates the junction property")

    @classmethod
    def create(cls, cards, nodes, edges, width_limit=DEFAULT_WIDTH_LIMIT):
        """Uniform (hence consistent) tree over the given structure."""
        cards = tuple(int(c) for c in cards)
        nodes = tuple(as_scope(c) for c in nodes)
        edges = tuple((min(i, j), max(i, j)) for i, j in edges)
        covered = {v for c in nodes for v in c}
        if covered != set(range(len(cards))):
            raise ValueError(f"nodes leave variables {sorted(set(range(len(cards))) - covered)} uncovered")
        pots = []
        for c in nodes:
            shape = [cards[v] for v in c]
            pots.append(_frozen(np.full(shape, 1.0 / max(int(np.prod(shape)), 1))))
        seps = []
        for i, j in edges:
            s = as_scope(set(nodes[i]) & set(nodes[j]))
            seps.append(_frozen(_project(pots[i], nodes[i], s)))
        return cls(nodes, edges, tuple(pots), tuple(seps), cards, width_limit)

    @classmethod
    def from_compiled(cls, tree: CompiledTree) -> "JunctionTreeApprox":
        """Probability-scale copy of a calibrated compiled tree."""
        if not tree.calibrated:
            tree = calibrate(tree)
        pots = tuple(_frozen(np.exp(p.values - tree.log_z)) for p in tree.potentials)
        seps = tuple(_frozen(np.exp(s.values - tree.log_z)) for s in tree.separators)
        edges = tuple((i, j) for i, j, _ in tree.edges)
        return cls(tree.cliques, edges, pots, seps, tree.cards, tree.width_limit)

    def separator(self, e: int) -> tuple[int, ...]:
        i, j = self.edges[e]
        return as_scope(set(self.nodes[i]) & set(self.nodes[j]))

    @property
    def scopes(self):
        return list(self.nodes)

    @property
    def n_vars(self) -> int:
        return len(self.cards)

    def log_factors(self) -> list[LogTable]:
        """Node logs and negated separator logs (floored at 1e-300)."""
        out = [LogTable(c, np.log(np.maximum(p, PROB_FLOOR)))
               for c, p in zip(self.nodes, self.node_potentials)]
        out += [LogTable(self.separator(e), -np.log(np.maximum(s, PROB_FLOOR)))
                for e, s in enumerate(self.sep_potentials)]
        return out

    @cached_property
    def q_tree(self) -> CompiledTree:
        return compile_junction_tree(self.nodes, self.log_factors(), self.cards, self.width_limit)

    def log_joint(self) -> np.ndarray:
        """Dense log of ``prod Phi / prod Phi_sep`` over all joint states."""
        return sum_tables(self.log_factors(), tuple(range(self.n_vars)), self.cards)

    def replace(self, node_potentials=None, sep_potentials=None) -> "JunctionTreeApprox":
        return JunctionTreeApprox(
            self.nodes, self.edges,
            tuple(_frozen(p) for p in (node_potentials or self.node_potentials)),
            tuple(_frozen(s) for s in (sep_potentials or self.sep_potentials)),
            self.cards, self.width_limit,
        )

    def neighbours(self):
        nb = {i: [] for i in range(len(self.nodes))}
        for e, (i, j) in enumerate(self.edges):
            nb[i].append((j, e))
            nb[j].append((i, e))
        return nb


def distribute_evidence(q: JunctionTreeApprox, kappa: int) -> JunctionTreeApprox:
    """Push messages outward from node ``kappa`` until the tree is consistent.

    A 0/0 message ratio counts as 0; a positive entry over a zero separator
    entry is an error.
    """
    pots = [np.array(p) for p in q.node_potentials]
    seps = [np.array(s) for s in q.sep_potentials]
    nb = q.neighbours()
    queue = deque([(kappa, None)])
    while queue:
        src, came_from = queue.popleft()
        for dst, e in nb[src]:
            if dst == came_from:
                continue
            s = q.separator(e)
            new = _project(pots[src], q.nodes[src], s)
            old = seps[e]
            zero = old == 0
            if np.any(zero & (new > 0)):
                raise ZeroDivisionError(f"message onto a zero separator entry on edge {e}")
            ratio = np.where(zero, 0.0, new / np.where(zero, 1.0, old))
            pots[dst] = pots[dst] * expand(ratio, s, q.nodes[dst], q.cards)
            seps[e] = new
            queue.append((dst, src))
    return q.replace(pots, seps)


def consistency_check(q: JunctionTreeApprox) -> float:
    """Largest disagreement between adjacent nodes' separator marginals."""
    worst = 0.0
    for e, (i, j) in enumerate(q.edges):
        s = q.separator(e)
        a = _project(q.node_potentials[i], q.nodes[i], s)
        b = _project(q.node_potentials[j], q.nodes[j], s)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def cluster_marginal(q: JunctionTreeApprox, gamma: int) -> np.ndarray:
    """``Q(c_gamma)``, read straight off the node table."""
    gap = consistency_check(q)
    if gap > CONSISTENCY_TOL:
        raise InconsistentTreeError(f"tree is inconsistent (discrepancy {gap:.3g})")
    return np.array(q.node_potentials[gamma])


def jt_mf_update(q: JunctionTreeApprox, p: TargetModel, kappa: int) -> JunctionTreeApprox:
    """Mean field update of node ``kappa`` followed by DistributeEvidence.

    All averages are taken under the consistent pre-update Q.  Node and
    separator terms are included for the whole connected component of the
    node (a superset of the ones that actually depend on it).
    """
    gap = consistency_check(q)
    if gap > CONSISTENCY_TOL:
        raise InconsistentTreeError(f"tree is inconsistent (discrepancy {gap:.3g})")
    comp = _components(q.nodes, q.n_vars)
    cluster = q.nodes[kappa]
    label = comp[cluster[0]] if cluster else None

    def touches(scope):
        return any(comp[v] == label for v in scope)

    terms = [f for f in p.factors if touches(f.scope)]
    logs = q.log_factors()
    n = len(q.nodes)
    for g in range(n):
        if g != kappa and touches(q.nodes[g]):
            terms.append(LogTable(logs[g].scope, -logs[g].values))
    for e in range(len(q.edges)):
        sep = logs[n + e]
        if sep.scope and touches(sep.scope):
            terms.append(LogTable(sep.scope, -sep.values))
    avg = average_terms(q.q_tree, terms, cluster, q.cards)
    new = np.exp(avg - logsumexp(avg))
    pots = list(q.node_potentials)
    pots[kappa] = new
    return distribute_evidence(q.replace(pots), kappa)


def optimize_jt(q: JunctionTreeApprox, p: TargetModel, schedule="sequential", tol=1e-9,
                max_iters=1000, seed=None, order=None):
    return coordinate_descent(
        q, p, len(q.nodes), jt_mf_update, lambda a: list(a.node_potentials),
        schedule=schedule, tol=tol, max_iters=max_iters, seed=seed, order=order,
    )
