"""Cluster-factorised approximations and the generalised mean field updates.

``Q(x) = exp(sum_g phi_g(c_g) + sum_{a in A} psi_a(d_a) - log_z_q)`` where the
``phi_g`` are free log potentials on user-chosen clusters and the ``psi_a``
(possibly none) are fixed copies of target factors.  One update replaces a
single ``phi_g`` by its conditional-average fixed point, which is the global
minimiser of KL(Q||P) over that potential with all others held fixed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .inference import (
    DEFAULT_WIDTH_LIMIT,
    CompiledTree,
    compile_junction_tree,
    conditional_expectation,
    kl_divergence,
    marginal,
)
from .model import LogTable, TargetModel, as_scope, expand, log_joint

log = logging.getLogger(__name__)


def _components(scopes, n_vars):
    """Map each variable to a component label of the scopes' intersection graph."""
    parent = list(range(n_vars))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s in scopes:
        for v in s[1:]:
            parent[find(v)] = find(s[0])
    return [find(v) for v in range(n_vars)]


@dataclass(frozen=True)
class UndirectedApprox:
    clusters: tuple[tuple[int, ...], ...]
    variational: tuple[LogTable, ...]
    copied: tuple[LogTable, ...]
    copied_indices: tuple[int, ...]
    cards: tuple[int, ...]
    log_z_q: float
    q_tree: CompiledTree = field(repr=False)
    width_limit: int = DEFAULT_WIDTH_LIMIT

    @classmethod
    def create(cls, cards, clusters, copied=(), copied_indices=(), init=None,
               seed=None, width_limit=DEFAULT_WIDTH_LIMIT) -> "UndirectedApprox":
        """New approximation with all-zero potentials (uniform over the clusters).

        ``init`` may give explicit starting tables (arrays or LogTables, one
        per cluster); ``seed`` instead draws entries from uniform(-0.1, 0.1).
        """
        cards = tuple(int(c) for c in cards)
        clusters = tuple(as_scope(c) for c in clusters)
        copied = tuple(copied)
        covered = {v for c in clusters for v in c} | {v for t in copied for v in t.scope}
        missing = sorted(set(range(len(cards))) - covered)
        if missing:
            raise ValueError(f"variables {missing} are not covered by the approximation")
        if init is not None:
            if len(init) != len(clusters):
                raise ValueError("init needs one table per cluster")
            tables = [t if isinstance(t, LogTable) else LogTable(c, np.asarray(t, dtype=float))
                      for c, t in zip(clusters, init)]
        elif seed is not None:
            rng = np.random.default_rng(seed)
            tables = [LogTable(c, rng.uniform(-0.1, 0.1, size=[cards[v] for v in c]))
                      for c in clusters]
        else:
            tables = [LogTable.zeros(c, cards) for c in clusters]
        for c, t in zip(clusters, tables):
            if t.scope != c:
                raise ValueError(f"initial table over {t.scope} does not match cluster {c}")
        for i, a in enumerate(clusters):
            for j, b in enumerate(clusters):
                if i != j and set(a) <= set(b) and (set(a) < set(b) or i > j):
                    warnings.warn(f"cluster {a} is nested inside cluster {b}", stacklevel=2)
        return cls._assemble(clusters, [t.max_normalized()[0] for t in tables], copied,
                             tuple(copied_indices), cards, width_limit)

    @classmethod
    def _assemble(cls, clusters, variational, copied, copied_indices, cards, width_limit):
        variational = tuple(variational)
        tree = compile_junction_tree(
            list(clusters) + [t.scope for t in copied], variational + copied, cards, width_limit
        )
        return cls(clusters, variational, copied, copied_indices, cards, tree.log_z, tree,
                   width_limit)

    @property
    def tables(self) -> tuple[LogTable, ...]:
        return self.variational + self.copied

    @property
    def scopes(self) -> list[tuple[int, ...]]:
        return [t.scope for t in self.tables]

    @property
    def n_vars(self) -> int:
        return len(self.cards)

    def with_potential(self, k: int, table: LogTable) -> "UndirectedApprox":
        """Replace potential ``k`` (max-normalised) and recompute ``log_z_q``."""
        if table.scope != self.clusters[k]:
            raise ValueError(f"table over {table.scope} does not match cluster {self.clusters[k]}")
        variational = list(self.variational)
        variational[k] = table.max_normalized()[0]
        return self._assemble(self.clusters, variational, self.copied, self.copied_indices,
                              self.cards, self.width_limit)

    def marginal(self, scope) -> LogTable:
        return marginal(self.q_tree, scope)

    def log_joint(self) -> np.ndarray:
        """Dense log Q over every joint state (enumeration; desk scale only)."""
        return log_joint(self.cards, self.tables) - self.log_z_q


@dataclass(frozen=True)
class DependencySets:
    d_set: tuple[int, ...]
    c_set: tuple[int, ...]


def dependency_sets(p: TargetModel, q: UndirectedApprox, gamma: int) -> DependencySets:
    """Target factors and other Q potentials that can depend on cluster ``gamma``.

    Membership is decided by the connected component of ``gamma`` in the
    intersection graph of Q's scopes.  Anything outside that component is
    independent of the cluster under Q for every choice of potentials.
    """
    comp = _components(q.scopes, q.n_vars)
    label = comp[q.clusters[gamma][0]]
    d_set = tuple(a for a, f in enumerate(p.factors) if any(comp[v] == label for v in f.scope))
    c_set = tuple(b for b, c in enumerate(q.clusters)
                  if b != gamma and comp[c[0]] == label)
    return DependencySets(d_set, c_set)


def average_terms(tree: CompiledTree, terms: Sequence[LogTable], cluster, cards) -> np.ndarray:
    """``< sum of terms >`` conditioned on each state of ``cluster``."""
    grouped: dict[tuple[int, ...], np.ndarray] = {}
    for t in terms:
        u = as_scope(set(t.scope) | set(cluster))
        grouped[u] = grouped.get(u, 0.0) + expand(t.values, t.scope, u, cards)
    out = np.zeros([cards[v] for v in cluster])
    for u, vals in grouped.items():
        out = out + conditional_expectation(tree, LogTable(u, vals), cluster)
    return out


def mf_update(q: UndirectedApprox, p: TargetModel, gamma: int,
              dependence: str = "component") -> UndirectedApprox:
    """Set ``phi_gamma`` to ``< sum_D psi - sum_C phi >`` given the cluster state.

    Copied factors appear both among the target terms and as Q potentials, so
    they cancel and are left out of the average.  ``dependence="all"`` forces
    every term in, which can only shift the result by a constant.
    """
    if dependence == "component":
        ds = dependency_sets(p, q, gamma)
    elif dependence == "all":
        ds = DependencySets(tuple(range(len(p.factors))),
                            tuple(b for b in range(len(q.clusters)) if b != gamma))
    else:
        raise ValueError(f"unknown dependence rule {dependence!r}")
    copied = set(q.copied_indices)
    terms = [p.factors[a] for a in ds.d_set if a not in copied]
    terms += [LogTable(q.variational[b].scope, -q.variational[b].values) for b in ds.c_set]
    cluster = q.clusters[gamma]
    new = average_terms(q.q_tree, terms, cluster, q.cards)
    return q.with_potential(gamma, LogTable(cluster, new))


def free_energy(q, p: TargetModel) -> float:
    """KL(Q||P) minus log Z_P."""
    return kl_divergence(q.q_tree, p, mode="free_energy")


@dataclass
class DescentReport:
    kl_trace: list[float]
    iterations: int
    converged: bool
    final_sup_change: float
    start_free_energy: float = float("nan")

    @property
    def max_increase(self) -> float:
        """Largest single-update increase of the free energy (<= 0 when monotone)."""
        seq = [self.start_free_energy] + list(self.kl_trace)
        seq = [v for v in seq if np.isfinite(v)]
        return max((b - a for a, b in zip(seq, seq[1:])), default=0.0)


def sweep_order(n: int, schedule: str, rng: np.random.Generator | None) -> list[int]:
    if schedule == "sequential":
        return list(range(n))
    if schedule == "reverse":
        return list(reversed(range(n)))
    if schedule == "random":
        if rng is None:
            raise ValueError("random schedule needs a seed")
        return [int(k) for k in rng.permutation(n)]
    raise ValueError(f"unknown schedule {schedule!r}")


def coordinate_descent(q, p: TargetModel, n_units: int, update: Callable, params: Callable,
                       schedule="sequential", tol=1e-9, max_iters=1000, seed=None,
                       order=None, energy: Callable = free_energy):
    """Sweep ``update(q, p, k)`` over units until parameters stop moving.

    ``params(q)`` returns the arrays compared between sweeps (sup norm).
    ``order`` overrides the unit sequence used by the sequential/reverse
    schedules.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    base = list(order) if order is not None else list(range(n_units))
    rng = np.random.default_rng(seed) if seed is not None else None
    start = energy(q, p)
    trace: list[float] = []
    if n_units == 0:
        return q, DescentReport(trace, 0, True, 0.0, start)
    change = float("inf")
    for sweep in range(1, max_iters + 1):
        before = [np.array(a, copy=True) for a in params(q)]
        for k in sweep_order(len(base), schedule, rng):
            q = update(q, p, base[k])
            trace.append(energy(q, p))
        after = params(q)
        change = max((float(np.max(np.abs(a - b))) if a.size else 0.0
                      for a, b in zip(after, before)), default=0.0)
        log.debug("sweep %d: free energy %.12g, change %.3g", sweep, trace[-1], change)
        if change < tol:
            return q, DescentReport(trace, sweep, True, change, start)
    return q, DescentReport(trace, max_iters, False, change, start)


def optimize(q: UndirectedApprox, p: TargetModel, schedule: str = "sequential",
             tol: float = 1e-9, max_iters: int = 1000, seed=None, order=None):
    """Run full sweeps of :func:`mf_update`; returns ``(q, DescentReport)``."""
    return coordinate_descent(
        q, p, len(q.clusters), mf_update, lambda a: [t.values for t in a.variational],
        schedule=schedule, tol=tol, max_iters=max_iters, seed=seed, order=order,
    )


def attach_copied_potentials(p: TargetModel, copy_indices, variational_clusters,
                             width_limit=DEFAULT_WIDTH_LIMIT, **kwargs) -> UndirectedApprox:
    """Approximation that keeps the chosen target factors fixed inside Q."""
    idx = tuple(sorted(set(int(a) for a in copy_indices)))
    for a in idx:
        if not 0 <= a < len(p.factors):
            raise ValueError(f"no target factor {a}")
    copied = tuple(p.factors[a] for a in idx)
    return UndirectedApprox.create(p.cards, variational_clusters, copied, idx,
                                   width_limit=width_limit, **kwargs)


def initialize_from(coarse: UndirectedApprox, clusters) -> UndirectedApprox:
    """Richer approximation representing exactly the same Q as ``coarse``.

    Each coarse potential is added into the first new cluster containing it;
    copied factors stay copied.
    """
    clusters = tuple(as_scope(c) for c in clusters)
    tables = [np.zeros([coarse.cards[v] for v in c]) for c in clusters]
    for t in coarse.variational:
        home = next((k for k, c in enumerate(clusters) if set(t.scope) <= set(c)), None)
        if home is None:
            raise ValueError(f"no cluster contains the coarse cluster {t.scope}")
        tables[home] = tables[home] + expand(t.values, t.scope, clusters[home], coarse.cards)
    return UndirectedApprox.create(coarse.cards, clusters, coarse.copied, coarse.copied_indices,
                                   init=tables, width_limit=coarse.width_limit)


def factorization_gap(q: UndirectedApprox, cluster, partition) -> float:
    """Total correlation (nats) between the blocks of ``partition`` under Q(cluster)."""
    cluster = as_scope(cluster)
    blocks = [as_scope(b) for b in partition]
    seen = [v for b in blocks for v in b]
    if len(seen) != len(set(seen)) or set(seen) != set(cluster) or any(not b for b in blocks):
        raise ValueError(f"{blocks} is not a partition of {cluster}")
    joint = q.marginal(cluster)
    pj = np.exp(joint.values)
    gap = -_entropy(pj)
    for b in blocks:
        gap += _entropy(np.exp(q.marginal(b).values))
    return gap


def _entropy(p: np.ndarray) -> float:
    p = np.asarray(p).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))
