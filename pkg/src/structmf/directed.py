"""Directed cluster factorisations ``Q(x) = prod_g Q(r_g | s_g)``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .inference import DEFAULT_WIDTH_LIMIT, CompiledTree, compile_junction_tree
from .meanfield import UndirectedApprox, average_terms, coordinate_descent, dependency_sets
from .model import LogTable, TargetModel, as_scope, expand, log_joint


def derive_separators(ordered_clusters):
    """Separators ``c_g & (c_1 | ... | c_{g-1})`` and residuals ``c_g - s_g``."""
    seen: set[int] = set()
    separators, residuals = [], []
    for k, c in enumerate(ordered_clusters):
        c = as_scope(c)
        sep = as_scope(set(c) & seen)
        res = as_scope(set(c) - seen)
        if not res:
            raise ValueError(f"cluster {k} {c} adds no new variable (empty residual)")
        separators.append(sep)
        residuals.append(res)
        seen.update(c)
    return tuple(separators), tuple(residuals)


def _normalize_over(values, scope, residual, cards):
    """Subtract the log-sum over ``residual`` axes for each separator state."""
    axes = tuple(i for i, v in enumerate(scope) if v in residual)
    z = logsumexp(values, axis=axes, keepdims=True)
    return values - z


@dataclass(frozen=True)
class DirectedApprox:
    ordered_clusters: tuple[tuple[int, ...], ...]
    separators: tuple[tuple[int, ...], ...]
    residuals: tuple[tuple[int, ...], ...]
    cond_tables: tuple[LogTable, ...]
    cards: tuple[int, ...]
    q_tree: CompiledTree = field(repr=False)
    width_limit: int = DEFAULT_WIDTH_LIMIT

    @classmethod
    def create(cls, cards, ordered_clusters, init=None, width_limit=DEFAULT_WIDTH_LIMIT):
        """Uniform conditionals unless ``init`` supplies log tables per cluster.

        ``init`` tables are locally renormalised, so any log potential works.
        """
        cards = tuple(int(c) for c in cards)
        clusters = tuple(as_scope(c) for c in ordered_clusters)
        seps, res = derive_separators(clusters)
        covered = {v for r in res for v in r}
        if covered != set(range(len(cards))):
            missing = sorted(set(range(len(cards))) - covered)
            raise ValueError(f"variables {missing} are not covered by the approximation")
        tables = []
        for k, c in enumerate(clusters):
            vals = (np.zeros([cards[v] for v in c]) if init is None
                    else np.asarray(getattr(init[k], "values", init[k]), dtype=float))
            tables.append(LogTable(c, _normalize_over(vals, c, res[k], cards)))
        return cls._assemble(clusters, seps, res, tables, cards, width_limit)

    @classmethod
    def _assemble(cls, clusters, seps, res, tables, cards, width_limit):
        tables = tuple(tables)
        tree = compile_junction_tree(clusters, tables, cards, width_limit)
        return cls(clusters, seps, res, tables, cards, tree, width_limit)

    @property
    def clusters(self):
        return self.ordered_clusters

    @property
    def tables(self):
        return self.cond_tables

    @property
    def scopes(self):
        return list(self.ordered_clusters)

    @property
    def variational(self):
        return self.cond_tables

    @property
    def n_vars(self) -> int:
        return len(self.cards)

    def with_table(self, k: int, table: LogTable) -> "DirectedApprox":
        tables = list(self.cond_tables)
        tables[k] = table
        return self._assemble(self.ordered_clusters, self.separators, self.residuals, tables,
                              self.cards, self.width_limit)

    def local_normalization_error(self) -> float:
        """Largest ``|log sum_r Q(r|s)|`` over clusters and separator states."""
        worst = 0.0
        for c, r, t in zip(self.ordered_clusters, self.residuals, self.cond_tables):
            axes = tuple(i for i, v in enumerate(c) if v in r)
            worst = max(worst, float(np.max(np.abs(logsumexp(t.values, axis=axes)))))
        return worst

    def log_joint(self) -> np.ndarray:
        return log_joint(self.cards, self.cond_tables)


def directed_mf_update(q: DirectedApprox, p: TargetModel, gamma: int) -> DirectedApprox:
    """Replace ``log Q(r_g | s_g)`` by the locally normalised conditional average.

    Averages condition on the full cluster state ``(r_g, s_g)``; the per
    separator log-sum over ``r_g`` plays the role of the local constant.
    """
    ds = dependency_sets(p, q, gamma)
    terms = [p.factors[a] for a in ds.d_set]
    terms += [LogTable(q.cond_tables[b].scope, -q.cond_tables[b].values) for b in ds.c_set]
    cluster = q.ordered_clusters[gamma]
    avg = average_terms(q.q_tree, terms, cluster, q.cards)
    new = _normalize_over(avg, cluster, q.residuals[gamma], q.cards)
    return q.with_table(gamma, LogTable(cluster, new))


def optimize_directed(q: DirectedApprox, p: TargetModel, schedule="sequential", tol=1e-9,
                      max_iters=1000, seed=None, order=None):
    return coordinate_descent(
        q, p, len(q.ordered_clusters), directed_mf_update,
        lambda a: [t.values for t in a.cond_tables],
        schedule=schedule, tol=tol, max_iters=max_iters, seed=seed, order=order,
    )


def directed_from_undirected(uq: UndirectedApprox, ordered_clusters) -> DirectedApprox:
    """Conditionals ``Q(c_g) / Q(s_g)`` read from an undirected approximation.

    Reproduces ``uq`` exactly when its clusters, in this order, form a
    junction tree whose separators are the ``s_g``.
    """
    clusters = tuple(as_scope(c) for c in ordered_clusters)
    seps, _ = derive_separators(clusters)
    tables = []
    for c, s in zip(clusters, seps):
        lc = uq.marginal(c).values
        ls = uq.marginal(s).values if s else np.zeros(())
        tables.append(LogTable(c, lc - expand(ls, s, c, uq.cards)))
    return DirectedApprox.create(uq.cards, clusters, init=tables, width_limit=uq.width_limit)


def undirected_from_directed(dq: DirectedApprox) -> UndirectedApprox:
    """Same distribution with the conditionals used as undirected potentials."""
    return UndirectedApprox.create(dq.cards, dq.ordered_clusters, init=list(dq.cond_tables),
                                   width_limit=dq.width_limit)
