"""Discrete variables, log-space potential tables and target distributions.

A target distribution is written as ``P(x) = exp(sum_a psi_a(d_a) - log_z)``
where each ``psi_a`` is a :class:`LogTable` over a small ascending scope of
variable ids.  Tables are dense numpy arrays whose axes follow the scope
order, so the flattened C-order layout has the last scope variable changing
fastest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

PROB_FLOOR = 1e-300
LOG_FLOOR = float(np.log(PROB_FLOOR))


def as_scope(ids: Iterable[int]) -> tuple[int, ...]:
    """Return ``ids`` as a sorted tuple, rejecting duplicates."""
    scope = tuple(sorted(int(i) for i in ids))
    if len(set(scope)) != len(scope):
        raise ValueError(f"duplicate variable ids in cluster {scope}")
    if scope and scope[0] < 0:
        raise ValueError(f"negative variable id in cluster {scope}")
    return scope


@dataclass(frozen=True)
class Variable:
    id: int
    name: str
    cardinality: int

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"variable id must be non-negative, got {self.id}")
        if self.cardinality < 2:
            raise ValueError(f"variable {self.name!r} needs at least 2 states")


@dataclass(frozen=True, eq=False)
class LogTable:
    """Real-valued table over the joint states of ``scope`` (natural log scale)."""

    scope: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        scope = tuple(int(i) for i in self.scope)
        if any(b <= a for a, b in zip(scope, scope[1:])):
            raise ValueError(f"scope must be strictly ascending, got {scope}")
        values = np.array(self.values, dtype=float)
        if values.ndim != len(scope):
            raise ValueError(
                f"table over {scope} needs {len(scope)} axes, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"table over {scope} has non-finite entries")
        values.flags.writeable = False
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_flat(cls, scope, flat, cards: Sequence[int]) -> "LogTable":
        scope = tuple(scope)
        shape = tuple(cards[v] for v in scope)
        flat = np.asarray(flat, dtype=float)
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(
                f"table over {scope} needs {int(np.prod(shape))} entries, got {flat.size}"
            )
        return cls(scope, flat.reshape(shape))

    @classmethod
    def zeros(cls, scope, cards: Sequence[int]) -> "LogTable":
        return cls(tuple(scope), np.zeros(tuple(cards[v] for v in scope)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def __eq__(self, other):
        if not isinstance(other, LogTable):
            return NotImplemented
        return self.scope == other.scope and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.scope, self.values.tobytes()))

    def __repr__(self):
        return f"LogTable(scope={self.scope}, shape={self.shape})"

    def shifted(self, delta: float) -> "LogTable":
        return LogTable(self.scope, self.values + delta)

    def max_normalized(self) -> tuple["LogTable", float]:
        """Shift so the largest entry is 0; return the table and the shift removed."""
        m = float(self.values.max()) if self.values.size else 0.0
        return LogTable(self.scope, self.values - m), m


def expand(values: np.ndarray, scope: Sequence[int], target: Sequence[int],
           cards: Sequence[int]) -> np.ndarray:
    """Broadcast a table over ``scope`` to the (ascending) superset ``target``."""
    pos = set(scope)
    missing = pos.difference(target)
    if missing:
        raise ValueError(f"scope {tuple(scope)} not contained in {tuple(target)}")
    shape = [cards[v] if v in pos else 1 for v in target]
    return np.broadcast_to(np.reshape(values, shape), [cards[v] for v in target])


def sum_tables(tables: Iterable[LogTable], scope: Sequence[int],
               cards: Sequence[int]) -> np.ndarray:
    """Pointwise sum of log tables, expanded over ``scope``."""
    out = np.zeros([cards[v] for v in scope])
    for t in tables:
        out = out + expand(t.values, t.scope, scope, cards)
    return out


def marginalize(values: np.ndarray, scope: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Log-sum-exp out every axis of ``scope`` not in ``keep``."""
    keep = set(keep)
    axes = tuple(i for i, v in enumerate(scope) if v not in keep)
    if not axes:
        return np.asarray(values)
    return logsumexp(values, axis=axes)


def slice_table(table: LogTable, evidence: Mapping[int, int]) -> LogTable:
    """Fix the observed variables in ``table`` and drop their axes."""
    index = tuple(evidence.get(v, slice(None)) for v in table.scope)
    kept = tuple(v for v in table.scope if v not in evidence)
    return LogTable(kept, table.values[index])


@dataclass(frozen=True)
class TargetModel:
    """``P(x) = exp(sum of factor tables - log_z)`` over discrete variables.

    ``origin`` maps each variable id to its id in the model the variables were
    taken from (set by :func:`absorb_evidence`); identity otherwise.
    """

    variables: tuple[Variable, ...]
    factors: tuple[LogTable, ...]
    log_z: float | None = None
    origin: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.origin is None:
            object.__setattr__(self, "origin", tuple(range(len(self.variables))))
        self.validate()

    def validate(self) -> None:
        n = len(self.variables)
        for k, v in enumerate(self.variables):
            if v.id != k:
                raise ValueError(f"variable ids must be dense 0..{n - 1}; got {v.id} at {k}")
        cards = self.cards
        covered = set()
        for a, f in enumerate(self.factors):
            for v in f.scope:
                if v >= n:
                    raise ValueError(f"factor {a} references unknown variable {v}")
            expected = tuple(cards[v] for v in f.scope)
            if f.shape != expected:
                raise ValueError(f"factor {a} has shape {f.shape}, expected {expected}")
            covered.update(f.scope)
        if len(covered) != n:
            missing = sorted(set(range(n)) - covered)
            raise ValueError(f"variables {missing} are not covered by any factor")
        if len(self.origin) != n:
            raise ValueError("origin map length differs from variable count")

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def cards(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def n_states(self) -> int:
        return int(np.prod(self.cards, dtype=np.int64)) if self.variables else 1

    def with_log_z(self, log_z: float | None) -> "TargetModel":
        return TargetModel(self.variables, self.factors, log_z, self.origin)


def make_variables(cards: Sequence[int], names: Sequence[str] | None = None) -> tuple[Variable, ...]:
    names = names or [f"x{i}" for i in range(len(cards))]
    if len(names) != len(cards):
        raise ValueError("names and cardinalities differ in length")
    return tuple(Variable(i, str(nm), int(c)) for i, (nm, c) in enumerate(zip(names, cards)))


def target_from_tables(cards: Sequence[int], factors: Sequence[LogTable],
                       names=None, log_z=None) -> TargetModel:
    """Build a model, giving isolated variables a unary zero factor."""
    factors = list(factors)
    covered = {v for f in factors for v in f.scope}
    for v in range(len(cards)):
        if v not in covered:
            factors.append(LogTable.zeros((v,), cards))
    return TargetModel(make_variables(cards, names), tuple(factors), log_z)


def build_boltzmann(weights, biases, encoding: str = "01", names=None) -> TargetModel:
    """Boltzmann machine ``exp(sum_{i<j} w_ij x_i x_j + sum_k h_k x_k)``.

    ``encoding`` is ``"01"`` (state s has value s) or ``"pm1"`` (state 0 is -1,
    state 1 is +1).
    """
    w = np.asarray(weights, dtype=float)
    h = np.asarray(biases, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"weights must be a square matrix, got shape {w.shape}")
    n = w.shape[0]
    if h.shape != (n,):
        raise ValueError(f"biases must have length {n}, got shape {h.shape}")
    if not np.array_equal(w, w.T):
        raise ValueError("weights must be symmetric")
    if np.any(np.diag(w) != 0):
        raise ValueError("weights must have a zero diagonal")
    vals = encoding_values(encoding)
    cards = [2] * n
    factors = []
    for i in range(n):
        for j in range(i + 1, n):
            if w[i, j] != 0:
                factors.append(LogTable((i, j), w[i, j] * np.outer(vals, vals)))
    for k in range(n):
        factors.append(LogTable((k,), h[k] * vals))
    return TargetModel(make_variables(cards, names), tuple(factors), None)


def encoding_values(encoding: str) -> np.ndarray:
    if encoding in ("01", "0/1", "{0,1}"):
        return np.array([0.0, 1.0])
    if encoding in ("pm1", "+-1", "{-1,+1}"):
        return np.array([-1.0, 1.0])
    raise ValueError(f"unknown encoding {encoding!r}")


def pair_coupling(values: np.ndarray, encoding: str = "01") -> float:
    """Interaction strength of a binary pair table in Boltzmann units.

    Inverse of the pairwise term of :func:`build_boltzmann`: terms that depend
    on one variable only are ignored.
    """
    v = np.asarray(values, dtype=float)
    contrast = v[1, 1] + v[0, 0] - v[0, 1] - v[1, 0]
    a = encoding_values(encoding)
    return float(contrast / ((a[1] - a[0]) ** 2))


def bayesian_network_to_target(cpts, names=None, atol: float = 1e-12) -> TargetModel:
    """Turn conditional probability tables into a target model with ``log_z = 0``.

    ``cpts`` is a sequence of ``(child, parents, table)``; ``table`` has shape
    ``(*parent_cards, child_card)`` with the axes in the given parent order, so
    every row over the last axis is a distribution.
    """
    cpts = [(int(c), tuple(int(p) for p in ps), np.asarray(t, dtype=float)) for c, ps, t in cpts]
    n = len(cpts)
    children = sorted(c for c, _, _ in cpts)
    if children != list(range(n)):
        raise ValueError("each variable 0..n-1 needs exactly one CPT")
    by_child = {c: (ps, t) for c, ps, t in cpts}
    cards = [by_child[c][1].shape[-1] for c in range(n)]
    _check_acyclic({c: ps for c, (ps, _) in by_child.items()})
    factors = []
    for c in range(n):
        ps, t = by_child[c]
        expected = tuple(cards[p] for p in ps) + (cards[c],)
        if t.shape != expected:
            raise ValueError(f"CPT of variable {c} has shape {t.shape}, expected {expected}")
        if np.any(t < 0):
            raise ValueError(f"CPT of variable {c} has negative entries")
        if not np.allclose(t.sum(axis=-1), 1.0, rtol=0, atol=atol):
            raise ValueError(f"CPT of variable {c} has a row that does not sum to 1")
        axes = ps + (c,)
        order = np.argsort(axes)
        scope = tuple(axes[i] for i in order)
        logv = np.log(np.maximum(np.transpose(t, order), PROB_FLOOR))
        factors.append(LogTable(scope, logv))
    return TargetModel(make_variables(cards, names), tuple(factors), 0.0)


def _check_acyclic(parents: Mapping[int, tuple[int, ...]]) -> None:
    state = {}

    def visit(v, stack):
        if state.get(v) == "done":
            return
        if state.get(v) == "open":
            raise ValueError(f"cyclic parent structure through variable {v}")
        state[v] = "open"
        for p in parents.get(v, ()):
            if p not in parents:
                raise ValueError(f"unknown parent {p} of variable {v}")
            visit(p, stack)
        state[v] = "done"

    for v in parents:
        visit(v, [])


def absorb_evidence(model: TargetModel, evidence: Mapping[int, int]) -> TargetModel:
    """Condition on observed states by slicing every factor.

    Observed variables are removed and the rest renumbered densely; the new
    model's ``origin`` points back into ``model``'s ids.
    """
    evidence = {int(k): int(s) for k, s in evidence.items()}
    if not evidence:
        return model
    for v, s in evidence.items():
        if not 0 <= v < model.n_vars:
            raise ValueError(f"evidence on unknown variable {v}")
        if not 0 <= s < model.cards[v]:
            raise ValueError(f"state {s} out of range for variable {v}")
    kept = [v for v in range(model.n_vars) if v not in evidence]
    renumber = {old: new for new, old in enumerate(kept)}
    factors = []
    for f in model.factors:
        sl = slice_table(f, evidence)
        factors.append(LogTable(tuple(renumber[v] for v in sl.scope), sl.values))
    variables = tuple(
        Variable(renumber[v], model.variables[v].name, model.variables[v].cardinality)
        for v in kept
    )
    origin = tuple(model.origin[v] for v in kept)
    return TargetModel(variables, tuple(factors), None, origin)


def unnormalized_log_score(model: TargetModel, x: Sequence[int]) -> float:
    """``sum_a psi_a(d_a(x))`` for a full assignment ``x``."""
    x = tuple(int(s) for s in x)
    if len(x) != model.n_vars:
        raise ValueError(f"assignment has {len(x)} states, model has {model.n_vars} variables")
    for v, s in enumerate(x):
        if not 0 <= s < model.cards[v]:
            raise ValueError(f"state {s} out of range for variable {v}")
    return float(sum(f.values[tuple(x[v] for v in f.scope)] for f in model.factors))


def log_joint(n_cards: Sequence[int], factors: Iterable[LogTable]) -> np.ndarray:
    """Dense array of summed factor tables over all variables (enumeration)."""
    scope = tuple(range(len(n_cards)))
    return sum_tables(factors, scope, n_cards)


def assignments(cards: Sequence[int]):
    return itertools.product(*(range(c) for c in cards))
