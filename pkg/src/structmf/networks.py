"""Reference networks and seeded random model generators."""

from __future__ import annotations

import numpy as np

from .model import LogTable, TargetModel, bayesian_network_to_target, build_boltzmann, target_from_tables

ASIA_NAMES = ("asia", "tub", "smoke", "lung", "bronc", "either", "xray", "dysp")


def _cpt_binary(p_true):
    """Rows ``(1 - p, p)`` for a binary child; state 0 = no, 1 = yes."""
    p = np.asarray(p_true, dtype=float)
    return np.stack([1.0 - p, p], axis=-1)


def asia_cpts():
    """Chest clinic network with its standard published CPTs; state 1 = yes."""
    asia, tub, smoke, lung, bronc, either, xray, dysp = range(8)
    either_table = np.array([[0.0, 1.0], [1.0, 1.0]])  # either = tub OR lung
    return [
        (asia, (), _cpt_binary(0.01)),
        (tub, (asia,), _cpt_binary([0.01, 0.05])),
        (smoke, (), _cpt_binary(0.5)),
        (lung, (smoke,), _cpt_binary([0.01, 0.1])),
        (bronc, (smoke,), _cpt_binary([0.3, 0.6])),
        (either, (tub, lung), _cpt_binary(either_table)),
        (xray, (either,), _cpt_binary([0.05, 0.98])),
        (dysp, (bronc, either), _cpt_binary([[0.1, 0.7], [0.8, 0.9]])),
    ]


def asia() -> TargetModel:
    return bayesian_network_to_target(asia_cpts(), names=ASIA_NAMES)


# a spanning tree of pair clusters over the ASIA variables
ASIA_TREE_CLUSTERS = ((0, 1), (1, 5), (3, 5), (2, 3), (2, 4), (5, 6), (4, 7))


def fork_network(rng: np.random.Generator, cards=(2, 2, 2)) -> TargetModel:
    """``P(A) P(B|A) P(C|A)`` with random CPTs drawn away from 0 and 1."""
    a, b, c = cards

    def rows(shape):
        t = rng.uniform(0.1, 1.0, size=shape)
        return t / t.sum(axis=-1, keepdims=True)

    cpts = [(0, (), rows((a,))), (1, (0,), rows((a, b))), (2, (0,), rows((a, c)))]
    return bayesian_network_to_target(cpts, names=("A", "B", "C"))


def triangle(w12: float, w13: float = 0.5, w23: float = 0.3) -> TargetModel:
    """Three +-1 spins with pairwise couplings only."""
    w = np.array([[0.0, w12, w13], [w12, 0.0, w23], [w13, w23, 0.0]])
    return build_boltzmann(w, np.zeros(3), encoding="pm1")


def random_boltzmann(n: int, rng: np.random.Generator, scale: float = 1.0,
                     encoding: str = "01", density: float = 1.0) -> TargetModel:
    w = np.triu(rng.uniform(-scale, scale, size=(n, n)), 1)
    w *= np.triu(rng.uniform(size=(n, n)) < density, 1)
    w = w + w.T
    h = rng.uniform(-scale, scale, size=n)
    return build_boltzmann(w, h, encoding=encoding)


def random_pairwise(n: int, rng: np.random.Generator, edges=None, cards=None,
                    scale: float = 1.0) -> TargetModel:
    """Random unary + pairwise log tables on the given (or a random) edge set."""
    cards = list(cards) if cards is not None else [2] * n
    if edges is None:
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.uniform() < 0.5]
    factors = [LogTable((i,), rng.normal(0, scale, size=cards[i])) for i in range(n)]
    for i, j in edges:
        i, j = min(i, j), max(i, j)
        factors.append(LogTable((i, j), rng.normal(0, scale, size=(cards[i], cards[j]))))
    return target_from_tables(cards, factors)


def random_tree_edges(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Edges of a uniformly attached random tree on ``n`` nodes."""
    perm = rng.permutation(n)
    return [tuple(sorted((int(perm[k]), int(perm[rng.integers(0, k)])))) for k in range(1, n)]
