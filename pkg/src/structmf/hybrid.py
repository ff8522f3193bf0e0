"""Variational bounds for sigmoid nodes and the discrete-Gaussian-discrete chain.

Two bounds live here:

* the log-partition bound for a sigmoid node with many parents,
  ``<log(1 + e^z)> <= xi <z> + log <e^{-xi z} + e^{(1-xi) z}>``, whose
  moment terms are exact under any tractable Q;
* the quadratic lower bound on ``log sigma`` that turns ``t -> x -> r`` with
  ``P(r=1|x) = sigma(w x + b)`` into a conditional Gaussian times a table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_expit, logsumexp

from .inference import CompiledTree, calibrate, compile_junction_tree, marginal
from .model import LogTable

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SigmoidNode:
    """``z = sum_k w_k x_k + h`` over binary parents (state index is the value)."""

    parent_ids: tuple[int, ...]
    weights: tuple[float, ...]
    bias: float

    def __post_init__(self):
        object.__setattr__(self, "parent_ids", tuple(int(i) for i in self.parent_ids))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != len(self.parent_ids):
            raise ValueError("weights length must match parent count")


def _log_mgf(tree: CompiledTree, node: SigmoidNode, a: float) -> float:
    """``log <exp(a z)>`` by absorbing ``exp(a w_k x_k)`` as soft evidence."""
    if a == 0.0:
        return 0.0
    if not tree.calibrated:
        tree = calibrate(tree)
    evidence = []
    for k, w in zip(node.parent_ids, node.weights):
        states = np.arange(tree.cards[k], dtype=float)
        evidence.append(LogTable((k,), a * w * states))
    weighted = compile_junction_tree(tree.cliques, tree.factors + tuple(evidence), tree.cards,
                                     tree.width_limit)
    return a * node.bias + weighted.log_z - tree.log_z


def mean_input(tree: CompiledTree, node: SigmoidNode) -> float:
    total = node.bias
    for k, w in zip(node.parent_ids, node.weights):
        pk = np.exp(marginal(tree, (k,)).values)
        total += w * float(np.dot(pk, np.arange(len(pk))))
    return total


def sigmoid_bound_energy(q_tree: CompiledTree, node: SigmoidNode, xi: float) -> float:
    """Upper bound ``xi <z> + log <e^{-xi z} + e^{(1-xi) z}>`` on ``<log(1+e^z)>``."""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    lo = _log_mgf(q_tree, node, -xi)
    hi = _log_mgf(q_tree, node, 1.0 - xi)
    return xi * mean_input(q_tree, node) + float(np.logaddexp(lo, hi))


def optimize_xi(q_tree: CompiledTree, node: SigmoidNode, tol: float = 1e-10) -> float:
    """Golden-section minimiser of the bound over ``xi`` in [0, 1].

    The bound is convex in ``xi``; flat stretches resolve to the smaller end.
    """
    if not q_tree.calibrated:
        q_tree = calibrate(q_tree)
    f = lambda x: sigmoid_bound_energy(q_tree, node, x)  # noqa: E731
    a, b = 0.0, 1.0
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    best = 0.5 * (a + b)
    fbest = f(best)
    for edge in (0.0, 1.0):
        fe = f(edge)
        if fe < fbest or (fe == fbest and edge < best):
            best, fbest = edge, fe
    return best


def lambda_xi(xi):
    """``-tanh(xi/2) / (4 xi)``, continued to ``-1/8`` at zero."""
    xi = np.asarray(xi, dtype=float)
    small = np.abs(xi) < 1e-4
    safe = np.where(small, 1.0, xi)
    series = -0.125 + xi ** 2 / 96.0 - xi ** 4 / 1920.0
    out = np.where(small, series, -np.tanh(safe / 2.0) / (4.0 * safe))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    return log_expit(x)


def quadratic_sigmoid_bound(x, xi):
    """Quadratic lower bound on ``log sigma(x)``, tight at ``x = +-xi``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    lam = lambda_xi(xi)
    out = x / 2.0 + lam * x ** 2 + log_expit(xi) - xi / 2.0 - xi ** 2 * lam
    return float(out) if np.ndim(out) == 0 else out


def xi_correction_terms(xi: float, r: int, w: float, b: float):
    """``(g, h, K)`` so the bound on ``log P(r|x)`` reads ``g + x h + x^2 K / 2``."""
    lam = lambda_xi(xi)
    sgn = 2 * int(r) - 1
    g = float(log_expit(xi)) + 0.5 * sgn * b - 0.5 * xi + lam * (b * b - xi * xi)
    h = 0.5 * sgn * w + 2.0 * lam * b * w
    k = 2.0 * lam * w * w
    return g, h, k


@dataclass(frozen=True)
class HybridChainModel:
    """``P(t) P(x|t) P(r|x)`` with ``P(x|t) = exp(g_t + x h_t + x^2 K_t / 2)``."""

    p_t: tuple[float, ...]
    gauss: tuple[tuple[float, float, float], ...]
    w: float
    b: float
    observed_r: int

    def __post_init__(self):
        p = np.asarray(self.p_t, dtype=float)
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("p_t must be positive and sum to 1")
        if len(self.gauss) != len(p):
            raise ValueError("need one Gaussian per state of t")
        for g, h, k in self.gauss:
            if not k < 0:
                raise ValueError("Gaussian curvature K_t must be negative")
            if abs(g - (h * h / (2 * k) - 0.5 * math.log(2 * math.pi / -k))) > 1e-10:
                raise ValueError("Gaussian factor is not normalised")
        if self.observed_r not in (0, 1):
            raise ValueError("observed_r must be 0 or 1")

    @classmethod
    def from_moments(cls, p_t, means, variances, w, b, observed_r):
        gauss = []
        for mu, var in zip(means, variances):
            if var <= 0:
                raise ValueError("variances must be positive")
            k = -1.0 / var
            h = mu / var
            g = -mu * mu / (2 * var) - 0.5 * math.log(2 * math.pi * var)
            gauss.append((g, h, k))
        return cls(tuple(float(v) for v in p_t), tuple(gauss), float(w), float(b), int(observed_r))

    @property
    def means(self) -> np.ndarray:
        return np.array([h / -k for _, h, k in self.gauss])

    @property
    def variances(self) -> np.ndarray:
        return np.array([1.0 / -k for _, _, k in self.gauss])

    def log_p_r_given_x(self, x):
        z = self.w * np.asarray(x, dtype=float) + self.b
        return log_expit(z if self.observed_r == 1 else -z)


@dataclass(frozen=True)
class HybridApprox:
    q_t: tuple[float, ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]
    xi: tuple[float, ...]

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for q, mu, var in zip(self.q_t, self.means, self.variances):
            out = out + q * np.exp(-(x - mu) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)
        return out


def _per_t(model: HybridChainModel, xi) -> list[float]:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.size == 1:
        xi = np.repeat(xi, len(model.p_t))
    if xi.size != len(model.p_t):
        raise ValueError("xi must be a scalar or one value per state of t")
    return [float(v) for v in xi]


def _combined(model: HybridChainModel, xis, curvature_correction=True):
    out = []
    for (g_t, h_t, k_t), xi in zip(model.gauss, xis):
        g, h, k = xi_correction_terms(xi, model.observed_r, model.w, model.b)
        if not curvature_correction:
            k = 0.0
        out.append((g_t + g, h_t + h, k_t + k))
    return out


def hybrid_log_weights(model: HybridChainModel, xi, curvature_correction=True) -> np.ndarray:
    """``log`` of the integrated bound for each ``t`` (unnormalised ``Q(t)``)."""
    xis = _per_t(model, xi)
    logs = []
    for p, (g, h, k) in zip(model.p_t, _combined(model, xis, curvature_correction)):
        if not k < 0:
            raise ValueError("combined curvature must be negative")
        prec = -k
        mean = h / prec
        logs.append(math.log(p) + g + 0.5 * math.log(2 * math.pi / prec) + mean * mean * prec / 2)
    return np.array(logs)


def hybrid_optimal_q(model: HybridChainModel, xi, curvature_correction: bool = True) -> HybridApprox:
    """Closed-form minimiser of the bound for fixed ``xi`` (scalar or per ``t``)."""
    xis = _per_t(model, xi)
    combined = _combined(model, xis, curvature_correction)
    means, variances = [], []
    for g, h, k in combined:
        if not k < 0:
            raise ValueError("combined curvature must be negative")
        means.append(h / -k)
        variances.append(1.0 / -k)
    logw = hybrid_log_weights(model, xis, curvature_correction)
    q_t = np.exp(logw - logsumexp(logw))
    return HybridApprox(tuple(float(v) for v in q_t), tuple(means), tuple(variances), tuple(xis))


def xi_fixed_point(q: HybridApprox, w: float, b: float, conditional: bool = True):
    """``xi_t = sqrt(<(w x + b)^2>_t)``; pooled over ``t`` when not conditional."""
    mu = np.asarray(q.means)
    var = np.asarray(q.variances)
    second = w * w * (mu * mu + var) + 2 * w * b * mu + b * b
    if conditional:
        return tuple(float(v) for v in np.sqrt(np.maximum(second, 0.0)))
    pooled = float(np.sqrt(max(float(np.dot(q.q_t, second)), 0.0)))
    return tuple(pooled for _ in q.q_t)


def bound_value(model: HybridChainModel, q: HybridApprox, xi=None) -> float:
    """The upper bound ``L(Q, xi)``; equals ``-log`` of the bounded evidence at optimum."""
    xis = _per_t(model, q.xi if xi is None else xi)
    total = 0.0
    for qt, mu, var, p, (g, h, k) in zip(q.q_t, q.means, q.variances, model.p_t,
                                         _combined(model, xis)):
        if qt <= 0:
            continue
        neg_entropy_x = -0.5 * math.log(2 * math.pi * math.e * var)
        expected = g + h * mu + k * (mu * mu + var) / 2
        total += qt * (math.log(qt) + neg_entropy_x - math.log(p) - expected)
    return total


def hybrid_approx_joint(model: HybridChainModel, xi, x) -> np.ndarray:
    """Bounded ``P(r_obs, x)``: ``sum_t P(t) P(x|t) exp(bound_t(x))``."""
    x = np.asarray(x, dtype=float)
    xis = _per_t(model, xi)
    out = np.zeros_like(x)
    for p, (g_t, h_t, k_t), xi_t in zip(model.p_t, model.gauss, xis):
        g, h, k = xi_correction_terms(xi_t, model.observed_r, model.w, model.b)
        out = out + p * np.exp(g_t + g + x * (h_t + h) + x * x * (k_t + k) / 2)
    return out


@dataclass
class HybridFit:
    q: HybridApprox
    bound_trace: list[float]
    iterations: int
    converged: bool


def hybrid_fit(model: HybridChainModel, conditional: bool = True, tol: float = 1e-10,
               max_iters: int = 500) -> HybridFit:
    """Alternate the closed-form Q and the ``xi`` fixed point.

    Starts from ``xi`` matched to the prior.  If the alternation has not
    settled after ``max_iters`` rounds the best-bound iterate is returned
    with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    prior = HybridApprox(tuple(model.p_t), tuple(model.means), tuple(model.variances),
                         tuple(0.0 for _ in model.p_t))
    xi = xi_fixed_point(prior, model.w, model.b, conditional)
    trace: list[float] = []
    best = None
    for it in range(1, max_iters + 1):
        q = hybrid_optimal_q(model, xi)
        trace.append(bound_value(model, q))
        if best is None or trace[-1] <= best[1]:
            best = (q, trace[-1])
        new = xi_fixed_point(q, model.w, model.b, conditional)
        step = max(abs(a - c) for a, c in zip(new, xi))
        xi = new
        if step < tol:
            return HybridFit(q, trace, it, True)
    return HybridFit(best[0], trace, max_iters, False)


@dataclass(frozen=True)
class QuadratureResult:
    x: np.ndarray
    joint: np.ndarray
    p_r: float
    p_t_given_r: np.ndarray
    mean_x_given_r: float
    var_x_given_r: float


def quadrature_grid(model: HybridChainModel, n: int = 200_000) -> np.ndarray:
    sd = np.sqrt(model.variances)
    return np.linspace(float(np.min(model.means - 12 * sd)), float(np.max(model.means + 12 * sd)), n)


def hybrid_quadrature_oracle(model: HybridChainModel, n: int = 200_000) -> QuadratureResult:
    """Exact ``P(r_obs, x)`` on a fixed grid plus trapezoid posterior summaries."""
    x = quadrature_grid(model, n)
    lik = np.exp(model.log_p_r_given_x(x))
    per_t = []
    for p, (g, h, k) in zip(model.p_t, model.gauss):
        per_t.append(p * np.exp(g + h * x + k * x * x / 2) * lik)
    per_t = np.array(per_t)
    joint = per_t.sum(axis=0)
    mass_t = np.trapezoid(per_t, x, axis=1)
    p_r = float(mass_t.sum())
    mean = float(np.trapezoid(joint * x, x) / p_r)
    var = float(np.trapezoid(joint * (x - mean) ** 2, x) / p_r)
    return QuadratureResult(x, joint, p_r, mass_t / p_r, mean, var)


def crop_model() -> HybridChainModel:
    """Crop-style example: ``P(t=1)=0.3``, means (10, 20), unit sd, ``w=-1``, ``b=5``, r=0."""
    return HybridChainModel.from_moments((0.7, 0.3), (10.0, 20.0), (1.0, 1.0), -1.0, 5.0, 0)


def crop_series(model: HybridChainModel, x: Sequence[float]):
    """Columns ``x, exact, single-xi, conditional-xi`` of ``P(r_obs, x)``."""
    x = np.asarray(x, dtype=float)
    exact = np.zeros_like(x)
    lik = np.exp(model.log_p_r_given_x(x))
    for p, (g, h, k) in zip(model.p_t, model.gauss):
        exact = exact + p * np.exp(g + h * x + k * x * x / 2) * lik
    single = hybrid_fit(model, conditional=False)
    cond = hybrid_fit(model, conditional=True)
    return (x, exact, hybrid_approx_joint(model, single.q.xi, x),
            hybrid_approx_joint(model, cond.q.xi, x), single, cond)
