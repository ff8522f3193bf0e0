import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structmf.hybrid import (
    HybridApprox,
    HybridChainModel,
    SigmoidNode,
    bound_value,
    crop_model,
    crop_series,
    hybrid_fit,
    hybrid_optimal_q,
    hybrid_quadrature_oracle,
    lambda_xi,
    log_sigmoid,
    optimize_xi,
    quadratic_sigmoid_bound,
    sigmoid_bound_energy,
    xi_correction_terms,
    xi_fixed_point,
)
from structmf.meanfield import UndirectedApprox

# 40-digit mpmath evaluations
LAMBDA_2 = -0.0951992694944706110149322853256
CROP_GHK_AT_5 = (-5.006715348489118068616417, 0.993307149075715144440638, -0.0986614298151430288881276)
CROP_P_R0 = 0.99244209606416308381
CROP_MODES = (10.0066487940292, 20.0000003059021)
# fixed points of the bound-optimal Q with every moment taken by adaptive
# quadrature of P(t) P(x|t) exp(bound)
CROP_CONDITIONAL = dict(xi=(5.1048488215132908, 15.033295486782037),
                        q_t=(0.6921945263608182, 0.3078054736391818),
                        means=(10.014749138282866, 20.001072031494784),
                        variances=(0.91177257059688476, 0.9678110988061151))
CROP_SINGLE = dict(xi=(5.2401146685756734, 5.2401146685756734),
                   q_t=(0.99264756181028698, 0.0073524381897130225),
                   means=(10.025530932541296, 19.162859900798199),
                   variances=(0.91373289682569026, 0.91373289682569026))


def factorized_tree(probs):
    """Calibrated tree of a product of Bernoulli marginals ``P(x_k = 1) = probs[k]``."""
    init = [np.log(np.array([1 - p, p])) for p in probs]
    return UndirectedApprox.create([2] * len(probs), [(k,) for k in range(len(probs))],
                                   init=init).q_tree


def enum_softplus(probs, node):
    total = 0.0
    for x in itertools.product((0, 1), repeat=len(probs)):
        pr = np.prod([p if s else 1 - p for p, s in zip(probs, x)])
        z = node.bias + sum(w * s for w, s in zip(node.weights, x))
        total += pr * np.logaddexp(0.0, z)
    return total


def test_sigmoid_node_validation():
    with pytest.raises(ValueError):
        SigmoidNode((0, 1), (1.0,), 0.0)


def test_sigmoid_bound_holds_by_enumeration(rng):
    probs = rng.uniform(0.05, 0.95, size=3)
    node = SigmoidNode((0, 1, 2), tuple(rng.normal(0, 2, size=3)), float(rng.normal()))
    tree = factorized_tree(probs)
    assert sigmoid_bound_energy(tree, node, 0.5) - enum_softplus(probs, node) >= -1e-12
    with pytest.raises(ValueError):
        sigmoid_bound_energy(tree, node, 1.5)


def test_sigmoid_bound_tight_for_point_mass():
    node = SigmoidNode((0, 1), (1.3, -0.4), 0.2)
    init = [np.array([-800.0, 0.0]), np.array([0.0, -800.0])]
    tree = UndirectedApprox.create([2, 2], [(0,), (1,)], init=init).q_tree
    for xi in (0.0, 0.3, 1.0):
        assert sigmoid_bound_energy(tree, node, xi) == pytest.approx(np.logaddexp(0, 1.5), abs=1e-12)
    xi = optimize_xi(tree, node)
    assert 0.0 <= xi <= 1.0


def test_zero_weights_bound_is_constant():
    node = SigmoidNode((0,), (0.0,), 1.7)
    tree = factorized_tree([0.3])
    for xi in (0.0, 0.25, 0.9):
        assert sigmoid_bound_energy(tree, node, xi) == pytest.approx(np.logaddexp(0, 1.7), abs=1e-12)
    # flat objective: the smallest xi wins the tie
    assert optimize_xi(tree, node) == 0.0


def test_symmetric_input_optimum_is_half():
    node = SigmoidNode((0,), (4.0,), -2.0)   # z = -2 or +2 with equal mass
    tree = factorized_tree([0.5])
    # the objective is flat to rounding within ~sqrt(eps) of its minimiser, so
    # the location is only resolvable to about 1e-8
    assert optimize_xi(tree, node) == pytest.approx(0.5, abs=1e-6)


def test_optimize_xi_beats_grid(rng):
    probs = rng.uniform(0.1, 0.9, size=3)
    node = SigmoidNode((0, 1, 2), tuple(rng.normal(0, 2, size=3)), 0.3)
    tree = factorized_tree(probs)
    best = sigmoid_bound_energy(tree, node, optimize_xi(tree, node))
    grid = min(sigmoid_bound_energy(tree, node, x) for x in np.linspace(0, 1, 1001))
    assert best <= grid + 1e-10


def test_lambda_values():
    assert lambda_xi(0.0) == -0.125
    assert lambda_xi(1e-6) == pytest.approx(-0.125, abs=1e-12)
    assert lambda_xi(2.0) == pytest.approx(LAMBDA_2, abs=1e-16)
    assert lambda_xi(-3.0) == lambda_xi(3.0)
    xs = np.linspace(0.1, 30, 50)
    assert np.all(np.diff(lambda_xi(xs)) > 0) and np.all(lambda_xi(xs) < 0)


def test_quadratic_bound_tightness():
    assert quadratic_sigmoid_bound(0.0, 0.0) == pytest.approx(-math.log(2), abs=1e-15)
    for xi in (0.5, 3.0, -7.0):
        assert quadratic_sigmoid_bound(xi, xi) == pytest.approx(float(log_sigmoid(xi)), abs=1e-12)
        assert quadratic_sigmoid_bound(-xi, xi) == pytest.approx(float(log_sigmoid(-xi)), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_quadratic_bound_below_log_sigmoid(x, xi):
    assert quadratic_sigmoid_bound(x, xi) <= float(log_sigmoid(x)) + 1e-12


def test_correction_terms():
    g, h, k = xi_correction_terms(0.0, 1, 2.0, 0.0)
    assert (g, h, k) == (pytest.approx(-math.log(2)), pytest.approx(1.0), pytest.approx(-1.0))
    g, h, k = xi_correction_terms(1.3, 0, 0.0, 2.0)
    assert h == 0.0 and k == 0.0
    assert g <= float(log_sigmoid(-2.0)) + 1e-12
    np.testing.assert_allclose(xi_correction_terms(5.0, 0, -1.0, 5.0), CROP_GHK_AT_5, atol=1e-14)


def test_chain_model_validation():
    with pytest.raises(ValueError):
        HybridChainModel.from_moments((0.5, 0.6), (0, 1), (1, 1), 1, 0, 1)
    with pytest.raises(ValueError):
        HybridChainModel.from_moments((0.5, 0.5), (0, 1), (1, -1), 1, 0, 1)
    with pytest.raises(ValueError):
        HybridChainModel((1.0,), ((0.0, 0.0, -1.0),), 1.0, 0.0, 1)


def test_zero_coupling_gives_prior():
    model = HybridChainModel.from_moments((0.4, 0.6), (-1.0, 2.0), (1.0, 4.0), 0.0, 0.7, 1)
    q = hybrid_optimal_q(model, 0.3)
    np.testing.assert_allclose(q.q_t, model.p_t, atol=1e-14)
    np.testing.assert_allclose(q.means, model.means, atol=1e-14)
    np.testing.assert_allclose(q.variances, model.variances, atol=1e-14)
    assert xi_fixed_point(q, 0.0, 0.7) == pytest.approx((0.7, 0.7))
    fit = hybrid_fit(model)
    assert fit.converged and fit.iterations == 1
    oracle = hybrid_quadrature_oracle(model, n=20001)
    np.testing.assert_allclose(oracle.p_t_given_r, model.p_t, atol=1e-10)


def test_no_curvature_correction_keeps_prior_variance():
    model = crop_model()
    q = hybrid_optimal_q(model, 2.0, curvature_correction=False)
    np.testing.assert_allclose(q.variances, model.variances, atol=1e-14)


def test_point_mass_at_root_gives_zero_xi():
    q = HybridApprox((1.0,), (2.5,), (0.0,), (1.0,))
    assert xi_fixed_point(q, 2.0, -5.0) == (0.0,)


def test_saturated_sigmoid_quadrature():
    model = HybridChainModel.from_moments((0.5, 0.5), (0.0, 1.0), (1.0, 1.0), 0.0, 50.0, 1)
    assert hybrid_quadrature_oracle(model, n=20001).p_r == pytest.approx(1.0, abs=1e-10)


def test_crop_quadrature_oracle():
    res = hybrid_quadrature_oracle(crop_model())
    assert res.p_r == pytest.approx(CROP_P_R0, abs=1e-9)
    assert res.p_t_given_r.sum() == pytest.approx(1.0, abs=1e-10)
    # two modes, one near each prior mean
    peaks = [i for i in range(1, len(res.x) - 1)
             if res.joint[i] > res.joint[i - 1] and res.joint[i] >= res.joint[i + 1]]
    assert len(peaks) == 2
    np.testing.assert_allclose(res.x[peaks], CROP_MODES, atol=2e-3)


def test_one_step_xi_matches_moment_formula():
    model = crop_model()
    q = hybrid_optimal_q(model, (4.0, 12.0))
    expected = [math.sqrt(m * m + v - 10 * m + 25) for m, v in zip(q.means, q.variances)]
    np.testing.assert_allclose(xi_fixed_point(q, -1.0, 5.0), expected, atol=1e-10)


@pytest.mark.parametrize("conditional,ref", [(True, CROP_CONDITIONAL), (False, CROP_SINGLE)])
def test_crop_fit_matches_quadrature_fixed_point(conditional, ref):
    fit = hybrid_fit(crop_model(), conditional=conditional)
    assert fit.converged
    np.testing.assert_allclose(fit.q.xi, ref["xi"], atol=1e-8)
    np.testing.assert_allclose(fit.q.q_t, ref["q_t"], atol=1e-8)
    np.testing.assert_allclose(fit.q.means, ref["means"], atol=1e-8)
    np.testing.assert_allclose(fit.q.variances, ref["variances"], atol=1e-8)
    again = xi_fixed_point(fit.q, -1.0, 5.0, conditional)
    assert max(abs(a - b) for a, b in zip(again, fit.q.xi)) < 1e-9


def test_bound_trace_and_optimality(rng):
    model = crop_model()
    fit = hybrid_fit(model)
    # the bound upper bounds -log P(r): L >= -log P(r = 0)
    assert fit.bound_trace[-1] >= -math.log(CROP_P_R0) - 1e-9
    q = fit.q
    base = bound_value(model, q)
    for _ in range(100):
        t = float(rng.uniform(-0.05, 0.05))
        q_t = (q.q_t[0] - t, q.q_t[1] + t) if 0 < q.q_t[0] - t < 1 else q.q_t
        moved = HybridApprox(q_t, tuple(np.array(q.means) + rng.normal(0, 0.1, 2)),
                             tuple(np.array(q.variances) * np.exp(rng.normal(0, 0.1, 2))), q.xi)
        assert bound_value(model, moved) >= base - 1e-10


def test_conditional_curve_beats_single():
    model = crop_model()
    sd = np.sqrt(model.variances)
    x = np.linspace(np.min(model.means - 6 * sd), np.max(model.means + 6 * sd), 601)
    _, exact, single, cond, _, _ = crop_series(model, x)
    err_single = np.max(np.abs(single - exact))
    err_cond = np.max(np.abs(cond - exact))
    assert err_cond < err_single
    assert err_cond <= 0.1 * err_single
