import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from catflow.errors import CapacityError, ConfigError, SingularTimeError
from catflow.interpolant import embed_onehot
from catflow.oracle import (OracleDenoiser, OracleFlowMap, OracleSpec, enumerate_likelihood,
                            exact_drift, exact_posterior, mc_model_likelihood, reference_flow)
from catflow.schedule import alpha

# e^2 / (e^2 + 1): the V=2 posterior at alpha=1/2, x=(1, 0), uniform prior
POSTERIOR_V2 = 0.8807970779778824


def bayes_by_density(x, a, p):
    """Posterior from the Gaussian likelihood N(x; a e_k, (1-a)^2 I), no closed form used."""
    V = len(p)
    lik = np.array([multivariate_normal(a * np.eye(V)[k], (1 - a) ** 2 * np.eye(V)).pdf(x)
                    for k in range(V)])
    w = np.asarray(p) * lik
    return w / w.sum()


def test_posterior_examples():
    rng = np.random.default_rng(0)
    p = np.array([0.2, 0.5, 0.3])
    x = rng.standard_normal((5, 3))
    np.testing.assert_allclose(exact_posterior(x, 0.0, p), np.tile(p, (5, 1)), atol=1e-15)
    np.testing.assert_array_equal(exact_posterior(x, 0.6, [0, 1, 0]), np.tile([0, 1, 0], (5, 1)))
    post = exact_posterior(np.array([1.0, 0.0]), 0.5, [0.5, 0.5])
    np.testing.assert_allclose(post, [POSTERIOR_V2, 1 - POSTERIOR_V2], atol=1e-15)
    np.testing.assert_allclose(post, bayes_by_density([1.0, 0.0], 0.5, [0.5, 0.5]), atol=1e-12)
    with pytest.raises(SingularTimeError):
        exact_posterior(x, 1.0, p)


@given(st.floats(0, 0.95), st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_posterior_matches_density_bayes(a, shift, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4))
    x = rng.standard_normal(4) * 0.5 + a * np.eye(4)[rng.integers(4)]
    post = exact_posterior(x, a, p)
    assert abs(post.sum() - 1) < 1e-12
    np.testing.assert_allclose(exact_posterior(x + shift, a, p), post, atol=1e-9)
    np.testing.assert_allclose(post, bayes_by_density(x, a, p), atol=1e-8)


def test_drift_examples(linear):
    o = OracleSpec.iid([1.0, 0.0, 0.0])
    x = embed_onehot([[0]], 3)
    for t in (0.0, 0.3, 0.9):
        np.testing.assert_array_equal(exact_drift(x, t, linear, o), np.zeros((1, 1, 3)))
    o2 = OracleSpec.iid([0.5, 0.5])
    d = exact_drift(np.array([[1.0, 0.0]]), 0.5, linear, o2)
    np.testing.assert_allclose(d, [[-0.2384058440442351, 0.2384058440442351]], atol=1e-15)
    with pytest.raises(SingularTimeError):
        exact_drift(x, 1.0, linear, o)


def test_drift_uses_schedule_derivative(mixture):
    o = OracleSpec.iid([0.1, 0.2, 0.3, 0.4])
    x = np.random.default_rng(0).standard_normal((3, 1, 4))
    a, adot = alpha(mixture, 0.4)
    expected = adot * (exact_posterior(x, a, o.probs) - x) / (1 - a)
    np.testing.assert_allclose(exact_drift(x, 0.4, mixture, o), expected, atol=1e-14)


def test_markov_posterior_against_brute_force():
    o = OracleSpec.markov([0.6, 0.4], [[0.9, 0.1], [0.3, 0.7]], 2)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 2))
    a = 0.55
    flat = x.reshape(-1)
    weights = {}
    for seq in ([0, 0], [0, 1], [1, 0], [1, 1]):
        mean = a * embed_onehot(seq, 2).reshape(-1)
        weights[tuple(seq)] = (math.exp(o.log_prob(np.array(seq)))
                               * multivariate_normal(mean, (1 - a) ** 2 * np.eye(4)).pdf(flat))
    z = sum(weights.values())
    expected = np.zeros((2, 2))
    for seq, w in weights.items():
        for i, k in enumerate(seq):
            expected[i, k] += w / z
    np.testing.assert_allclose(o.posterior(x, np.array([a]))[0], expected, atol=1e-12)


def test_reference_flow_deterministic_data(linear):
    o = OracleSpec.iid([0.0, 1.0, 0.0, 0.0])
    x0 = np.random.default_rng(0).standard_normal((200, 1, 4))
    end = reference_flow(x0, linear, o, 64)
    assert np.all(np.argmax(end, axis=-1) == 1)


def test_reference_flow_marginal_uniform(linear):
    o = OracleSpec.iid([0.25] * 4)
    x0 = np.random.default_rng(0).standard_normal((100_000, 1, 4))
    tokens = np.argmax(reference_flow(x0, linear, o, 4096), axis=-1)
    freq = np.bincount(tokens.ravel(), minlength=4) / tokens.size
    assert 0.5 * np.abs(freq - 0.25).sum() < 0.01


def test_reference_flow_self_convergence(linear):
    o = OracleSpec.iid([0.5, 0.3, 0.2])
    x0 = np.random.default_rng(2).standard_normal((256, 1, 3))
    eps = 1e-3
    fine = reference_flow(x0, linear, o, 8192, eps=eps)
    coarse = reference_flow(x0, linear, o, 4096, eps=eps)
    # compare before the terminal jump, where the state is continuous in x0
    from catflow.oracle import integrate_levels
    a_end = 1 - eps
    pre_f = integrate_levels(x0, np.zeros(256), np.full(256, a_end), o, 8192, method="euler")
    pre_c = integrate_levels(x0, np.zeros(256), np.full(256, a_end), o, 4096, method="euler")
    assert np.abs(pre_f - pre_c).max() < 1e-3
    assert np.mean(np.argmax(fine, -1) == np.argmax(coarse, -1)) > 0.99


def test_enumerate_likelihood_examples():
    assert enumerate_likelihood(OracleSpec.iid([0.25] * 4, 3), [1, 2, 3]) == pytest.approx(
        -3 * math.log(4), abs=1e-14)
    det = OracleSpec.markov([1, 0], [[0, 1], [1, 0]], 4)
    assert enumerate_likelihood(det, [0, 1, 0, 1]) == 0.0
    assert enumerate_likelihood(det, [0, 0, 0, 1]) == -math.inf
    chain = OracleSpec.markov([1, 0], [[0.9, 0.1], [0.1, 0.9]], 3)
    assert enumerate_likelihood(chain, [0, 0, 1]) == pytest.approx(math.log(0.9 * 0.1), abs=1e-14)


def test_joint_and_marginals():
    o = OracleSpec.markov([0.3, 0.7], [[0.5, 0.5], [0.2, 0.8]], 3)
    joint = o.joint()
    assert joint.sum() == pytest.approx(1.0, abs=1e-14)
    states = o.states()
    marg = np.array([[joint[states[:, i] == k].sum() for k in range(2)] for i in range(3)])
    np.testing.assert_allclose(o.marginals(), marg, atol=1e-14)
    ent = -(joint * np.log(joint)).sum() / 3
    assert o.entropy_per_token() == pytest.approx(ent, abs=1e-13)
    with pytest.raises(CapacityError):
        OracleSpec.iid([0.5, 0.5], 21).states()


def test_sampling_matches_transitions():
    o = OracleSpec.markov([0.5, 0.5], [[0.8, 0.2], [0.4, 0.6]], 2)
    seqs = o.sample(100_000, np.random.default_rng(0))
    first = seqs[:, 0] == 0
    rate = np.mean(seqs[first, 1] == 0)
    assert abs(rate - 0.8) < 3 * math.sqrt(0.16 / first.sum())


def test_invalid_specs():
    with pytest.raises(ConfigError):
        OracleSpec.iid([0.5, 0.6])
    with pytest.raises(ConfigError):
        OracleSpec.markov([0.5, 0.5], [[1.0, 0.0], [0.5, 0.6]], 2)


def test_text_round_trip():
    o = OracleSpec.markov([0.3, 0.7], [[0.5, 0.5], [0.2, 0.8]], 3)
    back = OracleSpec.from_text(o.to_text())
    np.testing.assert_array_equal(back.trans, o.trans)
    np.testing.assert_array_equal(back.init, o.init)
    assert back.L == 3


def test_mc_likelihood(linear):
    det = OracleSpec.iid([1.0, 0.0])
    flow = lambda x0: reference_flow(x0, linear, det, 32)
    assert mc_model_likelihood(flow, [0], 2000, 0, V=2) == (1.0, 0.0)
    fair = OracleSpec.iid([0.5, 0.5])
    flow = lambda x0: reference_flow(x0, linear, fair, 256)
    est, se = mc_model_likelihood(flow, [1], 20_000, 1, V=2)
    assert abs(est - math.exp(enumerate_likelihood(fair, [1]))) < 3 * se
    assert (est, se) == mc_model_likelihood(flow, [1], 20_000, 1, V=2)
    with pytest.raises(ConfigError):
        mc_model_likelihood(flow, [1], 100, 1, V=2)


def test_tangent_condition_is_exact(mixture):
    o = OracleSpec.iid([0.1, 0.6, 0.3])
    fm = OracleFlowMap(o, mixture, n_steps=64)
    x = np.random.default_rng(0).standard_normal((6, 1, 3))
    s = np.linspace(0.1, 0.8, 6)
    a, adot = alpha(mixture, s)
    field = adot[:, None, None] * (fm(x, s, s) - x) / (1 - a[:, None, None])
    np.testing.assert_allclose(field, exact_drift(x, s, mixture, o), atol=1e-13)
    np.testing.assert_array_equal(OracleDenoiser(o, mixture)(x, s, s + 0.1),
                                  o.posterior(x, a))


def test_partial_denoiser_reproduces_flow_map(linear):
    o = OracleSpec.iid([0.2, 0.3, 0.5])
    fm = OracleFlowMap(o, linear, n_steps=128)
    x = np.random.default_rng(4).standard_normal((8, 1, 3)) * 0.3
    s, t = np.full(8, 0.2), np.full(8, 0.7)
    X = fm.flow_map(x, s, t)
    pi = fm(x, s, t)
    np.testing.assert_allclose(pi.sum(-1), 1, atol=1e-12)
    np.testing.assert_allclose(x + (0.5 / 0.8) * (pi - x), X, atol=1e-10)
