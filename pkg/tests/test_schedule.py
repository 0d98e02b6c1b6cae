import numpy as np
import pytest
from hypothesis import given, strategies as st

from catflow.errors import ConfigError, DomainError, FormatError
from catflow.schedule import (GammaTable, ScheduleSpec, TimePairDist, alpha, alpha_inverse,
                              decode_error_curve, make_schedule, margin_samples,
                              sample_time_pair, sample_time_pretrain, tabulate_error_decoding)

# gamma_{1/2} for V=2: the decode error is P(N(0, 2) > a / (1 - a)), so
# e(a) = e(0) / 2 = 1/4 at a / (1 - a) = sqrt(2) * Phi^{-1}(3/4).
GAMMA_HALF_V2 = 0.48819589140187536


def test_linear_identity():
    assert alpha(make_schedule("linear"), 0.3) == (0.3, 1.0)


def test_mixture_zero_weight_is_linear():
    spec = make_schedule("mixture", 0.0, vocab_size=4)
    assert alpha(spec, 0.7) == (0.7, 1.0)


def test_mixture_endpoint(mixture):
    assert alpha(mixture, 1.0)[0] == 1.0


def test_domain_and_config_errors(mixture):
    with pytest.raises(DomainError):
        alpha(mixture, 1.5)
    with pytest.raises(DomainError):
        alpha(mixture, -0.1)
    with pytest.raises(ConfigError):
        alpha(ScheduleSpec("error_decoding"), 0.5)
    with pytest.raises(ConfigError):
        ScheduleSpec("mixture", lam=1.5)


@pytest.mark.parametrize("kind,lam", [("linear", 0.0), ("error_decoding", 1.0),
                                      ("mixture", 0.25), ("mixture", 0.75)])
def test_monotone_with_exact_endpoints(kind, lam):
    spec = make_schedule(kind, lam, vocab_size=4)
    t = np.linspace(0, 1, 1000)
    a, adot = alpha(spec, t)
    assert abs(a[0]) < 1e-12 and abs(a[-1] - 1) < 1e-12
    assert np.all(np.diff(a) > 0)
    assert np.all(adot[1:-1] > 0)


def test_derivative_matches_values(mixture):
    t = np.linspace(0.01, 0.99, 200)
    h = 1e-6
    fd = (alpha(mixture, t + h)[0] - alpha(mixture, t - h)[0]) / (2 * h)
    np.testing.assert_allclose(alpha(mixture, t)[1], fd, rtol=1e-4, atol=1e-6)


def test_mixture_extremes_match_table():
    table = tabulate_error_decoding(4, 64, 20_000, 1)
    t = np.linspace(0, 1, 101)
    full = ScheduleSpec("mixture", 1.0, table)
    none = ScheduleSpec("mixture", 0.0, table)
    np.testing.assert_array_equal(alpha(full, t)[0], ScheduleSpec("error_decoding", 0, table)(t)[0])
    np.testing.assert_allclose(alpha(full, table.t)[0], table.gamma, atol=1e-15)
    np.testing.assert_array_equal(alpha(none, t)[0], t)


@pytest.mark.parametrize("V", [2, 4, 8])
def test_initial_error_is_chance(V):
    diffs = margin_samples(V, 200_000, 0)
    e0 = decode_error_curve(diffs, np.array([0.0]))[0]
    assert abs(e0 - (V - 1) / V) < 4 * np.sqrt(e0 * (1 - e0) / diffs.size)


def test_gamma_endpoints():
    table = tabulate_error_decoding(4, 16, 10_000, 0)
    assert table.gamma[0] == 0.0 and table.gamma[-1] == 1.0


def test_gamma_half_v2_against_closed_form():
    table = tabulate_error_decoding(2, 64, 1_000_000, 0)
    assert abs(table.value(0.5) - GAMMA_HALF_V2) < 2e-3


def test_error_is_linear_in_time_on_held_out_draws():
    V = 4
    table = tabulate_error_decoding(V, 64, 100_000, 0)
    held = margin_samples(V, 100_000, 99)
    t = np.linspace(0.05, 0.95, 10)
    err = decode_error_curve(held, table.value(t))
    e0 = decode_error_curve(held, np.array([0.0]))[0]
    target = (1 - t) * e0
    se = np.sqrt(err * (1 - err) / held.size)
    # interpolation between the 64 grid levels adds a small bias on top of MC noise
    assert np.all(np.abs(err - target) < 3 * se + 2e-3)


def test_tabulation_errors():
    with pytest.raises(DomainError):
        tabulate_error_decoding(1)
    with pytest.raises(ConfigError):
        tabulate_error_decoding(4, grid_points=4)
    with pytest.raises(ConfigError):
        tabulate_error_decoding(4, mc_samples=100)


def test_gamma_table_round_trip(tmp_path):
    table = tabulate_error_decoding(3, 32, 10_000, 0)
    table.save(tmp_path / "g.txt")
    assert GammaTable.load(tmp_path / "g.txt") == table
    spec = make_schedule("mixture", 0.5, gamma_path=tmp_path / "g.txt")
    assert spec.gamma_table == table


def test_gamma_table_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("0.0 0.0\n0.5\n1.0 1.0\n")
    with pytest.raises(FormatError, match=":2:"):
        GammaTable.load(bad)
    bad.write_text("0.0 0.0\n0.5 0.7\n1.0 0.6\n")
    with pytest.raises(ConfigError):
        GammaTable.load(bad)


def test_alpha_inverse(mixture):
    t = np.linspace(0, 1, 50)
    np.testing.assert_allclose(alpha_inverse(mixture, alpha(mixture, t)[0]), t, atol=1e-4)


def test_pretrain_time_sampler():
    first = sample_time_pretrain(np.random.default_rng(0))
    assert first == sample_time_pretrain(np.random.default_rng(0))
    draws = sample_time_pretrain(np.random.default_rng(1), 100_000)
    assert draws.min() >= 0 and draws.max() < 1
    assert abs(draws.mean() - 0.5) < 0.005


def test_gap_cap_doubles():
    dist = TimePairDist()
    s, t = sample_time_pair(dist, 0, np.random.default_rng(0), 10_000)
    assert np.all(t - s <= 0.01 + 1e-15)
    s, t = sample_time_pair(dist, 500, np.random.default_rng(0), 10_000)
    assert np.all(t - s <= 0.02 + 1e-15) and (t - s).max() > 0.01
    assert dist.cap(10**6) == 1.0


@pytest.mark.parametrize("kind", ["gap_uniform_doubling", "gap_logit_normal"])
def test_pairs_are_ordered(kind):
    dist = TimePairDist(kind=kind, gap_start=1e-2, doubling_period=1)
    rng = np.random.default_rng(2)
    for step in (0, 3, 50):
        s, t = sample_time_pair(dist, step, rng, 250_000)
        assert np.all(s < t) and s.min() >= 0 and t.max() <= 1


@given(st.integers(0, 10_000), st.integers(0, 2**32 - 1))
def test_pair_contract_property(step, seed):
    dist = TimePairDist(doubling_period=500)
    s, t = sample_time_pair(dist, step, np.random.default_rng(seed))
    assert 0 <= s < t <= 1
    assert t - s <= dist.cap(step) + 1e-15


def test_pair_dist_validation():
    with pytest.raises(ConfigError):
        TimePairDist(kind="uniform")
    with pytest.raises(DomainError):
        sample_time_pair(TimePairDist(), -1, 0)
