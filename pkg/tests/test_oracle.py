import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from rsnnfit.network import ClampSpec, NetworkParams, rollout
from rsnnfit.oracle import (check_elbo_bound, check_sampler, check_unbiased, enumerate_outcomes,
                            enumerate_recursive, exact_conditional_loglik,
                            exact_expected_statistic, exact_marginal_loglik, outcome_tensor,
                            pattern_index, random_instance, write_table_csv)


def test_single_bin_table():
    p = NetworkParams(W=np.zeros((1, 1, 1)), b=np.array([0.5]), n_visible=1)
    dist = enumerate_outcomes(p, np.zeros((1, 1)))
    q = expit((0.5 - 0.4) / 0.4)
    assert np.allclose(dist.table, [1 - q, q], rtol=0, atol=1e-15)


def test_history_free_table_factorizes():
    p = NetworkParams(W=np.zeros((2, 2, 1)), b=np.array([0.3, 0.6]), n_visible=2)
    stim = np.random.default_rng(0).normal(0, 0.3, (3, 2))
    dist = enumerate_outcomes(p, stim)
    s = expit((p.b + stim - 0.4) / 0.4)
    z = dist.outcomes()
    want = np.prod(np.where(z == 1, s, 1 - s), axis=(1, 2))
    assert np.allclose(dist.table, want, rtol=1e-13, atol=0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 3), T=st.integers(1, 3),
       d=st.integers(1, 2))
def test_table_normalized_and_cross_checked(seed, n, T, d):
    p, stim = random_instance(seed, n, n, T, d_max=d)
    dist = enumerate_outcomes(p, stim)
    assert abs(dist.table.sum() - 1) < 1e-12
    assert np.allclose(dist.table, enumerate_recursive(p, stim), rtol=1e-12, atol=1e-15)


def test_enumeration_cap():
    p, stim = random_instance(0, 3, 3, 7)
    with pytest.raises(ValueError, match="capped"):
        enumerate_outcomes(p, stim)


def test_bit_order_is_time_major():
    z = np.zeros((1, 3, 2), dtype=np.uint8)
    z[0, 1, 0] = 1
    assert pattern_index(z)[0] == 1 << (1 * 2 + 0)
    assert np.array_equal(outcome_tensor([4], 3, 2), z)


def test_marginal_without_hidden_is_table_entry():
    p, stim = random_instance(1, 2, 2, 3)
    dist = enumerate_outcomes(p, stim)
    z = outcome_tensor([37], 3, 2)[0]
    assert exact_marginal_loglik(dist, z) == pytest.approx(np.log(dist.table[37]), abs=1e-14)


def test_visible_marginals_normalize():
    p, stim = random_instance(2, 4, 2, 3)
    dist = enumerate_outcomes(p, stim)
    pats = outcome_tensor(np.arange(1 << 6), 3, 2)
    total = sum(np.exp(exact_marginal_loglik(dist, z)) for z in pats)
    assert total == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        exact_marginal_loglik(dist, np.zeros((3, 4)))


def test_conditional_reproduces_one_step_probabilities():
    p, stim = random_instance(3, 2, 2, 3, d_max=2)
    dist = enumerate_outcomes(p, stim)
    z = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.uint8)
    rec = rollout(p, stim, clamp=ClampSpec.full(z[None]))
    q = rec.probs[0, 2]
    want = np.log(np.where(z[2] == 1, q, 1 - q)).sum()
    assert exact_conditional_loglik(dist, z, 2, 0) == pytest.approx(want, abs=1e-12)


def test_history_free_expected_statistics():
    p = NetworkParams(W=np.zeros((2, 2, 1)), b=np.array([0.3, 0.6]), n_visible=2)
    stim = np.random.default_rng(0).normal(0, 0.3, (3, 2))
    dist = enumerate_outcomes(p, stim)
    s = expit((p.b + stim - 0.4) / 0.4)
    assert np.allclose(exact_expected_statistic(dist, "psth"), s, atol=1e-14)
    pi = exact_expected_statistic(dist, "coincidence")
    assert pi[0, 1] == pytest.approx((s[:, 0] * s[:, 1]).mean(), abs=1e-14)
    cov = exact_expected_statistic(dist, "nc_covariance")
    assert cov[0, 1] == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(np.diag(cov), (s * (1 - s)).mean(axis=0), atol=1e-14)
    with pytest.raises(ValueError):
        exact_expected_statistic(dist, "rate")


def test_nc_covariance_finite_trial_factor():
    p, stim = random_instance(4, 2, 2, 3)
    dist = enumerate_outcomes(p, stim)
    base = exact_expected_statistic(dist, "nc_covariance")
    assert np.allclose(exact_expected_statistic(dist, "nc_covariance", trials=4), 0.75 * base)


def test_table_csv(tmp_path):
    p, stim = random_instance(0, 2, 2, 2)
    dist = enumerate_outcomes(p, stim)
    path = tmp_path / "t.csv"
    write_table_csv(path, dist)
    rows = path.read_text().splitlines()
    assert rows[0] == "pattern_hex,probability" and len(rows) == 17
    idx, prob = rows[6].split(",")
    assert int(idx, 16) == 5 and float(prob) == dist.table[5]


def test_sampler_check_and_corruption_hook():
    ok = check_sampler(samples=2 * 10 ** 5, tolerance=0.02)
    assert ok.passed and ok.line().startswith("[PASS]")
    bad = check_sampler(samples=2 * 10 ** 5, tolerance=0.02, corrupt=True)
    assert not bad.passed and bad.line().startswith("[FAIL]")


def test_small_elbo_and_unbiased_checks():
    assert check_elbo_bound(instances=4, samples=2000).passed
    assert check_unbiased(samples=20000).passed
