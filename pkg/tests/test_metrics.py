import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsnnfit.metrics import (STAT_REPORT_SCHEMA, StatReport, evaluate, heldout_nll,
                             matrix_r2, multistep_loglik, nc_r2, noise_correlation,
                             noise_covariances, one_step_loglik, psth_correlation)
from rsnnfit.network import NetworkParams, rollout
from rsnnfit.oracle import enumerate_outcomes, exact_conditional_loglik, random_instance


def _as_trials(psth_series):
    """One-trial tensor whose PSTH is the given [T, n] series."""
    return np.asarray(psth_series, dtype=float)[None]


def test_psth_correlation_identity_and_reversal():
    data = np.random.default_rng(0).integers(0, 2, (20, 30, 3))
    assert np.allclose(psth_correlation(data, data), 1.0)
    flipped = 1.0 - 0.5 * data.mean(axis=0)
    assert np.allclose(psth_correlation(_as_trials(flipped), data), -1.0)


def test_psth_correlation_hand_series():
    a = np.array([0.2, 0.2, 0.35])
    b = np.array([0.1, 0.2, 0.3])
    am, bm = a - a.mean(), b - b.mean()
    want = (am @ bm) / math.sqrt((am @ am) * (bm @ bm))
    got = psth_correlation(_as_trials(a[:, None]), _as_trials(b[:, None]))
    assert got[0] == pytest.approx(want, abs=1e-14)


def test_psth_correlation_constant_is_undefined():
    data = np.random.default_rng(0).integers(0, 2, (5, 6, 2))
    model = np.full((3, 6, 2), 0.4)
    assert np.all(np.isnan(psth_correlation(model, data)))


def test_psth_correlation_ignores_hidden_columns():
    data = np.random.default_rng(1).integers(0, 2, (5, 6, 2))
    model = np.random.default_rng(2).uniform(size=(4, 6, 3))
    assert np.array_equal(psth_correlation(model, data), psth_correlation(model[:, :, :2], data))
    with pytest.raises(ValueError):
        psth_correlation(model[:, :5], data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.01, 10), shift=st.floats(-5, 5))
def test_psth_correlation_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 2, (8, 10, 2))
    model = rng.uniform(size=(4, 10, 2))
    a = psth_correlation(model, data)
    b = psth_correlation(scale * model + shift, data)
    assert np.allclose(a, b, atol=1e-9, equal_nan=True)


def test_noise_covariance_brute_force():
    z = np.array([[[1, 0], [1, 1]], [[0, 0], [1, 0]], [[1, 1], [0, 1]]], dtype=float)
    K, T, n = z.shape
    zbar_t = z.mean(axis=0)
    zbar = z.mean(axis=(0, 1))
    tot = np.zeros((n, n))
    noi = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for k in range(K):
                for t in range(T):
                    tot[i, j] += (z[k, t, i] - zbar[i]) * (z[k, t, j] - zbar[j])
                    noi[i, j] += (z[k, t, i] - zbar_t[t, i]) * (z[k, t, j] - zbar_t[t, j])
    total, noise = noise_covariances(z)
    assert np.allclose(total, tot / (K * T), atol=1e-15)
    assert np.allclose(noise, noi / (K * T), atol=1e-15)
    M = noise_correlation(z)
    assert M[0, 1] == pytest.approx(noi[0, 1] / math.sqrt(tot[0, 0] * tot[1, 1]), abs=1e-14)


def test_duplicated_neuron():
    a = np.random.default_rng(0).integers(0, 2, (6, 8, 1))
    M = noise_correlation(np.concatenate([a, a], axis=2))
    assert M[0, 1] == M[1, 0] == M[0, 0]


def test_identical_trials_have_no_noise():
    z = np.repeat(np.random.default_rng(0).integers(0, 2, (1, 8, 3)), 4, axis=0)
    assert np.all(noise_covariances(z)[1] == 0)


def test_noise_correlation_needs_two_trials_and_flags_silence():
    with pytest.raises(ValueError):
        noise_correlation(np.zeros((1, 4, 2)))
    z = np.random.default_rng(0).integers(0, 2, (4, 5, 2))
    z[:, :, 1] = 0
    M = noise_correlation(z)
    assert np.isnan(M[0, 1]) and np.isfinite(M[0, 0])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_noise_correlation_permutations(seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, (6, 7, 4))
    M = noise_correlation(z)
    perm = rng.permutation(4)
    assert np.allclose(noise_correlation(z[rng.permutation(6)]), M, equal_nan=True)
    assert np.allclose(noise_correlation(z[:, :, perm]), M[np.ix_(perm, perm)], equal_nan=True)
    assert np.allclose(M, M.T, equal_nan=True)
    finite = M[np.isfinite(M)]
    assert np.all(np.abs(finite) <= 1 + 1e-12)


def test_nc_r2_reference_values():
    M = np.array([[1, 0.2, -0.1], [0.2, 1, 0.4], [-0.1, 0.4, 1]])
    assert nc_r2(M, M) == 1.0
    off = ~np.eye(3, dtype=bool)
    flat = np.where(off, M[off].mean(), 7.0)
    assert nc_r2(flat, M) == pytest.approx(0.0, abs=1e-14)
    assert nc_r2(-5 * M, M) < -0.9


def test_nc_r2_excludes_nan_and_diagonal():
    M = np.array([[1, 0.2, -0.1], [0.2, 1, 0.4], [-0.1, 0.4, 1]])
    model = M.copy()
    model[0, 0] = 99.0
    model[0, 2] = model[2, 0] = np.nan
    assert nc_r2(model, M) == 1.0
    assert math.isnan(nc_r2(np.full((2, 2), 0.1), np.full((2, 2), 0.3)))
    with pytest.raises(ValueError):
        nc_r2(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_nc_r2_bounded_by_one(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 4, 4))
    assert nc_r2(a, b) <= 1.0
    assert nc_r2(b, b) == 1.0


def test_matrix_r2():
    a = np.arange(6.0).reshape(2, 3)
    assert matrix_r2(a, a) == 1.0
    assert matrix_r2(np.full_like(a, a.mean()), a) == 0.0
    assert math.isnan(matrix_r2(a, np.ones_like(a)))


# -- multi-step likelihood ------------------------------------------------------

def test_multistep_zero_lag_is_one_step_bitwise():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n, T = rng.integers(1, 4), rng.integers(2, 7)
        p, stim = random_instance(seed, n, n, T, d_max=2)
        data = rng.integers(0, 2, (rng.integers(1, 5), T, n)).astype(np.uint8)
        t = int(rng.integers(0, T))
        exact = one_step_loglik(p, stim, data, t)
        for M in (1, 7):
            assert multistep_loglik(p, stim, data, t, 0, M, seed=seed) == exact


def test_multistep_history_free_is_flat():
    p = NetworkParams(W=np.zeros((2, 2, 2)), b=np.array([0.3, 0.5]), n_visible=2)
    stim = np.random.default_rng(0).normal(0, 0.3, (8, 2))
    data = np.random.default_rng(1).integers(0, 2, (5, 8, 2)).astype(np.uint8)
    vals = [multistep_loglik(p, stim, data, 2, lag, 3, seed=lag) for lag in range(6)]
    ref = [one_step_loglik(p, stim, data, 2 + lag) for lag in range(6)]
    assert np.allclose(vals, ref, rtol=0, atol=1e-12)


def test_multistep_converges_to_exact_conditional():
    p, stim = random_instance(7, 2, 2, 4, weight_scale=1.0)
    dist = enumerate_outcomes(p, stim)
    data = np.array([[[1, 0], [0, 1], [1, 1], [0, 0]]], dtype=np.uint8)
    exact = exact_conditional_loglik(dist, data[0], 1, 2)
    est = multistep_loglik(p, stim, data, 1, 2, 200000, seed=3)
    assert est == pytest.approx(exact, abs=0.01)


def test_multistep_argument_errors():
    p, stim = random_instance(0, 2, 2, 4)
    data = np.zeros((2, 4, 2), dtype=np.uint8)
    for t, lag, M in ((3, 1, 1), (-1, 0, 1), (0, 0, 0)):
        with pytest.raises(ValueError):
            multistep_loglik(p, stim, data, t, lag, M, seed=0)


def test_one_step_needs_visible_model():
    p, stim = random_instance(0, 3, 2, 4)
    with pytest.raises(ValueError):
        one_step_loglik(p, stim, np.zeros((2, 4, 2), dtype=np.uint8), 1)


# -- reports -------------------------------------------------------------------

def test_evaluate_report_schema(tmp_path):
    p, stim = random_instance(2, 4, 3, 30, d_max=2)
    test = rollout(p, stim, trials=20, seed=9).spikes[:, :, :3]
    report = evaluate(p, stim, test, trials=25, seed=1, multistep=(5, 3, 4))
    d = report.to_dict()
    jsonschema.validate(d, STAT_REPORT_SCHEMA)
    assert len(d["multistep"]) == 4 and d["metadata"]["nll_kind"] == "elbo_estimate"
    paths = report.write(tmp_path / "report")
    assert [q.name for q in paths] == ["report.json", "report_psth.csv", "report_nc.csv",
                                       "report_multistep.csv"]
    json.loads(paths[0].read_text())
    assert len(paths[2].read_text().splitlines()) == 1 + 3 * 2


def test_report_flags_nan():
    r = StatReport(np.array([0.5, np.nan]), np.full((2, 2), np.nan), np.eye(2), math.nan)
    d = r.to_dict()
    jsonschema.validate(d, STAT_REPORT_SCHEMA)
    assert d["psth_corr"] == [0.5, None] and d["psth_corr_excluded"] == 1
    assert d["nc_r2"] is None and d["nc_excluded"] == 2


def test_evaluate_deterministic():
    p, stim = random_instance(2, 3, 3, 20)
    test = rollout(p, stim, trials=10, seed=9).spikes
    a = evaluate(p, stim, test, seed=4).to_dict()
    b = evaluate(p, stim, test, seed=4).to_dict()
    assert a == b


def test_heldout_nll_nonnegative():
    p, stim = random_instance(2, 3, 3, 20)
    test = rollout(p, stim, trials=10, seed=9).spikes
    assert heldout_nll(p, stim, test) > 0
