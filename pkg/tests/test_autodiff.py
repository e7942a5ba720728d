import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from rsnnfit.autodiff import (Tape, backward, finite_difference_check, pseudo_derivative,
                              reduce, weighted_sum)
from rsnnfit.losses import LossSpec, loss_combined, loss_mle, loss_nc_mse, loss_psth
from rsnnfit.network import ClampSpec, NetworkParams, init_params, make_noise, rollout
from rsnnfit.oracle import random_instance


def test_pseudo_derivative_values():
    assert pseudo_derivative(0.0, 0.3) == 0.3
    assert pseudo_derivative(1.0, 0.3) == 0.0
    assert pseudo_derivative(-1.0, 0.3) == 0.0
    assert pseudo_derivative(0.5, 0.3) == pytest.approx(0.15, abs=1e-16)
    assert pseudo_derivative(3.0, 0.3) == 0.0


@settings(max_examples=50, deadline=None)
@given(u=st.floats(-5, 5), gamma=st.floats(0, 2))
def test_pseudo_derivative_bounded(u, gamma):
    g = pseudo_derivative(u, gamma)
    assert 0.0 <= g <= gamma


def _clamped_setup(n=4, T=20, d=3, seed=1):
    p = init_params(n, n, d, seed=seed)
    rng = np.random.default_rng(seed)
    p = p.replace(W=p.W * 3, b=rng.normal(0.2, 0.2, n))
    stim = rng.normal(0, 0.2, (T, n))
    data = rollout(p, stim, trials=6, seed=seed + 1).spikes
    return p, stim, data


def test_clamped_mle_matches_finite_differences():
    p, stim, data = _clamped_setup()

    def loss(q, noise, tape):
        return loss_mle(rollout(q, stim, clamp=ClampSpec.full(data), tape=tape), data)

    rep = finite_difference_check(loss, p, None, 1e-5)
    assert rep.smooth
    assert rep.max_rel_error < 1e-4


def test_step_must_be_positive():
    p, stim, data = _clamped_setup(n=2, T=3, d=1)
    with pytest.raises(ValueError):
        finite_difference_check(lambda *a: None, p, None, 0.0)


def test_large_step_flags_discontinuities():
    p, stim, data = _clamped_setup(n=3, T=10, d=2)
    noise = make_noise(0, 8, 10, 3)

    def loss(q, noise, tape):
        return loss_psth(rollout(q, stim, noise=noise, tape=tape), data)

    rep = finite_difference_check(loss, p, noise, 0.5, subset=[("b", 0), ("b", 1)])
    assert not rep.smooth


def test_free_psth_smooth_part_matches_finite_differences():
    # with gamma = 0 the engine differentiates the probability estimator only,
    # which is what central differences see between spike flips
    p, stim, data = _clamped_setup(n=3, T=10, d=2)
    p = p.replace(gamma=0.0)
    noise = make_noise(5, 8, 10, 3)

    def loss(q, noise, tape):
        return loss_psth(rollout(q, stim, noise=noise, tape=tape), data)

    rep = finite_difference_check(loss, p, noise, 1e-7)
    assert rep.smooth
    assert rep.max_rel_error < 1e-4


def test_zero_gamma_cuts_spike_paths():
    p, stim, data = _clamped_setup(n=3, T=12, d=2)
    p = p.replace(gamma=0.0)
    tape = Tape()
    rec = rollout(p, stim, trials=5, seed=3, tape=tape)
    g_free = backward(tape, loss_psth(rec, data))
    # same loss with the sampled spikes replayed as data: no path through spikes
    tape2 = Tape()
    rec2 = rollout(p, stim, clamp=ClampSpec.full(rec.spikes), tape=tape2)
    g_clamped = backward(tape2, loss_psth(rec2, data))
    assert np.allclose(g_free.dW, g_clamped.dW, rtol=0, atol=1e-14)
    assert np.allclose(g_free.db, g_clamped.db, rtol=0, atol=1e-14)


def test_hand_unrolled_two_steps():
    w, b, v_thr, gamma = 0.7, 0.35, 0.4, 0.3
    c = np.array([[0.1], [-0.05]])
    xi = np.array([[[0.2], [0.6]]])  # z0 = 1 because xi0 < sigma(u0)
    q = np.array([0.3, 0.6])  # data rates
    p = NetworkParams(W=np.full((1, 1, 1), w), b=np.array([b]), n_visible=1, v_thr=v_thr,
                      gamma=gamma)
    data = np.array([[[1], [0]], [[0], [1]], [[0], [1]], [[1], [1]], [[0], [0]],
                     [[0], [1]], [[0], [0]], [[1], [0]], [[0], [1]], [[1], [1]]])
    assert np.allclose(data.mean(0)[:, 0], [0.4, 0.6])
    q = np.array([0.4, 0.6])

    u0 = (b + c[0, 0] - v_thr) / v_thr
    s0 = expit(u0)
    z0 = float(xi[0, 0, 0] < s0)
    assert z0 == 1.0
    u1 = (w * z0 + b + c[1, 0] - v_thr) / v_thr
    s1 = expit(u1)
    # L = mean_t CE(q_t, s_t); dCE/du = s - q
    du1 = 0.5 * (s1 - q[1])
    du0 = 0.5 * (s0 - q[0]) + du1 * (w / v_thr) * gamma * max(0.0, 1 - abs(u0))
    dW = du1 * z0 / v_thr
    db = (du0 + du1) / v_thr

    tape = Tape()
    rec = rollout(p, c, noise=xi, tape=tape)
    g = backward(tape, loss_psth(rec, data))
    assert abs(g.dW[0, 0, 0] - dW) < 1e-12
    assert abs(g.db[0] - db) < 1e-12


def test_linearity_of_backward():
    p, stim, data = _clamped_setup(n=3, T=10, d=2)
    tape = Tape()
    rec = rollout(p, stim, trials=6, seed=4, tape=tape)
    l1, l2 = loss_psth(rec, data), loss_nc_mse(rec, data)
    g1 = backward(tape, l1)
    g2 = backward(tape, l2)
    g = backward(tape, weighted_sum(tape, [l1, l2], [2.0, -0.5]))
    assert np.allclose(g.dW, 2 * g1.dW - 0.5 * g2.dW, rtol=0, atol=1e-12)
    assert np.allclose(g.db, 2 * g1.db - 0.5 * g2.db, rtol=0, atol=1e-12)


def test_gradients_deterministic():
    p, stim, data = _clamped_setup(n=3, T=10, d=2)
    spec = LossSpec.parse("mle:0.4,psth:0.3,nc_mse:0.3")
    out = []
    for _ in range(2):
        tape = Tape()
        rolls = {"clamped": rollout(p, stim, clamp=ClampSpec.full(data), tape=tape),
                 "free": rollout(p, stim, trials=4, seed=9, tape=tape)}
        total, _ = loss_combined(spec, rolls, data)
        out.append(backward(tape, total))
    assert np.array_equal(out[0].dW, out[1].dW) and np.array_equal(out[0].db, out[1].db)


def test_doubling_weights_doubles_gradient():
    p, stim, data = _clamped_setup(n=3, T=10, d=2)
    grads = []
    for scale in (1.0, 2.0):
        spec = LossSpec({"mle": 0.5 * scale, "psth": 0.5 * scale})
        tape = Tape()
        rolls = {"clamped": rollout(p, stim, clamp=ClampSpec.full(data), tape=tape),
                 "free": rollout(p, stim, trials=4, seed=2, tape=tape)}
        total, _ = loss_combined(spec, rolls, data)
        grads.append((float(total), backward(tape, total)))
    assert grads[1][0] == pytest.approx(2 * grads[0][0], rel=1e-14)
    assert np.allclose(grads[1][1].dW, 2 * grads[0][1].dW, rtol=1e-13, atol=0)


def test_non_scalar_loss_rejected():
    p, stim, _ = _clamped_setup(n=2, T=3, d=1)
    tape = Tape()
    rec = rollout(p, stim, trials=2, seed=0, tape=tape)
    with pytest.raises(ValueError):
        backward(tape, rec.probs_node)


def test_non_finite_adjoint_is_an_error():
    p, stim, _ = _clamped_setup(n=2, T=3, d=1)
    tape = Tape()
    rec = rollout(p, stim, trials=2, seed=0, tape=tape)
    bad = reduce(tape, rec.probs_node, lambda x: 0.0, lambda x: np.full_like(x, np.nan))
    with pytest.raises(FloatingPointError):
        backward(tape, bad)


def test_tape_is_topological():
    p, stim = random_instance(0, 3, 2, 4, d_max=2)
    tape = Tape()
    rec = rollout(p, stim, clamp=ClampSpec.visible(np.ones((2, 4, 2), dtype=np.uint8)),
                  seed=1, tape=tape)
    for node in tape.nodes:
        assert all(i < node.index for i in node.inputs)
    assert rec.probs_node is tape.nodes[-1]


def test_clamped_visible_spikes_get_no_gradient():
    # hidden -> visible weight matters only through the hidden spike's pseudo-derivative
    p, stim = random_instance(4, 2, 1, 4)
    ref = np.ones((3, 4, 1), dtype=np.uint8)
    tape = Tape()
    rec = rollout(p, stim, clamp=ClampSpec.visible(ref), seed=0, tape=tape)
    spikes = tape.nodes_of_kind("spike")
    assert spikes, "hidden neurons are sampled"
    g = np.ones_like(spikes[0].value)
    gu = spikes[0].vjp(g)[0]
    assert np.all(gu[:, 0] == 0.0)
