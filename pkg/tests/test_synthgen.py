import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsnnfit.losses import LossSpec
from rsnnfit.metrics import psth_correlation
from rsnnfit.synthgen import (ConnectivityReport, ExperimentPlan, RateSearchError,
                              StimulusRecipe, StudentPlan, TeacherConfig, generate_dataset,
                              lowpass_noise, make_teacher, run_identification, visible_rate)
from rsnnfit.trainer import TrainConfig


def _small(seed=0, **kw):
    kw.setdefault("stimulus", StimulusRecipe(60))
    return TeacherConfig(6, 4, 2, seed=seed, rate_trials=40, **kw)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_teacher_rate_in_band(seed):
    cfg = _small(seed)
    p, stim = make_teacher(cfg)
    assert p.n_total == 6 and p.n_visible == 4 and stim.shape == (60, 6)
    assert cfg.rate_band[0] <= visible_rate(p, stim, 100, seed + 1) <= cfg.rate_band[1]


def test_teacher_deterministic():
    a, sa = make_teacher(_small(3))
    b, sb = make_teacher(_small(3))
    assert a.equals(b) and np.array_equal(sa, sb)
    c, _ = make_teacher(_small(4))
    assert not a.equals(c)


def test_hidden_units_get_no_stimulus_by_default():
    _, stim = make_teacher(_small(0))
    assert np.all(stim[:, 4:] == 0) and np.any(stim[:, :4] != 0)
    _, stim = make_teacher(_small(0, stimulus=StimulusRecipe(60, drive_hidden=True)))
    assert np.any(stim[:, 4:] != 0)


def test_hidden_scales_act_on_their_blocks():
    base, _ = make_teacher(_small(1))
    scaled, _ = make_teacher(_small(1, hidden_out_scale=2.0, hidden_in_scale=3.0))
    assert np.allclose(scaled.W[:4, 4:], 2.0 * base.W[:4, 4:])
    assert np.allclose(scaled.W[4:, :4], 3.0 * base.W[4:, :4])
    assert np.array_equal(scaled.W[:4, :4], base.W[:4, :4])


def test_unreachable_rate_band():
    with pytest.raises(RateSearchError, match="outside"):
        make_teacher(_small(0, rate_band=(0.149, 0.151)), max_iter=1)


def test_config_validation():
    with pytest.raises(ValueError):
        TeacherConfig(4, 5, 1)
    with pytest.raises(ValueError):
        StimulusRecipe(0)


def test_lowpass_noise_statistics():
    x = lowpass_noise(np.random.default_rng(0), 20000, 2, 5.0)
    assert abs(x.std() - 1) < 0.1
    lag1 = np.corrcoef(x[1:, 0], x[:-1, 0])[0, 1]
    assert lag1 == pytest.approx(np.exp(-1 / 5), abs=0.03)


def test_zero_amplitude_gives_flat_psth():
    cfg = _small(2, stimulus=StimulusRecipe(80, amplitude=0.0))
    p, stim = make_teacher(cfg)
    assert np.all(stim == 0)
    data = generate_dataset(p, stim, 2000, 5, 5, seed=0)
    psth = data.train.mean(axis=0)
    # stationary after the coupling transient; compare late bins with each other
    late = psth[10:]
    assert np.abs(late - late.mean(axis=0)).max() < 5 * np.sqrt(0.25 / 2000)


def test_dataset_shapes_and_determinism():
    p, stim = make_teacher(_small(0))
    a = generate_dataset(p, stim, 7, 3, 5, seed=1)
    b = generate_dataset(p, stim, 7, 3, 5, seed=1)
    assert a.train.shape == (7, 60, 4) and a.validation.shape == (3, 60, 4)
    assert a.test.shape == (5, 60, 4) and a.stimulus.shape == (60, 4)
    for name in ("train", "validation", "test"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.train[:3], a.validation)
    with pytest.raises(ValueError):
        generate_dataset(p, stim, 0, 3, 5, seed=1)


def test_teacher_psth_self_consistency():
    cfg = TeacherConfig(10, 10, 2, seed=0, stimulus=StimulusRecipe(500))
    p, stim = make_teacher(cfg)
    a = generate_dataset(p, stim, 1, 1, 480, seed=1).test
    b = generate_dataset(p, stim, 1, 1, 480, seed=2).test
    assert np.nanmean(psth_correlation(a, b)) > 0.9


def test_connectivity_report():
    p, _ = make_teacher(_small(0))
    rep = ConnectivityReport.of(p, p)
    assert rep.r2 == 1.0 and rep.teacher.shape == (4, 4) and np.all(rep.residuals == 0)


def test_teacher_initialized_student_recovers_connectivity():
    frozen = TrainConfig(LossSpec.parse("mle"), learning_rate=0.0, batch_size=5, max_epochs=1)
    plan = ExperimentPlan(_small(0), (
        StudentPlan("oracle", LossSpec.parse("mle"), frozen, init="teacher"),
        StudentPlan("random", LossSpec.parse("mle"), frozen, n_hidden=2)),
        k_train=10, k_val=5, k_test=20, seed=0)
    res = run_identification(plan)
    rows = {s.name: s.row() for s in res.students}
    assert rows["oracle"]["conn_r2"] == 1.0
    assert rows["random"]["conn_r2"] < 0.5
    assert rows["oracle"]["error"] == ""


def test_failed_student_is_reported_not_raised():
    bad = TrainConfig(LossSpec.parse("mle"), batch_size=50, max_epochs=1)
    plan = ExperimentPlan(_small(0), (StudentPlan("big", LossSpec.parse("mle"), bad),),
                          k_train=10, k_val=5, k_test=5, seed=0)
    row = run_identification(plan).students[0].row()
    assert "batch_size" in row["error"]
