"""Evaluation statistics. Undefined values are NaN and are excluded from means."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import cross_entropy
from .network import ClampSpec, NetworkParams, pad_stimulus, rollout


def psth_correlation(model, data) -> np.ndarray:
    """Per-neuron Pearson correlation across time between model and data PSTHs.

    ``model`` may hold spikes or probabilities and may carry extra (hidden)
    neurons after the visible ones. NaN where either PSTH is constant.
    """
    model = np.asarray(model, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    if model.shape[1] != data.shape[1] or model.shape[2] < data.shape[2]:
        raise ValueError(f"model {model.shape} and data {data.shape} do not match")
    a = model[:, :, :data.shape[2]].mean(axis=0)
    b = data.mean(axis=0)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    num = (a * b).sum(axis=0)
    den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, num / den, np.nan)
    return np.clip(rho, -1.0, 1.0)


def noise_covariances(spikes):
    """Total and noise covariance matrices ``(M_total, M_noise)``."""
    z = np.asarray(spikes, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"spikes must be [K, T, n], got {z.shape}")
    K, T, n = z.shape
    if K < 2:
        raise ValueError("noise correlations need at least 2 trials")
    total = (z - z.mean(axis=(0, 1))).reshape(-1, n)
    noise = (z - z.mean(axis=0)).reshape(-1, n)
    return total.T @ total / (K * T), noise.T @ noise / (K * T)


def noise_correlation(spikes) -> np.ndarray:
    """Noise covariance normalized by total variances; NaN where a variance is zero."""
    total, noise = noise_covariances(spikes)
    var = np.diag(total)
    den = np.sqrt(np.outer(var, var))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, noise / den, np.nan)


def nc_r2(model, data) -> float:
    """Coefficient of determination over off-diagonal entries, NaN pairs excluded."""
    model = np.asarray(model, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    if model.shape != data.shape:
        raise ValueError(f"shape mismatch {model.shape} vs {data.shape}")
    keep = ~np.eye(data.shape[0], dtype=bool) & np.isfinite(model) & np.isfinite(data)
    d, m = data[keep], model[keep]
    if d.size == 0:
        return math.nan
    den = np.sum((d - d.mean()) ** 2)
    if den == 0:
        return math.nan
    return float(1.0 - np.sum((d - m) ** 2) / den)


def matrix_r2(model, target) -> float:
    """R^2 of every entry of ``model`` against ``target``."""
    model = np.asarray(model, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    den = np.sum((target - target.mean()) ** 2)
    if den == 0:
        return math.nan
    return float(1.0 - np.sum((target - model) ** 2) / den)


def bin_loglik(probs, spikes) -> np.ndarray:
    """Log-probability of each trial's spike row given firing probabilities, summed over neurons."""
    return -cross_entropy(np.asarray(spikes, dtype=np.float64), probs).sum(axis=-1)


def _log_mean_exp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).mean(axis=axis, keepdims=True))).squeeze(axis)


def one_step_loglik(p: NetworkParams, stimulus, data, t: int) -> float:
    """Mean over trials of ``log P(z^D_t | z^D_0 .. z^D_{t-1})`` for a fully visible model."""
    data = np.asarray(data, dtype=np.uint8)
    if p.n_hidden:
        raise ValueError("the one-step likelihood is only tractable without hidden neurons")
    rec = rollout(p, np.asarray(stimulus)[..., : t + 1, :],
                  clamp=ClampSpec.full(data[:, : t + 1]))
    return float(bin_loglik(rec.probs[:, t], data[:, t]).mean())


def multistep_loglik(p: NetworkParams, stimulus, data, t: int, lag: int, rollouts: int,
                     seed) -> float:
    """Monte-Carlo ``log P(z^D_{t+lag} | z^D_0 .. z^D_{t-1})`` averaged over data trials.

    Visible neurons are clamped to the data for bins ``< t``; everything else is
    sampled. The probability estimate is unbiased; its logarithm is biased
    downward (Jensen).
    """
    data = np.asarray(data, dtype=np.uint8)
    K, T, nv = data.shape
    if nv != p.n_visible:
        raise ValueError(f"data has {nv} neurons, model has {p.n_visible} visible")
    if t < 0 or lag < 0 or t + lag >= T:
        raise ValueError(f"need 0 <= t, 0 <= lag and t + lag < T={T}")
    if rollouts < 1:
        raise ValueError("need at least one rollout")
    stop = t + lag + 1
    ref = np.repeat(data[:, :stop], rollouts, axis=0)
    stim = np.asarray(stimulus, dtype=np.float64)[..., :stop, :]
    if stim.ndim == 3:
        stim = np.repeat(stim, rollouts, axis=0)
    rec = rollout(p, stim, clamp=ClampSpec.until(ref, t), seed=seed)
    ll = bin_loglik(rec.probs[:, t + lag, :nv], ref[:, t + lag]).reshape(K, rollouts)
    return float(_log_mean_exp(ll, axis=1).mean())


def multistep_curve(p, stimulus, data, t: int, max_lag: int, rollouts: int, seed):
    return [(lag, multistep_loglik(p, stimulus, data, t, lag, rollouts, seed))
            for lag in range(max_lag + 1)]


def heldout_nll(p: NetworkParams, stimulus, data, seed=0) -> float:
    """Mean per-bin negative log-likelihood on clamped data.

    With hidden neurons this is the single-sample ELBO estimate (an upper bound
    on the negative log-likelihood in expectation).
    """
    from .losses import loss_elbo, loss_mle

    data = np.asarray(data, dtype=np.uint8)
    if p.n_hidden == 0:
        return float(loss_mle(rollout(p, stimulus, clamp=ClampSpec.full(data)), data))
    return float(loss_elbo(rollout(p, stimulus, clamp=ClampSpec.visible(data), seed=seed), data))


def _nan_to_none(x):
    """JSON-ready copy: arrays to lists, numpy scalars to Python, NaN/inf to None."""
    if isinstance(x, dict):
        return {str(k): _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, (list, tuple)):
        return [_nan_to_none(v) for v in x]
    if isinstance(x, np.ndarray):
        return _nan_to_none(x.tolist())
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


STAT_REPORT_SCHEMA = {
    "type": "object",
    "required": ["psth_corr", "psth_corr_mean", "psth_corr_sd", "psth_corr_excluded",
                 "nc_matrix", "nc_matrix_data", "nc_r2", "nc_excluded", "test_nll",
                 "multistep", "metadata"],
    "properties": {
        "psth_corr": {"type": "array", "items": {"type": ["number", "null"]}},
        "psth_corr_mean": {"type": ["number", "null"]},
        "psth_corr_sd": {"type": ["number", "null"]},
        "psth_corr_excluded": {"type": "integer", "minimum": 0},
        "nc_matrix": {"type": "array",
                      "items": {"type": "array", "items": {"type": ["number", "null"]}}},
        "nc_matrix_data": {"type": "array",
                           "items": {"type": "array", "items": {"type": ["number", "null"]}}},
        "nc_r2": {"type": ["number", "null"], "maximum": 1},
        "nc_excluded": {"type": "integer", "minimum": 0},
        "test_nll": {"type": ["number", "null"], "minimum": 0},
        "multistep": {"type": "array",
                      "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                "items": {"type": ["number", "null"]}}},
        "metadata": {"type": "object"},
    },
}


@dataclass
class StatReport:
    psth_corr: np.ndarray
    nc_matrix: np.ndarray
    nc_matrix_data: np.ndarray
    nc_r2: float
    test_nll: Optional[float] = None
    multistep: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def psth_corr_mean(self) -> float:
        r = self.psth_corr[np.isfinite(self.psth_corr)]
        return float(r.mean()) if r.size else math.nan

    @property
    def psth_corr_sd(self) -> float:
        r = self.psth_corr[np.isfinite(self.psth_corr)]
        return float(r.std()) if r.size else math.nan

    @property
    def nc_excluded(self) -> int:
        off = ~np.eye(self.nc_matrix.shape[0], dtype=bool)
        bad = ~(np.isfinite(self.nc_matrix) & np.isfinite(self.nc_matrix_data))
        return int((bad & off).sum())

    def to_dict(self) -> dict:
        return _nan_to_none({
            "psth_corr": self.psth_corr,
            "psth_corr_mean": self.psth_corr_mean,
            "psth_corr_sd": self.psth_corr_sd,
            "psth_corr_excluded": int((~np.isfinite(self.psth_corr)).sum()),
            "nc_matrix": self.nc_matrix,
            "nc_matrix_data": self.nc_matrix_data,
            "nc_r2": self.nc_r2,
            "nc_excluded": self.nc_excluded,
            "test_nll": self.test_nll,
            "multistep": [list(x) for x in self.multistep],
            "metadata": self.metadata,
        })

    def write(self, stem) -> list[Path]:
        """Write ``<stem>.json``, ``<stem>_psth.csv`` and ``<stem>_nc.csv``."""
        stem = Path(stem)
        paths = [stem.with_suffix(".json"), Path(f"{stem}_psth.csv"), Path(f"{stem}_nc.csv")]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(paths[1], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["neuron", "psth_corr"])
            for i, r in enumerate(self.psth_corr):
                w.writerow([i, _fmt(r)])
        with open(paths[2], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["i", "j", "nc_model", "nc_data"])
            n = self.nc_matrix.shape[0]
            for i in range(n):
                for j in range(n):
                    if i != j:
                        w.writerow([i, j, _fmt(self.nc_matrix[i, j]),
                                    _fmt(self.nc_matrix_data[i, j])])
        if self.multistep:
            path = Path(f"{stem}_multistep.csv")
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["lag", "loglik"])
                for lag, ll in self.multistep:
                    w.writerow([lag, _fmt(ll)])
            paths.append(path)
        return paths


def _fmt(x) -> str:
    return "" if x is None or not math.isfinite(x) else repr(float(x))


def evaluate(p: NetworkParams, stimulus, test, trials: Optional[int] = None, seed=0,
             multistep: Optional[tuple] = None) -> StatReport:
    """Free-run the model and compare it with held-out visible spikes.

    Model noise correlations come from sampled spikes; the PSTH correlation
    uses the trial-mean firing probability.
    """
    test = np.asarray(test, dtype=np.uint8)
    stimulus = pad_stimulus(stimulus, p.n_total)
    trials = test.shape[0] if trials is None else trials
    rng = np.random.default_rng(seed)
    rec = rollout(p, stimulus, trials=trials, seed=rng.integers(2 ** 63))
    visible = rec.spikes[:, :, :p.n_visible]
    nc_model = noise_correlation(visible)
    nc_data = noise_correlation(test)
    report = StatReport(
        psth_corr=psth_correlation(rec.probs, test),
        nc_matrix=nc_model,
        nc_matrix_data=nc_data,
        nc_r2=nc_r2(nc_model, nc_data),
        test_nll=heldout_nll(p, stimulus, test, seed=rng.integers(2 ** 63)),
        metadata={"eval_trials": trials, "test_trials": int(test.shape[0]),
                  "normalization": ("test_nll is a mean per bin and neuron; multistep "
                                    "entries are per-bin log-likelihoods summed over "
                                    "visible neurons"),
                  "nll_kind": "exact" if p.n_hidden == 0 else "elbo_estimate"},
    )
    if multistep is not None:
        t, max_lag, m = multistep
        report.multistep = multistep_curve(p, stimulus, test, t, max_lag, m,
                                           seed=rng.integers(2 ** 63))
    return report
