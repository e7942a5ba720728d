"""Exhaustive ground truth for tiny networks.

Outcomes are single-trial spike tensors ``z[t, i]``. An outcome's index has bit
``t * n + i`` set iff ``z[t, i] = 1`` (time major, neuron minor, least
significant bit first).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit

from .network import NetworkParams, clamped_potentials

MAX_BINS = 20
_BLOCK = 1 << 14


@dataclass(frozen=True, eq=False)
class ExactDistribution:
    params: NetworkParams
    stimulus: np.ndarray
    table: np.ndarray

    @property
    def timesteps(self) -> int:
        return self.stimulus.shape[0]

    @property
    def neurons(self) -> int:
        return self.params.n_total

    def outcomes(self, start: int = 0, stop=None) -> np.ndarray:
        stop = self.table.size if stop is None else stop
        return outcome_tensor(np.arange(start, stop), self.timesteps, self.neurons)


def outcome_tensor(indices, T: int, n: int) -> np.ndarray:
    """Spike tensors ``[len(indices), T, n]`` for outcome indices."""
    bits = (np.asarray(indices, dtype=np.int64)[:, None] >> np.arange(T * n)) & 1
    return bits.reshape(-1, T, n).astype(np.uint8)


def pattern_index(spikes) -> np.ndarray:
    """Outcome index of each trial of a ``[K, T, n]`` spike tensor."""
    spikes = np.asarray(spikes)
    K, T, n = spikes.shape
    if T * n > 62:
        raise ValueError("pattern too large to index")
    weights = np.left_shift(np.int64(1), np.arange(T * n, dtype=np.int64))
    return spikes.reshape(K, T * n).astype(np.int64) @ weights


def _check_instance(p: NetworkParams, stimulus):
    stimulus = np.asarray(stimulus, dtype=np.float64)
    if stimulus.ndim != 2 or stimulus.shape[1] != p.n_total:
        raise ValueError(f"stimulus must be [T, {p.n_total}], got {stimulus.shape}")
    bins = stimulus.shape[0] * p.n_total
    if bins > MAX_BINS:
        raise ValueError(f"instance has {bins} bins; enumeration is capped at {MAX_BINS}")
    return stimulus


def enumerate_outcomes(p: NetworkParams, stimulus) -> ExactDistribution:
    """Probability of every outcome via the factorized likelihood."""
    stimulus = _check_instance(p, stimulus)
    T, n = stimulus.shape
    N = 1 << (T * n)
    table = np.empty(N)
    for start in range(0, N, _BLOCK):
        stop = min(N, start + _BLOCK)
        z = outcome_tensor(np.arange(start, stop), T, n).astype(np.float64)
        u = clamped_potentials(p.W, p.b, z, stimulus, p.v_thr)
        logp = np.where(z > 0, log_expit(u), log_expit(-u)).reshape(stop - start, -1).sum(1)
        table[start:stop] = np.exp(logp)
    return ExactDistribution(p, stimulus, table)


def enumerate_recursive(p: NetworkParams, stimulus) -> np.ndarray:
    """Same table, by depth-first conditioning with scalar arithmetic only."""
    stimulus = _check_instance(p, stimulus)
    T, n = stimulus.shape
    W = p.W.tolist()
    b = p.b.tolist()
    C = stimulus.tolist()
    table = np.zeros(1 << (T * n))

    def visit(t, rows, prob, index):
        if t == T:
            table[index] = prob
            return
        q = []
        for j in range(n):
            v = b[j] + C[t][j]
            for d in range(1, p.d_max + 1):
                if t - d >= 0:
                    for i in range(n):
                        if rows[t - d][i]:
                            v += W[j][i][d - 1]
            u = (v - p.v_thr) / p.v_thr
            q.append(1.0 / (1.0 + math.exp(-u)))
        for pattern in range(1 << n):
            row = [(pattern >> j) & 1 for j in range(n)]
            pr = prob
            for j in range(n):
                pr *= q[j] if row[j] else 1.0 - q[j]
            visit(t + 1, rows + [row], pr, index | (pattern << (t * n)))

    visit(0, [], 1.0, 0)
    return table


def _visible_match(dist: ExactDistribution, pattern, bins) -> np.ndarray:
    """Boolean mask of outcomes agreeing with ``pattern`` on the given time bins."""
    nv = pattern.shape[1]
    z = dist.outcomes()
    return np.all(z[:, bins, :nv] == pattern[bins], axis=(1, 2))


def exact_marginal_loglik(dist: ExactDistribution, visible) -> float:
    """``log sum_{hidden} P(visible, hidden)`` for a ``[T, n_visible]`` pattern."""
    visible = np.asarray(visible, dtype=np.uint8)
    if visible.shape != (dist.timesteps, dist.params.n_visible):
        raise ValueError(
            f"pattern must be {(dist.timesteps, dist.params.n_visible)}, got {visible.shape}")
    mask = _visible_match(dist, visible, np.arange(dist.timesteps))
    return float(np.log(dist.table[mask].sum()))


def exact_conditional_loglik(dist: ExactDistribution, visible, t: int, lag: int) -> float:
    """``log P(z^V_{t+lag} | z^V_0 .. z^V_{t-1})`` for a visible pattern."""
    visible = np.asarray(visible, dtype=np.uint8)
    if t < 0 or lag < 0 or t + lag >= dist.timesteps:
        raise ValueError("need t >= 0, lag >= 0 and t + lag < T")
    past = np.arange(t)
    prior = _visible_match(dist, visible, past)
    joint = prior & _visible_match(dist, visible, np.array([t + lag]))
    return float(np.log(dist.table[joint].sum()) - np.log(dist.table[prior].sum()))


STATISTICS = ("psth", "coincidence", "nc_covariance")


def exact_expected_statistic(dist: ExactDistribution, statistic: str, trials=None):
    """Exact expectation of a single-trial statistic.

    ``psth`` gives ``E[z_{t,i}]``; ``coincidence`` gives ``E[1/T sum_t z_ti z_tj]``;
    ``nc_covariance`` gives ``1/T sum_t Cov(z_ti, z_tj)``, multiplied by
    ``(K - 1) / K`` when ``trials=K`` to match the expectation of the
    ``K``-trial estimator centered on its own PSTH.
    """
    if statistic not in STATISTICS:
        raise ValueError(f"unsupported statistic {statistic!r}; choose from {STATISTICS}")
    T, n = dist.timesteps, dist.neurons
    mean = np.zeros((T, n))
    second = np.zeros((T, n, n))
    for start in range(0, dist.table.size, _BLOCK):
        stop = min(dist.table.size, start + _BLOCK)
        z = dist.outcomes(start, stop).astype(np.float64)
        w = dist.table[start:stop]
        mean += np.einsum("k,kti->ti", w, z)
        second += np.einsum("k,kti,ktj->tij", w, z, z)
    if statistic == "psth":
        return mean
    if statistic == "coincidence":
        return second.mean(axis=0)
    cov = (second - mean[:, :, None] * mean[:, None, :]).mean(axis=0)
    if trials is not None:
        cov = cov * (trials - 1) / trials
    return cov


# -- property checks ---------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    observed: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: observed={self.observed:.6g} "
                f"tolerance={self.tolerance:g} {self.detail}").rstrip()


def write_table_csv(path, dist: ExactDistribution) -> None:
    """One row per outcome: hex bit pattern (bit ``t * n + i``) and probability."""
    width = max(1, (dist.table.size.bit_length() + 2) // 4)
    with open(path, "w") as f:
        f.write("pattern_hex,probability\n")
        for idx, prob in enumerate(dist.table):
            f.write(f"{idx:0{width}x},{float(prob)!r}\n")


def empirical_table(spikes, outcomes: int) -> np.ndarray:
    counts = np.bincount(pattern_index(spikes), minlength=outcomes)
    return counts / counts.sum()


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def random_instance(seed, n_total: int, n_visible: int, T: int, d_max: int = 1,
                    weight_scale: float = 0.6, drive_scale: float = 0.3):
    """Random tiny network and stimulus with non-trivial probabilities."""
    from .network import init_params

    rng = np.random.default_rng(seed)
    p = init_params(n_total, n_visible, d_max, seed=rng.integers(2 ** 32))
    p = p.replace(W=p.W * weight_scale * np.sqrt(d_max * n_total),
                  b=rng.normal(0.3, 0.15, n_total))
    stimulus = drive_scale * rng.standard_normal((T, n_total))
    return p, stimulus


def corrupt_first_bin(p: NetworkParams, stimulus) -> np.ndarray:
    """Stimulus that flips ``P(z[0, 0] = 1)`` to its complement (sampler test hook)."""
    s = np.array(stimulus, dtype=np.float64)
    s[0, 0] = 2.0 * p.v_thr - 2.0 * p.b[0] - s[0, 0]
    return s


def check_sampler(seed=0, n: int = 2, T: int = 3, samples: int = 10 ** 6,
                  tolerance: float = 0.01, corrupt: bool = False) -> CheckResult:
    from .network import rollout

    p, stim = random_instance(seed, n, n, T)
    dist = enumerate_outcomes(p, stim)
    sample_stim = corrupt_first_bin(p, stim) if corrupt else stim
    rec = rollout(p, sample_stim, trials=samples, seed=seed + 1)
    tv = total_variation(empirical_table(rec.spikes, dist.table.size), dist.table)
    return CheckResult("sampler total variation", tv, tolerance, tv < tolerance,
                       f"(n={n}, T={T}, samples={samples}{', corrupted' if corrupt else ''})")


def elbo_samples(p: NetworkParams, stimulus, visible, samples: int, seed) -> np.ndarray:
    """Per-sample lower bound ``sum_{t, i in V} log P(z^V_{t,i} | past)``."""
    from .losses import cross_entropy
    from .network import ClampSpec, rollout

    ref = np.broadcast_to(np.asarray(visible, dtype=np.uint8), (samples,) + visible.shape)
    rec = rollout(p, stimulus, clamp=ClampSpec.visible(ref), seed=seed)
    ce = cross_entropy(ref.astype(np.float64), rec.probs[:, :, :p.n_visible])
    return -ce.sum(axis=(1, 2))


def check_elbo_bound(seed=0, n_visible: int = 2, n_hidden: int = 2, T: int = 3,
                     instances: int = 20, samples: int = 10 ** 5) -> CheckResult:
    """Monte-Carlo ELBO never exceeds the exact log-likelihood by 3 standard errors."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for k in range(instances):
        p, stim = random_instance(rng.integers(2 ** 32), n_visible + n_hidden, n_visible, T)
        dist = enumerate_outcomes(p, stim)
        full = outcome_tensor([dist.table.argmax()], T, p.n_total)[0]
        visible = full[:, :n_visible] if k % 2 == 0 else rng.integers(0, 2, (T, n_visible))
        e = elbo_samples(p, stim, np.asarray(visible, dtype=np.uint8), samples,
                         rng.integers(2 ** 32))
        se = e.std(ddof=1) / np.sqrt(samples)
        exact = exact_marginal_loglik(dist, visible)
        worst = max(worst, (e.mean() - exact) / max(se, 1e-300))
    return CheckResult("ELBO bound (z-score of MC ELBO above exact log-lik)", worst, 3.0,
                       worst <= 3.0, f"({instances} instances, {samples} samples)")


def check_unbiased(seed=0, n: int = 2, T: int = 3, samples: int = 10 ** 5,
                   tolerance: float = 3.0) -> CheckResult:
    """Sample means of the probability-based PSTH and coincidence estimators."""
    from .network import rollout

    p, stim = random_instance(seed, n, n, T)
    dist = enumerate_outcomes(p, stim)
    rec = rollout(p, stim, trials=samples, seed=seed + 2)
    worst = 0.0
    # per-trial estimates; their mean over trials is the K-trial estimator
    psth_k = rec.probs
    pi_k = np.einsum("kti,ktj->kij", rec.probs, rec.probs) / T
    # sigma_i * sigma_j estimates E[z_i z_j] only for i != j
    off = ~np.eye(n, dtype=bool)
    for est, exact in ((psth_k.reshape(samples, -1),
                        exact_expected_statistic(dist, "psth").reshape(-1)),
                       (pi_k[:, off], exact_expected_statistic(dist, "coincidence")[off])):
        se = est.std(axis=0, ddof=1) / np.sqrt(samples)
        z = np.abs(est.mean(axis=0) - exact) / np.maximum(se, 1e-12)
        worst = max(worst, float(z.max()))
    return CheckResult("estimator unbiasedness (max |z| over entries)", worst, tolerance,
                       worst < tolerance, f"(n={n}, T={T}, rollouts={samples})")
