"""Training objectives.

Every loss is a mean (not a sum) over its elements. Losses take a
:class:`~rsnnfit.network.RolloutRecord`; if the record was produced on a tape
the loss is recorded there as a composite node and returned as that node,
otherwise a float is returned. Both paths use the same arithmetic.

Model-side statistics are computed from firing probabilities, data-side
statistics from spikes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff

EPS = 1e-12
KINDS = ("mle", "psth", "nc_mse", "nc_ce", "elbo", "single_trial", "smh")


def cross_entropy(p, q):
    """Elementwise binary cross-entropy ``CE(p, q)`` with log arguments floored at EPS."""
    q = np.asarray(q, dtype=np.float64)
    return -(p * np.log(np.maximum(q, EPS)) + (1.0 - p) * np.log(np.maximum(1.0 - q, EPS)))


def cross_entropy_dq(p, q):
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(q > EPS, -p / q, 0.0)
        b = np.where(1.0 - q > EPS, (1.0 - p) / (1.0 - q), 0.0)
    return a + b


def binary_entropy(p):
    return cross_entropy(p, p)


# -- statistics --------------------------------------------------------------

def psth(x) -> np.ndarray:
    """Trial average ``[T, n]`` of spikes or probabilities."""
    return np.asarray(x, dtype=np.float64).mean(axis=0)


def centered_covariance(x) -> np.ndarray:
    """``1/(KT) sum_{k,t} (x - psth)_i (x - psth)_j``."""
    x = np.asarray(x, dtype=np.float64)
    K, T, n = x.shape
    d = (x - x.mean(axis=0)).reshape(-1, n)
    return d.T @ d / (K * T)


def coincidence(x) -> np.ndarray:
    """``1/(KT) sum_{k,t} x_i x_j``."""
    x = np.asarray(x, dtype=np.float64)
    K, T, n = x.shape
    f = x.reshape(-1, n)
    return f.T @ f / (K * T)


@dataclass(frozen=True, eq=False)
class DataStats:
    """Data-side statistics of a visible spike tensor, computed once."""

    timesteps: int
    psth: np.ndarray
    covariance: np.ndarray
    coincidence: np.ndarray
    rates: np.ndarray

    @classmethod
    def of(cls, data) -> "DataStats":
        data = np.asarray(data)
        if data.ndim != 3:
            raise ValueError(f"data must be [K, T, n], got shape {data.shape}")
        z = data.astype(np.float64)
        zbar = psth(z)
        return cls(data.shape[1], zbar, centered_covariance(z), coincidence(z),
                   zbar.mean(axis=0))

    @property
    def n(self) -> int:
        return self.psth.shape[1]


def _stats(data) -> DataStats:
    return data if isinstance(data, DataStats) else DataStats.of(data)


def _offdiag(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


# -- value and gradient kernels over a [K, T, n_total] probability tensor ----

def _mle_kernels(data):
    z = np.asarray(data, dtype=np.float64)

    def value(probs):
        return cross_entropy(z, probs).mean()

    def grad(probs):
        return cross_entropy_dq(z, probs) / probs.size

    return value, grad


def _visible_ce_kernels(data, n_visible: int, t_start: int = 0):
    z = np.asarray(data, dtype=np.float64)[:, t_start:]

    def value(probs):
        return cross_entropy(z, probs[:, t_start:, :n_visible]).mean()

    def grad(probs):
        g = np.zeros_like(probs)
        g[:, t_start:, :n_visible] = cross_entropy_dq(z, probs[:, t_start:, :n_visible]) / z.size
        return g

    return value, grad


def _psth_kernels(stats: DataStats):
    target = stats.psth
    nv = stats.n

    def value(probs):
        return cross_entropy(target, psth(probs[:, :, :nv])).mean()

    def grad(probs):
        K = probs.shape[0]
        g = np.zeros_like(probs)
        g[:, :, :nv] = cross_entropy_dq(target, psth(probs[:, :, :nv])) / (target.size * K)
        return g

    return value, grad


def _nc_mse_kernels(stats: DataStats):
    target = stats.covariance
    nv = stats.n
    mask = _offdiag(nv)
    pairs = mask.sum()

    def value(probs):
        if pairs == 0:
            return 0.0
        c = centered_covariance(probs[:, :, :nv])
        return np.sum((c - target)[mask] ** 2) / pairs

    def grad(probs):
        g = np.zeros_like(probs)
        if pairs == 0:
            return g
        x = probs[:, :, :nv]
        K, T, _ = x.shape
        dev = x - x.mean(axis=0)
        c = dev.reshape(-1, nv).T @ dev.reshape(-1, nv) / (K * T)
        G = np.where(mask, 2.0 * (c - target) / pairs, 0.0)
        gdev = (dev.reshape(-1, nv) @ (G + G.T) / (K * T)).reshape(K, T, nv)
        g[:, :, :nv] = gdev - gdev.mean(axis=0)
        return g

    return value, grad


def _nc_ce_kernels(stats: DataStats):
    target = stats.coincidence
    nv = stats.n
    mask = _offdiag(nv)
    pairs = mask.sum()

    def value(probs):
        if pairs == 0:
            return 0.0
        return cross_entropy(target, coincidence(probs[:, :, :nv]))[mask].mean()

    def grad(probs):
        g = np.zeros_like(probs)
        if pairs == 0:
            return g
        x = probs[:, :, :nv]
        K, T, _ = x.shape
        G = np.where(mask, cross_entropy_dq(target, coincidence(x)) / pairs, 0.0)
        g[:, :, :nv] = (x.reshape(-1, nv) @ (G + G.T) / (K * T)).reshape(K, T, nv)
        return g

    return value, grad


def _smh_kernels(targets, n_visible: int):
    targets = np.asarray(targets, dtype=np.float64)

    def value(probs):
        if targets.size == 0:
            return 0.0
        return cross_entropy(targets, probs[:, :, n_visible:].mean(axis=(0, 1))).mean()

    def grad(probs):
        g = np.zeros_like(probs)
        if targets.size == 0:
            return g
        K, T, _ = probs.shape
        est = probs[:, :, n_visible:].mean(axis=(0, 1))
        g[:, :, n_visible:] = cross_entropy_dq(targets, est) / (targets.size * K * T)
        return g

    return value, grad


def _apply(record, kernels, kind):
    value, grad = kernels
    if record.probs_node is not None:
        return autodiff.reduce(record.tape, record.probs_node, value, grad, kind=kind)
    return float(value(record.probs))


def _check_visible(record, data_n: int, data_t: int):
    if record.timesteps != data_t:
        raise ValueError(f"record has T={record.timesteps}, data has T={data_t}")
    if data_n != record.n_visible:
        raise ValueError(
            f"data has {data_n} neurons, record has {record.n_visible} visible neurons")


# -- public losses -----------------------------------------------------------

def loss_mle(record, data):
    """Mean cross-entropy between data spikes and clamped firing probabilities."""
    if not (record.clamp.mode == "full" or (
            record.clamp.mode == "visible" and record.spikes.shape[2] == record.n_visible)):
        raise ValueError("loss_mle needs a record produced with a full clamp")
    data = np.asarray(data)
    if data.shape != record.probs.shape:
        raise ValueError(f"data shape {data.shape} != record shape {record.probs.shape}")
    return _apply(record, _mle_kernels(data), "loss_mle")


def loss_elbo(record, data):
    """Visible cross-entropy with visible spikes clamped and hidden spikes sampled.

    One hidden sample per clamping condition; the negative of this value times
    the number of visible bins lower-bounds the visible log-likelihood in
    expectation.
    """
    if record.clamp.mode not in ("visible", "full"):
        raise ValueError("loss_elbo needs a record produced with a visible clamp")
    data = np.asarray(data)
    if data.shape != (record.trials, record.timesteps, record.n_visible):
        raise ValueError(
            f"data shape {data.shape} must match the visible population "
            f"{(record.trials, record.timesteps, record.n_visible)}")
    return _apply(record, _visible_ce_kernels(data, record.n_visible), "loss_elbo")


def loss_single_trial(record, data):
    """Cross-entropy over the unclamped window ``t >= t_clamp``, visible neurons."""
    if record.clamp.mode != "until":
        raise ValueError("loss_single_trial needs a record produced with a clamp-until")
    t_c = record.clamp.t_clamp
    if not 0 <= t_c < record.timesteps:
        raise ValueError(f"t_clamp={t_c} outside [0, {record.timesteps})")
    data = np.asarray(data)
    if data.shape != (record.trials, record.timesteps, record.n_visible):
        raise ValueError(f"data shape {data.shape} does not match the visible record")
    return _apply(record, _visible_ce_kernels(data, record.n_visible, t_c),
                  "loss_single_trial")


def loss_psth(record, data):
    """Cross-entropy between the data PSTH and the trial-mean firing probability."""
    stats = _stats(data)
    _check_visible(record, stats.n, stats.timesteps)
    return _apply(record, _psth_kernels(stats), "loss_psth")


def loss_nc_mse(record, data):
    """Mean squared error of the centered covariance over pairs ``i != j``."""
    stats = _stats(data)
    _check_visible(record, stats.n, stats.timesteps)
    return _apply(record, _nc_mse_kernels(stats), "loss_nc_mse")


def loss_nc_ce(record, data):
    """Mean cross-entropy of coincidence frequencies over pairs ``i != j``."""
    stats = _stats(data)
    _check_visible(record, stats.n, stats.timesteps)
    return _apply(record, _nc_ce_kernels(stats), "loss_nc_ce")


def smh_targets(data, pairing) -> np.ndarray:
    rates = _stats(data).rates
    pairing = np.asarray(pairing, dtype=np.int64).reshape(-1)
    if pairing.size and (pairing.min() < 0 or pairing.max() >= rates.size):
        raise ValueError(f"pairing indices must lie in [0, {rates.size})")
    return rates[pairing]


def sample_pairing(rng: np.random.Generator, n_hidden: int, n_visible: int) -> np.ndarray:
    """Uniformly random visible partner for every hidden neuron."""
    return rng.integers(0, n_visible, size=n_hidden)


def loss_smh(record, data, pairing):
    """Hidden firing-rate regularizer: each hidden neuron matches a visible partner's rate."""
    pairing = np.asarray(pairing, dtype=np.int64).reshape(-1)
    n_hidden = record.probs.shape[2] - record.n_visible
    if pairing.size != n_hidden:
        raise ValueError(f"pairing has {pairing.size} entries, network has {n_hidden} hidden")
    return _apply(record, _smh_kernels(smh_targets(data, pairing), record.n_visible),
                  "loss_smh")


# -- combination -------------------------------------------------------------

ROLLOUT_OF = {"mle": "clamped", "elbo": "clamped", "single_trial": "until",
              "psth": "free", "nc_mse": "free", "nc_ce": "free"}


@dataclass(frozen=True)
class LossSpec:
    """Weighted loss terms, e.g. ``LossSpec({"mle": 0.2, "psth": 0.1, "nc_mse": 0.7})``."""

    weights: dict = field(default_factory=dict)
    t_clamp: Optional[int] = None

    def __post_init__(self):
        weights = {}
        for kind, mu in dict(self.weights).items():
            if kind not in KINDS:
                raise ValueError(f"unknown loss kind {kind!r}; valid kinds: {', '.join(KINDS)}")
            mu = float(mu)
            if not (np.isfinite(mu) and mu >= 0):
                raise ValueError(f"weight of {kind!r} must be a non-negative number")
            weights[kind] = mu
        if not any(mu > 0 for mu in weights.values()):
            raise ValueError("a loss spec needs at least one term with positive weight")
        if "mle" in weights and "elbo" in weights:
            raise ValueError("mle and elbo are mutually exclusive")
        if weights.get("single_trial", 0) > 0 and self.t_clamp is None:
            raise ValueError("single_trial needs t_clamp")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def parse(cls, text: str, t_clamp: Optional[int] = None) -> "LossSpec":
        """Parse ``"mle:0.2,psth:0.1,nc_mse:0.7"`` (a bare kind means weight 1)."""
        weights = {}
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            kind, _, mu = item.partition(":")
            kind = kind.strip().lower()
            try:
                weights[kind] = float(mu) if mu.strip() else 1.0
            except ValueError:
                raise ValueError(f"bad weight in loss term {item!r}") from None
        return cls(weights, t_clamp)

    def format(self) -> str:
        return ",".join(f"{k}:{v:g}" for k, v in self.weights.items())

    @property
    def active(self) -> dict:
        return {k: v for k, v in self.weights.items() if v > 0}

    def with_hidden(self, n_hidden: int) -> "LossSpec":
        """Replace mle by elbo when the model has hidden neurons."""
        if n_hidden > 0 and "mle" in self.weights:
            w = {("elbo" if k == "mle" else k): v for k, v in self.weights.items()}
            return LossSpec(w, self.t_clamp)
        return self

    def required_rollouts(self) -> set:
        need = {ROLLOUT_OF[k] for k in self.active if k in ROLLOUT_OF}
        if "smh" in self.active and not need & {"free", "clamped"}:
            need.add("free")
        return need


def loss_combined(spec: LossSpec, rollouts: dict, data, pairing=None, sm_data=None):
    """``sum_k mu_k L_k`` and a per-term breakdown ``{kind: (mu, value)}``.

    ``rollouts`` maps ``"clamped"``, ``"free"`` and ``"until"`` to records.
    ``data`` is the visible spike tensor the clamped records were run on;
    ``sm_data`` (spikes or :class:`DataStats`) feeds the trial-averaged terms
    and defaults to ``data``.
    """
    sm_data = _stats(data if sm_data is None else sm_data)
    terms, weights, breakdown = [], [], {}
    for kind, mu in spec.weights.items():
        if mu == 0:
            breakdown[kind] = (mu, None)
            continue
        if kind == "smh":
            record = rollouts.get("free") or rollouts.get("clamped")
        else:
            record = rollouts.get(ROLLOUT_OF[kind])
        if record is None:
            raise ValueError(f"loss term {kind!r} needs a {ROLLOUT_OF.get(kind, 'free')!r} rollout")
        if kind == "mle":
            value = loss_mle(record, data)
        elif kind == "elbo":
            value = loss_elbo(record, data)
        elif kind == "single_trial":
            value = loss_single_trial(record, data)
        elif kind == "psth":
            value = loss_psth(record, sm_data)
        elif kind == "nc_mse":
            value = loss_nc_mse(record, sm_data)
        elif kind == "nc_ce":
            value = loss_nc_ce(record, sm_data)
        else:
            if pairing is None:
                raise ValueError("smh needs a hidden-to-visible pairing")
            value = loss_smh(record, sm_data, pairing)
        terms.append(value)
        weights.append(mu)
        breakdown[kind] = (mu, float(value))
    if isinstance(terms[0], autodiff.Node):
        tape = rollouts[next(iter(rollouts))].tape
        return autodiff.weighted_sum(tape, terms, weights), breakdown
    total = 0.0
    for mu, value in zip(weights, terms):
        total += mu * value
    return total, breakdown
