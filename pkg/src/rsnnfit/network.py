"""Stochastic recurrent spiking network: membrane update, sampling, clamping.

Conventions used throughout the package:

* spikes, probabilities and potentials are arrays indexed ``[trial, time, neuron]``;
* ``W[post, pre, d - 1]`` is the weight of a spike emitted ``d`` bins ago;
* neurons ``0 .. n_visible - 1`` are visible, the rest are hidden;
* spikes before ``t = 0`` are zero.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

V_THR = 0.4
GAMMA = 0.3


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Trainable couplings ``W`` and biases ``b`` plus the fixed constants."""

    W: np.ndarray
    b: np.ndarray
    n_visible: int
    v_thr: float = V_THR
    gamma: float = GAMMA

    def __post_init__(self):
        W = _frozen(self.W)
        b = _frozen(self.b)
        if W.ndim != 3 or W.shape[0] != W.shape[1]:
            raise ValueError(f"W must have shape [n, n, d_max], got {W.shape}")
        if W.shape[2] < 1 or W.shape[0] < 1:
            raise ValueError("n_total and d_max must be >= 1")
        if b.shape != (W.shape[0],):
            raise ValueError(f"b must have shape ({W.shape[0]},), got {b.shape}")
        if not 1 <= int(self.n_visible) <= W.shape[0]:
            raise ValueError(
                f"n_visible={self.n_visible} must lie in [1, n_total={W.shape[0]}]"
            )
        if not (np.isfinite(self.v_thr) and self.v_thr > 0):
            raise ValueError(f"v_thr must be positive, got {self.v_thr}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "n_visible", int(self.n_visible))
        object.__setattr__(self, "v_thr", float(self.v_thr))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_total(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.n_total - self.n_visible

    @property
    def d_max(self) -> int:
        return self.W.shape[2]

    def replace(self, **changes) -> "NetworkParams":
        return dataclasses.replace(self, **changes)

    def connectivity(self) -> np.ndarray:
        """Delay-summed coupling matrix ``[post, pre]``."""
        return self.W.sum(axis=2)

    def equals(self, other: "NetworkParams") -> bool:
        """Bitwise equality of every field."""
        return (
            self.n_visible == other.n_visible
            and self.v_thr == other.v_thr
            and self.gamma == other.gamma
            and self.W.shape == other.W.shape
            and self.W.tobytes() == other.W.tobytes()
            and self.b.tobytes() == other.b.tobytes()
        )


def truncated_normal(rng: np.random.Generator, std: float, size, bound: float = 2.0):
    """Normal samples truncated at ``±bound`` standard deviations (rejection)."""
    x = rng.standard_normal(size)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return std * x


def init_params(n_total: int, n_visible: int, d_max: int, seed=0,
                v_thr: float = V_THR, gamma: float = GAMMA) -> NetworkParams:
    if min(n_total, n_visible, d_max) < 1:
        raise ValueError("n_total, n_visible and d_max must be >= 1")
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(d_max * n_total)
    W = truncated_normal(rng, std, (n_total, n_total, d_max))
    return NetworkParams(W=W, b=np.zeros(n_total), n_visible=n_visible,
                         v_thr=v_thr, gamma=gamma)


def make_noise(seed, trials: int, timesteps: int, neurons: int) -> np.ndarray:
    """Uniform noise in the open interval (0, 1), shape ``[K, T, n]``.

    Drawn time-major, so a longer tensor from the same seed extends a shorter
    one without changing its first ``T`` steps.
    """
    rng = np.random.default_rng(seed)
    xi = rng.random((timesteps, trials, neurons))
    xi[xi == 0.0] = np.nextafter(0.0, 1.0)
    return np.ascontiguousarray(xi.transpose(1, 0, 2))


def threshold_distance(v, v_thr: float):
    return (v - v_thr) / v_thr


def _step_potential(W, b, history, drive):
    """``v_t`` from the ``d_max`` most recent spike rows (``None`` = before t=0)."""
    acc = None
    for d, z in enumerate(history):
        if z is None:
            continue
        term = z @ W[:, :, d].T
        acc = term if acc is None else acc + term
    v = b + drive
    return v if acc is None else acc + v


def membrane_potential(p: NetworkParams, history, drive) -> np.ndarray:
    """Membrane potential at one step.

    ``history[d - 1]`` holds the spikes emitted ``d`` bins earlier, shape
    ``[d_max, n]`` or ``[K, d_max, n]``; missing rows (``t - d < 0``) must be
    passed as zeros. ``drive`` is the input current row (``[n]`` or ``[K, n]``).
    """
    history = np.asarray(history, dtype=np.float64)
    drive = np.asarray(drive, dtype=np.float64)
    if history.shape[-2:] != (p.d_max, p.n_total):
        raise ValueError(
            f"history must end in shape ({p.d_max}, {p.n_total}), got {history.shape}")
    if drive.shape[-1] != p.n_total:
        raise ValueError(f"drive must have {p.n_total} entries, got {drive.shape}")
    rows = [history[..., d, :] for d in range(p.d_max)]
    return _step_potential(p.W, p.b, rows, drive)


@dataclass(frozen=True, eq=False)
class ClampSpec:
    """Which bins copy a reference instead of being sampled.

    ``mode`` is one of ``"free"``, ``"full"``, ``"until"`` or ``"visible"``.
    The reference covers the first ``reference.shape[2]`` neurons; ``"until"``
    clamps only the bins ``t < t_clamp``.
    """

    mode: str = "free"
    reference: Optional[np.ndarray] = None
    t_clamp: Optional[int] = None

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def full(cls, reference):
        return cls("full", np.asarray(reference, dtype=np.uint8))

    @classmethod
    def until(cls, reference, t_clamp: int):
        return cls("until", np.asarray(reference, dtype=np.uint8), int(t_clamp))

    @classmethod
    def visible(cls, reference):
        return cls("visible", np.asarray(reference, dtype=np.uint8))

    def validate(self, p: NetworkParams, timesteps: int):
        if self.mode not in ("free", "full", "until", "visible"):
            raise ValueError(f"unknown clamp mode {self.mode!r}")
        if self.mode == "free":
            return
        ref = self.reference
        if ref is None or ref.ndim != 3:
            raise ValueError(f"clamp mode {self.mode!r} needs a [K, T, n] reference")
        if ref.shape[1] != timesteps:
            raise ValueError(f"reference has T={ref.shape[1]}, rollout has T={timesteps}")
        need = {"full": (p.n_total,), "visible": (p.n_visible,),
                "until": (p.n_visible, p.n_total)}[self.mode]
        if ref.shape[2] not in need:
            raise ValueError(
                f"clamp mode {self.mode!r} needs {' or '.join(map(str, need))} "
                f"reference neurons, got {ref.shape[2]}")
        if self.mode == "until" and not 0 <= self.t_clamp <= timesteps:
            raise ValueError(f"t_clamp={self.t_clamp} outside [0, {timesteps}]")

    def clamped_columns(self, t: int) -> int:
        """Number of leading neurons clamped at step ``t``."""
        if self.mode == "free":
            return 0
        if self.mode == "until" and t >= self.t_clamp:
            return 0
        return self.reference.shape[2]

    def fully_clamped(self, p: NetworkParams, timesteps: int) -> bool:
        if self.mode == "free":
            return False
        if self.reference.shape[2] != p.n_total:
            return False
        return self.mode != "until" or self.t_clamp >= timesteps


@dataclass(eq=False)
class RolloutRecord:
    """Spikes, firing probabilities ``sigmoid(u)`` and distances to threshold ``u``.

    When produced on a tape, ``probs_node`` is the tape node holding ``probs``
    and losses computed from the record are recorded on that tape.
    """

    spikes: np.ndarray
    probs: np.ndarray
    potentials: np.ndarray
    clamp: ClampSpec
    n_visible: int
    tape: object = None
    probs_node: object = None

    @property
    def trials(self) -> int:
        return self.spikes.shape[0]

    @property
    def timesteps(self) -> int:
        return self.spikes.shape[1]


def stimulus_rows(stimulus: np.ndarray, t: int) -> np.ndarray:
    return stimulus[t] if stimulus.ndim == 2 else stimulus[:, t]


def _check_stimulus(stimulus, p: NetworkParams, trials: int):
    stimulus = np.asarray(stimulus, dtype=np.float64)
    if stimulus.ndim not in (2, 3) or stimulus.shape[-1] != p.n_total:
        raise ValueError(
            f"stimulus must be [T, {p.n_total}] or [K, T, {p.n_total}], got {stimulus.shape}")
    if stimulus.ndim == 3 and stimulus.shape[0] != trials:
        raise ValueError(f"per-trial stimulus has {stimulus.shape[0]} trials, expected {trials}")
    if not np.all(np.isfinite(stimulus)):
        raise ValueError("stimulus must be finite")
    return stimulus


def pad_stimulus(stimulus, n_total: int) -> np.ndarray:
    """Append zero-drive columns for hidden neurons."""
    stimulus = np.asarray(stimulus, dtype=np.float64)
    n = stimulus.shape[-1]
    if n > n_total:
        raise ValueError(f"stimulus has {n} neurons, network has {n_total}")
    if n == n_total:
        return stimulus
    pad = [(0, 0)] * (stimulus.ndim - 1) + [(0, n_total - n)]
    return np.pad(stimulus, pad)


def clamped_potentials(W, b, spikes, stimulus, v_thr):
    """Distance to threshold for every bin when all spikes are given."""
    K, T, n = spikes.shape
    u = np.empty((K, T, n))
    d_max = W.shape[2]
    for t in range(T):
        history = [spikes[:, t - d] if t - d >= 0 else None for d in range(1, d_max + 1)]
        drive = stimulus_rows(stimulus, t)
        u[:, t] = threshold_distance(_step_potential(W, b, history, drive), v_thr)
    return u


def rollout(p: NetworkParams, stimulus, trials: Optional[int] = None,
            clamp: Optional[ClampSpec] = None, noise=None, seed=None,
            tape=None) -> RolloutRecord:
    """Simulate ``trials`` independent trials sequentially in time.

    Free neurons spike iff ``noise < sigmoid(u)``; clamped neurons copy the
    reference. Probabilities and potentials are recorded for every neuron
    regardless of clamping. Pass ``noise`` or ``seed`` (noise wins).
    """
    clamp = clamp or ClampSpec.free()
    if clamp.reference is not None:
        if trials is not None and trials != clamp.reference.shape[0]:
            raise ValueError(
                f"trials={trials} but clamp reference has {clamp.reference.shape[0]}")
        trials = clamp.reference.shape[0]
    if trials is None and noise is not None:
        trials = np.shape(noise)[0]
    if trials is None or trials < 1:
        raise ValueError("trial count must be >= 1")
    stimulus = np.asarray(stimulus, dtype=np.float64)
    T = stimulus.shape[-2]
    stimulus = _check_stimulus(stimulus, p, trials)
    clamp.validate(p, T)
    n = p.n_total

    if tape is not None:
        from .autodiff import taped_rollout

        return taped_rollout(tape, p, stimulus, trials, clamp, noise, seed)

    if clamp.fully_clamped(p, T):
        spikes = clamp.reference.copy()
        u = clamped_potentials(p.W, p.b, spikes.astype(np.float64), stimulus, p.v_thr)
        return RolloutRecord(spikes, expit(u), u, clamp, p.n_visible)

    if noise is None:
        noise = make_noise(seed, trials, T, n)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (trials, T, n):
        raise ValueError(f"noise must have shape {(trials, T, n)}, got {noise.shape}")

    z = np.zeros((trials, T, n))
    u = np.empty((trials, T, n))
    for t in range(T):
        history = [z[:, t - d] if t - d >= 0 else None for d in range(1, p.d_max + 1)]
        u[:, t] = threshold_distance(
            _step_potential(p.W, p.b, history, stimulus_rows(stimulus, t)), p.v_thr)
        z[:, t] = noise[:, t] < expit(u[:, t])
        c = clamp.clamped_columns(t)
        if c:
            z[:, t, :c] = clamp.reference[:, t]
    return RolloutRecord(z.astype(np.uint8), expit(u), u, clamp, p.n_visible)
