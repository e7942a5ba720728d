"""Minibatch Adam training with validation-based early stopping."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Gradients, Tape, backward
from .io import DatasetSplit, write_params
from .losses import DataStats, LossSpec, loss_combined, sample_pairing
from .metrics import _nan_to_none, psth_correlation
from .network import ClampSpec, NetworkParams, pad_stimulus, rollout

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient; ``params`` holds the offending parameters."""

    def __init__(self, message, params=None, checkpoint=None):
        super().__init__(message)
        self.params = params
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    loss_spec: LossSpec = field(default_factory=lambda: LossSpec({"mle": 1.0}))
    learning_rate: float = 1.5e-3
    batch_size: int = 20
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int = 10
    eval_cadence: int = 1
    seed: int = 0
    free_trials: Optional[int] = None  # defaults to batch_size
    sm_stats: str = "train"  # data statistics for PSTH/NC terms: "train" or "batch"
    clip_norm: float = 10.0
    batcher: str = "trials"  # or "clips"
    clip_length: Optional[int] = None
    clip_trials: int = 1  # distinct trials per clip batch; batch_size // clip_trials starts each
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.eval_cadence < 1:
            raise ValueError("batch_size and eval_cadence must be >= 1, max_epochs >= 0")
        if self.sm_stats not in ("train", "batch"):
            raise ValueError("sm_stats must be 'train' or 'batch'")
        if self.batcher not in ("trials", "clips"):
            raise ValueError("batcher must be 'trials' or 'clips'")
        if self.batcher == "clips" and not self.clip_length:
            raise ValueError("the clip batcher needs clip_length")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_spec"] = self.loss_spec.format()
        d["t_clamp"] = self.loss_spec.t_clamp
        return d


@dataclass
class AdamState:
    mW: np.ndarray
    vW: np.ndarray
    mb: np.ndarray
    vb: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, p: NetworkParams) -> "AdamState":
        return cls(np.zeros_like(p.W), np.zeros_like(p.W), np.zeros_like(p.b), np.zeros_like(p.b))


def adam_step(p: NetworkParams, g: Gradients, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update of ``W`` and ``b``."""
    if g.dW.shape != p.W.shape or g.db.shape != p.b.shape:
        raise ValueError("gradient shapes do not match the parameters")
    t = state.step + 1
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps
    new = {}
    moments = {}
    for name, x, grad, m, v in (("W", p.W, g.dW, state.mW, state.vW),
                                ("b", p.b, g.db, state.mb, state.vb)):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new[name] = x - lr * mhat / (np.sqrt(vhat) + eps)
        moments[name] = (m, v)
    state = AdamState(*moments["W"], *moments["b"], step=t)
    return p.replace(W=new["W"], b=new["b"]), state


@dataclass
class TrainLogEntry:
    epoch: int
    train_terms: dict
    train_loss: float
    val_loss: Optional[float]
    psth_corr: Optional[float]
    wall_time: float
    clipped: int = 0


def _batches(rng, n_trials: int, batch_size: int):
    order = rng.permutation(n_trials)
    for start in range(0, n_trials, batch_size):
        yield order[start:start + batch_size]


def _clip_batch(rng, data: np.ndarray, stimulus: np.ndarray, cfg: TrainConfig):
    """``batch_size`` clips: ``clip_trials`` random trials times random start points."""
    K, T, _ = data.shape
    L = cfg.clip_length
    if L > T:
        raise ValueError(f"clip_length={L} exceeds T={T}")
    trials = rng.choice(K, size=min(cfg.clip_trials, K), replace=False)
    per = max(1, cfg.batch_size // len(trials))
    ks = np.repeat(trials, per)
    starts = rng.integers(0, T - L + 1, size=ks.size)
    spikes = np.stack([data[k, s:s + L] for k, s in zip(ks, starts)])
    stim = np.stack([stimulus[s:s + L] for s in starts])
    return spikes, stim


def objective(p: NetworkParams, spec: LossSpec, data, stimulus, *, free_trials: int, seed,
              pairing=None, sm_data=None, tape=None):
    """Combined loss on ``data`` (visible spikes); runs the rollouts its loss terms need.

    ``stimulus`` covers all ``n_total`` neurons, either ``[T, n]`` or per-trial.
    """
    spec = spec.with_hidden(p.n_hidden)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2 ** 63, size=3)
    need = spec.required_rollouts()
    rollouts = {}
    if "clamped" in need:
        clamp = ClampSpec.full(data) if p.n_hidden == 0 else ClampSpec.visible(data)
        rollouts["clamped"] = rollout(p, stimulus, clamp=clamp, seed=seeds[0], tape=tape)
    if "until" in need:
        rollouts["until"] = rollout(p, stimulus, clamp=ClampSpec.until(data, spec.t_clamp),
                                    seed=seeds[1], tape=tape)
    if "free" in need:
        free_stim = stimulus
        if stimulus.ndim == 3 and stimulus.shape[0] != free_trials:
            free_stim = stimulus[np.arange(free_trials) % stimulus.shape[0]]
        rollouts["free"] = rollout(p, free_stim, trials=free_trials, seed=seeds[2], tape=tape)
    total, breakdown = loss_combined(spec, rollouts, data, pairing=pairing, sm_data=sm_data)
    return total, breakdown, rollouts


def _clip(g: Gradients, max_norm: float):
    norm = g.global_norm()
    if max_norm and norm > max_norm:
        return g * (max_norm / norm), True
    return g, False


def train(model: NetworkParams, data: DatasetSplit, cfg: TrainConfig):
    """Fit ``W`` and ``b``; returns the parameters with the lowest validation loss and the log."""
    if data.n_visible != model.n_visible:
        raise ValueError(
            f"dataset has {data.n_visible} neurons, model has {model.n_visible} visible")
    if cfg.batcher == "trials" and cfg.batch_size > data.train.shape[0]:
        raise ValueError("batch_size exceeds the number of training trials")
    spec = cfg.loss_spec.with_hidden(model.n_hidden)
    stimulus = pad_stimulus(data.stimulus, model.n_total)
    free_trials = cfg.free_trials or cfg.batch_size
    rng = np.random.default_rng(cfg.seed)
    val_seed = int(rng.integers(2 ** 63))
    train_stats = DataStats.of(data.train)
    val_stats = DataStats.of(data.validation)
    pairing = sample_pairing(rng, model.n_hidden, model.n_visible)

    def validation_loss(p):
        total, _, _ = objective(p, spec, data.validation, stimulus,
                                free_trials=cfg.free_trials or data.validation.shape[0],
                                seed=val_seed, pairing=pairing, sm_data=val_stats)
        return float(total)

    p = model
    state = AdamState.zeros(p)
    best_params, best_val = p, validation_loss(p)
    history = []
    best_train = np.inf
    stale = 0
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        pairing = sample_pairing(rng, model.n_hidden, model.n_visible)
        sums: dict = {}
        steps = clipped = 0
        if cfg.batcher == "trials":
            batches = ((data.train[idx], stimulus) for idx in
                       _batches(rng, data.train.shape[0], cfg.batch_size))
        else:
            n_steps = max(1, data.train.shape[0] * data.timesteps
                          // (cfg.batch_size * cfg.clip_length))
            batches = (_clip_batch(rng, data.train, stimulus, cfg) for _ in range(n_steps))
        for batch, stim in batches:
            sm = train_stats if cfg.sm_stats == "train" and cfg.batcher == "trials" else None
            tape = Tape()
            total, breakdown, _ = objective(p, spec, batch, stim, free_trials=free_trials,
                                            seed=rng.integers(2 ** 63), pairing=pairing,
                                            sm_data=sm, tape=tape)
            if not np.isfinite(total.value):
                raise _numerical_failure("non-finite loss", p, cfg)
            try:
                grads = backward(tape, total)
            except FloatingPointError as e:
                raise _numerical_failure(str(e), p, cfg) from e
            grads, was_clipped = _clip(grads, cfg.clip_norm)
            if was_clipped:
                clipped += 1
                log.info("epoch %d: gradient clipped to norm %g", epoch, cfg.clip_norm)
            p, state = adam_step(p, grads, state, cfg)
            for kind, (_, value) in breakdown.items():
                if value is not None:
                    sums[kind] = sums.get(kind, 0.0) + value
            sums["_total"] = sums.get("_total", 0.0) + float(total.value)
            steps += 1
        train_loss = sums.pop("_total") / steps
        terms = {k: v / steps for k, v in sums.items()}
        corr = None
        if train_loss < best_train:
            best_train = train_loss
            rec = rollout(p, stimulus, trials=free_trials, seed=val_seed)
            rho = psth_correlation(rec.probs, data.train)
            rho = rho[np.isfinite(rho)]
            corr = float(rho.mean()) if rho.size else float("nan")
        val = None
        if epoch % cfg.eval_cadence == 0:
            val = validation_loss(p)
            if not np.isfinite(val):
                raise _numerical_failure("non-finite validation loss", p, cfg)
            if val < best_val:
                best_val, best_params, stale = val, p, 0
            else:
                stale += 1
        entry = TrainLogEntry(epoch, terms, train_loss, val, corr,
                              time.perf_counter() - start, clipped)
        history.append(entry)
        log.info("epoch %d train=%.6f val=%s", epoch, train_loss, val)
        if stale >= cfg.early_stop_patience:
            break
    return best_params, history


def _numerical_failure(message, p, cfg):
    path = None
    if cfg.checkpoint_dir:
        path = Path(cfg.checkpoint_dir) / "diagnostic.rsnp"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_params(path, p)
    return NumericalError(message, params=p, checkpoint=path)


def write_curve(path, history: list) -> None:
    """Training curve CSV: epoch, per-term train losses, train/validation loss, PSTH corr."""
    kinds = sorted({k for e in history for k in e.train_terms})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch"] + kinds + ["train_loss", "val_loss", "psth_corr"])
        for e in history:
            w.writerow([e.epoch] + [repr(e.train_terms.get(k, float("nan"))) for k in kinds]
                       + [repr(e.train_loss), "" if e.val_loss is None else repr(e.val_loss),
                          "" if e.psth_corr is None else repr(e.psth_corr)])


def write_log(path, cfg: TrainConfig, history: list) -> None:
    """JSON log; the header echoes every optimizer default. Wall time is left out
    so reruns are byte-identical."""
    entries = [_nan_to_none({k: v for k, v in dataclasses.asdict(e).items()
                             if k != "wall_time"}) for e in history]
    Path(path).write_text(json.dumps({"config": cfg.to_dict(), "entries": entries},
                                     indent=2, sort_keys=True) + "\n")
