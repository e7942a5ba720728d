"""Reverse-mode differentiation through stochastic rollouts.

A :class:`Tape` records nodes in execution order. Each node keeps its forward
value, the indices of its inputs and a vector-Jacobian product. Sampled spike
nodes are differentiated with the straight-through pseudo-derivative
``gamma * max(0, 1 - |u|)``; clamped spikes are constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .network import (
    ClampSpec,
    NetworkParams,
    RolloutRecord,
    _step_potential,
    make_noise,
    stimulus_rows,
    threshold_distance,
)


def pseudo_derivative(u, gamma: float):
    return gamma * np.maximum(0.0, 1.0 - np.abs(u))


@dataclass(eq=False)
class Node:
    index: int
    kind: str
    value: object
    inputs: tuple = ()
    vjp: Optional[Callable] = None

    def __float__(self):
        return float(self.value)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def add(self, kind: str, value, inputs: Sequence[Node] = (), vjp=None) -> Node:
        for x in inputs:
            if x.index >= len(self.nodes) or self.nodes[x.index] is not x:
                raise ValueError("input node does not belong to this tape")
        node = Node(len(self.nodes), kind, value, tuple(x.index for x in inputs), vjp)
        self.nodes.append(node)
        return node

    def const(self, value, kind: str = "const") -> Node:
        return self.add(kind, value)

    def param(self, name: str, value) -> Node:
        """Leaf for a trainable tensor, shared by every rollout on this tape."""
        node = self.params.get(name)
        if node is None:
            node = self.params[name] = self.add("param", value)
        elif node.value is not value and not np.array_equal(node.value, value):
            raise ValueError(f"parameter {name!r} already bound to a different value")
        return node

    def nodes_of_kind(self, kind: str) -> list[Node]:
        return [x for x in self.nodes if x.kind == kind]


@dataclass
class Gradients:
    dW: np.ndarray
    db: np.ndarray

    def __add__(self, other):
        return Gradients(self.dW + other.dW, self.db + other.db)

    def __mul__(self, a: float):
        return Gradients(a * self.dW, a * self.db)

    __rmul__ = __mul__

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum(self.dW ** 2) + np.sum(self.db ** 2)))


def backward(tape: Tape, loss: Node) -> Gradients:
    """Adjoints of every node w.r.t. the scalar ``loss``; returns ``dW``, ``db``."""
    if np.ndim(loss.value) != 0:
        raise ValueError(f"loss node must be scalar, got shape {np.shape(loss.value)}")
    adj: list = [None] * len(tape.nodes)
    adj[loss.index] = 1.0
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = adj[node.index]
        if g is None or node.vjp is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite adjoint at node {node.index} ({node.kind})")
        for i, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            adj[i] = gi if adj[i] is None else adj[i] + gi
    out = {}
    for name in ("W", "b"):
        node = tape.params.get(name)
        if node is None:
            raise ValueError(f"parameter {name!r} is not on the tape")
        g = adj[node.index]
        g = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = g
    return Gradients(out["W"], out["b"])


# -- primitive nodes ---------------------------------------------------------

def potential_step(tape, W: Node, b: Node, history: list, drive, v_thr: float,
                   trials: int = 1) -> Node:
    """Affine accumulate for one step: ``u_t`` (``[trials, n]``) from spike history nodes."""
    rows = [None if z is None else z.value for z in history]
    v = _step_potential(W.value, b.value, rows, drive)
    u = threshold_distance(np.broadcast_to(v, (trials, v.shape[-1])).copy(), v_thr)
    live = [(d, z) for d, z in enumerate(history) if z is not None]

    def vjp(g):
        gv = g / v_thr
        gW = np.zeros_like(W.value)
        gz = []
        for d, z in live:
            gW[:, :, d] = gv.T @ z.value
            gz.append(None if z.vjp is None else gv @ W.value[:, :, d])
        return [gW, gv.sum(axis=0)] + gz

    return tape.add("affine", u, [W, b] + [z for _, z in live], vjp)


def potential_sequence(tape, W: Node, b: Node, spikes, stimulus, v_thr: float) -> Node:
    """Affine accumulate over a whole fully-clamped sequence (spikes are data)."""
    from .network import clamped_potentials

    spikes = np.asarray(spikes, dtype=np.float64)
    u = clamped_potentials(W.value, b.value, spikes, stimulus, v_thr)
    d_max = W.value.shape[2]
    n = spikes.shape[2]

    def vjp(g):
        gv = g / v_thr
        gW = np.empty_like(W.value)
        for d in range(1, d_max + 1):
            gW[:, :, d - 1] = (gv[:, d:].reshape(-1, n).T
                               @ spikes[:, :-d].reshape(-1, n)) if d < spikes.shape[1] else 0.0
        return [gW, gv.sum(axis=(0, 1))]

    return tape.add("affine", u, [W, b], vjp)


def sigmoid(tape, u: Node) -> Node:
    s = expit(u.value)
    return tape.add("logistic", s, [u], lambda g: [g * s * (1.0 - s)])


def spike(tape, u: Node, probs: Node, noise, gamma: float, reference=None) -> Node:
    """Bernoulli sample ``noise < probs`` with the pseudo-derivative on backward.

    ``reference`` (``[K, c]``) overrides the first ``c`` neurons; those entries
    get zero derivative.
    """
    z = (noise < probs.value).astype(np.float64)
    c = 0
    if reference is not None:
        c = reference.shape[1]
        z[:, :c] = reference

    def vjp(g):
        # probs are recomputed from u; only u is kept for the backward pass
        gu = g * pseudo_derivative(u.value, gamma)
        if c:
            gu[:, :c] = 0.0
        return [gu]

    return tape.add("spike", z, [u], vjp)


def stack_time(tape, rows: list[Node], kind: str = "stack") -> Node:
    value = np.stack([r.value for r in rows], axis=1)
    return tape.add(kind, value, rows, lambda g: [g[:, t] for t in range(g.shape[1])])


def reduce(tape, x: Node, value_fn, grad_fn, kind: str = "loss") -> Node:
    """Composite scalar reduction with an analytic gradient."""
    return tape.add(kind, float(value_fn(x.value)), [x],
                    lambda g: [g * grad_fn(x.value)])


def weighted_sum(tape, terms: Sequence[Node], weights: Sequence[float]) -> Node:
    weights = [float(w) for w in weights]
    value = 0.0
    for w, x in zip(weights, terms):
        value += w * x.value
    return tape.add("sum", value, list(terms), lambda g: [w * g for w in weights])


# -- rollout on a tape -------------------------------------------------------

def taped_rollout(tape: Tape, p: NetworkParams, stimulus, trials: int,
                  clamp: ClampSpec, noise=None, seed=None) -> RolloutRecord:
    W = tape.param("W", p.W)
    b = tape.param("b", p.b)
    T = stimulus.shape[-2]
    n = p.n_total

    if clamp.fully_clamped(p, T):
        spikes = clamp.reference
        tape.const(spikes, kind="clamp")
        u = potential_sequence(tape, W, b, spikes, stimulus, p.v_thr)
        probs = sigmoid(tape, u)
        return RolloutRecord(spikes.copy(), probs.value, u.value, clamp, p.n_visible,
                             tape=tape, probs_node=probs)

    if noise is None:
        noise = make_noise(seed, trials, T, n)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (trials, T, n):
        raise ValueError(f"noise must have shape {(trials, T, n)}, got {noise.shape}")

    zs: list[Node] = []
    us, ps = [], []
    for t in range(T):
        history = [zs[t - d] if t - d >= 0 else None for d in range(1, p.d_max + 1)]
        u = potential_step(tape, W, b, history, stimulus_rows(stimulus, t), p.v_thr, trials)
        s = sigmoid(tape, u)
        c = clamp.clamped_columns(t)
        if c == n:
            z = tape.const(clamp.reference[:, t].astype(np.float64), kind="clamp")
        else:
            ref = clamp.reference[:, t].astype(np.float64) if c else None
            z = spike(tape, u, s, noise[:, t], p.gamma, ref)
        zs.append(z)
        us.append(u.value)
        ps.append(s)
    probs = stack_time(tape, ps)
    spikes = np.stack([z.value for z in zs], axis=1).astype(np.uint8)
    return RolloutRecord(spikes, probs.value, np.stack(us, axis=1), clamp, p.n_visible,
                         tape=tape, probs_node=probs)


# -- finite differences ------------------------------------------------------

@dataclass
class FiniteDifferenceReport:
    """Central-difference comparison on a subset of parameters.

    Agreement is only expected on smooth paths (fully clamped losses). On free
    rollouts the straight-through gradient is biased by construction, and any
    entry whose ``±step`` evaluations sample different spikes is flagged in
    ``discontinuities``.
    """

    entries: list = field(default_factory=list)  # (name, index, engine, fd, rel_err)
    discontinuities: list = field(default_factory=list)  # (name, index)
    floor: float = 1e-6

    @property
    def max_rel_error(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean([e[4] for e in self.entries])) if self.entries else 0.0

    @property
    def smooth(self) -> bool:
        return not self.discontinuities


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _spike_fingerprint(tape: Tape):
    return [x.value for x in tape.nodes_of_kind("spike")]


def finite_difference_check(loss_fn, p: NetworkParams, noise, step: float,
                            subset=None, floor: float = 1e-6) -> FiniteDifferenceReport:
    """Compare engine gradients with central differences.

    ``loss_fn(params, noise, tape)`` must build its loss on ``tape`` and return
    the scalar node; it must be deterministic given ``(params, noise)``.
    ``subset`` is a list of ``(name, index)`` pairs with name ``"W"`` or ``"b"``;
    by default every entry is checked.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    tape = Tape()
    grads = backward(tape, loss_fn(p, noise, tape))
    if subset is None:
        subset = [("W", idx) for idx in np.ndindex(p.W.shape)]
        subset += [("b", (j,)) for j in range(p.n_total)]
    report = FiniteDifferenceReport(floor=floor)
    for name, idx in subset:
        idx = tuple(np.atleast_1d(idx))
        values, prints = [], []
        for sign in (1.0, -1.0):
            arr = (p.W if name == "W" else p.b).copy()
            arr[idx] += sign * step
            q = p.replace(**{name: arr})
            t = Tape()
            values.append(float(loss_fn(q, noise, t).value))
            prints.append(_spike_fingerprint(t))
        fd = (values[0] - values[1]) / (2.0 * step)
        engine = float((grads.dW if name == "W" else grads.db)[idx])
        report.entries.append((name, idx, engine, fd, relative_error(engine, fd, floor)))
        if len(prints[0]) != len(prints[1]) or any(
                not np.array_equal(a, c) for a, c in zip(*prints)):
            report.discontinuities.append((name, idx))
    return report
