"""Gating policies: learned dynamic gates and the baseline selectors.

Every policy answers one question per step: which feature groups does the
model observe next, given only the belief state carried over from the
previous step. Training-mode gates may be stochastic or relaxed; eval mode
is the deterministic protocol (threshold at 1/2 for Bernoulli-style
policies, attention thresholding at alpha, fresh draws for random).
"""

from __future__ import annotations

import numpy as np

from .backbone import StepContext, StepGates
from .estimators import arm_gate_node, relaxed_gate_node, st_gate_node
from .gating import (
    GateNetParams,
    gate_logits,
    hard_gates_sampled,
    sample_logistic,
)
from .tensor import Tensor, add_bias, matmul, sigmoid, softmax
from .tensor import _sigmoid_np

POLICIES = ("vfds", "none", "static", "random", "attention")


class NoSelectionPolicy:
    """Plain recurrent model: every feature observed at every step."""

    def __init__(self, n_gates: int):
        self.n_gates = n_gates

    def parameters(self):
        return {}

    def reset(self, *, mode, rng, batch):
        self._ones = np.ones((batch, self.n_gates), dtype=np.float32)

    def step(self, t, h_prev, ctx: StepContext) -> StepGates:
        return StepGates(forward=None, sigma=None, hard=self._ones)


class DynamicGatePolicy:
    """Belief-conditioned gates from a two-layer net over the hidden state."""

    def __init__(self, net: GateNetParams, estimator: str = "gs"):
        self.net = net
        self.estimator = estimator
        self.n_gates = net.n_gates

    def parameters(self):
        return self.net.parameters()

    def reset(self, *, mode, rng, batch):
        self._rng = rng

    def _logits(self, h_prev, ctx):
        return gate_logits(self.net, h_prev)

    def step(self, t, h_prev, ctx: StepContext) -> StepGates:
        a = self._logits(h_prev, ctx)
        sig = sigmoid(a)
        if ctx.mode == "eval":
            hard = (a.data > 0).astype(np.float32)
            return StepGates(forward=Tensor(hard), sigma=None, hard=hard, probs=sig.data)
        return _estimator_gates(self.estimator, a, sig, ctx, self._rng)


class StaticGatePolicy(DynamicGatePolicy):
    """Same gate machinery with global, input-independent logits."""

    def __init__(self, logits: Tensor, estimator: str = "gs"):
        self.logits = logits
        self.estimator = estimator
        self.n_gates = logits.shape[0]

    def parameters(self):
        return {"static.logits": self.logits}

    def _logits(self, h_prev, ctx):
        batch = h_prev.shape[0]
        zeros = Tensor(np.zeros((batch, self.n_gates), dtype=np.float32))
        return add_bias(zeros, self.logits)


class RandomGatePolicy:
    """Independent Bernoulli(p) gates per step, train and eval alike."""

    def __init__(self, n_gates: int, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError("gate probability must lie in [0, 1]")
        self.n_gates = n_gates
        self.p = p

    def parameters(self):
        return {}

    def reset(self, *, mode, rng, batch):
        self._rng = rng

    def step(self, t, h_prev, ctx: StepContext) -> StepGates:
        batch = h_prev.shape[0]
        z = (self._rng.random((batch, self.n_gates)) < self.p).astype(np.float32)
        return StepGates(forward=Tensor(z), sigma=None, hard=z)


class AttentionGatePolicy:
    """Soft attention over feature groups, hard-thresholded at eval time.

    Training multiplies features by the softmax weights; evaluation keeps
    groups whose weight exceeds alpha, scales them by (1 - alpha), and zeros
    the rest.
    """

    def __init__(self, weight: Tensor, bias: Tensor, alpha: float):
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        self.weight = weight
        self.bias = bias
        self.alpha = alpha
        self.n_gates = weight.shape[1]

    def parameters(self):
        return {"attention.weight": self.weight, "attention.bias": self.bias}

    def reset(self, *, mode, rng, batch):
        pass

    def step(self, t, h_prev, ctx: StepContext) -> StepGates:
        w = softmax(add_bias(matmul(h_prev, self.weight), self.bias))
        keep = (w.data > self.alpha).astype(np.float32)
        if ctx.mode == "eval":
            vals = (1.0 - self.alpha) * keep
            return StepGates(forward=Tensor(vals), sigma=None, hard=keep, probs=w.data)
        return StepGates(forward=w, sigma=None, hard=keep, probs=w.data)


def static_gates(logits, eps, tau: float) -> np.ndarray:
    """Relaxed gates from global logits, same machinery as the dynamic path."""
    from .gating import relaxed_gates

    return relaxed_gates(_sigmoid_np(np.asarray(logits, dtype=np.float64)), eps, tau)


def random_gates(p: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p) gates; expected selection rate is p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("gate probability must lie in [0, 1]")
    return (rng.random(shape) < p).astype(np.float32)


def attention_select(weights, alpha: float):
    """Threshold softmax attention weights at alpha.

    Returns (gate values, keep mask): groups with weight > alpha are kept and
    scaled by (1 - alpha), all others zeroed.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    w = np.asarray(weights)
    keep = (w > alpha).astype(np.float32)
    return (1.0 - alpha) * keep, keep


def _estimator_gates(kind, a, sig, ctx: StepContext, rng) -> StepGates:
    """Training-mode gate node for Bernoulli-style policies.

    ``a`` is the on-tape pre-sigmoid gate activation (the logit of sigma),
    used directly instead of re-deriving logit(sigmoid(a)).
    """
    batch, n_gates = a.shape
    if kind == "gs":
        eps = sample_logistic((batch, n_gates), rng).astype(np.float32)
        zt = relaxed_gate_node(a, eps, ctx.tau)
        hard = (zt.data > 0.5).astype(np.float32)
        return StepGates(forward=zt, sigma=sig, hard=hard, probs=sig.data)
    if kind == "st":
        eps = sample_logistic((batch, n_gates), rng)
        z = hard_gates_sampled(sig.data, eps)
        return StepGates(forward=st_gate_node(sig, z), sigma=sig, hard=z, probs=sig.data)
    if kind == "l1":
        hard = (sig.data > 0.5).astype(np.float32)
        return StepGates(forward=sig, sigma=sig, hard=hard, probs=sig.data)
    if kind in ("arm", "st-arm"):
        u = rng.random((batch, n_gates))
        z_main = (u < sig.data).astype(np.float32)
        z_anti = (u > 1.0 - sig.data).astype(np.float32)
        if np.array_equal(z_main, z_anti):
            coeff = np.zeros_like(z_main)
        else:
            diff = _immediate_loss(ctx, z_anti) - _immediate_loss(ctx, z_main)
            coeff = ctx.loss_weight * diff[:, None] * (u - 0.5)
        node = arm_gate_node(a, z_main, coeff, pass_through=(kind == "st-arm"))
        return StepGates(forward=node, sigma=sig, hard=z_main, probs=sig.data)
    raise ValueError(f"unknown estimator kind {kind!r}")


def _immediate_loss(ctx: StepContext, z: np.ndarray) -> np.ndarray:
    """Per-element masked label loss of this step under gate config z.

    Pure numpy side rollout sharing the main pass's previous hidden states;
    used by the antithetic estimators.
    """
    if ctx.y_t is None or ctx.mask_t is None:
        return np.zeros(z.shape[0], dtype=np.float64)
    x = ctx.x_t * (z if ctx.groups.trivial else z @ ctx.groups.expand)
    inp = x
    for layer, h in zip(ctx.layers, ctx.h_prev_all):
        u = _sigmoid_np(inp @ layer.w_u.data + h @ layer.u_u.data + layer.b_u.data)
        r = _sigmoid_np(inp @ layer.w_r.data + h @ layer.u_r.data + layer.b_r.data)
        c = np.tanh(inp @ layer.w_h.data + (r * h) @ layer.u_h.data + layer.b_h.data)
        inp = h + u * (c - h)
    logits = inp @ ctx.head.weight.data + ctx.head.bias.data
    mask = np.asarray(ctx.mask_t, dtype=np.float64)
    if ctx.head.mode == "multiclass":
        y = np.where(mask > 0, ctx.y_t, 0).astype(np.int64)
        mx = logits.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
        return (lse - logits[np.arange(len(y)), y]) * mask
    y = np.where(mask > 0, ctx.y_t, 0.0)
    bce = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    return (bce * mask).sum(axis=1)
