"""GRU belief-state dynamics, prediction heads, and sequence unrolling.

The unroll enforces the foresight ordering: gates for step t are produced
from the belief state after step t-1, before the step-t observation is
consumed. Unselected feature columns are zero-filled by the gate product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gating import FeatureGroups
from .tensor import (
    ShapeError,
    Tensor,
    _accum,
    _node,
    _sigmoid_np,
    affine,
    binary_xent,
    matmul,
    softmax_xent,
)


@dataclass
class GruParams:
    """One GRU layer: update gate u, reset gate r, candidate state."""

    w_u: Tensor
    u_u: Tensor
    b_u: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def input_size(self) -> int:
        return self.w_u.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_u.shape[1]

    def parameters(self, prefix: str = "gru") -> dict[str, Tensor]:
        names = ("w_u", "u_u", "b_u", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


def gru_step(p: GruParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU update; the update gate interpolates toward the candidate.

    u = sig(Wu x + Uu h + bu), r = sig(Wr x + Ur h + br),
    cand = tanh(Wh x + Uh (r*h) + bh), h' = (1-u)*h + u*cand.

    Fused into a single tape node with an analytic backward: the per-step
    op count dominates unrolled training time.
    """
    if x.shape[1] != p.input_size or h_prev.shape[1] != p.hidden_size:
        raise ShapeError(f"gru_step: x {x.shape}, h {h_prev.shape}, "
                         f"layer {p.input_size}->{p.hidden_size}")
    xd, hd = x.data, h_prev.data
    u = _sigmoid_np(xd @ p.w_u.data + hd @ p.u_u.data + p.b_u.data)
    r = _sigmoid_np(xd @ p.w_r.data + hd @ p.u_r.data + p.b_r.data)
    rh = r * hd
    cand = np.tanh(xd @ p.w_h.data + rh @ p.u_h.data + p.b_h.data)
    out = hd + u * (cand - hd)

    def backward(g):
        du = g * (cand - hd)
        dc = g * u
        dh = g - g * u
        dac = dc * (1.0 - cand * cand)
        _accum(p.w_h, xd.T @ dac)
        _accum(p.u_h, rh.T @ dac)
        _accum(p.b_h, dac.sum(axis=0))
        dx = dac @ p.w_h.data.T
        drh = dac @ p.u_h.data.T
        dr = drh * hd
        dh = dh + drh * r
        dau = du * u * (1.0 - u)
        dar = dr * r * (1.0 - r)
        _accum(p.w_u, xd.T @ dau)
        _accum(p.u_u, hd.T @ dau)
        _accum(p.b_u, dau.sum(axis=0))
        _accum(p.w_r, xd.T @ dar)
        _accum(p.u_r, hd.T @ dar)
        _accum(p.b_r, dar.sum(axis=0))
        dx = dx + dau @ p.w_u.data.T + dar @ p.w_r.data.T
        dh = dh + dau @ p.u_u.data.T + dar @ p.u_r.data.T
        _accum(x, dx)
        _accum(h_prev, dh)

    return _node(out, (x, h_prev, *(p.parameters().values())), backward)


@dataclass
class PredictionHead:
    """Affine map from belief state to class (or per-label) logits."""

    weight: Tensor
    bias: Tensor
    mode: str = "multiclass"  # or "multilabel"

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def predict(head: PredictionHead, h: Tensor) -> Tensor:
    return affine(h, head.weight, head.bias)


def label_scale(mask) -> float:
    """Loss inflation factor (#cells / #observed cells) for missing labels."""
    m = np.asarray(mask, dtype=np.float64)
    observed = m.sum()
    if observed == 0:
        raise ValueError("degenerate batch: no labelled entries")
    return float(m.size / observed)


def masked_sequence_loss(step_logits, labels, mask, mode: str = "multiclass") -> Tensor:
    """Label loss over a [T, B] batch, averaged over observed entries.

    Equivalent to summing per-step losses over all timepoints, applying the
    missing-label scale factor from ``label_scale``, and normalizing by the
    total number of timepoint cells; masked entries contribute exactly zero
    gradient. Multiclass expects integer labels [T, B]; multilabel expects
    0/1 targets [T, B, C]. Raises on a batch with nothing observed.
    """
    labels = np.asarray(labels)
    m = np.asarray(mask, dtype=np.float32)
    observed = float(m.sum())
    if observed == 0:
        raise ValueError("degenerate batch: no labelled entries")
    total = None
    for t, logits_t in enumerate(step_logits):
        if mode == "multiclass":
            y_t = np.where(m[t] > 0, labels[t], 0)
            part = softmax_xent(logits_t, y_t, mask=m[t], reduction="sum")
        elif mode == "multilabel":
            y_t = np.where(m[t] > 0, labels[t], 0.0)
            part = binary_xent(logits_t, y_t, mask=m[t], reduction="sum")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        total = part if total is None else total + part
    return total * (1.0 / observed)


@dataclass
class StepGates:
    """Gate decision for one time step.

    ``forward`` multiplies the observation (None means no gating at all);
    ``sigma`` is the on-tape gate probability used by the sparsity penalty;
    ``hard`` and ``probs`` are numpy snapshots for traces and metrics.
    """

    forward: Tensor | None
    sigma: Tensor | None
    hard: np.ndarray
    probs: np.ndarray | None = None


@dataclass
class StepContext:
    """What a gating policy may look at when deciding step-t gates."""

    layers: list
    head: PredictionHead
    groups: FeatureGroups
    tau: float
    mode: str  # "train" or "eval"
    x_t: np.ndarray | None = None  # raw step observation (ARM side rollouts)
    y_t: np.ndarray | None = None
    mask_t: np.ndarray | None = None
    h_prev_all: list[np.ndarray] | None = None
    loss_weight: float = 1.0


@dataclass
class UnrollTrace:
    """Per-step record of one batched sequence pass."""

    logits: list  # Tensor [B, C] per step
    gates: np.ndarray  # [T, B, G] binary
    probs: np.ndarray | None  # [T, B, G] gate probabilities
    sigmas: list | None  # Tensor [B, G] per step, for the penalty
    states: list  # top-layer h Tensor per step


def unroll(layers, head, policy, groups, x_seq, *, mode, rng, tau,
           labels=None, mask=None, loss_weight: float = 1.0) -> UnrollTrace:
    """Run the gated recurrence over a [T, B, K] batch.

    Step order per t: gates from the previous belief state, gated
    observation, GRU layers, prediction. The policy never sees x_t before
    committing its gates; x_t is exposed on the context only for estimator
    side rollouts evaluating candidate gate configurations.
    """
    x_seq = np.asarray(x_seq, dtype=np.float32)
    if x_seq.ndim != 3 or x_seq.shape[0] < 1:
        raise ValueError(f"expected nonempty [T, B, K] input, got {x_seq.shape}")
    t_len, batch, _ = x_seq.shape
    hs = [Tensor(np.zeros((batch, layer.hidden_size), dtype=x_seq.dtype)) for layer in layers]

    expand = None
    if not groups.trivial:
        expand = Tensor(groups.expand.astype(x_seq.dtype))

    policy.reset(mode=mode, rng=rng, batch=batch)
    logits_steps, sigma_steps, state_steps = [], [], []
    gates_np = np.zeros((t_len, batch, groups.n_gates), dtype=np.float32)
    probs_np = None

    for t in range(t_len):
        ctx = StepContext(
            layers=layers, head=head, groups=groups, tau=tau, mode=mode,
            x_t=x_seq[t],
            y_t=None if labels is None else labels[t],
            mask_t=None if mask is None else mask[t],
            h_prev_all=[h.data for h in hs],
            loss_weight=loss_weight,
        )
        step = policy.step(t, hs[-1], ctx)
        gates_np[t] = step.hard
        if step.probs is not None:
            if probs_np is None:
                probs_np = np.zeros_like(gates_np)
            probs_np[t] = step.probs
        if step.sigma is not None:
            sigma_steps.append(step.sigma)

        x_t = Tensor(x_seq[t])
        if step.forward is not None:
            z = step.forward if expand is None else matmul(step.forward, expand)
            x_t = x_t * z
        inp = x_t
        for i, layer in enumerate(layers):
            hs[i] = gru_step(layer, hs[i], inp)
            inp = hs[i]
        logits_steps.append(predict(head, hs[-1]))
        state_steps.append(hs[-1])

    return UnrollTrace(
        logits=logits_steps,
        gates=gates_np,
        probs=probs_np,
        sigmas=sigma_steps if sigma_steps else None,
        states=state_steps,
    )
