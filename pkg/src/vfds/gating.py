"""Bernoulli feature gates: cost prior, implicit sampling, relaxation, KL.

Each gate k has a prior open-probability exp(-eta * c_k) driven by its
observation cost c_k. The learned gate distribution is defined implicitly by
pushing standard-logistic noise through a threshold on the gate logit; a
temperature-tau sigmoid relaxation of that threshold makes training
differentiable, and the cost-weighted sum of gate probabilities is the
(large-N) approximation to the KL between the two.

Functions here are pure numpy and operate on probabilities/logits as plain
arrays; the on-tape wiring lives in the policy objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, sigmoid, _accum, _node, _sigmoid_np

EPS_U = 1e-7  # uniform/probability clamp keeping logits finite


@dataclass
class GatePrior:
    """Per-gate observation costs plus the sparsity weight.

    ``lam`` is the per-sample penalty weight; the prior parameter is
    eta = n_scale * lam.
    """

    costs: np.ndarray
    lam: float
    n_scale: int = 1

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if (self.costs < 0).any() or not np.isfinite(self.costs).all():
            raise ValueError("gate costs must be finite and nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    @property
    def eta(self) -> float:
        return self.n_scale * self.lam

    def probs(self) -> np.ndarray:
        """Prior open probabilities exp(-eta * c_k)."""
        return prior_prob(self.costs, self.eta)


def prior_prob(cost, eta: float):
    """Prior probability exp(-eta * cost) that a gate is open."""
    cost = np.asarray(cost, dtype=np.float64)
    if (cost < 0).any():
        raise ValueError("cost must be nonnegative")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return np.exp(-eta * cost)


def sample_logistic(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard-logistic noise via log u - log(1-u), u clamped off {0,1}."""
    u = np.clip(rng.random(shape), EPS_U, 1.0 - EPS_U)
    return np.log(u) - np.log1p(-u)


def logit(p):
    """log(p / (1-p)) with p clamped to [EPS_U, 1-EPS_U]."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS_U, 1.0 - EPS_U)
    return np.log(p) - np.log1p(-p)


def relaxed_gates(sigma, eps, tau: float):
    """Temperature-tau relaxation sigmoid((logit(sigma) + eps) / tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return _sigmoid_np((logit(sigma) + np.asarray(eps, dtype=np.float64)) / tau)


def hard_gates_sampled(sigma, eps) -> np.ndarray:
    """Binary gates 1[logit(sigma) + eps > 0]; mean over noise equals sigma."""
    return (logit(sigma) + np.asarray(eps) > 0).astype(np.float32)


def hard_gates_deterministic(sigma) -> np.ndarray:
    """Noise-free test-time gates 1[sigma > 1/2] (closed at exactly 1/2)."""
    return (np.asarray(sigma) > 0.5).astype(np.float32)


def kl_penalty_approx(sigma, prior: GatePrior) -> float:
    """Cost-weighted gate activity lam * sum_k c_k sigma_k.

    Large-n_scale approximation of the per-sample KL between the gate
    distribution and its cost prior. Accepts a gate vector or any array whose
    trailing axis runs over gates; leading axes are summed too.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(prior.lam * (sigma * prior.costs).sum())


def kl_exact(sigma, prior: GatePrior) -> float:
    """Exact Bernoulli KL(q || p) summed over gates, p_k = exp(-eta c_k).

    Works in log space (log p = -eta c) so very sharp priors do not
    underflow; rejects the degenerate priors p in {0, 1}.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    ec = prior.eta * prior.costs
    if (ec == 0).any() or not np.isfinite(ec).all():
        raise ValueError("prior probabilities must lie strictly inside (0, 1)")
    log_p = -ec
    log_1mp = np.log1p(-np.exp(-ec))
    s = np.clip(sigma, EPS_U, 1.0 - EPS_U)
    kl = s * (np.log(s) - log_p) + (1.0 - s) * (np.log1p(-s) - log_1mp)
    return float(np.broadcast_to(kl, np.broadcast_shapes(sigma.shape, ec.shape)).sum())


@dataclass
class FeatureGroups:
    """Disjoint covering groups of feature columns, one gate per group."""

    groups: list[list[int]]
    n_features: int
    expand: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        seen = set()
        for cols in self.groups:
            for c in cols:
                if c < 0 or c >= self.n_features:
                    raise ValueError(f"column {c} outside [0, {self.n_features})")
                if c in seen:
                    raise ValueError(f"column {c} assigned to more than one group")
                seen.add(c)
        if len(seen) != self.n_features:
            missing = sorted(set(range(self.n_features)) - seen)
            raise ValueError(f"columns not covered by any group: {missing}")
        e = np.zeros((len(self.groups), self.n_features), dtype=np.float32)
        for g, cols in enumerate(self.groups):
            e[g, cols] = 1.0
        self.expand = e

    @classmethod
    def identity(cls, n_features: int) -> "FeatureGroups":
        return cls([[k] for k in range(n_features)], n_features)

    @property
    def n_gates(self) -> int:
        return len(self.groups)

    @property
    def trivial(self) -> bool:
        return len(self.groups) == self.n_features and all(
            cols == [g] for g, cols in enumerate(self.groups)
        )


def apply_gates(x: np.ndarray, z: np.ndarray, groups: FeatureGroups) -> np.ndarray:
    """Multiply every column of x by its group's gate (relaxed or hard)."""
    z = np.asarray(z)
    if z.shape[-1] != groups.n_gates:
        raise ValueError(f"expected {groups.n_gates} gates, got {z.shape[-1]}")
    if x.shape[-1] != groups.n_features:
        raise ValueError(f"expected {groups.n_features} columns, got {x.shape[-1]}")
    if groups.trivial:
        return x * z
    return x * (z @ groups.expand)


@dataclass
class GateNetParams:
    """Two-layer gate network: hidden ReLU layer then sigmoid output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def parameters(self) -> dict[str, Tensor]:
        return {"gate.w1": self.w1, "gate.b1": self.b1, "gate.w2": self.w2, "gate.b2": self.b2}

    @property
    def n_gates(self) -> int:
        return self.w2.shape[1]


def gate_logits(net: GateNetParams, h: Tensor) -> Tensor:
    """Pre-sigmoid gate activations from the belief state.

    Fused ReLU-hidden-layer affine pair as one tape node; runs once per
    unrolled step.
    """
    hd = h.data
    hidden = np.maximum(hd @ net.w1.data + net.b1.data, 0.0)
    out = hidden @ net.w2.data + net.b2.data

    def backward(g):
        _accum(net.w2, hidden.T @ g)
        _accum(net.b2, g.sum(axis=0))
        dhid = (g @ net.w2.data.T) * (hidden > 0)
        _accum(net.w1, hd.T @ dhid)
        _accum(net.b1, dhid.sum(axis=0))
        _accum(h, dhid @ net.w1.data.T)

    return _node(out, (h, net.w1, net.b1, net.w2, net.b2), backward)


def gate_probabilities(net: GateNetParams, h: Tensor) -> Tensor:
    """Gate open-probabilities sigmoid(W2 relu(W1 h + b1) + b2)."""
    return sigmoid(gate_logits(net, h))
