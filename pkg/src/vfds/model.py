"""Model assembly: recurrent layers, head, gating policy, initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import GruParams, PredictionHead
from .config import TrainConfig
from .gating import FeatureGroups, GateNetParams, GatePrior
from .policies import (
    AttentionGatePolicy,
    DynamicGatePolicy,
    NoSelectionPolicy,
    RandomGatePolicy,
    StaticGatePolicy,
)
from .tensor import Tensor

GATE_BIAS_INIT = 2.0  # gates mostly open at the start of training


@dataclass
class Model:
    layers: list[GruParams]
    head: PredictionHead
    policy: object
    groups: FeatureGroups
    prior: GatePrior

    def parameters(self) -> dict[str, Tensor]:
        """Named trainable tensors in a fixed, deterministic order."""
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(prefix=f"gru{i}"))
        out.update(self.head.parameters())
        out.update(self.policy.parameters())
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(np.float32), requires_grad=True)


def _gru_layer(rng, input_size: int, hidden: int) -> GruParams:
    def w():
        return _uniform(rng, (input_size, hidden), hidden)

    def u():
        return _uniform(rng, (hidden, hidden), hidden)

    def b():
        return _uniform(rng, (hidden,), hidden)

    return GruParams(w_u=w(), u_u=u(), b_u=b(), w_r=w(), u_r=u(), b_r=b(),
                     w_h=w(), u_h=u(), b_h=b())


def build_model(cfg: TrainConfig, n_features: int, n_outputs: int,
                mode: str, rng: np.random.Generator) -> Model:
    """Construct and initialize a model for the given data dimensions.

    Weights draw uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) in a pinned
    creation order (recurrent layers, head, policy) so equal seeds give
    bit-identical models. The gate net's output bias starts at +2.
    """
    if cfg.groups:
        groups = FeatureGroups(cfg.groups, n_features)
    else:
        groups = FeatureGroups.identity(n_features)
    n_gates = groups.n_gates

    layers = []
    in_size = n_features
    for hidden in cfg.hidden_sizes:
        layers.append(_gru_layer(rng, in_size, hidden))
        in_size = hidden
    top = cfg.hidden_sizes[-1]

    head = PredictionHead(
        weight=_uniform(rng, (top, n_outputs), top),
        bias=_uniform(rng, (n_outputs,), top),
        mode=mode,
    )

    if cfg.policy == "none":
        policy = NoSelectionPolicy(n_gates)
    elif cfg.policy == "vfds":
        hg = cfg.gate_hidden or n_gates
        net = GateNetParams(
            w1=_uniform(rng, (top, hg), top),
            b1=_uniform(rng, (hg,), top),
            w2=_uniform(rng, (hg, n_gates), hg),
            b2=Tensor(np.full(n_gates, GATE_BIAS_INIT, dtype=np.float32), requires_grad=True),
        )
        policy = DynamicGatePolicy(net, estimator=cfg.estimator)
    elif cfg.policy == "static":
        logits = Tensor(np.full(n_gates, GATE_BIAS_INIT, dtype=np.float32), requires_grad=True)
        policy = StaticGatePolicy(logits, estimator=cfg.estimator)
    elif cfg.policy == "random":
        policy = RandomGatePolicy(n_gates, cfg.random_p)
    elif cfg.policy == "attention":
        policy = AttentionGatePolicy(
            weight=_uniform(rng, (top, n_gates), top),
            bias=_uniform(rng, (n_gates,), top),
            alpha=cfg.alpha,
        )
    else:
        raise ValueError(f"unknown policy {cfg.policy!r}")

    costs = np.ones(n_gates) if cfg.costs is None else np.asarray(cfg.costs, dtype=np.float64)
    if costs.shape != (n_gates,):
        raise ValueError(f"expected {n_gates} gate costs, got shape {costs.shape}")
    prior = GatePrior(costs=costs, lam=cfg.lam)

    return Model(layers=layers, head=head, policy=policy, groups=groups, prior=prior)
