"""Training-time gate estimators: relaxed, straight-through, antithetic, l1.

Five ways to push gradients through (or around) the binary gates:

* ``gs``     relaxed gates, forward and backward both use the temperature-tau
             sigmoid surrogate;
* ``st``     hard sampled gates forward, identity jacobian onto the gate
             probability in backward;
* ``arm``    hard gates forward, antithetic two-evaluation gradient estimate
             injected at the gate logits, nothing propagated through the
             gates themselves;
* ``st-arm`` arm estimate at the logits plus identity pass-through of the
             incoming gate gradient onto the logits;
* ``l1``     no sampling at all, the gate probabilities themselves multiply
             the features and double as the penalty term.
"""

from __future__ import annotations

import numpy as np

from .gating import hard_gates_sampled, relaxed_gates, sample_logistic
from .tensor import _node, _accum

ESTIMATORS = ("gs", "st", "arm", "st-arm", "l1")


def l1_penalty(sigma, costs, lam: float) -> float:
    """Cost-weighted l1 norm lam * sum_k c_k sigma_k of the soft gates."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise ValueError("soft gates must be nonnegative")
    return float(lam * (sigma * np.asarray(costs, dtype=np.float64)).sum())


def arm_step_grad(logits, loss_eval, u) -> np.ndarray:
    """Antithetic gradient estimate for Bernoulli gate logits.

    g_k = [loss(1[u > sigmoid(-logits)]) - loss(1[u < sigmoid(logits)])]
          * (u_k - 1/2)

    is unbiased for d/d(logits_k) E_{z ~ Bern(sigmoid(logits))}[loss(z)].
    Both evaluations consume the same uniform draw ``u``; ``loss_eval`` maps
    a binary gate vector to a scalar.
    """
    logits = np.asarray(logits, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-logits))
    z_anti = (u > 1.0 - sig).astype(np.float32)
    z_main = (u < sig).astype(np.float32)
    if np.array_equal(z_anti, z_main):
        diff = 0.0
    else:
        diff = float(loss_eval(z_anti)) - float(loss_eval(z_main))
    return diff * (u - 0.5)


def training_gates(kind: str, sigma, eps, tau: float):
    """Forward gate values used in training for each estimator kind.

    ``eps`` is standard-logistic noise; ``arm``/``st-arm`` interpret it
    through u = sigmoid(eps) and gate on 1[u < sigma]. ``l1`` ignores the
    noise and returns the soft gates unchanged.
    """
    sigma = np.asarray(sigma)
    if kind == "gs":
        return relaxed_gates(sigma, eps, tau)
    if kind == "st":
        return hard_gates_sampled(sigma, eps)
    if kind in ("arm", "st-arm"):
        u = 1.0 / (1.0 + np.exp(-np.asarray(eps, dtype=np.float64)))
        return (u < sigma).astype(np.float32)
    if kind == "l1":
        return sigma
    raise ValueError(f"unknown estimator kind {kind!r}")


def relaxed_gate_node(logit_tensor, eps: np.ndarray, tau: float):
    """Fused temperature relaxation sigmoid((a + eps) / tau) of gate logits."""
    from .tensor import _sigmoid_np

    z = _sigmoid_np((logit_tensor.data + eps) / tau)

    def backward(g):
        _accum(logit_tensor, g * z * (1.0 - z) * (1.0 / tau))

    return _node(z.astype(logit_tensor.data.dtype), (logit_tensor,), backward)


def st_gate_node(sigma_tensor, values: np.ndarray):
    """Hard-valued gate node whose backward is identity onto sigma."""

    def backward(g):
        _accum(sigma_tensor, g)

    return _node(values.astype(sigma_tensor.data.dtype), (sigma_tensor,), backward)


def arm_gate_node(logit_tensor, values: np.ndarray, coeff: np.ndarray, pass_through: bool):
    """Hard-valued gate node injecting an ARM estimate at the gate logits.

    ``coeff`` is the precomputed ARM gradient of the (weighted) immediate
    loss. With ``pass_through`` the incoming gate gradient is also copied
    onto the logits (straight-through), carrying credit from later steps.
    """
    coeff = coeff.astype(logit_tensor.data.dtype)

    def backward(g):
        _accum(logit_tensor, coeff + g if pass_through else coeff)

    return _node(values.astype(logit_tensor.data.dtype), (logit_tensor,), backward)
