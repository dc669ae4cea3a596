import numpy as np
import pytest

from vfds.backbone import (
    GruParams,
    PredictionHead,
    StepGates,
    gru_step,
    label_scale,
    masked_sequence_loss,
    predict,
    unroll,
)
from vfds.config import TrainConfig
from vfds.gating import FeatureGroups
from vfds.model import build_model
from vfds.tensor import Tape, Tensor, finite_difference_check, softmax_xent


def zero_gru(k=3, h=2, dtype=np.float64):
    def z(shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    return GruParams(
        w_u=z((k, h)), u_u=z((h, h)), b_u=z(h),
        w_r=z((k, h)), u_r=z((h, h)), b_r=z(h),
        w_h=z((k, h)), u_h=z((h, h)), b_h=z(h),
    )


def random_gru(rng, k, h, dtype=np.float64, scale=0.5):
    def r(shape):
        return Tensor(rng.normal(0, scale, shape), requires_grad=True, dtype=dtype)

    return GruParams(
        w_u=r((k, h)), u_u=r((h, h)), b_u=r(h),
        w_r=r((k, h)), u_r=r((h, h)), b_r=r(h),
        w_h=r((k, h)), u_h=r((h, h)), b_h=r(h),
    )


class TestGruStep:
    def test_all_zero(self):
        p = zero_gru()
        h = Tensor(np.zeros((1, 2)), dtype=np.float64)
        x = Tensor(np.zeros((1, 3)), dtype=np.float64)
        np.testing.assert_allclose(gru_step(p, h, x).data, 0.0)

    def test_zero_weights_unit_state(self):
        # u = 0.5, candidate = 0, so the state halves
        p = zero_gru()
        h = Tensor(np.ones((1, 2)), dtype=np.float64)
        x = Tensor(np.zeros((1, 3)), dtype=np.float64)
        np.testing.assert_allclose(gru_step(p, h, x).data, 0.5)

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        p = random_gru(rng, 3, 4)
        x = Tensor(rng.normal(0, 1, (2, 3)), dtype=np.float64)
        h = Tensor(rng.normal(0, 0.5, (2, 4)), dtype=np.float64)
        params = list(p.parameters().values())
        err = finite_difference_check(lambda ps: gru_step(p, h, x).sum(), params, eps=1e-3)
        assert err < 1e-3

    def test_state_stays_bounded(self):
        rng = np.random.default_rng(1)
        p = random_gru(rng, 3, 4, scale=2.0)
        h = Tensor(np.zeros((2, 4)), dtype=np.float64)
        for _ in range(50):
            h = gru_step(p, h, Tensor(rng.normal(0, 3, (2, 3)), dtype=np.float64))
        assert np.abs(h.data).max() <= 1.0 + 1e-9


class TestPredict:
    def test_zero_weights_give_bias(self):
        head = PredictionHead(
            weight=Tensor(np.zeros((4, 3))), bias=Tensor([1.0, -2.0, 0.5])
        )
        h = Tensor(np.ones((2, 4)))
        np.testing.assert_allclose(predict(head, h).data, [[1.0, -2.0, 0.5]] * 2)

    def test_one_dim_affine(self):
        head = PredictionHead(weight=Tensor([[2.0]]), bias=Tensor([0.5]))
        np.testing.assert_allclose(predict(head, Tensor([[3.0]])).data, [[6.5]])

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        head = PredictionHead(
            weight=Tensor(rng.normal(0, 1, (4, 3)), requires_grad=True, dtype=np.float64),
            bias=Tensor(rng.normal(0, 1, 3), requires_grad=True, dtype=np.float64),
        )
        h = Tensor(rng.normal(0, 1, (2, 4)), dtype=np.float64)
        err = finite_difference_check(
            lambda ps: predict(head, h).sum(), [head.weight, head.bias], eps=1e-4
        )
        assert err < 1e-6


class TestMaskedSequenceLoss:
    def test_scale_factor(self):
        mask = np.zeros((10, 1))
        mask[:4] = 1.0
        assert label_scale(mask) == pytest.approx(2.5)

    def test_all_labelled_reduces_to_plain_mean(self):
        rng = np.random.default_rng(3)
        t_len, b, c = 4, 3, 5
        logits = [Tensor(rng.normal(0, 1, (b, c)), dtype=np.float64) for _ in range(t_len)]
        y = rng.integers(0, c, (t_len, b))
        mask = np.ones((t_len, b))
        assert label_scale(mask) == pytest.approx(1.0)
        loss = masked_sequence_loss(logits, y, mask).item()
        ref = np.mean(
            [softmax_xent(logits[t], y[t]).item() for t in range(t_len)]
        )
        assert loss == pytest.approx(ref, rel=1e-9)

    def test_masked_perturbation_changes_nothing(self):
        rng = np.random.default_rng(4)
        t_len, b, c = 5, 2, 3
        base = [rng.normal(0, 1, (b, c)) for _ in range(t_len)]
        y = rng.integers(0, c, (t_len, b))
        mask = (rng.random((t_len, b)) > 0.4).astype(float)
        mask[0, 0] = 0.0
        bumped = [a.copy() for a in base]
        bumped[0][0] += 50.0
        l0 = masked_sequence_loss([Tensor(a, dtype=np.float64) for a in base], y, mask).item()
        l1 = masked_sequence_loss([Tensor(a, dtype=np.float64) for a in bumped], y, mask).item()
        assert l0 == pytest.approx(l1, rel=1e-12)

    def test_masked_gradient_exactly_zero(self):
        rng = np.random.default_rng(5)
        t_len, b, c = 3, 2, 4
        logits = [
            Tensor(rng.normal(0, 1, (b, c)), requires_grad=True, dtype=np.float64)
            for _ in range(t_len)
        ]
        y = rng.integers(0, c, (t_len, b))
        mask = np.ones((t_len, b))
        mask[1, 0] = 0.0
        with Tape() as tape:
            tape.backward(masked_sequence_loss(logits, y, mask))
        assert np.all(logits[1].grad[0] == 0.0)
        assert np.any(logits[1].grad[1] != 0.0)

    def test_degenerate_batch_is_error(self):
        logits = [Tensor(np.zeros((2, 3)))]
        with pytest.raises(ValueError):
            masked_sequence_loss(logits, np.zeros((1, 2), dtype=int), np.zeros((1, 2)))

    def test_multilabel_observed_cell_scale(self):
        mask = np.zeros((5, 1, 4))
        mask[:2, :, :2] = 1.0  # 4 observed of 20 cells
        assert label_scale(mask) == pytest.approx(5.0)


class _FixedGatePolicy:
    """Test stub: emits a preset gate matrix every step."""

    def __init__(self, gates_row):
        self.row = np.asarray(gates_row, dtype=np.float32)
        self.n_gates = self.row.size

    def parameters(self):
        return {}

    def reset(self, *, mode, rng, batch):
        self._batch = batch

    def step(self, t, h_prev, ctx):
        z = np.tile(self.row, (self._batch, 1))
        return StepGates(forward=Tensor(z), sigma=None, hard=z)


def tiny_model(seed=0, policy="vfds", k=4, h=6, c=3, estimator="gs"):
    cfg = TrainConfig(policy=policy, estimator=estimator, hidden_sizes=[h])
    rng = np.random.default_rng(seed)
    return cfg, build_model(cfg, n_features=k, n_outputs=c, mode="multiclass", rng=rng)


class TestUnroll:
    def test_all_ones_matches_plain_gru(self):
        """No-selection run equals an ungated recurrence on raw inputs."""
        cfg, model = tiny_model(policy="none")
        rng = np.random.default_rng(10)
        x = rng.normal(0, 1, (7, 2, 4)).astype(np.float32)
        trace = unroll(model.layers, model.head, model.policy, model.groups,
                       x, mode="eval", rng=np.random.default_rng(0), tau=cfg.tau)

        h = Tensor(np.zeros((2, 6), dtype=np.float32))
        for t in range(7):
            h = gru_step(model.layers[0], h, Tensor(x[t]))
        np.testing.assert_array_equal(trace.states[-1].data, h.data)
        assert trace.gates.min() == 1.0

    def test_all_zero_gates_ignore_inputs(self):
        cfg, model = tiny_model()
        policy = _FixedGatePolicy(np.zeros(4))
        rng = np.random.default_rng(11)
        x1 = rng.normal(0, 1, (6, 2, 4)).astype(np.float32)
        x2 = rng.normal(0, 1, (6, 2, 4)).astype(np.float32)
        t1 = unroll(model.layers, model.head, policy, model.groups, x1,
                    mode="eval", rng=np.random.default_rng(0), tau=cfg.tau)
        t2 = unroll(model.layers, model.head, policy, model.groups, x2,
                    mode="eval", rng=np.random.default_rng(0), tau=cfg.tau)
        for a, b in zip(t1.logits, t2.logits):
            np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_foresight_gates_ignore_current_and_future_inputs(self, mode):
        """Perturbing x at times >= t never changes the step-t gates."""
        cfg, model = tiny_model()
        rng = np.random.default_rng(12)
        x = rng.normal(0, 1, (8, 3, 4)).astype(np.float32)
        t_probe = 4
        y = rng.integers(0, 3, (8, 3))
        mask = np.ones((8, 3))

        def gates_at(x_in):
            with Tape() as tape:
                tr = unroll(model.layers, model.head, model.policy, model.groups,
                            x_in, mode=mode, rng=np.random.default_rng(99), tau=cfg.tau,
                            labels=y, mask=mask)
            return tr.gates, tr.probs

        base_g, base_p = gates_at(x)
        bumped = x.copy()
        bumped[t_probe:] += 10.0
        bumped_g, bumped_p = gates_at(bumped)
        np.testing.assert_array_equal(base_g[: t_probe + 1], bumped_g[: t_probe + 1])
        np.testing.assert_array_equal(base_p[: t_probe + 1], bumped_p[: t_probe + 1])
        # sanity: earlier perturbation does reach later gate probabilities
        earlier = x.copy()
        earlier[0] += 10.0
        assert not np.array_equal(base_p[1:], gates_at(earlier)[1][1:])

    def test_two_layer_stack(self):
        cfg = TrainConfig(hidden_sizes=[5, 4], policy="vfds")
        model = build_model(cfg, n_features=3, n_outputs=2, mode="multiclass",
                            rng=np.random.default_rng(1))
        x = np.random.default_rng(2).normal(0, 1, (6, 2, 3)).astype(np.float32)
        trace = unroll(model.layers, model.head, model.policy, model.groups, x,
                       mode="eval", rng=np.random.default_rng(0), tau=cfg.tau)
        assert trace.states[-1].shape == (2, 4)
        assert trace.gates.shape == (6, 2, 3)

    def test_empty_sequence_rejected(self):
        cfg, model = tiny_model()
        with pytest.raises(ValueError):
            unroll(model.layers, model.head, model.policy, model.groups,
                   np.zeros((0, 2, 4)), mode="eval", rng=np.random.default_rng(0),
                   tau=cfg.tau)
