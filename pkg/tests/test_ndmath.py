import math

import pytest
import torch

from oracles import central_diff, gradient_probe_error, rel_err
from revflow.ndmath import (
    DTYPE,
    AdamState,
    ConfigurationError,
    ContractError,
    Dense,
    DimensionError,
    NetSpec,
    NonFiniteError,
    ParamNet,
    adam_step,
    backward,
    forward_classifier,
    forward_velocity,
    sinusoidal_embedding,
)


def small_spec(**kw):
    base = dict(data_dim=2, hidden=(8, 8), time_embed_dim=4)
    base.update(kw)
    return NetSpec(**base)


def test_zero_final_layer_gives_zero_velocity():
    net = ParamNet(small_spec(), seed=3)
    x = torch.randn(5, 2, dtype=DTYPE)
    for t in (0.0, 0.3, 1.0):
        assert torch.equal(forward_velocity(net, x, t), torch.zeros(5, 2, dtype=DTYPE))


def test_forward_is_deterministic():
    a, b = ParamNet(small_spec(), seed=11), ParamNet(small_spec(), seed=11)
    for layer in (a.velocity_layers[-1], b.velocity_layers[-1]):
        layer.reset(torch.Generator().manual_seed(5))
    x = torch.randn(4, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    assert torch.equal(forward_velocity(a, x, 0.25), forward_velocity(a, x, 0.25))
    assert torch.equal(forward_velocity(a, x, 0.25), forward_velocity(b, x, 0.25))


def test_single_linear_layer_matches_hand_product():
    net = ParamNet(NetSpec(data_dim=3, hidden=(), time_embed_dim=4), seed=0)
    W = torch.tensor([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0], [2.0, 2.0, -1.0]], dtype=DTYPE)
    with torch.no_grad():
        layer = net.velocity_layers[0]
        layer.weight.zero_()
        layer.weight[:, :3] = W
    x = torch.tensor([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]], dtype=DTYPE)
    out = forward_velocity(net, x, 0.7)
    for i in range(2):
        for j in range(3):
            expected = sum(x[i, k].item() * W[j, k].item() for k in range(3))
            assert out[i, j].item() == pytest.approx(expected, abs=1e-14)


def test_dimension_mismatch_raises():
    net = ParamNet(small_spec(), seed=0)
    with pytest.raises(DimensionError):
        forward_velocity(net, torch.zeros(3, 5, dtype=DTYPE), 0.5)


def test_time_outside_unit_interval_rejected():
    net = ParamNet(small_spec(), seed=0)
    with pytest.raises(ContractError):
        forward_velocity(net, torch.zeros(1, 2, dtype=DTYPE), 1.5)


def test_non_finite_input_is_an_error():
    net = ParamNet(small_spec(), seed=0)
    x = torch.tensor([[float("nan"), 0.0]], dtype=DTYPE)
    with pytest.raises(NonFiniteError):
        forward_velocity(net, x, 0.5)


class TestClassifier:
    def test_zero_head_is_uniform(self):
        net = ParamNet(small_spec(classes=4), seed=0)
        with torch.no_grad():
            for p in net.head_parameters():
                p.zero_()
        probs = torch.softmax(forward_classifier(net, torch.randn(3, 2, dtype=DTYPE)), 1)
        assert torch.allclose(probs, torch.full((3, 4), 0.25, dtype=DTYPE), atol=0, rtol=0)

    def test_equal_logits_give_half(self):
        probs = torch.softmax(torch.tensor([[1.7, 1.7]], dtype=DTYPE), 1)
        assert probs.tolist() == [[0.5, 0.5]]

    def test_hand_set_head(self):
        net = ParamNet(small_spec(classes=2, head_hidden=()), seed=0)
        W = torch.tensor([[0.3, -1.0], [2.0, 0.7]], dtype=DTYPE)
        b = torch.tensor([0.1, -0.2], dtype=DTYPE)
        with torch.no_grad():
            net.head_layers[0].weight.copy_(W)
            net.head_layers[0].bias.copy_(b)
        logits = forward_classifier(net, torch.tensor([[1.0, 0.0]], dtype=DTYPE))
        assert logits[0].tolist() == pytest.approx([0.3 + 0.1, 2.0 - 0.2], abs=1e-15)

    def test_softmax_rows_sum_to_one(self):
        net = ParamNet(small_spec(classes=6), seed=2)
        probs = torch.softmax(forward_classifier(net, 3 * torch.randn(50, 2, dtype=DTYPE)), 1)
        assert (probs.sum(1) - 1).abs().max() < 1e-12

    def test_missing_head(self):
        with pytest.raises(ConfigurationError):
            forward_classifier(ParamNet(small_spec(), seed=0), torch.zeros(1, 2, dtype=DTYPE))


class TestBackward:
    def test_linear_sum_gradient_matches_finite_differences(self):
        layer = Dense(3, 2)
        layer.reset(torch.Generator().manual_seed(1))
        x = torch.tensor([[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]], dtype=DTYPE)
        grads = backward(layer(x).sum(), {"weight": layer.weight})
        # d/dW_jk sum_i sum_j (W x_i)_j = sum_i x_ik for every row j
        assert torch.allclose(grads["weight"], x.sum(0).expand(2, 3), atol=1e-15)
        W0 = layer.weight.detach().clone()
        for j in range(2):
            for k in range(3):
                e = torch.zeros_like(W0)
                e[j, k] = 1

                def f(W):
                    return ((x @ W.T) + layer.bias).sum()

                assert rel_err(central_diff(f, W0, e), grads["weight"][j, k].item()) < 1e-6

    def test_unreachable_parameter_has_zero_gradient(self):
        net = ParamNet(small_spec(classes=3), seed=0)
        params = dict(net.named_parameters())
        loss = forward_classifier(net, torch.randn(4, 2, dtype=DTYPE)).pow(2).sum()
        grads = backward(loss, params)
        for name, g in grads.items():
            if name.startswith("velocity_layers"):
                assert torch.equal(g, torch.zeros_like(g))

    def test_non_scalar_loss_rejected(self):
        layer = Dense(2, 2)
        with pytest.raises(ContractError):
            backward(layer(torch.ones(1, 2, dtype=DTYPE)), {"weight": layer.weight})


def _probe_gradient(module_fn, params: dict, probes: int, seed: int, tol: float):
    worst = gradient_probe_error(module_fn, params, backward(module_fn(), params), probes, seed)
    assert worst < tol, worst


@pytest.mark.parametrize("activation", ["identity", "tanh", "relu", "silu"])
def test_dense_gradient_check(activation):
    layer = Dense(5, 4, activation)
    layer.reset(torch.Generator().manual_seed(7))
    # offset inputs keep relu pre-activations away from the kink
    x = torch.randn(6, 5, generator=torch.Generator().manual_seed(8), dtype=DTYPE) + 0.1
    target = torch.randn(6, 4, generator=torch.Generator().manual_seed(9), dtype=DTYPE)
    _probe_gradient(lambda: ((layer(x) - target) ** 2).sum(), dict(layer.named_parameters()), 100, 0, 1e-5)


def test_velocity_net_gradient_check():
    net = ParamNet(small_spec(), seed=4)
    net.velocity_layers[-1].reset(torch.Generator().manual_seed(1))
    x = torch.randn(7, 2, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
    t = torch.rand(7, generator=torch.Generator().manual_seed(3), dtype=DTYPE)
    _probe_gradient(lambda: forward_velocity(net, x, t).pow(2).sum(), dict(net.named_parameters()), 100, 1, 1e-5)


def test_classifier_gradient_check():
    net = ParamNet(small_spec(classes=3), seed=4)
    z = torch.randn(9, 2, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
    y = torch.tensor([0, 1, 2] * 3)
    params = {k: p for k, p in net.named_parameters() if k.startswith("head")}
    _probe_gradient(lambda: torch.nn.functional.cross_entropy(forward_classifier(net, z), y), params, 100, 2, 1e-5)


def test_sinusoidal_embedding_shape_and_range():
    t = torch.linspace(0, 1, 11, dtype=DTYPE)
    emb = sinusoidal_embedding(t, 16)
    assert emb.shape == (11, 16)
    assert emb.abs().max() <= 1
    assert sinusoidal_embedding(t, 5).shape == (11, 5)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = {"w": torch.tensor([1.0, -2.0], dtype=DTYPE)}
        state = AdamState(learning_rate=0.1)
        adam_step(p, {"w": torch.zeros(2, dtype=DTYPE)}, state)
        assert p["w"].tolist() == [1.0, -2.0]
        assert state.step_count == 1
        assert torch.equal(state.first_moment["w"], torch.zeros(2, dtype=DTYPE))

    def test_moments_decay_under_zero_gradient(self):
        p = {"w": torch.tensor([1.0], dtype=DTYPE)}
        state = AdamState(learning_rate=0.1)
        adam_step(p, {"w": torch.tensor([2.0], dtype=DTYPE)}, state)
        m, v = state.first_moment["w"].clone(), state.second_moment["w"].clone()
        adam_step(p, {"w": torch.zeros(1, dtype=DTYPE)}, state)
        assert state.first_moment["w"].item() == pytest.approx(0.9 * m.item(), rel=1e-15)
        assert state.second_moment["w"].item() == pytest.approx(0.999 * v.item(), rel=1e-15)

    def test_first_step_is_lr_times_sign(self):
        # m_hat = g, v_hat = g^2 after bias correction: update = lr * g / (|g| + eps)
        for g in (3.0, -0.02):
            p = {"w": torch.tensor([0.0], dtype=DTYPE)}
            adam_step(p, {"w": torch.tensor([g], dtype=DTYPE)}, AdamState(learning_rate=1e-3))
            expected = -1e-3 * g / (abs(g) + 1e-8)
            assert p["w"].item() == pytest.approx(expected, rel=1e-12)

    def test_constant_gradient_update_approaches_lr_sign(self):
        p = {"w": torch.tensor([0.0, 0.0], dtype=DTYPE)}
        state = AdamState(learning_rate=1e-3)
        g = torch.tensor([0.5, -4.0], dtype=DTYPE)
        for _ in range(2000):
            before = p["w"].clone()
            adam_step(p, {"w": g}, state)
        delta = p["w"] - before
        assert delta.tolist() == pytest.approx([-1e-3, 1e-3], rel=1e-6)

    def test_nan_gradient_names_parameter(self):
        p = {"layer.weight": torch.zeros(2, dtype=DTYPE)}
        with pytest.raises(NonFiniteError, match="layer.weight"):
            adam_step(p, {"layer.weight": torch.tensor([0.0, float("nan")], dtype=DTYPE)}, AdamState())
        assert p["layer.weight"].tolist() == [0.0, 0.0]

    def test_adam_is_deterministic(self):
        def run():
            net = ParamNet(small_spec(), seed=1)
            params = dict(net.named_parameters())
            state = AdamState(learning_rate=1e-2)
            x = torch.randn(8, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
            for _ in range(5):
                loss = (forward_velocity(net, x, 0.3) - 1).pow(2).mean()
                adam_step(params, backward(loss, params), state)
            return torch.cat([p.detach().flatten() for p in params.values()])

        assert torch.equal(run(), run())


def test_exact_softmax_value():
    assert math.isclose(torch.softmax(torch.tensor([0.0, math.log(3.0)], dtype=DTYPE), 0)[1].item(), 0.75, rel_tol=1e-15)
