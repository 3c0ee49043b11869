import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from demorl.diffnet import (LayerSpec, Network, NetworkSpec, Optimizer, conv, count_parameters, dense, flatten,
                            full_scale_specs, infer_shapes, load_checkpoint, reshape, save_checkpoint, upsample)
from demorl.errors import CheckpointError, ConfigurationError, TrainingError, UsageError


def _zero_(net):
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()


def test_zero_weight_dense_gives_zero_output():
    net = Network(NetworkSpec((5,), (dense(5, 3),)))
    _zero_(net)
    out = net(torch.randn(4, 5))
    assert torch.equal(out, torch.zeros(4, 3))


def test_identity_dense_layer():
    net = Network(NetworkSpec((2,), (dense(2, 2),)))
    with torch.no_grad():
        net.body[0].weight.copy_(torch.eye(2))
        net.body[0].bias.zero_()
    x = torch.tensor([[1.0, 2.0]])
    assert torch.equal(net(x), x)


def test_two_layer_mlp_matches_straight_line_recomputation():
    net = Network(NetworkSpec((4,), (dense(4, 6, "relu"), dense(6, 3, "tanh"))), seed=3, dtype=torch.float64)
    x = np.random.default_rng(0).normal(size=(5, 4))
    w1, b1 = net.body[0][0].weight.detach().numpy(), net.body[0][0].bias.detach().numpy()
    w2, b2 = net.body[1][0].weight.detach().numpy(), net.body[1][0].bias.detach().numpy()
    expected = np.tanh(np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2)
    got = net(torch.from_numpy(x)).detach().numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_input_shape_mismatch_is_configuration_error():
    net = Network(NetworkSpec((3,), (dense(3, 2),)))
    with pytest.raises(ConfigurationError):
        net(torch.zeros(1, 4))


def test_incompatible_layers_rejected():
    with pytest.raises(ConfigurationError):
        infer_shapes(NetworkSpec((3,), (dense(3, 4), dense(5, 2))))
    with pytest.raises(ConfigurationError):
        infer_shapes(NetworkSpec((3, 4, 4), (conv(2, 4, 3),)))
    with pytest.raises(ConfigurationError):
        infer_shapes(NetworkSpec((6,), (reshape(4, 2),)))


def test_backward_scalar_square():
    w = torch.tensor(3.0, requires_grad=True)
    (w * w).backward()
    assert w.grad.item() == 6.0


def test_backward_without_run_is_usage_error():
    net = Network(NetworkSpec((2,), (dense(2, 2),)))
    with pytest.raises(UsageError):
        net.backward(torch.ones(1, 2))


def test_zero_upstream_gives_zero_gradients():
    net = Network(NetworkSpec((3,), (dense(3, 4, "relu"), dense(4, 2))), seed=1)
    net.run(torch.randn(2, 3))
    gx = net.backward(torch.zeros(2, 2))
    assert torch.count_nonzero(gx) == 0
    for p in net.parameters():
        assert torch.count_nonzero(p.grad) == 0


def test_run_is_pure():
    net = Network(NetworkSpec((3,), (dense(3, 4, "relu", norm=True), dense(4, 2))), seed=1)
    x = torch.randn(2, 3)
    assert torch.equal(net.run(x), net.run(x))


LAYER_CASES = {
    "dense": NetworkSpec((4,), (dense(4, 3),)),
    "dense_relu": NetworkSpec((4,), (dense(4, 3, "relu"),)),
    "dense_tanh": NetworkSpec((4,), (dense(4, 3, "tanh"),)),
    "dense_norm": NetworkSpec((4,), (dense(4, 3, norm=True),)),
    "conv": NetworkSpec((2, 6, 6), (conv(2, 3, 3, 2, 1),)),
    "conv_norm_relu": NetworkSpec((2, 6, 6), (conv(2, 3, 3, 1, activation="relu", norm=True),)),
    "flatten": NetworkSpec((2, 3, 3), (flatten(), dense(18, 2))),
    "reshape": NetworkSpec((8,), (reshape(2, 2, 2), conv(2, 1, 1))),
    "upsample": NetworkSpec((1, 2, 2), (upsample(2), conv(1, 2, 3, 1, 1))),
}


def _finite_difference_check(spec, seed, h):
    """Compare autograd against central differences for input and parameters."""
    torch.manual_seed(seed)
    net = Network(spec, seed=seed, dtype=torch.float64)
    x = torch.randn(2, *spec.input_shape, dtype=torch.float64)
    up = torch.randn(2, *spec.output_shape(), dtype=torch.float64)

    def f(inp):
        with torch.no_grad():
            return float((net(inp) * up).sum())

    net.run(x)
    gx = net.backward(up)
    targets = [(x, gx)] + [(p, p.grad.clone()) for p in net.parameters()]
    worst = 0.0
    for tensor, grad in targets:
        flat = tensor.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            fp = f(x)
            flat[k] = old - h
            fm = f(x)
            flat[k] = old
            num = (fp - fm) / (2 * h)
            ana = grad.view(-1)[k].item()
            worst = max(worst, abs(num - ana) / max(1.0, abs(num), abs(ana)))
    return worst


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_backward_matches_finite_differences_64bit(name):
    assert _finite_difference_check(LAYER_CASES[name], seed=7, h=1e-4) < 1e-6


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.integers(1, 5), act=st.sampled_from([None, "relu", "tanh"]),
       norm=st.booleans())
def test_random_mlp_finite_differences(seed, width, act, norm):
    spec = NetworkSpec((3,), (dense(3, width, act, norm=norm), dense(width, 2)))
    # ReLU kinks can sit within h of an input; relative error 1e-3 per spec tolerance
    assert _finite_difference_check(spec, seed, 1e-4) < 1e-3


def test_float32_network_gradient_agrees_with_64bit():
    spec = LAYER_CASES["conv_norm_relu"]
    n32, n64 = Network(spec, seed=2), Network(spec, seed=2, dtype=torch.float64)
    x = torch.randn(2, *spec.input_shape, dtype=torch.float64)
    up = torch.randn(2, *spec.output_shape(), dtype=torch.float64)
    n32.run(x.float())
    n64.run(x)
    g32, g64 = n32.backward(up.float()).double(), n64.backward(up)
    assert float((g32 - g64).abs().max() / g64.abs().max()) < 1e-3


def test_sgd_step_definition():
    w = torch.nn.Parameter(torch.tensor([1.0]))
    opt = Optimizer([w], lr=0.1, rule="sgd")
    w.grad = torch.tensor([0.5])
    opt.step()
    assert w.item() == pytest.approx(0.95, abs=1e-7)
    assert w.grad is None


def test_zero_gradient_leaves_parameters():
    for rule in ("sgd", "adam"):
        w = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        opt = Optimizer([w], lr=0.1, rule=rule)
        w.grad = torch.zeros(2)
        opt.step()
        assert torch.equal(w.data, torch.tensor([1.0, -2.0]))


def test_quadratic_loss_strictly_decreases():
    target = torch.tensor([0.3, -1.2, 2.0])
    w = torch.nn.Parameter(torch.zeros(3))
    opt = Optimizer([w], lr=0.1)
    losses = []
    for _ in range(10):
        loss = ((w - target) ** 2).sum()
        losses.append(loss.item())
        loss.backward()
        opt.step()
    losses.append(((w - target) ** 2).sum().item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_finite_gradient_is_training_error():
    w = torch.nn.Parameter(torch.tensor([1.0]))
    opt = Optimizer([w], lr=0.1)
    w.grad = torch.tensor([float("nan")])
    with pytest.raises(TrainingError):
        opt.step()
    assert w.item() == 1.0


def test_unknown_rule():
    with pytest.raises(ConfigurationError):
        Optimizer([torch.nn.Parameter(torch.zeros(1))], 0.1, rule="rmsprop")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = Network(NetworkSpec((2, 6, 6), (conv(2, 3, 3, norm=True, activation="relu"), flatten(),
                                          dense(48, 4))), seed=5)
    tensors = {k: v.clone() for k, v in net.state_dict().items()}
    save_checkpoint(tmp_path / "ck", tensors, extra={"step": 3})
    loaded, extra = load_checkpoint(tmp_path / "ck")
    assert extra == {"step": 3}
    assert set(loaded) == set(tensors)
    for k, v in tensors.items():
        assert loaded[k].tobytes() == v.numpy().astype("<f4").tobytes()
    fresh = Network(net.spec, seed=99)
    fresh.load_state_dict({k: torch.from_numpy(v) for k, v in loaded.items()})
    x = torch.randn(3, 2, 6, 6)
    assert torch.equal(fresh(x), net(x))


def test_checkpoint_manifest_offsets(tmp_path):
    import json

    save_checkpoint(tmp_path, {"b": np.ones((2, 3)), "a": np.zeros(4)})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    entries = {e["name"]: e for e in manifest["tensors"]}
    assert entries["a"]["offset"] == 0 and entries["a"]["nbytes"] == 16
    assert entries["b"]["offset"] == 16 and entries["b"]["shape"] == [2, 3]
    assert (tmp_path / "params.bin").stat().st_size == manifest["total_bytes"] == 40


def test_truncated_checkpoint_rejected(tmp_path):
    save_checkpoint(tmp_path, {"a": np.arange(6, dtype=np.float32)})
    blob = tmp_path / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


# Independent listing of the full-size architectures, transcribed as
# (kind, in, out, kernel, stride, pad, norm) rows and counted by hand.
def _listing_count(input_shape, rows):
    total = 0
    shape = input_shape
    for kind, *args in rows:
        if kind == "conv":
            cin, cout, k, s, p, norm = args
            total += cin * cout * k * k + cout + (2 * cout if norm else 0)
            side = (shape[1] + 2 * p - k) // s + 1
            shape = (cout, side, side)
        elif kind == "flat":
            shape = (shape[0] * shape[1] * shape[2],)
        elif kind == "linear":
            out, norm = args
            total += shape[0] * out + out + (2 * out if norm else 0)
            shape = (out,)
        elif kind == "view":
            shape = tuple(args)
        elif kind == "up":
            shape = (shape[0], shape[1] * 2, shape[2] * 2)
    return total, shape


LISTINGS = {
    "model_encoder": ((6, 112, 112), [("conv", 6, 32, 3, 2, 0, True), ("conv", 32, 32, 3, 1, 0, True),
                                      ("conv", 32, 32, 3, 1, 0, True), ("flat",), ("linear", 32, False),
                                      ("linear", 32, False), ("linear", 32, False)], (32,)),
    "model_decoder": ((16,), [("linear", 128, False), ("linear", 128, False), ("linear", 32768, False),
                              ("view", 128, 16, 16), ("up",), ("conv", 128, 128, 3, 1, 1, False), ("up",),
                              ("conv", 128, 128, 3, 1, 1, False), ("up",), ("conv", 128, 6, 3, 1, 1, False)],
                      (6, 128, 128)),
    "dynamics": ((16,), [("linear", 512, False), ("linear", 512, False), ("linear", 160, False)], (160,)),
    "rl_encoder": ((6, 112, 112), [("conv", 6, 32, 3, 2, 0, True)] + [("conv", 32, 32, 3, 2, 0, True)] * 3
                   + [("flat",), ("linear", 32, True)], (32,)),
    "actor": ((32,), [("linear", 1024, False), ("linear", 1024, False), ("linear", 14, False)], (14,)),
    "critic": ((39,), [("linear", 1024, False), ("linear", 1024, False), ("linear", 1, False)], (1,)),
}


@pytest.mark.parametrize("name", sorted(LISTINGS))
def test_full_scale_parameter_counts_and_shapes(name):
    spec = full_scale_specs()[name]
    input_shape, rows, out_shape = LISTINGS[name]
    count, shape = _listing_count(input_shape, rows)
    assert spec.input_shape == input_shape
    assert spec.output_shape() == out_shape == shape
    assert count_parameters(spec) == count


def test_count_parameters_matches_instantiated_network():
    spec = NetworkSpec((3, 12, 12), (conv(3, 4, 3, 2, norm=True, activation="relu"), flatten(),
                                     dense(100, 8, norm=True), dense(8, 2)))
    assert count_parameters(spec) == sum(p.numel() for p in Network(spec).parameters())


def test_fan_in_uniform_initialization_bounds():
    net = Network(NetworkSpec((50,), (dense(50, 40),)), seed=0)
    w = net.body[0].weight
    assert w.abs().max().item() <= 1 / math.sqrt(50)
    # a different seed gives a different draw; the same seed the same one
    assert not torch.equal(w, Network(net.spec, seed=1).body[0].weight)
    assert torch.equal(w, Network(net.spec, seed=0).body[0].weight)


def test_unknown_layer_kind():
    with pytest.raises(ConfigurationError):
        infer_shapes(NetworkSpec((2,), (LayerSpec("pool"),)))
