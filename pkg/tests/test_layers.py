"""Parameter store, initialization and conv-block behavior."""

import numpy as np
import pytest

from erfseg.errors import ConfigError
from erfseg.layers import (
    BlockSpec,
    ParamSpec,
    ParamStore,
    conv_block_forward,
    conv_block_param_specs,
    count_params,
    init_params,
)
from erfseg.ops import ConvSpec, conv2d, instance_norm
from erfseg.tensor import Tape, Tensor, relu, tensor_sum


def test_init_is_deterministic_bitwise():
    spec = BlockSpec("stem", 3, 8)
    specs = conv_block_param_specs(spec, "b")
    a = init_params(specs, seed=7)
    b = init_params(conv_block_param_specs(spec, "b"), seed=7)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)
    c = init_params(conv_block_param_specs(spec, "b"), seed=8)
    assert not np.array_equal(a["b.conv0.weight"].data, c["b.conv0.weight"].data)


def test_conv_weight_std_matches_fan_in():
    # 3x3 conv with 32 inputs: std = sqrt(2/288) ~ 0.0833, 18432 draws
    specs = [ParamSpec("w", (64, 32, 3, 3), "conv_weight", fan_in=32 * 9)]
    params = init_params(specs, seed=0)
    sample_std = params["w"].data.std()
    expected = np.sqrt(2.0 / 288.0)
    assert abs(sample_std - expected) / expected < 0.05


def test_gamma_ones_beta_bias_zero():
    spec = BlockSpec("stem", 3, 8)
    params = init_params(conv_block_param_specs(spec, "b"), seed=1)
    assert np.array_equal(params["b.norm0.gamma"].data, np.ones(8))
    assert not params["b.norm0.beta"].data.any()
    assert not params["b.conv0.bias"].data.any()


def test_duplicate_names_rejected():
    store = ParamStore()
    store.add("x", Tensor(np.zeros(1)))
    with pytest.raises(ConfigError):
        store.add("x", Tensor(np.zeros(1)))


def test_count_params_closed_form():
    # single 3x3 conv 32->64 with bias: 9*32*64 + 64 = 18496
    specs = [
        ParamSpec("w", (64, 32, 3, 3), "conv_weight", fan_in=288),
        ParamSpec("b", (64,), "bias"),
    ]
    assert count_params(init_params(specs, 0)) == 18496


class TestConvBlock:
    def test_zero_input_zero_beta_gives_zeros(self):
        spec = BlockSpec("stem", 2, 4)
        params = init_params(conv_block_param_specs(spec, "b"), seed=0)
        out = conv_block_forward(Tensor(np.zeros((1, 2, 8, 8))), spec, params, "b")
        assert not out.data.any()

    def test_spatial_size_preserved(self):
        spec = BlockSpec("enc", 3, 6, dilation=2)
        params = init_params(conv_block_param_specs(spec, "b"), seed=1)
        out = conv_block_forward(Tensor(np.random.default_rng(0).standard_normal((2, 3, 10, 12))), spec, params, "b")
        assert out.shape == (2, 6, 10, 12)

    def test_matches_composition_of_primitives(self):
        rng = np.random.default_rng(2)
        spec = BlockSpec("enc", 3, 5)
        params = init_params(conv_block_param_specs(spec, "b"), seed=3, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 3, 6, 6)), dtype=np.float64)
        got = conv_block_forward(x, spec, params, "b").data

        z = x
        for i, cin in ((0, 3), (1, 5)):
            cs = ConvSpec(cin, 5, (3, 3))
            z = conv2d(z, params[f"b.conv{i}.weight"], params[f"b.conv{i}.bias"], cs)
            z = instance_norm(z, params[f"b.norm{i}.gamma"], params[f"b.norm{i}.beta"])
            z = relu(z)
        assert np.array_equal(got, z.data)


def test_every_parameter_receives_gradient():
    # zero-unreachable-gradient audit for a conv block
    spec = BlockSpec("enc", 2, 4)
    params = init_params(conv_block_param_specs(spec, "b"), seed=4, dtype=np.float64)
    x = Tensor(np.random.default_rng(5).standard_normal((1, 2, 6, 6)), dtype=np.float64)
    with Tape() as tape:
        out = conv_block_forward(x, spec, params, "b")
        tape.backward(tensor_sum(out))
    for name, p in params.items():
        assert p.grad is not None, f"{name} unreachable"
        assert p.grad.shape == p.data.shape


def test_store_roundtrip_and_copy_independence():
    spec = BlockSpec("stem", 2, 4)
    params = init_params(conv_block_param_specs(spec, "b"), seed=6)
    clone = params.copy()
    clone["b.conv0.weight"].data[:] = 0
    assert params["b.conv0.weight"].data.any()
    state = params.state_dict()
    fresh = init_params(conv_block_param_specs(spec, "b"), seed=99)
    fresh.load_state(state)
    for name in params.names():
        assert np.array_equal(fresh[name].data, params[name].data)
