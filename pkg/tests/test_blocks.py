import numpy as np
import pytest

from uafuse import tensor as T
from uafuse.blocks import (
    DenseASPPBlockParams,
    dense_aspp_forward,
    init_dense_aspp,
    init_se_res,
    init_stream,
    se_excitation,
    se_res_forward,
    stream_forward,
)
from uafuse.config import NetworkConfig
from uafuse.fusion import UAFNet
from uafuse.tensor import DimensionError, Tape, Tensor

import oracles


def _zero(p):
    p.data = np.zeros_like(p.data)


class TestSEResBlock:
    def test_zero_branch_gives_relu(self, rng):
        p = init_se_res(rng, 4, 2, precision="double")
        for t in (p.conv1.weight, p.conv1.bias, p.conv2.weight, p.conv2.bias):
            _zero(t)
        x = rng.standard_normal((4, 5, 5, 5))
        np.testing.assert_array_equal(se_res_forward(Tensor(x), p).data, np.maximum(x, 0))

    def test_closed_gate_gives_relu(self, rng):
        p = init_se_res(rng, 4, 2, precision="double")
        _zero(p.se_fc2.weight)
        p.se_fc2.bias.data = np.full(4, -1e4)
        x = rng.standard_normal((4, 5, 5, 5))
        np.testing.assert_allclose(se_res_forward(Tensor(x), p).data, np.maximum(x, 0), atol=1e-300)

    def test_matches_composition_oracle(self, rng):
        p = init_se_res(rng, 4, 2, precision="double")
        for t in (p.conv1.bias, p.conv2.bias, p.se_fc1.bias, p.se_fc2.bias):
            t.data = rng.standard_normal(t.shape) * 0.1
        x = rng.standard_normal((4, 6, 5, 4))
        np.testing.assert_allclose(se_res_forward(Tensor(x), p).data, oracles.se_res(x, p), rtol=1e-10, atol=1e-12)

    def test_gate_strictly_inside_unit_interval(self, rng):
        p = init_se_res(rng, 8, 4, precision="double")
        for seed in range(10):
            f = np.random.default_rng(seed).standard_normal((8, 4, 4, 4)) * 3
            s = se_excitation(Tensor(f), p).data
            assert np.all((s > 0) & (s < 1))

    def test_channel_mismatch(self, rng):
        p = init_se_res(rng, 4, 2)
        with pytest.raises(DimensionError):
            se_res_forward(Tensor(np.ones((3, 4, 4, 4), np.float32)), p)

    def test_reduction_must_divide(self, rng):
        with pytest.raises(DimensionError):
            init_se_res(rng, 6, 4)


class TestDenseASPP:
    def test_single_branch_reduces_to_one_conv(self, rng):
        c = 3
        p = init_dense_aspp(rng, c, c, [1], precision="double")
        proj = np.zeros((c, 2 * c, 1, 1, 1))
        proj[np.arange(c), c + np.arange(c)] = 1.0  # select the branch output
        p.projection.weight.data = proj
        x = rng.standard_normal((c, 5, 6, 4))
        br = p.branches[0]
        expected = T.relu(T.conv3d(Tensor(x), br.weight, br.bias, 1)).data
        np.testing.assert_allclose(dense_aspp_forward(Tensor(x), p).data, expected, rtol=1e-14)

    def test_dense_wiring_channel_counts(self, rng):
        p = init_dense_aspp(rng, 16, 8, (1, 2, 4, 8))
        assert [b.in_channels for b in p.branches] == [16, 24, 32, 40]
        assert [b.dilation for b in p.branches] == [1, 2, 4, 8]
        assert p.projection.in_channels == 48 and p.projection.out_channels == 16

    def test_impulse_response_radius(self, rng):
        dilations = (1, 2, 4, 8)
        p = init_dense_aspp(rng, 2, 2, dilations, precision="double")
        for conv in p.branches + [p.projection]:
            conv.weight.data = np.abs(conv.weight.data) + 0.01  # positive: relu cannot hide support
        size = 35
        x = np.zeros((2, size, size, size))
        c = size // 2
        x[:, c, c, c] = 1.0
        out = dense_aspp_forward(Tensor(x), p).data
        support = np.argwhere(np.any(out != 0, axis=0))
        radius = int(np.max(np.abs(support - c)))
        assert radius == sum(d * (3 - 1) // 2 for d in dilations) == 15
        assert out.shape == x.shape

    def test_matches_composition_oracle(self, rng):
        p = init_dense_aspp(rng, 3, 2, (1, 2), precision="double")
        for conv in p.branches + [p.projection]:
            conv.bias.data = rng.standard_normal(conv.bias.shape) * 0.1
        x = rng.standard_normal((3, 6, 5, 7))
        np.testing.assert_allclose(dense_aspp_forward(Tensor(x), p).data, oracles.dense_aspp(x, p),
                                   rtol=1e-10, atol=1e-12)

    def test_wiring_mismatch(self, rng):
        good = init_dense_aspp(rng, 4, 2, (1, 2))
        bad = DenseASPPBlockParams(good.branches[::-1], good.projection)
        with pytest.raises(DimensionError):
            dense_aspp_forward(Tensor(np.ones((4, 4, 4, 4), np.float32)), bad)


class TestStream:
    def test_outputs(self, rng, tiny_net_config):
        p = init_stream(rng, tiny_net_config)
        x = Tensor(rng.standard_normal((1, 9, 8, 7)).astype(np.float32))
        levels, y = stream_forward(x, p)
        assert len(levels) == len(tiny_net_config.blocks)
        assert all(lv.shape == (tiny_net_config.width, 9, 8, 7) for lv in levels)
        assert y.shape == (3, 9, 8, 7)
        assert np.all(np.abs(y.data.sum(axis=0) - 1) < 1e-6)

    def test_deterministic(self, rng, tiny_net_config):
        p = init_stream(rng, tiny_net_config)
        x = Tensor(rng.standard_normal((1, 6, 6, 6)).astype(np.float32))
        a = stream_forward(x, p)[1].data
        b = stream_forward(x, p)[1].data
        assert a.tobytes() == b.tobytes()

    def test_minimum_patch_extent(self, rng):
        p = init_stream(rng, NetworkConfig(width=4, se_reduction=2, aspp_branch_width=2))
        with pytest.raises(DimensionError, match="minimum"):
            stream_forward(Tensor(np.ones((1, 16, 32, 32), np.float32)), p, min_spatial=32)

    def test_default_depth_preserves_shape(self, rng):
        cfg = NetworkConfig(width=4, se_reduction=2, aspp_branch_width=2)
        p = init_stream(rng, cfg)
        levels, y = stream_forward(Tensor(rng.standard_normal((1, 32, 32, 32)).astype(np.float32)), p, 32)
        assert [lv.shape[1:] for lv in levels] == [(32, 32, 32)] * 4
        assert y.shape[1:] == (32, 32, 32)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_reaches_every_parameter(seed, tiny_net_config):
    net = UAFNet.init(tiny_net_config, seed=seed, precision="double")
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 8, 8, 8))
    lab = r.integers(0, 3, (8, 8, 8))
    with Tape() as tape:
        out = net.forward(x)
        loss = T.add(T.add(T.cross_entropy(out.y_modal[0], lab), T.cross_entropy(out.y_modal[1], lab)),
                     T.cross_entropy(out.y_final, lab))
        tape.backward(loss)
    params = net.parameters()
    assert all(p.grad is not None for p in params.values())
    # SE squeeze layers sit behind a 2-unit relu in this tiny config, which can be
    # inactive for a given input; everything else, se_fc2.bias included, must move.
    behind_relu = (".se_fc1.", ".se_fc2.weight")
    dead = [n for n, p in params.items() if not np.any(p.grad) and not any(k in n for k in behind_relu)]
    assert not dead, f"parameters without gradient: {dead}"
