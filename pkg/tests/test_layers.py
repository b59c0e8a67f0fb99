import numpy as np
import pytest

from mscope import tensor as T
from mscope.layers import (BatchNorm2d, Conv2d, LayerSpec, Linear, Parameter,
                           Sequential, layer_forward)


def test_identity_kernel_conv_is_identity():
    spec = LayerSpec("conv2d", kernel=(1, 1), stride=1, padding=0,
                     in_channels=1, out_channels=1)
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.standard_normal((1, 9, 7)).astype(np.float32))
    w = T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    out = layer_forward(spec, x, {"weight": w})
    np.testing.assert_array_equal(out.data, x.data)


def test_fullscale_stem_shape():
    # 7x7 stride-2 pad-3 stem on a full-scale CC image
    spec = LayerSpec("conv2d", kernel=(7, 7), stride=2, padding=3,
                     in_channels=1, out_channels=16)
    assert spec.output_shape((1, 2677, 1942)) == (16, 1339, 971)
    x = T.Tensor(np.zeros((1, 2677, 1942), dtype=np.float32))
    w = T.Tensor(np.zeros((16, 1, 7, 7), dtype=np.float32))
    out = layer_forward(spec, x, {"weight": w})
    assert out.shape == (16, 1339, 971)


def test_global_avgpool_constant():
    c = 3.25
    x = T.Tensor(np.full((256, 42, 31), c, dtype=np.float32))
    out = layer_forward(LayerSpec("global_avgpool"), x)
    assert out.shape == (256,)
    np.testing.assert_allclose(out.data, c, rtol=1e-6)


def test_batchnorm_train_vs_eval():
    bn = BatchNorm2d(2)
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((4, 2, 5, 5)).astype(np.float32) * 3 + 1)
    y_train = bn(x).data
    # batch statistics: normalized output has ~zero mean / unit variance
    np.testing.assert_allclose(y_train.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(y_train.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    bn.eval()
    y1 = bn(x).data
    y2 = bn(x).data
    # eval mode uses running statistics and has no side effects
    np.testing.assert_array_equal(y1, y2)


def test_batchnorm_eps_validation():
    with pytest.raises(ValueError):
        LayerSpec("batchnorm", eps=0.0)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        LayerSpec("deconv")


def test_layer_forward_nan_detected():
    spec = LayerSpec("conv2d", kernel=(1, 1), in_channels=1, out_channels=1)
    x = T.Tensor(np.array([[[np.inf]]], dtype=np.float32))
    w = T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(T.NumericsError):
        layer_forward(spec, x, {"weight": w})


def test_channel_mismatch_rejected():
    x = T.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    w = T.Tensor(np.zeros((1, 3, 1, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        T.conv2d(x, w)


def test_maxpool_and_avgpool_values():
    x = T.Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    mp = layer_forward(LayerSpec("maxpool", kernel=(2, 2), stride=2), x)
    np.testing.assert_array_equal(mp.data[0, 0], [[5, 7], [13, 15]])
    ap = layer_forward(LayerSpec("avgpool", kernel=(2, 2), stride=2), x)
    np.testing.assert_array_equal(ap.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_state_dict_roundtrip():
    rng = np.random.default_rng(2)
    net = Sequential(Conv2d(1, 4, 3, padding=1, rng=rng), BatchNorm2d(4))
    x = T.Tensor(rng.standard_normal((2, 1, 6, 6)).astype(np.float32))
    net(x)  # populate running stats
    state = {k: v.copy() for k, v in net.state_dict().items()}
    net2 = Sequential(Conv2d(1, 4, 3, padding=1), BatchNorm2d(4))
    net2.load_state_dict(state)
    for (k1, v1), (k2, v2) in zip(sorted(net.state_dict().items()),
                                  sorted(net2.state_dict().items())):
        assert k1 == k2
        np.testing.assert_array_equal(v1, v2)


def test_load_state_shape_mismatch():
    net = Linear(3, 2)
    bad = {k: np.zeros((5, 5), dtype=np.float32) for k, _ in net.named_parameters()}
    with pytest.raises(ValueError):
        net.load_state_dict(bad)
