"""Layer set shared by the patch-level and breast-level networks.

Two surfaces over the same numerics: a declarative one (``LayerSpec`` +
``layer_forward``) used for shape audits and spot checks, and a module
tree (``Conv2d``, ``BatchNorm2d``, ...) used by the actual networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "avgpool",
               "global_avgpool", "linear", "concat", "softmax")


@dataclass
class LayerSpec:
    """Declarative description of one layer."""
    kind: str
    kernel: tuple = None          # (kh, kw) for conv/pool
    stride: int = 1
    padding: int = 0
    in_channels: int = None
    out_channels: int = None
    eps: float = 1e-5
    momentum: float = 0.1
    axis: int = 1                 # concat / softmax axis

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "batchnorm" and self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")

    def output_shape(self, in_shape):
        """Shape rule for a (C, H, W) input; raises on non-positive extents."""
        if self.kind == "conv2d":
            c, h, w = in_shape
            if self.in_channels is not None and c != self.in_channels:
                raise ValueError(f"conv2d expects {self.in_channels} channels, got {c}")
            kh, kw = self.kernel
            return (self.out_channels,
                    T.conv2d_shape(h, kh, self.stride, self.padding),
                    T.conv2d_shape(w, kw, self.stride, self.padding))
        if self.kind in ("maxpool", "avgpool"):
            c, h, w = in_shape
            kh, kw = self.kernel
            return (c,
                    T.conv2d_shape(h, kh, self.stride, 0),
                    T.conv2d_shape(w, kw, self.stride, 0))
        if self.kind == "global_avgpool":
            return (in_shape[0],)
        if self.kind == "linear":
            return (self.out_channels,)
        return tuple(in_shape)


def layer_forward(spec: LayerSpec, x: Tensor, params=None, mode="eval"):
    """Apply one layer; accepts (C,H,W) or (N,C,H,W) spatial inputs.

    ``params`` holds the layer's tensors by role: conv2d needs ``weight``;
    linear needs ``weight`` and optionally ``bias``; batchnorm needs
    ``gamma``, ``beta``, ``running_mean``, ``running_var``.
    """
    params = params or {}
    squeeze = False
    if spec.kind in ("conv2d", "batchnorm", "maxpool", "avgpool", "global_avgpool") \
            and x.data.ndim == 3:
        x = T.reshape(x, (1,) + x.data.shape)
        squeeze = True

    if spec.kind == "conv2d":
        out = T.conv2d(x, params["weight"], stride=spec.stride, padding=spec.padding)
    elif spec.kind == "batchnorm":
        out = T.batchnorm2d(x, params["gamma"], params["beta"],
                            params["running_mean"], params["running_var"],
                            training=(mode == "train"),
                            momentum=spec.momentum, eps=spec.eps)
    elif spec.kind == "relu":
        out = T.relu(x)
    elif spec.kind == "maxpool":
        out = T.maxpool2d(x, spec.kernel, spec.stride)
    elif spec.kind == "avgpool":
        out = T.avgpool2d(x, spec.kernel, spec.stride)
    elif spec.kind == "global_avgpool":
        out = T.global_avgpool2d(x)
    elif spec.kind == "linear":
        out = T.linear(x, params["weight"], params.get("bias"))
    elif spec.kind == "concat":
        raise ValueError("concat takes multiple inputs; use tensor.concat")
    elif spec.kind == "softmax":
        out = T.softmax(x, axis=spec.axis)
    else:  # pragma: no cover
        raise ValueError(spec.kind)

    if T.CHECK_FINITE:
        T.check_finite(out.data, spec.kind)
    if squeeze:
        out = T.reshape(out, out.data.shape[1:])
    return out


# -- module tree --

class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        self.training = True

    @staticmethod
    def _children(val, key):
        if isinstance(val, Module):
            yield key, val
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                yield from Module._children(item, f"{key}.{i}")
        elif isinstance(val, dict):
            for k, item in val.items():
                yield from Module._children(item, f"{key}.{k}")

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield key, val
            else:
                for ckey, child in Module._children(val, key):
                    yield from child.named_parameters(f"{ckey}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, np.ndarray) and name.startswith("running_"):
                yield key, val
            elif not isinstance(val, Parameter):
                for ckey, child in Module._children(val, key):
                    yield from child.named_buffers(f"{ckey}.")

    def modules(self):
        yield self
        for name, val in vars(self).items():
            for _, child in Module._children(val, name):
                yield from child.modules()

    def train(self, flag=True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        found = set()
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{state[name].shape} vs {p.data.shape}")
            p.data = state[name].astype(p.data.dtype, copy=True)
            found.add(name)
        for name, buf in self.named_buffers():
            if name not in state:
                raise KeyError(f"missing buffer {name!r} in state")
            buf[...] = state[name]
            found.add(name)
        extra = set(state) - found
        if extra:
            raise KeyError(f"unexpected entries in state: {sorted(extra)[:4]}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None,
                 dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.stride = stride
        self.padding = padding
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kh, kw),
                                          in_ch * kh * kw, dtype))

    def forward(self, x):
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if T.CHECK_FINITE:
            T.check_finite(out.data, "conv2d")
        return out


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        out = T.batchnorm2d(x, self.gamma, self.beta,
                            self.running_mean, self.running_var,
                            training=self.training,
                            momentum=self.momentum, eps=self.eps)
        if T.CHECK_FINITE:
            T.check_finite(out.data, "batchnorm")
        return out


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(
            rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = Parameter(
            rng.uniform(-bound, bound, out_features).astype(dtype))

    def forward(self, x):
        out = T.linear(x, self.weight, self.bias)
        if T.CHECK_FINITE:
            T.check_finite(out.data, "linear")
        return out


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride

    def forward(self, x):
        return T.maxpool2d(x, self.kernel, self.stride)


class GlobalAvgPool2d(Module):
    def forward(self, x):
        return T.global_avgpool2d(x)


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self.mods = list(mods)

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return x
