"""Explicit forward/backward layers assembled into the two networks.

There is no autodiff tape: each layer caches what its hand-written backward
needs and the models chain backwards in reverse composition order.  Layers
are stateful between forward and backward, so training is single-threaded
by design.
"""

from __future__ import annotations

import numpy as np

from . import numerics, scan
from .geometry import PriorBundle


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)


class Layer:
    def __init__(self):
        self._params: dict[str, Param] = {}

    def add_param(self, name: str, value: np.ndarray) -> Param:
        p = Param(value)
        self._params[name] = p
        return p

    def params(self) -> dict[str, Param]:
        return self._params


def conv_init(rng: np.random.Generator, c_out: int, c_in: int, k_h: int, k_w: int,
              dtype, scale: float | None = None) -> np.ndarray:
    bound = scale if scale is not None else 1.0 / np.sqrt(c_in * k_h * k_w)
    return rng.uniform(-bound, bound, size=(c_out, c_in, k_h, k_w)).astype(dtype)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float32, init_scale: float | None = None,
                 bias_init: float = 0.0):
        super().__init__()
        self.stride = stride
        self.padding = "same" if stride == 1 else (k - 1) // 2
        self.weight = self.add_param("weight", conv_init(rng, c_out, c_in, k, k, dtype, init_scale))
        self.bias = self.add_param("bias", np.full(c_out, bias_init, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return numerics.conv2d(x, self.weight.value, self.bias.value,
                               stride=self.stride, padding=self.padding)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dk, db = numerics.conv2d_vjp(dy, self._x, self.weight.value,
                                         stride=self.stride, padding=self.padding)
        self.weight.grad += dk
        self.bias.grad += db
        return dx


class AxialConv(Layer):
    def __init__(self, c: int, length: int, orientation: str, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.orientation = orientation
        bound = 1.0 / np.sqrt(c * length)
        self.weight = self.add_param(
            "weight", rng.uniform(-bound, bound, size=(c, c, length)).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(c, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return numerics.axial_conv(x, self.weight.value, self.bias.value, self.orientation)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dk, db = numerics.axial_conv_vjp(dy, self._x, self.weight.value, self.orientation)
        self.weight.grad += dk
        self.bias.grad += db
        return dx


class Relu(Layer):
    def forward(self, x):
        self._x = x
        return numerics.relu(x)

    def backward(self, dy):
        return dy * (self._x > 0)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = numerics.sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class AvgPool2(Layer):
    def forward(self, x):
        return numerics.avg_pool2(x)

    def backward(self, dy):
        return numerics.avg_pool2_vjp(dy)


class Upsample2(Layer):
    def forward(self, x):
        self._in_hw = x.shape[2], x.shape[3]
        return numerics.resize_bilinear(x, x.shape[2] * 2, x.shape[3] * 2)

    def backward(self, dy):
        return numerics.resize_bilinear_vjp(dy, *self._in_hw)


class FreqEnhance(Layer):
    def __init__(self, n_bands: int, dtype=np.float32):
        super().__init__()
        self.n_bands = n_bands
        self.gains = self.add_param("gains", np.ones(n_bands, dtype=dtype))

    def forward(self, x):
        self._x = x
        return numerics.freq_enhance(x, self.gains.value, self.n_bands)

    def backward(self, dy):
        dx, dg = numerics.freq_enhance_vjp(dy, self._x, self.gains.value)
        self.gains.grad += dg.astype(self.gains.grad.dtype)
        return dx


class RssmBlock(Layer):
    """One scan block: channel gate + radial routing/scan, a 1x1 mixing
    projection, and a residual connection.  Features are BCHW with B == 1."""

    def __init__(self, c: int, d_state: int, rng: np.random.Generator,
                 dtype=np.float32, chunk: int = 64, checkpoint_stride: int = 16):
        super().__init__()
        self.chunk = chunk
        self.checkpoint_stride = checkpoint_stride
        init = scan.RssmWeights.init(c, d_state, rng, dtype)
        for name in scan.RssmWeights.field_names():
            self.add_param(name, getattr(init, name))
        bound = 0.3 / np.sqrt(c)
        self.proj_w = self.add_param("proj_weight",
                                     rng.uniform(-bound, bound, size=(c, c, 1, 1)).astype(dtype))
        self.proj_b = self.add_param("proj_bias", np.zeros(c, dtype=dtype))

    def _weights(self) -> scan.RssmWeights:
        return scan.RssmWeights(**{n: self._params[n].value
                                   for n in scan.RssmWeights.field_names()})

    def forward(self, x: np.ndarray, bundle: PriorBundle) -> np.ndarray:
        feature = np.ascontiguousarray(x[0].transpose(1, 2, 0))
        out, cache = scan.rssm_apply(feature, bundle, self._weights(),
                                     chunk=self.chunk,
                                     checkpoint_stride=self.checkpoint_stride)
        self._cache = cache
        scan_bchw = out.transpose(2, 0, 1)[None]
        self._scan_out = scan_bchw
        mixed = numerics.conv2d(scan_bchw, self.proj_w.value, self.proj_b.value,
                                stride=1, padding=0)
        return x + mixed

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dmix, dk, db = numerics.conv2d_vjp(dy, self._scan_out, self.proj_w.value,
                                           stride=1, padding=0)
        self.proj_w.grad += dk
        self.proj_b.grad += db
        dfeature, wgrads = scan.rssm_backward(
            np.ascontiguousarray(dmix[0].transpose(1, 2, 0)), self._cache)
        for name in scan.RssmWeights.field_names():
            self._params[name].grad += getattr(wgrads, name)
        return dy + dfeature.transpose(2, 0, 1)[None]


def collect_params(named_layers) -> dict[str, Param]:
    out: dict[str, Param] = {}
    for prefix, layer in named_layers:
        for name, p in layer.params().items():
            out[f"{prefix}.{name}"] = p
    return out
