"""Small deterministic CNN engine on numpy (NCHW layout).

Only the layers the demodulation networks need: same-padded and strided
convolution, ReLU, residual blocks, x2 resampling, MSE and Adam. Every
layer has an explicit backward pass; there is no autograd graph.
"""

from __future__ import annotations

import os

import numpy as np

from .classical import ValidationError

try:
    import torch
except ImportError:  # pragma: no cover - numpy path is always available
    torch = None

_BACKENDS = ("numpy", "torch")
_backend = os.environ.get("FRINGELAB_CONV_BACKEND", "torch" if torch is not None else "numpy")
if torch is not None:
    torch.set_num_threads(int(os.environ.get("FRINGELAB_THREADS", "1")))


def set_conv_backend(name: str) -> str:
    """Select the convolution kernels: ``numpy`` (im2col + GEMM) or ``torch``.

    Returns the previous backend. Both compute the same cross-correlation;
    torch is several times faster on CPU and is used when installed.
    """
    global _backend
    if name not in _BACKENDS:
        raise ValidationError(f"unknown conv backend {name!r}")
    if name == "torch" and torch is None:
        raise ValidationError("torch backend requested but torch is not installed")
    prev, _backend = _backend, name
    return prev


def get_conv_backend() -> str:
    return _backend


class Parameter:
    """Array plus gradient buffer of the same shape."""

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0


# --------------------------------------------------------------------------- functional ops

def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold NCHW input to (B, C*kh*kw, Ho*Wo) patch columns."""
    b, c, h, w = x.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def col2im(cols, x_shape, kh, kw, stride=1, padding=0):
    b, c, h, w = x_shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _check_conv(x, w, b):
    if x.ndim != 4 or w.ndim != 4:
        raise ValidationError("conv2d expects 4-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValidationError("bias must have one entry per output channel")


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a))


def conv2d_fwd(x, w, b=None, stride=1, padding=0):
    """Cross-correlation with zero padding. ``w`` is (Cout, Cin, kh, kw)."""
    _check_conv(x, w, b)
    if _backend == "torch":
        with torch.no_grad():
            y = torch.nn.functional.conv2d(_t(x), _t(w), None if b is None else _t(b),
                                           stride=stride, padding=padding)
        return y.numpy()
    cout, _, kh, kw = w.shape
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, -1), cols)
    if b is not None:
        y += b[None, :, None]
    return y.reshape(x.shape[0], cout, ho, wo)


def conv2d_bwd(x, w, dy, stride=1, padding=0):
    """Gradients (dx, dw, db) of ``conv2d_fwd`` given upstream ``dy``."""
    _check_conv(x, w, None)
    cout, _, kh, kw = w.shape
    ho, wo = _out_size(x.shape[2], kh, stride, padding), _out_size(x.shape[3], kw, stride, padding)
    if dy.shape != (x.shape[0], cout, ho, wo):
        raise ValidationError(f"upstream gradient shape {dy.shape} does not match output")
    if _backend == "torch":
        with torch.no_grad():
            dx, dw, db = torch.ops.aten.convolution_backward(
                _t(dy), _t(x), _t(w), [cout], [stride, stride], [padding, padding], [1, 1],
                False, [0, 0], 1, [True, True, True])
        return dx.numpy(), dw.numpy(), db.numpy()
    cols, _, _ = im2col(x, kh, kw, stride, padding)
    dy2 = dy.reshape(x.shape[0], cout, ho * wo)
    w2 = w.reshape(cout, -1)
    dw = np.zeros_like(w2)
    for n in range(x.shape[0]):
        dw += dy2[n] @ cols[n].T
    db = dy2.sum(axis=(0, 2))
    dcols = np.matmul(np.ascontiguousarray(w2.T), dy2)
    dx = col2im(dcols, x.shape, kh, kw, stride, padding)
    return dx, dw.reshape(w.shape), db


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(x, dy):
    return dy * (x > 0)


def upsample_nearest2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x_bwd(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


# --------------------------------------------------------------------------- layers

class Module:
    def parameters(self) -> list[Parameter]:
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=None, rng=None, dtype=np.float32):
        if kernel % 2 != 1:
            raise ValidationError("kernel size must be odd")
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / (cin * kernel * kernel))
        self.weight = Parameter(rng.uniform(-bound, bound, (cout, cin, kernel, kernel)).astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return conv2d_fwd(x, self.weight.data, self.bias.data, self.stride, self.padding)

    def backward(self, dy):
        dx, dw, db = conv2d_bwd(self._x, self.weight.data, dy, self.stride, self.padding)
        self.weight.grad += dw
        self.bias.grad += db
        self._x = None
        return dx

    def spec(self):
        return {"kind": "conv", "in": self.cin, "out": self.cout, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


class ReLU(Module):
    def forward(self, x):
        self._x = x
        return relu_fwd(x)

    def backward(self, dy):
        dx = relu_bwd(self._x, dy)
        self._x = None
        return dx

    def spec(self):
        return {"kind": "relu"}


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def spec(self):
        return {"kind": "sequential", "layers": [layer.spec() for layer in self.layers]}


class ResidualBlock(Module):
    """y = x + conv(relu(conv(x))), plain identity skip."""

    def __init__(self, channels, kernel=3, rng=None, dtype=np.float32, zero_init=False):
        self.channels = channels
        self.body = Sequential(Conv2d(channels, channels, kernel, rng=rng, dtype=dtype), ReLU(),
                               Conv2d(channels, channels, kernel, rng=rng, dtype=dtype))
        if zero_init:
            # block starts as the identity; keeps a deep residual stack's output bounded at init
            self.body.layers[2].weight.data[...] = 0

    def parameters(self):
        return self.body.parameters()

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValidationError(f"residual block of width {self.channels} got {x.shape[1]} channels")
        return x + self.body.forward(x)

    def backward(self, dy):
        return dy + self.body.backward(dy)

    def spec(self):
        return {"kind": "residual_block", "channels": self.channels}


class Downsample2x(Module):
    """Learned x2 reduction: 3x3 convolution with stride 2."""

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, stride=2, padding=1, rng=rng, dtype=dtype)

    def parameters(self):
        return self.conv.parameters()

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValidationError(f"downsample2x needs even H, W; got {x.shape[2:]}")
        return self.conv.forward(x)

    def backward(self, dy):
        return self.conv.backward(dy)

    def spec(self):
        return {"kind": "downsample2x", "conv": self.conv.spec()}


class Upsample2x(Module):
    """Nearest-neighbour x2 followed by a 3x3 convolution."""

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng=rng, dtype=dtype)

    def parameters(self):
        return self.conv.parameters()

    def forward(self, x):
        return self.conv.forward(upsample_nearest2x(x))

    def backward(self, dy):
        return upsample_nearest2x_bwd(self.conv.backward(dy))

    def spec(self):
        return {"kind": "upsample2x", "conv": self.conv.spec()}


# --------------------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        return {"step": self.step_count, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    def load_state(self, state: dict, m, v):
        self.step_count = int(state["step"])
        for dst, src in zip(self.m, m):
            dst[...] = src
        for dst, src in zip(self.v, v):
            dst[...] = src


def adam_step(params, grads, state: dict):
    """Functional Adam update; returns new params and new state.

    ``state`` holds ``step``, ``lr``, ``beta1``, ``beta2``, ``eps`` and the
    moment lists ``m``/``v`` (created on first use).
    """
    b1, b2 = state.get("beta1", 0.9), state.get("beta2", 0.999)
    lr, eps = state.get("lr", 1e-3), state.get("eps", 1e-8)
    t = state.get("step", 0) + 1
    m_old = state.get("m") or [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    v_old = state.get("v") or [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_old, v_old):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        new_p.append(p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {**state, "step": t, "m": new_m, "v": new_v}
