"""Differentiable layers with explicit forward/backward passes (NumPy).

Spatial tensors are channels-last, (batch, frames, mels, channels).
Layers cache what they need during a train-mode forward; ``backward``
consumes the gradient of the loss with respect to the layer output, writes
parameter gradients into ``grads`` (assignment, never accumulation) and
returns the gradient with respect to the layer input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Parameter/buffer bookkeeping shared by layers and containers."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._children = []

    def add(self, name, module):
        self._children.append((name, module))
        return module

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self._children:
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self._children:
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g[...] = 0


class Layer(Module):
    def __init__(self):
        super().__init__()
        self._cache = None

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a cached train-mode forward")
        return self._cache

    def _param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero 'same' padding, channels-last.

    The padded input is flattened over (batch, rows, cols); every kernel tap
    is then a contiguous row-offset slice, so the convolution is nine GEMMs
    with no im2col copy. Outputs at padding positions are computed and
    discarded.
    """

    def __init__(self, in_channels, out_channels, rng, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self._param("weight", glorot_uniform(rng, (out_channels, in_channels, 3, 3),
                                             in_channels * 9, out_channels * 9, dtype))
        self._param("bias", np.zeros(out_channels, dtype=dtype))

    @staticmethod
    def _flat_padded(x):
        b, h, w, c = x.shape
        rows = b * (h + 2) * (w + 2)
        flat = np.zeros((rows + 2 * (w + 2) + 2, c), dtype=x.dtype)
        flat[:rows].reshape(b, h + 2, w + 2, c)[:, 1:-1, 1:-1, :] = x
        return flat, rows

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} input channels, got {c}")
        flat, rows = self._flat_padded(x)
        taps = np.ascontiguousarray(self.params["weight"].transpose(2, 3, 1, 0))  # (3, 3, in, out)
        out = np.empty((rows, self.out_channels), dtype=x.dtype)
        out[...] = self.params["bias"]
        for i in range(3):
            for j in range(3):
                off = i * (w + 2) + j
                out += flat[off:off + rows] @ taps[i, j]
        self._cache = (flat, rows, x.shape) if train else None
        return np.ascontiguousarray(out.reshape(b, h + 2, w + 2, self.out_channels)[:, :h, :w, :])

    def backward(self, dout):
        flat, rows, (b, h, w, c) = self._require_cache()
        taps = np.ascontiguousarray(self.params["weight"].transpose(2, 3, 1, 0))
        d_full = np.zeros((b, h + 2, w + 2, self.out_channels), dtype=dout.dtype)
        d_full[:, :h, :w, :] = dout
        d_full = d_full.reshape(rows, self.out_channels)
        dflat = np.zeros_like(flat)
        gw = self.grads["weight"]
        for i in range(3):
            for j in range(3):
                off = i * (w + 2) + j
                gw[:, :, i, j] = d_full.T @ flat[off:off + rows]
                dflat[off:off + rows] += d_full @ taps[i, j].T
        self.grads["bias"][...] = dout.sum(axis=(0, 1, 2))
        return np.ascontiguousarray(dflat[:rows].reshape(b, h + 2, w + 2, c)[:, 1:-1, 1:-1, :])


class BatchNorm2d(Layer):
    """Per-channel batch normalisation; batch statistics in train mode, running ones in eval."""

    def __init__(self, channels, dtype=np.float32, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self._param("gamma", np.ones(channels, dtype=dtype))
        self._param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            self._cache = None
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - self.buffers["running_mean"]) * (inv * gamma) + beta
        if x.shape[0] < 2:
            raise ValueError("batch normalisation in train mode needs a batch of at least 2")
        n = x.size // x.shape[-1]
        mean = x.mean(axis=(0, 1, 2))
        xc = x - mean
        var = np.einsum("bhwc,bhwc->c", xc, xc) / n
        m = self.momentum
        self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
        self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std, n)
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv_std, n = self._require_cache()
        self.grads["gamma"][...] = (dout * xhat).sum(axis=(0, 1, 2))
        self.grads["beta"][...] = dout.sum(axis=(0, 1, 2))
        dxhat = dout * self.params["gamma"]
        s1 = dxhat.sum(axis=(0, 1, 2))
        s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
        return (inv_std / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train=False):
        out = np.maximum(x, 0)
        self._cache = out > 0 if train else None
        return out

    def backward(self, dout):
        return dout * self._require_cache()


def _pool_factors(h, w):
    return (2 if h >= 2 else 1), (2 if w >= 2 else 1)


class AvgPool2x2(Layer):
    """2x2 mean pooling with floor; a spatial axis already of size 1 is left alone."""

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        fh, fw = _pool_factors(h, w)
        ho, wo = h // fh, w // fw
        out = x[:, :ho * fh, :wo * fw, :].reshape(b, ho, fh, wo, fw, c).mean(axis=(2, 4))
        self._cache = (x.shape, fh, fw) if train else None
        return out

    def backward(self, dout):
        (b, h, w, c), fh, fw = self._require_cache()
        ho, wo = dout.shape[1], dout.shape[2]
        dx = np.zeros((b, h, w, c), dtype=dout.dtype)
        spread = np.broadcast_to((dout / (fh * fw))[:, :, None, :, None, :], (b, ho, fh, wo, fw, c))
        dx[:, :ho * fh, :wo * fw, :] = spread.reshape(b, ho * fh, wo * fw, c)
        return dx


def pooled_size(n: int) -> int:
    return n // 2 if n >= 2 else 1


@dataclass(frozen=True)
class ConvBlockConfig:
    in_channels: int
    out_channels: int
    batch_norm: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


class ConvBlock(Module):
    """(conv3x3 -> BN -> ReLU) x 2, then 2x2 average pooling."""

    def __init__(self, cfg: ConvBlockConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.layers = [self.add("conv1", Conv2d(cfg.in_channels, cfg.out_channels, rng, dtype))]
        if cfg.batch_norm:
            self.layers.append(self.add("bn1", BatchNorm2d(cfg.out_channels, dtype)))
        self.layers += [ReLU(), self.add("conv2", Conv2d(cfg.out_channels, cfg.out_channels, rng, dtype))]
        if cfg.batch_norm:
            self.layers.append(self.add("bn2", BatchNorm2d(cfg.out_channels, dtype)))
        self.layers += [ReLU(), AvgPool2x2()]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def conv_block_forward(x, block: ConvBlock, mode="eval"):
    """Channels-first wrapper: (batch, ch, frames, mels) in and out."""
    out = block.forward(np.ascontiguousarray(np.moveaxis(x, 1, -1)), train=(mode == "train"))
    return np.moveaxis(out, -1, 1)


def conv_block_backward(grad_out, block: ConvBlock):
    """Channels-first wrapper around ``ConvBlock.backward``."""
    return np.moveaxis(block.backward(np.ascontiguousarray(np.moveaxis(grad_out, 1, -1))), -1, 1)


class Dense(Layer):
    """``y = x @ W + b`` with ``W`` of shape (d_in, d_out)."""

    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self._param("weight", glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype))
        self._param("bias", np.zeros(d_out, dtype=dtype))

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"dense layer expects (batch, {self.d_in}), got {x.shape}")
        self._cache = x if train else None
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        x = self._require_cache()
        self.grads["weight"][...] = x.T @ dout
        self.grads["bias"][...] = dout.sum(axis=0)
        return dout @ self.params["weight"].T


def dropout(x, rate, mode, rng=None):
    """Inverted dropout; returns ``(output, mask)`` where mask is None for identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode != "train" or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        out, mask = dropout(x, self.rate, "train" if train else "eval", rng)
        self._cache = ("mask", mask) if train else None
        return out

    def backward(self, dout):
        _, mask = self._require_cache()
        return dout if mask is None else dout * mask


class GlobalAvgPool(Layer):
    """Mean over both spatial axes: (batch, f, m, ch) -> (batch, ch)."""

    def forward(self, x, train=False):
        self._cache = x.shape if train else None
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        b, h, w, c = self._require_cache()
        return np.broadcast_to((dout / (h * w))[:, None, None, :], (b, h, w, c)).copy()


def global_pool(x):
    """Channels-first global mean: (batch, ch, f, m) -> (batch, ch)."""
    return np.asarray(x).mean(axis=(2, 3))


def softmax(z, axis=-1):
    z = np.asarray(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z):
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype if z.dtype.kind == "f" else np.float64)
