"""Layer primitives with hand-derived backward passes.

Tensors are plain float64 numpy arrays. A layer caches whatever it needs in
``forward`` and consumes it in ``backward``; parameter gradients accumulate
into ``layer.grads`` until ``zero_grad`` is called.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: named parameters, gradients, buffers and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = _as_f64(value).copy()
        self.grads[name] = np.zeros_like(self.params[name])

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.copy() for name, p, _ in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p for name, p, _ in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in targets.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def pattern(self) -> list[np.ndarray]:
        """Discrete choices (ReLU masks, max indices) made in the last forward.

        Finite-difference probes whose pattern differs on either side of the
        point straddle a kink and are skipped by the gradient checker.
        """
        out = []
        for child in self.children.values():
            out.extend(child.pattern())
        return out


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(list(self.children.values())):
            g = layer.backward(g)
        return g


class Conv2d(Module):
    """Stride-1, zero-padded 2D convolution (cross-correlation)."""

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3), padding=(0, 0),
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel
        ph, pw = padding
        if min(kh, kw) < 1 or min(ph, pw) < 0:
            raise ValueError(f"invalid kernel {kernel} / padding {padding}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.padding = (kh, kw), (ph, pw)
        self.add_param("weight", uniform_init(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw))
        self.add_param("bias", np.zeros(out_ch))

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(
                f"conv2d expects (batch, {self.in_ch}, H, W), got {x.shape} "
                f"for weight {self.params['weight'].shape}")
        (kh, kw), (ph, pw) = self.kernel, self.padding
        if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
            raise ShapeError(f"input {x.shape} smaller than kernel {self.kernel} after padding")
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        b, c = x.shape[:2]
        ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
        # im2col laid out (C, kh, kw, B, H', W') so every copy moves contiguous rows
        cols = np.empty((c, kh, kw, b, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo].transpose(1, 0, 2, 3)
        cols = cols.reshape(c * kh * kw, -1)
        w = self.params["weight"].reshape(self.out_ch, -1)
        out = (w @ cols).reshape(self.out_ch, b, ho, wo).transpose(1, 0, 2, 3)
        out = out + self.params["bias"][None, :, None, None]
        self._cache = (x.shape, xp.shape, cols)
        return out

    def backward(self, g):
        xshape, xpshape, cols = self._cache
        (kh, kw), (ph, pw) = self.kernel, self.padding
        o, c = self.out_ch, self.in_ch
        b, _, ho, wo = g.shape
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        w = self.params["weight"].reshape(o, -1)
        self.grads["bias"] += g2.sum(axis=1)
        self.grads["weight"] += (g2 @ cols.T).reshape(self.grads["weight"].shape)
        dcols = (w.T @ g2).reshape(c, kh, kw, b, ho, wo)
        dxp = np.zeros((c, b, xpshape[2], xpshape[3]))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
        return dxp[:, :, ph:ph + xshape[2], pw:pw + xshape[3]].transpose(1, 0, 2, 3)


def same_padding_1d(kernel: int, dilation: int) -> int:
    span = dilation * (kernel - 1)
    if span % 2:
        raise ValueError(
            f"kernel {kernel} with dilation {dilation} has no symmetric length-preserving padding")
    return span // 2


class Conv1d(Module):
    """Stride-1 dilated 1D convolution over (batch, channels, time).

    ``padding="same"`` picks ``dilation * (kernel - 1) / 2`` so the time
    extent is preserved.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 1, dilation: int = 1,
                 padding: int | str = 0, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if kernel < 1 or dilation < 1:
            raise ValueError("kernel and dilation must be positive")
        if padding == "same":
            padding = same_padding_1d(kernel, dilation)
        if padding < 0:
            raise ValueError("padding must be non-negative")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.dilation, self.padding = kernel, dilation, int(padding)
        self.add_param("weight", uniform_init(rng, (out_ch, in_ch, kernel), in_ch * kernel))
        self.add_param("bias", np.zeros(out_ch))

    def output_length(self, t: int) -> int:
        return t + 2 * self.padding - self.dilation * (self.kernel - 1)

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeError(
                f"conv1d expects (batch, {self.in_ch}, T), got {x.shape} "
                f"for weight {self.params['weight'].shape}")
        t_out = self.output_length(x.shape[2])
        if t_out < 1:
            raise ShapeError(f"input length {x.shape[2]} too short for dilated kernel")
        p, r = self.padding, self.dilation
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        w = self.params["weight"]
        out = np.zeros((x.shape[0], self.out_ch, t_out))
        for k in range(self.kernel):
            # (B, C, T') x (O, C) -> (B, T', O)
            out += np.tensordot(xp[:, :, k * r:k * r + t_out], w[:, :, k],
                                axes=([1], [1])).transpose(0, 2, 1)
        out += self.params["bias"][None, :, None]
        self._cache = (x.shape, xp)
        return out

    def backward(self, g):
        xshape, xp = self._cache
        p, r = self.padding, self.dilation
        w = self.params["weight"]
        t_out = g.shape[2]
        self.grads["bias"] += g.sum(axis=(0, 2))
        dxp = np.zeros(xp.shape)
        for k in range(self.kernel):
            seg = xp[:, :, k * r:k * r + t_out]
            self.grads["weight"][:, :, k] += np.tensordot(g, seg, axes=([0, 2], [0, 2]))
            dxp[:, :, k * r:k * r + t_out] += np.tensordot(g, w[:, :, k],
                                                           axes=([1], [0])).transpose(0, 2, 1)
        return dxp[:, :, p:p + xshape[2]]


class BatchNorm(Module):
    """Per-channel batch normalization over every axis except axis 1."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels on axis 1, got {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        gamma, beta = self.params["gamma"].reshape(bs), self.params["beta"].reshape(bs)
        if not self.training:
            mean = self.buffers["running_mean"].reshape(bs)
            var = self.buffers["running_var"].reshape(bs)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self._cache = ("eval", inv_std, xhat, axes)
            return xhat * gamma + beta
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        n = x.size // self.channels
        mean = x.mean(axis=axes, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std
        m = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm *= 1.0 - m
        rm += m * mean.reshape(-1)
        rv *= 1.0 - m
        rv += m * var.reshape(-1) * (n / (n - 1))
        self._cache = ("train", inv_std, xhat, axes)
        return xhat * gamma + beta

    def backward(self, g):
        mode, inv_std, xhat, axes = self._cache
        bs = self._bshape(g)
        gamma = self.params["gamma"].reshape(bs)
        self.grads["beta"] += g.sum(axis=axes)
        self.grads["gamma"] += (g * xhat).sum(axis=axes)
        if mode == "eval":
            return g * gamma * inv_std
        dxhat = g * gamma
        return inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                          - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))


class MaxPool2d(Module):
    """Non-overlapping 2x2 max pooling, floor semantics, first-index ties."""

    def forward(self, x):
        x = _as_f64(x)
        if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"maxpool2d expects (batch, ch, H>=2, W>=2), got {x.shape}")
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        shape, idx = self._cache
        b, c, h, w = shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(shape)
        dx[:, :, :2 * h2, :2 * w2] = blocks.reshape(b, c, 2 * h2, 2 * w2)
        return dx

    def pattern(self):
        return [self._cache[1]]


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis: int = -1):
    x = _as_f64(x)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)

    def pattern(self):
        return [self._mask]


class Sigmoid(Module):
    def forward(self, x):
        self._out = sigmoid(x)
        return self._out

    def backward(self, g):
        return g * self._out * (1.0 - self._out)


class Softmax(Module):
    def __init__(self, axis: int = 1):
        super().__init__()
        self.axis = axis

    def forward(self, x):
        self._out = softmax(x, self.axis)
        return self._out

    def backward(self, g):
        y = self._out
        return y * (g - (g * y).sum(axis=self.axis, keepdims=True))
