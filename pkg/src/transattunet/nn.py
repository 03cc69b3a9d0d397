"""Convolutional building blocks and a small parameter container."""

from __future__ import annotations

from functools import lru_cache
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng
from .tensor import Tensor, ShapeError, relu


class Module:
    """Attribute-walking parameter container, in the spirit of ``torch.nn.Module``.

    Parameters are tensors with ``requires_grad``; buffers are named in
    ``_buffer_names``; names in ``_no_decay`` are exempt from weight decay.
    """

    _buffer_names: tuple[str, ...] = ()
    _no_decay: tuple[str, ...] = ()

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad and name not in self._buffer_names:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def no_decay_names(self, prefix: str = "") -> set[str]:
        out = {prefix + n for n in self._no_decay}
        for name, child in self.children():
            out |= child.no_decay_names(f"{prefix}{name}.")
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, t in list(self.named_parameters()) + list(self.named_buffers()):
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state.update({n: b.data.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_params(rng: Rng, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    """He-normal draw: N(0, 2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return rng.normal(shape, np.sqrt(2.0 / fan_in), dtype)


# -- convolution ------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over N x Cin x H x W, computed by im2col + GEMM."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected N x C x H x W input, got {x.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight {weight.shape} expects {wcin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} from input {h}x{w}, kernel {kh}x{kw}, pad {padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == kw == 1 and stride == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if kh == kw == 1 and stride == 1:
                gxp = gcols.reshape(n, padded_shape[2], padded_shape[3], cin).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros(padded_shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward, "conv2d")


class Conv2d(Module):
    def __init__(self, rng: Rng, in_c: int, out_c: int, kernel: int = 3, stride: int = 1, padding: int | None = None, bias: bool = True):
        if padding is None:
            padding = kernel // 2
        self.stride, self.padding = stride, padding
        self.weight = Tensor(init_params(rng, in_c * kernel * kernel, (out_c, in_c, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_c, np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


# -- pooling ----------------------------------------------------------------


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first row-major maximum."""
    if window != stride:
        raise ValueError("maxpool2d supports window == stride only")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by stride {stride}")
    ho, wo = h // stride, w // stride
    blocks = x.data.reshape(n, c, ho, stride, wo, stride).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, stride * stride)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, stride, stride).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool2d")


# -- bilinear upsampling ----------------------------------------------------


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows map output samples to input samples; half-pixel centres, edge clamping."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    s = n_in / n_out
    for d in range(n_out):
        src = min(max((d + 0.5) * s - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[d, i0] += 1 - t
        m[d, i1] += t
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _interp_matrix(n_in, n_out).astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the two trailing axes to ``size`` (upscaling only)."""
    h, w = x.shape[-2:]
    th, tw = size
    if th < h or tw < w:
        raise ShapeError(f"upsample_bilinear: target {th}x{tw} is smaller than input {h}x{w}")
    if (th, tw) == (h, w):
        return x
    ah = interp_matrix(h, th, x.dtype)
    awt = interp_matrix(w, tw, x.dtype).T.copy()
    out = ah @ x.data @ awt
    return Tensor._make(out, (x,), lambda g: (ah.T @ g @ awt.T,), "upsample_bilinear")


# -- normalization ----------------------------------------------------------


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics for eval mode."""

    _buffer_names = ("running_mean", "running_var", "num_batches")
    _no_decay = ("gamma", "beta")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))
        self.num_batches = Tensor(np.zeros((), np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return norm2d(x, self)


def norm2d(x: Tensor, p: BatchNorm2d) -> Tensor:
    c = p.gamma.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"norm2d: expected {c} channels, got input {x.shape}")
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    dt = x.dtype.type

    if not p.training:
        if p.num_batches.data == 0:
            raise RuntimeError("norm2d: eval mode before any training step; running statistics are uninitialized")
        inv = 1.0 / np.sqrt(p.running_var.data.reshape(1, c, 1, 1) + dt(p.eps))
        xhat = (x.data - p.running_mean.data.reshape(1, c, 1, 1)) * inv
        out = gamma * xhat + beta

        def backward_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._make(out.astype(x.dtype), (x, p.gamma, p.beta), backward_eval, "norm2d")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + dt(p.eps))
    xhat = xc * inv
    out = gamma * xhat + beta

    mom = p.momentum
    unbiased = var.reshape(c) * (m / max(m - 1, 1))
    p.running_mean.data = ((1 - mom) * p.running_mean.data + mom * mu.reshape(c)).astype(p.running_mean.dtype)
    p.running_var.data = ((1 - mom) * p.running_var.data + mom * unbiased).astype(p.running_var.dtype)
    p.num_batches.data = p.num_batches.data + 1

    def backward(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._make(out, (x, p.gamma, p.beta), backward, "norm2d")


# -- composite block --------------------------------------------------------


class ConvBlock(Module):
    """[3x3 conv -> batch norm -> relu] x 2 with same padding."""

    def __init__(self, rng: Rng, in_c: int, out_c: int, use_norm: bool = True):
        self.conv1 = Conv2d(rng.child("conv1"), in_c, out_c, 3)
        self.conv2 = Conv2d(rng.child("conv2"), out_c, out_c, 3)
        self.norm1 = BatchNorm2d(out_c) if use_norm else None
        self.norm2 = BatchNorm2d(out_c) if use_norm else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv1(x)
        if self.norm1 is not None:
            x = self.norm1(x)
        x = relu(x)
        x = self.conv2(x)
        if self.norm2 is not None:
            x = self.norm2(x)
        return relu(x)


def conv_block(x: Tensor, params: ConvBlock) -> Tensor:
    return params(x)
