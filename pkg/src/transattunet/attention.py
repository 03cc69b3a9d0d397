"""Self-aware attention bottleneck: transformer self attention (TSA), global
spatial attention (GSA) and their learnable weighted fusion with the input.

TSA treats channels as tokens: for a bottleneck of c x h x w each token is a
row of length h*w, the attention map per head is (c/heads) x (c/heads), and
the query/key/value embeddings are (h*w) x (h*w) right-multiplications.
GSA treats spatial positions as tokens with an (h*w) x (h*w) map whose softmax
normalizes over the source-position index.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv2d, Module, init_params
from .rng import Rng
from .tensor import Tensor, ShapeError, add, matmul, mul, reshape, scale, softmax, transpose


class TsaParams(Module):
    def __init__(self, rng: Rng, channels: int, h: int, w: int, heads: int = 8, out_proj: bool = True, share_heads: bool = False):
        if channels % heads:
            raise ShapeError(f"TSA: {channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.channels = channels
        hw = h * w
        self.d_k = hw
        n_proj = 1 if share_heads else heads
        self.w_q = Tensor(init_params(rng.child("w_q"), hw, (n_proj, hw, hw)), requires_grad=True)
        self.w_k = Tensor(init_params(rng.child("w_k"), hw, (n_proj, hw, hw)), requires_grad=True)
        self.w_v = Tensor(init_params(rng.child("w_v"), hw, (n_proj, hw, hw)), requires_grad=True)
        self.pos_enc = Tensor(rng.child("pos_enc").normal((channels, h, w), 0.02), requires_grad=True)
        self.out_proj = Conv2d(rng.child("out_proj"), channels, channels, 1) if out_proj else None


def tsa_forward(f: Tensor, p: TsaParams) -> Tensor:
    n, c, h, w = f.shape
    if c % p.heads:
        raise ShapeError(f"TSA: {c} channels not divisible by {p.heads} heads")
    if p.pos_enc.shape != (c, h, w):
        raise ShapeError(f"TSA: positional encoding {p.pos_enc.shape} does not match features {(c, h, w)}")
    hw = h * w
    x = add(f, reshape(p.pos_enc, (1, c, h, w)))
    # (n, heads, c/heads, hw): channel groups form the heads
    x = reshape(x, (n, p.heads, c // p.heads, hw))
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(p.d_k))
    attn = softmax(logits, axis=-1)
    out = reshape(matmul(attn, v), (n, c, h, w))
    if p.out_proj is not None:
        out = p.out_proj(out)
    return out


def tsa_attention_map(f: Tensor, p: TsaParams) -> np.ndarray:
    """The per-head attention maps A, shape (n, heads, c/heads, c/heads)."""
    n, c, h, w = f.shape
    x = (f.data + p.pos_enc.data[None]).reshape(n, p.heads, c // p.heads, h * w)
    q, k = x @ p.w_q.data, x @ p.w_k.data
    return softmax(Tensor(q @ np.swapaxes(k, -1, -2) / np.sqrt(p.d_k)), -1).data


class GsaParams(Module):
    def __init__(self, rng: Rng, channels: int):
        if channels % 8 or channels < 8:
            raise ShapeError(f"GSA: channel count {channels} must be a positive multiple of 8")
        self.proj_reduce = Conv2d(rng.child("proj_reduce"), channels, channels // 8, 1)
        self.proj_full = Conv2d(rng.child("proj_full"), channels, channels, 1)


def _gsa_maps(f_en: Tensor, p: GsaParams) -> tuple[Tensor, Tensor]:
    n, c, h, w = f_en.shape
    if c % 8 or c < 8:
        raise ShapeError(f"GSA: channel count {c} must be a positive multiple of 8")
    hw = h * w
    reduced = reshape(p.proj_reduce(f_en), (n, c // 8, hw))
    m = transpose(reduced, (0, 2, 1))  # (n, hw, c')
    energy = matmul(m, reduced)  # energy[i, j] = M_i . N_j
    b = softmax(energy, axis=1)  # normalize over source position i
    w_full = reshape(p.proj_full(f_en), (n, c, hw))
    return b, w_full


def gsa_forward(f_en: Tensor, p: GsaParams) -> Tensor:
    n, c, h, w = f_en.shape
    b, w_full = _gsa_maps(f_en, p)
    # out[:, p] = sum_q W[:, q] * B[p, q]
    out = matmul(w_full, transpose(b, (0, 2, 1)))
    return reshape(out, (n, c, h, w))


def gsa_attention_map(f_en: Tensor, p: GsaParams) -> np.ndarray:
    """Position map B, shape (n, hw, hw); each column (fixed target j) sums to 1."""
    return _gsa_maps(Tensor(f_en.data), p)[0].data


class FusionParams(Module):
    _no_decay = ("lambda1", "lambda2")

    def __init__(self, use_tsa: bool = True, use_gsa: bool = True):
        # a disabled branch has no weight, so no parameter is left without gradient
        self.lambda1 = Tensor(np.zeros((), np.float32), requires_grad=True) if use_tsa else None
        self.lambda2 = Tensor(np.zeros((), np.float32), requires_grad=True) if use_gsa else None


def saa_fuse(f_en: Tensor, f_tsa: Tensor | None, f_gsa: Tensor | None, p: FusionParams) -> Tensor:
    """lambda1 * F_tsa + lambda2 * F_gsa + F_en; a missing branch contributes zero."""
    for name, t in (("F_tsa", f_tsa), ("F_gsa", f_gsa)):
        if t is not None and t.shape != f_en.shape:
            raise ShapeError(f"saa_fuse: {name} shape {t.shape} != F_en shape {f_en.shape}")
    if (f_tsa is not None and p.lambda1 is None) or (f_gsa is not None and p.lambda2 is None):
        raise ValueError("saa_fuse: got a branch output for a branch the fusion weights were built without")
    attn = None
    if f_tsa is not None:
        attn = mul(p.lambda1, f_tsa)
    if f_gsa is not None:
        term = mul(p.lambda2, f_gsa)
        attn = term if attn is None else add(attn, term)
    if attn is None:
        return f_en
    return add(attn, f_en)


class SelfAwareAttention(Module):
    """The bottleneck bridge between encoder and decoder."""

    def __init__(self, rng: Rng, channels: int, h: int, w: int, heads: int = 8, use_tsa: bool = True, use_gsa: bool = True, tsa_out_proj: bool = True, share_heads: bool = False):
        self.tsa = TsaParams(rng.child("tsa"), channels, h, w, heads, tsa_out_proj, share_heads) if use_tsa else None
        self.gsa = GsaParams(rng.child("gsa"), channels) if use_gsa else None
        self.fusion = FusionParams(use_tsa, use_gsa)

    def forward(self, f_en: Tensor) -> Tensor:
        return saa_forward(f_en, self)


def saa_forward(f_en: Tensor, params: SelfAwareAttention) -> Tensor:
    f_tsa = tsa_forward(f_en, params.tsa) if params.tsa is not None else None
    f_gsa = gsa_forward(f_en, params.gsa) if params.gsa is not None else None
    return saa_fuse(f_en, f_tsa, f_gsa, params.fusion)
