"""U-shaped segmentation network with a self-aware attention bottleneck and
multi-scale skip connections (MSC) across decoder stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import SelfAwareAttention
from .imageio import write_pgm
from .nn import Conv2d, ConvBlock, Module, maxpool2d, upsample_bilinear
from .rng import Rng
from .tensor import Tensor, ShapeError, concat, sigmoid

MSC_MODES = ("cascade", "residual", "dense", "none")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    heads: int = 8
    msc_mode: str = "residual"
    use_tsa: bool = True
    use_gsa: bool = True
    use_norm: bool = True
    tsa_out_proj: bool = True
    share_tsa_heads: bool = False
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.msc_mode not in MSC_MODES:
            raise ConfigError(f"msc_mode must be one of {MSC_MODES}, got {self.msc_mode!r}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1 or self.heads < 1:
            raise ConfigError("depth, base_channels, in_channels and heads must be positive")
        if self.msc_mode != "none" and self.depth < 2:
            raise ConfigError(f"msc_mode {self.msc_mode!r} needs at least 2 decoder stages (depth >= 2)")
        need = max(self.heads, 8)
        if self.bottleneck_channels % need:
            raise ConfigError(
                f"bottleneck width base_channels * 2**depth = {self.bottleneck_channels} must be divisible by {need}"
            )
        self.check_input(*self.input_size)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.depth

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2**k for k in range(self.depth + 1)]

    def check_input(self, h: int, w: int) -> None:
        k = 2**self.depth
        if h % k or w % k:
            raise ShapeError(f"input extents {h}x{w} must be divisible by 2**depth = {k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DecoderStageOutput:
    stage_index: int
    features: Tensor
    spatial_scale: int  # divisor relative to the input resolution


# -- multi-scale skip connections ------------------------------------------

Fuse = Callable[[Tensor], Tensor]


def _need_stages(stages: Sequence[DecoderStageOutput], name: str) -> None:
    if len(stages) < 2:
        raise ValueError(f"{name} needs at least 2 decoder stages, got {len(stages)}")


def msc_cascade(stages: Sequence[DecoderStageOutput], fuse: Fuse) -> Tensor:
    """Upsample every stage to the finest resolution, concatenate, fuse once."""
    _need_stages(stages, "msc_cascade")
    size = stages[-1].features.shape[2:]
    return fuse(concat([upsample_bilinear(s.features, size) for s in stages], axis=1))


def msc_residual(stages: Sequence[DecoderStageOutput], fuses: Sequence[Fuse]) -> Tensor:
    """acc <- f_n(F_n (+) up2(acc)), stepping one octave per stage.

    ``fuses[i]`` fuses stage ``i + 1``; stage 0 seeds the accumulator.
    """
    _need_stages(stages, "msc_residual")
    acc = stages[0].features
    for stage, fuse in zip(stages[1:], fuses):
        feat = stage.features
        acc = fuse(concat([feat, upsample_bilinear(acc, feat.shape[2:])], axis=1))
    return acc


def msc_dense(stages: Sequence[DecoderStageOutput], fuses: Sequence[Fuse]) -> Tensor:
    """G_n = f_n(F_n (+) up(G_1) (+) ... (+) up(G_{n-1})) with G_1 = F_1."""
    _need_stages(stages, "msc_dense")
    fused = [stages[0].features]
    for stage, fuse in zip(stages[1:], fuses):
        feat = stage.features
        size = feat.shape[2:]
        fused.append(fuse(concat([feat] + [upsample_bilinear(g, size) for g in fused], axis=1)))
    return fused[-1]


# -- network ----------------------------------------------------------------


class TransAttUnet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed).child("model")
        widths = cfg.widths
        d = cfg.depth
        norm = cfg.use_norm
        self.encoder = [
            ConvBlock(rng.child("enc", k), cfg.in_channels if k == 0 else widths[k - 1], widths[k], norm) for k in range(d + 1)
        ]
        bh, bw = (s // 2**d for s in cfg.input_size)
        self.saa = SelfAwareAttention(
            rng.child("saa"), widths[d], bh, bw, cfg.heads, cfg.use_tsa, cfg.use_gsa, cfg.tsa_out_proj, cfg.share_tsa_heads
        )
        # decoder[i] produces stage i + 1 (coarse to fine) at width widths[d - 1 - i]
        self.decoder = [
            ConvBlock(rng.child("dec", i), widths[d - i] + widths[d - 1 - i], widths[d - 1 - i], norm) for i in range(d)
        ]
        stage_w = [widths[d - 1 - i] for i in range(d)]
        if cfg.msc_mode == "cascade":
            self.msc = [ConvBlock(rng.child("msc", 0), sum(stage_w), stage_w[-1], norm)]
        elif cfg.msc_mode == "residual":
            self.msc = [ConvBlock(rng.child("msc", n), stage_w[n] + stage_w[n - 1], stage_w[n], norm) for n in range(1, d)]
        elif cfg.msc_mode == "dense":
            self.msc = [ConvBlock(rng.child("msc", n), stage_w[n] + sum(stage_w[:n]), stage_w[n], norm) for n in range(1, d)]
        else:
            self.msc = []
        self.head = Conv2d(rng.child("head"), widths[0], 1, 1)

    # pieces are exposed individually for tests and activation export

    def encode(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        return encoder_forward(x, self)

    def decode_stages(self, bottleneck: Tensor, skips: list[Tensor]) -> list[DecoderStageOutput]:
        stages, h = [], bottleneck
        for i, block in enumerate(self.decoder):
            skip = skips[-1 - i]
            h = decoder_stage(h, skip, block)
            stages.append(DecoderStageOutput(i + 1, h, 2 ** (self.cfg.depth - 1 - i)))
        return stages

    def fuse(self, stages: list[DecoderStageOutput]) -> Tensor:
        mode = self.cfg.msc_mode
        if mode == "cascade":
            return msc_cascade(stages, self.msc[0])
        if mode == "residual":
            return msc_residual(stages, self.msc)
        if mode == "dense":
            return msc_dense(stages, self.msc)
        return stages[-1].features

    def forward_stages(self, x: Tensor) -> tuple[list[DecoderStageOutput], Tensor]:
        skips, bottleneck = self.encode(x)
        stages = self.decode_stages(self.saa(bottleneck), skips)
        return stages, sigmoid(self.head(self.fuse(stages)))

    def forward(self, x: Tensor) -> Tensor:
        return model_forward(x, self)


def encoder_forward(x: Tensor, model: TransAttUnet) -> tuple[list[Tensor], Tensor]:
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
    cfg.check_input(*x.shape[2:])
    skips, h = [], x
    for block in model.encoder[:-1]:
        h = block(h)
        skips.append(h)
        h = maxpool2d(h)
    return skips, model.encoder[-1](h)


def decoder_stage(prev: Tensor, skip: Tensor, block: Fuse) -> Tensor:
    """Upsample ``prev`` x2, concatenate ``skip`` on channels, apply ``block``."""
    ph, pw = prev.shape[2:]
    if skip.shape[2:] != (2 * ph, 2 * pw) or skip.shape[0] != prev.shape[0]:
        raise ShapeError(f"decoder_stage: skip {skip.shape} must be twice the extents of prev {prev.shape}")
    return block(concat([upsample_bilinear(prev, skip.shape[2:]), skip], axis=1))


def model_forward(x: Tensor, model: TransAttUnet) -> Tensor:
    """Probability map N x 1 x H x W with values in (0, 1)."""
    _, prob = model.forward_stages(x)
    return prob


def export_activations(model: TransAttUnet, x: Tensor, out_dir) -> list[Path]:
    """Write the channel-mean activation of each decoder stage (first batch item)
    as ``stage_<k>.pgm``, min-max scaled to 0..255; a constant map is written as 0."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create activation directory {out_dir}: {exc}") from exc
    stages, _ = model.forward_stages(x)
    paths = []
    for stage in stages:
        amap = stage.features.data[0].astype(np.float64).mean(axis=0)
        paths.append(out_dir / f"stage_{stage.stage_index}.pgm")
        try:
            write_pgm(paths[-1], activation_to_gray(amap))
        except OSError as exc:
            raise OSError(f"cannot write {paths[-1]}: {exc}") from exc
    return paths


def activation_to_gray(amap: np.ndarray) -> np.ndarray:
    lo, hi = float(amap.min()), float(amap.max())
    if hi == lo:
        return np.zeros(amap.shape, np.uint8)
    return np.rint((amap - lo) / (hi - lo) * 255).astype(np.uint8)
