"""Synthetic segmentation data, image/mask files, resizing and splitting."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import read_gray, write_pgm
from .nn import interp_matrix
from .rng import Rng


class DataError(ValueError):
    pass


@dataclass
class SegSample:
    id: str
    image: np.ndarray  # 1 x H x W float32 in [0, 1]
    mask: np.ndarray  # 1 x H x W float32 in {0, 1}
    source: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ spatially")


@dataclass
class SynthConfig:
    size: tuple[int, int] = (64, 64)
    n_shapes: tuple[int, int] = (1, 4)
    kinds: tuple[str, ...] = ("ellipse", "rectangle")
    # half-extent range as a fraction of min(H, W)
    radius: tuple[float, float] = (0.08, 0.22)
    background: tuple[float, float] = (0.05, 0.3)
    contrast: tuple[float, float] = (0.35, 0.6)
    noise_sigma: float = 0.05
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.n_shapes = tuple(int(s) for s in self.n_shapes)
        self.kinds = tuple(self.kinds)
        lo, hi = self.n_shapes
        if lo < 1 or hi < lo:
            raise DataError(f"n_shapes range must satisfy 1 <= lo <= hi, got {self.n_shapes}")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")
        unknown = set(self.kinds) - {"ellipse", "rectangle"}
        if not self.kinds or unknown:
            raise DataError(f"shape kinds must be drawn from ellipse/rectangle, got {self.kinds}")


def ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    """Pixels whose integer centre (r, c) satisfies ((r-cy)/ry)^2 + ((c-cx)/rx)^2 <= 1."""
    r = np.arange(h)[:, None]
    c = np.arange(w)[None, :]
    return ((r - cy) / ry) ** 2 + ((c - cx) / rx) ** 2 <= 1.0


def rectangle_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    r = np.arange(h)[:, None]
    c = np.arange(w)[None, :]
    return (np.abs(r - cy) <= ry) & (np.abs(c - cx) <= rx)


_RASTER = {"ellipse": ellipse_mask, "rectangle": rectangle_mask}


def _place_shape(rng: Rng, cfg: SynthConfig) -> dict:
    h, w = cfg.size
    scale = min(h, w)
    for _ in range(cfg.max_retries):
        ry = rng.uniform(*cfg.radius) * scale
        rx = rng.uniform(*cfg.radius) * scale
        if 2 * ry > h - 1 or 2 * rx > w - 1:
            continue
        cy = rng.uniform(ry, h - 1 - ry)
        cx = rng.uniform(rx, w - 1 - rx)
        return {"kind": str(rng.choice(list(cfg.kinds))), "cy": cy, "cx": cx, "ry": ry, "rx": rx}
    raise DataError(f"could not fit a shape of radius range {cfg.radius} into a {h}x{w} canvas")


def synth_sample(cfg: SynthConfig, index: int) -> SegSample:
    """Sample ``index`` of the dataset; depends only on (cfg, index)."""
    rng = Rng(cfg.seed).child("synth", index)
    h, w = cfg.size
    bg = rng.uniform(*cfg.background)
    n = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    image = np.full((h, w), bg)
    mask = np.zeros((h, w), dtype=bool)
    shapes = []
    for _ in range(n):
        shape = _place_shape(rng, cfg)
        shape["intensity"] = bg + rng.uniform(*cfg.contrast)
        region = _RASTER[shape["kind"]](h, w, shape["cy"], shape["cx"], shape["ry"], shape["rx"])
        image = np.where(region, np.maximum(image, shape["intensity"]), image)
        mask |= region
        shapes.append(shape)
    if cfg.noise_sigma > 0:
        image = image + rng.normal((h, w), cfg.noise_sigma, np.float64)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(f"synth_{index:05d}", image[None], mask[None].astype(np.float32), "synthetic", {"shapes": shapes})


def synth_generate(cfg: SynthConfig, n: int, start: int = 0) -> list[SegSample]:
    if n < 1:
        raise DataError(f"need at least one sample, got n={n}")
    return [synth_sample(cfg, start + i) for i in range(n)]


# -- files ------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """1 x H x W float32 scaled to [0, 1]."""
    return (read_gray(path).astype(np.float32) / 255.0)[None]


def load_mask(path) -> np.ndarray:
    """1 x H x W float32 with 255 -> 1 and 0 -> 0; any other value is an error."""
    raw = read_gray(path)
    bad = np.setdiff1d(np.unique(raw), (0, 255))
    if bad.size:
        raise DataError(f"{path}: mask contains non-binary values {bad.tolist()}")
    return (raw == 255).astype(np.float32)[None]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    write_pgm(path, to_uint8(np.asarray(image).reshape(np.asarray(image).shape[-2:])))


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).reshape(np.asarray(mask).shape[-2:])
    write_pgm(path, np.where(m > 0.5, 255, 0).astype(np.uint8))


def write_dataset(root, splits: dict[str, Sequence[SegSample]]) -> Path:
    """Layout: <root>/images/<id>.pgm, <root>/masks/<id>.pgm, <root>/manifest.csv (id, split)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name, samples in splits.items():
        for s in samples:
            save_image(root / "images" / f"{s.id}.pgm", s.image)
            save_mask(root / "masks" / f"{s.id}.pgm", s.mask)
            rows.append((s.id, split_name))
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split"])
        w.writerows(rows)
    return root


def read_dataset(root) -> dict[str, list[SegSample]]:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"{root}: missing manifest.csv")
    out: dict[str, list[SegSample]] = {}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            sample = SegSample(
                sid, load_image(root / "images" / f"{sid}.pgm"), load_mask(root / "masks" / f"{sid}.pgm"), "file"
            )
            out.setdefault(row["split"], []).append(sample)
    return out


# -- resizing and splitting -------------------------------------------------


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_pair(s: SegSample, target: tuple[int, int], divisor: int = 1, strict: bool = True) -> SegSample:
    """Bilinear-resize the image and nearest-neighbour-resize the mask to ``target``."""
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise DataError(f"invalid resize target {target}")
    if th % divisor or tw % divisor:
        msg = f"resize target {th}x{tw} is not divisible by {divisor}"
        if strict:
            raise DataError(msg)
        warnings.warn(msg, stacklevel=2)
    h, w = s.image.shape[-2:]
    if (th, tw) == (h, w):
        return s
    ah = interp_matrix(h, th)
    aw = interp_matrix(w, tw)
    image = np.clip(ah @ s.image[0].astype(np.float64) @ aw.T, 0, 1).astype(np.float32)[None]
    mask = s.mask[0][np.ix_(_nearest_index(h, th), _nearest_index(w, tw))][None]
    return SegSample(s.id, image, mask, s.source, dict(s.meta))


def split(samples: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, list, list]:
    """Deterministic shuffle, then cut into train/val/test by ``fractions``."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    n = len(samples)
    order = Rng(seed).child("split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    items = [samples[i] for i in order]
    return items[:n_train], items[n_train : n_train + n_val], items[n_train + n_val :]
