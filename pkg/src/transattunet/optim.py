"""SGD with momentum and decoupled-exempt weight decay, plus step learning-rate decay."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class OptimConfig:
    lr0: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factor: float = 10.0
    decay_every_epochs: int = 40
    epochs: int = 100
    batch_size: int = 4

    def __post_init__(self):
        if self.lr0 <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr0 must be positive; momentum and weight_decay nonnegative")
        if self.decay_factor <= 1:
            raise ValueError(f"decay_factor must exceed 1, got {self.decay_factor}")
        if self.decay_every_epochs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("decay_every_epochs, epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def desk_optim(**overrides) -> OptimConfig:
    """Settings that fit a 16-sample synthetic task in 60 CPU epochs."""
    base = dict(lr0=0.02, epochs=60, decay_every_epochs=40)
    base.update(overrides)
    return OptimConfig(**base)


def lr_schedule(epoch: int, cfg: OptimConfig) -> float:
    """lr0 / decay_factor ** floor(epoch / decay_every_epochs)."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    return cfg.lr0 / cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


class SGD:
    """v <- m v + (g + wd theta); theta <- theta - lr v.

    Parameters named in ``no_decay`` skip the weight-decay term.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], cfg: OptimConfig, no_decay: Iterable[str] = ()):
        self.params = dict(named_params)
        self.cfg = cfg
        self.no_decay = set(no_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        m, wd = self.cfg.momentum, self.cfg.weight_decay
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name} has no gradient")
        for name, p in self.params.items():
            g = p.grad
            if wd and name not in self.no_decay:
                g = g + p.data.dtype.type(wd) * p.data
            v = self.velocity[name]
            v *= v.dtype.type(m)
            v += g
            p.data = p.data - p.data.dtype.type(lr) * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if state.keys() != self.velocity.keys():
            raise KeyError("momentum buffers do not match the parameter set")
        self.velocity = {k: np.asarray(v, dtype=self.velocity[k].dtype).copy() for k, v in state.items()}


def sgd_step(params: dict[str, Tensor], state: dict[str, np.ndarray], cfg: OptimConfig, lr: float, no_decay=()) -> None:
    """Functional form of :meth:`SGD.step` over explicit momentum buffers."""
    opt = SGD(params.items(), cfg, no_decay)
    opt.velocity = state
    opt.step(lr)
