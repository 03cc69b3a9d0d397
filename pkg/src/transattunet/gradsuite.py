"""The full finite-difference gradient suite, run in float64.

Primitives are checked at 1e-5 on three random shapes each; composite blocks
and the end-to-end model at 1e-3.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import GsaParams, SelfAwareAttention, TsaParams, gsa_forward, saa_forward, tsa_forward
from .gradcheck import GradcheckReport, gradcheck, weighted_sum
from .losses import LossConfig, bce_loss, combined_loss, dice_loss
from .model import DecoderStageOutput, ModelConfig, TransAttUnet, decoder_stage, msc_cascade, msc_dense, msc_residual
from .nn import BatchNorm2d, ConvBlock, Module, conv2d, maxpool2d, norm2d, upsample_bilinear
from .rng import Rng
from .tensor import Tensor

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    kind: str
    report: GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng: np.random.Generator, *shape, uniform=None, away=0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away:
        # keep clear of kinks at 0
        x = np.where(np.abs(x) < away, np.sign(x + 1e-12) * away + x, x)
    if uniform is not None:
        x = rng.uniform(uniform[0], uniform[1], shape)
    return Tensor(x, dtype=np.float64)


def _params64(module: Module) -> list[Tensor]:
    module.astype(np.float64)
    return module.parameters()


SHAPES = [(3,), (2, 5), (2, 3, 4, 4)]
MAT_SHAPES = [((3, 4), (4, 2)), ((2, 3, 5), (5, 4)), ((2, 2, 3, 3), (2, 3, 4))]


def primitive_checks() -> list[tuple[str, Callable[[], GradcheckReport]]]:
    rng = np.random.default_rng(1234)
    checks = []

    def add_check(name, make):
        checks.append((name, make))

    for k, shape in enumerate(SHAPES):
        sid = f"{shape}"

        def binary(op, shape=shape, b_pos=False):
            a = _t(rng, *shape)
            b = _t(rng, *shape, uniform=(0.5, 2.0)) if b_pos else _t(rng, *shape)
            return lambda: gradcheck(lambda: weighted_sum(op(a, b)), [a, b], tol=PRIMITIVE_TOL)

        add_check(f"add {sid}", binary(T.add))
        add_check(f"sub {sid}", binary(T.sub))
        add_check(f"mul {sid}", binary(T.mul))
        add_check(f"div {sid}", binary(T.div, b_pos=True))

        def unary(op, shape=shape, **kw):
            a = _t(rng, *shape, **kw)
            return lambda: gradcheck(lambda: weighted_sum(op(a)), a, tol=PRIMITIVE_TOL)

        add_check(f"scale {sid}", unary(lambda a: T.scale(a, -1.7)))
        add_check(f"relu {sid}", unary(T.relu, away=1e-3))
        add_check(f"sigmoid {sid}", unary(T.sigmoid))
        add_check(f"exp {sid}", unary(T.exp))
        add_check(f"log {sid}", unary(T.log, uniform=(0.2, 2.0)))
        add_check(f"clamp {sid}", unary(lambda a: T.clamp(a, -0.5, 0.5), away=1e-3))
        add_check(f"softmax {sid}", unary(lambda a: T.softmax(a, -1)))
        add_check(f"sum {sid}", unary(lambda a: T.reduce("sum", a, -1)))
        add_check(f"mean {sid}", unary(lambda a: T.reduce("mean", a, 0)))
        add_check(f"reshape {sid}", unary(lambda a: T.reshape(a, (-1,))))
        add_check(f"transpose {sid}", unary(lambda a: T.transpose(a)))

        def cat(shape=shape):
            a, b = _t(rng, *shape), _t(rng, *shape)
            return lambda: gradcheck(lambda: weighted_sum(T.concat([a, b], axis=-1)), [a, b], tol=PRIMITIVE_TOL)

        add_check(f"concat {sid}", cat())

    # per-channel broadcast against N x C x H x W
    def chan():
        a, v = _t(rng, 2, 3, 2, 2), _t(rng, 3)
        return lambda: gradcheck(lambda: weighted_sum(T.mul(a, v)), [a, v], tol=PRIMITIVE_TOL)

    add_check("mul per-channel", chan())

    for sa, sb in MAT_SHAPES:
        def mm(sa=sa, sb=sb):
            a, b = _t(rng, *sa), _t(rng, *sb)
            return lambda: gradcheck(lambda: weighted_sum(T.matmul(a, b)), [a, b], tol=PRIMITIVE_TOL)

        add_check(f"matmul {sa}x{sb}", mm())

    for shape, k, pad in [((1, 2, 4, 4), 3, 1), ((2, 3, 5, 5), 3, 0), ((1, 4, 3, 3), 1, 0)]:
        def conv(shape=shape, k=k, pad=pad):
            x = _t(rng, *shape)
            w = _t(rng, 3, shape[1], k, k)
            b = _t(rng, 3)
            return lambda: gradcheck(lambda: weighted_sum(conv2d(x, w, b, 1, pad)), [x, w, b], tol=PRIMITIVE_TOL)

        add_check(f"conv2d {shape} k{k} p{pad}", conv())

    for shape in [(1, 1, 4, 4), (2, 3, 4, 6), (1, 2, 2, 2)]:
        def pool(shape=shape):
            # distinct values keep argmax stable under perturbation
            x = Tensor(rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1, dtype=np.float64)
            return lambda: gradcheck(lambda: weighted_sum(maxpool2d(x)), x, tol=PRIMITIVE_TOL)

        add_check(f"maxpool2d {shape}", pool())

    for shape, size in [((1, 1, 1, 2), (1, 4)), ((1, 2, 3, 3), (6, 6)), ((2, 1, 2, 4), (5, 7))]:
        def up(shape=shape, size=size):
            x = _t(rng, *shape)
            return lambda: gradcheck(lambda: weighted_sum(upsample_bilinear(x, size)), x, tol=PRIMITIVE_TOL)

        add_check(f"upsample {shape}->{size}", up())
    return checks


def composite_checks() -> list[tuple[str, Callable[[], GradcheckReport]]]:
    rng = np.random.default_rng(99)
    checks = []

    def norm():
        bn = BatchNorm2d(3)
        bn.gamma.data = rng.uniform(0.5, 1.5, 3)
        bn.beta.data = rng.standard_normal(3)
        x = _t(rng, 2, 3, 2, 2)
        return lambda: gradcheck(lambda: weighted_sum(norm2d(x, bn)), [x] + _params64(bn), tol=COMPOSITE_TOL)

    checks.append(("norm2d 2x3x2x2", norm()))

    def block():
        cb = ConvBlock(Rng(5), 2, 4)
        x = _t(rng, 1, 2, 4, 4)
        ps = _params64(cb)
        return lambda: gradcheck(lambda: weighted_sum(cb(x)), [x] + ps, tol=COMPOSITE_TOL, max_per_input=12)

    checks.append(("conv_block 1x2x4x4", block()))

    def tsa():
        p = TsaParams(Rng(6), 16, 2, 2, heads=8)
        x = _t(rng, 2, 16, 2, 2)
        ps = _params64(p)
        return lambda: gradcheck(lambda: weighted_sum(tsa_forward(x, p)), [x] + ps, tol=COMPOSITE_TOL, max_per_input=24)

    checks.append(("tsa heads=8 2x16x2x2", tsa()))

    def gsa():
        p = GsaParams(Rng(7), 8)
        x = _t(rng, 1, 8, 2, 3)
        ps = _params64(p)
        return lambda: gradcheck(lambda: weighted_sum(gsa_forward(x, p)), [x] + ps, tol=COMPOSITE_TOL)

    checks.append(("gsa 1x8x2x3", gsa()))

    def saa():
        p = SelfAwareAttention(Rng(8), 8, 2, 2, heads=1)
        ps = _params64(p)
        p.fusion.lambda1.data = np.array(0.7)
        p.fusion.lambda2.data = np.array(-0.4)
        x = _t(rng, 1, 8, 2, 2)
        return lambda: gradcheck(lambda: weighted_sum(saa_forward(x, p)), [x] + ps, tol=COMPOSITE_TOL, max_per_input=24)

    checks.append(("saa 1x8x2x2", saa()))

    def decoder():
        cb = ConvBlock(Rng(9), 6, 2)
        prev, skip = _t(rng, 1, 4, 2, 2), _t(rng, 1, 2, 4, 4)
        ps = _params64(cb)
        return lambda: gradcheck(lambda: weighted_sum(decoder_stage(prev, skip, cb)), [prev, skip] + ps, tol=COMPOSITE_TOL, max_per_input=12)

    checks.append(("decoder_stage", decoder()))

    for mode, fn in (("cascade", msc_cascade), ("residual", msc_residual), ("dense", msc_dense)):
        def msc(mode=mode, fn=fn):
            feats = [_t(rng, 1, 4, 2, 2), _t(rng, 1, 3, 4, 4), _t(rng, 1, 2, 8, 8)]
            if mode == "cascade":
                blocks = ConvBlock(Rng(10), 9, 2)
            elif mode == "residual":
                blocks = [ConvBlock(Rng(11), 7, 3), ConvBlock(Rng(12), 5, 2)]
            else:
                blocks = [ConvBlock(Rng(13), 7, 3), ConvBlock(Rng(14), 9, 2)]
            mods = blocks if isinstance(blocks, list) else [blocks]
            ps = [p for m in mods for p in _params64(m)]

            def f():
                stages = [DecoderStageOutput(i + 1, t, 4 >> i) for i, t in enumerate(feats)]
                return weighted_sum(fn(stages, blocks))

            return lambda: gradcheck(f, feats + ps, tol=COMPOSITE_TOL, max_per_input=8)

        checks.append((f"msc_{mode} 3 stages", msc()))

    def losses():
        p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), dtype=np.float64)
        y = Tensor((rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(np.float64))
        cfg = LossConfig()
        return lambda: max(
            (gradcheck(lambda fn=fn: fn(p, y, cfg), p, tol=1e-6) for fn in (bce_loss, dice_loss, combined_loss)),
            key=lambda r: r.max_rel_error,
        )

    checks.append(("bce/dice/combined loss", losses()))

    def full_model():
        cfg = ModelConfig(depth=2, base_channels=16, heads=8, input_size=(16, 16), msc_mode="residual", seed=3)
        model = TransAttUnet(cfg)
        ps = _params64(model)
        model.saa.fusion.lambda1.data = np.array(0.5)
        model.saa.fusion.lambda2.data = np.array(0.5)
        x = Tensor(rng.uniform(0, 1, (1, 1, 16, 16)), dtype=np.float64)
        y = Tensor((rng.uniform(size=(1, 1, 16, 16)) > 0.6).astype(np.float64))
        return lambda: gradcheck(lambda: combined_loss(model(x), y), [x] + ps, tol=COMPOSITE_TOL, max_per_input=3)

    checks.append(("model 1x1x16x16 depth 2", full_model()))
    return checks


def run_suite(verbose: Callable[[str], None] | None = None) -> list[SuiteResult]:
    results = []
    for kind, builder in (("primitive", primitive_checks), ("composite", composite_checks)):
        for name, run in builder():
            t0 = time.perf_counter()
            report = run()
            res = SuiteResult(name, kind, report, time.perf_counter() - t0)
            results.append(res)
            if verbose:
                status = "PASS" if res.passed else "FAIL"
                verbose(f"{status} {kind:9s} {name:36s} max_rel_err={report.max_rel_error:.2e} tol={report.tol:.0e}")
    return results
