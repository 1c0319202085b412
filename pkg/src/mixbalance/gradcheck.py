"""Central-difference verification of every differentiable op and the composed model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, FeatureBundle, build_backbone, forward_features
from .cbam import BasicBlock, Cbam, CbamConfig, basic_block_cbam_forward, cbam_apply
from .layers import BatchNorm, batchnorm_forward, global_avg_pool, global_max_pool, linear_forward
from .losses import ClassWeights, addup_loss, mix_features, training_loss, weighted_ce

OP_TOL = 1e-5
MODEL_TOL = 1e-4
LOSS_TOL = 1e-6
STEP = 1e-6


@dataclass
class Check:
    name: str
    make: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]
    tol: float = OP_TOL


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _away_from_zero(rng, *shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _bn_module(rng, c):
    bn = BatchNorm(c, dtype=np.float64)
    bn.weight = T.Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
    bn.bias = T.Tensor(rng.normal(size=c), requires_grad=True)
    bn.set_buffer("running_mean", rng.normal(size=c))
    bn.set_buffer("running_var", rng.uniform(0.5, 2.0, c))
    return bn


def _sum_weighted(out: T.Tensor, rng_seed: int = 1) -> T.Tensor:
    # random projection so every output coordinate affects the scalar
    proj = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * T.Tensor(proj)).sum()


def _elementwise_checks() -> list[Check]:
    def binary(op):
        return lambda rng: (lambda a, b: _sum_weighted(op(a, b)),
                            [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))])

    return [
        Check("add", binary(lambda a, b: a + b)),
        Check("sub", binary(lambda a, b: a - b)),
        Check("mul", binary(lambda a, b: a * b)),
        Check("div", lambda rng: (lambda a, b: _sum_weighted(a / b),
                                  [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, (3, 1))])),
        Check("pow", lambda rng: (lambda a: _sum_weighted(a ** 3), [rng.normal(size=(5,))])),
        Check("exp", lambda rng: (lambda a: _sum_weighted(T.exp(a)), [rng.normal(size=(2, 3))])),
        Check("log", lambda rng: (lambda a: _sum_weighted(T.log(a)), [rng.uniform(0.2, 3.0, (2, 3))])),
        Check("sigmoid", lambda rng: (lambda a: _sum_weighted(T.sigmoid(a)), [rng.normal(size=(2, 5)) * 3])),
        Check("relu", lambda rng: (lambda a: _sum_weighted(T.relu(a)), [_away_from_zero(rng, 3, 5)])),
        Check("clamp", lambda rng: (lambda a: _sum_weighted(T.clamp(a, -1.0, 1.0)),
                                    [np.clip(_away_from_zero(rng, 4, 4) * 2, -3, 3) + 0.0])),
    ]


def _shape_checks() -> list[Check]:
    def ties_free(rng, *shape):
        return rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.normal(size=shape) * 0.01

    return [
        Check("sum", lambda rng: (lambda a: _sum_weighted(a.sum(axis=1)), [rng.normal(size=(3, 4, 2))])),
        Check("mean", lambda rng: (lambda a: _sum_weighted(a.mean(axis=(0, 2), keepdims=True)),
                                   [rng.normal(size=(3, 4, 2))])),
        Check("max", lambda rng: (lambda a: _sum_weighted(a.max(axis=1)), [ties_free(rng, 3, 5, 2)])),
        Check("reshape_transpose", lambda rng: (
            lambda a: _sum_weighted(a.reshape(4, 6).transpose()), [rng.normal(size=(2, 3, 4))])),
        Check("index_select", lambda rng: (
            lambda a: _sum_weighted(a[np.array([2, 0, 2, 1])]), [rng.normal(size=(3, 4))])),
        Check("concat", lambda rng: (
            lambda a, b: _sum_weighted(T.concat([a, b], axis=1)),
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))])),
        Check("matmul", lambda rng: (lambda a, b: _sum_weighted(a @ b),
                                     [rng.normal(size=(4, 3)), rng.normal(size=(3, 5))])),
        Check("log_softmax", lambda rng: (lambda a: _sum_weighted(T.log_softmax(a)),
                                          [rng.normal(size=(4, 5)) * 2])),
        Check("max_pool2d", lambda rng: (lambda a: _sum_weighted(T.max_pool2d(a, 2, 2)),
                                         [ties_free(rng, 2, 2, 4, 4)])),
        Check("max_pool2d_overlap", lambda rng: (lambda a: _sum_weighted(T.max_pool2d(a, 3, 1)),
                                                 [ties_free(rng, 1, 2, 5, 5)])),
        Check("avg_pool2d", lambda rng: (lambda a: _sum_weighted(T.avg_pool2d(a, 2, 1)),
                                         [rng.normal(size=(2, 2, 4, 4))])),
    ]


def _conv_checks() -> list[Check]:
    def conv(stride, pad, exact=True, size=5):
        return lambda rng: (
            lambda x, k: _sum_weighted(T.conv2d(x, k, stride, pad, exact)),
            [rng.normal(size=(2, 3, size, size)), rng.normal(size=(4, 3, 3, 3))],
        )

    def composite(rng):
        x = rng.normal(size=(1, 2, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))

        def fn(x, k):
            return T.relu(T.conv2d(x, k, 1, 1)).sum()

        return fn, [x, k]

    return [
        Check("conv2d", conv(1, 0)),
        Check("conv2d_pad", conv(1, 1)),
        Check("conv2d_stride2_floor", conv(2, 1, exact=False, size=6)),
        Check("conv2d_relu_sum", composite),
    ]


def _layer_checks() -> list[Check]:
    def bn(mode):
        def make(rng):
            layer = _bn_module(rng, 3)

            def fn(x, g, b):
                layer.weight, layer.bias = g, b
                return _sum_weighted(batchnorm_forward(x, layer, mode))

            return fn, [rng.normal(size=(4, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]
        return make

    return [
        Check("linear", lambda rng: (lambda x, w, b: _sum_weighted(linear_forward(x, w, b)),
                                     [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)])),
        Check("batchnorm_train", bn("train")),
        Check("batchnorm_eval", bn("eval")),
        Check("global_avg_pool", lambda rng: (lambda x: _sum_weighted(global_avg_pool(x)),
                                              [rng.normal(size=(2, 3, 3, 3))])),
        Check("global_max_pool", lambda rng: (lambda x: _sum_weighted(global_max_pool(x)),
                                              [rng.permutation(36).reshape(2, 2, 3, 3) * 0.1])),
    ]


def _attention_checks() -> list[Check]:
    def cbam_check(rng):
        mod = Cbam(4, CbamConfig(reduction_ratio=2, spatial_kernel=3), rng, dtype=np.float64)

        def fn(x, w1, wc):
            mod.ca.fc1.weight = w1
            mod.sa.conv.weight = wc
            return _sum_weighted(cbam_apply(x, mod))

        return fn, [rng.normal(size=(2, 4, 4, 4)), mod.ca.fc1.weight.data.copy(),
                    mod.sa.conv.weight.data.copy()]

    def block_check(cbam_on):
        def make(rng):
            cfg = CbamConfig(reduction_ratio=2, spatial_kernel=3) if cbam_on else None
            blk = BasicBlock(2, 4, 2, rng, cfg, dtype=np.float64)

            def fn(x, w1):
                blk.conv1.weight = w1
                return _sum_weighted(basic_block_cbam_forward(x, blk, cbam_on))

            return fn, [rng.normal(size=(2, 2, 4, 4)), blk.conv1.weight.data.copy()]
        return make

    return [
        Check("cbam", cbam_check),
        Check("basic_block", block_check(False)),
        Check("basic_block_cbam", block_check(True)),
    ]


def _loss_checks() -> list[Check]:
    def wce(rng):
        labels = rng.integers(0, 4, 6)
        w = ClassWeights(rng.uniform(0.5, 2.0, 4))
        return (lambda z: weighted_ce(z, labels, w)), [rng.normal(size=(6, 4)) * 2]

    def addup(rng):
        li, lj = rng.integers(0, 4, 6), rng.integers(0, 4, 6)
        w = ClassWeights(rng.uniform(0.5, 2.0, 4))
        return (lambda z: addup_loss(z, li, lj, w)), [rng.normal(size=(6, 4)) * 2]

    def mixing(rng):
        perm = rng.permutation(5)

        def fn(mu, s):
            return _sum_weighted(mix_features(FeatureBundle(mu, T.exp(s)), perm).mu_tilde)

        return fn, [rng.normal(size=(5, 3)), rng.normal(size=(5, 3))]

    return [
        Check("weighted_ce", wce, LOSS_TOL),
        Check("addup_loss", addup, LOSS_TOL),
        Check("mix_features", mixing),
    ]


def tiny_config(cbam_on: bool = True) -> BackboneConfig:
    return BackboneConfig(stage_blocks=[1, 1], base_channels=4, input_size=8, in_channels=1,
                          feature_dim=6, num_classes=3, cbam_on=cbam_on, reduction_ratio=2,
                          spatial_kernel=3)


def _model_checks() -> list[Check]:
    def heads(rng):
        net, _ = build_backbone(tiny_config(), rng, dtype=np.float64)
        bb = net.backbone

        def fn(x, wm, ws):
            bb.mu_head.weight, bb.sigma_head.weight = wm, ws
            mu, sigma = forward_features(x, bb)
            return _sum_weighted(mu) + _sum_weighted(sigma, 2)

        return fn, [rng.normal(size=(2, 1, 8, 8)), bb.mu_head.weight.data.copy(),
                    bb.sigma_head.weight.data.copy() * 0.3]

    def full(rng):
        net, _ = build_backbone(tiny_config(), rng, dtype=np.float64)
        labels = np.array([0, 2])
        perm = np.array([1, 0])
        w = ClassWeights([1.0, 0.5, 2.0])

        def fn(x, head_w, stem_w):
            net.head.weight = head_w
            net.backbone.stem_conv.weight = stem_w
            bundle = net.features(x)
            return training_loss(bundle, net.head, labels, w, "cucn", None, perm=perm)

        return fn, [rng.normal(size=(2, 1, 8, 8)), net.head.weight.data.copy(),
                    net.backbone.stem_conv.weight.data.copy()]

    return [
        Check("backbone_heads", heads),
        Check("full_model_cucn", full, MODEL_TOL),
    ]


def all_checks() -> list[Check]:
    return (_elementwise_checks() + _shape_checks() + _conv_checks() + _layer_checks()
            + _attention_checks() + _loss_checks() + _model_checks())


def run_check(check: Check, seed: int, h: float = STEP) -> CheckResult:
    fn, point = check.make(np.random.default_rng(seed))
    err = T.gradient_check(fn, point, h=h)
    return CheckResult(check.name, seed, err, check.tol)


def run_suite(seeds=range(3), checks: list[Check] | None = None, report=None) -> list[CheckResult]:
    results = []
    for check in checks or all_checks():
        start = time.perf_counter()
        worst = None
        for seed in seeds:
            res = run_check(check, seed)
            results.append(res)
            if worst is None or res.error > worst.error:
                worst = res
        if report is not None:
            status = "PASS" if all(r.passed for r in results if r.name == check.name) else "FAIL"
            report(f"{status} {check.name:<24} max_rel_err={worst.error:.2e} tol={check.tol:.0e} "
                   f"({time.perf_counter() - start:.2f}s)")
    return results
