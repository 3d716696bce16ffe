"""Finite-difference checks over every differentiable component of the model.

Each check builds a tiny instance from a seed, wraps the component in a
zero-argument closure and compares tape gradients with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .config import RunConfig
from .datagen import DatasetConfig
from .head import PoolingConfig, classify, confidence_masks, pool
from .hv_bilstm import HvBilstmConfig, init_hv_bilstm, refine_values
from .losses import mce, pce_class
from .numerics import GradCheckReport, finite_diff_check
from .numerics.tensor import Tensor
from .pipeline import batch_loss, build_model
from .vit_encoder import EncoderConfig, encode_patches, init_encoder

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport


def _mce(rng: np.random.Generator):
    y = Tensor(rng.uniform(0.05, 0.95, size=(3, 6)), requires_grad=True, name="y")
    t = (rng.random((3, 6)) < 0.5).astype(float)
    return lambda: mce(y, t).sum(), [y]


def _pce(rng: np.random.Generator):
    f = Tensor(rng.normal(size=(10, 6)), requires_grad=True, name="f_out")
    perm = rng.permutation(10)
    high, low = np.sort(perm[:4]), np.sort(perm[4:8])
    return lambda: pce_class(f, high, low), [f]


def _classify_pool(mode: str):
    def build(rng: np.random.Generator):
        f = Tensor(rng.normal(size=(2, 9, 5)), requires_grad=True, name="f_out")
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="head.w")
        probe = rng.normal(size=(2, 4))
        cfg = PoolingConfig(mode, 3)
        return lambda: (pool(classify(f, w).z, cfg).y * probe).sum(), [f, w]
    return build


def _bilstm(rng: np.random.Generator):
    cfg = HvBilstmConfig(e=3, hidden=2, seed=int(rng.integers(1 << 30)))
    params = init_hv_bilstm(cfg)
    x = Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True, name="f_in")
    probe = rng.normal(size=(1, 4, 3))
    return lambda: (refine_values(x, 2, 2, params, cfg) * probe).sum(), [x, *params.values()]


def _encoder(rng: np.random.Generator):
    cfg = EncoderConfig(e=4, n_blocks=1, n_heads=2, mlp_ratio=1.5, seed=int(rng.integers(1 << 30)))
    params = init_encoder(cfg, 6, 4)
    for t in params.values():
        t.data = t.data + rng.normal(0.0, 0.3, size=t.shape)
    x = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True, name="patches")
    probe = rng.normal(size=(1, 4, 4))
    return lambda: (encode_patches(x, params, cfg) * probe).sum(), [x, *params.values()]


def tiny_config(seed: int) -> RunConfig:
    """A 2x2 grid of 2x2-pixel patches with a 4-wide model."""
    base = RunConfig(
        dataset=DatasetConfig(n_classes=2, h=4, w=4, d=2),
        encoder=EncoderConfig(e=4, n_blocks=1, n_heads=2, mlp_ratio=1.0),
    )
    return replace(base, train=replace(base.train, k=2, epsilon=0.6, alpha=0.5)).with_seed(seed)


def _end_to_end(rng: np.random.Generator):
    config = tiny_config(int(rng.integers(1 << 30)))
    model = build_model(config)
    patches = rng.normal(0.0, 0.5, size=(2, 4, 12))
    targets = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    # sets are taken from the unperturbed forward and then held fixed
    z = model.forward(patches).z.data
    high, low = confidence_masks(z, config.train.epsilon)
    if not high[:, :, 1:].any():
        high[:, 0, 1:] = True
        low[:, 0, 1:] = False
    params = model.parameter_list()
    return lambda: batch_loss(model, patches, targets, config.train, frozen_sets=(high, low)).total, params


CHECKS: dict[str, Callable] = {
    "mce": _mce,
    "pce": _pce,
    "classify_pool_topk": _classify_pool("topk"),
    "classify_pool_max": _classify_pool("max"),
    "classify_pool_avg": _classify_pool("avg"),
    "hv_bilstm_2x2": _bilstm,
    "encoder_4_patches": _encoder,
    "end_to_end_4_patches": _end_to_end,
}


def run_suite(seeds=DEFAULT_SEEDS, h: float = 1e-5, tol: float = 1e-4,
              names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name in names or list(CHECKS):
        for seed in seeds:
            rng = np.random.default_rng([seed, 505])
            f, params = CHECKS[name](rng)
            results.append(CheckResult(name, seed, finite_diff_check(f, params, h=h, tol=tol)))
    return results
