"""Gradient verification suite behind ``pal gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .corpus import CorpusParams, generate_corpus
from .encoder import EncoderDims, clips_from_frames, init_params
from .trainer import TrainConfig, build_pairs, draw_triple, embed_regions, region_loss
from .transform import TransformConfig

OP_TOL = 1e-6
KINK_MARGIN = 1e-4
LOSS_TOL = 1e-4

MINI_DIMS = EncoderDims(d_frame=3, clip_len=2, hidden=16, d_backbone=8, d_proj=12, n_temporal=2)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _normal(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _op_cases():
    neg = np.linspace(-1, 1, 35).reshape(7, 5) / 2
    return {
        "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))],
                   lambda a, b: tc.total(tc.matmul(a, b))),
        "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=4)],
                lambda a, b: tc.total(tc.relu(tc.add(a, b)))),
        "scale": (lambda r: [r.normal(size=5)], lambda a: tc.total(tc.scale(a, -2.5))),
        "relu": (lambda r: [r.normal(size=(4, 3))], lambda a: tc.total(tc.relu(a))),
        "l2_normalize": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(12, 1))],
                         lambda a, w: tc.total(tc.matmul(tc.reshape(tc.l2_normalize(a), (1, 12)), w))),
        "temporal_avg_pool": (lambda r: [r.normal(size=(5, 3)), r.normal(size=(3, 1))],
                              lambda a, w: tc.total(tc.matmul(tc.reshape(tc.temporal_avg_pool(a), (1, 3)), w))),
        "weighted_pool": (lambda r: [r.normal(size=(2, 5, 3)), r.normal(size=(3, 1))],
                          lambda a, w: tc.total(tc.matmul(tc.weighted_pool(a, np.arange(10.0).reshape(2, 5)), w))),
        "take_rows": (lambda r: [r.normal(size=(6, 3))], lambda a: tc.total(tc.relu(tc.take_rows(a, 2, 5)))),
        "mean": (lambda r: [r.normal(size=(4, 2))], lambda a: tc.mean(tc.relu(a))),
        "temporal_conv1d": (lambda r: [r.normal(size=(2, 6, 4)), r.normal(size=(3, 4, 3)), r.normal(size=3)],
                            lambda s, k, b: tc.total(tc.relu(tc.temporal_conv1d(s, k, b)))),
        "info_nce": (lambda r: [r.normal(size=(3, 5)), r.normal(size=(3, 5))],
                     lambda q, k: tc.info_nce(tc.l2_normalize(q), tc.l2_normalize(k), neg, 0.07)),
    }


def check_ops(seeds=range(20)) -> list[CheckResult]:
    out = []
    for name, (make, f) in _op_cases().items():
        for seed in seeds:
            inputs = [tc.Tensor(x) for x in make(_normal(seed))]
            out.append(CheckResult(name, seed, tc.gradcheck(f, inputs), OP_TOL))
    return out


def relu_margin(clips: np.ndarray, params) -> float:
    """Smallest |pre-activation| over every ReLU in the encoder forward pass."""
    p = params
    pre = [clips @ p["backbone.w1"] + p["backbone.b1"]]
    pre.append(np.maximum(pre[-1], 0) @ p["backbone.w2"] + p["backbone.b2"])
    pre.append(np.maximum(pre[-1], 0) @ p["proj.w1"] + p["proj.b1"])
    h = np.maximum(pre[-1], 0) @ p["proj.w2"] + p["proj.b2"]
    for i in range(params.dims.n_temporal):
        pre.append(tc.temporal_conv1d(h, p[f"temporal.{i}.kernel"], p[f"temporal.{i}.bias"]).data)
        h = np.maximum(pre[-1], 0)
    return float(min(np.abs(x).min() for x in pre))


def mini_setup(seed: int, batch: int = 2, n_negatives: int = 16):
    """A miniature batch for the full encode-align-pool-InfoNCE loss."""
    transform = TransformConfig(clip_len=MINI_DIMS.clip_len)
    cfg = TrainConfig(encoder=MINI_DIMS, transform=transform, batch_size=batch, queue_size=n_negatives)
    corpus = generate_corpus(seed, CorpusParams(n_videos=6, t_frames=64, d_frame=MINI_DIMS.d_frame))
    rng = np.random.default_rng(seed)
    rngs = [np.random.default_rng([seed, i]) for i in range(batch)]
    triples = [draw_triple(corpus.videos, corpus.videos[i], r) for i, r in enumerate(rngs)]
    views_q, views_k = build_pairs(triples, rngs, cfg)
    clips = clips_from_frames(np.stack([v.frames for v in views_q]), MINI_DIMS.clip_len)
    # zero-initialized biases put exact zeros on ReLU kinks, so jitter them and
    # redraw until every ReLU input sits well clear of zero
    for attempt in range(100):
        params = init_params(seed, MINI_DIMS)
        for arr in params.arrays.values():
            if arr.ndim == 1:
                arr += rng.normal(0.0, 0.1, size=arr.shape)
        if relu_margin(clips, params) > KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free point found for seed {seed}")
    keys = embed_regions(init_params(seed + 1000, MINI_DIMS), views_k)
    negatives = rng.standard_normal((n_negatives, MINI_DIMS.d_proj))
    negatives /= np.linalg.norm(negatives, axis=1, keepdims=True)
    return params, views_q, keys, negatives, cfg


def full_loss_error(seed: int) -> float:
    params, views_q, keys, negatives, cfg = mini_setup(seed)
    names = list(params.arrays)

    def f(*ts):
        return region_loss(params, views_q, keys, negatives, cfg.tau, dict(zip(names, ts)))

    return tc.gradcheck(f, [tc.Tensor(params[k]) for k in names])


def check_loss(seeds=range(20)) -> list[CheckResult]:
    return [CheckResult("full_loss", s, full_loss_error(s), LOSS_TOL) for s in seeds]


def run_scope(scope: str, seeds=range(20)) -> list[CheckResult]:
    if scope not in ("ops", "loss", "all"):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    if scope in ("ops", "all"):
        results += check_ops(seeds)
    if scope in ("loss", "all"):
        results += check_loss(seeds)
    return results
