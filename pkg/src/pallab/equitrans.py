"""Feature-level inverse of the paste: slice clip features at [s, e] and pool."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc


@dataclass
class RegionEmbedding:
    vector: np.ndarray
    origin: tuple[int, int, int]  # (sample id, s, e)


def _check_span(J: int, s: int, e: int) -> None:
    if not 0 <= s <= e <= J - 1:
        raise IndexError(f"region [{s}, {e}] outside clip range [0, {J - 1}]")


def align(seq, s: int, e: int) -> tc.Tensor:
    seq = tc.as_tensor(seq)
    _check_span(seq.shape[-2], s, e)
    return tc.take_rows(seq, s, e + 1)


def pool_region(aligned, origin: tuple[int, int, int] = (-1, -1, -1)) -> RegionEmbedding:
    v = tc.l2_normalize(tc.temporal_avg_pool(aligned))
    return RegionEmbedding(v.data, origin)


def region_embedding(seq, s: int, e: int) -> tc.Tensor:
    """Differentiable align + mean pool + renormalize for a single sequence."""
    return tc.l2_normalize(tc.temporal_avg_pool(align(seq, s, e)))


def span_weights(spans: Sequence[tuple[int, int]], J: int) -> np.ndarray:
    w = np.zeros((len(spans), J))
    for b, (s, e) in enumerate(spans):
        _check_span(J, s, e)
        w[b, s : e + 1] = 1.0 / (e - s + 1)
    return w


def pool_regions(feats: tc.Tensor, spans: Sequence[tuple[int, int]]) -> tc.Tensor:
    """Batched version: [B, J, D] features and B spans -> [B, D] unit rows."""
    return tc.l2_normalize(tc.weighted_pool(feats, span_weights(spans, feats.shape[1])))
