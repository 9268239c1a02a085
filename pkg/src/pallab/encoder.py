"""Clip encoder: per-clip backbone, projection head and temporal embedding head.

Frames are cut into ``J`` clips of ``clip_len`` frames. The backbone is a
two-layer feed-forward net over each flattened clip, the projection head is
Linear-ReLU-Linear, and the temporal head stacks width-3 temporal convolutions
(each followed by ReLU) across the clip axis. Rows are L2-normalized last.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .binfmt import read_blocks, write_blocks
from .transform import CompositeSample

MAGIC = b"PALW"


@dataclass(frozen=True)
class EncoderDims:
    d_frame: int = 16
    clip_len: int = 8
    hidden: int = 64
    d_backbone: int = 32
    d_proj: int = 32
    n_temporal: int = 2

    @property
    def clip_input(self) -> int:
        return self.clip_len * self.d_frame

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H, Db, Dp = self.hidden, self.d_backbone, self.d_proj
        out = {
            "backbone.w1": (self.clip_input, H),
            "backbone.b1": (H,),
            "backbone.w2": (H, Db),
            "backbone.b2": (Db,),
            "proj.w1": (Db, Dp),
            "proj.b1": (Dp,),
            "proj.w2": (Dp, Dp),
            "proj.b2": (Dp,),
        }
        for i in range(self.n_temporal):
            out[f"temporal.{i}.kernel"] = (3, Dp, Dp)
            out[f"temporal.{i}.bias"] = (Dp,)
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


class EncoderParams:
    """Ordered mapping of parameter name to float64 array."""

    def __init__(self, dims: EncoderDims, arrays: dict[str, np.ndarray]):
        shapes = dims.shapes()
        if list(arrays) != list(shapes):
            raise ValueError(f"parameter names {list(arrays)} do not match {list(shapes)}")
        for name, arr in arrays.items():
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shapes[name]}")
        self.dims = dims
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def items(self):
        return self.arrays.items()

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def tensors(self, requires_grad: bool = False) -> dict[str, tc.Tensor]:
        return {k: tc.Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EncoderParams)
            and self.dims == other.dims
            and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())
        )


def init_params(seed: int, dims: EncoderDims = EncoderDims()) -> EncoderParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    arrays = {}
    for name, shape in dims.shapes().items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
            continue
        fan_in = shape[0] if len(shape) == 2 else shape[0] * shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(dims, arrays)


def receptive_field(n_layers: int) -> int:
    if n_layers < 0:
        raise ValueError("layer count must be non-negative")
    return 2 * n_layers + 1


def clips_from_frames(frames: np.ndarray, clip_len: int) -> np.ndarray:
    """[B, T, D] (or [T, D]) frames -> [B, J, clip_len * D] flattened clips."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    B, T, D = frames.shape
    if T % clip_len:
        raise ValueError(f"{T} frames do not divide into clips of {clip_len}")
    return frames.reshape(B, T // clip_len, clip_len * D)


def forward(clips: np.ndarray, p: dict[str, tc.Tensor], n_temporal: int) -> tc.Tensor:
    """Differentiable forward pass on [B, J, clip_input] clips -> [B, J, D_p]."""
    h = tc.relu(tc.add(tc.matmul(clips, p["backbone.w1"]), p["backbone.b1"]))
    h = tc.relu(tc.add(tc.matmul(h, p["backbone.w2"]), p["backbone.b2"]))
    h = tc.relu(tc.add(tc.matmul(h, p["proj.w1"]), p["proj.b1"]))
    h = tc.add(tc.matmul(h, p["proj.w2"]), p["proj.b2"])
    for i in range(n_temporal):
        h = tc.relu(tc.temporal_conv1d(h, p[f"temporal.{i}.kernel"], p[f"temporal.{i}.bias"]))
    return tc.l2_normalize(h)


def encode_frames(frames: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Frozen encoding of [B, T, D] or [T, D] frames to clip features."""
    feats = forward(clips_from_frames(frames, params.dims.clip_len), params.tensors(), params.dims.n_temporal)
    return feats.data if np.ndim(frames) == 3 else feats.data[0]


def encode(sample: CompositeSample, params: EncoderParams) -> np.ndarray:
    """ClipFeatureSeq for one composite: [J, D_p], unit-norm rows."""
    return encode_frames(sample.frames, params)


def save_params(path, params: EncoderParams, extra_header: dict | None = None,
                extra_blocks: dict[str, np.ndarray] | None = None) -> None:
    header = {"kind": "encoder", "dims": asdict(params.dims)}
    header.update(extra_header or {})
    blocks = dict(params.arrays)
    blocks.update(extra_blocks or {})
    write_blocks(path, MAGIC, header, blocks)


def load_params(path) -> EncoderParams:
    header, blocks = read_blocks(path, MAGIC)
    dims = EncoderDims(**header["dims"])
    return EncoderParams(dims, {k: blocks[k] for k in dims.shapes()})


def affected_rows(params: EncoderParams, clip_index: int, n_clips: int = 16, seed: int = 0) -> list[int]:
    """Output rows that change when one input clip is perturbed."""
    rng = np.random.default_rng(seed)
    L, D = params.dims.clip_len, params.dims.d_frame
    frames = rng.standard_normal((n_clips * L, D))
    base = encode_frames(frames, params)
    pert = frames.copy()
    pert[clip_index * L : (clip_index + 1) * L] += rng.standard_normal((L, D))
    changed = np.any(encode_frames(pert, params) != base, axis=1)
    return np.flatnonzero(changed).tolist()


def measured_receptive_field(params: EncoderParams, n_clips: int = 16, seed: int = 0) -> int:
    """Largest count of rows touched by perturbing one interior clip."""
    n = params.dims.n_temporal
    interior = range(n, n_clips - n)
    return max(len(affected_rows(params, j, n_clips, seed + j)) for j in interior)
