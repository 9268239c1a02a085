"""Cut-and-paste temporal transformation that builds pseudo action composites.

A region of ``n_clips`` clips is cut from an action video at a random frame
stride, then blended into a stride-1 crop of a background video at a random
clip position ``[s, e]``. Both source videos are augmented first, with one
parameter draw per video shared by all of its frames.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .corpus import Video

ACTION = 1
BACKGROUND = 0


class Mode(IntEnum):
    """Ablation ladder rungs, from single-clip contrast up to full PAL."""

    CLIP = 0
    DENSE = 1
    SCALE = 2
    PASTE_SAME_BKG = 3
    PASTE_DIFF_BKG = 4

    @property
    def pastes(self) -> bool:
        return self >= Mode.PASTE_SAME_BKG


@dataclass(frozen=True)
class TransformConfig:
    n_clips_total: int = 8  # J
    clip_len: int = 8  # L
    min_region: int = 2
    max_region: int = 6
    min_stride: int = 1
    max_stride: int = 4
    beta_low: float = 0.6
    beta_high: float = 1.0
    aug_strength: float = 1.0

    @property
    def window(self) -> int:
        return self.n_clips_total * self.clip_len


@dataclass(frozen=True)
class RegionSpec:
    source_video_id: int
    source_start_frame: int
    stride: int
    n_clips: int
    paste_start: int = -1
    paste_end: int = -1
    beta: float = 1.0

    def source_frames(self, clip_len: int) -> np.ndarray:
        return self.source_start_frame + self.stride * np.arange(self.n_clips * clip_len)


@dataclass
class CompositeSample:
    frames: np.ndarray
    spec: RegionSpec
    background_video_id: int
    provenance: np.ndarray  # per frame, ACTION or BACKGROUND
    background_start_frame: int = 0

    @property
    def s(self) -> int:
        return self.spec.paste_start

    @property
    def e(self) -> int:
        return self.spec.paste_end


@dataclass(frozen=True)
class AugParams:
    gain: np.ndarray
    bias: np.ndarray
    noise_std: float


def draw_augmentation(rng: np.random.Generator, d_frame: int, strength: float) -> AugParams:
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"augmentation strength must be in [0, 1], got {strength}")
    gain = 1.0 + strength * rng.uniform(-0.3, 0.3, size=d_frame)
    bias = strength * 0.2 * rng.standard_normal(d_frame)
    keep = rng.random(d_frame) >= 0.1 * strength
    return AugParams(gain=gain * keep, bias=bias * keep, noise_std=0.05 * strength)


def augment(frames: np.ndarray, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    """Feature-space jitter/noise/channel-drop, constant over time."""
    aug = draw_augmentation(rng, frames.shape[1], strength)
    if strength == 0.0:
        return frames.copy()
    eps = aug.noise_std * rng.standard_normal(frames.shape)
    return aug.gain * frames + aug.bias + eps


def sample_region(
    action: Video,
    rng: np.random.Generator,
    cfg: TransformConfig = TransformConfig(),
    *,
    n_clips: int | None = None,
    stride: int | None = None,
    frames: np.ndarray | None = None,
    start_frame: int | None = None,
) -> tuple[np.ndarray, RegionSpec]:
    """Cut a strided region; ``frames`` overrides the video's own (augmented copy)."""
    frames = action.frames if frames is None else frames
    T, L = frames.shape[0], cfg.clip_len
    if T < cfg.max_region * L * cfg.max_stride:
        raise ValueError(
            f"video {action.id} has {T} frames; need {cfg.max_region * L * cfg.max_stride}"
        )
    while True:
        n = n_clips if n_clips is not None else int(rng.integers(cfg.min_region, cfg.max_region + 1))
        sigma = stride if stride is not None else int(rng.integers(cfg.min_stride, cfg.max_stride + 1))
        last_start = T - (n * L - 1) * sigma - 1
        if last_start >= 0:
            break
        if n_clips is not None and stride is not None:
            raise ValueError(f"region of {n} clips at stride {sigma} does not fit {T} frames")
    if start_frame is None:
        start = int(rng.integers(0, last_start + 1))
    elif 0 <= start_frame <= last_start:
        start = start_frame
    else:
        raise ValueError(f"start frame {start_frame} outside [0, {last_start}]")
    spec = RegionSpec(action.id, start, sigma, n)
    return frames[spec.source_frames(L)], spec


def paste(
    region: np.ndarray,
    spec: RegionSpec,
    background: Video,
    rng: np.random.Generator,
    cfg: TransformConfig = TransformConfig(),
    *,
    bkg_frames: np.ndarray | None = None,
    beta: float | None = None,
    paste_start: int | None = None,
) -> CompositeSample:
    bkg_frames = background.frames if bkg_frames is None else bkg_frames
    J, L = cfg.n_clips_total, cfg.clip_len
    if spec.n_clips > J:
        raise ValueError(f"region of {spec.n_clips} clips does not fit {J} clips")
    if bkg_frames.shape[0] < cfg.window:
        raise ValueError(f"background {background.id} shorter than {cfg.window} frames")
    crop = int(rng.integers(0, bkg_frames.shape[0] - cfg.window + 1))
    s = paste_start if paste_start is not None else int(rng.integers(0, J - spec.n_clips + 1))
    e = s + spec.n_clips - 1
    if beta is None:
        beta = float(rng.uniform(cfg.beta_low, cfg.beta_high))
    out = bkg_frames[crop : crop + cfg.window].copy()
    lo, hi = s * L, (e + 1) * L
    out[lo:hi] = beta * region + (1 - beta) * out[lo:hi]
    prov = np.full(cfg.window, BACKGROUND, dtype=np.int8)
    prov[lo:hi] = ACTION
    spec = replace(spec, paste_start=s, paste_end=e, beta=beta)
    return CompositeSample(out, spec, background.id, prov, crop)


def in_context(
    action: Video,
    rng: np.random.Generator,
    cfg: TransformConfig,
    n_clips: int,
    stride: int,
    frames: np.ndarray,
) -> CompositeSample:
    """No-paste view: the whole window comes from the action video at one stride."""
    J, L = cfg.n_clips_total, cfg.clip_len
    T = frames.shape[0]
    last = T - (cfg.window - 1) * stride - 1
    if last < 0:
        raise ValueError(f"video {action.id} too short for a stride-{stride} window")
    s = int(rng.integers(0, J - n_clips + 1))
    c0 = int(rng.integers(0, last + 1))
    idx = c0 + stride * np.arange(cfg.window)
    spec = RegionSpec(action.id, c0 + s * L * stride, stride, n_clips, s, s + n_clips - 1, 1.0)
    prov = np.full(cfg.window, BACKGROUND, dtype=np.int8)
    prov[s * L : (s + n_clips) * L] = ACTION
    return CompositeSample(frames[idx].copy(), spec, action.id, prov, c0)


def make_view(
    action: Video,
    background: Video | None,
    rng: np.random.Generator,
    mode: Mode,
    cfg: TransformConfig = TransformConfig(),
) -> CompositeSample:
    act = augment(action.frames, rng, cfg.aug_strength)
    if mode == Mode.CLIP:
        return in_context(action, rng, cfg, 1, 1, act)
    if not mode.pastes:
        n = int(rng.integers(cfg.min_region, cfg.max_region + 1))
        stride = 1 if mode == Mode.DENSE else int(rng.integers(cfg.min_stride, cfg.max_stride + 1))
        return in_context(action, rng, cfg, n, stride, act)
    region, spec = sample_region(action, rng, cfg, frames=act)
    bkg = augment(background.frames, rng, cfg.aug_strength)
    return paste(region, spec, background, rng, cfg, bkg_frames=bkg)


def make_pair(
    action: Video,
    bkg_n: Video | None,
    bkg_m: Video | None,
    rng: np.random.Generator,
    mode: Mode | int = Mode.PASTE_DIFF_BKG,
    cfg: TransformConfig = TransformConfig(),
) -> tuple[CompositeSample, CompositeSample]:
    mode = Mode(mode)
    if mode.pastes:
        if bkg_n is None or bkg_n.id == action.id:
            raise ValueError("pasting needs a background different from the action video")
        if mode == Mode.PASTE_SAME_BKG:
            bkg_m = bkg_n
        elif bkg_m is None or bkg_m.id in (action.id, bkg_n.id):
            raise ValueError("different-background mode needs three distinct videos")
    return make_view(action, bkg_n, rng, mode, cfg), make_view(action, bkg_m, rng, mode, cfg)
