"""Synthetic corpus of trimmed "videos" made of frame-feature sequences.

Each video belongs to a latent identity. A latent owns a periodic motif (a
per-channel sinusoid around a latent-specific offset); a video adds a slow
per-video drift and white noise on top. Randomness comes from numpy's
``SeedSequence``/``PCG64`` pair, which is splittable: the stream for a video is
``SeedSequence(seed, spawn_key=(video_index,))`` so videos can be generated in
any order (or in parallel) with identical results.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PALC"
VERSION = 1
BOUND = 5.0

_MOTIF_KEY = 0x6D6F  # spawn-key namespace for motif parameters


class CorpusFormatError(ValueError):
    """A corpus file failed validation; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CorpusParams:
    n_videos: int = 64
    n_latents: int = 8
    t_frames: int = 256
    d_frame: int = 16
    noise_std: float = 0.1
    drift_amplitude: float = 0.3
    motif_amplitude: float = 1.0
    offset_scale: float = 0.8
    min_period: float = 8.0
    max_period: float = 48.0
    motif_seed: int = 7

    def validate(self) -> None:
        if self.n_latents < 2:
            raise ValueError("need at least two latent motifs")
        if self.t_frames < 1 or self.d_frame < 1 or self.n_videos < 0:
            raise ValueError(f"invalid corpus dimensions: {self}")
        if self.noise_std < 0 or self.drift_amplitude < 0 or self.motif_amplitude < 0:
            raise ValueError("noise, drift and motif amplitudes must be non-negative")
        if not 1.0 < self.min_period <= self.max_period:
            raise ValueError("motif periods must satisfy 1 < min_period <= max_period")


@dataclass
class Video:
    id: int
    frames: np.ndarray
    latent_id: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    videos: list[Video]
    seed: int = 0
    params: CorpusParams = field(default_factory=CorpusParams)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "count": len(self.videos),
            "t_frames": self.params.t_frames,
            "d_frame": self.params.d_frame,
            "params": asdict(self.params),
            "latents": [v.latent_id for v in self.videos],
        }

    def __len__(self) -> int:
        return len(self.videos)


def motif_params(latent_id: int, params: CorpusParams) -> dict[str, np.ndarray]:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(params.motif_seed, spawn_key=(_MOTIF_KEY, latent_id)))
    )
    d = params.d_frame
    period = rng.uniform(params.min_period, params.max_period, size=d)
    return {
        "offset": params.offset_scale * rng.standard_normal(d),
        "amplitude": params.motif_amplitude * rng.uniform(0.5, 1.0, size=d),
        "omega": 2 * np.pi / period,
        "phase": rng.uniform(0, 2 * np.pi, size=d),
    }


def motif_component(latent_id: int, params: CorpusParams) -> np.ndarray:
    m = motif_params(latent_id, params)
    t = np.arange(params.t_frames, dtype=np.float64)[:, None]
    return m["offset"] + m["amplitude"] * np.sin(m["omega"] * t + m["phase"])


def generate_video(latent_id: int, seed: int, params: CorpusParams, video_id: int = 0) -> Video:
    params.validate()
    if not 0 <= latent_id < params.n_latents:
        raise ValueError(f"latent_id {latent_id} outside [0, {params.n_latents})")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    T, D = params.t_frames, params.d_frame
    t = np.arange(T, dtype=np.float64)[:, None]
    # one slow sinusoid per channel, at most one period over the clip
    drift_freq = rng.uniform(0.0, 2 * np.pi / T, size=D)
    drift_phase = rng.uniform(0, 2 * np.pi, size=D)
    drift = params.drift_amplitude * np.sin(drift_freq * t + drift_phase)
    noise = params.noise_std * rng.standard_normal((T, D))
    frames = np.clip(motif_component(latent_id, params) + drift + noise, -BOUND, BOUND)
    return Video(id=video_id, frames=frames, latent_id=latent_id)


def generate_corpus(seed: int = 0, params: CorpusParams | None = None) -> Corpus:
    params = params or CorpusParams()
    params.validate()
    root = np.random.SeedSequence(seed)
    videos = []
    for i in range(params.n_videos):
        child = np.random.SeedSequence(root.entropy, spawn_key=(i,))
        latent = i % params.n_latents
        videos.append(generate_video(latent, child.generate_state(4), params, video_id=i))
    return Corpus(videos=videos, seed=seed, params=params)


# ------------------------------------------------------------------ file I/O

_REC_HEAD = struct.Struct("<QQII")


def write_corpus(corpus: Corpus, path) -> dict:
    manifest = corpus.manifest()
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for v in corpus.videos:
        T, D = v.frames.shape
        rec = _REC_HEAD.pack(v.id, v.latent_id, T, D) + np.ascontiguousarray(v.frames, dtype="<f8").tobytes()
        parts.append(rec)
        parts.append(struct.pack("<I", zlib.crc32(rec)))
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return manifest


def read_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CorpusFormatError("bad magic", 0)
    if len(data) < 12:
        raise CorpusFormatError("truncated header", len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CorpusFormatError(f"unsupported version {version}", 4)
    (mlen,) = struct.unpack_from("<I", data, 8)
    pos = 12
    if pos + mlen > len(data):
        raise CorpusFormatError("manifest length exceeds file", pos)
    try:
        manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"unreadable manifest: {exc}", pos) from None
    pos += mlen
    params = CorpusParams(**manifest["params"])
    videos = []
    for _ in range(manifest["count"]):
        start = pos
        if pos + _REC_HEAD.size > len(data):
            raise CorpusFormatError("truncated record header", pos)
        vid, latent, T, D = _REC_HEAD.unpack_from(data, pos)
        end = pos + _REC_HEAD.size + 8 * T * D
        if end + 4 > len(data):
            raise CorpusFormatError("record length exceeds file", start)
        (crc,) = struct.unpack_from("<I", data, end)
        if zlib.crc32(data[start:end]) != crc:
            raise CorpusFormatError("record checksum mismatch", start)
        frames = np.frombuffer(data, dtype="<f8", count=T * D, offset=pos + _REC_HEAD.size)
        videos.append(Video(id=vid, frames=frames.reshape(T, D).astype(np.float64), latent_id=latent))
        pos = end + 4
    if pos != len(data):
        raise CorpusFormatError("trailing bytes after last record", pos)
    return Corpus(videos=videos, seed=manifest["seed"], params=params)
