"""Frozen-feature probes: equivariance gap, similarity maps, localization tIoU."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, Video
from .encoder import EncoderParams, encode_frames
from .equitrans import span_weights
from .transform import Mode, TransformConfig, augment, make_pair, paste, sample_region

_GAP, _LOC, _SIM = 11, 12, 13

TRANSFORMS = ("identity", "downshift", "upshift")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def region_vectors(params: EncoderParams, views) -> np.ndarray:
    feats = encode_frames(np.stack([v.frames for v in views]), params)
    pooled = np.einsum("bj,bjd->bd", span_weights([(v.s, v.e) for v in views], feats.shape[1]), feats)
    return pooled / np.linalg.norm(pooled, axis=1, keepdims=True)


# ---------------------------------------------------------- equivariance gap


@dataclass
class GapResult:
    gap: float
    stderr: float
    positive: float
    mismatched: float
    n_pairs: int
    seed: int

    @property
    def z(self) -> float:
        return self.gap / self.stderr if self.stderr > 0 else math.inf * np.sign(self.gap)


def equivariance_gap(params: EncoderParams, corpus: Corpus, n_pairs: int = 500, seed: int = 0,
                     cfg: TransformConfig = TransformConfig()) -> GapResult:
    """Positive-pair minus mismatched-pair cosine over full-PAL view pairs.

    Pair i's query is compared with its own key and with the key of the next
    pair whose source video differs; the gap is the mean paired difference.
    """
    if n_pairs < 30:
        raise ValueError("n_pairs must be at least 30 for a stable estimate")
    videos = corpus.videos
    if len(videos) < 4:
        raise ValueError("need at least four videos")
    views_q, views_k, src = [], [], []
    for i in range(n_pairs):
        rng = _rng(seed, _GAP, i)
        a, n, m = rng.choice(len(videos), size=3, replace=False)
        vq, vk = make_pair(videos[a], videos[n], videos[m], rng, Mode.PASTE_DIFF_BKG, cfg)
        views_q.append(vq)
        views_k.append(vk)
        src.append(videos[a].id)
    rq, rk = region_vectors(params, views_q), region_vectors(params, views_k)
    pos = np.sum(rq * rk, axis=1)
    neg = np.empty(n_pairs)
    for i in range(n_pairs):
        j = (i + 1) % n_pairs
        while src[j] == src[i]:
            j = (j + 1) % n_pairs
        neg[i] = rq[i] @ rk[j]
    diff = pos - neg
    return GapResult(float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_pairs)),
                     float(pos.mean()), float(neg.mean()), n_pairs, seed)


# -------------------------------------------------------- similarity matrices


@dataclass
class SimMatrix:
    matrix: np.ndarray
    s: int
    e: int
    transform: str = "identity"

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.matrix.shape[0], dtype=int)
        m[self.s : self.e + 1] = 1
        return m

    def block_gap(self) -> float:
        """Mean within-region similarity minus mean region-to-background similarity."""
        return _window_contrast(self.matrix, self.s, self.e)

    def best_window(self) -> tuple[int, int]:
        """Window of the region's length with the sharpest block contrast."""
        n, J = self.e - self.s + 1, self.matrix.shape[0]
        scores = [_window_contrast(self.matrix, a, a + n - 1) for a in range(J - n + 1)]
        a = int(np.argmax(scores))
        return a, a + n - 1

    def tracks_region(self) -> bool:
        return tiou(self.best_window(), (self.s, self.e)) >= 0.5

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.matrix:
            w.writerow([repr(float(x)) for x in row])
        w.writerow(["mask"] + [str(x) for x in self.mask])
        return buf.getvalue()


def _window_contrast(m: np.ndarray, s: int, e: int) -> float:
    J = m.shape[0]
    inside = np.zeros(J, dtype=bool)
    inside[s : e + 1] = True
    n = int(inside.sum())
    if n == J:
        raise ValueError("region covers the whole sequence; no background to compare")
    block = m[np.ix_(inside, inside)]
    if n > 1:
        within = (block.sum() - np.trace(block)) / (n * (n - 1))
    else:
        within = 1.0
    cross = m[np.ix_(inside, ~inside)].mean()
    return float(within - cross)


def read_sim_csv(text: str) -> SimMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    mask = np.array([int(x) for x in rows[-1][1:]])
    idx = np.flatnonzero(mask)
    return SimMatrix(np.array([[float(x) for x in r] for r in rows[:-1]]), int(idx[0]), int(idx[-1]))


def transformed_region(video: Video, transform: str, J: int = 16, clip_len: int = 8,
                       base_clips: int = 4, start_frame: int | None = None) -> tuple[np.ndarray, int]:
    """Region frames and paste clip for one of the visualization transforms.

    The base region covers ``base_clips`` clips sampled at stride 2. Halving the
    stride gives twice the clips (2x up-sampled, moved forward); doubling it
    gives half (2x down-sampled, moved backward).
    """
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")
    stride, n = {"identity": (2, base_clips), "downshift": (4, base_clips // 2),
                 "upshift": (1, 2 * base_clips)}[transform]
    span = 2 * base_clips * clip_len
    T = video.frames.shape[0]
    if start_frame is None:
        start_frame = (T - span) // 2
    if start_frame < 0 or start_frame + span > T:
        raise ValueError(f"video {video.id} too short for a {span}-frame region")
    base_s = (J - base_clips) // 2
    s = {"identity": base_s, "downshift": base_s - base_clips // 2 - 1,
         "upshift": J - 2 * base_clips}[transform]
    if s < 0 or s + n > J:
        raise ValueError(f"transform {transform} does not fit {J} clips")
    idx = start_frame + stride * np.arange(n * clip_len)
    return video.frames[idx], s


def sim_matrix(params: EncoderParams, video: Video, transform: str = "identity",
               background: Video | None = None, seed: int = 0, J: int = 16) -> SimMatrix:
    from .transform import RegionSpec

    if background is None:
        raise ValueError("a background video is required")
    L = params.dims.clip_len
    cfg = TransformConfig(n_clips_total=J, clip_len=L)
    region, s = transformed_region(video, transform, J, L)
    n = region.shape[0] // L
    spec = RegionSpec(video.id, 0, 1, n)
    comp = paste(region, spec, background, _rng(seed, _SIM), cfg, beta=1.0, paste_start=s)
    feats = encode_frames(comp.frames, params)
    m = feats @ feats.T
    m = np.clip(0.5 * (m + m.T), -1.0, 1.0)
    return SimMatrix(m, comp.s, comp.e, transform)


def default_background(corpus: Corpus, video: Video) -> Video:
    for v in sorted(corpus.videos, key=lambda v: v.id):
        if v.latent_id != video.latent_id:
            return v
    raise ValueError("corpus has no video with a different latent")


def sim_gaps(params: EncoderParams, corpus: Corpus, n_videos: int = 16, seed: int = 0) -> dict:
    """Mean block gap and tracking rate per transform over several videos."""
    rng = _rng(seed, _SIM, 1)
    picks = rng.choice(len(corpus.videos), size=min(n_videos, len(corpus.videos)), replace=False)
    out = {}
    for t in TRANSFORMS:
        gaps, tracked = [], []
        for k, i in enumerate(picks):
            v = corpus.videos[i]
            others = [u for u in corpus.videos if u.latent_id != v.latent_id]
            bkg = others[int(_rng(seed, _SIM, 2, k).integers(len(others)))]
            sm = sim_matrix(params, v, t, bkg, seed=seed + k)
            gaps.append(sm.block_gap())
            tracked.append(sm.tracks_region())
        out[t] = {"gap": float(np.mean(gaps)), "gap_se": float(np.std(gaps, ddof=1) / np.sqrt(len(gaps))),
                  "tracking_rate": float(np.mean(tracked)), "n": len(gaps)}
    return out


# ------------------------------------------------------ localization probe


def tiou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def decode_interval(scores: Sequence[float]) -> tuple[int, int]:
    """Contiguous interval maximizing the sum of (score - median).

    Exact ties (common when scores are 0/1) go to the interval whose raw
    scores contrast most with the rest of the sequence, then to the earliest
    start and earliest end.
    """
    raw = np.asarray(scores, dtype=np.float64)
    J = len(raw)
    theta = float(np.median(raw))
    prefix = np.concatenate([[0.0], np.cumsum(raw - theta)])
    raw_prefix = np.concatenate([[0.0], np.cumsum(raw)])
    total_raw = raw_prefix[-1]
    best_key, best = None, (0, 0)
    for a in range(J):
        for b in range(a, J):
            n_in = b - a + 1
            inside = raw_prefix[b + 1] - raw_prefix[a]
            outside = (total_raw - inside) / (J - n_in) if n_in < J else theta
            key = (prefix[b + 1] - prefix[a], inside / n_in - outside)
            if best_key is None or key > best_key:
                best_key, best = key, (a, b)
    return best

def mean_tiou(scores: np.ndarray, spans: Sequence[tuple[int, int]]) -> float:
    return float(np.mean([tiou(decode_interval(sc), sp) for sc, sp in zip(scores, spans)]))


@dataclass
class LocalizationResult:
    mean_tiou: float
    stderr: float
    n_train: int
    n_test: int
    seed: int
    train_ids: list[int] = field(repr=False, default_factory=list)
    test_ids: list[int] = field(repr=False, default_factory=list)


def _probe_set(videos: list[Video], n: int, seed: int, key: int, cfg: TransformConfig, n_latents: int,
               id_offset: int):
    fg = [v for v in videos if v.latent_id < n_latents // 2]
    bg = [v for v in videos if v.latent_id >= n_latents // 2]
    if not fg or not bg or n < 1:
        raise ValueError("probe split needs foreground and background videos")
    comps = []
    for i in range(n):
        rng = _rng(seed, _LOC, key, i)
        a, b = fg[int(rng.integers(len(fg)))], bg[int(rng.integers(len(bg)))]
        region, spec = sample_region(a, rng, cfg, frames=augment(a.frames, rng, cfg.aug_strength))
        comps.append(paste(region, spec, b, rng, cfg, bkg_frames=augment(b.frames, rng, cfg.aug_strength)))
    return comps, list(range(id_offset, id_offset + n))


def fit_logistic(x: np.ndarray, y: np.ndarray, iters: int = 500, lr: float = 2.0) -> tuple[np.ndarray, float]:
    """Plain full-batch gradient descent on the mean logistic loss."""
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        g = p - y
        w -= lr * (x.T @ g) / len(y)
        b -= lr * g.mean()
    return w, b


def localization_probe(params: EncoderParams, corpus: Corpus, seed: int = 0, n_train: int = 256,
                       n_test: int = 256, cfg: TransformConfig = TransformConfig()) -> LocalizationResult:
    """Linear per-clip foreground scorer on frozen features, decoded to one interval.

    Composites paste regions from videos of the lower half of latents onto
    videos of the upper half; probe-train and probe-test use disjoint videos.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("probe splits must be non-empty")
    n_latents = corpus.params.n_latents
    order = _rng(seed, _LOC, 0).permutation(len(corpus.videos))
    half = len(order) // 2
    tr_videos = [corpus.videos[i] for i in sorted(order[:half])]
    te_videos = [corpus.videos[i] for i in sorted(order[half:])]
    train_set, train_ids = _probe_set(tr_videos, n_train, seed, 1, cfg, n_latents, 0)
    test_set, test_ids = _probe_set(te_videos, n_test, seed, 2, cfg, n_latents, n_train)

    def feats_labels(comps):
        f = encode_frames(np.stack([c.frames for c in comps]), params)
        y = np.zeros(f.shape[:2])
        for k, c in enumerate(comps):
            y[k, c.s : c.e + 1] = 1.0
        return f, y

    f_tr, y_tr = feats_labels(train_set)
    w, b = fit_logistic(f_tr.reshape(-1, f_tr.shape[-1]), y_tr.reshape(-1))
    f_te, _ = feats_labels(test_set)
    scores = f_te @ w + b
    per = np.array([tiou(decode_interval(sc), (c.s, c.e)) for sc, c in zip(scores, test_set)])
    return LocalizationResult(float(per.mean()), float(per.std(ddof=1) / np.sqrt(len(per))),
                              n_train, n_test, seed, train_ids, test_ids)


# ---------------------------------------------------------------- reporting


@dataclass
class ProbeReport:
    seeds: list[int]
    config_hash: str
    alignment_gap: dict | None = None
    contrast_gap: dict | None = None
    localization: dict = field(default_factory=dict)
    training: dict | None = None
    probe_seed: int | None = None
    n_test: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def ladder_summary(per_mode: dict[int, list[float]]) -> dict:
    out = {}
    for mode, vals in sorted(per_mode.items()):
        v = np.asarray(vals, dtype=np.float64)
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
        out[str(mode)] = {"mean": float(v.mean()), "stderr": se, "var": float(v.var(ddof=1)) if len(v) > 1 else 0.0,
                          "per_seed": [float(x) for x in v], "n_seeds": len(v)}
    return out


def ladder_checks(summary: dict) -> dict[str, bool]:
    m = {int(k): v["mean"] for k, v in summary.items()}
    se = {int(k): v["stderr"] for k, v in summary.items()}
    pooled = math.sqrt(se[4] ** 2 + se[0] ** 2)
    return {
        "#4 >= #3": m[4] >= m[3],
        "#3 >= #1": m[3] >= m[1],
        "#1 >= #0": m[1] >= m[0],
        "#4 - #0 > 2 pooled SE": (m[4] - m[0]) > 2 * pooled,
        "#2 >= #1 - SE": m[2] >= m[1] - se[1],
    }


def ablation_ladder(base_cfg, corpus: Corpus, seeds: Sequence[int], modes: Sequence[int] = (0, 1, 2, 3, 4),
                    probe_seed: int = 0, configs: dict | None = None, n_train: int = 256,
                    n_test: int = 256, on_result=None) -> ProbeReport:
    """Train every mode for every seed under one budget and probe each encoder.

    ``on_result(mode, seed, train_result)`` is called after each run.
    """
    from .trainer import train, with_mode

    if len(seeds) < 3:
        raise ValueError("the ablation ladder needs at least three seeds per mode")
    configs = configs or {m: with_mode(base_cfg, m) for m in modes}
    budgets = {json.dumps(c.budget(), sort_keys=True) for c in configs.values()}
    if len(budgets) != 1:
        raise ValueError("all modes must share an identical training budget")
    per_mode: dict[int, list[float]] = {}
    losses: dict[str, dict] = {}
    for mode, cfg in sorted(configs.items()):
        vals, first, final = [], [], []
        for s in seeds:
            result = train(with_mode(cfg, mode, seed=s), corpus)
            vals.append(localization_probe(result.params, corpus, seed=probe_seed, n_train=n_train,
                                           n_test=n_test, cfg=cfg.transform).mean_tiou)
            epochs = result.log.epochs()
            if epochs:
                first.append(epochs[0]["train_loss"])
                final.append(epochs[-1]["train_loss"])
            if on_result is not None:
                on_result(mode, s, result)
        per_mode[mode] = vals
        losses[str(mode)] = {"first_epoch_loss": first, "final_epoch_loss": final, "seeds": list(seeds)}
    return ProbeReport(seeds=list(seeds), config_hash=base_cfg.budget_digest(),
                       localization=ladder_summary(per_mode), training=losses, probe_seed=probe_seed,
                       n_test=n_test)
