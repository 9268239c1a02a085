"""PAL pre-training loop.

One step synthesizes a view pair per (action, background, background) triple,
encodes the first view with the query encoder on a gradient tape and the second
with the momentum key encoder, contrasts the pooled region embeddings against
the queue, takes an Adam step, then updates the key encoder and the queue.

Every random draw comes from a ``SeedSequence`` keyed by (purpose, epoch,
sample index), so a run is reproducible and can be resumed from an epoch
boundary without carrying generator state.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .binfmt import read_blocks, write_blocks
from .contrast import MemoryQueue, MomentumState, momentum_update
from .corpus import Corpus, Video
from .encoder import MAGIC, EncoderDims, EncoderParams, clips_from_frames, forward, init_params, save_params
from .equitrans import pool_regions
from .transform import Mode, TransformConfig, make_pair

log = logging.getLogger(__name__)

_TRAIN, _VAL, _WARM, _SPLIT, _INIT = 1, 2, 3, 4, 5


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    mode: int = int(Mode.PASTE_DIFF_BKG)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    tau: float = 0.07
    queue_size: int = 1024
    momentum: float = 0.999
    seed: int = 0
    patience: int = 5
    decay_factor: float = 0.1
    min_improvement: float = 1e-4
    val_fraction: float = 0.1
    pairs_per_video: int = 32
    val_pairs_per_video: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    encoder: EncoderDims = field(default_factory=EncoderDims)
    transform: TransformConfig = field(default_factory=TransformConfig)

    def validate(self) -> None:
        Mode(self.mode)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.pairs_per_video < 1 or self.val_pairs_per_video < 1:
            raise ValueError("pairs per video must be positive")
        if self.tau <= 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("tau must be positive; lr and weight decay non-negative")
        if self.batch_size > self.queue_size:
            raise ValueError("batch size may not exceed the queue size")
        if self.encoder.clip_len != self.transform.clip_len:
            raise ValueError("encoder and transform disagree on clip length")

    def as_dict(self) -> dict:
        return asdict(self)

    def budget(self) -> dict:
        """Everything except mode and seed; runs compared in an ablation must match."""
        d = self.as_dict()
        d.pop("mode")
        d.pop("seed")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def budget_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.budget(), sort_keys=True).encode()).hexdigest()[:16]


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    enc = EncoderDims(**d.pop("encoder", {}))
    tr = TransformConfig(**d.pop("transform", {}))
    return TrainConfig(encoder=enc, transform=tr, **d)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


class Adam:
    def __init__(self, params: EncoderParams, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: EncoderParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, theta in params.items():
            g = grads[name] + self.weight_decay * theta  # L2 coupled into the gradient
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            theta -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class TrainState:
    params: EncoderParams
    key: MomentumState
    queue: MemoryQueue
    optim: Adam
    lr: float
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    bad_epochs: int = 0


@dataclass
class RunLog:
    """Append-only list of JSON-serializable records; wall-clock kept apart."""

    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class TrainResult:
    state: TrainState
    log: RunLog
    best_params: EncoderParams

    @property
    def params(self) -> EncoderParams:
        return self.state.params


# ------------------------------------------------------------------- helpers


def split_videos(corpus: Corpus, cfg: TrainConfig) -> tuple[list[Video], list[Video]]:
    n = len(corpus.videos)
    order = _rng(cfg.seed, _SPLIT).permutation(n)
    n_val = max(3, int(round(cfg.val_fraction * n))) if n >= 6 else 0
    val = sorted((corpus.videos[i] for i in order[:n_val]), key=lambda v: v.id)
    train = sorted((corpus.videos[i] for i in order[n_val:]), key=lambda v: v.id)
    return train, val


def draw_triple(pool: list[Video], action: Video, rng: np.random.Generator) -> tuple[Video, Video, Video]:
    others = [v for v in pool if v.id != action.id]
    if len(others) < 2:
        raise ValueError("need at least three videos to build triples")
    i, j = rng.choice(len(others), size=2, replace=False)
    return action, others[i], others[j]


def build_pairs(triples, rngs, cfg: TrainConfig):
    views_q, views_k = [], []
    for (a, n, m), rng in zip(triples, rngs):
        vq, vk = make_pair(a, n, m, rng, cfg.mode, cfg.transform)
        views_q.append(vq)
        views_k.append(vk)
    return views_q, views_k


def _stack(views) -> tuple[np.ndarray, list[tuple[int, int]]]:
    frames = np.stack([v.frames for v in views])
    return frames, [(v.s, v.e) for v in views]


def embed_regions(params: EncoderParams, views) -> np.ndarray:
    frames, spans = _stack(views)
    feats = forward(clips_from_frames(frames, params.dims.clip_len), params.tensors(), params.dims.n_temporal)
    return pool_regions(feats, spans).data


def region_loss(params: EncoderParams, views_q, keys: np.ndarray, negatives: np.ndarray, tau: float,
                tensors: dict[str, tc.Tensor] | None = None) -> tc.Tensor:
    """Query-path loss as a function of (possibly tape-tracked) parameter tensors."""
    p = tensors if tensors is not None else params.tensors()
    frames, spans = _stack(views_q)
    feats = forward(clips_from_frames(frames, params.dims.clip_len), p, params.dims.n_temporal)
    return tc.info_nce(pool_regions(feats, spans), keys, negatives, tau)


def new_state(cfg: TrainConfig) -> TrainState:
    params = init_params(int(np.random.SeedSequence(cfg.seed, spawn_key=(_INIT,)).generate_state(1)[0]), cfg.encoder)
    return TrainState(
        params=params,
        key=MomentumState(params.copy(), cfg.momentum),
        queue=MemoryQueue(cfg.queue_size, cfg.encoder.d_proj),
        optim=Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay),
        lr=cfg.lr,
    )


def train_step(triples, state: TrainState, cfg: TrainConfig, rngs) -> float:
    views_q, views_k = build_pairs(triples, rngs, cfg)
    tensors = state.params.tensors(requires_grad=True)
    try:
        keys = embed_regions(state.key.params, views_k)
        with tc.Tape() as tape:
            loss = region_loss(state.params, views_q, keys, state.queue.negatives(), cfg.tau, tensors)
    except tc.DegenerateNormError as exc:
        raise NonFiniteLossError(f"{exc} at step {state.step}") from exc
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at step {state.step}")
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLossError(f"non-finite gradient at step {state.step}")
    state.optim.step(state.params, grads, state.lr)
    momentum_update(state.key, state.params)
    state.queue.enqueue(keys)
    state.step += 1
    return value


def warm_queue(state: TrainState, videos: list[Video], cfg: TrainConfig) -> None:
    """Fill the queue with key-encoder embeddings before the first update."""
    i = 0
    while state.queue.filled < state.queue.capacity:
        b = min(cfg.batch_size, state.queue.capacity - state.queue.filled)
        triples, rngs = [], []
        for _ in range(b):
            rng = _rng(cfg.seed, _WARM, i)
            triples.append(draw_triple(videos, videos[i % len(videos)], rng))
            rngs.append(rng)
            i += 1
        _, views_k = build_pairs(triples, rngs, cfg)
        keys = embed_regions(state.key.params, views_k)
        if not np.all(np.isfinite(keys)):
            raise NonFiniteLossError("non-finite key embedding while warming the queue")
        state.queue.enqueue(keys)


def validation_loss(state: TrainState, val: list[Video], cfg: TrainConfig) -> float:
    if len(val) < 3:
        return float("nan")
    triples, rngs = [], []
    for rep in range(cfg.val_pairs_per_video):
        for idx, video in enumerate(val):
            rng = _rng(cfg.seed, _VAL, rep, idx)
            triples.append(draw_triple(val, video, rng))
            rngs.append(rng)
    views_q, views_k = build_pairs(triples, rngs, cfg)
    keys = embed_regions(state.key.params, views_k)
    return float(region_loss(state.params, views_q, keys, state.queue.negatives(), cfg.tau).data)


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    """Encoder weights plus momentum-key weights and the queue."""
    extra = {f"key/{k}": v for k, v in state.key.params.items()}
    extra["queue"] = state.queue.buffer
    header = {
        "momentum": state.key.momentum,
        "queue_cursor": state.queue.cursor,
        "queue_filled": state.queue.filled,
        "epoch": state.epoch,
        "step": state.step,
    }
    save_params(path, state.params, header, extra)


def save_state(path, state: TrainState, log_lines: int) -> None:
    blocks = dict(state.params.arrays)
    blocks.update({f"key/{k}": v for k, v in state.key.params.items()})
    blocks.update({f"adam_m/{k}": v for k, v in state.optim.m.items()})
    blocks.update({f"adam_v/{k}": v for k, v in state.optim.v.items()})
    blocks["queue"] = state.queue.buffer
    header = {
        "kind": "train_state",
        "dims": asdict(state.params.dims),
        "momentum": state.key.momentum,
        "queue_cursor": state.queue.cursor,
        "queue_filled": state.queue.filled,
        "adam_t": state.optim.t,
        "lr": state.lr,
        "epoch": state.epoch,
        "step": state.step,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "bad_epochs": state.bad_epochs,
        "log_lines": log_lines,
    }
    write_blocks(path, MAGIC, header, blocks)


def load_state(path, cfg: TrainConfig) -> tuple[TrainState, int]:
    header, blocks = read_blocks(path, MAGIC)
    dims = EncoderDims(**header["dims"])
    names = list(dims.shapes())
    params = EncoderParams(dims, {k: blocks[k] for k in names})
    key = MomentumState(EncoderParams(dims, {k: blocks[f"key/{k}"] for k in names}), header["momentum"])
    queue = MemoryQueue(blocks["queue"].shape[0], dims.d_proj)
    queue.buffer = blocks["queue"]
    queue.cursor, queue.filled = header["queue_cursor"], header["queue_filled"]
    optim = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    optim.m = {k: blocks[f"adam_m/{k}"] for k in names}
    optim.v = {k: blocks[f"adam_v/{k}"] for k in names}
    optim.t = header["adam_t"]
    best = header["best_val"]
    state = TrainState(params, key, queue, optim, header["lr"], header["epoch"], header["step"],
                       math.inf if best is None else best, header["bad_epochs"])
    return state, header["log_lines"]


# ---------------------------------------------------------------------- train


def _dump(exc: NonFiniteLossError, state: TrainState, out: Path | None, runlog: RunLog) -> NonFiniteLossError:
    if out is not None:
        exc.dump_path = out / "abort_state.palw"
        save_state(exc.dump_path, state, len(runlog.records))
    return exc


def train(cfg: TrainConfig, corpus: Corpus, out_dir=None, *, resume: bool = False,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Run PAL pre-training.

    With ``out_dir`` the run log, resumable state and checkpoints
    (``best.palw``, ``final.palw``) are written there. ``stop_after_epoch``
    simulates an interruption after that many epochs.
    """
    cfg.validate()
    if corpus is None or len(corpus.videos) < 3:
        raise ValueError("training needs a corpus with at least three videos")
    out = Path(out_dir) if out_dir is not None else None
    train_videos, val_videos = split_videos(corpus, cfg)
    runlog = RunLog(path=out / "runlog.ndjson" if out else None)

    state_path = out / "state.palw" if out else None
    if resume and state_path is not None and state_path.exists():
        state, n_lines = load_state(state_path, cfg)
        lines = runlog.path.read_text(encoding="utf-8").splitlines(keepends=True)[:n_lines]
        runlog.path.write_text("".join(lines), encoding="utf-8")
        runlog.records = [json.loads(x) for x in lines]
        best_params = (
            load_best(out / "best.palw") if (out / "best.palw").exists() else state.params.copy()
        )
        log.info("resuming at epoch %d, step %d", state.epoch, state.step)
    else:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            runlog.path.write_text("", encoding="utf-8")
            (out / "timing.ndjson").write_text("", encoding="utf-8")
        state = new_state(cfg)
        best_params = state.params.copy()
        runlog.append({"kind": "start", "seed": cfg.seed, "mode": cfg.mode, "config": cfg.digest(),
                       "n_train": len(train_videos), "n_val": len(val_videos)})
        try:
            warm_queue(state, train_videos, cfg)
        except (NonFiniteLossError, tc.DegenerateNormError) as exc:
            raise _dump(NonFiniteLossError(str(exc)), state, out, runlog) from exc
        if out is not None:
            save_state(state_path, state, len(runlog.records))
    log.info("seed %d, mode %d, %d train / %d val videos", cfg.seed, cfg.mode,
             len(train_videos), len(val_videos))

    while state.epoch < cfg.epochs:
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break
        epoch = state.epoch
        t0 = time.perf_counter()
        # each video acts as the action source pairs_per_video times per epoch
        order = _rng(cfg.seed, _TRAIN, epoch).permutation(len(train_videos) * cfg.pairs_per_video)
        order = order % len(train_videos)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rngs = [_rng(cfg.seed, _TRAIN, epoch, 1 + int(start + k)) for k in range(len(idx))]
            triples = [draw_triple(train_videos, train_videos[i], r) for i, r in zip(idx, rngs)]
            try:
                loss = train_step(triples, state, cfg, rngs)
            except NonFiniteLossError as exc:
                raise _dump(exc, state, out, runlog)
            losses.append(loss)
            runlog.append({"kind": "step", "step": state.step, "epoch": epoch, "loss": loss, "lr": state.lr})
        val = validation_loss(state, val_videos, cfg)
        improved = math.isfinite(val) and val < state.best_val - cfg.min_improvement
        if improved:
            state.best_val, state.bad_epochs = val, 0
            best_params = state.params.copy()
            if out is not None:
                save_checkpoint(out / "best.palw", state)
        else:
            state.bad_epochs += 1
        runlog.append({"kind": "epoch", "epoch": epoch, "train_loss": float(np.mean(losses)),
                       "val_loss": val, "lr": state.lr})
        if state.bad_epochs >= cfg.patience:
            state.lr *= cfg.decay_factor
            state.bad_epochs = 0
            runlog.append({"kind": "lr_decay", "epoch": epoch, "lr": state.lr})
        state.epoch += 1
        runlog.timings.append({"epoch": epoch, "seconds": time.perf_counter() - t0})
        if out is not None:
            save_state(state_path, state, len(runlog.records))
            with open(out / "timing.ndjson", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(runlog.timings[-1]) + "\n")
        log.info("epoch %d: train %.4f val %.4f lr %.1e", epoch, np.mean(losses), val, state.lr)

    if out is not None and state.epoch >= cfg.epochs:
        save_checkpoint(out / "final.palw", state)
        if not (out / "best.palw").exists():
            save_checkpoint(out / "best.palw", state)
    return TrainResult(state=state, log=runlog, best_params=best_params)


def load_best(path) -> EncoderParams:
    from .encoder import load_params

    return load_params(path)


def with_mode(cfg: TrainConfig, mode: int, seed: int | None = None) -> TrainConfig:
    return replace(cfg, mode=int(mode), seed=cfg.seed if seed is None else seed)
