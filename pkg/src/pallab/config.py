"""Run configuration files: four TOML sections, every key defaulted.

``[corpus]`` holds the corpus seed plus generator parameters, ``[encoder]``
the network sizes, ``[train]`` the optimizer, loss and transformation knobs,
and ``[probe]`` the evaluation settings. Unknown sections or keys are errors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .corpus import CorpusParams
from .encoder import EncoderDims
from .trainer import TrainConfig
from .transform import TransformConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    seed: int = 0
    n_pairs: int = 500
    n_train: int = 256
    n_test: int = 256
    sim_videos: int = 16
    ladder_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ladder_modes: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class RunConfig:
    corpus_seed: int = 0
    corpus: CorpusParams = field(default_factory=CorpusParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        corpus = {"seed": self.corpus_seed, **asdict(self.corpus)}
        tr = asdict(self.train)
        encoder = tr.pop("encoder")
        transform = tr.pop("transform")
        transform.pop("clip_len")  # lives in [encoder]
        encoder.pop("d_frame")  # lives in [corpus]
        probe = asdict(self.probe)
        probe = {k: list(v) if isinstance(v, tuple) else v for k, v in probe.items()}
        return {"corpus": corpus, "encoder": encoder, "train": {**tr, **transform}, "probe": probe}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


_SECTIONS = ("corpus", "encoder", "train", "probe")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{section}]")


def _coerce(section: str, key: str, value, default):
    """Accept ints for float fields; reject everything else of the wrong type."""
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, section: str, given: dict, base=None):
    base = base if base is not None else cls()
    values = {k: _coerce(section, k, v, getattr(base, k)) for k, v in given.items()}
    return replace(base, **values)


def config_from_mapping(doc: dict) -> RunConfig:
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(doc[section], dict):
            raise ConfigError(f"'{section}' must be a table")
    corpus_in = dict(doc.get("corpus", {}))
    encoder_in = dict(doc.get("encoder", {}))
    train_in = dict(doc.get("train", {}))
    probe_in = dict(doc.get("probe", {}))

    _check_keys("corpus", corpus_in, _names(CorpusParams) | {"seed"})
    _check_keys("encoder", encoder_in, _names(EncoderDims) - {"d_frame"})
    train_keys = _names(TrainConfig) - {"encoder", "transform"}
    transform_keys = _names(TransformConfig) - {"clip_len"}
    _check_keys("train", train_in, train_keys | transform_keys)
    _check_keys("probe", probe_in, _names(ProbeConfig))

    seed = _coerce("corpus", "seed", corpus_in.pop("seed", 0), 0)
    corpus = _build(CorpusParams, "corpus", corpus_in)
    encoder = _build(EncoderDims, "encoder", encoder_in, EncoderDims(d_frame=corpus.d_frame))
    transform = _build(TransformConfig, "train", {k: v for k, v in train_in.items() if k in transform_keys},
                       TransformConfig(clip_len=encoder.clip_len))
    train = _build(TrainConfig, "train", {k: v for k, v in train_in.items() if k in train_keys},
                   TrainConfig(encoder=encoder, transform=transform))
    probe = _build(ProbeConfig, "probe", probe_in)

    cfg = RunConfig(corpus_seed=seed, corpus=corpus, train=train, probe=probe)
    try:
        corpus.validate()
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if len(probe.ladder_seeds) < 3:
        raise ConfigError("[probe] ladder_seeds: the ablation ladder needs at least three seeds")
    if probe.n_pairs < 30:
        raise ConfigError("[probe] n_pairs must be at least 30")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a config file; ``None`` gives the all-default configuration."""
    if path is None:
        return config_from_mapping({})
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(doc)
