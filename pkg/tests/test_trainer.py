import math
from dataclasses import replace

import numpy as np
import pytest

from pallab.corpus import Corpus, CorpusParams, generate_corpus
from pallab.encoder import load_params
from pallab.trainer import (
    NonFiniteLossError,
    TrainConfig,
    config_from_dict,
    draw_triple,
    new_state,
    split_videos,
    train,
    train_step,
    warm_queue,
    with_mode,
)

SMALL = TrainConfig(epochs=2, batch_size=8, queue_size=64, pairs_per_video=1)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0, CorpusParams(n_videos=12))


def one_batch(corpus, cfg, n=4, salt=0):
    rngs = [np.random.default_rng([salt, i]) for i in range(n)]
    vids = corpus.videos
    return [draw_triple(vids, vids[i], r) for i, r in enumerate(rngs)], rngs


def test_first_step_is_finite_and_moves_params(corpus):
    state = new_state(SMALL)
    warm_queue(state, corpus.videos, SMALL)
    before = state.params.copy()
    triples, rngs = one_batch(corpus, SMALL)
    loss = train_step(triples, state, SMALL, rngs)
    assert math.isfinite(loss)
    assert state.params.all_finite() and state.params != before
    assert state.step == 1


def test_zero_lr_freezes_params_but_queue_advances(corpus):
    cfg = replace(SMALL, lr=0.0)
    state = new_state(cfg)
    before = state.params.copy()
    key_before = state.key.params.copy()
    triples, rngs = one_batch(corpus, cfg)
    train_step(triples, state, cfg, rngs)
    assert state.params == before
    assert np.allclose(state.key.params.flat(), key_before.flat(), rtol=1e-15, atol=0)
    assert state.queue.filled == 4 and state.queue.cursor == 4


def test_queue_warm_up_fills_capacity(corpus):
    state = new_state(SMALL)
    warm_queue(state, corpus.videos, SMALL)
    assert state.queue.filled == SMALL.queue_size
    assert np.allclose(np.linalg.norm(state.queue.negatives(), axis=1), 1.0)


def test_runs_are_bit_identical(tmp_path, corpus):
    train(SMALL, corpus, tmp_path / "a")
    train(SMALL, corpus, tmp_path / "b")
    for name in ("runlog.ndjson", "final.palw", "best.palw", "state.palw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_runlog_is_free_of_wall_clock(tmp_path, corpus):
    result = train(SMALL, corpus, tmp_path)
    assert len(result.log.timings) == SMALL.epochs
    text = (tmp_path / "runlog.ndjson").read_text()
    assert "seconds" not in text and text == result.log.dumps()
    assert len((tmp_path / "timing.ndjson").read_text().splitlines()) == SMALL.epochs


def test_different_seed_different_run(corpus):
    a = train(SMALL, corpus).log.dumps()
    b = train(replace(SMALL, seed=1), corpus).log.dumps()
    assert a != b


def test_zero_epochs_emits_initial_checkpoint(tmp_path, corpus):
    cfg = replace(SMALL, epochs=0)
    train(cfg, corpus, tmp_path)
    assert load_params(tmp_path / "final.palw") == new_state(cfg).params
    assert load_params(tmp_path / "best.palw") == new_state(cfg).params


def test_resume_reproduces_uninterrupted_run(tmp_path, corpus):
    cfg = replace(SMALL, epochs=3)
    train(cfg, corpus, tmp_path / "full")
    part = tmp_path / "part"
    train(cfg, corpus, part, stop_after_epoch=1)
    assert not (part / "final.palw").exists()
    train(cfg, corpus, part, resume=True)
    for name in ("runlog.ndjson", "final.palw", "best.palw"):
        assert (part / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_one_epoch_lowers_training_loss():
    corpus = generate_corpus(0)  # 64 videos, desk defaults
    log = train(replace(TrainConfig(), epochs=1), corpus).log
    losses = [r["loss"] for r in log.steps()]
    k = max(1, len(losses) // 5)
    assert np.mean(losses[-k:]) < np.mean(losses[:k])


def test_non_finite_input_aborts_with_dump(tmp_path, corpus):
    videos = [replace(v, frames=np.full_like(v.frames, np.nan)) for v in corpus.videos]
    poisoned = Corpus(videos=videos, seed=corpus.seed, params=corpus.params)
    with pytest.raises(NonFiniteLossError) as info:
        train(replace(SMALL, queue_size=8, batch_size=4), poisoned, tmp_path)
    assert info.value.dump_path is not None and info.value.dump_path.exists()


def test_missing_corpus_rejected():
    with pytest.raises(ValueError):
        train(SMALL, None)


def test_validation_split_is_held_out(corpus):
    tr, val = split_videos(corpus, SMALL)
    assert len(val) == 3 and not {v.id for v in tr} & {v.id for v in val}


def test_plateau_decay_is_logged(corpus):
    # a tiny lr never improves validation by more than the threshold
    cfg = replace(SMALL, epochs=4, lr=1e-12, patience=1)
    result = train(cfg, corpus)
    decays = [r for r in result.log.records if r["kind"] == "lr_decay"]
    assert decays and decays[0]["lr"] == pytest.approx(1e-13)


def test_budget_ignores_mode_and_seed():
    base = TrainConfig()
    assert with_mode(base, 0, seed=3).budget() == base.budget()
    assert replace(base, lr=1e-3).budget() != base.budget()


def test_config_round_trip_and_validation():
    cfg = TrainConfig(mode=2, lr=3e-4)
    assert config_from_dict(cfg.as_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(mode=7).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2048).validate()
