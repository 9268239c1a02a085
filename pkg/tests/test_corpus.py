from dataclasses import replace

import numpy as np
import pytest

from pallab.corpus import (
    BOUND,
    Corpus,
    CorpusFormatError,
    CorpusParams,
    generate_corpus,
    generate_video,
    read_corpus,
    write_corpus,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(seed=0)


def test_noise_free_video_is_deterministic():
    p = CorpusParams(noise_std=0.0)
    a, b = generate_video(3, 11, p), generate_video(3, 11, p)
    assert np.array_equal(a.frames, b.frames)


def test_same_latent_shares_motif():
    p = CorpusParams(noise_std=0.0, drift_amplitude=0.0)
    assert np.array_equal(generate_video(2, 1, p).frames, generate_video(2, 99, p).frames)
    # with drift on, two seeds differ only by the bounded drift terms
    q = replace(p, drift_amplitude=0.3)
    diff = generate_video(2, 1, q).frames - generate_video(2, 99, q).frames
    assert np.abs(diff).max() <= 2 * 0.3 + 1e-12


def test_within_latent_frames_more_similar(corpus):
    mean_frames = []
    latents = []
    for v in corpus.videos:
        f = v.frames / np.linalg.norm(v.frames, axis=1, keepdims=True)
        mean_frames.append(f[::8])
        latents.append(v.latent_id)
    latents = np.array(latents)
    within, across = [], []
    for i in range(len(latents)):
        for j in range(i + 1, len(latents)):
            sim = float(np.mean(mean_frames[i] @ mean_frames[j].T))
            (within if latents[i] == latents[j] else across).append(sim)
    assert np.mean(within) > np.mean(across)


def test_nearest_latent_classifier_is_accurate(corpus):
    feats = np.array([v.frames.mean(axis=0) for v in corpus.videos])
    lat = np.array([v.latent_id for v in corpus.videos])
    train = (np.arange(len(lat)) // 8) % 2 == 0  # every latent appears on both sides
    centroids = np.array([feats[train & (lat == k)].mean(axis=0) for k in range(8)])
    test = feats[~train]
    pred = np.argmin(((test[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == lat[~train]) > 0.9


def test_corpus_respects_bounds_and_length(corpus):
    assert len(corpus) == 64
    for v in corpus.videos:
        assert v.frames.shape == (256, 16)
        assert np.all(np.abs(v.frames) <= BOUND)
        assert v.n_frames >= 6 * 8 * 4


def test_regeneration_is_bit_exact(corpus):
    again = generate_corpus(seed=0)
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(corpus.videos, again.videos))
    other = generate_corpus(seed=1)
    assert not np.array_equal(corpus.videos[0].frames, other.videos[0].frames)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        generate_video(0, 0, CorpusParams(n_latents=1))
    with pytest.raises(ValueError):
        generate_video(9, 0, CorpusParams())


def test_round_trip(tmp_path, corpus):
    path = tmp_path / "c.palc"
    manifest = write_corpus(corpus, path)
    back = read_corpus(path)
    assert manifest["count"] == 64 and back.seed == 0 and back.params == corpus.params
    for a, b in zip(corpus.videos, back.videos):
        assert (a.id, a.latent_id) == (b.id, b.latent_id)
        assert np.array_equal(a.frames, b.frames)


def test_truncated_file_rejected(tmp_path, corpus):
    path = tmp_path / "c.palc"
    write_corpus(corpus, path)
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(CorpusFormatError, match="offset"):
        read_corpus(path)


def test_flipped_byte_fails_checksum(tmp_path, corpus):
    path = tmp_path / "c.palc"
    write_corpus(corpus, path)
    data = bytearray(path.read_bytes())
    data[-50] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorpusFormatError, match="checksum") as info:
        read_corpus(path)
    assert info.value.offset > 0


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.palc"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CorpusFormatError, match="magic"):
        read_corpus(path)


def test_empty_corpus(tmp_path):
    path = tmp_path / "empty.palc"
    write_corpus(Corpus(videos=[], seed=3, params=CorpusParams(n_videos=0)), path)
    back = read_corpus(path)
    assert len(back) == 0 and back.seed == 3
    assert path.read_bytes()[:4] == b"PALC"
