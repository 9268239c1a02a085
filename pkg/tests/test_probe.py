import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pallab.corpus import CorpusParams, generate_corpus
from pallab.encoder import init_params
from pallab.probe import (
    TRANSFORMS,
    ProbeReport,
    SimMatrix,
    ablation_ladder,
    decode_interval,
    default_background,
    equivariance_gap,
    ladder_checks,
    ladder_summary,
    localization_probe,
    mean_tiou,
    read_sim_csv,
    region_vectors,
    sim_matrix,
    tiou,
)
from pallab.trainer import TrainConfig, with_mode
from pallab.transform import Mode, make_pair

# Exact E[tIoU] for rank scores (a uniformly random ordering of 0..7) decoded
# against a region of length 2..6 (uniform) at a uniform start, J=8. Computed by
# enumerating all 8! orderings with an independent brute-force decoder and
# rational arithmetic: 81568637 / 246960000.
RANDOM_RANK_TIOU = 81568637 / 246960000


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0, CorpusParams(n_videos=16))


@pytest.fixture(scope="module")
def params():
    return init_params(0)


def brute_force_decode(scores):
    """Every interval scored directly; ties by raw-score contrast, then (start, end)."""
    raw = np.asarray(scores, dtype=float)
    x = raw - np.median(raw)
    J = len(raw)
    cands = []
    for s in range(J):
        for e in range(s, J):
            n = e - s + 1
            ins = raw[s : e + 1].sum()
            out = (raw.sum() - ins) / (J - n) if n < J else np.median(raw)
            cands.append((-x[s : e + 1].sum(), -(ins / n - out), s, e))
    best = min(cands)
    return (best[2], best[3]), -best[0]


# ------------------------------------------------------------ interval decode


def test_oracle_scores_give_perfect_tiou():
    spans = [(s, e) for s in range(8) for e in range(s + 1, min(s + 6, 8))]
    scores = np.zeros((len(spans), 8))
    for k, (s, e) in enumerate(spans):
        scores[k, s : e + 1] = 1.0
    assert mean_tiou(scores, spans) == 1.0


def test_tiou_examples():
    assert tiou((0, 3), (0, 3)) == 1.0
    assert tiou((0, 1), (2, 3)) == 0.0
    assert tiou((0, 3), (2, 5)) == pytest.approx(2 / 6)


def test_decode_matches_brute_force_on_every_ordering():
    # integer ranks make every sum exact, so tie-breaking is compared too
    for perm in itertools.permutations(range(8)):
        assert decode_interval(perm) == brute_force_decode(perm)[0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=16))
def test_decode_reaches_the_maximum_sum(scores):
    s, e = decode_interval(scores)
    x = np.asarray(scores) - np.median(scores)
    _, best = brute_force_decode(scores)
    assert 0 <= s <= e < len(scores)
    assert abs(x[s : e + 1].sum() - best) <= 1e-9 * max(1.0, abs(best))


def test_random_rank_scores_match_enumerated_expectation():
    rng = np.random.default_rng(0)
    n = 20_000
    lengths = rng.integers(2, 7, size=n)
    starts = np.array([rng.integers(0, 8 - k + 1) for k in lengths])
    scores = np.array([rng.permutation(8) for _ in range(n)], dtype=float)
    vals = [tiou(decode_interval(sc), (s, s + k - 1)) for sc, s, k in zip(scores, starts, lengths)]
    se = np.std(vals, ddof=1) / np.sqrt(n)
    assert abs(np.mean(vals) - RANDOM_RANK_TIOU) < 4 * se


# ------------------------------------------------------------ similarity maps


@pytest.mark.parametrize("transform", TRANSFORMS)
def test_sim_matrix_invariants(params, corpus, transform):
    v = corpus.videos[0]
    sm = sim_matrix(params, v, transform, default_background(corpus, v))
    m = sm.matrix
    assert np.array_equal(m, m.T)
    assert np.all(np.abs(np.diag(m) - 1) <= 1e-9)
    assert np.all(m <= 1) and np.all(m >= -1)


def test_mask_follows_the_transformed_region(params, corpus):
    v = corpus.videos[1]
    bkg = default_background(corpus, v)
    spans = {t: (sim_matrix(params, v, t, bkg).s, sim_matrix(params, v, t, bkg).e) for t in TRANSFORMS}
    # base 4 clips at stride 2; half the clips moved back, twice the clips moved forward
    assert spans == {"identity": (6, 9), "downshift": (3, 4), "upshift": (8, 15)}
    for t, (s, e) in spans.items():
        assert sim_matrix(params, v, t, bkg).mask.tolist() == [int(s <= j <= e) for j in range(16)]


def test_csv_round_trip(params, corpus):
    v = corpus.videos[2]
    sm = sim_matrix(params, v, "downshift", default_background(corpus, v))
    text = sm.to_csv()
    lines = text.splitlines()
    assert len(lines) == 17 and all(len(x.split(",")) == 16 for x in lines[:16])
    assert lines[-1].startswith("mask,")
    back = read_sim_csv(text)
    assert np.array_equal(back.matrix, sm.matrix) and (back.s, back.e) == (sm.s, sm.e)


def test_block_gap_on_ideal_matrix():
    m = np.full((8, 8), 0.1)
    m[2:5, 2:5] = 0.9
    np.fill_diagonal(m, 1.0)
    sm = SimMatrix(m, 2, 4)
    assert sm.block_gap() == pytest.approx(0.8)
    assert sm.best_window() == (2, 4) and sm.tracks_region()


def test_sim_matrix_rejects_unknown_transform(params, corpus):
    with pytest.raises(ValueError):
        sim_matrix(params, corpus.videos[0], "reverse", corpus.videos[1])


def test_sim_matrix_rejects_short_video(params, corpus):
    short = replace(corpus.videos[0], frames=corpus.videos[0].frames[:40])
    with pytest.raises(ValueError):
        sim_matrix(params, short, "identity", corpus.videos[1])


# ------------------------------------------------------------ equivariance gap


def test_self_pair_similarity_is_one(params, corpus):
    v = corpus.videos
    a, _ = make_pair(v[0], v[1], v[2], np.random.default_rng(0))
    r = region_vectors(params, [a, a])
    assert abs(float(r[0] @ r[1]) - 1.0) < 1e-12


def test_gap_rejects_too_few_pairs(params, corpus):
    with pytest.raises(ValueError):
        equivariance_gap(params, corpus, n_pairs=29)


def test_gap_is_reproducible(params, corpus):
    a = equivariance_gap(params, corpus, n_pairs=40, seed=3)
    b = equivariance_gap(params, corpus, n_pairs=40, seed=3)
    assert a == b and a.n_pairs == 40 and a.stderr > 0


# --------------------------------------------------------- localization probe


def test_probe_splits_are_disjoint(params, corpus):
    res = localization_probe(params, corpus, seed=0, n_train=32, n_test=32)
    assert not set(res.train_ids) & set(res.test_ids)
    assert len(res.train_ids) == 32 and len(res.test_ids) == 32
    assert 0.0 <= res.mean_tiou <= 1.0


def test_probe_is_bit_reproducible(params, corpus):
    a = localization_probe(params, corpus, seed=1, n_train=32, n_test=32)
    b = localization_probe(params, corpus, seed=1, n_train=32, n_test=32)
    assert a.mean_tiou == b.mean_tiou and a.stderr == b.stderr


def test_empty_probe_split_rejected(params, corpus):
    with pytest.raises(ValueError):
        localization_probe(params, corpus, n_train=0)


# ------------------------------------------------------------------ reporting


def test_modes_three_and_four_differ_only_in_key_background(corpus):
    cfg = TrainConfig()
    a3, b3 = make_pair(*corpus.videos[:3], np.random.default_rng(5), Mode.PASTE_SAME_BKG)
    a4, b4 = make_pair(*corpus.videos[:3], np.random.default_rng(5), Mode.PASTE_DIFF_BKG)
    assert np.array_equal(a3.frames, a4.frames) and a3.spec == a4.spec
    assert b3.spec == b4.spec
    assert b3.background_video_id == corpus.videos[1].id != b4.background_video_id
    d3, d4 = with_mode(cfg, 3).as_dict(), with_mode(cfg, 4).as_dict()
    assert {k for k in d3 if d3[k] != d4[k]} == {"mode"}


def test_report_schema_carries_seeds_and_variance():
    summary = ladder_summary({m: [0.1 * m, 0.1 * m + 0.01, 0.1 * m + 0.02] for m in range(5)})
    report = ProbeReport(seeds=[0, 1, 2], config_hash="abc", localization=summary)
    doc = json.loads(report.to_json())
    assert doc["seeds"] == [0, 1, 2]
    for row in doc["localization"].values():
        assert row["n_seeds"] == 3 and "var" in row and "stderr" in row and len(row["per_seed"]) == 3
    assert all(ladder_checks(summary).values())


def test_ladder_rejects_mismatched_budgets(corpus):
    base = TrainConfig(epochs=0)
    configs = {0: with_mode(base, 0), 4: replace(with_mode(base, 4), lr=1e-3)}
    with pytest.raises(ValueError, match="budget"):
        ablation_ladder(base, corpus, seeds=[0, 1, 2], modes=(0, 4), configs=configs)


def test_ladder_needs_three_seeds(corpus):
    with pytest.raises(ValueError):
        ablation_ladder(TrainConfig(epochs=0), corpus, seeds=[0, 1])
