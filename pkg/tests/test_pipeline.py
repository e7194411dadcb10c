import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dialoflow import pipeline as P
from dialoflow.pipeline import DiarSeg, OverlapInterval, WordRec
from dialoflow.synthgen import PIPELINE_VIOLATIONS, gen_pipeline_fixture, write_pipeline_fixture


def test_segment_chunks():
    assert P.segment_chunks(3000, 1200) == [(0, 1200), (1200, 2400), (2400, 3000)]
    assert P.segment_chunks(600) == [(0, 600)]
    assert P.segment_chunks(1200) == [(0, 1200)]
    with pytest.raises(ValueError):
        P.segment_chunks(0)


def test_assign_words_examples():
    diar = [DiarSeg("A", 0.0, 1.4), DiarSeg("B", 1.4, 3.0)]
    words = [WordRec("x", 1.0, 2.0), WordRec("y", 0.1, 0.5), WordRec("z", 5.0, 6.0)]
    assert [lab for _, lab in P.assign_words(words, diar)] == ["B", "A", P.UNK]


def test_assign_words_tie_goes_to_earlier_segment():
    diar = [DiarSeg("B", 1.5, 3.0), DiarSeg("A", 0.0, 1.5)]
    assert P.assign_words([WordRec("x", 1.0, 2.0)], diar)[0][1] == "A"


def _brute_assign(w, diar):
    tot, first = {}, {}
    for s in diar:
        ov = min(w.end, s.end) - max(w.start, s.start)
        if ov > 0:
            tot[s.spk] = tot.get(s.spk, 0) + ov
            first[s.spk] = min(first.get(s.spk, math.inf), s.start)
    if not tot:
        return P.UNK
    best = max(tot.values())
    cands = [k for k in tot if tot[k] == best]
    return min(cands, key=lambda k: (first[k], k))


@st.composite
def diar_and_words(draw):
    diar = []
    for spk in ("A", "B", "C"):
        t = draw(st.integers(0, 20))
        for _ in range(draw(st.integers(0, 4))):
            ln = draw(st.integers(1, 15))
            diar.append(DiarSeg(spk, t / 4, (t + ln) / 4))
            t += ln + draw(st.integers(1, 10))
    words = []
    t = 0
    for _ in range(draw(st.integers(1, 10))):
        ln = draw(st.integers(1, 8))
        words.append(WordRec("w", t / 4, (t + ln) / 4))
        t += ln + draw(st.integers(0, 4))
    return diar, words


@settings(max_examples=1000, deadline=None)
@given(diar_and_words(), st.randoms(use_true_random=False))
def test_assign_words_total_and_order_invariant(dw, rnd):
    diar, words = dw
    got = [lab for _, lab in P.assign_words(words, diar)]
    shuffled = list(diar)
    rnd.shuffle(shuffled)
    assert got == [lab for _, lab in P.assign_words(words, shuffled)]
    assert got == [_brute_assign(w, diar) for w in words]


def test_merge_examples():
    a, b = OverlapInterval(2, 3), OverlapInterval(0, 1)
    assert P.merge_overlaps([a, b]) == [b, a]
    assert P.merge_overlaps([OverlapInterval(0, 1), OverlapInterval(0.9, 2)]) == [OverlapInterval(0, 2)]
    assert P.merge_overlaps([OverlapInterval(0, 3), OverlapInterval(1, 2)]) == [OverlapInterval(0, 3)]
    assert P.merge_overlaps([OverlapInterval(0, 1), OverlapInterval(1.2, 2)], 0.5) == [OverlapInterval(0, 2)]


intervals = st.lists(st.tuples(st.integers(0, 60), st.integers(1, 12)), max_size=12).map(
    lambda xs: [OverlapInterval(s / 4, (s + d) / 4) for s, d in xs])


@settings(max_examples=1000, deadline=None)
@given(intervals, st.sampled_from([0.0, 0.25, 1.0]), st.randoms(use_true_random=False))
def test_merge_idempotent_order_free_disjoint(ivs, tol, rnd):
    m = P.merge_overlaps(ivs, tol)
    assert P.merge_overlaps(m, tol) == m
    sh = list(ivs)
    rnd.shuffle(sh)
    assert P.merge_overlaps(sh, tol) == m
    for a, b in zip(m, m[1:]):
        assert a.end + tol <= b.start
    # coverage oracle on a quarter grid
    cover = {q for iv in ivs for q in range(int(iv.start * 4), int(iv.end * 4))}
    assert cover <= {q for iv in m for q in range(int(iv.start * 4), int(iv.end * 4))}
    if tol == 0:
        assert cover == {q for iv in m for q in range(int(iv.start * 4), int(iv.end * 4))}


def _lab(spks):
    return [(WordRec(f"w{i}", i, i + 1.0), s) for i, s in enumerate(spks)]


def test_build_utterances_examples():
    u, _ = P.build_utterances(_lab("AAA"), {2}, [])
    assert len(u) == 1 and u[0].closed
    u, _ = P.build_utterances(_lab("AAB"), set(), [])
    assert [x.spk for x in u] == ["A", "B"] and not u[0].closed
    u, _ = P.build_utterances(_lab("AAABBB"), {1}, [])
    assert [[w.text for w in x.words] for x in u] == [["w0", "w1"], ["w2"], ["w3", "w4", "w5"]]
    # punctuation right before a speaker change leaves nothing empty behind
    u, _ = P.build_utterances(_lab("AAABBB"), {2}, [])
    assert [len(x.words) for x in u] == [3, 3]


def _replay(labels, punct):
    """Boundary oracle: cut between i and i+1 iff punct at i or the label changes."""
    groups, cur = [], []
    for i, lab in enumerate(labels):
        if lab == P.UNK:
            if cur:
                groups.append(cur)
            cur = []
            continue
        if cur and labels[cur[-1]] != lab:
            groups.append(cur)
            cur = []
        cur.append(i)
        if i in punct:
            groups.append(cur)
            cur = []
    if cur:
        groups.append(cur)
    return groups


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(["A", "B", P.UNK]), min_size=1, max_size=12), st.sets(st.integers(0, 11)))
def test_build_utterances_matches_boundary_oracle(labels, punct):
    u, warns = P.build_utterances(_lab(labels), punct, [])
    assert [[int(w.text[1:]) for w in x.words] for x in u] == _replay(labels, punct)
    assert len(warns) == labels.count(P.UNK)


def test_overlap_flag_by_midpoint():
    lab = [(WordRec("a", 0.0, 1.0), "A"), (WordRec("b", 1.0, 2.0), "A")]
    u, _ = P.build_utterances(lab, set(), [OverlapInterval(0.4, 1.4)])
    assert u[0].overlap == (True, False)


def test_snr_examples():
    x = np.where(np.arange(1000) % 2, 1.0, -1.0)
    assert P.snr_estimate(x, [(0, 500)]) == pytest.approx(0.0, abs=1e-12)
    t = np.arange(2000) / 100
    sig = np.where(t < 10, np.sin(2 * np.pi * 5.3 * t), 0.1 * np.sin(2 * np.pi * 5.3 * t))
    assert P.snr_estimate(sig, [(0, 10)], 100) == pytest.approx(20.0, abs=0.1)
    assert P.snr_estimate(x, [(0, 1000)]) == math.inf
    with pytest.raises(ValueError):
        P.snr_estimate(x, [])


def _u(spk, s, e):
    return P.UtteranceRec(spk, (WordRec("w", s, e),), True, (False,))


def test_filter_threshold_logic():
    u = _u("A", 0, 1)
    kept, rep = P.filter_segments([u], {"snr_db": lambda _: 30.0, "quality": lambda _: 4.0})
    assert kept == [u] and rep[0].reasons == [] and rep[0].keep
    kept, rep = P.filter_segments([u], {"snr_db": lambda _: 4.0, "quality": lambda _: 1.0})
    assert kept == [] and rep[0].reasons == ["snr", "quality"]

    def boom(_):
        raise RuntimeError("model crashed")

    kept, rep = P.filter_segments([u], {"cluster_coherence": boom})
    assert rep[0].reasons == ["scorer_error"] and rep[0].scores["cluster_coherence"] is None


def test_split_dual_track():
    utts = [_u("X", 0, 1), _u("Y", 0.8, 2), _u("X", 2.5, 3)]
    out = P.split_dual_track(utts, [OverlapInterval(0.8, 1.0)])
    assert [(c, u.spk) for c, u, _ in out] == [(1, "X"), (2, "Y"), (1, "X")]
    assert out[0][2] == [(0.8, 1.0)] and out[1][2] == [(0.8, 1.0)] and out[2][2] == []
    with pytest.raises(ValueError, match="two speakers"):
        P.split_dual_track(utts + [_u("Z", 4, 5)], [])


def test_emit_manifest_round_trip(tmp_path):
    P.emit_manifest([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == b""
    recs = [{"kind": "utt", "start": 0.5, "words": [{"text": "a"}]}, {"kind": "filter", "keep": False}]
    P.emit_manifest(recs, tmp_path / "m.jsonl")
    assert P.read_manifest(tmp_path / "m.jsonl") == recs


def _run(tmp_path, seed, violations):
    fx = gen_pipeline_fixture(seed, violations)
    paths = write_pipeline_fixture(fx, tmp_path)
    utts, reps = P.run_pipeline(P.read_manifest(paths["input"]), P.PipelineConfig(chunk_seconds=fx.chunk_seconds),
                                tmp_path)
    P.emit_manifest(utts, tmp_path / "out_utts.jsonl")
    P.emit_manifest(reps, tmp_path / "out_reports.jsonl")
    return fx, paths


def test_fixture_without_violations_keeps_everything(tmp_path):
    fx, paths = _run(tmp_path, 0, ())
    assert all(r["keep"] for r in fx.gold_reports)
    assert (tmp_path / "out_utts.jsonl").read_bytes() == paths["gold_utts"].read_bytes()
    assert (tmp_path / "out_reports.jsonl").read_bytes() == paths["gold_reports"].read_bytes()


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_fixture_with_planted_violations_is_byte_identical(tmp_path, seed):
    fx, paths = _run(tmp_path, seed, PIPELINE_VIOLATIONS)
    assert (tmp_path / "out_utts.jsonl").read_bytes() == paths["gold_utts"].read_bytes()
    assert (tmp_path / "out_reports.jsonl").read_bytes() == paths["gold_reports"].read_bytes()
    reasons = {c for r in fx.gold_reports if r["kind"] == "filter" for c in r["reasons"]}
    assert reasons == {"snr", "cluster", "similarity", "quality", "scorer_error"}
    snr_drop = [r for r in fx.gold_reports if r["kind"] == "filter" and r["dialogue"].endswith("-1")]
    assert all(r["reasons"] == ["snr"] and r["scores"]["snr_db"] == 0.0 for r in snr_drop)
    assert any(r["kind"] == "warning" for r in fx.gold_reports)


def test_fixture_exercises_overlaps():
    n = sum(any(w["overlap"] for w in u["words"]) for s in range(5) for u in gen_pipeline_fixture(s).gold_utts)
    assert n > 0


def test_run_pipeline_rejects_bad_input():
    with pytest.raises(ValueError):
        P.run_pipeline([{"kind": "nope"}])
    with pytest.raises(ValueError):
        P.run_pipeline([{"kind": "word", "chunk": 0, "text": "a", "start": 2.0, "end": 1.0}])
