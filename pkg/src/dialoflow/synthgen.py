"""Synthetic data with known ground truth.

* :func:`gen_dialogue` samples two-speaker dialogues from a small stochastic
  grammar together with the gold schedule, tracks and overlap windows.
* :func:`tokens_to_features` renders token sequences into frame features with a
  frozen codebook plus a per-speaker offset.
* :func:`gen_pipeline_fixture` builds data-pipeline inputs whose correct output
  is known by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple

import numpy as np

from . import dualtrack as dt
from .dualtrack import DialogueScript, Turn, TurnSchedule, VocabSpec
from .nn.checkpoint import load_tensors
from .nn.rng import Rng

FRAME_RATIO = 2
CODEBOOK_SEED = 20240611
CODEBOOK_ROWS = 64
FEATURE_DIM = 16
SPEAKER_DIM = 8


@dataclass(frozen=True)
class GrammarParams:
    vocab: VocabSpec = field(default_factory=VocabSpec)
    turns: tuple = (2, 4)
    turn_len: tuple = (4, 7)
    overlap_prob: float = 0.3
    overlap_len: tuple = (2, 2)
    backchannel_prob: float = 0.0
    backchannel_len: tuple = (1, 3)
    n_interjections: int = 4
    d_spk: int = SPEAKER_DIM
    seed: int = 0

    def __post_init__(self):
        for name in ("overlap_prob", "backchannel_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("turns", "turn_len", "overlap_len", "backchannel_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a non-empty range of positive ints")
        if not 0 < self.n_interjections < len(self.vocab.content_ids) - 1:
            raise ValueError("n_interjections leaves no ordinary tokens")

    @property
    def interjections(self) -> list[int]:
        ids = list(self.vocab.content_ids)
        return ids[-self.n_interjections:]

    @property
    def ordinary(self) -> list[int]:
        ids = list(self.vocab.content_ids)
        return ids[:-self.n_interjections]


@dataclass
class SpeakerProfile:
    vector: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if abs(np.linalg.norm(self.vector) - 1.0) > 1e-6:
            raise ValueError("speaker vector must have unit norm")


class GeneratedDialogue(NamedTuple):
    script: DialogueScript
    schedule: TurnSchedule
    tracks: tuple
    overlaps: list


# -- codebook ------------------------------------------------------------------

def generate_codebook(seed: int = CODEBOOK_SEED, rows: int = CODEBOOK_ROWS, dim: int = FEATURE_DIM,
                      d_spk: int = SPEAKER_DIM) -> dict[str, np.ndarray]:
    """Arrays stored in the shipped codebook file. Reserved rows are zero."""
    rng = Rng(seed).child("codebook")
    book = rng.normal(size=(rows, dim))
    book[:dt.FIRST_CONTENT] = 0.0
    proj = rng.normal(size=(dim, d_spk)) * 0.5
    return {"codebook": book, "speaker_proj": proj}


_CODEBOOK_CACHE: dict | None = None


def load_codebook() -> dict[str, np.ndarray]:
    global _CODEBOOK_CACHE
    if _CODEBOOK_CACHE is None:
        ref = resources.files("dialoflow").joinpath("data/codebook.dlsp")
        with resources.as_file(ref) as path:
            arrays, _ = load_tensors(path)
        _CODEBOOK_CACHE = arrays
    return _CODEBOOK_CACHE


def make_speaker(rng: Rng, d_spk: int = SPEAKER_DIM) -> SpeakerProfile:
    v = rng.normal(size=d_spk)
    v /= np.linalg.norm(v)
    proj = load_codebook()["speaker_proj"]
    if proj.shape[1] != d_spk:
        raise ValueError(f"codebook supports d_spk={proj.shape[1]}")
    return SpeakerProfile(v, proj @ v)


def tokens_to_features(tokens, profile: SpeakerProfile, sigma: float, rng: Rng | None = None,
                       ratio: int = FRAME_RATIO) -> np.ndarray:
    """Each token becomes ``ratio`` frames: codebook row + speaker offset + N(0, sigma^2)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("need at least one token")
    book = load_codebook()["codebook"]
    if tokens.max() >= book.shape[0] or tokens.min() < 0:
        raise ValueError("token id outside the codebook")
    frames = np.repeat(book[tokens], ratio, axis=0) + profile.offset
    if sigma > 0:
        if rng is None:
            raise ValueError("sigma > 0 needs an rng")
        frames = frames + rng.normal(size=frames.shape, scale=sigma)
    return frames


# -- dialogue grammar ----------------------------------------------------------

def gen_dialogue(params: GrammarParams, rng: Rng) -> GeneratedDialogue:
    lo, hi = params.turns
    n_turns = int(rng.integers(lo, hi + 1))
    lens = [int(rng.integers(params.turn_len[0], params.turn_len[1] + 1)) for _ in range(n_turns)]
    # channel 1 is whoever speaks first, matching the pipeline's channel assignment
    spks = [1 if k % 2 == 0 else 2 for k in range(n_turns)]

    starts, ends, ovs = [0], [lens[0]], [0]
    for k in range(1, n_turns):
        ov = 0
        if rng.random() < params.overlap_prob:
            ov = int(rng.integers(params.overlap_len[0], params.overlap_len[1] + 1))
            same_channel_end = ends[k - 2] if k >= 2 else 0
            ov = min(ov, lens[k - 1] - 1, lens[k] - 1, ends[k - 1] - same_channel_end)
            ov = max(ov, 0)
        starts.append(ends[k - 1] - ov)
        ends.append(starts[k] + lens[k])
        ovs.append(ov)

    ordinary, inter = params.ordinary, params.interjections
    runs = []
    for k in range(n_turns):
        toks = [int(rng.choice(ordinary)) for _ in range(lens[k])]
        if ovs[k]:
            toks[0] = int(rng.choice(inter))
        runs.append(toks)

    # (channel, start, end, tokens, script position) for every spoken stretch
    items = [(spks[k], starts[k], ends[k], runs[k], (k, 0)) for k in range(n_turns)]
    if params.backchannel_prob > 0:
        for k in range(n_turns):
            if rng.random() >= params.backchannel_prob:
                continue
            blen = int(rng.integers(params.backchannel_len[0], params.backchannel_len[1] + 1))
            lo_s = starts[k] + ovs[k] + 1
            hi_e = ends[k] - (ovs[k + 1] if k + 1 < n_turns else 0) - 1
            if hi_e - lo_s < blen:
                continue
            s = int(rng.integers(lo_s, hi_e - blen + 1))
            toks = [int(rng.choice(inter)) for _ in range(blen)]
            items.append((3 - spks[k], s, s + blen, toks, (k, 1)))

    items.sort(key=lambda it: it[4])
    vocab = params.vocab
    turns = [Turn(c, vocab.text_of(toks)) for c, _, _, toks, _ in items]
    p1, p2 = make_speaker(rng, params.d_spk).vector, make_speaker(rng, params.d_spk).vector
    script = DialogueScript(turns, p1, p2)
    timeline = sorted(items, key=lambda it: (it[1], it[0]))
    schedule = TurnSchedule([(c, s, e) for c, s, e, _, _ in timeline])
    t1, t2 = dt.tracks_from_schedule(schedule, [toks for *_, toks, _ in timeline], sil=vocab.sil)
    return GeneratedDialogue(script, schedule, (t1, t2), dt.overlap_windows(t1, t2, vocab.sil))


def gen_corpus(params: GrammarParams, n: int, seed: int | None = None, tag: str = "train") -> list[GeneratedDialogue]:
    root = Rng(params.seed if seed is None else seed).child(tag)
    return [gen_dialogue(params, root.child(i)) for i in range(n)]


def gen_feature_corpus(n: int, n_tokens: int, sigma: float = 0.1, seed: int = 0, tag: str = "train",
                       vocab: VocabSpec | None = None) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``(tokens, speaker vector, features)`` triples over uniformly drawn content tokens."""
    vocab = vocab or VocabSpec()
    root = Rng(seed).child("features").child(tag)
    ids = np.asarray(vocab.content_ids)
    out = []
    for i in range(n):
        r = root.child(i)
        toks = ids[r.integers(0, len(ids), size=n_tokens)]
        spk = make_speaker(r.child("speaker"))
        out.append((toks, spk.vector, tokens_to_features(toks, spk, sigma, r.child("noise"))))
    return out


TOY_MEAN = 2.0
TOY_SIGMA = 0.3


def gen_two_gaussians(n: int, seed: int = 0, mean: float = TOY_MEAN, sigma: float = TOY_SIGMA) -> np.ndarray:
    """(n, 2) points from an equal mixture of N((m, m), s^2 I) and N((-m, -m), s^2 I)."""
    r = Rng(seed).child("two-gaussians")
    sign = np.where(r.random(size=n) < 0.5, -1.0, 1.0)
    return sign[:, None] * mean + sigma * r.normal(size=(n, 2))


def mode_coverage(samples: np.ndarray, mean: float = TOY_MEAN, radius: float = 3 * TOY_SIGMA) -> dict:
    """Fraction of samples within ``radius`` of each mode, and the sample mean."""
    x = np.asarray(samples, dtype=np.float64)
    frac = [float(np.mean(np.linalg.norm(x - s * mean, axis=1) < radius)) for s in (1.0, -1.0)]
    return {"mass_pos": frac[0], "mass_neg": frac[1], "mean": x.mean(axis=0).tolist()}


# -- pipeline fixtures ------------------------------------------------------------

PIPELINE_VIOLATIONS = ("snr", "cluster", "similarity", "quality", "scorer_error", "unk")
SPEECH_AMP = 0.5
NOISE_AMP = 2.0 ** -5


class PipelineFixture(NamedTuple):
    records: list  # input manifest
    audio: np.ndarray  # float32 samples of the whole recording
    audio_name: str
    gold_utts: list
    gold_reports: list
    chunk_seconds: float


def _snr_db(speech_amp: float, noise_amp: float) -> float:
    return 10.0 * np.log10(speech_amp ** 2 / noise_amp ** 2)


def gen_pipeline_fixture(seed: int, violations: tuple = (), n_chunks: int = 3, chunk_seconds: int = 30,
                         sample_rate: int = 100, rec_id: str = "fx") -> PipelineFixture:
    """Pipeline input for one recording plus the output a correct pipeline
    must produce, worked out while laying the words down.

    Times are generated in whole centiseconds. Overlaps are shorter than the
    words they join but longer than half of each, so both words are flagged
    and each keeps its own speaker. Planted violations:

    * ``snr``: chunk 1 has noise as loud as speech (0 dB)
    * ``cluster``: first utterance of chunk 0 scores 0.3 coherence
    * ``similarity`` / ``quality``: second utterance of chunk 2 fails
    * ``scorer_error``: the quality scorer fails on the second utterance of chunk 0
    * ``unk``: a word in chunk 0 outside every diarization segment
    """
    bad = set(violations) - set(PIPELINE_VIOLATIONS)
    if bad:
        raise ValueError(f"unknown violations {sorted(bad)}")
    if n_chunks < 3 and set(violations) - {"cluster", "scorer_error", "unk"}:
        raise ValueError("this violation set needs three chunks")
    rng = Rng(seed).child("pipeline-fixture")
    cs = lambda c: c / 100  # noqa: E731  centiseconds to seconds
    dur_cs = n_chunks * chunk_seconds * 100 - 500
    records: list[dict] = [{"kind": "recording", "id": rec_id, "duration": cs(dur_cs),
                            "audio": f"{rec_id}.dlsp", "sample_rate": sample_rate}]
    gold_utts: list[dict] = []
    gold_reports: list[dict] = []
    n_samples = dur_cs * sample_rate // 100
    speech_mask = np.zeros(n_samples, dtype=bool)
    noise_amp = np.full(n_samples, NOISE_AMP)

    for k in range(n_chunks):
        r = rng.child(k)
        dialogue = f"{rec_id}-{k}"
        base = k * chunk_seconds * 100 + 100
        spk = [f"spk{int(r.integers(0, 2))}"]
        n_utts = int(r.integers(3, 6))
        utts = []  # dicts with spk, words [(text, s, e)], closed, overlap flags
        t = base
        unk_word = None
        for j in range(n_utts):
            if j:
                same = r.random() < 0.25
                spk.append(spk[-1] if same else ("spk1" if spk[-1] == "spk0" else "spk0"))
            n_w = int(r.integers(2, 6))
            durs = [int(r.integers(40, 61)) for _ in range(n_w)]
            if j:
                prev = utts[-1]
                d_last = prev["words"][-1][2] - prev["words"][-1][1]
                lo, hi = max(d_last, durs[0]) // 2 + 1, int(0.8 * min(d_last, durs[0]))
                if spk[j] != spk[j - 1] and r.random() < 0.35 and lo <= hi:
                    t = prev["words"][-1][2] - int(r.integers(lo, hi + 1))
                    prev["ov_next"] = True
                else:
                    gap = int(r.integers(20, 51))
                    if "unk" in violations and k == 0 and unk_word is None:
                        unk_word = ("unk0", prev["words"][-1][2] + 20, prev["words"][-1][2] + 60)
                        gap = 80
                    t = prev["words"][-1][2] + gap
            words = []
            for i, d in enumerate(durs):
                words.append((f"w{k}_{j}_{i}", t, t + d))
                t += d + int(r.integers(5, 11))
            utts.append({"spk": spk[j], "words": words, "ov_next": False})
        for j, u in enumerate(utts):
            nxt = utts[j + 1] if j + 1 < n_utts else None
            u["closed"] = bool(nxt is not None and nxt["spk"] == u["spk"]) or r.random() < 0.6
            u["flags"] = [False] * len(u["words"])
        osd = []
        for j, u in enumerate(utts):
            if u["ov_next"]:
                nxt = utts[j + 1]
                s, e = nxt["words"][0][1], u["words"][-1][2]
                osd.append((s, e))
                u["flags"][-1] = True
                nxt["flags"][0] = True
        # detector output: each overlap reported as two fragments that merge
        for s, e in osd:
            m = (s + e) // 2
            records.append({"kind": "osd", "chunk": k, "start": cs(s), "end": cs(m + 2)})
            records.append({"kind": "osd", "chunk": k, "start": cs(m), "end": cs(e)})

        all_words = sorted([(w, u["spk"]) for u in utts for w in u["words"]] +
                           ([(unk_word, None)] if unk_word else []), key=lambda x: x[0][1])
        index = {w[0]: i for i, (w, _) in enumerate(all_words)}
        for w, _ in all_words:
            records.append({"kind": "word", "chunk": k, "text": w[0], "start": cs(w[1]), "end": cs(w[2])})
        spans = []
        for u in utts:
            s, e = u["words"][0][1], u["words"][-1][2]
            u["span"] = (s, e)
            records.append({"kind": "diar", "chunk": k, "spk": u["spk"], "start": cs(s), "end": cs(e)})
            if u["closed"]:
                records.append({"kind": "punct", "chunk": k, "word_index": index[u["words"][-1][0]]})
            spans.append([s, e])
        speech = []
        for s, e in sorted(spans):
            if speech and s <= speech[-1][1]:
                speech[-1][1] = max(speech[-1][1], e)
            else:
                speech.append([s, e])
        for s, e in speech:
            records.append({"kind": "speech", "chunk": k, "start": cs(s), "end": cs(e)})
            speech_mask[s * sample_rate // 100:e * sample_rate // 100] = True
        lo_s = k * chunk_seconds * sample_rate
        hi_s = min((k + 1) * chunk_seconds * sample_rate, n_samples)
        snr = 0.0 if ("snr" in violations and k == 1) else _snr_db(SPEECH_AMP, NOISE_AMP)
        if "snr" in violations and k == 1:
            noise_amp[lo_s:hi_s] = SPEECH_AMP

        scores = [{"snr_db": snr, "cluster_coherence": 1.0, "spk_similarity": 1.0, "quality": 4.0}
                  for _ in utts]

        def plant(j, name, value):
            if j < len(utts):
                s, e = utts[j]["span"]
                records.append({"kind": "score", "chunk": k, "name": name, "start": cs(s), "end": cs(e),
                                "value": value})
                scores[j][name] = value

        if k == 0 and "cluster" in violations:
            plant(0, "cluster_coherence", 0.3)
        if k == 0 and "scorer_error" in violations:
            plant(1, "quality", None)
        if k == 2 and "similarity" in violations:
            plant(1, "spk_similarity", 0.2)
        if k == 2 and "quality" in violations:
            plant(1, "quality", 2.0)

        if unk_word:
            gold_reports.append({"kind": "warning", "reason": "unk_speaker", "word": unk_word[0],
                                 "dialogue": dialogue, "start": cs(unk_word[1]), "end": cs(unk_word[2])})
        kept = []
        for j, u in enumerate(utts):
            sc = scores[j]
            reasons = []
            if sc["snr_db"] < 10.0:
                reasons.append("snr")
            if sc["cluster_coherence"] < 0.7:
                reasons.append("cluster")
            if sc["spk_similarity"] < 0.7:
                reasons.append("similarity")
            if sc["quality"] is None:
                reasons.append("scorer_error")
            elif sc["quality"] < 3.0:
                reasons.append("quality")
            s, e = u["span"]
            rsc = {key: (None if v is None else round(float(v), 6)) for key, v in sc.items()}
            gold_reports.append({"kind": "filter", "dialogue": dialogue, "spk": u["spk"], "start": cs(s),
                                 "end": cs(e), "scores": rsc, "keep": not reasons, "reasons": reasons})
            if not reasons:
                kept.append((u, rsc))
        channel: dict[str, int] = {}
        for u, rsc in kept:
            channel.setdefault(u["spk"], len(channel) + 1)
            s, e = u["span"]
            ov = [[cs(max(s, a)), cs(min(e, b))] for a, b in osd if min(e, b) > max(s, a)]
            gold_utts.append({
                "kind": "utt", "dialogue": dialogue, "channel": channel[u["spk"]], "spk": u["spk"],
                "start": cs(s), "end": cs(e), "closed": u["closed"],
                "words": [{"text": w[0], "start": cs(w[1]), "end": cs(w[2]), "overlap": f}
                          for w, f in zip(u["words"], u["flags"])],
                "overlap_spans": ov, "filters": rsc,
            })

    sign = np.where(np.arange(n_samples) % 2 == 0, 1.0, -1.0)
    audio = (sign * np.where(speech_mask, SPEECH_AMP, noise_amp)).astype(np.float32)
    return PipelineFixture(records, audio, f"{rec_id}.dlsp", gold_utts, gold_reports, float(chunk_seconds))


def write_pipeline_fixture(fx: PipelineFixture, directory) -> dict:
    """Write input manifest, audio and gold files; returns their paths."""
    from pathlib import Path

    from .nn.checkpoint import save_tensors
    from .pipeline import emit_manifest

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"input": d / "input.jsonl", "audio": d / fx.audio_name,
             "gold_utts": d / "gold_utts.jsonl", "gold_reports": d / "gold_reports.jsonl"}
    emit_manifest(fx.records, paths["input"])
    save_tensors(paths["audio"], {"samples": fx.audio})
    emit_manifest(fx.gold_utts, paths["gold_utts"])
    emit_manifest(fx.gold_reports, paths["gold_reports"])
    return paths
