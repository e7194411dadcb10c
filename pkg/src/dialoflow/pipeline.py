"""Dual-track dialogue data pipeline.

Recordings are cut into fixed-length chunks. Within a chunk, words are
labelled with the diarization speaker they overlap most, grouped into
utterances at speaker changes and sentence-final punctuation, flagged where
they fall inside detected overlapped speech, filtered, and finally split onto
two channels, one per speaker.

Input manifest record kinds (JSON lines):

* ``recording``: ``{id, duration, audio, sample_rate}``; ``audio`` is a DLSP1
  file with a ``samples`` tensor, relative to the manifest directory.
* ``word``: ``{chunk, text, start, end}``
* ``diar``: ``{chunk, spk, start, end}``
* ``osd``: ``{chunk, start, end}``
* ``speech``: ``{chunk, start, end}`` (voice-activity intervals)
* ``punct``: ``{chunk, word_index}``: sentence ends after that word
* ``score``: ``{chunk, name, start, end, value}``: mock scorer output for the
  utterances whose midpoint lies in ``[start, end)``; ``value: null`` marks a
  scorer failure.

Times are absolute seconds from the start of the recording.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .nn.checkpoint import atomic_write_bytes, load_tensors

UNK = "UNK"
CHUNK_SECONDS = 1200.0

# (reason code, score key, default threshold); applied in this order
STAGES = (
    ("snr", "snr_db", 10.0),
    ("cluster", "cluster_coherence", 0.7),
    ("similarity", "spk_similarity", 0.7),
    ("quality", "quality", 3.0),
)
MOCK_DEFAULTS = {"cluster_coherence": 1.0, "spk_similarity": 1.0, "quality": 4.0}


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class WordRec:
    text: str
    start: float
    end: float
    chunk: int = 0

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise PipelineError(f"bad word interval [{self.start}, {self.end})")

    @property
    def mid(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass(frozen=True)
class DiarSeg:
    spk: str
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise PipelineError(f"bad diarization interval [{self.start}, {self.end})")


@dataclass(frozen=True, order=True)
class OverlapInterval:
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise PipelineError(f"bad overlap interval [{self.start}, {self.end})")


@dataclass(frozen=True)
class UtteranceRec:
    spk: str
    words: tuple
    closed: bool
    overlap: tuple
    chunk: int = 0

    @property
    def start(self) -> float:
        return self.words[0].start

    @property
    def end(self) -> float:
        return self.words[-1].end

    @property
    def mid(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass
class FilterReport:
    utterance: UtteranceRec
    scores: dict
    keep: bool
    reasons: list


@dataclass(frozen=True)
class PipelineConfig:
    chunk_seconds: float = CHUNK_SECONDS
    overlap_tolerance: float = 0.0
    snr_db: float = 10.0
    cluster_coherence: float = 0.7
    spk_similarity: float = 0.7
    quality: float = 3.0
    digits: int = 6

    @property
    def thresholds(self) -> dict:
        return {key: getattr(self, key) for _, key, _ in STAGES}


# -- stages --------------------------------------------------------------------

def segment_chunks(duration: float, chunk: float = CHUNK_SECONDS) -> list[tuple[float, float]]:
    if not duration > 0:
        raise PipelineError("duration must be positive")
    if not chunk > 0:
        raise PipelineError("chunk length must be positive")
    n = math.ceil(duration / chunk)
    return [(k * chunk, min((k + 1) * chunk, duration)) for k in range(n)]


def assign_words(words: Sequence[WordRec], diar: Sequence[DiarSeg]) -> list[tuple[WordRec, str]]:
    """Label each word with the speaker whose segments overlap it the longest.

    Ties go to the speaker with the earlier-starting overlapping segment;
    words touching no segment get ``UNK``.
    """
    segs = sorted(diar, key=lambda s: (s.start, s.end, s.spk))
    out = []
    for w in words:
        total: dict[str, float] = {}
        first: dict[str, float] = {}
        for s in segs:
            if s.start >= w.end:
                break
            ov = min(w.end, s.end) - max(w.start, s.start)
            if ov > 0:
                total[s.spk] = total.get(s.spk, 0.0) + ov
                first.setdefault(s.spk, s.start)
        if not total:
            out.append((w, UNK))
        else:
            out.append((w, min(total, key=lambda k: (-total[k], first[k], k))))
    return out


def merge_overlaps(intervals: Iterable[OverlapInterval], tolerance: float = 0.0) -> list[OverlapInterval]:
    """Sorted, disjoint union; neighbours closer than ``tolerance`` are joined."""
    if tolerance < 0:
        raise PipelineError("tolerance must be non-negative")
    out: list[list[float]] = []
    for iv in sorted(intervals):
        if out and iv.start < out[-1][1] + tolerance:
            out[-1][1] = max(out[-1][1], iv.end)
        else:
            out.append([iv.start, iv.end])
    return [OverlapInterval(s, e) for s, e in out]


def _inside(t: float, merged: Sequence[OverlapInterval]) -> bool:
    return any(iv.start <= t < iv.end for iv in merged)


def build_utterances(labeled: Sequence[tuple[WordRec, str]], punct: Iterable[int],
                     overlaps: Sequence[OverlapInterval], chunk: int = 0) -> tuple[list[UtteranceRec], list[dict]]:
    """Group labelled words into utterances.

    A new utterance starts at every speaker change and after every word whose
    index is in ``punct``. ``UNK`` words are dropped with a warning and also
    end the running utterance.
    """
    punct = set(int(i) for i in punct)
    utts: list[UtteranceRec] = []
    warnings: list[dict] = []
    cur: list[WordRec] = []
    spk = None

    def flush(closed: bool):
        nonlocal cur, spk
        if cur:
            utts.append(UtteranceRec(spk, tuple(cur), closed, tuple(_inside(w.mid, overlaps) for w in cur), chunk))
        cur, spk = [], None

    for i, (w, lab) in enumerate(labeled):
        if lab == UNK:
            flush(False)
            warnings.append({"kind": "warning", "reason": "unk_speaker", "word": w.text,
                             "start": w.start, "end": w.end})
            continue
        if cur and lab != spk:
            flush(False)
        cur.append(w)
        spk = lab
        if i in punct:
            flush(True)
    flush(False)
    return utts, warnings


def snr_estimate(samples, speech: Sequence[tuple[float, float]], sample_rate: float = 1.0,
                 first_index: int = 0) -> float:
    """``10 log10(P_speech / P_nonspeech)`` over mean-square powers; ``inf`` when
    there is no (or silent) non-speech region.

    Sample ``i`` sits at time ``(first_index + i) / sample_rate``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise PipelineError("no samples")
    t = (first_index + np.arange(x.size)) / sample_rate
    is_speech = np.zeros(x.size, dtype=bool)
    for s, e in speech:
        is_speech |= (t >= s) & (t < e)
    if not is_speech.any():
        raise PipelineError("no speech samples in range")
    ps = float(np.mean(x[is_speech] ** 2))
    if is_speech.all():
        return math.inf
    pn = float(np.mean(x[~is_speech] ** 2))
    if pn == 0.0:
        return math.inf if ps > 0 else -math.inf
    if ps == 0.0:
        return -math.inf
    return 10.0 * math.log10(ps / pn)


Scorer = Callable[[UtteranceRec], float]


def filter_segments(utts: Sequence[UtteranceRec], scorers: Mapping[str, Scorer],
                    thresholds: Mapping[str, float] | None = None) -> tuple[list[UtteranceRec], list[FilterReport]]:
    """Run every enabled stage; keep an utterance only if all scores pass.

    ``scorers`` maps score keys (``snr_db`` and friends) to callables. A
    missing key disables that stage. A scorer that raises or returns NaN drops
    the utterance with reason ``scorer_error``.
    """
    th = {key: default for _, key, default in STAGES}
    th.update(thresholds or {})
    kept, reports = [], []
    for u in utts:
        scores: dict = {}
        reasons: list[str] = []
        for code, key, _ in STAGES:
            fn = scorers.get(key)
            if fn is None:
                continue
            try:
                val = float(fn(u))
                if math.isnan(val):
                    raise ValueError("NaN score")
            except Exception:
                scores[key] = None
                if "scorer_error" not in reasons:
                    reasons.append("scorer_error")
                continue
            scores[key] = val
            if val < th[key]:
                reasons.append(code)
        keep = not reasons
        if keep:
            kept.append(u)
        reports.append(FilterReport(u, scores, keep, reasons))
    return kept, reports


def passthrough_separation(utt: UtteranceRec, channel: int) -> UtteranceRec:
    return utt


def split_dual_track(utts: Sequence[UtteranceRec], overlaps: Sequence[OverlapInterval],
                     backend: Callable[[UtteranceRec, int], UtteranceRec] = passthrough_separation,
                     ) -> list[tuple[int, UtteranceRec, list[tuple[float, float]]]]:
    """Assign speakers to channels by order of first appearance.

    Returns ``(channel, utterance, overlap spans)`` sorted by time; overlapped
    stretches therefore show up on both channels, each with its own speaker.
    """
    ordered = sorted(utts, key=lambda u: (u.start, u.end, u.spk))
    chan: dict[str, int] = {}
    for u in ordered:
        if u.spk not in chan:
            if len(chan) == 2:
                raise PipelineError("dual-track requires two speakers")
            chan[u.spk] = len(chan) + 1
    out = []
    for u in ordered:
        spans = [(max(u.start, iv.start), min(u.end, iv.end)) for iv in overlaps
                 if min(u.end, iv.end) > max(u.start, iv.start)]
        out.append((chan[u.spk], backend(u, chan[u.spk]), spans))
    return out


# -- manifests -------------------------------------------------------------------

def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=False)


def emit_manifest(records: Iterable[dict], path) -> None:
    data = "".join(dumps_record(r) + "\n" for r in records)
    atomic_write_bytes(path, data.encode("utf-8"))


def read_manifest(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PipelineError(f"line {n}: {exc}") from None
            if not isinstance(rec, dict) or "kind" not in rec:
                raise PipelineError(f"line {n}: record without a kind")
            out.append(rec)
    return out


class MockScorer:
    """Reads precomputed scores from ``score`` records; unscored utterances
    get a passing default."""

    def __init__(self, key: str, records: Sequence[dict], default: float):
        self.key, self.records, self.default = key, list(records), default

    def __call__(self, u: UtteranceRec) -> float:
        vals = [r["value"] for r in self.records
                if r["name"] == self.key and int(r.get("chunk", 0)) == u.chunk and r["start"] <= u.mid < r["end"]]
        if not vals:
            return self.default
        if any(v is None for v in vals):
            raise RuntimeError(f"{self.key} scorer failed")
        return min(float(v) for v in vals)


def _num(rec: dict, key: str) -> float:
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise PipelineError(f"{rec.get('kind')} record needs a finite number in {key!r}")
    return float(v)


_KINDS = {"recording", "word", "diar", "osd", "speech", "punct", "score"}


def run_pipeline(records: Sequence[dict], config: PipelineConfig | None = None, base_dir=".",
                 backend: Callable[[UtteranceRec, int], UtteranceRec] = passthrough_separation,
                 ) -> tuple[list[dict], list[dict]]:
    """Full pipeline over one recording's manifest.

    Returns ``(utterance records, report records)``, both ready for
    :func:`emit_manifest`.
    """
    cfg = config or PipelineConfig()
    by_kind: dict[str, list[dict]] = defaultdict(list)
    for r in records:
        kind = r.get("kind")
        if kind not in _KINDS:
            raise PipelineError(f"unknown record kind {kind!r}")
        by_kind[kind].append(r)
    if len(by_kind["recording"]) > 1:
        raise PipelineError("one recording per manifest")
    rec = by_kind["recording"][0] if by_kind["recording"] else None
    rec_id = str(rec.get("id", "rec")) if rec else "rec"

    audio, sr, spans = None, 1.0, None
    if rec:
        spans = segment_chunks(_num(rec, "duration"), cfg.chunk_seconds)
        if rec.get("audio"):
            arrays, _ = load_tensors(Path(base_dir) / rec["audio"])
            if "samples" not in arrays:
                raise PipelineError("audio file lacks a 'samples' tensor")
            audio = arrays["samples"].reshape(-1)
            sr = _num(rec, "sample_rate")

    def chunk_of(r: dict) -> int:
        c = r.get("chunk", 0)
        if isinstance(c, bool) or not isinstance(c, int) or c < 0:
            raise PipelineError("chunk must be a non-negative integer")
        if spans is not None and c >= len(spans):
            raise PipelineError(f"chunk {c} beyond the recording")
        return c

    words, diar, osd, speech, punct = (defaultdict(list) for _ in range(5))
    for r in by_kind["word"]:
        w = WordRec(str(r["text"]), _num(r, "start"), _num(r, "end"), chunk_of(r))
        if spans is not None and not (spans[w.chunk][0] <= w.start and w.end <= spans[w.chunk][1]):
            raise PipelineError(f"word {w.text!r} lies outside chunk {w.chunk}")
        words[w.chunk].append(w)
    for r in by_kind["diar"]:
        diar[chunk_of(r)].append(DiarSeg(str(r["spk"]), _num(r, "start"), _num(r, "end")))
    for r in by_kind["osd"]:
        osd[chunk_of(r)].append(OverlapInterval(_num(r, "start"), _num(r, "end")))
    for r in by_kind["speech"]:
        speech[chunk_of(r)].append((_num(r, "start"), _num(r, "end")))
    for r in by_kind["punct"]:
        punct[chunk_of(r)].append(int(r["word_index"]))
    scores = by_kind["score"]
    for r in scores:
        chunk_of(r)
        if r.get("name") not in MOCK_DEFAULTS:
            raise PipelineError(f"unknown score name {r.get('name')!r}")

    nd = cfg.digits
    rt = lambda v: round(v, nd)  # noqa: E731
    out_utts: list[dict] = []
    out_reports: list[dict] = []
    for k in sorted(words):
        ws = sorted(words[k], key=lambda w: (w.start, w.end))
        dialogue = f"{rec_id}-{k}"
        merged = merge_overlaps(osd[k], cfg.overlap_tolerance)
        utts, warns = build_utterances(assign_words(ws, diar[k]), punct[k], merged, k)

        scorers: dict[str, Scorer] = {key: MockScorer(key, scores, d) for key, d in MOCK_DEFAULTS.items()}
        if audio is not None and speech[k]:
            lo, hi = spans[k]
            a, b = int(round(lo * sr)), min(int(round(hi * sr)), audio.size)
            snr = snr_estimate(audio[a:b], speech[k], sr, a)
            scorers["snr_db"] = lambda u, v=snr: v
        kept, reports = filter_segments(utts, scorers, cfg.thresholds)

        for wr in warns:
            out_reports.append({**wr, "dialogue": dialogue, "start": rt(wr["start"]), "end": rt(wr["end"])})
        for rep in reports:
            u = rep.utterance
            out_reports.append({"kind": "filter", "dialogue": dialogue, "spk": u.spk, "start": rt(u.start),
                                "end": rt(u.end), "scores": _round_scores(rep.scores, nd),
                                "keep": rep.keep, "reasons": rep.reasons})
        report_of = {(r.utterance.start, r.utterance.spk): r for r in reports}
        for ch, u, ov in split_dual_track(kept, merged, backend):
            out_utts.append({
                "kind": "utt", "dialogue": dialogue, "channel": ch, "spk": u.spk,
                "start": rt(u.start), "end": rt(u.end), "closed": u.closed,
                "words": [{"text": w.text, "start": rt(w.start), "end": rt(w.end), "overlap": f}
                          for w, f in zip(u.words, u.overlap)],
                "overlap_spans": [[rt(s), rt(e)] for s, e in ov],
                "filters": _round_scores(report_of[(u.start, u.spk)].scores, nd),
            })
    return out_utts, out_reports


def _round_scores(scores: dict, nd: int) -> dict:
    out = {}
    for k, v in scores.items():
        if v is None:
            out[k] = None
        elif math.isinf(v):
            out[k] = "inf" if v > 0 else "-inf"
        else:
            out[k] = round(v, nd)
    return out
