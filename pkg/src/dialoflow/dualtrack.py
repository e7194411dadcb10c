"""Dual-track dialogue data model.

Text carries ``[spkchange]`` between turns. Each speaker owns one semantic
token track; both tracks advance one token per step and the inactive speaker
holds ``<SIL>``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS = 0, 1, 2
SIL = 3  # semantic vocabulary
SPKCHANGE = 3  # text vocabulary
FIRST_CONTENT = 4


@dataclass(frozen=True)
class VocabSpec:
    v_txt: int = 32
    v_sem: int = 32
    pad: int = PAD
    bos: int = BOS
    eos: int = EOS
    sil: int = SIL
    spkchange: int = SPKCHANGE

    def __post_init__(self):
        sem = (self.pad, self.bos, self.eos, self.sil)
        txt = (self.pad, self.bos, self.eos, self.spkchange)
        if len(set(sem)) != 4 or len(set(txt)) != 4:
            raise ValueError("reserved ids must be distinct")
        if max(sem) >= self.v_sem or max(txt) >= self.v_txt:
            raise ValueError("reserved ids must fit in the vocabularies")
        if self.v_txt < self.v_sem:
            raise ValueError("toy tokenizer maps semantic ids onto text ids, so v_txt >= v_sem")

    @property
    def sem_reserved(self) -> frozenset:
        return frozenset((self.pad, self.bos, self.eos, self.sil))

    @property
    def txt_reserved(self) -> frozenset:
        return frozenset((self.pad, self.bos, self.eos, self.spkchange))

    @property
    def content_ids(self) -> range:
        return range(FIRST_CONTENT, self.v_sem)

    def text_of(self, sem_tokens: Iterable[int]) -> list[int]:
        """Toy injective tokenizer: a content token keeps its id in the text vocabulary."""
        out = []
        for t in sem_tokens:
            t = int(t)
            if t in self.sem_reserved or not 0 <= t < self.v_sem:
                raise ValueError(f"{t} is not a content token")
            out.append(t)
        return out


@dataclass(frozen=True)
class Turn:
    spk: int
    text: tuple

    def __post_init__(self):
        if self.spk not in (1, 2):
            raise ValueError("speaker must be 1 or 2")
        object.__setattr__(self, "text", tuple(int(t) for t in self.text))


@dataclass
class DialogueScript:
    turns: list
    prompt1: np.ndarray
    prompt2: np.ndarray

    def __post_init__(self):
        self.turns = [t if isinstance(t, Turn) else Turn(*t) for t in self.turns]
        if not self.turns:
            raise ValueError("a dialogue script needs at least one turn")
        self.prompt1 = np.asarray(self.prompt1, dtype=np.float64)
        self.prompt2 = np.asarray(self.prompt2, dtype=np.float64)
        if self.prompt1.shape != self.prompt2.shape or self.prompt1.ndim != 1:
            raise ValueError("speaker prompts must be vectors of equal size")
        if not (np.isfinite(self.prompt1).all() and np.isfinite(self.prompt2).all()):
            raise ValueError("speaker prompts must be finite")

    @property
    def d_spk(self) -> int:
        return self.prompt1.shape[0]

    def prompt(self, channel: int) -> np.ndarray:
        return self.prompt1 if channel == 1 else self.prompt2


@dataclass
class TrackTokens:
    tokens: np.ndarray
    channel: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.channel not in (1, 2):
            raise ValueError("channel must be 1 or 2")

    def __len__(self) -> int:
        return len(self.tokens)

    def active(self, sil: int = SIL) -> np.ndarray:
        return self.tokens != sil


@dataclass
class TurnSchedule:
    """Activity intervals ``(channel, start, end)`` in token steps, half open."""
    intervals: list = field(default_factory=list)
    n: int | None = None

    def __post_init__(self):
        self.intervals = [(int(c), int(s), int(e)) for c, s, e in self.intervals]
        for c, s, e in self.intervals:
            if c not in (1, 2):
                raise ValueError("channel must be 1 or 2")
            if not 0 <= s < e:
                raise ValueError(f"bad interval [{s}, {e})")
        if self.n is not None and self.intervals and self.length > self.n:
            raise ValueError("interval ends past the schedule length")
        for c in (1, 2):
            spans = sorted((s, e) for ch, s, e in self.intervals if ch == c)
            for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
                if s1 < e0:
                    raise ValueError(f"overlapping intervals on channel {c}")

    @property
    def length(self) -> int:
        if self.n is not None:
            return self.n
        return max((e for _, _, e in self.intervals), default=0)


def encode_script(turns: Sequence, vocab: VocabSpec) -> list[int]:
    turns = [t if isinstance(t, Turn) else Turn(*t) for t in turns]
    if not turns:
        raise ValueError("empty script")
    out = [vocab.bos]
    for k, turn in enumerate(turns):
        if not turn.text:
            raise ValueError(f"turn {k} has empty text")
        for t in turn.text:
            if t in vocab.txt_reserved or not 0 <= t < vocab.v_txt:
                raise ValueError(f"text id {t} is reserved or out of range")
        if k:
            out.append(vocab.spkchange)
        out.extend(turn.text)
    out.append(vocab.eos)
    return out


def tracks_from_schedule(schedule: TurnSchedule, runs: Sequence[Sequence[int]],
                         sil: int = SIL) -> tuple[TrackTokens, TrackTokens]:
    if len(runs) != len(schedule.intervals):
        raise ValueError("need one token run per interval")
    n = schedule.length
    tracks = {1: np.full(n, sil, dtype=np.int64), 2: np.full(n, sil, dtype=np.int64)}
    for (c, s, e), run in zip(schedule.intervals, runs):
        if len(run) != e - s:
            raise ValueError(f"run of length {len(run)} does not fill interval [{s}, {e})")
        tracks[c][s:e] = run
    return TrackTokens(tracks[1], 1), TrackTokens(tracks[2], 2)


def strip_silence(track: TrackTokens, sil: int = SIL) -> list[tuple[int, list[int]]]:
    """Maximal non-silent runs with their start offsets."""
    runs: list[tuple[int, list[int]]] = []
    start = None
    toks = track.tokens
    for i, t in enumerate(toks):
        if t != sil and start is None:
            start = i
        elif t == sil and start is not None:
            runs.append((start, toks[start:i].tolist()))
            start = None
    if start is not None:
        runs.append((start, toks[start:].tolist()))
    return runs


def schedule_from_tracks(track1: TrackTokens, track2: TrackTokens, sil: int = SIL) -> TurnSchedule:
    if len(track1) != len(track2):
        raise ValueError("tracks differ in length")
    intervals = []
    for tr in (track1, track2):
        intervals += [(tr.channel, s, s + len(run)) for s, run in strip_silence(tr, sil)]
    return TurnSchedule(sorted(intervals, key=lambda x: (x[1], x[0])), n=len(track1))


def overlap_windows(track1: TrackTokens, track2: TrackTokens, sil: int = SIL) -> list[tuple[int, int]]:
    """Maximal step ranges where both channels are non-silent."""
    if len(track1) != len(track2):
        raise ValueError("tracks differ in length")
    both = track1.active(sil) & track2.active(sil)
    out = []
    i, n = 0, len(both)
    while i < n:
        if both[i]:
            j = i
            while j < n and both[j]:
                j += 1
            out.append((i, j))
            i = j
        else:
            i += 1
    return out


# -- JSONL --------------------------------------------------------------------

def dialogue_to_dict(script: DialogueScript, track1: TrackTokens | None = None,
                     track2: TrackTokens | None = None) -> dict:
    rec = {
        "turns": [{"spk": t.spk, "text": list(t.text)} for t in script.turns],
        "prompt1": [float(x) for x in script.prompt1],
        "prompt2": [float(x) for x in script.prompt2],
    }
    if track1 is not None and track2 is not None:
        if len(track1) != len(track2):
            raise ValueError("tracks differ in length")
        rec["track1"] = track1.tokens.tolist()
        rec["track2"] = track2.tokens.tolist()
    return rec


def dialogue_from_dict(rec: dict) -> tuple[DialogueScript, TrackTokens | None, TrackTokens | None]:
    script = DialogueScript([Turn(t["spk"], t["text"]) for t in rec["turns"]], rec["prompt1"], rec["prompt2"])
    if "track1" in rec:
        t1, t2 = TrackTokens(rec["track1"], 1), TrackTokens(rec["track2"], 2)
        if len(t1) != len(t2):
            raise ValueError("tracks differ in length")
        return script, t1, t2
    return script, None, None


def write_jsonl(path, records: Iterable[dict]) -> None:
    from .nn.checkpoint import atomic_write_bytes
    text = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_jsonl(path) -> list[dict]:
    with open(Path(path), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
