"""
From long recordings to clean two-speaker utterances
====================================================

A synthetic fixture stands in for ASR words, diarization and overlap
detection. The pipeline cuts chunks, gives each word to a speaker, closes
utterances on punctuation or speaker change, and drops the ones that fail a
quality gate, saying why.
"""
import collections
import tempfile
from pathlib import Path

from dialoflow import pipeline as P
from dialoflow.synthgen import PIPELINE_VIOLATIONS, gen_pipeline_fixture, write_pipeline_fixture

fx = gen_pipeline_fixture(seed=0, violations=PIPELINE_VIOLATIONS)
with tempfile.TemporaryDirectory() as tmp:
    paths = write_pipeline_fixture(fx, tmp)
    utts, reports = P.run_pipeline(P.read_manifest(paths["input"]),
                                   P.PipelineConfig(chunk_seconds=fx.chunk_seconds), Path(tmp))

print(f"{len(utts)} utterances kept")
for u in utts[:4]:
    words = " ".join(w["text"] for w in u["words"])
    print(f"  ch{u['channel']} [{u['start']:6.2f}, {u['end']:6.2f}]  {words}")

kinds = collections.Counter(r["kind"] for r in reports)
print("\nreport records:", dict(kinds))
for r in reports:
    if r["kind"] == "filter" and not r["keep"]:
        print(f"  dropped {r['dialogue']} at {r['start']:.2f}: {', '.join(r['reasons'])}")
    elif r["kind"] == "warning":
        print(f"  warning: {r['reason']} for word {r['word']!r} at {r['start']:.2f}")

# the constructed gold manifest is what the pipeline must reproduce
print("\nmatches gold:", utts == fx.gold_utts and reports == fx.gold_reports)
