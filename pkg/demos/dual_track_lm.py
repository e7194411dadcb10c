"""
Two speakers, one token each per step
=====================================

The dialogue LM reads the whole script, then writes both channels in
lockstep. Silence is just another token, so turn-taking and overlap fall out
of the predictions instead of being scheduled by hand.
"""
import argparse

from dialoflow import checks
from dialoflow import dialm as D
from dialoflow.nn.rng import Rng
from dialoflow.synthgen import GrammarParams, gen_corpus

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--dialogues", type=int, default=200)
args = ap.parse_args()

gp = GrammarParams()
train = [(g.script,) + tuple(g.tracks) for g in gen_corpus(gp, args.dialogues, seed=1)]
held = [(g.script,) + tuple(g.tracks) for g in gen_corpus(gp, 10, seed=1, tag="heldout")]

# a gold pair: 3 is silence, everything >= 4 is speech
script, t1, t2 = held[0]
print("gold ch1:", " ".join(f"{t:2d}" for t in t1.tokens))
print("gold ch2:", " ".join(f"{t:2d}" for t in t2.tokens))

# a few hundred steps already learn who talks when; the full 2000 do better
cfg = D.DialmConfig(layers=2, d=48, heads=4)
res = D.train_dialm(cfg, train, D.TrainSettings(steps=args.steps, log_every=100),
                    on_event=lambda e: print(f"step {e['step']:4d}  loss {e['loss']:.3f}"))

d1, d2 = D.decode_dialogue(res.model, script, len(t1) + 10, Rng(0))
print("\ndecoded ch1:", " ".join(f"{t:2d}" for t in d1.tokens))
print("decoded ch2:", " ".join(f"{t:2d}" for t in d2.tokens))

m = checks.dialm_agreement(res.model, held)
print(f"\nsingle-speaker steps outside gold overlaps: {m['single_rate']:.2f}")
print(f"gold overlaps with simultaneous speech: {m['overlap_hit_rate']}")
