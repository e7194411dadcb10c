"""Acceptance criteria A1-A9.

Each test records a one-line verdict in ``RESULTS``; ``conftest.py`` prints
them in the terminal summary. The training criteria (A5-A7) take several
minutes each on one CPU core. Run just this file with::

    pytest tests/test_acceptance.py -v
"""
import math
import time

import numpy as np
import pytest

from dialoflow import cfm as C
from dialoflow import checks, cli
from dialoflow import dialm as D
from dialoflow import dualtrack as dt
from dialoflow import pipeline as P
from dialoflow.nn.functional import track_attention
from dialoflow.nn.rng import Rng
from dialoflow.pipeline import DiarSeg, OverlapInterval, WordRec
from dialoflow.synthgen import (PIPELINE_VIOLATIONS, GrammarParams, SpeakerProfile, gen_corpus, gen_feature_corpus,
                                gen_pipeline_fixture, gen_two_gaussians, load_codebook, mode_coverage,
                                tokens_to_features, write_pipeline_fixture)

RESULTS: dict[str, tuple[bool, str]] = {}

# Frozen from the oracle run of the default desk CFM on the default held-out
# items (measured mean |chunked - full| = 0.0056); about 3.5x headroom.
DRIFT_MAX = 0.02


def record(crit: str, ok: bool, detail: str) -> None:
    RESULTS[crit] = (bool(ok), detail)
    print(f"{crit}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- fast criteria -----------------------------------------------------------------

def test_a1_gradient_correctness():
    t = time.monotonic()
    gd, gc = checks.grad_check_dialm(max_checks=None), checks.grad_check_cfm(max_checks=None)
    dt_ = time.monotonic() - t
    ok = gd["max_rel_err"] < 1e-4 and gc["max_rel_err"] < 1e-4 and dt_ < 120
    record("A1", ok, f"dialm {gd['max_rel_err']:.2e}, cfm {gc['max_rel_err']:.2e}, {dt_:.1f}s")
    assert ok


def test_a2_mask_oracle():
    res = checks.mask_oracle(cases=200)
    record("A2", res["ok"], f"{res['cases']} cases, {res['mismatches']} mismatches")
    assert res["ok"]


def test_a3_receptive_field_law():
    law = checks.receptive_field_law(cases=100)
    loc = checks.perturbation_locality(cases=50)
    ok = law["ok"] and loc["ok"]
    record("A3", ok, f"law {law['mismatches']}/{law['cases']} mismatches, locality leaks {loc['leaks']}")
    assert ok


def test_a4_ode():
    res = checks.ode_convergence()
    record("A4", res["ok"], "ratios " + ", ".join(f"{q:.3f}" for q in res["ratios"])
           + f"; linear path err {res['linear_path_err']:.1e}")
    assert res["ok"]


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
    return min((k for k in tot if tot[k] == best), key=lambda k: (first[k], k))


def test_a8_pipeline_gold_fixtures(tmp_path):
    identical = 0
    runs = 0
    codes_ok = True
    for seed in range(5):
        for viol in ((), PIPELINE_VIOLATIONS):
            d = tmp_path / f"{seed}-{len(viol)}"
            fx = gen_pipeline_fixture(seed, viol)
            paths = write_pipeline_fixture(fx, d)
            utts, reps = P.run_pipeline(P.read_manifest(paths["input"]),
                                        P.PipelineConfig(chunk_seconds=fx.chunk_seconds), d)
            P.emit_manifest(utts, d / "u.jsonl")
            P.emit_manifest(reps, d / "r.jsonl")
            runs += 1
            identical += ((d / "u.jsonl").read_bytes() == paths["gold_utts"].read_bytes()
                          and (d / "r.jsonl").read_bytes() == paths["gold_reports"].read_bytes())
            got = {c for r in reps if r["kind"] == "filter" for c in r["reasons"]}
            want = {"snr", "cluster", "similarity", "quality", "scorer_error"} if viol else set()
            codes_ok &= got == want and any(r["kind"] == "warning" for r in reps) == bool(viol)

    r = Rng(0).child("a8")
    prop_fail = 0
    for i in range(1000):
        ri = r.child(i)
        ivs = [OverlapInterval(s / 4, (s + d) / 4)
               for s, d in zip(ri.integers(0, 60, size=int(ri.integers(0, 12))), ri.integers(1, 12, size=12))]
        tol = float(ri.choice([0.0, 0.25, 1.0]))
        m = P.merge_overlaps(ivs, tol)
        prop_fail += P.merge_overlaps(m, tol) != m
        diar = [DiarSeg(str(ri.choice(list("ABC"))), s / 4, (s + d) / 4)
                for s, d in zip(ri.integers(0, 40, size=int(ri.integers(0, 8))), ri.integers(1, 15, size=8))]
        words = [WordRec("w", s / 4, (s + d) / 4) for s, d in zip(ri.integers(0, 50, size=6), ri.integers(1, 8, size=6))]
        labels = [lab for _, lab in P.assign_words(words, diar)]
        perm = [diar[int(k)] for k in ri.permutation(len(diar))]
        prop_fail += labels != [lab for _, lab in P.assign_words(words, perm)]
        prop_fail += labels != [_brute_assign(w, diar) for w in words]
    ok = identical == runs and codes_ok and prop_fail == 0
    record("A8", ok, f"{identical}/{runs} fixtures byte-identical, reason codes {'exact' if codes_ok else 'WRONG'}, "
           f"{prop_fail} property failures in 1000 cases")
    assert ok


def test_a9_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("DIALOFLOW_SEED", raising=False)
    small = ["--set", "data.n_train=16", "--set", "data.n_heldout=2", "--set", "data.cfm_items=16",
             "--set", "data.cfm_heldout=2", "--set", "dialm.layers=1", "--set", "dialm.d=16",
             "--set", "dialm.heads=2", "--set", "cfm.layers=2", "--set", "cfm.d=16", "--set", "cfm.heads=2",
             "--set", "cfm.layer_masks=[[1,0],[0,1]]"]
    cmds = [["gen-data"], ["train-dialm", "--steps", "20"], ["train-cfm", "--steps", "20"],
            ["synth", "--script", "data/dialogues_heldout.jsonl"],
            ["eval", "--suite", "dialm"], ["eval", "--suite", "cfm"]]
    trees = []
    for name in ("a", "b"):
        wd = tmp_path / name
        wd.mkdir()
        for c in cmds:
            assert cli.main(c + ["--workdir", str(wd)] + small) == 0, c
        assert cli.main(["pipeline", "--workdir", str(wd), "--config", "data/pipeline/config.json",
                         "--input", "data/pipeline/input.jsonl"]) == 0
        trees.append({p.relative_to(wd).as_posix(): p.read_bytes() for p in sorted(wd.rglob("*")) if p.is_file()})
    a, b = trees
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not diff and any(k.startswith("logs/") for k in a)
    record("A9", ok, f"{len(a)} files compared across two runs, {len(diff)} differ")
    assert ok, diff


# -- training criteria --------------------------------------------------------------

@pytest.fixture(scope="module")
def dialm_run():
    gp = GrammarParams()
    train = [(g.script,) + tuple(g.tracks) for g in gen_corpus(gp, 500, seed=1)]
    held = [(g.script,) + tuple(g.tracks) for g in gen_corpus(gp, 50, seed=1, tag="heldout")]
    t = time.monotonic()
    res = D.train_dialm(D.DialmConfig(), train, D.TrainSettings(steps=2000))
    agree = checks.dialm_agreement(res.model, held, seed=0)
    return res, held, agree, time.monotonic() - t


@pytest.fixture(scope="module")
def cfm_run():
    res = C.train_cfm(C.CfmConfig(), gen_feature_corpus(400, 16, 0.1, 0, "train"), C.CfmTrainSettings(steps=2000))
    return res


@pytest.mark.slow
def test_a5_dialm_training(dialm_run):
    res, _, agree, secs = dialm_run
    first, last = res.losses[0], float(np.mean(res.losses[-20:]))
    ok = (last < 0.2 * first and agree["single_rate"] >= 0.9 and agree["overlap_hit_rate"] >= 0.5
          and secs < 30 * 60)
    record("A5", ok, f"loss {first:.3f} -> {last:.2e}; single-speaker {agree['single_rate']:.3f} "
           f"(gold channel match {agree['gold_match_rate']:.3f}); overlap hits {agree['overlap_hit_rate']:.3f} "
           f"of {agree['overlap_windows']}; {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_a6_cfm_training(cfm_run):
    cfg = C.CfmConfig(layers=3, d=64, heads=4, feat_dim=2, block=1, layer_masks=((0, 0),) * 3, conditional=False)
    pts = gen_two_gaussians(4000, seed=3)
    toy = C.train_cfm(cfg, [(None, None, p[None, :]) for p in pts],
                      C.CfmTrainSettings(steps=3000, batch_size=128, crop_blocks=1, lr=2e-3)).model
    x0 = Rng(9).normal(size=(1000, 1, 2))
    cond = C.CfmCondition(None, None, np.zeros((1000, 1, 2)), np.ones((1000, 1), dtype=bool))
    cov = mode_coverage(C.ode_sample(toy, x0, cond, 32)[:, 0])
    toy_ok = min(cov["mass_pos"], cov["mass_neg"]) >= 0.45 and float(np.linalg.norm(cov["mean"])) <= 0.15
    rec = checks.cfm_reconstruction(cfm_run.model, checks.default_feature_heldout())
    ok = toy_ok and rec["ratio"] < 0.2
    record("A6", ok, f"toy mode mass {cov['mass_pos']:.3f}/{cov['mass_neg']:.3f}, mean "
           f"({cov['mean'][0]:.3f}, {cov['mean'][1]:.3f}), norm {np.linalg.norm(cov['mean']):.3f}; held-out mse/var {rec['ratio']:.4f}")
    assert ok


@pytest.mark.slow
def test_a7_chunked_decoding(cfm_run):
    model = cfm_run.model
    ex = checks.windowed_exactness()
    plan = C.ChunkPlan(model.config.block, *model.config.receptive_field, n_ode=32)
    rec = checks.cfm_reconstruction(model, checks.default_feature_heldout(), plan)
    window = (plan.p + plan.q + 1) * plan.b
    n_tok = 10 * window // model.config.frame_ratio
    toks = Rng(0).integers(4, model.config.v_sem, size=n_tok)
    with track_attention() as meter:
        out = C.chunk_decode(model, toks, Rng(1).normal(size=model.config.d_spk), plan, rng=Rng(2))
    mem_ok = out.frames.shape[0] == 10 * window and meter.peak_entries <= window ** 2
    boundary_ok = rec["boundary_delta_mean"] <= rec["intra_delta_p95"]
    ok = ex["ok"] and rec["chunk_drift"] < DRIFT_MAX and boundary_ok and mem_ok
    record("A7", ok, f"covered gap {ex['max_gap_covered']:.1e}, short gaps {ex['min_gap_short_back']:.1e}/"
           f"{ex['min_gap_short_fwd']:.1e}; drift {rec['chunk_drift']:.4f} < {DRIFT_MAX}; seam delta mean "
           f"{rec['boundary_delta_mean']:.3f} <= intra p95 {rec['intra_delta_p95']:.3f} (seam p95 "
           f"{rec['boundary_delta_p95']:.3f}, token-change p95 {rec['intra_transition_delta_p95']:.3f}); peak attention "
           f"{meter.peak_entries} <= {window ** 2}")
    assert ok


@pytest.mark.slow
def test_synth_matches_feature_oracle(dialm_run, cfm_run):
    """End to end: decoded tokens rendered by the CFM vs the generator's clean features."""
    lm, am = dialm_run[0].model, cfm_run.model
    proj = load_codebook()["speaker_proj"]
    plan = C.ChunkPlan(am.config.block, 1, 1, 32)
    err = var = 0.0
    for i, (script, _, _) in enumerate(dialm_run[1][:5]):
        (t1, t2), f1, f2 = cli.synthesize(lm, am, script, plan, Rng(0).child("synth").child(i))
        assert f1.shape == f2.shape
        for c, (track, feats) in enumerate(((t1, f1), (t2, f2)), start=1):
            vec = script.prompt(c)
            oracle = np.zeros_like(feats)
            r = am.config.frame_ratio
            for start, run in dt.strip_silence(track):
                oracle[r * start:r * (start + len(run))] = tokens_to_features(run, SpeakerProfile(vec, proj @ vec), 0)
            speech = np.repeat(track.active(), r)
            err += float(((feats - oracle)[speech] ** 2).sum())
            var += float(((oracle[speech] - oracle[speech].mean(axis=0)) ** 2).sum())
            assert not feats[~speech].any()
    assert err / var < 0.2
