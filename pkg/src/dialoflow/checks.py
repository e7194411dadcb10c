"""Self-checks run by the ``eval`` and ``grad-check`` commands.

Each check returns a JSON-ready dict with a boolean ``ok``.
"""
from __future__ import annotations

import math

import numpy as np

from . import cfm as C
from . import dialm as D
from . import dualtrack as dt
from .blockmask import MaskSpec, block_of, build_mask, compose_reachability, receptive_field
from .nn.gradcheck import grad_check
from .nn.rng import Rng
from .synthgen import GrammarParams, gen_corpus, gen_feature_corpus

GRAD_TOL = 1e-4


def grad_check_dialm(config: D.DialmConfig = D.MICRO, seed: int = 0, max_checks: int | None = 300) -> dict:
    g = gen_corpus(GrammarParams(), 1, seed=seed)[0]
    model = D.init_dialm(config, Rng(seed).child("gc-dialm"))
    batch = D.make_batch([(g.script,) + tuple(g.tracks)], config.vocab)
    err = grad_check(lambda p: D.batch_loss(D.DialmModel(config, p), batch), model.params,
                     max_checks=max_checks, rng=Rng(seed).child("gc-coords"))
    return {"check": "grad_dialm", "max_rel_err": float(err), "ok": bool(err < GRAD_TOL)}


def grad_check_cfm(config: C.CfmConfig = C.MICRO, seed: int = 0, max_checks: int | None = 300) -> dict:
    r = Rng(seed).child("gc-cfm")
    model = C.init_cfm(config, r.child("init"))
    n = 4 * config.block
    toks = r.integers(4, config.v_sem, size=n // config.frame_ratio)
    x1 = r.normal(size=(n, config.feat_dim))
    mask = np.zeros(n, dtype=bool)
    mask[config.block:] = True
    cond = C.CfmCondition(C.upsample(toks, config.frame_ratio), r.normal(size=config.d_spk),
                          np.where(mask[:, None], 0.0, x1), mask)

    def loss(p):
        # fresh identical noise on every call so finite differences see one function
        return C.cfm_loss(C.CfmModel(config, p), x1, cond, Rng(seed).child("gc-noise"))

    err = grad_check(loss, model.params, max_checks=max_checks, rng=Rng(seed).child("gc-coords"))
    return {"check": "grad_cfm", "max_rel_err": float(err), "ok": bool(err < GRAD_TOL)}


def mask_oracle(cases: int = 200, seed: int = 0) -> dict:
    r = Rng(seed).child("mask-oracle")
    bad = 0
    for i in range(cases):
        ri = r.child(i)
        n, b = int(ri.integers(1, 40)), int(ri.integers(1, 9))
        tb, tf = int(ri.integers(0, 4)), int(ri.integers(0, 4))
        m = build_mask(n, MaskSpec(b, tb, tf)).matrix
        ref = np.array([[-tb <= block_of(j, b) - block_of(i2, b) <= tf for j in range(n)] for i2 in range(n)],
                       dtype=bool).reshape(n, n)
        bad += not np.array_equal(m, ref)
    return {"check": "mask_oracle", "cases": cases, "mismatches": bad, "ok": bad == 0}


def receptive_field_law(cases: int = 100, seed: int = 0) -> dict:
    r = Rng(seed).child("rf-law")
    bad = 0
    for i in range(cases):
        ri = r.child(i)
        b, n = int(ri.integers(1, 6)), int(ri.integers(1, 40))
        specs = [MaskSpec(b, int(ri.integers(0, 3)), int(ri.integers(0, 3))) for _ in range(int(ri.integers(1, 5)))]
        B, F = receptive_field(specs)
        reach = compose_reachability([build_mask(n, s) for s in specs])
        bad += not np.array_equal(reach.matrix, build_mask(n, MaskSpec(b, B, F)).matrix)
    return {"check": "receptive_field_law", "cases": cases, "mismatches": bad, "ok": bad == 0}


def ode_convergence() -> dict:
    errs = []
    for n in (25, 50, 100, 200):
        x = C.ode_sample(lambda x, t, c: -x, np.array([1.0]), None, n)
        errs.append(abs(float(x[0]) - math.exp(-1.0)))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    x0 = np.random.default_rng(0).normal(size=(5, 3))
    x1 = np.random.default_rng(1).normal(size=(5, 3))
    exact = max(float(np.abs(C.ode_sample(lambda x, t, c: x1 - x0, x0, None, n) - x1).max()) for n in (1, 3, 32))
    ok = all(abs(q - 2.0) <= 0.4 for q in ratios) and exact < 1e-12
    return {"check": "ode_convergence", "errors": errs, "ratios": ratios, "linear_path_err": exact, "ok": ok}


def windowed_exactness(config: C.CfmConfig | None = None, n_blocks: int = 10, seed: int = 0) -> dict:
    """Full vs windowed single forward on a random network, for every chunk."""
    cfg = config or C.CfmConfig(seed=seed)
    model = C.init_cfm(cfg, Rng(seed).child("window-init"))
    r = Rng(seed).child("window-data")
    b, n = cfg.block, n_blocks * cfg.block
    toks = r.integers(4, cfg.v_sem, size=n // cfg.frame_ratio)
    x = r.normal(size=(n, cfg.feat_dim))
    feats = r.normal(size=(n, cfg.feat_dim))
    mask = np.zeros(n, dtype=bool)
    mask[n // 2:] = True
    feats[mask] = 0.0
    cond = C.CfmCondition(C.upsample(toks, cfg.frame_ratio), r.normal(size=cfg.d_spk), feats, mask)
    full = model(x, 0.37, cond)
    B, F = cfg.receptive_field

    def gap(k, p, q):
        lo, hi = max(0, k - p) * b, min(n_blocks, k + q + 1) * b
        w = model(x[lo:hi], 0.37, cond.window(lo, hi))
        return float(np.abs(w[k * b - lo:(k + 1) * b - lo] - full[k * b:(k + 1) * b]).max())

    covered = max(gap(k, B, F) for k in range(n_blocks))
    inner = range(max(B, 1), n_blocks - max(F, 1))
    short_b = min(gap(k, B - 1, F) for k in inner) if B else None
    short_f = min(gap(k, B, F - 1) for k in inner) if F else None
    ok = covered <= 1e-9 and all(s is None or s > 1e-9 for s in (short_b, short_f))
    return {"check": "windowed_exactness", "max_gap_covered": covered, "min_gap_short_back": short_b,
            "min_gap_short_fwd": short_f, "ok": ok}


def perturbation_locality(cases: int = 20, seed: int = 0) -> dict:
    """Perturb one input block of a random masked stack; outside the receptive
    field the output must stay bitwise identical, inside it must move."""
    r = Rng(seed).child("perturb")
    leaks = silent = 0
    for i in range(cases):
        ri = r.child(i)
        b, nb = int(ri.integers(1, 4)), int(ri.integers(3, 9))
        masks = tuple((int(ri.integers(0, 3)), int(ri.integers(0, 3))) for _ in range(int(ri.integers(1, 4))))
        cfg = C.CfmConfig(layers=len(masks), d=8, heads=2, feat_dim=3, block=b, layer_masks=masks, conditional=False)
        model = C.init_cfm(cfg, ri.child("init"))
        n = nb * b
        x = ri.normal(size=(n, 3))
        cond = C.unconditional(n, 3)
        base = model(x, 0.5, cond)
        j = int(ri.integers(0, nb))
        xp = x.copy()
        xp[j * b:(j + 1) * b] += ri.normal(size=(b, 3))
        moved = model(xp, 0.5, cond) != base
        B, F = cfg.receptive_field
        for blk in range(nb):
            changed = bool(moved[blk * b:(blk + 1) * b].any())
            inside = blk - B <= j <= blk + F
            leaks += changed and not inside
            silent += inside and not changed
    return {"check": "perturbation_locality", "cases": cases, "leaks": leaks, "unchanged_inside": silent,
            "ok": leaks == 0}


def invariant_suite(seed: int = 0) -> list[dict]:
    return [mask_oracle(seed=seed), receptive_field_law(seed=seed), perturbation_locality(seed=seed),
            ode_convergence(), windowed_exactness(seed=seed)]


def dialm_agreement(model: D.DialmModel, dialogues, seed: int = 0, max_n: int | None = None) -> dict:
    """Silence / overlap agreement of decoded tracks with gold tracks."""
    outside = single = match = 0
    hits: list[bool] = []
    for i, (script, t1, t2) in enumerate(dialogues):
        gold_ov = dt.overlap_windows(t1, t2)
        n = max_n or (len(t1) + 10)
        dec = D.decode_dialogue(model, script, n, Rng(seed).child("eval-decode").child(i))
        m = D.turn_taking_metrics(dec, gold_ov)
        outside += m["outside_steps"]
        single += m["single_steps"]
        hits += m["overlap_hits"]
        match += gold_match_steps(dec, (t1, t2), gold_ov)
    return {"check": "dialm_agreement", "dialogues": len(dialogues), "outside_steps": outside,
            "single_rate": single / max(outside, 1), "gold_match_rate": match / max(outside, 1),
            "overlap_windows": len(hits), "overlap_hit_rate": (sum(hits) / len(hits)) if hits else None}


def gold_match_steps(decoded, gold, gold_overlaps) -> int:
    """Decoded steps outside gold overlaps whose single active channel is the gold one."""
    a1, a2 = decoded[0].active(), decoded[1].active()
    g1, g2 = gold[0].active(), gold[1].active()
    n = len(a1)
    g1 = np.pad(g1, (0, max(0, n - len(g1))))[:n]
    g2 = np.pad(g2, (0, max(0, n - len(g2))))[:n]
    inside = np.zeros(n, dtype=bool)
    for s, e in gold_overlaps:
        inside[s:min(e, n)] = True
    return int(((a1 ^ a2) & (a1 == g1) & (a2 == g2) & ~inside).sum())


def cfm_reconstruction(model: C.CfmModel, items, plan: C.ChunkPlan | None = None, seed: int = 0) -> dict:
    """Held-out reconstruction error relative to target variance, plus chunked drift."""
    mse = var = drift = 0.0
    boundary: list[float] = []
    intra: list[float] = []
    transition: list[float] = []
    for i, (toks, spk, feats) in enumerate(items):
        x0 = Rng(seed).child("eval-noise").child(i).normal(size=feats.shape)
        full = C.decode_full(model, toks, spk, x0=x0)
        mse += float(np.mean((full - feats) ** 2))
        var += float(feats.var())
        if plan is not None:
            ch = C.chunk_decode(model, toks, spk, plan, x0=x0).frames
            drift += float(np.mean(np.abs(ch - full)))
            steps = np.abs(np.diff(ch, axis=0)).mean(axis=1)
            idx = np.arange(1, len(ch))
            at_boundary = idx % plan.b == 0
            boundary += steps[at_boundary].tolist()
            intra += steps[~at_boundary].tolist()
            # seams always fall on token changes; compare like with like too
            transition += steps[~at_boundary & (idx % model.config.frame_ratio == 0)].tolist()
    k = max(len(items), 1)
    out = {"check": "cfm_reconstruction", "items": len(items), "mse": mse / k, "target_var": var / k,
           "ratio": mse / var if var else None}
    if plan is not None:
        out["chunk_drift"] = drift / k
        if boundary and intra:
            out["boundary_delta_mean"] = float(np.mean(boundary))
            out["boundary_delta_p95"] = float(np.percentile(boundary, 95))
            out["intra_delta_p95"] = float(np.percentile(intra, 95))
            if transition:
                out["intra_transition_delta_p95"] = float(np.percentile(transition, 95))
    return out


def default_feature_heldout(n: int = 10, n_tokens: int = 40, seed: int = 0):
    return gen_feature_corpus(n, n_tokens, 0.1, seed, "heldout")
