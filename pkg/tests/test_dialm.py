import math

import numpy as np
import pytest

from dialoflow import dualtrack as dt
from dialoflow import dialm as D
from dialoflow.nn import tensor as T
from dialoflow.nn.gradcheck import grad_check
from dialoflow.nn.rng import Rng
from dialoflow.synthgen import GrammarParams, gen_corpus

MICRO = D.DialmConfig(layers=2, d=16, heads=2, max_text=32, max_steps=32)


def _script(seed=0):
    return gen_corpus(GrammarParams(), 1, seed=seed)[0]


def test_fuse_residual_identity_with_zero_weights():
    m = D.init_dialm(MICRO)
    for k in ("wq", "wk", "wv", "wo"):
        m.params[f"xattn.{k}"].data[...] = 0.0
    r = Rng(1)
    E1, E2 = r.normal(size=(5, 16)), r.normal(size=(5, 16))
    F1, F2 = D.cross_attention_fuse(m.params, E1, E2, 2)
    assert np.array_equal(F1.data, E1) and np.array_equal(F2.data, E2)


def test_fuse_is_causal():
    m = D.init_dialm(MICRO)
    r = Rng(2)
    E1, E2 = r.normal(size=(7, 16)), r.normal(size=(7, 16))
    F1, _ = D.cross_attention_fuse(m.params, E1, E2, 2)
    for t in range(6):
        E2b = E2.copy()
        E2b[t + 1:] += r.child(t).normal(size=E2b[t + 1:].shape)
        G1, _ = D.cross_attention_fuse(m.params, E1, E2b, 2)
        assert np.array_equal(F1.data[:t + 1], G1.data[:t + 1])
        assert not np.array_equal(F1.data[t + 1:], G1.data[t + 1:])


def test_fuse_single_step_and_length_check():
    m = D.init_dialm(MICRO)
    r = Rng(3)
    E1, E2 = r.normal(size=(1, 16)), r.normal(size=(1, 16))
    F1, _ = D.cross_attention_fuse(m.params, E1, E2, 2)
    # with one key the attention output is that key's value projected
    P = m.params
    n2 = T.layer_norm(T.as_tensor(E2), P["xattn.ln.g"], P["xattn.ln.b"]).data
    want = E1 + n2 @ P["xattn.wv"].data @ P["xattn.wo"].data
    assert np.allclose(F1.data, want, atol=1e-12)
    with pytest.raises(ValueError):
        D.cross_attention_fuse(m.params, r.normal(size=(3, 16)), r.normal(size=(4, 16)), 2)


def test_forward_shapes():
    g = _script()
    m = D.init_dialm(D.DialmConfig())
    text = dt.encode_script(g.script.turns, m.config.vocab)
    t1 = np.full(7, dt.SIL)
    l1, l2 = D.dialm_forward(m, text, t1, t1, (g.script.prompt1, g.script.prompt2))
    assert l1.shape == (7, 32) and l2.shape == (7, 32)


def test_forward_rejects_bad_ids():
    m = D.init_dialm(MICRO)
    p = np.zeros(8)
    with pytest.raises(ValueError):
        D.dialm_forward(m, [1, 40, 2], [4, 5], [4, 5], (p, p))
    with pytest.raises(ValueError):
        D.dialm_forward(m, [1, 5, 2], [4, 32], [4, 5], (p, p))
    with pytest.raises(ValueError):
        D.dialm_forward(m, [1, 5, 2], [4, 5, 6], [4, 5], (p, p))


def test_forward_causality_both_channels():
    g = _script(1)
    m = D.init_dialm(MICRO)
    text = dt.encode_script(g.script.turns, m.config.vocab)
    prompts = (g.script.prompt1, g.script.prompt2)
    t1, t2 = g.tracks[0].tokens[:10], g.tracks[1].tokens[:10]
    l1, l2 = D.dialm_forward(m, text, t1, t2, prompts)
    r = np.random.default_rng(0)
    for t in range(9):
        for which in (0, 1):
            a, b = t1.copy(), t2.copy()
            tgt = a if which == 0 else b
            tgt[t + 1:] = r.integers(4, 32, size=len(tgt) - t - 1)
            k1, k2 = D.dialm_forward(m, text, a, b, prompts)
            assert np.array_equal(k1.data[:t + 1], l1.data[:t + 1])
            assert np.array_equal(k2.data[:t + 1], l2.data[:t + 1])


def test_prompt_swap_symmetry():
    m = D.init_dialm(MICRO)
    P = m.params
    P["chan_emb"].data[1] = P["chan_emb"].data[0]
    P["head2.w"].data[...] = P["head1.w"].data
    P["head2.b"].data[...] = P["head1.b"].data
    r = Rng(4)
    pa, pb = r.normal(size=8), r.normal(size=8)
    text = [1, 5, 6, 3, 7, 2]
    track = [4, 9, 3, 3, 12]
    l1, l2 = D.dialm_forward(m, text, track, track, (pa, pb))
    k1, k2 = D.dialm_forward(m, text, track, track, (pb, pa))
    assert np.allclose(l1.data, k2.data, atol=1e-12)
    assert np.allclose(l2.data, k1.data, atol=1e-12)
    assert not np.allclose(l1.data, l2.data)


def test_dual_loss_uniform():
    z = T.as_tensor(np.zeros((5, 32)))
    tg = np.array([4, 5, 3, 3, 9])
    assert D.dual_ce_loss(z, z, tg, tg).data == pytest.approx(2 * 5 * math.log(32), abs=1e-9)
    assert 2 * 5 * math.log(32) == pytest.approx(34.657, abs=1e-3)


def test_dual_loss_one_hot():
    tg = np.array([4, 5, 3, 3, 9])
    z = np.full((5, 32), -1e3)
    z[np.arange(5), tg] = 1e3
    z = T.as_tensor(z)
    assert D.dual_ce_loss(z, z, tg, tg).data == pytest.approx(0.0, abs=1e-9)


def test_dual_loss_decomposes_and_skips_pad():
    r = np.random.default_rng(1)
    a, b = T.as_tensor(r.normal(size=(6, 32))), T.as_tensor(r.normal(size=(6, 32)))
    t1 = np.array([4, 5, 3, 0, 0, 0])
    t2 = np.array([3, 3, 3, 7, 8, 0])
    got = D.dual_ce_loss(a, b, t1, t2).data
    want = T.cross_entropy(a[:3], t1[:3], reduction="sum").data + T.cross_entropy(b[:5], t2[:5], reduction="sum").data
    assert got == pytest.approx(want, rel=1e-12)
    # brute force including SIL positions
    bf = 0.0
    for lg, tg in ((a.data, t1), (b.data, t2)):
        for row, t in zip(lg, tg):
            if t:
                bf -= row[t] - np.log(np.exp(row).sum())
    assert got == pytest.approx(bf, rel=1e-12)
    with pytest.raises(ValueError):
        D.dual_ce_loss(a, b, np.zeros(6, int), np.zeros(6, int))


def test_teacher_forcing_batch_layout():
    g = _script(2)
    b = D.make_batch([(g.script,) + tuple(g.tracks)], MICRO.vocab)
    n = len(g.tracks[0])
    assert b.in1[0, 0] == dt.BOS and np.array_equal(b.in1[0, 1:], g.tracks[0].tokens)
    assert np.array_equal(b.tgt2[0, :n], g.tracks[1].tokens) and b.tgt2[0, n] == dt.EOS
    assert b.steps == n + 1


def test_micro_grad_check():
    g = _script(3)
    m = D.init_dialm(MICRO)
    batch = D.make_batch([(g.script,) + tuple(g.tracks)], MICRO.vocab)
    err = grad_check(lambda p: D.batch_loss(D.DialmModel(MICRO, p), batch), m.params, eps=1e-5,
                     max_checks=300, rng=Rng(0))
    assert err < 1e-4


def test_zero_steps_returns_init():
    data = [(g.script,) + tuple(g.tracks) for g in gen_corpus(GrammarParams(), 4, seed=1)]
    res = D.train_dialm(MICRO, data, D.TrainSettings(steps=0))
    ref = D.init_dialm(MICRO)
    assert res.losses == []
    for name in ref.params:
        assert np.array_equal(res.model.params[name].data, ref.params[name].data)


def test_training_is_deterministic_and_learns():
    data = [(g.script,) + tuple(g.tracks) for g in gen_corpus(GrammarParams(), 8, seed=1)]
    st = D.TrainSettings(steps=30, batch_size=4, warmup=5, log_every=10)
    a = D.train_dialm(MICRO, data, st)
    b = D.train_dialm(MICRO, data, st)
    assert a.losses == b.losses
    assert a.events == b.events
    assert np.mean(a.losses[-5:]) < a.losses[0]


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        D.train_dialm(MICRO, [], D.TrainSettings(steps=1))


def test_forced_sil_on_channel_two():
    m = D.init_dialm(MICRO)
    m.params["head2.b"].data[dt.SIL] = 1e4
    g = _script(4)
    t1, t2 = D.decode_dialogue(m, g.script, 12, Rng(0))
    assert len(t1) == len(t2) > 0
    assert (t2.tokens == dt.SIL).all()


def test_greedy_decoding_is_deterministic():
    cfg = D.DialmConfig(layers=2, d=16, heads=2, max_text=32, max_steps=32, sampler="greedy")
    m = D.init_dialm(cfg)
    g = _script(5)
    a = D.decode_dialogue(m, g.script, 10, Rng(0))
    b = D.decode_dialogue(m, g.script, 10, Rng(99))
    assert np.array_equal(a[0].tokens, b[0].tokens) and np.array_equal(a[1].tokens, b[1].tokens)


def test_decode_equal_lengths_and_max_n():
    m = D.init_dialm(MICRO)
    for s in range(5):
        t1, t2 = D.decode_dialogue(m, _script(s).script, 9, Rng(s))
        assert len(t1) == len(t2) <= 9
    with pytest.raises(ValueError):
        D.decode_dialogue(m, _script().script, 0)


def test_turn_taking_metrics():
    S = dt.SIL
    t1 = dt.TrackTokens([4, 4, 4, 4, S, S], 1)
    t2 = dt.TrackTokens([S, S, 5, 5, 5, S], 2)
    m = D.turn_taking_metrics((t1, t2), [(2, 4)])
    assert m["outside_steps"] == 4 and m["single_steps"] == 3
    assert m["overlap_hits"] == [True]


def test_config_validation_and_checkpoint_meta(tmp_path):
    with pytest.raises(ValueError):
        D.DialmConfig(d=10, heads=4)
    m = D.init_dialm(MICRO)
    from dialoflow.nn.checkpoint import checkpoint_save, load_checkpoint_with_meta
    checkpoint_save(m.params, tmp_path / "m.dlsp", D.model_meta(m))
    ps, meta = load_checkpoint_with_meta(tmp_path / "m.dlsp")
    back = D.model_from_checkpoint(ps, meta)
    assert back.config == MICRO
    with pytest.raises(ValueError):
        D.model_from_checkpoint(ps, {"kind": "cfm"})
