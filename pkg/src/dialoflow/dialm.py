"""Dual-track dialogue language model.

Both speech channels share one token embedding table. A causal cross-attention
block lets each channel read the other channel's past before the decoder
stack, which runs over ``[text ; channel 1 steps ; channel 2 steps]``. Text
is visible to every position; a speech position at step ``t`` sees speech
positions of both channels at steps ``<= t``. Two heads emit per-channel
next-token logits.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dualtrack as dt
from .dualtrack import DialogueScript, TrackTokens, VocabSpec
from .nn import tensor as T
from .nn.functional import causal_mask, feed_forward, linear, ln, multi_head_attention
from .nn.params import ParamStore, adam_step, cosine_lr
from .nn.rng import Rng
from .nn.tensor import NonFiniteError, Tensor, no_grad



@dataclass(frozen=True)
class DialmConfig:
    layers: int = 4
    d: int = 64
    heads: int = 4
    v_txt: int = 32
    v_sem: int = 32
    d_spk: int = 8
    max_text: int = 64
    max_steps: int = 64
    ffn_mult: int = 4
    sampler: str = "topk"
    top_k: int = 5
    temperature: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "d", "heads", "v_txt", "v_sem", "d_spk", "max_text", "max_steps", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ValueError("hidden size must be divisible by the head count")
        if self.sampler not in ("greedy", "topk"):
            raise ValueError("sampler must be 'greedy' or 'topk'")
        if self.sampler == "topk" and (self.top_k < 1 or self.temperature <= 0):
            raise ValueError("top-k sampling needs k >= 1 and temperature > 0")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.v_txt, self.v_sem)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# 16 layers / 1024 hidden / 16 heads at full scale
FULL_SCALE = DialmConfig(layers=16, d=1024, heads=16, max_text=2048, max_steps=4096)
# small enough for exhaustive finite differences
MICRO = DialmConfig(layers=2, d=16, heads=2, max_text=32, max_steps=32)


@dataclass
class DialmModel:
    config: DialmConfig
    params: ParamStore


def init_dialm(config: DialmConfig, rng: Rng | None = None) -> DialmModel:
    rng = rng or Rng(config.seed).child("dialm-init")
    d, f = config.d, config.d * config.ffn_mult
    ps = ParamStore()

    def w(name, *shape, scale=None):
        ps.add(name, rng.child(name).normal(size=shape) * (scale if scale is not None else 1.0 / math.sqrt(shape[0])))

    w("txt_emb", config.v_txt, d, scale=0.5)
    w("sem_emb", config.v_sem, d, scale=0.5)
    w("txt_pos", config.max_text, d, scale=0.5)
    w("step_pos", config.max_steps, d, scale=0.5)
    w("chan_emb", 2, d, scale=0.5)
    w("spk_proj.w", config.d_spk, d)
    ps.add("xattn.ln.g", np.ones(d))
    ps.add("xattn.ln.b", np.zeros(d))
    for k in ("wq", "wk", "wv", "wo"):
        w("xattn." + k, d, d)
    for i in range(config.layers):
        p = f"blk{i}."
        for k in ("ln1", "ln2"):
            ps.add(p + k + ".g", np.ones(d))
            ps.add(p + k + ".b", np.zeros(d))
        for k in ("wq", "wk", "wv"):
            w(p + "attn." + k, d, d)
        w(p + "attn.wo", d, d, scale=1.0 / math.sqrt(d * 2 * config.layers))
        w(p + "ffn.fc1.w", d, f)
        ps.add(p + "ffn.fc1.b", np.zeros(f))
        w(p + "ffn.fc2.w", f, d, scale=1.0 / math.sqrt(f * 2 * config.layers))
        ps.add(p + "ffn.fc2.b", np.zeros(d))
    ps.add("ln_f.g", np.ones(d))
    ps.add("ln_f.b", np.zeros(d))
    for c in (1, 2):
        w(f"head{c}.w", d, config.v_sem)
        ps.add(f"head{c}.b", np.zeros(config.v_sem))
    return DialmModel(config, ps)


def cross_attention_fuse(params, E1: Tensor, E2: Tensor, n_heads: int, prefix: str = "xattn.") -> tuple[Tensor, Tensor]:
    """``F1[t] = E1[t] + CrossAttn(E1[t], E2[<=t])`` and symmetrically for ``F2``."""
    E1, E2 = T.as_tensor(E1), T.as_tensor(E2)
    if E1.shape != E2.shape:
        raise ValueError(f"channel lengths differ: {E1.shape} vs {E2.shape}")
    mask = causal_mask(E1.shape[-2])
    n1, n2 = ln(E1, params, prefix + "ln."), ln(E2, params, prefix + "ln.")
    F1 = E1 + multi_head_attention(n1, n2, params, prefix, n_heads, mask)
    F2 = E2 + multi_head_attention(n2, n1, params, prefix, n_heads, mask)
    return F1, F2


def _attention_mask(text_valid: np.ndarray, n: int) -> np.ndarray:
    """(B, S, S) mask for the ``[text ; ch1 ; ch2]`` sequence."""
    bsz, lt = text_valid.shape
    s = lt + 2 * n
    m = np.zeros((bsz, s, s), dtype=bool)
    m[:, :, :lt] = text_valid[:, None, :]
    steps = np.arange(n)
    causal = steps[None, :] <= steps[:, None]
    for a in (0, 1):
        for b in (0, 1):
            m[:, lt + a * n:lt + (a + 1) * n, lt + b * n:lt + (b + 1) * n] = causal
    return m


def forward_batch(model: DialmModel, text: np.ndarray, in1: np.ndarray, in2: np.ndarray,
                  prompt1: np.ndarray, prompt2: np.ndarray, text_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Batched forward. ``text`` is (B, Lt); ``in1``/``in2`` are (B, N) input tokens.
    Returns logits (B, N, V_sem) per channel."""
    cfg, P = model.config, model.params
    text, in1, in2 = (np.asarray(a, dtype=np.int64) for a in (text, in1, in2))
    if in1.shape != in2.shape:
        raise ValueError("channel inputs differ in shape")
    bsz, lt = text.shape
    n = in1.shape[1]
    if lt > cfg.max_text or n > cfg.max_steps:
        raise ValueError(f"sequence too long (text {lt}/{cfg.max_text}, steps {n}/{cfg.max_steps})")
    for name, arr, v in (("text", text, cfg.v_txt), ("track", in1, cfg.v_sem), ("track", in2, cfg.v_sem)):
        if arr.size and (arr.min() < 0 or arr.max() >= v):
            raise ValueError(f"{name} token id out of range [0, {v})")
    if text_valid is None:
        text_valid = np.ones(text.shape, dtype=bool)

    x_txt = T.embedding(P["txt_emb"], text) + P["txt_pos"][:lt]
    pos = P["step_pos"][:n]
    spk = T.matmul(T.as_tensor(np.stack([prompt1, prompt2], axis=1)), P["spk_proj.w"])  # (B, 2, d)
    E1 = T.embedding(P["sem_emb"], in1) + pos + P["chan_emb"][0:1] + spk[:, 0:1]
    E2 = T.embedding(P["sem_emb"], in2) + pos + P["chan_emb"][1:2] + spk[:, 1:2]
    F1, F2 = cross_attention_fuse(P, E1, E2, cfg.heads)

    h = T.concat([x_txt, F1, F2], axis=1)
    mask = _attention_mask(text_valid, n)
    for i in range(cfg.layers):
        p = f"blk{i}."
        a = ln(h, P, p + "ln1.")
        h = h + multi_head_attention(a, a, P, p + "attn.", cfg.heads, mask)
        h = h + feed_forward(ln(h, P, p + "ln2."), P, p + "ffn.")
    h = ln(h, P, "ln_f.")
    logits1 = linear(h[:, lt:lt + n], P, "head1.")
    logits2 = linear(h[:, lt + n:], P, "head2.")
    return logits1, logits2


def dialm_forward(model: DialmModel, text, track1, track2, prompts) -> tuple[Tensor, Tensor]:
    """Single-dialogue forward over input tracks of equal length N.

    ``logits_c[t]`` is the distribution of channel ``c``'s token following
    input step ``t``.
    """
    t1 = np.asarray(getattr(track1, "tokens", track1), dtype=np.int64)
    t2 = np.asarray(getattr(track2, "tokens", track2), dtype=np.int64)
    if t1.shape != t2.shape:
        raise ValueError("tracks differ in length")
    p1, p2 = (np.asarray(p, dtype=np.float64) for p in prompts)
    l1, l2 = forward_batch(model, np.asarray(text)[None], t1[None], t2[None], p1[None], p2[None])
    return l1[0], l2[0]


def dual_ce_loss(logits1: Tensor, logits2: Tensor, targets1, targets2, pad: int = dt.PAD,
                 reduction: str = "sum") -> Tensor:
    """Negated dual-channel log-likelihood: the sum of both channels' NLL.

    ``<PAD>`` targets are skipped; ``<SIL>`` targets count like any token.
    """
    targets1, targets2 = np.asarray(targets1), np.asarray(targets2)
    if logits1.shape[:-1] != targets1.shape or logits2.shape[:-1] != targets2.shape:
        raise ValueError("logits and targets disagree in shape")
    w1, w2 = (targets1 != pad).astype(np.float64), (targets2 != pad).astype(np.float64)
    total = w1.sum() + w2.sum()
    if total == 0:
        raise ValueError("all target positions are padding")
    loss = T.cross_entropy(logits1, targets1, w1, "sum") + T.cross_entropy(logits2, targets2, w2, "sum")
    if reduction == "mean":
        return loss * (1.0 / total)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    text: np.ndarray
    text_valid: np.ndarray
    in1: np.ndarray
    in2: np.ndarray
    tgt1: np.ndarray
    tgt2: np.ndarray
    prompt1: np.ndarray
    prompt2: np.ndarray
    steps: int


def make_batch(items: Sequence, vocab: VocabSpec) -> Batch:
    """Pad a list of ``(script, track1, track2)`` for teacher forcing.

    Inputs are ``[<BOS>] + track``; targets are ``track + [<EOS>]``.
    """
    texts = [dt.encode_script(s.turns, vocab) for s, _, _ in items]
    lt = max(len(t) for t in texts)
    n = max(len(t1) for _, t1, _ in items) + 1
    bsz = len(items)
    text = np.full((bsz, lt), vocab.pad, dtype=np.int64)
    valid = np.zeros((bsz, lt), dtype=bool)
    in1 = np.full((bsz, n), vocab.pad, dtype=np.int64)
    in2, tgt1, tgt2 = in1.copy(), in1.copy(), in1.copy()
    for b, ((script, t1, t2), tx) in enumerate(zip(items, texts)):
        text[b, :len(tx)] = tx
        valid[b, :len(tx)] = True
        k = len(t1)
        for inp, tgt, tr in ((in1, tgt1, t1), (in2, tgt2, t2)):
            inp[b, 0] = vocab.bos
            inp[b, 1:k + 1] = tr.tokens
            tgt[b, :k] = tr.tokens
            tgt[b, k] = vocab.eos
    p1 = np.stack([s.prompt1 for s, _, _ in items])
    p2 = np.stack([s.prompt2 for s, _, _ in items])
    steps = int((tgt1 != vocab.pad).sum())
    return Batch(text, valid, in1, in2, tgt1, tgt2, p1, p2, steps)


def batch_loss(model: DialmModel, batch: Batch) -> Tensor:
    """Dual NLL per supervised time step (sum over both channels / steps)."""
    l1, l2 = forward_batch(model, batch.text, batch.in1, batch.in2, batch.prompt1, batch.prompt2, batch.text_valid)
    return dual_ce_loss(l1, l2, batch.tgt1, batch.tgt2) * (1.0 / batch.steps)


# -- training ---------------------------------------------------------------

@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    min_lr_ratio: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    log_every: int = 50
    grad_clip: float = 1.0


@dataclass
class TrainResult:
    model: DialmModel
    losses: list = field(default_factory=list)
    events: list = field(default_factory=list)


def clip_grads(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}
    return grads


def train_dialm(config: DialmConfig, dataset: Sequence, settings: TrainSettings | None = None,
                model: DialmModel | None = None, on_event: Callable[[dict], None] | None = None) -> TrainResult:
    """Teacher-forced training with Adam and a cosine schedule.

    ``dataset`` holds ``(script, track1, track2)`` triples. Deterministic for a
    fixed ``config.seed``.
    """
    settings = settings or TrainSettings()
    if not dataset:
        raise ValueError("empty dataset")
    model = model or init_dialm(config)
    vocab = config.vocab
    rng = Rng(config.seed).child("dialm-batches")
    result = TrainResult(model)
    for step in range(settings.steps):
        idx = rng.choice(len(dataset), size=min(settings.batch_size, len(dataset)), replace=False)
        batch = make_batch([dataset[int(i)] for i in sorted(idx)], vocab)
        model.params.zero_grad()
        loss = batch_loss(model, batch)
        val = float(loss.data)
        if not math.isfinite(val):
            raise NonFiniteError(f"loss diverged at step {step}")
        loss.backward()
        lr = cosine_lr(step, settings.steps, settings.lr, settings.warmup, settings.min_lr_ratio)
        grads = clip_grads(model.params.grads(), settings.grad_clip)
        adam_step(model.params, grads, lr, settings.beta1, settings.beta2)
        result.losses.append(val)
        if step % settings.log_every == 0 or step == settings.steps - 1:
            ev = {"event": "train", "model": "dialm", "step": step, "loss": val, "lr": lr}
            result.events.append(ev)
            if on_event:
                on_event(ev)
    model.params.zero_grad()
    return result


# -- decoding ---------------------------------------------------------------

def _sample(logits: np.ndarray, cfg: DialmConfig, rng: Rng, banned: Sequence[int]) -> int:
    z = logits.astype(np.float64).copy()
    z[list(banned)] = -np.inf
    if cfg.sampler == "greedy":
        return int(np.argmax(z))
    k = min(cfg.top_k, int(np.isfinite(z).sum()))
    top = np.argsort(-z, kind="stable")[:k]
    s = z[top] / cfg.temperature
    p = np.exp(s - s.max())
    p /= p.sum()
    return int(top[int(rng.choice(k, p=p))])


def decode_dialogue(model: DialmModel, script: DialogueScript, max_n: int, rng: Rng | None = None,
                    ) -> tuple[TrackTokens, TrackTokens]:
    """Lockstep dual-stream decoding: one token per channel per step.

    A channel that emits ``<EOS>`` is finished and holds ``<SIL>`` from then
    on; decoding stops once both channels are finished or after ``max_n`` steps.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    cfg = model.config
    vocab = cfg.vocab
    max_n = min(max_n, cfg.max_steps - 1)
    rng = rng or Rng(cfg.seed).child("decode")
    text = np.asarray(dt.encode_script(script.turns, vocab))[None]
    in1, in2 = [vocab.bos], [vocab.bos]
    out1: list[int] = []
    out2: list[int] = []
    done = [False, False]
    banned = (vocab.pad, vocab.bos)
    with no_grad():
        for _ in range(max_n):
            l1, l2 = forward_batch(model, text, np.asarray([in1]), np.asarray([in2]),
                                   script.prompt1[None], script.prompt2[None])
            toks = []
            for c, lg in ((0, l1), (1, l2)):
                tok = _sample(lg.data[0, -1], cfg, rng, banned)
                if done[c]:
                    tok = vocab.sil
                elif tok == vocab.eos:
                    done[c] = True
                    tok = vocab.sil
                toks.append(tok)
            if all(done):
                break
            out1.append(toks[0])
            out2.append(toks[1])
            in1.append(toks[0])
            in2.append(toks[1])
    return TrackTokens(out1, 1), TrackTokens(out2, 2)


def turn_taking_metrics(decoded: tuple, gold_overlaps: Sequence[tuple], sil: int = dt.SIL) -> dict:
    """Agreement of a decoded track pair with gold overlap windows.

    ``single_rate``: fraction of decoded steps outside gold overlap windows with
    exactly one non-silent channel. ``overlap_hit``: per gold window, whether at
    least one step inside it has both channels non-silent.
    """
    t1, t2 = decoded
    a1, a2 = t1.active(sil), t2.active(sil)
    n = len(a1)
    inside = np.zeros(n, dtype=bool)
    for s, e in gold_overlaps:
        inside[s:min(e, n)] = True
    outside = ~inside
    single = (a1 ^ a2) & outside
    hits = [bool((a1[s:e] & a2[s:e]).any()) if s < n else False for s, e in gold_overlaps]
    return {"outside_steps": int(outside.sum()), "single_steps": int(single.sum()), "overlap_hits": hits}


def model_meta(model: DialmModel) -> dict:
    return {"kind": "dialm", "config": model.config.to_dict()}


def model_from_checkpoint(params: ParamStore, meta: dict | None) -> DialmModel:
    if not meta or meta.get("kind") != "dialm":
        raise ValueError("checkpoint is not a DiaLM checkpoint")
    cfg = DialmConfig(**meta["config"])
    ref = init_dialm(cfg)
    if set(ref.params.names()) != set(params.names()):
        raise ValueError("checkpoint parameters do not match the configuration")
    for name in params:
        if params[name].shape != ref.params[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
    return DialmModel(cfg, params)
