"""Conditional flow matching over frame features, with chunked decoding.

The field network is a transformer over frames whose self-attention in each
layer is restricted by a block mask. Inputs per frame are the noisy state,
the clean context features, the target-region flag, the upsampled semantic
token and the speaker vector, plus a time embedding.

Training regresses the straight-line velocity ``x1 - x0`` at
``x_t = (1 - t) x0 + t x1`` on target frames. Context frames are fed clean
(``x_t = x1`` there), which is also how the chunked decoder clamps them.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .blockmask import MaskSpec, build_mask, receptive_field, window_blocks
from .nn import tensor as T
from .nn.functional import feed_forward, linear, ln, multi_head_attention
from .nn.params import ParamStore, adam_step, cosine_lr
from .nn.rng import Rng
from .nn.tensor import NonFiniteError, Tensor, no_grad


FRAME_RATIO = 2


@dataclass(frozen=True)
class CfmConfig:
    layers: int = 4
    d: int = 64
    heads: int = 4
    feat_dim: int = 16
    v_sem: int = 32
    d_spk: int = 8
    block: int = 8
    layer_masks: tuple = ((1, 0), (0, 1), (0, 0), (0, 0))
    ffn_mult: int = 4
    frame_ratio: int = FRAME_RATIO
    conditional: bool = True
    n_ode: int = 32
    solver: str = "euler"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_masks", tuple(tuple(int(v) for v in m) for m in self.layer_masks))
        if len(self.layer_masks) != self.layers:
            raise ValueError("need one (tb, tf) mask per layer")
        if self.d % self.heads:
            raise ValueError("hidden size must be divisible by the head count")
        if self.solver not in ("euler", "midpoint"):
            raise ValueError("solver must be 'euler' or 'midpoint'")
        if min(self.layers, self.d, self.feat_dim, self.block, self.n_ode, self.frame_ratio) < 1:
            raise ValueError("sizes must be >= 1")

    @property
    def mask_specs(self) -> list[MaskSpec]:
        return [MaskSpec(self.block, tb, tf) for tb, tf in self.layer_masks]

    @property
    def receptive_field(self) -> tuple[int, int]:
        return receptive_field(self.mask_specs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_masks"] = [list(m) for m in self.layer_masks]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# 22 layers / 768 hidden at full scale
FULL_SCALE = CfmConfig(layers=22, d=768, heads=12, feat_dim=100, block=24,
                        layer_masks=tuple([(1, 0), (0, 1)] + [(0, 0)] * 20))
MICRO = CfmConfig(layers=2, d=16, heads=2, feat_dim=4, block=2, layer_masks=((1, 0), (0, 1)))


@dataclass
class CfmCondition:
    """Per-frame conditioning. ``mask`` is True on frames to generate."""
    tokens: np.ndarray | None
    spk: np.ndarray | None
    features: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens is not None:
            self.tokens = np.asarray(self.tokens, dtype=np.int64)
            if self.tokens.shape != self.mask.shape:
                raise ValueError("tokens must be given per frame")
        if self.features.shape[:-1] != self.mask.shape:
            raise ValueError("features and mask disagree in length")
        if not np.isfinite(self.features).all():
            raise ValueError("context features must be finite")

    @property
    def frames(self) -> int:
        return self.mask.shape[-1]

    def window(self, lo: int, hi: int) -> "CfmCondition":
        return CfmCondition(None if self.tokens is None else self.tokens[..., lo:hi], self.spk,
                            self.features[..., lo:hi, :], self.mask[..., lo:hi])


@dataclass
class ChunkPlan:
    b: int
    p: int
    q: int
    n_ode: int = 32

    def __post_init__(self):
        if self.b < 1 or self.p < 0 or self.q < 0 or self.n_ode < 1:
            raise ValueError("invalid chunk plan")

    @property
    def window_frames(self) -> int:
        return (self.p + self.q + 1) * self.b

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_ratio: int = FRAME_RATIO

    def sidecar(self, plan: ChunkPlan | None = None) -> dict:
        return {"frames": int(self.frames.shape[0]), "dim": int(self.frames.shape[1]),
                "frame_ratio": self.frame_ratio, "chunk_plan": plan.to_dict() if plan else None}


class CfmModel:
    def __init__(self, config: CfmConfig, params: ParamStore):
        self.config = config
        self.params = params

    def masks(self, n: int):
        return [build_mask(n, s) for s in self.config.mask_specs]

    def forward(self, x, t, cond: CfmCondition) -> Tensor:
        """Predicted velocity. ``x`` is (T, D) or (B, T, D); ``t`` a scalar or (B,)."""
        cfg, P = self.config, self.params
        x = T.as_tensor(x)
        batched = x.ndim == 3
        xd = x if batched else T.reshape(x, (1,) + x.shape)
        bsz, n, dim = xd.shape
        feats = np.asarray(cond.features).reshape(bsz, n, dim)
        msk = np.asarray(cond.mask, dtype=np.float64).reshape(bsz, n, 1)
        inp = T.concat([xd, T.as_tensor(feats), T.as_tensor(msk)], axis=-1)
        h = linear(inp, P, "in.")
        if cfg.conditional:
            if cond.tokens is None or cond.spk is None:
                raise ValueError("conditional model needs tokens and a speaker vector")
            toks = np.asarray(cond.tokens).reshape(bsz, n)
            spk = np.asarray(cond.spk, dtype=np.float64).reshape(bsz, 1, cfg.d_spk)
            h = h + T.embedding(P["tok_emb"], toks) + T.matmul(T.as_tensor(spk), P["spk_proj.w"])
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (bsz,))
        temb = linear(T.silu(linear(T.as_tensor(time_features(tt)), P, "time.fc1.")), P, "time.fc2.")
        h = h + T.reshape(temb, (bsz, 1, cfg.d))
        for i, m in enumerate(self.masks(n)):
            p = f"blk{i}."
            a = ln(h, P, p + "ln1.")
            h = h + multi_head_attention(a, a, P, p + "attn.", cfg.heads, m)
            h = h + feed_forward(ln(h, P, p + "ln2."), P, p + "ffn.")
        out = linear(ln(h, P, "ln_f."), P, "out.")
        return out if batched else T.reshape(out, (n, dim))

    def __call__(self, x, t, cond: CfmCondition) -> np.ndarray:
        with no_grad():
            return self.forward(x, t, cond).data


def time_features(t: np.ndarray, n_freq: int = 16) -> np.ndarray:
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), n_freq))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_cfm(config: CfmConfig, rng: Rng | None = None) -> CfmModel:
    rng = rng or Rng(config.seed).child("cfm-init")
    d, f, D = config.d, config.d * config.ffn_mult, config.feat_dim
    ps = ParamStore()

    def w(name, *shape, scale=None):
        ps.add(name, rng.child(name).normal(size=shape) * (scale if scale is not None else 1.0 / math.sqrt(shape[0])))

    w("in.w", 2 * D + 1, d)
    ps.add("in.b", np.zeros(d))
    if config.conditional:
        w("tok_emb", config.v_sem, d, scale=0.5)
        w("spk_proj.w", config.d_spk, d)
    w("time.fc1.w", 32, d)
    ps.add("time.fc1.b", np.zeros(d))
    w("time.fc2.w", d, d)
    ps.add("time.fc2.b", np.zeros(d))
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
    w("out.w", d, D, scale=0.1 / math.sqrt(d))
    ps.add("out.b", np.zeros(D))
    return CfmModel(config, ps)


# -- path, loss, sampler --------------------------------------------------------

def linear_path(x0, x1, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 differ in shape")
    return (1.0 - t) * x0 + t * x1


def unconditional(n: int, dim: int) -> CfmCondition:
    return CfmCondition(None, None, np.zeros((n, dim)), np.ones(n, dtype=bool))


def cfm_loss(model, x1, cond: CfmCondition, rng: Rng) -> Tensor:
    """Flow-matching regression loss, averaged over target frames.

    ``model`` is a :class:`CfmModel` or any ``field(x, t, cond)`` callable.
    ``x1`` is (T, D) or (B, T, D); one ``t`` is drawn per sequence.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    batched = x1.ndim == 3
    x1b = x1 if batched else x1[None]
    bsz = x1b.shape[0]
    mask = np.asarray(cond.mask, dtype=bool).reshape(bsz, -1)
    if not mask.any():
        raise ValueError("empty target region")
    x0 = rng.normal(size=x1b.shape)
    t = rng.uniform(size=bsz)
    tt = t[:, None, None]
    xt = (1.0 - tt) * x0 + tt * x1b
    xt = np.where(mask[..., None], xt, x1b)
    target = x1b - x0
    w = mask[..., None].astype(np.float64)
    xin = xt if batched else xt[0]
    tin = t if batched else t[0]
    if isinstance(model, CfmModel):
        pred = model.forward(xin, tin, cond)
    else:
        pred = T.as_tensor(model(xin, tin, cond))
    pred = pred if batched else T.reshape(pred, (1,) + pred.shape)
    return T.mse(pred, target, np.broadcast_to(w, target.shape))


def _clamp(x: np.ndarray, cond) -> np.ndarray:
    if cond is None or getattr(cond, "mask", None) is None or cond.mask.all():
        return x
    return np.where(cond.mask[..., None], x, cond.features)


def ode_sample(field: Callable, x0, cond, n_ode: int, method: str = "euler") -> np.ndarray:
    """Integrate ``dx/dt = field(x, t, cond)`` from t=0 to t=1 with fixed steps.

    Frames outside ``cond.mask`` are held at their context values.
    """
    if n_ode < 1:
        raise ValueError("n_ode must be >= 1")
    x = _clamp(np.array(x0, dtype=np.float64), cond)
    h = 1.0 / n_ode
    for k in range(n_ode):
        t = k / n_ode
        v = np.asarray(field(x, t, cond), dtype=np.float64)
        if method == "midpoint":
            xm = _clamp(x + 0.5 * h * v, cond)
            v = np.asarray(field(xm, t + 0.5 * h, cond), dtype=np.float64)
        elif method != "euler":
            raise ValueError(f"unknown method {method!r}")
        x = _clamp(x + h * v, cond)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"ODE state became non-finite at step {k}")
    return x


def upsample(tokens, ratio: int = FRAME_RATIO) -> np.ndarray:
    return np.repeat(np.asarray(tokens, dtype=np.int64), ratio)


def infill_condition(tokens, context_features, target_span: tuple, spk=None,
                     ratio: int = FRAME_RATIO) -> CfmCondition:
    """Clean context outside ``target_span`` (frames, half open), zeros inside."""
    frames = upsample(tokens, ratio)
    n = len(frames)
    s, e = int(target_span[0]), int(target_span[1])
    if not 0 <= s < e <= n:
        raise ValueError(f"target span [{s}, {e}) is empty or outside [0, {n})")
    feats = np.array(context_features, dtype=np.float64)
    if feats.shape[0] != n:
        raise ValueError("context features must cover every frame")
    mask = np.zeros(n, dtype=bool)
    mask[s:e] = True
    feats[mask] = 0.0
    return CfmCondition(frames, None if spk is None else np.asarray(spk, dtype=np.float64), feats, mask)


def decode_full(model: CfmModel, tokens, spk, n_ode: int | None = None, x0=None, rng: Rng | None = None,
                method: str | None = None) -> np.ndarray:
    cfg = model.config
    frames = upsample(tokens, cfg.frame_ratio)
    n = len(frames)
    if x0 is None:
        x0 = (rng or Rng(cfg.seed).child("noise")).normal(size=(n, cfg.feat_dim))
    cond = CfmCondition(frames, np.asarray(spk, dtype=np.float64), np.zeros((n, cfg.feat_dim)), np.ones(n, dtype=bool))
    return ode_sample(model, x0, cond, n_ode or cfg.n_ode, method or cfg.solver)


def check_plan(model: CfmModel, plan: ChunkPlan, strict: bool = True) -> None:
    B, F = model.config.receptive_field
    if plan.b != model.config.block:
        raise ValueError(f"plan block {plan.b} != model block {model.config.block}")
    if plan.p < B or plan.q < F:
        msg = f"chunk plan p={plan.p}, q={plan.q} does not cover the receptive field ({B}, {F})"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, stacklevel=3)


def chunk_decode(model: CfmModel, tokens, spk, plan: ChunkPlan, x0=None, rng: Rng | None = None,
                 strict: bool = True, method: str | None = None) -> FeatureMatrix:
    """Generate features block by block with a fixed-size window.

    For chunk ``k`` the window spans blocks ``[k - p, k + q]``. Past blocks are
    conditioned on (and clamped to) already generated frames; chunk ``k`` and
    the lookahead blocks are integrated from their noise, and only chunk ``k``
    is kept.
    """
    check_plan(model, plan, strict)
    cfg = model.config
    frames = upsample(tokens, cfg.frame_ratio)
    n, D, b = len(frames), cfg.feat_dim, plan.b
    if x0 is None:
        x0 = (rng or Rng(cfg.seed).child("noise")).normal(size=(n, D))
    x0 = np.asarray(x0, dtype=np.float64)
    spk = np.asarray(spk, dtype=np.float64)
    out = np.zeros((n, D))
    n_blocks = -(-n // b)
    for k in range(n_blocks):
        lo_b, hi_b = window_blocks(k, n_blocks, plan.p, plan.q)
        lo, hi = lo_b * b, min(hi_b * b, n)
        cs, ce = k * b, min((k + 1) * b, n)
        feats = np.zeros((hi - lo, D))
        feats[:cs - lo] = out[lo:cs]
        mask = np.zeros(hi - lo, dtype=bool)
        mask[cs - lo:] = True
        cond = CfmCondition(frames[lo:hi], spk, feats, mask)
        xw = ode_sample(model, x0[lo:hi], cond, plan.n_ode, method or cfg.solver)
        out[cs:ce] = xw[cs - lo:ce - lo]
    return FeatureMatrix(out, cfg.frame_ratio)


# -- training ---------------------------------------------------------------------

@dataclass
class CfmTrainSettings:
    steps: int = 2000
    batch_size: int = 16
    crop_blocks: int = 4
    lr: float = 2e-3
    warmup: int = 100
    min_lr_ratio: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    full_target_prob: float = 0.5
    log_every: int = 50
    grad_clip: float = 1.0


@dataclass
class CfmTrainResult:
    model: CfmModel
    losses: list = field(default_factory=list)
    events: list = field(default_factory=list)


def _training_batch(items: Sequence, cfg: CfmConfig, st: CfmTrainSettings, rng: Rng):
    """Crop block-aligned windows and draw a contiguous target region per item."""
    crop = st.crop_blocks * cfg.block
    xs, toks, spks, masks = [], [], [], []
    for tokens, spk, feats in items:
        feats = np.asarray(feats, dtype=np.float64)
        n = feats.shape[0]
        fr = upsample(tokens, cfg.frame_ratio) if tokens is not None else None
        if n > crop:
            start = int(rng.integers(0, (n - crop) // cfg.block + 1)) * cfg.block
            feats = feats[start:start + crop]
            fr = fr[start:start + crop] if fr is not None else None
        m = np.ones(feats.shape[0], dtype=bool)
        nb = -(-feats.shape[0] // cfg.block)
        if nb > 1 and rng.random() >= st.full_target_prob:
            ctx = int(rng.integers(1, nb)) * cfg.block
            m[:ctx] = False
        xs.append(feats)
        toks.append(fr)
        spks.append(spk)
        masks.append(m)
    lens = {x.shape[0] for x in xs}
    if len(lens) != 1:
        raise ValueError("training items must share a length after cropping")
    x1 = np.stack(xs)
    mask = np.stack(masks)
    feats = np.where(mask[..., None], 0.0, x1)
    if cfg.conditional:
        cond = CfmCondition(np.stack(toks), np.stack([np.asarray(s, dtype=np.float64) for s in spks]), feats, mask)
    else:
        cond = CfmCondition(None, None, feats, mask)
    return x1, cond


def train_cfm(config: CfmConfig, dataset: Sequence, settings: CfmTrainSettings | None = None,
              model: CfmModel | None = None, on_event: Callable[[dict], None] | None = None) -> CfmTrainResult:
    """Fit the velocity field. ``dataset`` holds ``(tokens, speaker_vec, features)``
    triples; tokens and speaker are ``None`` for an unconditional model."""
    st = settings or CfmTrainSettings()
    if not len(dataset):
        raise ValueError("empty dataset")
    model = model or init_cfm(config)
    rng = Rng(config.seed).child("cfm-train")
    res = CfmTrainResult(model)
    for step in range(st.steps):
        srng = rng.child(step)
        idx = srng.choice(len(dataset), size=min(st.batch_size, len(dataset)), replace=False)
        x1, cond = _training_batch([dataset[int(i)] for i in sorted(idx)], config, st, srng)
        model.params.zero_grad()
        loss = cfm_loss(model, x1, cond, srng)
        val = float(loss.data)
        if not math.isfinite(val):
            raise NonFiniteError(f"loss diverged at step {step}")
        loss.backward()
        lr = cosine_lr(step, st.steps, st.lr, st.warmup, st.min_lr_ratio)
        grads = model.params.grads()
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if st.grad_clip and norm > st.grad_clip:
            grads = {k: g * (st.grad_clip / norm) for k, g in grads.items()}
        adam_step(model.params, grads, lr, st.beta1, st.beta2)
        res.losses.append(val)
        if step % st.log_every == 0 or step == st.steps - 1:
            ev = {"event": "train", "model": "cfm", "step": step, "loss": val, "lr": lr}
            res.events.append(ev)
            if on_event:
                on_event(ev)
    model.params.zero_grad()
    return res


def model_meta(model: CfmModel) -> dict:
    return {"kind": "cfm", "config": model.config.to_dict()}


def model_from_checkpoint(params: ParamStore, meta: dict | None) -> CfmModel:
    if not meta or meta.get("kind") != "cfm":
        raise ValueError("checkpoint is not a CFM checkpoint")
    cfg = CfmConfig(**meta["config"])
    ref = init_cfm(cfg)
    if set(ref.params.names()) != set(params.names()):
        raise ValueError("checkpoint parameters do not match the configuration")
    for name in params:
        if params[name].shape != ref.params[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
    return CfmModel(cfg, params)
