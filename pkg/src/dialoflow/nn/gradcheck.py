from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .rng import Rng
from .tensor import NonFiniteError, Tensor, no_grad


def _eval(loss_fn, params) -> float:
    with no_grad():
        val = float(loss_fn(params).data)
    if not np.isfinite(val):
        raise NonFiniteError("loss is not finite")
    return val


def grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5,
               max_checks: int | None = 256, rng: Rng | None = None, floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Relative error per scalar is ``|a - n| / max(|a|, |n|, floor)``. When the
    store holds more than ``max_checks`` scalars a random subsample is checked.
    """
    params.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    loss.backward()
    analytic = params.grads()

    coords = [(name, i) for name in params for i in range(params[name].size)]
    if max_checks is not None and len(coords) > max_checks:
        rng = rng or Rng(0)
        pick = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[int(k)] for k in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _eval(loss_fn, params)
        flat[i] = orig - eps
        f_minus = _eval(loss_fn, params)
        flat[i] = orig
        num = (f_plus - f_minus) / (2 * eps)
        ana = analytic[name].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    params.zero_grad()
    return worst
