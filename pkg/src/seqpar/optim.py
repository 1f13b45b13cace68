"""Optimizers over flat parameter lists.

SGD lives in :mod:`seqpar.model` because the distributed-equivalence story
is defined in terms of it; Adam is here for runs that should actually make
progress on a corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .model import Parameters

OPTIMIZERS = ("sgd", "adam")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: Parameters) -> "AdamState":
        arrays = params.arrays()
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def adam_step(
    params: Parameters,
    grads: Parameters,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Parameters:
    """Standard bias-corrected Adam; mutates ``state``, returns new params."""
    state.t += 1
    t = state.t
    out = []
    for i, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return params.replace_arrays(out)


def make_update(name: str, params: Parameters, lr: float):
    """(params, grads) -> new params closure; Adam state lives inside.

    Every worker builds its own closure over its own parameter copy, so
    optimizer state never crosses worker boundaries.
    """
    if name == "sgd":
        return lambda p, g: model.sgd_step(p, g, lr)
    if name == "adam":
        state = AdamState.init(params)
        return lambda p, g: adam_step(p, g, state, lr)
    raise ValueError(f"unknown optimizer {name!r}, expected one of {OPTIMIZERS}")
