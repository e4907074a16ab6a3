"""Adam optimizer over tape Parameters.

Per-parameter first/second moment buffers follow the parameter's shape and
are padded with zero rows when a feature parameter grows (new points keep
zero moments, existing points keep theirs). Steps with non-finite gradients
are skipped instead of corrupting the state: a SLAM run must survive the
occasional degenerate frame.
"""

from __future__ import annotations

import logging

import numpy as np

from .tape import Parameter

log = logging.getLogger(__name__)


class AdamState:
    """Moment buffers and step count for one parameter group."""

    def __init__(self, params: list[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def _sync_shapes(self, p: Parameter) -> None:
        m = self._m[id(p)]
        if m.shape != p.value.shape:
            if m.ndim != p.value.ndim or m.shape[1:] != p.value.shape[1:] \
                    or m.shape[0] > p.value.shape[0]:
                raise ValueError(
                    f"parameter {p.name!r} changed shape {m.shape} -> {p.value.shape}; "
                    "only row growth is supported")
            pad = p.value.shape[0] - m.shape[0]
            padding = np.zeros((pad,) + m.shape[1:], dtype=m.dtype)
            self._m[id(p)] = np.concatenate([m, padding], axis=0)
            self._v[id(p)] = np.concatenate([self._v[id(p)], padding.copy()], axis=0)


def adam_step(state: AdamState, lr: float | None = None) -> bool:
    """One bias-corrected Adam update over the group; zeroes gradients.

    Returns False (and leaves parameters and moments untouched) when any
    gradient in the group is non-finite.
    """
    if lr is None:
        lr = state.lr
    for p in state.params:
        if not np.all(np.isfinite(p.grad)):
            log.warning("adam_step: non-finite gradient on %r, skipping step", p.name)
            for q in state.params:
                q.zero_grad()
            return False

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in state.params:
        state._sync_shapes(p)
        g = p.grad
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.value
        m = state._m[id(p)]
        v = state._v[id(p)]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
    return True
