from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from ssmcast import diffmath as dm


def global_norm(grad: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for _, g in sorted(grad.items())))


@dataclass
class Adam:
    """Adaptive moment estimation with global-norm clipping.

    Names in ``frozen`` keep their values.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    frozen: frozenset = frozenset()

    def __post_init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def freeze(self, names: Iterable[str]) -> None:
        self.frozen = frozenset(self.frozen) | frozenset(names)

    def step(self, params: dm.ParameterSet, grad: Mapping[str, np.ndarray]) -> dm.ParameterSet:
        """Gradient descent step on a loss; returns the updated parameters."""
        live = {k: np.asarray(g) for k, g in grad.items() if k not in self.frozen}
        norm = global_norm(live)
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = min(1.0, self.clip_norm / norm) if norm > 0 and self.clip_norm else 1.0
        self.t += 1
        c1, c2 = 1 - self.beta1 ** self.t, 1 - self.beta2 ** self.t
        changes = {}
        for k in sorted(live):
            g = live[k] * scale
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            changes[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params.updated(changes)
