"""Stable scalar/vector kernels: softmax, log-sum-exp, RMS norm, rotary operator.

Everything here computes in float64. RoPE pairs consecutive coordinates
``(2i, 2i+1)``; the same convention is used for queries, prompt keys and bank keys.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


def _as_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidArgument("scores must be a nonempty 1-D sequence")
    if np.isnan(s).any():
        raise InvalidArgument("scores contain NaN")
    return s


def softmax(scores) -> np.ndarray:
    s = _as_scores(scores)
    e = np.exp(s - s.max())
    return e / e.sum()


def logsumexp(scores) -> float:
    s = _as_scores(scores)
    if s.size == 1:
        return float(s[0])
    m = s.max()
    return float(m + math.log(np.exp(s - m).sum()))


def sigmoid_pair(x: float) -> tuple[float, float]:
    """Return ``(sigmoid(x), sigmoid(-x))`` with the pair summing to 1 up to one rounding.

    The smaller member is computed directly so tails keep full relative precision.
    """
    x = float(x)
    if x >= 0:
        small = 1.0 / (1.0 + math.exp(x))
        return 1.0 - small, small
    small = 1.0 / (1.0 + math.exp(-x))
    return small, 1.0 - small


def rms_norm(vec, gain, eps: float = 1e-6) -> np.ndarray:
    """Scale by ``1/sqrt(mean(x^2) + eps)`` along the last axis, then multiply by ``gain``."""
    x = np.asarray(vec, dtype=np.float64)
    g = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != g.shape[-1]:
        raise InvalidArgument(f"length mismatch: vec {x.shape[-1]} vs gain {g.shape[-1]}")
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * g


@dataclass(frozen=True)
class RotaryOperator:
    head_dim: int
    theta_base: float = 10000.0
    freqs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise InvalidArgument(f"head_dim must be even and positive, got {self.head_dim}")
        if self.theta_base <= 0:
            raise InvalidArgument("theta_base must be positive")
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        freqs = self.theta_base ** (-2.0 * i / self.head_dim)
        freqs.setflags(write=False)
        object.__setattr__(self, "freqs", freqs)

    def _rotate(self, vec, position, sign: float) -> np.ndarray:
        x = np.asarray(vec, dtype=np.float64)
        if x.shape[-1] % 2:
            raise InvalidArgument("rotary input must have even length")
        if x.shape[-1] != self.head_dim:
            raise InvalidArgument(f"expected last dim {self.head_dim}, got {x.shape[-1]}")
        pos = np.asarray(position, dtype=np.float64)[..., None]
        ang = sign * pos * self.freqs
        cos, sin = np.cos(ang), np.sin(ang)
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (self.head_dim,)))
        out[..., 0::2] = even * cos - odd * sin
        out[..., 1::2] = even * sin + odd * cos
        return out

    def apply(self, vec, position) -> np.ndarray:
        """Rotate each coordinate pair by ``position * freq``.

        ``position`` may be a scalar or an array broadcasting against ``vec.shape[:-1]``.
        """
        return self._rotate(vec, position, 1.0)

    def unapply(self, vec, position) -> np.ndarray:
        return self._rotate(vec, position, -1.0)
