"""Attention paths for selected sites.

Three ways of mixing prompt/history attention with memory banks:

* :func:`attend_augmented`: one softmax over prompt slots and bank slots with
  per-bank slot biases (the concatenated-cache reference).
* :func:`attend_mixture`: the factored form, within-bank softmax outputs weighted by
  a softmax over size-normalized bank evidences, with contrastive gating.
* :func:`attend_sidebank`: the mixture where the host's own attention output stands
  in for the prompt bank and its evidence is a single synthetic score.

Prompt keys are post-RoPE and scored against the live query. Bank keys are
canonical (pre-RoPE) and scored against the de-rotated query, optionally rotated
by a per-slot relative phase.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidArgument
from .numerics import RotaryOperator, logsumexp, sigmoid_pair, softmax

ROLES = ("prompt", "target", "reference", "auxiliary")


@dataclass(frozen=True)
class BankSlice:
    """The slots of one bank at one (layer, kv-unit) site."""

    keys: np.ndarray  # (M, d_h), canonical pre-RoPE
    values: np.ndarray  # (M, d_h)
    role: str = "target"
    prior: float = 0.0
    phases: np.ndarray | None = None  # (M,) integer relative phases
    bank_id: str = ""

    def __post_init__(self):
        if self.role not in ROLES[1:]:
            raise InvalidArgument(f"bank role must be target/reference/auxiliary, got {self.role!r}")
        k = np.asarray(self.keys)
        v = np.asarray(self.values)
        if k.ndim != 2 or k.shape != v.shape or k.shape[0] < 1:
            raise InvalidArgument(f"bank keys/values must be matching (M>=1, d_h), got {k.shape} {v.shape}")
        if self.phases is not None and np.asarray(self.phases).shape != (k.shape[0],):
            raise InvalidArgument("phases must have one entry per slot")

    @property
    def size(self) -> int:
        return self.keys.shape[0]


@dataclass(frozen=True)
class RoutingGains:
    lambda_plus: float = 0.0
    lambda_minus: float = 0.0
    gamma: float = 1.0
    layer_gains: Mapping[int, float] = field(default_factory=dict)
    aux_gains: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_plus < 0 or self.lambda_minus < 0:
            raise InvalidArgument("lambda_plus and lambda_minus must be nonnegative")
        if self.gamma <= 0:
            raise InvalidArgument("gamma must be positive")
        if any(g < 0 for g in self.aux_gains.values()):
            raise InvalidArgument("auxiliary gains must be nonnegative")

    def rho(self, layer: int) -> float:
        return float(self.layer_gains.get(layer, 1.0))

    def observation(self) -> "RoutingGains":
        """Same gains with every steering term zeroed."""
        return RoutingGains(0.0, 0.0, self.gamma, dict(self.layer_gains), {})


@dataclass(frozen=True)
class RoutingDiagnostics:
    """Per-step, per-site routing record. Entry 0 is always the prompt bank."""

    bank_ids: tuple[str, ...]
    roles: tuple[str, ...]
    evidence_raw: tuple[float, ...]  # lse + prior + gain terms, before -ln M
    beta: tuple[float, ...]  # size-normalized evidence; drives routing
    pi: tuple[float, ...]
    delta: float | None = None
    g_plus: float | None = None
    g_minus: float | None = None

    def mass(self, role: str) -> float:
        return float(sum(p for p, r in zip(self.pi, self.roles) if r == role))

    @property
    def masses(self) -> dict[str, float]:
        return {r: self.mass(r) for r in ROLES}

    def to_record(self, **context) -> dict:
        rec = dict(context)
        rec.update(
            banks=list(self.bank_ids), roles=list(self.roles),
            evidence_raw=list(self.evidence_raw), beta=list(self.beta), pi=list(self.pi),
            masses=self.masses, delta=self.delta, g_plus=self.g_plus, g_minus=self.g_minus,
        )
        return rec

    def to_json(self, **context) -> str:
        return json.dumps(self.to_record(**context), sort_keys=True)


def _scale(d: int) -> float:
    return 1.0 / math.sqrt(d)


def attend_baseline(query, keys, values) -> np.ndarray:
    """``softmax(q K^T / sqrt(d_h)) V``."""
    q = np.asarray(query, dtype=np.float64)
    K = np.asarray(keys, dtype=np.float64)
    V = np.asarray(values, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] == 0:
        raise InvalidArgument("attention needs at least one key")
    if K.shape[1] != q.shape[0] or V.shape[0] != K.shape[0]:
        raise InvalidArgument(f"dimension mismatch: q {q.shape}, K {K.shape}, V {V.shape}")
    return softmax(K @ q * _scale(q.shape[0])) @ V


def memory_scores(query, position: int, bank: BankSlice, rope: RotaryOperator) -> np.ndarray:
    """Scores of a post-RoPE query at ``position`` against canonical bank keys."""
    q = np.asarray(query, dtype=np.float64)
    keys = np.asarray(bank.keys, dtype=np.float64)
    if keys.shape[1] != q.shape[0]:
        raise InvalidArgument(f"bank slot dim {keys.shape[1]} != query dim {q.shape[0]}")
    q_bar = rope.unapply(q, position)
    if bank.phases is not None and np.any(bank.phases):
        keys = rope.apply(keys, np.asarray(bank.phases, dtype=np.float64))
    return keys @ q_bar * _scale(q.shape[0])


def prompt_scores(query, keys) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    K = np.asarray(keys, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] == 0:
        raise InvalidArgument("prompt must have at least one key")
    if K.shape[1] != q.shape[0]:
        raise InvalidArgument(f"prompt key dim {K.shape[1]} != query dim {q.shape[0]}")
    return K @ q * _scale(q.shape[0])


def contrastive_gates(delta: float, gamma: float) -> tuple[float, float]:
    return sigmoid_pair(gamma * delta)


def _role_gain(role: str, bank_id: str, gains: RoutingGains, rho: float, g_plus: float, g_minus: float) -> float:
    if role == "target":
        return rho * gains.lambda_plus * g_plus
    if role == "reference":
        return -rho * gains.lambda_minus * g_minus
    return float(gains.aux_gains.get(bank_id, 0.0))


def _check_roles(banks: Sequence[BankSlice], gains: RoutingGains):
    targets = [b for b in banks if b.role == "target"]
    refs = [b for b in banks if b.role == "reference"]
    if len(targets) > 1 or len(refs) > 1:
        raise ConfigurationError("at most one target and one reference bank per site")
    if refs and not targets:
        raise ConfigurationError("a reference bank needs a target bank to contrast against")
    if gains.lambda_minus > 0 and not refs:
        raise ConfigurationError("lambda_minus > 0 requires a reference bank")
    return (targets[0] if targets else None), (refs[0] if refs else None)


def _bank_terms(query, position, banks, gains, layer, rope):
    """Within-bank outputs, raw lse, and size-normalized betas for memory banks."""
    target, ref = _check_roles(banks, gains)
    scores = [memory_scores(query, position, b, rope) for b in banks]
    lse = [logsumexp(s) for s in scores]
    norm = {id(b): l - math.log(b.size) for b, l in zip(banks, lse)}
    delta = g_plus = g_minus = None
    if ref is not None:
        delta = norm[id(target)] - norm[id(ref)]
        g_plus, g_minus = contrastive_gates(delta, gains.gamma)
    elif target is not None:
        g_plus, g_minus = 1.0, 0.0
    rho = gains.rho(layer)
    betas, raws, outs = [], [], []
    for b, s, l in zip(banks, scores, lse):
        extra = b.prior + _role_gain(b.role, b.bank_id, gains, rho, g_plus or 0.0, g_minus or 0.0)
        raws.append(l + extra)
        betas.append(l - math.log(b.size) + extra)
        outs.append(softmax(s) @ np.asarray(b.values, dtype=np.float64))
    return outs, lse, raws, betas, delta, g_plus, g_minus


def _mix(prompt_out, prompt_beta, prompt_raw, query, banks, gains, layer, position, rope):
    outs, _, raws, betas, delta, gp, gm = _bank_terms(query, position, banks, gains, layer, rope)
    all_betas = [prompt_beta] + betas
    pi = softmax(all_betas)
    out = pi[0] * prompt_out
    for p, o in zip(pi[1:], outs):
        out = out + p * o
    diag = RoutingDiagnostics(
        bank_ids=("prompt",) + tuple(b.bank_id for b in banks),
        roles=("prompt",) + tuple(b.role for b in banks),
        evidence_raw=(prompt_raw, *raws),
        beta=tuple(float(b) for b in all_betas),
        pi=tuple(float(p) for p in pi),
        delta=delta, g_plus=gp, g_minus=gm,
    )
    return out, diag


def attend_mixture(query, prompt_keys, prompt_values, banks: Sequence[BankSlice], gains: RoutingGains,
                   layer: int, *, position: int, rope: RotaryOperator):
    """Bank-level mixture at one selected site.

    Prompt evidence is ``lse(s_x) - ln T``. Target evidence gains
    ``+rho * lambda_plus * g+``, reference evidence ``-rho * lambda_minus * g-`` where
    ``g+- = sigmoid(+-gamma * delta)`` and ``delta`` is the size-normalized
    target-minus-reference evidence gap. Without a reference bank ``g+ = 1``.
    """
    sx = prompt_scores(query, prompt_keys)
    V = np.asarray(prompt_values, dtype=np.float64)
    lse_x = logsumexp(sx)
    beta_x = lse_x - math.log(sx.size)
    o_x = softmax(sx) @ V
    return _mix(o_x, beta_x, lse_x, query, banks, gains, layer, position, rope)


def attend_sidebank(prompt_output, synthetic_prompt_score: float, query, banks: Sequence[BankSlice],
                    gains: RoutingGains, layer: int, *, position: int, rope: RotaryOperator):
    """Mixture with a precomputed prompt-side output and a single-slot prompt evidence."""
    o_x = np.asarray(prompt_output, dtype=np.float64)
    s = float(synthetic_prompt_score)
    return _mix(o_x, s, s, query, banks, gains, layer, position, rope)


def mixture_slot_biases(query, banks: Sequence[BankSlice], gains: RoutingGains, layer: int, *,
                        position: int, rope: RotaryOperator) -> list[float]:
    """Per-bank slot biases that make :func:`attend_augmented` reproduce :func:`attend_mixture`.

    Each is ``prior + gain term - ln M_b``; pair with the default prompt bias ``-ln T``.
    """
    if not banks:
        return []
    _, lse, _, betas, *_ = _bank_terms(query, position, banks, gains, layer, rope)
    return [beta - l for beta, l in zip(betas, lse)]


def attend_augmented(query, prompt_keys, prompt_values, banks: Sequence[tuple[BankSlice, float]], *,
                     position: int, rope: RotaryOperator, prompt_bias: float | None = None):
    """One softmax over prompt slots and every bank slot, each bank with a scalar slot bias.

    With no banks this is exactly :func:`attend_baseline`.
    """
    q = np.asarray(query, dtype=np.float64)
    if not banks:
        out = attend_baseline(q, prompt_keys, prompt_values)
        lse = logsumexp(prompt_scores(q, prompt_keys))
        return out, RoutingDiagnostics(("prompt",), ("prompt",), (lse,), (lse,), (1.0,))
    sx = prompt_scores(q, prompt_keys)
    if prompt_bias is None:
        prompt_bias = -math.log(sx.size)
    logits = [sx + prompt_bias]
    values = [np.asarray(prompt_values, dtype=np.float64)]
    raws = [logsumexp(sx)]
    for bank, bias in banks:
        s = memory_scores(q, position, bank, rope)
        logits.append(s + bias)
        values.append(np.asarray(bank.values, dtype=np.float64))
        raws.append(logsumexp(s) + bias + math.log(bank.size))
    flat = np.concatenate(logits)
    if values[0].shape[1] != q.shape[0] or any(v.shape[1] != q.shape[0] for v in values):
        raise InvalidArgument("value dims must equal the query dim")
    p = softmax(flat)
    out = p @ np.concatenate(values)
    bounds = np.cumsum([0] + [l.size for l in logits])
    pi = tuple(float(p[a:b].sum()) for a, b in zip(bounds[:-1], bounds[1:]))
    diag = RoutingDiagnostics(
        bank_ids=("prompt",) + tuple(b.bank_id for b, _ in banks),
        roles=("prompt",) + tuple(b.role for b, _ in banks),
        evidence_raw=tuple(raws),
        beta=tuple(logsumexp(l) for l in logits),
        pi=pi,
    )
    return out, diag


def caa_offset(hidden, direction, scale: float) -> np.ndarray:
    """Additive residual steering: ``hidden + scale * direction``."""
    h = np.asarray(hidden, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if h.shape != d.shape:
        raise InvalidArgument(f"length mismatch: hidden {h.shape} vs direction {d.shape}")
    if scale == 0:
        return h
    return h + scale * d
