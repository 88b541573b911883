"""Oracles, desk-scale experiments and the randomized property suite."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import routing
from .banks import BankSpec, KVBank, build_bank
from .budget import BudgetInputs, kv_ratio
from .errors import InvalidArgument
from .model import Model, ModelConfig, StepTrace, decode_step, forward, generate, new_state, prefill, synth_model
from .numerics import RotaryOperator, logsumexp, softmax
from .plan import SteeringPlan
from .routing import BankSlice, RoutingGains
from .selector import SelectorConfig, select


def oracle_attend(query, all_keys, all_values, slot_biases) -> np.ndarray:
    """Exact concatenated softmax attention with per-slot additive biases.

    Plain loops in float64; keys must already live in the query's frame.
    """
    q = [float(x) for x in np.asarray(query, dtype=np.float64)]
    d = len(q)
    logits = []
    for key, bias in zip(np.asarray(all_keys, dtype=np.float64), slot_biases):
        dot = 0.0
        for a, b in zip(q, key):
            dot += a * b
        logits.append(dot / math.sqrt(d) + float(bias))
    top = max(logits)
    weights = [math.exp(l - top) for l in logits]
    z = sum(weights)
    out = np.zeros(d)
    for w, v in zip(weights, np.asarray(all_values, dtype=np.float64)):
        out += (w / z) * v
    return out


def _rotate_pairs(vec, angle_per_pair) -> np.ndarray:
    """Explicit 2x2 rotation of coordinate pairs (independent of RotaryOperator)."""
    out = np.array(vec, dtype=np.float64)
    for i, ang in enumerate(angle_per_pair):
        c, s = math.cos(ang), math.sin(ang)
        x, y = out[2 * i], out[2 * i + 1]
        out[2 * i], out[2 * i + 1] = c * x - s * y, s * x + c * y
    return out


def oracle_inputs(query, position, prompt_keys, prompt_values, banks: Sequence[BankSlice],
                  gains: RoutingGains, layer: int, rope: RotaryOperator):
    """Flattened keys/values/biases for :func:`oracle_attend`, derived from first principles.

    Bank keys are moved into the live query's frame by rotating them forward to
    ``position + phase``. Biases follow the size-normalized contrastive evidence
    definitions directly rather than calling into :mod:`latentbank.routing`.
    """
    q = np.asarray(query, dtype=np.float64)
    d = q.size
    T = len(prompt_keys)
    keys = [np.asarray(k, dtype=np.float64) for k in prompt_keys]
    values = [np.asarray(v, dtype=np.float64) for v in prompt_values]
    biases = [-math.log(T)] * T
    framed = []
    for b in banks:
        phases = np.zeros(b.size) if b.phases is None else np.asarray(b.phases, dtype=np.float64)
        ks = [_rotate_pairs(k, (position + p) * rope.freqs) for k, p in zip(np.asarray(b.keys, dtype=np.float64), phases)]
        framed.append(ks)
    def mean_evidence(ks):
        return math.log(sum(math.exp(float(q @ k) / math.sqrt(d)) for k in ks) / len(ks))
    tgt = [i for i, b in enumerate(banks) if b.role == "target"]
    ref = [i for i, b in enumerate(banks) if b.role == "reference"]
    g_plus, g_minus = 1.0, 0.0
    if tgt and ref:
        delta = mean_evidence(framed[tgt[0]]) - mean_evidence(framed[ref[0]])
        g_plus = 1.0 / (1.0 + math.exp(-gains.gamma * delta))
        g_minus = 1.0 / (1.0 + math.exp(gains.gamma * delta))
    rho = gains.layer_gains.get(layer, 1.0)
    for b, ks in zip(banks, framed):
        if b.role == "target":
            gain = rho * gains.lambda_plus * g_plus
        elif b.role == "reference":
            gain = -rho * gains.lambda_minus * g_minus
        else:
            gain = gains.aux_gains.get(b.bank_id, 0.0)
        bias = b.prior + gain - math.log(b.size)
        keys.extend(ks)
        values.extend(np.asarray(b.values, dtype=np.float64))
        biases.extend([bias] * b.size)
    return np.array(keys).reshape(-1, d), np.array(values).reshape(-1, d), biases


# ---------------------------------------------------------------------------
# Synthetic constructions


def plant_aligned_unit(model: Model, layer: int, unit: int, strength: float = 3.0, seed: int = 0) -> Model:
    """Copy of ``model`` where one kv unit's queries align with its own keys.

    A shared random direction ``n`` is added to every token embedding, and the first
    query row of every head in the unit's group plus the unit's first key row are
    set to ``strength * n / sqrt(d_model)``. Pre-RoPE query/key dot products at that
    unit then carry a large positive common term.
    """
    c = model.config
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(c.d_model)
    n /= np.linalg.norm(n)
    t = {k: np.array(v) for k, v in model.tensors.items()}
    emb = t["embed"].astype(np.float64)
    emb += np.linalg.norm(emb, axis=1).mean() * n
    t["embed"] = emb
    row = strength * n / math.sqrt(c.d_model)
    wq, wk = t[f"layers.{layer}.wq"], t[f"layers.{layer}.wk"]
    for h in range(unit * c.group_size, (unit + 1) * c.group_size):
        wq[h * c.head_dim] = row
    wk[unit * c.head_dim] = row
    return Model(c, t)


@dataclass(frozen=True)
class MarkerTask:
    marker_token: int
    bank_spec: BankSpec
    prompts: tuple[tuple[int, ...], ...]
    steps: int = 8

    def check(self, model: Model):
        if not 0 <= self.marker_token < model.config.vocab_size:
            raise InvalidArgument("marker token outside the vocabulary")


def marker_direction(model: Model, marker: int) -> np.ndarray:
    u = model.w("unembed")
    return u[marker] - u.mean(axis=0)


def build_marker_bank(model: Model, task: MarkerTask, sites, value_norm: float = 8.0) -> KVBank:
    """Bank built from ``task.bank_spec`` whose values are replaced, per site, by the
    least-squares preimage under the unit's summed W_O columns of the marker's
    (mean-centered) unembedding row."""
    task.check(model)
    bank = build_bank(model, task.bank_spec, sites)
    c = model.config
    target = marker_direction(model, task.marker_token)
    new_values = {}
    for l, u in bank.sites:
        wo = model.lw(l, "wo")
        cols = sum(wo[:, h * c.head_dim:(h + 1) * c.head_dim] for h in range(u * c.group_size, (u + 1) * c.group_size))
        v, *_ = np.linalg.lstsq(cols, target, rcond=None)
        v *= value_norm / max(np.linalg.norm(v), 1e-12)
        new_values[(l, u)] = np.tile(v, (bank.slot_count, 1))
    return bank.with_values(new_values)


@dataclass
class ExperimentResult:
    deltas: list[np.ndarray]  # per prompt, marker-logit delta per step
    mean_masses: dict[str, float]
    locality_ok: bool
    runtime: float
    steered_tokens: list[list[int]] = field(default_factory=list)

    @property
    def mean_deltas(self) -> list[float]:
        return [float(d.mean()) for d in self.deltas]

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.mean_deltas))


def run_marker_experiment(model: Model, plan: SteeringPlan | None, task: MarkerTask) -> ExperimentResult:
    """Greedy plain decode, then a teacher-forced steered pass over the same tokens.

    Deltas compare the marker logit at identical contexts; locality compares the
    residual stream of layers below the plan's lowest layer bit for bit.
    """
    task.check(model)
    if plan is not None:
        plan.validate(model)
    start = time.perf_counter()
    low = min(plan.layers) if plan is not None and plan.layers else model.config.n_layers
    deltas, steered_tokens = [], []
    masses = {r: [] for r in routing.ROLES}
    locality_ok = True
    for prompt in task.prompts:
        plain_recs: list[StepTrace] = []
        tokens, plain_logits = generate(model, prompt, task.steps, None, plain_recs)
        ids = list(prompt)
        state = prefill(model, ids[:-1])[0] if len(ids) > 1 else new_state(model)
        feed = [ids[-1]] + tokens[:-1]
        steered = []
        for tok, prec in zip(feed, plain_recs):
            rec = StepTrace()
            steered.append(decode_step(model, state, tok, plan, rec))
            for l in range(low):
                if not np.array_equal(rec.hidden[l], prec.hidden[l]):
                    locality_ok = False
            for _, _, diag in rec.diagnostics:
                for r in routing.ROLES:
                    masses[r].append(diag.mass(r))
        steered = np.array(steered)
        deltas.append(steered[:, task.marker_token] - plain_logits[:, task.marker_token])
        steered_tokens.append([int(np.argmax(s)) for s in steered])
    mean_masses = {r: (float(np.mean(v)) if v else 0.0) for r, v in masses.items()}
    return ExperimentResult(deltas, mean_masses, locality_ok, time.perf_counter() - start, steered_tokens)


# ---------------------------------------------------------------------------
# Property suite

ROLE_LAYOUTS = (
    (), ("target",), ("target", "reference"), ("target", "reference", "auxiliary"),
    ("auxiliary",), ("auxiliary", "auxiliary"), ("target", "auxiliary", "auxiliary"),
)


@dataclass
class RoutingInstance:
    d_h: int
    position: int
    query: np.ndarray
    prompt_keys: np.ndarray
    prompt_values: np.ndarray
    banks: list[BankSlice]
    gains: RoutingGains
    layer: int = 0

    @property
    def rope(self) -> RotaryOperator:
        return RotaryOperator(self.d_h)

    def describe(self) -> dict:
        return {
            "d_h": self.d_h, "position": self.position, "T": len(self.prompt_keys),
            "banks": [(b.role, b.size, b.prior) for b in self.banks],
            "gains": (self.gains.lambda_plus, self.gains.lambda_minus, self.gains.gamma, dict(self.gains.layer_gains)),
            "query": self.query.tolist(),
        }


def random_instance(rng: np.random.Generator, d_h: int, max_T: int = 8, max_M: int = 5,
                    layouts=ROLE_LAYOUTS, phases: bool = True) -> RoutingInstance:
    T = int(rng.integers(1, max_T + 1))
    roles = layouts[int(rng.integers(len(layouts)))]
    banks = []
    for i, role in enumerate(roles):
        M = int(rng.integers(1, max_M + 1))
        ph = rng.integers(-8, 9, size=M) if phases and rng.random() < 0.3 else None
        banks.append(BankSlice(rng.normal(size=(M, d_h)), rng.normal(size=(M, d_h)), role,
                               float(rng.normal(scale=0.5)), ph, f"{role}{i}"))
    has_ref = "reference" in roles
    layer = int(rng.integers(0, 4))
    gains = RoutingGains(
        lambda_plus=float(rng.uniform(0, 4)),
        lambda_minus=float(rng.uniform(0, 4)) if has_ref else 0.0,
        gamma=float(rng.choice([0.1, 1.0, 10.0])),
        layer_gains={layer: float(rng.uniform(0.25, 2.0))},
        aux_gains={b.bank_id: float(rng.uniform(0, 2)) for b in banks if b.role == "auxiliary"},
    )
    return RoutingInstance(d_h, int(rng.choice([0, 1, 7, 17, int(rng.integers(0, 1100))])),
                           rng.normal(size=d_h), rng.normal(size=(T, d_h)), rng.normal(size=(T, d_h)),
                           banks, gains, layer)


def check_mixture_equivalence(inst: RoutingInstance, tol: float = 1e-6) -> dict | None:
    """mixture == augmented == oracle within ``tol`` per coordinate."""
    kw = dict(position=inst.position, rope=inst.rope)
    mix, _ = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, inst.banks, inst.gains,
                                    inst.layer, **kw)
    biases = routing.mixture_slot_biases(inst.query, inst.banks, inst.gains, inst.layer, **kw)
    aug, _ = routing.attend_augmented(inst.query, inst.prompt_keys, inst.prompt_values,
                                      list(zip(inst.banks, biases)), **kw)
    K, V, b = oracle_inputs(inst.query, inst.position, inst.prompt_keys, inst.prompt_values, inst.banks,
                            inst.gains, inst.layer, inst.rope)
    ora = oracle_attend(inst.query, K, V, b)
    err = max(np.abs(mix - aug).max(), np.abs(mix - ora).max(), np.abs(aug - ora).max())
    if not err <= tol:
        return {"max_abs_err": float(err), **inst.describe()}
    return None


def _prop_mixture_equivalence(rng, d_h):
    return check_mixture_equivalence(random_instance(rng, d_h))


def _prop_rope_invariance(rng, d_h):
    rope = RotaryOperator(d_h)
    q_bar = rng.normal(size=d_h)
    M = int(rng.integers(1, 6))
    keys = rng.normal(size=(M, d_h))
    bank = BankSlice(keys, keys, "target")
    ref = None
    for t in (0, 1, 17, 1024):
        s = routing.memory_scores(rope.apply(q_bar, t), t, bank, rope)
        if ref is None:
            ref = s
        elif np.abs(s - ref).max() > 1e-6:
            return {"position": t, "err": float(np.abs(s - ref).max())}
    phases = rng.integers(-50, 51, size=M)
    t = int(rng.integers(0, 2000))
    s = routing.memory_scores(rope.apply(q_bar, t), t, BankSlice(keys, keys, "target", 0.0, phases), rope)
    direct = np.array([q_bar @ _rotate_pairs(k, p * rope.freqs) / math.sqrt(d_h) for k, p in zip(keys, phases)])
    if np.abs(s - direct).max() > 1e-6:
        return {"phases": phases.tolist(), "err": float(np.abs(s - direct).max())}
    return None


def _prop_size_normalization(rng, d_h):
    inst = random_instance(rng, d_h, layouts=ROLE_LAYOUTS[1:], phases=False)
    r = int(rng.choice([2, 3, 5]))
    i = int(rng.integers(len(inst.banks)))
    b = inst.banks[i]
    dup = BankSlice(np.repeat(b.keys, r, axis=0), np.repeat(b.values, r, axis=0), b.role, b.prior, None, b.bank_id)
    banks2 = list(inst.banks)
    banks2[i] = dup
    kw = dict(position=inst.position, rope=inst.rope)
    o1, d1 = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, inst.banks, inst.gains, inst.layer, **kw)
    o2, d2 = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, banks2, inst.gains, inst.layer, **kw)
    j = i + 1
    checks = {
        "raw_shift": abs((d2.evidence_raw[j] - d1.evidence_raw[j]) - math.log(r)),
        "beta": max(abs(a - c) for a, c in zip(d1.beta, d2.beta)),
        "output": float(np.abs(o1 - o2).max()),
    }
    bad = {k: v for k, v in checks.items() if not v <= 1e-9}
    return {"r": r, **bad, **inst.describe()} if bad else None


def _prop_gates(rng, d_h):
    gamma = float(rng.choice([0.1, 1.0, 10.0]))
    delta = float(rng.uniform(-50, 50))
    gp, gm = routing.contrastive_gates(delta, gamma)
    if abs(gp + gm - 1.0) > np.finfo(float).eps:
        return {"delta": delta, "gamma": gamma, "sum": gp + gm}
    if routing.contrastive_gates(0.0, gamma) != (0.5, 0.5):
        return {"delta": 0.0, "gamma": gamma}
    return None


def _prop_pi_distribution(rng, d_h):
    inst = random_instance(rng, d_h)
    _, diag = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, inst.banks, inst.gains,
                                     inst.layer, position=inst.position, rope=inst.rope)
    if abs(sum(diag.pi) - 1.0) > 1e-9 or min(diag.pi) < 0:
        return {"pi": diag.pi}
    total = sum(diag.mass(r) for r in routing.ROLES)
    if abs(total - 1.0) > 1e-9:
        return {"masses": diag.masses}
    return None


def _prop_lambda_monotone(rng, d_h):
    inst = random_instance(rng, d_h, layouts=[l for l in ROLE_LAYOUTS if "target" in l])
    g = inst.gains
    bump = RoutingGains(g.lambda_plus + float(rng.uniform(0, 5)), g.lambda_minus, g.gamma,
                        dict(g.layer_gains), dict(g.aux_gains))
    kw = dict(position=inst.position, rope=inst.rope)
    _, d1 = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, inst.banks, g, inst.layer, **kw)
    _, d2 = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, inst.banks, bump, inst.layer, **kw)
    if d2.mass("target") < d1.mass("target") - 1e-15:
        return {"before": d1.mass("target"), "after": d2.mass("target"), **inst.describe()}
    return None


def _prop_sidebank(rng, d_h):
    inst = random_instance(rng, d_h)
    kw = dict(position=inst.position, rope=inst.rope)
    mix, _ = routing.attend_mixture(inst.query, inst.prompt_keys, inst.prompt_values, inst.banks, inst.gains,
                                    inst.layer, **kw)
    host = routing.attend_baseline(inst.query, inst.prompt_keys, inst.prompt_values)
    sx = routing.prompt_scores(inst.query, inst.prompt_keys)
    synth = logsumexp(sx) - math.log(sx.size)
    side, _ = routing.attend_sidebank(host, synth, inst.query, inst.banks, inst.gains, inst.layer, **kw)
    err = float(np.abs(side - mix).max())
    return {"err": err, **inst.describe()} if err > 1e-6 else None


def _prop_numerics(rng, d_h):
    n = int(rng.integers(1, 10))
    s = rng.normal(scale=20, size=n)
    c = float(rng.normal(scale=100))
    if np.abs(softmax(s) - softmax(s + c)).max() > 1e-9:
        return {"what": "softmax shift", "scores": s.tolist(), "c": c}
    lse = logsumexp(s)
    if not (lse >= s.max() - 1e-12 and lse <= s.max() + math.log(n) + 1e-12):
        return {"what": "lse bounds", "scores": s.tolist()}
    rope = RotaryOperator(d_h)
    v = rng.normal(size=d_h)
    a, b = (int(x) for x in rng.integers(-2000, 2000, size=2))
    if abs(np.linalg.norm(rope.apply(v, a)) - np.linalg.norm(v)) > 1e-6 * np.linalg.norm(v):
        return {"what": "rope norm", "a": a}
    if np.abs(rope.apply(rope.apply(v, a), b) - rope.apply(v, a + b)).max() > 1e-6:
        return {"what": "rope additivity", "a": a, "b": b}
    return None


def _prop_kv_ratio(rng, d_h):
    L = int(rng.integers(1, 100))
    inp = BudgetInputs(L, int(rng.integers(1, L + 1)), int(rng.integers(1, 5000)), int(rng.integers(1, 5000)))
    f = int(rng.integers(2, 50))
    scaled = BudgetInputs(inp.L, inp.L_ctrl, inp.T_prompt * f, inp.S_bank * f)
    if kv_ratio(inp) != kv_ratio(scaled):
        return {"inputs": inp, "factor": f}
    return None


def _prop_selector(rng, d_h):
    n_layers = int(rng.integers(1, 6))
    n_units = int(rng.integers(1, 6))
    scores = {(l, u): float(rng.normal()) for l in range(n_layers) for u in range(n_units)}
    if rng.random() < 0.3:
        scores = {s: float(round(v)) for s, v in scores.items()}  # ties
    cfg = SelectorConfig(k=int(rng.integers(1, 4)), m=int(rng.integers(1, 4)),
                         aggregation=str(rng.choice(["sum", "mean"])))
    art = select(scores, cfg)
    if len(art.layers) > cfg.m or any(len(us) > cfg.k for us in art.units.values()):
        return {"what": "budget", "k": cfg.k, "m": cfg.m}
    c = float(rng.normal(scale=10))
    shifted = select({s: v + c for s, v in scores.items()}, cfg)
    if (shifted.layers, dict(shifted.units)) != (art.layers, dict(art.units)):
        return {"what": "shift invariance", "c": c}
    return None


def _small_config(rng, d_h, dense: bool | None = None) -> ModelConfig:
    n_kv = int(rng.choice([1, 2]))
    G = 1 if dense else int(rng.choice([1, 2]))
    return ModelConfig(n_layers=int(rng.choice([2, 4])), d_model=n_kv * G * d_h, n_q_heads=n_kv * G,
                       n_kv_heads=n_kv, head_dim=d_h, vocab_size=64, qk_norm_enabled=bool(rng.random() < 0.5))


def _prop_cache_equivalence(rng, d_h):
    cfg = _small_config(rng, d_h)
    model = synth_model(cfg, int(rng.integers(1 << 30)))
    toks = rng.integers(0, cfg.vocab_size, size=int(rng.integers(2, 9)))
    full = forward(model, toks)
    state = new_state(model)
    for i, t in enumerate(toks):
        step = decode_step(model, state, int(t))
        if np.abs(step - full[i]).max() > 1e-5:
            return {"config": cfg.to_dict(), "position": i}
    return None


def dense_equivalent(model: Model) -> Model:
    """Dense model whose kv heads replicate a GQA model's groups."""
    c = model.config
    G, d = c.group_size, c.head_dim
    dense_cfg = ModelConfig(**{**c.to_dict(), "n_kv_heads": c.n_q_heads})
    t = {k: np.array(v) for k, v in model.tensors.items()}
    for l in range(c.n_layers):
        for name in ("wk", "wv"):
            w = t[f"layers.{l}.{name}"].reshape(c.n_kv_heads, d, c.d_model)
            t[f"layers.{l}.{name}"] = np.repeat(w, G, axis=0).reshape(c.n_q_heads * d, c.d_model)
    return Model(dense_cfg, t)


def _prop_gqa(rng, d_h):
    cfg = _small_config(rng, d_h)
    model = synth_model(cfg, int(rng.integers(1 << 30)))
    dense = dense_equivalent(model)
    toks = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 8)))
    err = float(np.abs(forward(model, toks) - forward(dense, toks)).max())
    return {"config": cfg.to_dict(), "err": err} if err > 1e-6 else None


def _prop_locality(rng, d_h):
    cfg = _small_config(rng, d_h)
    model = synth_model(cfg, int(rng.integers(1 << 30)))
    layers = sorted({int(x) for x in rng.integers(0, cfg.n_layers, size=2)})
    units = (int(rng.integers(cfg.n_kv_heads)),)
    sites = [(l, units[0]) for l in layers]
    M = int(rng.integers(1, 4))
    bank = KVBank("b", "target", model.fingerprint, tuple(sites),
                  {s: rng.normal(size=(M, d_h)) for s in sites}, {s: rng.normal(size=(M, d_h)) for s in sites})
    plan = SteeringPlan({l: units for l in layers}, (bank,), RoutingGains(lambda_plus=2.0))
    empty = SteeringPlan({l: units for l in layers}, (), RoutingGains())
    prompt = rng.integers(0, cfg.vocab_size, size=int(rng.integers(2, 6)))
    s0 = prefill(model, prompt[:-1])[0]
    s1, s2 = s0.copy(), s0.copy()
    r0, r1 = StepTrace(), StepTrace()
    plain = decode_step(model, s0, int(prompt[-1]), None, r0)
    steered = decode_step(model, s1, int(prompt[-1]), plan, r1)
    noop = decode_step(model, s2, int(prompt[-1]), empty)
    if not np.array_equal(plain, noop):
        return {"what": "empty plan changed logits"}
    for l in range(min(layers)):
        if not np.array_equal(r0.hidden[l], r1.hidden[l]):
            return {"what": "locality", "layer": l, "plan_layers": layers}
    return None


PROPERTIES: dict[str, Callable] = {
    "mixture_equivalence": _prop_mixture_equivalence,
    "rope_position_invariance": _prop_rope_invariance,
    "size_normalization": _prop_size_normalization,
    "gate_complementarity": _prop_gates,
    "mixture_is_distribution": _prop_pi_distribution,
    "lambda_plus_monotone": _prop_lambda_monotone,
    "sidebank_consistency": _prop_sidebank,
    "numerics": _prop_numerics,
    "kv_ratio_homogeneous": _prop_kv_ratio,
    "selector_budget_and_shift": _prop_selector,
}
MODEL_PROPERTIES: dict[str, Callable] = {
    "cache_equivalence": _prop_cache_equivalence,
    "gqa_dense_consistency": _prop_gqa,
    "steering_locality_and_noop": _prop_locality,
}


@dataclass
class PropertyResult:
    name: str
    size: int
    passed: bool
    instances: int
    seconds: float
    counterexample: dict | None = None

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        s = f"{verdict} {self.name} d_h={self.size} n={self.instances} ({self.seconds:.3f}s)"
        if self.counterexample is not None:
            s += f"\n    counterexample: {self.counterexample}"
        return s


@dataclass
class PropertyReport:
    seed: int
    results: list[PropertyResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def format(self) -> str:
        lines = [r.line() for r in self.results]
        n_fail = sum(not r.passed for r in self.results)
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} property checks passed (seed={self.seed})")
        return "\n".join(lines)


DEFAULT_SIZES = (4, 8, 16)


def run_property_suite(seed: int = 0, sizes: Sequence[int] = DEFAULT_SIZES, instances: int = 200,
                       model_instances: int = 4, properties: Sequence[str] | None = None) -> PropertyReport:
    """Run every property over seeded random instances.

    ``instances`` routing instances per property are split evenly over ``sizes``
    (head dims); model-level properties run ``model_instances`` per size.
    Instance streams depend only on ``(seed, property index, size)``.
    """
    report = PropertyReport(seed)
    if not sizes:
        return report
    table = {**PROPERTIES, **MODEL_PROPERTIES}
    names = list(table) if properties is None else list(properties)
    per_size = math.ceil(instances / len(sizes))
    for pi, name in enumerate(names):
        fn = table[name]
        n = model_instances if name in MODEL_PROPERTIES else per_size
        for d_h in sizes:
            rng = np.random.default_rng([seed, pi, d_h])
            start = time.perf_counter()
            bad, done = None, 0
            for _ in range(n):
                done += 1
                try:
                    bad = fn(rng, d_h)
                except Exception as e:  # a crash is a failure with its own counterexample
                    bad = {"exception": repr(e)}
                if bad is not None:
                    break
            report.results.append(PropertyResult(name, d_h, bad is None, done, time.perf_counter() - start, bad))
    return report
