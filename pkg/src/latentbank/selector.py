"""Calibration tracing and two-stage unit/layer selection.

Units are kv-head indices. In a dense model a unit is a single attention head; in a
GQA model it is a KV group that expands to ``n_q_heads / n_kv_heads`` query heads.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .banks import KVBank, check_bank
from .errors import CompatibilityError, FormatError, InvalidArgument
from .model import Model, ModelConfig, decode_step, new_state, prefill, StepTrace
from .routing import RoutingGains, attend_mixture, memory_scores

ARTIFACT_SCHEMA = "latentbank.selector"
ARTIFACT_VERSION = 1

Site = tuple[int, int]


@dataclass(frozen=True)
class SelectorConfig:
    candidate_layers: tuple[int, ...] | None = None  # None: every layer the target bank covers
    candidate_units: Mapping[int, tuple[int, ...]] | None = None  # None: every unit the bank covers
    k: int = 1
    m: int = 1
    xi: float = 0.5
    chi: float = 0.5
    aggregation: str = "mean"
    gain_rule: str = "constant"
    gain_value: float = 1.0
    steps: int = 16
    engagement_threshold: float = 0.5

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise InvalidArgument("k and m must be at least 1")
        if self.aggregation not in ("sum", "mean"):
            raise InvalidArgument(f"aggregation must be sum or mean, got {self.aggregation!r}")
        if self.gain_rule not in ("constant", "normalized-score"):
            raise InvalidArgument(f"unknown gain rule {self.gain_rule!r}")
        if self.steps < 1:
            raise InvalidArgument("steps must be positive")
        if self.candidate_layers is not None:
            if not self.candidate_layers:
                raise InvalidArgument("candidate_layers must be nonempty")
            object.__setattr__(self, "candidate_layers", tuple(int(l) for l in self.candidate_layers))
        if self.candidate_units is not None:
            units = {int(l): tuple(int(u) for u in us) for l, us in self.candidate_units.items()}
            if not units or not all(units.values()):
                raise InvalidArgument("candidate_units must be nonempty")
            object.__setattr__(self, "candidate_units", units)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.candidate_layers is not None:
            d["candidate_layers"] = list(self.candidate_layers)
        if self.candidate_units is not None:
            d["candidate_units"] = {str(l): list(us) for l, us in sorted(self.candidate_units.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SelectorConfig":
        d = dict(d)
        if d.get("candidate_units") is not None:
            d["candidate_units"] = {int(l): tuple(us) for l, us in d["candidate_units"].items()}
        if d.get("candidate_layers") is not None:
            d["candidate_layers"] = tuple(d["candidate_layers"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def sites(self, available: Sequence[Site]) -> list[Site]:
        avail = sorted(set(available))
        out = []
        for l, u in avail:
            if self.candidate_layers is not None and l not in self.candidate_layers:
                continue
            if self.candidate_units is not None and u not in self.candidate_units.get(l, ()):
                continue
            out.append((l, u))
        return out


@dataclass
class UnitStats:
    margin: float = 0.0
    target_mass: float = 0.0
    reference_mass: float = 0.0
    prompt_mass: float = 0.0
    auxiliary_mass: float = 0.0
    engagement: int = 0
    n_queries: int = 0


@dataclass
class CalibrationTrace:
    units: dict[Site, UnitStats] = field(default_factory=dict)
    fingerprint: str = ""


def trace_calibration(model: Model, prompts: Sequence[Sequence[int]], target_bank: KVBank,
                      reference_bank: KVBank | None = None, config: SelectorConfig | None = None) -> CalibrationTrace:
    """Average alignment margins and bank masses per candidate site.

    Each prompt is decoded greedily (unsteered) for ``config.steps`` steps; every
    step's query at every candidate site is scored. Masses come from the bank
    mixture with all steering gains zeroed, so tracing never alters generation.
    """
    config = config or SelectorConfig()
    if not prompts:
        raise InvalidArgument("calibration needs at least one prompt")
    check_bank(target_bank, model)
    if reference_bank is not None:
        check_bank(reference_bank, model)
    sites = config.sites(target_bank.sites)
    if reference_bank is not None:
        sites = [s for s in sites if reference_bank.has_site(*s)]
    if not sites:
        raise InvalidArgument("no candidate site is covered by the banks")
    G = model.config.group_size
    gains = RoutingGains(gamma=1.0)
    acc = {s: UnitStats() for s in sites}
    by_layer: dict[int, list[int]] = {}
    for l, u in sites:
        by_layer.setdefault(l, []).append(u)
    for prompt in prompts:
        ids = list(prompt)
        if not ids:
            raise InvalidArgument("empty calibration prompt")
        state = prefill(model, ids[:-1])[0] if len(ids) > 1 else new_state(model)
        tok = ids[-1]
        for _ in range(config.steps):
            rec = StepTrace()
            logits = decode_step(model, state, tok, None, rec)
            pos = rec.position
            for l, units in by_layer.items():
                K, V = state.keys[l], state.values[l]
                for u in units:
                    tgt = target_bank.slice(l, u)
                    ref = reference_bank.slice(l, u) if reference_bank is not None else None
                    st = acc[(l, u)]
                    for h in range(u * G, (u + 1) * G):
                        margin, diag = _observe_site(model, rec.queries[l][h], pos, K[u], V[u], tgt, ref, gains, l)
                        st.margin += margin
                        m = diag.masses
                        st.target_mass += m["target"]
                        st.reference_mass += m["reference"]
                        st.prompt_mass += m["prompt"]
                        st.auxiliary_mass += m["auxiliary"]
                        st.engagement += int(m["target"] > config.engagement_threshold)
                        st.n_queries += 1
            tok = int(np.argmax(logits))
    for st in acc.values():
        n = st.n_queries
        st.margin /= n
        st.target_mass /= n
        st.reference_mass /= n
        st.prompt_mass /= n
        st.auxiliary_mass /= n
    return CalibrationTrace(acc, model.fingerprint)


def _observe_site(model, q, pos, K, V, target, ref, gains, layer):
    rope = model.rope
    margin = float(memory_scores(q, pos, target, rope).max())
    banks = [target]
    if ref is not None:
        margin -= float(memory_scores(q, pos, ref, rope).max())
        banks.append(ref)
    _, diag = attend_mixture(q, K, V, banks, gains, layer, position=pos, rope=rope)
    return margin, diag


def score_units(trace: CalibrationTrace, config: SelectorConfig) -> dict[Site, float]:
    """``margin + xi * target_mass - chi * prompt_mass`` per site."""
    return {
        s: st.margin + config.xi * st.target_mass - config.chi * st.prompt_mass
        for s, st in trace.units.items()
    }


@dataclass(frozen=True)
class SelectorArtifact:
    layers: tuple[int, ...]
    units: Mapping[int, tuple[int, ...]]
    layer_gains: Mapping[int, float]
    layer_scores: Mapping[int, float] = field(default_factory=dict)
    unit_scores: Mapping[Site, float] = field(default_factory=dict)
    diagnostics: Mapping[str, object] = field(default_factory=dict)
    config: Mapping[str, object] = field(default_factory=dict)
    config_hash: str = ""
    fingerprint: str = ""
    model_shape: Mapping[str, int] = field(default_factory=dict)
    version: int = ARTIFACT_VERSION

    def to_json(self) -> str:
        doc = {
            "schema": ARTIFACT_SCHEMA,
            "version": self.version,
            "fingerprint": self.fingerprint,
            "model_shape": dict(self.model_shape),
            "config": dict(self.config),
            "config_hash": self.config_hash,
            "layers": list(self.layers),
            "units": {str(l): list(us) for l, us in sorted(self.units.items())},
            "layer_gains": {str(l): g for l, g in sorted(self.layer_gains.items())},
            "layer_scores": {str(l): s for l, s in sorted(self.layer_scores.items())},
            "unit_scores": [[l, u, s] for (l, u), s in sorted(self.unit_scores.items())],
            "diagnostics": dict(self.diagnostics),
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectorArtifact":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"selector artifact is not valid JSON: {e}") from e
        if doc.get("schema") != ARTIFACT_SCHEMA:
            raise FormatError(f"not a selector artifact (schema={doc.get('schema')!r})")
        if doc.get("version") != ARTIFACT_VERSION:
            raise CompatibilityError(f"selector artifact version {doc.get('version')} != {ARTIFACT_VERSION}")
        try:
            art = cls(
                layers=tuple(int(l) for l in doc["layers"]),
                units={int(l): tuple(int(u) for u in us) for l, us in doc["units"].items()},
                layer_gains={int(l): float(g) for l, g in doc["layer_gains"].items()},
                layer_scores={int(l): float(s) for l, s in doc["layer_scores"].items()},
                unit_scores={(int(l), int(u)): float(s) for l, u, s in doc["unit_scores"]},
                diagnostics=doc["diagnostics"],
                config=doc["config"],
                config_hash=doc["config_hash"],
                fingerprint=doc["fingerprint"],
                model_shape={k: int(v) for k, v in doc["model_shape"].items()},
                version=doc["version"],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed selector artifact: {e!r}") from e
        art.check()
        return art

    def check(self, config: ModelConfig | None = None) -> None:
        """Internal consistency, plus range checks against ``config`` or the recorded shape."""
        if set(self.units) != set(self.layers):
            raise FormatError("artifact units do not match its layer list")
        missing = [l for l in self.layers if l not in self.layer_gains]
        if missing:
            raise FormatError(f"artifact lacks layer gains for {missing}")
        k, m = self.config.get("k"), self.config.get("m")
        if m is not None and len(self.layers) > m:
            raise FormatError(f"artifact selects {len(self.layers)} layers with budget m={m}")
        if k is not None and any(len(us) > k for us in self.units.values()):
            raise FormatError(f"artifact exceeds unit budget k={k}")
        n_layers = config.n_layers if config else self.model_shape.get("n_layers")
        n_kv = config.n_kv_heads if config else self.model_shape.get("n_kv_heads")
        for l in self.layers:
            if l < 0 or (n_layers is not None and l >= n_layers):
                raise FormatError(f"artifact layer {l} out of range")
            for u in self.units[l]:
                if u < 0 or (n_kv is not None and u >= n_kv):
                    raise FormatError(f"artifact unit {u} at layer {l} out of range")


def select(unit_scores: Mapping[Site, float], config: SelectorConfig, *, fingerprint: str = "",
           model_config: ModelConfig | None = None, trace: CalibrationTrace | None = None) -> SelectorArtifact:
    """Top-k units per layer, then top-m layers by aggregated kept-unit score.

    Ties go to the lower index. Layer gains are ``config.gain_value`` for the constant
    rule, or layer score over the best selected layer score for ``normalized-score``
    (falling back to 1.0 when that maximum is not positive).
    """
    if not unit_scores:
        raise InvalidArgument("no unit scores to select from")
    per_layer: dict[int, list[tuple[int, float]]] = {}
    for (l, u), s in unit_scores.items():
        if config.candidate_layers is not None and l not in config.candidate_layers:
            continue
        per_layer.setdefault(int(l), []).append((int(u), float(s)))
    if not per_layer:
        raise InvalidArgument("no scored unit lies in the candidate layers")
    kept, layer_score = {}, {}
    for l, items in per_layer.items():
        top = sorted(items, key=lambda it: (-it[1], it[0]))[: config.k]
        kept[l] = tuple(sorted(u for u, _ in top))
        vals = [s for _, s in top]
        layer_score[l] = sum(vals) if config.aggregation == "sum" else sum(vals) / len(vals)
    layers = sorted(sorted(layer_score, key=lambda l: (-layer_score[l], l))[: config.m])
    if config.gain_rule == "constant":
        gains = {l: float(config.gain_value) for l in layers}
    else:
        best = max(layer_score[l] for l in layers)
        gains = {l: (layer_score[l] / best if best > 0 else 1.0) for l in layers}
    diagnostics = {}
    if trace is not None:
        diagnostics["units"] = {
            f"{l}:{u}": asdict(trace.units[(l, u)]) for l in layers for u in kept[l] if (l, u) in trace.units
        }
        sel = [trace.units[(l, u)] for l in layers for u in kept[l] if (l, u) in trace.units]
        if sel:
            diagnostics["mean_masses"] = {
                "target": float(np.mean([s.target_mass for s in sel])),
                "reference": float(np.mean([s.reference_mass for s in sel])),
                "prompt": float(np.mean([s.prompt_mass for s in sel])),
            }
    shape = {}
    if model_config is not None:
        shape = {"n_layers": model_config.n_layers, "n_q_heads": model_config.n_q_heads,
                 "n_kv_heads": model_config.n_kv_heads}
    return SelectorArtifact(
        layers=tuple(layers),
        units={l: kept[l] for l in layers},
        layer_gains=gains,
        layer_scores={l: layer_score[l] for l in layers},
        unit_scores={(int(l), int(u)): float(s) for (l, u), s in unit_scores.items()},
        diagnostics=diagnostics,
        config=config.to_dict(),
        config_hash=config.hash(),
        fingerprint=fingerprint,
        model_shape=shape,
    )


def calibrate(model: Model, prompts, target_bank: KVBank, reference_bank: KVBank | None = None,
              config: SelectorConfig | None = None) -> SelectorArtifact:
    config = config or SelectorConfig()
    trace = trace_calibration(model, prompts, target_bank, reference_bank, config)
    return select(score_units(trace, config), config, fingerprint=model.fingerprint,
                  model_config=model.config, trace=trace)


def expand_groups(artifact: SelectorArtifact, config: ModelConfig) -> dict[int, list[int]]:
    """Query heads per selected layer: kv group ``g`` maps to ``[g*G, (g+1)*G)``."""
    G = config.group_size
    out = {}
    for l in artifact.layers:
        heads = []
        for g in artifact.units[l]:
            if not 0 <= g < config.n_kv_heads:
                raise InvalidArgument(f"group {g} out of range for {config.n_kv_heads} kv heads")
            heads.extend(range(g * G, (g + 1) * G))
        out[l] = heads
    return out


def save_artifact(artifact: SelectorArtifact, path) -> None:
    Path(path).write_text(artifact.to_json())


def load_artifact(path, model: Model | None = None) -> SelectorArtifact:
    art = SelectorArtifact.from_json(Path(path).read_text())
    if model is not None:
        if art.fingerprint != model.fingerprint:
            raise CompatibilityError(
                f"artifact was calibrated on model {art.fingerprint}, session model is {model.fingerprint}"
            )
        art.check(model.config)
    return art
