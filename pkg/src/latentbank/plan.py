"""SteeringPlan: which sites are steered, by which banks, with which gains and routing path."""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .banks import KVBank, check_bank
from .errors import InvalidPlan
from .routing import (
    RoutingGains, attend_augmented, attend_mixture, attend_sidebank, caa_offset, mixture_slot_biases,
)

ROUTING_MODES = ("augmented", "mixture", "sidebank")


@dataclass(frozen=True)
class SteeringPlan:
    """Selected sites (layer -> kv units), banks, gains and routing mode.

    ``caa`` maps layers to residual directions added after the attention output
    projection (the post-attention CAA baseline); it is independent of the banks.
    """

    sites: Mapping[int, tuple[int, ...]]
    banks: tuple[KVBank, ...] = ()
    gains: RoutingGains = field(default_factory=RoutingGains)
    mode: str = "mixture"
    sidebank_prompt_score: float = 0.0
    caa: Mapping[int, np.ndarray] = field(default_factory=dict)
    caa_scale: float = 0.0

    def __post_init__(self):
        if self.mode not in ROUTING_MODES:
            raise InvalidPlan(f"unknown routing mode {self.mode!r}")
        sites = {int(l): tuple(sorted(int(u) for u in us)) for l, us in self.sites.items()}
        object.__setattr__(self, "sites", MappingProxyType(sites))
        object.__setattr__(self, "banks", tuple(self.banks))
        object.__setattr__(self, "caa", MappingProxyType({int(l): np.asarray(d) for l, d in self.caa.items()}))
        g = self.gains
        if any(l not in g.layer_gains for l in sites):
            rho = {l: 1.0 for l in sites}
            rho.update(g.layer_gains)
            object.__setattr__(self, "gains", RoutingGains(g.lambda_plus, g.lambda_minus, g.gamma, rho, dict(g.aux_gains)))

    @classmethod
    def from_artifact(cls, artifact, banks: Sequence[KVBank] = (), gains: RoutingGains | None = None,
                      mode: str = "mixture", **kw) -> "SteeringPlan":
        """Plan over an artifact's sites; the artifact's layer gains override ``gains.layer_gains``."""
        g = gains or RoutingGains()
        g = RoutingGains(g.lambda_plus, g.lambda_minus, g.gamma, dict(artifact.layer_gains), dict(g.aux_gains))
        return cls(dict(artifact.units), tuple(banks), g, mode, **kw)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.sites) | set(self.caa)))

    def validate(self, model) -> None:
        c = model.config
        for l, units in self.sites.items():
            if not 0 <= l < c.n_layers:
                raise InvalidPlan(f"plan references layer {l}, model has {c.n_layers}")
            for u in units:
                if not 0 <= u < c.n_kv_heads:
                    raise InvalidPlan(f"plan references unit {u} at layer {l}, model has {c.n_kv_heads} kv units")
                for b in self.banks:
                    if not b.has_site(l, u):
                        raise InvalidPlan(f"bank {b.bank_id!r} has no slots at site ({l}, {u})")
        for l, d in self.caa.items():
            if not 0 <= l < c.n_layers or d.shape != (c.d_model,):
                raise InvalidPlan(f"bad CAA direction at layer {l}")
        for b in self.banks:
            check_bank(b, model)

    def active_at(self, layer: int) -> bool:
        return bool(self.banks) and layer in self.sites

    def units_at(self, layer: int) -> tuple[int, ...]:
        return self.sites.get(layer, ())

    def route(self, layer, unit, query, position, keys, values, host_output, rope):
        """Routed output for one query head, or ``None`` when no bank applies."""
        slices = [b.slice(layer, unit) for b in self.banks]
        if not slices:
            return None
        if self.mode == "mixture":
            return attend_mixture(query, keys, values, slices, self.gains, layer, position=position, rope=rope)
        if self.mode == "sidebank":
            return attend_sidebank(host_output, self.sidebank_prompt_score, query, slices, self.gains, layer,
                                   position=position, rope=rope)
        biases = mixture_slot_biases(query, slices, self.gains, layer, position=position, rope=rope)
        return attend_augmented(query, keys, values, list(zip(slices, biases)), position=position, rope=rope)

    def post_attention(self, layer: int, attn_out: np.ndarray) -> np.ndarray:
        d = self.caa.get(layer)
        if d is None:
            return attn_out
        return caa_offset(attn_out, d, self.caa_scale)
