"""Text-derived KV banks.

A bank is built by wrapping reminder text in one or more templates, tracing the
wrapped text through the frozen model, keeping the positions that overlap the
descriptor, and projecting each kept hidden state through the layer's own key and
value projections. Keys are stored pre-RoPE.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import CompatibilityError, EmptyBankError, FormatError, InvalidArgument
from .model import Model, kv_project, prefill
from .routing import BankSlice

BANK_ROLES = ("target", "reference", "auxiliary", "prompt-sentinel")
KEEP_POLICIES = ("descriptor-span-only", "full-wrapped")

TEMPLATE_VERSION = 1
TEMPLATES = MappingProxyType({
    "direct": "{DESC}",
    "internal-principles": "Internal principles I follow in every reply:\n{DESC}\nEnd of principles.\n",
    "hidden-steering-note": "[hidden steering note, do not quote] {DESC} [end note]\n",
})


class Tokenizer(Protocol):
    def encode(self, text: str) -> tuple[list[int], list[tuple[int, int]]]: ...

    def decode(self, ids: Sequence[int]) -> str: ...


class ByteTokenizer:
    """One token per UTF-8 byte; spans are byte ranges."""

    vocab_size = 256

    def encode(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        data = text.encode("utf-8")
        return list(data), [(i, i + 1) for i in range(len(data))]

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(ids).decode("utf-8", errors="replace")

    def decode_bytes(self, ids: Sequence[int]) -> bytes:
        return bytes(ids)


def tokenize(text: str) -> tuple[list[int], list[tuple[int, int]]]:
    return ByteTokenizer().encode(text)


@dataclass(frozen=True)
class BankSpec:
    bank_id: str
    role: str
    source_text: str
    templates: tuple[str, ...] = ("direct",)
    keep_policy: str = "descriptor-span-only"
    prior: float = 0.0
    phases: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.role not in BANK_ROLES:
            raise InvalidArgument(f"unknown bank role {self.role!r}")
        if self.role == "prompt-sentinel":
            raise InvalidArgument("prompt-sentinel banks are internal and cannot be built from text")
        if not self.templates:
            raise InvalidArgument("a bank spec needs at least one template")
        for t in self.templates:
            if t not in TEMPLATES:
                raise InvalidArgument(f"unknown template {t!r}")
        if self.keep_policy not in KEEP_POLICIES:
            raise InvalidArgument(f"unknown keep policy {self.keep_policy!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BankSpec":
        d = dict(d)
        d.pop("version", None)
        if d.get("phases") is not None:
            d["phases"] = tuple(int(p) for p in d["phases"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "BankSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def wrap_descriptor(spec: BankSpec, template_id: str) -> tuple[str, tuple[int, int]]:
    """Wrapped text and the half-open byte span of ``spec.source_text`` inside it."""
    if template_id not in TEMPLATES:
        raise InvalidArgument(f"unknown template {template_id!r}")
    if template_id not in spec.templates:
        raise InvalidArgument(f"template {template_id!r} not listed in bank spec {spec.bank_id!r}")
    prefix, suffix = TEMPLATES[template_id].split("{DESC}")
    start = len(prefix.encode("utf-8"))
    end = start + len(spec.source_text.encode("utf-8"))
    return prefix + spec.source_text + suffix, (start, end)


@dataclass(frozen=True)
class KVBank:
    bank_id: str
    role: str
    fingerprint: str
    sites: tuple[tuple[int, int], ...]
    keys: Mapping[tuple[int, int], np.ndarray]  # site -> (M, d_h) float32
    values: Mapping[tuple[int, int], np.ndarray]
    prior: float = 0.0
    phases: np.ndarray = field(default=None)  # (M,) int64

    def __post_init__(self):
        if not self.sites:
            raise InvalidArgument("bank must cover at least one site")
        sizes = {self.keys[s].shape[0] for s in self.sites} | {self.values[s].shape[0] for s in self.sites}
        if len(sizes) != 1 or 0 in sizes:
            raise InvalidArgument("slot count must be positive and identical across sites")
        M = sizes.pop()
        phases = np.zeros(M, dtype=np.int64) if self.phases is None else np.asarray(self.phases, dtype=np.int64)
        if phases.shape != (M,):
            raise InvalidArgument("phases must have one entry per slot")
        keys, values = {}, {}
        for s in self.sites:
            for src, dst in ((self.keys, keys), (self.values, values)):
                a = np.ascontiguousarray(src[s], dtype=np.float32).copy()
                a.setflags(write=False)
                dst[s] = a
        phases = phases.copy()
        phases.setflags(write=False)
        object.__setattr__(self, "sites", tuple((int(l), int(u)) for l, u in self.sites))
        object.__setattr__(self, "keys", MappingProxyType(keys))
        object.__setattr__(self, "values", MappingProxyType(values))
        object.__setattr__(self, "phases", phases)

    @property
    def slot_count(self) -> int:
        return self.keys[self.sites[0]].shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys[self.sites[0]].shape[1]

    def has_site(self, layer: int, unit: int) -> bool:
        return (layer, unit) in self.keys

    def slice(self, layer: int, unit: int) -> BankSlice:
        if (layer, unit) not in self.keys:
            raise InvalidArgument(f"bank {self.bank_id!r} has no slots at site ({layer}, {unit})")
        return BankSlice(
            self.keys[(layer, unit)], self.values[(layer, unit)], self.role, self.prior,
            self.phases if self.phases.any() else None, self.bank_id,
        )

    def with_values(self, values: Mapping[tuple[int, int], np.ndarray]) -> "KVBank":
        merged = {s: values.get(s, self.values[s]) for s in self.sites}
        return replace(self, keys=dict(self.keys), values=merged)

    def __eq__(self, other):
        if not isinstance(other, KVBank):
            return NotImplemented
        return (
            (self.bank_id, self.role, self.fingerprint, self.sites, self.prior)
            == (other.bank_id, other.role, other.fingerprint, other.sites, other.prior)
            and np.array_equal(self.phases, other.phases)
            and all(np.array_equal(self.keys[s], other.keys[s]) and np.array_equal(self.values[s], other.values[s])
                    for s in self.sites)
        )

    __hash__ = None


def kept_positions(spans, descriptor_span, keep_policy: str) -> list[int]:
    if keep_policy == "full-wrapped":
        return list(range(len(spans)))
    a, b = descriptor_span
    return [i for i, (s, e) in enumerate(spans) if s < b and e > a]


def build_bank(model: Model, spec: BankSpec, sites: Sequence[tuple[int, int]],
               tokenizer: Tokenizer | None = None, position_offset: int = 0) -> KVBank:
    """Trace each wrapped template and project kept positions at every site.

    Slots from successive templates are concatenated in template order.
    ``position_offset`` shifts the absolute RoPE positions used while tracing.
    """
    tok = tokenizer or ByteTokenizer()
    c = model.config
    sites = [(int(l), int(u)) for l, u in sites]
    if not sites:
        raise InvalidArgument("build_bank needs at least one site")
    if len(set(sites)) != len(sites):
        raise InvalidArgument("duplicate sites")
    for l, u in sites:
        if not (0 <= l < c.n_layers and 0 <= u < c.n_kv_heads):
            raise InvalidArgument(f"site ({l}, {u}) out of range for this model")
    keys = {s: [] for s in sites}
    values = {s: [] for s in sites}
    for template in spec.templates:
        text, span = wrap_descriptor(spec, template)
        ids, spans = tok.encode(text)
        keep = kept_positions(spans, span, spec.keep_policy)
        if not keep:
            raise EmptyBankError(f"bank {spec.bank_id!r}: template {template!r} keeps no tokens")
        _, hidden = prefill(model, ids, trace=True, offset=position_offset)
        for l, u in sites:
            for p in keep:
                k, v = kv_project(model, l, u, hidden[l, p])
                keys[(l, u)].append(k)
                values[(l, u)].append(v)
    M = len(keys[sites[0]])
    if spec.phases is not None and len(spec.phases) != M:
        raise InvalidArgument(f"spec lists {len(spec.phases)} phases but the bank has {M} slots")
    return KVBank(
        spec.bank_id, spec.role, model.fingerprint, tuple(sites),
        {s: np.array(keys[s]) for s in sites}, {s: np.array(values[s]) for s in sites},
        float(spec.prior), None if spec.phases is None else np.array(spec.phases),
    )


# ---------------------------------------------------------------------------
# MIB1 bank files

MIB_MAGIC = b"MIB1"
MIB_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_bank(bank: KVBank, path) -> None:
    out = bytearray(MIB_MAGIC)
    out += struct.pack("<I", MIB_VERSION)
    for s in (bank.bank_id, bank.role, bank.fingerprint):
        out += _pack_str(s)
    out += struct.pack("<I", len(bank.sites))
    for l, u in bank.sites:
        out += struct.pack("<II", l, u)
    out += struct.pack("<IId", bank.slot_count, bank.head_dim, bank.prior)
    out += bank.phases.astype("<i8").tobytes()
    for s in bank.sites:
        out += bank.keys[s].astype("<f4").tobytes()
        out += bank.values[s].astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated bank file")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.path}: bad string field") from e


def load_bank(path, model: Model | None = None, override: bool = False) -> KVBank:
    """Read a MIB1 file; verifies the model fingerprint unless ``override``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MIB_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != MIB_VERSION:
        raise FormatError(f"{path}: unsupported MIB version {version}")
    bank_id, role, fingerprint = r.string(), r.string(), r.string()
    if role not in BANK_ROLES[:3]:
        raise FormatError(f"{path}: bad bank role {role!r}")
    (n_sites,) = r.unpack("<I")
    sites = [r.unpack("<II") for _ in range(n_sites)]
    M, d, prior = r.unpack("<IId")
    if M == 0 or d == 0:
        raise FormatError(f"{path}: empty slot table")
    expected = 8 * M + n_sites * 2 * M * d * 4
    if len(r.data) - r.pos != expected:
        raise FormatError(
            f"{path}: payload is {len(r.data) - r.pos} bytes, header (M={M}, d={d}, sites={n_sites}) implies {expected}"
        )
    phases = np.frombuffer(r.take(8 * M), dtype="<i8").astype(np.int64)
    keys, values = {}, {}
    for s in sites:
        keys[s] = np.frombuffer(r.take(4 * M * d), dtype="<f4").reshape(M, d)
        values[s] = np.frombuffer(r.take(4 * M * d), dtype="<f4").reshape(M, d)
    bank = KVBank(bank_id, role, fingerprint, tuple(sites), keys, values, prior, phases)
    if model is not None:
        check_bank(bank, model, override)
    return bank


def check_bank(bank: KVBank, model: Model, override: bool = False) -> None:
    if bank.fingerprint != model.fingerprint and not override:
        raise CompatibilityError(
            f"bank {bank.bank_id!r} was built for model {bank.fingerprint}, session model is {model.fingerprint}"
        )
    c = model.config
    if bank.head_dim != c.head_dim:
        raise CompatibilityError(f"bank head_dim {bank.head_dim} != model head_dim {c.head_dim}")
    for l, u in bank.sites:
        if not (0 <= l < c.n_layers and 0 <= u < c.n_kv_heads):
            raise CompatibilityError(f"bank site ({l}, {u}) out of range for this model")
