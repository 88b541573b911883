"""Minimal decoder-only transformer with frozen weights (dense MHA or GQA).

Weights are stored as read-only float32 tensors and promoted once to float64 for
compute. Attention is causal with RoPE; the feed-forward block is a SiLU-gated MLP.

Steering only happens in :func:`decode_step`: a :class:`~latentbank.plan.SteeringPlan`
is consulted at the layers it names and every other site computes plain attention.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from types import MappingProxyType
from typing import TYPE_CHECKING

import numpy as np

from .errors import FormatError, InvalidArgument
from .numerics import RotaryOperator, rms_norm

if TYPE_CHECKING:
    from .plan import SteeringPlan


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    vocab_size: int = 256
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    qk_norm_enabled: bool = False
    d_ff: int = 0  # 0 -> 2 * d_model

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "head_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.head_dim % 2:
            raise InvalidArgument("head_dim must be even")
        if self.n_q_heads % self.n_kv_heads:
            raise InvalidArgument(
                f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}"
            )
        if self.d_model != self.n_q_heads * self.head_dim:
            raise InvalidArgument("d_model must equal n_q_heads * head_dim")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise InvalidArgument("rope_theta and norm_eps must be positive")
        if self.d_ff < 0:
            raise InvalidArgument("d_ff must be nonnegative")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.d_model)

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in file order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {"embed": (c.vocab_size, c.d_model)}
    for i in range(c.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (c.d_model,)
        shapes[p + "wq"] = (c.n_q_heads * c.head_dim, c.d_model)
        shapes[p + "wk"] = (c.n_kv_heads * c.head_dim, c.d_model)
        shapes[p + "wv"] = (c.n_kv_heads * c.head_dim, c.d_model)
        shapes[p + "wo"] = (c.d_model, c.n_q_heads * c.head_dim)
        if c.qk_norm_enabled:
            shapes[p + "q_norm"] = (c.head_dim,)
            shapes[p + "k_norm"] = (c.head_dim,)
        shapes[p + "mlp_norm"] = (c.d_model,)
        shapes[p + "w_gate"] = (c.d_ff, c.d_model)
        shapes[p + "w_up"] = (c.d_ff, c.d_model)
        shapes[p + "w_down"] = (c.d_model, c.d_ff)
    shapes["final_norm"] = (c.d_model,)
    shapes["unembed"] = (c.vocab_size, c.d_model)
    return shapes


class Model:
    """Frozen weights plus config. Construct via :func:`synth_model` or :func:`load_model`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = tensor_shapes(config)
        missing = [n for n in expected if n not in tensors]
        if missing:
            raise InvalidArgument(f"missing tensor {missing[0]!r}")
        extra = [n for n in tensors if n not in expected]
        if extra:
            raise InvalidArgument(f"unexpected tensor {extra[0]!r}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32).copy()
            if arr.shape != shape:
                raise InvalidArgument(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        self.config = config
        self.tensors = MappingProxyType(frozen)
        self._f64 = {}
        for name, arr in frozen.items():
            w = arr.astype(np.float64)
            w.setflags(write=False)
            self._f64[name] = w
        self.rope = RotaryOperator(config.head_dim, config.rope_theta)
        self.fingerprint = _fingerprint(config, frozen)

    def w(self, name: str) -> np.ndarray:
        return self._f64[name]

    def lw(self, layer: int, name: str) -> np.ndarray:
        return self._f64[f"layers.{layer}.{name}"]

    def __repr__(self):
        return f"Model({self.config}, fingerprint={self.fingerprint})"


def synth_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic synthetic weights.

    Matrices are ``U(-a, a)`` with ``a = 1/sqrt(fan_in)``, embeddings ``U(-1, 1)``,
    norm gains are ones. Tensors are drawn in :func:`tensor_shapes` order from one
    ``numpy.random.default_rng(seed)`` stream.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name == "embed":
            tensors[name] = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
        else:
            a = 1.0 / math.sqrt(shape[1])
            tensors[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    return Model(config, tensors)


# ---------------------------------------------------------------------------
# MIW1 weight files

MIW_MAGIC = b"MIW1"
MIW_VERSION = 1
_CONFIG_LAYOUT = (
    ("n_layers", "I"), ("d_model", "I"), ("n_q_heads", "I"), ("n_kv_heads", "I"),
    ("head_dim", "I"), ("vocab_size", "I"), ("d_ff", "I"),
    ("rope_theta", "d"), ("norm_eps", "d"), ("qk_norm_enabled", "I"),
)
_CONFIG_FMT = "<" + "".join(code for _, code in _CONFIG_LAYOUT)


def _config_bytes(config: ModelConfig) -> bytes:
    vals = []
    for name, code in _CONFIG_LAYOUT:
        v = getattr(config, name)
        vals.append(int(v) if code == "I" else float(v))
    return struct.pack(_CONFIG_FMT, *vals)


def _fingerprint(config: ModelConfig, tensors) -> str:
    h = hashlib.sha256(_config_bytes(config))
    for name in tensor_shapes(config):
        h.update(name.encode())
        h.update(tensors[name].astype("<f4").tobytes())
    return h.hexdigest()[:16]


def save_model(model: Model, path) -> None:
    names = list(tensor_shapes(model.config))
    header = bytearray(MIW_MAGIC)
    header += struct.pack("<I", MIW_VERSION)
    header += _config_bytes(model.config)
    header += struct.pack("<I", len(names))
    dir_size = sum(4 + len(n.encode()) + 4 + 4 * model.tensors[n].ndim + 8 for n in names)
    offset = len(header) + dir_size
    directory = bytearray()
    for n in names:
        arr = model.tensors[n]
        enc = n.encode()
        directory += struct.pack("<I", len(enc)) + enc
        directory += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", offset)
        offset += arr.size * 4
    with open(path, "wb") as f:
        f.write(header)
        f.write(directory)
        for n in names:
            f.write(model.tensors[n].astype("<f4").tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != MIW_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    try:
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != MIW_VERSION:
            raise FormatError(f"{path}: unsupported MIW version {version}")
        raw = struct.unpack_from(_CONFIG_FMT, data, pos)
        pos += struct.calcsize(_CONFIG_FMT)
        cfg = {}
        for (name, code), v in zip(_CONFIG_LAYOUT, raw):
            cfg[name] = bool(v) if name == "qk_norm_enabled" else v
        try:
            config = ModelConfig(**cfg)
        except InvalidArgument as e:
            raise FormatError(f"{path}: invalid config block: {e}") from e
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
    except struct.error as e:
        raise FormatError(f"{path}: truncated header") from e

    expected = tensor_shapes(config)
    expected_names = list(expected)
    tensors = {}
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            (off,) = struct.unpack_from("<Q", data, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: truncated tensor directory at entry {i}") from e
        if name not in expected:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise FormatError(f"{path}: tensor {name!r} has shape {dims}, expected {expected[name]}")
        nbytes = 4 * int(np.prod(dims))
        if off + nbytes > len(data):
            raise FormatError(f"{path}: tensor {name!r} payload truncated")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
    if count != len(expected_names):
        missing = [n for n in expected_names if n not in tensors]
        what = missing[0] if missing else expected_names[-1]
        raise FormatError(
            f"{path}: header lists {count} tensors, config requires {len(expected_names)} "
            f"(first missing: {what!r})"
        )
    return Model(config, tensors)


# ---------------------------------------------------------------------------
# Decoding


@dataclass
class DecodeState:
    """Per-layer post-RoPE KV cache for one decode stream.

    ``keys[l]`` and ``values[l]`` have shape ``(n_kv_heads, t, head_dim)``.
    Absolute RoPE position of cache index ``j`` is ``offset + j``.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    offset: int = 0
    logits: np.ndarray | None = None

    @property
    def t(self) -> int:
        return self.keys[0].shape[1]

    @property
    def position(self) -> int:
        """Absolute position the next token will occupy."""
        return self.offset + self.t

    def copy(self) -> "DecodeState":
        return DecodeState(
            [k.copy() for k in self.keys],
            [v.copy() for v in self.values],
            self.offset,
            None if self.logits is None else self.logits.copy(),
        )


def new_state(model: Model, offset: int = 0) -> DecodeState:
    c = model.config
    empty = lambda: np.zeros((c.n_kv_heads, 0, c.head_dim))  # noqa: E731
    return DecodeState([empty() for _ in range(c.n_layers)], [empty() for _ in range(c.n_layers)], offset)


@dataclass
class StepTrace:
    """Filled in by :func:`decode_step` when passed as ``recorder``."""

    position: int = -1
    hidden: list[np.ndarray] = field(default_factory=list)  # residual entering each layer
    queries: list[np.ndarray] = field(default_factory=list)  # post-RoPE, (n_q_heads, head_dim)
    diagnostics: list[tuple[int, int, object]] = field(default_factory=list)  # (layer, q_head, diag)


def _check_tokens(model: Model, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise InvalidArgument(f"token id out of range [0, {model.config.vocab_size})")
    return ids


def _mlp(model: Model, layer: int, x: np.ndarray) -> np.ndarray:
    h = rms_norm(x, model.lw(layer, "mlp_norm"), model.config.norm_eps)
    gate = h @ model.lw(layer, "w_gate").T
    up = h @ model.lw(layer, "w_up").T
    act = gate / (1.0 + np.exp(-gate)) * up
    return act @ model.lw(layer, "w_down").T


def _project_qkv(model: Model, layer: int, x: np.ndarray, positions):
    """Project residual rows ``x`` (n, d_model) to post-RoPE q (n, Hq, d) and k, v (n, Hkv, d)."""
    c = model.config
    h = rms_norm(x, model.lw(layer, "attn_norm"), c.norm_eps)
    n = h.shape[0]
    q = (h @ model.lw(layer, "wq").T).reshape(n, c.n_q_heads, c.head_dim)
    k = (h @ model.lw(layer, "wk").T).reshape(n, c.n_kv_heads, c.head_dim)
    v = (h @ model.lw(layer, "wv").T).reshape(n, c.n_kv_heads, c.head_dim)
    if c.qk_norm_enabled:
        q = rms_norm(q, model.lw(layer, "q_norm"), c.norm_eps)
        k = rms_norm(k, model.lw(layer, "k_norm"), c.norm_eps)
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    return model.rope.apply(q, pos), model.rope.apply(k, pos), v


def _logits(model: Model, x: np.ndarray) -> np.ndarray:
    h = rms_norm(x, model.w("final_norm"), model.config.norm_eps)
    return h @ model.w("unembed").T


def prefill(model: Model, tokens, trace: bool = False, offset: int = 0):
    """Process ``tokens`` in one causal pass.

    Returns ``(state, hidden)`` where ``hidden`` has shape ``(L, n, d_model)`` holding
    the residual stream entering each layer (before its attention norm), or ``None``
    when ``trace`` is off. ``state.logits`` holds the last position's logits.
    """
    ids = _check_tokens(model, tokens)
    if ids.size == 0:
        raise InvalidArgument("prefill needs at least one token")
    state, hidden, final = _run_sequence(model, ids, offset, trace)
    state.logits = _logits(model, final[-1])
    return state, hidden


def forward(model: Model, tokens, offset: int = 0) -> np.ndarray:
    """Full-sequence logits, shape ``(n, vocab_size)``; no cache reuse."""
    ids = _check_tokens(model, tokens)
    if ids.size == 0:
        raise InvalidArgument("forward needs at least one token")
    _, _, final = _run_sequence(model, ids, offset, False)
    return _logits(model, final)


def _run_sequence(model: Model, ids: np.ndarray, offset: int, trace: bool):
    c = model.config
    n = ids.size
    G = c.group_size
    positions = offset + np.arange(n)
    x = model.w("embed")[ids].copy()
    hidden = np.empty((c.n_layers, n, c.d_model)) if trace else None
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    keys, values = [], []
    for layer in range(c.n_layers):
        if trace:
            hidden[layer] = x
        q, k, v = _project_qkv(model, layer, x, positions)
        keys.append(np.ascontiguousarray(k.transpose(1, 0, 2)))
        values.append(np.ascontiguousarray(v.transpose(1, 0, 2)))
        kq = np.repeat(k, G, axis=1)  # (n, Hq, d)
        vq = np.repeat(v, G, axis=1)
        scores = np.einsum("ihd,jhd->hij", q, kq) / math.sqrt(c.head_dim)
        scores[:, mask] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        heads = np.einsum("hij,jhd->ihd", p, vq).reshape(n, c.n_q_heads * c.head_dim)
        x = x + heads @ model.lw(layer, "wo").T
        x = x + _mlp(model, layer, x)
    return DecodeState(keys, values, offset), hidden, x


def decode_step(
    model: Model,
    state: DecodeState,
    token: int,
    plan: "SteeringPlan | None" = None,
    recorder: StepTrace | None = None,
) -> np.ndarray:
    """Append one token to ``state`` and return next-token logits.

    At (layer, kv-unit) sites named by ``plan`` the query heads of that unit are
    routed through the plan; all other heads use plain causal attention.
    """
    c = model.config
    ids = _check_tokens(model, [token])
    if plan is not None:
        plan.validate(model)
    G = c.group_size
    pos = state.position
    scale = math.sqrt(c.head_dim)
    x = model.w("embed")[ids[0]].copy()
    if recorder is not None:
        recorder.position = pos
    for layer in range(c.n_layers):
        if recorder is not None:
            recorder.hidden.append(x.copy())
        q, k, v = _project_qkv(model, layer, x[None, :], [pos])
        q, k, v = q[0], k[0], v[0]
        K = np.concatenate([state.keys[layer], k[:, None, :]], axis=1)
        V = np.concatenate([state.values[layer], v[:, None, :]], axis=1)
        state.keys[layer], state.values[layer] = K, V
        if recorder is not None:
            recorder.queries.append(q.copy())
        kv_idx = np.arange(c.n_q_heads) // G
        scores = np.einsum("hd,htd->ht", q, K[kv_idx]) / scale
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        heads = np.einsum("ht,htd->hd", p, V[kv_idx])
        if plan is not None and plan.active_at(layer):
            for unit in plan.units_at(layer):
                for h in range(unit * G, (unit + 1) * G):
                    routed = plan.route(
                        layer, unit, q[h], pos, K[unit], V[unit], heads[h], model.rope
                    )
                    if routed is None:
                        continue
                    heads[h], diag = routed
                    if recorder is not None:
                        recorder.diagnostics.append((layer, h, diag))
        attn = heads.reshape(-1) @ model.lw(layer, "wo").T
        if plan is not None:
            attn = plan.post_attention(layer, attn)
        x = x + attn
        x = x + _mlp(model, layer, x)
    logits = _logits(model, x)
    state.logits = logits
    return logits


def kv_project(model: Model, layer: int, unit: int, hidden) -> tuple[np.ndarray, np.ndarray]:
    """Canonical (pre-RoPE) key and value for one residual vector at one kv unit.

    Applies the layer's attention norm, then the unit's slice of W_K and W_V (and the
    per-head key norm when the config enables QK normalization).
    """
    c = model.config
    if not 0 <= layer < c.n_layers:
        raise InvalidArgument(f"layer {layer} out of range")
    if not 0 <= unit < c.n_kv_heads:
        raise InvalidArgument(f"kv unit {unit} out of range")
    x = np.asarray(hidden, dtype=np.float64)
    if x.shape[-1] != c.d_model:
        raise InvalidArgument(f"hidden must have length {c.d_model}")
    h = rms_norm(x, model.lw(layer, "attn_norm"), c.norm_eps)
    rows = slice(unit * c.head_dim, (unit + 1) * c.head_dim)
    key = h @ model.lw(layer, "wk")[rows].T
    value = h @ model.lw(layer, "wv")[rows].T
    if c.qk_norm_enabled:
        key = rms_norm(key, model.lw(layer, "k_norm"), c.norm_eps)
    return key, value


def generate(model: Model, prompt, steps: int, plan=None, recorders: list | None = None):
    """Greedy continuation. The last prompt token is decoded through ``plan``.

    Returns ``(tokens, logits)`` with one logits row per generated token.
    """
    ids = _check_tokens(model, prompt)
    if ids.size == 0:
        raise InvalidArgument("prompt must be nonempty")
    state = prefill(model, ids[:-1])[0] if ids.size > 1 else new_state(model)
    tok = int(ids[-1])
    out_tokens, out_logits = [], []
    for _ in range(steps):
        rec = StepTrace() if recorders is not None else None
        logits = decode_step(model, state, tok, plan, rec)
        if recorders is not None:
            recorders.append(rec)
        tok = int(np.argmax(logits))
        out_tokens.append(tok)
        out_logits.append(logits)
    return out_tokens, np.array(out_logits).reshape(len(out_logits), model.config.vocab_size)
