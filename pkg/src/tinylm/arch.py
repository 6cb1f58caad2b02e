"""Decoder-only transformer: configuration, parameter store, forward pass
with optional layer skipping and unit gates, greedy generation with a KV
cache, parameter accounting, and budget-constrained config search.

The block is LLaMA-like: RMS pre-norm, rotary q/k, causal attention with
grouped KV heads (kv_groups == n_heads is plain MHA), and a gated-SiLU FFN.
Projections carry no biases; norms are scale-only. Embedding and output head
are separate tensors.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    reshape,
    rms_normalize,
    silu,
    softmax,
    take,
    transpose,
)

ROPE_BASE = 10000.0
MASK_VALUE = -1e30  # additive causal mask; exp() underflows to exactly 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int
    depth: int
    n_heads: int
    kv_groups: int
    ffn_hidden: int

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    @property
    def expansion_rate(self) -> float:
        return self.ffn_hidden / self.width

    def validate(self) -> None:
        if self.vocab_size < 256:
            raise ValueError(f"vocab_size must be >= 256, got {self.vocab_size}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.ffn_hidden < 1:
            raise ValueError(f"ffn_hidden must be >= 1, got {self.ffn_hidden}")
        if self.n_heads < 1 or self.width % self.n_heads != 0:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if self.kv_groups < 1 or self.n_heads % self.kv_groups != 0:
            raise ValueError(
                f"n_heads {self.n_heads} not divisible by kv_groups {self.kv_groups}"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even for rotary encoding, got {self.head_dim}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor the config requires, with its exact shape."""
    v, d = config.vocab_size, config.width
    kv = config.kv_groups * config.head_dim
    f = config.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.depth):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, kv)
        shapes[p + "wv"] = (d, kv)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "wgate"] = (d, f)
        shapes[p + "wup"] = (d, f)
        shapes[p + "wdown"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, v)
    return shapes


class ParamStore:
    """Named map layer-path -> Tensor holding one model's weights."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def validate(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ValueError(f"missing parameter {name}")
            got = self.tensors[name].shape
            if got != shape:
                raise ValueError(f"parameter {name}: shape {got}, config requires {shape}")
        extra = set(self.tensors) - set(expected)
        if extra:
            raise ValueError(f"unexpected parameters: {sorted(extra)}")

    def total_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()}
        )

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag


@dataclass
class ArchReport:
    total_params: int
    embedding_head_params: int
    pehl: float
    breakdown: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "total_params": self.total_params,
                "embedding_head_params": self.embedding_head_params,
                "pehl": self.pehl,
                "breakdown": self.breakdown,
            },
            indent=2,
        )


def param_count(config: ModelConfig) -> ArchReport:
    """Closed-form parameter counts under the documented accounting:
    no biases, scale-only norms, untied embedding and head."""
    v, d, L = config.vocab_size, config.width, config.depth
    kv = config.kv_groups * config.head_dim
    f = config.ffn_hidden
    embed_head = 2 * v * d
    attention = L * (2 * d * d + 2 * d * kv)
    ffn = L * 3 * d * f
    norms = L * 2 * d + d
    total = embed_head + attention + ffn + norms
    return ArchReport(
        total_params=total,
        embedding_head_params=embed_head,
        pehl=embed_head / total,
        breakdown={
            "embedding": v * d,
            "head": v * d,
            "attention": attention,
            "ffn": ffn,
            "norms": norms,
        },
    )


def search_configs(
    budget: int,
    vocab_size: int,
    depths: list[int],
    expansion_rates: list[float],
    tolerance: float,
    head_dim: int = 64,
    kv_groups: int | None = None,
) -> list[ModelConfig]:
    """For each (depth, expansion) pair, solve the width that lands the total
    parameter count on ``budget``, round it to a multiple of head_dim (ties
    toward the smaller width), and keep configs within relative tolerance."""
    out: list[ModelConfig] = []
    for L in depths:
        for rho in expansion_rates:
            # total(d) ~= a d^2 + b d with ffn = rho * d; the k/v projections
            # are quadratic in d for MHA but linear once kv_groups is fixed
            if kv_groups is None:
                a = L * (4.0 + 3.0 * rho)
                b = 2.0 * vocab_size + 2.0 * L + 1.0
            else:
                a = L * (2.0 + 3.0 * rho)
                b = 2.0 * vocab_size + 2.0 * L + 1.0 + 2.0 * L * kv_groups * head_dim
            disc = b * b + 4.0 * a * budget
            d_real = (-b + disc**0.5) / (2.0 * a)
            candidates = []
            for d in (int(d_real // head_dim) * head_dim, (int(d_real // head_dim) + 1) * head_dim):
                if d < head_dim:
                    continue
                h = d // head_dim
                g = kv_groups if kv_groups is not None else h
                if h % g != 0:
                    continue
                ffn = max(1, round(rho * d))
                cfg = ModelConfig(vocab_size, d, L, h, g, ffn)
                try:
                    cfg.validate()
                except ValueError:
                    continue
                total = param_count(cfg).total_params
                candidates.append((abs(total - budget), d, cfg, total))
            if not candidates:
                continue
            candidates.sort(key=lambda c: (c[0], c[1]))
            gap, _, cfg, total = candidates[0]
            if gap / budget <= tolerance:
                out.append(cfg)
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _rope_tables(n_positions: int, head_dim: int, offset: int = 0):
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) * 2.0 / head_dim)
    pos = np.arange(offset, offset + n_positions)
    angles = np.outer(pos, inv_freq)  # [T, half]
    return np.cos(angles), np.sin(angles)


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (first-half, second-half) pairs of the last axis. x: [B,H,T,hd];
    cos/sin: [T, hd//2], broadcast over batch and heads."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c = cos.reshape(1, 1, *cos.shape)
    s = sin.reshape(1, 1, *sin.shape)
    return concat([mul(x1, c) - mul(x2, s), mul(x2, c) + mul(x1, s)], axis=-1)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_VALUE), k=1)


def attention_block(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    kv_groups: int,
    head_dim: int,
    head_gates: Tensor | None = None,
) -> Tensor:
    """Causal rotary attention sublayer on a normalized input [B,T,d_in].

    Head count and widths are taken from the projection shapes, so sliced
    weight sets (fewer heads than the parent) evaluate directly.
    """
    b, t, _ = x.shape
    q = reshape(matmul(x, wq), (b, t, n_heads, head_dim))
    k = reshape(matmul(x, wk), (b, t, kv_groups, head_dim))
    v = reshape(matmul(x, wv), (b, t, kv_groups, head_dim))
    q = transpose(q, (0, 2, 1, 3))  # [B,H,T,hd]
    k = transpose(k, (0, 2, 1, 3))
    v = transpose(v, (0, 2, 1, 3))
    cos, sin = _rope_tables(t, head_dim)
    q = _apply_rope(q, cos, sin)
    k = _apply_rope(k, cos, sin)
    if kv_groups != n_heads:
        expand = np.repeat(np.arange(kv_groups), n_heads // kv_groups)
        k = take(k, expand, axis=1)
        v = take(v, expand, axis=1)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / head_dim**0.5)
    scores = add(scores, _causal_mask(t).reshape(1, 1, t, t))
    probs = softmax(scores, axis=-1)
    heads = matmul(probs, v)  # [B,H,T,hd]
    if head_gates is not None:
        heads = mul(heads, reshape(head_gates, (1, n_heads, 1, 1)))
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (b, t, n_heads * head_dim))
    return matmul(merged, wo)


def ffn_block(
    x: Tensor,
    wgate: Tensor,
    wup: Tensor,
    wdown: Tensor,
    channel_gates: Tensor | None = None,
) -> Tensor:
    """Gated-SiLU FFN sublayer on a normalized input."""
    hidden = mul(silu(matmul(x, wgate)), matmul(x, wup))
    if channel_gates is not None:
        hidden = mul(hidden, channel_gates)
    return matmul(hidden, wdown)


def forward(
    config: ModelConfig,
    params: ParamStore,
    tokens: np.ndarray,
    skip_layers: frozenset[int] | set[int] = frozenset(),
    head_gates: list[Tensor | None] | None = None,
    ffn_gates: list[Tensor | None] | None = None,
) -> Tensor:
    """Logits [B,T,V] for token ids [B,T]. Layers in ``skip_layers`` are
    bypassed entirely (their residual contribution omitted). Optional
    per-layer gates multiply head outputs / FFN hidden channels."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    bad = set(skip_layers) - set(range(config.depth))
    if bad:
        raise ValueError(f"skip_layers {sorted(bad)} outside [0, {config.depth})")
    x = gather_rows(params["embed"], tokens)
    for i in range(config.depth):
        if i in skip_layers:
            continue
        p = f"layers.{i}."
        h = mul(rms_normalize(x), params[p + "attn_norm"])
        x = add(
            x,
            attention_block(
                h,
                params[p + "wq"],
                params[p + "wk"],
                params[p + "wv"],
                params[p + "wo"],
                config.n_heads,
                config.kv_groups,
                config.head_dim,
                head_gates[i] if head_gates is not None else None,
            ),
        )
        f = mul(rms_normalize(x), params[p + "ffn_norm"])
        x = add(
            x,
            ffn_block(
                f,
                params[p + "wgate"],
                params[p + "wup"],
                params[p + "wdown"],
                ffn_gates[i] if ffn_gates is not None else None,
            ),
        )
    x = mul(rms_normalize(x), params["final_norm"])
    return matmul(x, params["head"])


# ---------------------------------------------------------------------------
# inference: greedy decoding with a KV cache (plain numpy, no tape)
# ---------------------------------------------------------------------------


def _np_rms(x: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    s = ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    return x * s * scale


def _np_silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _infer_step(
    config: ModelConfig,
    w: dict[str, np.ndarray],
    token_ids: np.ndarray,
    pos: int,
    cache: list[dict[str, np.ndarray]],
) -> np.ndarray:
    """One decode step: token_ids [B] at absolute position pos -> logits [B,V].
    Appends this step's k/v to the per-layer cache."""
    hd, g, h = config.head_dim, config.kv_groups, config.n_heads
    x = w["embed"][token_ids]  # [B,d]
    cos, sin = _rope_tables(1, hd, offset=pos)
    for i in range(config.depth):
        p = f"layers.{i}."
        hin = _np_rms(x, w[p + "attn_norm"])
        b = hin.shape[0]
        q = (hin @ w[p + "wq"]).reshape(b, h, hd)
        k = (hin @ w[p + "wk"]).reshape(b, g, hd)
        v = (hin @ w[p + "wv"]).reshape(b, g, hd)
        half = hd // 2
        for arr in (q, k):
            a1 = arr[..., :half].copy()
            a2 = arr[..., half:].copy()
            arr[..., :half] = a1 * cos[0] - a2 * sin[0]
            arr[..., half:] = a2 * cos[0] + a1 * sin[0]
        cache[i]["k"] = np.concatenate([cache[i]["k"], k[:, :, None, :]], axis=2)
        cache[i]["v"] = np.concatenate([cache[i]["v"], v[:, :, None, :]], axis=2)
        kc, vc = cache[i]["k"], cache[i]["v"]  # [B,g,T,hd]
        if g != h:
            expand = np.repeat(np.arange(g), h // g)
            kh, vh = kc[:, expand], vc[:, expand]
        else:
            kh, vh = kc, vc
        scores = np.einsum("bhd,bhtd->bht", q, kh) / hd**0.5
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        attn = np.einsum("bht,bhtd->bhd", probs, vh).reshape(b, h * hd)
        x = x + attn @ w[p + "wo"]
        fin = _np_rms(x, w[p + "ffn_norm"])
        hidden = _np_silu(fin @ w[p + "wgate"]) * (fin @ w[p + "wup"])
        x = x + hidden @ w[p + "wdown"]
    x = _np_rms(x, w["final_norm"])
    return x @ w["head"]


def generate(
    config: ModelConfig,
    params: ParamStore,
    prefix: np.ndarray,
    n_new: int,
) -> np.ndarray:
    """Greedy continuation of ``prefix`` ids ([T] or [B,T]) by n_new tokens."""
    if n_new < 1:
        raise ValueError(f"n_new must be >= 1, got {n_new}")
    prefix = np.asarray(prefix)
    squeeze = prefix.ndim == 1
    if squeeze:
        prefix = prefix[None, :]
    if prefix.shape[1] < 1:
        raise ValueError("prefix must contain at least one token")
    w = {k: t.data for k, t in params.tensors.items()}
    b = prefix.shape[0]
    cache = [
        {
            "k": np.zeros((b, config.kv_groups, 0, config.head_dim)),
            "v": np.zeros((b, config.kv_groups, 0, config.head_dim)),
        }
        for _ in range(config.depth)
    ]
    logits = None
    for pos in range(prefix.shape[1]):
        logits = _infer_step(config, w, prefix[:, pos], pos, cache)
    out = [prefix]
    cur = logits.argmax(axis=-1)
    out.append(cur[:, None])
    for step in range(1, n_new):
        logits = _infer_step(config, w, cur, prefix.shape[1] + step - 1, cache)
        cur = logits.argmax(axis=-1)
        out.append(cur[:, None])
    full = np.concatenate(out, axis=1)
    return full[0] if squeeze else full


def speed_bench(
    config: ModelConfig,
    params: ParamStore,
    prefix_len: int = 2,
    new_tokens: int = 510,
    batch: int = 20,
    repeats: int = 1,
) -> float:
    """Greedy-decoding throughput in generated tokens per second. Only
    meaningful for comparisons between configs on the same machine."""
    rng = np.random.default_rng(0)
    prefix = rng.integers(0, config.vocab_size, size=(batch, prefix_len))
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        generate(config, params, prefix, new_tokens)
        best = min(best, time.perf_counter() - t0)
    return batch * new_tokens / best


# ---------------------------------------------------------------------------
# checkpoint file: JSON manifest + raw little-endian float64 payload
# ---------------------------------------------------------------------------

_MAGIC = b"TLMCKPT1"


def save_checkpoint(path, config: ModelConfig, params: ParamStore) -> None:
    names = sorted(params.tensors)
    entries = []
    offset = 0
    for name in names:
        t = params.tensors[name]
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    manifest = json.dumps({"config": config.to_dict(), "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for name in names:
            fh.write(params.tensors[name].data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ParamStore]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen))
        payload = fh.read()
    config = ModelConfig.from_dict(manifest["config"])
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + n * 8], dtype="<f8").reshape(shape)
        tensors[entry["name"]] = Tensor(arr.copy())
    store = ParamStore(tensors)
    store.validate(config)
    return config, store
