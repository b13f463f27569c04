"""Embeddings, stacked attention layers, the pooling classifier and checkpoints.

Parameters live in one flat ``name -> ndarray`` dict. Sharing is expressed
through the name space: a shared tensor has exactly one name, and every
position that uses it resolves to that name. Gradients use the same names,
so contributions from all uses of a shared tensor accumulate automatically.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attention as att
from . import numerics as nx
from .attention import AttentionLayerParams, HeadParams, InteractionMode, VanillaHeadParams
from .errors import (
    CheckpointShapeError,
    ConfigError,
    CorruptHeaderError,
    InputError,
    TruncatedPayloadError,
)
from .numerics import Tensor

MAX_MODEL_WIDTH = 4096
BACKBONES = ("fastformer", "vanilla")

CHECKPOINT_MAGIC = b"FFCKPT01"


@dataclass
class FastformerConfig:
    num_layers: int = 2
    heads: int = 16
    head_dim: int = 16
    vocab_size: int = 8
    max_len: int = 512
    num_classes: int = 8
    interaction: str = "product"
    share_qv: bool = True
    share_heads: bool = False
    share_layers: bool = True
    use_positional: bool = True
    use_layernorm: bool = True
    use_ffn: bool = True
    ffn_mult: int = 4
    dropout: float = 0.2
    backbone: str = "fastformer"
    full_projection: bool = False
    precision: str = "f32"
    init_std: float = 0.02
    ln_eps: float = 1e-5

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def mode(self) -> InteractionMode:
        return InteractionMode.parse(self.interaction)

    def problems(self) -> list[str]:
        out = []
        for name in ("heads", "head_dim", "vocab_size", "max_len", "num_classes", "ffn_mult"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                out.append(f"{name} must be a positive integer")
        if not isinstance(self.num_layers, int) or self.num_layers < 0:
            out.append("num_layers must be a non-negative integer")
        if not out and self.width > MAX_MODEL_WIDTH:
            out.append(f"heads*head_dim = {self.width} exceeds the maximum width {MAX_MODEL_WIDTH}")
        if not 0.0 <= self.dropout < 1.0:
            out.append("dropout must lie in [0, 1)")
        if self.backbone not in BACKBONES:
            out.append(f"backbone must be one of {BACKBONES}")
        if self.interaction not in {m.value for m in InteractionMode} | {"elementwise_product", "concat"}:
            out.append(f"interaction {self.interaction!r} is not a known mode")
        if self.precision not in nx.PRECISIONS:
            out.append(f"precision must be one of {sorted(nx.PRECISIONS)}")
        if self.init_std < 0:
            out.append("init_std must be non-negative")
        if self.ln_eps <= 0:
            out.append("ln_eps must be positive")
        return out

    def validate(self) -> "FastformerConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self


@dataclass
class Model:
    config: FastformerConfig
    params: dict = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return nx.dtype_of(self.config.precision)


# ---------------------------------------------------------------------------
# name space
# ---------------------------------------------------------------------------


def _layer_prefix(config: FastformerConfig, layer: int) -> str:
    return f"layers.{0 if config.share_layers else layer}"


def _head_prefix(config: FastformerConfig, layer: int, head: int) -> str:
    return f"{_layer_prefix(config, layer)}.attn.head{0 if config.share_heads else head}"


def head_param_name(config: FastformerConfig, layer: int, head: int, key: str) -> str:
    """Storage name of one head weight, after all three sharing rules."""
    if key == "W_v" and config.share_qv:
        key = "W_q"
    return f"{_head_prefix(config, layer, head)}.{key}"


def param_shapes(config: FastformerConfig) -> dict:
    """Ordered ``name -> shape`` for every stored parameter of ``config``."""
    config.validate()
    D, d, h = config.width, config.head_dim, config.heads
    d_in = D if config.full_projection else d
    shapes: dict = {"embed.token": (config.vocab_size, D)}
    if config.use_positional:
        shapes["embed.pos"] = (config.max_len, D)
    stored_layers = 1 if config.share_layers and config.num_layers else config.num_layers
    stored_heads = 1 if config.share_heads else h
    for l in range(stored_layers):
        for j in range(stored_heads):
            base = _head_prefix(config, l, j)
            shapes[f"{base}.W_q"] = (d_in, d)
            shapes[f"{base}.W_k"] = (d_in, d)
            if not config.share_qv:
                shapes[f"{base}.W_v"] = (d_in, d)
            if config.backbone == "fastformer":
                shapes[f"{base}.W_r"] = (d, d)
                shapes[f"{base}.w_q"] = (d,)
                shapes[f"{base}.w_k"] = (d,)
                if config.mode is InteractionMode.CONCAT_PROJECT:
                    shapes[f"{base}.W_pk"] = (2 * d, d)
                    shapes[f"{base}.W_pv"] = (2 * d, d)
        prefix = _layer_prefix(config, l)
        if config.backbone == "vanilla":
            shapes[f"{prefix}.attn.W_o"] = (D, D)
        if config.use_layernorm:
            shapes[f"{prefix}.ln1.gain"] = (D,)
            shapes[f"{prefix}.ln1.bias"] = (D,)
        if config.use_ffn:
            shapes[f"{prefix}.ffn.W_in"] = (D, config.ffn_mult * D)
            shapes[f"{prefix}.ffn.W_out"] = (config.ffn_mult * D, D)
            if config.use_layernorm:
                shapes[f"{prefix}.ln2.gain"] = (D,)
                shapes[f"{prefix}.ln2.bias"] = (D,)
    shapes["classifier.w_pool"] = (D,)
    shapes["classifier.W"] = (D, config.num_classes)
    shapes["classifier.b"] = (config.num_classes,)
    return shapes


def build_model(config: FastformerConfig, seed: int = 0) -> Model:
    """Initialise every parameter from its own name-keyed random stream."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=nx.dtype_of(config.precision))
        elif name.endswith(".bias") or name == "classifier.b":
            params[name] = np.zeros(shape, dtype=nx.dtype_of(config.precision))
        else:
            params[name] = nx.seeded_normal(shape, nx.name_seed(name, seed), config.init_std, config.precision)
    return Model(config=config, params=params)


def attention_layer(model: Model, layer: int) -> AttentionLayerParams:
    """Structured view of one layer's attention weights (arrays are shared, not copied)."""
    config, p = model.config, model.params
    views: dict = {}
    heads = []
    for j in range(config.heads):
        base = _head_prefix(config, layer, j)
        if base not in views:
            get = lambda key: p.get(head_param_name(config, layer, j, key))  # noqa: E731
            if config.backbone == "fastformer":
                views[base] = HeadParams(
                    W_q=get("W_q"), W_k=get("W_k"), W_v=get("W_v"), W_r=get("W_r"),
                    w_q=get("w_q"), w_k=get("w_k"), W_pk=get("W_pk"), W_pv=get("W_pv"),
                )
            else:
                views[base] = VanillaHeadParams(W_q=get("W_q"), W_k=get("W_k"), W_v=get("W_v"))
        heads.append(views[base])
    W_o = p.get(f"{_layer_prefix(config, layer)}.attn.W_o")
    return AttentionLayerParams(heads=heads, W_o=W_o, full_projection=config.full_projection)


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def count_attention_params(config: FastformerConfig) -> int:
    """Closed-form attention-core parameter count (no embeddings, LN, FFN or classifier)."""
    config.validate()
    d, h = config.head_dim, config.heads
    d_in = config.width if config.full_projection else d
    projections = 2 if config.share_qv else 3
    per_head = projections * d_in * d
    if config.backbone == "fastformer":
        per_head += d * d + 2 * d
        if config.mode is InteractionMode.CONCAT_PROJECT:
            per_head += 2 * (2 * d * d)
    per_layer = per_head * (1 if config.share_heads else h)
    if config.backbone == "vanilla":
        per_layer += config.width ** 2
    return per_layer * (1 if config.share_layers else config.num_layers)


def count_attention_params_per_layer(config: FastformerConfig) -> int:
    return count_attention_params(dataclasses.replace(config, num_layers=1))


def structural_attention_params(model: Model) -> int:
    """Number of attention-core scalars actually stored in ``model``."""
    return sum(a.size for name, a in model.params.items() if ".attn." in name)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class LayerCache:
    attn: object
    attn_mask: Optional[Tensor] = None
    ln1: Optional[nx.LayerNormStats] = None
    ffn_in: Optional[Tensor] = None
    ffn_pre: Optional[Tensor] = None
    ffn_mask: Optional[Tensor] = None
    ln2: Optional[nx.LayerNormStats] = None


@dataclass
class ModelCache:
    ids: np.ndarray
    embed_mask: Optional[Tensor]
    layers: list
    H: Tensor
    pool_weights: Optional[Tensor] = None
    pooled: Optional[Tensor] = None


def _as_batch(ids, config: FastformerConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"token ids must be a sequence or a batch of sequences, got shape {ids.shape}")
    N = ids.shape[1]
    if N == 0:
        raise InputError("empty token sequence")
    if N > config.max_len:
        raise InputError(f"sequence length {N} exceeds max_len {config.max_len}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    bad = np.argwhere((ids < 0) | (ids >= config.vocab_size))
    if bad.size:
        b, i = bad[0]
        raise InputError(f"token id {ids[b, i]} at position {i} is outside vocab of size {config.vocab_size}")
    return ids


def _dropout_mask(shape, rate: float, rng: Optional[np.random.Generator], dtype) -> Optional[Tensor]:
    if rng is None or rate == 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def encode(model: Model, ids, rng: Optional[np.random.Generator] = None, return_cache: bool = False):
    """Token ids ``[N]`` or ``[B, N]`` to hidden states ``[..., N, D]``.

    Dropout is active only when ``rng`` is given.
    """
    config, p = model.config, model.params
    single = np.asarray(ids).ndim == 1
    ids = _as_batch(ids, config)
    dtype = model.dtype
    N = ids.shape[1]
    H = p["embed.token"][ids]
    if config.use_positional:
        H = H + p["embed.pos"][:N]
    embed_mask = _dropout_mask(H.shape, config.dropout, rng, dtype)
    if embed_mask is not None:
        H = H * embed_mask
    layer_caches = []
    for l in range(config.num_layers):
        prefix = _layer_prefix(config, l)
        layer = attention_layer(model, l)
        if config.backbone == "fastformer":
            A, acache = att.multihead_forward(H, layer, config.mode)
        else:
            A, acache = att.vanilla_attention_forward(H, layer)
        lc = LayerCache(attn=acache)
        lc.attn_mask = _dropout_mask(A.shape, config.dropout, rng, dtype)
        if lc.attn_mask is not None:
            A = A * lc.attn_mask
        S = H + A
        if config.use_layernorm:
            S, lc.ln1 = nx.layer_norm(S, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], config.ln_eps, return_stats=True)
        H = S
        if config.use_ffn:
            lc.ffn_in = H
            lc.ffn_pre = nx.matmul(H, p[f"{prefix}.ffn.W_in"])
            F = nx.matmul(np.maximum(lc.ffn_pre, 0), p[f"{prefix}.ffn.W_out"])
            lc.ffn_mask = _dropout_mask(F.shape, config.dropout, rng, dtype)
            if lc.ffn_mask is not None:
                F = F * lc.ffn_mask
            S = H + F
            if config.use_layernorm:
                S, lc.ln2 = nx.layer_norm(S, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], config.ln_eps, return_stats=True)
            H = S
        layer_caches.append(lc)
    nx.check_finite(H, "encoder output")
    out = H[0] if single else H
    if return_cache:
        return out, ModelCache(ids=ids, embed_mask=embed_mask, layers=layer_caches, H=H)
    return out


def forward(model: Model, ids, rng: Optional[np.random.Generator] = None) -> tuple[Tensor, ModelCache]:
    """Batched logits ``[B, C]`` plus everything the backward pass needs."""
    p = model.params
    H, cache = encode(model, np.atleast_2d(np.asarray(ids)), rng=rng, return_cache=True)
    cache.pool_weights, cache.pooled = att.additive_pool(H, p["classifier.w_pool"], stage="classifier")
    logits = nx.matmul(cache.pooled, p["classifier.W"]) + p["classifier.b"]
    return logits, cache


def classify(model: Model, ids) -> Tensor:
    """Logits ``[C]`` for one sequence (or ``[B, C]`` for a batch); no dropout."""
    logits, _ = forward(model, ids)
    return logits[0] if np.asarray(ids).ndim == 1 else logits


def _acc(grads: dict, name: str, g: Tensor) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = np.array(g, copy=True)


def backward(model: Model, cache: ModelCache, d_logits: Tensor, freeze_embeddings: bool = False) -> dict:
    """Gradients of ``sum(d_logits * logits)`` for every parameter name."""
    config, p = model.config, model.params
    grads: dict = {}
    _acc(grads, "classifier.b", d_logits.sum(axis=0))
    _acc(grads, "classifier.W", cache.pooled.T @ d_logits)
    d_pooled = d_logits @ p["classifier.W"].T
    dH, dw_pool = att.additive_pool_backward(cache.H, p["classifier.w_pool"], cache.pool_weights, d_pooled)
    _acc(grads, "classifier.w_pool", dw_pool)

    for l in reversed(range(config.num_layers)):
        prefix = _layer_prefix(config, l)
        lc = cache.layers[l]
        if config.use_ffn:
            dS = dH
            if config.use_layernorm:
                dS, dg, db = nx.layer_norm_backward(dH, lc.ln2, p[f"{prefix}.ln2.gain"])
                _acc(grads, f"{prefix}.ln2.gain", dg)
                _acc(grads, f"{prefix}.ln2.bias", db)
            dF = dS if lc.ffn_mask is None else dS * lc.ffn_mask
            relu = np.maximum(lc.ffn_pre, 0)
            _acc(grads, f"{prefix}.ffn.W_out", att._sum_outer(relu, dF))
            d_pre = (dF @ p[f"{prefix}.ffn.W_out"].T) * (lc.ffn_pre > 0)
            _acc(grads, f"{prefix}.ffn.W_in", att._sum_outer(lc.ffn_in, d_pre))
            dH = dS + d_pre @ p[f"{prefix}.ffn.W_in"].T
        dS = dH
        if config.use_layernorm:
            dS, dg, db = nx.layer_norm_backward(dH, lc.ln1, p[f"{prefix}.ln1.gain"])
            _acc(grads, f"{prefix}.ln1.gain", dg)
            _acc(grads, f"{prefix}.ln1.bias", db)
        dA = dS if lc.attn_mask is None else dS * lc.attn_mask
        layer = attention_layer(model, l)
        if config.backbone == "fastformer":
            dX, head_grads = att.multihead_backward(lc.attn, layer, dA)
        else:
            dX, head_grads, dW_o = att.vanilla_attention_backward(lc.attn, layer, dA)
            _acc(grads, f"{prefix}.attn.W_o", dW_o)
        for j, hg in enumerate(head_grads):
            for key, g in hg.items():
                _acc(grads, head_param_name(config, l, j, key), g)
        dH = dS + dX

    if not freeze_embeddings:
        dE = dH if cache.embed_mask is None else dH * cache.embed_mask
        if config.use_positional:
            N = cache.ids.shape[1]
            dpos = np.zeros_like(p["embed.pos"])
            dpos[:N] = dE.sum(axis=0)
            _acc(grads, "embed.pos", dpos)
        dtok = np.zeros_like(p["embed.token"])
        np.add.at(dtok, cache.ids.reshape(-1), dE.reshape(-1, dE.shape[-1]))
        _acc(grads, "embed.token", dtok)
    return grads


# ---------------------------------------------------------------------------
# scalar-loop end-to-end reference
# ---------------------------------------------------------------------------


def _ref_layer_norm(row, gain, bias, eps):
    n = len(row)
    mean = sum(row) / n
    var = sum((v - mean) ** 2 for v in row) / n
    return [(row[c] - mean) / math.sqrt(var + eps) * gain[c] + bias[c] for c in range(n)]


def _ref_vecmat(v, W):
    return [sum(v[a] * W[a][b] for a in range(len(W))) for b in range(len(W[0]))]


def reference_logits(model: Model, ids) -> Tensor:
    """Inference logits for one sequence computed with explicit Python loops."""
    config, p = model.config, model.params
    ids = list(ids)
    tok = p["embed.token"].tolist()
    H = [list(tok[t]) for t in ids]
    if config.use_positional:
        pos = p["embed.pos"].tolist()
        H = [[H[i][c] + pos[i][c] for c in range(config.width)] for i in range(len(ids))]
    for l in range(config.num_layers):
        prefix = _layer_prefix(config, l)
        layer = attention_layer(model, l)
        if config.backbone == "fastformer":
            A = att.reference_forward(np.array(H), layer, config.mode).tolist()
        else:
            A = att.reference_vanilla_forward(np.array(H), layer).tolist()
        H = [[H[i][c] + A[i][c] for c in range(config.width)] for i in range(len(H))]
        if config.use_layernorm:
            g, b = p[f"{prefix}.ln1.gain"].tolist(), p[f"{prefix}.ln1.bias"].tolist()
            H = [_ref_layer_norm(row, g, b, config.ln_eps) for row in H]
        if config.use_ffn:
            W_in, W_out = p[f"{prefix}.ffn.W_in"].tolist(), p[f"{prefix}.ffn.W_out"].tolist()
            F = [_ref_vecmat([max(v, 0.0) for v in _ref_vecmat(row, W_in)], W_out) for row in H]
            H = [[H[i][c] + F[i][c] for c in range(config.width)] for i in range(len(H))]
            if config.use_layernorm:
                g, b = p[f"{prefix}.ln2.gain"].tolist(), p[f"{prefix}.ln2.bias"].tolist()
                H = [_ref_layer_norm(row, g, b, config.ln_eps) for row in H]
    w = p["classifier.w_pool"].tolist()
    scores = [sum(w[c] * row[c] for c in range(config.width)) / math.sqrt(config.width) for row in H]
    e = [math.exp(s) for s in scores]
    weights = [v / sum(e) for v in e]
    pooled = [sum(weights[i] * H[i][c] for i in range(len(H))) for c in range(config.width)]
    logits = _ref_vecmat(pooled, p["classifier.W"].tolist())
    bias = p["classifier.b"].tolist()
    return np.array([logits[c] + bias[c] for c in range(config.num_classes)])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> Path:
    """Write ``FFCKPT01`` + u32 header length + JSON header + little-endian payload."""
    header, chunks, offset = {}, [], 0
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        header[name] = {
            "dtype": nx.precision_of(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        }
        chunks.append(data)
        offset += len(data)
    raw = json.dumps(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for chunk in chunks:
            fh.write(chunk)
    return path


def _read_header(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise CorruptHeaderError("missing FFCKPT01 magic")
    (n,) = struct.unpack("<I", blob[8:12])
    if 12 + n > len(blob):
        raise CorruptHeaderError(f"header length {n} runs past end of file")
    try:
        header = json.loads(blob[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise CorruptHeaderError("header must be a JSON object")
    return header, blob[12 + n:]


def load_checkpoint(path, config: FastformerConfig) -> Model:
    """Read a checkpoint and validate it against the shapes ``config`` implies."""
    header, payload = _read_header(Path(path).read_bytes())
    spans = []
    for name, entry in header.items():
        try:
            dtype = nx.dtype_of(entry["dtype"])
            shape = tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeaderError(f"bad header entry for {name!r}: {exc}") from None
        if offset < 0 or nbytes != math.prod(shape) * dtype.itemsize:
            raise CorruptHeaderError(f"inconsistent offset/size for {name!r}")
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptHeaderError(f"payload ranges of {a!r} and {b!r} overlap")
    if spans and max(end for _, end, _ in spans) > len(payload):
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes but the header needs {max(end for _, end, _ in spans)}"
        )

    precisions = {entry["dtype"] for entry in header.values()}
    if len(precisions) > 1:
        raise CorruptHeaderError(f"mixed precisions in one checkpoint: {sorted(precisions)}")
    if precisions:
        config = dataclasses.replace(config, precision=precisions.pop())
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in header:
            raise CheckpointShapeError(f"parameter {name!r} expected by the config is missing from the checkpoint")
        if tuple(header[name]["shape"]) != tuple(shape):
            raise CheckpointShapeError(
                f"parameter {name!r} has shape {tuple(header[name]['shape'])} in the checkpoint, config expects {tuple(shape)}"
            )
    extra = sorted(set(header) - set(expected))
    if extra:
        raise CheckpointShapeError(f"checkpoint parameter {extra[0]!r} is not part of the config")

    params = {}
    for name in expected:
        entry = header[name]
        dtype = nx.dtype_of(entry["dtype"]).newbyteorder("<")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        params[name] = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(entry["shape"])
    return Model(config=config, params=params)
