"""Additive-attention heads, the dot-product baseline and their exact gradients.

All fast-path functions accept arrays shaped ``[..., N, width]``; any leading
axes are treated as a batch. Parameter gradients are summed over the batch.
"""

from __future__ import annotations

import contextlib
import enum
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .numerics import Tensor


class InteractionMode(str, enum.Enum):
    PRODUCT = "product"
    ADD = "add"
    CONCAT_PROJECT = "concat_project"

    @classmethod
    def parse(cls, value) -> "InteractionMode":
        if isinstance(value, cls):
            return value
        aliases = {"elementwise_product": "product", "concat": "concat_project"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ConfigError(f"unknown interaction mode {value!r}") from None


@dataclass
class HeadParams:
    """Weights of one additive-attention head.

    With query-value sharing ``W_v`` is the very same array object as
    ``W_q``. ``W_pk`` / ``W_pv`` are the ``[2d, d]`` projections used only by
    the concat interaction (global query with keys, global key with values).
    """

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_r: Tensor
    w_q: Tensor
    w_k: Tensor
    W_pk: Optional[Tensor] = None
    W_pv: Optional[Tensor] = None

    @property
    def shares_qv(self) -> bool:
        return self.W_v is self.W_q

    @property
    def head_dim(self) -> int:
        return self.W_r.shape[0]


@dataclass
class VanillaHeadParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    @property
    def shares_qv(self) -> bool:
        return self.W_v is self.W_q

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[1]


@dataclass
class AttentionLayerParams:
    """Per-layer attention weights.

    ``heads`` may hold the same object at every position (head sharing).
    ``W_o`` is only present for the dot-product baseline.
    """

    heads: list
    W_o: Optional[Tensor] = None
    full_projection: bool = False

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def head_dim(self) -> int:
        return self.heads[0].head_dim


@dataclass
class ForwardCache:
    x: Tensor
    Q: Tensor
    K: Tensor
    V: Tensor
    alpha: Tensor
    q: Tensor
    P: Tensor
    beta: Tensor
    k: Tensor
    U: Tensor
    R: Tensor
    mode: InteractionMode


@dataclass
class VanillaHeadCache:
    x: Tensor
    Q: Tensor
    K: Tensor
    V: Tensor
    A: Tensor


@dataclass
class VanillaCache:
    heads: list
    H: Tensor


# ---------------------------------------------------------------------------
# attention-weight observation
# ---------------------------------------------------------------------------

_weight_hooks: list[Callable[[str, Tensor], None]] = []


@contextlib.contextmanager
def observe_attention_weights(callback: Optional[Callable[[str, Tensor], None]] = None) -> Iterator[list]:
    """Collect ``(stage, weights)`` for every additive pool run inside the block.

    With ``callback`` the weights are handed to it instead of being copied
    into the yielded list, which then stays empty. Use this for long runs.
    """
    seen: list = []
    hook = callback or (lambda stage, w: seen.append((stage, np.array(w, copy=True))))
    _weight_hooks.append(hook)
    try:
        yield seen
    finally:
        _weight_hooks.remove(hook)


def _emit(stage: str, weights: Tensor) -> None:
    for hook in _weight_hooks:
        hook(stage, weights)


def _sum_outer(a: Tensor, b: Tensor, keep_head: bool = False) -> Tensor:
    """Sum over leading axes of ``a[..., n, i] b[..., n, j]``.

    With ``keep_head`` the axis just before ``n`` is a head axis and is kept,
    giving ``[h, i, j]``.
    """
    if not keep_head:
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])
    h = a.shape[-3]
    a2 = np.moveaxis(a, -3, 0).reshape(h, -1, a.shape[-1])
    b2 = np.moveaxis(b, -3, 0).reshape(h, -1, b.shape[-1])
    return np.swapaxes(a2, -1, -2) @ b2


def _t(W: Tensor) -> Tensor:
    return np.swapaxes(W, -1, -2)


def _stacked(w: Tensor) -> bool:
    """True when a head weight carries a leading head axis."""
    return w.ndim == 3


def _check(x: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values at stage {stage!r}")
    return x


# ---------------------------------------------------------------------------
# additive pooling
# ---------------------------------------------------------------------------


def additive_pool(M: Tensor, w: Tensor, stage: str = "pool") -> tuple[Tensor, Tensor]:
    """Softmax-weighted average of the rows of ``M`` scored by ``w . M_i / sqrt(d)``."""
    if M.shape[-2] == 0:
        raise DomainError("additive pooling over an empty sequence")
    if w.shape[-1:] != M.shape[-1:]:
        raise ShapeError(f"pool vector {w.shape} does not match rows {M.shape}")
    d = M.shape[-1]
    scores = nx.scale(nx.matmul(M, w[..., :, None])[..., 0], 1.0 / math.sqrt(d))
    weights = nx.softmax_stable(scores)
    pooled = nx.matmul(weights[..., None, :], M)[..., 0, :]
    _emit(stage, weights)
    return weights, pooled


def additive_pool_backward(
    M: Tensor,
    w: Tensor,
    weights: Tensor,
    d_pooled: Tensor,
    d_weights_extra: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Return ``(dM, dw)`` given cotangents of the pooled vector and the weights.

    A ``[h, d]`` pool vector means ``M`` has a head axis before the rows;
    ``dw`` then keeps that axis.
    """
    if weights.shape != M.shape[:-1] or d_pooled.shape != M.shape[:-2] + M.shape[-1:]:
        raise ShapeError(
            f"pool cache mismatch: M {M.shape}, weights {weights.shape}, d_pooled {d_pooled.shape}"
        )
    d = M.shape[-1]
    d_w = np.matmul(M, d_pooled[..., :, None])[..., 0]
    if d_weights_extra is not None:
        d_w = d_w + d_weights_extra
    d_scores = nx.softmax_backward(weights, d_w) / math.sqrt(d)
    dM = weights[..., :, None] * d_pooled[..., None, :] + d_scores[..., :, None] * w[..., None, :]
    dw = _sum_outer(d_scores[..., None], M, keep_head=w.ndim == 2)[..., 0, :]
    return dM, dw


# ---------------------------------------------------------------------------
# interaction functions
# ---------------------------------------------------------------------------


def interact(global_vec: Tensor, rows: Tensor, mode, W_proj: Optional[Tensor] = None) -> Tensor:
    """Combine one global vector with every row of ``rows``."""
    mode = InteractionMode.parse(mode)
    g = global_vec[..., None, :]
    if mode is InteractionMode.PRODUCT:
        return nx.mul(g, rows)
    if mode is InteractionMode.ADD:
        return nx.add(g, rows)
    if W_proj is None:
        raise ConfigError("concat_project interaction needs a [2d, d] projection")
    cat = np.concatenate([np.broadcast_to(g, rows.shape), rows], axis=-1)
    return nx.matmul(cat, W_proj)


def interact_backward(global_vec: Tensor, rows: Tensor, mode, W_proj: Optional[Tensor], d_out: Tensor):
    """Return ``(d_global, d_rows, dW_proj)``; ``dW_proj`` is None outside concat mode."""
    mode = InteractionMode.parse(mode)
    if mode is InteractionMode.PRODUCT:
        d_global = np.sum(d_out * rows, axis=-2)
        return d_global, d_out * global_vec[..., None, :], None
    if mode is InteractionMode.ADD:
        return np.sum(d_out, axis=-2), d_out, None
    d = rows.shape[-1]
    cat = np.concatenate([np.broadcast_to(global_vec[..., None, :], rows.shape), rows], axis=-1)
    dW = _sum_outer(cat, d_out, keep_head=_stacked(W_proj))
    d_cat = np.matmul(d_out, _t(W_proj))
    return np.sum(d_cat[..., :d], axis=-2), d_cat[..., d:], dW


# ---------------------------------------------------------------------------
# additive-attention head
# ---------------------------------------------------------------------------


def fastformer_head_forward(x: Tensor, p: HeadParams, mode) -> tuple[Tensor, ForwardCache]:
    """Global query, context-aware keys, global key, key-value interaction, output transform, query residual.

    ``p`` may be a stack of heads (every weight with a leading ``h`` axis), in
    which case ``x`` is ``[..., h, N, d_in]`` and each head runs on its slice.
    """
    mode = InteractionMode.parse(mode)
    if x.shape[-1] != p.W_q.shape[-2]:
        raise ShapeError(f"head input width {x.shape[-1]} does not match W_q {p.W_q.shape}")
    Q = _check(nx.matmul(x, p.W_q), "query transform")
    K = _check(nx.matmul(x, p.W_k), "key transform")
    V = Q if p.shares_qv else _check(nx.matmul(x, p.W_v), "value transform")
    alpha, q = additive_pool(Q, p.w_q, stage="alpha")
    _check(q, "global query")
    P = interact(q, K, mode, p.W_pk)
    beta, k = additive_pool(P, p.w_k, stage="beta")
    _check(k, "global key")
    U = interact(k, V, mode, p.W_pv)
    R = nx.matmul(U, p.W_r)
    out = _check(nx.add(R, Q), "head output")
    cache = ForwardCache(x=x, Q=Q, K=K, V=V, alpha=alpha, q=q, P=P, beta=beta, k=k, U=U, R=R, mode=mode)
    return out, cache


def fastformer_head_backward(cache: ForwardCache, p: HeadParams, d_out: Tensor) -> tuple[Tensor, dict]:
    """Reverse pass of one head.

    Returns ``dx`` and a gradient dict keyed like the ``HeadParams`` fields.
    Under query-value sharing there is no ``W_v`` entry; both paths land in
    ``W_q``.
    """
    if d_out.shape != cache.Q.shape or cache.x.shape[-1] != p.W_q.shape[-2]:
        raise ShapeError(f"cotangent {d_out.shape} / cache {cache.Q.shape} / params {p.W_q.shape} disagree")
    mode = cache.mode
    keep = _stacked(p.W_r)
    grads: dict = {}
    dQ = d_out
    grads["W_r"] = _sum_outer(cache.U, d_out, keep)
    dU = np.matmul(d_out, _t(p.W_r))
    dk, dV, dW_pv = interact_backward(cache.k, cache.V, mode, p.W_pv, dU)
    dP, grads["w_k"] = additive_pool_backward(cache.P, p.w_k, cache.beta, dk)
    dq, dK, dW_pk = interact_backward(cache.q, cache.K, mode, p.W_pk, dP)
    dQ_pool, grads["w_q"] = additive_pool_backward(cache.Q, p.w_q, cache.alpha, dq)
    dQ = dQ + dQ_pool
    if mode is InteractionMode.CONCAT_PROJECT:
        grads["W_pk"] = dW_pk
        grads["W_pv"] = dW_pv
    x = cache.x
    if p.shares_qv:
        dQ = dQ + dV
        grads["W_q"] = _sum_outer(x, dQ, keep)
        dx = np.matmul(dQ, _t(p.W_q))
    else:
        grads["W_q"] = _sum_outer(x, dQ, keep)
        grads["W_v"] = _sum_outer(x, dV, keep)
        dx = np.matmul(dQ, _t(p.W_q)) + np.matmul(dV, _t(p.W_v))
    grads["W_k"] = _sum_outer(x, dK, keep)
    dx = dx + np.matmul(dK, _t(p.W_k))
    return dx, grads


def stack_heads(heads: list) -> HeadParams:
    """Stack per-head weights along a new leading axis (aliasing of W_v to W_q is kept)."""
    first = heads[0]

    def st(key):
        if getattr(first, key) is None:
            return None
        return np.stack([getattr(hp, key) for hp in heads])

    W_q = st("W_q")
    return HeadParams(
        W_q=W_q, W_k=st("W_k"), W_v=W_q if first.shares_qv else st("W_v"), W_r=st("W_r"),
        w_q=st("w_q"), w_k=st("w_k"), W_pk=st("W_pk"), W_pv=st("W_pv"),
    )


@dataclass
class MultiheadCache:
    """Forward cache of all heads of one layer, evaluated together.

    ``head`` holds every intermediate with a head axis before the sequence
    axis (``alpha`` is ``[..., h, N]``, ``Q`` is ``[..., h, N, d]`` and so on).
    ``params`` is the stacked weight set, or the single shared head.
    """

    head: ForwardCache
    params: HeadParams
    shared: bool


def _split_input(X: Tensor, layer: AttentionLayerParams) -> Tensor:
    h, d = layer.num_heads, layer.head_dim
    if layer.full_projection:
        return np.broadcast_to(X[..., None, :, :], X.shape[:-2] + (h,) + X.shape[-2:])
    if X.shape[-1] % h:
        raise ConfigError(f"model width {X.shape[-1]} not divisible by {h} heads")
    if X.shape[-1] != h * d:
        raise ConfigError(f"model width {X.shape[-1]} != heads {h} x head_dim {d}")
    return np.moveaxis(X.reshape(X.shape[:-1] + (h, d)), -2, -3)


def _merge_heads(Y: Tensor) -> Tensor:
    Y = np.moveaxis(Y, -3, -2)
    return Y.reshape(Y.shape[:-2] + (Y.shape[-2] * Y.shape[-1],))


def multihead_forward(X: Tensor, layer: AttentionLayerParams, mode) -> tuple[Tensor, MultiheadCache]:
    """Run head ``j`` on chunk ``j`` of the width and concatenate the head outputs.

    All heads are evaluated in one batched pass; numerically this is the same
    as looping over ``fastformer_head_forward`` per chunk.
    """
    xh = _split_input(X, layer)
    shared = all(hp is layer.heads[0] for hp in layer.heads)
    params = layer.heads[0] if shared else stack_heads(layer.heads)
    out, cache = fastformer_head_forward(xh, params, mode)
    return _merge_heads(out), MultiheadCache(head=cache, params=params, shared=shared)


def multihead_backward(cache: MultiheadCache, layer: AttentionLayerParams, dY: Tensor) -> tuple[Tensor, list]:
    """Return ``dX`` and per-head gradient dicts.

    The list has one entry per head position, or a single entry holding the
    total when every position uses the same shared head.
    """
    h, d = layer.num_heads, layer.head_dim
    dYh = np.moveaxis(dY.reshape(dY.shape[:-1] + (h, d)), -2, -3)
    dxh, grads = fastformer_head_backward(cache.head, cache.params, dYh)
    if layer.full_projection:
        dX = dxh.sum(axis=-3)
    else:
        dX = _merge_heads(dxh)
    if cache.shared:
        return dX, [grads]
    return dX, [{key: g[j] for key, g in grads.items()} for j in range(h)]


def _head_slices(X: Tensor, layer: AttentionLayerParams):
    h, d = layer.num_heads, layer.head_dim
    if layer.full_projection:
        return [slice(None)] * h
    if X.shape[-1] % h:
        raise ConfigError(f"model width {X.shape[-1]} not divisible by {h} heads")
    if X.shape[-1] != h * d:
        raise ConfigError(f"model width {X.shape[-1]} != heads {h} x head_dim {d}")
    return [slice(j * d, (j + 1) * d) for j in range(h)]


def _input_slice(layer: AttentionLayerParams, j: int) -> slice:
    if layer.full_projection:
        return slice(None)
    d = layer.head_dim
    return slice(j * d, (j + 1) * d)


# ---------------------------------------------------------------------------
# dot-product baseline
# ---------------------------------------------------------------------------


def vanilla_attention_forward(X: Tensor, layer: AttentionLayerParams, causal: bool = False) -> tuple[Tensor, VanillaCache]:
    """Multi-head softmax(QK^T / sqrt(d)) V followed by the output transform."""
    if causal:
        raise ConfigError("causal attention is not supported")
    if layer.W_o is None:
        raise ConfigError("dot-product attention needs an output transform W_o")
    d = layer.head_dim
    outs, caches = [], []
    for head, sl in zip(layer.heads, _head_slices(X, layer)):
        x = X[..., sl]
        Q = nx.matmul(x, head.W_q)
        K = nx.matmul(x, head.W_k)
        V = Q if head.shares_qv else nx.matmul(x, head.W_v)
        S = nx.scale(nx.matmul(Q, np.swapaxes(K, -1, -2)), 1.0 / math.sqrt(d))
        A = nx.softmax_stable(S)
        outs.append(nx.matmul(A, V))
        caches.append(VanillaHeadCache(x=x, Q=Q, K=K, V=V, A=A))
    H = np.concatenate(outs, axis=-1)
    Y = _check(nx.matmul(H, layer.W_o), "attention output")
    return Y, VanillaCache(heads=caches, H=H)


def vanilla_attention_backward(cache: VanillaCache, layer: AttentionLayerParams, dY: Tensor) -> tuple[Tensor, list, Tensor]:
    """Return ``(dX, per-head grad dicts, dW_o)``."""
    d = layer.head_dim
    dW_o = _sum_outer(cache.H, dY)
    dH = np.matmul(dY, _t(layer.W_o))
    width = cache.heads[0].x.shape[-1] if layer.full_projection else dY.shape[-1]
    dX = np.zeros(dY.shape[:-1] + (width,), dtype=dY.dtype)
    head_grads = []
    inv = 1.0 / math.sqrt(d)
    for j, (head, hc) in enumerate(zip(layer.heads, cache.heads)):
        dh = dH[..., j * d:(j + 1) * d]
        dA = np.matmul(dh, np.swapaxes(hc.V, -1, -2))
        dV = np.matmul(np.swapaxes(hc.A, -1, -2), dh)
        dS = nx.softmax_backward(hc.A, dA) * inv
        dQ = np.matmul(dS, hc.K)
        dK = np.matmul(np.swapaxes(dS, -1, -2), hc.Q)
        g = {}
        if head.shares_qv:
            dQ = dQ + dV
            g["W_q"] = _sum_outer(hc.x, dQ)
            dx = np.matmul(dQ, _t(head.W_q))
        else:
            g["W_q"] = _sum_outer(hc.x, dQ)
            g["W_v"] = _sum_outer(hc.x, dV)
            dx = np.matmul(dQ, _t(head.W_q)) + np.matmul(dV, _t(head.W_v))
        g["W_k"] = _sum_outer(hc.x, dK)
        dx = dx + np.matmul(dK, _t(head.W_k))
        dX[..., _input_slice(layer, j)] += dx
        head_grads.append(g)
    return dX, head_grads, dW_o


# ---------------------------------------------------------------------------
# scalar-loop reference (shares no code with the paths above)
# ---------------------------------------------------------------------------


def _ref_vecmat(v, W):
    rows, cols = len(W), len(W[0])
    return [sum(v[a] * W[a][b] for a in range(rows)) for b in range(cols)]


def _ref_softmax(scores):
    e = [math.exp(s) for s in scores]
    total = sum(e)
    return [x / total for x in e]


def _ref_pool(M, w):
    d = len(w)
    scores = [sum(w[c] * row[c] for c in range(d)) / math.sqrt(d) for row in M]
    weights = _ref_softmax(scores)
    return [sum(weights[i] * M[i][c] for i in range(len(M))) for c in range(d)]


def _ref_interact(g, rows, mode, W_proj):
    d = len(g)
    if mode is InteractionMode.PRODUCT:
        return [[g[c] * row[c] for c in range(d)] for row in rows]
    if mode is InteractionMode.ADD:
        return [[g[c] + row[c] for c in range(d)] for row in rows]
    if W_proj is None:
        raise ConfigError("concat_project interaction needs a [2d, d] projection")
    return [_ref_vecmat(list(g) + list(row), W_proj) for row in rows]


def reference_forward(X, layer: AttentionLayerParams, mode) -> Tensor:
    """Index-loop evaluation of one additive-attention layer for a single ``[N, D]`` sequence."""
    mode = InteractionMode.parse(mode)
    X = np.asarray(X).tolist()
    N, D = len(X), len(X[0])
    h = len(layer.heads)
    d = layer.heads[0].W_r.shape[0]
    if not layer.full_projection and D != h * d:
        raise ConfigError(f"model width {D} not split into {h} heads of {d}")
    out = [[0.0] * (h * d) for _ in range(N)]
    for j, p in enumerate(layer.heads):
        Wq, Wk, Wv, Wr = (np.asarray(m).tolist() for m in (p.W_q, p.W_k, p.W_v, p.W_r))
        wq, wk = np.asarray(p.w_q).tolist(), np.asarray(p.w_k).tolist()
        Wpk = None if p.W_pk is None else np.asarray(p.W_pk).tolist()
        Wpv = None if p.W_pv is None else np.asarray(p.W_pv).tolist()
        xs = [row if layer.full_projection else row[j * d:(j + 1) * d] for row in X]
        Q = [_ref_vecmat(x, Wq) for x in xs]
        K = [_ref_vecmat(x, Wk) for x in xs]
        V = [_ref_vecmat(x, Wv) for x in xs]
        q = _ref_pool(Q, wq)
        P = _ref_interact(q, K, mode, Wpk)
        k = _ref_pool(P, wk)
        U = _ref_interact(k, V, mode, Wpv)
        for i in range(N):
            r = _ref_vecmat(U[i], Wr)
            for c in range(d):
                out[i][j * d + c] = r[c] + Q[i][c]
    return np.array(out, dtype=np.asarray(layer.heads[0].W_q).dtype)


def reference_vanilla_forward(X, layer: AttentionLayerParams) -> Tensor:
    """Triple-loop dot-product attention for a single ``[N, D]`` sequence."""
    X = np.asarray(X).tolist()
    N = len(X)
    h = len(layer.heads)
    d = layer.heads[0].W_q.shape[1]
    H = [[0.0] * (h * d) for _ in range(N)]
    for j, p in enumerate(layer.heads):
        Wq, Wk, Wv = (np.asarray(m).tolist() for m in (p.W_q, p.W_k, p.W_v))
        xs = [row if layer.full_projection else row[j * d:(j + 1) * d] for row in X]
        Q = [_ref_vecmat(x, Wq) for x in xs]
        K = [_ref_vecmat(x, Wk) for x in xs]
        V = [_ref_vecmat(x, Wv) for x in xs]
        for i in range(N):
            a = _ref_softmax([sum(Q[i][c] * K[t][c] for c in range(d)) / math.sqrt(d) for t in range(N)])
            for c in range(d):
                H[i][j * d + c] = sum(a[t] * V[t][c] for t in range(N))
    Wo = np.asarray(layer.W_o).tolist()
    return np.array([_ref_vecmat(row, Wo) for row in H], dtype=np.asarray(layer.W_o).dtype)
