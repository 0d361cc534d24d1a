"""Spatio-temporal attention: patch embedding, temporal K/V fusion, encoder block."""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import numerics as nx
from .numerics import ShapeError


class CacheError(RuntimeError):
    """Cache used out of order, across sequences, or with mismatched tensors."""


@dataclass(frozen=True)
class PatchGrid:
    H: int
    W: int
    P: int
    h: int
    heads: int

    def __post_init__(self):
        if self.P <= 0 or self.H % self.P or self.W % self.P:
            raise ShapeError(f"patch side {self.P} does not divide image dims {self.H}x{self.W}")
        if self.heads <= 0 or self.h % self.heads:
            raise ShapeError(f"head count {self.heads} does not divide embedding dim {self.h}")

    @property
    def rows(self) -> int:
        return self.H // self.P

    @property
    def cols(self) -> int:
        return self.W // self.P

    @property
    def L(self) -> int:
        return self.rows * self.cols

    @property
    def h_head(self) -> int:
        return self.h // self.heads


@dataclass(frozen=True)
class STAConfig:
    T: int = 3
    lam: float = 0.8
    normalize: bool = False

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"temporal context T must be an integer >= 1, got {self.T}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"decay factor must lie in (0, 1], got {self.lam}")

    def weight(self, age: int) -> float:
        return self.lam ** age

    def weights(self) -> list[float]:
        """Fusion coefficient by frame age 0..T-1."""
        return [self.weight(a) for a in range(self.T)]


@dataclass
class QKV:
    q: Any
    k: Any
    v: Any
    frame_index: int

    def __post_init__(self):
        dims = {nx.value_of(x).shape for x in (self.q, self.k, self.v)}
        if len(dims) != 1:
            raise ShapeError(f"Q/K/V dims differ: {sorted(dims)}")


@dataclass
class CacheEntry:
    t: int
    k: np.ndarray
    v: np.ndarray
    k_node: Any = None
    v_node: Any = None


@dataclass
class TemporalCache:
    """Per-(layer, head) ring buffers of K/V from up to T-1 previous frames.

    With ``keep_graph`` the tape nodes of cached K/V are kept so gradients can
    flow into previous frames; by default cached tensors are constants.
    """

    T: int
    sequence_id: Any = None
    keep_graph: bool = False
    next_t: int = 0
    slots: dict = field(default_factory=dict)
    projections: Counter = field(default_factory=Counter)

    @property
    def capacity(self) -> int:
        return self.T - 1

    def reset(self, sequence_id=None) -> None:
        self.sequence_id = sequence_id
        self.slots.clear()
        self.projections.clear()
        self.next_t = 0

    def check(self, sequence_id=None, t=None) -> None:
        if sequence_id is not None and sequence_id != self.sequence_id:
            raise CacheError(f"cache belongs to sequence {self.sequence_id!r}, not {sequence_id!r}")
        if t is not None and t != self.next_t:
            raise CacheError(f"cache expects frame {self.next_t}, got {t}")

    def slot(self, layer_id, head_id) -> list[CacheEntry]:
        return list(self.slots.get((layer_id, head_id), ()))

    def push(self, layer_id, head_id, k, v, t: int) -> None:
        if self.capacity == 0:
            return
        ring = self.slots.setdefault((layer_id, head_id), deque(maxlen=self.capacity))
        kv, vv = nx.value_of(k), nx.value_of(v)
        if kv.shape != vv.shape:
            raise CacheError(f"K dims {kv.shape} differ from V dims {vv.shape}")
        if ring:
            if t <= ring[-1].t:
                raise CacheError(f"non-monotonic push: frame {t} after {ring[-1].t}")
            if ring[-1].k.shape != kv.shape:
                raise CacheError(f"K/V dims {kv.shape} do not match slot dims {ring[-1].k.shape}")
        keep = self.keep_graph and isinstance(k, nx.Var)
        ring.append(CacheEntry(t, kv, vv, k if keep else None, v if keep else None))


def cache_push(cache: TemporalCache, layer_id, head_id, K_t, V_t, t: int) -> None:
    cache.push(layer_id, head_id, K_t, V_t, t)


# ---------------------------------------------------------------------------
# parameter names


def embed_names(stage: int) -> tuple[str, str, str]:
    return f"stage{stage}.embed.w", f"stage{stage}.embed.b", f"stage{stage}.pos"


def head_name(layer_id: int, head: int, which: str) -> str:
    return f"blk{layer_id}.head{head}.w_{which}"


def block_name(layer_id: int, what: str) -> str:
    return f"blk{layer_id}.{what}"


def count_heads(params, layer_id: int) -> int:
    n = 0
    while head_name(layer_id, n, "q") in params:
        n += 1
    return n


def init_stage_params(store: nx.ParamStore, rng: np.random.Generator, stage: int,
                      grid: PatchGrid, in_channels: int) -> None:
    w, b, pos = embed_names(stage)
    fan = grid.P * grid.P * in_channels
    store.add(w, nx.uniform_init(rng, (fan, grid.h), fan))
    store.add(b, nx.uniform_init(rng, (grid.h,), fan))
    store.add(pos, np.zeros((grid.L, grid.h)))


def init_block_params(store: nx.ParamStore, rng: np.random.Generator, layer_id: int,
                      h: int, heads: int, expansion: int = 4) -> None:
    hh = h // heads
    for j in range(heads):
        for which in "qkv":
            store.add(head_name(layer_id, j, which), nx.uniform_init(rng, (h, hh), h))
    store.add(block_name(layer_id, "w_o"), nx.uniform_init(rng, (h, h), h))
    for ln in ("ln1", "ln2"):
        store.add(block_name(layer_id, f"{ln}.gamma"), np.ones(h))
        store.add(block_name(layer_id, f"{ln}.beta"), np.zeros(h))
    e = expansion * h
    store.add(block_name(layer_id, "ffn.w1"), nx.uniform_init(rng, (h, e), h))
    store.add(block_name(layer_id, "ffn.b1"), nx.uniform_init(rng, (e,), h))
    store.add(block_name(layer_id, "ffn.w2"), nx.uniform_init(rng, (e, h), e))
    store.add(block_name(layer_id, "ffn.b2"), nx.uniform_init(rng, (h,), e))


# ---------------------------------------------------------------------------
# forward pieces


def embed_patches(frame, grid: PatchGrid, W_embed, b, e_pos):
    """Flatten non-overlapping P x P patches and project them to tokens."""
    fv = nx.value_of(frame)
    if fv.ndim != 3 or fv.shape[:2] != (grid.H, grid.W):
        raise ShapeError(f"frame dims {fv.shape} do not match grid {grid.H}x{grid.W}")
    tokens = nx.linear(nx.patchify(frame, grid.P), W_embed, b)
    return nx.add(tokens, e_pos)


def project_qkv(Z, W_Q, W_K, W_V, frame_index: int = 0) -> QKV:
    return QKV(nx.matmul(Z, W_Q), nx.matmul(Z, W_K), nx.matmul(Z, W_V), frame_index)


def fuse_temporal(current: QKV, cache_slot, cfg: STAConfig, t: int):
    """Exponentially decayed sum of K and V over the current and cached frames.

    The query is passed through untouched so the current frame stays the
    anchor of attention.
    """
    entries = list(cache_slot)
    if len(entries) > cfg.T - 1:
        raise CacheError(f"{len(entries)} cached frames exceed T-1 = {cfg.T - 1}")
    for e in entries:
        if e.t >= t or e.t < t - cfg.T + 1:
            raise CacheError(f"cached frame {e.t} outside window [{t - cfg.T + 1}, {t - 1}]")
    k_acc, v_acc = current.k, current.v
    wsum = 1.0
    for e in reversed(entries):
        w = cfg.weight(t - e.t)
        k_prev = e.k_node if e.k_node is not None else e.k
        v_prev = e.v_node if e.v_node is not None else e.v
        k_acc = nx.add(k_acc, nx.scale(k_prev, w))
        v_acc = nx.add(v_acc, nx.scale(v_prev, w))
        wsum += w
    if cfg.normalize and entries:
        k_acc, v_acc = nx.scale(k_acc, 1.0 / wsum), nx.scale(v_acc, 1.0 / wsum)
    return current.q, k_acc, v_acc


def attend_head(Q, K, V):
    d = nx.value_of(Q).shape[1]
    scores = nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(d))
    return nx.matmul(nx.softmax_rows(scores), V)


def msa_forward(Z, cache: TemporalCache | None, layer_id: int, params, cfg: STAConfig, t: int,
                sta: bool = True, sequence_id=None):
    """Multi-head attention for one block; fuses cached K/V when ``sta`` is set."""
    if cache is not None:
        cache.check(sequence_id)
        if sta and cache.T != cfg.T:
            raise CacheError(f"cache built for T={cache.T}, block configured with T={cfg.T}")
    heads = count_heads(params, layer_id)
    if heads == 0:
        raise KeyError(f"no attention heads for block {layer_id}")
    outs = []
    for j in range(heads):
        cur = project_qkv(Z, params[head_name(layer_id, j, "q")],
                          params[head_name(layer_id, j, "k")],
                          params[head_name(layer_id, j, "v")], t)
        if cache is not None:
            cache.projections[(layer_id, j)] += 1
        if sta and cache is not None:
            q, k, v = fuse_temporal(cur, cache.slot(layer_id, j), cfg, t)
        else:
            q, k, v = cur.q, cur.k, cur.v
        outs.append(attend_head(q, k, v))
        if sta and cache is not None:
            cache_push(cache, layer_id, j, cur.k, cur.v, t)
    return nx.matmul(nx.concat_cols(outs), params[block_name(layer_id, "w_o")])


def ffn_forward(Z, layer_id: int, params):
    hidden = nx.gelu(nx.linear(Z, params[block_name(layer_id, "ffn.w1")],
                               params[block_name(layer_id, "ffn.b1")]))
    return nx.linear(hidden, params[block_name(layer_id, "ffn.w2")],
                     params[block_name(layer_id, "ffn.b2")])


def encoder_block_forward(Z, cache, layer_id: int, params, cfg: STAConfig, t: int,
                          sta: bool = True, sequence_id=None):
    attn = msa_forward(Z, cache, layer_id, params, cfg, t, sta=sta, sequence_id=sequence_id)
    Z = nx.layer_norm(nx.add(Z, attn), params[block_name(layer_id, "ln1.gamma")],
                      params[block_name(layer_id, "ln1.beta")])
    Z = nx.layer_norm(nx.add(Z, ffn_forward(Z, layer_id, params)),
                      params[block_name(layer_id, "ln2.gamma")],
                      params[block_name(layer_id, "ln2.beta")])
    return Z
