"""Full per-frame / per-sequence segmentation model and its analytic FLOP counter."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, ParamView, ShapeError
from .sta_core import (
    PatchGrid,
    STAConfig,
    TemporalCache,
    embed_names,
    encoder_block_forward,
    embed_patches,
    init_block_params,
    init_stage_params,
)

CONFIG_VERSION = 1
FFN_EXPANSION = 4


@dataclass(frozen=True)
class StageConfig:
    patch: int = 4
    dim: int = 32
    blocks: int = 2
    heads: int = 4
    sta: bool = True


@dataclass(frozen=True)
class ModelConfig:
    H: int = 64
    W: int = 64
    classes: int = 4
    stages: tuple = (StageConfig(),)
    T: int = 3
    lam: float = 0.8
    decoder_dim: int = 64
    normalize_fusion: bool = False

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if not self.stages:
            raise ValueError("model needs at least one stage")
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages))
        self.grids()
        STAConfig(self.T, self.lam)

    @property
    def sta(self) -> STAConfig:
        return STAConfig(self.T, self.lam, self.normalize_fusion)

    def grids(self) -> list[PatchGrid]:
        grids = []
        H, W = self.H, self.W
        for s in self.stages:
            g = PatchGrid(H, W, s.patch, s.dim, s.heads)
            grids.append(g)
            H, W = g.rows, g.cols
        return grids

    def block_layout(self) -> list[tuple[int, int, bool]]:
        """(stage, global layer id, sta enabled) for every encoder block."""
        out, layer = [], 0
        for si, s in enumerate(self.stages):
            for _ in range(s.blocks):
                out.append((si, layer, s.sta))
                layer += 1
        return out

    def with_T(self, T: int) -> "ModelConfig":
        return ModelConfig(**{**self._fields(), "T": T})

    def _fields(self) -> dict:
        return {"H": self.H, "W": self.W, "classes": self.classes, "stages": self.stages,
                "T": self.T, "lam": self.lam, "decoder_dim": self.decoder_dim,
                "normalize_fusion": self.normalize_fusion}

    def to_json(self) -> dict:
        return {"version": CONFIG_VERSION, "H": self.H, "W": self.W, "classes": self.classes,
                "T": self.T, "lambda": self.lam, "decoder_dim": self.decoder_dim,
                "normalize_fusion": self.normalize_fusion,
                "stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        if d.get("version") != CONFIG_VERSION:
            raise ValueError(f"unsupported model config version {d.get('version')!r}")
        return cls(H=d["H"], W=d["W"], classes=d["classes"], T=d["T"], lam=d["lambda"],
                   decoder_dim=d["decoder_dim"], normalize_fusion=d.get("normalize_fusion", False),
                   stages=tuple(StageConfig(**s) for s in d["stages"]))

    @classmethod
    def single_stage(cls, H=64, W=64, classes=4, patch=4, dim=32, heads=4, blocks=2,
                     decoder_dim=64, T=3, lam=0.8) -> "ModelConfig":
        return cls(H=H, W=W, classes=classes, T=T, lam=lam, decoder_dim=decoder_dim,
                   stages=(StageConfig(patch, dim, blocks, heads, True),))


@dataclass
class Segmenter:
    config: ModelConfig
    params: ParamStore

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Segmenter":
        """Deterministic init: uniform in +-1/sqrt(fan_in) from numpy's PCG64."""
        rng = np.random.default_rng(seed)
        store = ParamStore()
        grids = config.grids()
        in_ch = 3
        for si, s in enumerate(config.stages):
            init_stage_params(store, rng, si, grids[si], in_ch)
            in_ch = s.dim
        for si, layer, _ in config.block_layout():
            init_block_params(store, rng, layer, config.stages[si].dim,
                              config.stages[si].heads, FFN_EXPANSION)
        h, d, C = config.stages[-1].dim, config.decoder_dim, config.classes
        store.add("dec.w1", nx.uniform_init(rng, (h, d), h))
        store.add("dec.b1", nx.uniform_init(rng, (d,), h))
        store.add("dec.w2", nx.uniform_init(rng, (d, C), d))
        store.add("dec.b2", nx.uniform_init(rng, (C,), d))
        return cls(config, store)

    def new_cache(self, sequence_id=None, keep_graph: bool = False) -> TemporalCache:
        return TemporalCache(self.config.T, sequence_id, keep_graph)


@dataclass
class Prediction:
    probs: np.ndarray
    labels: np.ndarray
    frame_index: int


def probs_to_prediction(logits: np.ndarray, t: int) -> Prediction:
    probs = nx.softmax_last(logits)
    return Prediction(probs, np.argmax(probs, axis=-1).astype(np.uint8), t)


def decode_features(tokens, model: Segmenter, params=None):
    """Per-token MLP to class logits, reshaped to the token grid and upsampled."""
    cfg = model.config
    params = ParamView(model.params) if params is None else params
    grid = cfg.grids()[-1]
    if nx.value_of(tokens).shape != (grid.L, grid.h):
        raise ShapeError(f"decoder expects tokens {(grid.L, grid.h)}, got {nx.value_of(tokens).shape}")
    hidden = nx.gelu(nx.linear(tokens, params["dec.w1"], params["dec.b1"]))
    logits = nx.linear(hidden, params["dec.w2"], params["dec.b2"])
    logits = nx.reshape(logits, (grid.rows, grid.cols, cfg.classes))
    return nx.upsample_bilinear(logits, cfg.H, cfg.W)


def encode_frame(model: Segmenter, frame, cache: TemporalCache | None, t: int, params):
    cfg = model.config
    x = frame
    blocks = cfg.block_layout()
    for si, grid in enumerate(cfg.grids()):
        if si > 0:
            x = nx.reshape(x, (grid.H, grid.W, cfg.stages[si - 1].dim))
        w, b, pos = embed_names(si)
        x = embed_patches(x, grid, params[w], params[b], params[pos])
        for s_idx, layer, sta in blocks:
            if s_idx == si:
                x = encoder_block_forward(x, cache, layer, params, cfg.sta, t, sta=sta)
    return x


def frame_logits(model: Segmenter, frame, cache: TemporalCache, params=None,
                 sequence_id=None, t=None):
    """Logits for the next frame of ``cache``'s sequence; advances the cache."""
    cfg = model.config
    fv = np.asarray(nx.value_of(frame))
    if fv.shape != (cfg.H, cfg.W, 3):
        raise ShapeError(f"frame dims {fv.shape} do not match model input {(cfg.H, cfg.W, 3)}")
    if cache.T != cfg.T:
        raise ValueError(f"cache built for T={cache.T}, model has T={cfg.T}")
    cache.check(sequence_id, t)
    params = ParamView(model.params) if params is None else params
    if not isinstance(frame, nx.Var):
        frame = fv.astype(np.float64)
    t_now = cache.next_t
    tokens = encode_frame(model, frame, cache, t_now, params)
    cache.next_t += 1
    return decode_features(tokens, model, params)


def forward_frame(model: Segmenter, frame, cache: TemporalCache, sequence_id=None,
                  t=None) -> Prediction:
    t_now = cache.next_t
    logits = frame_logits(model, frame, cache, sequence_id=sequence_id, t=t)
    return probs_to_prediction(nx.value_of(logits), t_now)


def forward_sequence(model: Segmenter, frames, sequence_id=None) -> list[Prediction]:
    frames = list(frames)
    if not frames:
        raise ValueError("forward_sequence needs at least one frame")
    dims = {np.shape(f) for f in frames}
    if len(dims) != 1:
        raise ShapeError(f"frames have differing dims {sorted(dims)}")
    cache = model.new_cache(sequence_id)
    return [forward_frame(model, f, cache) for f in frames]


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopReport:
    """Multiply-add counts per component for one steady-state frame."""

    T: int
    macs: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def to_json(self) -> dict[str, Any]:
        return {"T": self.T, "macs": dict(self.macs), "total_macs": self.total_macs,
                "total_flops": self.total_flops}


FLOP_COMPONENTS = ("embedding", "qkv", "attn_scores", "attn_values", "fusion",
                   "out_proj", "ffn", "decoder")


def count_flops(model, T: int | None = None) -> FlopReport:
    """Analytic multiply-add count with a full cache.

    Matrix products cost m*k*n; fusing one cached frame into K or V costs
    L*h_head (scale and accumulate); bilinear upsampling costs 4 per output
    value. Softmax, layer norm, activations and bias adds are not counted.
    """
    cfg = model.config if isinstance(model, Segmenter) else model
    T = cfg.T if T is None else T
    counts = dict.fromkeys(FLOP_COMPONENTS, 0)
    grids = cfg.grids()
    in_ch = 3
    for si, (s, g) in enumerate(zip(cfg.stages, grids)):
        L, h, hh = g.L, g.h, g.h_head
        counts["embedding"] += L * g.P * g.P * in_ch * h
        in_ch = h
        for _ in range(s.blocks):
            counts["qkv"] += 3 * s.heads * L * h * hh
            counts["attn_scores"] += s.heads * L * L * hh
            counts["attn_values"] += s.heads * L * L * hh
            if s.sta:
                counts["fusion"] += s.heads * 2 * (T - 1) * L * hh
            counts["out_proj"] += L * h * h
            counts["ffn"] += 2 * L * h * FFN_EXPANSION * h
    last = grids[-1]
    d, C = cfg.decoder_dim, cfg.classes
    counts["decoder"] = last.L * last.h * d + last.L * d * C + 4 * cfg.H * cfg.W * C
    return FlopReport(T, counts)


def overhead(model, T: int) -> float:
    base = count_flops(model, 1).total_flops
    return (count_flops(model, T).total_flops - base) / base
