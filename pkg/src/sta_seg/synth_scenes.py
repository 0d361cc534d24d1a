"""Synthetic moving-shape videos with exact labels, backward flow and occlusion.

All randomness goes through ``numpy.random.default_rng`` (PCG64), so a seed
pins every byte of the generated corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import FormatError, load_tns, save_tns

MANIFEST_VERSION = 1
DEFAULT_NOISE = 0.35
DEFAULT_NOISE_CELL = 8
DEFAULT_NOISE_FRACTION = 0.2

# Base colour per class id; class 0 is background.
PALETTE = np.array([
    [0.50, 0.50, 0.50],
    [0.70, 0.40, 0.40],
    [0.40, 0.65, 0.45],
    [0.45, 0.45, 0.70],
    [0.70, 0.65, 0.35],
    [0.60, 0.40, 0.65],
    [0.35, 0.60, 0.65],
    [0.30, 0.30, 0.30],
])


class SceneError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: str            # "rect" or "disk"
    cls: int
    row: int             # rect: top edge; disk: centre
    col: int
    height: int = 0      # rect only
    width: int = 0       # rect only
    radius: int = 0      # disk only
    velocity: tuple = (0, 0)

    def mask(self, H: int, W: int, t: int) -> np.ndarray:
        dy, dx = self.velocity
        r0, c0 = self.row + t * dy, self.col + t * dx
        rr, cc = np.mgrid[0:H, 0:W]
        if self.kind == "rect":
            return (rr >= r0) & (rr < r0 + self.height) & (cc >= c0) & (cc < c0 + self.width)
        if self.kind == "disk":
            return (rr - r0) ** 2 + (cc - c0) ** 2 <= self.radius ** 2
        raise SceneError(f"unknown shape kind {self.kind!r}")

    def inside(self, H: int, W: int) -> bool:
        if self.kind == "rect":
            return (self.row >= 0 and self.col >= 0 and self.height > 0 and self.width > 0
                    and self.row + self.height <= H and self.col + self.width <= W)
        return (self.radius > 0 and self.row - self.radius >= 0 and self.col - self.radius >= 0
                and self.row + self.radius < H and self.col + self.radius < W)


@dataclass(frozen=True)
class SceneSpec:
    H: int
    W: int
    classes: int
    shapes: tuple
    length: int = 8
    noise: float = DEFAULT_NOISE
    noise_cell: int = DEFAULT_NOISE_CELL
    noise_fraction: float = DEFAULT_NOISE_FRACTION   # share of cells perturbed per frame
    seed: int = 0
    annotated: tuple | None = None   # None = every frame

    def validate(self) -> None:
        if self.classes < 2:
            raise SceneError("need at least 2 classes (class 0 is background)")
        if self.classes > len(PALETTE):
            raise SceneError(f"at most {len(PALETTE)} classes supported")
        if self.length < 1:
            raise SceneError("sequence length must be >= 1")
        if self.noise_cell < 1:
            raise SceneError("noise_cell must be >= 1")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise SceneError("noise_fraction must lie in [0, 1]")
        for s in self.shapes:
            if any(int(v) != v for v in s.velocity):
                raise SceneError(f"velocities must be integers, got {s.velocity}")
            if not 1 <= s.cls < self.classes:
                raise SceneError(f"shape class {s.cls} outside 1..{self.classes - 1}")
            if not s.inside(self.H, self.W):
                raise SceneError(f"shape {s} does not fit in a {self.H}x{self.W} frame at t=0")


@dataclass
class SequenceRecord:
    seq_id: str
    frames: list
    labels: list
    flows: list
    occlusion: list
    annotated: list
    split: str = "train"

    @property
    def length(self) -> int:
        return len(self.frames)


def _object_map(spec: SceneSpec, t: int) -> np.ndarray:
    ids = np.zeros((spec.H, spec.W), dtype=np.int64)
    for i, s in enumerate(spec.shapes):
        ids[s.mask(spec.H, spec.W, t)] = i + 1
    return ids


def _noise(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    n = spec.noise_cell
    gh, gw = -(-spec.H // n), -(-spec.W // n)
    cells = rng.uniform(-spec.noise, spec.noise, size=(gh, gw, 3))
    if spec.noise_fraction < 1.0:
        cells *= (rng.random((gh, gw, 1)) < spec.noise_fraction)
    return np.repeat(np.repeat(cells, n, axis=0), n, axis=1)[:spec.H, :spec.W]


def generate_sequence(spec: SceneSpec, seq_id: str = "seq", split: str = "train") -> SequenceRecord:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.H, spec.W
    cls_of = np.array([0] + [s.cls for s in spec.shapes])
    vel = np.array([(0, 0)] + [tuple(s.velocity) for s in spec.shapes], dtype=np.float64)
    rr, cc = np.mgrid[0:H, 0:W]
    frames, labels, flows, occl = [], [], [], []
    prev_ids = None
    for t in range(spec.length):
        ids = _object_map(spec, t)
        lab = cls_of[ids].astype(np.uint8)
        img = np.clip(PALETTE[lab] + _noise(rng, spec), 0.0, 1.0).astype(np.float32)
        frames.append(img)
        labels.append(lab)
        if prev_ids is not None:
            flow = -vel[ids]
            sr = rr + flow[..., 0].astype(np.int64)
            sc = cc + flow[..., 1].astype(np.int64)
            inb = (sr >= 0) & (sr < H) & (sc >= 0) & (sc < W)
            same = np.zeros((H, W), dtype=bool)
            same[inb] = prev_ids[sr[inb], sc[inb]] == ids[inb]
            flows.append(flow.astype(np.float32))
            occl.append(~same)
        prev_ids = ids
    annotated = list(range(spec.length)) if spec.annotated is None else sorted(spec.annotated)
    return SequenceRecord(seq_id, frames, labels, flows, occl, annotated, split)


def random_scene_spec(rng: np.random.Generator, H: int = 64, W: int = 64, classes: int = 4,
                      length: int = 8, max_shapes: int = 3, max_speed: int = 2,
                      noise: float = DEFAULT_NOISE, noise_cell: int = DEFAULT_NOISE_CELL,
                      noise_fraction: float = DEFAULT_NOISE_FRACTION,
                      drop_annotations: float = 0.0) -> SceneSpec:
    shapes = []
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        cls = int(rng.integers(1, classes))
        vel = (int(rng.integers(-max_speed, max_speed + 1)), int(rng.integers(-max_speed, max_speed + 1)))
        if rng.random() < 0.5:
            h = int(rng.integers(max(2, H // 8), max(3, H // 3) + 1))
            w = int(rng.integers(max(2, W // 8), max(3, W // 3) + 1))
            h, w = min(h, H), min(w, W)
            shapes.append(Shape("rect", cls, int(rng.integers(0, H - h + 1)),
                                int(rng.integers(0, W - w + 1)), height=h, width=w, velocity=vel))
        else:
            r = int(rng.integers(max(1, min(H, W) // 12), max(2, min(H, W) // 6) + 1))
            shapes.append(Shape("disk", cls, int(rng.integers(r, H - r)),
                                int(rng.integers(r, W - r)), radius=r, velocity=vel))
    annotated = None
    if drop_annotations > 0:
        keep = rng.random(length) >= drop_annotations
        annotated = tuple(int(i) for i in np.nonzero(keep)[0])
    return SceneSpec(H, W, classes, tuple(shapes), length, noise, noise_cell, noise_fraction,
                     int(rng.integers(0, 2 ** 31 - 1)), annotated)


def generate_corpus(n_train: int, n_eval: int = 0, H: int = 64, W: int = 64, classes: int = 4,
                    length: int = 8, seed: int = 0, **scene_kw) -> list[SequenceRecord]:
    records = []
    for split, n in (("train", n_train), ("eval", n_eval)):
        for i in range(n):
            rng = np.random.default_rng([seed, 0 if split == "train" else 1, i])
            spec = random_scene_spec(rng, H, W, classes, length, **scene_kw)
            records.append(generate_sequence(spec, f"{split}_{i:04d}", split))
    return records


# ---------------------------------------------------------------------------
# on-disk layout


def build_manifest(records, H: int, W: int, classes: int, seed: int) -> dict:
    return {
        "version": MANIFEST_VERSION, "H": H, "W": W, "classes": classes, "seed": seed,
        "sequences": [{"id": r.seq_id, "split": r.split, "length": r.length,
                       "annotated_indices": list(r.annotated)} for r in records],
    }


def write_dataset(records, manifest: dict, root) -> None:
    root = Path(root)
    (root / "sequences").mkdir(parents=True, exist_ok=True)
    for rec in records:
        d = root / "sequences" / rec.seq_id
        d.mkdir(parents=True, exist_ok=True)
        for t in range(rec.length):
            save_tns(d / f"frame_{t:04d}.tns", rec.frames[t].astype(np.float32))
            save_tns(d / f"label_{t:04d}.tns", rec.labels[t].astype(np.uint8))
        for t in range(1, rec.length):
            save_tns(d / f"flow_{t:04d}.tns", rec.flows[t - 1].astype(np.float32))
            save_tns(d / f"occl_{t:04d}.tns", rec.occlusion[t - 1].astype(np.uint8))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


class Dataset:
    """Manifest plus lazy per-sequence loading."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest

    @property
    def H(self) -> int:
        return self.manifest["H"]

    @property
    def W(self) -> int:
        return self.manifest["W"]

    @property
    def classes(self) -> int:
        return self.manifest["classes"]

    def ids(self, split: str | None = None) -> list[str]:
        return [s["id"] for s in self.manifest["sequences"] if split is None or s["split"] == split]

    def descriptor(self, seq_id: str) -> dict:
        for s in self.manifest["sequences"]:
            if s["id"] == seq_id:
                return s
        raise KeyError(seq_id)

    def sequence(self, seq_id: str) -> SequenceRecord:
        desc = self.descriptor(seq_id)
        d = self.root / "sequences" / seq_id
        n = desc["length"]
        frames = [load_tns(d / f"frame_{t:04d}.tns") for t in range(n)]
        labels = [load_tns(d / f"label_{t:04d}.tns") for t in range(n)]
        flows = [load_tns(d / f"flow_{t:04d}.tns") for t in range(1, n)]
        occl = [load_tns(d / f"occl_{t:04d}.tns").astype(bool) for t in range(1, n)]
        for t, f in enumerate(frames):
            if f.shape != (self.H, self.W, 3) or f.dtype != np.float32:
                raise FormatError(f"{d / f'frame_{t:04d}.tns'}: expected float32 {self.H}x{self.W}x3")
        return SequenceRecord(seq_id, frames, labels, flows, occl,
                              list(desc["annotated_indices"]), desc["split"])

    def sequences(self, split: str | None = None):
        for seq_id in self.ids(split):
            yield self.sequence(seq_id)


def read_dataset(root, validate: bool = True) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    ds = Dataset(root, manifest)
    if validate:
        for desc in manifest["sequences"]:
            d = root / "sequences" / desc["id"]
            n = desc["length"]
            expected = {"frame": n, "label": n, "flow": n - 1, "occl": n - 1}
            for kind, count in expected.items():
                found = len(list(d.glob(f"{kind}_*.tns")))
                if found != count:
                    raise DatasetError(f"{d}: manifest length {n} implies {count} {kind} files, found {found}")
    return ds
