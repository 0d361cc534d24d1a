"""mIoU and flow-based temporal consistency of label maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """counts[i, j] = pixels with ground truth i predicted as j."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).astype(np.int64)
        gt = np.asarray(gt).astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction dims {pred.shape} differ from ground truth {gt.shape}")
        C = self.num_classes
        for name, m in (("prediction", pred), ("ground truth", gt)):
            bad = (m != IGNORE) & ((m < 0) | (m >= C))
            if bad.any():
                raise ValueError(f"{name} label {int(m[bad][0])} outside 0..{C - 1} and not {IGNORE}")
        keep = (pred != IGNORE) & (gt != IGNORE)
        idx = gt[keep] * C + pred[keep]
        self.counts += np.bincount(idx, minlength=C * C).reshape(C, C)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def per_class_iou(self) -> np.ndarray:
        """IoU per class, NaN where the union is empty."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        out = np.full(self.num_classes, np.nan)
        nz = union > 0
        out[nz] = tp[nz] / union[nz]
        return out

    def miou(self) -> float:
        iou = self.per_class_iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise UndefinedMetricError("mIoU undefined: every class has an empty union")
        return float(iou[present].mean())


def accumulate_confusion(pred, gt, C: int, acc: ConfusionMatrix | None = None) -> ConfusionMatrix:
    acc = ConfusionMatrix(C) if acc is None else acc
    return acc.add(pred, gt)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


@dataclass
class WarpResult:
    warped: np.ndarray
    valid: np.ndarray


def warp_labels(prev_pred, flow, occlusion=None) -> WarpResult:
    """Nearest-neighbour backward warp of a label map.

    ``flow[r, c] = (dy, dx)`` points from pixel (r, c) of the current frame to
    its source in the previous one. Out-of-bounds sources, occluded pixels and
    ignored source labels come out as 255 / invalid.
    """
    prev = np.asarray(prev_pred)
    flow = np.asarray(flow, dtype=np.float64)
    H, W = prev.shape
    if flow.shape != (H, W, 2):
        raise ValueError(f"flow dims {flow.shape} do not match label map {prev.shape}")
    rr, cc = np.mgrid[0:H, 0:W]
    sr = np.floor(rr + flow[..., 0] + 0.5).astype(np.int64)
    sc = np.floor(cc + flow[..., 1] + 0.5).astype(np.int64)
    valid = (sr >= 0) & (sr < H) & (sc >= 0) & (sc < W)
    if occlusion is not None:
        occlusion = np.asarray(occlusion).astype(bool)
        if occlusion.shape != (H, W):
            raise ValueError(f"occlusion dims {occlusion.shape} do not match {prev.shape}")
        valid &= ~occlusion
    warped = np.full((H, W), IGNORE, dtype=np.uint8)
    warped[valid] = prev[sr[valid], sc[valid]]
    valid &= warped != IGNORE
    return WarpResult(warped, valid)


def temporal_consistency(pred_t, warped: WarpResult, C: int) -> float:
    """mIoU of the current prediction against the warped previous one."""
    if not warped.valid.any():
        raise UndefinedMetricError("no valid pixels after warping")
    cm = ConfusionMatrix(C).add(pred_t, warped.warped)
    return cm.miou()


@dataclass
class TemporalConsistency:
    mtc: float
    per_frame: list = field(default_factory=list)
    skipped: int = 0


def mean_temporal_consistency(preds, flows, occl, C: int) -> TemporalConsistency:
    """Mean of TC_t over t = 2..N, skipping frames where TC_t is undefined."""
    preds = list(preds)
    flows = list(flows)
    if len(preds) < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    if len(flows) != len(preds) - 1:
        raise ValueError(f"{len(preds)} predictions need {len(preds) - 1} flows, got {len(flows)}")
    occl = [None] * len(flows) if occl is None else list(occl)
    values, skipped = [], 0
    for t in range(1, len(preds)):
        w = warp_labels(preds[t - 1], flows[t - 1], occl[t - 1])
        try:
            values.append(temporal_consistency(preds[t], w, C))
        except UndefinedMetricError:
            skipped += 1
    if not values:
        raise UndefinedMetricError("temporal consistency undefined on every frame")
    return TemporalConsistency(float(np.mean(values)), values, skipped)


def evaluation_report(cm: ConfusionMatrix, tcs: list[TemporalConsistency]) -> dict:
    """JSON-ready summary; mtc averages the per-sequence means."""
    iou = cm.per_class_iou()
    return {
        "miou": cm.miou(),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "mtc": float(np.mean([tc.mtc for tc in tcs])) if tcs else None,
        "per_frame_tc": [v for tc in tcs for v in tc.per_frame],
        "skipped_frames": sum(tc.skipped for tc in tcs),
        "num_eval_pixels": cm.total,
    }
