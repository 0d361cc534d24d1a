"""Prediction over datasets, metric reports and the temporal-context ablation."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import ConfusionMatrix, evaluation_report, mean_temporal_consistency
from .numerics import FormatError, load_tns, save_tns
from .segmenter import ModelConfig, Segmenter, forward_sequence
from .synth_scenes import Dataset
from .training import TrainConfig, checkpoint_of, make_optimizer, save_checkpoint, train

log = logging.getLogger(__name__)


def predict_sequence(model: Segmenter, record) -> list[np.ndarray]:
    return [p.labels for p in forward_sequence(model, record.frames, record.seq_id)]


def evaluate_predictions(records, preds_by_id: dict, classes: int) -> dict:
    """mIoU over annotated frames, mTC over every sequence."""
    cm = ConfusionMatrix(classes)
    tcs = []
    for rec in records:
        preds = preds_by_id[rec.seq_id]
        if len(preds) != rec.length:
            raise ValueError(f"{rec.seq_id}: {len(preds)} predictions for {rec.length} frames")
        for t in rec.annotated:
            cm.add(preds[t], rec.labels[t])
        if rec.length >= 2:
            tcs.append(mean_temporal_consistency(preds, rec.flows, rec.occlusion, classes))
    return evaluation_report(cm, tcs)


def evaluate_model(model: Segmenter, records) -> dict:
    records = list(records)
    preds = {r.seq_id: predict_sequence(model, r) for r in records}
    return evaluate_predictions(records, preds, model.config.classes)


def write_predictions(root, seq_id: str, labels) -> None:
    d = Path(root) / seq_id
    d.mkdir(parents=True, exist_ok=True)
    for t, lab in enumerate(labels):
        save_tns(d / f"pred_{t:04d}.tns", np.asarray(lab, dtype=np.uint8))


def read_predictions(root, seq_id: str, length: int) -> list[np.ndarray]:
    d = Path(root) / seq_id
    out = []
    for t in range(length):
        path = d / f"pred_{t:04d}.tns"
        if not path.exists():
            raise FormatError(f"{path}: missing prediction file")
        out.append(load_tns(path))
    return out


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)

    def medians(self) -> dict:
        out = {}
        for T in sorted({r["T"] for r in self.rows}):
            cell = [r for r in self.rows if r["T"] == T]
            out[T] = {"miou": statistics.median(r["miou"] for r in cell),
                      "mtc": statistics.median(r["mtc"] for r in cell)}
        return out

    def to_json(self) -> dict:
        return {"rows": self.rows,
                "medians": [{"T": T, **m} for T, m in self.medians().items()]}

    def to_csv(self) -> str:
        lines = ["T,seed,miou,mtc,train_seconds"]
        lines += [f"{r['T']},{r['seed']},{r['miou']:.6f},{r['mtc']:.6f},{r['train_seconds']:.1f}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"


def ablation_cell(base: ModelConfig, T: int, seed: int, train_records, eval_records,
                  epochs: int, lr: float, out_dir=None) -> dict:
    """Train from scratch with context length T and evaluate."""
    model = Segmenter.create(base.with_T(T), seed)
    cfg = TrainConfig(epochs=epochs, lr=lr, seed=seed)
    opt = make_optimizer(cfg)
    start = time.perf_counter()
    train(model, train_records, cfg, optimizer=opt)
    seconds = time.perf_counter() - start
    report = evaluate_model(model, eval_records)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / f"T{T}_seed{seed}",
                        checkpoint_of(model, opt, epochs, cfg))
    row = {"T": T, "seed": seed, "miou": report["miou"], "mtc": report["mtc"],
           "train_seconds": seconds}
    log.info("ablation T=%d seed=%d miou=%.4f mtc=%.4f (%.0fs)", T, seed, row["miou"],
             row["mtc"], seconds)
    return row


def run_ablation(base: ModelConfig, dataset: Dataset, t_values, seeds, epochs: int, lr: float,
                 out_dir=None, jobs: int = 1) -> AblationReport:
    t_values, seeds = list(t_values), list(seeds)
    if not t_values or not seeds:
        raise ValueError("ablation needs at least one T value and one seed")
    train_records = list(dataset.sequences("train"))
    eval_records = list(dataset.sequences("eval"))
    if not train_records or not eval_records:
        raise ValueError("ablation needs both train and eval sequences")
    cells = [(T, s) for T in t_values for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(ablation_cell, base, T, s, train_records, eval_records,
                                   epochs, lr, out_dir) for T, s in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [ablation_cell(base, T, s, train_records, eval_records, epochs, lr, out_dir)
                for T, s in cells]
    return AblationReport(rows)
