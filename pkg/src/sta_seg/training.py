"""Sequence-level training, pseudo labels and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, ParamView, Tape, load_tns, save_tns
from .segmenter import ModelConfig, Segmenter, forward_sequence, frame_logits

log = logging.getLogger(__name__)

IGNORE = 255
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    ignore_label: int = IGNORE
    pseudo_label: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cache_grad: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.steps = 0

    def step(self, store: ParamStore) -> None:
        self.steps += 1
        for name in store.names():
            if store.trainable(name):
                store.set_value(name, store.value(name) - self.lr * store.grad(name))

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict, steps: int) -> None:
        self.steps = steps


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, store: ParamStore) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for name in store.names():
            if not store.trainable(name):
                continue
            g = store.grad(name)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            store.set_value(name, store.value(name) - update)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.v"] = self.v[name]
        return out

    def load_state(self, arrays: dict, steps: int) -> None:
        self.steps = steps
        self.m = {k[:-2]: v.copy() for k, v in arrays.items() if k.endswith(".m")}
        self.v = {k[:-2]: v.copy() for k, v in arrays.items() if k.endswith(".v")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def cross_entropy_loss(logits, labels, ignore_label: int = IGNORE):
    """Pixel-mean cross-entropy from logits (class axis last)."""
    return nx.cross_entropy(logits, labels, ignore_label)


def sequence_loss(model: Segmenter, frames, labels, tape: Tape, cache_grad: bool = False,
                  ignore_label: int = IGNORE):
    """Summed per-frame losses over frames whose label map is not None."""
    params = ParamView(model.params, tape)
    cache = model.new_cache(keep_graph=cache_grad)
    loss = None
    for frame, lab in zip(frames, labels):
        logits = frame_logits(model, np.asarray(frame, dtype=np.float64), cache, params)
        if lab is None or not np.any(np.asarray(lab) != ignore_label):
            continue
        term = cross_entropy_loss(logits, lab, ignore_label)
        loss = term if loss is None else nx.add(loss, term)
    return loss


def train_step(model: Segmenter, frames, labels, cfg: TrainConfig, optimizer) -> float | None:
    """One update on one sequence; None when no frame carries labels."""
    tape = Tape()
    loss = sequence_loss(model, frames, labels, tape, cfg.cache_grad, cfg.ignore_label)
    if loss is None:
        return None
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    model.params.zero_grads()
    nx.backward(tape, loss, model.params)
    optimizer.step(model.params)
    return value


def generate_pseudo_labels(model_single_frame: Segmenter, frames, annotated_indices,
                           gt_labels=None) -> list:
    """Ground truth on annotated frames, single-frame argmax elsewhere."""
    if model_single_frame.config.T != 1:
        raise ValueError("pseudo labels come from a single-frame (T=1) model")
    annotated = set(annotated_indices)
    out = []
    for t, frame in enumerate(frames):
        if t in annotated and gt_labels is not None:
            out.append(gt_labels[t])
        else:
            pred = forward_sequence(model_single_frame, [frame])[0]
            out.append(pred.labels)
    return out


def training_labels(record, pseudo_model: Segmenter | None = None) -> list:
    if pseudo_model is not None:
        return generate_pseudo_labels(pseudo_model, record.frames, record.annotated, record.labels)
    annotated = set(record.annotated)
    return [record.labels[t] if t in annotated else None for t in range(record.length)]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    optimizer_state: dict = field(default_factory=dict)
    optimizer_steps: int = 0
    epoch: int = 0
    seed: int = 0
    train_config: dict = field(default_factory=dict)

    def model(self) -> Segmenter:
        return Segmenter(self.config, self.params)


def train(model: Segmenter, records: list, cfg: TrainConfig, *, optimizer=None,
          start_epoch: int = 0, pseudo_model: Segmenter | None = None,
          log_fn: Callable[[dict], None] | None = None,
          checkpoint_fn: Callable[[int, object], None] | None = None) -> list[float]:
    """Train for epochs ``start_epoch .. cfg.epochs - 1``; returns per-step losses."""
    optimizer = make_optimizer(cfg) if optimizer is None else optimizer
    labels = [training_labels(r, pseudo_model if cfg.pseudo_label else None) for r in records]
    losses = []
    for epoch in range(start_epoch, cfg.epochs):
        for i in epoch_order(len(records), cfg.seed, epoch):
            loss = train_step(model, records[i].frames, labels[i], cfg, optimizer)
            if loss is None:
                continue
            losses.append(loss)
            if log_fn is not None:
                log_fn({"step": optimizer.steps, "epoch": epoch, "loss": loss})
        log.info("epoch %d mean loss %.4f", epoch, float(np.mean(losses[-len(records):])))
        if checkpoint_fn is not None:
            checkpoint_fn(epoch + 1, optimizer)
    return losses


# ---------------------------------------------------------------------------
# checkpoints


def _tns_name(name: str) -> str:
    return f"{name}.tns"


def save_checkpoint(root, ckpt: Checkpoint) -> None:
    root = Path(root)
    (root / "params").mkdir(parents=True, exist_ok=True)
    (root / "optimizer").mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(ckpt.config.to_json(), indent=2) + "\n")
    for name in ckpt.params.names():
        save_tns(root / "params" / _tns_name(name), ckpt.params.value(name))
    for name, arr in ckpt.optimizer_state.items():
        save_tns(root / "optimizer" / _tns_name(name), arr)
    state = {"version": CHECKPOINT_VERSION, "epoch": ckpt.epoch, "seed": ckpt.seed,
             "optimizer_steps": ckpt.optimizer_steps, "param_names": ckpt.params.names(),
             "optimizer_names": list(ckpt.optimizer_state), "train_config": ckpt.train_config}
    (root / "train_state.json").write_text(json.dumps(state, indent=2) + "\n")


def load_checkpoint(root, expect: ModelConfig | None = None) -> Checkpoint:
    root = Path(root)
    try:
        config = ModelConfig.from_json(json.loads((root / "config.json").read_text()))
        state = json.loads((root / "train_state.json").read_text())
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{root}: unreadable checkpoint metadata ({exc})") from exc
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{root}: unsupported checkpoint version {state.get('version')!r}")
    if expect is not None and expect != config:
        raise CheckpointError(f"{root}: checkpoint config does not match the requested model")
    reference = Segmenter.create(config, 0).params
    if sorted(state["param_names"]) != sorted(reference.names()):
        raise CheckpointError(f"{root}: parameter names do not match the model config")
    params = ParamStore()
    for name in state["param_names"]:
        path = root / "params" / _tns_name(name)
        if not path.exists():
            raise CheckpointError(f"{path}: missing parameter file for {name!r}")
        arr = load_tns(path)
        if arr.shape != reference.value(name).shape:
            raise CheckpointError(f"{path}: dims {arr.shape} do not match {reference.value(name).shape}")
        params.add(name, arr)
    opt = {}
    for name in state["optimizer_names"]:
        path = root / "optimizer" / _tns_name(name)
        if not path.exists():
            raise CheckpointError(f"{path}: missing optimizer state")
        opt[name] = load_tns(path)
    return Checkpoint(config, params, opt, state["optimizer_steps"], state["epoch"],
                      state["seed"], state.get("train_config", {}))


def checkpoint_of(model: Segmenter, optimizer, epoch: int, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(model.config, model.params, optimizer.state(), optimizer.steps, epoch,
                      cfg.seed, asdict(cfg))


def resume_optimizer(ckpt: Checkpoint, cfg: TrainConfig):
    opt = make_optimizer(cfg)
    opt.load_state(ckpt.optimizer_state, ckpt.optimizer_steps)
    return opt
