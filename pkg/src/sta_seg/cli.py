"""Command-line entry points: generate, train, predict, eval, ablate, flops."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import (
    evaluate_predictions,
    predict_sequence,
    read_predictions,
    run_ablation,
    write_predictions,
)
from .metrics import UndefinedMetricError
from .numerics import FormatError, ShapeError
from .segmenter import ModelConfig, Segmenter, count_flops
from .synth_scenes import (
    DEFAULT_NOISE,
    DEFAULT_NOISE_CELL,
    DEFAULT_NOISE_FRACTION,
    DatasetError,
    SceneError,
    build_manifest,
    generate_corpus,
    read_dataset,
    write_dataset,
)
from .training import (
    CheckpointError,
    NumericalError,
    TrainConfig,
    checkpoint_of,
    load_checkpoint,
    make_optimizer,
    resume_optimizer,
    save_checkpoint,
    train,
)

log = logging.getLogger("sta_seg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

RUN_DEFAULTS = {
    "data_dir": None, "out_dir": None, "T": 3, "lambda": 0.8, "patch": 4, "dim": 32,
    "heads": 4, "blocks": 2, "decoder_dim": 64, "classes": None, "epochs": 10, "lr": 1e-3,
    "seed": 0, "t_values": [1, 2, 3], "seeds": [0, 1, 2],
}


class UsageError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def load_run_config(path, overrides: dict) -> dict:
    """File values, then CLI overrides; unknown keys are rejected."""
    cfg = dict(RUN_DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(data) - set(RUN_DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def model_config(run: dict, H: int, W: int, classes: int) -> ModelConfig:
    if run["classes"] is not None and run["classes"] != classes:
        raise UsageError(f"config says {run['classes']} classes, dataset has {classes}")
    return ModelConfig.single_stage(H=H, W=W, classes=classes, patch=run["patch"], dim=run["dim"],
                                    heads=run["heads"], blocks=run["blocks"],
                                    decoder_dim=run["decoder_dim"], T=run["T"], lam=run["lambda"])


def _echo(kind: str, cfg: dict) -> None:
    print(json.dumps({"command": kind, "effective_config": cfg}, sort_keys=True), file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"missing required setting {k!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    try:
        H, W = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size must look like 64x64, got {args.size!r}") from exc
    cfg = {"out": args.out, "seqs": args.seqs, "eval_seqs": args.eval_seqs, "length": args.length,
           "size": f"{H}x{W}", "classes": args.classes, "seed": args.seed, "noise": args.noise,
           "noise_cell": args.noise_cell, "noise_fraction": args.noise_fraction,
           "max_shapes": args.max_shapes,
           "max_speed": args.max_speed, "drop_annotations": args.drop_annotations}
    _echo("generate", cfg)
    if args.length < 1 or args.seqs < 0 or args.eval_seqs < 0 or min(H, W) < 8:
        raise UsageError("need length >= 1, non-negative sequence counts and frames at least 8x8")
    try:
        records = generate_corpus(args.seqs, args.eval_seqs, H, W, args.classes, args.length,
                                  args.seed, max_shapes=args.max_shapes, max_speed=args.max_speed,
                                  noise=args.noise, noise_cell=args.noise_cell,
                                  noise_fraction=args.noise_fraction,
                                  drop_annotations=args.drop_annotations)
    except SceneError as exc:
        raise UsageError(str(exc)) from exc
    manifest = build_manifest(records, H, W, args.classes, args.seed)
    write_dataset(records, manifest, args.out)
    _emit(manifest)
    return EXIT_OK


def _run_overrides(args) -> dict:
    keys = ["data_dir", "out_dir", "T", "lambda", "patch", "dim", "heads", "blocks",
            "decoder_dim", "classes", "epochs", "lr", "seed", "t_values", "seeds"]
    return {k: getattr(args, k, None) for k in keys}


def cmd_train(args) -> int:
    run = load_run_config(args.config, _run_overrides(args))
    _echo("train", run)
    _require(run, "data_dir", "out_dir")
    ds = read_dataset(run["data_dir"])
    try:
        mcfg = model_config(run, ds.H, ds.W, ds.classes)
    except ShapeError as exc:
        raise UsageError(str(exc)) from exc
    records = list(ds.sequences("train"))
    if not records:
        raise DatasetError(f"{run['data_dir']}: no train sequences")
    tcfg = TrainConfig(epochs=run["epochs"], lr=run["lr"], seed=run["seed"],
                       pseudo_label=args.pseudo_from is not None)
    out = Path(run["out_dir"])
    start_epoch, optimizer = 0, None
    if args.resume and (out / "config.json").exists():
        try:
            ckpt = load_checkpoint(out, expect=mcfg)
        except CheckpointError as exc:
            raise UsageError(str(exc)) from exc
        model = ckpt.model()
        optimizer = resume_optimizer(ckpt, tcfg)
        start_epoch = ckpt.epoch
    else:
        model = Segmenter.create(mcfg, run["seed"])
        optimizer = make_optimizer(tcfg)
    pseudo = None
    if args.pseudo_from is not None:
        pseudo = load_checkpoint(args.pseudo_from).model()
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "a") as logf:
        def log_fn(rec):
            logf.write(json.dumps(rec) + "\n")

        def ckpt_fn(epoch, opt):
            save_checkpoint(out, checkpoint_of(model, opt, epoch, tcfg))

        losses = train(model, records, tcfg, optimizer=optimizer, start_epoch=start_epoch,
                       pseudo_model=pseudo, log_fn=log_fn, checkpoint_fn=ckpt_fn)
    if start_epoch >= tcfg.epochs:
        save_checkpoint(out, checkpoint_of(model, optimizer, start_epoch, tcfg))
    _emit({"checkpoint": str(out), "steps": optimizer.steps,
           "final_loss": losses[-1] if losses else None})
    return EXIT_OK


def _load_model_for(ckpt_dir, ds):
    try:
        ckpt = load_checkpoint(ckpt_dir)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    cfg = ckpt.config
    if (cfg.H, cfg.W, cfg.classes) != (ds.H, ds.W, ds.classes):
        raise UsageError(f"checkpoint expects {cfg.H}x{cfg.W} with {cfg.classes} classes, "
                         f"dataset is {ds.H}x{ds.W} with {ds.classes}")
    return ckpt.model()


def _split_records(ds, split: str):
    records = list(ds.sequences(None if split == "all" else split))
    if not records:
        raise DatasetError(f"{ds.root}: no sequences in split {split!r}")
    return records


def cmd_predict(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "data_dir": args.data_dir, "out_dir": args.out_dir,
           "split": args.split}
    _echo("predict", cfg)
    ds = read_dataset(args.data_dir)
    model = _load_model_for(args.checkpoint, ds)
    written = []
    for rec in _split_records(ds, args.split):
        write_predictions(args.out_dir, rec.seq_id, predict_sequence(model, rec))
        written.append(rec.seq_id)
    _emit({"predictions": str(args.out_dir), "sequences": written})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = {"data_dir": args.data_dir, "pred": args.pred, "checkpoint": args.checkpoint,
           "oracle": args.oracle, "split": args.split, "out": args.out}
    _echo("eval", cfg)
    if sum([args.pred is not None, args.checkpoint is not None, args.oracle]) != 1:
        raise UsageError("give exactly one of --pred, --checkpoint, --oracle")
    ds = read_dataset(args.data_dir)
    records = _split_records(ds, args.split)
    if args.oracle:
        preds = {r.seq_id: r.labels for r in records}
    elif args.pred is not None:
        preds = {r.seq_id: read_predictions(args.pred, r.seq_id, r.length) for r in records}
    else:
        model = _load_model_for(args.checkpoint, ds)
        preds = {r.seq_id: predict_sequence(model, r) for r in records}
    report = evaluate_predictions(records, preds, ds.classes)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _emit(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = load_run_config(args.config, _run_overrides(args))
    _echo("ablate", run)
    _require(run, "data_dir")
    ds = read_dataset(run["data_dir"])
    try:
        base = model_config(run, ds.H, ds.W, ds.classes)
    except ShapeError as exc:
        raise UsageError(str(exc)) from exc
    report = run_ablation(base, ds, run["t_values"], run["seeds"], run["epochs"], run["lr"],
                          out_dir=run["out_dir"], jobs=args.jobs)
    out = report.to_json()
    if run["out_dir"] is not None:
        d = Path(run["out_dir"])
        d.mkdir(parents=True, exist_ok=True)
        (d / "ablation.json").write_text(json.dumps(out, indent=2) + "\n")
        (d / "ablation.csv").write_text(report.to_csv())
    print(report.to_csv(), file=sys.stderr, end="")
    _emit(out)
    return EXIT_OK


def flops_summary(mcfg: ModelConfig, T: int) -> dict:
    rep, base = count_flops(mcfg, T), count_flops(mcfg, 1)
    over = (rep.total_flops - base.total_flops) / base.total_flops
    return {"T": T, "report": rep.to_json(), "baseline": base.to_json(),
            "overhead_pct": 100.0 * over}


def cmd_flops(args) -> int:
    run = load_run_config(args.config, _run_overrides(args))
    _echo("flops", {**run, "size": args.size})
    if run["data_dir"] is not None:
        ds = read_dataset(run["data_dir"], validate=False)
        H, W, classes = ds.H, ds.W, ds.classes
    else:
        H, W = (int(v) for v in args.size.lower().split("x"))
        classes = run["classes"] if run["classes"] is not None else 4
    try:
        mcfg = model_config({**run, "classes": None}, H, W, classes)
    except ShapeError as exc:
        raise UsageError(str(exc)) from exc
    _emit(flops_summary(mcfg, run["T"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--data-dir", "--data", dest="data_dir")
    p.add_argument("--out-dir", "--out", dest="out_dir")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--lambda", type=float, dest="lambda")
    p.add_argument("--patch", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--decoder-dim", type=int, dest="decoder_dim")
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--t-values", type=_int_list, dest="t_values")
    p.add_argument("--seeds", type=_int_list)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sta-seg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic video corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seqs", type=int, default=200, help="train sequences")
    g.add_argument("--eval-seqs", type=int, default=0)
    g.add_argument("--length", type=int, default=8)
    g.add_argument("--size", default="64x64")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    g.add_argument("--noise-cell", type=int, default=DEFAULT_NOISE_CELL)
    g.add_argument("--noise-fraction", type=float, default=DEFAULT_NOISE_FRACTION,
                   help="share of noise cells perturbed in each frame")
    g.add_argument("--max-shapes", type=int, default=3)
    g.add_argument("--max-speed", type=int, default=2)
    g.add_argument("--drop-annotations", type=float, default=0.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a segmenter checkpoint")
    _add_run_flags(t)
    t.add_argument("--pseudo-from", help="single-frame checkpoint that labels unannotated frames")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-frame label maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", "--data", dest="data_dir", required=True)
    p.add_argument("--out-dir", "--out", dest="out_dir", required=True)
    p.add_argument("--split", default="eval", choices=["train", "eval", "all"])
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="mIoU / mTC report")
    e.add_argument("--data-dir", "--data", dest="data_dir", required=True)
    e.add_argument("--pred")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the ground-truth labels")
    e.add_argument("--split", default="eval", choices=["train", "eval", "all"])
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate per temporal context length")
    _add_run_flags(a)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("flops", help="analytic FLOP count and STA overhead")
    _add_run_flags(f)
    f.add_argument("--size", default="64x64")
    f.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ShapeError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DatasetError, CheckpointError, KeyError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
