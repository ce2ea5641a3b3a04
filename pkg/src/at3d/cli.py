"""Command-line entry point: ``at3d {audit,synth,train,eval,report}``.

Exit codes: 0 success; 1 error or unexpected audit difference; 2 audit
differences that are all documented; 3 missing manifest or run
directory; 4 numeric failure during training or evaluation.
"""

from __future__ import annotations

import argparse
import sys
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from . import data as D
from . import report as R
from .container import atomic_write
from .errors import At3dError, ConfigError, NumericError
from .models import (
    ModelConfig,
    Variant,
    build_model,
    checkpoint_load,
    checkpoint_meta,
    checkpoint_save,
    millions_2dp,
    param_audit,
)
from .train import (
    PipelineConfig,
    TrainConfig,
    evaluate,
    header_lines,
    train_loop,
    write_epoch_log,
)

EXIT_OK, EXIT_ERROR, EXIT_KNOWN, EXIT_NO_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# Every tunable default, by name.  Types follow the default value.
DEFAULTS: dict[str, object] = {
    # model
    "backbone": "r3d",
    "variant": "backbone",
    "width_scale": "1",
    "frames": 16,
    "side": 224,
    "heads": 4,
    "se_reduction": 2,
    "cbam_reduction": 16,
    "mha_layer_norm": False,
    "mha_positional": False,
    "dropout": 0.4,
    # optimisation
    "lr0": 0.001,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "step_size": 15,
    "gamma": 0.1,
    "batch_size": 8,
    "max_epochs": 30,
    "patience": 5,
    "min_delta": 0.0,
    "holdout": 0.2,
    # pipeline; resize 0 means round(side * 256 / 224)
    "max_frames": 48,
    "min_frames": 32,
    "resize": 0,
    "brightness": 0.2,
    "contrast": 0.2,
    "saturation": 0.2,
    "flip_p": 0.5,
    "eval_clips": 3,
    "shuffle_frames": False,
    # everything random derives from this
    "seed": 0,
}


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if key == "width_scale":
            return str(Fraction(raw))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, origin: str = "config") -> dict[str, object]:
    """``key=value`` lines; ``#`` comments and blank lines ignored."""
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


class RunConfig:
    """Effective settings: defaults < dataset hints < config file < flags."""

    def __init__(self, *layers: Mapping[str, object]):
        self.values = dict(DEFAULTS)
        for layer in layers:
            for k, v in layer.items():
                if k not in DEFAULTS:
                    raise ConfigError(f"unknown key {k!r}")
                self.values[k] = _coerce(k, v)

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self, classes: int) -> ModelConfig:
        v = self.values
        return ModelConfig(
            backbone=v["backbone"], variant=v["variant"], classes=classes,
            width_scale=Fraction(str(v["width_scale"])), frames=v["frames"], side=v["side"],
            heads=v["heads"], se_reduction=v["se_reduction"], cbam_reduction=v["cbam_reduction"],
            mha_layer_norm=v["mha_layer_norm"], mha_positional=v["mha_positional"],
            dropout=v["dropout"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr0=v["lr0"], momentum=v["momentum"], weight_decay=v["weight_decay"],
            step_size=v["step_size"], gamma=v["gamma"], batch_size=v["batch_size"],
            max_epochs=v["max_epochs"], patience=v["patience"], min_delta=v["min_delta"],
        )

    def pipeline_config(self) -> PipelineConfig:
        v = self.values
        side = v["side"]
        resize = v["resize"] or int(Fraction(side * 256, 224) + Fraction(1, 2))
        return PipelineConfig(
            max_frames=v["max_frames"], min_frames=max(v["min_frames"], v["frames"]),
            clip_len=v["frames"], resize=resize, crop=side,
            brightness=v["brightness"], contrast=v["contrast"], saturation=v["saturation"],
            flip_p=v["flip_p"], eval_clips=v["eval_clips"], shuffle_frames=v["shuffle_frames"],
            seed=v["seed"],
        )

    def header(self, command: str, keys: Sequence[str] | None = None) -> dict[str, object]:
        meta: dict[str, object] = {"command": command}
        for k in keys or DEFAULTS:
            meta[k] = self.values[k]
        return meta


def _layers(args, dataset_dir: Path | None = None) -> list[dict[str, object]]:
    layers = []
    if dataset_dir is not None and (dataset_dir / "dataset.cfg").is_file():
        layers.append(parse_config_text((dataset_dir / "dataset.cfg").read_text(), "dataset.cfg"))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        layers.append(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    flags = {}
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
    for item in getattr(args, "set", None) or []:
        flags.update(parse_config_text(item, "--set"))
    layers.append(flags)
    return layers


def _header_text(meta: Mapping[str, object]) -> str:
    return header_lines(meta)


# -- audit -------------------------------------------------------------

def cmd_audit(args) -> int:
    families = R.FAMILIES if args.family == "all" else (args.family,)
    out = Path(args.out)
    statuses = []
    for fam in families:
        rows = []
        for v in Variant:
            cfg = ModelConfig(backbone=fam, variant=v, classes=args.classes,
                              mha_layer_norm=args.mha_layer_norm)
            audit = param_audit(build_model(cfg, init=False), args.rounding)
            rows.append(R.TableRow(cfg.name, params_millions=audit.millions))
        path = out if len(families) == 1 else out.with_name(f"{out.stem}_{fam}{out.suffix}")
        meta = {"command": "audit", "family": fam, "classes": args.classes,
                "rounding": args.rounding, "mha_layer_norm": args.mha_layer_norm, "seed": 0}
        R.emit_table_csv(rows, path, meta)
        res = R.verify_against_reference(path, R.reference_path(f"{fam}_variants"))
        statuses.append(res.status)
        print(f"{fam}: {res.status} ({res.checked} cells checked) -> {path}")
        for d in res.diffs:
            print(f"  {d}")
    if "fail" in statuses:
        return EXIT_ERROR
    return EXIT_KNOWN if "known" in statuses else EXIT_OK


# -- synth -------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    meta = {"command": "synth", "classes": args.classes, "per_class": args.per_class,
            "side": args.side, "frames": args.frames, "seed": args.seed}
    manifest, _ = D.synth_motion_dataset(
        args.classes, args.per_class, args.side, args.frames, args.seed, out,
        header=_header_text(meta),
    )
    # pipeline hints: no resize margin, and no flips (they swap left/right labels)
    hints = {"side": args.side, "resize": args.side, "flip_p": 0.0,
             "min_frames": min(32, args.frames)}
    atomic_write(out / "dataset.cfg", _header_text(meta) + "".join(f"{k}={v}\n" for k, v in hints.items()))
    print(f"wrote {len(manifest)} videos ({manifest.num_classes} classes) to {out}")
    return EXIT_OK


# -- train / eval ------------------------------------------------------

def _load_manifest(path) -> D.SplitManifest:
    return D.read_manifest(path)


def cmd_train(args) -> int:
    train_m = _load_manifest(args.train_manifest)
    val_m = _load_manifest(args.val_manifest) if args.val_manifest else None
    run = RunConfig(*_layers(args, train_m.root))
    train_set = D.load_split(train_m)
    if val_m is not None:
        val_set = D.load_split(val_m)
    else:
        tr, va = D.stratified_holdout(train_m.entries, run["holdout"], run["seed"])
        by_key = dict(zip(train_m.entries, train_set))
        train_set, val_set = [by_key[e] for e in tr], [by_key[e] for e in va]
    cfg = run.model_config(train_m.num_classes)
    tcfg, pcfg = run.train_config(), run.pipeline_config()
    model = build_model(cfg, seed=run["seed"])
    print(f"training {cfg.name} ({model.num_parameters()} params) on {len(train_set)} videos, "
          f"validating on {len(val_set)}")
    result = train_loop(
        model, train_set, val_set, tcfg, pcfg, run["seed"], cfg.classes,
        on_epoch=lambda e: print(f"epoch {e.epoch:3d} lr {e.lr:.10g} loss {e.train_loss:.4f} "
                                 f"val top1 {e.val_top1:.2f} top5 {e.val_top5:.2f}", flush=True),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {**run.header("train"), "best_epoch": result.best_epoch}
    checkpoint_save(model, out / "checkpoint.at3d", extra=meta)
    write_epoch_log(result.logs, out / "epochs.csv", meta)
    print(f"best epoch {result.best_epoch}; wrote {out / 'checkpoint.at3d'} and {out / 'epochs.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    stored = {k: v for k, v in checkpoint_meta(ckpt).items() if k in DEFAULTS}
    run = RunConfig(stored, *_layers(args))
    model = checkpoint_load(ckpt)
    if model.cfg.classes != manifest.num_classes:
        raise ConfigError(f"model has {model.cfg.classes} classes, manifest {manifest.num_classes}")
    pcfg = run.pipeline_config()
    m = evaluate(model, D.load_split(manifest), pcfg, run["seed"], model.cfg.classes)
    epoch = checkpoint_meta(ckpt).get("best_epoch", "")
    params = millions_2dp(model.num_parameters())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {**run.header("eval"), "checkpoint": ckpt}
    summary = {"model": model.cfg.name, "top1": f"{m.top1:.2f}", "top5": f"{m.top5:.2f}",
               "epoch": epoch, "params_millions": f"{params}", "videos": len(manifest)}
    atomic_write(out / "metrics.csv", _header_text(meta) + "key,value\n"
                 + "".join(f"{k},{v}\n" for k, v in summary.items()))
    rows = "".join(
        f"{name},{acc:.2f},{n}\n"
        for name, acc, n in zip(manifest.class_names, m.per_class, m.counts)
        if n > 0
    )
    atomic_write(out / "per_class.csv", _header_text(meta) + "class,accuracy,count\n" + rows)
    print(f"{model.cfg.name}: top1 {m.top1:.2f} top5 {m.top5:.2f} -> {out}")
    return EXIT_OK


# -- report ------------------------------------------------------------

def load_run_report(run_dir) -> R.ClassReport:
    run_dir = Path(run_dir)
    metrics, per_class = run_dir / "metrics.csv", run_dir / "per_class.csv"
    if not metrics.is_file() or not per_class.is_file():
        raise FileNotFoundError(f"{run_dir} is not an eval output directory")
    _, kv = R.read_csv(metrics)
    s = {r["key"]: r["value"] for r in kv}
    _, pc = R.read_csv(per_class)
    return R.ClassReport(
        s["model"],
        {r["class"]: float(r["accuracy"]) for r in pc},
        float(s["top1"]),
        float(s["top5"]),
        int(s["epoch"]) if s.get("epoch") else None,
        Decimal(s["params_millions"]) if s.get("params_millions") else None,
    )


def cmd_report(args) -> int:
    backbone = load_run_report(args.backbone_run)
    variant_dirs = [d for d in args.variant_runs.split(",") if d]
    variants = [load_run_report(d) for d in variant_dirs]
    rows = [R.TableRow.from_reports(backbone)]
    rows += [R.TableRow.from_reports(v, R.compare(backbone, v)) for v in variants]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"command": "report", "backbone_run": args.backbone_run,
            "variant_runs": args.variant_runs, "worst": args.worst, "seed": 0}
    R.emit_table_csv(rows, out / "comparison.csv", meta)
    classes = R.worst_k(backbone, min(args.worst, len(backbone.per_class)))
    reports = [backbone, *variants]
    matrix = [[r.per_class[c] for c in classes] for r in reports]
    R.emit_chart_svg(classes, matrix, out / "worst_classes.svg",
                     [r.model for r in reports], f"{backbone.model}: least accurate classes", meta)
    print(f"wrote {out / 'comparison.csv'} and {out / 'worst_classes.svg'}")
    return EXIT_OK


def cmd_keys(args) -> int:
    for k, v in DEFAULTS.items():
        print(f"{k}={v}")
    return EXIT_OK


# -- parser ------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; any key listed by 'at3d keys'")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="at3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"at3d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="count parameters and verify against the shipped tables")
    p.add_argument("--family", choices=("r3d", "mc3", "r2plus1d", "all"), default="all")
    p.add_argument("--classes", type=int, default=101)
    p.add_argument("--out", default="audit.csv", help="CSV path; 'all' writes one file per family")
    p.add_argument("--rounding", choices=("half-up", "truncate"), default="half-up")
    p.add_argument("--mha-layer-norm", action="store_true", help="count a LayerNorm in each MHA block")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("synth", help="write the synthetic moving-square dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", help="default: stratified holdout of the training manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--backbone", choices=("r3d", "mc3", "r2plus1d"))
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--scale", dest="width_scale", help="channel width scale, e.g. 0.125 or 1/8")
    p.add_argument("--frames", type=int, help="clip length")
    p.add_argument("--side", type=int, help="crop side")
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--lr", dest="lr0", type=float)
    p.add_argument("--batch-size", type=int)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="three-clip evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare eval runs against a backbone run")
    p.add_argument("--backbone-run", required=True)
    p.add_argument("--variant-runs", required=True, help="comma-separated eval directories")
    p.add_argument("--out", required=True)
    p.add_argument("--worst", type=int, default=5)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("keys", help="list configuration keys and defaults")
    p.set_defaults(func=cmd_keys)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "width_scale", None) is not None:
        try:
            args.width_scale = str(Fraction(args.width_scale))
        except (ValueError, ZeroDivisionError):
            print(f"error: bad --scale {args.width_scale!r}", file=sys.stderr)
            return EXIT_ERROR
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_DATA
    except NumericError as e:
        print(f"numeric error at stage {e.stage!r}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except At3dError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
