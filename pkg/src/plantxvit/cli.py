"""Command line: ``plantxvit train|eval|explain|inspect``.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or
malformed dataset, image or checkpoint), 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import model as M
from .config import ConfigError, RunConfig, _float_list, _inception, _int_list, _optimizer_list, load_config
from .data import DatasetError, decode_ppm, load_dataset, resize_bilinear, synth_dataset
from .explain import grad_cam, lime_explain
from .metrics import metrics_report
from .model import CheckpointError, build_model, count_flops, count_params, load_checkpoint, predict, save_checkpoint
from .training import NumericError, evaluate_loss_acc, fit, split_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METHODS = ("gradcam", "lime")
TABLE_FIELDS = ("loss", "accuracy", "precision", "recall", "f1", "auc", "kappa")
DEFAULT_INIT_PREFIX = "vgg_"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _typed(convert):
    def parse(text):
        try:
            return convert(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    parse.__name__ = getattr(convert, "__name__", "value").lstrip("_")
    return parse


# --------------------------------------------------------------------------
# shared helpers

def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        ("model", "input_size"): getattr(args, "image_size", None),
        ("model", "num_classes"): getattr(args, "num_classes", None),
        ("model", "patch_size"): getattr(args, "patch_size", None),
        ("model", "inception"): getattr(args, "inception", None),
        ("model", "depth"): getattr(args, "depth", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("train", "batch"): getattr(args, "batch", None),
        ("train", "optimizer"): getattr(args, "optimizer", None),
        ("train", "lr"): getattr(args, "lr", None),
        ("train", "seed"): getattr(args, "seed", None),
        ("train", "splits"): getattr(args, "splits", None),
        ("paths", "data"): getattr(args, "data", None),
        ("paths", "checkpoint"): getattr(args, "checkpoint", None),
        ("paths", "report_dir"): getattr(args, "out", None),
        ("paths", "init_checkpoint"): getattr(args, "init_checkpoint", None),
        ("paths", "init_prefix"): getattr(args, "init_prefix", None),
    }
    for (section, key), value in overrides.items():
        cfg.set(section, key, value)
    return cfg


def _dataset(cfg: RunConfig):
    """``paths.data`` is a class-per-directory PPM tree or ``synth[:classes:per_class:seed]``."""
    source = cfg.get("paths", "data")
    if not source:
        raise ConfigError("no dataset given (--data or [paths] data)")
    size = cfg.get("model", "input_size", 224)
    if source == "synth" or source.startswith("synth:"):
        parts = source.split(":")[1:]
        try:
            classes, per_class, seed = (int(p) for p in (parts + ["4", "16", "0"][len(parts):])[:3])
        except ValueError:
            raise ConfigError(f"bad synthetic dataset spec {source!r}; use synth:CLASSES:PER_CLASS:SEED") from None
        return synth_dataset(classes, per_class, size, seed)
    return load_dataset(source, size)


def _num_classes(cfg: RunConfig, ds) -> int:
    declared = cfg.get("model", "num_classes")
    if declared is not None and declared != ds.num_classes:
        raise DatasetError(f"config declares {declared} classes, dataset has {ds.num_classes}")
    return ds.num_classes


def _require(path, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _sibling_config(args) -> None:
    """Fall back to the ``config.ini`` a training run left next to its checkpoint."""
    if getattr(args, "config", None) or not getattr(args, "checkpoint", None):
        return
    candidate = Path(args.checkpoint).with_name("config.ini")
    if candidate.is_file():
        args.config = str(candidate)


def _table_row(report) -> dict:
    return {k: report.to_json()[k] for k in TABLE_FIELDS}


def _write_reports(out: Path, stem: str, report, cm, roc) -> None:
    report.write_json(out / f"{stem}.json")
    cm.write_csv(out / "confusion.csv")
    roc.write_csv(out / "roc.csv", cm.class_names)


def _evaluate(m, ds):
    loss, _ = evaluate_loss_acc(m, ds)
    probs = np.concatenate([predict(m, ds.images(range(i, min(i + 16, len(ds))))).data
                            for i in range(0, len(ds), 16)])
    return metrics_report(ds.labels(), probs, ds.class_names, loss=loss)


def _fmt(value) -> str:
    if value is None:
        return "-"
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def _print_rows(rows: list[dict], keys) -> None:
    print("  ".join(f"{k:>10}" for k in keys))
    for row in rows:
        print("  ".join(f"{_fmt(row.get(k)):>10}" for k in keys))


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.get("paths", "report_dir") or "run")
    ds = _dataset(cfg)
    classes = _num_classes(cfg, ds)
    cfg.set("model", "num_classes", classes)
    runs = list(itertools.product(cfg.patch_sizes(), cfg.optimizers()))
    sweep_patch, sweep_opt = len(cfg.patch_sizes()) > 1, len(cfg.optimizers()) > 1
    init = cfg.get("paths", "init_checkpoint")
    rows = []
    for patch, opt in runs:
        mcfg = cfg.model_config(patch_size=patch, num_classes=classes)
        tcfg = cfg.train_config(optimizer=opt)
        parts = ([f"patch_{patch}"] if sweep_patch else []) + ([f"optimizer_{opt}"] if sweep_opt else [])
        run_dir = out.joinpath(*parts) if parts else out
        run_dir.mkdir(parents=True, exist_ok=True)
        if init:
            m = load_checkpoint(_require(init, "init checkpoint"), mcfg,
                                prefix=cfg.get("paths", "init_prefix") or DEFAULT_INIT_PREFIX)
        else:
            m = build_model(mcfg)
        run_cfg = RunConfig(dict(cfg.model, patch_size=[patch]), dict(cfg.train, optimizer=[opt]),
                            dict(cfg.paths, checkpoint=str(run_dir / "model.pxvt")))
        (run_dir / "config.ini").write_text(run_cfg.to_ini())
        with open(run_dir / "epochs.jsonl", "w") as sink:
            records, m = fit(m, ds, tcfg, sink=sink)
        save_checkpoint(m, run_dir / "model.pxvt")
        train, val, _ = split_dataset(ds, tcfg.splits, tcfg.seed)
        split = "val" if len(val) else "train"
        report, cm, roc = _evaluate(m, val if len(val) else train)
        report.flags.append(f"split:{split}")
        _write_reports(run_dir, "val_metrics", report, cm, roc)
        row = {"patch_size": patch, "optimizer": opt, "epochs": len(records), "split": split,
               **_table_row(report)}
        rows.append(row)
        if not args.json:
            last = records[-1] if records else None
            print(f"[{run_dir}] patch={patch} optimizer={opt} epochs={len(records)} "
                  f"train_loss={_fmt(last.train_loss if last else None)} "
                  f"train_acc={_fmt(last.train_acc if last else None)}")
    if len(runs) > 1:
        (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    if args.json:
        print(json.dumps(rows if len(runs) > 1 else rows[0], indent=2))
    else:
        _print_rows(rows, ("patch_size", "optimizer", "split") + TABLE_FIELDS)
    return EXIT_OK


def cmd_eval(args) -> int:
    _sibling_config(args)
    cfg = _run_config(args)
    ckpt = _require(cfg.get("paths", "checkpoint"), "checkpoint")
    ds = _dataset(cfg)
    classes = _num_classes(cfg, ds)
    m = load_checkpoint(ckpt, cfg.model_config(num_classes=classes))
    tcfg = cfg.train_config()
    if args.split == "all":
        part = ds
    else:
        parts = dict(zip(("train", "val", "test"), split_dataset(ds, tcfg.splits, tcfg.seed)))
        part = parts[args.split]
        if len(part) == 0:
            raise DatasetError(f"the {args.split} split is empty with splits {list(tcfg.splits)}")
    report, cm, roc = _evaluate(m, part)
    out = Path(cfg.get("paths", "report_dir") or ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    report.flags.append(f"split:{args.split}")
    _write_reports(out, "metrics", report, cm, roc)
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
    else:
        print(f"{args.split} split: {len(part)} images, checkpoint {ckpt}")
        _print_rows([_table_row(report)], TABLE_FIELDS)
    return EXIT_OK


def _read_image(path, size: int) -> np.ndarray:
    img = decode_ppm(_require(path, "image").read_bytes())
    return resize_bilinear(img, (size, size)).data


def cmd_explain(args) -> int:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    _sibling_config(args)
    cfg = _run_config(args)
    ckpt = _require(cfg.get("paths", "checkpoint"), "checkpoint")
    classes = cfg.get("model", "num_classes") or M.read_tensors(ckpt)["output/bias"].shape[0]
    m = load_checkpoint(ckpt, cfg.model_config(num_classes=classes))
    image = _read_image(args.image, m.input_shape[0])
    probs = predict(m, image[None]).data[0]
    cls = int(np.argmax(probs)) if args.class_index is None else args.class_index
    if not 0 <= cls < m.num_classes:
        raise ConfigError(f"--class must lie in [0, {m.num_classes})")
    out = Path(cfg.get("paths", "report_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.get("train", "seed", 0)
    if args.method == "gradcam":
        heat = grad_cam(m, image, cls, args.layer)
        heat.write(out / "gradcam.pgm")
        result = {"method": "gradcam", "class": cls, "layer": heat.layer, "peak": list(heat.peak),
                  "max_raw": heat.max_raw, "pgm": str(out / "gradcam.pgm")}
    else:
        exp = lime_explain(lambda b: predict(m, b).data, image, cls, n_samples=args.samples,
                           grid=tuple(args.grid), top_k=args.top_k, seed=seed)
        exp.write(out / "lime.json")
        result = {"method": "lime", **exp.to_json(), "json": str(out / "lime.json")}
    result["probabilities"] = [float(p) for p in probs]
    if args.json:
        print(json.dumps(result, indent=2))
    elif args.method == "gradcam":
        print(f"class {cls} ({probs[cls]:.4f}); peak at row {heat.peak[0]}, col {heat.peak[1]} "
              f"[{heat.layer}]; wrote {out / 'gradcam.pgm'}")
    else:
        cols = exp.grid[1]
        tops = ", ".join(f"{s} (r{s // cols} c{s % cols}, {exp.weights[s]:+.4f})" for s in exp.top_k)
        print(f"class {cls} ({probs[cls]:.4f}); top segments: {tops}; R^2 {exp.r2:.3f}")
    return EXIT_OK


def inspect_report(m, checkpoint=None) -> dict:
    """Parameter table next to the published rows, totals, FLOPs and checkpoint size."""
    table = count_params(m)
    refs = list(M.REFERENCE_PARAM_TABLE)
    rows = table.rows
    # align by position; extra or missing transformer blocks get no reference
    n_tf = sum(r.kind == "Transformer block" for r in rows)
    ref_tf = [r for r in refs if r[0].startswith("Transformer")]
    head, tail = refs[:9], refs[9 + len(ref_tf):]
    aligned = head + (ref_tf + [None] * n_tf)[:n_tf] + tail
    out_rows = []
    for row, ref in zip(rows, aligned):
        out_rows.append({"layer": row.name, "kind": row.kind, "output_shape": list(row.output_shape),
                         "params": row.params,
                         "reference_layer": ref[0] if ref else None,
                         "reference_shape": list(ref[1]) if ref else None,
                         "reference_params": ref[2] if ref else None,
                         "match": bool(ref and ref[2] == row.params and tuple(ref[1]) == tuple(row.output_shape))})
    fixed = sum(r.params for r in rows if r.kind != "Inception")
    ref_fixed = sum(r[2] for r in refs if not r[0].startswith("Inception"))
    flops = count_flops(m)
    size = M.checkpoint_size(m)
    report = {
        "rows": out_rows,
        "fixed_part": {"achieved": fixed, "reference": ref_fixed},
        "inception": {"widths": m.config.inception.widths() if m.config else None,
                      "params": sum(r.params for r in rows if r.kind == "Inception"),
                      "output_shape": list(next(r.output_shape for r in rows if r.kind == "Inception"))},
        "total": {"achieved": table.total, "reference": M.REFERENCE_TOTAL},
        "flops": {"achieved": flops, "gflops": flops / 1e9, "reference_gflops": M.REFERENCE_GFLOPS,
                  "convention": M.FLOPS_CONVENTION},
        "checkpoint": {"bytes": size, "payload_bytes": 4 * table.total,
                       "header_bytes": size - 4 * table.total, "mb": size / 1e6,
                       "reference_mb": M.REFERENCE_MEMORY_MB},
    }
    if checkpoint is not None:
        report["checkpoint"]["file"] = str(checkpoint)
        report["checkpoint"]["file_bytes"] = Path(checkpoint).stat().st_size
    return report


def cmd_inspect(args) -> int:
    _sibling_config(args)
    cfg = _run_config(args)
    ckpt = cfg.get("paths", "checkpoint")
    if ckpt:
        m = load_checkpoint(_require(ckpt, "checkpoint"), cfg.model_config())
    else:
        m = build_model(cfg.model_config())
    rep = inspect_report(m, ckpt)
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    print(f"{'layer':<22}{'output shape':<16}{'params':>10}   {'reference':<26}{'ref shape':<16}{'ref params':>10}")
    for r in rep["rows"]:
        shape = "x".join(map(str, r["output_shape"]))
        ref_shape = "x".join(map(str, r["reference_shape"])) if r["reference_shape"] else "-"
        ref_params = f"{r['reference_params']:,}" if r["reference_params"] is not None else "-"
        flag = "" if r["match"] else "  *"
        print(f"{r['layer']:<22}{shape:<16}{r['params']:>10,}   {r['reference_layer'] or '-':<26}"
              f"{ref_shape:<16}{ref_params:>10}{flag}")
    fx, tot, fl, ck = rep["fixed_part"], rep["total"], rep["flops"], rep["checkpoint"]
    print(f"\nfixed part (all but inception): {fx['achieved']:,} (reference {fx['reference']:,})")
    inc = rep["inception"]
    print(f"inception widths {inc['widths']}: {inc['params']:,} params, output "
          f"{'x'.join(map(str, inc['output_shape']))}")
    print(f"total parameters: {tot['achieved']:,} (reference {tot['reference']:,})")
    print(f"forward FLOPs: {fl['gflops']:.2f} G (reference {fl['reference_gflops']} G; {fl['convention']})")
    print(f"checkpoint: {ck['bytes']:,} bytes = {ck['payload_bytes']:,} payload + {ck['header_bytes']:,} header "
          f"= {ck['mb']:.3f} MB (reference {ck['reference_mb']} MB)")
    if "file_bytes" in ck:
        print(f"checkpoint file {ck['file']}: {ck['file_bytes']:,} bytes")
    print("(* = differs from the reference row)")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="plantxvit", description="PlantXViT training, evaluation and explanation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="sectioned key = value run configuration")
        if data:
            sp.add_argument("--data", help="dataset directory (class per subdirectory) or synth[:C:N:SEED]")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--image-size", type=int)
        sp.add_argument("--num-classes", type=int)
        sp.add_argument("--inception", type=_typed(_inception), help="7 widths or a preset name")
        sp.add_argument("--depth", type=int, help="transformer blocks")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--patch-size", type=_typed(_int_list), help="one size, or a comma list to sweep")
    t.add_argument("--optimizer", type=_typed(_optimizer_list), help="one kind, or a comma list to sweep")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--splits", type=_typed(_float_list), help="train,val,test fractions")
    t.add_argument("--init-checkpoint", help="checkpoint to initialise matching layers from")
    t.add_argument("--init-prefix", help=f"parameter name prefix to load (default {DEFAULT_INIT_PREFIX})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--patch-size", type=_typed(_int_list))
    e.add_argument("--splits", type=_typed(_float_list))
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="Grad-CAM or LIME for one image")
    common(x, data=False)
    x.add_argument("--checkpoint")
    x.add_argument("--patch-size", type=_typed(_int_list))
    x.add_argument("--method", required=True)
    x.add_argument("--image", required=True, help="PPM image")
    x.add_argument("--class", dest="class_index", type=int, help="target class (default: predicted)")
    x.add_argument("--layer", help="Grad-CAM feature layer (default: inception)")
    x.add_argument("--grid", type=_typed(_int_list), default=[8, 8], help="LIME grid rows,cols")
    x.add_argument("--samples", type=int, default=512)
    x.add_argument("--top-k", type=int, default=5)
    x.set_defaults(func=cmd_explain)

    i = sub.add_parser("inspect", help="parameter table, FLOPs and checkpoint size")
    common(i, data=False)
    i.add_argument("--checkpoint")
    i.add_argument("--patch-size", type=_typed(_int_list))
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "grid", None) is not None and len(args.grid) != 2:
            raise ConfigError("--grid needs two numbers: rows,cols")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        name = f": {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"data error: {exc.strerror or exc}{name}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
