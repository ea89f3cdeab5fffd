"""
Command-line driver.

Exit status: 0 success, 1 data/pipeline error (one ``error: <Class>: msg``
line on stderr), 2 usage error.  Metrics go to stdout as a human table
followed by one ``json: {...}`` record line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .detection import detect
from .errors import Aneurysm3DError
from .evaluation import format_percent
from .io import atomic_write, load_volume, round_floats, load_weights, save_json, save_report, save_volume, save_weights
from .phantom import DatasetTemplate
from .pipeline import (
    RunConfig,
    ablate_attention,
    crossval,
    evaluate_model,
    phantom_cases,
    phantom_run_config,
    read_dataset,
    train_model,
    write_dataset,
)
from .voi import VoiParams, extract_voi


def _record(obj) -> str:
    return "json: " + json.dumps(round_floats(obj), sort_keys=True, allow_nan=False)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else phantom_run_config()
    return cfg.with_seed(args.seed)


def cmd_gen_phantom(args):
    n = args.dims
    template = DatasetTemplate(dims=(n, n, n))
    if args.template:
        template = DatasetTemplate.from_dict(json.loads(Path(args.template).read_text()))
    cases = phantom_cases(args.cases, args.rate, template, args.seed)
    meta = {"seed": args.seed, "rate": args.rate, "template": {k: getattr(template, k) for k in template.__dataclass_fields__}}
    write_dataset(cases, args.out, meta)
    n_pos = sum(c.positive for c in cases)
    print(f"wrote {len(cases)} cases ({n_pos} positive) to {args.out}")
    print(_record({"cases": len(cases), "positive": n_pos, "out": str(args.out)}))


def cmd_extract_voi(args):
    vol = load_volume(args.volume)
    params = VoiParams(threshold=args.threshold, slice_fraction=args.fraction, n_lines=args.lines,
                       z_factor=args.z, dilation_radius=args.dilation)
    res = extract_voi(vol, params)
    if args.out:
        save_volume(res.masked_volume, args.out)
        save_volume(res.masked_volume.with_data(res.vessel_mask.astype(np.float32)), str(args.out) + "_mask", "i16")
    rec = {"mu": res.stats.mu, "sigma": res.stats.sigma, "window": [res.window.lo, res.window.hi],
           "voxels": int(res.vessel_mask.sum())}
    print(f"mu {res.stats.mu:.2f}  sigma {res.stats.sigma:.2f}  window [{res.window.lo:.2f}, {res.window.hi:.2f}]"
          f"  voxels {rec['voxels']}")
    print(_record(rec))


def cmd_train(args):
    cfg = _load_config(args)
    cases = read_dataset(args.data)
    out = Path(args.out)
    log_path = out.with_suffix(".history.jsonl")
    lines = []

    def log(r):
        lines.append(json.dumps(r, sort_keys=True))
        if not args.quiet:
            val = "-" if r["val_loss"] is None else f"{r['val_loss']:.4f}"
            print(f"epoch {r['epoch']:4d}  train {r['train_loss']:.4f}  val {val}", flush=True)

    model, best, history = train_model(cases, cfg, seed=args.seed, log=log)
    save_weights(model, out, extra={"best_epoch": best.epoch, "metric": best.metric})
    save_json(cfg.to_dict(), out.with_suffix(".config.json"))
    atomic_write(log_path, ("\n".join(lines) + "\n").encode())
    print(f"best epoch {best.epoch}  metric {best.metric:.4f}  weights {out}")
    print(_record({"best_epoch": best.epoch, "metric": best.metric, "epochs_run": len(history)}))


def cmd_detect(args):
    model = load_weights(args.weights)
    cfg = _load_config(args)
    dets = detect(model, load_volume(args.volume), cfg.detection)
    rows = [d.to_dict() for d in dets]
    for d in dets:
        print(f"component {d.component_id:3d}  min {d.box_min}  size {d.box_size}  score {d.score:.3f}")
    if args.out:
        save_report({"volume": str(args.volume), "detections": rows}, args.out)
    print(_record({"detections": rows}))


def _print_report(rep):
    sens = "n/a" if rep.sensitivity is None else format_percent(rep.sensitivity)
    print(f"cases {rep.n_cases}  TP {rep.tp}  FP {rep.fp}  FN {rep.fn}")
    print(f"sensitivity {sens}  FPs/case {rep.fp_per_case:.2f}")
    for name, b in rep.size_bins.items():
        print(f"  size {name:>8} mm: {b['tp']}/{b['n']}  {format_percent(b['sensitivity'])}")


def cmd_evaluate(args):
    model = load_weights(args.weights)
    cfg = _load_config(args)
    rep = evaluate_model(model, read_dataset(args.data), cfg.detection)
    _print_report(rep)
    if args.out:
        save_report(rep.to_dict(), args.out)
    print(_record({"tp": rep.tp, "fp": rep.fp, "fn": rep.fn, "sensitivity": rep.sensitivity,
                   "fp_per_case": rep.fp_per_case}))


def cmd_crossval(args):
    cfg = _load_config(args)
    cases = read_dataset(args.data)

    def log(row):
        s = row["report"]["sensitivity"]
        print(f"fold {row['fold']}: sensitivity {'n/a' if s is None else format_percent(s, 2)}"
              f"  FPs/case {row['report']['fp_per_case']:.2f}", flush=True)

    report = crossval(cases, cfg, k=args.k, seed=args.seed, log=log)
    if report["summary"]:
        print(f"mean ± std: {report['summary']['text']}  best fold {report['summary']['best_fold']}"
              f" ({format_percent(report['summary']['best'], 2)})")
    if args.out:
        save_report(report, args.out)
    print(_record({"sensitivities": [r["report"]["sensitivity"] for r in report["folds"]],
                   "summary": report["summary"]}))


def cmd_ablate(args):
    cfg = _load_config(args)
    cases = read_dataset(args.data)
    positions = [p.strip() for p in args.positions.split(",") if p.strip()]
    ratios = [int(r) for r in args.ratios.split(",") if r.strip()]
    report = ablate_attention(cases, cfg, positions, ratios, k=args.k, seed=args.seed)
    print("Ratio  " + "  ".join(f"{p:>10}" for p in positions))
    for r in ratios:
        cells = []
        for p in positions:
            v = report["sensitivity"][str(r)][p]
            cells.append(f"{'n/a' if v is None else format_percent(v):>10}")
        print(f"{r:>5}  " + "  ".join(cells))
    if args.out:
        save_report(report, args.out)
    print(_record({"sensitivity": report["sensitivity"], "invalid": report["invalid"]}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aneurysm3d", description="Aneurysm detection on TOF-MRA-like volumes")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
        if config:
            sp.add_argument("--config", help="run config JSON (network/train/detection); default: 32^3 phantom settings")

    g = sub.add_parser("gen-phantom", help="write a synthetic dataset")
    g.add_argument("--cases", type=int, required=True)
    g.add_argument("--rate", type=float, default=0.5, help="fraction of cases with an aneurysm")
    g.add_argument("--dims", type=int, default=32, help="cube side of each phantom")
    g.add_argument("--template", help="DatasetTemplate JSON overriding --dims")
    g.add_argument("--out", required=True)
    common(g, config=False)
    g.set_defaults(func=cmd_gen_phantom)

    v = sub.add_parser("extract-voi", help="vessel volume of interest of one volume")
    v.add_argument("--volume", required=True)
    v.add_argument("--out", help="stem for the masked volume (and <stem>_mask)")
    d = VoiParams()
    v.add_argument("--threshold", type=float, default=d.threshold)
    v.add_argument("--fraction", type=float, default=d.slice_fraction)
    v.add_argument("--lines", type=int, default=d.n_lines)
    v.add_argument("--z", type=float, default=d.z_factor)
    v.add_argument("--dilation", type=float, default=d.dilation_radius)
    common(v, config=False)
    v.set_defaults(func=cmd_extract_voi)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="weights file")
    t.add_argument("--quiet", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    dt = sub.add_parser("detect", help="detect aneurysms in one volume")
    dt.add_argument("--weights", required=True)
    dt.add_argument("--volume", required=True)
    dt.add_argument("--out")
    common(dt)
    dt.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="detect and score a dataset directory")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("crossval", help="k-fold train/evaluate")
    c.add_argument("--data", required=True)
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--out")
    common(c)
    c.set_defaults(func=cmd_crossval)

    a = sub.add_parser("ablate-attention", help="sensitivity per SE position and ratio")
    a.add_argument("--data", required=True)
    a.add_argument("--positions", default="downsample,middle,upsample")
    a.add_argument("--ratios", default="8,16")
    a.add_argument("--k", type=int, default=5, help="held-out split is the first of k folds")
    a.add_argument("--out")
    common(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Aneurysm3DError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
