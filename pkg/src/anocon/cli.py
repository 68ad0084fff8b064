"""Command-line entry points: synth, train, predict, evaluate, report.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
runtime failures.  ``ANOCON_SEED`` overrides any ``--seed`` flag.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import StorageError, UsageError

log = logging.getLogger("anocon")

CONSTRAINT_FLAGS = {"l2-pixel": "l2_pixel", "l2-image": "l2_image", "logbarrier": "logbarrier", "entropy": "entropy"}
SCHEDULE_FLAGS = {"fixed": "fixed", "geom": "geometric_1p01"}


def _seed(args):
    env = os.environ.get("ANOCON_SEED")
    if env is None:
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ANOCON_SEED must be an integer, got {env!r}") from None


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# synth -------------------------------------------------------------------

def cmd_synth(args):
    from . import synthdata

    for name in ("patients", "slices"):
        if getattr(args, name) is not None and getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.size < 32:
        raise UsageError("--size must be >= 32")
    seed = _seed(args)
    out = Path(args.out)
    if args.anomalous or args.normal:
        split = args.split or ("test" if args.anomalous else "train")
        n = args.patients or synthdata.DEFAULT_SPLITS.get(split, 10)
        gen = synthdata.gen_anomalous if args.anomalous else synthdata.gen_normal
        kw = {"hypointense": args.hypointense} if args.anomalous else {}
        gen(seed, n, args.slices, args.size, out, split=split, **kw)
        print(f"wrote {split} split ({n} patients x {args.slices} slices) to {out}")
        return 0
    n_train = args.patients or synthdata.DEFAULT_SPLITS["train"]
    synthdata.make_benchmark(out, seed, n_train=n_train, n_val=args.val_patients, n_test=args.test_patients,
                             slices=args.slices, size=args.size, hypointense=args.hypointense)
    print(f"wrote benchmark (train {n_train}, val {args.val_patients}, test {args.test_patients} patients) to {out}")
    return 0


# train -------------------------------------------------------------------

def build_config(args):
    from .constraints import ConstraintSpec
    from .trainer import defaults_for

    cfg = defaults_for(args.method, args.profile)
    c = cfg.constraint
    ckw = {}
    if args.constraint is not None:
        ckw["kind"] = CONSTRAINT_FLAGS[args.constraint]
    if args.lambda_s is not None:
        ckw["lambda_s"] = args.lambda_s
    if args.lambda_h is not None:
        ckw["lambda_h"] = args.lambda_h
    if args.t is not None:
        ckw["t"] = args.t
    if args.t_schedule is not None:
        ckw["t_schedule"] = SCHEDULE_FLAGS[args.t_schedule]
    if ckw:
        c = ConstraintSpec(**{**c.__dict__, **ckw})
    kw = {"constraint": c, "seed": _seed(args)}
    for flag, key in (("epochs", "epochs"), ("warmup", "warmup_epochs"), ("beta", "beta"), ("block", "block_s"),
                      ("reps", "repetitions"), ("recon", "recon"), ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag)
        if v is not None:
            kw[key] = v
    return replace(cfg, **kw)


def cmd_train(args):
    from . import trainer
    from .tensorio import load_manifest

    cfg = build_config(args)
    if args.dry_run:
        sys.stdout.write(_dump(cfg.to_json()))
        return 0
    data = Path(args.data)
    tpath = data / "train" / "manifest.json"
    if not tpath.is_file():
        tpath = data / "manifest.json"
    if not tpath.is_file():
        raise UsageError(f"no training manifest under {data}")
    train_man = load_manifest(tpath)
    if train_man.split != "train":
        raise UsageError(f"{tpath} is a {train_man.split!r} split, expected 'train'")
    vpath = data / "val" / "manifest.json"
    val_man = load_manifest(vpath) if vpath.is_file() else None

    out = Path(args.out)
    from .tensorio import ensure_dir

    ensure_dir(out)
    (out / "config.json").write_text(_dump(cfg.to_json()))
    sys.stdout.write(_dump(cfg.to_json()))
    runs = trainer.run_repetitions(cfg, train_man, val_man, out=out)
    if not args.no_plots:
        from . import plots

        for r, tm in enumerate(runs):
            plots.loss_curves(tm.history, out / f"rep{r}" / "loss.png")
    for r, tm in enumerate(runs):
        last = tm.history[-1]
        print(f"rep{r} seed={tm.seed} final total={last['total']:.6g} recon={last['recon']:.6g} kl={last['kl']:.6g}")
    return 0


# predict -----------------------------------------------------------------

def cmd_predict(args):
    from .inference import predict_dataset

    ref = args.model
    if ref != "histeq" and not (Path(ref) / "checkpoint.json").is_file() and not Path(ref).is_file():
        raise UsageError(f"no checkpoint at {ref}")
    index = predict_dataset(ref, args.data, args.out)
    counts = {k: len(v) for k, v in index["splits"].items()}
    print(f"{index['method']} saliencies written to {args.out}: {counts}")
    return 0


# evaluate ----------------------------------------------------------------

def cmd_evaluate(args):
    from . import metrics
    from .inference import ThresholdRule, evaluate_predictions
    from .tensorio import ensure_dir, read_tensor

    rule = ThresholdRule.parse(args.threshold)
    out = ensure_dir(args.out)
    reports, pooled = [], []
    for pred in args.pred:
        rep, data = evaluate_predictions(pred, args.data, rule, split=args.split)
        reports.append(rep)
        pooled.append(data)
    report = metrics.aggregate(reports) if len(reports) > 1 else reports[0]
    report.save(out / "report.json")
    if len(reports) > 1:
        (out / "reports.json").write_text(_dump([r.to_json() for r in reports]))
    name = args.name or Path(args.pred[0]).name
    (out / "table.md").write_text(metrics.markdown_table([(name, report)]))

    sal, brains, gts, scans = pooled[0]
    keep = metrics.filter_scans(gts, scans)
    s = np.concatenate([np.asarray(sal[i], np.float64).ravel() for i in keep])
    y = np.concatenate([np.asarray(gts[i], bool).ravel() for i in keep])
    region = np.concatenate([np.asarray(brains[i], bool).ravel() for i in keep])
    curve = metrics.pr_curve(s, y)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision", "tp", "fp"])
        for row in zip(curve.thresholds, curve.recall, curve.precision, curve.tp, curve.fp):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3]), int(row[4])])
    edges, cn, ca = metrics.overlap_histograms(s[region & ~y], s[region & y])
    with open(out / "overlap_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "normal", "anomalous"])
        for lo, hi, a, b in zip(edges[:-1], edges[1:], cn, ca):
            w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])
    if not args.no_plots:
        from . import plots

        plots.pr_curve(curve, out / "pr_curve.png", label=f"{name} AUPRC={report.auprc:.3f}")
        plots.value_histograms(edges, cn, ca, out / "overlap_hist.png", title=f"overlap {report.overlap_pct:.1f}%")
        index = json.loads((Path(args.pred[0]) / "index.json").read_text())
        items = [it for k, it in enumerate(index["splits"][args.split]) if k in set(keep)][:4]
        imgs = [read_tensor(Path(args.data) / it["image"]) for it in items]
        plots.overlays(imgs, [sal[keep[k]] for k in range(len(items))], [gts[keep[k]] for k in range(len(items))],
                       out / "overlays.png")
    print(metrics.markdown_table([(name, report)]), end="")
    return 0


# report ------------------------------------------------------------------

def cmd_report(args):
    from . import metrics
    from .tensorio import ensure_dir

    names = args.names or [Path(d).name for d in args.eval]
    if len(names) != len(args.eval):
        raise UsageError("--names needs one entry per --eval directory")
    rows = []
    for name, d in zip(names, args.eval):
        path = Path(d) / "report.json"
        if not path.is_file():
            raise UsageError(f"no report.json in {d}")
        rows.append((name, metrics.EvalReport.load(path)))
    out = ensure_dir(args.out)
    (out / "table.md").write_text(metrics.markdown_table(rows))
    (out / "table.csv").write_text(metrics.csv_table(rows))
    print(metrics.markdown_table(rows), end="")
    return 0


# parser ------------------------------------------------------------------

def build_parser():
    from .trainer import METHODS, PROFILES
    from .vae import RECON_KINDS

    p = argparse.ArgumentParser(prog="anocon", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--patients", type=int, default=None, help="training (or single-split) patients; default 40")
    s.add_argument("--slices", type=int, default=10)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--val-patients", type=int, default=6)
    s.add_argument("--test-patients", type=int, default=10)
    kind = s.add_mutually_exclusive_group()
    kind.add_argument("--anomalous", action="store_true", help="write one split with lesions")
    kind.add_argument("--normal", action="store_true", help="write one lesion-free split")
    s.add_argument("--split", default=None)
    s.add_argument("--hypointense", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--profile", choices=PROFILES, default="desk")
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lambda-s", type=float)
    t.add_argument("--lambda-h", type=float)
    t.add_argument("--t", type=float)
    t.add_argument("--t-schedule", choices=tuple(SCHEDULE_FLAGS))
    t.add_argument("--constraint", choices=tuple(CONSTRAINT_FLAGS))
    t.add_argument("--block", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--reps", type=int)
    t.add_argument("--recon", choices=RECON_KINDS)
    t.add_argument("--no-plots", action="store_true")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write saliency maps")
    pr.add_argument("--model", required=True, help="checkpoint directory, or 'histeq'")
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score saliency maps against ground truth")
    e.add_argument("--pred", required=True, nargs="+", help="one prediction directory per repetition")
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", default="op", help="op, p85, p90, p95, p98 or fixed:<v>")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--name")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="comparison table over evaluation directories")
    r.add_argument("--eval", required=True, nargs="+")
    r.add_argument("--names", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, StorageError) as exc:
        print(f"anocon {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"anocon {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
