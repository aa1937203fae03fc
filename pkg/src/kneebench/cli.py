"""``kneebench`` command line: gen, train, detect and eval.

Every command accepts ``--config FILE``, an INI file whose section named
after the command supplies defaults for any long flag (dashes become
underscores); flags given on the command line win.  Each run writes its fully
resolved configuration next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import posteval as pe
from . import synthgen as sg
from . import training as tr
from . import unetconv as u
from .errors import KneeBenchError, NonFiniteLoss

SINGLE_KNEE_METHODS = ("l", "dfdt", "al", "s")
METHODS = ("unet", "kneedle") + SINGLE_KNEE_METHODS


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("KNEEBENCH_THREADS", "").strip()
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"KNEEBENCH_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise UsageError("KNEEBENCH_THREADS must be >= 1")
        return value
    return 1


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolved(args) -> dict:
    skip = {"func", "config", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_resolved_config(args, path) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp[args.command] = {k: json.dumps(v) if isinstance(v, (list, tuple)) else str(v)
                        for k, v in _resolved(args).items()}
    with open(path, "w") as fh:
        cp.write(fh)


def _is_multi_knee(dataset) -> bool:
    return dataset.split in ("mknee", "train") or any(len(s.knee_indices) > 1 for s in dataset.samples)


def _load_model(path):
    try:
        return u.load_checkpoint(path)
    except FileNotFoundError:
        raise RunError(f"checkpoint not found: {path}") from None


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = sg.gen_dataset(args.split, args.n, args.L, args.seed, threads=_threads(args))
    sg.write_dataset(ds, out)
    manifest = {"file": out.name, "sha256": _sha256(out), "split": args.split, "count": args.n,
                "L": args.L, "seed": args.seed, "generator_version": ds.generator_version}
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_resolved_config(args, f"{out}.config.ini")
    print(f"wrote {args.n} {args.split} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_once(args, samples, alpha, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    L = samples[0].L
    mcfg = u.ModelConfig(length=L, width_scale=args.width_scale)
    model = u.build(mcfg, seed=args.seed)
    cfg = tr.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, alpha=alpha, lr0=args.lr0,
                         rho=args.rho, halve_every=args.halve_every, seed=args.seed,
                         eval_every=args.eval_every, early_stop=args.early_stop,
                         val_fraction=args.val_fraction, loss=args.loss,
                         soft_f1_as_printed=args.soft_f1_as_printed)

    def report(rec):
        if not args.quiet:
            val = "NA" if rec.val_f1 is None else f"{rec.val_f1:.4f}"
            print(f"[alpha={alpha:g}] epoch {rec.epoch:3d} lr {rec.lr:.4g} loss {rec.mean_loss:.5f} "
                  f"val_f1@2 {val}", flush=True)

    res = tr.train(model, samples, cfg, history_path=out_dir / "history.tsv", progress=report)
    u.save_checkpoint(res.model, out_dir / "final.knee")
    u.save_checkpoint(res.best_model, out_dir / "best.knee")
    files = ["final.knee", "best.knee", "history.tsv"]
    manifest = {"files": {f: _sha256(out_dir / f) for f in files}, "parameters": model.n_parameters(),
                "best_epoch": res.best_epoch, "alpha": alpha, "model": u.config_dict(mcfg)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return res


def cmd_train(args) -> int:
    ds = sg.read_dataset(args.data)
    samples = ds.samples[: args.n_train] if args.n_train else ds.samples
    if not samples:
        raise UsageError("training set is empty")
    if args.L is not None and args.L != samples[0].L:
        raise UsageError(f"--L {args.L} does not match the dataset length {samples[0].L}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(args, out / "config.ini")
    alphas = args.alpha
    for a in alphas:
        target = out if len(alphas) == 1 else out / f"alpha-{a:g}"
        try:
            _train_once(args, samples, a, target)
        except NonFiniteLoss as exc:
            raise RunError(f"training diverged (alpha={a:g}): {exc}") from None
    return 0


# ---------------------------------------------------------------------------
# detect


def _classical(args, method, threads=1):
    return pe.ClassicalMethod(method, zeta=args.zeta, transform=args.transform, fit=args.fit,
                              refine=args.refine, stride=args.stride, smoothing=args.smoothing,
                              threads=threads)


def read_series(path):
    """Two-column text file (x y), whitespace or comma separated."""
    text = Path(path).read_text().replace(",", " ")
    try:
        arr = np.loadtxt(text.splitlines(), ndmin=2)
    except ValueError as exc:
        raise RunError(f"cannot parse series file {path}: {exc}") from None
    if arr.shape[1] != 2 or arr.shape[0] < 4:
        raise RunError(f"series file {path} must have two columns and at least four rows")
    order = np.argsort(arr[:, 0], kind="mergesort")
    x, y = arr[order, 0], arr[order, 1]
    return sg.Sample("series", None, x, y, y, [], 0, 0)


def cmd_detect(args) -> int:
    if (args.data is None) == (args.series is None):
        raise UsageError("give exactly one of --data or --series")
    if args.data is not None:
        ds = sg.read_dataset(args.data)
        samples = ds.samples
        if args.method in SINGLE_KNEE_METHODS and _is_multi_knee(ds):
            raise UsageError(f"method {args.method!r} is a single-knee detector and is not applicable "
                             f"to the multi-knee set {ds.split!r}")
    else:
        samples = [read_series(args.series)]
        if args.method != "unet" and args.smoothing == pe.SMOOTH_AUTO:
            args.smoothing = "none"  # no clean reference for a bare series
    if args.method == "unet":
        if not args.model:
            raise UsageError("--model is required for --method unet")
        method = pe.UnetMethod(_load_model(args.model), pe.NmsConfig(args.delta, args.radius))
    else:
        method = _classical(args, args.method, _threads(args))
    preds = method.predict(samples)
    lines = []
    for s, p in zip(samples, preds):
        rec = {"id": s.id, "indices": p} if p is not None else {"id": s.id, "indices": None, "error": True}
        lines.append(json.dumps(rec))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        write_resolved_config(args, f"{args.out}.config.ini")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# eval


def _parse_gen_spec(spec: str):
    try:
        split, n = spec.split(":")
        n = int(n)
    except ValueError:
        raise UsageError(f"--gen expects SPLIT:N, got {spec!r}") from None
    if split not in sg.SPLITS or n < 1:
        raise UsageError(f"bad --gen spec {spec!r}")
    return split, n


def _eval_sets(args, trial: int):
    sets = []
    for path in args.data or []:
        sets.append(sg.read_dataset(path))
    for spec in args.gen or []:
        split, n = _parse_gen_spec(spec)
        sets.append(sg.gen_dataset(split, n, args.L, args.seed + trial, threads=_threads(args)))
    return sets


def _eval_trial(args, trial: int, model) -> pe.EvalReport:
    report = pe.EvalReport()
    threads = _threads(args)
    for ds in _eval_sets(args, trial):
        multi = _is_multi_knee(ds)
        for name in args.methods:
            if name in SINGLE_KNEE_METHODS and multi:
                continue  # not applicable to multi-knee sets
            if name == "unet":
                method = pe.UnetMethod(model, pe.NmsConfig(args.delta, args.radius))
            elif name == "kneedle" and args.zeta_grid:
                best, _ = pe.zeta_sweep(ds, args.zeta_grid, args.transform, args.tolerance,
                                        smoothing=args.smoothing)
                report.meta[f"zeta/{ds.split}"] = best
                method = pe.ClassicalMethod("kneedle", zeta=best, transform=args.transform,
                                            smoothing=args.smoothing, threads=threads)
            else:
                method = _classical(args, name, threads)
            report.extend(pe.evaluate(method, ds, args.tolerance))
    return report


def _merge_trials(reports):
    merged = pe.EvalReport()
    keys = [(r.method, r.test_set, r.tolerance) for r in reports[0].rows]
    for key in keys:
        rows = [rep.lookup(*key) for rep in reports]
        merged.rows.append(pe.EvalRow(*key, float(np.mean([r.mean_f1 for r in rows])),
                                      sum(r.n for r in rows), sum(r.tp for r in rows),
                                      sum(r.fp for r in rows), sum(r.fn for r in rows),
                                      sum(r.failures for r in rows)))
    return merged


def cmd_eval(args) -> int:
    if not args.data and not args.gen:
        raise UsageError("give at least one --data file or --gen SPLIT:N")
    if args.trials > 1 and not args.gen:
        raise UsageError("--trials > 1 needs generated test sets (--gen); fixed files do not vary")
    model = None
    if "unet" in args.methods:
        if not args.model:
            raise UsageError("--model is required when evaluating unet")
        model = _load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(args, out / "config.ini")
    reports = [_eval_trial(args, t, model) for t in range(args.trials)]
    final = reports[0] if args.trials == 1 else _merge_trials(reports)
    try:
        pe.write_report(final, out / "report.csv")
        if args.svg:
            pe.write_report(final, out / "report.svg")
        if args.trials > 1:
            with open(out / "trials.csv", "w") as fh:
                fh.write("method,test_set,tolerance,mean_f1,std_f1,trials\n")
                for m, ts, E, mean, std, n in pe.trial_summary(reports):
                    fh.write(f"{m},{ts},{E},{mean:.6f},{std:.6f},{n}\n")
        meta = {}
        for rep in reports:
            meta.update(rep.meta)
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise RunError(f"cannot write report: {exc}") from None
    for r in final.rows:
        print(f"{r.method:8s} {r.test_set:6s} E={r.tolerance} F1={r.mean_f1:.4f} failures={r.failures}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _smoothing(text):
    if text not in ("auto", "none"):
        raise argparse.ArgumentTypeError("smoothing must be 'auto' or 'none'")
    return text


def _add_classical_flags(p):
    p.add_argument("--zeta", type=float, default=0.01, help="Kneedle sensitivity")
    p.add_argument("--transform", choices=("projection", "rotation"), default="projection")
    p.add_argument("--fit", choices=("best_fit", "linear_fit"), default="linear_fit")
    p.add_argument("--refine", action="store_true", help="iterative refinement for DFDT, AL and S")
    p.add_argument("--stride", type=_positive_int, default=None, help="S-method breakpoint stride")
    p.add_argument("--smoothing", type=_smoothing, default="auto",
                   help="'auto' picks the EWM setting closest to the clean curve; 'none' disables it")
    p.add_argument("--delta", type=float, default=0.5, help="NMS probability threshold")
    p.add_argument("--radius", type=int, default=10, help="NMS suppression radius")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kneebench", description="Knee-point detection benchmark.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file with defaults in a section named after the command")
        p.add_argument("--threads", type=_positive_int, default=None,
                       help="worker processes (falls back to KNEEBENCH_THREADS, then 1)")

    g = sub.add_parser("gen", help="generate a dataset")
    common(g)
    g.add_argument("--split", choices=sg.SPLITS, required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--L", type=_positive_int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train UNetConv")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--L", type=_positive_int, default=None, help="expected series length (checked)")
    t.add_argument("--n-train", type=_positive_int, default=None, help="use only the first N samples")
    t.add_argument("--width-scale", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=_positive_int, default=64)
    t.add_argument("--alpha", type=float, nargs="+", default=[0.1],
                   help="one value, or several for a sweep (one run directory each)")
    t.add_argument("--lr0", type=float, default=0.5)
    t.add_argument("--rho", type=float, default=0.5)
    t.add_argument("--halve-every", type=_positive_int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-every", type=_positive_int, default=1)
    t.add_argument("--early-stop", type=_positive_int, default=None)
    t.add_argument("--val-fraction", type=float, default=0.05)
    t.add_argument("--loss", choices=tr.LOSS_KINDS, default="inverse")
    t.add_argument("--soft-f1-as-printed", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run one detector")
    common(d)
    d.add_argument("--method", choices=METHODS, required=True)
    d.add_argument("--model")
    d.add_argument("--data")
    d.add_argument("--series", help="two-column text file with x and y")
    d.add_argument("--out")
    _add_classical_flags(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score detectors with F1 at tolerance")
    common(e)
    e.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    e.add_argument("--model")
    e.add_argument("--data", nargs="+", help="dataset files")
    e.add_argument("--gen", nargs="+", help="generate test sets, e.g. sknee:160 mknee:60")
    e.add_argument("--L", type=_positive_int, default=512, help="length of generated sets")
    e.add_argument("--seed", type=int, default=0, help="seed of generated sets (plus the trial number)")
    e.add_argument("--trials", type=_positive_int, default=1)
    e.add_argument("--tolerance", type=int, nargs="+", default=list(pe.DEFAULT_TOLERANCES))
    e.add_argument("--zeta-grid", type=float, nargs="+", default=None,
                   help="pick Kneedle's zeta per test set from this grid")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--svg", action="store_true", help="also draw report.svg")
    _add_classical_flags(e)
    e.set_defaults(func=cmd_eval)
    return parser


def _config_defaults(parser, argv):
    """Re-parse with defaults taken from the ``--config`` file, if any."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(known.config):
        raise UsageError(f"cannot read config file {known.config}")
    cmd = next((a for a in argv if a in ("gen", "train", "detect", "eval")), None)
    if cmd is None or not cp.has_section(cmd):
        return
    subparser = parser._subparsers._group_actions[0].choices[cmd]
    # configparser lower-cases keys, so match destinations case-insensitively
    actions = {a.dest.lower(): a for a in subparser._actions}
    defaults = {}
    for key, raw in cp.items(cmd):
        act = actions.get(key.replace("-", "_").lower())
        if act is None:
            raise UsageError(f"unknown key {key!r} in section [{cmd}] of {known.config}")
        dest = act.dest
        if act.nargs == 0:  # store_true
            defaults[dest] = cp.getboolean(cmd, key)
        elif act.nargs in ("+", "*"):
            items = json.loads(raw) if raw.strip().startswith("[") else raw.split()
            defaults[dest] = [act.type(str(v)) if act.type else v for v in items]
        elif raw == "None":
            defaults[dest] = None
        else:
            defaults[dest] = act.type(raw) if act.type else raw
        if act.required:
            act.required = False
    subparser.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
    except (UsageError, ValueError) as exc:
        print(f"kneebench: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kneebench {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RunError, KneeBenchError, OSError) as exc:
        print(f"kneebench {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
