"""Command-line entry points: search, derive, ablate, cost.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every failure is
reported on stderr as a single line starting with ``error:``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
from xml.sax.saxutils import escape

from . import __version__
from . import genotype as gt
from .config import ConfigError, load_config
from .engine import SearchDiverged, derive_genotype, dispersion, run_many, run_search, write_checkpoints
from .search_space import ArchParams
from .tensor import checkpoint

SEARCH_OUTPUTS = ("manifest.json", "weights.pcnt", "arch.pcnt", "log.csv", "genotype.json", "cell.dot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_run_config(args):
    run = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        changes["K"] = args.k
    if getattr(args, "no_pc", False):
        changes["partial_channel"] = False
    if getattr(args, "no_en", False):
        changes["edge_normalization"] = False
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if changes:
        try:
            run.search = run.search.replace(**changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return run


# ----------------------------------------------------------------------------
# search

def cmd_search(args):
    run = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    dataset = run.load_dataset()
    cfg = run.search
    manifest = {
        "command": "search",
        "version": __version__,
        "config": run.snapshot(),
        "config_hash": run.content_hash(),
        "seed": cfg.seed,
        "partial_channel": cfg.partial_channel,
        "edge_normalization": cfg.edge_normalization,
        "dataset": {"name": dataset.name, "count": len(dataset), "classes": dataset.classes},
        "outputs": list(SEARCH_OUTPUTS) + ["genotypes.json"],
        "started": _now(),
    }

    def report(rec, net):
        if not args.quiet:
            print(f"epoch {rec.epoch:3d}  w_loss {rec.w_loss:.4f}  w_acc {rec.w_acc:.3f}  "
                  f"a_loss {rec.a_loss:.4f}  a_acc {rec.a_acc:.3f}  lr {rec.lr:.5f}  {rec.seconds:.1f}s",
                  file=sys.stderr, flush=True)

    try:
        arch, log, weights = run_search(cfg, dataset, progress=report)
    except SearchDiverged as exc:
        write_checkpoints(args.out, exc.weights, exc.arch)
        _write(os.path.join(args.out, "log.csv"), exc.log.to_csv())
        manifest.update(status="diverged", finished=_now(), detail=str(exc))
        _write(os.path.join(args.out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
        raise
    g = derive_genotype(arch, cfg)
    write_checkpoints(args.out, weights, arch)
    _write(os.path.join(args.out, "log.csv"), log.to_csv())
    _write(os.path.join(args.out, "genotypes.json"), log.genotypes_json())
    gt.save(g, os.path.join(args.out, "genotype.json"))
    _write(os.path.join(args.out, "cell.dot"), gt.to_dot(g))
    final = log.final
    manifest.update(status="ok", finished=_now(), w_steps=log.w_steps, a_steps=log.a_steps,
                    final={"w_acc": final.w_acc, "a_acc": final.a_acc, "a_loss": final.a_loss},
                    valid=not gt.validate(g, cfg.nodes, cfg.keep_zero))
    _write(os.path.join(args.out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    print(g.to_json(), end="")
    return 0


# ----------------------------------------------------------------------------
# derive

def cmd_derive(args):
    try:
        tensors = checkpoint.load(args.arch)
    except OSError as exc:
        raise RuntimeError(f"cannot read {args.arch}: {exc.strerror}") from None
    arch = ArchParams.from_tensors(tensors, nodes=args.nodes)
    g = gt.derive(arch, args.nodes, not args.no_en, args.keep_zero, args.score)
    gt.save(g, args.out)
    root, _ = os.path.splitext(args.out)
    _write(root + ".dot", gt.to_dot(g))
    print(g.to_json(), end="")
    return 0


# ----------------------------------------------------------------------------
# ablate

SWEEP_AXES = {"k": "K", "seeds": "seed", "nodes": "nodes", "epochs": "epochs"}


def parse_sweep(spec: str):
    """``axis=v1,v2,...`` or ``axis=a..b`` (inclusive) into (axis, [ints])."""
    if "=" not in spec:
        raise UsageError(f"malformed sweep {spec!r}; expected axis=values")
    axis, values = spec.split("=", 1)
    axis = axis.strip().lower()
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    try:
        if ".." in values:
            lo, hi = (int(v) for v in values.split(".."))
            out = list(range(lo, hi + 1))
        else:
            out = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"malformed sweep values {values!r}") from None
    if not out:
        raise UsageError(f"sweep {spec!r} selects no values")
    return axis, out


def scatter_svg(points, xlabel, ylabel, title, width=480, height=360) -> str:
    """Static scatter plot; points are (x, y, label)."""
    m = 56
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(max(ys), 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1

    def px(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def py(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 16}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 16 {height / 2:.1f})">{escape(ylabel)}</text>']
    for v in (x0, x1):
        out.append(f'<text x="{px(v):.1f}" y="{height - m + 14}" text-anchor="middle">{v:g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{m - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for x, y, label in points:
        out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="4" fill="steelblue"/>')
        out.append(f'<text x="{px(x) + 6:.1f}" y="{py(y) - 6:.1f}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


SUMMARY_COLUMNS = ("axis", "value", "seed", "w_acc", "a_acc", "peak_act_elems", "seconds", "valid")


def cmd_ablate(args):
    axis, values = parse_sweep(args.sweep)
    run = _load_run_config(args)
    field = SWEEP_AXES[axis]
    try:
        configs = [run.search.replace(**{field: v}) for v in values]
    except ValueError as exc:
        raise UsageError(f"sweep {args.sweep!r}: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    dataset = run.load_dataset()
    runs = run_many(configs, dataset, args.jobs)
    rows = []
    for v, c, r in zip(values, configs, runs):
        run_dir = os.path.join(args.out, f"{axis}_{v}")
        os.makedirs(run_dir, exist_ok=True)
        gt.save(r.genotype, os.path.join(run_dir, "genotype.json"))
        _write(os.path.join(run_dir, "log.csv"), r.log_csv)
        rows.append({"axis": axis, "value": v, "seed": c.seed, "w_acc": f"{r.w_acc:.6f}",
                     "a_acc": f"{r.a_acc:.6f}", "peak_act_elems": r.peak_act_elems,
                     "seconds": f"{r.seconds:.3f}", "valid": int(not gt.validate(r.genotype, c.nodes, c.keep_zero))})
    with open(os.path.join(args.out, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    disp = dispersion(runs).to_dict()
    disp["axis"] = axis
    disp["values"] = values
    _write(os.path.join(args.out, "dispersion.json"), json.dumps(disp, indent=2) + "\n")
    points = [(r.peak_act_elems, r.a_acc, f"{axis}={v}") for v, r in zip(values, runs)]
    _write(os.path.join(args.out, "scatter.svg"),
           scatter_svg(points, "peak activation elements (mixed ops)", "arch-split accuracy",
                       f"sweep over {axis}"))
    manifest = {"command": "ablate", "version": __version__, "sweep": args.sweep, "config": run.snapshot(),
                "config_hash": run.content_hash(), "jobs": args.jobs, "finished": _now(),
                "outputs": ["summary.csv", "dispersion.json", "scatter.svg"] + [f"{axis}_{v}" for v in values]}
    _write(os.path.join(args.out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    print(f"{len(rows)} runs; mean pairwise Jaccard {disp['mean_pairwise_jaccard']:.3f}; "
          f"a_acc {disp['a_acc_mean']:.3f} +/- {disp['a_acc_std']:.3f}")
    return 0


# ----------------------------------------------------------------------------
# cost

def cmd_cost(args):
    try:
        g = gt.load(args.genotype)
    except OSError as exc:
        raise RuntimeError(f"cannot read {args.genotype}: {exc.strerror}") from None
    problems = gt.validate(g)
    if problems:
        raise RuntimeError("invalid genotype: " + "; ".join(f"{c} ({d})" for c, d in problems))
    report = gt.count_costs(g, args.channels, args.cells, args.classes, args.resolution)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


# ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="pcdarts", description="Partial-channel differentiable architecture search.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("search", help="run one search")
    s.add_argument("--config", required=True, help="TOML run configuration")
    s.add_argument("--seed", type=int, help="override [engine] seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--k", type=int, help="sampling divisor K")
    s.add_argument("--epochs", type=int, help="override [engine] epochs")
    s.add_argument("--no-pc", action="store_true", help="disable partial channel connections")
    s.add_argument("--no-en", action="store_true", help="disable edge normalization")
    s.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("derive", help="derive a genotype from an arch checkpoint")
    d.add_argument("--arch", required=True, help="arch.pcnt checkpoint")
    d.add_argument("--nodes", type=int, required=True, help="nodes per cell, inputs included")
    d.add_argument("--out", required=True, help="genotype JSON path; a .dot is written beside it")
    d.add_argument("--keep-zero", action="store_true", help="allow the zero op in the result")
    d.add_argument("--no-en", action="store_true", help="ignore beta when scoring edges")
    d.add_argument("--score", choices=("max", "sum"), default="max", help="edge score over ops (default max)")
    d.set_defaults(func=cmd_derive)

    a = sub.add_parser("ablate", help="sweep one setting over several searches")
    a.add_argument("--config", required=True, help="TOML run configuration")
    a.add_argument("--sweep", required=True, help="k=1,2,4,8 | seeds=0..4 | nodes=5,6,7 | epochs=20,30")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.add_argument("--seed", type=int, help="override [engine] seed")
    a.add_argument("--no-pc", action="store_true", help="disable partial channel connections")
    a.add_argument("--no-en", action="store_true", help="disable edge normalization")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("cost", help="parameter and multiply-add counts of a genotype")
    c.add_argument("--genotype", required=True, help="genotype JSON")
    c.add_argument("--cells", type=int, default=20, help="number of cells L")
    c.add_argument("--channels", type=int, default=36, help="initial channels C0")
    c.add_argument("--resolution", type=int, default=32, help="square input size")
    c.add_argument("--classes", type=int, default=10)
    c.set_defaults(func=cmd_cost)
    return p


def _fail(code, msg):
    print(f"error: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, exc)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(2, exc)
    except KeyboardInterrupt:
        return _fail(1, "interrupted")
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
