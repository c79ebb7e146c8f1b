"""Command-line harness: problem generation, training, inference, ablation
sweeps, theory reports, gradient checks, and SVG plots.

File formats (all textual, floats printed with 17 significant digits so a
round-trip parse is bit exact):

  batch container   header line "L2OQB v1 <N> <d> <b> <seed>", then per
                    problem b rows of d floats (M, row-major) followed by
                    one row of b floats (y).
  weight checkpoint header lines "L2OCKPT v1", "L <L>", "dims <n0..nL>",
                    "seed <seed>", "e <e>", then per layer a "layer <l>"
                    line and its rows, row-major.
  train CSV         '#'-prefixed reproducibility header (config echo,
                    platform, constants, condition report), then
                    epoch,loss,grad_norm_l1..lL,wall_ms.
  ablate CSV        same header style, then e,eta,final_loss,
                    improvement_ratio,diverged.
  infer CSV         step,objective.

Exit codes: 0 success, 2 divergence, 3 I/O failure, 4 bad arguments.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .grad import backward, finite_diff_grad
from .init import InitConfig, init_weights, suggest_e
from .linalg import SeededRng
from .model import L2OWeights, rollout
from .problem import QuadraticBatch, gd_rollout, make_batch, objective
from .theory import check_conditions, quantities
from .train import TrainConfig, improvement_ratio, infer, train

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_IO = 3
EXIT_BADARGS = 4


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse's default error() exits with code 2, which is reserved for
    # divergence here; route argument problems to the bad-args code instead.
    def error(self, message):
        raise UsageError(message)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_row(values) -> str:
    return " ".join(_fmt(v) for v in values)


# ---------------------------------------------------------------- batch file

def write_batch(path: Path, batch: QuadraticBatch) -> None:
    lines = [f"L2OQB v1 {batch.N} {batch.d} {batch.b} {batch.seed if batch.seed is not None else 0}"]
    for i in range(batch.N):
        for r in range(batch.b):
            lines.append(_fmt_row(batch.Ms[i, r]))
        lines.append(_fmt_row(batch.ys[i]))
    path.write_text("\n".join(lines) + "\n")


def read_batch(path: Path) -> QuadraticBatch:
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("L2OQB v1 "):
        raise UsageError(f"{path}: not a batch container")
    _, _, n, d, b, seed = lines[0].split()
    N, d, b, seed = int(n), int(d), int(b), int(seed)
    Ms = np.empty((N, b, d))
    ys = np.empty((N, b))
    pos = 1
    for i in range(N):
        for r in range(b):
            Ms[i, r] = np.fromstring(lines[pos], sep=" ")
            pos += 1
        ys[i] = np.fromstring(lines[pos], sep=" ")
        pos += 1
    return QuadraticBatch.from_arrays(Ms, ys, seed=seed)


# ----------------------------------------------------------- checkpoint file

def write_checkpoint(path: Path, weights: L2OWeights, seed: int, e: float) -> None:
    dims = weights.dims
    lines = [
        "L2OCKPT v1",
        f"L {weights.L}",
        "dims " + " ".join(str(n) for n in dims),
        f"seed {seed}",
        f"e {_fmt(e)}",
    ]
    for l, w in enumerate(weights.W, start=1):
        lines.append(f"layer {l}")
        for r in range(w.shape[0]):
            lines.append(_fmt_row(w[r]))
    path.write_text("\n".join(lines) + "\n")


def read_checkpoint(path: Path) -> tuple[L2OWeights, int, float]:
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "L2OCKPT v1":
        raise UsageError(f"{path}: not a weight checkpoint")
    L = int(lines[1].split()[1])
    dims = [int(t) for t in lines[2].split()[1:]]
    seed = int(lines[3].split()[1])
    e = float(lines[4].split()[1])
    pos = 5
    Ws = []
    for l in range(L):
        if lines[pos] != f"layer {l + 1}":
            raise UsageError(f"{path}: malformed layer marker at line {pos + 1}")
        pos += 1
        rows = dims[l + 1]
        w = np.empty((rows, dims[l]))
        for r in range(rows):
            w[r] = np.fromstring(lines[pos], sep=" ")
            pos += 1
        Ws.append(w)
    return L2OWeights(Ws), seed, e


# ------------------------------------------------------------------ csv/svg

def _header_lines(kind: str, config: dict) -> list[str]:
    lines = [f"# l2oquad {kind} v1", f"# platform: {platform.platform()} numpy {np.__version__}"]
    for k in sorted(config):
        lines.append(f"# {k}={config[k]}")
    return lines


def read_csv(path: Path) -> tuple[list[str], list[list[str]], list[str]]:
    """Returns (column names, rows as string lists, header comment lines)."""
    comments, names, rows = [], None, []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            comments.append(line)
        elif names is None:
            names = line.split(",")
        else:
            rows.append(line.split(","))
    if names is None:
        raise UsageError(f"{path}: empty CSV")
    return names, rows, comments


_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def write_line_chart(
    path: Path,
    series: list[tuple[str, list[float], list[float]]],
    x_label: str,
    y_label: str,
    log_y: bool = False,
    gd_reference: float | None = None,
) -> None:
    """Hand-rolled SVG line chart: one polyline per series, optional dashed
    reference line, legend from series names."""
    if not series or all(len(xs) == 0 for _, xs, _ in series):
        raise UsageError("nothing to plot")
    W, H = 860, 520
    ml, mr, mt, mb = 70, 180, 40, 60
    pw, ph = W - ml - mr, H - mt - mb

    def ty(v: float) -> float:
        return math.log10(v) if log_y else v

    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [ty(y) for _, _, ys in series for y in ys if not log_y or y > 0]
    if gd_reference is not None and (not log_y or gd_reference > 0):
        ys_all.append(ty(gd_reference))
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x: float) -> float:
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return mt + ph - (ty(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="#ffffff"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="#000" stroke-width="1.5"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="#000" stroke-width="1.5"/>',
        f'<text x="{ml + pw / 2:.1f}" y="{H - 18}" text-anchor="middle" font-size="14" font-family="sans-serif">{x_label}</text>',
        f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="14" font-family="sans-serif" transform="rotate(-90 18 {mt + ph / 2:.1f})">{y_label}</text>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        ypix = mt + ph - ph * i / 4
        label = f"1e{yv:.1f}" if log_y else f"{yv:.4g}"
        out.append(f'<line x1="{ml}" y1="{ypix:.1f}" x2="{ml + pw}" y2="{ypix:.1f}" stroke="#ddd" stroke-width="0.7"/>')
        out.append(f'<text x="{ml - 6}" y="{ypix + 4:.1f}" text-anchor="end" font-size="11" font-family="sans-serif">{label}</text>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        xpix = ml + pw * i / 4
        out.append(f'<text x="{xpix:.1f}" y="{mt + ph + 18}" text-anchor="middle" font-size="11" font-family="sans-serif">{xv:.4g}</text>')
    if gd_reference is not None and (not log_y or gd_reference > 0):
        yref = py(gd_reference)
        out.append(f'<line x1="{ml}" y1="{yref:.2f}" x2="{ml + pw}" y2="{yref:.2f}" stroke="#000" stroke-width="1.5" stroke-dasharray="7,5"/>')
        out.append(f'<text x="{ml + pw + 8}" y="{yref + 4:.2f}" font-size="12" font-family="sans-serif">GD reference</text>')
    ly = mt + 10
    for idx, (name, xs, ys) in enumerate(series):
        color = _SVG_COLORS[idx % len(_SVG_COLORS)]
        pts = " ".join(
            f"{px(x):.2f},{py(y):.2f}"
            for x, y in zip(xs, ys)
            if not log_y or y > 0
        )
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{pts}"/>')
        out.append(f'<line x1="{ml + pw + 8}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2.5"/>')
        out.append(f'<text x="{ml + pw + 36}" y="{ly + 4}" font-size="12" font-family="sans-serif">{name}</text>')
        ly += 20
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")


# ----------------------------------------------------------------- commands

def _apply_config_file(args: argparse.Namespace, subparser: argparse.ArgumentParser) -> None:
    """Precedence: explicit CLI flags > config-file values > parser defaults."""
    if not getattr(args, "config", None):
        return
    try:
        loaded = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    defaults = {a.dest: a.default for a in subparser._actions}
    for key, value in loaded.items():
        if key not in defaults:
            raise UsageError(f"config file key {key!r} is not a known option")
        if getattr(args, key) == defaults[key]:  # flag left at default: config wins
            setattr(args, key, value)


def _dims_from_args(args) -> tuple[int, ...]:
    if args.dims:
        return tuple(int(t) for t in args.dims.split(","))
    return (2, 2, int(args.width), 1)


def cmd_gen(args) -> int:
    rng = SeededRng(args.seed)
    batch = make_batch(rng, args.n, args.d, args.b)
    out = Path(args.out)
    write_batch(out, batch)
    print(f"wrote {out} (N={batch.N} d={batch.d} b={batch.b})")
    print(f"beta={_fmt(batch.beta)} beta0={_fmt(batch.beta0)}")
    return EXIT_OK


def _train_one(batch, dims, seed, e, T, eta, epochs, theory_report):
    cfg = TrainConfig(T=T, epochs=epochs, eta=eta,
                      init=InitConfig(dims=dims, seed=seed, e=e),
                      theory_report=theory_report)
    return train(cfg, batch)


def cmd_train(args) -> int:
    batch = read_batch(Path(args.batch))
    dims = _dims_from_args(args)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    weights, log = _train_one(batch, dims, args.weight_seed, args.e, args.T,
                              args.eta, args.epochs, not args.no_theory)

    config = {
        "batch": args.batch, "dims": ",".join(map(str, dims)), "weight_seed": args.weight_seed,
        "e": _fmt(args.e), "T": args.T, "eta": _fmt(args.eta), "epochs": args.epochs,
        "beta": _fmt(log.beta), "beta0": _fmt(log.beta0), "gd_reference": _fmt(log.gd_reference),
        "diverged_epoch": log.diverged_epoch, "unstable_epoch": log.unstable_epoch,
    }
    if log.quantities is not None:
        config["alpha0"] = _fmt(log.quantities.alpha0)
    csv_path = outdir / f"{args.label}_train.csv"
    ncols = len(weights.W)
    lines = _header_lines("train", config)
    lines.append("epoch,loss," + ",".join(f"grad_norm_l{i + 1}" for i in range(ncols)) + ",wall_ms")
    for row in log.rows:
        gn = ",".join(_fmt(g) for g in row.grad_norms)
        lines.append(f"{row.epoch},{_fmt(row.loss)},{gn},{_fmt(row.wall_ms)}")
    csv_path.write_text("\n".join(lines) + "\n")

    if log.quantities is not None and log.conditions is not None:
        (outdir / f"{args.label}_theory.txt").write_text(
            log.quantities.as_text() + "\n" + log.conditions.as_text() + "\n")
    write_checkpoint(outdir / f"{args.label}_weights.txt", weights, args.weight_seed, args.e)

    print(f"gd_reference={_fmt(log.gd_reference)} final_loss={_fmt(log.final_loss)}")
    if not log.diverged and log.gd_reference > 0:
        print(f"improvement_ratio={_fmt(improvement_ratio(log.gd_reference, log.final_loss))}")
    if log.unstable:
        print(f"instability at epoch {log.unstable_epoch}")
    if log.diverged:
        print(f"diverged at epoch {log.diverged_epoch}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_infer(args) -> int:
    batch = read_batch(Path(args.batch))
    weights, _, _ = read_checkpoint(Path(args.weights))
    x0 = np.zeros(batch.N * batch.d)
    objs = infer(weights, batch, x0, args.steps)
    out = Path(args.out)
    lines = _header_lines("infer", {"batch": args.batch, "weights": args.weights, "steps": args.steps})
    lines.append("step,objective")
    lines.extend(f"{t},{_fmt(v)}" for t, v in enumerate(objs))
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out}; objective[{args.steps}]={_fmt(objs[-1])}")
    return EXIT_OK


def _ablate_cell(batch, dims, seed, T, epochs, e, eta):
    try:
        _, log = _train_one(batch, dims, seed, e, T, eta, epochs, theory_report=False)
    except Exception as exc:  # record the failure, keep the grid going
        return e, eta, float("nan"), float("nan"), 1, f"error: {exc}"
    diverged = 1 if (log.diverged or log.unstable) else 0
    if log.diverged or log.gd_reference <= 0:
        return e, eta, log.final_loss, float("nan"), diverged, ""
    ratio = improvement_ratio(log.gd_reference, log.final_loss)
    return e, eta, log.final_loss, ratio, diverged, ""


def cmd_ablate(args) -> int:
    batch = read_batch(Path(args.batch))
    dims = _dims_from_args(args)
    es = [float(t) for t in args.e_list.split(",")]
    etas = [float(t) for t in args.eta_list.split(",")]
    cells = [(e, eta) for e in es for eta in etas]
    workers = max(1, int(os.environ.get("L2O_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda c: _ablate_cell(batch, dims, args.weight_seed, args.T, args.epochs, *c), cells))
    else:
        results = [_ablate_cell(batch, dims, args.weight_seed, args.T, args.epochs, *c) for c in cells]

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / f"{args.label}_ablate.csv"
    lines = _header_lines("ablate", {
        "batch": args.batch, "dims": ",".join(map(str, dims)), "weight_seed": args.weight_seed,
        "T": args.T, "epochs": args.epochs, "e_list": args.e_list, "eta_list": args.eta_list,
    })
    lines.append("e,eta,final_loss,improvement_ratio,diverged")
    for e, eta, fl, ratio, div, note in results:
        if note:
            lines.append(f"# cell e={_fmt(e)} eta={_fmt(eta)} {note}")
        lines.append(f"{_fmt(e)},{_fmt(eta)},{_fmt(fl)},{_fmt(ratio)},{div}")
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out} ({len(results)} cells)")
    return EXIT_OK


def cmd_theory(args) -> int:
    batch = read_batch(Path(args.batch))
    if args.weights:
        weights, seed, e = read_checkpoint(Path(args.weights))
    else:
        dims = _dims_from_args(args)
        weights = init_weights(InitConfig(dims=dims, seed=args.weight_seed, e=args.e))
    q = quantities(weights, batch, np.zeros(batch.N * batch.d), args.T)
    rep = check_conditions(q)
    text = q.as_text() + "\n" + rep.as_text() + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    nd = args.n * args.d
    width = max(d for d in _dims_from_args(args))
    if nd > 64 or args.T > 10 or width > 32:
        raise UsageError("gradcheck caps: N*d <= 64, T <= 10, width <= 32")
    rng = SeededRng(args.seed)
    batch = make_batch(rng, args.n, args.d, args.b)
    dims = _dims_from_args(args)
    if args.zero_last:
        weights = init_weights(InitConfig(dims=dims, seed=args.weight_seed, e=args.e))
    else:
        from .linalg import gaussian_matrix
        wrng = SeededRng(args.weight_seed)
        weights = L2OWeights([gaussian_matrix(wrng, dims[i + 1], dims[i]) * 0.7
                              for i in range(len(dims) - 1)])
    x0 = np.zeros(nd)
    trace = rollout(weights, batch, x0, args.T)
    analytic = backward(trace, weights, batch)
    if args.perturb:
        analytic.dW[0] = analytic.dW[0] + 1e-3  # test hook: corrupt on purpose
    numeric = finite_diff_grad(weights, batch, x0, args.T, args.h)
    worst = 0.0
    for a, f in zip(analytic.dW, numeric.dW):
        diff = np.abs(a - f)  # differences under 1e-9 absolute are noise
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-9)
        rel = np.where(diff <= 1e-9, 0.0, diff / denom)
        worst = max(worst, float(rel.max()))
    if args.zero_last:
        inner_max = max(float(np.abs(g).max()) for g in analytic.dW[:-1])
        print(f"inner-layer gradients at zero last layer: max |entry| = {_fmt(inner_max)}")
    print(f"max relative error = {_fmt(worst)}")
    if worst > 1e-4:
        print("FAIL (tolerance 1e-4)")
        return 1
    print("pass")
    return EXIT_OK


def cmd_plot(args) -> int:
    names, rows, comments = read_csv(Path(args.csv))
    if not rows:
        raise UsageError(f"{args.csv}: no data rows")
    xcol = args.x if args.x else names[0]
    if xcol not in names:
        raise UsageError(f"x column {xcol!r} not in {names}")
    ycols = args.series.split(",") if args.series else [
        n for n in names if n not in (xcol, "wall_ms")]
    for c in ycols:
        if c not in names:
            raise UsageError(f"series column {c!r} not in {names}")
    xi = names.index(xcol)
    xs = [float(r[xi]) for r in rows]
    series = []
    for c in ycols:
        ci = names.index(c)
        series.append((c, xs, [float(r[ci]) for r in rows]))
    gd_ref = None
    for line in comments:
        if line.startswith("# gd_reference="):
            gd_ref = float(line.split("=", 1)[1])
    write_line_chart(Path(args.out), series, xcol, args.ylabel or "value",
                     log_y=args.logy, gd_reference=gd_ref)
    print(f"wrote {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="l2oquad",
                description="learned step-size GD on batched quadratic least squares")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a problem batch file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--b", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    def add_common_train(sp, with_eta=True):
        sp.add_argument("--batch", required=True)
        sp.add_argument("--T", type=int, default=20)
        sp.add_argument("--width", type=int, default=1024)
        sp.add_argument("--dims", default=None, help="comma widths, overrides --width")
        sp.add_argument("--weight-seed", dest="weight_seed", type=int, default=0)
        sp.add_argument("--epochs", type=int, default=400)
        sp.add_argument("--outdir", default=".")
        sp.add_argument("--label", default="run")
        sp.add_argument("--config", default=None, help="JSON config file (flags override)")
        if with_eta:
            sp.add_argument("--e", type=float, default=1.0)
            sp.add_argument("--eta", type=float, default=1e-7)

    t = sub.add_parser("train", help="train the step-size network")
    add_common_train(t)
    t.add_argument("--no-theory", action="store_true", help="skip the condition report")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="roll a checkpoint out and log objectives")
    i.add_argument("--batch", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--steps", type=int, default=3000)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="grid of training runs over e and eta")
    add_common_train(a, with_eta=False)
    a.add_argument("--e-list", dest="e_list", required=True)
    a.add_argument("--eta-list", dest="eta_list", required=True)
    a.set_defaults(func=cmd_ablate)

    th = sub.add_parser("theory", help="condition report for a config or checkpoint")
    th.add_argument("--batch", required=True)
    th.add_argument("--weights", default=None)
    th.add_argument("--T", type=int, default=20)
    th.add_argument("--width", type=int, default=1024)
    th.add_argument("--dims", default=None)
    th.add_argument("--weight-seed", dest="weight_seed", type=int, default=0)
    th.add_argument("--e", type=float, default=1.0)
    th.add_argument("--out", default=None)
    th.set_defaults(func=cmd_theory)

    gc = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    gc.add_argument("--n", type=int, default=2)
    gc.add_argument("--d", type=int, default=4)
    gc.add_argument("--b", type=int, default=2)
    gc.add_argument("--T", type=int, default=5)
    gc.add_argument("--width", type=int, default=8)
    gc.add_argument("--dims", default="2,8,1")
    gc.add_argument("--seed", type=int, default=9)
    gc.add_argument("--weight-seed", dest="weight_seed", type=int, default=1)
    gc.add_argument("--e", type=float, default=1.0)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--zero-last", action="store_true", help="use the deterministic init (zero last layer)")
    gc.add_argument("--perturb", action="store_true", help="test hook: corrupt the analytic gradient")
    gc.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="render a CSV as an SVG line chart")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--x", default=None)
    pl.add_argument("--series", default=None, help="comma-separated column names")
    pl.add_argument("--ylabel", default=None)
    pl.add_argument("--logy", action="store_true")
    pl.set_defaults(func=cmd_plot)

    p._l2o_subparsers = {"train": t, "ablate": a}
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._l2o_subparsers.get(args.command)
        if sub is not None and getattr(args, "config", None):
            _apply_config_file(args, sub)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BADARGS
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BADARGS
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
