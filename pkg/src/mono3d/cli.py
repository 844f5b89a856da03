"""Command-line driver: ``gradcheck``, ``bench``, ``train-toy``, ``eval`` and ``inspect``.

Exit codes: 0 success, 1 a check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from .config import TOY_PRESET, ConfigError, RunConfig, parse_pairs
from .depthbin import INVALID, DepthTargetMap
from .dtr import BENCH_HEADER, AttentionConfig, bench_attention
from .evaluation import evaluate_labels
from .gradsuite import CHECKS, run_suite
from .kittiio import ParseError, parse_calib, parse_labels
from .tensor import load_tensor

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

REFERENCE_TIMINGS = "# full-scale reference timings (context only, not a target): vanilla 136 ms, linear 37 ms"


class InputError(Exception):
    """Bad user input; reported and mapped to exit code 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mono3d", description=__doc__.splitlines()[0])
    _common_options(parser, None)
    # the same options are accepted after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    _common_options(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--only", action="append", choices=sorted(CHECKS), help="run only this check, repeatable")
    gc.add_argument("--corrupt", choices=sorted(CHECKS), help="test hook: break this check's backward pass")

    bench = sub.add_parser("bench", parents=[common], help="vanilla vs linear attention timings as CSV")
    bench.add_argument("--out", help="write CSV here instead of stdout")

    tt = sub.add_parser("train-toy", parents=[common], help="overfit synthetic scenes and evaluate on them")
    tt.add_argument("--out", help="output directory (default: config out_dir)")

    ev = sub.add_parser("eval", parents=[common], help="AP40 of KITTI-format results against labels")
    ev.add_argument("det_dir")
    ev.add_argument("gt_dir")
    ev.add_argument("--out", help="write the JSON report here")

    ins = sub.add_parser("inspect", parents=[common], help="pretty-print and validate a labels, calib, DBIN or TNSR file")
    ins.add_argument("path")
    return parser


def _common_options(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="key=value config file")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    parser.add_argument(
        "--set",
        action="append",
        default=default if default is not None else [],
        metavar="KEY=VALUE",
        help="config override, repeatable",
    )
    parser.add_argument(
        "--parallel",
        action="store_true",
        default=default if default is not None else False,
        help="parallelize across independent files",
    )


def load_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig()
    if args.command == "train-toy":
        base = base.with_overrides(TOY_PRESET)
    if args.config:
        try:
            with open(args.config) as fh:
                base = RunConfig.from_text(fh.read(), base)
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from None
    pairs = {}
    if args.seed is not None:
        if args.seed < 0:
            raise InputError("--seed must be non-negative")
        pairs["seed"] = str(args.seed)
    pairs.update(parse_pairs(args.set))
    if args.parallel:
        pairs["parallel"] = "true"
    return base.with_overrides(pairs).validate()


# -- gradcheck ------------------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, only: Optional[Sequence[str]] = None, corrupt: Optional[str] = None, out=None) -> int:
    out = out or sys.stdout
    results = run_suite(cfg.gc_seeds, cfg.gc_eps, cfg.gc_tol, cfg.seed, only, corrupt)
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=out)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed (tol {cfg.gc_tol:g}, eps {cfg.gc_eps:g})", file=out)
    return EXIT_OK


# -- bench --------------------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig) -> str:
    if cfg.parallel:
        raise InputError("bench refuses --parallel: timings must be single-threaded")
    attn = AttentionConfig(model_dim=cfg.bench_dim, heads=cfg.bench_heads)
    rows = bench_attention(attn, cfg.bench_sizes, seed=cfg.seed, runs=cfg.bench_runs)
    lines = [REFERENCE_TIMINGS, f"# dim={cfg.bench_dim} heads={cfg.bench_heads} float32", BENCH_HEADER]
    lines += [r.csv() for r in rows]
    return "\n".join(lines) + "\n"


# -- train-toy --------------------------------------------------------------------------------


def cmd_train_toy(cfg: RunConfig, out_dir: str, out=None) -> int:
    out = out or sys.stdout
    from .train import NonFiniteLoss, evaluate_training_scenes, train_toy

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.dump())
    try:
        result = train_toy(cfg)
    except NonFiniteLoss as exc:
        path = os.path.join(out_dir, "diagnostics.json")
        with open(path, "w") as fh:
            json.dump(exc.diagnostics, fh, indent=2)
        print(f"error: {exc}; diagnostics written to {path}", file=out)
        return EXIT_FAIL
    with open(os.path.join(out_dir, "loss_curve.csv"), "w") as fh:
        fh.write(result.curve_csv())
    np.savez(os.path.join(out_dir, "checkpoint.npz"), anchors=result.anchors.boxes, **result.model.state_dict())
    report = evaluate_training_scenes(result)
    with open(os.path.join(out_dir, "eval.json"), "w") as fh:
        fh.write(report.to_json())
    print(f"steps={len(result.curve)} first={result.curve[0]['total']:.6g} final={result.curve[-1]['total']:.6g}", file=out)
    print(f"loss reduction from step 10: {100 * result.loss_reduction():.2f}%", file=out)
    print(report.summary(), file=out)
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------------------


def _read_labels(path: str):
    try:
        with open(path) as fh:
            return parse_labels(fh.read())
    except ParseError as exc:
        raise InputError(f"{path}:{exc.line}:{exc.column}: {exc.reason}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_eval(cfg: RunConfig, det_dir: str, gt_dir: str):
    for d in (det_dir, gt_dir):
        if not os.path.isdir(d):
            raise InputError(f"not a directory: {d}")
    names = sorted(n for n in os.listdir(gt_dir) if n.endswith(".txt"))
    if not names:
        raise InputError(f"no .txt label files in {gt_dir}")

    def load_pair(name):
        det_path = os.path.join(det_dir, name)
        dets = _read_labels(det_path) if os.path.exists(det_path) else []
        return dets, _read_labels(os.path.join(gt_dir, name))

    if cfg.parallel:
        with ThreadPoolExecutor() as pool:
            pairs = list(pool.map(load_pair, names))
    else:
        pairs = [load_pair(n) for n in names]
    return evaluate_labels([p[0] for p in pairs], [p[1] for p in pairs], cfg.eval_thresholds())


# -- inspect ------------------------------------------------------------------------------------


def _inspect_labels(text: str) -> str:
    labels = parse_labels(text)
    head = f"{'#':>3} {'type':<12}{'trunc':>6}{'occ':>4}{'alpha':>7}  {'bbox':<27} {'h,w,l':<17} {'x,y,z':<20}{'ry':>6}{'score':>8}"
    lines = [head]
    for i, lb in enumerate(labels):
        bbox = ",".join(f"{v:.1f}" for v in lb.bbox)
        dims = ",".join(f"{v:.2f}" for v in lb.dims)
        loc = ",".join(f"{v:.2f}" for v in lb.location)
        score = "" if lb.score is None else f"{lb.score:.4f}"
        lines.append(
            f"{i:>3} {lb.type:<12}{lb.truncated:>6.2f}{lb.occluded:>4}{lb.alpha:>7.2f}  {bbox:<27} {dims:<17} {loc:<20}{lb.rotation_y:>6.2f}{score:>8}"
        )
    problems = [f"object {i}: non-positive dimension" for i, lb in enumerate(labels) if not lb.dont_care and min(lb.dims) <= 0]
    lines.append(f"{len(labels)} objects")
    lines += [f"warning: {p}" for p in problems]
    return "\n".join(lines)


def _inspect_calib(text: str) -> str:
    c = parse_calib(text)
    rows = ["P2:"] + ["  " + " ".join(f"{v:12.6f}" for v in row) for row in c.P2]
    rows.append(f"fx={c.fx:.4f} fy={c.fy:.4f} cx={c.cx:.4f} cy={c.cy:.4f}")
    return "\n".join(rows)


def _inspect_dbin(text: str) -> str:
    m = DepthTargetMap.from_text(text)
    h, w = m.shape
    invalid = int(np.sum(m.bins == INVALID))
    counts = np.bincount(m.bins[m.valid_mask], minlength=m.num_bins)
    lines = [f"DBIN {h}x{w}, D={m.num_bins}, invalid={invalid}, valid={h * w - invalid}"]
    peak = max(1, int(counts.max()) if counts.size else 1)
    for b, n in enumerate(counts):
        if n:
            lines.append(f"  bin {b:>4}: {n:>6} {'#' * max(1, round(40 * n / peak))}")
    return "\n".join(lines)


def _inspect_tensor(raw: bytes) -> str:
    t = load_tensor(raw).data
    lines = [f"TNSR rank={t.ndim} shape={tuple(t.shape)} elements={t.size}"]
    lines.append(f"min={t.min():.6g} max={t.max():.6g} mean={t.mean():.6g}")
    nonfinite = int(np.sum(~np.isfinite(t)))
    if nonfinite:
        lines.append(f"warning: {nonfinite} non-finite values")
    return "\n".join(lines)


def cmd_inspect(path: str) -> str:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from None
    if raw[:4] == b"TNSR":
        try:
            return _inspect_tensor(raw)
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise InputError(f"{path}: not a text file or TNSR tensor") from None
    stripped = text.lstrip()
    try:
        if stripped.startswith("DBIN"):
            return _inspect_dbin(text)
        if any(line.lstrip().startswith("P2:") for line in text.splitlines()):
            return _inspect_calib(text)
        return _inspect_labels(text)
    except ParseError as exc:
        raise InputError(f"{path}:{exc.line}:{exc.column}: {exc.reason}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


# -- entry point ------------------------------------------------------------------------------------


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        cfg = load_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.only, args.corrupt)
        if args.command == "bench":
            text = cmd_bench(cfg)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        if args.command == "train-toy":
            return cmd_train_toy(cfg, args.out or cfg.out_dir)
        if args.command == "eval":
            report = cmd_eval(cfg, args.det_dir, args.gt_dir)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(report.to_json())
            print(report.summary())
            return EXIT_OK
        if args.command == "inspect":
            print(cmd_inspect(args.path))
            return EXIT_OK
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # a crash is a failed run, never an unlisted exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
