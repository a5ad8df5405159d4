"""``pome``: edit, diff, spectrum, verify and ns-compare over safetensors checkpoints."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from fnmatch import fnmatchcase
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .core import RankError, ShapeMismatchError, apply_edit, orthogonalize
from .linalg import ConvergenceError, NonFiniteError, effective_rank, frobenius_norm, newton_schulz, svd
from .report import Report, edit_summary, emit, rank_sweep, spectrum
from .selection import LAYER_PRESETS, ConfigError, SelectionError, load_config, parse_beta_list, select
from .verify import CHECKS, run_suite

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_IO = 4
EXIT_VERIFY = 5
EXIT_USAGE = 64

log = logging.getLogger("pome")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse number list {text!r}") from None


def _add_io(p, out=False):
    p.add_argument("--pre", required=True, type=Path, help="pretrained checkpoint")
    p.add_argument("--ft", required=True, type=Path, help="fine-tuned checkpoint")
    if out:
        p.add_argument("--out", required=True, help="output checkpoint; may contain {beta}")


def _add_selection(p, default_layers=None):
    p.add_argument("--config", type=Path, help="JSON edit config")
    p.add_argument("--layers", default=default_layers, help="comma-separated include globs")
    p.add_argument("--preset", action="append", choices=LAYER_PRESETS, default=[],
                   help="layer type to include (repeatable)")
    p.add_argument("--k-ratio", type=float, dest="k_ratio")
    p.add_argument("--k", type=_positive_int, dest="explicit_k")
    p.add_argument("--beta", type=float)
    p.add_argument("--beta-sweep", dest="beta_sweep",
                   help="comma-separated betas, or 'default' for the standard grid")
    p.add_argument("--dtype-policy", choices=("preserve", "f32"), dest="dtype_policy")


def _add_runtime(p):
    p.add_argument("--jobs", type=_positive_int, help="worker threads (default: $POME_JOBS or CPU count)")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="pome", description="Spectrum-equalizing edits of fine-tuning deltas.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("edit", help="write an edited checkpoint")
    _add_io(p, out=True)
    _add_selection(p)
    _add_runtime(p)
    p.add_argument("--dry-run", action="store_true", help="print the plan without writing")
    p.add_argument("--allow-empty", action="store_true", help="succeed when nothing is selected")

    p = sub.add_parser("diff", help="per-tensor norms of the delta")
    _add_io(p)
    p.add_argument("--layers", default="*", help="comma-separated globs (default: all tensors)")
    _add_runtime(p)

    p = sub.add_parser("spectrum", help="singular spectra and rank-retention sweeps")
    _add_io(p)
    _add_selection(p)
    _add_runtime(p)
    p.add_argument("--csv", type=Path, help="spectrum CSV; the sweep goes to <stem>-sweep.csv")
    p.add_argument("--json", type=Path, help="spectrum JSON; the sweep goes to <stem>-sweep.json")
    p.add_argument("--ratios", type=_float_list, default=[0.1, 0.25, 0.5, 0.75, 1.0])

    p = sub.add_parser("verify", help="run the seeded invariant suite")
    p.add_argument("--size", type=_positive_int, default=12, help="largest matrix dimension")
    p.add_argument("--trials", type=_positive_int, default=2000, help="feasible samples per (matrix, k) in the rank-k optimum check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=CHECKS, help=argparse.SUPPRESS)

    p = sub.add_parser("ns-compare", help="Newton-Schulz vs. SVD polar factor on each delta")
    _add_io(p)
    _add_selection(p)
    _add_runtime(p)
    p.add_argument("--iters", type=_positive_int, default=100)
    p.add_argument("--tol", type=float, default=1e-7)
    return parser


def _jobs(args):
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get("POME_JOBS")
    if env:
        try:
            return _positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise CliError(EXIT_USAGE, f"POME_JOBS: {exc}") from None
    return os.cpu_count() or 1


def _config(args):
    flags = {
        "include": args.layers.split(",") if args.layers else None,
        "presets": args.preset or None,
        "k_ratio": args.k_ratio,
        "explicit_k": args.explicit_k,
        "beta": args.beta,
        "beta_sweep": list(parse_beta_list(args.beta_sweep)) if args.beta_sweep else None,
        "dtype_policy": args.dtype_policy,
    }
    return load_config(args.config, flags)


def _open_pair(args):
    pre = ckpt.read_checkpoint(args.pre)
    ft = ckpt.read_checkpoint(args.ft)
    return pre, ft


def _check_pair(pre, ft):
    only_pre = sorted(set(pre.names) - set(ft.names))
    only_ft = sorted(set(ft.names) - set(pre.names))
    if only_pre or only_ft:
        raise CliError(EXIT_INPUT, f"tensors present in one checkpoint only: pre-only {only_pre}, ft-only {only_ft}")
    for name in ft.names:
        a, b = pre.info(name).shape, ft.info(name).shape
        if a != b:
            raise CliError(EXIT_INPUT, f"{name}: shape {list(a)} in pre but {list(b)} in ft")


def _delta(pre, ft, name):
    return ft.matrix(name) - pre.matrix(name)


def _map(jobs, fn, items):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _out_paths(template, betas, sweep):
    if sweep and "{beta}" not in template:
        raise CliError(EXIT_USAGE, "--out must contain {beta} when sweeping beta")
    return [Path(template.replace("{beta}", repr(float(b)))) for b in betas]


def _same_file(a, b):
    return Path(a).resolve() == Path(b).resolve()


def _table(rows, header):
    cols = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cols)


def _g(x, digits=6):
    return f"{x:.{digits}g}"


def cmd_edit(args):
    config = _config(args)
    betas = config.betas()
    outs = _out_paths(args.out, betas, config.beta_sweep is not None)
    for out in outs:
        for src in (args.pre, args.ft):
            if _same_file(out, src):
                raise CliError(EXIT_USAGE, f"output {out} would overwrite input {src}")
    if len(set(outs)) != len(outs):
        raise CliError(EXIT_USAGE, "beta values map to the same output path")

    pre, ft = _open_pair(args)
    _check_pair(pre, ft)
    chosen = select(ft.manifest.shapes(), config)
    if not chosen and not args.allow_empty:
        raise CliError(EXIT_EMPTY, "selection matched no tensor (use --allow-empty to copy the input)")

    configs = [config.with_beta(b) for b in betas]

    def work(name):
        d = _delta(pre, ft, name)
        if not d.any():
            return name, None, None
        factors = svd(d, name)
        edits = []
        for cfg in configs:
            params = cfg.params_for(name)
            edited = orthogonalize(d, params, factors=factors, name=name)
            edits.append((edited, edit_summary(name, d, edited, params.beta, factors=factors)))
        return name, d, edits

    results = _map(_jobs(args), work, [name for name, _ in chosen])
    for name, d, _ in results:
        if d is None:
            log.warning("%s: no update to edit (delta is zero); copied unchanged", name)

    for i, (beta, out) in enumerate(zip(betas, outs)):
        rows = [e[i][1] for _, d, e in results if d is not None]
        header = f"beta={beta!r} -> {out}" + (" (dry run, nothing written)" if args.dry_run else "")
        print(header)
        print(_table([(r.name, "x".join(map(str, r.shape)), r.k, _g(r.alpha), _g(r.delta_fro), _g(r.edited_fro),
                       _g(r.retained_energy), _g(r.residual)) for r in rows],
                     ["tensor", "shape", "k", "alpha", "|dW|_F", "|dW_hat|_F", "energy_kept", "residual"]))
        if args.dry_run:
            continue

        edited = {}
        for name, d, edits in results:
            if d is None:
                continue
            dtype = ft.info(name).dtype if config.dtype_policy == "preserve" else "F32"
            w = apply_edit(pre.matrix(name), edits[i][0], name)
            edited[name] = ckpt.from_working(w, dtype, name)
        records = [edited.get(name) or ft.record(name) for name in ft.names]
        groups = None
        if ft.sharded:
            by_shard = {}
            for name, shard in ft.manifest.shard_map.items():
                by_shard.setdefault(shard, []).append(name)
            groups = [by_shard[s] for s in sorted(by_shard)]
        out.parent.mkdir(parents=True, exist_ok=True)
        ckpt.write_checkpoint(records, out, metadata=ft.manifest.metadata, shard_groups=groups)
    return EXIT_OK


def cmd_diff(args):
    pre, ft = _open_pair(args)
    patterns = [p for p in args.layers.split(",") if p]
    only = sorted(set(pre.names) ^ set(ft.names))
    shared = [n for n in ft.names if n in pre and any(fnmatchcase(n, p) for p in patterns)]
    mismatched = [n for n in shared if pre.info(n).shape != ft.info(n).shape]
    shared = [n for n in shared if n not in mismatched]

    def work(name):
        d = ft.array(name) - pre.array(name)
        if d.ndim != 2 or d.size == 0:
            return name, d.shape, frobenius_norm(d), None, None
        row = spectrum(d, name)
        return name, d.shape, row.frobenius_norm, row.spectral_norm, row.rms_to_rms_norm

    rows = _map(_jobs(args), work, shared)
    print(_table([(n, "x".join(map(str, s)), _g(f, 9), "-" if sp is None else _g(sp, 9),
                   "-" if rms is None else _g(rms, 9)) for n, s, f, sp, rms in rows],
                 ["tensor", "shape", "fro", "spectral", "rms_to_rms"]))
    if only:
        print("only in one checkpoint:")
        for n in only:
            print(f"  {n} ({'pre' if n in pre else 'ft'})")
    if mismatched:
        for n in mismatched:
            print(f"ERROR {EXIT_INPUT}: {n}: shape {list(pre.info(n).shape)} in pre but "
                  f"{list(ft.info(n).shape)} in ft", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def _sibling(path, tag):
    return path.with_name(f"{path.stem}-{tag}{path.suffix}")


def cmd_spectrum(args):
    config = _config(args)
    pre, ft = _open_pair(args)
    _check_pair(pre, ft)
    chosen = select(ft.manifest.shapes(), config)
    if not chosen:
        raise CliError(EXIT_EMPTY, "selection matched no tensor")
    ratios = sorted(args.ratios)
    if not ratios or any(not 0 < r <= 1 for r in ratios):
        raise CliError(EXIT_USAGE, f"--ratios must be non-empty values in (0, 1], got {args.ratios}")

    def work(name):
        d = _delta(pre, ft, name)
        row = spectrum(d, name)
        return row, rank_sweep(d, ratios, name=name)

    results = _map(_jobs(args), work, [n for n, _ in chosen])
    spec = Report("spectrum", [r for r, _ in results])
    sweep = Report("sweep", [s for _, rows in results for s in rows])
    for fmt, path in (("csv", args.csv), ("json", args.json)):
        if path is not None:
            emit(spec, fmt, path)
            emit(sweep, fmt, _sibling(path, "sweep"))
    print(_table([(r.name, "x".join(map(str, r.shape)), _g(r.frobenius_norm), _g(r.spectral_norm),
                   effective_rank(np.array(r.sigma)), "zero delta" if r.zero else "") for r in spec.rows],
                 ["tensor", "shape", "fro", "spectral", "rank", "note"]))
    print()
    print(_table([(s.name, _g(s.ratio), s.k, _g(s.retained_energy, 9), _g(s.residual, 9)) for s in sweep.rows],
                 ["tensor", "ratio", "k", "retained_energy", "residual"]))
    return EXIT_OK


def cmd_verify(args):
    results = run_suite(size=args.size, trials=args.trials, seed=args.seed, fault=args.inject_fault)
    print(_table([(r.name, "PASS" if r.passed else "FAIL", r.detail) for r in results], ["check", "result", "detail"]))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(EXIT_VERIFY, f"invariant check failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_ns_compare(args):
    config = _config(args)
    pre, ft = _open_pair(args)
    _check_pair(pre, ft)
    chosen = select(ft.manifest.shapes(), config)
    if not chosen:
        raise CliError(EXIT_EMPTY, "selection matched no tensor")

    def work(name):
        d = _delta(pre, ft, name)
        if not d.any():
            return name, d.shape, 0, None, "zero delta, skipped"
        f = svd(d, name)
        r = effective_rank(f.sigma)
        polar = f.U[:, :r] @ f.V[:, :r].T
        try:
            x = newton_schulz(d, max_iters=args.iters, tol=args.tol, name=name)
        except ConvergenceError as exc:
            return name, d.shape, r, math.nan, f"did not converge: {exc}"
        note = f"rank-deficient: compared on effective rank {r}" if r < min(d.shape) else ""
        return name, d.shape, r, frobenius_norm(x - polar), note

    rows = _map(_jobs(args), work, [n for n, _ in chosen])
    print(_table([(n, "x".join(map(str, s)), r, "-" if res is None else f"{res:.3e}", note)
                  for n, s, r, res, note in rows], ["tensor", "shape", "rank", "|NS - U_r V_r^T|_F", "note"]))
    if any(res is not None and math.isnan(res) for _, _, _, res, _ in rows):
        raise CliError(EXIT_VERIFY, "Newton-Schulz failed to converge on at least one tensor")
    return EXIT_OK


COMMANDS = {"edit": cmd_edit, "diff": cmd_diff, "spectrum": cmd_spectrum, "verify": cmd_verify,
            "ns-compare": cmd_ns_compare}


class _StderrFormatter(logging.Formatter):
    def format(self, record):
        return f"{record.levelname}: {record.getMessage()}"


def _setup_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_StderrFormatter())
    root = logging.getLogger("pome")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.verbose)
        return COMMANDS[args.command](args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (ConfigError, SelectionError) as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (ShapeMismatchError, RankError, NonFiniteError, ckpt.NotAMatrixError, ckpt.DtypeOverflowError) as exc:
        code, msg = EXIT_INPUT, str(exc)
    except (ckpt.CheckpointError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    except ConvergenceError as exc:
        code, msg = EXIT_VERIFY, str(exc)
    print(f"ERROR {code}: {msg}", file=sys.stderr)
    return code


def entry():
    sys.exit(main())
