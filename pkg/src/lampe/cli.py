"""``lampe`` command-line interface.

Exit codes: 0 success, 1 an invariant check failed, 2 usage or input error.
Errors are emitted on stderr as a single JSON object ``{"error", "message"}``.
Every run that writes files also writes ``manifest.json`` into ``--out``
listing each emitted file with its SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import pe_map, sigmoid_fit
from ._backend import apply_thread_limit
from .errors import ConfigError, ConfigParseError, LampeError
from .pe_map import MappingConfig, SelfExtendConfig
from .rope_attention import RotaryBasis, causal_rope_attention, random_batch
from .sigmoid_fit import SigmoidParams
from .three_pass import lampe_attention, verification_report

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
STRATEGIES = ("lampe", "self-extend", "adaptive-group")


class CliError(Exception):
    def __init__(self, code, message, exit_code=EXIT_USAGE, **extra):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class Run:
    """Tracks the files a command emits and writes the manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.files = []
        self.config_paths = []

    def path(self, name) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def emitted(self, path):
        self.files.append(Path(path))

    def write_text(self, name, text) -> Path:
        p = self.path(name)
        p.write_text(text)
        self.emitted(p)
        return p

    def finish(self):
        if not self.files:
            return
        entries = []
        for f in self.files:
            try:
                rel = str(f.resolve().relative_to(self.out.resolve()))
            except ValueError:
                rel = str(f)
            entries.append({"path": rel, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()})
        manifest = {
            "command": self.args.command,
            "config_paths": self.config_paths,
            "seed": self.args.seed,
            "files": sorted(entries, key=lambda e: e["path"]),
        }
        self.path("manifest.json").write_text(_dump(manifest))


def _load_params(args, n) -> SigmoidParams:
    if getattr(args, "params", None):
        return sigmoid_fit.load_params(args.params)
    L = sigmoid_fit.default_ceiling(n)
    a = args.a if args.a is not None else 1.0 / n
    return SigmoidParams(float(L), float(a), float(args.b))


# ---------------------------------------------------------------------------
# pe-matrix
# ---------------------------------------------------------------------------


def cmd_pe_matrix(args, run: Run) -> int:
    cfg = pe_map.load_config(args.config)
    run.config_paths.append(args.config)
    fmt = args.format or "csv"
    if fmt not in ("csv", "binary"):
        raise CliError("usage", f"pe-matrix supports --format csv or binary, not {fmt}")
    builder = pe_map.build_pe_matrix if args.kind == "formula" else pe_map.build_index_pe_matrix
    pe = builder(cfg)

    tri = pe.lower_triangle()
    if tri.min() < 0 or tri.max() > cfg.m - 1 or np.any(np.diag(pe.entries)):
        raise CliError("invariant_failed", "matrix entries outside [0, m-1]", EXIT_INVARIANT)

    if args.output:
        target = Path(args.output)
        target.parent.mkdir(parents=True, exist_ok=True)
    else:
        target = run.path("pe_matrix.csv" if fmt == "csv" else "pe_matrix.lpe")
    (pe_map.write_csv if fmt == "csv" else pe_map.write_binary)(pe, target)
    run.emitted(target)

    summary = {
        "mapping": "identity" if cfg.is_identity else "lampe",
        "kind": args.kind,
        "config": cfg.to_dict(),
        "distinct_values": int(np.unique(tri).size),
        "max_value": int(tri.max()),
        "region_pairs": pe_map.region_partition(cfg).counts(),
        "output": str(target),
        "format": fmt,
    }
    sys.stdout.write(_dump(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-sigmoid
# ---------------------------------------------------------------------------


def cmd_fit_sigmoid(args, run: Run) -> int:
    points = sigmoid_fit.read_points_csv(args.points)
    run.config_paths.append(args.points)
    if args.L is not None:
        L, source = float(args.L), "L"
    else:
        L, source = float(sigmoid_fit.default_ceiling(args.n)), "n"
    params = sigmoid_fit.fit_sigmoid(points, L)
    target = Path(args.output) if args.output else run.path("sigmoid_params.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    sigmoid_fit.save_params(params, target)
    run.emitted(target)
    report = {
        "params": params.to_dict(),
        "L": L,
        "L_source": source,
        "n": args.n,
        "predictions": {str(p): sigmoid_fit.mapping_length(p, params) for p in args.probe},
        "output": str(target),
    }
    sys.stdout.write(_dump(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _configs_from_file(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: invalid JSON: {exc}") from None
    items = data if isinstance(data, list) else [data]
    return [MappingConfig.from_dict(item) for item in items]


def sweep_configs(start, stop, step, n, params):
    """Configs for ``l`` in ``start..stop`` with ``s1 = s2 = l // 16``."""
    out = []
    for l in range(start, stop + 1, step):
        s = l // 16
        out.append(sigmoid_fit.config_for_length(l, n, params, s, s))
    return out


def _audit_matrix(path):
    pe = pe_map.read_matrix(path)
    mono = pe_map.verify_monotonicity(pe)
    tri = pe.lower_triangle()
    range_ok = bool(tri.min() >= 0 and tri.max() <= pe.m - 1 and not np.diag(pe.entries).any())
    checks = {"monotonicity": mono.ok, "range": range_ok}
    first = None
    if not mono.ok:
        first = {"check": "monotonicity", "at": list(mono.violation)}
    elif not range_ok:
        first = {"check": "range", "at": None}
    return {
        "matrix": str(path),
        "l": pe.l,
        "checks": checks,
        "ok": all(checks.values()),
        "counterexample": first,
    }


def cmd_verify(args, run: Run) -> int:
    configs = []
    for path in args.configs:
        configs.extend(_configs_from_file(path))
        run.config_paths.append(path)
    if args.sweep:
        params = _load_params(args, args.n)
        configs.extend(sweep_configs(args.sweep_start, args.sweep_stop, args.sweep_step, args.n, params))
    if not configs and not args.matrix:
        raise CliError("usage", "verify needs config files, --sweep, or --matrix")

    configs = sorted(set(configs), key=lambda c: (c.l, c.m, c.s1, c.s2, c.n or 0))
    reports = [pe_map.audit_config(cfg) for cfg in configs]
    reports += [_audit_matrix(p) for p in sorted(args.matrix)]
    all_ok = all(r["ok"] for r in reports)
    summary = {"ok": all_ok, "count": len(reports), "reports": reports}
    run.write_text("verify_report.json", _dump(summary))
    sys.stdout.write(_dump(summary))
    if not all_ok:
        bad = next(r for r in reports if not r["ok"])
        raise CliError(
            "invariant_failed",
            f"{bad['counterexample']['check']} check failed",
            EXIT_INVARIANT,
            report=bad,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# attn-check
# ---------------------------------------------------------------------------


def cmd_attn_check(args, run: Run) -> int:
    cfg = MappingConfig(args.l, args.m, args.s1, args.s2)
    basis = RotaryBasis(args.dim, args.base)
    batch = random_batch(args.seed, args.heads, args.l, args.dim)
    report = verification_report(batch, cfg, basis, timings=args.timings)
    if cfg.is_identity:
        plain, _ = causal_rope_attention(batch, basis)
        merged = lampe_attention(batch, cfg, basis)
        report["max_abs_error_vs_plain_rope"] = float(np.max(np.abs(merged.output - plain)))
    report["tolerance"] = args.tol
    report["seed"] = args.seed
    report["heads"] = args.heads
    report["head_dim"] = args.dim
    err = report["max_abs_error_vs_oracle"]
    ok = err <= args.tol and report["disjointness_ok"] and report["monotonicity_ok"]
    if cfg.is_identity:
        ok = ok and report["max_abs_error_vs_plain_rope"] <= args.tol
    report["pass"] = bool(ok)
    run.write_text("attn_report.json", _dump(report))
    sys.stdout.write(_dump(report))
    if not ok:
        raise CliError(
            "invariant_failed",
            f"max abs error {err:.3e} exceeds tolerance {args.tol:.3e}",
            EXIT_INVARIANT,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def strategy_curve(strategy, l, n, params, s1, s2, w, G) -> tuple[np.ndarray, int]:
    """Remapped position for every offset ``0..l-1`` and the mapping length used."""
    d = np.arange(l, dtype=np.int64)
    if strategy == "self-extend":
        group = G or max(1, -(-(l - w) // (n - w)))
        se = SelfExtendConfig(w, group, n)
        return pe_map.self_extend_curve(l, se), se.extended_window
    cfg = sigmoid_fit.config_for_length(l, n, params, min(s1, l // 4), min(s2, l // 4))
    if strategy == "adaptive-group":
        return (cfg.m * d) // l, cfg.m
    return pe_map.offset_curve(cfg), cfg.m


def group_size_by_decile(positions: np.ndarray) -> list[float]:
    _, inverse, counts = np.unique(positions, return_inverse=True, return_counts=True)
    sizes = counts[inverse]
    l = positions.size
    out = []
    for k in range(10):
        lo, hi = (k * l) // 10, ((k + 1) * l) // 10
        out.append(float(sizes[lo:hi].mean()) if hi > lo else float("nan"))
    return out


def cmd_compare(args, run: Run) -> int:
    n = args.n
    params = _load_params(args, n)
    s1 = args.s1 if args.s1 is not None else n // 16
    s2 = args.s2 if args.s2 is not None else n // 16
    w = args.w if args.w is not None else n // 4
    curves = ["strategy,l,offset,position"]
    stats = ["strategy,l,mapping_length,max_position,decile,mean_group_size"]
    summary = []
    for l in sorted(set(args.lengths)):
        for strategy in args.strategies:
            pos, size = strategy_curve(strategy, l, n, params, s1, s2, w, args.G)
            if np.any(np.diff(pos) < 0) or pos[0] != 0:
                raise CliError(
                    "invariant_failed", f"{strategy} curve is not monotone at l={l}", EXIT_INVARIANT
                )
            curves.extend(f"{strategy},{l},{d},{p}" for d, p in enumerate(pos.tolist()))
            for k, g in enumerate(group_size_by_decile(pos)):
                stats.append(f"{strategy},{l},{size},{int(pos.max())},{k},{g!r}")
            summary.append(
                {"strategy": strategy, "l": l, "max_position": int(pos.max()), "size": int(size)}
            )
    run.write_text("compare_curves.csv", "\n".join(curves) + "\n")
    run.write_text("compare_stats.csv", "\n".join(stats) + "\n")
    sys.stdout.write(_dump({"n": n, "params": params.to_dict(), "curves": summary}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_globals(p, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=default(0), help="u64 seed for random fixtures")
    p.add_argument("--out", default=default("lampe_out"), help="output directory")
    p.add_argument("--format", choices=("csv", "binary", "json"), default=default(None))


def _add_sigmoid_opts(p):
    p.add_argument("--params", help="sigmoid params JSON (overrides --a/--b)")
    p.add_argument("--a", type=float, default=None, help="sigmoid slope (default 1/n)")
    p.add_argument("--b", type=float, default=-0.5, help="sigmoid intercept")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lampe", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    _add_globals(common, suppress=True)

    p = sub.add_parser("pe-matrix", parents=[common], help="build and export a PE matrix")
    p.add_argument("config", help="MappingConfig JSON file")
    p.add_argument("--output", help="output file (default <out>/pe_matrix.{csv,lpe})")
    p.add_argument("--kind", choices=("formula", "index"), default="formula")

    p = sub.add_parser("fit-sigmoid", parents=[common], help="fit m(l) from observations")
    p.add_argument("points", help="CSV with input_length,optimal_mapping_length")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--L", type=float, help="curve ceiling")
    g.add_argument("--n", type=int, help="pretraining window; ceiling is floor(3n/4)")
    p.add_argument("--probe", type=int, nargs="*", default=[], help="lengths to predict m for")
    p.add_argument("--output", help="params JSON path (default <out>/sigmoid_params.json)")

    p = sub.add_parser("verify", parents=[common], help="run mapping invariant checks")
    p.add_argument("configs", nargs="*", help="config JSON files (object or list)")
    p.add_argument("--matrix", nargs="*", default=[], help="exported matrix files to check")
    p.add_argument("--sweep", action="store_true", help="add the l = start..stop sweep")
    p.add_argument("--sweep-start", type=int, default=16)
    p.add_argument("--sweep-stop", type=int, default=512)
    p.add_argument("--sweep-step", type=int, default=16)
    p.add_argument("--n", type=int, default=128, help="pretraining window for the sweep")
    _add_sigmoid_opts(p)

    p = sub.add_parser("attn-check", parents=[common], help="three-pass vs dense oracle")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--s1", type=int, required=True)
    p.add_argument("--s2", type=int, required=True)
    p.add_argument("--heads", "-H", type=int, default=2)
    p.add_argument("--dim", "-D", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--timings", action="store_true", help="record per-pass wall time")

    p = sub.add_parser("compare", parents=[common], help="mapping curves per strategy")
    p.add_argument("--lengths", type=int, nargs="+", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    p.add_argument("--s1", type=int)
    p.add_argument("--s2", type=int)
    p.add_argument("--w", type=int, help="self-extend local window (default n/4)")
    p.add_argument("--G", type=int, help="self-extend group size (default: smallest that fits l)")
    _add_sigmoid_opts(p)
    return parser


COMMANDS = {
    "pe-matrix": cmd_pe_matrix,
    "fit-sigmoid": cmd_fit_sigmoid,
    "verify": cmd_verify,
    "attn-check": cmd_attn_check,
    "compare": cmd_compare,
}


def _fail(code, message, **extra) -> None:
    payload = {"error": code, "message": message, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv=None) -> int:
    apply_thread_limit()
    try:
        args = build_parser().parse_args(argv)
        if not 0 <= args.seed < 2**64:
            raise CliError("usage", "--seed must be a u64")
        run = Run(args)
        status = COMMANDS[args.command](args, run)
        run.finish()
        return status
    except CliError as exc:
        if "run" in locals():
            run.finish()
        _fail(exc.code, str(exc), **exc.extra)
        return exc.exit_code
    except (LampeError, ConfigError, OSError) as exc:
        _fail(getattr(exc, "code", "io_error"), str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
