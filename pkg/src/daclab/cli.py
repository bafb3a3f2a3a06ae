"""Command-line entry point: ``run``, ``verify``, ``compare`` and ``spectrum``.

Exit codes: ``run`` returns 0, or 2 when any seed diverged; ``verify``
returns 0 on PASS and 1 otherwise; ``compare`` returns 0 for identical
traces, 1 when they differ and 2 on schema mismatch.  Usage and config
errors exit with 2 as well.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, verify
from .config import ExperimentConfig, load_config, serialize
from .engine import TRACE_COLUMNS, run
from .errors import DaclabError
from .graph import laplacian_spectrum, make_schedule, period_average
from .problems import QuadraticProblem

logger = logging.getLogger(__name__)

MODE_COLUMNS = ("iter", "basis", "mode_index", "eigenvalue", "energy")


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row) + "\n")


def write_trace(path, records) -> None:
    _write_rows(Path(path), TRACE_COLUMNS, ([r[c] for c in TRACE_COLUMNS] for r in records))


def write_modes(path, mode_rows) -> None:
    _write_rows(Path(path), MODE_COLUMNS, mode_rows)


def model_checksum(x) -> str:
    data = np.ascontiguousarray(np.asarray(x, dtype="<f8")).tobytes()
    return "sha256:" + hashlib.sha256(data).hexdigest()


def write_summary(path, problem, result) -> None:
    X = result.ensemble.X
    finite = bool(np.all(np.isfinite(X)))
    center = problem.loss(result.deployed) if finite else float("nan")
    radius = analysis.radius_sq(analysis.consensus_error(X)) if finite else float("nan")
    lines = [
        f"final_center_loss = {format_value(center)}",
        f"final_radius_sq = {format_value(radius)}",
        f"final_top_eig = {format_value(result.final_top_eig) or 'none'}",
        f"deployed_checksum = {model_checksum(result.deployed)}",
        f"diverged = {int(result.diverged)}",
    ]
    if result.diverged_at is not None:
        lines.append(f"diverged_at = {result.diverged_at}")
    for key in sorted(result.final_metrics):
        lines.append(f"{key} = {format_value(result.final_metrics[key])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _new_run_dir(base: Path, stem: str, overwrite: bool) -> Path:
    if overwrite:
        path = base / stem
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = base / f"{stem}-{stamp}"
    suffix = 1
    while path.exists():
        path = base / f"{stem}-{stamp}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def run_command(config: ExperimentConfig, out_dir, *, threads=None):
    """Run every seed of ``config`` into ``out_dir/seed-k``; returns ``(exit_code, dirs)``."""
    out_dir = Path(out_dir)
    code, dirs = 0, []
    for k in range(config["repeat"]):
        cfg = config.replace(seed=config["seed"] + k, repeat=1)
        seed_dir = out_dir / f"seed-{k}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "resolved.cfg").write_text(serialize(cfg), encoding="utf-8")
        problem = cfg.build_problem()
        result = run(cfg.run_config(), problem, threads=threads)
        write_trace(seed_dir / "trace.csv", result.records)
        if cfg["metrics.modes"]:
            write_modes(seed_dir / "modes.csv", result.mode_rows)
        write_summary(seed_dir / "summary.txt", problem, result)
        if result.diverged:
            logger.error("seed %d diverged at round %s", cfg["seed"], result.diverged_at)
            code = 2
        dirs.append(seed_dir)
    return code, dirs


# ---------------------------------------------------------------------------
# compare


@dataclass
class CompareReport:
    columns: list
    max_abs_diff: dict
    first_differing_row: int | None  # 0-based data row
    first_differing_iter: str | None
    rows_a: int
    rows_b: int

    @property
    def identical(self) -> bool:
        return self.first_differing_row is None and self.rows_a == self.rows_b

    def lines(self):
        out = [f"{c} {format_value(self.max_abs_diff[c])}" for c in self.columns]
        out.append(f"rows {self.rows_a} {self.rows_b}")
        out.append(f"first_differing_iter {self.first_differing_iter if self.first_differing_iter is not None else 'none'}")
        return out


class SchemaMismatchError(DaclabError):
    pass


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatchError(f"{path}: empty file")
    return rows[0], rows[1:]


def _as_float(text):
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        return text


def _cell_diff(a: str, b: str) -> float:
    if a == b:
        return 0.0
    fa, fb = _as_float(a), _as_float(b)
    if isinstance(fa, float) and isinstance(fb, float):
        if math.isnan(fa) and math.isnan(fb):
            return 0.0
        return abs(fa - fb)
    return math.inf


def compare_traces(path_a, path_b) -> CompareReport:
    head_a, rows_a = _read_csv(path_a)
    head_b, rows_b = _read_csv(path_b)
    if head_a != head_b:
        raise SchemaMismatchError(f"column headers differ: {head_a} vs {head_b}")
    diffs = dict.fromkeys(head_a, 0.0)
    first = None
    for i in range(max(len(rows_a), len(rows_b))):
        if i >= len(rows_a) or i >= len(rows_b):
            if first is None:
                first = i
            continue
        ra, rb = rows_a[i], rows_b[i]
        if len(ra) != len(head_a) or len(rb) != len(head_a):
            raise SchemaMismatchError(f"row {i + 1} has the wrong number of fields")
        if ra != rb and first is None:
            first = i
        for col, a, b in zip(head_a, ra, rb):
            diffs[col] = max(diffs[col], _cell_diff(a, b))
    first_iter = None
    if first is not None:
        src = rows_a if first < len(rows_a) else rows_b
        key = head_a.index("iter") if "iter" in head_a else 0
        first_iter = src[first][key]
    return CompareReport(head_a, diffs, first, first_iter, len(rows_a), len(rows_b))


# ---------------------------------------------------------------------------
# verify


def _require_quadratic(problem, harness):
    if not isinstance(problem, QuadraticProblem):
        raise DaclabError(f"harness '{harness}' needs problem = quadratic")
    return problem


def build_harness(harness: str, config: ExperimentConfig):
    """Run one harness with parameters drawn from ``config``; returns its report."""
    v = config.as_dict()
    W = period_average(make_schedule(v["topology"], v["workers"]))
    seed = v["seed"]
    if harness == "stability":
        kwargs = {}
        if v["verify.gammas"]:
            kwargs["gammas"] = v["verify.gammas"]
        if v["verify.lams"]:
            kwargs["lams"] = v["verify.lams"]
        if v["verify.alphas"]:
            kwargs["alphas"] = v["verify.alphas"]
        if v["verify.steps"]:
            kwargs["steps"] = v["verify.steps"]
        return verify.verify_mode_stability(W, seed=seed, **kwargs)
    problem = _require_quadratic(config.build_problem(), harness)
    if harness == "radius":
        alphas = v["verify.alphas"] or tuple(np.linspace(0.04, 0.1, 5))
        ps = v["verify.ps"] or (0, 1, 2, 3, 4, 5)
        return verify.verify_radius_law(problem, W, alphas, ps, v["ac.g0"], seed=seed)
    if harness == "alignment":
        alpha_max = v["lr.peak"]
        alpha_tail = v["verify.alpha"] or 0.5 * alpha_max
        kwargs = {"tail_steps": v["verify.steps"]} if v["verify.steps"] else {}
        return verify.verify_alignment(problem, W, alpha_max=alpha_max, alpha_tail=alpha_tail, p=v["ac.p"],
                                       seeds=tuple(range(seed, seed + v["verify.seeds"])), **kwargs)
    if harness == "envelope":
        return verify.verify_envelope(problem, config.run_config())
    if harness == "tilt":
        alpha = v["verify.alpha"] or v["lr.peak"]
        gamma = v["verify.gamma"] or v["ac.g0"] or 1.0
        kwargs = {"steps": v["verify.steps"]} if v["verify.steps"] else {}
        return verify.verify_tilt(problem, v["topology"], v["workers"], alpha, gamma, seed=seed, **kwargs)
    raise DaclabError(f"unknown harness {harness!r}; expected one of {verify.HARNESSES}")


# ---------------------------------------------------------------------------
# entry point


def _cmd_run(args) -> int:
    config = load_config(args.config)
    base = Path(args.output_dir or config["output_dir"])
    out = _new_run_dir(base, Path(args.config).stem, args.overwrite)
    code, dirs = run_command(config, out, threads=args.threads)
    for d in dirs:
        print(d)
    return code


def _cmd_verify(args) -> int:
    config = load_config(args.config)
    report = build_harness(args.harness, config)
    base = Path(args.output_dir or config["output_dir"])
    out = _new_run_dir(base, f"verify-{args.harness}", args.overwrite)
    verify.write_report(report, out / "report.csv")
    print(report.verdict())
    return 0 if report.passed else 1


def _cmd_compare(args) -> int:
    try:
        report = compare_traces(args.a, args.b)
    except SchemaMismatchError as exc:
        print(f"error: schema mismatch: {exc}", file=sys.stderr)
        return 2
    for line in report.lines():
        print(line)
    return 0 if report.identical else 1


def _cmd_spectrum(args) -> int:
    config = load_config(args.config)
    op = period_average(make_schedule(config["topology"], config["workers"]))
    spec = laplacian_spectrum(op)
    tag = " (period-averaged)" if op.approximate else ""
    print(f"laplacian{tag}: " + " ".join(format_value(float(x)) for x in spec.eigenvalues))
    print(f"lambda_min_w: {format_value(spec.lambda_min_w)}")
    if config["problem"] == "quadratic":
        problem = config.build_problem()
        print("hessian: " + " ".join(format_value(float(x)) for x in problem.eigenvalues))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daclab", description="Decentralized adaptive-consensus lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.add_argument("--overwrite", action="store_true", help="reuse <output_dir>/<config stem> instead of a new timestamped directory")
    p.add_argument("--threads", type=int, help="gradient worker threads (default: DACLAB_THREADS or 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="run a verification harness")
    p.add_argument("harness", choices=verify.HARNESSES)
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("compare", help="diff two trace.csv files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("spectrum", help="print Laplacian (and Hessian) eigenvalues")
    p.add_argument("config")
    p.set_defaults(func=_cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DaclabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
