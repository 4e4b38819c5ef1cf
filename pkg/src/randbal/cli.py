"""Command-line interface.

``randbal balance``         balance report for an observed assignment
``randbal design-compare``  balance ratios of candidate stratifications
``randbal study``           size or power simulation from a JSON spec

Exit codes: 0 success, 1 input or usage error, 2 degenerate design.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .balance import balance_table
from .data import (
    BalanceError,
    DegenerateBlockWarning,
    DegenerateDesignError,
    InputError,
    build_design,
    interaction_expand,
    read_cluster_csv,
    read_unit_csv,
)
from .experiments.design_eval import compare_stratifications
from .experiments.power import SCHEMA as POWER_SCHEMA
from .experiments.power import PowerStudySpec, run_power_study
from .experiments.size import SCHEMA as SIZE_SCHEMA
from .experiments.size import SizeStudySpec, run_size_study
from .omnibus import compute_d2
from .serialize import dumps, fmt, write_csv

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 1, 2


def _covariate_list(text):
    if text is None:
        return None
    return [c.strip() for c in text.split(",") if c.strip()]


def _load(args, covariates):
    reader = read_unit_csv if args.format == "unit" else read_cluster_csv
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateBlockWarning)
        try:
            clusters, X = reader(args.input, covariates)
            design = build_design(clusters)
        finally:
            # report excluded blocks even when none are left
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
    return clusters, X, design


def _render_table(report) -> str:
    head = f"{'covariate':<24}{'d':>14}{'sd(d)':>12}{'z':>9}{'p':>9}{'mid-p':>9}"
    lines = [head, "-" * len(head)]
    for r in report["covariates"]:
        sd = math.sqrt(r["var_d"]) if r["var_d"] > 0 else 0.0
        z = "--" if r["z_score"] is None else f"{r['z_score']:.3f}"
        p = "--" if r["p_normal"] is None else f"{r['p_normal']:.3f}"
        mp = f"{r['mid_p']['p']:.3f}" if "mid_p" in r else ""
        lines.append(f"{r['covariate']:<24}{r['d']:>14.5g}{sd:>12.5g}{z:>9}{p:>9}{mp:>9}")
    o = report["omnibus"]
    p = "--" if o["p_chi2"] is None else f"{o['p_chi2']:.4f}"
    lines.append(f"\nd2 = {o['d2']:.4f} on {o['df']} df, chi-square p = {p}")
    if "mid_p" in o:
        lines.append(f"d2 randomization mid-p = {o['mid_p']['p']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_balance(args) -> int:
    if args.mode == "mc" and args.seed is None:
        raise InputError("--mode mc needs --seed")
    if args.mode == "mc" and args.reps is None:
        raise InputError("--mode mc needs --reps")
    covs = _covariate_list(args.covariates)
    _, X, design = _load(args, covs)
    if args.interactions:
        X = interaction_expand(X)
    sizes = dict(zip(design.cluster_ids, design.m))
    X = X.with_column("m", [sizes.get(c, 0.0) for c in X.cluster_ids], first=True)
    Xv = design.align(X)
    rows = balance_table(design, Xv, X.names, args.weights, args.mode, args.reps, args.seed,
                         args.alternative)
    omni = compute_d2(design, design.z, Xv, args.weights, args.mode, args.reps, args.seed)
    report = {
        "version": __version__,
        "config": {
            "command": "balance", "input": str(args.input), "format": args.format,
            "covariates": list(X.names), "weights": args.weights, "mode": args.mode,
            "reps": args.reps, "interactions": bool(args.interactions),
            "alternative": args.alternative,
        },
        "seed": args.seed,
        "design": design.summary(),
        "covariates": [r.as_dict() for r in rows],
        "omnibus": omni.as_dict(),
    }
    text = dumps(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.table:
        sys.stdout.write(_render_table(report))
    elif not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def _candidate_labels(path, columns):
    """Block label per cluster for each candidate column, checked for consistency."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise InputError(f"{path}: candidate column(s) not found: {', '.join(missing)}")
        labels: dict = {c: {} for c in columns}
        for row in reader:
            cid = row["cluster_id"].strip()
            for c in columns:
                v = row[c].strip()
                prev = labels[c].setdefault(cid, v)
                if prev != v:
                    raise InputError(f"{path}: line {reader.line_num}: cluster {cid!r} has "
                                     f"conflicting {c!r} labels {prev!r} and {v!r}")
    return labels


def cmd_design_compare(args) -> int:
    cands = _covariate_list(args.candidates) or []
    if not cands:
        raise InputError("--candidates needs at least one column")
    covs = _covariate_list(args.covariates)
    reader = read_unit_csv if args.format == "unit" else read_cluster_csv
    if covs is None:
        with open(args.input, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
        fixed = {"cluster_id", "block_id", "z"} | ({"m"} if args.format == "cluster" else set())
        covs = [h for h in header if h not in fixed and h not in cands]
    clusters, X = reader(args.input, covs)
    labels = _candidate_labels(args.input, cands)
    ids = X.cluster_ids
    m = np.array([c.m for c in clusters], dtype=np.float64)
    if args.treated_fraction is not None:
        fraction = args.treated_fraction
        if not 0 < fraction < 1:
            raise InputError("--treated-fraction must lie in (0, 1)")
    else:
        fraction = sum(c.z for c in clusters) / len(clusters)
    candidates = {"none": ["all"] * len(ids)}
    for c in cands:
        candidates[c] = [labels[c][cid] for cid in ids]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateBlockWarning)
        try:
            table = compare_stratifications(candidates, m, X.values, X.names, fraction=fraction)
        finally:
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
    print("note: ratios are s.d.(d) over the s.d. of x / m_bar, with m_bar the mean cluster size "
          "over all clusters, so every candidate shares one scale", file=sys.stderr)
    header = ["candidate"] + list(table.covariates)
    if args.out:
        write_csv(args.out, header, table.rows())
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in table.rows():
            w.writerow([r[0]] + [fmt(v) for v in r[1:]])
    return EXIT_OK


def _pointer(error) -> str:
    return "/" + "/".join(str(p) for p in error.absolute_path)


def load_study_spec(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("kind") not in ("size", "power"):
        raise InputError(f"{path}: /kind: must be \"size\" or \"power\"")
    schema = SIZE_SCHEMA if doc["kind"] == "size" else POWER_SCHEMA
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise InputError("\n".join(f"{path}: {_pointer(e)}: {e.message}" for e in errors))
    if doc["kind"] == "size":
        return SizeStudySpec.from_dict(doc)
    return PowerStudySpec.from_dict(doc)


def cmd_study(args) -> int:
    spec = load_study_spec(args.spec)
    outdir = Path(args.out or ".")
    if isinstance(spec, SizeStudySpec):
        result = run_size_study(spec)
        files = result.write(outdir)
        for r in result.table():
            print(f"{r['test']:<10} nominal {r['nominal']:<6g} size {r['size']:.4f} "
                  f"(se {r['stderr']:.4f}, failures {r['failures']})")
    else:
        result = run_power_study(spec)
        files = result.write(outdir)
        for r in result.rows:
            print(f"beta {r['beta']:<8g} {r['weights']:<12} delta {r['delta_hat']:.3f} "
                  f"theory {r['theory']:.4f} power {r['power']:.4f} (se {r['stderr']:.4f})")
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; exit code 2 is reserved for degenerate designs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="randbal", description="Randomization tests of covariate balance.")
    p.add_argument("--version", action="version", version=f"randbal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--input", required=True, help="CSV file")
        sp.add_argument("--format", choices=["unit", "cluster"], default="cluster")
        sp.add_argument("--covariates", help="comma-separated covariate columns (default: all)")

    b = sub.add_parser("balance", help="balance report for the observed assignment")
    data_args(b)
    b.add_argument("--weights", choices=["harmonic", "equal", "block-size", "treated-size"],
                   default="harmonic")
    b.add_argument("--mode", choices=["normal", "exact", "mc"], default="normal")
    b.add_argument("--reps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--alternative", choices=["two-sided", "greater", "less"], default="two-sided")
    b.add_argument("--interactions", action="store_true", help="add pairwise unit-level products")
    b.add_argument("--out", help="write the JSON report here")
    b.add_argument("--table", action="store_true", help="print a readable table instead of JSON")
    b.set_defaults(func=cmd_balance)

    d = sub.add_parser("design-compare", help="compare candidate stratifications")
    data_args(d)
    d.add_argument("--candidates", required=True, help="comma-separated block-label columns")
    d.add_argument("--treated-fraction", type=float, help="default: observed fraction treated")
    d.add_argument("--out", help="write the CSV here")
    d.set_defaults(func=cmd_design_compare)

    s = sub.add_parser("study", help="run a size or power study")
    s.add_argument("spec", help="JSON study specification")
    s.add_argument("--out", help="output directory (default: current)")
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DegenerateDesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (BalanceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
