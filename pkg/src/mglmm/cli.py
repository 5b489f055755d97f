"""Batch command line: ``mglmm fit | simulate | describe | compare``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.  On
failure a one-line JSON error record is written to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .covariance import Z_CRIT
from .diffcheck import NonFiniteError
from .dispersion import describe
from .families import CmpSolveError, CmpTruncationError
from .fitting import FitError, fit_chain, staged_fit
from .model import Family, ModelError, Variant
from .simulate import simulate

log = logging.getLogger("mglmm")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# text rendering
# ---------------------------------------------------------------------------


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, row in enumerate(rows):
        cells = [c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _csv(rows: list[list[str]]) -> str:
    buf = _io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fmt(v, digits: int = 4) -> str:
    return "NA" if v is None else f"{v:.{digits}f}"


def render_fit(doc: dict) -> str:
    spec = doc["spec"]
    head = (
        f"{spec['family']} / {spec['variant']}  N={doc['n_subjects']}  np={doc['np']}\n"
        f"logLik={doc['loglik']:.3f}  AIC={doc['aic']:.3f}  BIC={doc['bic']:.3f}  "
        f"converged={doc['converged']}  SE={'yes' if doc['se_all_available'] else 'no'}\n\n"
    )
    rows = [["parameter", "estimate", "SE"]]
    for p in doc["parameters"]:
        rows.append([p["name"], _fmt(p["estimate"]), _fmt(p["se"])])
    sig = doc["sigma"]
    k = len(sig["responses"])
    srows = [["", *sig["responses"]]]
    for i, r in enumerate(sig["responses"]):
        row = [r]
        for j in range(k):
            if j < i:
                row.append("")
            elif j == i:
                row.append(f"{sig['sd'][i]:.3f}" + ("*" if sig["sd_significant"][i] else ""))
            else:
                row.append(f"{sig['corr'][i][j]:.3f}" + ("*" if sig["corr_significant"][i][j] else ""))
        srows.append(row)
    note = f"random-effect SDs on the diagonal, correlations above; * |est/SE| > {Z_CRIT}\n"
    return head + _align(rows) + "\n" + _align(srows) + note


def compare_rows(docs: Sequence[dict], labels: Sequence[str]) -> list[list[str]]:
    """One row per fit sorted by AIC; ties keep input order."""
    entries = []
    for pos, (doc, label) in enumerate(zip(docs, labels)):
        for key in ("np", "aic", "bic", "loglik"):
            if key not in doc:
                raise io.DataError(f"{label}: result document lacks {key!r}")
        entries.append((float(doc["aic"]), pos, doc, label))
    entries.sort(key=lambda e: (e[0], e[1]))
    rows = [["Model", "np", "AIC", "BIC", "Loglik", "SE"]]
    for _, _, doc, label in entries:
        se = doc.get("se_all_available")
        rows.append(
            [label, str(int(doc["np"])), f"{doc['aic']:.1f}", f"{doc['bic']:.1f}", f"{doc['loglik']:.1f}",
             "✓" if se else "✗"]
        )
    return rows


def _label(doc: dict, fallback: str) -> str:
    if "label" in doc:
        return str(doc["label"])
    spec = doc.get("spec")
    if spec:
        return f"{spec['variant']} {spec['family']}"
    return fallback


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _chain_path(out: str, family: Family) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}.{family.value}{p.suffix or '.json'}")


def cmd_fit(args) -> int:
    cfg = io.load_run_config(args.config)
    data_path = args.data or cfg.data_path
    if not data_path:
        raise UsageError("no data file given (use --data or 'data' in the config)")
    # echo the file actually read so the result document can be refitted from its own config
    cfg = dataclasses.replace(cfg, data_path=str(data_path))
    out = args.out or cfg.out_path
    threads = args.threads if args.threads is not None else cfg.fit.threads
    spec = cfg.spec
    if args.chain:
        families = [Family.parse(f) for f in args.chain.split(",") if f.strip()]
        if not families:
            raise UsageError("--chain needs at least one family")
        for fam in families:
            if spec.variant is Variant.FIXED_DISPERSION and not fam.has_dispersion:
                log.warning("fixed dispersion does not apply to %s; fitting the full model", fam.value)
        data, table = io.load_csv(data_path, spec, cfg.id_column)
        results = fit_chain(data, spec, families, seed=cfg.fit.seed, threads=threads,
                            plan_kw=dict(gtol=cfg.fit.gtol, ftol_rel=cfg.fit.ftol_rel, max_iter=cfg.fit.max_iter,
                                         bounds=dict(cfg.fit.bounds)))
        for fam, res in zip(families, results):
            doc = io.result_document(res, cfg, table)
            doc["chain"] = [f.value for f in families]
            if out:
                io.write_json(doc, _chain_path(out, fam))
            else:
                sys.stdout.write(io.dumps(doc) if args.format == "json" else render_fit(doc))
        if out and args.format == "text":
            sys.stdout.write("".join(render_fit(io.result_document(r)) for r in results))
        return EXIT_OK

    data, table = io.load_csv(data_path, spec, cfg.id_column)
    result = staged_fit(data, spec, cfg.fit.plan(), threads=threads)
    doc = io.result_document(result, cfg, table)
    if out:
        io.write_json(doc, out)
        if args.format == "text":
            sys.stdout.write(render_fit(doc))
    else:
        sys.stdout.write(io.dumps(doc) if args.format == "json" else render_fit(doc))
    return EXIT_OK


def cmd_simulate(args) -> int:
    raw = io.read_toml(args.config)
    if args.n is not None:
        raw["n"] = args.n
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg, output = io.sim_config(raw)
    out = args.out or output.get("data")
    if not out:
        raise UsageError("no output file given (use --out or [output] data)")
    truth = args.truth or output.get("truth") or str(Path(out).with_suffix(".truth.json"))
    data = simulate(cfg)
    io.write_csv(data, out)
    io.write_json(io.truth_document(cfg), truth)
    log.info("wrote %d subjects to %s and the truth to %s", data.n, out, truth)
    return EXIT_OK


def cmd_describe(args) -> int:
    responses = [r.strip() for r in args.responses.split(",") if r.strip()]
    if not responses:
        raise UsageError("--responses needs at least one column")
    table = io.read_table(args.data, responses, integer_columns=responses)
    Y = np.column_stack([table.columns[r] for r in responses])
    summary = describe(Y, responses, n_boot=args.n_boot, seed=args.seed)
    if args.format == "json":
        doc = {**summary.to_dict(), "rows_read": table.n_read, "rows_dropped": table.n_dropped}
        _emit(io.dumps(doc), args.out)
    elif args.format == "csv":
        _emit(_csv(summary.rows()), args.out)
    else:
        _emit(_align(summary.rows()), args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    docs = [io.read_json(p) for p in args.results]
    labels = [_label(d, Path(p).stem) for d, p in zip(docs, args.results)]
    rows = compare_rows(docs, labels)
    _emit(_csv(rows) if args.format == "csv" else _align(rows), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mglmm", description="Multivariate count mixed models fitted by Laplace approximation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model to a CSV file")
    f.add_argument("--data", help="CSV with one row per subject")
    f.add_argument("--config", required=True, help="TOML run configuration")
    f.add_argument("--out", help="result JSON path (a name stem with --chain)")
    f.add_argument("--chain", help="comma-separated families fitted in order, e.g. poisson,nb,cmp")
    f.add_argument("--threads", type=int, help="worker threads (default: config, MGLMM_THREADS, all cores)")
    f.add_argument("--format", choices=("json", "text"), default="json", help="stdout rendering")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="draw a dataset from a simulation config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="dataset CSV path")
    s.add_argument("--truth", help="truth sidecar path (default <out>.truth.json)")
    s.add_argument("--n", type=int, help="override the number of subjects")
    s.add_argument("--seed", type=int, help="override the seed")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("describe", help="dispersion summary of count columns")
    d.add_argument("--data", required=True)
    d.add_argument("--responses", required=True, help="comma-separated column names")
    d.add_argument("--format", choices=("text", "csv", "json"), default="text")
    d.add_argument("--n-boot", type=int, default=1000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_describe)

    c = sub.add_parser("compare", help="goodness-of-fit table over result documents")
    c.add_argument("results", nargs="+")
    c.add_argument("--format", choices=("text", "csv"), default="text")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def _fail(code: int, exc: BaseException) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(record) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ModelError, io.ConfigError, io.DataError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (FitError, NonFiniteError, CmpTruncationError, CmpSolveError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
