"""CSV data, TOML run configuration, and JSON result documents.

Result documents are plain JSON.  Floats are written with Python's shortest
round-trip representation, so reading a document back gives the same bits.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .fitting import FTOL_REL, GTOL, MAX_ITER, SUBSAMPLE_SIZE, Algorithm, FitPlan, FitResult, Stage
from .model import Dataset, ModelError, ModelSpec, NaturalParams, build_spec
from .simulate import SimConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

MISSING = {"", "na", "nan", "null", "."}
RESULT_FORMAT = "mglmm-result"
TRUTH_FORMAT = "mglmm-truth"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed input file."""


class ConfigError(ValueError):
    """Invalid configuration."""


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Table:
    """Selected columns of a CSV after listwise deletion."""

    columns: dict[str, np.ndarray]
    n_read: int
    n_dropped: int
    ids: np.ndarray | None = None


def _parse_number(text: str, line: int, column: str, integer: bool) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {line}, column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {line}, column {column!r}: value {text!r} is not finite")
    if integer and (value < 0 or value != math.floor(value)):
        raise DataError(f"row {line}, column {column!r}: count {text!r} is not a non-negative integer")
    return value


def read_table(
    path: str | Path,
    columns: Iterable[str],
    integer_columns: Iterable[str] = (),
    id_column: str | None = None,
) -> Table:
    """Read ``columns`` from a headed, comma-separated UTF-8 file.

    Rows with a missing value in any requested column are dropped (the count
    is logged); other columns are ignored.  Row numbers in error messages are
    file line numbers.
    """
    columns = list(dict.fromkeys(columns))
    integer = set(integer_columns)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        pos = {h: i for i, h in enumerate(header)}
        wanted = columns + ([id_column] if id_column and id_column not in columns else [])
        for c in wanted:
            if c not in pos:
                raise DataError(f"{path}: column {c!r} not found in header")
        values: dict[str, list[float]] = {c: [] for c in columns}
        ids: list[str] = []
        n_read = n_dropped = 0
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            line = reader.line_num
            n_read += 1
            if len(row) != len(header):
                raise DataError(f"row {line}: expected {len(header)} fields, found {len(row)}")
            cells = {c: row[pos[c]].strip() for c in wanted}
            if any(cells[c].lower() in MISSING for c in wanted):
                n_dropped += 1
                continue
            for c in columns:
                values[c].append(_parse_number(cells[c], line, c, c in integer))
            if id_column:
                ids.append(cells[id_column])
    if n_read == 0:
        raise DataError(f"{path}: no data rows")
    if n_dropped:
        log.info("dropped %d of %d rows with missing values", n_dropped, n_read)
    cols = {c: np.array(v, dtype=float) for c, v in values.items()}
    return Table(cols, n_read, n_dropped, np.array(ids) if id_column else None)


def load_csv(path: str | Path, spec: ModelSpec, id_column: str | None = None) -> tuple[Dataset, Table]:
    """Dataset for ``spec`` from a CSV file (listwise deletion over used columns)."""
    used = list(spec.responses) + list(spec.covariate_columns)
    table = read_table(path, used, integer_columns=spec.responses, id_column=id_column)
    n = len(table.columns[used[0]])
    if n < 2:
        raise DataError(f"{path}: fewer than two complete rows")
    Y = np.column_stack([table.columns[r] for r in spec.responses]).astype(np.int64)
    ids = table.ids if table.ids is not None else np.arange(1, n + 1)
    data = Dataset(spec=spec, subject_id=ids, Y=Y, columns={c: table.columns[c] for c in spec.covariate_columns})
    return data, table


def write_csv(data: Dataset, path: str | Path, id_column: str = "id") -> None:
    spec = data.spec
    names = [id_column, *spec.responses, *spec.covariate_columns]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(data.n):
            row = [str(data.subject_id[i])]
            row += [str(int(v)) for v in data.Y[i]]
            row += [repr(float(data.columns[c][i])) for c in spec.covariate_columns]
            w.writerow(row)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_toml(path: str | Path) -> dict:
    try:
        with Path(path).open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _stage_from(item: Any, subsample: int, seed: int) -> Stage:
    """``"port"``, ``"bfgs"``, ``"subsample:port"`` or a table with
    ``algorithm`` and optional ``subsample``/``seed``."""
    if isinstance(item, Mapping):
        sub = item.get("subsample")
        return Stage(Algorithm.parse(item["algorithm"]), None if sub is None else int(sub), int(item.get("seed", seed)))
    text = str(item).strip().lower()
    if ":" in text:
        scope, alg = text.split(":", 1)
        if scope != "subsample":
            raise ConfigError(f"unknown stage scope {scope!r}")
        return Stage(Algorithm.parse(alg), subsample, seed)
    return Stage(Algorithm.parse(text))


@dataclass(frozen=True)
class FitSettings:
    seed: int = 0
    subsample: int = SUBSAMPLE_SIZE
    stages: tuple[Stage, ...] | None = None
    gtol: float = GTOL
    ftol_rel: float = FTOL_REL
    max_iter: int = MAX_ITER
    bounds: dict = field(default_factory=dict)
    threads: int | None = None

    def plan(self, warm_start_from: FitResult | None = None) -> FitPlan:
        kw = dict(gtol=self.gtol, ftol_rel=self.ftol_rel, max_iter=self.max_iter, bounds=dict(self.bounds),
                  warm_start_from=warm_start_from)
        if self.stages is None:
            plan = FitPlan.default(seed=self.seed, **kw)
            stages = tuple(Stage(s.algorithm, self.subsample if s.subsample else None, s.seed) for s in plan.stages)
            return FitPlan(stages=stages, **kw)
        return FitPlan(stages=self.stages, **kw)

    def echo(self) -> dict:
        """Settings that determine the result (the thread count does not)."""
        return {
            "seed": self.seed,
            "subsample": self.subsample,
            "stages": None if self.stages is None else [s.to_dict() for s in self.stages],
            "gtol": self.gtol,
            "ftol_rel": self.ftol_rel,
            "max_iter": self.max_iter,
            "bounds": {k: list(v) for k, v in self.bounds.items()},
        }


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    fit: FitSettings
    data_path: str | None = None
    id_column: str | None = None
    out_path: str | None = None

    def echo(self) -> dict:
        return {
            "data": self.data_path,
            "id_column": self.id_column,
            "model": self.spec.to_dict(),
            "fit": self.fit.echo(),
        }


def fit_settings(block: Mapping) -> FitSettings:
    seed = int(block.get("seed", 0))
    subsample = int(block.get("subsample", SUBSAMPLE_SIZE))
    stages = block.get("stages")
    if stages is not None:
        stages = tuple(_stage_from(s, subsample, seed) for s in stages)
    bounds = {}
    for key, val in dict(block.get("bounds", {})).items():
        if not isinstance(val, (list, tuple)) or len(val) != 2:
            raise ConfigError(f"bounds for {key!r} must be [lo, hi]")
        bounds[key] = (float(val[0]), float(val[1]))
    threads = block.get("threads")
    settings = FitSettings(
        seed=seed,
        subsample=subsample,
        stages=stages,
        gtol=float(block.get("gtol", GTOL)),
        ftol_rel=float(block.get("ftol_rel", FTOL_REL)),
        max_iter=int(block.get("max_iter", MAX_ITER)),
        bounds=bounds,
        threads=None if threads is None else int(threads),
    )
    if settings.gtol <= 0 or settings.ftol_rel <= 0 or settings.max_iter < 1:
        raise ConfigError("tolerances must be positive")
    settings.plan()  # validates stages and bounds early
    return settings


def run_config(raw: Mapping) -> RunConfig:
    """Validate a parsed run configuration.

    Top-level keys: ``data``, ``id_column``, ``out``; tables ``[model]``
    (see ``build_spec``) and ``[fit]``.
    """
    if "model" not in raw:
        raise ConfigError("configuration needs a [model] table")
    try:
        spec = build_spec(raw["model"])
        fit = fit_settings(raw.get("fit", {}))
    except (ModelError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(spec, fit, raw.get("data"), raw.get("id_column"), raw.get("out"))


def load_run_config(path: str | Path) -> RunConfig:
    return run_config(read_toml(path))


def sim_config(raw: Mapping) -> tuple[SimConfig, dict]:
    """Simulation setup from a parsed configuration.

    Keys: ``n``, ``seed``, ``covariate_law`` (one law or a table per
    covariate), ``[model]``, and ``[truth]`` with ``beta`` (table per
    response), ``disp``, ``sd`` and either ``corr`` (k x k) or ``rho`` (one
    common correlation).  Returns the config and the ``[output]`` table.
    """
    try:
        spec = build_spec(raw["model"])
        truth = raw["truth"]
        k = spec.k
        beta_block = truth["beta"]
        if isinstance(beta_block, Mapping):
            beta = tuple(np.array(beta_block[r], dtype=float) for r in spec.responses)
        else:
            beta = tuple(np.array(b, dtype=float) for b in beta_block)
        sd = np.broadcast_to(np.asarray(truth["sd"], dtype=float), (k,)).copy()
        if "corr" in truth:
            corr = np.array(truth["corr"], dtype=float)
        else:
            corr = np.full((k, k), float(truth.get("rho", 0.0)))
            np.fill_diagonal(corr, 1.0)
        disp = None
        if spec.family.has_dispersion:
            disp = np.broadcast_to(np.asarray(truth["disp"], dtype=float), (k,)).copy()
        n = int(raw["n"])
        if n < 2:
            raise ModelError("n must be at least 2")
        cfg = SimConfig(spec, NaturalParams(beta, disp, sd, corr), n, raw.get("covariate_law", "normal"),
                        int(raw.get("seed", 0)))
    except KeyError as exc:
        raise ConfigError(f"simulation configuration is missing {exc}") from None
    except (ModelError, TypeError, ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, dict(raw.get("output", {}))


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(doc: Mapping) -> str:
    return json.dumps(_clean(doc), indent=2, allow_nan=False) + "\n"


def write_json(doc: Mapping, path: str | Path) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def result_document(result: FitResult, config: RunConfig | None = None, table: Table | None = None) -> dict:
    doc = {"format": RESULT_FORMAT, "version": FORMAT_VERSION, **result.to_dict()}
    if table is not None:
        doc["data"] = {"rows_read": table.n_read, "rows_dropped": table.n_dropped}
    if config is not None:
        doc["config"] = config.echo()
    return doc


def truth_document(config: SimConfig) -> dict:
    t = config.truth
    return {
        "format": TRUTH_FORMAT,
        "version": FORMAT_VERSION,
        "n": config.n,
        "seed": config.seed,
        "covariate_law": {k: v.value for k, v in config.covariate_law.items()},
        "model": config.spec.to_dict(),
        "truth": {
            "beta": {r: list(map(float, b)) for r, b in zip(config.spec.responses, t.beta)},
            "disp": None if t.disp is None else list(map(float, t.disp)),
            "sd": list(map(float, t.sd)),
            "corr": np.asarray(t.corr, dtype=float).tolist(),
        },
    }


def load_truth(path: str | Path) -> SimConfig:
    """Reload a truth sidecar into the simulation config that produced it."""
    doc = read_json(path)
    if doc.get("format") != TRUTH_FORMAT:
        raise DataError(f"{path}: not a truth document")
    raw = {k: doc[k] for k in ("n", "seed", "covariate_law", "model")}
    truth = dict(doc["truth"])
    if truth.get("disp") is None:
        truth.pop("disp", None)
    raw["truth"] = truth
    cfg, _ = sim_config(raw)
    return cfg
