"""CSV ingestion and JSON report output."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClusterObservation, Dataset, MissingColumn, UnparsableCell, validate_dataset, DEFAULT_N_MAX

SCHEMA_PATH = Path(__file__).with_name("report.schema.json")


@dataclass(frozen=True)
class CsvSchema:
    cluster_id: str = "cluster_id"
    outcome: str = "y"
    treatment: str = "a"
    covariates: tuple | None = None
    exclude: tuple = ()

    @classmethod
    def from_dict(cls, d: dict | None) -> "CsvSchema":
        d = dict(d or {})
        cov = d.get("covariates")
        return cls(
            cluster_id=d.get("cluster_id", "cluster_id"),
            outcome=d.get("outcome", "y"),
            treatment=d.get("treatment", "a"),
            covariates=tuple(cov) if cov is not None else None,
            exclude=tuple(d.get("exclude", ())),
        )


def _parse_float(text, row_no, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise UnparsableCell(f"row {row_no}, column {col!r}: cannot parse {text!r}") from None
    if not np.isfinite(v):
        raise UnparsableCell(f"row {row_no}, column {col!r}: non-finite value {text!r}")
    return v


def load_csv(path, schema: CsvSchema | None = None, n_max: int = DEFAULT_N_MAX) -> Dataset:
    """Read a unit-per-row CSV and group rows into clusters.

    Clusters appear in order of first occurrence and units keep file order.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(f"{path}: empty file") from None
        for col in (schema.cluster_id, schema.outcome, schema.treatment):
            if col not in header:
                raise MissingColumn(f"required column {col!r} missing from {path}")
        reserved = {schema.cluster_id, schema.outcome, schema.treatment, *schema.exclude}
        if schema.covariates is not None:
            covs = list(schema.covariates)
            for col in covs:
                if col not in header:
                    raise MissingColumn(f"covariate column {col!r} missing from {path}")
        else:
            covs = [h for h in header if h not in reserved]
        pos = {h: i for i, h in enumerate(header)}
        groups: dict = {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise UnparsableCell(f"row {row_no}: {len(row)} cells, header has {len(header)}")
            cid = row[pos[schema.cluster_id]].strip()
            y = _parse_float(row[pos[schema.outcome]], row_no, schema.outcome)
            a = _parse_float(row[pos[schema.treatment]], row_no, schema.treatment)
            x = [_parse_float(row[pos[c]], row_no, c) for c in covs]
            groups.setdefault(cid, []).append((y, a, x))
    clusters = []
    for cid, rows in groups.items():
        y = np.array([r[0] for r in rows])
        a = np.array([r[1] for r in rows])
        x = np.array([r[2] for r in rows], dtype=float).reshape(len(rows), len(covs))
        clusters.append(ClusterObservation(y, a, x, cid))
    return validate_dataset(Dataset(tuple(clusters), tuple(covs), n_max))


def write_csv(data: Dataset, path, schema: CsvSchema | None = None) -> None:
    """Inverse of :func:`load_csv`; floats are written with ``repr`` so they round-trip."""
    schema = schema or CsvSchema()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema.cluster_id, schema.outcome, schema.treatment, *data.column_names])
        for i, c in enumerate(data.clusters):
            cid = c.cluster_id if c.cluster_id is not None else i
            for j in range(c.n):
                w.writerow([cid, repr(float(c.y[j])), int(c.a[j]), *(repr(float(v)) for v in c.x[j])])


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def report_to_json(report) -> str:
    doc = report.to_dict() if hasattr(report, "to_dict") else report
    return json.dumps(_clean(doc), indent=2, sort_keys=False) + "\n"


def validate_report_dict(doc: dict) -> None:
    import jsonschema

    schema = json.loads(SCHEMA_PATH.read_text())
    jsonschema.validate(doc, schema)


def write_report(report, path) -> None:
    text = report_to_json(report)
    validate_report_dict(json.loads(text))
    Path(path).write_text(text)
