"""Delimited-text ingestion: design matrix, response, block partition.

The data section of a run config declares how a CSV with a header row
becomes a regression problem: numeric columns pass through, categorical
columns expand to indicators against a declared reference level,
indicator rules turn membership tests into binary columns, derive rules
add linearly transformed (optionally rounded) copies of a column, and
interaction pairs multiply any two declared terms.  Blocking columns
induce the partition used for constrained fits and the baselines.

Every parse failure names the offending column and 1-based data row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockPartition
from .estimators import MergedDataset


class IngestError(ValueError):
    """Malformed input data or a config/data mismatch."""


@dataclass
class IngestResult:
    dataset: MergedDataset
    blocks: BlockPartition | None
    feature_names: tuple[str, ...]
    n_rows_read: int
    n_rows_dropped: int
    block_key: tuple[str, ...]
    y_true: np.ndarray | None = None


def _read_rows(path: str | Path, delimiter: str) -> tuple[list[str], list[dict]]:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle, delimiter=delimiter)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: missing header row")
        header = [h.strip() for h in reader.fieldnames]
        rows = []
        for row in reader:
            rows.append({(k.strip() if k else k): (v.strip() if v is not None else "") for k, v in row.items()})
    if not rows:
        raise IngestError(f"{path}: no data rows")
    return header, rows


def _column_exists(header: list[str], col: str, where: str) -> None:
    if col not in header:
        raise IngestError(f"{where}: column '{col}' not found in header {header}")


def _numeric(rows: list[dict], col: str) -> np.ndarray:
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        raw = row.get(col, "")
        try:
            out[i] = float(raw)
        except (TypeError, ValueError):
            raise IngestError(f"row {i + 1}: column '{col}' value {raw!r} is not numeric") from None
    return out


def _raw(rows: list[dict], col: str) -> list[str]:
    return [row.get(col, "") for row in rows]


def _canonical_label(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _compare(lhs, op: str, rhs) -> bool:
    if op in ("in", "not_in"):
        values = {str(v) for v in rhs}
        hit = str(lhs) in values or (_is_number(lhs) and _canonical_label(float(lhs)) in values)
        return hit if op == "in" else not hit
    if _is_number(lhs) and _is_number(rhs):
        a, b = float(lhs), float(rhs)
    else:
        a, b = str(lhs), str(rhs)
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise IngestError(f"unknown comparison operator {op!r}")


def _is_number(v) -> bool:
    try:
        float(v)
        return True
    except (TypeError, ValueError):
        return False


def _sorted_levels(values: list[str]) -> list[str]:
    uniq = sorted(set(values))
    if all(_is_number(v) for v in uniq):
        uniq.sort(key=float)
    return uniq


def ingest_csv(path: str | Path, data_config: dict) -> IngestResult:
    """Build a MergedDataset plus block partition from a delimited file."""
    cfg = data_config
    delimiter = cfg.get("delimiter", ",")
    header, rows = _read_rows(path, delimiter)
    n_read = len(rows)

    # declared columns must exist before any work starts
    response = cfg["response"]
    _column_exists(header, response, "data.response")
    for col in cfg.get("numeric", []):
        _column_exists(header, col, "data.numeric")
    for entry in cfg.get("categorical", []):
        _column_exists(header, entry["column"], "data.categorical")
    for entry in cfg.get("indicators", []):
        _column_exists(header, entry["column"], "data.indicators")
    for entry in cfg.get("derive", []):
        _column_exists(header, entry["column"], "data.derive")
    derived_names = {entry["name"] for entry in cfg.get("derive", [])}
    available = set(header) | derived_names
    for cond in cfg.get("drop_rows", []):
        if cond["column"] not in available:
            raise IngestError(f"data.drop_rows: column '{cond['column']}' not found")
    for col in cfg.get("blocking", []):
        if col not in available:
            raise IngestError(f"data.blocking: column '{col}' not found")
    truth_col = cfg.get("truth_response")
    if truth_col:
        _column_exists(header, truth_col, "data.truth_response")

    # derived columns (linear transform, optional rounding)
    derived: dict[str, np.ndarray] = {}
    for entry in cfg.get("derive", []):
        base = _numeric(rows, entry["column"])
        vals = base * float(entry.get("scale", 1.0)) + float(entry.get("offset", 0.0))
        if entry.get("round", False):
            vals = np.round(vals)
        derived[entry["name"]] = vals

    def column_values(col: str) -> list[str]:
        if col in derived:
            return [_canonical_label(v) for v in derived[col]]
        return _raw(rows, col)

    # row filters: drop a row when any condition matches
    keep = np.ones(n_read, dtype=bool)
    for cond in cfg.get("drop_rows", []):
        vals = column_values(cond["column"])
        for i, v in enumerate(vals):
            if keep[i] and _compare(v, cond["op"], cond["value"]):
                keep[i] = False
    kept_idx = np.flatnonzero(keep)
    if kept_idx.size == 0:
        raise IngestError("data.drop_rows removed every row")
    rows = [rows[i] for i in kept_idx]
    derived = {k: v[kept_idx] for k, v in derived.items()}
    n = len(rows)

    def numeric_column(col: str) -> np.ndarray:
        if col in derived:
            return derived[col].astype(float)
        return _numeric(rows, col)

    # response, optionally sqrt-transformed
    y = numeric_column(response)
    transform = cfg.get("transform", "none")
    if transform == "sqrt":
        if np.any(y < 0):
            bad = int(np.argmax(y < 0)) + 1
            raise IngestError(f"row {bad}: sqrt transform needs a nonnegative response")
        y = np.sqrt(y)
    elif transform != "none":
        raise IngestError(f"data.transform must be 'none' or 'sqrt', got {transform!r}")

    y_true = None
    if truth_col:
        y_true = numeric_column(truth_col)
        if transform == "sqrt":
            y_true = np.sqrt(y_true)

    # feature columns
    features: list[np.ndarray] = []
    names: list[str] = []
    term_columns: dict[str, list[int]] = {}

    def add(name: str, values: np.ndarray, term: str) -> None:
        features.append(values.astype(float))
        names.append(name)
        term_columns.setdefault(term, []).append(len(features) - 1)

    for col in cfg.get("numeric", []):
        add(col, numeric_column(col), col)
    for entry in cfg.get("categorical", []):
        col = entry["column"]
        values = column_values(col)
        levels = _sorted_levels(values)
        reference = str(entry.get("reference", levels[0]))
        if reference not in levels:
            raise IngestError(
                f"data.categorical: reference level {reference!r} for '{col}' "
                f"not among observed levels {levels}"
            )
        for level in levels:
            if level == reference:
                continue
            add(f"{col}={level}", np.array([1.0 if v == level else 0.0 for v in values]), col)
    for entry in cfg.get("indicators", []):
        col = entry["column"]
        wanted = {str(v) for v in entry["values"]}
        values = column_values(col)
        ind = np.array(
            [1.0 if (v in wanted or (_is_number(v) and _canonical_label(float(v)) in wanted)) else 0.0 for v in values]
        )
        add(entry["name"], ind, entry["name"])

    for pair in cfg.get("interactions", []):
        if len(pair) != 2:
            raise IngestError(f"data.interactions entries must be pairs, got {pair!r}")
        left, right = str(pair[0]), str(pair[1])
        for side in (left, right):
            if side not in term_columns:
                raise IngestError(
                    f"data.interactions: '{side}' is not a declared numeric, "
                    "categorical or indicator term"
                )
        for i in term_columns[left]:
            for j in term_columns[right]:
                add(f"{names[i]}*{names[j]}", features[i] * features[j], f"{left}*{right}")

    X = np.hstack([np.ones((n, 1))] + [f[:, None] for f in features]) if features else np.ones((n, 1))
    feature_names = tuple(["intercept"] + names)

    blocks = None
    block_key = tuple(cfg.get("blocking", []))
    if block_key:
        labels = list(zip(*[column_values(c) for c in block_key]))
        blocks = BlockPartition.from_labels(labels)

    dataset = MergedDataset(X=X, y=y, blocks=blocks, columns=feature_names)
    return IngestResult(
        dataset=dataset,
        blocks=blocks,
        feature_names=feature_names,
        n_rows_read=n_read,
        n_rows_dropped=n_read - n,
        block_key=block_key,
        y_true=y_true,
    )
