"""Line-delimited result records and the flat summary table.

``records.ndtext`` holds one JSON object per line (keys sorted, no NaN;
missing metrics are null), preceded by a single ``#`` header line that
carries the generation timestamp and wall-clock time.  Everything below
the header is byte-deterministic for a fixed config and seed, which is
why per-entry runtimes are not persisted: they live in the in-memory
results and, in aggregate, in the header.

``summary.tsv`` is a flat tab-separated aggregation with the same
header convention; both schemas carry a schema_version field.
"""

from __future__ import annotations

import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .simlab import MethodResult, ReplicationResult

SCHEMA_VERSION = 1

RECORD_FIELDS = (
    "schema_version",
    "kind",
    "replication",
    "k_realized",
    "method",
    "variant",
    "selection",
    "prefactor",
    "lam",
    "beta_err",
    "theta_err",
    "deviance",
    "hamming",
    "converged",
    "note",
)


def _clean_value(v):
    if v is None or isinstance(v, (bool, int, str)):
        return v
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return None if math.isnan(f) else f
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean_value(x) for x in v]
    raise TypeError(f"cannot serialize {type(v)!r}")


def encode_results(results: list[ReplicationResult], context: dict | None = None) -> list[dict]:
    """Flatten replication results to one record per (rep, method, lambda)."""
    context = context or {}
    records = []
    for result in results:
        for entry in result.entries:
            rec = {
                "schema_version": SCHEMA_VERSION,
                "kind": "replication",
                "replication": result.replication,
                "k_realized": result.k_realized,
                "method": entry.method,
                "prefactor": entry.prefactor,
                "lam": entry.lam,
                "beta_err": entry.beta_err,
                "theta_err": entry.theta_err,
                "deviance": entry.deviance,
                "hamming": entry.hamming,
                "converged": entry.converged,
                "note": entry.note,
            }
            rec.update(context)
            records.append({k: _clean_value(v) for k, v in rec.items()})
    return records


def decode_results(records: list[dict]) -> list[ReplicationResult]:
    """Rebuild replication results from parsed records (runtimes not kept)."""
    by_rep: dict[int, dict] = {}
    for rec in records:
        if rec.get("kind") != "replication":
            continue
        rep = int(rec["replication"])
        slot = by_rep.setdefault(rep, {"k_realized": int(rec.get("k_realized", 0)), "entries": []})
        slot["entries"].append(
            MethodResult(
                method=rec["method"],
                prefactor=rec.get("prefactor"),
                lam=rec.get("lam"),
                beta_err=rec.get("beta_err"),
                theta_err=rec.get("theta_err"),
                deviance=rec.get("deviance"),
                hamming=rec.get("hamming"),
                converged=rec.get("converged"),
                note=rec.get("note"),
            )
        )
    return [
        ReplicationResult(replication=rep, k_realized=slot["k_realized"], entries=tuple(slot["entries"]))
        for rep, slot in sorted(by_rep.items())
    ]


def _header(label: str, elapsed_s: float | None) -> str:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    elapsed = "" if elapsed_s is None else f" elapsed_s={elapsed_s:.3f}"
    return f"# mismatchglm {label} schema_version={SCHEMA_VERSION} generated={stamp}{elapsed}"


def write_records(path, records: list[dict], elapsed_s: float | None = None) -> None:
    lines = [_header("records", elapsed_s)]
    for rec in records:
        clean = {k: _clean_value(v) for k, v in rec.items()}
        lines.append(json.dumps(clean, sort_keys=True, separators=(",", ":"), allow_nan=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_records(path) -> tuple[list[str], list[dict]]:
    """Parse a records file; returns (header comment lines, records)."""
    header, records = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            header.append(line)
        else:
            records.append(json.loads(line))
    return header, records


def non_header_bytes(path) -> bytes:
    """File content with '#' header lines removed; the determinism contract."""
    lines = [
        line
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if not line.startswith("#")
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


# -- summary table ------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary(path, rows: list[dict], columns: list[str], elapsed_s: float | None = None) -> None:
    lines = [_header("summary", elapsed_s), "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_cell(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_summary(path) -> list[dict]:
    lines = [
        line
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    if not lines:
        return []
    columns = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        rows.append(dict(zip(columns, line.split("\t"))))
    return rows


def _median(values):
    return float(np.median(values)) if values else None


def _mean(values):
    return float(np.mean(values)) if values else None


SUMMARY_COLUMNS = [
    "schema_version",
    "method",
    "prefactor",
    "n_reps",
    "n_na",
    "beta_err_mean",
    "beta_err_median",
    "theta_err_mean",
    "theta_err_median",
    "theta_ratio_median",
    "deviance_mean",
    "deviance_median",
    "hamming_mean",
]


def summarize_records(records: list[dict]) -> list[dict]:
    """Aggregate replication records per (method, prefactor).

    theta_ratio_median is the per-replication ratio of theta_err to the
    naive method's theta_err, when naive entries are present.
    """
    naive_theta: dict[int, float] = {}
    for rec in records:
        if rec.get("method") == "naive" and rec.get("theta_err") is not None:
            naive_theta[rec["replication"]] = rec["theta_err"]

    groups: dict[tuple, dict] = {}
    for rec in records:
        if rec.get("kind") != "replication":
            continue
        key = (rec["method"], rec.get("prefactor"))
        g = groups.setdefault(
            key,
            {"beta": [], "theta": [], "dev": [], "ham": [], "ratio": [], "n": 0, "na": 0},
        )
        g["n"] += 1
        if rec.get("beta_err") is None and rec.get("hamming") is None:
            g["na"] += 1
            continue
        for field, store in (("beta_err", "beta"), ("theta_err", "theta"), ("deviance", "dev"), ("hamming", "ham")):
            if rec.get(field) is not None:
                g[store].append(rec[field])
        base = naive_theta.get(rec["replication"])
        if base and rec.get("theta_err") is not None:
            g["ratio"].append(rec["theta_err"] / base)

    rows = []
    for (method, prefactor), g in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1] if kv[0][1] is not None else -1.0)
    ):
        rows.append(
            {
                "schema_version": SCHEMA_VERSION,
                "method": method,
                "prefactor": prefactor,
                "n_reps": g["n"],
                "n_na": g["na"],
                "beta_err_mean": _mean(g["beta"]),
                "beta_err_median": _median(g["beta"]),
                "theta_err_mean": _mean(g["theta"]),
                "theta_err_median": _median(g["theta"]),
                "theta_ratio_median": _median(g["ratio"]),
                "deviance_mean": _mean(g["dev"]),
                "deviance_median": _median(g["dev"]),
                "hamming_mean": _mean(g["ham"]),
            }
        )
    return rows
