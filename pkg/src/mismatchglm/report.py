"""Figure rendering for a results directory.

Reads the emitted records and draws whatever the run type supports:
simulate runs get the error-ratio-vs-prefactor curve plus per-method
error and deviance charts, case studies get a method deviance chart,
fit runs get a coefficient chart.  Figures land next to the delimited
output as PNG files; the delimited files remain the canonical record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .records import read_records


def _replication_figures(outdir: Path, records: list[dict]) -> list[Path]:
    written = []
    # binary responses are evaluated on deviance only: with weak signal the
    # parameter error is not informative, so the error charts are skipped
    deviance_only = {r.get("family") for r in records} == {"bernoulli"}
    naive_theta = {
        r["replication"]: r["theta_err"]
        for r in records
        if r.get("method") == "naive" and r.get("theta_err") is not None
    }

    # error ratio against the pre-factor, per grid method
    by_prefactor: dict[str, dict[float, list[float]]] = {}
    for r in records:
        if r.get("prefactor") is None or r.get("theta_err") is None:
            continue
        base = naive_theta.get(r["replication"])
        if not base:
            continue
        by_prefactor.setdefault(r["method"], {}).setdefault(r["prefactor"], []).append(
            r["theta_err"] / base
        )
    if by_prefactor and not deviance_only:
        fig, ax = plt.subplots(figsize=(6, 4))
        for method, curve in sorted(by_prefactor.items()):
            xs = sorted(curve)
            med = [float(np.median(curve[x])) for x in xs]
            lo = [float(np.quantile(curve[x], 0.25)) for x in xs]
            hi = [float(np.quantile(curve[x], 0.75)) for x in xs]
            ax.plot(xs, med, marker="o", label=method)
            ax.fill_between(xs, lo, hi, alpha=0.2)
        ax.axhline(1.0, color="grey", lw=0.8, ls="--")
        ax.set_xscale("log")
        ax.set_xlabel("pre-factor C")
        ax.set_ylabel("theta error ratio vs naive")
        ax.legend()
        fig.tight_layout()
        path = outdir / "fig_error_ratio.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    # per-method errors and deviances at the best grid point
    metrics = (("beta_err", "fig_beta_error.png"), ("deviance", "fig_deviance.png"))
    if deviance_only:
        metrics = (("deviance", "fig_deviance.png"),)
    for metric, fname in metrics:
        per_method: dict[str, dict[int, float]] = {}
        for r in records:
            if r.get(metric) is None:
                continue
            best = per_method.setdefault(r["method"], {})
            repl = r["replication"]
            if repl not in best or r[metric] < best[repl]:
                best[repl] = r[metric]
        if not per_method:
            continue
        methods = sorted(per_method)
        means = [float(np.mean(list(per_method[m].values()))) for m in methods]
        ses = [
            float(np.std(list(per_method[m].values()), ddof=1) / np.sqrt(len(per_method[m])))
            if len(per_method[m]) > 1
            else 0.0
            for m in methods
        ]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(methods, means, yerr=ses, capsize=4)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = outdir / fname
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def _casestudy_figure(outdir: Path, records: list[dict]) -> list[Path]:
    scores: dict[str, list[float]] = {}
    for r in records:
        if r.get("deviance") is None:
            continue
        label = r["method"]
        if r.get("variant"):
            label += f" [{r['variant']}]"
        if r.get("selection"):
            label += f" ({r['selection']})"
        scores.setdefault(label, []).append(r["deviance"])
    if not scores:
        return []
    labels = sorted(scores, key=lambda k: float(np.mean(scores[k])))
    means = [float(np.mean(scores[k])) for k in labels]
    fig, ax = plt.subplots(figsize=(7, max(3, 0.35 * len(labels) + 1)))
    ax.barh(labels, means)
    ax.set_xlabel("deviance on true correspondence")
    fig.tight_layout()
    path = outdir / "fig_deviance.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def _fit_figure(outdir: Path, records: list[dict]) -> list[Path]:
    rows = [r for r in records if r.get("coefficients")]
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(7, 4))
    for r in rows:
        coefs = r["coefficients"]
        ax.plot(range(len(coefs)), coefs, marker="o", label=r["method"])
    ax.set_xlabel("coefficient index")
    ax.set_ylabel("estimate")
    ax.legend()
    fig.tight_layout()
    path = outdir / "fig_coefficients.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_directory(outdir: str | Path) -> list[Path]:
    """Render the figures appropriate to the records found in a directory."""
    outdir = Path(outdir)
    records_path = outdir / "records.ndtext"
    if not records_path.exists():
        return []
    _, records = read_records(records_path)
    kinds = {r.get("kind") for r in records}
    written: list[Path] = []
    if "replication" in kinds:
        written += _replication_figures(outdir, [r for r in records if r.get("kind") == "replication"])
    if "casestudy" in kinds:
        written += _casestudy_figure(outdir, [r for r in records if r.get("kind") == "casestudy"])
    if "fit" in kinds:
        written += _fit_figure(outdir, [r for r in records if r.get("kind") == "fit"])
    return written
