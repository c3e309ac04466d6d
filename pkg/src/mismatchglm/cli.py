"""Command-line frontend.

Subcommands:

    simulate   run a synthetic scenario and emit records/summary
    fit        fit chosen methods on one delimited dataset
    recover    permutation correction by sorting, with optional refit
    casestudy  linkage-error pipeline on a real file: ingest, inject
               block permutations, fit all methods, score the deviance
               on the true correspondence
    report     render figures from a results directory

Every run writes ``records.ndtext``, ``summary.tsv`` and
``config.resolved`` into the output directory; the report path also
renders matplotlib figures next to them.  Config files are YAML; flags
override config; MISMATCHGLM_OUTDIR supplies a default output
directory.  Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import records as rec
from .baselines import fit_chambers, fit_ll
from .blocks import BlockPartition
from .estimators import (
    FitError,
    FitOptions,
    MergedDataset,
    fit_glm,
    fit_penalized,
    fit_penalized_constrained,
)
from .families import DomainError, Family, Kind, Link
from .ingest import IngestError, IngestResult, ingest_csv
from .matching import Threshold, TopK, correspondence_l2, hamming_distance, recover_permutation, two_stage_correct
from .simlab import (
    DesignKind,
    PermutationKind,
    SimulationScenario,
    generate_permutation_blocks,
    response_sd_data,
    run_replications,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """A config field is missing, unknown, or has the wrong type."""


# -- config validation -------------------------------------------------------


def _as_section(cfg: dict, name: str, required: bool) -> dict:
    value = cfg.get(name)
    if value is None:
        if required:
            raise ConfigError(f"missing config section '{name}'")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return value


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown field {path}.{key}")


def _get(section: dict, key: str, path: str, types, default=None, required=False):
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"missing field {path}.{key}")
        return default
    value = section[key]
    if types is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"field {path}.{key} must be a boolean")
        return value
    if types is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {path}.{key} must be an integer")
        return value
    if types is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {path}.{key} must be a number")
        return float(value)
    if types is str:
        if not isinstance(value, str):
            raise ConfigError(f"field {path}.{key} must be a string")
        return value
    if types is list:
        if not isinstance(value, list):
            raise ConfigError(f"field {path}.{key} must be a list")
        return value
    raise AssertionError(f"unhandled type spec for {path}.{key}")


def _seed_value(cfg: dict, override, field: str = "seed") -> int:
    seed = override if override is not None else _get(cfg, field, "", int, default=0)
    if not 0 <= seed < 2**63:
        raise ConfigError(f"field {field} must lie in [0, 2^63)")
    return seed


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def family_from_config(cfg: dict) -> Family:
    section = _as_section(cfg, "family", required=True)
    _check_keys(section, {"kind", "dispersion", "trials", "link", "shape"}, "family")
    kind = _get(section, "kind", "family", str, required=True)
    try:
        kind = Kind(kind)
    except ValueError:
        raise ConfigError(
            f"field family.kind must be one of {[k.value for k in Kind]}, got {kind!r}"
        ) from None
    link = _get(section, "link", "family", str, default="canonical")
    try:
        link = Link(link)
    except ValueError:
        raise ConfigError(f"field family.link must be 'canonical' or 'log', got {link!r}") from None
    dispersion = _get(section, "dispersion", "family", float, default=None)
    shape = _get(section, "shape", "family", float, default=None)
    if shape is not None and dispersion is not None:
        raise ConfigError("family.shape and family.dispersion are mutually exclusive")
    if shape is not None:
        if shape <= 0:
            raise ConfigError("field family.shape must be positive")
        dispersion = 1.0 / shape
    if dispersion is None:
        dispersion = 1.0
    trials = _get(section, "trials", "family", int, default=1)
    try:
        return Family(kind=kind, dispersion=dispersion, trials=trials, link=link)
    except DomainError as err:
        raise ConfigError(f"family: {err}") from None


_DATA_KEYS = {
    "path",
    "delimiter",
    "response",
    "transform",
    "truth_response",
    "numeric",
    "categorical",
    "indicators",
    "derive",
    "drop_rows",
    "interactions",
    "blocking",
}


def data_from_config(cfg: dict, override_path: str | None = None) -> dict:
    section = _as_section(cfg, "data", required=True)
    _check_keys(section, _DATA_KEYS, "data")
    path = override_path or _get(section, "path", "data", str, required=True)
    out = dict(section)
    out["path"] = path
    _get(section, "response", "data", str, required=True)
    transform = _get(section, "transform", "data", str, default="none")
    if transform not in ("none", "sqrt"):
        raise ConfigError(f"field data.transform must be 'none' or 'sqrt', got {transform!r}")
    for name in ("numeric", "categorical", "indicators", "derive", "drop_rows", "interactions", "blocking"):
        _get(section, name, "data", list, default=[])
    for i, spec in enumerate(section.get("categorical") or []):
        if not isinstance(spec, dict) or "column" not in spec:
            raise ConfigError(f"field data.categorical[{i}] must be a mapping with a 'column'")
        _check_keys(spec, {"column", "reference"}, f"data.categorical[{i}]")
    for i, spec in enumerate(section.get("indicators") or []):
        if not isinstance(spec, dict) or not {"name", "column", "values"} <= set(spec):
            raise ConfigError(f"field data.indicators[{i}] needs name, column and values")
        _check_keys(spec, {"name", "column", "values"}, f"data.indicators[{i}]")
    for i, spec in enumerate(section.get("derive") or []):
        if not isinstance(spec, dict) or not {"name", "column"} <= set(spec):
            raise ConfigError(f"field data.derive[{i}] needs name and column")
        _check_keys(spec, {"name", "column", "scale", "offset", "round"}, f"data.derive[{i}]")
    for i, spec in enumerate(section.get("drop_rows") or []):
        if not isinstance(spec, dict) or not {"column", "op", "value"} <= set(spec):
            raise ConfigError(f"field data.drop_rows[{i}] needs column, op and value")
        _check_keys(spec, {"column", "op", "value"}, f"data.drop_rows[{i}]")
        if spec["op"] not in ("==", "!=", "<", "<=", ">", ">=", "in", "not_in"):
            raise ConfigError(f"field data.drop_rows[{i}].op is not a known operator")
    return out


_METHOD_KEYS = {"methods", "prefactors", "lam", "validation_fraction", "selection"}
_VALID_METHODS = ("naive", "oracle", "proposed", "constrained", "ll", "chambers")


def method_from_config(cfg: dict) -> dict:
    section = _as_section(cfg, "method", required=False)
    _check_keys(section, _METHOD_KEYS, "method")
    methods = _get(section, "methods", "method", list, default=["naive", "proposed"])
    for m in methods:
        if m not in _VALID_METHODS:
            raise ConfigError(f"field method.methods contains unknown method {m!r}")
    prefactors = _get(
        section, "prefactors", "method", list,
        default=[0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0],
    )
    for c in prefactors:
        if isinstance(c, bool) or not isinstance(c, (int, float)) or c <= 0:
            raise ConfigError("field method.prefactors must hold positive numbers")
    lam = _get(section, "lam", "method", float, default=None)
    fraction = _get(section, "validation_fraction", "method", float, default=0.2)
    if not 0.0 <= fraction <= 0.5:
        raise ConfigError("field method.validation_fraction must lie in [0, 0.5]")
    selection = _get(section, "selection", "method", str, default="validation")
    if selection not in ("validation", "oracle", "fixed"):
        raise ConfigError("field method.selection must be validation, oracle or fixed")
    if selection == "fixed" and lam is None:
        raise ConfigError("method.selection = fixed needs method.lam")
    return {
        "methods": list(methods),
        "prefactors": [float(c) for c in prefactors],
        "lam": lam,
        "validation_fraction": fraction,
        "selection": selection,
    }


def scenario_from_config(cfg: dict, family: Family, overrides: dict) -> SimulationScenario:
    section = _as_section(cfg, "simulate", required=True)
    allowed = {
        "n", "d", "beta_norm", "intercept", "mismatch_fraction", "design",
        "permutation", "block_size", "prefactors", "replications", "methods",
        "sigma_y_mode", "workers",
    }
    _check_keys(section, allowed, "simulate")
    design = _get(section, "design", "simulate", str, default="uniform_sqrt3")
    try:
        design = DesignKind(design)
    except ValueError:
        raise ConfigError(
            f"field simulate.design must be one of {[d.value for d in DesignKind]}"
        ) from None
    permutation = _get(section, "permutation", "simulate", str, default="ksparse")
    try:
        permutation = PermutationKind(permutation)
    except ValueError:
        raise ConfigError("field simulate.permutation must be 'ksparse' or 'block_uniform'") from None
    prefactors = _get(
        section, "prefactors", "simulate", list,
        default=[0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0],
    )
    methods = _get(section, "methods", "simulate", list, default=["naive", "oracle", "proposed"])
    replications = overrides.get("replications") or _get(
        section, "replications", "simulate", int, default=100
    )
    seed = _seed_value(cfg, overrides.get("seed"))
    try:
        return SimulationScenario(
            family=family,
            n=_get(section, "n", "simulate", int, required=True),
            d=_get(section, "d", "simulate", int, required=True),
            beta_norm=_get(section, "beta_norm", "simulate", float, required=True),
            intercept=_get(section, "intercept", "simulate", float, required=True),
            mismatch_fraction=_get(section, "mismatch_fraction", "simulate", float, default=0.0),
            design=design,
            permutation=permutation,
            block_size=_get(section, "block_size", "simulate", int, default=None),
            prefactors=tuple(float(c) for c in prefactors),
            replications=replications,
            seed=seed,
            methods=tuple(methods),
            sigma_y_mode=_get(section, "sigma_y_mode", "simulate", str, default="known"),
        )
    except ValueError as err:
        raise ConfigError(f"simulate: {err}") from None


# -- shared pipeline pieces ---------------------------------------------------


def inject_mismatch(data: MergedDataset, blocks: BlockPartition, seed: int) -> MergedDataset:
    """Permute the response uniformly within blocks, keeping the truth.

    The observed y becomes y[pi] for a uniform block-respecting pi; the
    original response is recorded as ground truth so downstream metrics
    can score against the correct correspondence.
    """
    pi = generate_permutation_blocks(blocks, seed)
    return MergedDataset(
        X=data.X,
        y=data.y[pi],
        y_star=data.y.copy(),
        pi_star=pi,
        blocks=data.blocks,
        columns=data.columns,
    )


def _deviance_against(family: Family, X: np.ndarray, y_ref: np.ndarray, beta: np.ndarray) -> float:
    """Total unit deviance of fitted means against a reference response."""
    eta = np.clip(X @ beta, -700.0, 700.0)
    mu = np.asarray(family.mean(eta))
    lo = 1e-12
    if family.kind in (Kind.BINOMIAL, Kind.BERNOULLI):
        mu = np.clip(mu, lo, family.trials - lo)
    elif family.kind in (Kind.POISSON, Kind.GAMMA):
        mu = np.maximum(mu, lo)
    return float(np.sum(family.unit_deviance(y_ref, mu)))


def validation_split(
    data: MergedDataset, fraction: float, seed: int
) -> tuple[MergedDataset, MergedDataset]:
    """Hold out about ``fraction`` of rows, preferring singleton blocks.

    With a block partition, whole blocks are held out, singletons first
    (those rows cannot be mismatched), then ascending block size.
    Without one, a plain uniform row sample is used.
    """
    n = data.n
    target = int(round(fraction * n))
    rng = np.random.Generator(np.random.Philox(key=seed))
    if target < 1:
        raise ConfigError("validation split is empty; raise method.validation_fraction")
    if data.blocks is None:
        val_idx = np.sort(rng.choice(n, size=target, replace=False))
    else:
        groups = list(data.blocks.groups)
        order = rng.permutation(len(groups))
        singles = [groups[i] for i in order if groups[i].size == 1]
        multis = sorted(
            (groups[i] for i in order if groups[i].size > 1), key=lambda g: g.size
        )
        chosen: list[np.ndarray] = []
        total = 0
        for g in singles + multis:
            if total >= target:
                break
            chosen.append(g)
            total += g.size
        val_idx = np.sort(np.concatenate(chosen))
    mask = np.zeros(n, dtype=bool)
    mask[val_idx] = True
    train_idx = np.flatnonzero(~mask)
    if train_idx.size < data.d:
        raise ConfigError("validation split leaves fewer training rows than parameters")

    def subset(idx: np.ndarray) -> MergedDataset:
        blocks = None
        if data.blocks is not None:
            blocks = BlockPartition.from_labels(data.blocks.labels[idx])
        return MergedDataset(X=data.X[idx], y=data.y[idx], blocks=blocks, columns=data.columns)

    return subset(train_idx), subset(val_idx)


def select_lambda_validation(
    family: Family,
    train: MergedDataset,
    validation: MergedDataset,
    grid,
    *,
    constrained: bool = False,
) -> float:
    """Grid value minimizing the validation deviance; ties pick larger lam."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ConfigError("lambda grid is empty")
    best_lam, best_dev = None, math.inf
    warm = None
    for lam in grid:
        opts = FitOptions(warm_start=warm)
        if constrained:
            fit = fit_penalized_constrained(family, train, lam, options=opts)
        else:
            fit = fit_penalized(family, train, lam, options=opts)
        warm = (fit.beta, fit.xi)
        dev = _deviance_against(family, validation.X, validation.y, fit.beta)
        if dev <= best_dev:
            best_lam, best_dev = lam, dev
    return best_lam


def _lambda_grid_from_data(family: Family, data: MergedDataset, prefactors) -> list[float]:
    sigma_y = response_sd_data(family, data.y)
    base = sigma_y * math.sqrt(math.log(data.n + (data.d - 1)) / data.n)
    return [float(c) * base for c in prefactors]


# -- output ------------------------------------------------------------------


def _resolve_outdir(args, cfg) -> Path:
    out = getattr(args, "out", None)
    if out is None:
        out = (cfg.get("output") or {}).get("directory")
    if out is None:
        out = os.environ.get("MISMATCHGLM_OUTDIR")
    if out is None:
        out = "results"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _figures_enabled(args, cfg) -> bool:
    if getattr(args, "figures", None) is not None:
        return args.figures
    output = cfg.get("output") or {}
    return bool(output.get("figures", True))


def _write_outputs(outdir: Path, cfg: dict, result_records, summary_rows, summary_columns, elapsed):
    rec.write_records(outdir / "records.ndtext", result_records, elapsed_s=elapsed)
    rec.write_summary(outdir / "summary.tsv", summary_rows, summary_columns, elapsed_s=elapsed)
    (outdir / "config.resolved").write_text(
        yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8"
    )


def _render_figures(outdir: Path) -> None:
    from . import report

    report.render_directory(outdir)


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    family = family_from_config(cfg)
    overrides = {"seed": args.seed, "replications": args.replications}
    scenario = scenario_from_config(cfg, family, overrides)
    outdir = _resolve_outdir(args, cfg)
    section = _as_section(cfg, "simulate", required=True)
    workers = args.workers or _get(section, "workers", "simulate", int, default=1)

    t0 = time.perf_counter()
    results = run_replications(scenario, workers=workers)
    elapsed = time.perf_counter() - t0
    context = {
        "family": family.kind.value,
        "n": scenario.n,
        "d": scenario.d,
        "seed": scenario.seed,
    }
    result_records = rec.encode_results(results, context)
    rows = rec.summarize_records(result_records)
    resolved = dict(cfg)
    resolved["simulate"] = {**section, "replications": scenario.replications}
    resolved["seed"] = scenario.seed
    _write_outputs(outdir, resolved, result_records, rows, rec.SUMMARY_COLUMNS, elapsed)
    if _figures_enabled(args, cfg):
        _render_figures(outdir)
    print(f"wrote {len(result_records)} records to {outdir}")
    return EXIT_OK


def _load_fit_inputs(args, cfg) -> tuple[Family, IngestResult, MergedDataset, dict, int]:
    family = family_from_config(cfg)
    data_cfg = data_from_config(cfg, override_path=getattr(args, "data", None))
    method = method_from_config(cfg)
    seed = _seed_value(cfg, args.seed)
    ingest = ingest_csv(data_cfg["path"], data_cfg)
    family.check_support(ingest.dataset.y)
    data = ingest.dataset

    inject_cfg = _as_section(cfg, "inject", required=False)
    _check_keys(inject_cfg, {"enabled", "seed"}, "inject")
    if _get(inject_cfg, "enabled", "inject", bool, default=False):
        if ingest.blocks is None:
            raise ConfigError("inject.enabled needs data.blocking columns")
        inject_seed = _get(inject_cfg, "seed", "inject", int, default=seed)
        if not 0 <= inject_seed < 2**63:
            raise ConfigError("field inject.seed must lie in [0, 2^63)")
        data = inject_mismatch(data, ingest.blocks, inject_seed)
    return family, ingest, data, method, seed


def _select_lambda(family, data, method, seed, *, constrained: bool, y_true=None):
    """Resolve the tuning parameter per the configured selection mode."""
    if method["selection"] == "fixed":
        return float(method["lam"]), "fixed"
    grid = _lambda_grid_from_data(family, data, method["prefactors"])
    if method["selection"] == "oracle":
        if y_true is None:
            raise ConfigError("method.selection = oracle needs ground truth (inject or truth_response)")
        best, best_dev = None, math.inf
        warm = None
        for lam in sorted(grid):
            opts = FitOptions(warm_start=warm)
            fit = (
                fit_penalized_constrained(family, data, lam, options=opts)
                if constrained
                else fit_penalized(family, data, lam, options=opts)
            )
            warm = (fit.beta, fit.xi)
            dev = _deviance_against(family, data.X, y_true, fit.beta)
            if dev <= best_dev:
                best, best_dev = lam, dev
        return best, "oracle"
    train, validation = validation_split(data, method["validation_fraction"], seed)
    lam = select_lambda_validation(family, train, validation, grid, constrained=constrained)
    return lam, "validation"


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    family, ingest, data, method, seed = _load_fit_inputs(args, cfg)
    outdir = _resolve_outdir(args, cfg)
    y_true = data.y_star if data.y_star is not None else ingest.y_true

    t0 = time.perf_counter()
    out_records = []
    for name in method["methods"]:
        entry = {
            "schema_version": rec.SCHEMA_VERSION,
            "kind": "fit",
            "method": name,
            "lam": None,
            "selection": None,
            "converged": True,
            "deviance_observed": None,
            "deviance_truth": None,
            "note": None,
            "coefficients": None,
        }
        try:
            if name == "naive":
                beta = fit_glm(family, data.X, data.y, columns=data.columns)
            elif name == "oracle":
                if y_true is None:
                    raise ConfigError("oracle method needs ground truth (inject or truth_response)")
                beta = fit_glm(family, data.X, y_true, columns=data.columns)
            elif name in ("proposed", "constrained"):
                constrained = name == "constrained"
                if constrained and data.blocks is None:
                    raise ConfigError("constrained method needs data.blocking columns")
                lam, mode = _select_lambda(
                    family, data, method, seed, constrained=constrained, y_true=y_true
                )
                fit = (
                    fit_penalized_constrained(family, data, lam)
                    if constrained
                    else fit_penalized(family, data, lam)
                )
                beta = fit.beta
                entry["lam"] = lam
                entry["selection"] = mode
                entry["converged"] = fit.converged
            elif name in ("ll", "chambers"):
                if data.blocks is None:
                    raise ConfigError(f"{name} method needs data.blocking columns")
                fit = (fit_ll if name == "ll" else fit_chambers)(family, data)
                beta = fit.beta
                entry["converged"] = fit.converged
            else:
                raise ConfigError(f"unknown method {name!r}")
            entry["coefficients"] = [float(b) for b in beta]
            entry["deviance_observed"] = _deviance_against(family, data.X, data.y, beta)
            if y_true is not None:
                entry["deviance_truth"] = _deviance_against(family, data.X, y_true, beta)
        except (FitError, np.linalg.LinAlgError) as err:
            entry["converged"] = False
            entry["note"] = f"NA: {err}"
        out_records.append(entry)
    elapsed = time.perf_counter() - t0

    columns = ["schema_version", "method", "lam", "selection", "converged", "deviance_observed", "deviance_truth", "note"]
    rows = [{k: r.get(k) for k in columns} for r in out_records]
    _write_outputs(outdir, cfg, out_records, rows, columns, elapsed)
    if _figures_enabled(args, cfg):
        _render_figures(outdir)
    print(f"wrote {len(out_records)} fit records to {outdir}")
    return EXIT_OK


def cmd_recover(args) -> int:
    cfg = load_config(args.config)
    family, ingest, data, method, seed = _load_fit_inputs(args, cfg)
    outdir = _resolve_outdir(args, cfg)
    recover_cfg = _as_section(cfg, "recover", required=False)
    _check_keys(recover_cfg, {"refit", "rule"}, "recover")
    refit = _get(recover_cfg, "refit", "recover", bool, default=True)

    t0 = time.perf_counter()
    constrained = data.blocks is not None
    lam, mode = _select_lambda(
        family, data, method, seed, constrained=constrained,
        y_true=data.y_star if data.y_star is not None else ingest.y_true,
    )
    fit = (
        fit_penalized_constrained(family, data, lam)
        if constrained
        else fit_penalized(family, data, lam)
    )

    rule_cfg = recover_cfg.get("rule")
    if rule_cfg is None:
        estimate = recover_permutation(data.X, data.y, fit.beta, data.blocks)
    else:
        if not isinstance(rule_cfg, dict) or "kind" not in rule_cfg:
            raise ConfigError("recover.rule must be a mapping with a 'kind'")
        if rule_cfg["kind"] == "topk":
            rule = TopK(k=_get(rule_cfg, "k", "recover.rule", int, required=True))
        elif rule_cfg["kind"] == "threshold":
            rule = Threshold(tau=_get(rule_cfg, "tau", "recover.rule", float, required=True))
        else:
            raise ConfigError("recover.rule.kind must be 'topk' or 'threshold'")
        estimate = two_stage_correct(family, data.X, data.y, fit.beta, rule, data.blocks)

    entry = {
        "schema_version": rec.SCHEMA_VERSION,
        "kind": "recover",
        "lam": lam,
        "selection": mode,
        "estimated_moved_fraction": estimate.hamming,
        "hamming_to_truth": None,
        "l2_before": None,
        "l2_after": None,
        "refit_deviance_observed": None,
        "note": None,
    }
    if data.pi_star is not None:
        entry["hamming_to_truth"] = hamming_distance(estimate.pi_hat, data.pi_star)
        entry["l2_before"] = correspondence_l2(data.y, data.y_star)
        entry["l2_after"] = correspondence_l2(estimate.corrected_y, data.y_star)
    if refit:
        try:
            beta_refit = fit_glm(family, data.X, estimate.corrected_y, columns=data.columns)
            entry["refit_deviance_observed"] = _deviance_against(
                family, data.X, estimate.corrected_y, beta_refit
            )
            entry["refit_coefficients"] = [float(b) for b in beta_refit]
        except FitError as err:
            entry["note"] = f"refit failed: {err}"
    elapsed = time.perf_counter() - t0

    corrected_path = outdir / "corrected_response.csv"
    with corrected_path.open("w", encoding="utf-8") as handle:
        handle.write("row,corrected_response\n")
        for i, v in enumerate(estimate.corrected_y):
            handle.write(f"{i},{v!r}\n")

    columns = [
        "schema_version", "lam", "selection", "estimated_moved_fraction",
        "hamming_to_truth", "l2_before", "l2_after", "refit_deviance_observed", "note",
    ]
    rows = [{k: entry.get(k) for k in columns}]
    _write_outputs(outdir, cfg, [entry], rows, columns, elapsed)
    print(f"wrote permutation-recovery records to {outdir}")
    return EXIT_OK


def cmd_casestudy(args) -> int:
    cfg = load_config(args.config)
    family = family_from_config(cfg)
    data_cfg = data_from_config(cfg, override_path=getattr(args, "data", None))
    method = method_from_config(cfg)
    section = _as_section(cfg, "casestudy", required=True)
    _check_keys(section, {"replications", "blocking_variants"}, "casestudy")
    replications = args.replications or _get(section, "replications", "casestudy", int, default=100)
    variants_cfg = _get(section, "blocking_variants", "casestudy", list, required=True)
    seed = _seed_value(cfg, args.seed)
    outdir = _resolve_outdir(args, cfg)

    ingest = ingest_csv(data_cfg["path"], data_cfg)
    base = ingest.dataset
    family.check_support(base.y)

    variants: list[tuple[str, BlockPartition]] = []
    for i, cols in enumerate(variants_cfg):
        if not isinstance(cols, list) or not cols:
            raise ConfigError(f"field casestudy.blocking_variants[{i}] must be a non-empty list")
        variant_cfg = dict(data_cfg)
        variant_cfg["blocking"] = cols
        variant = ingest_csv(data_cfg["path"], variant_cfg)
        variants.append(("+".join(str(c) for c in cols), variant.blocks))
    full_name, full_blocks = variants[0]

    t0 = time.perf_counter()
    out_records, summary_rows = _run_casestudy(
        family, base, variants, method, replications, seed
    )
    elapsed = time.perf_counter() - t0

    columns = [
        "schema_version", "method", "variant", "selection", "n_reps", "n_na",
        "deviance_mean", "deviance_se", "k_over_n_mean",
    ]
    resolved = dict(cfg)
    resolved["casestudy"] = {**section, "replications": replications}
    _write_outputs(outdir, resolved, out_records, summary_rows, columns, elapsed)
    if _figures_enabled(args, cfg):
        _render_figures(outdir)
    print(
        f"case study: n={base.n}, K({full_name})={full_blocks.n_blocks}, "
        f"{replications} replications; wrote {len(out_records)} records to {outdir}"
    )
    return EXIT_OK


def _run_casestudy(family, base, variants, method, replications, seed):
    """Inject block permutations and score every method on the truth."""
    X, y_star = base.X, base.y
    full_name, full_blocks = variants[0]
    grid = sorted(_lambda_grid_from_data(family, base, method["prefactors"]))

    oracle_beta = fit_glm(family, X, y_star, columns=base.columns)
    oracle_dev = _deviance_against(family, X, y_star, oracle_beta)
    intercept_beta = fit_glm(family, np.ones((base.n, 1)), y_star)
    intercept_dev = _deviance_against(family, np.ones((base.n, 1)), y_star, intercept_beta)

    out_records: list[dict] = []
    scores: dict[tuple, list[float]] = {}
    na_counts: dict[tuple, int] = {}
    k_fractions: list[float] = []

    def push(rep, method_name, variant, selection, dev, note=None):
        key = (method_name, variant, selection)
        if dev is None:
            na_counts[key] = na_counts.get(key, 0) + 1
        else:
            scores.setdefault(key, []).append(dev)
            na_counts.setdefault(key, na_counts.get(key, 0))
        out_records.append(
            {
                "schema_version": rec.SCHEMA_VERSION,
                "kind": "casestudy",
                "replication": rep,
                "method": method_name,
                "variant": variant,
                "selection": selection,
                "deviance": dev,
                "note": note,
            }
        )

    for rep in range(replications):
        rng = np.random.Generator(np.random.Philox(key=seed, counter=rep << 128))
        pi = generate_permutation_blocks(full_blocks, rng)
        y = y_star[pi]
        k_fractions.append(float(np.mean(pi != np.arange(base.n))))

        push(rep, "oracle", None, None, oracle_dev)
        push(rep, "intercept_only", None, None, intercept_dev)
        try:
            naive_beta = fit_glm(family, X, y, columns=base.columns)
            push(rep, "naive", None, None, _deviance_against(family, X, y_star, naive_beta))
        except FitError as err:
            push(rep, "naive", None, None, None, note=f"NA: {err}")

        for variant_name, blocks in variants:
            data_variant = MergedDataset(X=X, y=y, blocks=blocks, columns=base.columns)
            for name, fitter in (("ll", fit_ll), ("chambers", fit_chambers)):
                if name not in method["methods"]:
                    continue
                try:
                    fit = fitter(family, data_variant)
                    dev = _deviance_against(family, X, y_star, fit.beta)
                    note = None
                    if not fit.converged:
                        dev, note = None, "NA: did not converge"
                    elif dev > intercept_dev:
                        # a root whose truth-scored deviance loses to the
                        # intercept-only model is reported as NA
                        dev, note = None, "NA: deviance exceeds intercept-only model"
                    push(rep, name, variant_name, None, dev, note=note)
                except (FitError, np.linalg.LinAlgError) as err:
                    push(rep, name, variant_name, None, None, note=f"NA: {err}")

        if "proposed" in method["methods"]:
            _casestudy_penalized(
                family, X, y, y_star, None, grid, method, seed, rep, push, base.columns
            )
        if "constrained" in method["methods"]:
            for variant_name, blocks in variants:
                _casestudy_penalized(
                    family, X, y, y_star, (variant_name, blocks), grid, method,
                    seed, rep, push, base.columns,
                )

    summary_rows = []
    for key in sorted(scores.keys() | na_counts.keys(), key=lambda k: (k[0], str(k[1]), str(k[2]))):
        vals = scores.get(key, [])
        mean = float(np.mean(vals)) if vals else None
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
        summary_rows.append(
            {
                "schema_version": rec.SCHEMA_VERSION,
                "method": key[0],
                "variant": key[1],
                "selection": key[2],
                "n_reps": replications,
                "n_na": na_counts.get(key, 0),
                "deviance_mean": mean,
                "deviance_se": se,
                "k_over_n_mean": float(np.mean(k_fractions)),
            }
        )
    return out_records, summary_rows


def _casestudy_penalized(family, X, y, y_star, variant, grid, method, seed, rep, push, columns):
    """Oracle- and validation-selected penalized fits for one variant."""
    variant_name, blocks = variant if variant is not None else (None, None)
    data = MergedDataset(X=X, y=y, blocks=blocks, columns=columns)
    method_name = "constrained" if variant is not None else "proposed"
    constrained = variant is not None

    try:
        path_fits = {}
        warm = None
        for lam in grid:
            opts = FitOptions(warm_start=warm)
            fit = (
                fit_penalized_constrained(family, data, lam, options=opts)
                if constrained
                else fit_penalized(family, data, lam, options=opts)
            )
            warm = (fit.beta, fit.xi)
            path_fits[lam] = fit
        devs = {lam: _deviance_against(family, X, y_star, fit.beta) for lam, fit in path_fits.items()}
        lam_oracle = min(sorted(devs), key=lambda lam: (devs[lam], -lam))
        push(rep, method_name, variant_name, "oracle", devs[lam_oracle])

        if method["selection"] == "validation":
            split_data = MergedDataset(
                X=X, y=y, blocks=blocks if constrained else None, columns=columns
            )
            train, validation = validation_split(
                split_data, method["validation_fraction"], seed + 7919 * rep
            )
            lam_val = select_lambda_validation(
                family, train, validation, grid, constrained=constrained
            )
            push(rep, method_name, variant_name, "validation", devs[lam_val])
    except (FitError, np.linalg.LinAlgError) as err:
        push(rep, method_name, variant_name, "oracle", None, note=f"NA: {err}")


def cmd_report(args) -> int:
    outdir = Path(args.results)
    if not outdir.exists():
        raise ConfigError(f"results directory not found: {outdir}")
    _render_figures(outdir)
    print(f"rendered figures in {outdir}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mismatchglm",
        description="Penalized GLM estimation robust to mismatch error in linked files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_data=False):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--replications", type=int, default=None, help="replication override")
        p.add_argument("--workers", type=int, default=None, help="parallel workers")
        fig = p.add_mutually_exclusive_group()
        fig.add_argument("--figures", dest="figures", action="store_true", default=None)
        fig.add_argument("--no-figures", dest="figures", action="store_false")
        if with_data:
            p.add_argument("--data", default=None, help="data file override")

    add_common(sub.add_parser("simulate", help="run a synthetic scenario"))
    add_common(sub.add_parser("fit", help="fit methods on one dataset"), with_data=True)
    add_common(sub.add_parser("recover", help="permutation correction and refit"), with_data=True)
    add_common(sub.add_parser("casestudy", help="full linkage-error pipeline"), with_data=True)
    report = sub.add_parser("report", help="render figures from a results directory")
    report.add_argument("--results", required=True, help="directory with records.ndtext")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "recover": cmd_recover,
    "casestudy": cmd_casestudy,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, IngestError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, DomainError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
