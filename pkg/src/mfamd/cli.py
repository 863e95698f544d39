"""Command-line front end: preprocess, fit, select, diagnose, simulate.

One YAML config file drives every command. Precedence is command-line
flags, then environment (``MFAMD_OUTPUT_DIR``, ``MFAMD_WORKERS``), then the
config file, then built-in defaults. Each command writes ``manifest.json``
last; a missing manifest means the run did not complete.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .data import (
    DataError,
    format_number as _num,
    load_csv,
    merge_rare_levels,
    read_schema,
    standardize,
    write_csv,
    write_merge_log,
    write_schema,
)
from .diagnostics import (
    bayesian_latent_residual,
    bayesian_residual_continuous,
    membership_summary,
    pick_participants,
    write_agreement,
    write_membership,
    write_residuals_continuous,
    write_residuals_latent,
)
from .sampler import DegenerateModel, DimensionError, PhaseSchedule, Priors
from .select import grid_search, write_scores
from .store import load_samples, save_samples
from .varsel import VarSelConfig, write_trace

log = logging.getLogger("mfamd")

DEFAULTS = {
    "data": None,
    "schema": None,
    "seed": None,
    "output_dir": None,
    "workers": 1,
    "G": 2,
    "Q": 2,
    "G_range": [1, 2, 3, 4],
    "Q_range": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
    "preprocess": {
        "standardize": True,
        "merge_threshold": 0.10,
        "max_missing": None,
        "drop_unobserved_levels": True,
    },
    "priors": {"dirichlet_alpha": 0.5, "lambda_mean": 0.0, "lambda_cov": 5.0, "psi_shape": 7.0, "psi_scale": 7.0},
    "schedule": {
        "burn_in_iters": 20000,
        "varsel_check_every": 1000,
        "varsel_stop_after_clean": 4,
        "posterior_iters": 100000,
        "thin": 100,
    },
    "varsel": {"epsilon_continuous": 0.95, "epsilon_categorical": 0.99},
    "flags": {
        "strict_paper_residuals": False,
        "fuzzy_vr": False,
        "warm_start": True,
        "sequential": True,
        "store_latents": True,
    },
    "residual_participants": 50,
    "progress_every": 1000,
    "simulate": {"scenario": "default", "N": 300, "truth_seed": 0, "separation": 3.0},
}

# excluded from the config hash: they change where or how fast, not what
_UNHASHED = ("output_dir", "workers")


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{path}{key}: unknown config field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key}: expected a mapping")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(config_path=None, overrides: dict | None = None, env=None) -> dict:
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        with open(config_path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: config must be a mapping")
        cfg = _merge(cfg, doc)
        base = Path(config_path).parent
        for key in ("data", "schema"):
            if cfg[key] and not Path(cfg[key]).is_absolute():
                cfg[key] = str(base / cfg[key])
    if env.get("MFAMD_OUTPUT_DIR"):
        cfg["output_dir"] = env["MFAMD_OUTPUT_DIR"]
    if env.get("MFAMD_WORKERS"):
        try:
            cfg["workers"] = int(env["MFAMD_WORKERS"])
        except ValueError:
            raise ConfigError("MFAMD_WORKERS: expected an integer") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def need_int(name, value, minimum=1):
        if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
            raise ConfigError(f"{name}: expected an integer >= {minimum}, got {value!r}")

    if cfg["seed"] is None:
        raise ConfigError("seed: required (no entropy default)")
    need_int("seed", cfg["seed"], 0)
    need_int("workers", cfg["workers"])
    need_int("G", cfg["G"])
    need_int("Q", cfg["Q"])
    for name in ("G_range", "Q_range"):
        rng = cfg[name]
        if not isinstance(rng, list) or not rng:
            raise ConfigError(f"{name}: expected a nonempty list")
        for v in rng:
            need_int(name, v)
    for name, value in cfg["schedule"].items():
        need_int(f"schedule.{name}", value)
    if cfg["schedule"]["posterior_iters"] % cfg["schedule"]["thin"]:
        raise ConfigError("schedule.thin: must divide schedule.posterior_iters")
    for name, value in cfg["varsel"].items():
        if not isinstance(value, (int, float)) or not 0 < value <= 1:
            raise ConfigError(f"varsel.{name}: expected a number in (0, 1], got {value!r}")
    for name in ("psi_shape", "psi_scale"):
        value = cfg["priors"][name]
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"priors.{name}: expected a positive number, got {value!r}")
    need_int("simulate.N", cfg["simulate"]["N"], 2)
    need_int("simulate.truth_seed", cfg["simulate"]["truth_seed"], 0)
    need_int("residual_participants", cfg["residual_participants"])
    need_int("progress_every", cfg["progress_every"], 0)
    if cfg["preprocess"]["max_missing"] is not None:
        need_int("preprocess.max_missing", cfg["preprocess"]["max_missing"], 0)
    thr = cfg["preprocess"]["merge_threshold"]
    if not isinstance(thr, (int, float)) or not 0 <= thr <= 1:
        raise ConfigError(f"preprocess.merge_threshold: expected a number in [0, 1], got {thr!r}")


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _frozen(v):
    # YAML lists become (nested) tuples so the frozen dataclass stays hashable
    return tuple(_frozen(x) for x in v) if isinstance(v, list) else v


def priors_from(cfg) -> Priors:
    p = cfg["priors"]
    try:
        return Priors(**{k: _frozen(v) for k, v in p.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"priors: {exc}") from None


def schedule_from(cfg) -> PhaseSchedule:
    return PhaseSchedule(**cfg["schedule"])


def varsel_from(cfg) -> VarSelConfig:
    return VarSelConfig(fuzzy=bool(cfg["flags"]["fuzzy_vr"]), **cfg["varsel"])


def output_dir(cfg) -> Path:
    if not cfg["output_dir"]:
        raise ConfigError("output_dir: required (config, MFAMD_OUTPUT_DIR or --output-dir)")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _versions() -> dict:
    return {"mfamd": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, cfg: dict, outputs, timings: dict, extra=None) -> None:
    """Deterministic manifest plus a separate timings file.

    Timings live in ``timings.json`` so that two identical runs produce
    byte-identical manifests.
    """
    with open(out / "timings.json", "w") as fh:
        json.dump(timings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": {k: v for k, v in cfg.items() if k not in _UNHASHED},
        "seed": cfg["seed"],
        "versions": _versions(),
        "outputs": sorted(outputs),
        "timings_file": "timings.json",
        **(extra or {}),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(cfg):
    """Load and preprocess per ``cfg['preprocess']``; returns (dataset, merge log, means, sds, id_column)."""
    if not cfg["data"] or not cfg["schema"]:
        raise ConfigError("data/schema: both paths are required")
    for key in ("data", "schema"):
        if not Path(cfg[key]).exists():
            raise ConfigError(f"{key}: file not found: {cfg[key]}")
    pp = cfg["preprocess"]
    schema, id_column = read_schema(cfg["schema"])
    ds = load_csv(
        cfg["data"],
        schema,
        id_column=id_column,
        max_missing=pp["max_missing"],
        drop_unobserved_levels=pp["drop_unobserved_levels"],
    )
    ds, merges = merge_rare_levels(ds, pp["merge_threshold"])
    means = sds = None
    if pp["standardize"] and ds.A:
        ds, means, sds = standardize(ds)
    return ds, merges, means, sds, id_column


def _write_dataset(out: Path, ds, id_column):
    id_column = id_column or "id"
    write_csv(out / "data.csv", ds, id_column=id_column)
    write_schema(out / "schema.yaml", ds.schema, id_column=id_column)
    return ["data.csv", "schema.yaml"]


def cmd_preprocess(cfg) -> list[str]:
    out = output_dir(cfg)
    ds, merges, means, sds, id_column = load_dataset(cfg)
    outputs = _write_dataset(out, ds, id_column)
    write_merge_log(out / "merge_log.csv", merges)
    outputs.append("merge_log.csv")
    if means is not None:
        with open(out / "standardization.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variable", "mean", "sd"])
            for v, m, s in zip(ds.schema, means, sds):
                w.writerow([v.name, _num(m), _num(s)])
        outputs.append("standardization.csv")
    log.info("preprocess rows=%d dropped_rows=%d dropped_vars=%d merged=%d", ds.N, ds.n_dropped, len(ds.dropped_variables), len(merges))
    return outputs


def write_fit_artifacts(out: Path, res, ds, cfg, id_column=None) -> list[str]:
    """Persist one FitResult: samples, traces, reports, membership, score."""
    out.mkdir(parents=True, exist_ok=True)
    outputs = _write_dataset(out, ds, id_column)
    save_samples(
        out / "samples",
        res.samples,
        {
            "G": res.G,
            "Q": res.Q,
            "retained": list(res.retained),
            "seed": cfg["seed"],
            "schedule": cfg["schedule"],
            "noise_fa_q": res.Q,
            "n_draws": res.samples.n_draws,
        },
    )
    outputs.append("samples/")
    write_trace(out / "varsel_trace.csv", res.varsel_trace)
    write_scores(out / "score.csv", [res.score])
    write_membership(out / "membership.csv", ds.row_ids(), res.membership)
    with open(out / "relabeling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", *[f"label_{g + 1}" for g in range(res.G)], "loss"])
        if res.relabeling is not None:
            for s, (perm, loss) in enumerate(zip(res.relabeling.permutations, res.relabeling.loss)):
                w.writerow([s, *(int(p) + 1 for p in perm), int(loss)])
    with open(out / "rotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        Q = res.Q
        w.writerow(["draw", "cluster", *[f"r{a + 1}{b + 1}" for a in range(Q) for b in range(Q)]])
        for s, per in enumerate(res.rotation.rotations):
            for g, R in enumerate(per):
                w.writerow([s, g + 1, *map(_num, R.ravel())])
    outputs += ["varsel_trace.csv", "score.csv", "membership.csv", "relabeling.csv", "rotations.csv"]
    return outputs


def _fit_options(cfg) -> dict:
    f = cfg["flags"]
    return {
        "warm_start": bool(f["warm_start"]),
        "store_latents": bool(f["store_latents"]),
        "progress_every": cfg["progress_every"],
    }


def cmd_fit(cfg) -> list[str]:
    from .fit import fit

    out = output_dir(cfg)
    ds, _, _, _, id_column = load_dataset(cfg)
    rng = np.random.default_rng(cfg["seed"])
    res = fit(ds, cfg["G"], cfg["Q"], priors_from(cfg), schedule_from(cfg), varsel_from(cfg), rng, **_fit_options(cfg))
    return write_fit_artifacts(out, res, ds, cfg, id_column)


def cmd_select(cfg) -> list[str]:
    out = output_dir(cfg)
    ds, _, _, _, id_column = load_dataset(cfg)
    workers = 1 if cfg["flags"]["sequential"] else cfg["workers"]
    best, scores, results, failures = grid_search(
        ds,
        cfg["G_range"],
        cfg["Q_range"],
        priors_from(cfg),
        schedule_from(cfg),
        varsel_from(cfg),
        cfg["seed"],
        workers=workers,
        **_fit_options(cfg),
    )
    write_scores(out / "scores.csv", scores)
    with open(out / "chosen.json", "w") as fh:
        json.dump(
            {
                "G": best.G,
                "Q": best.Q,
                "bic_mcmc": best.bic_mcmc,
                "max_loglik": best.max_loglik,
                "nu": best.nu,
                "retained": list(best.retained),
                "failed_cells": [{"G": g, "Q": q, "error": e} for (g, q), e in sorted(failures.items())],
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    outputs = ["scores.csv", "chosen.json"]
    outputs += ["best/" + p for p in write_fit_artifacts(out / "best", results[(best.G, best.Q)], ds, cfg, id_column)]
    return outputs


def _read_reference(path, ids):
    with open(path, newline="") as fh:
        rows = {r["id"]: r["cluster"] for r in csv.DictReader(fh)}
    missing = [i for i in ids if i not in rows]
    if missing:
        raise ConfigError(f"reference: ids missing from {path}: {missing[:5]}")
    return [rows[i] for i in ids]


def cmd_diagnose(cfg, fit_dir, reference=None) -> list[str]:
    out = output_dir(cfg)
    fit_dir = Path(fit_dir)
    if not (fit_dir / "samples" / "manifest.json").exists():
        raise ConfigError(f"fit_dir: no sample store under {fit_dir}")
    schema, id_column = read_schema(fit_dir / "schema.yaml")
    ds = load_csv(fit_dir / "data.csv", schema, id_column=id_column, drop_unobserved_levels=False)
    samples, manifest = load_samples(fit_dir / "samples")
    ids = ds.row_ids()

    summary = membership_summary(samples.alloc, samples.G)
    write_membership(out / "membership.csv", ids, summary)
    outputs = ["membership.csv"]

    rows = pick_participants(ds.N, cfg["residual_participants"], np.random.default_rng(cfg["seed"]))
    if samples.theta is not None:
        names, resid = bayesian_residual_continuous(samples, ds, strict_paper=cfg["flags"]["strict_paper_residuals"])
        write_residuals_continuous(out / "residuals_continuous.csv", ids, names, resid, rows)
        write_residuals_latent(out / "residuals_latent.csv", ids, bayesian_latent_residual(samples, ds), rows)
        outputs += ["residuals_continuous.csv", "residuals_latent.csv"]

    if reference:
        truth = _read_reference(reference, ids)
        write_agreement(out / "agreement.csv", {"hard_vs_reference": (summary.hard, truth)})
        outputs.append("agreement.csv")
    return outputs


def cmd_simulate(cfg) -> list[str]:
    from .simulate import default_scenario, generate, write_truth

    out = output_dir(cfg)
    sim_cfg = cfg["simulate"]
    if sim_cfg["scenario"] != "default":
        raise ConfigError(f"simulate.scenario: unknown scenario {sim_cfg['scenario']!r}")
    tm = default_scenario(sim_cfg["truth_seed"], sim_cfg["separation"])
    sim = generate(tm, int(sim_cfg["N"]), np.random.default_rng(cfg["seed"]))
    outputs = _write_dataset(out, sim.dataset, "id")
    write_truth(out / "truth.csv", sim, tm)
    with open(out / "noise_variables.txt", "w") as fh:
        fh.writelines(tm.schema[j].name + "\n" for j in tm.noise)
    return outputs + ["truth.csv", "noise_variables.txt"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfamd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--data")
    parser.add_argument("--schema")
    parser.add_argument("-v", "--verbose", action="store_true", help="heartbeat progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", help="clean, merge rare genotypes, standardize")
    p_fit = sub.add_parser("fit", help="fit a single (G, Q) model")
    p_fit.add_argument("--G", type=int)
    p_fit.add_argument("--Q", type=int)
    p_sel = sub.add_parser("select", help="BIC-MCMC grid search over G and Q")
    p_sel.add_argument("--G-range", type=int, nargs="+")
    p_sel.add_argument("--Q-range", type=int, nargs="+")
    p_diag = sub.add_parser("diagnose", help="membership, residual and agreement tables from a fit")
    p_diag.add_argument("fit_dir")
    p_diag.add_argument("--reference", help="CSV with id,cluster columns to compare against")
    p_sim = sub.add_parser("simulate", help="generate a dataset with known truth")
    p_sim.add_argument("--N", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    overrides = {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "workers": args.workers,
        "data": args.data,
        "schema": args.schema,
        "G": getattr(args, "G", None),
        "Q": getattr(args, "Q", None),
        "G_range": getattr(args, "G_range", None),
        "Q_range": getattr(args, "Q_range", None),
        "simulate.N": getattr(args, "N", None),
    }
    try:
        return _run(args, overrides)
    finally:
        log.removeHandler(handler)


def _run(args, overrides) -> int:
    start = time.perf_counter()
    try:
        cfg = resolve_config(args.config, overrides)
        out = output_dir(cfg)
        if args.command == "diagnose":
            outputs = cmd_diagnose(cfg, args.fit_dir, args.reference)
        else:
            outputs = {
                "preprocess": cmd_preprocess,
                "fit": cmd_fit,
                "select": cmd_select,
                "simulate": cmd_simulate,
            }[args.command](cfg)
        write_manifest(out, args.command, cfg, outputs, {"wall_seconds": time.perf_counter() - start})
    except (ConfigError, DataError, DimensionError) as exc:
        print(f"mfamd: error: {exc}", file=sys.stderr)
        return 2
    except (DegenerateModel, OSError) as exc:
        print(f"mfamd: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
