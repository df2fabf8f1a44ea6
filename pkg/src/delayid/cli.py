"""Command-line front end: ``delayid {simulate,discover,predict,report}``.

Each run reads one YAML (or JSON) config, writes its outputs into ``--out``
and a ``manifest.json`` holding the fully resolved config. Passing a
manifest back as ``--config`` reproduces the run exactly.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import posterior, predictor, records
from .basis import CandidateCatalog, LibraryBuilder, correlation_screen, parse_term, reject_singular, resolve_correlations
from .dde_core import SparseDelayModel, WeightedTerm, simulate
from .errors import ConfigError, CorrelationGateError, DelayIdError, NumericalError
from .gibbs import Hyperparameters, SamplerConfig, check_window, run_chain
from .signal_prep import FilterSpec, NoiseSpec, add_noise, prepare

log = logging.getLogger("delayid")

EXIT_OK, EXIT_CONFIG, EXIT_GATE, EXIT_NUMERIC = 0, 2, 3, 4

REQUIRED = object()


def _hyper_defaults():
    return {f.name: f.default for f in dataclasses.fields(Hyperparameters)}


SCHEMAS = {
    "simulate": {
        "model": {"equations": REQUIRED, "delay": REQUIRED},
        "history": REQUIRED,
        "dt": REQUIRED,
        "t_end": REQUIRED,
        "noise": {"fraction": 0.0, "seed": 0},
    },
    "discover": {
        "data": REQUIRED,
        "dt": None,
        "catalog": REQUIRED,
        "window": REQUIRED,
        "n_mc": 2000,
        "seed": 0,
        "channels": None,
        "hyperparameters": _hyper_defaults(),
        "filter": {"order": 4, "cutoff": 0.1},
        "pip_threshold": 0.5,
        "correlation": {"threshold": 0.99, "drop": [], "auto_drop": False},
        "drop_singular": False,
        "sampler": {
            "trim": 0,
            "history": "constant",
            "history_level": None,
            "init": "uniform",
            "init_p0": 0.1,
            "init_nu": 0.5,
            "shrink_threshold": 1e-100,
            "min_window_start": 5,
        },
    },
    "predict": {
        "model": None,
        "chains": None,
        "history": REQUIRED,
        "t_end": REQUIRED,
        "dt": REQUIRED,
        "n_draws": 200,
        "seed": 0,
        "truth": None,
        "phase": {"channel": 0, "delay": None},
    },
    "report": {
        "truth": REQUIRED,
        "runs": REQUIRED,
    },
}

# keys whose values are file paths (resolved against the config's directory)
PATH_KEYS = {"discover": ["data"], "predict": ["model", "chains"], "report": []}
NULLABLE_SECTIONS = {("discover", "filter")}


def _line(node, key):
    lines = getattr(node, "lines", None)
    return f"line {lines[key]}: " if lines and key in lines else ""


def resolve(user, schema, path: str):
    """Merge ``user`` over ``schema`` defaults; reject unknown and missing keys."""
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(user).__name__}")
    out = {}
    for key in user:
        if key not in schema:
            raise ConfigError(f"{_line(user, key)}unknown key {path}.{key}")
    for key, default in schema.items():
        where = f"{path}.{key}"
        if key in user:
            value = user[key]
            if isinstance(default, dict) and default:
                if value is None and tuple(where.split(".")[-2:]) in NULLABLE_SECTIONS:
                    out[key] = None
                else:
                    out[key] = resolve(value, default, where)
            else:
                out[key] = _plain(value)
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {where}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def _plain(value):
    # strip line bookkeeping so manifests serialize as ordinary JSON
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def load_run_config(path: Path, command: str):
    doc = records.load_config(path)
    if "command" in doc and "config" in doc:  # a manifest from an earlier run
        if doc["command"] != command:
            raise ConfigError(f"{path} is a manifest for '{doc['command']}', not '{command}'")
        doc = doc["config"]
    unknown = [k for k in doc if k not in SCHEMAS]
    if unknown:
        raise ConfigError(f"{_line(doc, unknown[0])}unknown top-level section '{unknown[0]}'")
    resolved = {k: resolve(doc[k], SCHEMAS[k], k) for k in doc}
    if command not in resolved:
        raise ConfigError(f"{path} has no '{command}' section")
    cfg = resolved[command]
    base = path.resolve().parent
    for key in PATH_KEYS.get(command, []):
        v = cfg.get(key)
        if isinstance(v, str):
            cfg[key] = str((base / v).resolve())
        elif isinstance(v, list):
            cfg[key] = [str((base / p).resolve()) for p in v]
    if command == "report":
        if not isinstance(cfg["runs"], list) or not cfg["runs"]:
            raise ConfigError("report.runs: expected a non-empty list of {label, summary}")
        for i, run in enumerate(cfg["runs"]):
            cfg["runs"][i] = run = resolve(run, {"label": None, "summary": REQUIRED}, f"report.runs[{i}]")
            run["summary"] = str((base / run["summary"]).resolve())
    return cfg


def _number(cfg, key, where, kind=float, positive=False):
    try:
        v = kind(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {cfg[key]!r}") from exc
    if positive and not v > 0:
        raise ConfigError(f"{where}.{key}: must be > 0")
    return v


def model_from_config(spec, where: str) -> SparseDelayModel:
    """``{equations: [[[coef, term], ...], ...], delay: d}`` -> model."""
    try:
        eqs = [[WeightedTerm(parse_term(str(t)), float(c)) for c, t in eq] for eq in spec["equations"]]
        return SparseDelayModel(len(eqs), eqs, float(spec["delay"]))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def manifest(command: str, cfg: dict) -> dict:
    return {"command": command, "config": {command: cfg}}


def cmd_simulate(cfg, out: Path, trace: bool = False) -> None:
    model = model_from_config(cfg["model"], "simulate.model")
    dt = _number(cfg, "dt", "simulate", positive=True)
    t_end = _number(cfg, "t_end", "simulate", positive=True)
    history = np.broadcast_to(np.asarray(cfg["history"], dtype=float), (model.m,))
    noise = NoiseSpec(float(cfg["noise"]["fraction"]), int(cfg["noise"]["seed"]))
    clean = simulate(model, history, t_end, dt)
    noisy = add_noise(clean, noise)
    records.write_trajectory_csv(out / "clean.csv", clean)
    records.write_trajectory_csv(out / "data.csv", noisy)
    records.write_json(out / "manifest.json", manifest("simulate", cfg))
    log.info("wrote %d samples of %d states to %s", clean.n, clean.m, out / "data.csv")


def _sampler_config(cfg) -> SamplerConfig:
    s = cfg["sampler"]
    window = cfg["window"]
    if not (isinstance(window, list) and len(window) == 2):
        raise ConfigError("discover.window: expected [start, end]")
    try:
        return SamplerConfig(
            window=(int(window[0]), int(window[1])),
            n_mc=int(cfg["n_mc"]),
            hyper=Hyperparameters(**{k: float(v) for k, v in cfg["hyperparameters"].items()}),
            shrink_threshold=float(s["shrink_threshold"]),
            min_window_start=int(s["min_window_start"]),
            trim=int(s["trim"]),
            history=str(s["history"]),
            history_level=None if s["history_level"] is None else tuple(float(v) for v in s["history_level"]),
            init_nu=None if s["init_nu"] is None else float(s["init_nu"]),
            init_p0=float(s["init_p0"]),
            init=str(s["init"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"discover: {exc}") from exc


def prepare_catalog(data, catalog: CandidateCatalog, cfg, sampler: SamplerConfig) -> CandidateCatalog:
    """Apply the drop list, reject zero-operand reciprocals, then gate on correlations at the window midpoint."""
    corr = cfg["correlation"]
    drop = [str(d) for d in corr["drop"]]
    if drop:
        try:
            catalog = catalog.without(drop)
        except KeyError as exc:
            raise ConfigError(f"discover.correlation.drop: {exc.args[0]}") from exc
    bad = reject_singular(data, catalog)
    if bad:
        if not cfg["drop_singular"]:
            raise ConfigError(f"reciprocal candidates {bad} hit a zero operand on this dataset; "
                              "remove them via discover.correlation.drop or set discover.drop_singular")
        log.warning("dropping reciprocal candidates with zero operands: %s", bad)
        catalog = catalog.without(bad)
    probe = LibraryBuilder(data, catalog, 0, sampler.trim, history=sampler.history,
                           history_level=sampler.history_level)
    mid = (sampler.window[0] + sampler.window[1]) // 2
    pairs = correlation_screen(probe.library(mid), float(corr["threshold"]))
    catalog, _ = resolve_correlations(catalog, pairs, auto_drop=bool(corr["auto_drop"]))
    return catalog


def cmd_discover(cfg, out: Path, trace: bool = False) -> dict:
    raw = records.read_trajectory_csv(cfg["data"], cfg["dt"])
    filt = cfg["filter"]
    spec = None if filt is None else FilterSpec(int(filt["order"]), float(filt["cutoff"]))
    data = prepare(raw, spec)
    try:
        catalog = CandidateCatalog.parse(str(t) for t in cfg["catalog"])
        catalog.check(data.m)
    except ValueError as exc:
        raise ConfigError(f"discover.catalog: {exc}") from exc
    sampler = _sampler_config(cfg)
    if sampler.history_level is not None and len(sampler.history_level) != data.m:
        raise ConfigError(f"discover.sampler.history_level: need {data.m} values")
    catalog = prepare_catalog(data, catalog, cfg, sampler)

    channels = list(range(data.m)) if cfg["channels"] is None else [int(c) for c in cfg["channels"]]
    streams = np.random.SeedSequence(int(cfg["seed"])).spawn(data.m)
    summaries = []
    for c in channels:
        builder = LibraryBuilder(data, catalog, c, sampler.trim, history=sampler.history,
                                 history_level=sampler.history_level)
        check_window(sampler, builder)
        chain = run_chain(data, catalog, sampler, np.random.default_rng(streams[c]), channel=c, builder=builder)
        if trace:
            records.write_trace_csv(out / f"trace_x{c + 1}.csv", chain)
        summaries.append(posterior.summarize(chain, float(cfg["pip_threshold"]), dt=data.dt))
    rep = posterior.report(summaries, catalog, data.dt)
    rep["catalog"] = catalog.names
    records.write_json(out / "summary.json", rep)
    (out / "equations.txt").write_text("\n".join(rep["equations"]) + "\n")
    records.write_json(out / "manifest.json", manifest("discover", cfg))
    for line in rep["equations"]:
        print(line)
    return rep


def _load_model(path) -> SparseDelayModel:
    doc = records.read_json(path)
    if "model" in doc:
        doc = doc["model"]
    try:
        return posterior.model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a model or summary file ({exc})") from exc


def cmd_predict(cfg, out: Path, trace: bool = False) -> None:
    if cfg["model"] is None and cfg["chains"] is None:
        raise ConfigError("predict needs predict.model, predict.chains or both")
    dt = _number(cfg, "dt", "predict", positive=True)
    t_end = _number(cfg, "t_end", "predict", positive=True)
    truth = None
    if cfg["truth"] is not None:
        tm = model_from_config(cfg["truth"], "predict.truth")
        truth = simulate(tm, cfg["history"], t_end, dt)
    if cfg["model"] is not None:
        model = _load_model(cfg["model"])
        pred = predictor.predict(model, cfg["history"], t_end, dt)
        _write_prediction(out / "prediction.csv", pred, truth)
        ph = cfg["phase"]
        delay = model.delay if ph["delay"] is None else float(ph["delay"])
        predictor.write_phase_csv(out / "phase.csv", predictor.phase_portrait(pred, delay, int(ph["channel"])))
    if cfg["chains"] is not None:
        paths = cfg["chains"] if isinstance(cfg["chains"], list) else [cfg["chains"]]
        chains = [records.read_trace_csv(p) for p in paths]
        catalog = CandidateCatalog.parse(chains[0].names)
        band = predictor.predict_with_uncertainty(chains, catalog, cfg["history"], t_end, dt,
                                                  int(cfg["n_draws"]), np.random.default_rng(int(cfg["seed"])))
        predictor.write_band_csv(out / "band.csv", band, None if truth is None else truth.states)
        records.write_json(out / "band_info.json", {"n_draws": band.n_draws, "n_diverged": band.n_diverged,
                                                    "iterations": band.draw_iterations.tolist()})
    records.write_json(out / "manifest.json", manifest("predict", cfg))


def _write_prediction(path, pred, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        m = pred.m
        w.writerow(["t"] + [f"x{j + 1}" for j in range(m)] + ([f"truth_x{j + 1}" for j in range(m)] if truth is not None else []))
        for i, t in enumerate(pred.times):
            row = [repr(float(t))] + [repr(float(v)) for v in pred.states[i]]
            if truth is not None:
                row += [repr(float(v)) for v in truth.states[i]]
            w.writerow(row)


def cmd_report(cfg, out: Path, trace: bool = False) -> list[dict]:
    truth = model_from_config(cfg["truth"], "report.truth")
    rows = []
    for run in cfg["runs"]:
        model = _load_model(run["summary"])
        rows.append({
            "label": str(run["label"] or Path(run["summary"]).parent.name),
            "e_theta": posterior.parameter_error(model, truth),
            "tau_seconds": model.delay,
            "n_terms": model.n_terms(),
        })
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["label", "e_theta", "tau_seconds", "n_terms"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "e_theta": repr(r["e_theta"]), "tau_seconds": repr(r["tau_seconds"])})
    records.write_json(out / "report.json", rows)
    records.write_json(out / "manifest.json", manifest("report", cfg))
    for r in rows:
        print(f"{r['label']}\te_theta={r['e_theta']:.3e}\ttau={r['tau_seconds']:.4g}")
    return rows


COMMANDS = {"simulate": cmd_simulate, "discover": cmd_discover, "predict": cmd_predict, "report": cmd_report}
SEED_KEYS = {"simulate": ("noise", "seed"), "discover": ("seed",), "predict": ("seed",)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delayid", description="Sparse Bayesian discovery of delay differential equations.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path, help="YAML/JSON run config or an earlier manifest")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--trace", action="store_true", help="dump the full chain of every equation (discover)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.command)
        if args.seed is not None:
            if args.command not in SEED_KEYS:
                raise ConfigError(f"--seed has no effect on '{args.command}'")
            node = cfg
            *parents, leaf = SEED_KEYS[args.command]
            for k in parents:
                node = node[k]
            node[leaf] = args.seed
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out, args.trace)
    except CorrelationGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DelayIdError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
