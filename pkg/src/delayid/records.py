"""File formats: trajectory CSV, chain trace CSV, JSON and line-annotated YAML configs."""

from __future__ import annotations

import csv
import json
import re

import numpy as np
import yaml

from .dde_core import TrajectoryData
from .errors import ConfigError
from .gibbs import ChainRecord


def write_trajectory_csv(path, data: TrajectoryData) -> None:
    cols = ["t"] + [f"x{j + 1}" for j in range(data.m)]
    table = np.column_stack([data.times, data.states])
    np.savetxt(path, table, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def read_trajectory_csv(path, dt: float | None = None) -> TrajectoryData:
    """Read ``t,x1,...`` columns. ``dt`` defaults to the (uniform) sample spacing."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read trajectory {path}: {exc}") from exc
    if header[0] != "t" or table.shape[1] < 2:
        raise ConfigError(f"{path}: expected columns t,x1,...; got {header}")
    t = table[:, 0]
    steps = np.diff(t)
    if dt is None:
        if steps.size == 0:
            raise ConfigError(f"{path}: need at least two samples")
        dt = float(np.median(steps))
    if not np.allclose(steps, dt, rtol=1e-6, atol=1e-9 * max(1.0, abs(t[-1]))):
        raise ConfigError(f"{path}: samples are not uniformly spaced at dt={dt}")
    return TrajectoryData(dt=dt, states=table[:, 1:], t0=float(t[0]))


_TRACE_META = ("channel", "burn_end", "fix_start", "tau_fix_iteration", "cholesky_failures")


def write_trace_csv(path, chain: ChainRecord) -> None:
    """Full chain dump: one row per iteration, metadata as leading ``#`` lines."""
    with open(path, "w", newline="") as fh:
        for key in _TRACE_META:
            fh.write(f"# {key}={getattr(chain, key)}\n")
        w = csv.writer(fh)
        w.writerow(["iteration", "tau", "window_lo", "window_hi", "sigma2", "nu", "p0"]
                   + [f"Z[{n}]" for n in chain.names] + [f"theta[{n}]" for n in chain.names])
        for i in range(len(chain)):
            w.writerow([i, int(chain.tau[i]), int(chain.window[i, 0]), int(chain.window[i, 1]),
                        repr(float(chain.sigma2[i])), repr(float(chain.nu[i])), repr(float(chain.p0[i]))]
                       + [int(z) for z in chain.Z[i]] + [repr(float(v)) for v in chain.theta[i]])


def read_trace_csv(path) -> ChainRecord:
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            k, v = ln[1:].strip().split("=", 1)
            meta[k] = None if v == "None" else int(v)
        else:
            body.append(ln)
    rows = list(csv.reader(body))
    head, rows = rows[0], rows[1:]
    names = [h[2:-1] for h in head if h.startswith("Z[")]
    K = len(names)
    a = np.array(rows, dtype=float)
    return ChainRecord(
        tau=a[:, 1].astype(np.int64), Z=a[:, 7:7 + K].astype(np.int8), theta=a[:, 7 + K:7 + 2 * K],
        sigma2=a[:, 4], nu=a[:, 5], p0=a[:, 6], window=a[:, 2:4].astype(np.int64),
        burn_end=meta["burn_end"], fix_start=meta["fix_start"], tau_fix_iteration=meta["tau_fix_iteration"],
        names=names, channel=meta["channel"], cholesky_failures=meta["cholesky_failures"],
    )


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


class Located(dict):
    """A mapping that remembers the source line of each key (1-based)."""

    lines: dict


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = Located()
    out.lines = {}
    for knode, vnode in node.value:
        key = loader.construct_object(knode, deep=True)
        if key in out:
            raise ConfigError(f"line {knode.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(vnode, deep=True)
        out.lines[key] = knode.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
# YAML 1.1 reads "1e-100" (no dot) as a string; accept the usual float spellings
_LineLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def load_config_text(text: str, source: str = "<config>"):
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except ValueError:
            doc = None
        if isinstance(doc, dict):
            return doc
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return doc


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load_config_text(text, str(path))
