"""File formats, configuration parsing and run manifests.

CSV is used for arrays and JSON for configurations and results. Floats are
always written with 17 significant digits so that a write/read cycle is
lossless.

Formats
-------
matching   ``x,y,mu``: one row per arrangement; ``y=0`` rows are single men,
           ``x=0`` rows single women; absent cells are zero.
basis      ``x,y,k,phi``: one row per couple type and basis function.
surplus    ``x,y,Phi``.
margins    ``side,type,mass`` with side ``men`` or ``women``.
potentials ``side,type,potential``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from .core import Margins, MatchingPatterns, TypeSpace
from .entropy import (
    ChooSiow,
    EntropyModel,
    FullHeteroskedastic,
    GenderHeteroskedastic,
    MixedLogit,
    MixedLogitSpec,
    NestedLogit,
    NestedLogitSpec,
)
from .exceptions import InputError

FLOAT_FMT = ".17g"


def fmt(v) -> str:
    return format(float(v), FLOAT_FMT)


def _read_rows(path, required):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        if header != list(required):
            raise InputError(f"{path}: expected header {','.join(required)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append({k.strip(): v.strip() for k, v in row.items()})
            except AttributeError:
                raise InputError(f"{path}:{lineno}: wrong number of fields") from None
            rows[-1]["_line"] = lineno
    return rows


def _as_int(row, key, path):
    try:
        v = float(row[key])
    except (TypeError, ValueError):
        raise InputError(f"{path}:{row['_line']}: {key}={row[key]!r} is not a number") from None
    if v != int(v):
        raise InputError(f"{path}:{row['_line']}: {key} must be an integer")
    return int(v)


def _as_float(row, key, path):
    try:
        v = float(row[key])
    except (TypeError, ValueError):
        raise InputError(f"{path}:{row['_line']}: {key}={row[key]!r} is not a number") from None
    if not np.isfinite(v):
        raise InputError(f"{path}:{row['_line']}: {key} is not finite")
    return v


# --------------------------------------------------------------------------
# matchings


def read_matching_csv(path, space: TypeSpace | None = None, N: float | None = None) -> MatchingPatterns:
    """Read a matching file.

    The market size is taken from ``space`` or inferred from the largest type
    numbers. Without ``N``, a file of whole numbers adding up to more than
    one is read as household counts (``N`` is their total and the masses
    are divided by it); anything else is read as frequencies with ``N = 1``.
    """
    rows = _read_rows(path, ("x", "y", "mu"))
    cells = {}
    for r in rows:
        x, y, v = _as_int(r, "x", path), _as_int(r, "y", path), _as_float(r, "mu", path)
        if x == 0 and y == 0:
            raise InputError(f"{path}:{r['_line']}: (0, 0) is not an arrangement")
        if x < 0 or y < 0:
            raise InputError(f"{path}:{r['_line']}: type numbers must be nonnegative")
        if v < 0:
            raise InputError(f"{path}:{r['_line']}: negative mass {v}")
        if (x, y) in cells:
            raise InputError(f"{path}:{r['_line']}: duplicate cell ({x}, {y})")
        cells[(x, y)] = v
    if not cells:
        raise InputError(f"{path}: no data rows")
    if space is None:
        space = TypeSpace(max(x for x, _ in cells), max(y for _, y in cells))
    X, Y = space.X, space.Y
    muxy, mux0, mu0y = np.zeros((X, Y)), np.zeros(X), np.zeros(Y)
    for (x, y), v in cells.items():
        if x > X or y > Y:
            raise InputError(f"{path}: cell ({x}, {y}) lies outside a {X}x{Y} market")
        if y == 0:
            mux0[x - 1] = v
        elif x == 0:
            mu0y[y - 1] = v
        else:
            muxy[x - 1, y - 1] = v
    mu = MatchingPatterns(muxy, mux0, mu0y)
    total = mu.total_mass
    values = np.array(list(cells.values()))
    if N is None:
        N = 1.0
        if total > 1.0 + 1e-8 and np.all(values == np.round(values)):
            N = total
            mu = MatchingPatterns(muxy / total, mux0 / total, mu0y / total)
    return mu.with_N(N)


def write_matching_csv(mu: MatchingPatterns, path):
    X, Y = mu.mu_xy.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "mu"])
        for x in range(X):
            for y in range(Y):
                w.writerow([x + 1, y + 1, fmt(mu.mu_xy[x, y])])
        for x in range(X):
            w.writerow([x + 1, 0, fmt(mu.mu_x0[x])])
        for y in range(Y):
            w.writerow([0, y + 1, fmt(mu.mu_0y[y])])


# --------------------------------------------------------------------------
# bases, surplus, margins, potentials


def read_basis_csv(path, space: TypeSpace | None = None):
    """Dense ``(X*Y, K)`` basis matrix; every (x, y, k) must be present."""
    rows = _read_rows(path, ("x", "y", "k", "phi"))
    entries = {}
    for r in rows:
        key = (_as_int(r, "x", path), _as_int(r, "y", path), _as_int(r, "k", path))
        if min(key) < 1:
            raise InputError(f"{path}:{r['_line']}: x, y and k start at 1")
        if key in entries:
            raise InputError(f"{path}:{r['_line']}: duplicate entry {key}")
        entries[key] = _as_float(r, "phi", path)
    if not entries:
        raise InputError(f"{path}: no data rows")
    if space is None:
        space = TypeSpace(max(k[0] for k in entries), max(k[1] for k in entries))
    K = max(k[2] for k in entries)
    X, Y = space.X, space.Y
    if len(entries) != X * Y * K:
        raise InputError(f"{path}: expected {X * Y * K} entries for a {X}x{Y} market with {K} bases, got {len(entries)}")
    phi = np.zeros((X * Y, K))
    for (x, y, k), v in entries.items():
        if x > X or y > Y:
            raise InputError(f"{path}: entry ({x}, {y}) lies outside a {X}x{Y} market")
        phi[(x - 1) * Y + (y - 1), k - 1] = v
    return phi


def write_basis_csv(phi, space: TypeSpace, path):
    phi = np.asarray(phi, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "k", "phi"])
        for x in range(space.X):
            for y in range(space.Y):
                for k in range(phi.shape[1]):
                    w.writerow([x + 1, y + 1, k + 1, fmt(phi[x * space.Y + y, k])])


def read_surplus_csv(path, space: TypeSpace | None = None):
    rows = _read_rows(path, ("x", "y", "Phi"))
    cells = {}
    for r in rows:
        key = (_as_int(r, "x", path), _as_int(r, "y", path))
        if min(key) < 1:
            raise InputError(f"{path}:{r['_line']}: surplus is defined on couples only (x, y >= 1)")
        if key in cells:
            raise InputError(f"{path}:{r['_line']}: duplicate cell {key}")
        cells[key] = _as_float(r, "Phi", path)
    if not cells:
        raise InputError(f"{path}: no data rows")
    if space is None:
        space = TypeSpace(max(k[0] for k in cells), max(k[1] for k in cells))
    if len(cells) != space.X * space.Y:
        raise InputError(f"{path}: a {space.X}x{space.Y} surplus needs {space.X * space.Y} rows, got {len(cells)}")
    Phi = np.zeros((space.X, space.Y))
    for (x, y), v in cells.items():
        Phi[x - 1, y - 1] = v
    return Phi


def _read_sided(path, value_col):
    rows = _read_rows(path, ("side", "type", value_col))
    sides = {"men": {}, "women": {}}
    for r in rows:
        side = r["side"]
        if side not in sides:
            raise InputError(f"{path}:{r['_line']}: side must be 'men' or 'women', got {side!r}")
        t = _as_int(r, "type", path)
        if t < 1 or t in sides[side]:
            raise InputError(f"{path}:{r['_line']}: bad or duplicate type {t}")
        sides[side][t] = _as_float(r, value_col, path)
    out = []
    for side, d in sides.items():
        if not d or sorted(d) != list(range(1, len(d) + 1)):
            raise InputError(f"{path}: {side} types must be numbered 1..K without gaps")
        out.append(np.array([d[t] for t in range(1, len(d) + 1)]))
    return out


def read_margins_csv(path) -> Margins:
    n, m = _read_sided(path, "mass")
    return Margins(n, m)


def write_margins_csv(q: Margins, path):
    _write_sided(q.n, q.m, "mass", path)


def write_potentials_csv(u, v, path):
    _write_sided(u, v, "potential", path)


def read_potentials_csv(path):
    return tuple(_read_sided(path, "potential"))


def _write_sided(a, b, col, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["side", "type", col])
        for i, v in enumerate(a):
            w.writerow(["men", i + 1, fmt(v)])
        for j, v in enumerate(b):
            w.writerow(["women", j + 1, fmt(v)])


# --------------------------------------------------------------------------
# model configuration

_NUM = {"type": "number"}
_NUMS = {"type": "array", "items": _NUM, "minItems": 1}
_NESTS = {"type": "array", "minItems": 1, "items": {"type": "array", "items": {"type": "integer"}, "minItems": 1}}
_LABELS = {"type": "array", "items": {"type": ["string", "null"]}}
_MIXED_SIDE = {
    "type": "object",
    "required": ["Z", "atoms", "weights"],
    "properties": {
        "Z": {"type": "array", "items": _NUMS, "minItems": 1},
        "atoms": {"type": "array", "items": _NUMS, "minItems": 1},
        "weights": {"type": "array", "minItems": 1},
        "s": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["family"],
    "properties": {
        "family": {
            "enum": ["choo_siow", "gender_heteroskedastic", "full_heteroskedastic", "nested_logit", "mixed_logit"]
        }
    },
    "allOf": [
        {
            "if": {"properties": {"family": {"const": "choo_siow"}}},
            "then": {"properties": {"family": {}}, "additionalProperties": False},
        },
        {
            "if": {"properties": {"family": {"const": "gender_heteroskedastic"}}},
            "then": {"properties": {"family": {}, "tau": _NUM}, "additionalProperties": False},
        },
        {
            "if": {"properties": {"family": {"const": "full_heteroskedastic"}}},
            "then": {
                "required": ["sigma", "tau"],
                "properties": {"family": {}, "sigma": _NUMS, "tau": _NUMS},
                "additionalProperties": False,
            },
        },
        {
            "if": {"properties": {"family": {"const": "nested_logit"}}},
            "then": {
                "required": ["nests_men", "nests_women", "rho", "delta"],
                "properties": {
                    "family": {},
                    "nests_men": _NESTS,
                    "nests_women": _NESTS,
                    "rho": _NUMS,
                    "delta": _NUMS,
                    "rho_labels": _LABELS,
                    "delta_labels": _LABELS,
                },
                "additionalProperties": False,
            },
        },
        {
            "if": {"properties": {"family": {"const": "mixed_logit"}}},
            "then": {
                "required": ["men", "women"],
                "properties": {"family": {}, "men": _MIXED_SIDE, "women": _MIXED_SIDE},
                "additionalProperties": False,
            },
        },
    ],
}


def _validate(obj, schema, what):
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{what} config, field {where}: {exc.message}") from None


def load_json(source):
    """Parse a JSON file path, a JSON string, or pass a dict through."""
    if isinstance(source, dict):
        return source
    text = str(source)
    p = Path(text)
    if not text.lstrip().startswith(("{", "[")):
        try:
            text = p.read_text()
        except OSError as exc:
            raise InputError(f"cannot read {p}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc}") from None


def parse_model_config(source, space: TypeSpace | None = None) -> EntropyModel:
    """Build a heterogeneity model from its JSON description.

    With ``space``, the model's dimensions are checked against the market.
    """
    cfg = load_json(source)
    _validate(cfg, MODEL_SCHEMA, "model")
    fam = cfg["family"]
    if fam == "choo_siow":
        return ChooSiow()
    if fam == "gender_heteroskedastic":
        return GenderHeteroskedastic(cfg.get("tau", 1.0))
    if fam == "full_heteroskedastic":
        model = FullHeteroskedastic(cfg["sigma"], cfg["tau"])
        if space is not None:
            model._check(space.X, space.Y)
        return model
    if fam == "nested_logit":
        spec = NestedLogitSpec(
            cfg["nests_men"],
            cfg["nests_women"],
            cfg["rho"],
            cfg["delta"],
            tuple(cfg["rho_labels"]) if "rho_labels" in cfg else None,
            tuple(cfg["delta_labels"]) if "delta_labels" in cfg else None,
        )
        spec.nest_of_x()
        spec.nest_of_y()
        if space is not None and (spec.X, spec.Y) != (space.X, space.Y):
            raise InputError(f"nests describe a {spec.X}x{spec.Y} market, data is {space.X}x{space.Y}")
        return NestedLogit(spec)
    men = MixedLogitSpec(cfg["men"]["Z"], cfg["men"]["atoms"], cfg["men"]["weights"], cfg["men"].get("s", 1.0))
    women = MixedLogitSpec(
        cfg["women"]["Z"], cfg["women"]["atoms"], cfg["women"]["weights"], cfg["women"].get("s", 1.0)
    )
    model = MixedLogit(men, women)
    if space is not None:
        model._check(space.X, space.Y)
    return model


def model_to_config(model: EntropyModel) -> dict:
    """Inverse of ``parse_model_config`` (up to defaults)."""
    fam = model.family
    if fam == "choo_siow":
        return {"family": fam}
    if fam == "gender_heteroskedastic":
        return {"family": fam, "tau": float(model.alpha[0])}
    if fam == "full_heteroskedastic":
        return {"family": fam, "sigma": model.sigma.tolist(), "tau": model.tau.tolist()}
    if fam == "nested_logit":
        s = model.spec
        return {
            "family": fam,
            "nests_men": [list(n) for n in s.nests_men],
            "nests_women": [list(n) for n in s.nests_women],
            "rho": list(s.rho),
            "delta": list(s.delta),
            "rho_labels": list(s.rho_labels),
            "delta_labels": list(s.delta_labels),
        }

    def side(sp):
        return {"Z": sp.Z.tolist(), "atoms": sp.atoms.tolist(), "weights": sp.weights.tolist(), "s": sp.s}

    return {"family": fam, "men": side(model.men), "women": side(model.women)}


STUDY_SCHEMA = {
    "type": "object",
    "properties": {
        "X": {"type": "integer", "minimum": 1},
        "Y": {"type": "integer", "minimum": 1},
        "rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "bases": {"enum": ["quadratic"]},
        "true_beta": _NUMS,
        "model": {"type": "object"},
        "N": {"type": "integer", "minimum": 1},
        "replications": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "estimators": {"type": "array", "items": {"enum": ["mde", "poisson"]}, "minItems": 1},
        "zero_cells": {"enum": ["drop", "shift"]},
        "shift_delta": {"type": "number", "exclusiveMinimum": 0},
        "exact": {"type": "boolean"},
        "solver_tol": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}


def parse_study_config(source, seed: int | None = None):
    """Study configuration from JSON; ``seed`` overrides the file's seed."""
    from .montecarlo import DESIGN_BETA, StudyConfig

    cfg = load_json(source)
    _validate(cfg, STUDY_SCHEMA, "study")
    X = cfg.get("X", 20)
    space = TypeSpace(X, cfg.get("Y", X))
    model = parse_model_config(cfg.get("model", {"family": "choo_siow"}), space)
    estimators = cfg.get("estimators", ["mde", "poisson"] if model.family == "choo_siow" else ["mde"])
    return StudyConfig(
        space=space,
        rate=cfg.get("rate", 0.8),
        bases=cfg.get("bases", "quadratic"),
        true_beta=tuple(cfg.get("true_beta", DESIGN_BETA)),
        model=model,
        N=cfg.get("N", 10_000),
        S_reps=cfg.get("replications", 100),
        seed=cfg.get("seed", 0) if seed is None else int(seed),
        estimators=tuple(estimators),
        zero_cell_policy=cfg.get("zero_cells", "drop"),
        shift_delta=cfg.get("shift_delta"),
        exact=cfg.get("exact", False),
        solver_tol=cfg.get("solver_tol", 1e-12),
    )


def study_to_config(config) -> dict:
    out = {
        "X": config.space.X,
        "Y": config.space.Y,
        "rate": config.rate,
        "bases": config.bases,
        "true_beta": list(config.true_beta),
        "model": model_to_config(config.model),
        "N": int(config.N),
        "replications": int(config.S_reps),
        "seed": int(config.seed),
        "estimators": list(config.estimators),
        "zero_cells": config.zero_cell_policy,
        "exact": bool(config.exact),
        "solver_tol": config.solver_tol,
    }
    if config.shift_delta is not None:
        out["shift_delta"] = config.shift_delta
    return out


# --------------------------------------------------------------------------
# manifests

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """What was run, on which inputs, with which settings."""

    subcommand: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = ""
    seed: int | None = None
    started: str = field(default_factory=_now)
    finished: str | None = None
    python: str = field(default_factory=platform.python_version)

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = sha256_file(path)

    def write(self, out_dir) -> Path:
        self.finished = _now()
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def read_manifest(out_dir) -> RunManifest:
    data = json.loads((Path(out_dir) / MANIFEST_NAME).read_text())
    return RunManifest(**data)


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
