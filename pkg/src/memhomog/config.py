"""Run configuration: one TOML or JSON file with fixed sections.

Sections: ``[geometry]`` (fluid cell descriptor), ``[micro_tensor]``,
``[discretization]``, ``[macro]``, ``[forcing]``, ``[run]``.  Command-line
flags override single keys via :func:`apply_overrides`.
"""

from __future__ import annotations

import copy
import json
import math
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cell_elastic as ce
from . import geometry as geo
from .errors import ConfigError, FormatError

SECTIONS = ("geometry", "micro_tensor", "discretization", "macro", "forcing", "run")

DEFAULTS = {
    "discretization": {"tol": 1e-10, "method": "auto"},
    "macro": {"gamma": 1, "H": 1.0, "mesh_resolution": 8, "T": 0.1, "dt": 0.01, "a": None, "b": None},
    "forcing": {},
    "run": {"output": "out", "snapshot_every": 0},
    "micro_tensor": {"kind": "isotropic", "lam": 1.0, "mu": 1.0},
}


def load_config(path):
    """Parse ``path`` (``.toml`` or ``.json``; other suffixes try JSON, then TOML)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror or exc}") from None
    raw = None
    if p.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    elif p.suffix.lower() == ".toml":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            try:
                raw = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: neither JSON nor TOML: {exc}") from None
    cfg = normalize(raw)
    cfg["_source"] = str(p.resolve().parent)
    return cfg


def normalize(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table of sections")
    unknown = sorted(set(raw) - set(SECTIONS) - {"_source"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    if "geometry" not in raw:
        raise ConfigError("config needs a [geometry] section")
    cfg = {}
    for name in SECTIONS:
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        merged = copy.deepcopy(DEFAULTS.get(name, {}))
        merged.update(copy.deepcopy(sec))
        cfg[name] = merged
    if "_source" in raw:
        cfg["_source"] = raw["_source"]
    return cfg


def apply_overrides(cfg, dim=None, gamma=None, resolution=None, tol=None):
    cfg = copy.deepcopy(cfg)
    if dim is not None:
        cfg["geometry"]["dim"] = int(dim)
    if gamma is not None:
        cfg["macro"]["gamma"] = int(gamma)
    if resolution is not None:
        cfg["geometry"]["resolution"] = int(resolution)
    if tol is not None:
        cfg["discretization"]["tol"] = float(tol)
    g = cfg["macro"]["gamma"]
    if int(g) not in (1, 3):
        raise ConfigError(f"gamma must be 1 or 3, got {g}")
    return cfg


def _resolve(cfg, path):
    p = Path(path)
    if not p.is_absolute() and cfg.get("_source"):
        p = Path(cfg["_source"]) / p
    return p


def tolerance(cfg):
    tol = float(cfg["discretization"]["tol"])
    if not tol > 0:
        raise ConfigError("discretization.tol must be positive")
    return tol


def geometry_descriptor(cfg, section=None):
    desc = copy.deepcopy(section if section is not None else cfg["geometry"])
    if str(desc.get("shape", "")).lower() in ("mask", "mask_file", "file"):
        desc["path"] = str(_resolve(cfg, desc["path"]))
    return desc


def cell_geometry(cfg, check=True):
    """Fluid cell geometry; ``check=False`` skips the admissibility gate."""
    desc = geometry_descriptor(cfg)
    try:
        return geo.build_cell_geometry(desc) if check else geo.voxelize(desc)
    except (FormatError, ValueError, KeyError) as exc:
        raise ConfigError(f"[geometry]: {exc}") from None


def elastic_geometry(cfg):
    """Elastic cell geometry: ``micro_tensor.geometry`` if given, else the fluid cell.

    A 2D macro run may name a 3D elastic cell; its tensors are then reduced to
    the (first lateral, vertical) plane (see :func:`reduce_needed`).
    """
    sec = cfg["micro_tensor"].get("geometry")
    if sec is None:
        return cell_geometry(cfg)
    desc = geometry_descriptor(cfg, sec)
    if "resolution" not in desc:
        desc["resolution"] = cfg["geometry"].get("resolution")
    try:
        return geo.build_cell_geometry(desc)
    except (FormatError, ValueError, KeyError) as exc:
        raise ConfigError(f"[micro_tensor.geometry]: {exc}") from None


def reduce_needed(cfg, egeom):
    return int(cfg["geometry"].get("dim", 3)) == 2 and egeom.dim == 3


def micro_tensor(cfg, dim):
    sec = cfg["micro_tensor"]
    kind = str(sec.get("kind", "isotropic")).lower()
    try:
        if kind == "isotropic":
            t = ce.MicroElasticTensor.isotropic(dim, float(sec["lam"]), float(sec["mu"]))
        elif kind == "voigt":
            t = ce.MicroElasticTensor.from_voigt(dim, sec["table"])
        elif kind == "file":
            t = ce.MicroElasticTensor.from_file(_resolve(cfg, sec["path"]), dim)
        else:
            raise ConfigError(f"micro_tensor.kind must be isotropic, voigt or file, got '{kind}'")
        if not t.per_voxel:
            t.validate()
    except (KeyError, FormatError, ValueError) as exc:
        raise ConfigError(f"[micro_tensor]: {exc}") from None
    return t


def macro_domain(cfg):
    sec = cfg["macro"]
    dim = int(cfg["geometry"].get("dim", 3))
    a = sec.get("a") or [0] * (dim - 1)
    b = sec.get("b") or [1] * (dim - 1)
    try:
        return geo.MacroDomain(dim, tuple(a), tuple(b), float(sec["H"]), int(sec["mesh_resolution"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[macro]: {exc}") from None


def time_grid(cfg):
    T, dt = float(cfg["macro"]["T"]), float(cfg["macro"]["dt"])
    if not (T > 0 and dt > 0):
        raise ConfigError("macro.T and macro.dt must be positive")
    n = T / dt
    if abs(n - round(n)) > 1e-9 * max(n, 1.0):
        raise ConfigError("macro.T must be a multiple of macro.dt")
    return T, dt


def forcing_section(cfg):
    sec = dict(cfg["forcing"])
    for key in ("t_on", "t_off"):
        if key in sec:
            sec[key] = float(sec[key])
    if sec.get("t_off") is not None and math.isinf(sec.get("t_off", math.inf)):
        sec.pop("t_off")
    return sec


def cache_path(cfg):
    """Cache directory: ``run.cache`` or ``$MEMHOMOG_CACHE``; ``None`` disables caching."""
    c = cfg["run"].get("cache")
    if c:
        return str(c)
    return os.environ.get("MEMHOMOG_CACHE") or None


def output_dir(cfg, explicit=None):
    # outputs go relative to the working directory, inputs relative to the config file
    p = Path(explicit or cfg["run"].get("output", "out"))
    p.mkdir(parents=True, exist_ok=True)
    return p
