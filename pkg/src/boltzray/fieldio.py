"""Lossless on-disk field format: raw float64 payload + JSON sidecar.

A field is stored as two files sharing a stem: ``<stem>.f64`` holds the raw
little-endian float64 array in C order, and ``<stem>.json`` holds everything
needed to rebuild the container — kind, shape, axis names, grid steps,
lattice parameters, quadrature degree, measurement base time, and support
tag.  Raw float64 bytes round-trip exactly, so write/read is lossless and
byte-reproducible.  Complex-valued and padded-axis fields are refused: the
format is for run artifacts, which are real window-axis fields.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import (
    CauchyData,
    KineticField,
    Lattice,
    RayData,
    ScalarField,
    build_direction_quadrature,
)

__all__ = ["write_field", "read_field", "FieldFormatError"]

_SUFFIX_DATA = ".f64"
_SUFFIX_META = ".json"


class FieldFormatError(ValueError):
    """Raised when an on-disk field cannot be interpreted."""


def _axes_for(kind: str) -> list[str]:
    return {
        "scalar": ["t", "x1", "x2", "x3"],
        "kinetic": ["t", "x1", "x2", "x3", "direction"],
        "ray": ["x1", "x2", "x3", "direction"],
        "cauchy": ["component", "x1", "x2", "x3"],
    }[kind]


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (_SUFFIX_DATA, _SUFFIX_META):
        path = path.with_suffix("")
    return path


def write_field(path, obj) -> tuple[Path, Path]:
    """Write a field container; returns (data path, sidecar path)."""
    if not isinstance(obj, (ScalarField, KineticField, RayData, CauchyData)):
        raise FieldFormatError(
            f"cannot store object of type {type(obj).__name__}")
    lat = obj.lattice
    meta = {
        "format": "boltzray-field-v1",
        "dtype": "<f8",
        "dt": lat.dt,
        "dx": lat.dx,
        "t_final": lat.t_final,
        "box_len": lat.box_len,
        "n_t": lat.n_t,
        "n_x": lat.n_x,
        "support_margin": lat.support_margin,
        "quadrature_degree": None,
        "base_time": None,
        "support_tag": getattr(obj, "support_tag", None),
    }
    if isinstance(obj, ScalarField):
        if obj.time_axis != "window":
            raise FieldFormatError("only window-axis scalar fields are stored")
        meta["kind"] = "scalar"
        values = obj.values
    elif isinstance(obj, KineticField):
        meta["kind"] = "kinetic"
        meta["quadrature_degree"] = obj.quadrature.degree
        values = obj.values
    elif isinstance(obj, RayData):
        meta["kind"] = "ray"
        meta["quadrature_degree"] = obj.quadrature.degree
        meta["base_time"] = obj.base_time
        values = obj.values
    else:
        meta["kind"] = "cauchy"
        values = np.stack([obj.f1, obj.f2])
    if np.iscomplexobj(values):
        raise FieldFormatError("complex-valued fields are not storable")
    meta["shape"] = list(values.shape)
    meta["axes"] = _axes_for(meta["kind"])

    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data_path = stem.with_suffix(_SUFFIX_DATA)
    meta_path = stem.with_suffix(_SUFFIX_META)
    np.ascontiguousarray(values, dtype="<f8").tofile(data_path)
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return data_path, meta_path


def read_field(path):
    """Rebuild the container written by :func:`write_field`."""
    stem = _stem(path)
    meta_path = stem.with_suffix(_SUFFIX_META)
    data_path = stem.with_suffix(_SUFFIX_DATA)
    if not meta_path.exists() or not data_path.exists():
        raise FieldFormatError(f"no field stored at {stem}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FieldFormatError(f"unreadable sidecar {meta_path}: {exc}") from exc
    for key in ("format", "kind", "shape", "dtype",
                "t_final", "n_t", "box_len", "n_x", "support_margin"):
        if key not in meta:
            raise FieldFormatError(f"sidecar {meta_path} missing key {key!r}")
    if meta["format"] != "boltzray-field-v1":
        raise FieldFormatError(f"unknown field format {meta['format']!r}")
    if meta["dtype"] != "<f8":
        raise FieldFormatError(f"unknown payload dtype {meta['dtype']!r}")

    shape = tuple(int(s) for s in meta["shape"])
    values = np.fromfile(data_path, dtype="<f8")
    if values.size != int(np.prod(shape)):
        raise FieldFormatError(
            f"{data_path} holds {values.size} values, sidecar expects "
            f"{int(np.prod(shape))}")
    values = values.reshape(shape)
    lat = Lattice(t_final=meta["t_final"], n_t=meta["n_t"],
                  box_len=meta["box_len"], n_x=meta["n_x"],
                  support_margin=meta["support_margin"])
    kind = meta["kind"]
    tag = meta.get("support_tag")
    if kind == "scalar":
        return ScalarField(lat, values, support_tag=tag)
    if kind == "kinetic":
        quad = build_direction_quadrature(int(meta["quadrature_degree"]))
        return KineticField(lat, quad, values, support_tag=tag)
    if kind == "ray":
        quad = build_direction_quadrature(int(meta["quadrature_degree"]))
        return RayData(lat, quad, values, base_time=float(meta["base_time"]))
    if kind == "cauchy":
        return CauchyData(lat, values[0].copy(), values[1].copy(),
                          support_tag=tag)
    raise FieldFormatError(f"unknown field kind {kind!r}")
