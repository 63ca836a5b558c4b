"""Batch driver: config-driven synthesis, transforms, recoveries, self-checks.

Configuration is flat INI (sections of key = value); every key has a
default, presets are embedded overlays selected with ``--preset``, and a
``--config`` file overlays the preset.  Unknown sections or keys are
configuration errors (exit 2) naming the offending key.  Numerical
divergence of any iterative stage exits 3.  All artifacts (field files,
report.json, errors.csv) are byte-reproducible for a fixed config + seed:
reports carry no timestamps, no absolute paths, and sorted keys.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
import scipy.fft

from . import __version__
from .core import (
    CauchyData,
    KineticField,
    Lattice,
    RayData,
    ScalarField,
    build_direction_quadrature,
    crop_window,
    gaussian_source,
    l2_inner,
    l2_norm,
    smooth_plateau,
)
from .fieldio import FieldFormatError, read_field, write_field
from .lightray import lray_adjoint, lray_weighted, measurement_weight, normal_compose
from .reconstruct import (
    ReconstructionConfig,
    ReconstructionDivergenceError,
    backproject,
    measurement_attenuation,
    recover_spacelike,
    stability_report,
)
from .spectral import (
    C_CONV,
    n_multiplier_apply,
    phi_apply,
    q_apply,
    reference_calibration_source,
)
from .transport import (
    AbsorptionField,
    TransportDivergenceError,
    boltzmann_solve,
    boltzmann_solve_adjoint,
    conservative_absorption,
    factorized_scattering,
    forward_measurement,
    measure_uT,
    scattering_adjoint,
    scattering_apply,
)
from .waves import (
    CauchyRecoveryConfig,
    CauchyRecoveryStagnationError,
    HyperbolicOperatorSpec,
    PseudoDiffSpec,
    aD_adjoint,
    aD_apply,
    apply_time_cutoff,
    cauchy_recover,
    default_time_cutoff,
    wave_adjoint_solve,
    wave_solve,
)


class ConfigError(Exception):
    """Configuration problem; the message names the offending key."""


# ---------------------------------------------------------------------------
# Configuration schema, defaults, presets
# ---------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_vec3(text: str) -> tuple:
    parts = [float(p) for p in text.split()]
    if len(parts) != 3:
        raise ValueError("expected three numbers")
    return tuple(parts)


def _parse_choice(*choices):
    def parse(text: str) -> str:
        if text not in choices:
            raise ValueError(f"must be one of {choices}")
        return text
    return parse


_SCHEMA = {
    "lattice": {
        "t_final": float, "n_t": int, "box_len": float, "n_x": int,
        "support_margin": float,
    },
    "quadrature": {"degree": int},
    "absorption": {
        "kind": _parse_choice("none", "constant", "sine"),
        "amplitude": float, "lam": float,
    },
    "scattering": {
        "kind": _parse_choice("none", "isotropic"),
        "amplitude": float,
    },
    "source": {
        "kind": _parse_choice("gaussian", "reference", "timelike", "zero"),
        "center_t": float, "center_x": _parse_vec3,
        "width_t": float, "width_x": float, "tau0": float,
    },
    "cauchy": {
        "kind": _parse_choice("odd-bump", "bump", "zero"),
        "f2_scale": float,
    },
    "pipeline": {
        "mode": _parse_choice("richardson", "cg-normal", "direct"),
        "tol": float, "max_iter": int,
        "cg_tol": float, "cg_max_iter": int,
        "transport_tol": float, "transport_max_iter": int,
        "dense_oracle": _parse_bool,
    },
    "run": {"seed": int, "noise_level": float},
}

_DEFAULTS = {
    "lattice": {"t_final": "1.0", "n_t": "12", "box_len": "4.0",
                "n_x": "8", "support_margin": "1.0"},
    "quadrature": {"degree": "4"},
    "absorption": {"kind": "none", "amplitude": "0.5", "lam": "1.0"},
    "scattering": {"kind": "none", "amplitude": "0.1"},
    "source": {"kind": "gaussian", "center_t": "0.5",
               "center_x": "2.0 2.0 2.0", "width_t": "0.25",
               "width_x": "0.4", "tau0": "30.0"},
    "cauchy": {"kind": "odd-bump", "f2_scale": "0.8"},
    "pipeline": {"mode": "richardson", "tol": "1e-2", "max_iter": "30",
                 "cg_tol": "1e-3", "cg_max_iter": "80",
                 "transport_tol": "1e-8", "transport_max_iter": "50",
                 "dense_oracle": "false"},
    "run": {"seed": "0", "noise_level": "0.0"},
}

PRESETS = {
    "pure-transport": {
        "lattice": {"n_t": "10"},
        "quadrature": {"degree": "2"},
    },
    "absorbing": {
        "lattice": {"n_t": "10"},
        "quadrature": {"degree": "2"},
        "absorption": {"kind": "constant", "amplitude": "0.5"},
    },
    "scattering-small": {
        "lattice": {"n_t": "10"},
        "quadrature": {"degree": "2"},
        "scattering": {"kind": "isotropic", "amplitude": "0.1"},
    },
    "backproject-reference": {
        "lattice": {"n_t": "12", "n_x": "12"},
        "absorption": {"kind": "constant", "amplitude": "0.5"},
        "source": {"kind": "reference"},
    },
    "spacelike-quick": {
        "lattice": {"n_t": "12", "n_x": "12"},
        "absorption": {"kind": "constant", "amplitude": "0.5"},
        "source": {"kind": "reference"},
        "pipeline": {"mode": "richardson", "tol": "3e-2", "max_iter": "12"},
    },
    "spacelike-reference": {
        "lattice": {"n_t": "32", "n_x": "32"},
        "quadrature": {"degree": "12"},
        "absorption": {"kind": "constant", "amplitude": "0.5"},
        "source": {"kind": "reference"},
        "pipeline": {"mode": "richardson", "tol": "1e-2", "max_iter": "20"},
    },
    "scattering-contraction": {
        "lattice": {"n_t": "12", "n_x": "12"},
        "source": {"kind": "reference"},
        "scattering": {"kind": "isotropic", "amplitude": "0.3"},
        "pipeline": {"mode": "richardson", "tol": "3e-2", "max_iter": "15"},
    },
    "cmb-free-wave": {
        "cauchy": {"kind": "odd-bump"},
        "pipeline": {"cg_tol": "1e-3", "cg_max_iter": "80"},
    },
    "cmb-zero-data": {
        "cauchy": {"kind": "zero"},
    },
    "cmb-dense-oracle": {
        "lattice": {"n_t": "6", "n_x": "6"},
        "quadrature": {"degree": "2"},
        "cauchy": {"kind": "odd-bump"},
        "pipeline": {"cg_tol": "1e-12", "cg_max_iter": "600",
                     "dense_oracle": "true"},
    },
}


def _overlay(raw: dict, extra: dict, origin: str) -> None:
    for section, keys in extra.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section '{section}' ({origin})")
        for key, value in keys.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown config key '{section}.{key}' ({origin})")
            raw[section][key] = value


def load_config(preset: str | None, config_path: str | None,
                seed: int | None) -> dict:
    """Resolve defaults <- preset <- config file <- CLI seed override."""
    raw = {section: dict(keys) for section, keys in _DEFAULTS.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset '{preset}'; available: "
                + ", ".join(sorted(PRESETS)))
        _overlay(raw, PRESETS[preset], f"preset '{preset}'")
    if config_path is not None:
        import configparser
        parser = configparser.ConfigParser()
        try:
            with open(config_path) as handle:
                parser.read_file(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        _overlay(raw, {s: dict(parser.items(s)) for s in parser.sections()},
                 config_path)

    cfg = {}
    for section, keys in raw.items():
        cfg[section] = {}
        for key, text in keys.items():
            try:
                cfg[section][key] = _SCHEMA[section][key](text)
            except ValueError as exc:
                raise ConfigError(
                    f"invalid value for '{section}.{key}': {exc}") from exc
    if seed is not None:
        cfg["run"]["seed"] = seed
    return cfg


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_lattice(cfg: dict) -> Lattice:
    p = cfg["lattice"]
    try:
        return Lattice(t_final=p["t_final"], n_t=p["n_t"],
                       box_len=p["box_len"], n_x=p["n_x"],
                       support_margin=p["support_margin"])
    except ValueError as exc:
        raise ConfigError(f"invalid [lattice]: {exc}") from exc


def build_quadrature(cfg: dict):
    try:
        return build_direction_quadrature(cfg["quadrature"]["degree"])
    except ValueError as exc:
        raise ConfigError(f"invalid 'quadrature.degree': {exc}") from exc


def build_sigma(cfg: dict, lat: Lattice) -> AbsorptionField | None:
    p = cfg["absorption"]
    if p["kind"] == "none":
        return None
    if p["kind"] == "constant":
        profile = np.full(lat.n_t, p["amplitude"])
    else:
        profile = p["amplitude"] * (0.75 + 0.25 * np.sin(
            2.0 * np.pi * lat.t_window / lat.t_final))
    return AbsorptionField(lat, profile, lam=p["lam"])


def _isotropic_phase(mu):
    return np.full_like(mu, 1.0 / (4.0 * np.pi))


def _plateau_amplitude(lat: Lattice) -> np.ndarray:
    m = lat.support_margin
    win = smooth_plateau(lat.x_axis, m, lat.box_len - m,
                         0.12 * (lat.box_len - 2.0 * m))
    amp = win[:, None, None] * win[None, :, None] * win[None, None, :]
    return np.broadcast_to(amp, lat.window_shape).copy()


def build_kernel(cfg: dict, lat: Lattice):
    p = cfg["scattering"]
    if p["kind"] == "none":
        return None
    return factorized_scattering(lat, _plateau_amplitude(lat),
                                 _isotropic_phase, lam=p["amplitude"])


def build_source(cfg: dict, lat: Lattice) -> ScalarField:
    p = cfg["source"]
    if p["kind"] == "zero":
        return ScalarField(lat, np.zeros(lat.window_shape),
                           support_tag="guarded")
    if p["kind"] == "reference":
        return reference_calibration_source(lat)
    modulation = (p["tau0"], (0.0, 0.0, 0.0)) if p["kind"] == "timelike" else None
    width_t = 0.14 if p["kind"] == "timelike" else p["width_t"]
    width_x = 0.38 if p["kind"] == "timelike" else p["width_x"]
    return gaussian_source(lat, center_t=p["center_t"],
                           center_x=p["center_x"],
                           width_t=width_t, width_x=width_x,
                           modulation=modulation)


def _spatial_bump(lat: Lattice, center, width: float, odd: bool) -> np.ndarray:
    x = lat.x_axis
    m = lat.support_margin
    window = smooth_plateau(x, m, lat.box_len - m,
                            0.35 * (lat.box_len - 2 * m))
    parts = [np.exp(-((x - c) ** 2) / (2.0 * width ** 2)) * window
             for c in center]
    values = parts[0][:, None, None] * parts[1][None, :, None] \
        * parts[2][None, None, :]
    if odd:
        values = values * (x[:, None, None] - center[0])
    return values


def build_cauchy(cfg: dict, lat: Lattice) -> CauchyData:
    p = cfg["cauchy"]
    if p["kind"] == "zero":
        zero = np.zeros(lat.spatial_shape)
        return CauchyData(lat, zero, zero.copy(), support_tag="guarded")
    odd = p["kind"] == "odd-bump"
    f1 = _spatial_bump(lat, (2.0, 2.0, 2.0), 0.4, odd=odd)
    f1 = f1 / np.max(np.abs(f1))
    f2 = p["f2_scale"] * _spatial_bump(lat, (2.2, 1.8, 2.0), 0.35, odd=False)
    return CauchyData(lat, f1, f2, support_tag="guarded")


# ---------------------------------------------------------------------------
# Artifact emission
# ---------------------------------------------------------------------------

def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _flat_config(cfg: dict) -> dict:
    flat = {}
    for section, keys in cfg.items():
        for key, value in keys.items():
            flat[f"{section}.{key}"] = (list(value) if isinstance(value, tuple)
                                        else value)
    return flat


def _write_report(out: Path, payload: dict) -> Path:
    path = out / "report.json"
    path.write_text(json.dumps(_json_ready(payload), sort_keys=True,
                               indent=1) + "\n")
    return path


def _write_history_csv(out: Path, history, name: str = "errors.csv") -> Path:
    path = out / name
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "residual"])
        for i, residual in enumerate(history):
            writer.writerow([i, repr(float(residual))])
    return path


def _base_report(command: str, preset: str | None, cfg: dict) -> dict:
    return {"command": command, "preset": preset, "version": __version__,
            "seed": cfg["run"]["seed"], "config": _flat_config(cfg)}


def _maybe_noise(uT: RayData, cfg: dict) -> RayData:
    level = cfg["run"]["noise_level"]
    if level == 0.0:
        return uT
    rng = np.random.default_rng(cfg["run"]["seed"])
    scale = level * np.max(np.abs(uT.values))
    values = uT.values + scale * rng.standard_normal(uT.values.shape)
    return RayData(uT.lattice, uT.quadrature, values, base_time=uT.base_time)


def _relative_cauchy_error(recovered: CauchyData, truth: CauchyData) -> float:
    num = np.sqrt(np.sum((recovered.f1 - truth.f1) ** 2)
                  + np.sum((recovered.f2 - truth.f2) ** 2))
    den = np.sqrt(np.sum(truth.f1 ** 2) + np.sum(truth.f2 ** 2))
    return float(num / den) if den > 0.0 else float(num)


# ---------------------------------------------------------------------------
# Command bodies
# ---------------------------------------------------------------------------

def _cmd_forward(cfg: dict, out: Path, preset: str | None) -> None:
    lat = build_lattice(cfg)
    quad = build_quadrature(cfg)
    sigma = build_sigma(cfg, lat)
    kernel = build_kernel(cfg, lat)
    f = build_source(cfg, lat)
    tol = cfg["pipeline"]["transport_tol"]
    max_iter = cfg["pipeline"]["transport_max_iter"]

    u, solve_report = boltzmann_solve(f, sigma, kernel, tol=tol,
                                      max_iter=max_iter, quadrature=quad)
    uT = measure_uT(u)

    report = _base_report("forward", preset, cfg)
    report["solve"] = {"iterations": solve_report.iterations,
                       "converged": solve_report.converged,
                       "residual_history": list(solve_report.residual_history)}
    if kernel is None and (sigma is None or not sigma.directional):
        # Independent route: the attenuated ray transform, never forming u.
        ray_route, _ = forward_measurement(f, sigma, None, quadrature=quad,
                                           tol=tol, max_iter=max_iter)
        scale = np.max(np.abs(ray_route.values))
        gap = np.max(np.abs(uT.values - ray_route.values))
        report["measurement_identity_error"] = (gap / scale if scale > 0.0
                                                else gap)

    uT = _maybe_noise(uT, cfg)
    write_field(out / "f", f)
    write_field(out / "u", u)
    write_field(out / "ut", uT)
    report["artifacts"] = ["f", "u", "ut"]
    _write_report(out, report)
    click.echo(f"forward: {solve_report.iterations} sweeps, "
               f"artifacts in {out}")


def _cmd_transform(cfg: dict, out: Path, preset: str | None) -> None:
    lat = build_lattice(cfg)
    quad = build_quadrature(cfg)
    sigma = build_sigma(cfg, lat)
    f = build_source(cfg, lat)
    weight = (None if sigma is None
              else measurement_weight(lat, sigma.values, lam=sigma.lam))
    rays = lray_weighted(f, weight, quad)
    write_field(out / "f", f)
    write_field(out / "rays", rays)
    report = _base_report("transform", preset, cfg)
    report["ray_norm"] = float(np.sqrt(np.real(l2_inner(rays, rays))))
    report["source_norm"] = l2_norm(f)
    report["artifacts"] = ["f", "rays"]
    _write_report(out, report)
    click.echo(f"transform: {quad.n_dir} directions, artifacts in {out}")


def _phi_kappa_target(f: ScalarField, sigma, lat: Lattice) -> ScalarField:
    kappa = measurement_attenuation(sigma, lat)[:, None, None, None]
    return phi_apply(ScalarField(lat, kappa * f.values, support_tag="guarded"))


def _cmd_backproject(cfg: dict, out: Path, preset: str | None) -> None:
    lat = build_lattice(cfg)
    quad = build_quadrature(cfg)
    sigma = build_sigma(cfg, lat)
    f = build_source(cfg, lat)
    ut_stem = out / "ut"
    if ut_stem.with_suffix(".json").exists():
        uT = read_field(ut_stem)
        if uT.lattice != lat:
            raise ConfigError(
                "stored u_T lattice differs from configured lattice")
    else:
        uT, _ = forward_measurement(f, sigma, None, quadrature=quad,
                                    tol=cfg["pipeline"]["transport_tol"],
                                    max_iter=cfg["pipeline"]["transport_max_iter"])
    recovered = backproject(uT, sigma)
    target = _phi_kappa_target(f, sigma, lat)
    error = (l2_norm(ScalarField(lat, recovered.values - target.values,
                                 time_axis="padded"))
             / l2_norm(target))
    report = _base_report("backproject", preset, cfg)
    report["error_vs_spacelike_part"] = error
    report["stability_quotient"] = stability_report(f, uT, sigma)
    write_field(out / "recovered", crop_window(recovered))
    report["artifacts"] = ["recovered"]
    _write_report(out, report)
    click.echo(f"backproject: error vs space-like part {error:.3f}, "
               f"artifacts in {out}")


def _cmd_reconstruct(cfg: dict, out: Path, preset: str | None) -> None:
    lat = build_lattice(cfg)
    sigma = build_sigma(cfg, lat)
    kernel = build_kernel(cfg, lat)
    ut_stem = out / "ut"
    if not ut_stem.with_suffix(".json").exists():
        raise ConfigError(
            f"u_T artifact missing at {ut_stem}.json; run 'forward' into "
            "the same --out directory first")
    uT = read_field(ut_stem)
    if uT.lattice != lat:
        raise ConfigError("stored u_T lattice differs from configured lattice")
    recon_cfg = ReconstructionConfig(tol=cfg["pipeline"]["tol"],
                                     max_iter=cfg["pipeline"]["max_iter"],
                                     mode=cfg["pipeline"]["mode"])
    result = recover_spacelike(uT, sigma, kernel, config=recon_cfg)

    report = _base_report("reconstruct", preset, cfg)
    report["converged"] = result.converged
    report["iterations"] = result.iterations
    report["stability_ratio"] = result.stability_ratio
    report["residual_history"] = list(result.residual_history)
    f = build_source(cfg, lat)
    target = _phi_kappa_target(f, sigma, lat)
    scale = l2_norm(target)
    if scale > 0.0:
        diff = ScalarField(lat, result.recovered.values - target.values,
                           time_axis="padded")
        report["error_vs_truth"] = l2_norm(diff) / scale
    write_field(out / "recovered", crop_window(result.recovered))
    _write_history_csv(out, result.residual_history)
    report["artifacts"] = ["recovered", "errors.csv"]
    _write_report(out, report)
    click.echo(f"reconstruct: {result.iterations} iterations, "
               f"residual {result.residual_history[-1]:.3e}, "
               f"artifacts in {out}")


def _cmb_forward_chain(lat, quad, spec, ad, sigma, cfg):
    cutoff = default_time_cutoff(lat)

    def chain(data: CauchyData) -> RayData:
        src = apply_time_cutoff(aD_apply(ad, wave_solve(spec, data)), cutoff)
        src = ScalarField(lat, src.values, support_tag="guarded")
        uT, _ = forward_measurement(
            src, sigma, None, quadrature=quad,
            tol=cfg["pipeline"]["transport_tol"],
            max_iter=cfg["pipeline"]["transport_max_iter"])
        return uT

    return chain


def _cmd_cmb_demo(cfg: dict, out: Path, preset: str | None) -> None:
    lat = build_lattice(cfg)
    quad = build_quadrature(cfg)
    sigma = build_sigma(cfg, lat)
    spec = HyperbolicOperatorSpec(lattice=lat)
    ad = PseudoDiffSpec(form="differential")
    truth = build_cauchy(cfg, lat)
    chain = _cmb_forward_chain(lat, quad, spec, ad, sigma, cfg)
    uT = _maybe_noise(chain(truth), cfg)

    report = _base_report("cmb-demo", preset, cfg)
    report["measurement_is_zero"] = bool(np.all(uT.values == 0.0))

    recovery_cfg = CauchyRecoveryConfig(
        tol=cfg["pipeline"]["cg_tol"],
        max_iter=cfg["pipeline"]["cg_max_iter"],
        transport_tol=cfg["pipeline"]["transport_tol"],
        transport_max_iter=cfg["pipeline"]["transport_max_iter"])
    recovered, solve_report = cauchy_recover(uT, spec, ad, sigma=sigma,
                                             config=recovery_cfg)
    report["iterations"] = solve_report.iterations
    report["converged"] = solve_report.converged
    report["residual_history"] = list(solve_report.residual_history)
    truth_norm = np.sqrt(np.sum(truth.f1 ** 2) + np.sum(truth.f2 ** 2))
    if truth_norm > 0.0:
        report["recovery_error"] = _relative_cauchy_error(recovered, truth)

    if cfg["pipeline"]["dense_oracle"]:
        n_sp = lat.n_x ** 3
        if 2 * n_sp > 1024:
            raise ConfigError(
                "pipeline.dense_oracle needs 2 n_x^3 <= 1024 "
                f"(got {2 * n_sp}); use a micro grid")
        import scipy.linalg
        columns = []
        for j in range(2 * n_sp):
            unit = np.zeros(2 * n_sp)
            unit[j] = 1.0
            data = CauchyData(lat,
                              unit[:n_sp].reshape(lat.spatial_shape).copy(),
                              unit[n_sp:].reshape(lat.spatial_shape).copy(),
                              support_tag="guarded")
            columns.append(chain(data).values.ravel())
        matrix = np.stack(columns, axis=1)
        weights = np.sqrt(np.broadcast_to(
            quad.weights, lat.spatial_shape + (quad.n_dir,)).ravel())
        solution, _, rank, _ = scipy.linalg.lstsq(
            matrix * weights[:, None], uT.values.ravel() * weights,
            cond=1e-10)
        got = np.concatenate([recovered.f1.ravel(), recovered.f2.ravel()])
        gap = np.linalg.norm(got - solution)
        scale = np.linalg.norm(solution)
        report["dense_oracle"] = {
            "rank": int(rank),
            "columns": 2 * n_sp,
            "agreement": gap / scale if scale > 0.0 else gap,
        }

    write_field(out / "recovered_cauchy", recovered)
    _write_history_csv(out, solve_report.residual_history)
    report["artifacts"] = ["recovered_cauchy", "errors.csv"]
    _write_report(out, report)
    suffix = (f"error {report['recovery_error']:.3f}"
              if "recovery_error" in report else "zero measurement")
    click.echo(f"cmb-demo: {solve_report.iterations} iterations, {suffix}, "
               f"artifacts in {out}")


# ---------------------------------------------------------------------------
# Self-check suite
# ---------------------------------------------------------------------------

def _check_rows(c_conv_scale: float, degree: int):
    """Invariant table: (name, measured value, threshold) triples."""
    rng = np.random.default_rng(0)
    rows = []

    lat = Lattice(t_final=1.0, n_t=10, box_len=4.0, n_x=8, support_margin=1.0)
    quad = build_direction_quadrature(2)
    sig = AbsorptionField(lat, 0.4 + 0.2 * np.sin(2.0 * lat.t_window))
    kern = factorized_scattering(lat, _plateau_amplitude(lat),
                                 _isotropic_phase, lam=0.3)

    def rel(lhs, rhs):
        return abs(lhs - rhs) / abs(lhs)

    f = ScalarField(lat, rng.standard_normal(lat.window_shape),
                    support_tag="guarded")
    v_shape = lat.window_shape + (quad.n_dir,)
    v = KineticField(lat, quad, rng.standard_normal(v_shape))
    u, _ = boltzmann_solve(f, sig, kern, tol=1e-12, quadrature=quad)
    back, _ = boltzmann_solve_adjoint(v, sig, kern, tol=1e-12)
    rows.append(("transport-adjoint",
                 rel(l2_inner(u, v), l2_inner(f, back)), 1e-10))

    w1 = KineticField(lat, quad, rng.standard_normal(v_shape))
    rows.append(("scattering-adjoint",
                 rel(l2_inner(scattering_apply(kern, w1), v),
                     l2_inner(w1, scattering_adjoint(kern, v))), 1e-10))

    g = RayData(lat, quad,
                rng.standard_normal(lat.spatial_shape + (quad.n_dir,)))
    rows.append(("lightray-adjoint",
                 rel(l2_inner(lray_weighted(f, None, quad), g),
                     l2_inner(f, lray_adjoint(g))), 1e-10))

    spec = HyperbolicOperatorSpec(lattice=lat)
    wave_data = CauchyData(lat, rng.standard_normal(lat.spatial_shape),
                           rng.standard_normal(lat.spatial_shape),
                           support_tag="guarded")
    wave_g = ScalarField(lat, rng.standard_normal(lat.window_shape))
    rows.append(("wave-adjoint",
                 rel(l2_inner(wave_solve(spec, wave_data), wave_g),
                     l2_inner(wave_data, wave_adjoint_solve(spec, wave_g))),
                 1e-10))

    ad = PseudoDiffSpec(form="differential")
    g2 = ScalarField(lat, rng.standard_normal(lat.window_shape))
    rows.append(("aD-adjoint",
                 rel(l2_inner(aD_apply(ad, f), g2),
                     l2_inner(f, aD_adjoint(ad, g2))), 1e-10))

    rows.append(("fourier-slice", _slice_check(), 8e-2))

    bump = gaussian_source(lat, center_t=0.5, center_x=(2.0, 2.0, 2.0),
                           width_t=0.2, width_x=0.5)
    once = phi_apply(bump)
    twice = phi_apply(once)
    rows.append(("projector-idempotence",
                 np.max(np.abs(twice.values - once.values))
                 / np.max(np.abs(once.values)), 1e-12))

    # Q N = phi away from the annihilated |xi| = 0 column; a mean-free
    # input makes the identity exact.
    ref_small = reference_calibration_source(lat)
    qn = q_apply(n_multiplier_apply(ref_small))
    target = phi_apply(ref_small)
    rows.append(("inverse-identity",
                 np.max(np.abs(qn.values - target.values))
                 / np.max(np.abs(target.values)), 1e-12))

    rows.append(("quadrature-exactness", _exactness_check(degree), 1e-10))
    rows.append(("multiplier-vs-composition",
                 _composition_check(c_conv_scale, degree), 0.20))
    rows.append(("mass-balance", _mass_check(), 1e-5))
    return rows


def _slice_check() -> float:
    """DFT of ray data vs a tabulated continuum-FT oracle for the slices."""
    from scipy.interpolate import CubicSpline
    lat = Lattice(t_final=1.0, n_t=16, box_len=4.0, n_x=16, support_margin=1.0)
    quad = build_direction_quadrature(3)
    T, L, m = lat.t_final, lat.box_len, lat.support_margin

    def gt(t):
        return (np.exp(-0.5 * ((t - 0.45 * T) / (0.16 * T)) ** 2)
                * smooth_plateau(t, 0.0, T, 0.1 * T))

    def hx(x):
        return (np.exp(-0.5 * ((x - 2.05) / 0.45) ** 2)
                * smooth_plateau(x, m, L - m, 0.3))

    def continuum_ft(profile, lo, hi, w):
        u = np.linspace(lo, hi, 2048)
        phases = np.exp(-1j * np.multiply.outer(np.atleast_1d(w), u))
        return np.trapezoid(phases * profile(u), u, axis=-1)

    values = (gt(lat.t_window)[:, None, None, None]
              * hx(lat.x_axis)[None, :, None, None]
              * hx(lat.x_axis)[None, None, :, None]
              * hx(lat.x_axis)[None, None, None, :])
    ray = lray_weighted(ScalarField(lat, values), None, quad)
    spectrum = scipy.fft.fftn(ray.values, axes=(0, 1, 2)) * lat.dx ** 3
    xi = 2.0 * np.pi * scipy.fft.fftfreq(lat.n_x, d=lat.dx)
    hhat = continuum_ft(hx, m, L - m, xi)
    hprod = (hhat[:, None, None] * hhat[None, :, None] * hhat[None, None, :])
    tau_max = np.sqrt(3.0) * np.max(np.abs(xi))
    tau_grid = np.linspace(-1.05 * tau_max, 1.05 * tau_max, 4096)
    ghat = CubicSpline(tau_grid, continuum_ft(gt, 0.0, T, tau_grid))
    worst = 0.0
    scale = 0.0
    for j in range(quad.n_dir):
        th = quad.nodes[j]
        tau = -(th[0] * xi[:, None, None] + th[1] * xi[None, :, None]
                + th[2] * xi[None, None, :])
        oracle = ghat(tau) * hprod
        worst = max(worst, np.max(np.abs(spectrum[..., j] - oracle)))
        scale = max(scale, np.max(np.abs(oracle)))
    return worst / scale


def _exactness_check(degree: int) -> float:
    """Sphere rule vs the closed form int (theta . a)^12 = 4 pi / 13."""
    quad = build_direction_quadrature(degree)
    a = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
    integrand = (quad.nodes @ a) ** 12
    exact = 4.0 * np.pi / 13.0
    return abs(float(quad.weights @ integrand) - exact) / exact


def _composition_check(c_conv_scale: float, degree: int) -> float:
    lat = Lattice(t_final=1.0, n_t=16, box_len=4.0, n_x=16, support_margin=1.0)
    quad = build_direction_quadrature(degree)
    ref = reference_calibration_source(lat)
    comp = normal_compose(ref, quadrature=quad)
    mult = crop_window(n_multiplier_apply(ref, c_conv=C_CONV * c_conv_scale))
    inner = slice(1, lat.n_t - 1)
    return (np.linalg.norm(mult.values[inner] - comp.values[inner])
            / np.linalg.norm(comp.values[inner]))


def _mass_check() -> float:
    lat = Lattice(t_final=1.0, n_t=32, box_len=4.0, n_x=8, support_margin=1.0)
    quad = build_direction_quadrature(2)
    f = gaussian_source(lat, center_t=0.5, center_x=(2.0, 2.0, 2.0),
                        width_t=0.2, width_x=0.5)
    kern = factorized_scattering(lat, np.ones(lat.window_shape),
                                 lambda mu: (1.0 + 0.5 * mu) / (4.0 * np.pi),
                                 lam=0.04, support_tag="guarded")
    sig = conservative_absorption(kern, quad)
    u, _ = boltzmann_solve(f, sig, kern, tol=1e-12, quadrature=quad)
    mass = np.einsum("txyzj,j->t", u.values, quad.weights) * lat.dx ** 3
    inflow = 4.0 * np.pi * np.sum(f.values, axis=(1, 2, 3)) * lat.dx ** 3
    drift = mass[1:] - mass[:-1] - 0.5 * lat.dt * (inflow[1:] + inflow[:-1])
    return float(np.max(np.abs(drift)) / np.max(np.abs(mass)))


# ---------------------------------------------------------------------------
# Click wiring
# ---------------------------------------------------------------------------

def _common_options(fn):
    fn = click.option("--preset", default=None,
                      help="Named embedded configuration.")(fn)
    fn = click.option("--threads", default=1, show_default=True,
                      help="FFT worker threads.")(fn)
    fn = click.option("--seed", default=None, type=int,
                      help="Override run.seed.")(fn)
    fn = click.option("--out", "out_dir", default="boltzray-out",
                      show_default=True, help="Artifact directory.")(fn)
    fn = click.option("--config", "config_path", default=None,
                      help="INI config file overlaying the preset.")(fn)
    return fn


def _run(body, preset, config_path, out_dir, seed, threads) -> None:
    try:
        if preset is None and config_path is None:
            raise ConfigError("provide --preset and/or --config")
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(preset, config_path, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with scipy.fft.set_workers(threads):
            body(cfg, out, preset)
    except (ConfigError, FieldFormatError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except (TransportDivergenceError, ReconstructionDivergenceError,
            CauchyRecoveryStagnationError) as exc:
        click.echo(f"numerical divergence: {exc}", err=True)
        sys.exit(3)


@click.group()
@click.version_option(__version__)
def main():
    """Transport synthesis and source recovery on a spacetime box."""


@main.command()
@_common_options
def forward(config_path, out_dir, seed, threads, preset):
    """Solve the forward problem; write f, u, u_T, and a report."""
    _run(_cmd_forward, preset, config_path, out_dir, seed, threads)


@main.command()
@_common_options
def transform(config_path, out_dir, seed, threads, preset):
    """Apply the (weighted) light ray transform to the configured source."""
    _run(_cmd_transform, preset, config_path, out_dir, seed, threads)


@main.command("backproject")
@_common_options
def backproject_cmd(config_path, out_dir, seed, threads, preset):
    """One-shot backprojection Q phi(D) L* of the measurement."""
    _run(_cmd_backproject, preset, config_path, out_dir, seed, threads)


@main.command()
@_common_options
def reconstruct(config_path, out_dir, seed, threads, preset):
    """Iterative space-like recovery from a stored u_T artifact."""
    _run(_cmd_reconstruct, preset, config_path, out_dir, seed, threads)


@main.command("cmb-demo")
@_common_options
def cmb_demo(config_path, out_dir, seed, threads, preset):
    """Potential-to-measurement chain and Cauchy-data recovery."""
    _run(_cmd_cmb_demo, preset, config_path, out_dir, seed, threads)


@main.command()
@click.option("--threads", default=1, show_default=True,
              help="FFT worker threads.")
@click.option("--c-conv-scale", default=1.0, show_default=True,
              help="Scale the convention constant (fault injection).")
@click.option("--degree", default=8, show_default=True,
              help="Quadrature degree for degree-dependent checks.")
def selfcheck(threads, c_conv_scale, degree):
    """Run the invariant suite and print a pass/fail table."""
    try:
        if threads < 1 or degree < 2:
            raise ConfigError("--threads must be >= 1 and --degree >= 2")
        with scipy.fft.set_workers(threads):
            rows = _check_rows(c_conv_scale, degree)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    width = max(len(name) for name, _, _ in rows)
    failed = []
    for name, value, threshold in rows:
        ok = value <= threshold
        if not ok:
            failed.append(name)
        click.echo(f"{name:<{width}}  {value:10.3e}  <= {threshold:8.1e}  "
                   f"{'PASS' if ok else 'FAIL'}")
    if failed:
        click.echo(f"FAILED: {', '.join(failed)}", err=True)
        sys.exit(1)
    click.echo("all checks passed")


if __name__ == "__main__":
    main()
