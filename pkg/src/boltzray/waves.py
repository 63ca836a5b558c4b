"""Second-order wave stage of the measurement chain and Cauchy-data recovery.

The sources treated by :mod:`boltzray.reconstruct` are free functions of
spacetime.  This module covers the constrained case: the source is generated
from Cauchy data (f1, f2) by a variable-coefficient wave operator

    P f = -d_t^2 f + s Lap f + a_0 d_t f + a . grad f + b f = 0,   s = +/- 1,

then mapped to a transport source by a first-order factor a(D) and a temporal
cutoff chi0, and only the final-time transport measurement is observed.
Recovery inverts the composed chain by conjugate gradients on its normal
equations, so every stage here carries an exact discrete adjoint.

Discrete conventions, each pinned by a test:

* Spatial derivatives are Fourier multipliers on the periodic box.  The
  Nyquist entry of each first-derivative multiplier i xi_a is zeroed, which
  keeps D_a an exactly antisymmetric real operator (the self-conjugate
  Nyquist mode has a purely imaginary multiplier, so on real fields its
  contribution is discarded by the real cast anyway).  The Laplacian
  multiplier -|xi|^2 is even and kept in full.
* Time stepping is leapfrog.  The first-order term a_0 d_t enters through
  the centered average (f_{n+1} - f_{n-1}) / (2 dt) and is solved for
  implicitly -- a diagonal division -- so damping costs no stability.  The
  first step is the second-order Taylor expansion of the data with
  d_t^2 f(0) supplied by the PDE.
* The stability guard is the spectral bound dt <= 2 dx / (pi sqrt(3)): the
  most oscillatory grid mode has |xi|^2 = 3 (pi / dx)^2 and undamped
  leapfrog needs dt |xi| <= 2.
* Time derivatives of potentials (:func:`cmb_source`) are centered
  second-order finite differences on the window: a spectral derivative of
  the zero-extended window would ring at the window edges for potentials
  that do not vanish there, and static potentials must map to zero exactly.
* a(D) in differential form uses the spectral time derivative on the padded
  axis (exactly antisymmetric, Nyquist zeroed); on window fields it is the
  sandwich crop . d_t . zero-extend, which is its own exact skew-adjoint.
* Evolution is periodic by construction, so outputs are tagged "guarded" in
  the genuinely-periodic sense.  The lattice margin (>= t_final) is exactly
  the budget that keeps the physical spread of guarded Cauchy data (speed
  <= 1 for time t) plus the subsequent ray displacement (<= T - t) from
  ever wrapping around the box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .core import (
    CauchyData,
    Lattice,
    RayData,
    ScalarField,
    frequency_axes,
    guard_violation,
    l2_inner,
    smooth_plateau,
    zero_extend,
)
from .lightray import lray_adjoint
from . import transport
from .transport import (
    AbsorptionField,
    ScatteringKernelField,
    SolveReport,
    apply_time_cutoff,
    forward_measurement,
    measure_uT_adjoint,
    measurement_weight_of,
)

__all__ = [
    "HyperbolicOperatorSpec",
    "BardeenCoefficients",
    "PseudoDiffSpec",
    "CauchyRecoveryConfig",
    "CauchyRecoveryStagnationError",
    "cfl_limit",
    "wave_solve",
    "wave_adjoint_solve",
    "wave_energy",
    "bardeen_solve",
    "cmb_source",
    "aD_apply",
    "aD_adjoint",
    "default_time_cutoff",
    "cauchy_recover",
]


# ---------------------------------------------------------------------------
# Operator specifications
# ---------------------------------------------------------------------------

def _check_coefficient(field, lattice: Lattice, name: str,
                       allow_complex: bool = False) -> None:
    if field is None:
        return
    if not isinstance(field, ScalarField):
        raise TypeError(f"{name} must be a ScalarField or None")
    if field.lattice != lattice:
        raise ValueError(f"{name} lives on a different lattice")
    if field.time_axis != "window":
        raise ValueError(f"{name} must live on the time window")
    if not allow_complex and np.iscomplexobj(field.values):
        raise ValueError(f"{name} must be real-valued")


@dataclass(frozen=True, eq=False)
class HyperbolicOperatorSpec:
    """P = -d_t^2 + laplacian_sign * Lap + a[0] d_t + sum_i a[i] d_i + b.

    ``a`` holds the four first-order coefficients (time component first),
    each a real window :class:`~boltzray.core.ScalarField` or ``None`` for
    zero.  ``b`` may be real or complex.  ``laplacian_sign`` +1.0 is the
    wave signature -d_t^2 + Lap; -1.0 flips the spatial part, which makes
    the evolution elliptic in time (grid modes grow like exp(|xi| t)) --
    accepted for diagnostics, not for recovery.
    """

    lattice: Lattice
    a: tuple = (None, None, None, None)
    b: ScalarField | None = None
    laplacian_sign: float = 1.0

    def __post_init__(self):
        entries = tuple(self.a)
        if len(entries) != 4:
            raise ValueError("a must hold 4 entries (a_t, a_x1, a_x2, a_x3)")
        object.__setattr__(self, "a", entries)
        names = ("a[0] (the d_t coefficient)", "a[1]", "a[2]", "a[3]")
        for field, name in zip(entries, names):
            _check_coefficient(field, self.lattice, name)
        _check_coefficient(self.b, self.lattice, "b", allow_complex=True)
        if self.laplacian_sign not in (1.0, -1.0):
            raise ValueError("laplacian_sign must be +1.0 or -1.0")

    @property
    def is_complex(self) -> bool:
        return self.b is not None and np.iscomplexobj(self.b.values)


@dataclass(frozen=True, eq=False)
class BardeenCoefficients:
    """Time-only coefficients of d_t^2 f + a0(t) d_t f -/+ Lap f + b0(t) f = 0."""

    lattice: Lattice
    a0: np.ndarray
    b0: np.ndarray

    def __post_init__(self):
        for name in ("a0", "b0"):
            raw = np.asarray(getattr(self, name))
            if np.iscomplexobj(raw):
                raise TypeError(f"{name} must be real-valued")
            arr = raw.astype(float)
            if arr.shape != (self.lattice.n_t,):
                raise ValueError(f"{name} must have shape ({self.lattice.n_t},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class PseudoDiffSpec:
    """First-order factor a(D): either d_t + b(z) or a Fourier multiplier.

    form "differential": a(D) f = d_t f + b f, with the spectral time
    derivative on the padded axis.  form "multiplier": the 4D spectrum is
    multiplied by ``symbol(tau, xi1, xi2, xi3)`` on the padded lattice;
    ``order`` records the homogeneity degree quoted in mapping statements
    and is not enforced pointwise.  Multiplier symbols are checked
    numerically, on application, to be non-vanishing on the discrete
    light-cone band (|tau| = |xi| up to one grid cell, away from the
    origin), which is what makes the factor invertible where the
    measurement carries information.
    """

    form: str
    b: ScalarField | None = None
    symbol: object | None = None
    order: float = 1.0

    def __post_init__(self):
        if self.form not in ("differential", "multiplier"):
            raise ValueError('form must be "differential" or "multiplier"')
        if self.form == "differential":
            if self.symbol is not None:
                raise ValueError("differential form takes no symbol")
            if self.b is not None and self.b.time_axis != "window":
                raise ValueError("b must live on the time window")
        else:
            if not callable(self.symbol):
                raise ValueError("multiplier form needs a callable symbol")
            if self.b is not None:
                raise ValueError("multiplier form takes no b; fold it into the symbol")


# ---------------------------------------------------------------------------
# Spectral building blocks
# ---------------------------------------------------------------------------

def _spatial_multipliers(lattice: Lattice):
    """Fourier multipliers (-|xi|^2, (i xi_1, i xi_2, i xi_3)) on the box.

    First-derivative multipliers have their Nyquist entry zeroed so each
    D_a is exactly antisymmetric as a real matrix.
    """
    xi = frequency_axes(lattice)[1]
    shapes = [(-1, 1, 1), (1, -1, 1), (1, 1, -1)]
    lap = -(xi.reshape(shapes[0]) ** 2
            + xi.reshape(shapes[1]) ** 2
            + xi.reshape(shapes[2]) ** 2)
    first = []
    for shape in shapes:
        m = 1j * xi
        if lattice.n_x % 2 == 0:
            m = m.copy()
            m[lattice.n_x // 2] = 0.0
        first.append(m.reshape(shape))
    return lap, tuple(first)


def cfl_limit(lattice: Lattice) -> float:
    """Largest leapfrog-stable step for the spectral Laplacian: 2 dx/(pi sqrt 3)."""
    return 2.0 * lattice.dx / (np.pi * np.sqrt(3.0))


class _WaveOperator:
    """Slab-wise spatial part L_n = s Lap + sum_i a_i(t_n) D_i + b(t_n)."""

    def __init__(self, spec: HyperbolicOperatorSpec):
        self.spec = spec
        self.lap, self.first = _spatial_multipliers(spec.lattice)

    def apply(self, n: int, slab: np.ndarray) -> np.ndarray:
        spec = self.spec
        hat = scipy.fft.fftn(slab)
        out = scipy.fft.ifftn(spec.laplacian_sign * self.lap * hat)
        for axis in range(3):
            coeff = spec.a[axis + 1]
            if coeff is not None:
                out = out + coeff.values[n] * scipy.fft.ifftn(self.first[axis] * hat)
        if not np.iscomplexobj(slab):
            out = out.real
        if spec.b is not None:
            out = out + spec.b.values[n] * slab
        return out

    def apply_adjoint(self, n: int, slab: np.ndarray) -> np.ndarray:
        spec = self.spec
        out = scipy.fft.ifftn(spec.laplacian_sign * self.lap * scipy.fft.fftn(slab))
        for axis in range(3):
            coeff = spec.a[axis + 1]
            if coeff is not None:
                prod = scipy.fft.fftn(coeff.values[n] * slab)
                out = out - scipy.fft.ifftn(self.first[axis] * prod)
        if not np.iscomplexobj(slab):
            out = out.real
        if spec.b is not None:
            out = out + np.conj(spec.b.values[n]) * slab
        return out


def _halfstep_factors(a_t: ScalarField, n: int, dt: float):
    """(1 - dt a_0/2, 1 + dt a_0/2) at slab n; rejects a vanishing divisor."""
    half = 0.5 * dt * a_t.values[n]
    denom = 1.0 - half
    if np.min(np.abs(denom)) < 1e-8:
        raise ValueError("first-order time coefficient too large for the step: "
                         "1 - dt a_0 / 2 crosses zero")
    return denom, 1.0 + half


# ---------------------------------------------------------------------------
# Wave evolution and its adjoint
# ---------------------------------------------------------------------------

def wave_solve(spec: HyperbolicOperatorSpec, data: CauchyData) -> ScalarField:
    """Evolve Cauchy data under P f = 0; returns f on the time window.

    Raises for a time step above :func:`cfl_limit` and for data with mass
    outside the lattice guard region (``support_tag == "guarded"`` asserts
    the data is meant periodically, e.g. plane-wave modes).
    """
    lat = spec.lattice
    if not isinstance(data, CauchyData):
        raise TypeError("wave_solve expects CauchyData")
    if data.lattice != lat:
        raise ValueError("Cauchy data lives on a different lattice")
    if lat.dt > cfl_limit(lat) * (1.0 + 1e-12):
        raise ValueError(
            f"dt = {lat.dt:.6g} exceeds the leapfrog stability bound "
            f"{cfl_limit(lat):.6g} = 2 dx / (pi sqrt(3)); refine the time axis")
    if data.support_tag != "guarded":
        for part, name in ((data.f1, "f1"), (data.f2, "f2")):
            if guard_violation(part, lat, axes=(0, 1, 2)):
                raise ValueError(f"Cauchy data {name} has support outside the "
                                 "lattice guard region")

    op = _WaveOperator(spec)
    dt = lat.dt
    cmplx = (spec.is_complex or np.iscomplexobj(data.f1)
             or np.iscomplexobj(data.f2))
    out = np.zeros((lat.n_t,) + lat.spatial_shape,
                   dtype=np.complex128 if cmplx else np.float64)
    out[0] = data.f1
    a_t = spec.a[0]

    accel = op.apply(0, out[0])
    if a_t is not None:
        accel = accel + a_t.values[0] * data.f2
    out[1] = data.f1 + dt * data.f2 + 0.5 * dt * dt * accel

    for n in range(1, lat.n_t - 1):
        body = 2.0 * out[n] + dt * dt * op.apply(n, out[n])
        if a_t is None:
            out[n + 1] = body - out[n - 1]
        else:
            denom, grow = _halfstep_factors(a_t, n, dt)
            out[n + 1] = (body - grow * out[n - 1]) / denom
    return ScalarField(lat, out, support_tag="guarded")


def wave_adjoint_solve(spec: HyperbolicOperatorSpec, g: ScalarField) -> CauchyData:
    """Exact adjoint of :func:`wave_solve` under the l2_inner pairings.

    <wave_solve(d), g> (dt dx^3 measure) = <d, wave_adjoint_solve(g)>
    (dx^3 Cauchy measure); the measure ratio appears as an overall factor
    dt on the raw transpose.  Implemented as the reverse sweep of the
    recorded update stencil, so the identity holds to rounding error, not
    merely to discretization order.
    """
    lat = spec.lattice
    if not isinstance(g, ScalarField):
        raise TypeError("wave_adjoint_solve expects a ScalarField")
    if g.lattice != lat:
        raise ValueError("field lives on a different lattice")
    if g.time_axis != "window":
        raise ValueError("adjoint expects a window field")

    op = _WaveOperator(spec)
    dt = lat.dt
    cmplx = spec.is_complex or np.iscomplexobj(g.values)
    acc = np.asarray(dt * g.values,
                     dtype=np.complex128 if cmplx else np.float64).copy()
    a_t = spec.a[0]

    for n in range(lat.n_t - 2, 0, -1):
        if a_t is None:
            t_slab = acc[n + 1]
            acc[n - 1] -= t_slab
        else:
            denom, grow = _halfstep_factors(a_t, n, dt)
            t_slab = acc[n + 1] / denom
            acc[n - 1] -= grow * t_slab
        acc[n] += 2.0 * t_slab + dt * dt * op.apply_adjoint(n, t_slab)

    d1 = acc[0] + acc[1] + 0.5 * dt * dt * op.apply_adjoint(0, acc[1])
    d2 = dt * acc[1]
    if a_t is not None:
        d2 = d2 + 0.5 * dt * dt * a_t.values[0] * acc[1]
    return CauchyData(lat, np.ascontiguousarray(d1), np.ascontiguousarray(d2))


def _time_derivative_window(values: np.ndarray, dt: float) -> np.ndarray:
    """Second-order finite-difference d_t along axis 0 of a window array."""
    if values.shape[0] < 3:
        raise ValueError("need at least 3 time slabs for the centered derivative")
    out = np.empty_like(values, dtype=np.promote_types(values.dtype, np.float64))
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt)
    out[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * dt)
    return out


def wave_energy(f: ScalarField) -> np.ndarray:
    """Per-slab monitor E_n = sum_x (|d_t f|^2 + |grad f|^2) dx^3.

    The time derivative is the centered second-order difference (one-sided
    at the window ends) and the gradient is spectral, so for the free wave
    the interior drift is O(dt^2).
    """
    lat = f.lattice
    if f.time_axis != "window":
        raise ValueError("energy monitor expects a window field")
    dft = _time_derivative_window(f.values, lat.dt)
    lap, _ = _spatial_multipliers(lat)
    cell = lat.dx ** 3
    count = lat.n_x ** 3
    energy = np.empty(lat.n_t)
    for n in range(lat.n_t):
        hat = scipy.fft.fftn(f.values[n])
        # the gradient term via the full |xi|^2 form (Parseval), so it is
        # exactly the quadratic form the Laplacian dynamics conserve --
        # including the Nyquist modes the antisymmetrized D_a cannot see
        potential = np.sum(-lap * np.abs(hat) ** 2) / count
        energy[n] = (np.sum(np.abs(dft[n]) ** 2) + potential) * cell
    return energy


# ---------------------------------------------------------------------------
# Potential-equation front end
# ---------------------------------------------------------------------------

def _time_profile_field(lattice: Lattice, profile: np.ndarray) -> ScalarField | None:
    """Spatially constant ScalarField from an (n_t,) profile; None if zero."""
    if not np.any(profile):
        return None
    values = np.broadcast_to(profile[:, None, None, None],
                             lattice.window_shape).copy()
    return ScalarField(lattice, values, support_tag="guarded")


def bardeen_solve(coeffs: BardeenCoefficients, data: CauchyData,
                  laplacian_sign: str = "-laplacian") -> ScalarField:
    """Evolve d_t^2 f + a0(t) d_t f -/+ Lap f + b0(t) f = 0.

    The potential equation is usually quoted with +Lap, which together with
    +d_t^2 is elliptic rather than hyperbolic; the default here flips it to
    the wave signature (the "-laplacian" toggle), and asking for
    "+laplacian" emits a RuntimeWarning since grid modes then grow like
    exp(|xi| t).  Internally the equation is multiplied by -1 and handed to
    :func:`wave_solve`, so a0 = b0 = 0 with the default toggle reproduces
    the free wave exactly.
    """
    if not isinstance(coeffs, BardeenCoefficients):
        raise TypeError("bardeen_solve expects BardeenCoefficients")
    if laplacian_sign not in ("-laplacian", "+laplacian"):
        raise ValueError('laplacian_sign must be "-laplacian" or "+laplacian"')
    if laplacian_sign == "+laplacian":
        warnings.warn("+laplacian signature is elliptic in time: grid modes "
                      "grow like exp(|xi| t); diagnostic use only",
                      RuntimeWarning, stacklevel=2)
    lat = coeffs.lattice
    spec = HyperbolicOperatorSpec(
        lattice=lat,
        a=(_time_profile_field(lat, -coeffs.a0), None, None, None),
        b=_time_profile_field(lat, -coeffs.b0),
        laplacian_sign=1.0 if laplacian_sign == "-laplacian" else -1.0,
    )
    return wave_solve(spec, data)


def _as_time_profile(value, lattice: Lattice, name: str) -> np.ndarray:
    """Broadcastable (n_t, 1, 1, 1) profile from a scalar or (n_t,) array."""
    arr = np.asarray(value)
    if arr.ndim == 0:
        return arr.reshape(1, 1, 1, 1)
    if arr.shape == (lattice.n_t,):
        return arr[:, None, None, None]
    raise ValueError(f"{name} must be a scalar or an (n_t,) profile")


def cmb_source(psi: ScalarField, phi: ScalarField, b, form: str,
               coupling=1.0, quadrature=None):
    """Radiative transport source generated by two scalar potentials.

    form "boltz3" returns the direction-resolved source
        coupling * (d_t psi / 2 - grad phi . theta / 2)     (KineticField),
    form "boltz4" the direction-averaged one
        coupling * (d_t psi / 2 + d_t phi / 2 + b phi)      (ScalarField).

    Time derivatives are centered second-order differences on the window,
    so static potentials map to zero exactly; spatial gradients are
    spectral.  ``b`` and ``coupling`` may be scalars or (n_t,) profiles;
    ``quadrature`` is required for "boltz3".
    """
    if form not in ("boltz3", "boltz4"):
        raise ValueError('form must be "boltz3" or "boltz4"')
    for field, name in ((psi, "psi"), (phi, "phi")):
        if not isinstance(field, ScalarField):
            raise TypeError(f"{name} must be a ScalarField")
        if field.time_axis != "window":
            raise ValueError(f"{name} must live on the time window")
    lat = psi.lattice
    if phi.lattice != lat:
        raise ValueError("psi and phi live on different lattices")
    tag = "guarded" if (psi.support_tag == "guarded"
                        and phi.support_tag == "guarded") else None
    couple = _as_time_profile(coupling, lat, "coupling")
    dpsi = _time_derivative_window(psi.values, lat.dt)

    if form == "boltz4":
        bprof = _as_time_profile(b, lat, "b")
        dphi = _time_derivative_window(phi.values, lat.dt)
        values = couple * (0.5 * dpsi + 0.5 * dphi + bprof * phi.values)
        return ScalarField(lat, values, support_tag=tag)

    if quadrature is None:
        raise ValueError('form "boltz3" needs a direction quadrature')
    _, first = _spatial_multipliers(lat)
    hat = scipy.fft.fftn(phi.values, axes=(1, 2, 3))
    grads = []
    for m in first:
        g = scipy.fft.ifftn(m[None] * hat, axes=(1, 2, 3))
        grads.append(g.real if not np.iscomplexobj(phi.values) else g)
    streamed = np.tensordot(np.stack(grads, axis=-1), quadrature.nodes,
                            axes=([-1], [1]))
    values = couple[..., None] * (0.5 * dpsi[..., None] - 0.5 * streamed)
    from .core import KineticField
    return KineticField(lat, quadrature, values, support_tag=tag)


# ---------------------------------------------------------------------------
# First-order factor a(D)
# ---------------------------------------------------------------------------

def _padded_time_multiplier(lattice: Lattice) -> np.ndarray:
    tau = frequency_axes(lattice)[0]
    m = 1j * tau
    if lattice.n_t_pad % 2 == 0:
        m = m.copy()
        m[lattice.n_t_pad // 2] = 0.0
    return m.reshape(-1, 1, 1, 1)


def _spectral_time_derivative(values: np.ndarray, lattice: Lattice,
                              conjugate: bool = False) -> np.ndarray:
    m = _padded_time_multiplier(lattice)
    if conjugate:
        m = -m
    out = scipy.fft.ifft(m * scipy.fft.fft(values, axis=0), axis=0)
    return out.real if not np.iscomplexobj(values) else out


def _symbol_on_grid(spec: PseudoDiffSpec, lattice: Lattice) -> np.ndarray:
    """Evaluate the multiplier symbol and check it on the light cone.

    The check samples the callable at the exact cone points tau = +/- |xi|
    over the nonzero grid wave vectors (grid points themselves never land
    on the cone, so a band test would miss symbols like tau^2 - |xi|^2
    that vanish there identically).
    """
    tau, xi = frequency_axes(lattice)
    table = np.asarray(spec.symbol(tau[:, None, None, None],
                                   xi[None, :, None, None],
                                   xi[None, None, :, None],
                                   xi[None, None, None, :]))
    table = np.broadcast_to(table, lattice.padded_shape)

    x1 = xi[:, None, None]
    x2 = xi[None, :, None]
    x3 = xi[None, None, :]
    abs_xi = np.sqrt(x1 ** 2 + x2 ** 2 + x3 ** 2)
    cell = max(2.0 * np.pi / (lattice.n_t_pad * lattice.dt),
               2.0 * np.pi / lattice.box_len)
    away = abs_xi >= 3.0 * cell
    if np.any(away):
        on_cone = []
        for sign in (1.0, -1.0):
            sampled = np.broadcast_to(
                np.asarray(spec.symbol(sign * abs_xi, x1, x2, x3)),
                abs_xi.shape)
            on_cone.append(np.abs(sampled[away]))
        on_cone = np.concatenate(on_cone)
        scale = max(np.max(np.abs(table)), np.max(on_cone))
        if scale == 0.0 or np.min(on_cone) <= 1e-12 * scale:
            raise ValueError("multiplier symbol vanishes on the discrete "
                             "light cone; the factor is not invertible "
                             "where the measurement carries information")
    return table


def _ad_differential(spec: PseudoDiffSpec, f: ScalarField,
                     conjugate: bool) -> ScalarField:
    lat = f.lattice
    if spec.b is not None and spec.b.lattice != lat:
        raise ValueError("b lives on a different lattice")
    if f.time_axis == "padded":
        if spec.b is not None:
            raise ValueError("padded input needs b = None: b lives on the window")
        values = _spectral_time_derivative(f.values, lat, conjugate)
        return ScalarField(lat, values, time_axis="padded",
                           support_tag=f.support_tag)
    padded = zero_extend(f)
    values = _spectral_time_derivative(padded.values, lat, conjugate)[:lat.n_t]
    if spec.b is not None:
        bval = np.conj(spec.b.values) if conjugate else spec.b.values
        values = values + bval * f.values
    return ScalarField(lat, np.ascontiguousarray(values),
                       support_tag=f.support_tag)


def _ad_multiplier(spec: PseudoDiffSpec, f: ScalarField,
                   conjugate: bool) -> ScalarField:
    lat = f.lattice
    table = _symbol_on_grid(spec, lat)
    if conjugate:
        table = np.conj(table)
    work = f.values if f.time_axis == "padded" else zero_extend(f).values
    out = scipy.fft.ifftn(table * scipy.fft.fftn(work))
    if f.time_axis == "padded":
        return ScalarField(lat, out, time_axis="padded")
    return ScalarField(lat, np.ascontiguousarray(out[:lat.n_t]))


def aD_apply(spec: PseudoDiffSpec, f: ScalarField) -> ScalarField:
    """Apply the first-order factor a(D) to a field.

    Window fields go through the zero-extend / crop sandwich; padded fields
    are transformed on the padded axis directly (differential form requires
    b = None there, since b lives on the window).  The differential form
    never enlarges spatial support, so it propagates the support tag; a
    general multiplier mixes space and drops it.
    """
    if not isinstance(f, ScalarField):
        raise TypeError("aD_apply expects a ScalarField")
    if spec.form == "differential":
        return _ad_differential(spec, f, conjugate=False)
    return _ad_multiplier(spec, f, conjugate=False)


def aD_adjoint(spec: PseudoDiffSpec, g: ScalarField) -> ScalarField:
    """Exact adjoint of :func:`aD_apply` under the dt dx^3 pairing.

    Differential form: -d_t + conj(b); multiplier form: the conjugate
    symbol.  The window sandwich is self-dual (the adjoint of zero-extension
    is the crop), so the identity holds to rounding error.
    """
    if not isinstance(g, ScalarField):
        raise TypeError("aD_adjoint expects a ScalarField")
    if spec.form == "differential":
        return _ad_differential(spec, g, conjugate=True)
    return _ad_multiplier(spec, g, conjugate=True)


# ---------------------------------------------------------------------------
# Cauchy-data recovery
# ---------------------------------------------------------------------------

def default_time_cutoff(lattice: Lattice) -> np.ndarray:
    """Plateau cutoff chi0(t): 1 on [0.15 T, 0.85 T], 0 outside (0.05 T, 0.95 T)."""
    horizon = lattice.t_final
    return smooth_plateau(lattice.t_window, 0.05 * horizon, 0.95 * horizon,
                          0.10 * horizon)


@dataclass(frozen=True)
class CauchyRecoveryConfig:
    """Knobs for :func:`cauchy_recover`.

    ``tol`` bounds the relative normal-equation residual |F*(uT - F d)| /
    |F* uT|; ``transport_tol`` / ``transport_max_iter`` are passed to the
    scattering Neumann iteration inside each forward/adjoint application.
    """

    tol: float = 1e-6
    max_iter: int = 60
    transport_tol: float = 1e-8
    transport_max_iter: int = 50

    def __post_init__(self):
        if not (0.0 < self.tol < 1.0):
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.transport_tol <= 0.0:
            raise ValueError("transport_tol must be positive")
        if self.transport_max_iter < 1:
            raise ValueError("transport_max_iter must be >= 1")


class CauchyRecoveryStagnationError(RuntimeError):
    """CG residual stayed above tolerance for the whole iteration budget.

    Carries the partial result: ``data`` (CauchyData) and ``report``,
    mirroring the divergence contracts of the transport and reconstruction
    solvers.  A plateau here signals an absorption/scattering pair outside
    the regime where the composed chain is injective enough.
    """

    def __init__(self, message: str, data: CauchyData, report: SolveReport):
        super().__init__(message)
        self.data = data
        self.report = report


def cauchy_recover(uT: RayData, spec: HyperbolicOperatorSpec,
                   aD: PseudoDiffSpec,
                   sigma: AbsorptionField | None = None,
                   k: ScatteringKernelField | None = None,
                   chi0: np.ndarray | None = None,
                   config: CauchyRecoveryConfig | None = None):
    """Recover Cauchy data from the final-time measurement.

    Solves the normal equations F* F d = F* uT by conjugate gradients in
    the CGLS arrangement, where F = measure . transport .
    (chi0 . a(D) . wave_solve).  Starting from zero, CG converges to the
    minimum-norm least-squares solution, which is the right notion here:
    components of the data invisible to a(D) after evolution (e.g. the
    spatial mean of f1 under a(D) = d_t) are returned as zero rather than
    invented.  The residual history records ||F d - uT|| / ||uT|| in the
    quadrature-weighted ray norm, which CG drives down monotonically;
    convergence at ``tol`` therefore certifies that the recovered data
    reproduce the measurement through the forward chain to that accuracy.
    Returns (CauchyData, SolveReport); a residual still above tolerance
    after ``max_iter`` raises :class:`CauchyRecoveryStagnationError`
    carrying the partial result.

    Iterates are periodic-model fields: guarded input data spreads at unit
    speed, and the lattice margin >= t_final covers that spread plus the
    remaining ray displacement, so re-tagging the internal sources as
    "guarded" introduces no wrap-around contamination.
    """
    if not isinstance(uT, RayData):
        raise TypeError("cauchy_recover expects RayData")
    lat = uT.lattice
    if spec.lattice != lat:
        raise ValueError("operator spec lives on a different lattice")
    if uT.base_time != lat.t_final:
        raise ValueError("measurement data must be based at t_final")
    config = config if config is not None else CauchyRecoveryConfig()
    cutoff = (default_time_cutoff(lat) if chi0 is None
              else np.asarray(chi0, dtype=float))
    quad = uT.quadrature

    def forward(d: CauchyData) -> RayData:
        field = wave_solve(spec, d)
        src = apply_time_cutoff(aD_apply(aD, field), cutoff)
        src = ScalarField(lat, src.values, support_tag="guarded")
        data, _ = forward_measurement(src, sigma, k, quadrature=quad,
                                      tol=config.transport_tol,
                                      max_iter=config.transport_max_iter)
        return data

    def adjoint(g: RayData) -> CauchyData:
        if k is None and not (sigma is not None and sigma.directional):
            back = lray_adjoint(g, measurement_weight_of(sigma, lat))
        else:
            back, _ = transport.boltzmann_solve_adjoint(
                measure_uT_adjoint(g), sigma, k,
                tol=config.transport_tol,
                max_iter=config.transport_max_iter)
        cut = apply_time_cutoff(back, cutoff)
        return wave_adjoint_solve(spec, aD_adjoint(aD, cut))

    def ray_norm2(g: RayData) -> float:
        return float(np.real(l2_inner(g, g)))

    def pair_norm2(x: CauchyData) -> float:
        return float(np.real(l2_inner(x, x)))

    # CGLS formulation of CG on the normal equations: the measurement-space
    # residual s = uT - F d is carried explicitly, so the reported history is
    # ||F d - uT|| / ||uT|| in the quadrature-weighted ray norm.  CG minimizes
    # exactly that norm over nested Krylov spaces, so the history is
    # non-increasing, and the final entry certifies how well the recovered
    # data reproduce uT through the forward chain.
    bnorm = np.sqrt(ray_norm2(uT))
    if bnorm == 0.0:
        zero = np.zeros(lat.spatial_shape)
        return (CauchyData(lat, zero, zero.copy(), support_tag="guarded"),
                SolveReport(0, (0.0,), True, config.tol))

    s_values = uT.values.copy()
    r = adjoint(uT)
    gamma = pair_norm2(r)
    d1 = np.zeros_like(r.f1)
    d2 = np.zeros_like(r.f2)
    p1, p2 = r.f1.copy(), r.f2.copy()
    history = [1.0]
    converged = False
    iterations = 0
    for it in range(1, config.max_iter + 1):
        if gamma <= 0.0:
            break                       # s is orthogonal to range(F)
        q = forward(CauchyData(lat, p1, p2, support_tag="guarded"))
        qq = ray_norm2(q)
        if qq <= 0.0:
            break
        alpha = gamma / qq
        d1 = d1 + alpha * p1
        d2 = d2 + alpha * p2
        s_values = s_values - alpha * q.values
        s_ray = RayData(lat, quad, s_values, base_time=lat.t_final)
        iterations = it
        history.append(np.sqrt(ray_norm2(s_ray)) / bnorm)
        if history[-1] <= config.tol:
            converged = True
            break
        r = adjoint(s_ray)
        gamma_new = pair_norm2(r)
        beta = gamma_new / gamma
        p1 = r.f1 + beta * p1
        p2 = r.f2 + beta * p2
        gamma = gamma_new

    recovered = CauchyData(lat, d1, d2, support_tag="guarded")
    report = SolveReport(iterations, tuple(history), converged, config.tol)
    if not converged:
        raise CauchyRecoveryStagnationError(
            f"measurement residual still {history[-1]:.3e} > "
            f"tol = {config.tol:.3e} after {iterations} iterations",
            recovered, report)
    return recovered, report
