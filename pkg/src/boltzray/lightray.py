"""The weighted light ray transform, its adjoint, and the normal operator.

The transform integrates a spacetime field along unit-speed lines,

    (L_kappa f)(x, theta) = int kappa(s, x + s theta, theta)
                                f(s, x + s theta[, theta]) ds ,

with base points x on the spatial lattice and directions theta from the
shared sphere quadrature, so ray data closes over the same two
discretizations as everything else.  ``base_time`` relabels the lines:
``base_time = b`` attaches the value at (x, theta) to s -> (s, x + (s-b)
theta), which is how a final-time transport measurement (lines through
(t_final, x)) and the transform proper (lines through (0, x)) coexist as the
same kind of object.

Discretization, fixed once here:

* the s-integral is a trapezoid rule over the time window (endpoint slabs
  carry weight 1/2), each sample being one periodic trilinear shift of the
  already-weighted slab kappa[s] * f[s];
* the adjoint is the exact transpose of that sum,

    (L*_kappa g)(s, y) = c_s  sum_j w_j conj(kappa(s, y, theta_j))
                               g(y - (s - b) theta_j, theta_j) ,

  where c_s is the same trapezoid endpoint factor.  Away from the two
  endpoint slabs this is the continuum back-smear formula verbatim; keeping
  c_s is what makes <L f, g> = <f, L* g> hold at machine precision for the
  plain Riemann-sum inner products of :mod:`.core`.
* the normal operator N_kappa = L*_kappa L_kappa is realized by composition.
  The singular delta-on-the-cone kernel form is kept only as a pointwise
  cross-check (:func:`normal_kernel_point`), evaluated in polar coordinates
  where the 1/|x-y|^2 factor cancels.

Fields handed to the forward transform must vanish outside the lattice guard
region; a line segment of length t_final <= support_margin can then never
meet two periodic copies of the support, so the periodic computation agrees
with the whole-space transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.integrate

from .core import (
    DirectionQuadrature,
    KineticField,
    Lattice,
    RayData,
    ScalarField,
    interp_spacetime,
    require_guarded,
    shift_periodic,
)

__all__ = [
    "WeightFunction",
    "unit_weight",
    "sampled_weight",
    "measurement_weight",
    "lray",
    "lray_weighted",
    "lray_adjoint",
    "normal_compose",
    "normal_kernel_point",
]


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Weight kappa(s, y, theta) attached to the light ray transform.

    Three representations share one interface (:meth:`direction_table`):

    * kind ``"one"``: kappa identically 1, the unweighted transform;
    * kind ``"sampled"``: kappa tabulated on the lattice, shape
      (n_t, n_x, n_x, n_x) for direction-independent weights or with a
      trailing direction axis matching some quadrature;
    * kind ``"measurement"``: the factored attenuation weight

          kappa(s, y, theta) = exp(-lam * int_s^{t_end}
                                    sigma(r, y + (r - s) theta) dr),

      which is what turns the time-``t_end`` measurement of the absorbing
      transport equation into a weighted ray transform of its source.  For
      sigma depending on time only the weight is a scalar per time slab
      (tabulated once); for sigma(t, x) the optical depth is accumulated
      along each requested direction on demand.

    Weights built from real sigma are positive by construction.  Use the
    module-level constructors rather than instantiating directly.
    """

    lattice: Lattice
    kind: str
    values: np.ndarray | None = None       # sampled kappa
    sigma: np.ndarray | None = None        # measurement: absorption samples
    sigma_kind: str | None = None          # "time" | "full"
    lam: complex = 1.0                     # scales sigma in the exponent
    t_end: float | None = None             # upper endpoint of the depth integral

    def __post_init__(self):
        lat = self.lattice
        if self.kind == "one":
            pass
        elif self.kind == "sampled":
            v = self.values
            if v is None:
                raise ValueError("sampled weight needs values")
            ok = v.shape == lat.window_shape or (
                v.ndim == 5 and v.shape[:4] == lat.window_shape and v.shape[4] >= 1)
            if not ok:
                raise ValueError(
                    f"weight values shape {v.shape} incompatible with the lattice")
            if not np.all(np.isfinite(v)):
                raise ValueError("weight values contain non-finite entries")
            v.setflags(write=False)
        elif self.kind == "measurement":
            if self.sigma is None or self.sigma_kind not in ("time", "full"):
                raise ValueError("measurement weight needs sigma and sigma_kind")
            expected = (lat.n_t,) if self.sigma_kind == "time" else lat.window_shape
            if self.sigma.shape != expected:
                raise ValueError(
                    f"sigma shape {self.sigma.shape} != {expected} for "
                    f"{self.sigma_kind!r} absorption")
            if not (np.all(np.isfinite(self.sigma)) and np.isfinite(self.lam)):
                raise ValueError("sigma/lam contain non-finite entries")
            self.sigma.setflags(write=False)
            if self.t_end is None:
                object.__setattr__(self, "t_end", lat.t_final)
            iend = int(round(self.t_end / lat.dt))
            if not (0 <= iend <= lat.n_t - 1) or abs(
                    self.t_end - iend * lat.dt) > 1e-9 * lat.t_final:
                raise ValueError(f"t_end={self.t_end} must lie on the time grid")
            if self.sigma_kind == "full" and iend != lat.n_t - 1:
                raise ValueError(
                    "sigma(t, x) weights are only factored from the final-time "
                    "measurement (t_end = t_final)")
            object.__setattr__(self, "_iend", iend)
            if self.sigma_kind == "time":
                depth = scipy.integrate.cumulative_trapezoid(
                    self.sigma, dx=lat.dt, initial=0.0)
                object.__setattr__(
                    self, "_time_table", np.exp(-self.lam * (depth[iend] - depth)))
        else:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        object.__setattr__(self, "_unit_table", np.ones(lat.n_t))

    @property
    def n_dir_required(self) -> int | None:
        """Direction count a quadrature must have, or None if unconstrained."""
        if self.kind == "sampled" and self.values.ndim == 5:
            return self.values.shape[4]
        return None

    @property
    def dtype(self) -> np.dtype:
        if self.kind == "sampled":
            return self.values.dtype
        if self.kind == "measurement":
            return np.result_type(self.sigma.dtype, type(self.lam))
        return np.dtype(float)

    def direction_table(self, j: int, quadrature: DirectionQuadrature):
        """kappa(s, ., theta_j) as ("scalar", (n_t,)) or ("field", (n_t, nx, nx, nx)).

        Scalar tables broadcast over space; either form multiplies a time
        slab as ``table[s] * slab``.
        """
        if self.kind == "one":
            return "scalar", self._unit_table
        if self.kind == "sampled":
            if self.values.ndim == 4:
                return "field", self.values
            return "field", self.values[..., j]
        if self.sigma_kind == "time":
            return "scalar", self._time_table
        return "field", self._depth_table(quadrature.nodes[j])

    def _depth_table(self, theta: np.ndarray) -> np.ndarray:
        """exp(-lam * depth) along direction theta for sigma(t, x).

        depth(s, y) = int_s^{t_end} sigma(r, y + (r - s) theta) dr by the
        trapezoid rule in r.  The sample at lag ell = r - s is the sigma slab
        at time r shifted by ell*dt*theta, which depends on (ell, r) only
        through those two indices: one block shift of sigma[ell:] per lag
        serves every output slab s = r - ell, and each entry of the table is
        a single trilinear interpolation (shifts never compound).
        """
        lat = self.lattice
        iend = self._iend
        step = (lat.dt / lat.dx) * np.asarray(theta, dtype=float)
        depth = np.zeros((lat.n_t,) + lat.spatial_shape,
                         dtype=np.result_type(self.sigma.dtype, float))
        for ell in range(iend + 1):
            block = shift_periodic(self.sigma[ell:iend + 1], ell * step)
            depth[:iend + 1 - ell] += lat.dt * block
        # Trapezoid endpoints: the loop added full weight everywhere, so take
        # half a step back at r = s (lag 0) and at r = t_end.
        depth[:iend + 1] -= 0.5 * lat.dt * self.sigma[:iend + 1]
        last = self.sigma[iend]
        for s in range(iend + 1):
            depth[s] -= 0.5 * lat.dt * shift_periodic(last, (iend - s) * step)
        return np.exp(-self.lam * depth)


def unit_weight(lattice: Lattice) -> WeightFunction:
    """kappa identically one."""
    return WeightFunction(lattice, "one")


def sampled_weight(lattice: Lattice, values: np.ndarray) -> WeightFunction:
    """kappa tabulated on the lattice, optionally with a direction axis."""
    return WeightFunction(lattice, "sampled", values=np.asarray(values))


def measurement_weight(lattice: Lattice, sigma, *, lam: complex = 1.0,
                       t_end: float | None = None) -> WeightFunction:
    """Attenuation weight exp(-lam int_s^{t_end} sigma) factored from sigma.

    ``sigma`` of shape (n_t,) is treated as time-dependent only; shape
    (n_t, n_x, n_x, n_x) as a full spacetime absorption, in which case
    ``t_end`` must be the final lattice time.
    """
    sigma = np.asarray(sigma)
    kind = "time" if sigma.ndim == 1 else "full"
    return WeightFunction(lattice, "measurement", sigma=sigma,
                          sigma_kind=kind, lam=lam, t_end=t_end)


# ---------------------------------------------------------------------------
# Guards
# ---------------------------------------------------------------------------

def _trapezoid_weights(n_t: int) -> np.ndarray:
    c = np.ones(n_t)
    c[0] = 0.5
    c[-1] = 0.5
    return c


def _check_weight(weight: WeightFunction, lattice: Lattice,
                  quadrature: DirectionQuadrature) -> None:
    if not isinstance(weight, WeightFunction):
        raise TypeError("weight must be a WeightFunction")
    if weight.lattice != lattice:
        raise ValueError("weight and field lattices differ")
    nd = weight.n_dir_required
    if nd is not None and nd != quadrature.n_dir:
        raise ValueError(
            f"weight carries {nd} directions but the quadrature has "
            f"{quadrature.n_dir}")


# ---------------------------------------------------------------------------
# Forward transform
# ---------------------------------------------------------------------------

def lray(f, quadrature: DirectionQuadrature | None = None, *,
         base_time: float = 0.0) -> RayData:
    """Unweighted light ray transform; see :func:`lray_weighted`."""
    return lray_weighted(f, None, quadrature, base_time=base_time)


def lray_weighted(f, weight: WeightFunction | None = None,
                  quadrature: DirectionQuadrature | None = None, *,
                  base_time: float = 0.0) -> RayData:
    """(L_kappa f)(x, theta_j) = trapezoid_s kappa(s,.,theta_j) f(s, x + (s-b) theta_j).

    ``f`` is a ScalarField (needs an explicit quadrature) or a KineticField
    (brings its own); it must vanish outside the lattice guard region.  Each
    time slab is weighted in place and then shifted as a whole, so a slab
    entry is interpolated exactly once.
    """
    lat = f.lattice
    if isinstance(f, KineticField):
        if quadrature is not None and quadrature is not f.quadrature:
            raise ValueError("kinetic fields carry their own quadrature")
        quadrature = f.quadrature
    elif isinstance(f, ScalarField):
        if quadrature is None:
            raise ValueError("scalar-field input needs a DirectionQuadrature")
    else:
        raise TypeError(f"cannot transform {type(f).__name__}")
    if weight is None:
        weight = unit_weight(lat)
    _check_weight(weight, lat, quadrature)
    require_guarded(f, what="transform input")

    kinetic = isinstance(f, KineticField)
    coeff = lat.dt * _trapezoid_weights(lat.n_t)
    times = lat.t_window
    dtype = np.result_type(f.values.dtype, weight.dtype)
    out = np.empty(lat.spatial_shape + (quadrature.n_dir,), dtype=dtype)

    for j in range(quadrature.n_dir):
        theta = quadrature.nodes[j]
        _, table = weight.direction_table(j, quadrature)
        acc = np.zeros(lat.spatial_shape, dtype=dtype)
        for s in range(lat.n_t):
            slab = f.values[s, ..., j] if kinetic else f.values[s]
            shift = ((times[s] - base_time) / lat.dx) * theta
            acc += coeff[s] * shift_periodic(table[s] * slab, shift)
        out[..., j] = acc
    return RayData(lat, quadrature, out, base_time=base_time)


# ---------------------------------------------------------------------------
# Adjoint and normal operator
# ---------------------------------------------------------------------------

def lray_adjoint(g: RayData, weight: WeightFunction | None = None, *,
                 output: str = "scalar"):
    """Back-smear ray data along its lines: the exact transpose of the forward sum.

    output="scalar" (adjoint of the ScalarField transform):

        (L* g)(s, y) = c_s sum_j w_j conj(kappa(s, y, theta_j))
                        g(y - (s - b) theta_j, theta_j)

    with c_s the trapezoid endpoint factor and b = ``g.base_time``.
    output="kinetic" (adjoint of the KineticField transform) keeps the
    direction axis and drops the quadrature weight w_j, which is already
    carried by the kinetic inner product.
    """
    if not isinstance(g, RayData):
        raise TypeError("lray_adjoint expects RayData")
    if output not in ("scalar", "kinetic"):
        raise ValueError(f"unknown output kind {output!r}")
    lat, quad = g.lattice, g.quadrature
    if weight is None:
        weight = unit_weight(lat)
    _check_weight(weight, lat, quad)

    coeff = _trapezoid_weights(lat.n_t)
    times = lat.t_window
    dtype = np.result_type(g.values.dtype, weight.dtype)
    scalar = output == "scalar"
    shape = lat.window_shape if scalar else lat.window_shape + (quad.n_dir,)
    out = np.zeros(shape, dtype=dtype)

    for j in range(quad.n_dir):
        theta = quad.nodes[j]
        _, table = weight.direction_table(j, quad)
        gj = g.values[..., j]
        for s in range(lat.n_t):
            shift = -((times[s] - g.base_time) / lat.dx) * theta
            smear = np.conj(table[s]) * shift_periodic(gj, shift)
            if scalar:
                out[s] += (coeff[s] * quad.weights[j]) * smear
            else:
                out[s, ..., j] = coeff[s] * smear
    if scalar:
        return ScalarField(lat, out)
    return KineticField(lat, quad, out)


def normal_compose(f: ScalarField, weight: WeightFunction | None = None,
                   quadrature: DirectionQuadrature | None = None) -> ScalarField:
    """N_kappa f = L*_kappa (L_kappa f), transform lines based at s = 0.

    Composition of the two stable discrete maps; never a quadrature of the
    singular normal kernel.  N is a discrete Gram operator by construction:
    symmetric, and <N f, f> = ||L f||^2 >= 0 exactly.
    """
    if not isinstance(f, ScalarField):
        raise TypeError("normal_compose expects a ScalarField")
    return lray_adjoint(lray_weighted(f, weight, quadrature), weight)


def normal_kernel_point(f: ScalarField, t: float, x,
                        quadrature: DirectionQuadrature, *,
                        weight: WeightFunction | None = None,
                        n_radial: int = 64):
    """(N_kappa f)(t, x) at a single point, from the spherical kernel form.

    Splitting the line integral of L* L at s = t and switching to polar
    coordinates y = x +- r theta turns the singular 1/|x-y|^2 kernel into a
    plain radial integral (the Jacobian r^2 cancels it):

        N f(t, x) = int_{S^2} int_0^inf kappa(t,x,theta) *
                    [ kappa(t+r, x+r theta, theta) f(t+r, x+r theta)
                    + kappa(t-r, x-r theta, theta) f(t-r, x-r theta) ] dr dtheta

    restricted here to the time window.  Everything is sampled pointwise
    (multilinear interpolation, trapezoid in r with ~``n_radial`` steps per
    window length), independent of the shift-based composition path, so this
    serves as a cross-check of :func:`normal_compose` at a few points.
    Requires a direction-independent weight with real sigma.
    """
    lat = f.lattice
    if weight is None:
        weight = unit_weight(lat)
    x = np.asarray(x, dtype=float)

    if weight.kind == "measurement" and weight.sigma_kind == "time":
        if np.iscomplexobj(weight.sigma):
            raise NotImplementedError("pointwise weights need real sigma")
        cum = scipy.integrate.cumulative_trapezoid(
            weight.sigma, dx=lat.dt, initial=0.0)
        cum_end = cum[weight._iend]

        def kappa_at(tt, yy):
            return np.exp(-weight.lam * (cum_end - np.interp(tt, lat.t_window, cum)))
    elif weight.kind == "sampled" and weight.values.ndim == 4:
        wfield = ScalarField(lat, weight.values)

        def kappa_at(tt, yy):
            return interp_spacetime(wfield, tt, yy)
    elif weight.kind == "one":
        def kappa_at(tt, yy):
            return 1.0
    else:
        raise NotImplementedError(
            "pointwise evaluation supports direction-independent weights only")

    total = 0.0
    for j in range(quadrature.n_dir):
        theta = quadrature.nodes[j]
        k0 = quadrature.weights[j] * kappa_at(t, x)
        for sign in (1.0, -1.0):
            span = lat.t_final - t if sign > 0 else t
            if span <= 0.0:
                continue
            n_r = max(2, int(round(n_radial * span / lat.t_final)) + 1)
            radii = np.linspace(0.0, span, n_r)
            vals = np.empty(n_r, dtype=np.result_type(f.values.dtype, float))
            for i, r in enumerate(radii):
                tt = t + sign * r
                yy = x + (sign * r) * theta
                vals[i] = kappa_at(tt, yy) * interp_spacetime(f, tt, yy)
            total += k0 * scipy.integrate.trapezoid(vals, dx=radii[1] - radii[0])
    return total
