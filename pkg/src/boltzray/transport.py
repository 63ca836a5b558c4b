"""Forward transport: attenuated characteristic integration, scattering,
Boltzmann solve, and the final-time measurement.

The model problem is the linear kinetic equation on the spacetime box,

    (d/dt + theta . grad_x + sigma) u = K u + f,     u(0, ., .) = 0,

with absorption sigma (time-only, sigma(t, x), or sigma(t, x, theta)),
scattering (K u)(t, x, theta_a) = sum_b w_b k(t, x, theta_a, theta_b)
u(t, x, theta_b), and a source f that may or may not carry a direction
dependence.  Complex scalar multipliers lam_sigma, lam_k scale both
coefficients so one can walk the analytic families used in perturbative
arguments.

The attenuated free solve T1^{-1} is evaluated in lag form along
characteristics,

    u(t, x, theta) = int_0^t exp(-int_{t-r}^t sigma(rho, x+(rho-t)theta) drho)
                     f(t-r, x - r theta) dr ,

with trapezoid rules in both the lag r and the inner depth integral.  For a
fixed direction, the sample at lag r is the source slab at time t - r
shifted rigidly by -r theta, so slabs at every output time t share one block
shift per lag; each sample is interpolated exactly once and the whole map is
an explicit finite sum of `shift-multiply` terms.  That makes its transpose
(:func:`t1_inverse_adjoint`) exact to rounding, which the least-squares
pipelines depend on.

The full solve inverts Id - T1^{-1} K by Neumann iteration and certifies
only the contractive regime: when ||u^(m+1) - u^(m)|| fails to drop below
tolerance within ``max_iter`` it raises :class:`TransportDivergenceError`
carrying the residual history, rather than returning an uncertified field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.integrate

from .core import (
    DirectionQuadrature,
    KineticField,
    Lattice,
    RayData,
    ScalarField,
    _pairwise_sum,
    guard_violation,
    interp_spacetime,
    require_guarded,
    shift_periodic,
)
from . import lightray

__all__ = [
    "AbsorptionField",
    "ScatteringKernelField",
    "SolveReport",
    "TransportDivergenceError",
    "factorized_scattering",
    "dense_scattering",
    "conservative_absorption",
    "measurement_weight_of",
    "apply_time_cutoff",
    "integrating_factor",
    "t1_inverse",
    "t1_inverse_adjoint",
    "scattering_apply",
    "scattering_adjoint",
    "boltzmann_solve",
    "boltzmann_solve_adjoint",
    "measure_uT",
    "measure_uT_adjoint",
    "forward_measurement",
    "pde_residual",
]


# ---------------------------------------------------------------------------
# Coefficient containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AbsorptionField:
    """Absorption coefficient lam * sigma.

    ``values`` of shape (n_t,) is time-only; (n_t, n_x, n_x, n_x) a full
    spacetime coefficient; an extra trailing direction axis makes it
    sigma(t, x, theta) on some quadrature (needed e.g. for the conservative
    partner of a scattering kernel).  Spacetime coefficients must vanish
    outside the lattice guard region unless tagged ``"guarded"``.
    """

    lattice: Lattice
    values: np.ndarray
    lam: complex = 1.0
    support_tag: str | None = None

    def __post_init__(self):
        lat = self.lattice
        v = self.values
        ok = (v.shape == (lat.n_t,)
              or v.shape == lat.window_shape
              or (v.ndim == 5 and v.shape[:4] == lat.window_shape))
        if not ok:
            raise ValueError(f"absorption shape {v.shape} incompatible with lattice")
        if not (np.all(np.isfinite(v)) and np.isfinite(self.lam)):
            raise ValueError("absorption contains non-finite entries")
        if v.ndim > 1 and self.support_tag != "guarded" and guard_violation(v, lat):
            raise ValueError("absorption has support outside the lattice guard region")
        v.setflags(write=False)

    @property
    def kind(self) -> str:
        return "time" if self.values.ndim == 1 else "full"

    @property
    def directional(self) -> bool:
        return self.values.ndim == 5

    @property
    def n_dir_required(self) -> int | None:
        return self.values.shape[4] if self.directional else None

    @property
    def dtype(self) -> np.dtype:
        return np.result_type(self.values.dtype, type(self.lam))


@dataclass(frozen=True, eq=False)
class ScatteringKernelField:
    """Scattering kernel lam * k(t, x, theta_a, theta_b).

    Factorized form: k = c(t, x) p(theta_a . theta_b) with ``amplitude`` the
    lattice samples of c and ``phase`` a callable on [-1, 1]; the direction
    Gram matrix is materialized per quadrature.  Dense form: explicit values
    of shape window + (n_dir, n_dir), practical only for small grids.
    """

    lattice: Lattice
    kind: str                                    # "factorized" | "dense"
    amplitude: np.ndarray | None = None
    phase: Callable[[np.ndarray], np.ndarray] | None = None
    dense: np.ndarray | None = None
    lam: complex = 1.0
    support_tag: str | None = None

    def __post_init__(self):
        lat = self.lattice
        if self.kind == "factorized":
            if self.amplitude is None or self.phase is None:
                raise ValueError("factorized kernel needs amplitude and phase")
            if self.amplitude.shape != lat.window_shape:
                raise ValueError(
                    f"amplitude shape {self.amplitude.shape} != {lat.window_shape}")
            if not np.all(np.isfinite(self.amplitude)):
                raise ValueError("amplitude contains non-finite entries")
            spatial = self.amplitude
            spatial.setflags(write=False)
        elif self.kind == "dense":
            if self.dense is None:
                raise ValueError("dense kernel needs values")
            if not (self.dense.ndim == 6
                    and self.dense.shape[:4] == lat.window_shape
                    and self.dense.shape[4] == self.dense.shape[5]):
                raise ValueError(
                    f"dense kernel shape {self.dense.shape} must be "
                    "window + (n_dir, n_dir)")
            if not np.all(np.isfinite(self.dense)):
                raise ValueError("dense kernel contains non-finite entries")
            spatial = self.dense
            spatial.setflags(write=False)
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not np.isfinite(self.lam):
            raise ValueError("lam must be finite")
        if self.support_tag != "guarded" and guard_violation(spatial, lat):
            raise ValueError("kernel has support outside the lattice guard region")

    @property
    def n_dir_required(self) -> int | None:
        return self.dense.shape[4] if self.kind == "dense" else None

    def phase_matrix(self, quadrature: DirectionQuadrature) -> np.ndarray:
        """Gram matrix P[a, b] = p(theta_a . theta_b) for a factorized kernel."""
        mu = np.clip(quadrature.nodes @ quadrature.nodes.T, -1.0, 1.0)
        p = np.asarray(self.phase(mu))
        if p.shape != mu.shape or not np.all(np.isfinite(p)):
            raise ValueError("phase must map the node Gram matrix to finite values")
        return p

    def materialize_dense(self, quadrature: DirectionQuadrature) -> "ScatteringKernelField":
        """Dense tabulation of a factorized kernel (small grids only)."""
        if self.kind != "factorized":
            return self
        p = self.phase_matrix(quadrature)
        values = self.amplitude[..., None, None] * p
        return ScatteringKernelField(self.lattice, "dense", dense=values,
                                     lam=self.lam, support_tag=self.support_tag)


def factorized_scattering(lattice: Lattice, amplitude, phase, *,
                          lam: complex = 1.0,
                          support_tag: str | None = None) -> ScatteringKernelField:
    return ScatteringKernelField(lattice, "factorized",
                                 amplitude=np.asarray(amplitude), phase=phase,
                                 lam=lam, support_tag=support_tag)


def dense_scattering(lattice: Lattice, values, *, lam: complex = 1.0,
                     support_tag: str | None = None) -> ScatteringKernelField:
    return ScatteringKernelField(lattice, "dense", dense=np.asarray(values),
                                 lam=lam, support_tag=support_tag)


def conservative_absorption(k: ScatteringKernelField,
                            quadrature: DirectionQuadrature) -> AbsorptionField:
    """The absorption that balances k exactly: sigma(z, theta_b) = sum_a w_a k(z, theta_a, theta_b).

    Built with the same multiplier lam as the kernel, so the discrete
    direction sums of K u and sigma u cancel identically and total mass obeys
    d/dt int int u = int int f.
    """
    w = quadrature.weights
    if k.kind == "dense":
        values = np.einsum("a,...ab->...b", w, k.dense)
    else:
        col = w @ k.phase_matrix(quadrature)            # (n_dir,)
        values = k.amplitude[..., None] * col
    return AbsorptionField(k.lattice, values, lam=k.lam,
                           support_tag=k.support_tag)


def measurement_weight_of(sigma: AbsorptionField | None,
                          lattice: Lattice) -> lightray.WeightFunction:
    """The ray-transform weight exp(-lam int_s^T sigma) of a final-time measurement."""
    if sigma is None:
        return lightray.unit_weight(lattice)
    if sigma.directional:
        raise ValueError(
            "direction-dependent absorption has no scalar measurement weight")
    return lightray.measurement_weight(lattice, sigma.values, lam=sigma.lam)


def apply_time_cutoff(f, chi0: np.ndarray):
    """Multiply a source by a temporal cutoff chi0(t), compactly supported in (0, T)."""
    chi0 = np.asarray(chi0)
    lat = f.lattice
    if chi0.shape != (lat.n_t,):
        raise ValueError(f"cutoff shape {chi0.shape} != ({lat.n_t},)")
    if chi0[0] != 0.0 or chi0[-1] != 0.0 or not np.any(chi0):
        raise ValueError("cutoff must vanish at t=0, T and not be identically zero")
    shape = (-1,) + (1,) * (f.values.ndim - 1)
    values = chi0.reshape(shape) * f.values
    if isinstance(f, KineticField):
        return KineticField(lat, f.quadrature, values, support_tag=f.support_tag)
    return ScalarField(lat, values, support_tag=f.support_tag)


# ---------------------------------------------------------------------------
# Solve report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolveReport:
    """Outcome of an iterative solve: relative update norms per iteration."""

    iterations: int
    residual_history: tuple
    converged: bool
    tol: float

    def __post_init__(self):
        object.__setattr__(self, "residual_history",
                           tuple(float(r) for r in self.residual_history))
        if not self.residual_history:
            raise ValueError("residual_history must be non-empty")
        if self.converged and self.residual_history[-1] > self.tol:
            raise ValueError("converged report with residual above tolerance")


class TransportDivergenceError(RuntimeError):
    """Neumann iteration left the contractive regime."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Attenuation tables
# ---------------------------------------------------------------------------

def _sigma_slab(sigma: AbsorptionField, dir_index: int):
    v = sigma.values
    return v[..., dir_index] if sigma.directional else v


def _lag_weights(lattice: Lattice, sigma: AbsorptionField | None,
                 theta: np.ndarray, dir_index: int):
    """Yield (i_r, w) over lags i_r = 0 .. n_t-1 for one direction.

    w is exp(-lam * depth) at lag i_r, aligned with output slabs
    i_t = i_r .. n_t-1: either None (sigma absent), a (n_t - i_r,) scalar
    table (time-only sigma), or a (n_t - i_r, n_x, n_x, n_x) array.  The
    depth integral int_{t-r}^{t} sigma(rho, x + (rho - t) theta) drho is a
    trapezoid over the same lag grid; for spacetime sigma it is accumulated
    multiplicatively, one new block shift of sigma per lag, so each factor
    is again a single interpolation.
    """
    n_t = lattice.n_t
    if sigma is None:
        for i_r in range(n_t):
            yield i_r, None
        return

    lam = sigma.lam
    if sigma.kind == "time":
        cum = scipy.integrate.cumulative_trapezoid(
            sigma.values, dx=lattice.dt, initial=0.0)
        for i_r in range(n_t):
            yield i_r, np.exp(-lam * (cum[i_r:] - cum[:n_t - i_r]))
        return

    vals = _sigma_slab(sigma, dir_index)
    step = -(lattice.dt / lattice.dx) * theta
    w = np.ones((n_t,) + lattice.spatial_shape,
                dtype=np.result_type(vals.dtype, type(lam)))
    prev = vals                                   # sigma slabs at lag 0
    yield 0, w
    half = 0.5 * lattice.dt
    for i_r in range(1, n_t):
        cur = shift_periodic(vals[:n_t - i_r], i_r * step)
        w[i_r:] = w[i_r:] * np.exp(-lam * (half * (prev[1:n_t - i_r + 1] + cur)))
        prev = cur
        yield i_r, w[i_r:]


def integrating_factor(sigma: AbsorptionField | None, t: float, s: float,
                       x, theta, dir_index: int | None = None):
    """exp(-int_s^t sigma(r, x + (r - t) theta, theta) dr), pointwise.

    The characteristic is the one through (t, x) with direction theta; the
    integral runs along it from time s to t with trapezoid steps of size
    about dt.  Direction-dependent absorption requires ``dir_index``.
    """
    if sigma is None:
        return 1.0
    lat = sigma.lattice
    if not (0.0 <= s <= t <= lat.t_final + 1e-12 * lat.t_final):
        raise ValueError(f"need 0 <= s <= t <= t_final, got s={s}, t={t}")
    if sigma.directional and dir_index is None:
        raise ValueError("direction-dependent absorption needs dir_index")
    if t == s:
        return 1.0

    n_seg = max(1, int(np.ceil((t - s) / lat.dt - 1e-12)))
    times = np.linspace(s, t, n_seg + 1)
    if sigma.kind == "time":
        samples = np.interp(times, lat.t_window, sigma.values)
    else:
        probe = ScalarField(lat, _sigma_slab(sigma, dir_index or 0),
                            support_tag="guarded")
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        samples = np.array([interp_spacetime(probe, r, x + (r - t) * theta)
                            for r in times])
    depth = scipy.integrate.trapezoid(samples, x=times)
    return np.exp(-sigma.lam * depth)


# ---------------------------------------------------------------------------
# Attenuated characteristic solve T1^{-1} and its transpose
# ---------------------------------------------------------------------------

def _resolve_quadrature(f, quadrature, sigma):
    if isinstance(f, KineticField):
        if quadrature is not None and quadrature is not f.quadrature:
            raise ValueError("kinetic fields carry their own quadrature")
        quadrature = f.quadrature
    elif quadrature is None:
        raise ValueError("scalar-field input needs a DirectionQuadrature")
    if sigma is not None:
        if sigma.lattice != f.lattice:
            raise ValueError("absorption and field lattices differ")
        nd = sigma.n_dir_required
        if nd is not None and nd != quadrature.n_dir:
            raise ValueError(
                f"absorption carries {nd} directions but the quadrature has "
                f"{quadrature.n_dir}")
    return quadrature


def t1_inverse(f, sigma: AbsorptionField | None = None,
               quadrature: DirectionQuadrature | None = None) -> KineticField:
    """Solve (d/dt + theta . grad + sigma) u = f, u(0) = 0, along characteristics.

    Lag-form trapezoid sum: u[i_t, ., j] = sum_{i_r <= i_t} dt c_{i_r}
    W(i_r)[i_t] * (S_{-i_r dt theta_j} f[i_t - i_r]), where W is the
    attenuation table of :func:`_lag_weights` and the endpoint lags i_r = 0,
    i_t carry weight 1/2.  One block shift per (direction, lag): the slab at
    lag i_r contributes to every output time at once.
    """
    quadrature = _resolve_quadrature(f, quadrature, sigma)
    require_guarded(f, what="transport source")
    lat = f.lattice
    n_t = lat.n_t
    kinetic = isinstance(f, KineticField)
    dtype = np.result_type(f.values.dtype,
                           sigma.dtype if sigma is not None else np.float64)
    u = np.zeros(lat.window_shape + (quadrature.n_dir,), dtype=dtype)
    dt = lat.dt

    for j in range(quadrature.n_dir):
        theta = quadrature.nodes[j]
        step = -(dt / lat.dx) * theta
        fj = f.values[..., j] if kinetic else f.values
        uj = u[..., j]
        for i_r, w in _lag_weights(lat, sigma, theta, j):
            block = fj[:n_t - i_r] if i_r == 0 else shift_periodic(
                fj[:n_t - i_r], i_r * step)
            if w is None:
                uj[i_r:] += dt * block
                uj[i_r] -= (0.5 * dt) * block[0]
            elif w.ndim == 1:                    # scalar table over i_t
                uj[i_r:] += (dt * w)[:, None, None, None] * block
                uj[i_r] -= (0.5 * dt * w[0]) * block[0]
            else:
                uj[i_r:] += dt * (w * block)
                uj[i_r] -= (0.5 * dt) * (w[0] * block[0])
        uj -= (0.5 * dt) * fj                    # lag-0 endpoint of every slab
    return KineticField(lat, quadrature, u)


def t1_inverse_adjoint(v: KineticField, sigma: AbsorptionField | None = None,
                       *, output: str = "scalar"):
    """Exact transpose of :func:`t1_inverse` (conjugating the attenuation).

    output="scalar" returns the adjoint against direction-independent
    sources, sum_j w_j included; output="kinetic" keeps the direction axis
    (the adjoint against kinetic sources).
    """
    if not isinstance(v, KineticField):
        raise TypeError("t1_inverse_adjoint expects a KineticField")
    if output not in ("scalar", "kinetic"):
        raise ValueError(f"unknown output kind {output!r}")
    lat, quad = v.lattice, v.quadrature
    if sigma is not None:
        nd = sigma.n_dir_required
        if sigma.lattice != lat:
            raise ValueError("absorption and field lattices differ")
        if nd is not None and nd != quad.n_dir:
            raise ValueError("absorption direction count mismatch")

    n_t = lat.n_t
    dt = lat.dt
    scalar = output == "scalar"
    dtype = np.result_type(v.values.dtype,
                           sigma.dtype if sigma is not None else np.float64)
    out = np.zeros(lat.window_shape + (() if scalar else (quad.n_dir,)),
                   dtype=dtype)

    for j in range(quad.n_dir):
        theta = quad.nodes[j]
        step = -(dt / lat.dx) * theta
        vj = v.values[..., j]
        acc = np.zeros(lat.window_shape, dtype=dtype)
        for i_r, w in _lag_weights(lat, sigma, theta, j):
            if w is None:
                src = vj[i_r:]
            elif w.ndim == 1:
                src = np.conj(w)[:, None, None, None] * vj[i_r:]
            else:
                src = np.conj(w) * vj[i_r:]
            block = src if i_r == 0 else shift_periodic(src, -i_r * step)
            acc[:n_t - i_r] += dt * block
            acc[0] -= (0.5 * dt) * block[0]
        acc -= (0.5 * dt) * vj
        if scalar:
            out += quad.weights[j] * acc
        else:
            out[..., j] = acc
    if scalar:
        return ScalarField(lat, out)
    return KineticField(lat, quad, out)


# ---------------------------------------------------------------------------
# Scattering
# ---------------------------------------------------------------------------

def _check_kernel(k: ScatteringKernelField, u: KineticField) -> None:
    if k.lattice != u.lattice:
        raise ValueError("kernel and field lattices differ")
    nd = k.n_dir_required
    if nd is not None and nd != u.quadrature.n_dir:
        raise ValueError(
            f"kernel carries {nd} directions but the field has "
            f"{u.quadrature.n_dir}")


def scattering_apply(k: ScatteringKernelField, u: KineticField) -> KineticField:
    """(K u)(t, x, theta_a) = lam sum_b w_b k(t, x, theta_a, theta_b) u(t, x, theta_b)."""
    _check_kernel(k, u)
    quad = u.quadrature
    w = quad.weights
    if k.kind == "factorized":
        m = k.phase_matrix(quad) * w[None, :]          # M[a, b] = p_ab w_b
        flat = u.values.reshape(-1, quad.n_dir)
        mixed = (flat @ m.T).reshape(u.values.shape)
        values = k.lam * k.amplitude[..., None] * mixed
    else:
        values = k.lam * np.einsum("...ab,...b->...a", k.dense, w * u.values)
    return KineticField(u.lattice, quad, values)


def scattering_adjoint(k: ScatteringKernelField, v: KineticField) -> KineticField:
    """(K* v)(t, x, theta_b) = conj(lam) sum_a conj(k)(t, x, theta_a, theta_b) w_a v(t, x, theta_a)."""
    _check_kernel(k, v)
    quad = v.quadrature
    w = quad.weights
    if k.kind == "factorized":
        m = k.phase_matrix(quad) * w[:, None]          # M[a, b] = p_ab w_a
        flat = (np.conj(k.amplitude[..., None]) * v.values).reshape(-1, quad.n_dir)
        values = np.conj(k.lam) * (flat @ m).reshape(v.values.shape)
    else:
        values = np.conj(k.lam) * np.einsum(
            "...ab,...a->...b", np.conj(k.dense), w * v.values)
    return KineticField(v.lattice, quad, values)


# ---------------------------------------------------------------------------
# Boltzmann solve by Neumann iteration
# ---------------------------------------------------------------------------

def _kinetic_norm(values: np.ndarray, lat: Lattice,
                  quad: DirectionQuadrature) -> float:
    tmp = np.abs(values) ** 2
    tmp *= quad.weights
    return float(np.sqrt(_pairwise_sum(tmp) * lat.cell_volume))


def boltzmann_solve(f, sigma: AbsorptionField | None = None,
                    k: ScatteringKernelField | None = None, *,
                    tol: float = 1e-8, max_iter: int = 50,
                    quadrature: DirectionQuadrature | None = None):
    """Solve (d/dt + theta . grad + sigma) u = K u + f, u(0) = 0.

    Neumann iteration u(0) = T1^{-1} f, u(m+1) = T1^{-1}(f + K u(m)),
    stopping when ||u(m+1) - u(m)|| <= tol ||u(0)||.  Returns
    (u, SolveReport).  Outside the contraction regime the update norms stop
    decreasing and a :class:`TransportDivergenceError` is raised after
    ``max_iter`` sweeps.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    u = t1_inverse(f, sigma, quadrature)
    if k is None:
        return u, SolveReport(1, (0.0,), True, tol)

    lat, quad = u.lattice, u.quadrature
    base = _kinetic_norm(u.values, lat, quad)
    if base == 0.0:
        return u, SolveReport(1, (0.0,), True, tol)
    kinetic_source = isinstance(f, KineticField)
    history = []
    for _ in range(max_iter):
        ku = scattering_apply(k, u)
        src = ku.values + (f.values if kinetic_source else f.values[..., None])
        # f was guard-checked on the first sweep and K u inherits the
        # (guard-checked) support of the kernel amplitude, so skip the rescan.
        u_next = t1_inverse(
            KineticField(lat, quad, src, support_tag="guarded"), sigma)
        change = _kinetic_norm(u_next.values - u.values, lat, quad) / base
        history.append(change)
        u = u_next
        if change <= tol:
            return u, SolveReport(len(history), tuple(history), True, tol)
    report = SolveReport(len(history), tuple(history), False, tol)
    raise TransportDivergenceError(
        f"Neumann iteration did not contract to {tol} within {max_iter} "
        f"sweeps (last update {history[-1]:.3e}); the scattering kernel is "
        "too strong for the certified regime", report)


def boltzmann_solve_adjoint(v: KineticField, sigma: AbsorptionField | None = None,
                            k: ScatteringKernelField | None = None, *,
                            tol: float = 1e-8, max_iter: int = 50,
                            output: str = "scalar"):
    """Adjoint of the forward solution map f -> u.

    With S = (Id - T1^{-1} K)^{-1} T1^{-1}, the adjoint factorizes as
    S* = T1^{-*} (Id - K* T1^{-*})^{-1}: iterate z(m+1) = v + K* T1^{-*} z(m)
    to the same tolerance, then return T1^{-*} z in the requested source
    space.  Raises :class:`TransportDivergenceError` like the forward solve.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if k is None:
        return (t1_inverse_adjoint(v, sigma, output=output),
                SolveReport(1, (0.0,), True, tol))
    lat, quad = v.lattice, v.quadrature
    base = _kinetic_norm(v.values, lat, quad)
    if base == 0.0:
        return (t1_inverse_adjoint(v, sigma, output=output),
                SolveReport(1, (0.0,), True, tol))
    z = v
    history = []
    for _ in range(max_iter):
        az = t1_inverse_adjoint(z, sigma, output="kinetic")
        z_next = KineticField(lat, quad,
                              v.values + scattering_adjoint(k, az).values)
        change = _kinetic_norm(z_next.values - z.values, lat, quad) / base
        history.append(change)
        z = z_next
        if change <= tol:
            return (t1_inverse_adjoint(z, sigma, output=output),
                    SolveReport(len(history), tuple(history), True, tol))
    report = SolveReport(len(history), tuple(history), False, tol)
    raise TransportDivergenceError(
        "adjoint Neumann iteration did not contract; see report", report)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

def measure_uT(u: KineticField) -> RayData:
    """Final-time restriction u(T, ., .), parametrized by its own base points."""
    return RayData(u.lattice, u.quadrature, u.values[-1].copy(),
                   base_time=u.lattice.t_final)


def measure_uT_adjoint(g: RayData) -> KineticField:
    """Adjoint of the restriction: mass g / dt on the final slab, zero elsewhere."""
    lat = g.lattice
    if g.base_time != lat.t_final:
        raise ValueError("measurement data must be based at t_final")
    values = np.zeros(lat.window_shape + (g.quadrature.n_dir,),
                      dtype=g.values.dtype)
    values[-1] = g.values / lat.dt
    return KineticField(lat, g.quadrature, values)


def forward_measurement(f, sigma: AbsorptionField | None = None,
                        k: ScatteringKernelField | None = None,
                        quadrature: DirectionQuadrature | None = None, *,
                        tol: float = 1e-8, max_iter: int = 50):
    """The measurement map f -> u(T, ., .); returns (RayData, SolveReport).

    Without scattering the full spacetime solution is never formed: the
    measurement is exactly the attenuated ray transform of the source with
    the final-time weight, evaluated slab by slab.  With scattering it runs
    :func:`boltzmann_solve` and restricts.
    """
    if k is None and not (sigma is not None and sigma.directional):
        quadrature = _resolve_quadrature(f, quadrature, sigma)
        weight = measurement_weight_of(sigma, f.lattice)
        data = lightray.lray_weighted(f, weight, quadrature,
                                      base_time=f.lattice.t_final)
        return data, SolveReport(1, (0.0,), True, tol)
    u, report = boltzmann_solve(f, sigma, k, tol=tol, max_iter=max_iter,
                                quadrature=quadrature)
    return measure_uT(u), report


# ---------------------------------------------------------------------------
# A-posteriori residual
# ---------------------------------------------------------------------------

def pde_residual(u: KineticField, f, sigma: AbsorptionField | None = None,
                 k: ScatteringKernelField | None = None) -> float:
    """|| (d/dt + theta . grad + sigma) u - K u - f ||_2 / || f ||_2.

    Centered differences in time (interior slabs) and periodic centered
    differences in space; a sanity check of the characteristic solver, first
    order accurate overall.
    """
    lat, quad = u.lattice, u.quadrature
    v = u.values
    kinetic_source = isinstance(f, KineticField)

    res_dtype = np.result_type(
        v.dtype, sigma.dtype if sigma is not None else np.float64)
    res = np.array((v[2:] - v[:-2]) / (2.0 * lat.dt), dtype=res_dtype)
    for axis in (1, 2, 3):
        diff = (np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis)) / (2.0 * lat.dx)
        res += quad.nodes[:, axis - 1] * diff[1:-1]
    if sigma is not None:
        sv = sigma.values
        if sigma.kind == "time":
            res += sigma.lam * sv[1:-1, None, None, None, None] * v[1:-1]
        elif sigma.directional:
            res += sigma.lam * sv[1:-1] * v[1:-1]
        else:
            res += sigma.lam * sv[1:-1, ..., None] * v[1:-1]
    if k is not None:
        res -= scattering_apply(k, u).values[1:-1]
    fv = f.values if kinetic_source else f.values[..., None]
    res -= fv[1:-1]

    num = _kinetic_norm(res, lat, quad)
    tmp = np.broadcast_to(np.abs(fv[1:-1]) ** 2,
                          res.shape).copy()
    tmp *= quad.weights
    den = float(np.sqrt(_pairwise_sum(tmp) * lat.cell_volume))
    if num == 0.0:
        return 0.0
    return num / den
