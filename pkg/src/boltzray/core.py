"""Lattices, sphere quadrature, field containers, and inner products.

Everything downstream works on one shared discretization:

* a spacetime box: time window [0, T] with ``n_t`` samples (dt = T/(n_t-1))
  plus a zero-padded periodic extension used by Fourier-multiplier operators,
  and a periodic spatial box of side ``box_len`` with ``n_x`` samples per axis;
* a quadrature rule on the unit sphere S^2 carrying both the scattering
  integral and the ray directions.

The spatial box is periodic, so compactly supported data are only equivalent
to data on R^3 as long as nothing wraps around and re-enters the support.
The lattice enforces ``support_margin >= t_final`` for exactly this reason:
no characteristic (speed 1) leaving the declared support region can cross the
gap to the boundary within the time window.

Sign/normalization conventions fixed here and used everywhere:

* forward transform  f_hat(zeta) = integral exp(-i z . zeta) f(z) dz,
  realized discretely as dt*dx^3 * FFT;  frequencies are angular,
  zeta = (tau, xi) with tau_k = 2 pi k / period_t, xi_m = 2 pi m / box_len;
* inner products are plain Riemann sums:  <a, b> = sum conj(a) b dt dx^3
  (times the direction weight w_j for fields on the sphere), reduced with
  numpy's deterministic pairwise summation;
* periodic trilinear shifts S_d (sampling h(x + d)) satisfy S_d^T = S_{-d}
  exactly, which is what makes every discrete adjoint in this package pass a
  dot test at machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.fft

__all__ = [
    "Lattice",
    "DirectionQuadrature",
    "build_direction_quadrature",
    "ScalarField",
    "KineticField",
    "RayData",
    "CauchyData",
    "shift_periodic",
    "interp_spacetime",
    "guard_violation",
    "require_guarded",
    "l2_inner",
    "l2_norm",
    "zero_extend",
    "crop_window",
    "frequency_axes",
    "sobolev_norm",
    "smooth_plateau",
    "gaussian_source",
]


# ---------------------------------------------------------------------------
# Lattice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Discretized spacetime box.

    Parameters
    ----------
    t_final : measurement time T; the time window is [0, T].
    n_t : samples on the window, spacing dt = t_final/(n_t - 1).
    box_len : spatial period per axis.
    n_x : samples per spatial axis, spacing dx = box_len/n_x.
    support_margin : guard distance between declared source support and the
        box boundary; must be >= t_final (no wrap re-entry within the window).
    t_pad : number of zero samples appended to the time axis for periodic
        spectral embedding.  ``None`` picks the smallest FFT-friendly length
        whose period is >= 2*(t_final + box diagonal); an explicit value
        below that bound is refused, since cone-geometry multipliers would
        see temporal aliasing.
    """

    t_final: float
    n_t: int
    box_len: float
    n_x: int
    support_margin: float
    t_pad: int | None = None

    def __post_init__(self):
        if self.n_t < 2 or self.n_x < 2:
            raise ValueError("need n_t >= 2 and n_x >= 2")
        if self.t_final <= 0 or self.box_len <= 0:
            raise ValueError("t_final and box_len must be positive")
        if self.support_margin < self.t_final:
            raise ValueError(
                f"support_margin ({self.support_margin}) must be >= t_final "
                f"({self.t_final}): a unit-speed ray leaving the support "
                "would otherwise wrap around within the time window"
            )
        if 2 * self.support_margin >= self.box_len:
            raise ValueError("support_margin leaves no admissible support region")
        minimum = int(np.ceil(2.0 * (self.t_final + self.box_diag) / self.dt))
        if self.t_pad is None:
            n_pad = scipy.fft.next_fast_len(max(minimum, self.n_t))
            object.__setattr__(self, "t_pad", n_pad - self.n_t)
        elif self.n_t + self.t_pad < minimum:
            raise ValueError(
                f"padded time axis has {self.n_t + self.t_pad} samples; "
                f"needs >= {minimum} so the periodic embedding covers "
                "2*(t_final + box diagonal)"
            )

    @property
    def dt(self) -> float:
        return self.t_final / (self.n_t - 1)

    @property
    def dx(self) -> float:
        return self.box_len / self.n_x

    @property
    def box_diag(self) -> float:
        return np.sqrt(3.0) * self.box_len

    @property
    def n_t_pad(self) -> int:
        return self.n_t + self.t_pad

    @property
    def period_t(self) -> float:
        return self.n_t_pad * self.dt

    @property
    def t_window(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_t)

    @property
    def x_axis(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    @property
    def window_shape(self) -> tuple:
        return (self.n_t, self.n_x, self.n_x, self.n_x)

    @property
    def padded_shape(self) -> tuple:
        return (self.n_t_pad, self.n_x, self.n_x, self.n_x)

    @property
    def spatial_shape(self) -> tuple:
        return (self.n_x, self.n_x, self.n_x)

    @property
    def cell_volume(self) -> float:
        return self.dt * self.dx ** 3

    def support_axis_mask(self) -> np.ndarray:
        """Boolean mask per axis sample: inside [margin, box_len - margin]."""
        x = self.x_axis
        return (x >= self.support_margin) & (x <= self.box_len - self.support_margin)


# ---------------------------------------------------------------------------
# Sphere quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DirectionQuadrature:
    """Nodes and weights on S^2; integrates sum w_j g(theta_j) ~ int g dtheta."""

    degree: int
    nodes: np.ndarray    # (m, 3) unit vectors
    weights: np.ndarray  # (m,) positive, summing to 4 pi

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n_dir(self) -> int:
        return self.nodes.shape[0]


def build_direction_quadrature(degree: int) -> DirectionQuadrature:
    """Product rule on S^2: Gauss-Legendre in cos(polar) x uniform azimuth.

    ``degree + 1`` Gauss-Legendre nodes in mu = cos(theta_polar) and
    ``2*degree + 2`` uniform azimuth samples; exact for spherical harmonics
    up to the requested degree (polar part is exact to degree 2*(degree+1)-1,
    azimuth integrates e^{i m phi} exactly for |m| < 2*degree + 2).
    """
    if degree < 2:
        raise ValueError("quadrature degree must be >= 2")
    mu, w_mu = np.polynomial.legendre.leggauss(degree + 1)
    n_az = 2 * degree + 2
    phi = 2.0 * np.pi * np.arange(n_az) / n_az
    w_phi = 2.0 * np.pi / n_az

    sin_polar = np.sqrt(1.0 - mu ** 2)
    nodes = np.empty((mu.size * n_az, 3))
    weights = np.empty(mu.size * n_az)
    for i in range(mu.size):
        rows = slice(i * n_az, (i + 1) * n_az)
        nodes[rows, 0] = sin_polar[i] * np.cos(phi)
        nodes[rows, 1] = sin_polar[i] * np.sin(phi)
        nodes[rows, 2] = mu[i]
        weights[rows] = w_mu[i] * w_phi
    return DirectionQuadrature(degree=degree, nodes=nodes, weights=weights)


# ---------------------------------------------------------------------------
# Field containers
# ---------------------------------------------------------------------------

def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """f(t, x) sampled on the lattice; time axis either window or padded."""

    lattice: Lattice
    values: np.ndarray               # (n_t | n_t_pad, n_x, n_x, n_x)
    time_axis: str = "window"        # "window" or "padded"
    support_tag: str | None = None

    def __post_init__(self):
        lat = self.lattice
        expected = lat.window_shape if self.time_axis == "window" else lat.padded_shape
        if self.time_axis not in ("window", "padded"):
            raise ValueError(f"unknown time_axis {self.time_axis!r}")
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        _check_finite(self.values, "ScalarField")
        self.values.setflags(write=False)

    @property
    def n_t_axis(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class KineticField:
    """u(t, x, theta) on the time window x spatial box x quadrature nodes."""

    lattice: Lattice
    quadrature: DirectionQuadrature
    values: np.ndarray               # (n_t, n_x, n_x, n_x, n_dir)
    support_tag: str | None = None

    def __post_init__(self):
        expected = self.lattice.window_shape + (self.quadrature.n_dir,)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        _check_finite(self.values, "KineticField")
        self.values.setflags(write=False)


@dataclass(frozen=True, eq=False)
class RayData:
    """Values of a ray transform on base points (x-lattice) x directions.

    ``base_time`` records the parametrization: the entry at (x, theta_j) is
    attached to the line s -> (s, x + (s - base_time) theta_j).  Transforms
    are naturally based at s = 0; the time-T measurement u(T, ., .) is the
    same object based at s = T.
    """

    lattice: Lattice
    quadrature: DirectionQuadrature
    values: np.ndarray               # (n_x, n_x, n_x, n_dir)
    base_time: float = 0.0

    def __post_init__(self):
        expected = self.lattice.spatial_shape + (self.quadrature.n_dir,)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        _check_finite(self.values, "RayData")
        self.values.setflags(write=False)


@dataclass(frozen=True, eq=False)
class CauchyData:
    """Initial value f1 and initial time-derivative f2 on the spatial box."""

    lattice: Lattice
    f1: np.ndarray                   # (n_x, n_x, n_x)
    f2: np.ndarray
    support_tag: str | None = None

    def __post_init__(self):
        expected = self.lattice.spatial_shape
        if self.f1.shape != expected or self.f2.shape != expected:
            raise ValueError("Cauchy data shape mismatch with lattice")
        _check_finite(self.f1, "CauchyData.f1")
        _check_finite(self.f2, "CauchyData.f2")
        self.f1.setflags(write=False)
        self.f2.setflags(write=False)


# ---------------------------------------------------------------------------
# Periodic trilinear shift
# ---------------------------------------------------------------------------

def shift_periodic(values: np.ndarray, shift_cells) -> np.ndarray:
    """Sample ``values`` at points displaced by ``shift_cells`` (trilinear).

    Acts on the last three axes, which are treated as periodic; leading axes
    are carried along unchanged.  ``shift_cells`` is a length-3 float vector
    in units of cells: out[..., x] = in[..., x + shift] with periodic wrap
    and trilinear interpolation between the 8 surrounding grid points.

    As a linear map this satisfies shift_periodic(., s)^T =
    shift_periodic(., -s) exactly (integer rolls are permutations and the
    corner weights of s and -s are mirror images), so callers may build
    adjoints by flipping the sign of the shift.
    """
    shift = np.asarray(shift_cells, dtype=float)
    base = np.floor(shift).astype(int)
    frac = shift - base
    n1, n2, n3 = values.shape[-3:]

    rolled = np.roll(values, (-base[0], -base[1], -base[2]), axis=(-3, -2, -1))
    if not frac.any():
        return rolled

    padded = np.pad(
        rolled,
        [(0, 0)] * (values.ndim - 3) + [(0, 1), (0, 1), (0, 1)],
        mode="wrap",
    )
    out = np.zeros_like(values)
    for c0 in (0, 1):
        w0 = frac[0] if c0 else 1.0 - frac[0]
        if w0 == 0.0:
            continue
        for c1 in (0, 1):
            w01 = w0 * (frac[1] if c1 else 1.0 - frac[1])
            if w01 == 0.0:
                continue
            for c2 in (0, 1):
                w = w01 * (frac[2] if c2 else 1.0 - frac[2])
                if w == 0.0:
                    continue
                out += w * padded[..., c0:c0 + n1, c1:c1 + n2, c2:c2 + n3]
    return out


# ---------------------------------------------------------------------------
# Point interpolation
# ---------------------------------------------------------------------------

def interp_spacetime(field, t: float, x, dir_index: int | None = None):
    """Multilinear sample of a field at an off-grid point (t, x).

    Time is clamped to the window [0, t_final] (out-of-range raises);
    space is reduced modulo the box period.  Exact on multilinear functions.
    """
    lat = field.lattice
    if not (0.0 <= t <= lat.t_final + 1e-12 * lat.t_final):
        raise ValueError(f"t={t} outside [0, {lat.t_final}]")

    values = field.values
    if dir_index is not None:
        values = values[..., dir_index]

    tc = min(t / lat.dt, float(values.shape[0] - 1))
    it = int(np.floor(tc))
    if it == values.shape[0] - 1:
        it -= 1
    at = tc - it

    xc = np.asarray(x, dtype=float) / lat.dx
    ix = np.floor(xc).astype(int)
    ax = xc - ix

    out = 0.0
    for ct in (0, 1):
        wt = at if ct else 1.0 - at
        if wt == 0.0:
            continue
        sl = values[it + ct]
        for c0 in (0, 1):
            for c1 in (0, 1):
                for c2 in (0, 1):
                    w = wt
                    w *= ax[0] if c0 else 1.0 - ax[0]
                    w *= ax[1] if c1 else 1.0 - ax[1]
                    w *= ax[2] if c2 else 1.0 - ax[2]
                    if w == 0.0:
                        continue
                    out += w * sl[(ix[0] + c0) % lat.n_x,
                                  (ix[1] + c1) % lat.n_x,
                                  (ix[2] + c2) % lat.n_x]
    return out


# ---------------------------------------------------------------------------
# Support guards
# ---------------------------------------------------------------------------

def guard_violation(values: np.ndarray, lattice: Lattice,
                    axes=(1, 2, 3)) -> bool:
    """True if ``values`` has mass outside [margin, box_len - margin] on the
    given spatial axes."""
    keep = lattice.support_axis_mask()
    for axis in axes:
        index = [slice(None)] * values.ndim
        index[axis] = ~keep
        if np.any(values[tuple(index)]):
            return True
    return False


def require_guarded(f, what: str = "field") -> None:
    """Raise unless ``f`` is exactly zero outside the lattice guard region.

    ``support_tag == "guarded"`` skips the scan: either the constructor
    guarantees the support (gaussian_source) or the caller asserts the field
    is genuinely periodic (e.g. spatially constant), in which case wrap-around
    is not a contamination.
    """
    if isinstance(f, ScalarField) and f.time_axis != "window":
        raise ValueError(f"{what} must live on the time window; crop_window first")
    if getattr(f, "support_tag", None) == "guarded":
        return
    if guard_violation(f.values, f.lattice):
        raise ValueError(
            f"{what} has support outside the lattice guard region "
            "[support_margin, box_len - support_margin]^3; its periodic "
            "images would contaminate propagation along characteristics")


# ---------------------------------------------------------------------------
# Inner products
# ---------------------------------------------------------------------------

def _pairwise_sum(a: np.ndarray):
    # np.sum on a contiguous float array uses pairwise summation: the
    # reduction tree is fixed by the array shape, independent of threads.
    return np.sum(a.reshape(-1))


def l2_inner(a, b):
    """Discrete L^2 inner product, conjugate-linear in the first slot.

    ScalarField:  sum conj(a) b * dt dx^3        (window or padded, matching)
    KineticField: sum conj(a) b w_j * dt dx^3
    RayData:      sum conj(a) b w_j * dx^3       (matching base_time)
    CauchyData:   (sum conj(a1) b1 + sum conj(a2) b2) * dx^3
    """
    if type(a) is not type(b):
        raise ValueError("l2_inner requires two fields of the same kind")
    if a.lattice != b.lattice:
        raise ValueError("l2_inner requires a shared lattice")
    lat = a.lattice

    if isinstance(a, ScalarField):
        if a.time_axis != b.time_axis:
            raise ValueError("l2_inner requires matching time axes")
        return _pairwise_sum(np.conj(a.values) * b.values) * lat.cell_volume

    if isinstance(a, KineticField):
        if a.quadrature is not b.quadrature and not np.array_equal(
                a.quadrature.nodes, b.quadrature.nodes):
            raise ValueError("l2_inner requires a shared quadrature")
        tmp = np.conj(a.values) * b.values
        tmp *= a.quadrature.weights
        return _pairwise_sum(tmp) * lat.cell_volume

    if isinstance(a, RayData):
        if a.base_time != b.base_time:
            raise ValueError("l2_inner requires matching ray parametrizations")
        tmp = np.conj(a.values) * b.values
        tmp *= a.quadrature.weights
        return _pairwise_sum(tmp) * lat.dx ** 3

    if isinstance(a, CauchyData):
        s = _pairwise_sum(np.conj(a.f1) * b.f1) + _pairwise_sum(np.conj(a.f2) * b.f2)
        return s * lat.dx ** 3

    raise TypeError(f"unsupported field type {type(a).__name__}")


def l2_norm(a) -> float:
    return float(np.sqrt(np.real(l2_inner(a, a))))


# ---------------------------------------------------------------------------
# Padded embedding and Sobolev norms
# ---------------------------------------------------------------------------

def zero_extend(f: ScalarField) -> ScalarField:
    """Extend a window field by zeros to the padded periodic time axis."""
    if f.time_axis == "padded":
        return f
    lat = f.lattice
    values = np.zeros(lat.padded_shape, dtype=f.values.dtype)
    values[:lat.n_t] = f.values
    return ScalarField(lat, values, time_axis="padded", support_tag=f.support_tag)


def crop_window(f: ScalarField) -> ScalarField:
    """Restrict a padded field back to the time window [0, t_final]."""
    if f.time_axis == "window":
        return f
    return ScalarField(f.lattice, f.values[:f.lattice.n_t].copy())


def frequency_axes(lattice: Lattice):
    """Angular frequency axes (tau, xi) of the padded lattice, FFT order."""
    tau = 2.0 * np.pi * scipy.fft.fftfreq(lattice.n_t_pad, d=lattice.dt)
    xi = 2.0 * np.pi * scipy.fft.fftfreq(lattice.n_x, d=lattice.dx)
    return tau, xi


def sobolev_norm(f: ScalarField, s: float) -> float:
    """Discrete H^s norm on the padded periodic embedding.

    (sum over zeta of (1 + |zeta|^2)^s |f_hat(zeta)|^2 dtau dxi^3 / (2 pi)^4
    )^(1/2), with f_hat = dt dx^3 FFT(f).  The (2 pi)^-4 belongs to the
    frequency measure under the exp(-i z . zeta) convention and makes s = 0
    reproduce the plain L^2 norm exactly (discrete Parseval).
    """
    g = zero_extend(f)
    lat = f.lattice
    fhat = scipy.fft.fftn(g.values) * lat.cell_volume
    tau, xi = frequency_axes(lat)
    w = (1.0
         + tau[:, None, None, None] ** 2
         + xi[None, :, None, None] ** 2
         + xi[None, None, :, None] ** 2
         + xi[None, None, None, :] ** 2) ** s
    dzeta = (2.0 * np.pi) ** 4 / (lat.period_t * lat.box_len ** 3)
    total = _pairwise_sum(w * np.abs(fhat) ** 2) * dzeta / (2.0 * np.pi) ** 4
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Smooth test patterns
# ---------------------------------------------------------------------------

def smooth_plateau(u: np.ndarray, lo: float, hi: float, ramp: float) -> np.ndarray:
    """C^infinity plateau: 0 outside (lo, hi), 1 on [lo+ramp, hi-ramp].

    The ramps are the standard exp(-1/x) bridge, so derivatives of all
    orders vanish at both ends of each ramp.
    """
    u = np.asarray(u, dtype=float)

    def bridge(y):
        # smooth 0 -> 1 on [0, 1]
        y = np.clip(y, 0.0, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            a = np.where(y > 0.0, np.exp(-1.0 / np.maximum(y, 1e-300)), 0.0)
            b = np.where(y < 1.0, np.exp(-1.0 / np.maximum(1.0 - y, 1e-300)), 0.0)
        return a / (a + b)

    up = bridge((u - lo) / ramp)
    down = bridge((hi - u) / ramp)
    return up * down


def gaussian_source(lattice: Lattice, *, center_t: float, center_x,
                    width_t: float, width_x: float, modulation=None,
                    amplitude: float = 1.0) -> ScalarField:
    """Smooth bump supported strictly inside the lattice guard region.

    A separable Gaussian in (t, x) multiplied by smooth plateau windows that
    vanish identically outside (0, T) in time and outside
    [margin, box_len - margin] in each spatial axis, so the support
    declaration is exact.  ``modulation``, if given, is (tau0, xi0) and
    multiplies by cos(tau0 t + xi0 . x).
    """
    lat = lattice
    t = lat.t_window
    x = lat.x_axis
    cx = np.asarray(center_x, dtype=float)

    gt = np.exp(-0.5 * ((t - center_t) / width_t) ** 2)
    gt = gt * smooth_plateau(t, 0.0, lat.t_final, 0.08 * lat.t_final)
    m = lat.support_margin
    win = smooth_plateau(x, m, lat.box_len - m, 0.12 * (lat.box_len - 2 * m))
    gx = [np.exp(-0.5 * ((x - cx[a]) / width_x) ** 2) * win for a in range(3)]

    values = amplitude * (gt[:, None, None, None]
                          * gx[0][None, :, None, None]
                          * gx[1][None, None, :, None]
                          * gx[2][None, None, None, :])
    if modulation is not None:
        tau0, xi0 = modulation
        xi0 = np.asarray(xi0, dtype=float)
        phase = (tau0 * t[:, None, None, None]
                 + xi0[0] * x[None, :, None, None]
                 + xi0[1] * x[None, None, :, None]
                 + xi0[2] * x[None, None, None, :])
        values = values * np.cos(phase)
    return ScalarField(lattice, values, support_tag="guarded")
