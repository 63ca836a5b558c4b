"""Padded-lattice DFT, cone classification of frequencies, the projector
phi(D), and the normal-operator multiplier pair (N, Q).

Conventions.  The forward transform is F f(zeta) = dt dx^3 sum_z f(z)
e^{-i z . zeta} over the zero-padded periodic embedding of the time window,
with zeta = (tau, xi) on the FFT frequency grid of :func:`core.frequency_axes`.
Under this convention the normal operator L* L of the unweighted ray
transform acts on space-like frequencies as the multiplier

    N_hat(tau, xi) = C_CONV * phi(tau, xi) / |xi| ,        C_CONV = 4 pi^2,

where phi is the characteristic function of the non-time-like cone.  The
constant is the n = 3 case of C_n (|xi|^2 - tau^2)_+^{(n-3)/2} / |xi|^{n-2}
with C_n = 2 pi |S^{n-2}|; :func:`calibrate_c_conv` re-derives it from the
composition L* L so the 2 pi placement is pinned by measurement rather than
convention (the calibration must land within 2% of 4 pi^2).

All multiplier operations act on the padded time axis and return padded
fields: their outputs have tails outside the data window, and cropping
between steps would destroy the exact algebraic identities (phi^2 = phi,
Q N phi = phi).  Crop once at the end of a pipeline.

The |xi| = 0 column (every tau) is zeroed in both N and Q: it is a genuine
null space of the discrete normal operator, and keeping it out of both sides
preserves Q N phi = phi exactly off that column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .core import (
    DirectionQuadrature,
    Lattice,
    RayData,
    ScalarField,
    _pairwise_sum,
    crop_window,
    frequency_axes,
    gaussian_source,
    l2_inner,
    zero_extend,
)
from .lightray import normal_compose

__all__ = [
    "C_CONV",
    "SpectralField",
    "ConeClassifier",
    "dft",
    "idft",
    "spectral_norm",
    "phi_apply",
    "n_multiplier_apply",
    "q_apply",
    "general_n_multiplier",
    "calibrate_c_conv",
    "reference_calibration_source",
    "sobolev_norm_mixed",
]

C_CONV = 4.0 * np.pi ** 2

ZERO, SPACELIKE, TIMELIKE, LIGHTLIKE_BAND = 0, 1, 2, 3
_LABEL_NAMES = {ZERO: "zero", SPACELIKE: "spacelike", TIMELIKE: "timelike",
                LIGHTLIKE_BAND: "lightlike-band"}
_LABEL_CODES = {name: code for code, name in _LABEL_NAMES.items()}


@dataclass(frozen=True, eq=False)
class SpectralField:
    """DFT coefficients of a padded field, indexed by (tau_k, xi_m) FFT-order."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.lattice.padded_shape:
            raise ValueError(
                f"spectral shape {self.values.shape} != padded "
                f"{self.lattice.padded_shape}")
        if not np.iscomplexobj(self.values):
            object.__setattr__(self, "values",
                               self.values.astype(np.complex128))

    @property
    def frequency_axes(self):
        return frequency_axes(self.lattice)


def dft(f: ScalarField) -> SpectralField:
    """F f = dt dx^3 FFT of the zero-padded field (e^{-i z . zeta})."""
    g = zero_extend(f)
    lat = f.lattice
    return SpectralField(lat, scipy.fft.fftn(g.values) * lat.cell_volume)


def idft(F: SpectralField) -> ScalarField:
    """Inverse of :func:`dft`; returns the padded field (complex-valued)."""
    lat = F.lattice
    values = scipy.fft.ifftn(F.values) / lat.cell_volume
    return ScalarField(lat, values, time_axis="padded")


def spectral_norm(F: SpectralField) -> float:
    """L2 norm computed in frequency: (sum |F|^2 dzeta / (2 pi)^4)^(1/2)."""
    lat = F.lattice
    dzeta = (2.0 * np.pi) ** 4 / (lat.period_t * lat.box_len ** 3)
    total = _pairwise_sum(np.abs(F.values) ** 2) * dzeta / (2.0 * np.pi) ** 4
    return float(np.sqrt(total))


@dataclass(frozen=True)
class ConeClassifier:
    """Partition of the frequency grid by position relative to the light cone.

    With relative tolerance eta >= 0:  spacelike iff |xi| - |tau| >
    eta |(tau, xi)|,  timelike iff |tau| - |xi| > eta |(tau, xi)|,  zero iff
    (tau, xi) = 0, light-like band otherwise.  eta = 0 is the sharp
    characteristic-function split; eta > 0 widens the band around the cone,
    which tames ringing of sharp spectral cutoffs on coarse grids.
    """

    eta: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta >= 0.0):
            raise ValueError("eta must be finite and >= 0")

    def labels(self, lattice: Lattice) -> np.ndarray:
        tau, xi = frequency_axes(lattice)
        abs_tau = np.abs(tau)[:, None, None, None]
        abs_xi = np.sqrt(xi[:, None, None] ** 2
                         + xi[None, :, None] ** 2
                         + xi[None, None, :] ** 2)[None]
        mag = np.sqrt(abs_tau ** 2 + abs_xi ** 2)
        out = np.full(lattice.padded_shape, LIGHTLIKE_BAND, dtype=np.uint8)
        out[abs_xi - abs_tau > self.eta * mag] = SPACELIKE
        out[abs_tau - abs_xi > self.eta * mag] = TIMELIKE
        out[mag == 0.0] = ZERO
        return out

    def mask(self, lattice: Lattice, label: str) -> np.ndarray:
        if label not in _LABEL_CODES:
            raise ValueError(f"unknown label {label!r}; "
                             f"one of {sorted(_LABEL_CODES)}")
        return self.labels(lattice) == _LABEL_CODES[label]

    def phi_multiplier(self, lattice: Lattice) -> np.ndarray:
        """0/1 multiplier of phi(D): kill timelike, keep everything else."""
        return (self.labels(lattice) != TIMELIKE).astype(np.float64)


def _abs_xi(lattice: Lattice) -> np.ndarray:
    _, xi = frequency_axes(lattice)
    return np.sqrt(xi[:, None, None] ** 2
                   + xi[None, :, None] ** 2
                   + xi[None, None, :] ** 2)[None]


def _apply_multiplier(f: ScalarField, mult: np.ndarray) -> ScalarField:
    g = zero_extend(f)
    spec = scipy.fft.fftn(g.values)
    spec *= mult
    out = scipy.fft.ifftn(spec)
    if np.isrealobj(f.values):
        out = out.real
    return ScalarField(f.lattice, out, time_axis="padded")


def phi_apply(f: ScalarField, classifier: ConeClassifier | None = None) -> ScalarField:
    """The cone projector phi(D): erase time-like frequencies.

    Window input is zero-extended; the result stays on the padded axis so
    repeated spectral operations compose exactly.
    """
    classifier = classifier or ConeClassifier()
    return _apply_multiplier(f, classifier.phi_multiplier(f.lattice))


def n_multiplier_apply(f: ScalarField,
                       classifier: ConeClassifier | None = None, *,
                       c_conv: float = C_CONV) -> ScalarField:
    """The normal operator as a multiplier: c_conv phi(tau, xi) / |xi|.

    The |xi| = 0 column is annihilated (see module docstring).
    """
    classifier = classifier or ConeClassifier()
    lat = f.lattice
    axi = _abs_xi(lat)
    with np.errstate(divide="ignore"):
        mult = np.where(axi > 0.0,
                        c_conv * classifier.phi_multiplier(lat)
                        / np.where(axi > 0.0, axi, 1.0),
                        0.0)
    return _apply_multiplier(f, mult)


def q_apply(f: ScalarField, classifier: ConeClassifier | None = None, *,
            c_conv: float = C_CONV) -> ScalarField:
    """The inverse multiplier Q: phi(tau, xi) |xi| / c_conv, zero on |xi| = 0."""
    classifier = classifier or ConeClassifier()
    lat = f.lattice
    mult = classifier.phi_multiplier(lat) * _abs_xi(lat) / c_conv
    return _apply_multiplier(f, mult)


def general_n_multiplier(tau: float, xi, n: int) -> float:
    """Normal-operator symbol in n space dimensions (formula surface only).

    C_n (|xi|^2 - tau^2)_+^{(n-3)/2} / |xi|^{n-2} with C_n = 2 pi |S^{n-2}|;
    zero on and inside the light cone ((.)_+ as a sharp indicator at n = 3).
    """
    if n < 2:
        raise ValueError("need n >= 2 space dimensions")
    norm_xi = float(np.linalg.norm(np.atleast_1d(np.asarray(xi, dtype=float))))
    if norm_xi == 0.0:
        raise ValueError("the multiplier is singular at xi = 0")
    # |S^{m}| = 2 pi^{(m+1)/2} / Gamma((m+1)/2) with m = n - 2
    sphere = 2.0 * np.pi ** ((n - 1) / 2.0) / math.gamma((n - 1) / 2.0)
    c_n = 2.0 * np.pi * sphere
    base = norm_xi ** 2 - float(tau) ** 2
    if base <= 0.0:
        return 0.0
    return c_n * base ** ((n - 3) / 2.0) / norm_xi ** (n - 2)


def reference_calibration_source(lattice: Lattice) -> ScalarField:
    """The frozen reference for multiplier-vs-composition comparisons.

    An x1-odd Gaussian bump: its spatial integral vanishes identically on
    every time slab, so it carries no energy on the |xi| = 0 null column of
    the multiplier, and its spectrum vanishes linearly toward the
    low-frequency modes where the 1/|xi| weight is most grid-sensitive.
    """
    half = 0.5 * lattice.box_len
    g = gaussian_source(
        lattice, center_t=0.5 * lattice.t_final, center_x=(half,) * 3,
        width_t=0.45 * lattice.t_final,
        width_x=0.30 * (lattice.box_len - 2.0 * lattice.support_margin))
    x1 = (lattice.x_axis - half)[None, :, None, None]
    return ScalarField(lattice, x1 * g.values, support_tag="guarded")


def _interior(f: ScalarField) -> ScalarField:
    values = f.values.copy()
    values[0] = 0.0
    values[f.lattice.n_t - 1] = 0.0
    return ScalarField(f.lattice, values, time_axis=f.time_axis)


def calibrate_c_conv(lattice: Lattice, quadrature: DirectionQuadrature,
                     reference: ScalarField | None = None) -> float:
    """Re-derive the convention constant from the composition L* L.

    Least-squares match of the unit-c multiplier against
    :func:`lightray.normal_compose` (kappa = 1) on a reference bump:
    c* = <M_1 f, L* L f> / ||M_1 f||^2 over interior time slabs.  (The two
    endpoint slabs carry the trapezoid-transpose factor 1/2 of the discrete
    adjoint and would bias the scale; they compare quadrature conventions,
    not operators.)  Under the documented DFT convention c* must approach
    4 pi^2 as the grid refines; the frozen :data:`C_CONV` is the continuum
    value, and this function exists to verify it.
    """
    if reference is None:
        reference = reference_calibration_source(lattice)
    composed = _interior(normal_compose(reference, quadrature=quadrature))
    modeled = _interior(crop_window(n_multiplier_apply(reference, c_conv=1.0)))
    num = l2_inner(modeled, composed)
    den = l2_inner(modeled, modeled)
    return float(np.real(num) / np.real(den))


def sobolev_norm_mixed(g: RayData, s: float) -> float:
    """Direction-uniform spatial Sobolev norm of ray data.

    (sum_j w_j ||g(., theta_j)||^2_{H^s(x)})^(1/2) with the same spatial DFT
    convention as :func:`core.sobolev_norm`; the smoothness scale acts on the
    base point only, uniformly over quadrature directions.
    """
    lat = g.lattice
    ghat = scipy.fft.fftn(g.values, axes=(0, 1, 2)) * lat.dx ** 3
    _, xi = frequency_axes(lat)
    w = (1.0 + xi[:, None, None] ** 2
         + xi[None, :, None] ** 2
         + xi[None, None, :] ** 2) ** s
    per_dir = np.einsum("xyzj,xyz->j", np.abs(ghat) ** 2, w)
    total = float(np.dot(per_dir, g.quadrature.weights)) / lat.box_len ** 3
    return float(np.sqrt(total))
