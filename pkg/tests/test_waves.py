"""Wave evolution, source front ends, and Cauchy-data recovery."""

import numpy as np
import pytest
import scipy.fft
import scipy.integrate
import scipy.linalg

from boltzray.core import (
    CauchyData,
    Lattice,
    RayData,
    ScalarField,
    build_direction_quadrature,
    gaussian_source,
    l2_inner,
    smooth_plateau,
)
from boltzray.lightray import lray_adjoint
from boltzray.transport import (
    AbsorptionField,
    apply_time_cutoff,
    forward_measurement,
    measurement_weight_of,
)
from boltzray.waves import (
    BardeenCoefficients,
    CauchyRecoveryConfig,
    CauchyRecoveryStagnationError,
    HyperbolicOperatorSpec,
    PseudoDiffSpec,
    aD_adjoint,
    aD_apply,
    bardeen_solve,
    cauchy_recover,
    cfl_limit,
    cmb_source,
    default_time_cutoff,
    wave_adjoint_solve,
    wave_energy,
    wave_solve,
)


def make_lattice(n_t, n_x):
    return Lattice(t_final=1.0, n_t=n_t, box_len=4.0, n_x=n_x,
                   support_margin=1.0)


def spatial_bump(lat, center=(2.0, 2.0, 2.0), width=0.4, odd=False):
    """Guard-compliant spatial bump; ``odd`` makes it mean-free in x1."""
    x = lat.x_axis
    margin = lat.support_margin
    window = smooth_plateau(x, margin, lat.box_len - margin,
                            0.35 * (lat.box_len - 2 * margin))
    parts = [np.exp(-((x - c) ** 2) / (2.0 * width ** 2)) * window
             for c in center]
    values = parts[0][:, None, None] * parts[1][None, :, None] \
        * parts[2][None, None, :]
    if odd:
        values = values * (x[:, None, None] - center[0])
    return values


def mode_data(lat, k=1):
    """Plane-wave Cauchy data cos(k xi_1 x_1), genuinely periodic."""
    xi0 = 2.0 * np.pi * k / lat.box_len
    f1 = np.broadcast_to(np.cos(xi0 * lat.x_axis)[:, None, None],
                         lat.spatial_shape).copy()
    return xi0, CauchyData(lat, f1, np.zeros(lat.spatial_shape),
                           support_tag="guarded")


def free_spec(lat):
    return HyperbolicOperatorSpec(lattice=lat)


def random_coefficient_spec(lat, rng, complex_b=True):
    """Full first-order coefficients plus a complex zeroth-order term."""
    a_fields = tuple(
        ScalarField(lat, 0.3 * rng.standard_normal(lat.window_shape),
                    support_tag="guarded")
        for _ in range(4))
    b_values = rng.standard_normal(lat.window_shape)
    if complex_b:
        b_values = b_values + 1j * rng.standard_normal(lat.window_shape)
    b_field = ScalarField(lat, b_values, support_tag="guarded")
    return HyperbolicOperatorSpec(lattice=lat, a=a_fields, b=b_field)


def forward_chain(lat, quad, spec, ad, data, sigma=None, chi0=None):
    """The measurement chain used by cauchy_recover, from public pieces."""
    cutoff = default_time_cutoff(lat) if chi0 is None else chi0
    src = apply_time_cutoff(aD_apply(ad, wave_solve(spec, data)), cutoff)
    src = ScalarField(lat, src.values, support_tag="guarded")
    uT, _ = forward_measurement(src, sigma, None, quadrature=quad)
    return uT


def adjoint_chain(lat, spec, ad, g, sigma=None, chi0=None):
    cutoff = default_time_cutoff(lat) if chi0 is None else chi0
    back = lray_adjoint(g, measurement_weight_of(sigma, lat))
    return wave_adjoint_solve(spec, aD_adjoint(ad, apply_time_cutoff(back, cutoff)))


def cauchy_error(recovered, truth):
    num = np.sqrt(np.sum(np.abs(recovered.f1 - truth.f1) ** 2)
                  + np.sum(np.abs(recovered.f2 - truth.f2) ** 2))
    den = np.sqrt(np.sum(np.abs(truth.f1) ** 2) + np.sum(np.abs(truth.f2) ** 2))
    return num / den


# ---------------------------------------------------------------------------
# Specification types
# ---------------------------------------------------------------------------

def test_operator_spec_validation():
    lat = make_lattice(8, 8)
    with pytest.raises(ValueError, match="4 entries"):
        HyperbolicOperatorSpec(lattice=lat, a=(None, None, None))
    bad = ScalarField(lat, 1j * np.ones(lat.window_shape), support_tag="guarded")
    with pytest.raises(ValueError, match="real-valued"):
        HyperbolicOperatorSpec(lattice=lat, a=(bad, None, None, None))
    other = make_lattice(8, 10)
    stray = ScalarField(other, np.ones(other.window_shape), support_tag="guarded")
    with pytest.raises(ValueError, match="different lattice"):
        HyperbolicOperatorSpec(lattice=lat, b=stray)
    with pytest.raises(ValueError, match="laplacian_sign"):
        HyperbolicOperatorSpec(lattice=lat, laplacian_sign=0.5)
    cplx = ScalarField(lat, (1.0 + 2.0j) * np.ones(lat.window_shape),
                       support_tag="guarded")
    assert HyperbolicOperatorSpec(lattice=lat, b=cplx).is_complex
    assert not HyperbolicOperatorSpec(lattice=lat).is_complex


def test_pseudodiff_spec_validation():
    lat = make_lattice(8, 8)
    with pytest.raises(ValueError, match="form"):
        PseudoDiffSpec(form="fractional")
    with pytest.raises(ValueError, match="no symbol"):
        PseudoDiffSpec(form="differential", symbol=lambda t, x1, x2, x3: t)
    with pytest.raises(ValueError, match="callable"):
        PseudoDiffSpec(form="multiplier", symbol=None)
    b = ScalarField(lat, np.ones(lat.window_shape), support_tag="guarded")
    with pytest.raises(ValueError, match="no b"):
        PseudoDiffSpec(form="multiplier", symbol=lambda t, x1, x2, x3: t, b=b)


def test_bardeen_coefficients_validation():
    lat = make_lattice(8, 8)
    with pytest.raises(ValueError, match="shape"):
        BardeenCoefficients(lat, np.zeros(5), np.zeros(lat.n_t))
    with pytest.raises(TypeError):
        BardeenCoefficients(lat, 1j * np.ones(lat.n_t), np.zeros(lat.n_t))
    with pytest.raises(ValueError, match="finite"):
        BardeenCoefficients(lat, np.full(lat.n_t, np.nan), np.zeros(lat.n_t))


def test_recovery_config_validation():
    with pytest.raises(ValueError):
        CauchyRecoveryConfig(tol=0.0)
    with pytest.raises(ValueError):
        CauchyRecoveryConfig(max_iter=0)
    with pytest.raises(ValueError):
        CauchyRecoveryConfig(transport_tol=-1.0)
    with pytest.raises(ValueError):
        CauchyRecoveryConfig(transport_max_iter=0)


# ---------------------------------------------------------------------------
# Wave evolution
# ---------------------------------------------------------------------------

def test_wave_solve_dalembert_mode():
    """Free evolution of a grid mode follows cos(|xi| t) to O(dt^2)."""
    errors = {}
    for n_t in (16, 32):
        lat = make_lattice(n_t, 8)
        xi0, data = mode_data(lat)
        field = wave_solve(free_spec(lat), data)
        exact = (np.cos(xi0 * lat.t_window)[:, None, None, None]
                 * data.f1[None])
        errors[n_t] = (np.max(np.abs(field.values - exact))
                       / np.max(np.abs(exact)))
    assert errors[16] <= 2e-3          # measured 7.2e-4
    ratio = errors[16] / errors[32]    # measured 4.27
    assert 3.0 <= ratio <= 5.0


def test_wave_solve_zero_data_is_zero():
    lat = make_lattice(10, 8)
    zero = CauchyData(lat, np.zeros(lat.spatial_shape),
                      np.zeros(lat.spatial_shape))
    field = wave_solve(free_spec(lat), zero)
    assert np.all(field.values == 0.0)


def test_wave_solve_cfl_guard():
    lat = make_lattice(8, 16)          # dt = 1/7 > 2 dx / (pi sqrt 3)
    assert lat.dt > cfl_limit(lat)
    _, data = mode_data(lat)
    with pytest.raises(ValueError, match="stability bound"):
        wave_solve(free_spec(lat), data)


def test_wave_solve_support_guard():
    lat = make_lattice(10, 8)
    leaky = np.zeros(lat.spatial_shape)
    leaky[0, :, :] = 1.0               # mass on the box boundary plane
    with pytest.raises(ValueError, match="guard region"):
        wave_solve(free_spec(lat), CauchyData(lat, leaky, np.zeros_like(leaky)))
    tagged = CauchyData(lat, leaky, np.zeros_like(leaky), support_tag="guarded")
    wave_solve(free_spec(lat), tagged)  # periodic reading is allowed


def test_wave_energy_mode_oracle():
    """Monitor matches the closed-form energy xi0^2 L^3 / 2 of a mode."""
    lat = make_lattice(32, 8)
    xi0, data = mode_data(lat)
    field = wave_solve(free_spec(lat), data)
    energy = wave_energy(field)
    oracle = xi0 ** 2 * lat.box_len ** 3 / 2.0
    interior = energy[1:-1]
    assert np.max(np.abs(interior - oracle)) / oracle <= 2e-2  # measured 3e-3


def test_wave_energy_drift_second_order():
    """Free-wave energy drift is O(dt^2): ratio ~4 under dt halving."""
    drifts = {}
    for n_t in (24, 48):
        lat = make_lattice(n_t, 12)
        data = CauchyData(lat, spatial_bump(lat),
                          0.5 * spatial_bump(lat, (2.2, 1.9, 2.1), 0.35))
        energy = wave_energy(wave_solve(free_spec(lat), data))
        interior = energy[1:-1]
        drifts[n_t] = np.max(np.abs(interior - interior[0])) / interior[0]
    assert drifts[24] <= 1.5e-2                    # measured 7.7e-3
    assert 3.0 <= drifts[24] / drifts[48] <= 5.0   # measured 3.96


def test_wave_adjoint_dot(rng):
    """<wave(d), g> = <d, wave*(g)> with full complex coefficients."""
    lat = make_lattice(10, 8)
    spec = random_coefficient_spec(lat, rng)
    data = CauchyData(lat,
                      rng.standard_normal(lat.spatial_shape)
                      + 1j * rng.standard_normal(lat.spatial_shape),
                      rng.standard_normal(lat.spatial_shape),
                      support_tag="guarded")
    g = ScalarField(lat, rng.standard_normal(lat.window_shape)
                    + 1j * rng.standard_normal(lat.window_shape))
    lhs = l2_inner(wave_solve(spec, data), g)
    rhs = l2_inner(data, wave_adjoint_solve(spec, g))
    assert abs(lhs - rhs) / abs(lhs) <= 1e-12      # measured 8.2e-16


def test_wave_adjoint_matches_dense_transpose(rng):
    """Reverse sweep equals dt * M^T on the 8^3 x 8 micro-grid."""
    lat = make_lattice(8, 8)
    spec = random_coefficient_spec(lat, rng, complex_b=False)
    n_sp = lat.n_x ** 3
    matrix = np.empty((lat.n_t * n_sp, 2 * n_sp))
    for j in range(2 * n_sp):
        unit = np.zeros(2 * n_sp)
        unit[j] = 1.0
        data = CauchyData(lat, unit[:n_sp].reshape(lat.spatial_shape).copy(),
                          unit[n_sp:].reshape(lat.spatial_shape).copy(),
                          support_tag="guarded")
        matrix[:, j] = wave_solve(spec, data).values.ravel()
    g_values = rng.standard_normal(lat.window_shape)
    adj = wave_adjoint_solve(spec, ScalarField(lat, g_values))
    got = np.concatenate([adj.f1.ravel(), adj.f2.ravel()])
    want = lat.dt * (matrix.T @ g_values.ravel())
    assert np.max(np.abs(got - want)) / np.max(np.abs(want)) <= 1e-12
    # measured 6.9e-16


def test_wave_adjoint_validation():
    lat = make_lattice(8, 8)
    padded = ScalarField(lat, np.zeros(lat.padded_shape), time_axis="padded")
    with pytest.raises(ValueError, match="window"):
        wave_adjoint_solve(free_spec(lat), padded)
    other = make_lattice(8, 10)
    with pytest.raises(ValueError, match="lattice"):
        wave_adjoint_solve(free_spec(lat),
                           ScalarField(other, np.zeros(other.window_shape)))


# ---------------------------------------------------------------------------
# Potential-equation front end
# ---------------------------------------------------------------------------

def test_bardeen_zero_coefficients_equal_free_wave():
    lat = make_lattice(16, 8)
    data = CauchyData(lat, spatial_bump(lat),
                      0.3 * spatial_bump(lat, (2.1, 2.0, 1.9)))
    coeffs = BardeenCoefficients(lat, np.zeros(lat.n_t), np.zeros(lat.n_t))
    via_bardeen = bardeen_solve(coeffs, data)
    via_wave = wave_solve(free_spec(lat), data)
    assert np.array_equal(via_bardeen.values, via_wave.values)


def test_bardeen_matches_scalar_ode_oracle():
    """Spatially constant data reduces to f'' + a0 f' + b0 f = 0."""
    lat = make_lattice(1024, 4)
    t = lat.t_window
    a0 = 0.8 + 0.3 * np.sin(2.0 * np.pi * t)
    b0 = 2.0 + np.cos(np.pi * t)
    coeffs = BardeenCoefficients(lat, a0, b0)
    c1, c2 = 1.3, -0.4
    data = CauchyData(lat, np.full(lat.spatial_shape, c1),
                      np.full(lat.spatial_shape, c2), support_tag="guarded")
    field = bardeen_solve(coeffs, data)

    def rhs(tt, y):
        return [y[1],
                -(0.8 + 0.3 * np.sin(2.0 * np.pi * tt)) * y[1]
                - (2.0 + np.cos(np.pi * tt)) * y[0]]

    oracle = scipy.integrate.solve_ivp(rhs, (0.0, 1.0), [c1, c2], t_eval=t,
                                       rtol=1e-12, atol=1e-14)
    assert np.max(np.abs(field.values[:, 0, 0, 0] - oracle.y[0])) <= 1e-6
    # measured 5.4e-7


def test_bardeen_damping_energy_non_increasing():
    lat = make_lattice(48, 8)
    coeffs = BardeenCoefficients(lat, np.full(lat.n_t, 1.5), np.zeros(lat.n_t))
    data = CauchyData(lat, spatial_bump(lat), np.zeros(lat.spatial_shape))
    energy = wave_energy(bardeen_solve(coeffs, data))
    interior = energy[1:-1]
    assert np.all(np.diff(interior) <= 1e-12 * interior[0])
    assert interior[-1] <= 0.5 * interior[0]       # measured ratio 0.24


def test_bardeen_plus_laplacian_warns_and_grows():
    lat = make_lattice(16, 8)
    coeffs = BardeenCoefficients(lat, np.zeros(lat.n_t), np.zeros(lat.n_t))
    _, data = mode_data(lat, k=2)
    with pytest.warns(RuntimeWarning, match="elliptic"):
        field = bardeen_solve(coeffs, data, laplacian_sign="+laplacian")
    assert np.max(np.abs(field.values[-1])) >= 5.0 * np.max(np.abs(field.values[0]))


def test_bardeen_validation():
    lat = make_lattice(8, 8)
    coeffs = BardeenCoefficients(lat, np.zeros(lat.n_t), np.zeros(lat.n_t))
    _, data = mode_data(lat)
    with pytest.raises(ValueError, match="laplacian"):
        bardeen_solve(coeffs, data, laplacian_sign="laplacian")
    with pytest.raises(TypeError):
        bardeen_solve(None, data)


def test_cmb_source_static_potentials_vanish():
    lat = make_lattice(12, 8)
    quad = build_direction_quadrature(4)
    const = ScalarField(lat, np.full(lat.window_shape, 0.7),
                        support_tag="guarded")
    boltz3 = cmb_source(const, const, 0.0, "boltz3", quadrature=quad)
    boltz4 = cmb_source(const, const, 0.0, "boltz4")
    assert np.max(np.abs(boltz3.values)) <= 1e-12
    assert np.max(np.abs(boltz4.values)) <= 1e-12


def test_cmb_source_forms_agree_without_phi():
    lat = make_lattice(12, 8)
    quad = build_direction_quadrature(4)
    psi = gaussian_source(lat, center_t=0.5, center_x=(2.0, 2.0, 2.0),
                          width_t=0.25, width_x=0.4)
    zero = ScalarField(lat, np.zeros(lat.window_shape), support_tag="guarded")
    boltz3 = cmb_source(psi, zero, 0.0, "boltz3", coupling=2.0, quadrature=quad)
    boltz4 = cmb_source(psi, zero, 0.0, "boltz4", coupling=2.0)
    spread = boltz4.values[..., None] * np.ones(quad.n_dir)
    assert np.max(np.abs(boltz3.values - spread)) <= 1e-12


def test_cmb_source_time_derivative_oracle():
    """d_t against the analytic derivative of a separable profile: O(dt^2)."""
    errors = {}
    for n_t in (24, 48):
        lat = make_lattice(n_t, 8)
        profile = np.sin(np.pi * lat.t_window)
        shape = spatial_bump(lat)
        psi = ScalarField(lat, profile[:, None, None, None] * shape[None],
                          support_tag="guarded")
        zero = ScalarField(lat, np.zeros(lat.window_shape), support_tag="guarded")
        got = cmb_source(psi, zero, 0.0, "boltz4", coupling=2.0)
        exact = (np.pi * np.cos(np.pi * lat.t_window)[:, None, None, None]
                 * shape[None])
        errors[n_t] = (np.max(np.abs(got.values - exact))
                       / np.max(np.abs(exact)))
    assert errors[24] <= 1e-2                      # measured 6.2e-3
    assert errors[24] / errors[48] >= 3.0


def test_cmb_source_gradient_term_mode_oracle():
    """boltz3 streaming term is exact on a grid mode of phi."""
    lat = make_lattice(12, 8)
    quad = build_direction_quadrature(4)
    xi0 = 2.0 * np.pi / lat.box_len
    profile = np.sin(np.pi * lat.t_window)
    phi_vals = (profile[:, None, None, None]
                * np.cos(xi0 * lat.x_axis)[None, :, None, None]
                * np.ones((1,) + lat.spatial_shape))
    phi = ScalarField(lat, phi_vals, support_tag="guarded")
    zero = ScalarField(lat, np.zeros(lat.window_shape), support_tag="guarded")
    got = cmb_source(zero, phi, 0.0, "boltz3", quadrature=quad)
    grad1 = (-xi0 * profile[:, None, None, None]
             * np.sin(xi0 * lat.x_axis)[None, :, None, None]
             * np.ones((1,) + lat.spatial_shape))
    exact = -0.5 * grad1[..., None] * quad.nodes[None, None, None, None, :, 0]
    assert np.max(np.abs(got.values - exact)) <= 1e-12


def test_cmb_source_b_term():
    lat = make_lattice(12, 8)
    beta = np.linspace(0.2, 1.0, lat.n_t)
    const = ScalarField(lat, np.full(lat.window_shape, 0.7),
                        support_tag="guarded")
    zero = ScalarField(lat, np.zeros(lat.window_shape), support_tag="guarded")
    got = cmb_source(zero, const, beta, "boltz4", coupling=3.0)
    exact = 3.0 * beta[:, None, None, None] * 0.7
    assert np.max(np.abs(got.values - exact)) <= 1e-12


def test_cmb_source_validation():
    lat = make_lattice(12, 8)
    const = ScalarField(lat, np.full(lat.window_shape, 0.7),
                        support_tag="guarded")
    with pytest.raises(ValueError, match="form"):
        cmb_source(const, const, 0.0, "boltz5")
    with pytest.raises(ValueError, match="quadrature"):
        cmb_source(const, const, 0.0, "boltz3")
    with pytest.raises(ValueError, match="profile"):
        cmb_source(const, const, np.zeros(3), "boltz4")
    other = make_lattice(12, 10)
    stray = ScalarField(other, np.full(other.window_shape, 0.7),
                        support_tag="guarded")
    with pytest.raises(ValueError, match="lattice"):
        cmb_source(const, stray, 0.0, "boltz4")


# ---------------------------------------------------------------------------
# First-order factor a(D)
# ---------------------------------------------------------------------------

def test_ad_differential_padded_mode():
    """d_t multiplies a padded-axis temporal mode by i tau0."""
    lat = make_lattice(12, 8)
    tau0 = 2.0 * np.pi * 3 / (lat.n_t_pad * lat.dt)
    t_padded = np.arange(lat.n_t_pad) * lat.dt
    mode = (np.exp(1j * tau0 * t_padded)[:, None, None, None]
            * np.ones((1,) + lat.spatial_shape))
    field = ScalarField(lat, mode, time_axis="padded", support_tag="guarded")
    out = aD_apply(PseudoDiffSpec(form="differential"), field)
    assert out.time_axis == "padded"
    assert np.max(np.abs(out.values - 1j * tau0 * mode)) / tau0 <= 1e-12
    # measured 4.6e-14


def test_ad_identity_symbol_and_linearity(rng):
    lat = make_lattice(12, 8)
    one = PseudoDiffSpec(
        form="multiplier",
        symbol=lambda t, x1, x2, x3: np.ones(
            np.broadcast_shapes(t.shape, x1.shape, x2.shape, x3.shape)))
    f = gaussian_source(lat, center_t=0.5, center_x=(2.0, 2.0, 2.0),
                        width_t=0.25, width_x=0.4)
    out = aD_apply(one, f)
    assert np.max(np.abs(out.values - f.values)) <= 1e-12   # measured 1.8e-16
    sym = PseudoDiffSpec(form="multiplier",
                         symbol=lambda t, x1, x2, x3:
                         1j * t + 0.5 + 0.0 * (x1 + x2 + x3))
    g = ScalarField(lat, rng.standard_normal(lat.window_shape))
    combo = aD_apply(sym, ScalarField(lat, f.values + 2.0 * g.values))
    split = aD_apply(sym, f).values + 2.0 * aD_apply(sym, g).values
    assert np.max(np.abs(combo.values - split)) <= 1e-12


def test_ad_cone_vanishing_symbol_rejected():
    lat = make_lattice(12, 8)
    f = gaussian_source(lat, center_t=0.5, center_x=(2.0, 2.0, 2.0),
                        width_t=0.25, width_x=0.4)
    wave_symbol = PseudoDiffSpec(
        form="multiplier",
        symbol=lambda t, x1, x2, x3: t ** 2 - (x1 ** 2 + x2 ** 2 + x3 ** 2),
        order=2.0)
    with pytest.raises(ValueError, match="light cone"):
        aD_apply(wave_symbol, f)
    time_symbol = PseudoDiffSpec(
        form="multiplier",
        symbol=lambda t, x1, x2, x3: 1j * t + 0.0 * (x1 + x2 + x3))
    aD_apply(time_symbol, f)   # nonzero on the cone away from the origin


def test_ad_dot_tests(rng):
    lat = make_lattice(12, 8)
    f = ScalarField(lat, rng.standard_normal(lat.window_shape))
    g = ScalarField(lat, rng.standard_normal(lat.window_shape))
    b = ScalarField(lat, rng.standard_normal(lat.window_shape)
                    + 1j * rng.standard_normal(lat.window_shape),
                    support_tag="guarded")
    differential = PseudoDiffSpec(form="differential", b=b)
    lhs = l2_inner(aD_apply(differential, f), g)
    rhs = l2_inner(f, aD_adjoint(differential, g))
    assert abs(lhs - rhs) / abs(lhs) <= 1e-12      # measured exact
    multiplier = PseudoDiffSpec(
        form="multiplier",
        symbol=lambda t, x1, x2, x3: 1j * t + 0.5 + 0.1 * x1)
    lhs = l2_inner(aD_apply(multiplier, f), g)
    rhs = l2_inner(f, aD_adjoint(multiplier, g))
    assert abs(lhs - rhs) / abs(lhs) <= 1e-12      # measured 1.4e-16


def test_ad_differential_window_analytic_oracle():
    """Padded-axis spectral d_t reproduces the analytic derivative of a
    well-resolved, numerically window-compact Gaussian profile."""
    lat = make_lattice(48, 8)
    t = lat.t_window
    width = 0.07
    profile = np.exp(-0.5 * ((t - 0.5) / width) ** 2)  # 8e-12 at the ends
    shape = spatial_bump(lat)
    f = ScalarField(lat, profile[:, None, None, None] * shape[None],
                    support_tag="guarded")
    out = aD_apply(PseudoDiffSpec(form="differential"), f)
    assert out.support_tag == "guarded"            # tag propagates
    exact = ((-(t - 0.5) / width ** 2 * profile)[:, None, None, None]
             * shape[None])
    scale = np.max(np.abs(exact))
    assert np.max(np.abs(out.values - exact)) / scale <= 1e-8


def test_ad_padded_with_b_rejected():
    lat = make_lattice(12, 8)
    b = ScalarField(lat, np.ones(lat.window_shape), support_tag="guarded")
    spec = PseudoDiffSpec(form="differential", b=b)
    padded = ScalarField(lat, np.zeros(lat.padded_shape), time_axis="padded")
    with pytest.raises(ValueError, match="padded"):
        aD_apply(spec, padded)


def test_ad_multiplier_matches_differential_on_guarded_bump():
    """The i tau multiplier and the differential form are two routes to d_t."""
    lat = make_lattice(16, 8)
    f = gaussian_source(lat, center_t=0.5, center_x=(2.0, 2.0, 2.0),
                        width_t=0.22, width_x=0.4)
    via_diff = aD_apply(PseudoDiffSpec(form="differential"), f)
    via_mult = aD_apply(PseudoDiffSpec(
        form="multiplier",
        symbol=lambda t, x1, x2, x3: 1j * t + 0.0 * (x1 + x2 + x3)), f)
    scale = np.max(np.abs(via_diff.values))
    assert np.max(np.abs(via_mult.values - via_diff.values)) / scale <= 1e-8


# ---------------------------------------------------------------------------
# Cauchy-data recovery
# ---------------------------------------------------------------------------

def test_default_time_cutoff_shape():
    lat = make_lattice(64, 8)
    chi0 = default_time_cutoff(lat)
    t = lat.t_window
    assert chi0[0] == 0.0 and chi0[-1] == 0.0
    assert np.all(chi0[(t >= 0.15) & (t <= 0.85)] == 1.0)
    assert np.all(chi0[(t <= 0.05) | (t >= 0.95)] == 0.0)
    assert np.all(chi0 >= 0.0) and np.all(chi0 <= 1.0)


def recovery_setup(n_t, n_x, degree, sigma=None):
    lat = make_lattice(n_t, n_x)
    quad = build_direction_quadrature(degree)
    spec = free_spec(lat)
    ad = PseudoDiffSpec(form="differential")
    f1 = spatial_bump(lat, odd=True)
    f1 = f1 / np.max(np.abs(f1))
    f2 = 0.8 * spatial_bump(lat, (2.2, 1.8, 2.0), 0.35)
    truth = CauchyData(lat, f1, f2)
    uT = forward_chain(lat, quad, spec, ad, truth, sigma=sigma)
    return lat, quad, spec, ad, truth, uT


def test_cauchy_recover_free_wave():
    """CG inverts the free-wave chain; the residual history is monotone."""
    lat, quad, spec, ad, truth, uT = recovery_setup(12, 8, 4)
    recovered, report = cauchy_recover(
        uT, spec, ad, config=CauchyRecoveryConfig(tol=1e-3, max_iter=60))
    assert report.converged
    assert report.residual_history[0] == 1.0
    assert report.residual_history[-1] <= 1e-3
    history = np.asarray(report.residual_history)
    assert np.all(history[1:] <= history[:-1] * (1.0 + 1e-12))
    assert cauchy_error(recovered, truth) <= 0.05  # measured 0.008 at 35 iters


def test_cauchy_recover_deep_convergence_nails_truth():
    """At tight tolerance the recovery reproduces the generating data."""
    lat, quad, spec, ad, truth, uT = recovery_setup(12, 8, 4)
    recovered, report = cauchy_recover(
        uT, spec, ad, config=CauchyRecoveryConfig(tol=1e-6, max_iter=200))
    assert report.converged
    assert cauchy_error(recovered, truth) <= 1e-3  # measured 4e-5 at 77 iters


def test_cauchy_recover_with_absorption():
    sigma = AbsorptionField(make_lattice(12, 8), np.full(12, 0.4), lam=1.0)
    lat, quad, spec, ad, truth, uT = recovery_setup(12, 8, 4, sigma=sigma)
    recovered, report = cauchy_recover(
        uT, spec, ad, sigma=sigma,
        config=CauchyRecoveryConfig(tol=1e-3, max_iter=80))
    assert report.converged
    assert cauchy_error(recovered, truth) <= 0.05  # measured 0.008 at 38 iters


def test_cauchy_recover_zero_measurement():
    lat, quad, spec, ad, truth, uT = recovery_setup(10, 8, 2)
    zero = RayData(lat, quad, np.zeros_like(uT.values), base_time=lat.t_final)
    recovered, report = cauchy_recover(zero, spec, ad)
    assert report.converged and report.iterations == 0
    assert np.all(recovered.f1 == 0.0) and np.all(recovered.f2 == 0.0)


def test_cauchy_recover_zero_data_zero_measurement():
    """f1 = f2 = 0 produces an exactly zero measurement through the chain."""
    lat = make_lattice(10, 8)
    quad = build_direction_quadrature(2)
    zero = CauchyData(lat, np.zeros(lat.spatial_shape),
                      np.zeros(lat.spatial_shape))
    uT = forward_chain(lat, quad, free_spec(lat),
                       PseudoDiffSpec(form="differential"), zero)
    assert np.all(uT.values == 0.0)


def test_cauchy_recover_stagnation_raises():
    lat, quad, spec, ad, truth, uT = recovery_setup(10, 8, 2)
    with pytest.raises(CauchyRecoveryStagnationError) as info:
        cauchy_recover(uT, spec, ad,
                       config=CauchyRecoveryConfig(tol=1e-12, max_iter=2))
    err = info.value
    assert err.report.iterations == 2
    assert not err.report.converged
    assert err.data.f1.shape == lat.spatial_shape


def test_cauchy_recover_validation():
    lat, quad, spec, ad, truth, uT = recovery_setup(10, 8, 2)
    with pytest.raises(TypeError):
        cauchy_recover(np.zeros(3), spec, ad)
    other_spec = free_spec(make_lattice(10, 10))
    with pytest.raises(ValueError, match="lattice"):
        cauchy_recover(uT, other_spec, ad)
    based_zero = RayData(lat, quad, np.asarray(uT.values), base_time=0.0)
    with pytest.raises(ValueError, match="t_final"):
        cauchy_recover(based_zero, spec, ad)


def test_composed_chain_dot(rng):
    """<F d, g> = <d, F* g> for the full measurement chain, with weight."""
    lat = make_lattice(12, 8)
    quad = build_direction_quadrature(4)
    sigma = AbsorptionField(lat, 0.3 + 0.1 * np.sin(np.pi * lat.t_window),
                            lam=1.0)
    spec = random_coefficient_spec(lat, rng, complex_b=False)
    ad = PseudoDiffSpec(form="differential")
    data = CauchyData(lat, rng.standard_normal(lat.spatial_shape),
                      rng.standard_normal(lat.spatial_shape),
                      support_tag="guarded")
    g = RayData(lat, quad,
                rng.standard_normal(lat.spatial_shape + (quad.n_dir,)),
                base_time=lat.t_final)
    lhs = l2_inner(forward_chain(lat, quad, spec, ad, data, sigma=sigma), g)
    rhs = l2_inner(data, adjoint_chain(lat, spec, ad, g, sigma=sigma))
    assert abs(lhs - rhs) / abs(lhs) <= 1e-10


def test_cauchy_recover_matches_dense_least_squares():
    """CG from zero converges to the minimum-norm solution of the chain."""
    lat, quad, spec, ad, truth, uT = recovery_setup(6, 6, 2)
    n_sp = lat.n_x ** 3
    cutoff = default_time_cutoff(lat)
    columns = []
    for j in range(2 * n_sp):
        unit = np.zeros(2 * n_sp)
        unit[j] = 1.0
        data = CauchyData(lat, unit[:n_sp].reshape(lat.spatial_shape).copy(),
                          unit[n_sp:].reshape(lat.spatial_shape).copy(),
                          support_tag="guarded")
        columns.append(forward_chain(lat, quad, spec, ad, data,
                                     chi0=cutoff).values.ravel())
    matrix = np.stack(columns, axis=1)
    weights = np.sqrt(np.broadcast_to(
        quad.weights, lat.spatial_shape + (quad.n_dir,)).ravel())
    solution, _, rank, svals = scipy.linalg.lstsq(
        matrix * weights[:, None], uT.values.ravel() * weights, cond=1e-10)
    assert rank < 2 * n_sp          # the constant f1 mode is invisible to d_t
    recovered, report = cauchy_recover(
        uT, spec, ad, config=CauchyRecoveryConfig(tol=1e-12, max_iter=600))
    got = np.concatenate([recovered.f1.ravel(), recovered.f2.ravel()])
    gap = np.linalg.norm(got - solution) / np.linalg.norm(solution)
    assert gap <= 1e-8              # measured 2.3e-12 at 256 iterations
