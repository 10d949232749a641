import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numba import njit

import oracle as o
import reference_values as ref
from sepcross.averaged import AveragedState, action_rate
from sepcross.errors import ConditionCViolation, PreconditionError
from sepcross.geometry import orbit_integrals, separatrix
from sepcross.model import SlowFastSystem, make_preset
from sepcross.theta import ThetaContext, capture_probability, compute_theta


@njit
def _shifted_energy(p, q, z, prm):
    return 0.5 * p * p + 0.25 * q**4 - 0.5 * z[0] * q * q + 5.0


@njit
def _shifted_grad(p, q, z, prm, out):
    out[0] = p
    out[1] = q**3 - z[0] * q
    out[2] = -0.5 * q * q


@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("gamma", [0.0, 0.2])
def test_theta_closed_form(z, gamma):
    th = compute_theta(make_preset("dw-slow", gamma=gamma), z=z)
    expected = 2 * math.sqrt(z) + gamma * 4 / 3 * z**1.5
    assert th.theta1 == pytest.approx(expected, abs=1e-6)
    assert th.theta2 == pytest.approx(expected, abs=1e-6)
    assert th.theta3 == th.theta1 + th.theta2
    assert th.estimated_quadrature_error < 1e-6


def test_theta_dissipative(dw_dissip):
    th = compute_theta(dw_dissip)
    assert th.theta1 == pytest.approx(0.2 * 4 / 3, abs=1e-8)
    assert th.theta2 == pytest.approx(0.2 * 4 / 3, abs=1e-8)


def test_theta_asymmetric_reference():
    th = compute_theta(make_preset("dw-asym", gamma=0.2), z=1.0)
    assert th.theta1 == pytest.approx(ref.ASYM_THETA1_G02, abs=1e-8)
    assert th.theta2 == pytest.approx(ref.ASYM_THETA2_G02, abs=1e-8)
    P = capture_probability(th)
    assert P.P1 == pytest.approx(ref.ASYM_P1_G02, abs=1e-9)
    th0 = compute_theta(make_preset("dw-asym"), z=1.0)
    assert th0.theta1 == pytest.approx(ref.ASYM_THETA1_G0, abs=1e-8)
    assert th0.theta2 == pytest.approx(ref.ASYM_THETA2_G0, abs=1e-8)


def test_symmetric_probabilities(dw_slow_fric):
    P = capture_probability(compute_theta(dw_slow_fric, z=1.3))
    assert P.P1 == pytest.approx(0.5, abs=1e-9)
    assert P.P1 + P.P2 == pytest.approx(1.0, abs=1e-12)


def test_zero_perturbation_gives_zero_flux():
    system = make_preset("dw-slow", f3=0.0, gamma=0.0)
    th = compute_theta(system, z=1.0)
    assert th.theta1 == 0.0 and th.theta2 == 0.0
    with pytest.raises(ConditionCViolation):
        capture_probability(th)
    with pytest.raises(ConditionCViolation):
        ThetaContext(system, (0.8, 1.2), n_grid=5)


def test_unnormalized_energy_rejected(dw_slow):
    system = SlowFastSystem(name="shifted", dim_z=1, energy=_shifted_energy, grad=_shifted_grad,
                            perturb=dw_slow.perturb, loop_side=dw_slow.loop_side,
                            params=dw_slow.params.copy(), domain_box=dw_slow.domain_box.copy(),
                            z_box=np.array([[0.5, 2.0]]), saddle_guess=(0.0, 0.0),
                            normalized=False, param_names=dw_slow.param_names)
    with pytest.raises(PreconditionError):
        compute_theta(system, z=1.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 5.0))
def test_scaling_covariance(lam):
    base = compute_theta(make_preset("dw-asym", gamma=0.2), z=1.2)
    scaled = compute_theta(make_preset("dw-asym", gamma=0.2 * lam, f3=lam), z=1.2)
    for nu in (1, 2, 3):
        assert scaled[nu] == pytest.approx(lam * base[nu], rel=1e-9)
    assert capture_probability(scaled).P1 == pytest.approx(capture_probability(base).P1,
                                                           abs=1e-12)


def test_regularization_radius(dw_asym):
    full = compute_theta(dw_asym, z=1.0)
    half = compute_theta(dw_asym, z=1.0, r_start=0.5e-7, r_capture=0.5e-6)
    for nu in (1, 2):
        assert abs(full[nu] - half[nu]) <= 2 * full.estimated_quadrature_error


def test_context_interpolation(dw_slow_fric):
    ctx = ThetaContext(dw_slow_fric, (0.5, 2.0))
    for z in (0.53, 0.91, 1.37, 1.99):
        th = compute_theta(dw_slow_fric, z=z)
        assert ctx.theta(z, 1) == pytest.approx(th.theta1, abs=1e-6)
        assert ctx.theta(z, 3) == pytest.approx(th.theta3, abs=2e-6)
        assert ctx.area(z, 1) == pytest.approx(4 / 3 * z**1.5, abs=1e-6)
        assert ctx.dS_dz(z, 2) == pytest.approx(2 * math.sqrt(z), abs=1e-5)
        assert ctx.f3_saddle(z) == pytest.approx(1.0)
    with pytest.raises(ConditionCViolation):
        ctx.theta(2.5, 1)


def test_context_asymmetric_probability(dw_asym):
    ctx = ThetaContext(dw_asym, (0.9, 1.3), n_grid=17)
    _, z_star = o.crossing_point(0.6, 1.0, alpha=0.3)
    assert ctx.probabilities(z_star).P1 == pytest.approx(ref.ASYM_G0_I06_P1, abs=1e-8)


def test_loop_flux_limit_on_separatrix(dw_slow_fric):
    # int G dt over the level h > 0 tends to -Theta_3 with an h ln h defect
    th3 = compute_theta(dw_slow_fric, z=1.0).theta3
    hs = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]
    defects = [abs(orbit_integrals(dw_slow_fric, h, 1.0, 3).flux_integral + th3) for h in hs]
    assert all(b < a for a, b in zip(defects, defects[1:]))
    ratios = [d / (h * abs(math.log(h))) for d, h in zip(defects, hs)]
    assert max(ratios) < 10 * min(ratios)
    assert defects[-1] < 1e-4


@pytest.mark.parametrize("nu", [1, 3])
def test_regular_rate_limit(dw_slow_fric, nu):
    # d(2 pi I - S_nu)/dtau along the averaged flow tends to -Theta_nu
    z = 1.0
    sep = separatrix(dw_slow_fric, z)
    th = compute_theta(dw_slow_fric, z=z)[nu]
    for h in (1e-5, 1e-7):
        hh = h if nu == 3 else -h
        d = orbit_integrals(dw_slow_fric, hh, z, nu)
        rate = (2 * math.pi * action_rate(dw_slow_fric, AveragedState(nu, hh, z, 0.0, 0.0), 1.0)
                - float(sep.dS_dz(nu)[0]) * float(d.f3_integral[0]) / d.period)
        assert rate == pytest.approx(-th, rel=1e-3)
