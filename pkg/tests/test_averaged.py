import math

import numpy as np
import pytest

import reference_values as ref
from sepcross.averaged import (AveragedState, action_rate, averaged_distance_check,
                               averaged_rhs, integrate_averaged)
from sepcross.errors import PreconditionError
from sepcross.geometry import action, energy_for_action, separatrix
from sepcross.model import make_preset


def _from_action(system, I0, z0=1.0):
    return energy_for_action(system, 3, I0, z0)


@pytest.fixture(scope="module")
def fric_solution(dw_slow_fric):
    h0 = _from_action(dw_slow_fric, 0.6)
    return integrate_averaged(dw_slow_fric, None, (h0, 1.0), (0.0, 1.0))


def test_crossing_time_reference(fric_solution):
    sol = fric_solution
    assert sol.crossed
    assert sol.tau_star == pytest.approx(ref.SLOW_G02_I06_TAU, abs=1e-8)
    assert sol.z_star == pytest.approx(1.0 + ref.SLOW_G02_I06_TAU, abs=1e-8)


@pytest.mark.parametrize("preset,params,I0,tau", [
    ("dw-slow", {}, 0.6, ref.SLOW_G0_I06_TAU),
    ("dw-asym", {}, 0.6, ref.ASYM_G0_I06_TAU),
])
def test_crossing_time_from_action(preset, params, I0, tau):
    system = make_preset(preset, **params)
    sol = integrate_averaged(system, None, (_from_action(system, I0), 1.0), (0.0, 0.5))
    assert sol.tau_star == pytest.approx(tau, abs=1e-8)


def test_crossing_time_from_energy(dw_slow_fric):
    sol = integrate_averaged(dw_slow_fric, None, (0.3, 1.0), (0.0, 1.0))
    assert sol.tau_star > 0
    assert sol.tau_star == pytest.approx(ref.SLOW_G02_H03_TAU, abs=1e-8)


def test_dissipative_crossing(dw_dissip):
    sol = integrate_averaged(dw_dissip, None, (0.3, None), (0.0, 6.0))
    assert sol.z_star is None
    assert sol.pre.z.shape[1] == 0
    assert sol.tau_star == pytest.approx(ref.DISSIP_G02_H03_TAU, abs=1e-7)


def test_gluing_and_action_anchor(fric_solution):
    sol = fric_solution
    zs = sol.z_star
    assert abs(sol.pre.h[-1]) <= 1e-9
    assert sol.pre.z[-1, 0] == pytest.approx(zs, abs=1e-9)
    for nu in (1, 2):
        br = sol.post[nu]
        assert br.h[0] == 0.0
        assert br.z[0, 0] == pytest.approx(zs, abs=1e-12)
        assert br.J[0] == pytest.approx(4 / 3 * zs**1.5 / (2 * math.pi), abs=1e-6)
    # symmetric potential: both wells carry the same solution
    b1, b2 = sol.post[1], sol.post[2]
    t = np.linspace(b1.tau[0], b1.tau[-1], 30)
    assert np.allclose(b1(t)[0], b2(t)[0], atol=1e-9)


def test_monotone_approach_and_departure(fric_solution):
    sol = fric_solution
    assert np.all(np.diff(sol.pre.h) < 0)
    h1 = sol.post[1].h
    assert np.all(np.diff(np.abs(h1)) > 0)


def test_action_follows_energy(fric_solution, dw_slow_fric):
    pre = fric_solution.pre
    for k in range(0, pre.tau.size, max(1, pre.tau.size // 8)):
        if pre.h[k] > 1e-3:
            assert pre.J[k] == pytest.approx(action(dw_slow_fric, pre.h[k], pre.z[k, 0], 3),
                                             rel=1e-7)


def test_dense_evaluation(fric_solution):
    sol = fric_solution
    H, Z = sol.evaluate([0.0, sol.tau_star + 0.1], nu=1)
    assert H[0] == pytest.approx(sol.pre.h[0])
    assert H[1] < 0
    assert Z[1, 0] == pytest.approx(1.0 + sol.tau_star + 0.1, abs=1e-9)


def test_tolerance_robustness(dw_slow_fric):
    h0 = _from_action(dw_slow_fric, 0.6)
    a = integrate_averaged(dw_slow_fric, None, (h0, 1.0), (0.0, 0.5))
    b = integrate_averaged(dw_slow_fric, None, (h0, 1.0), (0.0, 0.5), rtol=0.5e-9, atol=0.5e-12,
                           estimate_error=False)
    assert abs(a.tau_star - b.tau_star) <= a.tau_star_error


def test_rhs_examples(dw_slow, dw_asym):
    for system in (dw_slow, dw_asym):
        dh, dz = averaged_rhs(system, None, AveragedState(3, 0.0, 1.0, 0.0, 0.0))
        assert dh == 0.0 and dz[0] == pytest.approx(1.0)
    dh, dz = averaged_rhs(dw_slow, None, AveragedState(3, 0.01, 1.0, 0.0, 0.0))
    assert dz[0] == pytest.approx(1.0, abs=1e-12)
    assert dh < 0
    for h in (1e-4, 1e-8):
        dh, _ = averaged_rhs(dw_slow, None, AveragedState(3, h, 1.0, 0.0, 0.0))
        assert dh < 0


def test_action_rate_chain_rule(dw_asym):
    rng = np.random.default_rng(4)
    system = make_preset("dw-asym", gamma=0.15)
    for _ in range(12):
        z = rng.uniform(0.7, 1.6)
        nu = int(rng.integers(1, 4))
        h = rng.uniform(0.02, 0.4) if nu == 3 else -rng.uniform(0.01, 0.05)
        eps = 1e-3
        rate = action_rate(system, AveragedState(nu, h, z, 0.0, 0.0), eps)
        d = 1e-5
        dIdh = (action(system, h + d, z, nu) - action(system, h - d, z, nu)) / (2 * d)
        dIdz = (action(system, h, z + d, nu) - action(system, h, z - d, nu)) / (2 * d)
        dh, dz = averaged_rhs(system, None, AveragedState(nu, h, z, 0.0, 0.0))
        chain = eps * (dIdh * dh + dIdz * dz[0])
        assert rate == pytest.approx(chain, rel=1e-6, abs=1e-13)


def test_action_rate_trivial_cases():
    still = make_preset("dw-slow", f3=0.0, gamma=0.0)
    assert action_rate(still, AveragedState(3, 0.1, 1.0, 0.0, 0.0), 1e-3) == 0.0
    # gamma = 0: captured area grows exactly as fast as it is swept in
    slow = make_preset("dw-slow")
    r = action_rate(slow, AveragedState(1, -1e-7, 1.0, 0.0, 0.0), 1.0)
    assert abs(2 * math.pi * r) < 1e-3


def test_negative_start_needs_well(dw_slow):
    with pytest.raises(PreconditionError):
        integrate_averaged(dw_slow, None, (-0.05, 1.0), (0.0, 0.1))
    sol = integrate_averaged(dw_slow, None, (-0.05, 1.0), (0.0, 0.1), nu0=1)
    assert not sol.crossed
    assert np.all(sol.pre.h < 0)


def test_distance_check(dw_slow_fric, fric_solution):
    rep = averaged_distance_check(fric_solution, fric_solution, 1e-3)
    assert rep["max_separation"] == 0.0
    h0 = _from_action(dw_slow_fric, 0.6)
    consts = []
    for delta in (2e-3, 1e-3):
        other = integrate_averaged(dw_slow_fric, None, (h0, 1.0 + 0.5 * delta), (0.0, 1.0),
                                   estimate_error=False)
        rep = averaged_distance_check(fric_solution, other, delta)
        assert math.isfinite(rep["constant"])
        consts.append(rep["constant"])
    assert 0.5 < consts[0] / consts[1] < 2.0
    with pytest.raises(PreconditionError):
        averaged_distance_check(fric_solution, fric_solution, 0.5)


def test_separatrix_area_matches_anchor(fric_solution, dw_slow_fric):
    zs = fric_solution.z_star
    S1 = separatrix(dw_slow_fric, zs).area(1)
    assert fric_solution.post[1].J[0] == pytest.approx(S1 / (2 * math.pi), abs=1e-9)
