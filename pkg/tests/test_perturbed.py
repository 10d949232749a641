import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepcross.averaged import integrate_averaged
from sepcross.errors import DomainError, PreconditionError
from sepcross.geometry import from_action_angle, level_orbit, saddle_frame
from sepcross.model import make_preset
from sepcross.perturbed import (BOUNDARY, classify_capture, compare_to_averaged, detect_region,
                                eta_section_events, integrate_full, predict_capture_pseudo)
from sepcross.theta import ThetaContext


@pytest.fixture(scope="module")
def dissip_ctx(dw_dissip):
    return ThetaContext(dw_dissip)


@pytest.fixture(scope="module")
def dissip_start(dw_dissip):
    return from_action_angle(dw_dissip, 3, 1.0, 0.0)


def test_unperturbed_conservation(dw_slow):
    rng = np.random.default_rng(2)
    for _ in range(5):
        x0 = np.array([*rng.uniform(-1, 1, 2), rng.uniform(0.7, 1.5)])
        tr = integrate_full(dw_slow, x0, 0.0, 200.0)
        assert np.max(np.abs(tr.h - tr.h[0])) <= 1e-9
        assert np.all(tr.z == x0[2])
        assert np.all(np.diff(tr.t) > 0)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.2, 1.2), st.floats(1e-3, 1e-2))
def test_energy_bookkeeping(p0, q0, eps):
    system = make_preset("dw-asym", gamma=0.2)
    tr = integrate_full(system, (p0, q0, 1.0), eps, 300.0)
    assert np.max(np.abs((tr.h - tr.h[0]) - tr.work)) <= 1e-8


def test_detect_region_examples(dw_slow):
    assert detect_region(dw_slow, 0.0, 1.0, 1.0) == 1
    assert detect_region(dw_slow, 0.0, -1.0, 1.0) == 2
    assert detect_region(dw_slow, 1.0, 0.0, 1.0) == 3
    assert detect_region(dw_slow, 0.0, 0.0, 1.0) == BOUNDARY


def test_region_series(dw_slow):
    tr = integrate_full(dw_slow, (0.2, 1.0, 1.0), 0.0, 10.0)
    assert set(tr.nu) == {1}
    j = tr.action()
    assert np.nanmax(j) - np.nanmin(j) <= 1e-9


def test_one_eta_event_per_period(dw_slow):
    frame = saddle_frame(dw_slow, 1.0)
    orb = level_orbit(dw_slow, 0.05, 1.0, 3)
    x0 = (orb.p[0], orb.q[0], 1.0)
    n = 7
    tr = integrate_full(dw_slow, x0, 0.0, (n + 0.5) * orb.period)
    evs = eta_section_events(tr, frame, radius=0.5)
    times = [e[0] for e in evs]
    assert len(evs) == n
    assert np.all(np.diff(times) > 0)
    assert np.allclose(np.diff(times), orb.period, rtol=1e-8)


def test_no_events_far_from_saddle(dw_slow):
    frame = saddle_frame(dw_slow, 1.0)
    x0 = from_action_angle(dw_slow, 1, 0.02, 0.0, 1.0)
    tr = integrate_full(dw_slow, (*x0, 1.0), 0.0, 50.0)
    assert eta_section_events(tr, frame, radius=0.3) == []


def test_incomplete_without_crossing(dw_slow_fric):
    tr = integrate_full(dw_slow_fric, (1.0, 0.0, 1.0), 1e-3, 50.0)
    rec = classify_capture(tr)
    assert not rec.complete
    assert rec.destination is None


def test_capture_and_band_times(dw_dissip, dissip_ctx, dissip_start):
    # band passage time grows like |ln eps|
    ratios = []
    for eps in (4e-3, 2e-3, 1e-3):
        tr = integrate_full(dw_dissip, dissip_start, eps, 20.0 / eps, h_stop=-25 * eps)
        rec = classify_capture(tr, (20, 20), dissip_ctx)
        assert rec.complete and rec.destination in (1, 2)
        assert rec.t_minus < rec.t_plus
        # destination agrees with the region after t_plus
        after = tr.nu[tr.t > rec.t_plus]
        assert np.all(after == rec.destination)
        ratios.append((rec.t_plus - rec.t_minus) / abs(math.log(eps)))
    assert max(ratios) / min(ratios) < 1.25


@pytest.mark.parametrize("eps", [4e-3, 1e-3])
def test_round_decrement(dw_dissip, dissip_ctx, dissip_start, eps):
    th3 = dissip_ctx.theta(None, 3)
    tr = integrate_full(dw_dissip, dissip_start, eps, 20.0 / eps, h_stop=-25 * eps)
    rec = classify_capture(tr, (20, 20), dissip_ctx)
    hs = np.array([e[1] for e in eta_section_events(tr, dissip_ctx, t_max=rec.t_plus)])
    near = (hs > 0) & (hs < 20 * eps)
    dec = -np.diff(hs)[near[1:] & near[:-1]]
    assert dec.size > 10
    assert np.all(dec > 0.5 * eps * th3)
    assert np.max(np.abs(dec - eps * th3)) <= 5 * eps**1.5


def test_reversed_friction_escapes():
    system = make_preset("dw-dissip", gamma=-0.2)
    x0 = from_action_angle(system, 1, 0.1, 0.0)
    tr = integrate_full(system, x0, 2e-3, 3000.0, h_stop=None)
    assert tr.h[-1] > tr.h[0]
    assert np.any(tr.nu == 3)


def test_predictor_examples(dissip_ctx):
    eps = 1e-3
    th1, th2, th3 = dissip_ctx.thetas(None)
    assert predict_capture_pseudo(dissip_ctx, 0.5 * eps * th2, None, eps) == 2
    assert predict_capture_pseudo(dissip_ctx, eps * th2 + 0.5 * eps * th1, None, eps) == 1
    assert predict_capture_pseudo(dissip_ctx, 2 * eps * th3, None, eps) == 3
    with pytest.raises(PreconditionError):
        predict_capture_pseudo(dissip_ctx, -1e-4, None, eps)


def test_predictor_on_trajectory(dw_dissip, dissip_ctx, dissip_start):
    tr = integrate_full(dw_dissip, dissip_start, 1e-3, 2e4, h_stop=-25e-3)
    rec = classify_capture(tr, (20, 20), dissip_ctx)
    assert rec.h_prime is not None and rec.h_prime > 0
    assert rec.t_prime < rec.t_plus
    if not rec.excluded:
        assert rec.agreement


def test_domain_errors(dw_slow):
    with pytest.raises(DomainError):
        integrate_full(dw_slow, (0.0, 50.0, 1.0), 1e-3, 10.0)
    with pytest.raises(ValueError):
        integrate_full(dw_slow, (0.0, 0.5), 1e-3, 10.0)


def test_zero_eps_matches_constant_averaged(dw_slow):
    x0 = from_action_angle(dw_slow, 3, 0.8, 1.0, 1.0)
    h0 = dw_slow.hamiltonian(*x0, 1.0)
    tr = integrate_full(dw_slow, (*x0, 1.0), 0.0, 100.0)
    avg = integrate_averaged(dw_slow, None, (h0, 1.0), (0.0, 0.0))
    m = compare_to_averaged(tr, avg, None)
    assert m.pre <= 1e-9
