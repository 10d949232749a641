import math

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import base_point
from sepcross.errors import PreconditionError
from sepcross.ensemble import (EnsembleSpec, anosov_sweep, box_center, budget_shape_fit,
                               draw_box, fit_scaling, run_capture_experiment, sample_initials,
                               subbox_counts)
from sepcross.geometry import to_action_angle


@pytest.fixture(scope="module")
def small_spec(dw_slow_fric):
    return EnsembleSpec(base_point=base_point(dw_slow_fric), delta=0.05, eps=2e-3, N=8, seed=3)


@pytest.fixture(scope="module")
def small_report(dw_slow_fric, small_spec):
    return run_capture_experiment(small_spec, dw_slow_fric)


def test_samples_lie_in_box(dw_slow_fric):
    spec = EnsembleSpec(base_point=base_point(dw_slow_fric), delta=0.05, eps=1e-3, N=60)
    s = sample_initials(spec, dw_slow_fric)
    z0, I0, phi0 = s.center
    assert I0 == pytest.approx(0.6, abs=1e-10)
    assert phi0 == pytest.approx(math.pi, abs=1e-8)
    for (z, I, phi), pt in zip(s.zIphi, s.points):
        assert abs(z - z0) < 0.05 and abs(I - I0) < 0.05 and abs(phi - phi0) < 0.05
        nu, I2, phi2 = to_action_angle(dw_slow_fric, pt[0], pt[1], pt[2])
        assert nu == 3 and pt[2] == z
        assert I2 == pytest.approx(I, abs=1e-9)
        assert phi2 == pytest.approx(phi, abs=1e-7)


def test_sampling_is_deterministic_and_prefix_stable(dw_slow_fric):
    spec = EnsembleSpec(base_point=base_point(dw_slow_fric), delta=0.05, eps=1e-3, N=20, seed=9)
    a = sample_initials(spec, dw_slow_fric)
    b = sample_initials(spec, dw_slow_fric, threads=3)
    assert np.array_equal(a.points, b.points)
    spec10 = EnsembleSpec(base_point=spec.base_point, delta=0.05, eps=1e-3, N=10, seed=9)
    assert np.array_equal(sample_initials(spec10, dw_slow_fric).points, a.points[:10])
    other = EnsembleSpec(base_point=spec.base_point, delta=0.05, eps=1e-3, N=20, seed=10)
    assert not np.array_equal(sample_initials(other, dw_slow_fric).points, a.points)


def test_samples_shrink_to_base_point(dw_slow_fric):
    bp = base_point(dw_slow_fric)
    for delta in (1e-2, 1e-4, 1e-6):
        spec = EnsembleSpec(base_point=bp, delta=delta, eps=1e-13, N=10)
        pts = sample_initials(spec, dw_slow_fric).points
        assert np.max(np.abs(pts - np.array(bp))) <= 10 * delta


def test_uniform_density_chi_square(dw_slow_fric):
    spec = EnsembleSpec(base_point=base_point(dw_slow_fric), delta=0.05, eps=1e-3, N=10000)
    center = box_center(spec, dw_slow_fric)
    raw = draw_box(spec, center, range(spec.N))
    rel = (raw - np.array(center) + spec.delta) / (2 * spec.delta)
    cells = np.floor(rel * 4).astype(int)
    assert cells.min() >= 0 and cells.max() <= 3
    counts = np.bincount(cells[:, 0] * 16 + cells[:, 1] * 4 + cells[:, 2], minlength=64)
    assert chisquare(counts).pvalue > 0.01


def test_spec_validation(dw_slow_fric):
    bp = base_point(dw_slow_fric)
    with pytest.raises(ValueError):
        EnsembleSpec(base_point=bp, delta=0.05, eps=3e-3, N=10).validate()
    with pytest.raises(ValueError):
        EnsembleSpec(base_point=bp, delta=0.05, eps=1e-3, N=-1).validate()
    with pytest.raises(ValueError):
        EnsembleSpec(base_point=bp, delta=0.0, eps=1e-3, N=1).validate()
    with pytest.raises(PreconditionError):
        sample_initials(EnsembleSpec(base_point=bp, delta=0.3, eps=1e-3, N=5), dw_slow_fric)
    with pytest.raises(PreconditionError):
        # base point inside a well
        sample_initials(EnsembleSpec(base_point=(0.1, 1.0, 1.0), delta=0.05, eps=1e-3, N=5),
                        dw_slow_fric)


def test_report_counts(small_report, small_spec):
    (res,) = small_report.results
    assert res.n1 + res.n2 + res.incomplete == small_spec.N
    assert 0.0 <= res.fractions[0] <= 1.0
    assert res.predicted[0] == pytest.approx(0.5, abs=1e-9)
    assert small_report.tau_star > 0
    assert len(res.summaries) == small_spec.N


def test_report_is_thread_independent(dw_slow_fric, small_spec, small_report):
    again = run_capture_experiment(small_spec, dw_slow_fric, threads=2)
    assert again.to_dict() == small_report.to_dict()


def test_subbox_additivity(dw_slow_fric, small_spec, small_report):
    samples = sample_initials(small_spec, dw_slow_fric)
    dests = [s.destination for s in small_report.results[0].summaries]
    cells = subbox_counts(samples, dests, small_spec.delta)
    assert len(cells) <= 8
    res = small_report.results[0]
    assert sum(c[1] for c in cells.values()) == res.n1
    assert sum(c[2] for c in cells.values()) == res.n2
    assert sum(c[None] for c in cells.values()) == res.incomplete


def test_subbox_additivity_many(dw_slow_fric):
    spec = EnsembleSpec(base_point=base_point(dw_slow_fric), delta=0.05, eps=1e-3, N=300)
    samples = sample_initials(spec, dw_slow_fric)
    rng = np.random.default_rng(0)
    dests = list(rng.choice([1, 2, None], size=spec.N))
    for splits in (2, 3):
        cells = subbox_counts(samples, dests, spec.delta, splits)
        assert len(cells) == splits**3
        total = {k: sum(c[k] for c in cells.values()) for k in (1, 2, None)}
        assert total == {k: dests.count(k) for k in (1, 2, None)}


def test_fit_scaling_synthetic():
    eps = np.array([8e-3, 4e-3, 2e-3, 1e-3])
    g = eps * np.abs(np.log(eps))
    fit = fit_scaling(list(zip(eps, 3 * eps, 2 * g)))
    assert fit.pre_slope == pytest.approx(1.0, abs=1e-12)
    assert fit.pre_slope_stderr <= 1e-10
    assert fit.pre_constant == pytest.approx(3.0)
    assert fit.post_constant == pytest.approx(2.0)
    assert fit.post_variation == pytest.approx(0.0, abs=1e-12)
    quad = fit_scaling(list(zip(eps, eps**2, g)))
    assert quad.pre_slope == pytest.approx(2.0)


def test_budget_shape_fit_synthetic():
    eps = 5e-4
    deltas = np.array([0.025, 0.05, 0.1])
    dev = 0.4 * deltas + 1.5 * eps * abs(math.log(eps)) / deltas
    c1, c2, r = budget_shape_fit(deltas, dev, eps)
    assert c1 == pytest.approx(0.4, rel=1e-9)
    assert c2 == pytest.approx(1.5, rel=1e-9)
    assert r <= 1e-12
    c1, c2, _ = budget_shape_fit(deltas, -dev, eps)
    assert c1 == 0.0 and c2 == 0.0


def test_anosov_sweep(dw_slow_fric):
    with pytest.raises(ValueError):
        anosov_sweep(base_point(dw_slow_fric), 1e-3, 0, dw_slow_fric)
    rep = anosov_sweep(base_point(dw_slow_fric), 4e-3, 4, dw_slow_fric)
    n1 = round(rep.fractions[0] * rep.M)
    n2 = round(rep.fractions[1] * rep.M)
    assert n1 + n2 + rep.incomplete == 4
    assert rep.predicted[0] == pytest.approx(0.5, abs=1e-9)
