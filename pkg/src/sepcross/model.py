"""Slow-fast system abstraction, built-in presets and hypothesis checks.

A system is described by numba-compiled kernels so the integrators can be
specialised on it:

    energy(p, q, z, prm) -> float
    grad(p, q, z, prm, out)          out = (dE/dp, dE/dq, dE/dz...)
    perturb(p, q, z, eps, prm, out)  out = (f1, f2, f3...)
    loop_side(p, q, z, prm) -> 1 or 2

``z`` is always a 1-d float array (length ``dim_z``, possibly 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numba import njit

from .errors import DomainError, GeometryError

# ---------------------------------------------------------------------------
# double-well family: E = p^2/2 + q^4/4 + alpha q^3/3 - s q^2/2
# prm = (alpha, gamma, f3, s_fixed); s = z[0] when dim_z == 1 else s_fixed


@njit(cache=True, nogil=True)
def dw_energy(p, q, z, prm):
    s = z[0] if z.size > 0 else prm[3]
    q2 = q * q
    return 0.5 * p * p + 0.25 * q2 * q2 + prm[0] * q2 * q / 3.0 - 0.5 * s * q2


@njit(cache=True, nogil=True)
def dw_grad(p, q, z, prm, out):
    s = z[0] if z.size > 0 else prm[3]
    out[0] = p
    out[1] = q * q * q + prm[0] * q * q - s * q
    if z.size > 0:
        out[2] = -0.5 * q * q


@njit(cache=True, nogil=True)
def dw_perturb(p, q, z, eps, prm, out):
    out[0] = 0.0
    out[1] = -prm[1] * p
    if z.size > 0:
        out[2] = prm[2]


@njit(cache=True, nogil=True)
def dw_loop_side(p, q, z, prm):
    return 1 if q > 0.0 else 2


@dataclass(eq=False)
class SlowFastSystem:
    """Kernels plus metadata for q' = E_p + eps f1, p' = -E_q + eps f2, z' = eps f3."""

    name: str
    dim_z: int
    energy: Callable
    grad: Callable
    perturb: Callable
    loop_side: Callable
    params: np.ndarray
    domain_box: np.ndarray  # rows (lo, hi) for p, q, z...
    z_box: np.ndarray | None = None  # documented admissible z-range, rows (lo, hi)
    saddle_guess: tuple = (0.0, 0.0)
    energy_shift: Callable = field(default=lambda z: 0.0)
    normalized: bool = True
    param_names: tuple = ()

    def zvec(self, z=None) -> np.ndarray:
        if self.dim_z == 0:
            return np.empty(0)
        if z is None:
            raise ValueError(f"{self.name} needs a slow vector of length {self.dim_z}")
        zz = np.atleast_1d(np.asarray(z, dtype=float))
        if zz.size != self.dim_z:
            raise ValueError(f"expected dim_z={self.dim_z}, got {zz.size}")
        return zz

    def hamiltonian(self, p, q, z=None) -> float:
        return self.energy(float(p), float(q), self.zvec(z), self.params)

    def grad_E(self, p, q, z=None) -> np.ndarray:
        out = np.empty(2 + self.dim_z)
        self.grad(float(p), float(q), self.zvec(z), self.params, out)
        return out

    def perturbation(self, p, q, z=None, eps=0.0) -> np.ndarray:
        out = np.empty(2 + self.dim_z)
        self.perturb(float(p), float(q), self.zvec(z), float(eps), self.params, out)
        return out

    def side(self, p, q, z=None) -> int:
        return int(self.loop_side(float(p), float(q), self.zvec(z), self.params))

    def in_domain(self, state) -> bool:
        s = np.asarray(state, dtype=float)
        box = self.domain_box
        return bool(np.all(s >= box[:, 0]) and np.all(s <= box[:, 1]))

    def param(self, key: str) -> float:
        return float(self.params[self.param_names.index(key)])

    def with_params(self, **kw) -> "SlowFastSystem":
        prm = self.params.copy()
        for k, v in kw.items():
            prm[self.param_names.index(k)] = float(v)
        return replace(self, params=prm)


@dataclass(frozen=True)
class ModelPreset:
    name: str
    parameters: dict
    description: str = ""


PRESETS = {
    "dw-dissip": ModelPreset(
        "dw-dissip", {"gamma": 0.2},
        "E = p^2/2 + q^4/4 - q^2/2, f2 = -gamma p, no slow variable"),
    "dw-slow": ModelPreset(
        "dw-slow", {"gamma": 0.0, "f3": 1.0},
        "E = p^2/2 + q^4/4 - z q^2/2, f2 = -gamma p, f3 = const"),
    "dw-asym": ModelPreset(
        "dw-asym", {"alpha": 0.3, "gamma": 0.0, "f3": 1.0},
        "E = p^2/2 + q^4/4 + alpha q^3/3 - z q^2/2, f2 = -gamma p, f3 = const"),
}


def make_preset(name: str, **overrides) -> SlowFastSystem:
    """Instantiate a built-in preset; unknown names or parameters raise KeyError."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name].parameters)
    for k in overrides:
        if k not in values:
            raise KeyError(f"preset {name!r} has no parameter {k!r}")
    values.update({k: float(v) for k, v in overrides.items()})
    alpha = values.get("alpha", 0.0)
    gamma = values.get("gamma", 0.0)
    f3 = values.get("f3", 0.0)
    prm = np.array([alpha, gamma, f3, 1.0])
    names = ("alpha", "gamma", "f3", "s_fixed")
    if name == "dw-dissip":
        return SlowFastSystem(
            name=name, dim_z=0, energy=dw_energy, grad=dw_grad, perturb=dw_perturb,
            loop_side=dw_loop_side, params=prm,
            domain_box=np.array([[-10.0, 10.0], [-10.0, 10.0]]),
            param_names=names)
    return SlowFastSystem(
        name=name, dim_z=1, energy=dw_energy, grad=dw_grad, perturb=dw_perturb,
        loop_side=dw_loop_side, params=prm,
        domain_box=np.array([[-10.0, 10.0], [-10.0, 10.0], [0.05, 10.0]]),
        z_box=np.array([[0.5, 2.0]]), param_names=names)


def vector_field(system: SlowFastSystem, state, eps: float) -> np.ndarray:
    """Right-hand side of the perturbed system.

    Returned in the order (dq/dt, dp/dt, dz/dt...) =
    (dE/dp + eps f1, -dE/dq + eps f2, eps f3...).
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    s = np.asarray(state, dtype=float)
    if not system.in_domain(s):
        raise DomainError(f"state {s} outside domain box")
    p, q = s[0], s[1]
    z = s[2:] if system.dim_z else None
    g = system.grad_E(p, q, z)
    f = system.perturbation(p, q, z, eps)
    out = np.empty(2 + system.dim_z)
    out[0] = g[0] + eps * f[0]
    out[1] = -g[1] + eps * f[1]
    out[2:] = eps * f[2:]
    return out


# ---------------------------------------------------------------------------
# energy normalisation


@njit(cache=True, nogil=True)
def _pp_eval(x, breaks, coef):
    """Piecewise cubic value and derivative (scipy PPoly layout, clamped extrapolation)."""
    m = breaks.size - 1
    if x <= breaks[0]:
        j = 0
    elif x >= breaks[m]:
        j = m - 1
    else:
        lo = 0
        hi = m
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if breaks[mid] <= x:
                lo = mid
            else:
                hi = mid
        j = lo
    d = x - breaks[j]
    v = ((coef[0, j] * d + coef[1, j]) * d + coef[2, j]) * d + coef[3, j]
    dv = (3.0 * coef[0, j] * d + 2.0 * coef[1, j]) * d + coef[2, j]
    return v, dv


def _shifted_kernels(system: SlowFastSystem, breaks: np.ndarray, coef: np.ndarray):
    ek0, gk0 = system.energy, system.grad

    @njit(nogil=True)
    def energy(p, q, z, prm):
        if z.size == 0:
            return ek0(p, q, z, prm) + coef[3, 0]
        v, _ = _pp_eval(z[0], breaks, coef)
        return ek0(p, q, z, prm) + v

    @njit(nogil=True)
    def grad(p, q, z, prm, out):
        gk0(p, q, z, prm, out)
        if z.size > 0:
            _, dv = _pp_eval(z[0], breaks, coef)
            out[2] += dv

    return energy, grad


def normalize_energy(system: SlowFastSystem, z_samples=None) -> SlowFastSystem:
    """Return a copy whose energy vanishes at the saddle for every z.

    The offset is sampled at ``z_samples`` and interpolated by a cubic spline
    (a constant when dim_z == 0). Only dim_z <= 1 is supported.
    """
    from scipy.interpolate import CubicSpline

    from .geometry import locate_saddle

    if system.dim_z > 1:
        raise NotImplementedError("energy normalisation needs dim_z <= 1")
    if system.dim_z == 0:
        zs = [None]
    else:
        if z_samples is None:
            lo, hi = system.z_box[0]
            z_samples = np.linspace(lo, hi, 17)
        zs = [float(v) for v in np.atleast_1d(z_samples)]
        if len(zs) < 2:
            raise ValueError("need at least two z samples")
    guess = system.saddle_guess
    values = []
    for z in zs:
        fr = locate_saddle(system, z, guess)
        guess = tuple(fr.C)
        values.append(-system.hamiltonian(fr.C[0], fr.C[1], z))
    prev = system.energy_shift
    if system.dim_z == 0:
        breaks = np.array([0.0, 1.0])
        coef = np.zeros((4, 1))
        coef[3, 0] = values[0]
        c0 = values[0]
        shift = lambda z=None: prev(z) + c0  # noqa: E731
    else:
        order = np.argsort(zs)
        zs_a = np.asarray(zs)[order]
        vals = np.asarray(values)[order]
        if len(zs_a) >= 4:
            cs = CubicSpline(zs_a, vals, bc_type="not-a-knot")
        else:
            cs = CubicSpline(zs_a, vals, bc_type="natural")
        breaks = np.ascontiguousarray(cs.x)
        coef = np.ascontiguousarray(cs.c)
        shift = lambda z, _cs=cs: prev(z) + float(_cs(float(np.atleast_1d(z)[0])))  # noqa: E731
    energy, grad = _shifted_kernels(system, breaks, coef)
    return replace(system, energy=energy, grad=grad, energy_shift=shift, normalized=True)


# ---------------------------------------------------------------------------
# hypotheses


@dataclass
class ConditionResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class HypothesisReport:
    conditions: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def __getitem__(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)


def validate_hypotheses(system: SlowFastSystem, z_box=None, n_samples: int = 5,
                        grad_tol: float = 1e-8) -> HypothesisReport:
    """Check saddle non-degeneracy, positive fluxes and vanishing derivatives at C.

    Failures are reported, never raised.
    """
    from .geometry import locate_saddle, separatrix
    from .theta import compute_theta

    if system.dim_z == 0:
        zs = [None]
    else:
        box = np.asarray(z_box if z_box is not None else system.z_box, dtype=float)
        box = box.reshape(-1, 2)
        zs = [float(v) for v in np.linspace(box[0, 0], box[0, 1], n_samples)]
    sad_margin = math.inf
    theta_margin = math.inf
    deriv_worst = 0.0
    sad_detail = theta_detail = ""
    guess = system.saddle_guess
    for z in zs:
        try:
            fr = locate_saddle(system, z, guess)
        except GeometryError as exc:
            sad_margin = -math.inf
            sad_detail = str(exc)
            continue
        guess = tuple(fr.C)
        sad_margin = min(sad_margin, fr.omega0)
        g = system.grad_E(fr.C[0], fr.C[1], z)
        deriv_worst = max(deriv_worst, float(np.max(np.abs(g))))
        try:
            th = compute_theta(system, separatrix(system, z), z)
            m = min(th.theta1, th.theta2, th.theta3)
        except GeometryError as exc:
            m = -math.inf
            theta_detail = str(exc)
        theta_margin = min(theta_margin, m)
    conds = [
        ConditionResult("B", sad_margin > 0.0, sad_margin,
                        sad_detail or "min saddle eigenvalue omega0"),
        ConditionResult("C", theta_margin > 0.0, theta_margin,
                        theta_detail or "min separatrix flux"),
        ConditionResult("saddle-derivatives", deriv_worst <= grad_tol,
                        grad_tol - deriv_worst, "max |grad E| at the saddle"),
    ]
    return HypothesisReport(conds)
