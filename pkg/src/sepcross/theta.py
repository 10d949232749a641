"""Separatrix fluxes Theta_nu(z) and capture probabilities."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConditionCViolation, PreconditionError
from .geometry import saddle_frame, separatrix, trace_separatrix
from .model import SlowFastSystem


@dataclass
class ThetaValues:
    z: object
    theta1: float
    theta2: float
    theta3: float
    estimated_quadrature_error: float

    def as_tuple(self) -> tuple:
        return self.theta1, self.theta2, self.theta3

    def __getitem__(self, nu: int) -> float:
        return self.as_tuple()[nu - 1]


@dataclass
class CaptureProbabilities:
    z: object
    P1: float
    P2: float


def _check_regular(system: SlowFastSystem, z, tol: float = 1e-8) -> None:
    if not system.normalized:
        raise PreconditionError("energy is not normalised; call normalize_energy first")
    fr = saddle_frame(system, z)
    e0 = system.hamiltonian(fr.C[0], fr.C[1], z)
    g = system.grad_E(fr.C[0], fr.C[1], z)
    if abs(e0) > 1e-10 or np.max(np.abs(g), initial=0.0) > tol:
        raise PreconditionError(
            f"E or its derivatives do not vanish at the saddle (E={e0:.3g}, "
            f"max|grad|={np.max(np.abs(g)):.3g}); the flux integrand is singular")


def compute_theta(system: SlowFastSystem, sep=None, z=None, r_start: float = 1e-7,
                  r_capture: float = 1e-6) -> ThetaValues:
    """Fluxes through both separatrix loops.

    The loop integral of -(E_q f1 + E_p f2 + E_z f3) dt is taken in arc length
    with the regular integrand/speed ratio; the error estimate combines a
    tolerance-refinement difference and the change of the two end pieces under
    halving of their length.
    """
    _check_regular(system, z)
    if sep is None or r_start != 1e-7 or r_capture != 1e-6:
        fr = saddle_frame(system, z)
        loops = tuple(trace_separatrix(system, fr, nu, r_start=r_start, r_capture=r_capture)
                      for nu in (1, 2))
    else:
        fr = sep.frame
        loops = sep.loops
    th = [-lp.flux_integral for lp in loops]
    err = 0.0
    for nu, lp in zip((1, 2), loops):
        coarse = trace_separatrix(system, fr, nu, r_start=r_start, r_capture=r_capture,
                                  rtol=1e-10)
        half = trace_separatrix(system, fr, nu, r_start=0.5 * r_start,
                                r_capture=0.5 * r_capture)
        err += abs(coarse.flux_integral - lp.flux_integral)
        err += abs(half.flux_integral - lp.flux_integral)
    err += 4.0 * np.finfo(float).eps * (abs(th[0]) + abs(th[1]) + 1.0)
    return ThetaValues(z=z, theta1=th[0], theta2=th[1], theta3=th[0] + th[1],
                       estimated_quadrature_error=err)


def capture_probability(theta: ThetaValues) -> CaptureProbabilities:
    if not theta.theta3 > 0.0:
        raise ConditionCViolation(f"Theta3 = {theta.theta3:.6g} is not positive")
    p1 = theta.theta1 / theta.theta3
    return CaptureProbabilities(z=theta.z, P1=p1, P2=1.0 - p1)


class ThetaContext:
    """Separatrix data tabulated on a z-grid with cubic interpolation.

    Holds Theta_nu, the loop areas S_nu and their z-derivatives, f3 at the
    saddle, the saddle point and 1/omega0. For dim_z == 0 all of these are
    constants.
    """

    def __init__(self, system: SlowFastSystem, z_range=None, n_grid: int = 65):
        self.system = system
        self.dim_z = system.dim_z
        if system.dim_z > 1:
            raise NotImplementedError("tabulation needs dim_z <= 1")
        if system.dim_z == 0:
            zs = [None]
        else:
            lo, hi = (z_range if z_range is not None else system.z_box[0])
            zs = list(np.linspace(float(lo), float(hi), n_grid))
        rows = []
        for z in zs:
            _check_regular(system, z)
            sep = separatrix(system, z)
            fr = sep.frame
            f3c = system.perturbation(fr.C[0], fr.C[1], z, 0.0)[2:]
            th1 = -sep.loops[0].flux_integral
            th2 = -sep.loops[1].flux_integral
            rows.append([th1, th2, sep.loops[0].area, sep.loops[1].area,
                         float(sep.dS_dz(1)[0]) if self.dim_z else 0.0,
                         float(sep.dS_dz(2)[0]) if self.dim_z else 0.0,
                         float(f3c[0]) if self.dim_z else 0.0,
                         fr.C[0], fr.C[1], fr.a])
        tab = np.array(rows)
        if np.any(tab[:, 0] <= 0.0) or np.any(tab[:, 1] <= 0.0):
            bad = zs[int(np.argmin(np.minimum(tab[:, 0], tab[:, 1])))]
            raise ConditionCViolation(f"a separatrix flux is not positive at z = {bad}")
        self.table = tab
        if self.dim_z:
            self.z_grid = np.array(zs)
            self.z_range = (self.z_grid[0], self.z_grid[-1])
            self._spl = CubicSpline(self.z_grid, tab, axis=0)
        else:
            self.z_grid = None
            self.z_range = None
            self._spl = None

    def _row(self, z) -> np.ndarray:
        if self._spl is None:
            return self.table[0]
        x = float(np.atleast_1d(z)[0])
        lo, hi = self.z_range
        if not lo - 1e-12 <= x <= hi + 1e-12:
            raise ConditionCViolation(f"z = {x} outside the tabulated range [{lo}, {hi}]")
        return self._spl(x)

    def theta(self, z, nu: int) -> float:
        r = self._row(z)
        return float(r[0] + r[1]) if nu == 3 else float(r[nu - 1])

    def thetas(self, z) -> tuple:
        r = self._row(z)
        return float(r[0]), float(r[1]), float(r[0] + r[1])

    def area(self, z, nu: int) -> float:
        r = self._row(z)
        return float(r[2] + r[3]) if nu == 3 else float(r[1 + nu])

    def dS_dz(self, z, nu: int) -> float:
        r = self._row(z)
        return float(r[4] + r[5]) if nu == 3 else float(r[3 + nu])

    def f3_saddle(self, z) -> float:
        return float(self._row(z)[6])

    def saddle(self, z) -> np.ndarray:
        r = self._row(z)
        return np.array([r[7], r[8]])

    def a(self, z) -> float:
        return float(self._row(z)[9])

    def probabilities(self, z) -> CaptureProbabilities:
        th1, th2, th3 = self.thetas(z)
        if not th3 > 0.0:
            raise ConditionCViolation(f"Theta3 = {th3:.6g} is not positive")
        return CaptureProbabilities(z=z, P1=th1 / th3, P2=1.0 - th1 / th3)

    def frame_table(self) -> np.ndarray:
        """Rows (z, Cp, Cq, xi_p, xi_q, eta_p, eta_q) for section-event scans."""
        zs = [None] if self.z_grid is None else list(self.z_grid)
        rows = []
        for z in zs:
            fr = saddle_frame(self.system, z)
            rows.append([0.0 if z is None else z, fr.C[0], fr.C[1], *fr.xi_axis, *fr.eta_axis])
        return np.array(rows)

    def separatrix_scale(self) -> float:
        """Smallest loop diameter over the grid (for section radii)."""
        if getattr(self, "_scale", None) is not None:
            return self._scale
        zs = [None] if self.z_grid is None else list(self.z_grid)
        dmin = math.inf
        for z in zs:
            for lp in separatrix(self.system, z).loops:
                pts = np.column_stack([lp.p, lp.q])[:: max(1, lp.p.size // 400)]
                d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)).max()
                dmin = min(dmin, float(d))
        self._scale = dmin
        return dmin
