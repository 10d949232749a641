"""Full perturbed integration, section events and capture classification."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _rk
from .errors import DomainError, IntegrationError, PreconditionError
from .geometry import H_MIN, SaddleFrame, orbit_integrals
from .model import SlowFastSystem

BOUNDARY = 0
KAPPA = 20.0
RTOL = 1e-10
ATOL = 1e-12
ARC_CAP = 0.1


@njit(nogil=True)
def _energies(ek, prm, Y, dz):
    n = Y.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = ek(Y[i, 0], Y[i, 1], Y[i, 2:2 + dz], prm)
    return out


@njit(nogil=True)
def _sides(lk, prm, Y, dz):
    n = Y.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = lk(Y[i, 0], Y[i, 1], Y[i, 2:2 + dz], prm)
    return out


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # columns p, q, z...
    h: np.ndarray
    work: np.ndarray  # eps * int (E_q f1 + E_p f2 + E_z f3) dt along the path
    eps: float
    status: str
    system: SlowFastSystem = field(repr=False)
    band: float = 1e-12

    @property
    def p(self):
        return self.states[:, 0]

    @property
    def q(self):
        return self.states[:, 1]

    @property
    def z(self):
        return self.states[:, 2:]

    @property
    def nu(self) -> np.ndarray:
        dz = self.system.dim_z
        side = _sides(self.system.loop_side, self.system.params,
                      np.ascontiguousarray(self.states), dz)
        out = np.where(self.h > self.band, 3, side)
        out[np.abs(self.h) <= self.band] = BOUNDARY
        return out

    def action(self, h_min: float = H_MIN) -> np.ndarray:
        """I(h, z, nu) per sample; nan where |h| <= h_min."""
        nus = self.nu
        out = np.full(self.t.shape, np.nan)
        for i in range(self.t.size):
            if abs(self.h[i]) > h_min and nus[i] != BOUNDARY:
                z = self.z[i, 0] if self.system.dim_z == 1 else (
                    self.z[i] if self.system.dim_z else None)
                out[i] = orbit_integrals(self.system, self.h[i], z, int(nus[i])).action
        return out


@dataclass
class CaptureRecord:
    complete: bool
    destination: int | None
    t_minus: float | None
    t_plus: float | None
    h_prime: float | None
    z_prime: object
    t_prime: float | None
    predicted: int | None = None
    agreement: bool | None = None
    margin: float | None = None  # distance of h' to the nearest interval endpoint
    excluded: bool = False  # h' inside the endpoint margin


_STATUS = {_rk.OK: "ok", _rk.MAX_STEPS: "max-steps", _rk.STEP_UNDERFLOW: "step-underflow",
           _rk.TIME_LIMIT: "time-limit", _rk.LEFT_DOMAIN: "left-domain"}


def integrate_full(system: SlowFastSystem, initial, eps: float, t_span, rtol: float = RTOL,
                   atol: float = ATOL, arc_cap: float = ARC_CAP, h_stop: float | None = None,
                   post_time: float = 0.0, max_steps: int = 50_000_000,
                   raise_on_failure: bool = True) -> Trajectory:
    """Integrate the perturbed system from (p0, q0, z0...) over t_span = (0, t_end).

    Every accepted step is recorded. Steps are capped in arc length so the
    slow passage near the saddle is resolved. With ``h_stop`` the run ends
    ``post_time`` after the energy first falls to h_stop.
    """
    y0 = np.zeros(3 + system.dim_z)
    init = np.asarray(initial, dtype=float)
    if init.size != 2 + system.dim_z:
        raise ValueError(f"initial state needs {2 + system.dim_z} components")
    if not system.in_domain(init):
        raise DomainError(f"initial state {init} outside the domain box")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    y0[:-1] = init
    t0, t1 = (0.0, float(t_span)) if np.isscalar(t_span) else map(float, t_span)
    box = system.domain_box
    lo = np.ascontiguousarray(box[:, 0])
    hi = np.ascontiguousarray(box[:, 1])
    status, rt, ry, n, _ = _rk.integrate_full(
        _rk.rhs_full, system.energy, system.grad, system.perturb, _rk.zero_integrand,
        system.params, y0,
        float(eps), t1 - t0, rtol, atol, 0.05, 1e30, arc_cap, lo, hi,
        -math.inf if h_stop is None else float(h_stop),
        -1.0 if h_stop is None else float(post_time), max_steps)
    states = ry[:n, :-1].copy()
    traj = Trajectory(t=rt[:n] + t0, states=states,
                      h=_energies(system.energy, system.params, np.ascontiguousarray(states),
                                  system.dim_z),
                      work=ry[:n, -1].copy(), eps=float(eps), status=_STATUS[status],
                      system=system)
    if status != _rk.OK and raise_on_failure:
        if status == _rk.LEFT_DOMAIN:
            raise DomainError(f"trajectory left the domain box at t = {traj.t[-1]:.6g}")
        raise IntegrationError(f"integration stopped: {traj.status} at t = {traj.t[-1]:.6g}",
                               state=states[-1].copy())
    return traj


def detect_region(system: SlowFastSystem, p, q, z=None, band: float = 1e-12) -> int:
    """3 above the band, the loop side below it, BOUNDARY (0) inside it."""
    h = system.hamiltonian(p, q, z)
    if h > band:
        return 3
    if h < -band:
        return system.side(p, q, z)
    return BOUNDARY


def _frame_table(source) -> np.ndarray:
    if isinstance(source, SaddleFrame):
        z0 = 0.0 if source.z is None else float(np.atleast_1d(source.z)[0])
        return np.array([[z0, *source.C, *source.xi_axis, *source.eta_axis]])
    return source.frame_table()


def _section_radius(source, radius):
    if radius is not None:
        return float(radius)
    if isinstance(source, SaddleFrame):
        raise ValueError("give a radius when passing a single saddle frame")
    return 0.5 * source.separatrix_scale()


def eta_section_events(trajectory: Trajectory, source, radius: float | None = None,
                       t_max: float | None = None) -> list:
    """Crossings of the eta ray (xi from - to +, 0 < eta < radius) as (t, h, z).

    ``source`` is a SaddleFrame (frozen z) or a ThetaContext, whose frame table
    is interpolated in z.
    """
    sys_ = trajectory.system
    n = trajectory.t.size
    if t_max is not None:
        n = int(np.searchsorted(trajectory.t, t_max, side="right"))
    if n < 2:
        return []
    rec_y = np.empty((n, trajectory.states.shape[1] + 1))
    rec_y[:, :-1] = trajectory.states[:n]
    rec_y[:, -1] = trajectory.work[:n]
    ftab = _frame_table(source)
    ts, ys = _rk.scan_full(_rk.rhs_full, sys_.energy, sys_.grad, sys_.perturb,
                           _rk.zero_integrand,
                           sys_.params, trajectory.eps, trajectory.t[:n].copy(), rec_y, n,
                           _rk.EV_XI, 0.0, ftab, _section_radius(source, radius), False)
    dz = sys_.dim_z
    hs = _energies(sys_.energy, sys_.params, np.ascontiguousarray(ys[:, :-1]), dz)
    return [(float(ts[i]), float(hs[i]), ys[i, 2:2 + dz].copy()) for i in range(ts.size)]


def _first_below(trajectory: Trajectory, level: float):
    sys_ = trajectory.system
    idx = np.nonzero(trajectory.h <= level)[0]
    if idx.size == 0:
        return None, None
    k = int(idx[0])
    if k == 0:
        return float(trajectory.t[0]), trajectory.states[0].copy()
    rec_y = np.empty((2, trajectory.states.shape[1] + 1))
    rec_y[:, :-1] = trajectory.states[k - 1:k + 1]
    rec_y[:, -1] = trajectory.work[k - 1:k + 1]
    ts, ys = _rk.scan_full(_rk.rhs_full, sys_.energy, sys_.grad, sys_.perturb,
                           _rk.zero_integrand,
                           sys_.params, trajectory.eps, trajectory.t[k - 1:k + 1].copy(),
                           rec_y, 2, _rk.EV_ENERGY, level, np.zeros((1, 7)), 0.0, True)
    if ts.size == 0:
        return float(trajectory.t[k]), trajectory.states[k].copy()
    return float(ts[0]), ys[0, :-1].copy()


def predict_capture_pseudo(theta_ctx, h_prime: float, z_prime, eps: float) -> int:
    """Destination from the energy h' at the last eta-ray crossing.

    (0, eps Theta2) -> 2, (eps Theta2, eps Theta3) -> 1, above -> 3 (another round).
    """
    if not h_prime > 0.0:
        raise PreconditionError("h' must be positive (still above the separatrix)")
    th1, th2, th3 = theta_ctx.thetas(z_prime)
    if h_prime < eps * th2:
        return 2
    if h_prime < eps * th3:
        return 1
    return 3


def pseudo_margin(theta_ctx, h_prime: float, z_prime, eps: float) -> float:
    """Distance from h' to the nearest endpoint of the prediction intervals."""
    th1, th2, th3 = theta_ctx.thetas(z_prime)
    return float(min(abs(h_prime), abs(h_prime - eps * th2), abs(h_prime - eps * th3)))


def classify_capture(trajectory: Trajectory, bands=(KAPPA, KAPPA), theta_ctx=None,
                     radius: float | None = None, margin_factor: float = 5.0) -> CaptureRecord:
    """Band-entry times, destination and the pseudo-crossing prediction.

    bands = (kappa_minus, kappa_plus): t_minus is the first time h <= kappa_plus*eps,
    t_plus the first time h <= -kappa_minus*eps. With ``theta_ctx`` the h' of the
    last eta-ray crossing before t_plus is classified and compared.
    """
    k_minus, k_plus = bands
    eps = trajectory.eps
    sys_ = trajectory.system
    t_minus, _ = _first_below(trajectory, k_plus * eps)
    t_plus, s_plus = _first_below(trajectory, -k_minus * eps)
    if t_minus is None or t_plus is None:
        return CaptureRecord(False, None, t_minus, t_plus, None, None, None)
    dz = sys_.dim_z
    zp = s_plus[2:2 + dz]
    dest = sys_.side(s_plus[0], s_plus[1], (zp[0] if dz == 1 else zp) if dz else None)
    rec = CaptureRecord(True, dest, t_minus, t_plus, None, None, None)
    if theta_ctx is None:
        return rec
    evs = eta_section_events(trajectory, theta_ctx, radius, t_max=t_plus)
    if not evs:
        rec.complete = False
        return rec
    t_p, h_p, z_p = evs[-1]
    zarg = (z_p[0] if dz == 1 else z_p) if dz else None
    rec.t_prime, rec.h_prime, rec.z_prime = t_p, h_p, zarg
    if h_p <= 0.0:
        rec.excluded = True
        rec.margin = 0.0
        return rec
    rec.predicted = predict_capture_pseudo(theta_ctx, h_p, zarg, eps)
    rec.agreement = rec.predicted == dest
    rec.margin = pseudo_margin(theta_ctx, h_p, zarg, eps)
    rec.excluded = rec.margin < margin_factor * eps ** 1.5 * theta_ctx.theta(zarg, 3)
    return rec


@dataclass
class ErrorMetrics:
    pre: float
    post: float
    post_raw: float
    n_pre: int
    n_post: int


def compare_to_averaged(trajectory: Trajectory, averaged, nu: int | None,
                        band_factor: float = KAPPA) -> ErrorMetrics:
    """Deviation of (h, z) from the averaged solution.

    pre: sup |h - H| + |z - Z| for eps*t <= tau_star (or the whole run without a
    crossing). post: sup of the same deviation times (1 + |ln|H_nu||) for
    eps*t >= tau_star where |H_nu| >= band_factor*eps; post_raw is the
    unweighted sup there.
    """
    eps = trajectory.eps
    if nu is not None and averaged.crossed and nu not in averaged.post:
        raise PreconditionError(f"averaged solution has no branch {nu}")
    tau = trajectory.t * eps if eps > 0 else np.zeros_like(trajectory.t)
    H, Z = averaged.evaluate(tau, nu)
    dev = np.abs(trajectory.h - H)
    if trajectory.system.dim_z:
        dev = dev + np.sum(np.abs(trajectory.z - Z), axis=1)
    ok = np.isfinite(dev)
    if averaged.crossed:
        pre_m = ok & (tau <= averaged.tau_star)
        post_m = ok & (tau >= averaged.tau_star) & (np.abs(H) >= band_factor * eps)
    else:
        pre_m = ok
        post_m = np.zeros_like(ok)
    pre = float(np.max(dev[pre_m])) if np.any(pre_m) else math.nan
    if np.any(post_m):
        w = 1.0 + np.abs(np.log(np.abs(H[post_m])))
        post = float(np.max(dev[post_m] * w))
        post_raw = float(np.max(dev[post_m]))
    else:
        post = post_raw = math.nan
    return ErrorMetrics(pre=pre, post=post, post_raw=post_raw, n_pre=int(pre_m.sum()),
                        n_post=int(post_m.sum()))


def destination_of(trajectory: Trajectory, kappa_minus: float = KAPPA) -> int | None:
    """Region of the first point below -kappa_minus*eps, or None."""
    rec_t, s = _first_below(trajectory, -kappa_minus * trajectory.eps)
    if rec_t is None:
        return None
    dz = trajectory.system.dim_z
    zp = s[2:2 + dz]
    return trajectory.system.side(s[0], s[1], (zp[0] if dz == 1 else zp) if dz else None)


__all__ = ["BOUNDARY", "Trajectory", "CaptureRecord", "ErrorMetrics", "integrate_full",
           "detect_region", "eta_section_events", "classify_capture", "predict_capture_pseudo",
           "pseudo_margin", "compare_to_averaged", "destination_of"]
