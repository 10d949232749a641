"""Averaged slow dynamics on the three sheets glued along the separatrix.

Slow time tau = eps*t is used throughout, so the equations do not contain eps.
Away from the separatrix the state is (h, z). Near it the state is
(u, z) with u = 2*pi*J - S_nu(z), whose rate stays finite and tends to
-Theta_nu as h -> 0. The crossing moment is the root u = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConditionCViolation, DomainError, GeometryError, PreconditionError
from .geometry import H_MIN, TWO_PI, orbit_integrals, saddle_frame, separatrix, well_bottom
from .model import SlowFastSystem

H_NEAR = 1e-2
RTOL = 1e-9
ATOL = 1e-12


@dataclass
class AveragedState:
    nu: int
    h: float
    z: object
    J: float
    tau: float


@dataclass
class _Segment:
    kind: str  # "h" or "u"
    t0: float
    t1: float
    sol: object  # dense output of (h or u, z...)
    # u segments: knots for the local inversion u -> h
    knots: np.ndarray = None
    c_knots: np.ndarray = None
    b_knots: np.ndarray = None
    s_knots: np.ndarray = None


@dataclass
class AveragedBranch:
    """Samples (tau, h, z, J) of one branch plus dense evaluation."""

    nu: int
    tau: np.ndarray
    h: np.ndarray
    z: np.ndarray  # shape (n, dim_z)
    J: np.ndarray
    status: str
    segments: list = field(default_factory=list, repr=False)
    dim_z: int = 0

    def __call__(self, tau) -> tuple:
        """(H, Z) at slow times ``tau`` (array); nan outside the branch."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        H = np.full(tau.shape, np.nan)
        Z = np.full(tau.shape + (self.dim_z,), np.nan)
        for seg in self.segments:
            m = (tau >= seg.t0 - 1e-15) & (tau <= seg.t1 + 1e-15)
            if not np.any(m):
                continue
            y = seg.sol(np.clip(tau[m], seg.t0, seg.t1))
            Z[m] = y[1:].T
            if seg.kind == "h":
                H[m] = y[0]
            else:
                H[m] = _u_to_h_local(y[0], tau[m], seg)
        return H, Z


@dataclass
class AveragedSolution:
    pre: AveragedBranch
    crossed: bool
    tau_star: float | None
    z_star: object
    tau_star_error: float | None
    post: dict  # nu -> AveragedBranch
    eps: float | None = None

    def branch(self, nu: int) -> AveragedBranch:
        return self.post[nu]

    def evaluate(self, tau, nu: int | None = None) -> tuple:
        """(H, Z) along the glued solution; after the crossing branch ``nu`` is used."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        H, Z = self.pre(tau)
        if self.crossed and nu is not None:
            m = tau > self.tau_star
            if np.any(m):
                H2, Z2 = self.post[nu](tau[m])
                H[m] = H2
                Z[m] = Z2
        return H, Z


# ---------------------------------------------------------------------------
# right-hand sides


def _sep_data(system, z, nu):
    """(S_nu, dS_nu/dz, Theta_nu, f3 at C) from an exact trace at z."""
    sep = separatrix(system, z)
    S = sep.area(nu)
    if nu == 3:
        dS = sep.dS_dz(3)
        th = -(sep.loops[0].flux_integral + sep.loops[1].flux_integral)
    else:
        dS = sep.dS_dz(nu)
        th = -sep.loops[nu - 1].flux_integral
    fr = sep.frame
    f3c = system.perturbation(fr.C[0], fr.C[1], z, 0.0)[2:]
    return S, dS, th, f3c, fr


def _zarg(system, zvec):
    if system.dim_z == 0:
        return None
    return float(zvec[0]) if system.dim_z == 1 else np.asarray(zvec, dtype=float)


def _slope(nu, a):
    return (2.0 if nu == 3 else 1.0) * a


def averaged_rhs(system: SlowFastSystem, theta_ctx, state: AveragedState, eps: float = 1.0,
                 h_switch: float | None = None) -> tuple:
    """(dh/dtau, dz/dtau) of the averaged system (multiply by eps for d/dt).

    Outside the band |h| <= h_switch loop quadratures are used; inside it
    dh/dtau = -Theta_nu/T with T from the logarithmic period model, and at
    h = 0 the continuous extension (0, f3 at C).
    """
    z = state.z
    nu = state.nu
    S, dS, th, f3c, fr = _sep_data(system, z, nu if nu in (1, 2) else 3)
    if th <= 0.0:
        raise ConditionCViolation(f"Theta_{nu} = {th:.6g} is not positive at z = {z}")
    if h_switch is None:
        h_switch = 1e-6 * separatrix(system, z).area(3)
    h = state.h
    if h == 0.0:
        return 0.0, f3c.copy()
    if abs(h) > h_switch:
        d = orbit_integrals(system, h, z, nu)
        return d.flux_integral / d.period, d.f3_integral / d.period
    A = _slope(nu, fr.a)
    b = _band_b(system, z, nu, h_switch)
    T = -A * math.log(abs(h)) + b
    return -th / T, f3c.copy()


def _band_b(system, z, nu, h_switch):
    """Intercept of T ~ -A ln|h| + b measured by one orbit at the band edge."""
    sign = 1.0 if nu == 3 else -1.0
    d = orbit_integrals(system, sign * h_switch, z, nu)
    A = _slope(nu, saddle_frame(system, z).a)
    return d.period + A * math.log(h_switch)


def action_rate(system: SlowFastSystem, state: AveragedState, eps: float) -> float:
    """dI/dt = (eps/2pi) (int G dt - (1/T) int E_z dt . int f3 dt)."""
    if abs(state.h) < H_MIN:
        raise GeometryError("action rate is undefined on the separatrix band")
    d = orbit_integrals(system, state.h, state.z, state.nu)
    corr = float(np.dot(d.ez_integral, d.f3_integral)) / d.period if system.dim_z else 0.0
    return eps / TWO_PI * (d.flux_integral - corr)


# ---------------------------------------------------------------------------
# u <-> h


def _closed_form_h(u, c, b):
    """Solve |h| (c (1 - ln|h|) + b) = |u| for |h| (vectorised)."""
    au = np.abs(np.asarray(u, dtype=float))
    c = np.broadcast_to(c, au.shape)
    b = np.broadcast_to(b, au.shape)
    out = np.zeros_like(au)
    m = au > 0
    if not np.any(m):
        return out
    a_, c_, b_ = au[m], c[m], b[m]
    x = np.log(a_ / np.maximum(c_ * (1.0 - np.log(a_)) + b_, 1e-300))
    for _ in range(60):
        g = np.exp(x) * (c_ * (1.0 - x) + b_)
        dg = np.exp(x) * (b_ - c_ * x)
        step = (g - a_) / dg
        step = np.clip(step, -2.0, 2.0)
        x = x - step
        if np.all(np.abs(step) < 1e-15):
            break
    out[m] = np.exp(x)
    return out


def _u_to_h_local(u, tau, seg):
    c = np.interp(tau, seg.knots, seg.c_knots)
    b = np.interp(tau, seg.knots, seg.b_knots)
    return seg.s_knots * _closed_form_h(u, c, b)


class _Inverter:
    """Exact inversion of u = area(h) - S_nu(z) by safeguarded Newton on orbits."""

    def __init__(self, system, nu, h_switch):
        self.system = system
        self.nu = nu
        self.sign = 1.0 if nu == 3 else -1.0
        self.h_switch = h_switch
        self.b_last = None

    def __call__(self, u, z):
        """Return (h, orbit data or None, separatrix data)."""
        system, nu = self.system, self.nu
        S, dS, th, f3c, fr = _sep_data(system, z, nu)
        A = _slope(nu, fr.a)
        if u * self.sign < 0.0:
            # past the separatrix in the wrong direction
            return None, None, (S, dS, th, f3c, A)
        if u == 0.0:
            return 0.0, None, (S, dS, th, f3c, A)
        b = self.b_last if self.b_last is not None else _band_b(system, z, nu, self.h_switch)
        hg = float(_closed_form_h(u, A, b))
        if hg <= self.h_switch:
            b = _band_b(system, z, nu, self.h_switch)
            self.b_last = b
            hg = float(_closed_form_h(u, A, b))
            if hg <= self.h_switch:
                return self.sign * hg, None, (S, dS, th, f3c, A)
        target = S + u  # area enclosed by the level line
        lo, hi = self.h_switch, None
        if nu != 3:
            _, emin = well_bottom(system, z, nu)
            hi = abs(emin)
        x = hg  # |h|
        d = None
        for _ in range(60):
            d = orbit_integrals(system, self.sign * x, z, nu)
            r = d.area - target
            # area grows with h in every region: with |h| for nu=3, against it for wells
            dA = d.period * self.sign
            if (r > 0) == (self.sign > 0):
                hi = x if hi is None else min(hi, x)
            else:
                lo = max(lo, x)
            step = r / dA
            if abs(step) <= 1e-11 * x + 1e-14 * target / d.period or (
                    hi is not None and hi - lo <= 1e-13 * x):
                # quadratic convergence: x is already accurate to about |step|
                break
            xn = x - step
            if not (lo < xn and (hi is None or xn < hi)):
                xn = 0.5 * (lo + hi) if hi is not None else 2.0 * x
            x = xn
        else:
            raise GeometryError(f"u -> h inversion did not converge (u={u}, z={z}, x={x}, "
                                f"r={r}, lo={lo}, hi={hi})")
        self.b_last = (abs(u) / x - A * (1.0 - math.log(x)))
        return self.sign * x, d, (S, dS, th, f3c, A)


def _u_rhs(system, inv):
    dz = system.dim_z

    def rhs(tau, y):
        z = _zarg(system, y[1:])
        h, d, (S, dS, th, f3c, A) = inv(y[0], z)
        out = np.empty(1 + dz)
        if d is None:
            out[0] = -th
            out[1:] = f3c
        else:
            ez = d.ez_integral
            phi = d.f3_integral / d.period
            out[0] = d.flux_integral - float(np.dot(ez + dS, phi)) if dz else d.flux_integral
            out[1:] = phi
        return out

    return rhs


def _h_rhs(system, nu):
    def rhs(tau, y):
        z = _zarg(system, y[1:])
        d = orbit_integrals(system, y[0], z, nu)
        out = np.empty_like(y)
        out[0] = d.flux_integral / d.period
        out[1:] = d.f3_integral / d.period
        return out

    return rhs


def _z_events(system, lo_box):
    """Terminal events for z leaving the domain box."""
    evs = []
    box = system.domain_box[2:]
    for k in range(system.dim_z):
        for bound, sgn in ((box[k, 0], 1.0), (box[k, 1], -1.0)):
            def ev(tau, y, k=k, bound=bound, sgn=sgn):
                return sgn * (y[1 + k] - bound)
            ev.terminal = True
            ev.direction = -1.0
            evs.append(ev)
    return evs


# ---------------------------------------------------------------------------
# integration


class _Runner:
    def __init__(self, system, h_near, h_switch_rel, rtol, atol):
        self.system = system
        self.h_near = h_near
        self.h_switch_rel = h_switch_rel
        self.rtol = rtol
        self.atol = atol

    def h_switch(self, z):
        return self.h_switch_rel * separatrix(self.system, z).area(3)

    def h_phase(self, nu, tau0, tau1, h0, z0):
        system = self.system
        y0 = np.concatenate([[h0], np.atleast_1d(z0) if system.dim_z else []])

        def near(tau, y):
            return abs(y[0]) - self.h_near
        near.terminal = True
        near.direction = -1.0
        events = [near] + _z_events(system, None)
        if nu in (1, 2):
            def bottom(tau, y):
                _, emin = well_bottom(system, _zarg(system, y[1:]), nu)
                return y[0] - emin * (1.0 - 1e-9)
            bottom.terminal = True
            bottom.direction = -1.0
            events.append(bottom)
        sol = solve_ivp(_h_rhs(system, nu), (tau0, tau1), y0, method="DOP853",
                        rtol=self.rtol, atol=self.atol, dense_output=True, events=events)
        if sol.status == -1:
            raise GeometryError(f"averaged integration failed: {sol.message}")
        status = "end"
        if sol.status == 1:
            if sol.t_events[0].size:
                status = "near"
            elif any(e.size for e in sol.t_events[1:1 + 2 * system.dim_z]):
                status = "left-domain"
            else:
                status = "well-bottom"
        return sol, status

    def u_phase(self, nu, tau0, tau1, u0, z0, stop_at_zero):
        system = self.system
        inv = _Inverter(system, nu, self.h_switch(_zarg(system, np.atleast_1d(z0))
                                                   if system.dim_z else None))
        y0 = np.concatenate([[u0], np.atleast_1d(z0) if system.dim_z else []])
        events = []
        if stop_at_zero:
            def cross(tau, y):
                return y[0]
            cross.terminal = True
            cross.direction = -1.0 if nu == 3 else 1.0
            events.append(cross)
        else:
            def far(tau, y):
                h, _, _ = inv(y[0], _zarg(system, y[1:]))
                return abs(h) - self.h_near if h is not None else -self.h_near
            far.terminal = True
            far.direction = 1.0
            events.append(far)
        events += _z_events(system, None)
        sol = solve_ivp(_u_rhs(system, inv), (tau0, tau1), y0, method="DOP853",
                        rtol=self.rtol, atol=self.atol, dense_output=True, events=events)
        if sol.status == -1:
            raise GeometryError(f"averaged integration failed: {sol.message}")
        status = "end"
        if sol.status == 1:
            status = "event" if sol.t_events[0].size else "left-domain"
        # knots for the local inversion
        taus = np.unique(np.concatenate([sol.t, np.linspace(sol.t[0], sol.t[-1], 9)]))
        ys = sol.sol(taus)
        cs, bs = [], []
        sign = 1.0 if nu == 3 else -1.0
        for k in range(taus.size):
            z = _zarg(system, ys[1:, k])
            h, d, (S, dS, th, f3c, A) = inv(ys[0, k], z)
            if h is None:
                h = 0.0
            cs.append(A)
            if abs(h) > 0.0:
                bs.append(abs(ys[0, k]) / abs(h) - A * (1.0 - math.log(abs(h))))
            else:
                bs.append(np.nan)
        bs = np.array(bs)
        if np.all(np.isnan(bs)):
            zc = _zarg(system, ys[1:, 0])
            bs[:] = _band_b(system, zc, nu, inv.h_switch)
        else:
            good = ~np.isnan(bs)
            bs = np.interp(taus, taus[good], bs[good])
        seg = _Segment("u", float(sol.t[0]), float(sol.t[-1]), sol.sol, knots=taus,
                       c_knots=np.array(cs), b_knots=bs, s_knots=sign)
        return sol, status, inv, seg


def _branch_from(system, nu, segments, status):
    taus = []
    for seg in segments:
        tt = np.linspace(seg.t0, seg.t1, 41) if seg.t1 > seg.t0 else np.array([seg.t0])
        taus.append(tt)
    br = AveragedBranch(nu=nu, tau=np.array([]), h=np.array([]), z=np.empty((0, system.dim_z)),
                        J=np.array([]), status=status, segments=segments, dim_z=system.dim_z)
    if not segments:
        return br
    tau = np.unique(np.concatenate(taus))
    H, Z = br(tau)
    J = np.empty_like(H)
    for k in range(tau.size):
        z = _zarg(system, Z[k]) if system.dim_z else None
        if abs(H[k]) >= H_MIN:
            J[k] = orbit_integrals(system, H[k], z, nu).action
        else:
            seg = next(s for s in segments if s.t0 - 1e-15 <= tau[k] <= s.t1 + 1e-15)
            u = float(seg.sol(tau[k])[0])
            J[k] = (u + separatrix(system, z).area(nu)) / TWO_PI
    br.tau, br.h, br.z, br.J = tau, H, Z, J
    return br


def integrate_averaged(system: SlowFastSystem, theta_ctx, initial, tau_span, eps=None,
                       nu0: int | None = None, h_near: float = H_NEAR,
                       h_switch_rel: float = 1e-6, rtol: float = RTOL, atol: float = ATOL,
                       estimate_error: bool = True) -> AveragedSolution:
    """Integrate the averaged system from (h0, z0) and glue across the separatrix.

    For h0 > 0 the solution runs in G3 until u = 2 pi J - S3 reaches zero at
    (tau_star, z_star); both well branches are then started from h = 0 with
    J = S_nu(z_star)/2pi. For h0 < 0, ``nu0`` selects the well and the
    solution is followed forward in that well only. ``theta_ctx`` may be None;
    separatrix data are computed exactly at each z.
    """
    h0, z0 = initial
    tau0, tau1 = (float(tau_span[0]), float(tau_span[1]))
    if system.dim_z:
        z0 = np.atleast_1d(np.asarray(z0, dtype=float))
        if not system.in_domain(np.concatenate([[0.0, 0.0], z0])):
            raise DomainError(f"z0 = {z0} outside the domain box")
    else:
        z0 = np.empty(0)
    zarg0 = _zarg(system, z0)
    if h0 > 0:
        nu = 3
    elif h0 < 0:
        if nu0 not in (1, 2):
            raise PreconditionError("a negative h0 needs nu0 = 1 or 2")
        nu = nu0
    else:
        raise GeometryError("h0 = 0 lies on the separatrix")
    S, dS, th, f3c, fr = _sep_data(system, zarg0, nu)
    if th <= 0:
        raise ConditionCViolation(f"Theta_{nu} = {th:.6g} is not positive at z0")
    run = _Runner(system, h_near, h_switch_rel, rtol, atol)

    def pre_run(r):
        segs = []
        tau = tau0
        h, z = h0, z0
        status = "end"
        if abs(h) > h_near:
            sol, status = r.h_phase(nu, tau, tau1, h, z)
            segs.append(_Segment("h", float(sol.t[0]), float(sol.t[-1]), sol.sol))
            tau = float(sol.t[-1])
            h, z = float(sol.y[0, -1]), sol.y[1:, -1]
            if status != "near":
                return segs, status, None, None
        d = orbit_integrals(system, h, _zarg(system, z), nu)
        u0 = d.area - separatrix(system, _zarg(system, z)).area(nu)
        sol, st, inv, seg = r.u_phase(nu, tau, tau1, u0, z, stop_at_zero=True)
        segs.append(seg)
        if st == "event":
            return segs, "crossed", float(sol.t_events[0][0]), sol.y_events[0][0][1:]
        return segs, st, None, None

    segs, status, tau_star, z_star = pre_run(run)
    pre = _branch_from(system, nu, segs, status)
    if tau_star is None:
        return AveragedSolution(pre=pre, crossed=False, tau_star=None, z_star=None,
                                tau_star_error=None, post={}, eps=eps)
    if nu != 3:
        # crossing out of a well into G3 is outside the single-crossing setting
        return AveragedSolution(pre=pre, crossed=True, tau_star=tau_star,
                                z_star=_zarg(system, z_star), tau_star_error=None,
                                post={}, eps=eps)
    err = None
    if estimate_error:
        loose = _Runner(system, h_near, h_switch_rel, 10.0 * rtol, 10.0 * atol)
        _, _, ts2, _ = pre_run(loose)
        err = abs(ts2 - tau_star) if ts2 is not None else math.inf
    post = {}
    for k in (1, 2):
        segs_k = []
        st = "end"
        if tau_star < tau1:
            sol, st, inv, seg = run.u_phase(k, tau_star, tau1, 0.0, z_star, stop_at_zero=False)
            segs_k.append(seg)
            if st == "event":
                tau_k = float(sol.t_events[0][0])
                yk = sol.y_events[0][0]
                hk, _, _ = inv(yk[0], _zarg(system, yk[1:]))
                sol2, st = run.h_phase(k, tau_k, tau1, hk, yk[1:])
                segs_k.append(_Segment("h", float(sol2.t[0]), float(sol2.t[-1]), sol2.sol))
        post[k] = _branch_from(system, k, segs_k, st)
    return AveragedSolution(pre=pre, crossed=True, tau_star=tau_star,
                            z_star=_zarg(system, z_star), tau_star_error=err, post=post,
                            eps=eps)


def averaged_distance_check(sol_a: AveragedSolution, sol_b: AveragedSolution, delta: float,
                            nu: int = 1, delta_max: float = 0.1, n: int = 400) -> dict:
    """Fit sup D / (delta + delta |ln delta| / (1 + |ln|H||)) for two nearby solutions.

    D(tau) = |H_a - H_b| + |Z_a - Z_b| over the common time range, with
    branch ``nu`` after the crossings.
    """
    if not 0.0 < delta <= delta_max:
        raise PreconditionError(f"proximity parameter delta = {delta} outside (0, {delta_max}]")
    def end(s):
        if s.crossed and nu in s.post and s.post[nu].tau.size:
            return s.post[nu].tau[-1]
        return s.pre.tau[-1]

    t0 = max(sol_a.pre.tau[0], sol_b.pre.tau[0])
    t1 = min(end(sol_a), end(sol_b))
    Ha, Za = sol_a.evaluate([t0], nu)
    Hb, Zb = sol_b.evaluate([t0], nu)
    gap0 = float(abs(Ha[0] - Hb[0]) + np.sum(np.abs(Za[0] - Zb[0])))
    if not gap0 < delta:
        raise PreconditionError(f"initial gap {gap0:.3g} is not below delta = {delta}")
    tau = np.linspace(t0, t1, n)
    Ha, Za = sol_a.evaluate(tau, nu)
    Hb, Zb = sol_b.evaluate(tau, nu)
    D = np.abs(Ha - Hb) + np.sum(np.abs(Za - Zb), axis=-1)
    Hm = np.maximum(np.abs(Ha), 1e-300)
    shape = delta + delta * abs(math.log(delta)) / (1.0 + np.abs(np.log(Hm)))
    ok = np.isfinite(D)
    ratio = D[ok] / shape[ok]
    return {"delta": delta, "initial_gap": gap0, "max_separation": float(np.max(D[ok])),
            "constant": float(np.max(ratio)) if ratio.size else 0.0,
            "tau": tau, "separation": D}
