"""Unperturbed geometry: saddle frame, separatrix loops, level orbits, actions.

Orientation conventions
-----------------------
* ``eta_axis`` is the Hessian eigenvector with positive curvature (E > 0 along
  it, the G3 side), signed so that the unperturbed flow leaving the ray C+s*eta
  enters loop 2 first. ``xi_axis`` is the flow direction there, so G3 orbits
  cross the eta ray with xi increasing.
* The angle origin is the eta ray for nu = 3 and the ray from the well bottom
  in the +p direction for nu = 1, 2.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _rk
from .errors import GeometryError, NearSeparatrixError
from .model import SlowFastSystem

ORBIT_RTOL = 1e-13
ORBIT_ATOL = 1e-15
H_MIN = 1e-10
TWO_PI = 2.0 * math.pi


@dataclass
class SaddleFrame:
    z: object
    C: np.ndarray
    omega0: float
    xi_axis: np.ndarray
    eta_axis: np.ndarray
    hessian: np.ndarray
    unstable: dict  # nu -> unit eigenvector of the flow (eigenvalue +omega0) into loop nu
    stable: dict  # nu -> unit eigenvector (eigenvalue -omega0) on loop nu's incoming branch

    @property
    def a(self) -> float:
        return 1.0 / self.omega0


@dataclass
class SeparatrixLoop:
    nu: int
    s: np.ndarray
    p: np.ndarray
    q: np.ndarray
    area: float
    arc_length: float
    flux_integral: float  # int G dt along the loop (Theta_nu = -flux_integral)
    g_integral: float
    ez_integral: np.ndarray  # int dE/dz dt (dS/dz = -ez_integral)
    end_corrections: float  # size of the analytic head/tail pieces added


@dataclass
class SeparatrixGeometry:
    z: object
    frame: SaddleFrame
    loops: tuple

    @property
    def areas(self) -> tuple:
        s1, s2 = self.loops[0].area, self.loops[1].area
        return s1, s2, s1 + s2

    @property
    def arc_lengths(self) -> tuple:
        return self.loops[0].arc_length, self.loops[1].arc_length

    def area(self, nu: int) -> float:
        return self.areas[nu - 1]

    def dS_dz(self, nu: int) -> np.ndarray:
        if nu == 3:
            return -(self.loops[0].ez_integral + self.loops[1].ez_integral)
        return -self.loops[nu - 1].ez_integral


@dataclass
class OrbitData:
    """Loop integrals over one period of the level line E = h."""

    h: float
    z: object
    nu: int
    period: float
    area: float
    flux_integral: float  # int (E_q f1 + E_p f2 + E_z f3) dt with f at eps = 0
    g_integral: float
    f3_integral: np.ndarray
    ez_integral: np.ndarray

    @property
    def action(self) -> float:
        return self.area / TWO_PI


@dataclass
class LevelOrbit:
    h: float
    z: object
    nu: int
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    period: float
    area: float


# ---------------------------------------------------------------------------
# per-system cache (single-writer insert under a lock)

_cache_lock = threading.Lock()


def _zkey(z):
    if z is None:
        return None
    return tuple(float(v) for v in np.atleast_1d(z))


def _cached(system, kind, z, build):
    store = system.__dict__.setdefault("_geom_cache", {})
    key = (kind, _zkey(z))
    val = store.get(key)
    if val is None:
        val = build()
        with _cache_lock:
            if len(store) > 4096:
                store.clear()
            store.setdefault(key, val)
            val = store[key]
    return val


# ---------------------------------------------------------------------------
# saddle


def hessian(system: SlowFastSystem, p: float, q: float, z=None, step: float = 1e-5) -> np.ndarray:
    """Hessian of E in (p, q) by central differences of the analytic gradient."""
    def central(hs):
        H = np.empty((2, 2))
        for j, (dp, dq) in enumerate(((hs, 0.0), (0.0, hs))):
            gp = system.grad_E(p + dp, q + dq, z)[:2]
            gm = system.grad_E(p - dp, q - dq, z)[:2]
            H[:, j] = (gp - gm) / (2.0 * hs)
        return H

    # one Richardson step removes the O(step^2) term
    H = (4.0 * central(0.5 * step) - central(step)) / 3.0
    return 0.5 * (H + H.T)


def locate_saddle(system: SlowFastSystem, z=None, initial_guess=None,
                  tol: float = 1e-12, max_iter: int = 60) -> SaddleFrame:
    x = np.array(initial_guess if initial_guess is not None else system.saddle_guess,
                 dtype=float)
    for _ in range(max_iter):
        g = system.grad_E(x[0], x[1], z)[:2]
        if not np.all(np.isfinite(g)):
            raise GeometryError("Newton iteration for the saddle diverged")
        H = hessian(system, x[0], x[1], z)
        try:
            dx = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise GeometryError("singular Hessian in saddle search") from exc
        x = x - dx
        if np.max(np.abs(system.grad_E(x[0], x[1], z)[:2])) <= tol and np.max(np.abs(dx)) < 1e-8:
            break
    else:
        raise GeometryError("Newton iteration for the saddle did not converge")
    res = np.max(np.abs(system.grad_E(x[0], x[1], z)[:2]))
    if res > tol:
        raise GeometryError(f"saddle residual {res:.3g} above {tol:g}")
    H = hessian(system, x[0], x[1], z)
    lam, vec = np.linalg.eigh(H)
    if not (lam[0] < 0.0 < lam[1]):
        kind = "centre" if lam[0] > 0 or lam[1] < 0 else "degenerate point"
        raise GeometryError(f"stationary point at {x} is a {kind}, not a saddle")
    omega0 = math.sqrt(-np.linalg.det(H))
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    A = J @ H
    # flow eigenvectors
    w, V = np.linalg.eig(A)
    w = w.real
    V = V.real
    iu = int(np.argmax(w))
    vu = V[:, iu] / np.linalg.norm(V[:, iu])
    vs = V[:, 1 - iu] / np.linalg.norm(V[:, 1 - iu])
    rho = 1e-3
    unstable, stable = {}, {}
    for v, store in ((vu, unstable), (vs, stable)):
        sa = system.side(*(x + rho * v), z)
        store[sa] = v
        store[3 - sa] = -v
    # principal axes
    eta = vec[:, 1].copy()
    flow_dir = A @ eta
    if system.side(*(x + rho * flow_dir / np.linalg.norm(flow_dir)), z) != 2:
        eta = -eta
        flow_dir = -flow_dir
    xi = flow_dir / np.linalg.norm(flow_dir)
    return SaddleFrame(z=z, C=x, omega0=omega0, xi_axis=xi, eta_axis=eta,
                       hessian=H, unstable=unstable, stable=stable)


def saddle_frame(system: SlowFastSystem, z=None) -> SaddleFrame:
    return _cached(system, "frame", z, lambda: locate_saddle(system, z, system.saddle_guess))


# ---------------------------------------------------------------------------
# separatrix


def _arc_ratio(system, x, z, xk):
    """Integrand/speed ratios (area, flux, g, ., dE/dz) of the arc-length flow at x."""
    out = np.empty(5 + 2 * system.dim_z)
    y = np.zeros_like(out)
    y[0], y[1] = x
    _rk.rhs_arc(0.0, y, system.energy, system.grad, system.perturb, xk, system.params,
                system.zvec(z), np.empty(0), out)
    return out


def trace_separatrix(system: SlowFastSystem, frame: SaddleFrame, nu: int, g=None,
                     r_start: float = 1e-7, r_capture: float = 1e-6,
                     rtol: float = 1e-12, atol: float = 1e-15,
                     max_arc: float = 1e3, polyline_step: float = 0.05) -> SeparatrixLoop:
    """Trace loop ``nu`` from the saddle along its unstable branch and back.

    Quadratures use arc length as the independent variable. The excluded
    pieces [C, C + r_start] and the final approach inside ``r_capture`` are
    added with the midpoint rule using the regular integrand/speed ratio.
    """
    if nu not in (1, 2):
        raise ValueError("nu must be 1 or 2")
    z = frame.z
    zz = system.zvec(z)
    xk = g if g is not None else _rk.zero_integrand
    C = frame.C
    vu = frame.unstable[nu]
    vs = frame.stable[nu]
    M = np.column_stack([vu, vs])
    minv = np.linalg.inv(M)[1]
    n = 5 + 2 * system.dim_z
    y0 = np.zeros(n)
    y0[:2] = C + r_start * vu
    ev = np.array([C[0], C[1], minv[0], minv[1], r_capture, 100.0 * r_capture, -1.0])
    status, s_end, y, rt, ry, nrec = _rk.flow(
        _rk.rhs_arc, system.energy, system.grad, system.perturb, xk, system.params, zz,
        np.empty(0), y0, 0, _rk.EV_STABLE, ev, 0.0, max_arc, rtol, atol, 1e-6,
        polyline_step, 10_000_000, True)
    if status != _rk.OK:
        raise GeometryError(f"separatrix loop {nu} did not return to the saddle (status {status})")
    head = _arc_ratio(system, C + 0.5 * r_start * vu, z, xk)
    tail_len = float(np.hypot(*(y[:2] - C)))
    tail = _arc_ratio(system, C + 0.5 * tail_len * vs, z, xk)
    total = y.copy()
    total[2:] += r_start * head[2:] + tail_len * tail[2:]
    corr = float(np.max(np.abs(r_start * head[2:5]) + np.abs(tail_len * tail[2:5])))
    s = np.concatenate([[0.0], r_start + rt[:nrec], [r_start + s_end + tail_len]])
    p = np.concatenate([[C[0]], ry[:nrec, 0], [C[0]]])
    q = np.concatenate([[C[1]], ry[:nrec, 1], [C[1]]])
    dz = system.dim_z
    return SeparatrixLoop(
        nu=nu, s=s, p=p, q=q, area=abs(float(total[2])), arc_length=float(s[-1]),
        flux_integral=float(total[3]), g_integral=float(total[4]),
        ez_integral=total[5 + dz:5 + 2 * dz].copy(), end_corrections=corr)


def separatrix(system: SlowFastSystem, z=None) -> SeparatrixGeometry:
    def build():
        fr = saddle_frame(system, z)
        return SeparatrixGeometry(z=z, frame=fr, loops=(trace_separatrix(system, fr, 1),
                                                        trace_separatrix(system, fr, 2)))
    return _cached(system, "separatrix", z, build)


def polygon_area(p: np.ndarray, q: np.ndarray) -> float:
    """Shoelace area of a closed polyline in the (q, p) plane."""
    return 0.5 * abs(float(np.dot(q, np.roll(p, -1)) - np.dot(p, np.roll(q, -1))))


# ---------------------------------------------------------------------------
# wells and reference rays


def well_bottom(system: SlowFastSystem, z, nu: int):
    """Minimum of E inside loop nu; returns (point, E_min)."""
    hints = system.__dict__.setdefault("_well_hint", {})

    def valid(x):
        H = hessian(system, x[0], x[1], z)
        emin = system.hamiltonian(x[0], x[1], z)
        return np.linalg.eigvalsh(H)[0] > 0 and system.side(x[0], x[1], z) == nu and emin < 0

    def newton(x):
        for _ in range(30):
            gr = system.grad_E(x[0], x[1], z)[:2]
            dx = np.linalg.solve(hessian(system, x[0], x[1], z), gr)
            x = x - dx
            if np.max(np.abs(dx)) < 1e-14 * (1.0 + np.max(np.abs(x))):
                break
        return x

    def build():
        from scipy.optimize import minimize
        hint = hints.get(nu)
        if hint is not None:
            # warm start from the last bottom found (z usually moves little)
            try:
                x = newton(hint)
                if np.all(np.isfinite(x)) and valid(x):
                    hints[nu] = x
                    return x, system.hamiltonian(x[0], x[1], z)
            except np.linalg.LinAlgError:
                pass
        loop = separatrix(system, z).loops[nu - 1]
        # area centroid of the loop polygon
        q, p = loop.q, loop.p
        cross = q * np.roll(p, -1) - np.roll(q, -1) * p
        a = 0.5 * cross.sum()
        cq = ((q + np.roll(q, -1)) * cross).sum() / (6 * a)
        cp = ((p + np.roll(p, -1)) * cross).sum() / (6 * a)
        res = minimize(lambda x: system.hamiltonian(x[0], x[1], z), np.array([cp, cq]),
                       jac=lambda x: system.grad_E(x[0], x[1], z)[:2], method="BFGS",
                       options={"gtol": 1e-13})
        x = newton(res.x)
        if not valid(x):
            raise GeometryError(f"could not locate the bottom of well {nu}")
        hints[nu] = x
        return x, system.hamiltonian(x[0], x[1], z)
    return _cached(system, f"well{nu}", z, build)


def _ray(system, z, nu):
    """(origin, unit direction) of the angle-origin ray for region nu."""
    if nu == 3:
        fr = saddle_frame(system, z)
        return fr.C, fr.eta_axis
    x, _ = well_bottom(system, z, nu)
    return x, np.array([1.0, 0.0])


def check_level(system, h, z, nu, h_min=H_MIN):
    if nu not in (1, 2, 3):
        raise ValueError("nu must be 1, 2 or 3")
    if nu == 3 and not h > 0:
        raise GeometryError("E > 0 in G3: level h must be positive for nu = 3")
    if nu in (1, 2):
        if not h < 0:
            raise GeometryError("E < 0 in G1, G2: level h must be negative for nu = 1, 2")
        _, emin = well_bottom(system, z, nu)
        if h <= emin:
            raise GeometryError(f"h = {h} below the bottom of well {nu} ({emin})")
    if abs(h) < h_min:
        raise NearSeparatrixError(f"|h| = {abs(h):.3g} below the floor {h_min:g}")


def ray_start(system: SlowFastSystem, h: float, z, nu: int) -> np.ndarray:
    """Point on the reference ray of region nu with E = h."""
    c, d = _ray(system, z, nu)
    zz = system.zvec(z)
    ek, prm = system.energy, system.params

    def f(s):
        return ek(c[0] + s * d[0], c[1] + s * d[1], zz, prm) - h

    s_hi = 1e-3
    while f(s_hi) < 0.0:
        s_hi *= 2.0
        if s_hi > 1e4:
            raise GeometryError(f"level {h} not reached along the reference ray")
    s = brentq(f, 0.0, s_hi, xtol=1e-16, rtol=1e-15, maxiter=200)
    x = c + s * d
    if nu in (1, 2) and system.side(x[0], x[1], z) != nu:
        raise GeometryError("reference ray left the well")
    return x


def _ray_event(system, z, nu, x0):
    c, d = _ray(system, z, nu)
    g = system.grad_E(x0[0], x0[1], z)
    pdot, qdot = -g[1], g[0]
    sigma = 1.0 if d[0] * qdot - d[1] * pdot > 0 else -1.0
    return np.array([c[0], c[1], d[0], d[1], sigma])


def _orbit_state(system, x0):
    y0 = np.zeros(5 + 2 * system.dim_z)
    y0[:2] = x0
    return y0


def orbit_integrals(system: SlowFastSystem, h: float, z=None, nu: int = 3, g=None,
                    h_min: float = H_MIN, record: bool = False):
    """One period of the level line E = h in region nu, with loop quadratures."""
    check_level(system, h, z, nu, h_min)
    x0 = ray_start(system, h, z, nu)
    ev = _ray_event(system, z, nu, x0)
    xk = g if g is not None else _rk.zero_integrand
    status, T, y, rt, ry, nrec = _rk.flow(
        _rk.rhs_orbit, system.energy, system.grad, system.perturb, xk, system.params,
        system.zvec(z), np.empty(0), _orbit_state(system, x0), 0, _rk.EV_RAY, ev, 0.0,
        1e5, ORBIT_RTOL, ORBIT_ATOL, 1e-2, 0.25 if record else 1e30, 10_000_000, record)
    if status != _rk.OK:
        raise GeometryError(f"level orbit h={h} nu={nu} did not close (status {status})")
    dz = system.dim_z
    data = OrbitData(h=h, z=z, nu=nu, period=T, area=abs(float(y[2])),
                     flux_integral=float(y[3]), g_integral=float(y[4]),
                     f3_integral=y[5:5 + dz].copy(), ez_integral=y[5 + dz:5 + 2 * dz].copy())
    if record:
        return data, rt[:nrec], ry[:nrec, :2]
    return data


def level_orbit(system: SlowFastSystem, h: float, z=None, nu: int = 3,
                h_min: float = H_MIN) -> LevelOrbit:
    data, t, pq = orbit_integrals(system, h, z, nu, h_min=h_min, record=True)
    return LevelOrbit(h=h, z=z, nu=nu, t=t, p=pq[:, 0].copy(), q=pq[:, 1].copy(),
                      period=data.period, area=data.area)


def period(system, h, z=None, nu=3, h_min=H_MIN) -> float:
    return orbit_integrals(system, h, z, nu, h_min=h_min).period


def action(system, h, z=None, nu=3, h_min=H_MIN) -> float:
    return orbit_integrals(system, h, z, nu, h_min=h_min).action


def loop_time_integral(system, g, h, z=None, nu=3, h_min=H_MIN) -> float:
    """Integral of g(p, q, z, prm) dt over the level line E = h in region nu.

    ``g`` must be a numba-compiled function. ``h = 0`` integrates along the
    separatrix (loop nu, or both loops for nu = 3) and requires g to vanish
    at the saddle.
    """
    if h == 0.0:
        fr = saddle_frame(system, z)
        if abs(g(fr.C[0], fr.C[1], system.zvec(z), system.params)) > 1e-10:
            raise GeometryError("integrand does not vanish at the saddle; "
                                "separatrix integral diverges")
        loops = (1, 2) if nu == 3 else (nu,)
        return sum(trace_separatrix(system, fr, k, g=g).g_integral for k in loops)
    return orbit_integrals(system, h, z, nu, g=g, h_min=h_min).g_integral


# ---------------------------------------------------------------------------
# period asymptotics


@dataclass
class PeriodFit:
    nu: int
    a: float
    b: float
    residual: float
    a_expected: float
    h: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)


def period_asymptotics(system, z=None, nu=3, h0: float = 1e-3, n: int = 24,
                       tol: float = 1e-4) -> PeriodFit:
    """Fit T = -A ln|h| + b + c |h| ln|h| + d |h| on a geometric ladder.

    A = a for nu = 1, 2 and 2a for nu = 3. The three smallest |h| get weight
    1/4. A fit residual above ``tol`` (relative) emits a warning.
    """
    import warnings

    sign = 1.0 if nu == 3 else -1.0
    hs = h0 * 2.0 ** -np.arange(n)
    hs = hs[hs >= H_MIN]
    Ts = np.array([period(system, sign * h, z, nu) for h in hs])
    L = np.log(hs)
    X = np.column_stack([-L, np.ones_like(L), hs * L, hs])
    w = np.ones_like(hs)
    w[-3:] = 0.25
    coef, *_ = np.linalg.lstsq(X * w[:, None], Ts * w, rcond=None)
    res = float(np.max(np.abs(X @ coef - Ts) / Ts))
    fr = saddle_frame(system, z)
    factor = 2.0 if nu == 3 else 1.0
    if res > tol:
        warnings.warn(f"period asymptotics fit residual {res:.2e} for nu={nu}", stacklevel=2)
    return PeriodFit(nu=nu, a=float(coef[0]) / factor, b=float(coef[1]), residual=res,
                     a_expected=fr.a, h=hs, T=Ts)


# ---------------------------------------------------------------------------
# action-angle variables


def region_of(system, p, q, z=None, band: float = 0.0) -> int:
    """3 for E > band, loop side for E < -band, 0 on the boundary band."""
    h = system.hamiltonian(p, q, z)
    if h > band:
        return 3
    if h < -band:
        return system.side(p, q, z)
    return 0


def to_action_angle(system, p, q, z=None, h_min: float = H_MIN):
    """Return (nu, I, phi) with phi in [0, 2pi)."""
    h = system.hamiltonian(p, q, z)
    if abs(h) < h_min:
        raise NearSeparatrixError(f"|E| = {abs(h):.3g} below the floor {h_min:g}")
    nu = 3 if h > 0 else system.side(p, q, z)
    data = orbit_integrals(system, h, z, nu, h_min=h_min)
    x0 = ray_start(system, h, z, nu)
    ev = _ray_event(system, z, nu, x0)
    status, t_f, *_ = _rk.flow(
        _rk.rhs_orbit, system.energy, system.grad, system.perturb, _rk.zero_integrand,
        system.params, system.zvec(z), np.empty(0), _orbit_state(system, (p, q)), 1,
        _rk.EV_RAY, ev, 0.0, 2.0 * data.period, ORBIT_RTOL, ORBIT_ATOL, 1e-2, 1e30,
        10_000_000, False)
    if status != _rk.OK:
        raise GeometryError("point did not reach the reference ray within one period")
    phi = TWO_PI * (1.0 - t_f / data.period)
    phi = math.fmod(phi, TWO_PI)
    if phi < 0:
        phi += TWO_PI
    return nu, data.action, phi


def energy_for_action(system, nu, I, z=None, h_min: float = H_MIN, tol: float = 1e-14):
    """Invert I(h) on region nu by safeguarded Newton (dI/dh = T/2pi)."""
    sep = separatrix(system, z)
    S = sep.area(nu)
    target = TWO_PI * I
    if nu == 3:
        if target <= S:
            raise NearSeparatrixError("action inside the separatrix for nu = 3")
        lo, hi = h_min, None
    else:
        _, emin = well_bottom(system, z, nu)
        if not 0.0 < target < S:
            raise GeometryError(f"action {I} outside the range of well {nu}")
        lo, hi = emin, -h_min

    def F(h):
        d = orbit_integrals(system, h, z, nu, h_min=h_min)
        return d.area - target, d.period

    # initial guess from the small-|h| expansion 2pi I - S ~ h T
    du = target - S
    h = du / max(abs(math.log(abs(du) + 1e-300)), 1.0)
    if nu == 3:
        if hi is None:
            hi = max(2.0 * h, 1e-3)
            while F(hi)[0] < 0:
                lo, hi = hi, 2.0 * hi
    h = min(max(h, lo + 0.01 * (hi - lo)), hi - 0.01 * (hi - lo))
    for _ in range(100):
        fv, T = F(h)
        if fv == 0.0:
            return h
        if fv > 0:
            hi = h
        else:
            lo = h
        step = fv / T
        hn = h - step
        if not lo < hn < hi:
            hn = 0.5 * (lo + hi)
        if abs(hn - h) <= tol * max(1.0, abs(h)):
            return hn
        h = hn
    raise GeometryError("action inversion did not converge")


def from_action_angle(system, nu, I, phi, z=None, h_min: float = H_MIN):
    """Point (p, q) with the given action-angle variables."""
    h = energy_for_action(system, nu, I, z, h_min)
    data = orbit_integrals(system, h, z, nu, h_min=h_min)
    x0 = ray_start(system, h, z, nu)
    t = (phi % TWO_PI) / TWO_PI * data.period
    if t <= 1e-9 * data.period:
        # one Euler step is exact to roundoff here
        g = system.grad_E(x0[0], x0[1], z)
        return np.array([x0[0] - t * g[1], x0[1] + t * g[0]])
    ev = np.zeros(5)
    status, _, y, *_ = _rk.flow(
        _rk.rhs_orbit, system.energy, system.grad, system.perturb, _rk.zero_integrand,
        system.params, system.zvec(z), np.empty(0), _orbit_state(system, x0), 2,
        _rk.EV_RAY, ev, t, 2.0 * t + 1.0, ORBIT_RTOL, ORBIT_ATOL, 1e-2, 1e30,
        10_000_000, False)
    if status != _rk.OK:
        raise GeometryError("flow to the requested angle failed")
    return y[:2].copy()
