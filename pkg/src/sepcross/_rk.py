"""Compiled DOP853 stepping and the event-driven drivers built on it.

Every right-hand side shares one calling convention so that the stepper can be
specialised by numba on the function objects it receives::

    rhs(t, y, ek, gk, fk, xk, prm, z, aux, out)

``ek``/``gk``/``fk`` are the system's energy, gradient and perturbation kernels,
``xk`` an extra integrand ``g(p, q, z, prm)``, ``prm`` the model parameters, ``z``
the frozen slow vector (unperturbed flows) and ``aux`` per-driver scalars.

Events are located by re-stepping from the start of the step that bracketed the
sign change, so located states are as accurate as an accepted step.
"""
import math

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dc

_NS = _dc.N_STAGES
_A = np.ascontiguousarray(_dc.A[:_NS, :_NS])
_B = np.ascontiguousarray(_dc.B)
_C = np.ascontiguousarray(_dc.C[:_NS])
_E3 = np.ascontiguousarray(_dc.E3)
_E5 = np.ascontiguousarray(_dc.E5)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0

# driver status codes
OK = 0
MAX_STEPS = 1
STEP_UNDERFLOW = 2
TIME_LIMIT = 3
LEFT_DOMAIN = 4

# event kinds
EV_RAY = 0
EV_ENERGY = 1
EV_STABLE = 2
EV_XI = 3


@njit(cache=True, nogil=True)
def zero_integrand(p, q, z, prm):
    return 0.0


# ---------------------------------------------------------------------------
# right-hand sides


@njit(nogil=True)
def rhs_orbit(t, y, ek, gk, fk, xk, prm, z, aux, out):
    """Unperturbed flow at frozen z with loop quadratures appended.

    Layout: p, q, int p dq, int G dt, int g dt, int f3 dt (dz), int dE/dz dt (dz).
    """
    dz = z.size
    g = np.empty(2 + dz)
    f = np.empty(2 + dz)
    p = y[0]
    q = y[1]
    gk(p, q, z, prm, g)
    fk(p, q, z, 0.0, prm, f)
    out[0] = -g[1]
    out[1] = g[0]
    out[2] = p * g[0]
    s = g[1] * f[0] + g[0] * f[1]
    for k in range(dz):
        s += g[2 + k] * f[2 + k]
    out[3] = s
    out[4] = xk(p, q, z, prm)
    for k in range(dz):
        out[5 + k] = f[2 + k]
        out[5 + dz + k] = g[2 + k]


@njit(nogil=True)
def rhs_arc(t, y, ek, gk, fk, xk, prm, z, aux, out):
    """Same flow as rhs_orbit reparametrised by arc length (dt = ds/|grad E|).

    The int f3 dt slots diverge on a separatrix and are held at zero.
    """
    dz = z.size
    g = np.empty(2 + dz)
    f = np.empty(2 + dz)
    p = y[0]
    q = y[1]
    gk(p, q, z, prm, g)
    fk(p, q, z, 0.0, prm, f)
    speed = math.sqrt(g[0] * g[0] + g[1] * g[1])
    w = 1.0 / speed
    out[0] = -g[1] * w
    out[1] = g[0] * w
    out[2] = p * g[0] * w
    s = g[1] * f[0] + g[0] * f[1]
    for k in range(dz):
        s += g[2 + k] * f[2 + k]
    out[3] = s * w
    out[4] = xk(p, q, z, prm) * w
    for k in range(dz):
        out[5 + k] = 0.0
        out[5 + dz + k] = g[2 + k] * w


@njit(nogil=True)
def rhs_full(t, y, ek, gk, fk, xk, prm, z, aux, out):
    """Perturbed system; state p, q, z..., W with dW/dt = eps*(dE/dt along the flow)."""
    dz = y.size - 3
    zz = y[2:2 + dz]
    eps = aux[0]
    g = np.empty(2 + dz)
    f = np.empty(2 + dz)
    p = y[0]
    q = y[1]
    gk(p, q, zz, prm, g)
    fk(p, q, zz, eps, prm, f)
    out[0] = -g[1] + eps * f[1]
    out[1] = g[0] + eps * f[0]
    s = g[1] * f[0] + g[0] * f[1]
    for k in range(dz):
        out[2 + k] = eps * f[2 + k]
        s += g[2 + k] * f[2 + k]
    out[2 + dz] = eps * s


# ---------------------------------------------------------------------------
# stepping


@njit(nogil=True)
def rk_step(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, h, K, ytmp, y_new):
    n = y.size
    for i in range(n):
        K[0, i] = f[i]
    for s in range(1, _NS):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += _A[s, j] * K[j, i]
            ytmp[i] = y[i] + h * acc
        rhs(t + _C[s] * h, ytmp, ek, gk, fk, xk, prm, z, aux, K[s])
    for i in range(n):
        acc = 0.0
        for j in range(_NS):
            acc += _B[j] * K[j, i]
        y_new[i] = y[i] + h * acc
    rhs(t + h, y_new, ek, gk, fk, xk, prm, z, aux, K[_NS])


@njit(cache=True, nogil=True)
def _error_norm(K, h, y, y_new, rtol, atol):
    n = y.size
    e5 = 0.0
    e3 = 0.0
    for i in range(n):
        sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
        a5 = 0.0
        a3 = 0.0
        for j in range(_NS + 1):
            a5 += K[j, i] * _E5[j]
            a3 += K[j, i] * _E3[j]
        e5 += (a5 / sc) ** 2
        e3 += (a3 / sc) ** 2
    if e5 == 0.0 and e3 == 0.0:
        return 0.0
    return abs(h) * e5 / math.sqrt((e5 + 0.01 * e3) * n)


@njit(nogil=True)
def advance(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, h, hmax, rtol, atol,
            K, ytmp, y_new):
    """Take one accepted adaptive step of signed size at most ``h``.

    Returns (h_used, h_next, status). On success y_new and K[-1] hold the new
    state and its derivative.
    """
    sgn = 1.0 if h >= 0.0 else -1.0
    ha = min(abs(h), hmax)
    rejected = False
    while True:
        hmin = 10.0 * (abs(t) + 1.0) * 2.220446049250313e-16
        if ha < hmin:
            return 0.0, 0.0, STEP_UNDERFLOW
        hs = sgn * ha
        rk_step(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, hs, K, ytmp, y_new)
        err = _error_norm(K, hs, y, y_new, rtol, atol)
        if not math.isfinite(err):
            ha *= MIN_FACTOR
            rejected = True
            continue
        if err < 1.0:
            if err == 0.0:
                fac = MAX_FACTOR
            else:
                fac = min(MAX_FACTOR, SAFETY * err ** (-1.0 / 8.0))
            if rejected:
                fac = min(1.0, fac)
            return hs, sgn * ha * fac, OK
        ha *= max(MIN_FACTOR, SAFETY * err ** (-1.0 / 8.0))
        rejected = True


# ---------------------------------------------------------------------------
# events


@njit(nogil=True)
def event_value(kind, y, zz, ek, prm, ev):
    p = y[0]
    q = y[1]
    if kind == EV_RAY:
        return ev[2] * (q - ev[1]) - ev[3] * (p - ev[0])
    if kind == EV_ENERGY:
        return ek(p, q, zz, prm) - ev[0]
    if kind == EV_STABLE:
        return ev[2] * (p - ev[0]) + ev[3] * (q - ev[1]) - ev[4]
    # EV_XI
    return ev[2] * (p - ev[0]) + ev[3] * (q - ev[1])


@njit(cache=True, nogil=True)
def _event_z(y, z, z_in_state):
    if z_in_state:
        return y[2:y.size - 1]
    return z


@njit(nogil=True)
def locate(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, h, g0, g1, kind, ev,
           z_in_state, tol_t, K, ytmp, y_ev):
    """Find theta in (0, 1] with event value zero on the step t -> t + theta*h.

    Illinois-modified regula falsi; y_ev receives the located state.
    """
    lo = 0.0
    hi = 1.0
    glo = g0
    ghi = g1
    side = 0
    theta = 1.0
    for _ in range(200):
        if ghi != glo:
            theta = (lo * ghi - hi * glo) / (ghi - glo)
        else:
            theta = 0.5 * (lo + hi)
        if not (lo < theta < hi):
            theta = 0.5 * (lo + hi)
        rk_step(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, theta * h, K, ytmp, y_ev)
        gm = event_value(kind, y_ev, _event_z(y_ev, z, z_in_state), ek, prm, ev)
        if gm == 0.0:
            return theta
        if (gm > 0.0) == (glo > 0.0):
            lo = theta
            glo = gm
            if side == -1:
                ghi *= 0.5
            side = -1
        else:
            hi = theta
            ghi = gm
            if side == 1:
                glo *= 0.5
            side = 1
        if (hi - lo) * abs(h) <= tol_t:
            break
    theta = hi
    rk_step(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, theta * h, K, ytmp, y_ev)
    return theta


# ---------------------------------------------------------------------------
# drivers


@njit(cache=True, nogil=True)
def _push(rec_t, rec_y, n, t, y):
    if n >= rec_t.size:
        cap = 2 * rec_t.size
        nt = np.empty(cap)
        ny = np.empty((cap, rec_y.shape[1]))
        nt[:n] = rec_t[:n]
        ny[:n] = rec_y[:n]
        rec_t = nt
        rec_y = ny
    rec_t[n] = t
    for i in range(rec_y.shape[1]):
        rec_y[n, i] = y[i]
    return rec_t, rec_y, n + 1


@njit(nogil=True)
def flow(rhs, ek, gk, fk, xk, prm, z, aux, y0, mode, kind, ev, t_target,
         t_max, rtol, atol, h0, hmax, max_steps, record):
    """Integrate an unperturbed (frozen z) flow until an event or a time.

    mode 0: stop at the first crossing of the event in direction ``ev[-1]``
            (+1 upward, -1 downward), ignoring the first step; the ray test
            ``dot(d, x - c) > 0`` is applied for EV_RAY.
    mode 1: as mode 0 but events are checked from the first step.
    mode 2: stop at t_target.
    Returns (status, t, y, rec_t, rec_y, nrec).
    """
    n = y0.size
    K = np.empty((_NS + 1, n))
    ytmp = np.empty(n)
    y = y0.copy()
    y_new = np.empty(n)
    y_ev = np.empty(n)
    f = np.empty(n)
    rhs(0.0, y, ek, gk, fk, xk, prm, z, aux, f)
    rec_t = np.empty(256 if record else 1)
    rec_y = np.empty((rec_t.size, n))
    nrec = 0
    if record:
        rec_t, rec_y, nrec = _push(rec_t, rec_y, nrec, 0.0, y)
    direction = ev[ev.size - 1]
    t = 0.0
    h = h0
    gprev = event_value(kind, y, z, ek, prm, ev)
    for step in range(max_steps):
        if mode == 2:
            rem = t_target - t
            if rem <= 0.0:
                return OK, t, y, rec_t, rec_y, nrec
            if h > rem:
                h = rem
        hused, hnext, st = advance(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, h,
                                   hmax, rtol, atol, K, ytmp, y_new)
        if st != OK:
            return st, t, y, rec_t, rec_y, nrec
        gnew = event_value(kind, y_new, z, ek, prm, ev)
        hit = False
        if mode != 2 and (mode == 1 or step > 0):
            if direction > 0.0:
                hit = gprev < 0.0 and gnew >= 0.0
            else:
                hit = gprev > 0.0 and gnew <= 0.0
        if hit:
            theta = locate(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, hused,
                           gprev, gnew, kind, ev, False, 1e-13 * (1.0 + abs(t)),
                           K, ytmp, y_ev)
            ok = True
            if kind == EV_RAY:
                ok = ev[2] * (y_ev[0] - ev[0]) + ev[3] * (y_ev[1] - ev[1]) > 0.0
            elif kind == EV_STABLE:
                ok = math.hypot(y_ev[0] - ev[0], y_ev[1] - ev[1]) < ev[5]
            if ok:
                t_ev = t + theta * hused
                if record:
                    rec_t, rec_y, nrec = _push(rec_t, rec_y, nrec, t_ev, y_ev)
                return OK, t_ev, y_ev, rec_t, rec_y, nrec
            # re-take the full step (locate overwrote K)
            rk_step(rhs, ek, gk, fk, xk, prm, z, aux, t, y, f, hused, K, ytmp, y_new)
        t += hused
        for i in range(n):
            y[i] = y_new[i]
            f[i] = K[_NS, i]
        gprev = gnew
        if record:
            rec_t, rec_y, nrec = _push(rec_t, rec_y, nrec, t, y)
        h = hnext
        if mode == 2 and abs(t - t_target) <= 1e-15 * (1.0 + abs(t_target)):
            return OK, t, y, rec_t, rec_y, nrec
        if t > t_max:
            return TIME_LIMIT, t, y, rec_t, rec_y, nrec
    return MAX_STEPS, t, y, rec_t, rec_y, nrec


@njit(nogil=True)
def integrate_full(rhs, ek, gk, fk, xk, prm, y0, eps, t_end, rtol, atol, h0, hmax,
                   s_cap, lo, hi, h_stop, post_time, max_steps):
    """Perturbed integration recording every accepted step.

    Stops at t_end, on leaving the box [lo, hi] (components p, q, z...), or
    ``post_time`` after the energy first drops to ``h_stop`` at a step end
    (post_time < 0 disables early stopping).
    Returns (status, rec_t, rec_y, nrec, t_detect).
    """
    n = y0.size
    dz = n - 3
    aux = np.empty(1)
    aux[0] = eps
    z_dummy = np.empty(0)
    K = np.empty((_NS + 1, n))
    ytmp = np.empty(n)
    y = y0.copy()
    y_new = np.empty(n)
    f = np.empty(n)
    rhs(0.0, y, ek, gk, fk, xk, prm, z_dummy, aux, f)
    rec_t = np.empty(4096)
    rec_y = np.empty((4096, n))
    nrec = 0
    rec_t, rec_y, nrec = _push(rec_t, rec_y, nrec, 0.0, y)
    t = 0.0
    h = h0
    t_detect = -1.0
    for _ in range(max_steps):
        rem = t_end - t
        if rem <= 1e-15 * (1.0 + abs(t_end)):
            return OK, rec_t, rec_y, nrec, t_detect
        if t_detect >= 0.0 and post_time >= 0.0 and t >= t_detect + post_time:
            return OK, rec_t, rec_y, nrec, t_detect
        speed = math.sqrt(f[0] * f[0] + f[1] * f[1])
        hm = hmax
        if speed > 0.0 and s_cap / speed < hm:
            hm = s_cap / speed
        if h > rem:
            h = rem
        hused, hnext, st = advance(rhs, ek, gk, fk, xk, prm, z_dummy, aux,
                                   t, y, f, h, hm, rtol, atol, K, ytmp, y_new)
        if st != OK:
            return st, rec_t, rec_y, nrec, t_detect
        t += hused
        for i in range(n):
            y[i] = y_new[i]
            f[i] = K[_NS, i]
        rec_t, rec_y, nrec = _push(rec_t, rec_y, nrec, t, y)
        for i in range(n - 1):
            if y[i] < lo[i] or y[i] > hi[i]:
                return LEFT_DOMAIN, rec_t, rec_y, nrec, t_detect
        if t_detect < 0.0 and ek(y[0], y[1], y[2:2 + dz], prm) <= h_stop:
            t_detect = t
        h = hnext
    return MAX_STEPS, rec_t, rec_y, nrec, t_detect


@njit(cache=True, nogil=True)
def _frame_at(ftab, zz):
    """Linear interpolation of saddle frames tabulated in z[0]."""
    out = np.empty(6)
    m = ftab.shape[0]
    if m == 1 or zz.size == 0:
        for i in range(6):
            out[i] = ftab[0, 1 + i]
        return out
    x = zz[0]
    if x <= ftab[0, 0]:
        j = 0
    elif x >= ftab[m - 1, 0]:
        j = m - 2
    else:
        j = 0
        while ftab[j + 1, 0] < x:
            j += 1
    w = (x - ftab[j, 0]) / (ftab[j + 1, 0] - ftab[j, 0])
    for i in range(6):
        out[i] = (1.0 - w) * ftab[j, 1 + i] + w * ftab[j + 1, 1 + i]
    return out


@njit(nogil=True)
def scan_full(rhs, ek, gk, fk, xk, prm, eps, rec_t, rec_y, nrec, kind, level,
              ftab, radius, first_only):
    """Locate events along a recorded perturbed trajectory.

    kind EV_ENERGY: downward crossings of E = level.
    kind EV_XI: crossings of the eta ray (xi from - to + with 0 < eta < radius),
    using the saddle frame interpolated at the step's starting z.
    Returns (times, states).
    """
    n = rec_y.shape[1]
    dz = n - 3
    aux = np.empty(1)
    aux[0] = eps
    z_dummy = np.empty(0)
    K = np.empty((_NS + 1, n))
    ytmp = np.empty(n)
    y_ev = np.empty(n)
    f = np.empty(n)
    ev = np.empty(5)
    out_t = np.empty(16)
    out_y = np.empty((16, n))
    nout = 0
    for k in range(nrec - 1):
        y = rec_y[k]
        y1 = rec_y[k + 1]
        if kind == EV_ENERGY:
            ev[0] = level
            g0 = ek(y[0], y[1], y[2:2 + dz], prm) - level
            g1 = ek(y1[0], y1[1], y1[2:2 + dz], prm) - level
            hit = g0 > 0.0 and g1 <= 0.0
        else:
            fr = _frame_at(ftab, y[2:2 + dz])
            ev[0] = fr[0]
            ev[1] = fr[1]
            ev[2] = fr[2]
            ev[3] = fr[3]
            g0 = event_value(EV_XI, y, z_dummy, ek, prm, ev)
            g1 = event_value(EV_XI, y1, z_dummy, ek, prm, ev)
            hit = g0 < 0.0 and g1 >= 0.0
            if hit:
                # cheap pre-filter on the eta coordinate at both ends
                e0 = fr[4] * (y[0] - fr[0]) + fr[5] * (y[1] - fr[1])
                e1 = fr[4] * (y1[0] - fr[0]) + fr[5] * (y1[1] - fr[1])
                if max(e0, e1) <= 0.0 or min(e0, e1) >= 2.0 * radius:
                    hit = False
        if not hit:
            continue
        t = rec_t[k]
        h = rec_t[k + 1] - t
        rhs(t, y, ek, gk, fk, xk, prm, z_dummy, aux, f)
        theta = locate(rhs, ek, gk, fk, xk, prm, z_dummy, aux, t, y, f, h,
                       g0, g1, kind, ev, True, 1e-12, K, ytmp, y_ev)
        if kind == EV_XI:
            eta = fr[4] * (y_ev[0] - fr[0]) + fr[5] * (y_ev[1] - fr[1])
            if not (0.0 < eta < radius):
                continue
        out_t, out_y, nout = _push(out_t, out_y, nout, t + theta * h, y_ev)
        if first_only:
            break
    return out_t[:nout].copy(), out_y[:nout].copy()
