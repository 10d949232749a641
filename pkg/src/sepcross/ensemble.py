"""Monte Carlo capture ensembles, error-scaling sweeps and the eps-sweep diagnostic."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .averaged import integrate_averaged
from .errors import PreconditionError, SepcrossError
from .geometry import TWO_PI, from_action_angle, separatrix, to_action_angle
from .perturbed import KAPPA, classify_capture, compare_to_averaged, integrate_full
from .theta import ThetaContext


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for sample ``index``; independent of worker count."""
    return np.random.Generator(np.random.Philox(key=(int(index) << 64) | (int(seed) & (2**64 - 1))))


@dataclass
class EnsembleSpec:
    base_point: tuple  # (p0, q0, z0...)
    delta: float
    eps: object  # float or sequence
    N: int
    seed: int = 0
    tau_max: float = 2.0  # slow-time horizon eps*t
    kappa: tuple = (KAPPA, KAPPA)  # (kappa_minus, kappa_plus)
    rtol: float = 1e-10
    atol: float = 1e-12
    margin_factor: float = 5.0
    post_tau: float = 0.2  # slow time followed past t_plus when errors are measured
    check_smallness: bool = True

    @property
    def eps_list(self) -> list:
        return [float(e) for e in np.atleast_1d(self.eps)]

    def validate(self) -> None:
        if not self.N >= 0 or int(self.N) != self.N:
            raise ValueError("N must be a non-negative integer")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.tau_max > 0:
            raise ValueError("tau_max must be positive")
        for e in self.eps_list:
            if not e > 0:
                raise ValueError("eps values must be positive")
            if self.check_smallness and not e < self.delta ** 2:
                raise ValueError(f"eps = {e} violates eps < delta^2 = {self.delta ** 2}")
        if min(self.kappa) <= 0 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("band multipliers and tolerances must be positive")


@dataclass
class SampleSet:
    zIphi: np.ndarray  # (N, 3) sampled (z, I, phi); z column absent values are nan
    points: np.ndarray  # (N, 2 + dim_z) initial states
    center: tuple  # (z0, I0, phi0)


@dataclass
class TrajectorySummary:
    id: int
    destination: int | None
    t_minus: float | None
    t_plus: float | None
    h_prime: float | None
    predicted: int | None
    pre_err: float | None
    post_err: float | None
    excluded: bool = False
    agreement: bool | None = None
    failure: str | None = None


@dataclass
class EpsResult:
    eps: float
    n1: int
    n2: int
    incomplete: int
    fractions: tuple
    predicted: tuple
    stderr: float
    budget_scale: float  # delta + eps |ln eps| / delta
    K4: float  # smallest constant with |n1/N - P1| <= K4 * budget_scale
    predictor_agreement: float | None
    predictor_eligible: int
    predictor_excluded: int
    summaries: list = field(repr=False, default_factory=list)


@dataclass
class EnsembleReport:
    spec: EnsembleSpec
    z_star: object
    tau_star: float | None
    results: list  # EpsResult per eps
    error_table: list = field(default_factory=list)  # (eps, median pre, median post)

    def to_dict(self) -> dict:
        out = {"delta": self.spec.delta, "N": self.spec.N, "seed": self.spec.seed,
               "tau_star": self.tau_star,
               "z_star": _jsonable(self.z_star), "results": []}
        for r in self.results:
            out["results"].append({
                "eps": r.eps, "n1": r.n1, "n2": r.n2, "incomplete": r.incomplete,
                "fractions": list(r.fractions), "predicted": list(r.predicted),
                "stderr": r.stderr, "budget_scale": r.budget_scale, "K4": r.K4,
                "predictor_agreement": r.predictor_agreement,
                "predictor_eligible": r.predictor_eligible,
                "predictor_excluded": r.predictor_excluded})
        out["error_table"] = [list(row) for row in self.error_table]
        return out


def _jsonable(v):
    if v is None:
        return None
    if np.ndim(v) == 0:
        return float(v)
    return [float(x) for x in np.ravel(v)]


def _zarg(system, z):
    if system.dim_z == 0:
        return None
    zz = np.atleast_1d(np.asarray(z, dtype=float))
    return float(zz[0]) if system.dim_z == 1 else zz


def _pmap(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# sampling


def box_center(spec: EnsembleSpec, system):
    bp = np.asarray(spec.base_point, dtype=float)
    z0 = _zarg(system, bp[2:]) if system.dim_z else None
    nu, I0, phi0 = to_action_angle(system, bp[0], bp[1], z0)
    if nu != 3:
        raise PreconditionError("the base point must lie in G3 (E > 0)")
    return z0, I0, phi0


def check_box(spec: EnsembleSpec, system, center=None) -> None:
    """The (z, I, phi) box must stay in G3 and in the domain."""
    z0, I0, _ = center if center is not None else box_center(spec, system)
    d = spec.delta
    zs = [None] if system.dim_z == 0 else list(np.linspace(z0 - d, z0 + d, 5))
    box = system.domain_box
    for z in zs:
        if z is not None and not box[2, 0] < z < box[2, 1]:
            raise PreconditionError(f"z = {z} of the sampling box leaves the domain")
        s3 = separatrix(system, z).area(3) / TWO_PI
        if not I0 - d > s3:
            raise PreconditionError(
                f"sampling box reaches the separatrix (I0 - delta = {I0 - d:.4g} <= "
                f"S3/2pi = {s3:.4g} at z = {z})")


def draw_box(spec: EnsembleSpec, center, indices) -> np.ndarray:
    """Raw uniform (z, I, phi) draws for the given sample indices; z is nan if dim_z = 0."""
    z0, I0, phi0 = center
    d = spec.delta
    out = np.empty((len(indices), 3))
    for k, i in enumerate(indices):
        u = sample_rng(spec.seed, i).random(3)
        out[k, 0] = np.nan if z0 is None else z0 + d * (2.0 * u[0] - 1.0)
        out[k, 1] = I0 + d * (2.0 * u[1] - 1.0)
        out[k, 2] = phi0 + d * (2.0 * u[2] - 1.0)
    return out


def sample_initials(spec: EnsembleSpec, system, center=None, indices=None,
                    threads: int = 1) -> SampleSet:
    """Uniform samples in |z - z0| < delta, |I - I0| < delta, |phi - phi0| < delta."""
    center = center if center is not None else box_center(spec, system)
    check_box(spec, system, center)
    idx = list(range(spec.N) if indices is None else indices)
    zIphi = draw_box(spec, center, idx)

    def one(k):
        z, I, phi = zIphi[k]
        zz = float(z) if system.dim_z else None
        pq = from_action_angle(system, 3, I, phi % TWO_PI, zz)
        return np.concatenate([pq, [zz] if system.dim_z else []])

    pts = np.array(_pmap(one, range(len(idx)), threads)).reshape(-1, 2 + system.dim_z)
    return SampleSet(zIphi=zIphi, points=pts, center=center)


# ---------------------------------------------------------------------------
# experiments


def _base_crossing(spec, system, averaged=None):
    bp = np.asarray(spec.base_point, dtype=float)
    h0 = system.hamiltonian(bp[0], bp[1], _zarg(system, bp[2:]))
    sol = averaged if averaged is not None else integrate_averaged(
        system, None, (h0, bp[2:]), (0.0, spec.tau_max), estimate_error=False)
    if not sol.crossed:
        raise PreconditionError("the averaged solution from the base point does not reach "
                                "the separatrix within tau_max")
    return sol


def _context_for(system, z_star, spec, ctx):
    if ctx is not None:
        return ctx
    if system.dim_z == 0:
        return ThetaContext(system)
    lo = max(system.domain_box[2, 0], float(np.min(np.atleast_1d(spec.base_point[2:]))) -
             2 * spec.delta)
    hi = min(system.domain_box[2, 1], float(np.max(np.atleast_1d(z_star))) + 1.0)
    return ThetaContext(system, (lo, hi))


def _run_one(system, spec, ctx, eps, i, point, averaged_i=None):
    k_minus, _ = spec.kappa
    try:
        # error runs continue post_tau (slow time) past the capture band
        post = 0.0 if averaged_i is None else spec.post_tau / eps
        traj = integrate_full(system, point, eps, spec.tau_max / eps, rtol=spec.rtol,
                              atol=spec.atol, h_stop=-k_minus * eps, post_time=post)
        rec = classify_capture(traj, spec.kappa, ctx, margin_factor=spec.margin_factor)
    except (SepcrossError, ValueError) as exc:
        return TrajectorySummary(i, None, None, None, None, None, None, None,
                                 failure=type(exc).__name__)
    pre = post = None
    if averaged_i is not None and rec.destination in (1, 2):
        m = compare_to_averaged(traj, averaged_i, rec.destination, band_factor=k_minus)
        pre, post = m.pre, m.post
    dest = rec.destination if rec.complete else None
    return TrajectorySummary(i, dest, rec.t_minus, rec.t_plus, rec.h_prime, rec.predicted,
                             pre, post, excluded=rec.excluded, agreement=rec.agreement)


def aggregate_summaries(eps, summaries, predicted, delta) -> EpsResult:
    """Counts, fractions, error budget and predictor agreement for one eps."""
    N = len(summaries)
    n1 = sum(1 for s in summaries if s.destination == 1)
    n2 = sum(1 for s in summaries if s.destination == 2)
    inc = N - n1 - n2
    f1 = n1 / N if N else math.nan
    f2 = n2 / N if N else math.nan
    se = math.sqrt(max(f1 * (1 - f1), 0.0) / N) if N else math.nan
    scale = delta + eps * abs(math.log(eps)) / delta
    K4 = abs(f1 - predicted[0]) / scale if N else math.nan
    elig = [s for s in summaries if s.destination is not None and s.predicted is not None
            and not s.excluded]
    excl = sum(1 for s in summaries if s.excluded)
    agree = (sum(1 for s in elig if s.predicted == s.destination) / len(elig)) if elig else None
    return EpsResult(eps=eps, n1=n1, n2=n2, incomplete=inc, fractions=(f1, f2),
                     predicted=predicted, stderr=se, budget_scale=scale, K4=K4,
                     predictor_agreement=agree, predictor_eligible=len(elig),
                     predictor_excluded=excl, summaries=summaries)


def run_capture_experiment(spec: EnsembleSpec, system, ctx=None, threads: int = 1,
                           compute_errors: bool = False, samples: SampleSet | None = None,
                           base_averaged=None) -> EnsembleReport:
    """Integrate N sampled trajectories per eps and compare capture fractions with P(z_star).

    z_star comes from the averaged solution of the box centre. Failed or
    unfinished trajectories are counted as incomplete.
    """
    spec.validate()
    base = _base_crossing(spec, system, base_averaged)
    ctx = _context_for(system, base.z_star, spec, ctx)
    pz = ctx.probabilities(base.z_star)
    predicted = (pz.P1, pz.P2)
    if samples is None:
        samples = sample_initials(spec, system, threads=threads)
    averaged = {}
    if compute_errors:
        def avg(i):
            pt = samples.points[i]
            h0 = system.hamiltonian(pt[0], pt[1], _zarg(system, pt[2:]))
            try:
                return integrate_averaged(system, None, (h0, pt[2:]),
                                          (0.0, spec.tau_max + spec.post_tau),
                                          estimate_error=False)
            except (SepcrossError, ValueError):
                return None
        sols = _pmap(avg, range(spec.N), threads)
        averaged = {i: s for i, s in enumerate(sols) if s is not None and s.crossed}
    results = []
    table = []
    for eps in spec.eps_list:
        def job(i, eps=eps):
            if compute_errors and i not in averaged:
                return TrajectorySummary(i, None, None, None, None, None, None, None,
                                         failure="no averaged crossing")
            return _run_one(system, spec, ctx, eps, i, samples.points[i],
                            averaged.get(i) if compute_errors else None)
        summaries = _pmap(job, range(spec.N), threads)
        res = aggregate_summaries(eps, summaries, predicted, spec.delta)
        results.append(res)
        if compute_errors:
            pre = [s.pre_err for s in summaries if s.pre_err is not None and np.isfinite(s.pre_err)]
            post = [s.post_err for s in summaries
                    if s.post_err is not None and np.isfinite(s.post_err)]
            table.append((eps, float(np.median(pre)) if pre else math.nan,
                          float(np.median(post)) if post else math.nan))
    return EnsembleReport(spec=spec, z_star=base.z_star, tau_star=base.tau_star,
                          results=results, error_table=table)


@dataclass
class ScalingFit:
    table: list  # (eps, median pre, median post)
    pre_slope: float
    pre_slope_stderr: float
    pre_constant: float  # least-squares C in pre ~ C eps
    pre_residual: float
    post_constant: float  # least-squares C in post ~ C eps |ln eps|
    post_residual: float
    post_ratios: list  # post / (eps |ln eps|)
    post_variation: float  # max/min - 1 of post_ratios


def fit_scaling(table) -> ScalingFit:
    eps = np.array([r[0] for r in table])
    pre = np.array([r[1] for r in table])
    post = np.array([r[2] for r in table])
    X = np.column_stack([np.log(eps), np.ones_like(eps)])
    coef, res, *_ = np.linalg.lstsq(X, np.log(pre), rcond=None)
    resid = np.log(pre) - X @ coef
    dof = max(eps.size - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    c_pre = float(pre @ eps / (eps @ eps))
    r_pre = float(np.sqrt(np.mean((pre - c_pre * eps) ** 2)))
    g = eps * np.abs(np.log(eps))
    c_post = float(post @ g / (g @ g))
    r_post = float(np.sqrt(np.mean((post - c_post * g) ** 2)))
    ratios = post / g
    return ScalingFit(table=[tuple(map(float, r)) for r in table], pre_slope=float(coef[0]),
                      pre_slope_stderr=float(math.sqrt(cov[0, 0])), pre_constant=c_pre,
                      pre_residual=r_pre, post_constant=c_post, post_residual=r_post,
                      post_ratios=[float(x) for x in ratios],
                      post_variation=float(ratios.max() / ratios.min() - 1.0))


def error_scaling_sweep(spec: EnsembleSpec, system, ctx=None, threads: int = 1) -> ScalingFit:
    """Median pre- and post-crossing deviations over an eps ladder, with fits.

    The same N initial points are reused for every eps, so each averaged
    solution is computed once.
    """
    if len(spec.eps_list) < 4 or spec.N < 20:
        raise ValueError("the sweep needs at least 4 eps values and 20 trajectories")
    rep = run_capture_experiment(spec, system, ctx, threads, compute_errors=True)
    return fit_scaling(rep.error_table)


@dataclass
class AnosovReport:
    eps0: float
    M: int
    fractions: tuple
    incomplete: int
    predicted: tuple
    stderr: float
    z_star: object


def anosov_sweep(base_point, eps0: float, M: int, system, ctx=None, seed: int = 0,
                 tau_max: float = 2.0, kappa=(KAPPA, KAPPA), threads: int = 1) -> AnosovReport:
    """Capture fractions over eps drawn uniformly from (eps0/2, eps0] at a fixed start.

    Diagnostic only: the limit is established for special cases, so results are
    reported rather than asserted.
    """
    if M <= 0:
        raise ValueError("the eps sweep needs M > 0 samples (empty report)")
    spec = EnsembleSpec(base_point=tuple(base_point), delta=1.0, eps=eps0, N=M, seed=seed,
                        tau_max=tau_max, kappa=kappa, check_smallness=False)
    base = _base_crossing(spec, system)
    ctx = _context_for(system, base.z_star, spec, ctx)
    pz = ctx.probabilities(base.z_star)
    point = np.asarray(base_point, dtype=float)

    def job(i):
        e = eps0 * (1.0 - 0.5 * sample_rng(seed, i).random())
        return _run_one(system, spec, ctx, e, i, point)

    summaries = _pmap(job, range(M), threads)
    n1 = sum(1 for s in summaries if s.destination == 1)
    n2 = sum(1 for s in summaries if s.destination == 2)
    f1 = n1 / M
    return AnosovReport(eps0=eps0, M=M, fractions=(f1, n2 / M), incomplete=M - n1 - n2,
                        predicted=(pz.P1, pz.P2), stderr=math.sqrt(f1 * (1 - f1) / M),
                        z_star=base.z_star)


def subbox_counts(samples: SampleSet, destinations, delta: float, splits: int = 2) -> dict:
    """Destination counts per sub-box of a splits^3 partition of the sampling box."""
    z0, I0, phi0 = samples.center
    c = np.array([np.nan if z0 is None else z0, I0, phi0])
    rel = (samples.zIphi - c + delta) / (2 * delta)
    cell = np.clip(np.floor(rel * splits).astype(int), 0, splits - 1)
    cell[np.isnan(rel)] = 0
    out = {}
    for k, dest in enumerate(destinations):
        key = tuple(int(v) for v in cell[k])
        d = out.setdefault(key, {1: 0, 2: 0, None: 0})
        d[dest if dest in (1, 2) else None] += 1
    return out


def budget_shape_fit(deltas, deviations, eps: float) -> tuple:
    """Non-negative least squares of deviation ~ c1 delta + c2 eps |ln eps| / delta."""
    d = np.asarray(deltas, dtype=float)
    y = np.asarray(deviations, dtype=float)
    A = np.column_stack([d, eps * abs(math.log(eps)) / d])
    coef, rnorm = nnls(A, y)
    return float(coef[0]), float(coef[1]), float(rnorm)


__all__ = ["EnsembleSpec", "EnsembleReport", "EpsResult", "SampleSet", "TrajectorySummary",
           "ScalingFit", "AnosovReport", "sample_rng", "draw_box", "sample_initials", "check_box",
           "box_center", "aggregate_summaries", "run_capture_experiment", "error_scaling_sweep",
           "fit_scaling", "anosov_sweep", "subbox_counts", "budget_shape_fit"]
