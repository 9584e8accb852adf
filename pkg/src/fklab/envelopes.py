"""Heat-kernel envelope formulas, scale functions, and two-sided comparison fits.

The envelope families cover volume-normalized Gaussian bounds (upper, lower,
near-diagonal), mixed jump bounds of the form ``1/V ∧ (t/(V·ψ) + e^{-a0·Φ})``,
tempered-jump profiles ``q_β``, and the piecewise reflected-diffusion-with-jump
profiles ``H_{ψ,β}``.  All formulas are evaluated with unit leading constant;
multiplicative constants, distance rescalings and the exponential-in-time
factor ``e^{±kt}`` live in the fitted verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateEstimate,
    InsufficientData,
    InvalidGrid,
    InvalidInput,
    NonSuperlinearScaling,
    UnsupportedRegime,
)

__all__ = [
    "ScalingFunction",
    "VolumeFunction",
    "EnvelopeFamily",
    "EnvelopeVerdict",
    "ScalingReport",
    "phi_big",
    "check_scaling",
    "eval_envelope",
    "envelope_profile",
    "fit_envelope",
    "upper_holds",
    "lower_holds",
    "unit_ball_volume",
]


# ---------------------------------------------------------------------------
# scale and volume functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingFunction:
    """Strictly increasing scale function with declared power-law bounds.

    ``eval(R)/eval(r)`` is declared to sit between ``c_lower*(R/r)**beta_lower``
    and ``c_upper*(R/r)**beta_upper`` for all r <= R; `check_scaling` verifies
    the declaration on a grid.
    """

    eval: Callable[[float], float]
    beta_lower: float
    beta_upper: float
    c_lower: float = 1.0
    c_upper: float = 1.0
    inverse_eval: Optional[Callable[[float], float]] = None
    label: str = ""

    def __post_init__(self):
        if self.beta_lower <= 0 or self.beta_upper < self.beta_lower:
            raise InvalidInput(
                f"need 0 < beta_lower <= beta_upper, got ({self.beta_lower}, {self.beta_upper})"
            )
        if self.c_lower <= 0 or self.c_upper <= 0:
            raise InvalidInput("scaling constants must be positive")

    def inverse(self, t: float) -> float:
        if self.inverse_eval is not None:
            return self.inverse_eval(t)
        return _invert_increasing(self.eval, t)

    @staticmethod
    def power(beta: float, scale: float = 1.0, label: str = "") -> "ScalingFunction":
        """phi(r) = scale * r**beta; saturates its own scaling bounds with c = C = 1."""
        if beta <= 0 or scale <= 0:
            raise InvalidInput("power scale function needs beta > 0 and scale > 0")
        return ScalingFunction(
            eval=lambda r: scale * r**beta,
            beta_lower=beta,
            beta_upper=beta,
            c_lower=1.0,
            c_upper=1.0,
            inverse_eval=lambda t: (t / scale) ** (1.0 / beta),
            label=label or f"r^{beta:g}",
        )

    @staticmethod
    def from_table(points: Sequence[Sequence[float]], label: str = "table") -> "ScalingFunction":
        """Log-log linear interpolant through (r, value) pairs, extrapolated with end slopes."""
        pts = np.asarray(sorted((float(r), float(v)) for r, v in points), dtype=float)
        if len(pts) < 2:
            raise InvalidInput("table scale function needs at least two points")
        r, v = pts[:, 0], pts[:, 1]
        if np.any(r <= 0) or np.any(v <= 0):
            raise InvalidInput("table points must be positive")
        if np.any(np.diff(r) <= 0) or np.any(np.diff(v) <= 0):
            raise InvalidInput("table must be strictly increasing")
        lr, lv = np.log(r), np.log(v)
        slopes = np.diff(lv) / np.diff(lr)

        def ev(x: float) -> float:
            return float(np.exp(np.interp(math.log(x), lr, lv)) * _end_corr(math.log(x), lr, lv, slopes))

        def inv(t: float) -> float:
            return float(np.exp(np.interp(math.log(t), lv, lr)) * _end_corr(math.log(t), lv, lr, 1.0 / slopes))

        return ScalingFunction(
            eval=ev,
            beta_lower=float(slopes.min()),
            beta_upper=float(slopes.max()),
            c_lower=1.0,
            c_upper=1.0,
            inverse_eval=inv,
            label=label,
        )


def _end_corr(x, xs, ys, slopes):
    """np.interp clamps; extend with the end-segment slope instead."""
    slopes = np.atleast_1d(slopes)
    if x < xs[0]:
        return math.exp((x - xs[0]) * slopes[0])
    if x > xs[-1]:
        return math.exp((x - xs[-1]) * slopes[-1])
    return 1.0


def _invert_increasing(f: Callable[[float], float], t: float) -> float:
    if t <= 0:
        raise InvalidInput("inverse of a scale function needs t > 0")
    lo, hi = 1e-12, 1e12
    if f(lo) > t or f(hi) < t:
        raise InvalidInput("value outside invertible range")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if f(mid) < t:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


@dataclass(frozen=True)
class VolumeFunction:
    """Ball volume V(x, r) with declared doubling and reverse-doubling behavior."""

    eval: Callable[[object, float], float]
    dim: int
    doubling_const: float
    rvd_exponent: float
    is_lebesgue: bool = False

    @staticmethod
    def lebesgue(dim: int) -> "VolumeFunction":
        omega = unit_ball_volume(dim)
        return VolumeFunction(
            eval=lambda x, r: omega * r**dim,
            dim=dim,
            doubling_const=2.0**dim,
            rvd_exponent=float(dim),
            is_lebesgue=True,
        )


# ---------------------------------------------------------------------------
# the exponent Phi(s, t) = sup_r { s/r - t/phi(r) }
# ---------------------------------------------------------------------------

_PHI_BRACKET = (1e-8, 1e8)
_PHI_SCAN = 200


def _phi_objective(s: float, t: float, phi: ScalingFunction, r: float) -> float:
    return s / r - t / phi.eval(r)


def _phi_sup(s: float, t: float, phi: ScalingFunction) -> float:
    """Supremum of s/r - t/phi(r) over r > 0; returns math.inf when unbounded."""
    if s == 0.0:
        return 0.0
    lo, hi = _PHI_BRACKET
    grid = np.exp(np.linspace(math.log(lo), math.log(hi), _PHI_SCAN))
    vals = np.array([_phi_objective(s, t, phi, r) for r in grid])
    i = int(np.argmax(vals))
    if i == 0 and vals[0] > vals[1] and vals[0] > 0:
        # still increasing toward small r: the r->0 limit dominates
        edge = _phi_objective(s, t, phi, lo * 1e-4)
        if edge > vals[0]:
            return math.inf
    # golden-section on log r over the bracketing cells
    a = math.log(grid[max(i - 1, 0)])
    b = math.log(grid[min(i + 1, _PHI_SCAN - 1)])
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    fc = _phi_objective(s, t, phi, math.exp(c))
    fd = _phi_objective(s, t, phi, math.exp(d))
    for _ in range(120):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = _phi_objective(s, t, phi, math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = _phi_objective(s, t, phi, math.exp(d))
        if b - a < 1e-14:
            break
    best = max(fc, fd, float(vals[i]))
    return max(best, 0.0)


def phi_big(s: float, t: float, phi: ScalingFunction) -> float:
    """sup over r > 0 of s/r - t/phi(r), located by bracketed 1-d maximization.

    Nonnegative for every admissible input (large r drives the objective to 0
    from below), homogeneous in the sense phi_big(s, t) = t * phi_big(s/t, 1).
    """
    if s < 0 or t <= 0:
        raise InvalidInput(f"need s >= 0 and t > 0, got s={s}, t={t}")
    val = _phi_sup(s, t, phi)
    if math.isinf(val):
        if phi.beta_lower <= 1:
            raise NonSuperlinearScaling(
                "supremum is unbounded: scale function has lower index <= 1"
            )
        raise NonSuperlinearScaling("supremum did not stabilize inside the bracket")
    return val


# ---------------------------------------------------------------------------
# scaling-condition check
# ---------------------------------------------------------------------------


@dataclass
class ScalingReport:
    lower_const: float  # largest c with  f(R)/f(r) >= c (R/r)^beta_lower  on the grid
    upper_const: float  # smallest C with f(R)/f(r) <= C (R/r)^beta_upper  on the grid
    passed_lower: bool
    passed_upper: bool
    worst_lower_pair: tuple
    worst_upper_pair: tuple

    @property
    def passed(self) -> bool:
        return self.passed_lower and self.passed_upper


def check_scaling(f: ScalingFunction, grid: Sequence[Sequence[float]]) -> ScalingReport:
    """Worst-case scaling constants of f over (r, R) pairs with r <= R."""
    lower_c, upper_c = math.inf, 0.0
    worst_lo = worst_up = (None, None)
    n = 0
    for pair in grid:
        r, big_r = float(pair[0]), float(pair[1])
        if r <= 0 or big_r <= 0 or r > big_r:
            raise InvalidGrid(f"need 0 < r <= R, got ({r}, {big_r})")
        n += 1
        ratio = f.eval(big_r) / f.eval(r)
        rho = big_r / r
        need_lo = ratio / rho**f.beta_lower
        need_up = ratio / rho**f.beta_upper
        if need_lo < lower_c:
            lower_c, worst_lo = need_lo, (r, big_r)
        if need_up > upper_c:
            upper_c, worst_up = need_up, (r, big_r)
    if n == 0:
        raise InvalidGrid("empty grid")
    tol = 1.0 + 1e-12
    return ScalingReport(
        lower_const=lower_c,
        upper_const=upper_c,
        passed_lower=lower_c * tol >= f.c_lower,
        passed_upper=upper_c <= f.c_upper * tol,
        worst_lower_pair=worst_lo,
        worst_upper_pair=worst_up,
    )


# ---------------------------------------------------------------------------
# envelope families
# ---------------------------------------------------------------------------

ENVELOPE_KINDS = (
    "gaussian_UE",
    "gaussian_LE",
    "gaussian_NLE",
    "jump_HK_upper",
    "jump_HK_lower",
    "q_beta",
    "h_psi_beta",
)


@dataclass(frozen=True)
class EnvelopeFamily:
    """One named heat-kernel envelope formula with its scale/volume data.

    ``beta`` is the tempering index of the jump tail for the q_beta and
    h_psi_beta kinds (math.inf allowed; 0 selects the untempered variant of
    h_psi_beta built on ``psi_star``).  ``a0`` and ``eta`` are the free
    constants of the mixed jump bounds and are deliberately exposed as knobs.
    """

    kind: str
    phi: ScalingFunction
    volume: VolumeFunction
    psi: Optional[ScalingFunction] = None
    beta: float = math.inf
    a0: float = 1.0
    eta: float = 1.0
    eps_nle: float = 1.0

    def __post_init__(self):
        if self.kind not in ENVELOPE_KINDS:
            raise InvalidInput(f"unknown envelope kind {self.kind!r}")
        if self.kind in ("jump_HK_upper", "jump_HK_lower", "h_psi_beta") and self.psi is None:
            raise InvalidInput(f"{self.kind} needs a jump scale function psi")
        if self.a0 <= 0 or self.eta <= 0 or self.eps_nle <= 0:
            raise InvalidInput("a0, eta, eps_nle must be positive")
        if self.kind == "q_beta" and not (self.beta > 0):
            raise InvalidInput("q_beta needs a tempering index beta > 0")
        if self.kind == "h_psi_beta" and self.beta < 0:
            raise InvalidInput("h_psi_beta needs beta >= 0")

    def _varphi_inv(self, t: float) -> float:
        """Inverse of the near-diagonal scale: pointwise min of phi and psi."""
        ri = self.phi.inverse(t)
        if self.psi is not None:
            ri = max(ri, self.psi.inverse(t))
        return ri


def _exp_neg(x: float) -> float:
    if math.isinf(x):
        return 0.0
    return math.exp(-x)


def _temper_exp(r: float, beta: float) -> float:
    """exp(r**beta) with the beta = inf convention 1 for r < 1, inf for r > 1."""
    if math.isinf(beta):
        if r < 1.0:
            return 1.0
        if r == 1.0:
            return math.e
        return math.inf
    return math.exp(r**beta)


def _log_plus(x: float) -> float:
    return math.log(x) if x > 1.0 else 0.0


def _pow_limit(r: float, beta: float) -> float:
    """r**beta with the beta = inf convention 0 for r < 1, 1 at r = 1, inf above."""
    if math.isinf(beta):
        return 0.0 if r < 1.0 else (1.0 if r == 1.0 else math.inf)
    return r**beta


def _tempered_decay(r: float, t: float, beta: float) -> float:
    """r(1+log+(r/t))^{(beta-1)/beta} ∧ r^beta, the large-beta jump exponent."""
    expo = 1.0 if math.isinf(beta) else (beta - 1.0) / beta
    first = r * (1.0 + _log_plus(r / t)) ** expo
    return min(first, _pow_limit(r, beta))


def envelope_profile(fam: EnvelopeFamily, t: float, r: float, x=None) -> float:
    """Envelope value at time t and distance r >= 0, unit leading constant."""
    if t <= 0:
        raise InvalidInput("need t > 0")
    if r < 0:
        raise InvalidInput("need r >= 0")
    V = fam.volume.eval
    kind = fam.kind

    if kind == "gaussian_UE":
        return (1.0 / V(x, fam.phi.inverse(t))) * _exp_neg(0.5 * _phi_sup(r, t, fam.phi))

    if kind == "gaussian_LE":
        return (1.0 / V(x, fam.phi.inverse(t))) * _exp_neg(_phi_sup(r, t, fam.phi))

    if kind == "gaussian_NLE":
        ri = fam.phi.inverse(t)
        return (1.0 / V(x, ri)) if r <= fam.eps_nle * ri else 0.0

    if kind == "jump_HK_upper":
        near = 1.0 / V(x, fam._varphi_inv(t))
        if r == 0.0:
            return near
        jump = t / (V(x, r) * fam.psi.eval(r))
        diff = (1.0 / V(x, fam.phi.inverse(t))) * _exp_neg(fam.a0 * _phi_sup(r, t, fam.phi))
        return min(near, jump + diff)

    if kind == "jump_HK_lower":
        ri = fam._varphi_inv(t)
        if r <= fam.eta * ri:
            return 1.0 / V(x, ri)
        return t / (V(x, r) * fam.psi.eval(r))

    if kind == "q_beta":
        return _q_beta(fam, t, r)

    if kind == "h_psi_beta":
        return _h_psi_beta(fam, t, r, x)

    raise UnsupportedRegime(f"no formula for kind {kind!r}")


def _q_beta(fam: EnvelopeFamily, t: float, r: float) -> float:
    """Tempered-jump profile on R^d: polynomial regime for t <= 1, Gaussian-capped tail after."""
    d = fam.volume.dim
    beta = fam.beta
    phi = fam.phi
    if beta <= 1.0:
        if t <= 1.0:
            near = phi.inverse(t) ** (-d)
            if r == 0.0:
                return near
            jump = t / (r**d * phi.eval(r) * _temper_exp(r, beta))
            return min(near, jump)
        return t ** (-d / 2.0) * _exp_neg(min(r**beta, r * r / t))
    # beta > 1 (math.inf included)
    if t <= 1.0 and r < 1.0:
        near = phi.inverse(t) ** (-d)
        if r == 0.0:
            return near
        jump = t / (r**d * phi.eval(r) * _temper_exp(r, beta))
        return min(near, jump)
    if t <= 1.0:
        return t * _exp_neg(_tempered_decay(r, t, beta))
    expo = 1.0 if math.isinf(beta) else (beta - 1.0) / beta
    ex = r * (1.0 + _log_plus(r / t)) ** expo
    return t ** (-d / 2.0) * _exp_neg(min(ex, r * r / t))


def _psi_star(psi: ScalingFunction, r: float) -> float:
    return psi.eval(r) if r <= 1.0 else r * r


def _psi_star_inv(psi: ScalingFunction, t: float) -> float:
    return psi.inverse(t) if t <= 1.0 else math.sqrt(t)


def _h_psi_beta(fam: EnvelopeFamily, t: float, r: float, x) -> float:
    """Piecewise diffusion-with-tempered-jump profile built on V(x, sqrt(t))."""
    V = fam.volume.eval
    psi = fam.psi
    beta = fam.beta
    vroot = V(x, math.sqrt(t))

    def p_mix(temper: float, use_star: bool) -> float:
        gauss = (1.0 / vroot) * _exp_neg(r * r / t)
        if use_star:
            near = 1.0 / V(x, _psi_star_inv(psi, t))
            if r == 0.0:
                return gauss + near
            jump = t / (V(x, r) * _psi_star(psi, r) * math.e)
        else:
            near = 1.0 / V(x, psi.inverse(t))
            if r == 0.0:
                return gauss + near
            jump = t / (V(x, r) * psi.eval(r) * _temper_exp(r, temper))
        return gauss + min(near, jump)

    if beta == 0.0:
        return min(1.0 / vroot, p_mix(0.0, use_star=True))
    if beta <= 1.0:
        if t <= 1.0:
            return min(1.0 / vroot, p_mix(beta, use_star=False))
        return (1.0 / vroot) * _exp_neg(min(r**beta, r * r / t))
    # beta > 1, math.inf included
    if t <= 1.0 and r <= 1.0:
        return min(1.0 / vroot, p_mix(beta, use_star=False))
    if t <= 1.0:
        return (t / (V(x, r) * psi.eval(r))) * _exp_neg(_tempered_decay(r, t, beta))
    expo = 1.0 if math.isinf(beta) else (beta - 1.0) / beta
    ex = r * (1.0 + _log_plus(r / t)) ** expo
    return (1.0 / vroot) * _exp_neg(min(ex, r * r / t))


def eval_envelope(fam: EnvelopeFamily, t: float, x, y) -> float:
    """Envelope value at (t, x, y); distance is Euclidean."""
    r = _dist(x, y)
    return envelope_profile(fam, t, r, x=x)


def _dist(x, y) -> float:
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    yv = np.atleast_1d(np.asarray(y, dtype=float))
    return float(np.linalg.norm(xv - yv))


# ---------------------------------------------------------------------------
# verdicts and fitting
# ---------------------------------------------------------------------------


@dataclass
class EnvelopeVerdict:
    C1: float
    c1: float
    C2: float
    c2: float
    k: float
    passed_upper: bool
    passed_lower: bool
    violation_points: list = field(default_factory=list)
    excluded_points: int = 0
    slope_upper: float = 0.0
    slope_lower: float = 0.0

    @property
    def passed(self) -> bool:
        return self.passed_upper and self.passed_lower


def _estimate_arrays(estimate):
    t_values = np.asarray(estimate.t_values, dtype=float)
    pairs = list(estimate.pairs)
    values = np.asarray(estimate.values, dtype=float)
    ci = np.asarray(estimate.ci_half_width, dtype=float)
    if values.shape != (len(t_values), len(pairs)):
        raise InsufficientData("estimate arrays have inconsistent shapes")
    dists = np.array([_dist(x, y) for x, y in pairs])
    xs = [x for x, _ in pairs]
    return t_values, pairs, values, ci, dists, xs


def _env_matrix(fam, t_values, dists, xs, c):
    env = np.empty((len(t_values), len(dists)))
    for i, t in enumerate(t_values):
        for j, r in enumerate(dists):
            env[i, j] = envelope_profile(fam, float(t), float(c * r), x=xs[j])
    return env


def upper_holds(estimate, fam: EnvelopeFamily, C2: float, c2: float, k: float,
                ci_factor: float = 1.0):
    """Check  p̂ - ci <= C2 e^{kt} envelope(t, c2 d)  pointwise; returns (ok, violations)."""
    t_values, pairs, values, ci, dists, xs = _estimate_arrays(estimate)
    env = _env_matrix(fam, t_values, dists, xs, c2)
    target = np.maximum(values - ci_factor * ci, 0.0)
    bound = C2 * np.exp(k * t_values)[:, None] * env
    excl = ci_factor * ci > np.maximum(values, 0.0)
    bad = (target > bound * (1 + 1e-9)) & ~excl
    violations = [
        (float(t_values[i]), pairs[j][0], pairs[j][1], float(target[i, j] / bound[i, j]) if bound[i, j] > 0 else math.inf)
        for i, j in zip(*np.nonzero(bad))
    ]
    return not violations, violations


def lower_holds(estimate, fam: EnvelopeFamily, C1: float, c1: float, k: float,
                ci_factor: float = 1.0):
    """Check  C1 e^{-kt} envelope(t, c1 d) <= p̂ + ci  pointwise; returns (ok, violations)."""
    t_values, pairs, values, ci, dists, xs = _estimate_arrays(estimate)
    env = _env_matrix(fam, t_values, dists, xs, c1)
    target = values + ci_factor * ci
    bound = C1 * np.exp(-k * t_values)[:, None] * env
    bad = bound > target * (1 + 1e-9)
    violations = [
        (float(t_values[i]), pairs[j][0], pairs[j][1], float(bound[i, j] / target[i, j]) if target[i, j] > 0 else math.inf)
        for i, j in zip(*np.nonzero(bad))
    ]
    return not violations, violations


def _slope_fit(ts, logm):
    """Least-squares slope of log(constant) against t, with its standard error."""
    ts = np.asarray(ts, dtype=float)
    logm = np.asarray(logm, dtype=float)
    ok = np.isfinite(logm)
    ts, logm = ts[ok], logm[ok]
    if len(ts) < 3 or np.ptp(ts) == 0:
        return 0.0, math.inf
    A = np.vstack([np.ones_like(ts), ts]).T
    coef, res, *_ = np.linalg.lstsq(A, logm, rcond=None)
    dof = len(ts) - 2
    if dof > 0 and len(res):
        sigma2 = float(res[0]) / dof
        se = math.sqrt(sigma2 / float(np.sum((ts - ts.mean()) ** 2)))
    else:
        se = 0.0
    return float(coef[1]), se


_DEFAULT_C_GRID = np.unique(np.concatenate([np.geomspace(0.25, 4.0, 49), [1.0]]))


def fit_envelope(estimate, fam: EnvelopeFamily, allow_k: bool, *,
                 ci_factor: float = 1.0,
                 c_grid: Optional[Sequence[float]] = None,
                 outlier_ratio: float = 3.0,
                 slope_tol: float = 0.02,
                 max_violation_frac: float = 0.1) -> EnvelopeVerdict:
    """Fit two-sided comparison constants of an empirical kernel against a family.

    Upper side: smallest C2 (over a grid of distance rescalings c2) with
    p̂ - ci <= C2 e^{kt} envelope(t, c2 d) away from isolated gross violations.
    Lower side: largest C1 symmetric to that.  With ``allow_k`` the smallest
    k >= 0 restoring time-uniform constants is fitted from the per-time
    constants; without it a significant exponential trend in those constants
    fails the corresponding side instead of being absorbed into C2 or C1.
    """
    t_values, pairs, values, ci, dists, xs = _estimate_arrays(estimate)
    if len(np.unique(t_values)) < 3 or len(pairs) < 10:
        raise InsufficientData("need >= 3 distinct times and >= 10 pairs")
    if not np.any(values > 0):
        raise DegenerateEstimate("all kernel values are zero")

    up_target = np.maximum(values - ci_factor * ci, 0.0)
    lo_target = values + ci_factor * ci
    excluded = ci_factor * ci > np.maximum(values, 0.0)
    grid = np.asarray(c_grid, dtype=float) if c_grid is not None else _DEFAULT_C_GRID

    # ---- upper side: minimize C2 over the c2 grid
    best = None
    for c in grid:
        env = _env_matrix(fam, t_values, dists, xs, c)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(env > 0, up_target / env, np.where(up_target > 0, math.inf, 0.0))
        q = np.where(excluded, 0.0, q)
        cmax = float(np.max(q))
        if best is None or cmax < best[0] * (1 - 1e-9) or (
            cmax <= best[0] * (1 + 1e-9) and abs(math.log(c)) < abs(math.log(best[1]))
        ):
            best = (cmax, c, q)
    _, c2, q_up = best

    up_viol, q_up = _prune_outliers(q_up, t_values, pairs, outlier_ratio,
                                    max_violation_frac, side="upper")
    m_up = np.array([np.max(q_up[i]) for i in range(len(t_values))])

    # ---- lower side: maximize C1 over the c1 grid
    best = None
    for c in grid:
        env = _env_matrix(fam, t_values, dists, xs, c)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(env > 0, lo_target / env, math.inf)
        cmin = float(np.min(q))
        if best is None or cmin > best[0] * (1 + 1e-9) or (
            cmin >= best[0] * (1 - 1e-9) and abs(math.log(c)) < abs(math.log(best[1]))
        ):
            best = (cmin, c, q)
    _, c1, q_lo = best

    lo_viol, q_lo = _prune_outliers(q_lo, t_values, pairs, outlier_ratio,
                                    max_violation_frac, side="lower")
    m_lo = np.array([np.min(q_lo[i]) for i in range(len(t_values))])

    # ---- time trend: absorb into k when allowed, otherwise test it
    with np.errstate(divide="ignore"):
        s_up, se_up = _slope_fit(t_values, np.log(m_up))
        s_lo, se_lo = _slope_fit(t_values, -np.log(np.maximum(m_lo, 1e-300)))

    if allow_k:
        k = max(0.0, s_up if se_up < math.inf else 0.0, s_lo if se_lo < math.inf else 0.0)
        C2 = float(np.max(m_up * np.exp(-k * t_values)))
        C1 = float(np.min(m_lo * np.exp(k * t_values)))
        slope_up_fail = slope_lo_fail = False
    else:
        k = 0.0
        slope_up_fail = s_up > slope_tol + 3 * se_up
        slope_lo_fail = s_lo > slope_tol + 3 * se_lo
        if slope_up_fail:
            # anchor the constant at the earliest time so later times surface as violations
            i0 = int(np.argmin(t_values))
            C2 = float(m_up[i0])
            for i in range(len(t_values)):
                if m_up[i] > C2 * (1 + 1e-9):
                    j = int(np.argmax(q_up[i]))
                    up_viol.append((float(t_values[i]), pairs[j][0], pairs[j][1], float(m_up[i] / C2)))
        else:
            C2 = float(np.max(m_up))
        if slope_lo_fail:
            i0 = int(np.argmin(t_values))
            C1 = float(m_lo[i0])
            for i in range(len(t_values)):
                if m_lo[i] < C1 * (1 - 1e-9):
                    j = int(np.argmin(q_lo[i]))
                    lo_viol.append((float(t_values[i]), pairs[j][0], pairs[j][1], float(m_lo[i] / C1)))
        else:
            C1 = float(np.min(m_lo))

    if not math.isfinite(C2):
        up_viol = up_viol or [(float(t_values[0]), pairs[0][0], pairs[0][1], math.inf)]
        C2 = float(np.max(q_up[np.isfinite(q_up)])) if np.any(np.isfinite(q_up)) else 1.0
    if C1 <= 0 or not math.isfinite(C1):
        finite = q_lo[np.isfinite(q_lo) & (q_lo > 0)]
        C1 = float(np.min(finite)) if finite.size else 1.0

    return EnvelopeVerdict(
        C1=C1, c1=float(c1), C2=C2, c2=float(c2), k=float(k),
        passed_upper=not up_viol and not slope_up_fail,
        passed_lower=not lo_viol and not slope_lo_fail,
        violation_points=up_viol + lo_viol,
        excluded_points=int(np.count_nonzero(excluded)),
        slope_upper=float(s_up),
        slope_lower=float(s_lo),
    )


def _prune_outliers(q, t_values, pairs, outlier_ratio, max_frac, side):
    """Flag isolated grid points grossly out of line with the rest of the ratios."""
    q = q.copy()
    violations = []
    flat_n = q.size
    max_drop = max(1, int(max_frac * flat_n))
    for _ in range(max_drop):
        finite = np.isfinite(q) & (q > 0)
        if side == "upper":
            if np.any(np.isinf(q)):
                i, j = np.unravel_index(int(np.argmax(np.isinf(q))), q.shape)
                violations.append((float(t_values[i]), pairs[j][0], pairs[j][1], math.inf))
                q[i, j] = 0.0
                continue
            if not np.any(finite):
                break
            top = float(np.max(q))
            rest = np.partition(q.ravel(), -2)[-2] if flat_n > 1 else 0.0
            if rest > 0 and top > outlier_ratio * rest:
                i, j = np.unravel_index(int(np.argmax(q)), q.shape)
                violations.append((float(t_values[i]), pairs[j][0], pairs[j][1], float(top / rest)))
                q[i, j] = 0.0
                continue
        else:
            if not np.any(finite):
                break
            vals = np.where(finite, q, math.inf)
            bot = float(np.min(vals))
            rest_vals = np.partition(vals.ravel(), 1)
            rest = float(rest_vals[1]) if flat_n > 1 and math.isfinite(rest_vals[1]) else math.inf
            if math.isfinite(rest) and rest > 0 and bot < rest / outlier_ratio:
                i, j = np.unravel_index(int(np.argmin(vals)), q.shape)
                violations.append((float(t_values[i]), pairs[j][0], pairs[j][1], float(bot / rest)))
                q[i, j] = math.inf
                continue
        break
    return violations, q
