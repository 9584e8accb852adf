"""Perturbation data (measures, jump functions, potential-type u) and the
pathwise accumulation of the corresponding additive functionals.

The Feynman-Kac weight along a path is exp(N_t + A_t^mu + A_t^F) where N is
the zero-energy part of a potential-type u, A^mu the occupation integral of a
signed density, and A^F the sum of a bounded symmetric jump function over the
recorded jumps.  Integrals along paths are trapezoidal on the simulation grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import integrate

from .errors import (
    BeyondHorizon,
    InvalidInput,
    NonBrownianPath,
    QuadratureFailure,
    UnboundedPotential,
)
from .processes import PathSample, ProcessSpec, stable_large_jump_rate

__all__ = [
    "MeasureSpec",
    "JumpPerturbation",
    "PotentialU",
    "caf_integral",
    "jump_functional",
    "JumpFunctionalValue",
    "compensator_NF",
    "zero_energy",
    "hilbert_transform",
    "fk_weight",
]


# ---------------------------------------------------------------------------
# measures given by densities
# ---------------------------------------------------------------------------


def _norms(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return np.linalg.norm(pts, axis=-1)


def _radial_density(kind: str, params: dict) -> Callable[[np.ndarray], np.ndarray]:
    if kind == "uniform_ball":
        c, radius = params["c"], params["radius"]
        return lambda r: np.where(r <= radius, c, 0.0)
    if kind == "power":
        c, expo, radius = params["c"], params["exponent"], params["radius"]

        def f(r):
            r = np.asarray(r, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where((r <= radius) & (r > 0), c * r**expo, 0.0)
            if expo < 0:
                vals = np.where(r == 0, np.inf, vals)
            elif expo == 0:
                vals = np.where(r <= radius, c, 0.0)
            return vals

        return f
    if kind == "gaussian_bump":
        c, sigma = params["c"], params["sigma"]
        radius = params.get("radius", 8.0 * sigma)
        return lambda r: np.where(r <= radius, c * np.exp(-(r**2) / (2.0 * sigma**2)), 0.0)
    raise InvalidInput(f"unknown density kind {kind!r}")


def _density_radius(kind: str, params: dict) -> float:
    if kind == "gaussian_bump":
        return params.get("radius", 8.0 * params["sigma"])
    return params["radius"]


@dataclass(frozen=True)
class MeasureSpec:
    """Signed measure on R^d with radial positive/negative density parts.

    Both parts vanish outside the centered ball of ``support_radius``.  The
    callables accept arrays of radii, which keeps the path accumulation and
    the quadrature routines vectorized.
    """

    radial_pos: Optional[Callable[[np.ndarray], np.ndarray]]
    radial_neg: Optional[Callable[[np.ndarray], np.ndarray]]
    support_radius: float
    label: str = ""

    def density_pos(self, points) -> np.ndarray:
        r = _norms(points)
        return self.radial_pos(r) if self.radial_pos is not None else np.zeros_like(r)

    def density_neg(self, points) -> np.ndarray:
        r = _norms(points)
        return self.radial_neg(r) if self.radial_neg is not None else np.zeros_like(r)

    def density_signed(self, points) -> np.ndarray:
        return self.density_pos(points) - self.density_neg(points)

    def pos_at_radius(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.radial_pos(r) if self.radial_pos is not None else np.zeros_like(r)

    def neg_at_radius(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.radial_neg(r) if self.radial_neg is not None else np.zeros_like(r)

    @property
    def is_zero(self) -> bool:
        return self.radial_pos is None and self.radial_neg is None

    @staticmethod
    def zero(label: str = "zero") -> "MeasureSpec":
        return MeasureSpec(None, None, support_radius=1.0, label=label)

    @staticmethod
    def from_parts(pos: Optional[tuple], neg: Optional[tuple], label: str = "") -> "MeasureSpec":
        """pos/neg are (kind, params) selections from the named density library."""
        rp = _radial_density(*pos) if pos is not None else None
        rn = _radial_density(*neg) if neg is not None else None
        radius = max(
            _density_radius(*pos) if pos is not None else 0.0,
            _density_radius(*neg) if neg is not None else 0.0,
            1e-12,
        )
        return MeasureSpec(rp, rn, support_radius=radius, label=label)

    @staticmethod
    def uniform_ball(c: float, radius: float = 1.0, label: str = "") -> "MeasureSpec":
        pos = ("uniform_ball", {"c": abs(c), "radius": radius})
        if c >= 0:
            return MeasureSpec.from_parts(pos, None, label or f"{c:g}*1_B({radius:g})")
        return MeasureSpec.from_parts(None, pos, label or f"{c:g}*1_B({radius:g})")

    def scaled(self, factor: float) -> "MeasureSpec":
        if factor < 0:
            raise InvalidInput("use explicit pos/neg parts for sign flips")
        rp, rn = self.radial_pos, self.radial_neg
        return MeasureSpec(
            (lambda r, f=rp: factor * f(r)) if rp is not None else None,
            (lambda r, f=rn: factor * f(r)) if rn is not None else None,
            self.support_radius,
            label=f"{factor:g}*({self.label})",
        )


# ---------------------------------------------------------------------------
# jump perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpPerturbation:
    """Bounded symmetric nonnegative pair (F_pos, F_neg) vanishing on the diagonal.

    ``magnitude_pos``/``magnitude_neg`` give the translation-invariant profile
    in |x - y| when one exists; the batch engines use it to fold jump sums into
    array operations.  ``min_active_jump`` is the largest radius below which
    both parts vanish; it drives the unrecorded-small-jump bias bound.
    """

    F_pos: Callable[[np.ndarray, np.ndarray], float]
    F_neg: Callable[[np.ndarray, np.ndarray], float]
    bound: float
    min_active_jump: float = 0.0
    magnitude_pos: Optional[Callable[[np.ndarray], np.ndarray]] = None
    magnitude_neg: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""

    @staticmethod
    def zero() -> "JumpPerturbation":
        z = lambda x, y: 0.0
        zp = lambda m: np.zeros_like(np.asarray(m, dtype=float))
        return JumpPerturbation(z, z, bound=0.0, min_active_jump=math.inf,
                                magnitude_pos=zp, magnitude_neg=zp, label="zero")

    @staticmethod
    def threshold(eps: float, min_jump: float, label: str = "") -> "JumpPerturbation":
        """F(x, y) = eps * 1_{|x-y| >= min_jump}; sign of eps picks the part."""
        if min_jump <= 0:
            raise InvalidInput("threshold jump function needs min_jump > 0")
        mag = abs(eps)

        def prof(m):
            return np.where(np.asarray(m, dtype=float) >= min_jump, mag, 0.0)

        def fval(x, y):
            return float(prof(np.linalg.norm(np.atleast_1d(x) - np.atleast_1d(y))))

        zero = lambda x, y: 0.0
        zprof = lambda m: np.zeros_like(np.asarray(m, dtype=float))
        if eps >= 0:
            return JumpPerturbation(fval, zero, bound=mag, min_active_jump=min_jump,
                                    magnitude_pos=prof, magnitude_neg=zprof,
                                    label=label or f"thr({eps:g},{min_jump:g})")
        return JumpPerturbation(zero, fval, bound=mag, min_active_jump=min_jump,
                                magnitude_pos=zprof, magnitude_neg=prof,
                                label=label or f"thr({eps:g},{min_jump:g})")

    @property
    def is_zero(self) -> bool:
        return self.bound == 0.0


# ---------------------------------------------------------------------------
# potential-type u
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialU:
    """u = R_alpha(nu1 - nu2) evaluated through a prepared radial potential,
    or the antiderivative family ell_beta driving the principal-value
    functional for 1-d Brownian paths."""

    kind: str  # "resolvent_potential" | "ell_beta"
    nu1: Optional[MeasureSpec] = None
    nu2: Optional[MeasureSpec] = None
    alpha: float = 0.0
    potential_signed: Optional[Callable[[np.ndarray], np.ndarray]] = None  # radius -> R_a nu
    bound: float = math.inf
    beta: float = 0.0
    eps: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("resolvent_potential", "ell_beta"):
            raise InvalidInput(f"unknown potential kind {self.kind!r}")
        if self.kind == "ell_beta" and not (-1.5 < self.beta <= 0.0):
            raise InvalidInput("ell_beta supports beta in (-3/2, 0] only")


# ---------------------------------------------------------------------------
# pathwise accumulation
# ---------------------------------------------------------------------------


def _clip_time(path: PathSample, t: float) -> float:
    horizon = float(path.times[-1])
    if t > horizon * (1 + 1e-12) and path.killed_at is None:
        raise BeyondHorizon(f"t={t} beyond simulated horizon {horizon}")
    t_eff = min(t, horizon)
    if path.killed_at is not None:
        t_eff = min(t_eff, path.killed_at)
    return t_eff


def _trapezoid_to(path: PathSample, values: np.ndarray, t: float) -> float:
    """Trapezoid of a per-node sample up to time t (partial last cell included)."""
    times = path.times
    i = int(np.searchsorted(times, t, side="right"))
    total = float(np.trapezoid(values[:i], times[:i])) if i >= 2 else 0.0
    if 1 <= i < len(times) and times[i - 1] < t:
        dt = times[i] - times[i - 1]
        w = (t - times[i - 1]) / dt
        v_t = (1 - w) * values[i - 1] + w * values[i]
        total += 0.5 * (values[i - 1] + v_t) * (t - times[i - 1])
    return total


def caf_integral(path: PathSample, mu: MeasureSpec, t: float):
    """(A_pos, A_neg): occupation integrals of the density parts up to t ∧ lifetime."""
    t_eff = _clip_time(path, t)
    if mu.is_zero:
        return 0.0, 0.0
    vp = mu.density_pos(path.positions)
    vn = mu.density_neg(path.positions)
    return _trapezoid_to(path, vp, t_eff), _trapezoid_to(path, vn, t_eff)


class JumpFunctionalValue(NamedTuple):
    af_pos: float
    af_neg: float
    bias_bound: float


def jump_functional(path: PathSample, F: JumpPerturbation, t: float,
                    spec: Optional[ProcessSpec] = None) -> JumpFunctionalValue:
    """Sum of F over recorded jumps up to t ∧ lifetime, with a bound on the
    contribution of jumps below the recording cutoff."""
    t_eff = _clip_time(path, t)
    af_pos = af_neg = 0.0
    for jt, x_from, x_to in path.jumps:
        if jt <= t_eff:
            af_pos += F.F_pos(x_from, x_to)
            af_neg += F.F_neg(x_from, x_to)
    bias = 0.0
    if spec is not None and spec.is_stable and not F.is_zero:
        cutoff = spec.jump_cutoff
        if cutoff is not None and F.min_active_jump < cutoff:
            lo = max(F.min_active_jump, 1e-300)
            missed_rate = stable_large_jump_rate(spec.alpha_stable_index, lo) - \
                stable_large_jump_rate(spec.alpha_stable_index, cutoff)
            bias = F.bound * t_eff * max(missed_rate, 0.0)
            if F.min_active_jump == 0.0:
                bias = math.inf
    return JumpFunctionalValue(af_pos, af_neg, bias)


def compensator_NF(x, G: Callable[[float, float], float],
                   J_density: Callable[[float, float], float]) -> float:
    """N(G)(x) = int G(x, y) J(x, y) dy for 1-d jump kernels, adaptive quadrature.

    The integrand must vanish fast enough on the diagonal for the off-diagonal
    singularity of J to be integrable; relative target 1e-6.
    """
    x = float(np.atleast_1d(x)[0])

    def one_side(sign):
        def f(z):
            y = x + sign * z
            return G(x, y) * J_density(x, y)

        val1, err1 = integrate.quad(f, 0.0, 1.0, limit=200, points=[0.0])
        val2, err2 = integrate.quad(f, 1.0, np.inf, limit=200)
        return val1 + val2, err1 + err2

    vp, ep = one_side(+1.0)
    vm, em = one_side(-1.0)
    val, err = vp + vm, ep + em
    if err > max(1e-6 * abs(val), 1e-10):
        raise QuadratureFailure(f"compensator quadrature error {err:g} too large for value {val:g}")
    return val


def zero_energy(path: PathSample, u: PotentialU, t: float) -> float:
    """alpha * int_0^t R_alpha(nu)(X_s) ds - A_t^nu for potential-type u.

    With alpha = 0 (transient case) this reduces to -A_t^nu.
    """
    if u.kind != "resolvent_potential":
        raise InvalidInput("zero_energy applies to resolvent-potential u only")
    t_eff = _clip_time(path, t)
    nu1 = u.nu1 if u.nu1 is not None else MeasureSpec.zero()
    nu2 = u.nu2 if u.nu2 is not None else MeasureSpec.zero()
    if nu1.is_zero and nu2.is_zero:
        return 0.0
    a_pos1, _ = caf_integral(path, MeasureSpec(nu1.radial_pos, None, nu1.support_radius), t_eff) \
        if not nu1.is_zero else (0.0, 0.0)
    a_pos2, _ = caf_integral(path, MeasureSpec(nu2.radial_pos, None, nu2.support_radius), t_eff) \
        if not nu2.is_zero else (0.0, 0.0)
    a_nu = a_pos1 - a_pos2
    if u.alpha == 0.0:
        return -a_nu
    if u.potential_signed is None:
        raise InvalidInput("potential table missing; build the potential against a process first")
    radii = np.linalg.norm(path.positions, axis=1)
    vals = u.potential_signed(radii)
    if np.max(np.abs(vals)) > u.bound:
        raise UnboundedPotential("resolvent potential exceeds its configured cap")
    return u.alpha * _trapezoid_to(path, vals, t_eff) - a_nu


def hilbert_transform(path: PathSample, beta: float, eps: float, t: float) -> float:
    """Truncated odd power integral int |X_s|^beta sgn(X_s) 1_{|X_s| >= eps} ds.

    The eps -> 0 limit is the principal-value functional of 1-d Brownian local
    time; callers extrapolate over an eps ladder and report the spread.
    """
    if path.positions.shape[1] != 1 or path.jumps:
        raise NonBrownianPath("hilbert_transform expects a 1-d continuous path")
    if not (-1.5 < beta <= 0.0):
        raise InvalidInput("beta must lie in (-3/2, 0]")
    if eps <= 0:
        raise InvalidInput("eps must be positive")
    t_eff = _clip_time(path, t)
    xs = path.positions[:, 0]
    ax = np.abs(xs)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(ax >= eps, np.sign(xs) * ax**beta, 0.0)
    return _trapezoid_to(path, vals, t_eff)


def fk_weight(path: PathSample, u: Optional[PotentialU], mu: Optional[MeasureSpec],
              F: Optional[JumpPerturbation], t: float,
              spec: Optional[ProcessSpec] = None) -> float:
    """exp(N^u_t + A^mu_t + A^F_t) evaluated at t ∧ lifetime; equals 1 when all
    perturbation components vanish."""
    total = 0.0
    if u is not None:
        if u.kind == "resolvent_potential":
            total += zero_energy(path, u, t)
        else:
            total += hilbert_transform(path, u.beta, u.eps, t)
    if mu is not None and not mu.is_zero:
        a_pos, a_neg = caf_integral(path, mu, t)
        total += a_pos - a_neg
    if F is not None and not F.is_zero:
        jf = jump_functional(path, F, t, spec=spec)
        total += jf.af_pos - jf.af_neg
    return math.exp(total)
