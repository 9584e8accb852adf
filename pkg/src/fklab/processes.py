"""Process specifications, path simulation, and closed-form kernel oracles.

Simulated processes live on R^d: Brownian motion normalized so the generator
is half the Laplacian (variance t per coordinate per unit time), its killed
variant with an independent exponential clock, and the 1-d symmetric stable
process with unit characteristic exponent |xi|^alpha per unit time.

Stable increments split into an explicitly simulated compound-Poisson part of
jumps at least ``jump_cutoff`` in size and a small-jump remainder lumped into
one Gaussian increment per step with the matching variance.  Grid marginals
are therefore stable up to the small-jump normal approximation error, which
shrinks rapidly as the cutoff decreases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import integrate, special

from .errors import InvalidInput, InvalidStep, NoClosedForm, UnsupportedDim

__all__ = [
    "ProcessSpec",
    "PathSample",
    "sample_path",
    "transition_density",
    "resolvent_kernel",
    "is_transient",
    "path_rng",
    "stable_levy_coeff",
    "stable_large_jump_rate",
    "stable_small_jump_std",
    "sample_standard_stable",
    "default_jump_cutoff",
]

PROCESS_KINDS = ("brownian", "brownian_killed_alpha", "alpha_stable_1d")


@dataclass(frozen=True)
class ProcessSpec:
    kind: str
    dim: int = 1
    alpha_stable_index: Optional[float] = None
    kill_rate: float = 0.0
    jump_cutoff: Optional[float] = None

    def __post_init__(self):
        if self.kind not in PROCESS_KINDS:
            raise InvalidInput(f"unknown process kind {self.kind!r}")
        if self.dim < 1:
            raise InvalidInput("dim must be >= 1")
        if self.kind == "alpha_stable_1d":
            a = self.alpha_stable_index
            if a is None or not (0.0 < a < 2.0):
                raise InvalidInput("alpha_stable_1d needs a stable index in (0, 2)")
            if self.dim != 1:
                raise UnsupportedDim("stable simulation is 1-d only")
        if self.kill_rate < 0:
            raise InvalidInput("kill_rate must be >= 0")
        if self.kind == "brownian_killed_alpha" and self.kill_rate <= 0:
            raise InvalidInput("brownian_killed_alpha needs kill_rate > 0")

    @property
    def is_stable(self) -> bool:
        return self.kind == "alpha_stable_1d"


@dataclass
class PathSample:
    """One discretized trajectory; jump rows are (time, from_point, to_point)."""

    times: np.ndarray
    positions: np.ndarray
    jumps: List[Tuple[float, np.ndarray, np.ndarray]] = field(default_factory=list)
    killed_at: Optional[float] = None
    rng_stream_id: int = 0

    def position_at(self, t: float) -> np.ndarray:
        """Linear interpolation along the recorded grid (constant across jumps)."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = max(0, min(i, len(self.times) - 1))
        if i == len(self.times) - 1 or self.times[i + 1] == self.times[i]:
            return self.positions[i]
        w = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return (1 - w) * self.positions[i] + w * self.positions[i + 1]


def path_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream: reproducible independently of scheduling."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# symmetric stable helpers (unit exponent |xi|^alpha per unit time)
# ---------------------------------------------------------------------------


def stable_levy_coeff(alpha: float) -> float:
    """One-sided jump density coefficient K: nu(dz) = K |z|^{-1-alpha} dz per side."""
    return math.gamma(1.0 + alpha) * math.sin(math.pi * alpha / 2.0) / math.pi


def stable_large_jump_rate(alpha: float, cutoff: float) -> float:
    """Intensity of jumps with |z| >= cutoff, both sides together."""
    return 2.0 * stable_levy_coeff(alpha) * cutoff ** (-alpha) / alpha


def stable_small_jump_std(alpha: float, cutoff: float, dt: float) -> float:
    """Matched standard deviation of the lumped below-cutoff jump activity over dt."""
    var_rate = 2.0 * stable_levy_coeff(alpha) * cutoff ** (2.0 - alpha) / (2.0 - alpha)
    return math.sqrt(var_rate * dt)


def default_jump_cutoff(alpha: float, horizon: float) -> float:
    return 1e-3 * horizon ** (1.0 / alpha)


def sample_standard_stable(rng: np.random.Generator, alpha: float, size) -> np.ndarray:
    """Chambers-Mallows-Stuck draw of the symmetric stable law with cf exp(-|xi|^alpha)."""
    u = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size=size)
    w = rng.standard_exponential(size=size)
    if abs(alpha - 1.0) < 1e-12:
        return np.tan(u)
    s = np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)
    return s * (np.cos(u - alpha * u) / w) ** ((1.0 - alpha) / alpha)


# ---------------------------------------------------------------------------
# path sampling
# ---------------------------------------------------------------------------


def sample_path(spec: ProcessSpec, x0, horizon: float, dt: float, seed: int) -> PathSample:
    """One trajectory on the grid {0, dt, 2dt, ...} up to the horizon.

    Brownian marginals at grid times are exact.  Killing truncates the grid at
    the first time past the exponential clock.  Stable paths record every jump
    of size >= jump_cutoff as an extra (time, from, to) row, duplicating the
    jump instant in the time grid so the endpoints sit in consecutive slots.
    """
    if dt <= 0:
        raise InvalidStep("dt must be positive")
    if horizon <= 0 or dt > horizon:
        raise InvalidStep("need 0 < dt <= horizon")
    rng = path_rng(seed)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.dim,):
        raise InvalidInput(f"x0 must have dim {spec.dim}")
    n_steps = int(round(horizon / dt))
    grid = dt * np.arange(n_steps + 1)

    killed_at = None
    if spec.kill_rate > 0:
        zeta = rng.exponential(1.0 / spec.kill_rate)
        if zeta <= horizon:
            killed_at = float(zeta)
            n_steps = int(math.ceil(zeta / dt))
            grid = dt * np.arange(n_steps + 1)

    if not spec.is_stable:
        incs = rng.normal(0.0, math.sqrt(dt), size=(n_steps, spec.dim))
        pos = np.vstack([x0, x0 + np.cumsum(incs, axis=0)])
        return PathSample(times=grid, positions=pos, jumps=[], killed_at=killed_at,
                          rng_stream_id=seed)

    alpha = spec.alpha_stable_index
    cutoff = spec.jump_cutoff if spec.jump_cutoff is not None else default_jump_cutoff(alpha, horizon)
    if cutoff <= 0:
        raise InvalidInput("jump_cutoff must be positive")
    lam = stable_large_jump_rate(alpha, cutoff)
    sig = stable_small_jump_std(alpha, cutoff, dt)

    times = [0.0]
    positions = [x0.copy()]
    jumps: List[Tuple[float, np.ndarray, np.ndarray]] = []
    x = x0.copy()
    for k in range(n_steps):
        t0 = grid[k]
        n_jumps = rng.poisson(lam * dt)
        if n_jumps == 0:
            x = x + rng.normal(0.0, sig)
            times.append(grid[k + 1])
            positions.append(x.copy())
            continue
        jump_times = np.sort(rng.uniform(t0, t0 + dt, size=n_jumps))
        magnitudes = cutoff * rng.uniform(size=n_jumps) ** (-1.0 / alpha)
        signs = rng.choice([-1.0, 1.0], size=n_jumps)
        prev_t = t0
        for jt, jm, js in zip(jump_times, magnitudes, signs):
            sub = jt - prev_t
            x = x + rng.normal(0.0, sig * math.sqrt(sub / dt))
            times.append(float(jt))
            positions.append(x.copy())
            x_from = x.copy()
            x = x + np.array([js * jm])
            times.append(float(jt))
            positions.append(x.copy())
            jumps.append((float(jt), x_from, x.copy()))
            prev_t = jt
        sub = t0 + dt - prev_t
        x = x + rng.normal(0.0, sig * math.sqrt(sub / dt))
        times.append(grid[k + 1])
        positions.append(x.copy())

    return PathSample(times=np.asarray(times), positions=np.asarray(positions),
                      jumps=jumps, killed_at=killed_at, rng_stream_id=seed)


# ---------------------------------------------------------------------------
# transition densities
# ---------------------------------------------------------------------------


def _gauss_density(t: float, r2: float, dim: int) -> float:
    return (2.0 * math.pi * t) ** (-dim / 2.0) * math.exp(-r2 / (2.0 * t))


_stable_density_cache: dict = {}


def _stable_density(alpha: float, t: float, r: float) -> float:
    """Fourier inversion of exp(-t |xi|^alpha) on R."""
    if abs(alpha - 1.0) < 1e-12:
        return t / (math.pi * (t * t + r * r))
    if r == 0.0:
        return math.gamma(1.0 + 1.0 / alpha) / (math.pi * t ** (1.0 / alpha))
    # self-similarity: reduce to t = 1 with a cached oscillatory quadrature
    scale = t ** (1.0 / alpha)
    u = r / scale
    key = (round(alpha, 12), round(u, 12))
    if key not in _stable_density_cache:
        val, _ = integrate.quad(lambda xi: math.exp(-(xi ** alpha)), 0.0, np.inf,
                                weight="cos", wvar=u, limit=400)
        _stable_density_cache[key] = val / math.pi
    return max(_stable_density_cache[key], 0.0) / scale


def transition_density(spec: ProcessSpec, t: float, x, y) -> float:
    """Closed-form (or Fourier-inverted) transition density p_t(x, y)."""
    if t <= 0:
        raise InvalidInput("need t > 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r = float(np.linalg.norm(x - y))
    if spec.kind in ("brownian", "brownian_killed_alpha"):
        val = _gauss_density(t, r * r, spec.dim)
        return val * math.exp(-spec.kill_rate * t)
    if spec.kind == "alpha_stable_1d":
        val = _stable_density(spec.alpha_stable_index, t, r)
        return val * math.exp(-spec.kill_rate * t)
    raise NoClosedForm(f"no density formula for {spec.kind}")


# ---------------------------------------------------------------------------
# resolvent kernels
# ---------------------------------------------------------------------------


def is_transient(spec: ProcessSpec) -> bool:
    if spec.kill_rate > 0:
        return True
    if spec.kind in ("brownian", "brownian_killed_alpha"):
        return spec.dim >= 3
    return spec.alpha_stable_index < 1.0


def resolvent_kernel(spec: ProcessSpec, alpha: float, x, y) -> float:
    """R_alpha(x, y) = int_0^inf e^{-alpha t} p_t(x, y) dt; math.inf marks divergence."""
    if alpha < 0:
        raise InvalidInput("need alpha >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r = float(np.linalg.norm(x - y))
    a_eff = alpha + spec.kill_rate

    if spec.kind in ("brownian", "brownian_killed_alpha"):
        d = spec.dim
        if a_eff == 0.0:
            if d <= 2:
                return math.inf
            if d == 3:
                if r == 0.0:
                    return math.inf
                return 1.0 / (2.0 * math.pi * r)
            if r == 0.0:
                return math.inf
            # d >= 4: Newtonian potential of the half Laplacian
            return math.gamma(d / 2.0 - 1.0) / (2.0 * math.pi ** (d / 2.0)) * r ** (2 - d)
        k = math.sqrt(2.0 * a_eff)
        if d == 1:
            return math.exp(-k * r) / k
        if r == 0.0:
            return math.inf if d >= 2 else 1.0 / k
        if d == 2:
            return float(special.k0(k * r)) / math.pi
        if d == 3:
            return math.exp(-k * r) / (2.0 * math.pi * r)
        return _resolvent_time_quad(spec, alpha, r)

    # 1-d symmetric stable
    a_idx = spec.alpha_stable_index
    if a_eff == 0.0:
        if a_idx >= 1.0:
            return math.inf
        if r == 0.0:
            return math.inf
        return r ** (a_idx - 1.0) * math.gamma(1.0 - a_idx) * math.sin(math.pi * a_idx / 2.0) / math.pi
    if r == 0.0:
        if a_idx <= 1.0:
            return math.inf
        val, _ = integrate.quad(lambda xi: 1.0 / (a_eff + xi ** a_idx), 0.0, np.inf, limit=200)
        return val / math.pi
    val, _ = integrate.quad(lambda xi: 1.0 / (a_eff + xi ** a_idx), 0.0, np.inf,
                            weight="cos", wvar=r, limit=400)
    return max(val, 0.0) / math.pi


def _resolvent_time_quad(spec: ProcessSpec, alpha: float, r: float) -> float:
    def f(t):
        return math.exp(-alpha * t) * _gauss_density(t, r * r, spec.dim) * math.exp(-spec.kill_rate * t)

    val, _ = integrate.quad(f, 0.0, np.inf, epsrel=1e-6, limit=400)
    return val
