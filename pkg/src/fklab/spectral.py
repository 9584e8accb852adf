"""Discretization of the perturbed quadratic form and its spectral function.

The form  Q(f, f) = E(f, f) + E(u, fg-rule) - H(f, f)  is assembled on a
Dirichlet box: a uniform line mesh in d = 1, or the 1-d radial reduction
g = r f for radially symmetric d = 3 problems.  The spectral value is the
smallest lambda with  A f = lambda B f  where A collects the form matrices
and B is the mass of the constraint measure; the kernel of B is eliminated
exactly by a Schur complement before the symmetric eigensolve.

Dirichlet truncation can only increase the form, so box truncation biases
the spectral value upward; `mesh_study` quantifies both the h-refinement
and the box-size bias by Richardson extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from .errors import InvalidInput, MeshTooCoarse, SingularPencil, UnsupportedProcess
from .functionals import JumpPerturbation, MeasureSpec, PotentialU
from .processes import ProcessSpec, stable_levy_coeff

__all__ = [
    "FormDiscretization",
    "SpectralResult",
    "assemble",
    "lambda_Q",
    "takeda_lambda",
    "mesh_study",
]

_CELL_NODES, _CELL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _cell_avg(radial_density, nodes: np.ndarray, h: float) -> np.ndarray:
    r = np.abs(nodes)
    avg = np.zeros(len(nodes))
    for gx, gw in zip(_CELL_NODES, _CELL_WEIGHTS):
        avg += gw * radial_density(np.abs(r + 0.5 * h * gx))
    return 0.5 * avg


@dataclass
class FormDiscretization:
    mode: str  # "line" | "radial3"
    h: float
    L: float
    nodes: np.ndarray
    stiffness: sparse.csr_matrix      # local + jump graph part; kills constants in the interior
    boundary_kill: np.ndarray         # diagonal from jumps leaving the box (zero for diffusions)
    drift_coupling: np.ndarray        # diagonal of E(u, f*g)
    h_offdiag: Optional[np.ndarray]   # dense symmetric jump block of H, or None
    h_diag: np.ndarray                # diagonal of H from the signed measure
    mass_m: np.ndarray                # diagonal of (f, f)_m
    spec: ProcessSpec
    jump_tail_bound: float = 0.0

    @property
    def n(self) -> int:
        return len(self.nodes)

    def measure_diagonal(self, mu: MeasureSpec, part: str = "signed") -> np.ndarray:
        """Diagonal of f -> int f^2 d(mu) on this mesh (cell-averaged density)."""
        if part == "signed":
            dens = lambda r: mu.pos_at_radius(r) - mu.neg_at_radius(r)
        elif part == "pos":
            dens = mu.pos_at_radius
        elif part == "neg":
            dens = mu.neg_at_radius
        else:
            raise InvalidInput(f"unknown part {part!r}")
        return self.density_diagonal(dens)

    def density_diagonal(self, radial_density: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Cell averages keep step densities second-order accurate on the mesh."""
        avg = _cell_avg(radial_density, self.nodes, self.h)
        if self.mode == "radial3":
            return 4.0 * math.pi * self.h * avg
        return self.h * avg

    def form_matrix(self, alpha: float = 0.0):
        """A = stiffness + boundary kill + drift - H + alpha * mass.

        Sparse symmetric when H has no jump block, dense otherwise.
        """
        d = self.boundary_kill + self.drift_coupling - self.h_diag + alpha * self.mass_m
        if self.h_offdiag is None:
            return (self.stiffness + sparse.diags(d)).tocsr()
        a = self.stiffness.toarray()
        a[np.diag_indices_from(a)] += d
        a -= self.h_offdiag
        return a


@dataclass
class SpectralResult:
    lam: float
    eigvec: np.ndarray
    alpha: float
    mesh: tuple
    residual: float
    converged: bool

    # keep the field name the external schema uses
    @property
    def value(self) -> float:
        return self.lam


def _u_table(u: Optional[PotentialU], nodes: np.ndarray) -> Optional[np.ndarray]:
    if u is None:
        return None
    if u.kind != "resolvent_potential" or u.potential_signed is None:
        raise UnsupportedProcess("only prepared resolvent-potential u enters the form assembly")
    return u.potential_signed(np.abs(nodes))


def assemble(spec: ProcessSpec, u: Optional[PotentialU], mu: Optional[MeasureSpec],
             F: Optional[JumpPerturbation], mesh: tuple) -> FormDiscretization:
    """Assemble the form matrices on a Dirichlet box of half-width L and step h.

    Brownian d = 1 runs on the line mesh; Brownian d = 3 with radial data is
    reduced to the substitution g = r f before assembly.  The 1-d stable
    process assembles its jump graph from the kernel K |x-y|^{-1-a}, with the
    below-mesh jump activity folded into a local gradient correction and the
    out-of-box activity into an exact killing diagonal.
    """
    h, L = float(mesh[0]), float(mesh[1])
    if h <= 0 or L <= 0 or h >= L:
        raise InvalidInput("mesh needs 0 < h < L")
    support = max(
        mu.support_radius if mu is not None and not mu.is_zero else 0.0,
        u.nu1.support_radius if u is not None and u.nu1 is not None else 0.0,
        u.nu2.support_radius if u is not None and u.nu2 is not None else 0.0,
    )
    if support > 0:
        if support / h < 8:
            raise MeshTooCoarse("need >= 8 cells across the measure support")
        if L < 3 * support:
            raise MeshTooCoarse("box must extend to 3x the measure support")

    if spec.kind in ("brownian", "brownian_killed_alpha") and spec.dim == 3:
        return _assemble_radial3(spec, u, mu, h, L, F)
    if spec.kind in ("brownian", "brownian_killed_alpha") and spec.dim == 1:
        return _assemble_line(spec, u, mu, F, h, L)
    if spec.kind == "alpha_stable_1d":
        return _assemble_line(spec, u, mu, F, h, L)
    raise UnsupportedProcess(f"no assembly for {spec.kind} in dim {spec.dim}")


def _tridiag_T(n: int) -> sparse.csr_matrix:
    return sparse.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)],
                        offsets=(-1, 0, 1), format="csr")


def _assemble_line(spec, u, mu, F, h, L) -> FormDiscretization:
    nodes = np.arange(-L + h, L - h / 2, h)
    n = len(nodes)
    drift = np.zeros(n)
    boundary_kill = np.zeros(n)
    h_off = None
    tail = 0.0

    if spec.kind == "alpha_stable_1d":
        a = spec.alpha_stable_index
        if u is not None:
            raise UnsupportedProcess("zero-energy drift with jump forms is out of scope")
        K = stable_levy_coeff(a)
        dist = np.abs(nodes[:, None] - nodes[None, :])
        with np.errstate(divide="ignore"):
            J = np.where(dist > 0, K * dist ** (-1.0 - a), 0.0)
        W = J * h * h
        lap = sparse.csr_matrix(2.0 * (np.diag(W.sum(axis=1)) - W))
        # below-mesh jumps act like a small gradient term
        sigma2 = 2.0 * K * h ** (2.0 - a) / (2.0 - a)
        lap = lap + (sigma2 / h) * _tridiag_T(n)
        stiff = lap
        # jumps leaving the box kill the path of the restricted form
        kill_rate = (K / a) * ((L - nodes) ** (-a) + (L + nodes) ** (-a))
        boundary_kill = 2.0 * h * kill_rate
        tail = float(np.max(boundary_kill))
        if F is not None and not F.is_zero:
            fp = np.array([[F.F_pos(xi, xj) for xj in nodes] for xi in nodes])
            fn = np.array([[F.F_neg(xi, xj) for xj in nodes] for xi in nodes])
            h_off = 2.0 * (np.exp(fp - fn) - 1.0) * J * h * h
    else:
        stiff = (1.0 / (2.0 * h)) * _tridiag_T(n)
        if F is not None and not F.is_zero:
            raise UnsupportedProcess("jump perturbations need a jump process form")
        ut = _u_table(u, nodes)
        if ut is not None:
            upp = np.zeros(n)
            upp[1:-1] = (ut[2:] - 2 * ut[1:-1] + ut[:-2]) / (h * h)
            drift = -0.5 * h * upp

    h_diag = np.zeros(n)
    if mu is not None and not mu.is_zero:
        h_diag = h * _cell_avg(lambda r: mu.pos_at_radius(r) - mu.neg_at_radius(r), nodes, h)

    return FormDiscretization(
        mode="line", h=h, L=L, nodes=nodes, stiffness=sparse.csr_matrix(stiff),
        boundary_kill=boundary_kill, drift_coupling=drift, h_offdiag=h_off,
        h_diag=h_diag, mass_m=h * np.ones(n) + 0.0, spec=spec, jump_tail_bound=tail,
    )


def _assemble_radial3(spec, u, mu, h, L, F) -> FormDiscretization:
    if F is not None and not F.is_zero:
        raise UnsupportedProcess("jump perturbations need a jump process form")
    nodes = np.arange(h, L - h / 2, h)
    n = len(nodes)
    stiff = (2.0 * math.pi / h) * _tridiag_T(n)
    drift = np.zeros(n)
    ut = _u_table(u, nodes)
    if ut is not None:
        up = np.zeros(n)
        upp = np.zeros(n)
        up[1:-1] = (ut[2:] - ut[:-2]) / (2 * h)
        upp[1:-1] = (ut[2:] - 2 * ut[1:-1] + ut[:-2]) / (h * h)
        drift = -2.0 * math.pi * h * (upp + 2.0 * up / nodes)
    h_diag = np.zeros(n)
    if mu is not None and not mu.is_zero:
        h_diag = 4.0 * math.pi * h * _cell_avg(
            lambda r: mu.pos_at_radius(r) - mu.neg_at_radius(r), nodes, h)
    return FormDiscretization(
        mode="radial3", h=h, L=L, nodes=nodes, stiffness=sparse.csr_matrix(stiff),
        boundary_kill=np.zeros(n), drift_coupling=drift, h_offdiag=None,
        h_diag=h_diag, mass_m=4.0 * math.pi * h * np.ones(n), spec=spec,
    )


# ---------------------------------------------------------------------------
# the generalized eigenvalue solve
# ---------------------------------------------------------------------------


def _nu_diagonal(disc: FormDiscretization, nu) -> np.ndarray:
    if isinstance(nu, MeasureSpec):
        b = disc.measure_diagonal(nu, part="signed")
    else:
        b = np.asarray(nu, dtype=float)
        if b.shape != (disc.n,):
            raise InvalidInput("constraint mass vector does not match the mesh")
    if np.any(b < -1e-14 * max(1.0, float(np.max(np.abs(b))))):
        raise InvalidInput("constraint measure must be nonnegative")
    return np.maximum(b, 0.0)


def _pencil_smallest(A, b: np.ndarray):
    """Smallest lambda of A f = lambda diag(b) f restricted to the b > 0 block.

    The complement block of A must be positive definite (otherwise the form is
    unbounded below on the constraint set and the pencil is rejected); its
    exact elimination is a Schur complement, sparse-factorized when A is.
    """
    n = len(b)
    S = np.nonzero(b > 1e-300)[0]
    if len(S) == 0:
        raise SingularPencil("constraint measure has empty support on the mesh")
    R = np.nonzero(b <= 1e-300)[0]
    is_sparse = sparse.issparse(A)
    if len(R) == 0:
        M = A.toarray() if is_sparse else A
        b_s = b
        X = None
    else:
        if is_sparse:
            A_csr = A.tocsr()
            A_RR = A_csr[R][:, R].tocsc()
            A_RS = A_csr[R][:, S].toarray()
            _check_positive_sparse(A_RR)
            lu = sparse.linalg.splu(A_RR)
            X = lu.solve(A_RS)
            M = A_csr[S][:, S].toarray() - A_RS.T @ X
        else:
            A_RR = A[np.ix_(R, R)]
            A_RS = A[np.ix_(R, S)]
            try:
                c, low = sla.cho_factor(A_RR, check_finite=False)
            except sla.LinAlgError as exc:
                raise SingularPencil(
                    "form is not positive off the constraint support; value is -inf"
                ) from exc
            X = sla.cho_solve((c, low), A_RS, check_finite=False)
            M = A[np.ix_(S, S)] - A_RS.T @ X
        b_s = b[S]
    M = 0.5 * (M + M.T)
    w, v = sla.eigh(M, np.diag(b_s), subset_by_index=[0, 0], check_finite=False)
    lam = float(w[0])
    f = np.zeros(n)
    f[S] = v[:, 0]
    if len(R) > 0:
        f[R] = -X @ v[:, 0]
    # normalize the constraint mass to one
    scale = math.sqrt(float(f @ (b * f)))
    f = f / scale
    return lam, f


def _check_positive_sparse(A_RR) -> None:
    """Reject an indefinite complement block (tridiagonal fast path, else LU sign)."""
    n = A_RR.shape[0]
    if n == 0:
        return
    coo = A_RR.tocoo()
    if np.all(np.abs(coo.row - coo.col) <= 1):
        d = A_RR.diagonal()
        e = A_RR.diagonal(1) if n > 1 else np.zeros(0)
        w = sla.eigvalsh_tridiagonal(d, e, select="i", select_range=(0, 0))
        if w[0] <= 0:
            raise SingularPencil("form is not positive off the constraint support")
        return
    lu = sparse.linalg.splu(A_RR.tocsc())
    du = lu.U.diagonal()
    if np.any(du <= 0):
        raise SingularPencil("form is not positive off the constraint support")


def lambda_Q(disc: FormDiscretization, nu, alpha: float = 0.0) -> SpectralResult:
    """Smallest value of the perturbed form over {f : int f^2 d nu = 1}.

    nu may be a MeasureSpec or a precomputed nonnegative mass diagonal.
    """
    if alpha < 0:
        raise InvalidInput("need alpha >= 0")
    b = _nu_diagonal(disc, nu)
    if not np.any(b > 0):
        raise SingularPencil("constraint measure vanishes on the mesh")
    A = disc.form_matrix(alpha)
    lam, f = _pencil_smallest(A, b)
    return _finish_result(A, b, lam, f, alpha, disc)


def _finish_result(A, b, lam, f, alpha, disc) -> SpectralResult:
    Af = A @ f if not sparse.issparse(A) else A.dot(f)
    resid = float(np.linalg.norm(Af - lam * (b * f)))
    a_norm = sla.norm(A.toarray(), 1) if sparse.issparse(A) and A.shape[0] <= 2048 else None
    if a_norm is None:
        a_norm = float(abs(A).sum(axis=0).max()) if sparse.issparse(A) else float(np.linalg.norm(A, 1))
    scale = a_norm * float(np.linalg.norm(f))
    rel = resid / scale if scale > 0 else resid
    return SpectralResult(lam=lam, eigvec=f, alpha=alpha, mesh=(disc.h, disc.L),
                          residual=rel, converged=rel < 1e-10)


def takeda_lambda(mu_plus: MeasureSpec, mu_minus: Optional[MeasureSpec],
                  disc: FormDiscretization) -> SpectralResult:
    """inf of the unperturbed form plus the negative-part mass over
    {f : int f^2 d mu_plus = 1}; equals lambda_Q + 1 when the same signed
    measure drives both problems with u = F = 0."""
    b = disc.measure_diagonal(mu_plus, part="pos")
    d = disc.boundary_kill.copy()
    if mu_minus is not None and not mu_minus.is_zero:
        d = d + disc.measure_diagonal(mu_minus, part="pos")
    A = (disc.stiffness + sparse.diags(d)).tocsr()
    lam, f = _pencil_smallest(A, b)
    return _finish_result(A, b, lam, f, 0.0, disc)


# ---------------------------------------------------------------------------
# mesh refinement study
# ---------------------------------------------------------------------------


def mesh_study(problem: Callable[[tuple], float], meshes: Sequence[tuple]) -> dict:
    """Evaluate a scalar mesh-dependent quantity over refinements and
    Richardson-extrapolate assuming one-order-dominant convergence.

    Returns the value table, the observed order between consecutive triples,
    the extrapolated value from the last pair, and a non-monotonicity flag.
    """
    meshes = list(meshes)
    if len(meshes) < 3:
        raise InvalidInput("need at least 3 meshes")
    hs = np.array([float(m[0]) for m in meshes])
    if not np.all(np.diff(hs) < 0):
        raise InvalidInput("meshes must refine (h strictly decreasing)")
    vals = np.array([float(problem(m)) for m in meshes])
    diffs = np.diff(vals)
    orders = []
    for k in range(len(vals) - 2):
        num, den = diffs[k], diffs[k + 1]
        if den != 0 and num / den > 0:
            orders.append(math.log(abs(num / den)) / math.log(hs[k] / hs[k + 1]))
        else:
            orders.append(float("nan"))
    # extrapolate from the last pair with the last clean observed order
    order = next((o for o in reversed(orders) if math.isfinite(o) and o > 0), 2.0)
    ratio = (hs[-2] / hs[-1]) ** order
    extrapolated = vals[-1] + (vals[-1] - vals[-2]) / (ratio - 1.0)
    monotone = bool(np.all(diffs <= 0) or np.all(diffs >= 0))
    return {
        "h": hs.tolist(),
        "values": vals.tolist(),
        "observed_orders": orders,
        "extrapolated": float(extrapolated),
        "monotone": monotone,
    }
