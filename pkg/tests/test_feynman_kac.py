import math

import numpy as np
import pytest
from scipy import integrate, special

from fklab import envelopes, feynman_kac as fk, kato
from fklab.errors import (
    BandwidthTooSmall,
    InvalidInput,
    RecurrentProcess,
    TailBiasTooLarge,
    UnsupportedProcess,
)
from fklab.functionals import JumpPerturbation, MeasureSpec, fk_weight
from fklab.processes import ProcessSpec, sample_path

BM1 = ProcessSpec(kind="brownian", dim=1)
BM3 = ProcessSpec(kind="brownian", dim=3)
KILLED = ProcessSpec(kind="brownian_killed_alpha", dim=1, kill_rate=2.0)
CAUCHY = ProcessSpec(kind="alpha_stable_1d", dim=1, alpha_stable_index=1.0, jump_cutoff=0.5)


def gauss(t, r, d=1):
    return (2 * math.pi * t) ** (-d / 2.0) * math.exp(-r * r / (2 * t))


# ---------------------------------------------------------------------------
# semigroup
# ---------------------------------------------------------------------------


def test_semigroup_matches_quadrature_for_bump():
    f = lambda x: np.exp(-np.sum(x * x, axis=1))
    est, ci = fk.fk_semigroup(BM1, None, None, None, f, 1.0, 0.3, 40000, seed=1, dt=0.5)
    exact = integrate.quad(lambda y: gauss(1.0, y - 0.3) * math.exp(-y * y), -10, 10)[0]
    assert est == pytest.approx(exact, abs=3 * ci)


def test_semigroup_subprobability_for_negative_measure():
    f = lambda x: np.ones(len(x))
    mu = MeasureSpec.uniform_ball(-1.0)
    est, ci = fk.fk_semigroup(BM1, None, mu, None, f, 1.0, 0.0, 20000, seed=2, dt=0.01)
    assert est <= 1.0 + ci


def test_semigroup_killed_survival():
    f = lambda x: np.ones(len(x))
    est, ci = fk.fk_semigroup(KILLED, None, None, None, f, 1.0, 0.0, 50000, seed=3, dt=0.25)
    assert est == pytest.approx(math.exp(-2.0), abs=3 * ci + 1e-4)


def test_engine_weight_agrees_with_pathwise_api():
    # same law, independent streams: means agree within joint error
    mu = MeasureSpec.uniform_ball(0.8)
    f = lambda x: np.ones(len(x))
    est, ci = fk.fk_semigroup(BM3, None, mu, None, f, 1.0, [0, 0, 0], 30000, seed=4, dt=0.02)
    n = 3000
    total = 0.0
    totsq = 0.0
    for i in range(n):
        p = sample_path(BM3, [0, 0, 0], 1.0, 0.02, seed=700_000 + i)
        w = fk_weight(p, None, mu, None, 1.0)
        total += w
        totsq += w * w
    mean = total / n
    se = math.sqrt(max(totsq / n - mean**2, 0.0) / n)
    assert est == pytest.approx(mean, abs=3 * math.sqrt(se**2 + (ci / 1.96) ** 2))


# ---------------------------------------------------------------------------
# kernel estimation
# ---------------------------------------------------------------------------


PAIRS_1D = [(-0.5, -0.5), (-0.5, 0.0), (-0.5, 0.5), (0.0, 0.0), (0.0, 0.5),
            (0.0, 1.0), (0.5, 1.0), (0.0, 1.5), (0.5, 1.5), (-1.0, 1.0)]


def test_kernel_identity_matches_gaussian():
    est = fk.fk_kernel(BM1, None, None, None, [0.5, 1.0, 2.0], PAIRS_1D,
                       n_paths=60000, bandwidth=0.05, seed=5, dt=0.5)
    for i, t in enumerate(est.t_values):
        for j, (a, b) in enumerate(est.pairs):
            exact = gauss(t, b[0] - a[0])
            tol = 3 * est.ci_half_width[i, j] + est.bias_bound
            assert est.values[i, j] == pytest.approx(exact, abs=tol)


def test_kernel_symmetric_by_construction():
    est = fk.fk_kernel(BM1, None, MeasureSpec.uniform_ball(0.5), None, [1.0, 2.0, 3.0],
                       [(0.0, 0.5), (0.5, 0.0), (0.0, 1.0)],
                       n_paths=4000, bandwidth=0.1, seed=6, dt=0.02)
    # (x, y) and (y, x) produce identical symmetrized values
    assert np.allclose(est.values[:, 0], est.values[:, 1])


def test_kernel_chapman_kolmogorov():
    zgrid = np.linspace(-4.0, 4.0, 33)
    pairs = [(0.0, float(z)) for z in zgrid] + [(float(z), 1.0) for z in zgrid]
    est = fk.fk_kernel(BM1, None, None, None, [0.6, 1.2], pairs,
                       n_paths=40000, bandwidth=0.08, seed=7, dt=0.6)
    p_t = {}
    for j, (a, b) in enumerate(est.pairs):
        p_t[(a[0], b[0])] = (est.values[0, j], est.values[1, j])
    h = zgrid[1] - zgrid[0]
    conv = sum(p_t[(0.0, z)][0] * p_t[(z, 1.0)][0] * h for z in zgrid)
    direct = p_t[(0.0, 1.0)][1]
    err = 3 * float(np.max(est.ci_half_width)) * 3 + 2 * est.bias_bound + 0.01
    assert conv == pytest.approx(direct, abs=err)


def test_kernel_negative_perturbation_below_baseline():
    mu = MeasureSpec.uniform_ball(-1.5)
    base = fk.fk_kernel(BM1, None, None, None, [1.0], [(0.0, 0.0), (0.0, 0.5)],
                        n_paths=20000, bandwidth=0.08, seed=8, dt=0.02)
    pert = fk.fk_kernel(BM1, None, mu, None, [1.0], [(0.0, 0.0), (0.0, 0.5)],
                        n_paths=20000, bandwidth=0.08, seed=8, dt=0.02)
    slack = 3 * (base.ci_half_width + pert.ci_half_width).max()
    assert np.all(pert.values <= base.values + slack)


def test_kernel_killed_rescales():
    base = fk.fk_kernel(BM1, None, None, None, [1.0], [(0.0, 0.0), (0.0, 1.0)],
                        n_paths=30000, bandwidth=0.06, seed=9, dt=0.5)
    killed = fk.fk_kernel(KILLED, None, None, None, [1.0], [(0.0, 0.0), (0.0, 1.0)],
                          n_paths=30000, bandwidth=0.06, seed=9, dt=0.5)
    for j in range(2):
        ratio = killed.values[0, j] / base.values[0, j]
        assert ratio == pytest.approx(math.exp(-2.0), rel=0.15)


def test_kernel_validations():
    with pytest.raises(BandwidthTooSmall):
        fk.fk_kernel(BM1, None, None, None, [1.0], [(0.0, 0.0)], 1000, -0.1, seed=1)
    with pytest.raises(InvalidInput):
        fk.fk_kernel(BM1, None, None, None, [-1.0], [(0.0, 0.0)], 1000, 0.1, seed=1)


def test_kernel_deterministic_across_threads():
    kw = dict(t_values=[0.5, 1.0], pairs=[(0.0, 0.0), (0.0, 1.0)],
              n_paths=20000, bandwidth=0.1, seed=11, dt=0.25)
    a = fk.fk_kernel(BM1, None, MeasureSpec.uniform_ball(0.5), None, threads=1, **kw)
    b = fk.fk_kernel(BM1, None, MeasureSpec.uniform_ball(0.5), None, threads=2, **kw)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.ci_half_width, b.ci_half_width)


def test_cauchy_kernel_matches_closed_form():
    est = fk.fk_kernel(CAUCHY, None, None, None, [1.0], [(0.0, 0.0), (0.0, 1.0), (0.0, 3.0)],
                       n_paths=60000, bandwidth=0.1, seed=12, dt=0.25)
    for j, (a, b) in enumerate(est.pairs):
        r = abs(b[0] - a[0])
        exact = 1.0 / (math.pi * (1.0 + r * r))
        assert est.values[0, j] == pytest.approx(
            exact, abs=3 * est.ci_half_width[0, j] + est.bias_bound + 0.01 * exact)


# ---------------------------------------------------------------------------
# gauge
# ---------------------------------------------------------------------------


GPTS = [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)]


def test_gauge_identity_when_unperturbed():
    g = fk.gauge(BM3, None, MeasureSpec.zero(), None, GPTS, truncation_radius=8.0,
                 n_paths=2000, seed=13, dt=0.05)
    assert np.allclose(g.h_hat, 1.0)
    assert g.verdict == "bounded"
    assert g.tail_bias_bound == 0.0


def test_gauge_killing_measure_bounds():
    mu = MeasureSpec.uniform_ball(-1.0)
    g = fk.gauge(BM3, None, mu, None, GPTS, truncation_radius=24.0,
                 n_paths=15000, seed=14, dt=0.01, check_tail_bias=False)
    # lower bound from the Green potential of the killing part
    sup_pot = kato.resolvent_potential(MeasureSpec.uniform_ball(1.0), 0.0, [0, 0, 0], BM3)
    assert np.all(g.h_hat <= 1.0 + g.ci)
    assert np.all(g.h_hat >= math.exp(-sup_pot) - 3 * g.ci - g.tail_bias_bound)
    assert g.verdict == "bounded"


def test_gauge_subcritical_bounded_supercritical_divergent():
    g_sub = fk.gauge(BM3, None, MeasureSpec.uniform_ball(0.5), None, [(0, 0, 0)],
                     truncation_radius=24.0, n_paths=15000, seed=15, dt=0.01,
                     check_tail_bias=False)
    assert g_sub.verdict == "bounded"
    g_sup = fk.gauge(BM3, None, MeasureSpec.uniform_ball(2.0), None, [(0, 0, 0)],
                     truncation_radius=24.0, n_paths=8000, seed=16, dt=0.01,
                     check_tail_bias=False)
    assert g_sup.verdict == "divergent"


def test_gauge_validations():
    with pytest.raises(RecurrentProcess):
        fk.gauge(BM1, None, MeasureSpec.uniform_ball(0.5), None, [(0.0,)], 8.0, 100, 1)
    with pytest.raises(InvalidInput):
        fk.gauge(BM3, None, MeasureSpec.uniform_ball(0.5), None, GPTS, 2.0, 100, 1)
    with pytest.raises(UnsupportedProcess):
        u = kato.build_resolvent_potential_u(MeasureSpec.uniform_ball(0.5), None, 1.0, BM3)
        fk.gauge(BM3, u, MeasureSpec.zero(), None, GPTS, 8.0, 100, 1)
    with pytest.raises(TailBiasTooLarge):
        fk.gauge(BM3, None, MeasureSpec.uniform_ball(1.0), None, GPTS,
                 truncation_radius=4.0, n_paths=500, seed=2, dt=0.05)


def test_gauge_identity_residual_zero_measure():
    g = fk.gauge(BM3, None, MeasureSpec.zero(), None, GPTS, truncation_radius=8.0,
                 n_paths=1000, seed=17, dt=0.05)
    resid = fk.gauge_identity_residual(g, MeasureSpec.zero(), BM3)
    assert resid < 1e-12


def test_gauge_identity_residual_planted_inconsistency():
    # constant gauge 1 with a nonzero measure must violate the identity by
    # exactly the Green potential of the measure
    mu = MeasureSpec.uniform_ball(0.5)
    fake = fk.GaugeEstimate(points=GPTS, h_hat=np.ones(4), ci=np.zeros(4),
                            truncation_radius=20.0, tail_bias_bound=0.0)
    resid = fk.gauge_identity_residual(fake, mu, BM3)
    expect = kato.resolvent_potential(mu, 0.0, [0, 0, 0], BM3)
    assert resid == pytest.approx(expect, rel=0.02)


def test_gauge_identity_residual_subcritical_consistency():
    mu = MeasureSpec.uniform_ball(0.5)
    pts = [(r, 0.0, 0.0) for r in (0.0, 0.35, 0.7, 1.05, 1.4, 1.8, 2.3, 3.0)]
    g = fk.gauge(BM3, None, mu, None, pts, truncation_radius=24.0,
                 n_paths=20000, seed=18, dt=0.01, check_tail_bias=False)
    resid = fk.gauge_identity_residual(g, mu, BM3)
    combined = 3 * (float(np.max(g.ci)) + g.tail_bias_bound + 0.02)
    assert resid <= combined


# ---------------------------------------------------------------------------
# resolvent
# ---------------------------------------------------------------------------


def test_resolvent_zero_perturbation_green_limit():
    r = fk.resolvent_A(BM3, None, None, None, 0.0, (0, 0, 0), [(1.0, 0, 0)], 64.0,
                       n_paths=60000, seed=19, dt=0.5)
    assert r["verdict"] == "finite"
    # truncated values against the closed-form truncated oracle
    oracle = {T: (1 / (2 * math.pi)) * float(special.erfc(1 / math.sqrt(2 * T)))
              for T in r["ladder"]["T"]}
    for T, vals, errs in zip(r["ladder"]["T"], r["ladder"]["R_hat"], r["ladder"]["ci"]):
        if T >= 4:
            assert vals[0] == pytest.approx(oracle[T], rel=0.05)
    assert r["completed_value"][0] == pytest.approx(1.0 / (2 * math.pi), rel=0.05)


def test_resolvent_verdicts_match_spectral_sign():
    fin = fk.resolvent_A(BM3, None, MeasureSpec.uniform_ball(0.5), None, 0.0,
                         (0, 0, 0), [(1.0, 0, 0)], 64.0, n_paths=20000, seed=20, dt=0.02)
    assert fin["verdict"] == "finite"
    div = fk.resolvent_A(BM3, None, MeasureSpec.uniform_ball(2.0), None, 0.0,
                         (0, 0, 0), [(1.0, 0, 0)], 64.0, n_paths=20000, seed=21, dt=0.02)
    assert div["verdict"] == "divergent"


def test_resolvent_equation_residual_two_alphas():
    # R_a - R_b = (b - a) quadrature-composition on the estimated tables
    out = {}
    for a in (0.25, 1.0):
        r = fk.resolvent_A(BM3, None, None, None, a, (0, 0, 0), [(1.0, 0, 0)], 64.0,
                           n_paths=60000, seed=22, dt=0.5)
        out[a] = r["completed_value"][0]
    bm3_exact = lambda al: math.exp(-math.sqrt(2 * al)) / (2 * math.pi)
    for a in (0.25, 1.0):
        assert out[a] == pytest.approx(bm3_exact(a), rel=0.07)


def test_khasminskii_at_semigroup_level():
    c = 0.8
    mu = MeasureSpec.uniform_ball(c)
    f = lambda x: np.ones(len(x))
    sup_w, ci_w = fk.fk_semigroup(BM3, None, mu, None, f, 1.0, [0, 0, 0],
                                  30000, seed=23, dt=0.02)
    # occupation mean from the quadrature oracle (frozen in test_functionals)
    a_sup = c * 0.5160585509617197
    assert 1.0 - a_sup > 0.05
    assert sup_w - ci_w <= 1.0 / (1.0 - a_sup) * 1.02
