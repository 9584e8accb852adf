import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fklab import envelopes as env
from fklab.envelopes import (
    EnvelopeFamily,
    ScalingFunction,
    VolumeFunction,
    check_scaling,
    envelope_profile,
    eval_envelope,
    fit_envelope,
    lower_holds,
    phi_big,
    upper_holds,
)
from fklab.errors import (
    DegenerateEstimate,
    InsufficientData,
    InvalidGrid,
    InvalidInput,
    NonSuperlinearScaling,
)
from fklab.feynman_kac import KernelEstimate

PHI2 = ScalingFunction.power(2)
VOL1 = VolumeFunction.lebesgue(1)
VOL3 = VolumeFunction.lebesgue(3)


# ---------------------------------------------------------------------------
# phi_big
# ---------------------------------------------------------------------------


def test_phi_big_quadratic_closed_form():
    # sup_r (s/r - t/r^2) = s^2/(4t), stationary point r = 2t/s
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = 10 ** rng.uniform(-2, 2)
        t = 10 ** rng.uniform(-2, 2)
        assert phi_big(s, t, PHI2) == pytest.approx(s * s / (4 * t), abs=1e-8, rel=1e-8)


def test_phi_big_zero_s():
    assert phi_big(0.0, 1.0, PHI2) == 0.0
    assert phi_big(0.0, 1.0, ScalingFunction.power(1.5)) == 0.0


@pytest.mark.parametrize("beta", [1.5, 2.0, 3.0])
def test_phi_big_power_scaling_exponent(beta):
    phi = ScalingFunction.power(beta)
    svals = np.array([1.0, 2.0, 4.0, 8.0])
    vals = np.array([phi_big(s, 1.0, phi) for s in svals])
    slope = np.polyfit(np.log(svals), np.log(vals), 1)[0]
    assert slope == pytest.approx(beta / (beta - 1.0), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(s=st.floats(0.01, 50.0), t=st.floats(0.01, 50.0))
def test_phi_big_homogeneity(s, t):
    assert phi_big(s, t, PHI2) == pytest.approx(t * phi_big(s / t, 1.0, PHI2), abs=1e-8)


def test_phi_big_monotone_and_nonnegative():
    phi = ScalingFunction.power(1.7)
    svals = np.linspace(0.0, 5.0, 11)
    tvals = np.linspace(0.2, 5.0, 9)
    for t in tvals:
        vals = [phi_big(s, t, phi) for s in svals]
        assert all(v >= 0.0 for v in vals)
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    for s in svals:
        vals = [phi_big(s, t, phi) for t in tvals]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_phi_big_rejects_bad_inputs():
    with pytest.raises(InvalidInput):
        phi_big(-1.0, 1.0, PHI2)
    with pytest.raises(InvalidInput):
        phi_big(1.0, 0.0, PHI2)


def test_phi_big_sublinear_unbounded():
    ident = ScalingFunction.power(1.0)
    # s <= t keeps the supremum finite (zero); s > t makes it blow up
    assert phi_big(0.5, 1.0, ident) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(NonSuperlinearScaling):
        phi_big(2.0, 1.0, ident)


# ---------------------------------------------------------------------------
# scaling checks
# ---------------------------------------------------------------------------


def _loggrid_pairs():
    rs = np.geomspace(0.01, 100.0, 10)
    return [(r, R) for r in rs for R in rs if r <= R]


def test_check_scaling_power_saturates():
    rep = check_scaling(PHI2, _loggrid_pairs())
    assert rep.lower_const == pytest.approx(1.0, rel=1e-10)
    assert rep.upper_const == pytest.approx(1.0, rel=1e-10)
    assert rep.passed


def test_check_scaling_oscillating_fails_declared_lower():
    f = ScalingFunction(
        eval=lambda r: r * r * (2.0 + math.sin(math.log(r))),
        beta_lower=2.0, beta_upper=2.0, c_lower=1.0, c_upper=1.0,
        inverse_eval=None,
    )
    rep = check_scaling(f, _loggrid_pairs())
    assert not rep.passed_lower
    assert rep.lower_const < 1.0


def test_check_scaling_identity_passes():
    rep = check_scaling(ScalingFunction.power(1.0), _loggrid_pairs())
    assert rep.passed


def test_check_scaling_rejects_bad_grid():
    with pytest.raises(InvalidGrid):
        check_scaling(PHI2, [(2.0, 1.0)])
    with pytest.raises(InvalidGrid):
        check_scaling(PHI2, [(-1.0, 1.0)])


def test_table_scaling_function_roundtrip():
    tbl = ScalingFunction.from_table([[0.1, 0.01], [1.0, 1.0], [10.0, 100.0]])
    for r in (0.2, 0.5, 1.0, 3.0):
        assert tbl.inverse(tbl.eval(r)) == pytest.approx(r, rel=1e-10)


def test_scaling_inverse_consistency():
    for beta in (1.5, 2.0):
        phi = ScalingFunction.power(beta)
        for r in (0.037, 1.0, 42.0):
            assert phi.inverse(phi.eval(r)) == pytest.approx(r, rel=1e-10)


# ---------------------------------------------------------------------------
# envelope evaluation
# ---------------------------------------------------------------------------


def test_gaussian_ue_zero_displacement():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    assert eval_envelope(fam, 1.0, 0.0, 0.0) == pytest.approx(0.5, rel=1e-12)


def test_jump_upper_cauchy_far_value():
    ident = ScalingFunction.power(1.0)
    fam = EnvelopeFamily(kind="jump_HK_upper", phi=ident, psi=ident, volume=VOL1)
    # min(1/2, jump term 1/(2*10*10) + suppressed diffusive term) = 5.0e-3
    val = eval_envelope(fam, 1.0, 0.0, 10.0)
    assert val == pytest.approx(5.0e-3, rel=1e-6)
    # within one order of the closed-form Cauchy density
    cauchy = 1.0 / (math.pi * (1.0 + 100.0))
    assert 0.1 < val / cauchy < 10.0


def test_q_beta_large_time_branch():
    fam = EnvelopeFamily(kind="q_beta", phi=ScalingFunction.power(1.5), volume=VOL1, beta=1.0)
    # t^{-d/2} exp(-(r^beta ∧ r^2/t)) at t=2, r=4, d=1
    expect = 2.0 ** -0.5 * math.exp(-4.0)
    assert envelope_profile(fam, 2.0, 4.0) == pytest.approx(expect, rel=1e-12)
    assert expect == pytest.approx(1.295e-2, rel=1e-3)


def test_nle_indicator_region():
    fam = EnvelopeFamily(kind="gaussian_NLE", phi=PHI2, volume=VOL1, eps_nle=1.0)
    assert envelope_profile(fam, 1.0, 0.5) == pytest.approx(0.5)
    assert envelope_profile(fam, 1.0, 1.5) == 0.0


def test_nle_ue_ratio_bounded_on_near_region():
    ue = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    nle = EnvelopeFamily(kind="gaussian_NLE", phi=PHI2, volume=VOL1, eps_nle=1.0)
    ratios = []
    for t in np.geomspace(0.01, 100, 13):
        for frac in np.linspace(0.0, 1.0, 7):
            r = frac * math.sqrt(t)
            ratios.append(envelope_profile(nle, t, r) / envelope_profile(ue, t, r))
    assert max(ratios) <= math.exp(0.5 * phi_big(1.0, 1.0, PHI2)) + 1e-9
    assert min(ratios) >= 1.0 - 1e-12


def test_envelope_nonnegative_finite_everywhere():
    ident = ScalingFunction.power(1.0)
    fams = [
        EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL3),
        EnvelopeFamily(kind="gaussian_LE", phi=PHI2, volume=VOL3),
        EnvelopeFamily(kind="gaussian_NLE", phi=PHI2, volume=VOL3),
        EnvelopeFamily(kind="jump_HK_upper", phi=ident, psi=ident, volume=VOL1),
        EnvelopeFamily(kind="jump_HK_lower", phi=ident, psi=ident, volume=VOL1),
        EnvelopeFamily(kind="q_beta", phi=ScalingFunction.power(1.2), volume=VOL1, beta=1.0),
        EnvelopeFamily(kind="q_beta", phi=ScalingFunction.power(1.2), volume=VOL1, beta=2.5),
        EnvelopeFamily(kind="q_beta", phi=ScalingFunction.power(1.2), volume=VOL1, beta=math.inf),
        EnvelopeFamily(kind="h_psi_beta", phi=PHI2, psi=ScalingFunction.power(1.2),
                       volume=VOL3, beta=0.7),
        EnvelopeFamily(kind="h_psi_beta", phi=PHI2, psi=ScalingFunction.power(1.2),
                       volume=VOL3, beta=3.0),
        EnvelopeFamily(kind="h_psi_beta", phi=PHI2, psi=ScalingFunction.power(1.2),
                       volume=VOL3, beta=math.inf),
        EnvelopeFamily(kind="h_psi_beta", phi=PHI2, psi=ScalingFunction.power(1.2),
                       volume=VOL3, beta=0.0),
    ]
    for fam in fams:
        for t in (0.01, 0.5, 1.0, 3.0, 50.0):
            for r in (0.0, 0.3, 1.0, 2.5, 20.0):
                v = envelope_profile(fam, t, r)
                assert np.isfinite(v) and v >= 0.0, (fam.kind, t, r)


@pytest.mark.parametrize("beta", [0.8, 1.0, 2.0, math.inf])
def test_piecewise_branches_agree_in_order_at_boundaries(beta):
    # continuity in order: branch values on either side of a regime boundary
    # stay within a bounded multiplicative constant
    fam = EnvelopeFamily(kind="q_beta", phi=ScalingFunction.power(1.5), volume=VOL1, beta=beta)
    for r in (0.5, 2.0, 4.0):
        lo = envelope_profile(fam, 1.0 - 1e-9, r)
        hi = envelope_profile(fam, 1.0 + 1e-9, r)
        assert lo > 0 and hi > 0
        assert 1e-2 < lo / hi < 1e2
    famh = EnvelopeFamily(kind="h_psi_beta", phi=PHI2, psi=ScalingFunction.power(1.2),
                          volume=VOL3, beta=beta)
    for r in (0.5, 2.0):
        lo = envelope_profile(famh, 1.0 - 1e-9, r)
        hi = envelope_profile(famh, 1.0 + 1e-9, r)
        assert 1e-2 < lo / hi < 1e2


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _estimate_from(fam, t_values, dists, noise=0.0, inflate=None, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(0.0, float(r)) for r in dists]
    values = np.array([[envelope_profile(fam, t, r, x=0.0) for r in dists] for t in t_values])
    if inflate is not None:
        values = values * np.array([inflate(t) for t in t_values])[:, None]
    ci = np.full_like(values, 1e-12)
    if noise:
        values = values * (1.0 + noise * rng.standard_normal(values.shape))
        ci = np.abs(values) * noise * 2.0
    return KernelEstimate(t_values=list(t_values), pairs=pairs, values=values,
                          ci_half_width=ci, n_paths=0, bandwidth=0.0, bias_bound=0.0)


DISTS = [0.0, 0.2, 0.4, 0.6, 0.9, 1.2, 1.6, 2.0, 2.5, 3.0, 3.6]
TS = [0.5, 1.0, 2.0, 4.0]


def test_fit_idempotent_on_own_values():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS)
    v = fit_envelope(est, fam, allow_k=False)
    assert v.passed_upper and v.passed_lower
    assert v.k == 0.0
    assert 0.95 <= v.C1 <= 1.05 and 0.95 <= v.C2 <= 1.05
    assert 0.9 <= v.c1 <= 1.1 and 0.9 <= v.c2 <= 1.1


def test_fit_recovers_exponential_inflation():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS, inflate=lambda t: math.exp(0.5 * t))
    v = fit_envelope(est, fam, allow_k=True)
    assert 0.45 <= v.k <= 0.55


def test_fit_reports_planted_violation():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS)
    est.values[1, 3] *= 10.0
    v = fit_envelope(est, fam, allow_k=False)
    assert not v.passed_upper
    assert v.violation_points


def test_fit_slope_failure_without_k():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS, inflate=lambda t: math.exp(0.5 * t))
    v = fit_envelope(est, fam, allow_k=False)
    assert not v.passed_upper
    assert v.violation_points


def test_fit_requires_enough_data():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    with pytest.raises(InsufficientData):
        fit_envelope(_estimate_from(fam, [1.0, 2.0], DISTS), fam, allow_k=False)
    with pytest.raises(InsufficientData):
        fit_envelope(_estimate_from(fam, TS, DISTS[:4]), fam, allow_k=False)


def test_fit_degenerate_estimate():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS)
    est.values[:] = 0.0
    with pytest.raises(DegenerateEstimate):
        fit_envelope(est, fam, allow_k=False)


def test_verdict_monotone_in_constants_and_k():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS, noise=0.01, seed=3)
    v = fit_envelope(est, fam, allow_k=False)
    ok, _ = upper_holds(est, fam, v.C2, v.c2, v.k)
    if v.passed_upper:
        assert ok
    for factor in (1.5, 3.0, 10.0):
        ok_bigger, _ = upper_holds(est, fam, v.C2 * factor, v.c2, v.k)
        assert ok_bigger or not ok
        ok_k, _ = upper_holds(est, fam, v.C2, v.c2, v.k + 1.0)
        assert ok_k or not ok
    ok_low, _ = lower_holds(est, fam, v.C1, v.c1, v.k)
    assert ok_low
    ok_small, _ = lower_holds(est, fam, v.C1 * 0.5, v.c1, v.k)
    assert ok_small


def test_fit_on_noisy_values_passes_with_ci():
    fam = EnvelopeFamily(kind="gaussian_UE", phi=PHI2, volume=VOL1)
    est = _estimate_from(fam, TS, DISTS, noise=0.02, seed=5)
    v = fit_envelope(est, fam, allow_k=False)
    assert v.passed_upper and v.passed_lower
    assert 0.85 <= v.C2 <= 1.15
