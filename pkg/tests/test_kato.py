import math

import numpy as np
import pytest
from scipy import integrate

from fklab import kato
from fklab.errors import InvalidInput, RecurrentProcess
from fklab.functionals import MeasureSpec
from fklab.processes import ProcessSpec

BM1 = ProcessSpec(kind="brownian", dim=1)
BM3 = ProcessSpec(kind="brownian", dim=3)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


def test_ball_green_potential_at_center():
    # polar oracle: int_{B(0,1)} dy/(2 pi |y|) = 2 int_0^1 r dr = 1
    ball = MeasureSpec.uniform_ball(1.0)
    assert kato.resolvent_potential(ball, 0.0, [0, 0, 0], BM3) == pytest.approx(1.0, rel=1e-8)


def test_ball_green_potential_outside():
    # Newton: potential of the unit ball at radius 2 is (1/3)/(r/2)... = 1/3 here
    ball = MeasureSpec.uniform_ball(1.0)
    val = kato.resolvent_potential(ball, 0.0, [2, 0, 0], BM3)
    exact = 2.0 * integrate.quad(lambda s: s * s / 2.0, 0, 1)[0]
    assert val == pytest.approx(exact, rel=1e-8)


def test_zero_measure_potential():
    assert kato.resolvent_potential(MeasureSpec.zero(), 0.0, [0, 0, 0], BM3) == 0.0


def test_hardy_density_diverges():
    hardy = MeasureSpec.from_parts(("power", {"c": 1.0, "exponent": -2.0, "radius": 1.0}),
                                   None, "hardy")
    assert kato.resolvent_potential(hardy, 0.0, [0, 0, 0], BM3) == math.inf
    assert kato.resolvent_potential(hardy, 4.0, [0, 0, 0], BM3) == math.inf
    # off the singular point the potential is finite
    assert kato.resolvent_potential(hardy, 0.0, [0.5, 0, 0], BM3) < math.inf


def test_potential_monotone_in_alpha():
    ball = MeasureSpec.uniform_ball(1.0)
    for x in ([0, 0, 0], [0.7, 0, 0], [2, 0, 0]):
        vals = [kato.resolvent_potential(ball, a, x, BM3) for a in (0.0, 1.0, 4.0, 16.0)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_potential_d1_closed_form():
    seg = MeasureSpec.uniform_ball(1.0)
    for a in (1.0, 4.0):
        k = math.sqrt(2 * a)
        exact = 2.0 * (1.0 - math.exp(-k)) / (2.0 * a)
        assert kato.resolvent_potential(seg, a, [0.0], BM1) == pytest.approx(exact, rel=1e-8)


def test_potential_rejects_negative_alpha():
    with pytest.raises(InvalidInput):
        kato.resolvent_potential(MeasureSpec.uniform_ball(1.0), -1.0, [0, 0, 0], BM3)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def test_classify_ball_d3_all_yes():
    rep = kato.classify(MeasureSpec.uniform_ball(1.0), BM3,
                        grid=[[0.2, 0, 0], [0.7, 0, 0], [1.5, 0, 0]])
    assert rep.flags == {"dynkin": "yes", "green_bounded": "yes",
                         "kato": "yes", "extended_kato": "yes"}


def test_classify_hardy_no():
    hardy = MeasureSpec.from_parts(("power", {"c": 1.0, "exponent": -2.0, "radius": 1.0}),
                                   None, "hardy")
    rep = kato.classify(hardy, BM3)
    assert rep.flags["kato"] == "no"
    assert rep.flags["dynkin"] == "no"


def test_classify_segment_d1():
    rep = kato.classify(MeasureSpec.uniform_ball(1.0), BM1, grid=[0.0, 0.5, 1.0])
    assert rep.flags["kato"] == "yes"
    assert rep.flags["dynkin"] == "yes"
    assert rep.flags["green_bounded"] == "no"
    # closed-form sup at the origin
    assert rep.sup_R_alpha[0][1] == pytest.approx(2 * (1 - math.exp(-math.sqrt(2))) / 2, rel=1e-6)


@pytest.mark.parametrize("parts", [
    ("uniform_ball", {"c": 1.0, "radius": 1.0}),
    ("gaussian_bump", {"c": 2.0, "sigma": 0.4}),
    ("power", {"c": 1.0, "exponent": 1.0, "radius": 1.5}),
])
def test_bounded_compact_densities_are_kato_d3(parts):
    mu = MeasureSpec.from_parts(parts, None)
    rep = kato.classify(mu, BM3)
    assert rep.flags["kato"] == "yes"


def test_classify_linearity_in_scale():
    mu = MeasureSpec.uniform_ball(1.0)
    rep1 = kato.classify(mu, BM3)
    rep5 = kato.classify(mu.scaled(5.0), BM3)
    for (a1, v1), (a5, v5) in zip(rep1.sup_R_alpha, rep5.sup_R_alpha):
        assert a1 == a5
        assert v5 == pytest.approx(5.0 * v1, rel=1e-12)
    assert rep5.flags["kato"] == rep1.flags["kato"]


def test_classify_sup_table_monotone():
    rep = kato.classify(MeasureSpec.uniform_ball(1.0), BM3)
    sups = [v for _, v in rep.sup_R_alpha]
    assert all(a >= b for a, b in zip(sups, sups[1:]))


def test_flag_lattice_coherence():
    cases = [
        MeasureSpec.uniform_ball(1.0),
        MeasureSpec.from_parts(("gaussian_bump", {"c": 3.0, "sigma": 1.0}), None),
        MeasureSpec.from_parts(("power", {"c": 1.0, "exponent": -2.0, "radius": 1.0}), None),
    ]
    for spec in (BM3, BM1):
        for mu in cases:
            rep = kato.classify(mu, spec)
            if rep.flags["kato"] == "yes":
                assert rep.flags["extended_kato"] == "yes"
            if rep.flags["green_bounded"] == "yes":
                assert rep.flags["dynkin"] == "yes"


# ---------------------------------------------------------------------------
# Green tightness surrogate
# ---------------------------------------------------------------------------


def test_tightness_compact_support_exact_zero():
    curve, verdict = kato.green_tight_check(MeasureSpec.uniform_ball(1.0), BM3, [2.0, 4.0])
    assert curve == [(2.0, 0.0), (4.0, 0.0)]
    assert verdict == "tight"


def test_tightness_zero_measure():
    curve, verdict = kato.green_tight_check(MeasureSpec.zero(), BM3, [1.0, 2.0])
    assert all(v == 0.0 for _, v in curve)
    assert verdict == "tight"


def test_tightness_decaying_tail_curve():
    dens = lambda r: np.where(r <= 50.0, (1.0 + r) ** -4.0, 0.0)
    mu = MeasureSpec(dens, None, 50.0, "decay4")
    radii = [5.0, 10.0, 20.0, 50.0]
    curve, verdict = kato.green_tight_check(mu, BM3, radii, grid=np.linspace(0, 55, 12))
    vals = [v for _, v in curve]
    assert all(a > b for a, b in zip(vals[:-1], vals[1:]) if a > 0)
    assert vals[-1] == 0.0  # support exhausted at the truncation radius
    assert verdict == "tight"
    # frozen oracle values from the radial quadrature (rel 1e-6 grade)
    assert vals[0] == pytest.approx(0.0244, abs=0.0005)
    assert vals[1] == pytest.approx(0.00742, abs=0.0002)


def test_tightness_needs_transience():
    with pytest.raises(RecurrentProcess):
        kato.green_tight_check(MeasureSpec.uniform_ball(1.0), BM1, [2.0, 4.0])


# ---------------------------------------------------------------------------
# prepared potentials
# ---------------------------------------------------------------------------


def test_build_potential_matches_pointwise():
    ball = MeasureSpec.uniform_ball(1.0)
    u = kato.build_resolvent_potential_u(ball, None, 1.0, BM3)
    for r in (0.0, 0.5, 1.0, 2.0, 4.0):
        direct = kato.resolvent_potential(ball, 1.0, [r, 0, 0], BM3)
        assert u.potential_signed(np.array([r]))[0] == pytest.approx(direct, rel=1e-3, abs=1e-6)


def test_build_potential_signed_parts():
    pos = MeasureSpec.uniform_ball(1.0)
    neg = MeasureSpec.from_parts(("gaussian_bump", {"c": 0.5, "sigma": 0.3}), None)
    u = kato.build_resolvent_potential_u(pos, neg, 2.0, BM3)
    vp = kato.resolvent_potential(pos, 2.0, [0.4, 0, 0], BM3)
    vn = kato.resolvent_potential(neg, 2.0, [0.4, 0, 0], BM3)
    assert u.potential_signed(np.array([0.4]))[0] == pytest.approx(vp - vn, rel=1e-3, abs=1e-6)


def test_build_potential_rejects_unbounded():
    hardy = MeasureSpec.from_parts(("power", {"c": 1.0, "exponent": -2.0, "radius": 1.0}),
                                   None, "hardy")
    with pytest.raises(InvalidInput):
        kato.build_resolvent_potential_u(hardy, None, 1.0, BM3)
