import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conewidth.analysis import (
    ball_pattern,
    dini_derivatives,
    dyadic_scales,
    example_e_check,
    gap_report,
    lipschitz_estimate,
    normal_support,
    residual_profile,
)
from conewidth.builder import BuildConfig, ball_sequence, theorem4_build, theorem9_build
from conewidth.fields import ScalarField
from conewidth.geometry import GridDomain, PointCloud, gen_cantor_product, gen_four_corner_cantor, gen_graph_family

D = GridDomain.box([-1.0, -1.0], [1.0, 1.0], 1 / 64)
LENIENT = BuildConfig(strict=False)


def affine(a, d=D):
    a = np.asarray(a, dtype=float)
    return ScalarField.from_function(d, lambda X: X @ a)


def cone_field(c=(0.0, 0.0), d=D):
    c = np.asarray(c, dtype=float)
    return ScalarField.from_function(d, lambda X: np.linalg.norm(X - c, axis=-1))


def wiggly(seed, d=D):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=2), r.normal(size=2)
    return ScalarField.from_function(d, lambda X: np.sin(X @ a * 7) * 0.3 + np.abs(X @ b) * 0.5)


# Lipschitz estimates


def test_lipschitz_of_affine():
    assert lipschitz_estimate(affine((0.6, -0.8))) == pytest.approx(1.0, abs=1e-12)


def test_lipschitz_of_constant():
    assert lipschitz_estimate(ScalarField.constant(D, 3.0)) == 0.0


@pytest.mark.xfail(strict=False, reason="the multilinear interpolant of |x - c| has vertex partials "
                                        "(1, 1) next to c, so its exact Lipschitz constant is sqrt(2)")
def test_lipschitz_of_distance_cone_is_one():
    assert lipschitz_estimate(cone_field()) == pytest.approx(1.0, abs=1e-9)


def test_lipschitz_of_distance_cone_node_scan():
    # the largest adjacent-node quotient is exactly 1 and the vertex gradient norm sqrt(2)
    f = cone_field()
    q = max(np.abs(np.diff(f.values, axis=k)).max() for k in range(2)) / D.h
    assert q == pytest.approx(1.0, abs=1e-9)
    assert lipschitz_estimate(f) == pytest.approx(math.sqrt(2.0), abs=1e-9)


# Dini derivatives


def test_dyadic_scales():
    assert np.array_equal(dyadic_scales(3, 5), [0.125, 0.0625, 0.03125])
    with pytest.raises(ValueError):
        dyadic_scales(5, 3)


def test_dini_of_affine():
    est = dini_derivatives(affine((0.3, 0.7)), (0.1, -0.2), (1.0, 2.0))
    assert est.upper == pytest.approx(1.7, abs=1e-12) and est.lower == pytest.approx(1.7, abs=1e-12)


def test_dini_of_norm_at_origin():
    # probes land on nodes, where the samples are exact
    y = (0.75, -0.5)
    est = dini_derivatives(cone_field(), (0.0, 0.0), y, 3, 4)
    assert est.upper == pytest.approx(math.hypot(*y), abs=1e-12)
    assert est.lower == pytest.approx(math.hypot(*y), abs=1e-12)


def test_dini_probe_outside_domain_names_scale():
    with pytest.raises(ValueError, match="2\\^-3"):
        dini_derivatives(affine((1.0, 0.0)), (0.95, 0.0), (1.0, 0.0))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 2 * math.pi))
def test_dini_bounds_and_refinement(seed, x0, x1, th):
    f = wiggly(seed)
    y = np.array([math.cos(th), math.sin(th)])
    full = dini_derivatives(f, (x0, x1), y, 3, 10)
    part = dini_derivatives(f, (x0, x1), y, 4, 8)
    assert full.lower <= full.upper
    assert np.all(np.abs(full.quotients) <= f.lipschitz() + 1e-9)
    assert part.upper <= full.upper and part.lower >= full.lower


# residual profiles


def test_ball_pattern_is_in_unit_ball():
    B = ball_pattern()
    assert B.shape == (256, 2)
    assert np.linalg.norm(B, axis=1).max() == pytest.approx(1.0, abs=1e-12)


def test_residual_of_exact_gradient_is_zero():
    e = (0.4, -0.2)
    prof = residual_profile(affine(e), (0.1, 0.1), e)
    assert np.all(prof.residuals < 1e-12)


def test_residual_of_wrong_gradient_approaches_error_norm():
    e = np.array([0.4, -0.2])
    dvec = np.array([0.3, 0.1])
    prof = residual_profile(affine(e + dvec), (0.1, 0.1), e)
    nd = np.linalg.norm(dvec)
    # 64 directions leave angular gaps well under 0.1 rad
    assert np.all(prof.residuals <= nd + 1e-12)
    assert np.all(prof.residuals >= nd * math.cos(0.1))


def test_residual_rejects_points_outside_the_ball():
    with pytest.raises(ValueError):
        residual_profile(affine((1.0, 0.0)), (0.0, 0.0), (1.0, 0.0), ball_samples=[[2.0, 0.0]])


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
       st.tuples(st.floats(-2, 2), st.floats(-2, 2)))
def test_residual_triangle_inequality_and_range(seed, e1, e2):
    f = wiggly(seed)
    x = (0.2, -0.1)
    p1 = residual_profile(f, x, e1)
    p2 = residual_profile(f, x, e2)
    diff = np.linalg.norm(np.subtract(e1, e2))
    assert np.all(np.abs(p1.residuals - p2.residuals) <= diff + 1e-9)
    assert np.all(p1.residuals >= 0)
    assert np.all(p1.residuals <= f.lipschitz() + np.linalg.norm(e1) + 1e-9)
    assert p1.minimum == p1.residuals.min()


# gap reports


def test_gap_report_orthogonal_direction_passes():
    E = PointCloud(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.ones(1))
    rep = gap_report(ScalarField.zeros(D), E, [(0.0, 1.0)])
    assert rep.rows[0].bound == 0.0 and rep.pass_rate == 1.0


def test_gap_report_is_falsifiable():
    E = PointCloud(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.ones(1))
    rep = gap_report(ScalarField.zeros(D), E, [(1.0, 0.0)])
    assert rep.rows[0].bound == 2.0 and rep.pass_rate == 0.0


def test_gap_report_full_normal_set_uses_norm():
    E = PointCloud(np.array([[0.0, 0.0]]), np.array([[np.nan, np.nan]]), np.ones(1))
    assert normal_support(E, 0, (0.3, 0.4)) == pytest.approx(0.5)


def test_gap_report_csv(tmp_path):
    E = PointCloud(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.ones(1))
    rep = gap_report(cone_field(), E, [(1.0, 0.0), (0.0, 1.0)])
    p = tmp_path / "gap.csv"
    rep.write_csv(p)
    lines = p.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("index,")


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.sampled_from([-1, 1, 2]), st.floats(0, 2 * math.pi))
def test_gap_report_is_scale_invariant(seed, m, th):
    # with lam = 2^m the ladder for lam y is the ladder for y shifted by m scales
    f = wiggly(seed)
    E = PointCloud(np.array([[0.1, 0.2]]), np.array([[0.6, 0.8]]), np.ones(1))
    y = 0.2 * np.array([math.cos(th), math.sin(th)])
    lam = 2.0**m
    a = gap_report(f, E, [y], j_min=4, j_max=9).rows[0]
    b = gap_report(f, E, [lam * y], j_min=4 + m, j_max=9 + m).rows[0]
    assert b.bound == pytest.approx(lam * a.bound, rel=1e-12, abs=1e-15)
    assert b.gap == pytest.approx(lam * a.gap, rel=1e-9, abs=1e-12)
    margin = a.gap - (a.bound - 0.2 * np.linalg.norm(y))
    if abs(margin) > 1e-9:
        assert b.passed == a.passed


# graph-family check


GRAPH_DOMAIN = GridDomain.box([-1.25, -1.25], [1.25, 1.25], 1 / 64)


def test_graph_check_constant():
    res = example_e_check(ScalarField.constant(GRAPH_DOMAIN, 0.0), gen_graph_family(8, 33))
    assert res.minimum == 0.0


def test_graph_check_linear_matches_tilted_normals():
    E = gen_graph_family(8, 33)
    f = ScalarField.from_function(GRAPH_DOMAIN, lambda X: X[..., 1])
    res = example_e_check(f, E)
    # oracle: 1 / sqrt(1 + slope^2) with slopes from central differences of (1 - s^2)^2 / k
    s = np.linspace(-1.0, 1.0, 33)
    t = 1e-6
    prof = lambda u: (1 - u * u) ** 2
    slope = (prof(s + t) - prof(s - t)) / (2 * t)
    expected = min(float(np.min(1 / np.sqrt(1 + (slope / k) ** 2))) for k in range(1, 9))
    assert res.minimum == pytest.approx(expected, abs=1e-8)
    assert res.minimum < 1 - 0.05


def test_graph_check_requires_lipschitz_one():
    f = ScalarField.from_function(GRAPH_DOMAIN, lambda X: 2 * X[..., 0])
    with pytest.raises(ValueError, match="Lipschitz"):
        example_e_check(f, gen_graph_family(2, 17))


def test_graph_check_requires_single_normals():
    E = PointCloud(np.array([[0.0, 0.0]]), np.array([[np.nan, np.nan]]), np.ones(1))
    with pytest.raises(ValueError):
        example_e_check(ScalarField.zeros(GRAPH_DOMAIN), E)


def test_graph_check_on_rescaled_built_field():
    E = gen_graph_family(8, 33)
    built = theorem9_build(E, 1, GRAPH_DOMAIN, LENIENT, probe=False)
    f = ScalarField(GRAPH_DOMAIN, built.values / max(1.0, built.lipschitz()))
    res = example_e_check(f, E)
    assert math.isfinite(res.minimum) and res.minimum <= 1.0 + 1e-9


# pipeline outputs


@pytest.fixture(scope="module")
def first_construction_output():
    d = GridDomain.box([-0.125, -0.125], [1.125, 1.125], 1 / 256)
    E = gen_cantor_product(1 / 3, 4)
    f, u = theorem4_build(E, 0.3, ScalarField.constant(d, 1.0), 3, LENIENT)
    return E, f, u


@pytest.mark.xfail(strict=False, reason="width budgets below grid scale leave the built field nearly "
                                        "zero, so its residual against u + (1, 0) stays near 1")
def test_first_construction_residual_at_sample(first_construction_output):
    E, f, u = first_construction_output
    i = len(E) // 2
    prof = residual_profile(f, E.points[i], u[i] + np.array([1.0, 0.0]), 2.0 ** -np.arange(3, 11))
    assert prof.minimum <= 0.1


@pytest.mark.xfail(strict=False, reason="same near-zero field: the Dini gap stays below the normal bound")
def test_first_construction_gap_report(first_construction_output):
    E, f, u = first_construction_output
    assert gap_report(f, E, [(1.0, 0.0)], slack=0.2).pass_rate >= 0.9


@pytest.mark.xfail(strict=False, reason="same near-zero field for the second construction")
def test_second_construction_dini_gap_at_deep_point():
    d = GridDomain.box([-0.125, -0.125], [1.125, 1.125], 1 / 256)
    E = gen_four_corner_cantor(4)
    f = theorem9_build(E, 4, d, LENIENT)
    est = dini_derivatives(f, E.points[len(E) // 3], (1.0, 0.0), 3, 10)
    assert est.gap >= 2 - 0.2


def test_second_construction_directions_are_capped():
    assert all(np.linalg.norm(ball_sequence(k)) <= 1 - 2.0**-k for k in range(1, 5))
