import numpy as np
import pytest

from surfelsplat.gradcheck import (
    SUITES,
    TOL,
    corrupted,
    finite_difference,
    relative_error,
    run_all,
)


def test_relative_error_floor():
    assert relative_error([1e-10], [3e-10]) == pytest.approx(2e-10)
    assert relative_error([1.0, 2.0], [1.0, 2.1]) == pytest.approx(0.1 / 2.1)


def test_finite_difference_on_quadratic(rng):
    p = {"x": rng.normal(size=5)}
    res = finite_difference(lambda q: (float(np.sum(q["x"] ** 3)), 0), p, {"x": 3 * p["x"] ** 2}, rng)
    assert res["x"][0] < 1e-7 and res["x"][1] == 5


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suite_passes(suite):
    (rep,) = run_all([0], [suite])
    assert rep.passed, [(g.group, g.error) for g in rep.groups]
    assert rep.groups and all(g.checked > 0 for g in rep.groups)


def test_corruption_is_flagged():
    with corrupted("opacity"):
        (rep,) = run_all([1], ["rasterizer"])
    bad = {g.group for g in rep.groups if not g.passed}
    assert bad == {"opacity"}
    assert min(g.error for g in rep.groups if g.group == "opacity") > TOL
    (rep,) = run_all([1], ["rasterizer"])
    assert rep.passed
