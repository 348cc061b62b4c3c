import numpy as np
import pytest

from cascadeseg.gradcheck import (
    SuiteResult,
    central_difference,
    check_end_to_end,
    check_losses,
    check_masking,
    check_roi_warp,
    kink_distance,
    random_warp_case,
    rel_error,
    tiny_scene,
)


def test_rel_error():
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rel_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
    # tiny values fall back to the floor
    assert rel_error([1e-12], [0.0], floor=1e-6) == pytest.approx(1e-6)
    assert rel_error([], []) == 0.0


def test_central_difference_of_cubic():
    x = np.array([1.5, -0.5])

    def f():
        return float(x[0] ** 3 + 2 * x[1])

    assert central_difference(f, x, 0, 1e-5) == pytest.approx(3 * 1.5 ** 2, rel=1e-8)
    assert central_difference(f, x, 1, 1e-5) == pytest.approx(2.0, rel=1e-8)
    np.testing.assert_array_equal(x, [1.5, -0.5])  # restored


def test_suite_result_bookkeeping():
    res = SuiteResult("x")
    res.record("q", 1e-7, 1e-6)
    res.record("q", 1e-8, 1e-6)
    assert res.errors["q"] == (1e-7, 1e-6) and res.passed
    res.record("q", 1e-5, 1e-6)
    assert not res.passed
    assert "FAIL" in res.lines()[0]


def test_random_cases_avoid_kinks(rng):
    for _ in range(20):
        f, box, oh, ow = random_warp_case(rng)
        assert f.ndim == 3 and box.shape == (4,)
        assert kink_distance(box, oh, ow) >= 0.3 - 1e-12


def test_tiny_scene_has_instances():
    s = tiny_scene(0)
    assert 2 <= len(s.instances) <= 3


def test_layer_suites_small():
    for res in (check_roi_warp(trials=5, feature_entries=8), check_masking(trials=3), check_losses(trials=3)):
        assert res.passed, res.lines()
        assert res.cases > 0


def test_end_to_end_sampled_entries():
    res = check_end_to_end(seed=1, max_entries=3)
    assert res.passed, res.lines()
