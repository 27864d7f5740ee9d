import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxdiff.errors import ArgumentError
from proxdiff.metrics import energy_distance, gaussian_energy_distance_1d

# closed forms evaluated independently to 18 digits
ED_N01_N101 = 17.7432416658095674
ED_N11_N04 = 0.534105324107031921


def test_closed_form_reference_values():
    assert gaussian_energy_distance_1d(0, 1, 10, 1) == pytest.approx(ED_N01_N101, rel=1e-13)
    assert gaussian_energy_distance_1d(1, 1, 0, 2) == pytest.approx(ED_N11_N04, rel=1e-13)
    assert gaussian_energy_distance_1d(0.3, 0.7, 0.3, 0.7) == pytest.approx(0.0, abs=1e-15)


def test_far_apart_gaussians():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (1000, 1))
    y = rng.normal(10, 1, (1000, 1))
    ed = energy_distance(x, y)
    assert ed > 15
    assert abs(ed - ED_N01_N101) < 0.3


def test_matches_closed_form_statistically():
    rng = np.random.default_rng(1)
    vals = [energy_distance(rng.normal(1, 1, (400, 1)), rng.normal(0, 2, (400, 1)))
            for _ in range(20)]
    assert abs(np.mean(vals) - ED_N11_N04) < 4 * np.std(vals, ddof=1) / np.sqrt(20)


def test_same_distribution_near_zero():
    rng = np.random.default_rng(2)
    ed = energy_distance(rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2)))
    assert abs(ed) < 0.02


def test_v_statistic_zero_on_identical_sets():
    x = np.random.default_rng(3).normal(size=(50, 3))
    assert energy_distance(x, x, unbiased=False) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi), st.integers(0, 1000))
def test_rotation_and_translation_invariance(theta, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(30, 2)), rng.normal(1.0, 1.0, size=(30, 2))
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shift = np.array([3.0, -2.0])
    a = energy_distance(x, y)
    b = energy_distance(x @ R.T + shift, y @ R.T + shift)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_symmetry_and_subsampling_determinism():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(300, 2)), rng.normal(size=(250, 2))
    assert energy_distance(x, y) == pytest.approx(energy_distance(y, x), rel=1e-12)
    assert energy_distance(x, y, max_points=100) == energy_distance(x, y, max_points=100)


def test_input_validation():
    with pytest.raises(ArgumentError):
        energy_distance(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(ArgumentError):
        energy_distance(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(ArgumentError):
        energy_distance(np.full((5, 1), np.nan), np.zeros((5, 1)))
