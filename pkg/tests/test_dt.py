import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from morphface import dt


def test_single_pixel_three_four_five():
    m = np.zeros((12, 12), bool)
    m[5, 5] = True
    assert dt.distance_transform(m)[8, 9] == 5.0


def test_empty_mask_is_none():
    assert dt.distance_transform(np.zeros((4, 4), bool)) is None


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (13, 17), elements=st.booleans()))
def test_matches_brute_force_and_vanishes_on_mask(mask):
    D = dt.distance_transform(mask)
    ref = dt.brute_force_edt(mask)
    if ref is None:
        assert D is None
        return
    assert np.array_equal(D, ref)
    assert np.all(D[mask] == 0)


def test_sampler_reproduces_pixel_centres():
    D = np.random.default_rng(0).random((8, 9))
    rr, cc = np.mgrid[1:7, 1:8]
    pts = np.column_stack([cc.ravel() + 0.5, rr.ravel() + 0.5])
    val, _ = dt.sample(D, pts)
    assert np.allclose(val, D[rr.ravel(), cc.ravel()], atol=1e-14)


def test_sampler_gradient_matches_finite_differences_and_is_continuous():
    D = np.random.default_rng(1).random((10, 10))
    rng = np.random.default_rng(2)
    pts = rng.uniform(2, 8, (30, 2))
    _, g = dt.sample(D, pts)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        num = (dt.sample(D, pts + e)[0] - dt.sample(D, pts - e)[0]) / (2 * h)
        assert np.allclose(num, g[:, k], atol=1e-6)
    # C1 across a pixel centre
    a = np.array([[4.5 - 1e-9, 5.2], [4.5 + 1e-9, 5.2]])
    _, ga = dt.sample(D, a)
    assert np.allclose(ga[0], ga[1], atol=1e-6)
