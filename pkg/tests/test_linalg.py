"""Closed-form spectral norms against SVD."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdlab.linalg import cond_two, spectral_norm, spectral_norm_sq

finite = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)


def test_known_values():
    assert spectral_norm_sq(np.eye(2)) == pytest.approx(1.0, abs=1e-15)
    assert spectral_norm_sq(np.diag([3.0, -2.0])) == pytest.approx(9.0, abs=1e-12)
    # rank one: norm^2 equals the squared Frobenius norm
    m = np.array([[1.0, 2.0], [2.0, 4.0]])
    assert spectral_norm_sq(m) == pytest.approx(25.0, rel=1e-12)
    assert spectral_norm(np.zeros((2, 2))) == 0.0


def test_dim_one_and_three():
    assert spectral_norm_sq(np.array([[[-4.0]]]))[0] == pytest.approx(16.0)
    m3 = np.diag([1.0, -5.0, 2.0])
    assert spectral_norm_sq(m3) == pytest.approx(25.0, rel=1e-12)
    assert cond_two(m3) == pytest.approx(5.0, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4))
def test_matches_svd_2x2(entries):
    # the closed form cancels to half precision when the two singular
    # values nearly coincide, so the tolerance is sqrt(eps) scale
    m = np.array(entries).reshape(2, 2)
    svals = np.linalg.svd(m, compute_uv=False)
    expect = svals[0] ** 2
    got = spectral_norm_sq(m)
    assert got == pytest.approx(expect, rel=1e-7, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4))
def test_cond_matches_svd_2x2(entries):
    m = np.array(entries).reshape(2, 2)
    svals = np.linalg.svd(m, compute_uv=False)
    if svals[-1] < 1e-9 * max(svals[0], 1.0):
        return  # numerically singular either way
    got = cond_two(m)
    assert got == pytest.approx(svals[0] / svals[-1], rel=1e-6)


def test_singular_gets_inf():
    m = np.array([[1.0, 2.0], [2.0, 4.0]])
    assert cond_two(m) == np.inf
    assert cond_two(np.array([[0.0]])) == np.inf


def test_batch_shapes():
    batch = np.random.default_rng(0).normal(size=(5, 7, 2, 2))
    out = spectral_norm_sq(batch)
    assert out.shape == (5, 7)
    ref = np.linalg.svd(batch, compute_uv=False)[..., 0] ** 2
    np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-9)


def test_rejects_non_square():
    with pytest.raises(ValueError):
        spectral_norm_sq(np.zeros((2, 3)))
