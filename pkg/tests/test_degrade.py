import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repainv import degrade as dg
from repainv import diffcore as dc
from repainv.diffcore import Tape


def all_ops(seed=0, size=32):
    return [
        dg.superres(4, size),
        dg.boxinpaint(size // 2, size),
        dg.gaussblur(1.5, image_size=size),
        dg.motionblur(seed, 7, 0.5, size),
    ]


@pytest.mark.parametrize("op", all_ops(), ids=lambda o: o.kind)
def test_linearity_and_adjoint_100_instances(op):
    rng = np.random.default_rng(1)
    worst_lin, worst_adj = 0.0, 0.0
    for _ in range(100):
        x1, x2 = rng.standard_normal((2, *op.image_shape))
        a, b = rng.standard_normal(2)
        lhs = op.forward_clean(a * x1 + b * x2)
        rhs = a * op.forward_clean(x1) + b * op.forward_clean(x2)
        worst_lin = max(worst_lin, np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
        y = rng.standard_normal(op.measurement_shape)
        ip1 = np.sum(op.forward_clean(x1) * y)
        ip2 = np.sum(x1 * op.adjoint(y))
        worst_adj = max(worst_adj, abs(ip1 - ip2) / max(abs(ip1), 1e-300))
    assert worst_lin < 1e-10
    assert worst_adj < 1e-10


def test_kernels_normalized():
    for seed in range(100):
        k = dg.make_motion_kernel(seed, 7, True, 0.5)
        assert abs(k.sum() - 1) < 1e-12
    for sigma in (0.5, 1.5, 3.0, 4.5):
        k = dg.gaussian_kernel(dg.gaussian_kernel_size(sigma), sigma)
        assert abs(k.sum() - 1) < 1e-12


def test_mask_idempotent():
    rng = np.random.default_rng(2)
    op = dg.boxinpaint(16)
    for _ in range(100):
        x = rng.standard_normal((32, 32))
        assert np.array_equal(op.forward_clean(op.forward_clean(x)), op.forward_clean(x))


def test_superres_constant_and_tiny_adjoint():
    op = dg.superres(4)
    assert np.allclose(op.apply(np.full((32, 32), 0.3)), 0.3)
    tiny = dg.superres(4, image_size=4)
    # explicit 1x16 averaging matrix
    mat = np.full((1, 16), 1 / 16)
    assert np.allclose(tiny.adjoint(np.array([[2.0]])).ravel(), mat.T @ [2.0])
    assert np.allclose(tiny.adjoint(np.array([[2.0]])), 2.0 / 16)


def test_box_semantics():
    op = dg.boxinpaint(16)
    x = np.random.default_rng(0).random((32, 32))
    y = op.apply(x)
    assert np.all(y[8:24, 8:24] == 0)
    y2 = y.copy()
    y2[8:24, 8:24] = x[8:24, 8:24]
    assert np.array_equal(y2, x)
    assert np.array_equal(op.adjoint(x), op.apply(x))


def test_blur_impulse_returns_kernel():
    op = dg.gaussblur(1.5)
    x = np.zeros((32, 32))
    x[16, 16] = 1.0
    y = op.apply(x)
    k = op.kernel
    r = k.shape[0] // 2
    assert np.allclose(y[16 - r:16 + r + 1, 16 - r:16 + r + 1], k)
    assert abs(y.sum() - 1) < 1e-12


def test_motion_kernel_contract():
    ident = dg.make_motion_kernel(0, 7, True, 0.0)
    assert ident[3, 3] == 1.0 and ident.sum() == 1.0
    assert np.array_equal(dg.make_motion_kernel(5), dg.make_motion_kernel(5))
    assert not np.array_equal(dg.make_motion_kernel(1), dg.make_motion_kernel(2))
    with pytest.raises(ValueError):
        dg.make_motion_kernel(0, 6)
    with pytest.raises(ValueError):
        dg.make_motion_kernel(0, 1)


def test_noise_and_errors():
    op = dg.gaussblur(1.5)
    x = np.full((32, 32), 0.5)
    y1 = op.apply(x, np.random.default_rng(0))
    y2 = op.apply(x, np.random.default_rng(0))
    assert np.array_equal(y1, y2)
    assert 0.008 < np.std(y1 - op.forward_clean(x)) < 0.012
    with pytest.raises(ValueError, match="larger"):
        dg.gaussblur(3.0, image_size=8)
    with pytest.raises(ValueError):
        op.apply(np.full((32, 32), 2.0))
    with pytest.raises(ValueError):
        dg.make_operator("jpeg")


@pytest.mark.parametrize("op", all_ops(), ids=lambda o: o.kind)
def test_tape_gradient_matches_adjoint(op):
    rng = np.random.default_rng(3)
    x0 = rng.random((2, *op.image_shape))
    y = rng.random((2, *op.measurement_shape))
    tape = Tape()
    x = tape.var(x0)
    ax = op.forward(tape, x)
    assert np.allclose(ax.value, op.forward_clean(x0), atol=1e-14)
    r = tape.const(y) - ax
    (g,) = tape.gradient(dc.dsum(r * r), [x])
    ref = -2 * op.adjoint(y - op.forward_clean(x0))
    assert np.max(np.abs(g - ref)) / np.max(np.abs(ref)) < 1e-8


def test_proxy_image_shape():
    op = dg.superres(4)
    y = op.apply(np.random.default_rng(0).random((32, 32)))
    p = op.proxy_image(y)
    assert p.shape == (32, 32) and np.array_equal(p[:4, :4], np.full((4, 4), y[0, 0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_motion_kernel_always_normalized(seed, intensity):
    k = dg.make_motion_kernel(seed, 7, True, intensity)
    assert abs(k.sum() - 1) < 1e-12 and np.all(k >= 0)
