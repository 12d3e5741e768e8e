import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from imchaos.grid import TestFunction, build_grid, bump_eval, bump_grad_eval, quadrature


def test_build_grid_sizes():
    g = build_grid(2, 64)
    assert g.size == 4096 and g.h == 0.015625
    g3 = build_grid(3, 16)
    assert g3.size == 4096 and g3.h == 0.0625
    assert g3.points.shape == (16, 16, 16, 3)


@pytest.mark.parametrize("d,n,L", [(1, 64, 1.0), (4, 16, 1.0), (2, 4, 1.0), (2, 16, 0.0)])
def test_build_grid_rejects(d, n, L):
    with pytest.raises(ValueError):
        build_grid(d, n, L)


def test_points_are_cell_centres():
    g = build_grid(2, 8, 2.0)
    ax = g.axis
    assert ax[0] == pytest.approx(g.h / 2) and ax[-1] == pytest.approx(2.0 - g.h / 2)
    assert np.all((g.points > 0) & (g.points < 2.0))
    assert g.index_of((0.3, 1.99)) == (1, 7)


def test_bump_values():
    tf = TestFunction((0.5, 0.5), 0.2)
    assert bump_eval(tf, (0.5, 0.5)) == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert bump_eval(tf, (0.7, 0.5)) == 0.0
    assert bump_eval(tf, (0.9, 0.5)) == 0.0
    assert bump_grad_eval(tf, (0.5, 0.5), 1) == 0.0
    assert bump_grad_eval(tf, (0.75, 0.5), 1) == 0.0


def test_bump_grad_finite_difference(rng):
    tf = TestFunction((0.4, 0.55, 0.5), 0.2, 1.7)
    x = tf.center + rng.uniform(-0.13, 0.13, size=(100, 3))
    for step in (1e-3, 5e-4):
        errs = []
        for k in (1, 2, 3):
            e = np.zeros(3)
            e[k - 1] = step
            fd = (tf(x + e) - tf(x - e)) / (2 * step)
            errs.append(np.max(np.abs(fd - tf.grad(x, k))))
        if step == 1e-3:
            e1 = max(errs)
        else:
            e2 = max(errs)
    assert e2 < e1 / 3  # second order


def test_quadrature_constant_and_batch():
    g = build_grid(2, 32)
    assert quadrature(np.ones(g.shape), g) == 1.0
    v = np.stack([np.ones(g.shape), 2 * np.ones(g.shape)])
    np.testing.assert_allclose(quadrature(v, g), [1.0, 2.0])


def test_quadrature_of_gradient_vanishes_and_shrinks():
    tf = TestFunction((0.5, 0.47), 0.2)
    vals = []
    for n in (32, 64, 128):
        g = build_grid(2, n)
        vals.append(abs(quadrature(tf.grad_on_grid(g, 1), g)))
        assert vals[-1] <= 10 * g.h**2
    assert vals[1] <= vals[0] / 2 or vals[1] < 1e-15
    assert vals[2] <= vals[1] / 2 or vals[2] < 1e-15


def test_quadrature_of_bump_converges():
    tf = TestFunction((0.5, 0.5), 0.3)
    q = [quadrature(tf.on_grid(build_grid(2, n)), build_grid(2, n)) for n in (32, 64, 128)]
    assert abs(q[2] - q[1]) < abs(q[1] - q[0]) + 1e-14


def test_boundary_distance():
    tf = TestFunction((0.3, 0.6), 0.1)
    assert tf.boundary_distance(build_grid(2, 16)) == pytest.approx(0.2)


@given(
    st.tuples(st.floats(0.2, 0.8), st.floats(0.2, 0.8)),
    st.floats(0.05, 0.19),
    st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3),
)
@example(center=(0.7033413065887213, 0.4684339677412952), radius=0.14453125, amp=1.0)
def test_bump_properties(center, radius, amp):
    tf = TestFunction(center, radius, amp)
    g = build_grid(2, 32)
    f = tf.on_grid(g)
    d = np.sqrt(np.sum((g.points - np.asarray(center)) ** 2, axis=-1))
    assert np.all(f[d >= radius] == 0)
    assert np.all(f[d < radius] * amp >= 0)
    # exp(-1 / (1 - s)) underflows to 0 right at the rim; well inside it may not
    assert np.all(np.sign(f[d < 0.995 * radius]) == np.sign(amp))
    assert np.max(np.abs(f)) <= abs(amp) * np.exp(-1) + 1e-15
    # the gradient is zero exactly where f is
    for k in (1, 2):
        assert np.all(tf.grad_on_grid(g, k)[d >= radius] == 0)
