"""Cross-checks between the compiled and pure kernel backends, and of the
tangent propagation against finite differences of the rollouts themselves."""

import numpy as np
import pytest

from densityplan._kernels import pure
from densityplan.dynamics import CarConfig

try:
    from densityplan._kernels import _core
    BACKENDS = [("pure", pure), ("compiled", _core)]
except ImportError:
    _core = None
    BACKENDS = [("pure", pure)]

CAR = CarConfig().as_array()


def _random_knots(rng, K=6):
    box = CarConfig().knot_box()
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((K, 2))


@pytest.mark.skipif(_core is None, reason="compiled backend unavailable")
class TestBackendAgreement:
    def test_ref_rollout(self):
        rng = np.random.default_rng(10)
        x0 = rng.normal(size=(4, 4))
        x0[:, 3] = np.abs(x0[:, 3]) + 0.5
        knots = np.stack([_random_knots(rng) for _ in range(4)])
        a = pure.ref_rollout(x0, knots, 0.1, 30, 3, CAR, with_grad=True)
        b = _core.ref_rollout(x0, knots, 0.1, 30, 3, CAR, with_grad=True)
        for u, v in zip(a, b):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-13)

    def test_closed_rollout(self):
        rng = np.random.default_rng(11)
        x0 = np.column_stack([rng.normal(size=(5,)) * 0.3 for _ in range(5)])
        x0[:, 3] += 1.5
        knots = _random_knots(rng)
        ref0 = np.array([0.0, 0.0, 0.1, 1.5])
        a = pure.closed_rollout(x0, ref0, knots, 0.1, 30, 3, CAR, with_grad=True)
        b = _core.closed_rollout(x0, ref0, knots, 0.1, 30, 3, CAR, with_grad=True)
        assert set(a) == set(b)
        for key in a:
            np.testing.assert_allclose(a[key], b[key], rtol=1e-11, atol=1e-12,
                                       err_msg=key)

    def test_openloop_rollout(self):
        rng = np.random.default_rng(12)
        x0 = rng.normal(size=(3, 5))
        u = rng.normal(size=(3, 8, 2)) * 2.0
        for squash in (True, False):
            a = pure.openloop_rollout(x0, u, 0.1, 4, CAR, with_grad=True, squash=squash)
            b = _core.openloop_rollout(x0, u, 0.1, 4, CAR, with_grad=True, squash=squash)
            for key in a:
                np.testing.assert_allclose(a[key], b[key], rtol=1e-12, atol=1e-13,
                                           err_msg=key)


@pytest.mark.parametrize("name,impl", BACKENDS)
class TestTangentsMatchFiniteDifferences:
    """The propagated tangents are the derivative of the discrete rollout."""

    def test_ref_rollout_tangents(self, name, impl):
        rng = np.random.default_rng(13)
        x0 = np.array([[0.0, 0.0, 0.2, 1.0]])
        knots = _random_knots(rng)[None]
        states, inputs, dstates, dinputs = impl.ref_rollout(
            x0, knots, 0.1, 20, 2, CAR, with_grad=True)
        h = 1e-6
        for q in range(knots.size):
            dk = np.zeros_like(knots)
            dk.flat[q] = h
            sp, ip_ = impl.ref_rollout(x0, knots + dk, 0.1, 20, 2, CAR)
            sm, im_ = impl.ref_rollout(x0, knots - dk, 0.1, 20, 2, CAR)
            np.testing.assert_allclose(dstates[0, :, :, q], (sp[0] - sm[0]) / (2 * h),
                                       rtol=2e-5, atol=1e-7)
            np.testing.assert_allclose(dinputs[0, :, :, q], (ip_[0] - im_[0]) / (2 * h),
                                       rtol=2e-5, atol=1e-9)

    def test_closed_rollout_tangents(self, name, impl):
        rng = np.random.default_rng(14)
        x0 = np.array([[0.1, -0.2, 0.15, 1.2, 0.05],
                       [-0.3, 0.25, -0.1, 1.8, -0.08]])
        ref0 = np.array([0.0, 0.0, 0.0, 1.5])
        knots = _random_knots(rng)
        out = impl.closed_rollout(x0, ref0, knots, 0.1, 20, 2, CAR, with_grad=True)
        h = 1e-6
        for q in range(knots.size):
            dk = np.zeros_like(knots)
            dk.flat[q] = h
            op = impl.closed_rollout(x0, ref0, knots + dk, 0.1, 20, 2, CAR)
            om = impl.closed_rollout(x0, ref0, knots - dk, 0.1, 20, 2, CAR)
            np.testing.assert_allclose(out["dstates"][:, :, :, q],
                                       (op["states"] - om["states"]) / (2 * h),
                                       rtol=5e-5, atol=1e-6)
            np.testing.assert_allclose(out["dg"][:, :, q],
                                       (op["g"] - om["g"]) / (2 * h),
                                       rtol=5e-5, atol=1e-6)
            np.testing.assert_allclose(out["dinputs"][:, :, :, q],
                                       (op["inputs"] - om["inputs"]) / (2 * h),
                                       rtol=5e-5, atol=1e-6)
            np.testing.assert_allclose(out["dref"][:, :, q],
                                       (op["ref"] - om["ref"]) / (2 * h),
                                       rtol=5e-5, atol=1e-7)

    def test_openloop_rollout_tangents(self, name, impl):
        rng = np.random.default_rng(15)
        x0 = np.array([[0.0, 0.0, 0.3, 2.0, 0.0]])
        u = rng.normal(size=(1, 6, 2)) * 1.5
        out = impl.openloop_rollout(x0, u, 0.1, 3, CAR, with_grad=True)
        h = 1e-6
        for q in range(u.size):
            du = np.zeros_like(u)
            du.flat[q] = h
            op = impl.openloop_rollout(x0, u + du, 0.1, 3, CAR)
            om = impl.openloop_rollout(x0, u - du, 0.1, 3, CAR)
            np.testing.assert_allclose(out["dstates"][:, :, :, q],
                                       (op["states"] - om["states"]) / (2 * h),
                                       rtol=2e-5, atol=1e-8)


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_closed_rollout_zero_gain_reduces_to_reference(name, impl):
    """With zero gains and matching starts, samples ride the reference."""
    car = CarConfig().open_loop().as_array()
    rng = np.random.default_rng(16)
    knots = _random_knots(rng)
    ref0 = np.array([0.0, 0.0, 0.1, 1.0])
    x0 = np.array([[0.0, 0.0, 0.1, 1.0, 0.3]])
    out = impl.closed_rollout(x0, ref0, knots, 0.1, 25, 4, car)
    np.testing.assert_allclose(out["states"][0, :, :4], out["ref"], atol=1e-12)
    np.testing.assert_allclose(out["g"], 0.0, atol=1e-15)


def test_sat_properties():
    lo, hi, m = -1.0, 1.0, 0.04
    z = np.linspace(-3, 3, 2001)
    v, d1, d2 = pure._sat(z, lo, hi, m)
    assert np.all(v >= lo) and np.all(v <= hi)
    inside = (z >= lo + m) & (z <= hi - m)
    np.testing.assert_array_equal(v[inside], z[inside])
    # C^1 away from the seams (the second derivative jumps there)
    num = np.gradient(v, z)
    dz = z[1] - z[0]
    off_seam = (np.abs(z - (lo + m)) > 2 * dz) & (np.abs(z - (hi - m)) > 2 * dz)
    np.testing.assert_allclose(num[off_seam][5:-5], d1[off_seam][5:-5], atol=5e-3)
    assert np.all(d1 > 0)
