import math

import numpy as np
import pytest

from seunet import autodiff as ad
from seunet.filter_bank import FREE_FLOOR, ScaleFilterBank, SigmaParam, scale_group_conv, sigma_gradients
from seunet.scale_space import build_basis, gaussian_1d, grid


def _bank(gamma=2, cin=2, cout=3, order=1, mode="constrained", first=False, seed=0, norm="none", bounds=None):
    bounds = bounds or [(0.6 + k, 1.2 + k) for k in range(gamma)]
    return ScaleFilterBank(cin, cout, bounds, order=order, mode=mode, first_layer=first,
                           rng=np.random.default_rng(seed), normalization=norm)


class TestSigmaParam:
    def test_constrained_formula(self):
        p = SigmaParam(1.0, 3.0, raw=0.7)
        assert p.value() == pytest.approx(math.tanh(0.7) + 2.0, rel=1e-15)
        assert float(p.tensor().data) == pytest.approx(p.value(), rel=1e-15)

    @pytest.mark.parametrize("raw", [-1e6, -30.0, 0.0, 30.0, 1e6])
    def test_constrained_stays_inside(self, raw):
        p = SigmaParam(0.5, 0.9, raw=raw)
        if abs(raw) < 10:
            assert p.in_bounds()
        else:
            # tanh saturates in floating point; the value pins to a bound
            assert min(abs(p.value() - 0.5), abs(p.value() - 0.9)) < 1e-12

    def test_fixed_ignores_raw(self):
        p = SigmaParam(1.0, 2.0, "fixed", raw=5.0)
        assert p.value() == 1.5
        with ad.Graph() as g:
            g.backward(ad.sum(p.tensor() * ad.Tensor(1.0, requires_grad=True)))
        assert p.raw.grad == 0.0

    def test_free_starts_at_midpoint_and_stays_positive(self):
        p = SigmaParam(1.0, 2.0, "free")
        assert p.value() == pytest.approx(1.5, rel=1e-12)
        p.raw.data = np.asarray(-500.0)
        assert p.value() == pytest.approx(FREE_FLOOR)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            SigmaParam(2.0, 1.0)
        with pytest.raises(ValueError):
            SigmaParam(0.0, 1.0, mode="loose")


class TestRealizeFilters:
    def test_single_gaussian(self):
        bank = _bank(gamma=1, cin=1, cout=1, order=0, bounds=[(0.8, 1.6)])
        bank.alpha.data[:] = 1.0
        (f,) = bank.realize_filters()
        g = gaussian_1d(grid(7), bank.sigma_values()[0])
        np.testing.assert_array_equal(f[0, 0], np.outer(g, g))
        np.testing.assert_allclose(f[0, 0], np.outer(*[gaussian_1d(grid(7), 1.2)] * 2), rtol=1e-14)

    def test_sizes_follow_sigma(self):
        sig = [0.5, 1.0, 1.5, 2.0, 2.5]
        bank = _bank(gamma=5, bounds=[(s - 0.1, s + 0.1) for s in sig])
        assert bank.sigma_values() == pytest.approx(sig)
        assert [f.shape[-1] for f in bank.realize_filters()] == [3, 5, 7, 9, 11]
        assert all(f.shape[:2] == (3, 2) for f in bank.realize_filters())

    def test_equal_sigma_identical(self):
        bank = _bank(mode="fixed", bounds=[(1.0, 1.4), (1.0, 1.4)])
        a, b = bank.realize_filters()
        np.testing.assert_array_equal(a, b)

    def test_is_alpha_combination(self):
        bank = _bank(order=1)
        for f, s in zip(bank.realize_filters(), bank.sigma_values()):
            basis = build_basis(s, 1)
            want = sum(bank.alpha.data[b][:, :, None, None] * basis.kernels[ij]
                       for b, ij in enumerate(basis.indices))
            np.testing.assert_allclose(f, want, atol=1e-15)

    def test_overlapping_constrained_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            _bank(bounds=[(0.5, 1.0), (0.9, 1.4)])

    def test_ordered_sigmas(self):
        bank = _bank(gamma=4, bounds=[(0.2 + 0.5 * k, 0.6 + 0.5 * k) for k in range(4)])
        for s, r in zip(bank.sigmas, [3.0, -3.0, 8.0, -8.0]):
            s.raw.data = np.asarray(r)
        v = bank.sigma_values()
        assert all(a < b for a, b in zip(v, v[1:]))


class TestScaleGroupConv:
    @pytest.mark.parametrize("norm", ["none", "scale"])
    def test_separable_matches_direct(self, norm):
        rng = np.random.default_rng(1)
        bank = _bank(norm=norm)
        x = ad.Tensor(rng.standard_normal((2, 2, 2, 9, 7)))
        np.testing.assert_allclose(bank(x).data, bank(x, method="direct").data, atol=1e-13)

    def test_constant_input_derivative_only(self):
        bank = _bank(gamma=2, cin=1, cout=2, first=True)
        bank.alpha.data[0] = 0.0
        out = bank(ad.Tensor(np.full((1, 1, 16, 16), 3.0))).data
        t = max(f.shape[-1] for f in bank.realize_filters()) // 2
        assert np.max(np.abs(out[..., t:-t, t:-t])) < 1e-12
        assert np.max(np.abs(out)) > 1e-3  # borders see the zero padding

    def test_delta_impulse_returns_filter(self):
        bank = _bank(gamma=2, cin=1, cout=2, first=True, bounds=[(0.4, 0.8), (0.9, 1.3)])
        x = np.zeros((1, 1, 8, 8))
        x[0, 0, 4, 3] = 1.0
        out = bank(ad.Tensor(x)).data[0]
        for k, f in enumerate(bank.realize_filters()):
            t = f.shape[-1]
            h = t // 2
            # cross-correlation with a unit impulse, by direct summation
            want = np.zeros((2, 8, 8))
            for o in range(2):
                for y in range(8):
                    for xx in range(8):
                        dy, dx = 4 - y + h, 3 - xx + h
                        if 0 <= dy < t and 0 <= dx < t:
                            want[o, y, xx] = f[o, 0, dy, dx]
            np.testing.assert_allclose(out[k], want, atol=1e-15)
            np.testing.assert_allclose(out[k, :, 4 - h:4 + h + 1, 3 - h:3 + h + 1], f[:, 0, ::-1, ::-1], atol=1e-15)

    def test_group_permutation(self):
        rng = np.random.default_rng(2)
        bounds = [(0.4, 0.8), (1.0, 1.6), (2.0, 2.4)]
        perm = [2, 0, 1]
        a = _bank(gamma=3, bounds=bounds, seed=3)
        b = _bank(gamma=3, bounds=[bounds[p] for p in perm], seed=3)
        for k, p in enumerate(perm):
            b.sigmas[k].raw.data = np.asarray(0.1 * p)
            a.sigmas[p].raw.data = np.asarray(0.1 * p)
        x = rng.standard_normal((1, 3, 2, 8, 8))
        ya = a(ad.Tensor(x)).data
        yb = b(ad.Tensor(x[:, perm])).data
        np.testing.assert_allclose(yb, ya[:, perm], atol=1e-14)

    def test_no_batch_axis(self):
        rng = np.random.default_rng(4)
        bank = _bank()
        x = rng.standard_normal((2, 2, 6, 6))
        np.testing.assert_array_equal(bank(ad.Tensor(x)).data, bank(ad.Tensor(x[None])).data[0])

    def test_shape_errors(self):
        bank = _bank()
        with pytest.raises(ValueError, match=r"expected \(N, 2, 2, H, W\)"):
            bank(ad.Tensor(np.zeros((1, 3, 2, 4, 4))))
        first = _bank(first=True, cin=1)
        with pytest.raises(ValueError, match="image channels"):
            first(ad.Tensor(np.zeros((1, 2, 4, 4))))

    def test_zeroing_alpha_index_removes_basis_everywhere(self):
        rng = np.random.default_rng(5)
        bank = _bank(order=1)
        bank.alpha.data[1] = 0.0
        for f, s in zip(bank.realize_filters(), bank.sigma_values()):
            basis = build_basis(s, 1)
            want = (bank.alpha.data[0][:, :, None, None] * basis.kernels[(0, 0)]
                    + bank.alpha.data[2][:, :, None, None] * basis.kernels[(0, 1)])
            np.testing.assert_allclose(f, want, atol=1e-15)
        x = ad.Tensor(rng.standard_normal((1, 2, 2, 8, 8)))
        before = bank(x).data
        bank.alpha.data[1] = 0.5
        d = bank(x).data - before
        assert all(np.abs(d[0, k]).max() > 1e-6 for k in range(2))


class TestSigmaGradients:
    @pytest.mark.parametrize("norm", ["none", "scale"])
    @pytest.mark.parametrize("mode", ["constrained", "free"])
    def test_finite_difference(self, norm, mode):
        rng = np.random.default_rng(6)
        bank = _bank(gamma=2, cin=2, cout=2, mode=mode, norm=norm)
        for s, r in zip(bank.sigmas, (0.3, -0.2)):
            s.raw.data = s.raw.data + r
        x = rng.standard_normal((1, 2, 2, 6, 6))
        up = rng.standard_normal((1, 2, 2, 6, 6))
        sizes = [f.shape[-1] for f in bank.realize_filters()]
        got = sigma_gradients(bank, x, up)

        def loss():
            return float(np.sum(scale_group_conv(ad.Tensor(x), bank).data * up))

        h = 1e-5
        for k, s in enumerate(bank.sigmas):
            r0 = float(s.raw.data)
            s.raw.data = np.asarray(r0 + h)
            lp = loss()
            s.raw.data = np.asarray(r0 - h)
            lm = loss()
            s.raw.data = np.asarray(r0)
            assert [f.shape[-1] for f in bank.realize_filters()] == sizes
            assert got["sigma_raw"][k] == pytest.approx((lp - lm) / (2 * h), rel=1e-4)

    def test_alpha_and_input_finite_difference(self):
        from helpers import check_grads
        rng = np.random.default_rng(7)
        bank = _bank(norm="scale")
        x = ad.Tensor(rng.standard_normal((1, 2, 2, 6, 6)), requires_grad=True)
        up = rng.standard_normal((1, 2, 3, 6, 6))
        check_grads(lambda: ad.sum(bank(x) * up), [bank.alpha, x])

    def test_fixed_mode_zero(self):
        rng = np.random.default_rng(8)
        bank = _bank(mode="fixed")
        got = sigma_gradients(bank, rng.standard_normal((1, 2, 2, 6, 6)), rng.standard_normal((1, 2, 3, 6, 6)))
        np.testing.assert_array_equal(got["sigma_raw"], [0.0, 0.0])
        assert np.abs(got["alpha"]).max() > 0

    def test_alpha_single_pixel(self):
        rng = np.random.default_rng(9)
        bank = _bank(gamma=1, cin=2, cout=3, bounds=[(0.8, 1.2)])
        x = rng.standard_normal((1, 1, 2, 1, 1))
        up = rng.standard_normal((1, 1, 3, 1, 1))
        got = sigma_gradients(bank, x, up)["alpha"]
        basis = build_basis(1.0, 1)
        c = basis.size // 2
        centre = np.array([basis.kernels[ij][c, c] for ij in basis.indices])
        want = centre[:, None, None] * up[0, 0, :, 0, 0][None, :, None] * x[0, 0, :, 0, 0][None, None, :]
        np.testing.assert_allclose(got, want, atol=1e-15)
