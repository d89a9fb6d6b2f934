import threading

import numpy as np
import pytest

from conftest import central_diff, rel_error
from lcarep.errors import InvalidArgumentError
from lcarep.lca import (
    FLAT,
    PER_SIZE,
    LcaConfig,
    lca_backward,
    lca_coefficient_map,
    lca_forward,
    lca_forward_bruteforce,
    lca_window_count,
)

CONFIGS = [LcaConfig(), LcaConfig(weighting=PER_SIZE), LcaConfig(include_1x1=True),
           LcaConfig(include_1x1=True, weighting=PER_SIZE)]
TOY = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]


def enumerate_windows(h, w, include_1x1):
    return sum(
        1
        for wh in range(1, h + 1)
        for ww in range(1, w + 1)
        for _ in range(h - wh + 1)
        for _ in range(w - ww + 1)
        if include_1x1 or wh * ww > 1
    )


class TestWindowCount:
    def test_seven_by_seven(self):
        assert lca_window_count(7, 7, LcaConfig()) == 735

    def test_single_cell_with_1x1(self):
        assert lca_window_count(1, 1, LcaConfig(include_1x1=True)) == 1

    def test_two_by_two(self):
        assert lca_window_count(2, 2, LcaConfig()) == 5

    @pytest.mark.parametrize("include_1x1", [False, True])
    def test_matches_enumeration(self, include_1x1):
        for h in range(1, 13):
            for w in range(1, 13):
                assert lca_window_count(h, w, LcaConfig(include_1x1)) == enumerate_windows(h, w, include_1x1)


class TestForward:
    def test_toy_flat(self):
        assert lca_forward(TOY)[0] == pytest.approx(2.5)
        assert lca_forward_bruteforce(TOY)[0] == pytest.approx(2.5)

    def test_toy_per_size(self):
        cfg = LcaConfig(weighting=PER_SIZE)
        assert lca_forward(TOY, cfg)[0] == pytest.approx(2.5)
        assert lca_forward_bruteforce(TOY, cfg)[0] == pytest.approx(2.5)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_constant_map(self, cfg):
        fmap = np.full((5, 3, 4), 1.75)
        np.testing.assert_allclose(lca_forward(fmap, cfg), 1.75, atol=1e-12)
        np.testing.assert_allclose(lca_forward_bruteforce(fmap, cfg), 1.75, atol=1e-12)

    def test_single_cell_rejected_without_1x1(self):
        for fn in (lca_forward, lca_forward_bruteforce):
            with pytest.raises(InvalidArgumentError):
                fn(np.ones((1, 1, 3)))
        assert lca_forward(np.full((1, 1, 2), 3.0), LcaConfig(include_1x1=True)).tolist() == [3.0, 3.0]

    def test_bad_weighting(self):
        with pytest.raises(InvalidArgumentError):
            LcaConfig(weighting="geometric")

    def test_batch_equals_per_map(self, rng):
        maps = rng.normal(size=(3, 4, 6, 5))
        np.testing.assert_allclose(lca_forward(maps), [lca_forward(m) for m in maps], atol=1e-12)

    def test_float32_in_float32_out(self, rng):
        assert lca_forward(rng.normal(size=(4, 4, 2)).astype(np.float32)).dtype == np.float32

    @pytest.mark.parametrize("weighting", [FLAT, PER_SIZE])
    def test_oracle_equivalence(self, weighting):
        cfg = LcaConfig(weighting=weighting)
        rng = np.random.default_rng(11)
        for _ in range(500):
            h, w = rng.integers(1, 11, size=2)
            if h * w == 1:
                h = 2
            fmap = rng.uniform(-5, 5, size=(h, w, rng.integers(1, 17)))
            assert np.abs(lca_forward(fmap, cfg) - lca_forward_bruteforce(fmap, cfg)).max() <= 1e-5

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_linearity(self, rng, cfg):
        x, y = rng.normal(size=(2, 6, 7, 3))
        a, b = 1.7, -0.3
        np.testing.assert_allclose(lca_forward(a * x + b * y, cfg), a * lca_forward(x, cfg) + b * lca_forward(y, cfg),
                                   atol=1e-5)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_flip_invariance(self, rng, cfg):
        x = rng.normal(size=(5, 8, 4))
        base = lca_forward(x, cfg)
        np.testing.assert_allclose(lca_forward(x[::-1], cfg), base, atol=1e-6)
        np.testing.assert_allclose(lca_forward(x[:, ::-1], cfg), base, atol=1e-6)


class TestCoefficientMap:
    def test_single_cell(self):
        np.testing.assert_array_equal(lca_coefficient_map(1, 1, LcaConfig(include_1x1=True)), [[1.0]])

    def test_two_by_two_flat(self):
        np.testing.assert_allclose(lca_coefficient_map(2, 2, LcaConfig()), 0.25, atol=1e-15)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_sums_to_one_and_symmetric(self, cfg):
        for h in range(1, 13):
            for w in range(1, 13):
                if lca_window_count(h, w, cfg) == 0:
                    continue
                c = lca_coefficient_map(h, w, cfg)
                assert abs(c.sum() - 1) <= 1e-9
                np.testing.assert_allclose(c, c[::-1], atol=1e-15)
                np.testing.assert_allclose(c, c[:, ::-1], atol=1e-15)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_reproduces_forward(self, rng, cfg):
        x = rng.normal(size=(7, 5, 6))
        coeff = lca_coefficient_map(7, 5, cfg)
        np.testing.assert_allclose(np.einsum("ij,ijc->c", coeff, x), lca_forward(x, cfg), atol=1e-6)

    def test_cached_and_read_only(self):
        a = lca_coefficient_map(6, 6)
        assert a is lca_coefficient_map(6, 6)
        with pytest.raises(ValueError):
            a[0, 0] = 1.0

    def test_concurrent_lookup(self):
        results = []

        def work():
            results.append(lca_coefficient_map(9, 11, LcaConfig(weighting=PER_SIZE)).copy())

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for r in results[1:]:
            np.testing.assert_array_equal(r, results[0])


class TestBackward:
    def test_zero_grad(self):
        assert not lca_backward(np.zeros(3), 4, 4).any()

    def test_two_by_two(self):
        np.testing.assert_allclose(lca_backward(np.array([1.0]), 2, 2)[..., 0], 0.25)

    def test_rejects_empty_window_set(self):
        with pytest.raises(InvalidArgumentError):
            lca_backward(np.ones(2), 1, 1)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_adjoint(self, rng, cfg):
        for _ in range(10):
            x = rng.normal(size=(6, 4, 5))
            g = rng.normal(size=5)
            lhs = lca_forward(x, cfg) @ g
            rhs = np.sum(x * lca_backward(g, 6, 4, cfg))
            assert abs(lhs - rhs) <= 1e-6

    def test_finite_differences(self, rng):
        x = rng.normal(size=(5, 6, 3))
        g = rng.normal(size=3)
        numeric = central_diff(lambda: lca_forward(x) @ g, x, eps=1e-4)
        assert rel_error(lca_backward(g, 5, 6), numeric) <= 1e-4

    def test_batched(self, rng):
        g = rng.normal(size=(2, 3))
        out = lca_backward(g, 3, 3)
        assert out.shape == (2, 3, 3, 3)
        np.testing.assert_allclose(out[1], lca_backward(g[1], 3, 3))
