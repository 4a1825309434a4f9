import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ttdfusion.metrics import (
    CSV_COLUMNS,
    SSIM_C1,
    UndefinedMetricError,
    ag,
    ce,
    ei,
    en,
    evaluate_all,
    scd,
    sd,
    sf,
    ssim,
)
from ttdfusion.rng import CounterRNG


def _img(seed, h=8, w=8, c=1):
    return CounterRNG(seed, stream=77).uniform((h, w, c))


class TestEntropy:
    def test_constant(self):
        assert en(np.full((6, 6, 1), 0.4)) == 0.0

    def test_two_levels(self):
        img = np.zeros((4, 4, 1))
        img[:2] = 1.0
        assert en(img) == 1.0

    def test_oracle(self):
        img = _img(1)
        assert abs(en(img) - oracles.en(img)) < 1e-9

    @settings(max_examples=25)
    @given(st.integers(0, 2**40))
    def test_bounded(self, seed):
        assert 0.0 <= en(_img(seed, 20, 20)) <= 8.0


class TestCrossEntropy:
    def test_identical_zero(self):
        x = _img(2)
        assert abs(ce(x, [x, x])) < 1e-12

    def test_hand_computed(self):
        f = np.zeros((1, 4, 1))
        f[0, 2:] = 1.0  # bins 0 and 255, half each
        src = np.zeros((1, 4, 1))  # all in bin 0
        eps = 1e-12
        p0, q0, q255, p255 = 1 + eps, 0.5 + eps, 0.5 + eps, eps
        expected = p0 * math.log2(p0 / q0) + p255 * math.log2(p255 / q255)
        assert ce(f, [src]) == pytest.approx(expected, abs=1e-9)

    def test_oracle(self):
        f, a, b = _img(3), _img(4), _img(5)
        assert abs(ce(f, [a, b]) - oracles.ce(f, [a, b])) < 1e-9


class TestSCD:
    def test_perfect_correlation(self):
        a = _img(6) * 0.5
        b = _img(7) * 0.5
        assert scd(a + b, a, b) == pytest.approx(2.0, abs=1e-12)

    def test_undefined(self):
        c = np.full((4, 4, 1), 0.3)
        with pytest.raises(UndefinedMetricError):
            scd(c, c, c)
        assert evaluate_all(c, [c, c]).scd is None

    def test_oracle_and_symmetry(self):
        f, a, b = _img(8), _img(9), _img(10)
        assert abs(scd(f, a, b) - oracles.scd(f, a, b)) < 1e-9
        assert scd(f, a, b) == pytest.approx(scd(f, b, a), abs=1e-15)


class TestIntensityStatistics:
    def test_sd(self):
        assert sd(np.full((3, 3, 1), 0.2)) == 0.0
        half = np.zeros((4, 4, 1))
        half[:, 2:] = 1.0
        assert sd(half) == 127.5
        img = _img(11)
        assert abs(sd(img) - oracles.sd(img)) < 1e-9

    def test_ag(self):
        assert ag(np.full((5, 5, 1), 0.7)) == 0.0
        ramp = np.tile(np.arange(6, dtype=np.float64) / 255.0, (5, 1))[:, :, None]
        assert ag(ramp) == pytest.approx(math.sqrt(0.5), abs=1e-12)
        img = _img(12)
        assert abs(ag(img) - oracles.ag(img)) < 1e-9

    def test_ei(self):
        assert ei(np.full((5, 5, 1), 0.7)) == 0.0
        step = np.zeros((4, 4, 1))
        step[:, 2:] = 1.0
        # columns 1 and 2 see the edge with magnitude 4 * 255, columns 0 and 3 see nothing
        assert ei(step) == pytest.approx(2 * 4 * 255 / 4, abs=1e-9)
        img = _img(13)
        assert abs(ei(img) - oracles.ei(img)) < 1e-9

    def test_sf(self):
        assert sf(np.full((5, 5, 1), 0.1)) == 0.0
        stripes = np.tile(np.array([0.0, 1.0] * 4), (6, 1))[:, :, None]
        assert sf(stripes) == 255.0
        img = _img(14)
        assert abs(sf(img) - oracles.sf(img)) < 1e-9


class TestSSIM:
    def test_identity_exact(self):
        for seed in range(5):
            x = _img(seed, 12, 9)
            assert ssim(x, [x]) == 1.0

    def test_constant_images(self):
        a, b = np.full((12, 12, 1), 0.2), np.full((12, 12, 1), 0.6)
        m1, m2 = 0.2 * 255, 0.6 * 255
        expected = (2 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1)
        assert ssim(a, [b]) == pytest.approx(expected, rel=1e-12)

    def test_oracle(self):
        f, a = _img(15), _img(16)
        assert abs(ssim(f, [a]) - oracles.ssim(f, [a])) < 1e-6

    def test_source_order(self):
        f, a, b = _img(17), _img(18), _img(19)
        assert ssim(f, [a, b]) == pytest.approx(ssim(f, [b, a]), abs=1e-15)


class TestEvaluateAll:
    def test_row_matches_individual_calls(self):
        f, a, b = _img(20, c=3), _img(21, c=3), _img(22, c=3)
        row = evaluate_all(f, [a, b], ["a", "b"])
        assert row.values() == (en(f), sd(f), ag(f), ei(f), sf(f), scd(f, a, b), ce(f, [a, b]), ssim(f, [a, b]))
        assert row.source_ids == ("a", "b")
        assert len(CSV_COLUMNS) == len(row.values())

    def test_degenerate_single_source(self):
        x = _img(23)
        row = evaluate_all(x, [x])
        assert row.ssim == 1.0 and abs(row.ce) < 1e-12 and row.scd is None

    def test_rgb_matches_oracles(self):
        f, a, b = _img(24, c=3), _img(25, c=3), _img(26, c=3)
        row = evaluate_all(f, [a, b])
        ref = (oracles.en(f), oracles.sd(f), oracles.ag(f), oracles.ei(f), oracles.sf(f), oracles.scd(f, a, b),
               oracles.ce(f, [a, b]), oracles.ssim(f, [a, b]))
        np.testing.assert_allclose(row.values(), ref, atol=1e-6)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**40))
    def test_invariants(self, seed):
        f, a, b = _img(seed, 10, 10), _img(seed + 1, 10, 10), _img(seed + 2, 10, 10)
        row = evaluate_all(f, [a, b])
        assert 0 <= row.en <= 8 and -1 <= row.ssim <= 1
        assert min(row.sd, row.ag, row.ei, row.sf) >= 0 and row.ce >= 0
