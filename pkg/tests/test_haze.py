import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvsl import haze


def random_image(rng, h=12, w=12):
    return rng.uniform(0, 1, (3, h, w))


def procedural_depth(h=12, w=12):
    return np.linspace(0.1, 1.0, h)[:, None] * np.ones((h, w))


def dark_channel_bruteforce(img, patch):
    """Double-loop valid-window minimum; the independent oracle."""
    _, h, w = img.shape
    half = patch // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            lo_i, hi_i = max(0, i - half), min(h, i + half + 1)
            lo_j, hi_j = max(0, j - half), min(w, j + half + 1)
            out[i, j] = img[:, lo_i:hi_i, lo_j:hi_j].min()
    return out


class TestTransmission:
    def test_zero_depth_full_transmission(self):
        t = haze.transmission_from_depth(np.zeros((4, 4)), beta=1.0)
        np.testing.assert_array_equal(t, np.ones((4, 4)))

    def test_large_depth_vanishes(self):
        t = haze.transmission_from_depth(np.full((2, 2), 1e6), beta=1.0)
        assert t.max() < 1e-12

    def test_closed_form_value(self):
        t = haze.transmission_from_depth(np.ones((1, 1)), beta=0.4)
        assert abs(t[0, 0] - math.exp(-0.4)) < 1e-15

    def test_negative_depth_rejected(self):
        with pytest.raises(ValueError):
            haze.transmission_from_depth(np.array([[-0.1]]), beta=1.0)

    def test_monotone_in_beta_and_depth(self):
        betas = [0.1, 0.5, 1.0, 2.0]
        depths = np.linspace(0, 2, 9)
        for d in depths:
            ts = [haze.transmission_from_depth(np.array([[d]]), b)[0, 0] for b in betas]
            assert all(a >= b for a, b in zip(ts, ts[1:]))
        for b in betas:
            ts = [haze.transmission_from_depth(np.array([[d]]), b)[0, 0] for d in depths]
            assert all(a >= c for a, c in zip(ts, ts[1:]))


class TestSynthesis:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.params = haze.HazeParams(beta=1.0, airlight=(0.8, 0.8, 0.8))

    def test_full_transmission_is_identity(self):
        j = random_image(self.rng)
        i = haze.synthesize_haze(j, np.ones((12, 12)), self.params)
        np.testing.assert_allclose(i, j)

    def test_zero_transmission_is_airlight(self):
        j = random_image(self.rng)
        i = haze.synthesize_haze(j, np.zeros((12, 12)), self.params)
        np.testing.assert_allclose(i, np.broadcast_to(np.array([0.8, 0.8, 0.8])[:, None, None], j.shape))

    def test_airlight_is_fixed_point(self):
        j = np.broadcast_to(np.array([0.8, 0.8, 0.8])[:, None, None], (3, 12, 12)).copy()
        t = self.rng.uniform(0, 1, (12, 12))
        np.testing.assert_allclose(haze.synthesize_haze(j, t, self.params), j)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            haze.synthesize_haze(np.zeros((3, 4, 4)), np.zeros((5, 5)), self.params)

    def test_round_trip_inversion(self):
        j = random_image(self.rng)
        t = np.clip(haze.transmission_from_depth(procedural_depth(), 1.0), 0.05, 1.0)
        i = haze.synthesize_haze(j, t, self.params)
        back, info = haze.invert_haze(i, t, self.params)
        assert np.abs(back - j).max() < 1e-9
        assert info["clamped_pixels"] == 0

    def test_invert_airlight_gives_airlight(self):
        a = np.broadcast_to(np.array([0.8, 0.8, 0.8])[:, None, None], (3, 6, 6)).copy()
        t = self.rng.uniform(0.05, 1.0, (6, 6))
        back, _ = haze.invert_haze(a, t, self.params)
        np.testing.assert_allclose(back, a, atol=1e-12)

    def test_invert_flags_low_transmission(self):
        t = np.full((4, 4), 0.01)
        _, info = haze.invert_haze(np.full((3, 4, 4), 0.5), t, self.params)
        assert info["clamped_pixels"] == 16


class TestHazeParams:
    def test_beta_range_enforced(self):
        with pytest.raises(ValueError):
            haze.HazeParams(beta=0.0, airlight=(1, 1, 1))
        with pytest.raises(ValueError):
            haze.HazeParams(beta=6.0, airlight=(1, 1, 1))

    def test_airlight_range_enforced(self):
        with pytest.raises(ValueError):
            haze.HazeParams(beta=1.0, airlight=(1.2, 0.5, 0.5))


class TestDarkChannel:
    def test_constant_image(self):
        img = np.full((3, 8, 8), 0.4)
        np.testing.assert_array_equal(haze.dark_channel(img), np.full((8, 8), 0.4))

    def test_single_dark_pixel_spreads(self):
        img = np.ones((3, 11, 11))
        img[:, 5, 5] = 0.0
        dc = haze.dark_channel(img, haze.DarkChannelConfig(patch=5))
        want = np.ones((11, 11))
        want[3:8, 3:8] = 0.0
        np.testing.assert_array_equal(dc, want)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        for patch in (1, 3, 5):
            img = random_image(rng)
            got = haze.dark_channel(img, haze.DarkChannelConfig(patch=patch))
            np.testing.assert_array_equal(got, dark_channel_bruteforce(img, patch))

    def test_oversize_patch_rejected(self):
        with pytest.raises(ValueError):
            haze.dark_channel(np.zeros((3, 4, 4)), haze.DarkChannelConfig(patch=9))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(5, 16), st.integers(5, 16),
           st.sampled_from([1, 3, 5]))
    def test_bruteforce_equivalence_randomized(self, seed, h, w, patch):
        img = np.random.default_rng(seed).uniform(0, 1, (3, h, w))
        got = haze.dark_channel(img, haze.DarkChannelConfig(patch=patch))
        np.testing.assert_array_equal(got, dark_channel_bruteforce(img, patch))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_monotone_haze_raises_dark_channel(self, seed):
        # with A >= J everywhere, synthesis brightens, so DC can only rise
        rng = np.random.default_rng(seed)
        j = rng.uniform(0, 1, (3, 10, 10))
        t = rng.uniform(0, 1, (10, 10))
        params = haze.HazeParams(beta=1.0, airlight=(1.0, 1.0, 1.0))
        i = haze.synthesize_haze(j, t, params)
        assert (i >= j - 1e-12).all()
        assert (haze.dark_channel(i) >= haze.dark_channel(j) - 1e-12).all()


class TestAirlight:
    def test_constant_image(self):
        img = np.full((3, 10, 10), 0.6)
        np.testing.assert_allclose(haze.estimate_airlight(img), (0.6, 0.6, 0.6))

    def test_single_white_pixel(self):
        img = np.zeros((3, 10, 10))
        img[:, 4, 7] = 1.0
        a = haze.estimate_airlight(img, haze.DarkChannelConfig(patch=1))
        np.testing.assert_allclose(a, (1.0, 1.0, 1.0))

    def test_recovers_synthesis_airlight(self):
        rng = np.random.default_rng(2)
        j = rng.uniform(0, 0.7, (3, 64, 64))
        depth = np.linspace(0.0, 8.0, 64)[:, None] * np.ones((64, 64))
        t = haze.transmission_from_depth(depth, 1.0)
        assert (t < 0.05).any()
        params = haze.HazeParams(beta=1.0, airlight=(0.8, 0.8, 0.8))
        i = haze.synthesize_haze(j, t, params)
        a = haze.estimate_airlight(i)
        assert max(abs(x - 0.8) for x in a) < 0.05


class TestColinearity:
    def test_genuine_synthesis_residual_zero(self):
        rng = np.random.default_rng(3)
        j = rng.uniform(0, 0.7, (3, 12, 12))
        t = rng.uniform(0.1, 0.9, (12, 12))
        a = (0.9, 0.85, 0.95)
        i = haze.synthesize_haze(j, t, haze.HazeParams(beta=1.0, airlight=a))
        res = haze.colinearity_residual(j, i, a)
        assert np.abs(res).max() < 1e-10

    def test_identical_images_residual_zero(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 0.7, (3, 8, 8))
        res = haze.colinearity_residual(img, img, (0.9, 0.9, 0.9))
        assert np.abs(res).max() < 1e-12

    def test_orthogonal_offsets_residual_one(self):
        a = (0.5, 0.5, 0.5)
        clear = np.zeros((3, 1, 1))
        hazy = np.zeros((3, 1, 1))
        clear[:, 0, 0] = [0.7, 0.5, 0.5]   # offset (0.2, 0, 0)
        hazy[:, 0, 0] = [0.5, 0.7, 0.5]    # offset (0, 0.2, 0)
        res = haze.colinearity_residual(clear, hazy, a)
        assert abs(res[0, 0] - 1.0) < 1e-12

    def test_degenerate_pixels_excluded(self):
        a = (0.5, 0.5, 0.5)
        clear = np.full((3, 2, 2), 0.5)  # every pixel equals airlight
        hazy = np.full((3, 2, 2), 0.9)
        res = haze.colinearity_residual(clear, hazy, a)
        np.testing.assert_array_equal(res, np.zeros((2, 2)))
