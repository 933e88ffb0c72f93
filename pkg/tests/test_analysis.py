import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmark.analysis import (
    DegenerateReferenceError,
    PerturbationProfile,
    average_profiles,
    perturbation_level,
    profile,
)
from advmark.attack import Placement
from advmark.imaging import RasterImage, WatermarkAsset, composite
from advmark.oracle import ActivationVector, builtin_fragile_classifier


def vec(layer, values):
    return ActivationVector(layer=layer, values=tuple(values))


class TestPerturbationLevel:
    def test_identical_activations_zero(self):
        a = vec("fc", [1.0, -2.0, 3.0])
        assert perturbation_level(a, a) == 0.0

    def test_three_four_five_example(self):
        # reference (3, 4), perturbed (0, 0): diff norm 5, ref norm 5 -> 1
        assert perturbation_level(vec("l", [0.0, 0.0]), vec("l", [3.0, 4.0])) == 1.0

    def test_scale_invariance(self):
        a = vec("l", [1.0, 2.0, 2.0])
        b = vec("l", [0.5, 2.5, 1.0])
        base = perturbation_level(b, a)
        for c in (0.25, 3.0, 1000.0):
            scaled = perturbation_level(
                vec("l", [c * v for v in b.values]), vec("l", [c * v for v in a.values])
            )
            assert scaled == pytest.approx(base, rel=1e-12)

    def test_zero_norm_reference_rejected(self):
        with pytest.raises(DegenerateReferenceError):
            perturbation_level(vec("l", [1.0, 1.0]), vec("l", [0.0, 0.0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            perturbation_level(vec("l", [1.0]), vec("l", [1.0, 2.0]))

    def test_layer_mismatch_rejected(self):
        with pytest.raises(ValueError):
            perturbation_level(vec("a", [1.0]), vec("b", [1.0]))

    def test_nonfinite_activations_rejected(self):
        with pytest.raises(ValueError):
            vec("l", [float("nan")])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=6),
           st.integers(0, 100))
    @settings(max_examples=100, deadline=None)
    def test_triangle_bound(self, ref_values, seed):
        ref = np.asarray(ref_values)
        if np.linalg.norm(ref) == 0:
            return
        rng = np.random.default_rng(seed)
        per = rng.uniform(-100, 100, size=len(ref_values))
        level = perturbation_level(vec("l", per.tolist()), vec("l", ref_values))
        bound = (np.linalg.norm(per) + np.linalg.norm(ref)) / np.linalg.norm(ref)
        assert level <= bound + 1e-9


class TestProfile:
    def test_identical_images_all_zero(self):
        oracle = builtin_fragile_classifier(4)
        img = RasterImage.full(16, 16, 100)
        prof = profile(img, img, oracle)
        assert prof.values() == [0.0]
        assert prof.layers() == ["band_means"]

    def test_builtin_band_means_hand_value(self):
        # clean: both bands 128; marked: opaque black 8x8 at alpha 255 zeroes
        # 64 of 512 band-0 pixels, dropping its mean by 64*128/512 = 16 luma
        oracle = builtin_fragile_classifier(2)
        clean = RasterImage.full(32, 32, 128)
        wm = WatermarkAsset.from_image(RasterImage.full(8, 8, (0, 0, 0, 255)))
        marked = composite(clean, wm, Placement(4, 4, 255))
        prof = profile(clean, marked, oracle)
        m = 128.0 / 255.0
        delta = 16.0 / 255.0
        expected = delta / np.sqrt(2 * m * m)
        assert prof.values()[0] == pytest.approx(expected, rel=1e-12)

    def test_requery_invariance(self):
        oracle = builtin_fragile_classifier(3)
        clean = RasterImage.full(15, 15, 90)
        wm = WatermarkAsset.from_image(RasterImage.full(3, 3, (255, 255, 255, 255)))
        marked = composite(clean, wm, Placement(6, 6, 200))
        assert profile(clean, marked, oracle).levels == profile(clean, marked, oracle).levels

    def test_csv_and_json_exports(self):
        prof = PerturbationProfile(levels=(("shallow", 0.25), ("deep", 1.5)))
        csv_text = prof.to_csv()
        lines = csv_text.strip().splitlines()
        assert lines[0] == "layer,E_l"
        assert lines[1].startswith("shallow,")
        import json

        parsed = json.loads(prof.to_json())
        assert parsed == [{"layer": "shallow", "E_l": 0.25}, {"layer": "deep", "E_l": 1.5}]


class TestAverageProfiles:
    def test_mean_of_profiles(self):
        a = PerturbationProfile(levels=(("l1", 1.0), ("l2", 3.0)))
        b = PerturbationProfile(levels=(("l1", 2.0), ("l2", 5.0)))
        avg = average_profiles([a, b])
        assert avg.levels == (("l1", 1.5), ("l2", 4.0))

    def test_layer_mismatch_rejected(self):
        a = PerturbationProfile(levels=(("l1", 1.0),))
        b = PerturbationProfile(levels=(("lX", 2.0),))
        with pytest.raises(ValueError):
            average_profiles([a, b])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_profiles([])
