"""
Unit tests for the underwater image formation model, backscatter estimation and
scene recovery.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "..", "src"))

from models.rasters import MetricDepthMap, RgbImage  # noqa: E402
from models.water import BackscatterFit, WaterProperties  # noqa: E402
from stages.physics import (  # noqa: E402
    LSAC_MAX_ITERATIONS,
    estimate_backscatter,
    gray_world,
    local_space_average_color,
    recover_scene,
    synthesize_underwater,
    water_preset,
    water_type_presets,
)
from utils.errors import DegenerateDepth, InvalidConfig, ShapeMismatch  # noqa: E402

UNIFORM = WaterProperties(beta_d=(0.5, 0.5, 0.5), beta_b=(0.5, 0.5, 0.5), b_inf=(0.2, 0.2, 0.2))


def depth_ramp(height: int = 40, width: int = 50, near: float = 0.5, far: float = 10.0):
    return np.linspace(near, far, height * width).reshape(height, width)


class TestSynthesizeUnderwater:
    """Test cases for synthesize_underwater."""

    def test_single_pixel_value(self):
        """J 0.8 at 2 m with beta 0.5 and b_inf 0.2 gives about 0.4207."""
        image = synthesize_underwater(
            RgbImage(np.full((1, 1, 3), 0.8)), np.array([[2.0]]), UNIFORM
        )
        assert image.data[0, 0, 0] == pytest.approx(0.4207, abs=1e-4)

    def test_zero_range_is_the_scene(self, make_image):
        """No water between camera and scene leaves the image unchanged."""
        scene = make_image()
        image = synthesize_underwater(scene, np.zeros(scene.shape), UNIFORM)
        assert np.allclose(image.data, scene.data, atol=1e-15)

    def test_far_range_is_veiling_light(self, make_image):
        """At very large range only the veiling light remains."""
        scene = make_image()
        image = synthesize_underwater(scene, np.full(scene.shape, 1e6), UNIFORM)
        assert np.allclose(image.data, 0.2)

    def test_sparse_holes_count_as_zero_range(self):
        """Holes of a sparse depth map are rendered at zero range."""
        depth = MetricDepthMap.ground_truth(np.array([[np.nan, 2.0]]))
        image = synthesize_underwater(RgbImage(np.full((1, 2, 3), 0.8)), depth, UNIFORM)
        assert image.data[0, 0, 0] == pytest.approx(0.8)

    def test_white_scene_in_oceanic_water_turns_blue(self):
        """Red is absorbed first in clear ocean water."""
        water = water_preset("I").properties()
        image = synthesize_underwater(RgbImage(np.ones((1, 1, 3))), np.array([[5.0]]), water)
        red, _, blue = image.data[0, 0]
        assert blue > red

    def test_moves_toward_veiling_light_with_range(self, rng):
        """With equal attenuation and backscatter coefficients, |I - b_inf| never grows with z."""
        z = np.sort(rng.uniform(0.0, 30.0, 60))[np.newaxis, :]
        for _ in range(50):
            beta = tuple(rng.uniform(0.01, 2.0, 3))
            b_inf = tuple(rng.uniform(0.0, 1.0, 3))
            water = WaterProperties(beta_d=beta, beta_b=beta, b_inf=b_inf)
            scene = RgbImage(np.broadcast_to(rng.random(3), z.shape + (3,)))
            image = synthesize_underwater(scene, z, water)
            distance = np.abs(image.data[0] - np.asarray(b_inf))
            assert np.all(np.diff(distance, axis=0) <= 1e-12)

    def test_shape_mismatch_raises(self, make_image):
        """Depth must match the image."""
        with pytest.raises(ShapeMismatch):
            synthesize_underwater(make_image(), np.ones((2, 2)), UNIFORM)


class TestEstimateBackscatter:
    """Test cases for estimate_backscatter."""

    def test_recovers_known_backscatter(self):
        """On a black scene the image is pure backscatter and the fit is exact."""
        z = depth_ramp()
        image = synthesize_underwater(RgbImage(np.zeros(z.shape + (3,))), z, UNIFORM)
        fit = estimate_backscatter(image, z)
        for channel in fit.channels:
            assert channel.b_inf == pytest.approx(0.2, abs=1e-4)
            assert channel.beta_b == pytest.approx(0.5, abs=1e-3)
        assert fit.n_points > 0

    def test_noise_free_backscatter_fits_without_residual(self, rng):
        """Images made of pure model backscatter are fitted with a negligible residual."""
        z = depth_ramp()
        for _ in range(5):
            beta = tuple(rng.uniform(0.2, 2.0, 3))
            b_inf = tuple(rng.uniform(0.05, 0.6, 3))
            water = WaterProperties(beta_d=beta, beta_b=beta, b_inf=b_inf)
            image = synthesize_underwater(RgbImage(np.zeros(z.shape + (3,))), z, water)
            fit = estimate_backscatter(image, z)
            assert fit.rms_residual <= 1e-6
            for channel in fit.channels:
                assert channel.rms_residual <= 1e-6

    def test_black_image_has_no_backscatter(self):
        """An all-black image fits zero veiling light."""
        z = depth_ramp()
        fit = estimate_backscatter(RgbImage(np.zeros(z.shape + (3,))), z)
        assert all(channel.b_inf == pytest.approx(0.0, abs=1e-6) for channel in fit.channels)

    def test_constant_depth_raises(self):
        """A flat range cannot separate backscatter from signal."""
        with pytest.raises(DegenerateDepth):
            estimate_backscatter(RgbImage(np.full((4, 4, 3), 0.3)), np.full((4, 4), 3.0))

    @pytest.mark.parametrize("kwargs", [{"n_bins": 1}, {"percentile": 0.0}, {"percentile": 0.6}])
    def test_invalid_sampling_raises(self, kwargs):
        """Bins and percentile are validated."""
        z = depth_ramp(4, 5)
        with pytest.raises(InvalidConfig):
            estimate_backscatter(RgbImage(np.zeros((4, 5, 3))), z, **kwargs)


class TestLocalSpaceAverageColor:
    """Test cases for local_space_average_color."""

    def test_constant_input(self):
        """A constant signal v gives the illuminant f * v."""
        illuminant = local_space_average_color(np.full((6, 7, 3), 0.3), f=2.0)
        assert np.allclose(illuminant.data, 0.6, atol=1e-4)
        assert illuminant.residual < 1e-5

    def test_full_input_weight(self, rng):
        """With p = 1 the illuminant is f times the input."""
        direct = rng.random((5, 5, 3))
        illuminant = local_space_average_color(direct, p=1.0, f=2.0)
        assert np.allclose(illuminant.data, 2.0 * direct)

    def test_single_pixel_keeps_its_value(self):
        """An isolated pixel has no neighbors and converges to its own value."""
        illuminant = local_space_average_color(np.array([[0.4]]), f=1.0)
        assert illuminant.data.shape == (1, 1, 3)
        assert np.allclose(illuminant.data, 0.4, atol=1e-4)

    @pytest.mark.parametrize("p", [0.05, 0.2, 0.5, 1.0])
    def test_converges_on_random_inputs(self, rng, p):
        """Random 32x32 inputs converge below eps in finitely many iterations."""
        for _ in range(5):
            direct = rng.random((32, 32, 3))
            illuminant = local_space_average_color(direct, p=p, eps=1e-5)
            assert illuminant.residual < 1e-5
            assert 0 < illuminant.iterations < LSAC_MAX_ITERATIONS
            assert np.all(np.isfinite(illuminant.data))
            assert illuminant.data.max() <= 2.0 * direct.max() + 1e-9

    @pytest.mark.parametrize("p", [0.0, 1.5])
    def test_invalid_blend_raises(self, p):
        """p must lie in (0, 1]."""
        with pytest.raises(InvalidConfig):
            local_space_average_color(np.zeros((2, 2, 3)), p=p)


class TestRecoverScene:
    """Test cases for recover_scene and gray_world."""

    def test_round_trip_with_known_water(self, make_image):
        """Synthesizing then recovering with the true water returns the scene."""
        scene = make_image(20, 24)
        z = depth_ramp(20, 24, 0.5, 6.0)
        water = water_preset("IB").properties()
        image = synthesize_underwater(scene, z, water)
        recovered = recover_scene(
            image,
            z,
            BackscatterFit.from_water(water),
            attenuation="known",
            beta_d=water.beta_d,
            white_balance=False,
        )
        assert np.abs(recovered.data - scene.data).max() < 0.02

    def test_round_trip_on_random_scenes(self, make_image, rng):
        """Twenty random smooth scenes are recovered within 2% mean absolute error."""
        presets = water_type_presets()
        for _ in range(20):
            scene = make_image(64, 64)
            z = depth_ramp(64, 64, rng.uniform(0.2, 1.0), rng.uniform(3.0, 8.0))
            water = presets[int(rng.integers(len(presets)))].properties()
            recovered = recover_scene(
                synthesize_underwater(scene, z, water),
                z,
                BackscatterFit.from_water(water),
                attenuation="known",
                beta_d=water.beta_d,
                white_balance=False,
            )
            assert np.abs(recovered.data - scene.data).mean() <= 0.02

    @pytest.mark.parametrize("attenuation", ["illumination", "constant", "known"])
    def test_zero_range_returns_the_image(self, make_image, attenuation):
        """Without a water path nothing is removed or compensated."""
        image = make_image()
        z = np.zeros(image.shape)
        fit = BackscatterFit.from_water(UNIFORM)
        recovered = recover_scene(
            image, z, fit, attenuation, beta_d=UNIFORM.beta_d, white_balance=False
        )
        assert np.allclose(recovered.data, image.data, atol=1e-12)
        balanced = recover_scene(image, z, fit, attenuation, beta_d=UNIFORM.beta_d)
        assert np.allclose(balanced.data, gray_world(image).data, atol=1e-12)

    def test_output_is_clamped_to_unit_range(self):
        """Pixels under the backscatter become 0 and overcompensated pixels saturate at 1."""
        image = RgbImage(np.array([[[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]]))
        z = np.array([[5.0, 5.0]])
        recovered = recover_scene(
            image,
            z,
            BackscatterFit.from_water(UNIFORM),
            attenuation="known",
            beta_d=(1.0, 1.0, 1.0),
            white_balance=False,
        )
        assert recovered.data[0, 0].tolist() == [0.0, 0.0, 0.0]
        assert recovered.data[0, 1].tolist() == [1.0, 1.0, 1.0]

    @pytest.mark.parametrize("attenuation", ["illumination", "constant"])
    def test_estimated_attenuation_modes(self, make_image, attenuation):
        """Estimated attenuation modes produce a valid image of the same size."""
        scene = make_image(20, 24)
        z = depth_ramp(20, 24, 0.5, 6.0)
        water = water_preset("3C").properties()
        image = synthesize_underwater(scene, z, water)
        recovered = recover_scene(image, z, BackscatterFit.from_water(water), attenuation)
        assert recovered.shape == (20, 24)
        assert 0.0 <= recovered.data.min() <= recovered.data.max() <= 1.0

    def test_known_mode_needs_three_coefficients(self, make_image):
        """Known attenuation without beta_d is a configuration error."""
        scene = make_image()
        fit = BackscatterFit.from_water(UNIFORM)
        with pytest.raises(InvalidConfig):
            recover_scene(scene, np.ones(scene.shape), fit, attenuation="known")

    def test_unknown_mode_raises(self, make_image):
        """Only the three attenuation modes exist."""
        scene = make_image()
        fit = BackscatterFit.from_water(UNIFORM)
        with pytest.raises(InvalidConfig):
            recover_scene(scene, np.ones(scene.shape), fit, attenuation="guess")

    def test_gray_world_equalizes_channel_means(self):
        """Channel means are scaled to their common mean."""
        data = np.zeros((2, 2, 3))
        data[:, :, 0], data[:, :, 1], data[:, :, 2] = 0.2, 0.4, 0.6
        balanced = gray_world(RgbImage(data))
        assert np.allclose(balanced.data, 0.4)


class TestWaterPresets:
    """Test cases for the shipped water types."""

    def test_ten_named_presets(self):
        """Five oceanic and five coastal types with unique names."""
        presets = water_type_presets()
        assert len(presets) == 10
        assert len({preset.name for preset in presets}) == 10
        categories = [preset.category for preset in presets]
        assert categories.count("oceanic") == 5
        assert categories.count("coastal") == 5

    def test_oceanic_attenuates_red_most(self):
        """Oceanic types attenuate red faster than blue."""
        for preset in water_type_presets():
            if preset.category == "oceanic":
                assert preset.beta_d[0] > preset.beta_d[2]

    def test_oceanic_attenuation_ordered_red_green_blue(self):
        """Every oceanic type attenuates red, then green, then blue."""
        oceanic = [preset for preset in water_type_presets() if preset.category == "oceanic"]
        assert oceanic
        for preset in oceanic:
            red, green, blue = preset.beta_d
            assert red > green > blue

    def test_unknown_preset_raises(self):
        """Unknown names are configuration errors."""
        with pytest.raises(InvalidConfig):
            water_preset("XI")

    def test_preset_round_trips_through_properties(self):
        """A preset exposes its coefficients as plain water properties."""
        preset = water_preset("5C")
        properties = preset.properties()
        assert properties.beta_d == preset.beta_d
        assert math.isclose(sum(properties.b_inf), sum(preset.b_inf))
