import numpy as np
import pytest

from ssattn.errors import ConfigError
from ssattn.model import Deraformer, ModelConfig
from ssattn.visualize import heatmap, sampling_view, visualize


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).uniform(size=(3, 32, 40))


class TestSamplingView:
    @pytest.mark.parametrize("level,window", [(0, 0), (0, 17), (1, 5), (2, 1)])
    def test_identity_points_inside_window(self, image, level, window):
        _, view = sampling_view(Deraformer(ModelConfig()), image, window, level)
        x0, y0, x1, y1 = view.box
        pts = view.points.reshape(-1, 2)
        tol = 1e-9
        assert np.all((pts[:, 0] >= x0 - tol) & (pts[:, 0] <= x1 + tol))
        assert np.all((pts[:, 1] >= y0 - tol) & (pts[:, 1] <= y1 + tol))
        assert view.points.shape[0] == ModelConfig().heads[level]

    def test_window_range_checked(self, image):
        with pytest.raises(ConfigError):
            sampling_view(Deraformer(ModelConfig()), image, window=999, level=0)

    def test_unknown_level(self, image):
        with pytest.raises(ConfigError):
            sampling_view(Deraformer(ModelConfig()), image, level=5)


class TestHeatmap:
    def test_normalized_extremes_map_to_colormap_ends(self):
        h = heatmap(np.array([[0.5, 2.0], [1.0, 3.5]]))
        assert h.shape == (2, 2, 3) and h.dtype == np.uint8
        assert not np.array_equal(h[0, 0], h[1, 1])

    def test_constant_map(self):
        h = heatmap(np.full((3, 3), 2.0))
        assert np.all(h == h[0, 0])


def test_visualize_writes_stage_sized_heatmaps(tmp_path, image):
    res = visualize(Deraformer(ModelConfig()), image, tmp_path, window=2)
    names = [p.name for p in res.paths]
    assert names == ["sampling.png", "sigma_stage0.png", "sigma_stage1.png", "sigma_stage2.png", "derained.png"]
