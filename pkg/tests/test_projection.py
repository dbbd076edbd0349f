import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacseg.data import SceneConfig, generate_scene
from sacseg.projection import (PointCloud, ProjectionConfig, build_lidar_image, channel_stats,
                               default_sample_pixels, project_point, project_points, restore_labels,
                               spatial_prior_scores, write_stats)

CFG = ProjectionConfig(h=64, w=2048)


def test_forward_axis_maps_to_middle_column():
    assert project_point((1.0, 0.0, 0.0), CFG)[0] == 1024


def test_rear_axis_maps_to_column_zero():
    assert project_point((-1.0, 0.0, 0.0), CFG)[0] == 0


def test_horizontal_point_row():
    # floor((1 - 25/28) * 64) = floor(6.857) = 6
    assert project_point((1.0, 0.0, 0.0), CFG)[1] == 6


def test_fov_edges_map_to_first_and_last_rows():
    up = math.radians(3.0) - 1e-9
    down = -math.radians(25.0) + 1e-9
    assert project_point((math.cos(up), 0, math.sin(up)), CFG)[1] == 0
    assert project_point((math.cos(down), 0, math.sin(down)), CFG)[1] == 63


def test_literal_offset_switch_shifts_rows():
    lit = ProjectionConfig(h=64, w=2048, literal_offset=True)
    # (0 + f_up) / f = 3/28 -> floor((1 - 3/28) * 64) = 57
    assert project_point((1.0, 0.0, 0.0), lit)[1] == 57


def test_range_is_returned():
    assert project_point((3.0, 4.0, 0.0), CFG)[2] == 5.0


def test_zero_range_rejected():
    with pytest.raises(ValueError):
        project_point((0.0, 0.0, 0.0), CFG)


def test_zero_points_dropped_and_counted():
    cloud = PointCloud(np.array([[0, 0, 0, 1.0], [1, 2, 0, 0.5]]), np.array([3, 4]))
    assert len(cloud) == 1 and cloud.dropped_zero == 1 and cloud.labels.tolist() == [4]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_indices_always_in_range(seed):
    xyz = np.random.default_rng(seed).normal(scale=20, size=(200, 3))
    p, q, _, _ = project_points(xyz, ProjectionConfig(h=16, w=64))
    assert p.min() >= 0 and p.max() < 64 and q.min() >= 0 and q.max() < 16


def test_farthest_point_wins():
    cloud = PointCloud(np.array([[5.0, 0, 0, 0.1], [10.0, 0, 0, 0.9]]))
    img = build_lidar_image(cloud, CFG)
    q, p = np.argwhere(img.mask)[0]
    assert img.mask.sum() == 1 and img.index_map[q, p] == 1
    assert img.features[0, 3, q, p] == 10.0 and img.summary["collisions"] == 1


def test_nearest_point_flag():
    cloud = PointCloud(np.array([[5.0, 0, 0, 0.1], [10.0, 0, 0, 0.9]]))
    img = build_lidar_image(cloud, ProjectionConfig(h=64, w=2048, keep="nearest"))
    assert img.features[0, 3][img.mask][0] == 5.0


def test_equal_range_tie_goes_to_larger_index():
    cloud = PointCloud(np.array([[5.0, 0, 0, 0.1], [5.0, 0, 0, 0.9]]))
    img = build_lidar_image(cloud, CFG)
    assert img.index_map[img.mask][0] == 1


def test_single_point_features():
    pt = (2.0, -1.0, 0.3, 0.7)
    img = build_lidar_image(PointCloud(np.array([pt])), CFG)
    assert img.mask.sum() == 1
    np.testing.assert_allclose(img.features[0][:, img.mask][:, 0],
                               [2.0, -1.0, 0.3, math.sqrt(5.09), 0.7], rtol=0, atol=1e-15)


def test_unmasked_pixels_are_zero():
    img = build_lidar_image(generate_scene(SceneConfig(seed=1)), SceneConfig().projection())
    assert np.all(img.features[0][:, ~img.mask] == 0)
    assert np.array_equal(img.mask, img.index_map >= 0)


def test_random_cloud_round_trip(rng):
    xyz = rng.normal(scale=10, size=(1000, 3))
    cloud = PointCloud(np.column_stack([xyz, rng.uniform(size=1000)]))
    cfg = ProjectionConfig(h=32, w=256)
    img = build_lidar_image(cloud, cfg)
    p, q, r, _ = project_points(cloud.xyz, cfg)
    qs, ps = np.nonzero(img.mask)
    idx = img.index_map[qs, ps]
    assert np.array_equal(p[idx], ps) and np.array_equal(q[idx], qs)
    grid = img.features[0]
    np.testing.assert_allclose(grid[3][qs, ps], np.linalg.norm(grid[:3][:, qs, ps], axis=0),
                               rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_permutation_stable_with_distinct_ranges(seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.normal(scale=5, size=(300, 3)), rng.uniform(size=300)])
    cfg = ProjectionConfig(h=8, w=32)
    a = build_lidar_image(PointCloud(pts), cfg)
    perm = rng.permutation(300)
    b = build_lidar_image(PointCloud(pts[perm]), cfg)
    np.testing.assert_array_equal(a.features, b.features)


def test_restore_constant_prediction():
    cloud = generate_scene(SceneConfig(seed=2))
    cfg = SceneConfig().projection()
    out = restore_labels(np.full((cfg.h, cfg.w), 3), cloud, cfg)
    assert len(out) == len(cloud) and np.all(out == 3)


def test_occluded_point_gets_pixel_prediction():
    cloud = PointCloud(np.array([[5.0, 0, 0, 0.1], [10.0, 0, 0, 0.9]]))
    img = build_lidar_image(cloud, CFG)
    pred = np.zeros((64, 2048), dtype=int)
    pred[img.mask] = 4
    assert restore_labels(pred, cloud, CFG).tolist() == [4, 4]


def test_restore_rejects_wrong_shape():
    with pytest.raises(ValueError):
        restore_labels(np.zeros((3, 3)), PointCloud(np.array([[1.0, 0, 0, 0]])), CFG)


def test_channel_stats_constant_feature():
    cloud = PointCloud(np.array([[1.0, 0, 0, 0.25]]))
    img = build_lidar_image(cloud, CFG)
    q, p = np.argwhere(img.mask)[0]
    stats = channel_stats([img], [(int(q), int(p)), (0, 0)])
    assert stats.pixels[(q, p)]["intensity"]["mean"] == 0.25
    assert stats.pixels[(0, 0)]["x"]["count"] == 0


def test_channel_stats_rejects_out_of_bounds():
    img = build_lidar_image(PointCloud(np.array([[1.0, 0, 0, 0]])), CFG)
    with pytest.raises(ValueError):
        channel_stats([img], [(64, 0)])


def test_default_pixels_three_by_three():
    px = default_sample_pixels(64, 512)
    assert len(px) == 9 and px[0] == (16, 128) and px[-1] == (48, 384)


@pytest.fixture(scope="module")
def synthetic_images():
    scene = SceneConfig()
    return [build_lidar_image(generate_scene(SceneConfig(seed=s)), scene.projection())
            for s in range(20)]


def test_x_mean_follows_cosine_per_row(synthetic_images):
    scores = spatial_prior_scores(channel_stats(synthetic_images, []))
    assert len(scores["row_x_pearson"]) > 10
    assert np.all(np.abs(scores["row_x_pearson"]) > 0.9)


def test_top_rows_higher_than_bottom(synthetic_images):
    stats = channel_stats(synthetic_images, [])
    z = stats.mean_maps[2]
    assert np.nanmean(z[0]) > np.nanmean(z[-1])


def test_write_stats(tmp_path, synthetic_images):
    stats = channel_stats(synthetic_images[:3], default_sample_pixels(64, 512))
    files = write_stats(stats, tmp_path)
    assert (tmp_path / "stats.csv").read_text().splitlines()[0] == "q,p,channel,mean,count"
    assert len([f for f in files if f.name.startswith("hist_")]) == 9
    assert np.loadtxt(tmp_path / "mean_z.csv", delimiter=",").shape == (64, 512)
