import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unidwm.config import WorldConfig
from unidwm.toyworld import (BUILDING, VEHICLE, Box, CameraSpec, DatasetFormatError, GenerationError, LidarSpec,
                             SceneGraph, box_sdf, build_sample, caption, ego_to_world, generate_scene,
                             grammar_words, make_dataset, quantize, raycast, read_dataset, render_views,
                             scene_sdf, scene_seeds, simulate_lidar, validate_scene, write_dataset)
from unidwm.toyworld.scene import CLASSES

WORLD = WorldConfig()


def static_scene(boxes=(), ground=True, frames=4):
    return SceneGraph(boxes=list(boxes), ego_poses=np.zeros((frames, 3)), ground=ground)


def test_generate_scene_deterministic():
    a, b = generate_scene(42, WORLD), generate_scene(42, WORLD)
    assert len(a.boxes) == len(b.boxes)
    for x, y in zip(a.boxes, b.boxes):
        assert np.array_equal(x.center, y.center) and x.yaw == y.yaw and x.speed == y.speed
    assert np.array_equal(a.ego_poses, b.ego_poses)


def test_generate_scene_empty_spec():
    world = dataclasses.replace(WORLD, n_vehicles_min=0, n_vehicles_max=0, n_buildings_min=0, n_buildings_max=0)
    scene = generate_scene(3, world)
    assert scene.boxes == [] and scene.ground


def test_seed_sweep_has_no_violations():
    for seed in range(100):
        scene = generate_scene(seed, WORLD)
        assert validate_scene(scene) == []
        assert any(b.cls == VEHICLE for b in scene.boxes)


def test_generation_error_when_rejection_exhausted():
    crowded = dataclasses.replace(WORLD, n_buildings_min=40, n_buildings_max=40)
    with pytest.raises(GenerationError):
        generate_scene(0, crowded)


def test_validate_flags_bad_scenes():
    box = Box(np.array([0.5, 0.0, 0.75]), np.array([2.2, 0.9, 0.75]), 0.0, VEHICLE, 0.0)
    problems = validate_scene(static_scene([box]))
    assert any("static" in p for p in problems) and any("intersects" in p for p in problems)


def test_scene_sdf_examples():
    assert scene_sdf(static_scene(), [0.0, 0.0, 2.0]) == pytest.approx(2.0)
    assert box_sdf(np.array([2.0, 0.0, 0.0]), [0, 0, 0], [0.5, 0.5, 0.5]) == pytest.approx(1.5)
    box = Box(np.zeros(3), np.full(3, 0.5), 0.0, BUILDING)
    assert scene_sdf(static_scene([box], ground=False), [2.0, 0.0, 0.0]) == pytest.approx(1.5)
    assert scene_sdf(static_scene([box], ground=False), [0.1, 0.0, 0.0]) < 0


@given(st.floats(-np.pi, np.pi), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_box_sdf_rotation_consistent(yaw, p):
    # rotating the query point with the box leaves the distance unchanged
    half = np.array([1.0, 0.5, 0.7])
    c, s = np.cos(yaw), np.sin(yaw)
    q = np.array([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
    assert box_sdf(q, [0, 0, 0], half, yaw) == pytest.approx(box_sdf(np.array(p), [0, 0, 0], half), abs=1e-9)


def test_raycast_examples():
    empty = static_scene()
    assert raycast(empty, [0, 0, 1.0], np.array([[0, 0, -1.0]]))[0] == pytest.approx(1.0, abs=1e-3)
    assert np.isnan(raycast(empty, [0, 0, 1.0], np.array([[0, 0, 1.0]]))[0])


def test_raycast_box_slab_oracle():
    box = Box(np.array([10.0, 0.0, 1.0]), np.array([2.0, 1.0, 1.0]), 0.0, BUILDING)
    d = raycast(static_scene([box]), [0, 0, 1.0], np.array([[1.0, 0, 0]]))[0]
    assert abs(d - 8.0) < 1e-3
    # oblique ray through the center: slab entry at x = 8
    direction = np.array([8.0, 0.5, 0.0])
    direction /= np.linalg.norm(direction)
    d = raycast(static_scene([box]), [0, 0, 1.0], direction[None])[0]
    t_slab = 8.0 / direction[0]
    assert abs(d - t_slab) < 1e-3


def test_raycast_lands_on_surfaces():
    r = np.random.default_rng(0)
    checked = 0
    for seed in range(10):
        scene = generate_scene(seed, WORLD)
        origins = np.column_stack([r.uniform(-1, 1, 100), r.uniform(-1, 1, 100), r.uniform(0.5, 2.5, 100)])
        dirs = r.normal(size=(100, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        frame = int(seed % 4)
        origins_w = ego_to_world(origins, scene.ego_poses[frame])
        d = np.array([raycast(scene, o, v[None], frame)[0] for o, v in zip(origins_w, dirs)])
        hit = np.isfinite(d)
        pts = origins_w[hit] + d[hit, None] * dirs[hit]
        assert np.all(np.abs(scene_sdf(scene, pts, frame)) < 1e-3)
        checked += 100
    assert checked == 1000


def test_lidar_empty_scene_plane_geometry():
    lidar = LidarSpec()
    sweep = simulate_lidar(static_scene(), 0, lidar)
    el = np.tile(lidar.elevations(), lidar.azimuth_bins)
    down = el < 0
    expected = lidar.mount_height / np.sin(np.abs(el))
    reach = down & (expected < lidar.max_range)
    np.testing.assert_allclose(sweep.depths[reach], expected[reach], atol=1e-3)
    assert np.all(np.isnan(sweep.depths[~reach]))
    assert sweep.points.shape == (int(reach.sum()), 3)
    assert np.all(np.linalg.norm(sweep.points - sweep.origin, axis=1) <= lidar.max_range)


def test_lidar_directions_cover_azimuth():
    lidar = LidarSpec()
    d = lidar.directions()
    assert d.shape == (256, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    az = lidar.azimuths()
    assert az[0] == 0.0 and az[-1] < 2 * np.pi
    np.testing.assert_allclose(np.diff(az), 2 * np.pi / 32)


def test_lidar_static_scene_identical_frames():
    box = Box(np.array([8.0, 4.0, 2.0]), np.array([2.0, 2.0, 2.0]), 0.3, BUILDING)
    scene = static_scene([box])
    lidar = LidarSpec()
    clouds = [simulate_lidar(scene, f, lidar).points for f in range(4)]
    assert all(np.array_equal(clouds[0], c) for c in clouds[1:])


def test_lidar_box_ahead_shortens_rays():
    lidar = LidarSpec()
    box = Box(np.array([6.0, 0.0, 1.5]), np.array([1.0, 3.0, 1.5]), 0.0, BUILDING)
    empty = simulate_lidar(static_scene(), 0, lidar).depths_or_max(lidar.max_range)
    boxed = simulate_lidar(static_scene([box]), 0, lidar)
    front = np.arange(lidar.elevation_rows)  # azimuth 0 rows
    assert np.all(boxed.depths_or_max(lidar.max_range)[front] < empty[front])
    d_oracle = raycast(static_scene([box]), lidar.origin(), lidar.directions()[front])
    np.testing.assert_array_equal(boxed.depths[front], d_oracle)


def test_lidar_points_on_surfaces():
    lidar = LidarSpec()
    for seed in range(5):
        scene = generate_scene(seed, WORLD)
        for f in range(4):
            pts = ego_to_world(simulate_lidar(scene, f, lidar).points, scene.ego_poses[f])
            assert np.all(np.abs(scene_sdf(scene, pts, f)) < 1e-3)


def test_render_views_empty_scene():
    cams = CameraSpec()
    img = render_views(static_scene(), 0, cams)
    assert img.shape == (4, 32, 64, 4)
    front = img[0]
    # the first row below the horizon meets the ground beyond the camera range at the image edges
    lower, upper = front[cams.height // 2 + 1:], front[:cams.height // 2]
    assert np.all(lower[..., 0] == 1.0) and np.all(lower[..., 1:3] == 0.0)
    assert np.all(upper == 0.0)
    inv = front[cams.height // 2:, cams.width // 2, 3]
    assert np.all(np.diff(inv) > 0)  # larger inverse depth further below the horizon


def test_render_views_box_class():
    cams = CameraSpec()
    vehicle = Box(np.array([6.0, 0.0, 1.5]), np.array([1.0, 1.0, 1.5]), 0.0, VEHICLE, 1.0)
    img = render_views(static_scene([vehicle]), 0, cams)
    centre = img[0, cams.height // 2 - 1, cams.width // 2]
    assert centre[CLASSES.index(VEHICLE)] == 1.0 and centre[:3].sum() == 1.0
    assert centre[3] == pytest.approx(1.0 / 5.0, rel=1e-3)


def test_caption_examples():
    assert caption(static_scene())[1] == "0 vehicles ; 0 buildings ; ego stopped"
    vehicle = Box(np.array([5.0, 0.0, 0.75]), np.array([2.2, 0.9, 0.75]), 0.0, VEHICLE, 2.0)
    prompt, answer = caption(static_scene([vehicle]))
    assert prompt == "describe the scene"
    assert "1 vehicles: vehicle ahead near" in answer
    scene = generate_scene(11, WORLD)
    assert caption(scene, 0) == caption(scene, 0)


def test_quantize_thresholds():
    assert quantize(9.99, 0.0) == ("ahead", "near")
    assert quantize(10.0, 0.0) == ("ahead", "far")
    assert quantize(0.0, 3.0) == ("left", "near")
    assert quantize(0.0, -3.0) == ("right", "near")
    assert quantize(-3.0, 0.1)[0] == "behind"


def test_captions_use_grammar_words():
    words = set(grammar_words())
    for seed in range(30):
        _, answer = caption(generate_scene(seed, WORLD))
        assert set(answer.split()) <= words


def test_dataset_round_trip(tmp_path):
    ds = make_dataset(scene_seeds(7, 2), WORLD)
    path = tmp_path / "d.bin"
    write_dataset(ds, path)
    assert read_dataset(path).equals(ds)
    path2 = tmp_path / "e.bin"
    write_dataset(make_dataset(scene_seeds(7, 2), WORLD), path2)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_format_errors(tmp_path):
    ds = make_dataset(scene_seeds(1, 1), WORLD)
    path = tmp_path / "d.bin"
    write_dataset(ds, path)
    data = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "short.bin").write_bytes(data[:-10])
    (tmp_path / "long.bin").write_bytes(data + b"\0")
    for name in ("magic.bin", "short.bin", "long.bin"):
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / name)
    bumped = data.replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "version.bin").write_bytes(bumped)
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "version.bin")


def test_dataset_size_budget(tmp_path):
    ds = make_dataset(scene_seeds(0, 5), WORLD)
    path = tmp_path / "d.bin"
    write_dataset(ds, path)
    assert path.stat().st_size * 20 < 50e6  # 100 scenes at this rate stay below 50 MB


def test_sample_invariants(sample):
    lidar = LidarSpec()
    for cloud in sample.point_clouds:
        assert np.all(np.linalg.norm(cloud - lidar.origin(), axis=1) <= lidar.max_range + 1e-3)
    assert sample.ego_motions.shape == (3, 3)
    assert sample.images.shape == (4, 32, 64, 4)
    again = build_sample(5, WORLD)
    assert again.equals(sample)
