import math

import numpy as np
import pytest

from rangefuse.data import (
    BOX,
    CLASS_NAMES,
    CYLINDER,
    GROUND,
    WALL,
    AugmentConfig,
    Scene,
    SynthSceneConfig,
    augment,
    batch_iter,
    cast,
    dataset_split,
    load_dataset,
    ray_directions,
    rotate_z,
    save_dataset,
    synth_dataset,
    synth_generate,
    synth_render,
)
from rangefuse.errors import ConfigError, DataError
from rangefuse.preproc import RawScan, SensorConfig, project


@pytest.fixture(scope="module")
def render():
    return synth_render(SynthSceneConfig(seed=11))


class TestSynth:
    def test_same_seed_bitwise(self):
        a = synth_generate(SynthSceneConfig(seed=5))
        b = synth_generate(SynthSceneConfig(seed=5))
        assert a.points.tobytes() == b.points.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_seeds_differ(self):
        a = synth_generate(SynthSceneConfig(seed=1))
        b = synth_generate(SynthSceneConfig(seed=2))
        assert len(a) != len(b) or not np.array_equal(a.points, b.points)

    def test_ground_only(self):
        scan = synth_generate(SynthSceneConfig(boxes=(0, 0), cylinders=(0, 0), walls=(0, 0)))
        assert set(scan.labels.tolist()) == {GROUND}
        np.testing.assert_allclose(scan.xyz[:, 2], -1.7, atol=0.2)

    def test_all_classes_appear(self, render):
        assert set(render.scan.labels.tolist()) == set(range(len(CLASS_NAMES)))

    def test_depth_matches_range(self, render):
        depth = np.linalg.norm(render.scan.xyz.astype(np.float64), axis=1)
        assert np.max(np.abs(depth - render.ranges)) < 1e-5

    def test_recast_reproduces_labels(self, render):
        _, cls = cast(render.scene, render.directions, 50.0)
        assert np.array_equal(cls, render.scan.labels)

    def test_noise_free_hits_lie_on_surfaces(self):
        r = synth_render(SynthSceneConfig(seed=3, noise=0.0))
        xyz, lab = r.directions * r.ranges[:, None], r.scan.labels
        floor = r.scene.floor_z
        ground = xyz[lab == GROUND]
        np.testing.assert_allclose(ground[:, 2], floor, atol=1e-9)
        on_box = np.zeros(len(xyz), bool)
        for box in r.scene.boxes:
            cx, cy, hx, hy, h, yaw, _ = box
            c, s = math.cos(yaw), math.sin(yaw)
            lx = c * (xyz[:, 0] - cx) + s * (xyz[:, 1] - cy)
            ly = -s * (xyz[:, 0] - cx) + c * (xyz[:, 1] - cy)
            z = xyz[:, 2] - floor
            inside = (np.abs(lx) <= hx + 1e-9) & (np.abs(ly) <= hy + 1e-9) & (z >= -1e-9) & (z <= h + 1e-9)
            face = np.isclose(np.abs(lx), hx) | np.isclose(np.abs(ly), hy) | np.isclose(z, h)
            on_box |= inside & face
        assert on_box[(lab == BOX) | (lab == WALL)].all()
        on_cyl = np.zeros(len(xyz), bool)
        for cx, cy, rad, h in r.scene.cylinders:
            rr = np.hypot(xyz[:, 0] - cx, xyz[:, 1] - cy)
            z = xyz[:, 2] - floor
            side = np.isclose(rr, rad) & (z >= -1e-9) & (z <= h + 1e-9)
            top = np.isclose(z, h) & (rr <= rad + 1e-9)
            on_cyl |= side | top
        assert on_cyl[lab == CYLINDER].all()

    def test_intensity_is_class_discriminative(self, render):
        means = [render.scan.intensity[render.scan.labels == c].mean() for c in range(4)]
        assert np.all(np.diff(means) > 0.1)

    def test_rays_land_in_their_own_pixels(self):
        cfg = SynthSceneConfig(seed=2, noise=0.0)
        r = synth_render(cfg)
        proj = project(r.scan, cfg.sensor())
        # ray index = beam * steps + step; pixel centers sit half a cell from edges
        ray_ids = np.flatnonzero(np.isfinite(cast(r.scene, ray_directions(cfg), cfg.max_range)[0]))
        assert np.array_equal(proj.pixel_index, ray_ids)

    def test_no_geometry(self):
        with pytest.raises(DataError):
            synth_generate(SynthSceneConfig(ground=False, boxes=(0, 0), cylinders=(0, 0), walls=(0, 0)))

    def test_all_rays_miss(self):
        with pytest.raises(DataError):
            synth_generate(SynthSceneConfig(max_range=0.5, boxes=(0, 0), cylinders=(0, 0), walls=(0, 0)))

    @pytest.mark.parametrize(
        "change", [dict(beams=0), dict(noise=-0.1), dict(boxes=(3, 1)), dict(max_range=0.0)]
    )
    def test_invalid_config(self, change):
        with pytest.raises(ConfigError):
            SynthSceneConfig(**change)

    def test_sensor_capacity(self):
        SynthSceneConfig(beams=16, azimuth_steps=120).check_sensor(SensorConfig.desk())
        with pytest.raises(ConfigError):
            SynthSceneConfig(beams=32).check_sensor(SensorConfig.desk())

    def test_empty_scene_cast(self):
        t, cls = cast(Scene(-1.7, ground=False), ray_directions(SynthSceneConfig(beams=2, azimuth_steps=4)))
        assert np.isinf(t).all() and (cls == -1).all()

    def test_dataset_seeds(self):
        scans = synth_dataset(SynthSceneConfig(seed=40, azimuth_steps=60), 3)
        assert scans[2].points.tobytes() == synth_generate(SynthSceneConfig(seed=42, azimuth_steps=60)).points.tobytes()

    def test_disk_roundtrip(self, tmp_path):
        scans = synth_dataset(SynthSceneConfig(azimuth_steps=60), 2)
        save_dataset(scans, tmp_path)
        back = load_dataset(tmp_path)
        assert [s.points.tobytes() for s in back] == [s.points.tobytes() for s in scans]
        assert all(np.array_equal(a.labels, b.labels) for a, b in zip(back, scans))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)


class TestAugment:
    def test_identity(self, render, rng):
        out = augment(render.scan, AugmentConfig.identity(), rng)
        assert out.points.tobytes() == render.scan.points.tobytes()

    def test_rotation_group(self, rng):
        xyz = rng.normal(0, 10, (100, 3))
        twice = rotate_z(rotate_z(xyz, math.pi), math.pi)
        np.testing.assert_allclose(twice, xyz, atol=1e-6)
        np.testing.assert_allclose(rotate_z(xyz, 2 * math.pi), xyz, atol=1e-6)

    def test_preserves_count_labels_intensity(self, render, rng):
        out = augment(render.scan, AugmentConfig(), rng)
        assert len(out) == len(render.scan)
        assert np.array_equal(out.labels, render.scan.labels)
        assert np.array_equal(out.intensity, render.scan.intensity)

    def test_rigid_motion_keeps_norms(self, render, rng):
        out = augment(render.scan, AugmentConfig(scale=(1.0, 1.0)), rng)
        before = np.linalg.norm(render.scan.xyz.astype(np.float64), axis=1)
        after = np.linalg.norm(out.xyz.astype(np.float64), axis=1)
        np.testing.assert_allclose(after, before, rtol=1e-6)

    def test_flip_x(self, render, rng):
        cfg = AugmentConfig(rotation=(0.0, 0.0), flip_x=1.0, flip_y=0.0, scale=(1.0, 1.0))
        out = augment(render.scan, cfg, rng)
        assert np.array_equal(out.xyz[:, 0], -render.scan.xyz[:, 0])
        assert np.array_equal(out.xyz[:, 1:], render.scan.xyz[:, 1:])

    @pytest.mark.parametrize("scale", [0.5, 2.0])
    def test_rescale_keeps_pixels(self, render, rng, scale):
        cfg = AugmentConfig(rotation=(0.0, 0.0), flip_x=0.0, flip_y=0.0, scale=(scale, scale))
        sensor = SensorConfig.desk()
        a = project(render.scan, sensor)
        b = project(augment(render.scan, cfg, rng), sensor)
        assert np.array_equal(a.pixel_index, b.pixel_index)
        np.testing.assert_allclose(b.u, a.u, rtol=1e-9)
        np.testing.assert_allclose(b.v, a.v, rtol=1e-9)

    def test_rescale_generic_factor(self, render, rng):
        cfg = AugmentConfig(rotation=(0.0, 0.0), flip_x=0.0, flip_y=0.0, scale=(0.97, 0.97))
        sensor = SensorConfig.desk()
        a = project(render.scan, sensor)
        b = project(augment(render.scan, cfg, rng), sensor)
        # float32 storage of the scaled coordinates is the only perturbation
        np.testing.assert_allclose(b.u, a.u, rtol=1e-5, atol=1e-4)
        np.testing.assert_allclose(b.v, a.v, rtol=1e-5, atol=1e-4)

    def test_seeded(self, render):
        a = augment(render.scan, AugmentConfig(), np.random.default_rng(3))
        b = augment(render.scan, AugmentConfig(), np.random.default_rng(3))
        assert a.points.tobytes() == b.points.tobytes()

    @pytest.mark.parametrize(
        "change", [dict(flip_x=1.5), dict(flip_y=-0.1), dict(scale=(0.0, 1.0)), dict(scale=(1.1, 1.0)), dict(rotation=(1.0, 0.0))]
    )
    def test_invalid(self, change):
        with pytest.raises(ConfigError):
            AugmentConfig(**change)


class TestSplitsAndBatches:
    def test_all_train(self):
        train, val = dataset_split(list(range(10)), (1.0, 0.0), seed=0)
        assert sorted(train) == list(range(10)) and val == []

    @pytest.mark.parametrize("n,fractions", [(80, (0.8, 0.2)), (17, (0.5, 0.3, 0.2)), (3, (0.34, 0.66))])
    def test_partition(self, n, fractions):
        parts = dataset_split(list(range(n)), fractions, seed=4)
        flat = [x for p in parts for x in p]
        assert sorted(flat) == list(range(n))
        assert len(set(flat)) == n

    def test_sizes(self):
        train, val = dataset_split(list(range(80)), (0.8, 0.2), seed=1)
        assert (len(train), len(val)) == (64, 16)

    def test_deterministic(self):
        assert dataset_split(list(range(30)), (0.5, 0.5), 9) == dataset_split(list(range(30)), (0.5, 0.5), 9)

    @pytest.mark.parametrize("fractions", [(0.5, 0.4), (1.2, -0.2), ()])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ConfigError):
            dataset_split(list(range(5)), fractions)

    def test_empty_partition(self):
        with pytest.raises(ConfigError):
            dataset_split([1, 2], (0.9, 0.1))
        with pytest.raises(ConfigError):
            dataset_split([], (1.0,))

    def test_batches_cover(self):
        batches = list(batch_iter(list(range(10)), 4))
        assert batches == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]

    def test_shuffled_batches_reproducible(self):
        a = list(batch_iter(list(range(20)), 3, seed=5))
        b = list(batch_iter(list(range(20)), 3, seed=5))
        assert a == b
        assert sorted(x for batch in a for x in batch) == list(range(20))
        assert a != list(batch_iter(list(range(20)), 3))

    def test_batch_errors(self):
        with pytest.raises(ConfigError):
            list(batch_iter([1], 0))
        with pytest.raises(ConfigError):
            list(batch_iter([], 2))
