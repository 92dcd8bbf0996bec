import numpy as np
import pytest

from dualocc.geometry import CameraModel, ContractError, GridSpec, VoxelGrid, voxel_index
from dualocc.scenegen import (BUILDING, GROUND, PALETTE, SKY, THIN_CLASSES, ManifestEntry, Primitive, Scene,
                              SceneConfig, default_rig, generate_scene, ground_truth_grid, occupied_point_set,
                              read_images, read_manifest, render, write_images, write_manifest)
from dualocc.scenegen import _inside

GRID = SceneConfig().grid


def naive_box_labels(grid, lo, hi, cls):
    """Per-voxel centre-in-box loop for an axis-aligned box."""
    out = np.zeros(grid.dims, dtype=np.int64)
    for i in range(grid.dims[0]):
        for j in range(grid.dims[1]):
            for k in range(grid.dims[2]):
                c = np.asarray(grid.origin) + (np.array([i, j, k]) + 0.5) * grid.voxel_size
                if np.all(c >= lo) and np.all(c <= hi):
                    out[i, j, k] = cls
    return out


class TestGenerateScene:
    def test_deterministic(self):
        assert generate_scene(7).to_json() == generate_scene(7).to_json()

    def test_seeds_differ(self):
        assert generate_scene(1).to_json() != generate_scene(2).to_json()

    def test_zero_density_leaves_ground_only(self):
        scene = generate_scene(3, SceneConfig(large_density=0, thin_density=0))
        assert [p.kind for p in scene.primitives] == ["ground_plane"]

    def test_zero_classes_rejected(self):
        with pytest.raises(ContractError):
            generate_scene(0, SceneConfig(num_classes=0))

    def test_seed_sweep_has_thin_and_counts(self):
        for seed in range(100):
            prims = generate_scene(seed).primitives
            thin = [p for p in prims if p.class_id in THIN_CLASSES]
            large = [p for p in prims if p.kind == "box"]
            assert 1 <= len(thin) <= 6
            assert 2 <= len(large) <= 8
            assert prims[0].kind == "ground_plane"

    def test_primitives_inside_grid(self):
        lo, hi = np.asarray(GRID.origin), GRID.upper
        for seed in range(30):
            for p in generate_scene(seed).primitives:
                assert lo[0] <= p.position[0] <= hi[0] and lo[1] <= p.position[1] <= hi[1]
                assert 1 <= p.class_id <= 6

    def test_small_grid_shrinks_boxes_to_fit(self):
        small = SceneConfig(grid=GridSpec((-1.6, -1.6, 0.0), 0.4, (8, 8, 4)), clear_radius=0.4)
        for seed in range(30):
            for p in generate_scene(seed, small).primitives:
                if p.kind == "box":
                    half = 0.5 * np.hypot(*p.size[:2])
                    assert np.hypot(*p.position[:2]) - half >= 0.4
                    assert max(abs(p.position[0]), abs(p.position[1])) + half <= 1.6 + 1e-9

    def test_impossible_clear_radius_rejected(self):
        with pytest.raises(ContractError, match="clear radius"):
            generate_scene(0, SceneConfig(grid=GridSpec((-1.6, -1.6, 0.0), 0.4, (8, 8, 4)), clear_radius=3.0))

    def test_thin_primitives_show_up_in_grid(self):
        for seed in range(20):
            labels = ground_truth_grid(generate_scene(seed), GRID).payload
            assert np.isin(labels, THIN_CLASSES).any()


class TestGroundTruthGrid:
    def test_empty_scene(self):
        assert np.all(ground_truth_grid(Scene(0, ()), GRID).payload == 0)

    def test_box_spanning_2x2x2(self):
        grid = GridSpec((0.0, 0.0, 0.0), 0.4, (6, 6, 4))
        # box edges inset from voxel boundaries so exactly two centres per axis fall inside
        box = Primitive("box", (1.2, 1.2, 0.5), 0.0, (0.7, 0.7, 0.7), BUILDING)
        got = ground_truth_grid(Scene(0, (box,)), grid).payload
        lo = np.array([1.2 - 0.35, 1.2 - 0.35, 0.5])
        expected = naive_box_labels(grid, lo, lo + 0.7, BUILDING)
        np.testing.assert_array_equal(got, expected)
        assert (got == BUILDING).sum() == 8

    def test_ground_layer(self):
        ground = Primitive("ground_plane", (0.0, 0.0, 0.0), 0.0, (0.4,), GROUND)
        labels = ground_truth_grid(Scene(0, (ground,)), GRID).payload
        assert np.all(labels[:, :, 0] == GROUND)
        assert np.all(labels[:, :, 1:] == 0)

    def test_last_primitive_wins(self):
        a = Primitive("box", (0.2, 0.2, 0.0), 0.0, (1.0, 1.0, 1.0), BUILDING)
        b = Primitive("box", (0.2, 0.2, 0.0), 0.0, (1.0, 1.0, 1.0), 3)
        assert np.all(ground_truth_grid(Scene(0, (a, b)), GRID).payload[16, 16, :2] == 3)
        assert np.all(ground_truth_grid(Scene(0, (b, a)), GRID).payload[16, 16, :2] == BUILDING)

    def test_occupied_centres_near_some_primitive(self):
        scene = generate_scene(11)
        gt = ground_truth_grid(scene, GRID)
        pts = occupied_point_set(gt)
        # every centre is inside the primitive whose class it carries
        for loc, lab in zip(pts.locations, pts.labels):
            owners = [p for p in scene.primitives if p.class_id == lab]
            assert owners
            assert any(_inside(p, loc[None], GRID)[0] for p in owners)


class TestOccupiedPointSet:
    def test_all_free(self):
        assert len(occupied_point_set(VoxelGrid(GRID, np.zeros(GRID.dims, dtype=np.int64)))) == 0

    def test_centre_formula(self):
        labels = np.zeros(GRID.dims, dtype=np.int64)
        labels[0, 0, 0] = 4
        pts = occupied_point_set(VoxelGrid(GRID, labels))
        np.testing.assert_allclose(pts.locations, [[-6.2, -6.2, 0.2]], atol=1e-12)
        assert pts.labels.tolist() == [4]

    def test_index_round_trip(self):
        gt = ground_truth_grid(generate_scene(5), GRID)
        pts = occupied_point_set(gt)
        assert len(pts) == (gt.payload > 0).sum()
        for loc, lab in zip(pts.locations, pts.labels):
            idx = voxel_index(GRID, loc)
            assert gt.payload[idx] == lab


class TestRender:
    def test_empty_scene_is_sky(self):
        frame = render(Scene(0, ()), default_rig(2, 8, 16))
        np.testing.assert_allclose(frame.images, np.broadcast_to(SKY, frame.images.shape).astype(np.float32))

    def test_wall_hue(self):
        cam = CameraModel.looking_along(0.0, (0.0, 0.0, 1.0), 20.0, 20.0, 16, 16)
        wall = Primitive("box", (3.0, 0.0, -5.0), 0.0, (0.5, 20.0, 20.0), BUILDING)
        img = render(Scene(0, (wall,)), [cam]).images[0]
        centre = img[4:12, 4:12].reshape(-1, 3)
        # same hue as the palette: constant ratio to the palette colour
        ratio = centre / PALETTE[BUILDING]
        np.testing.assert_allclose(ratio, np.broadcast_to(ratio[:, :1], ratio.shape), rtol=1e-5)
        assert ratio.min() > 0.25 - 1e-6

    def test_deterministic_and_bounded(self):
        scene = generate_scene(4)
        rig = default_rig(4, 16, 32)
        a, b = render(scene, rig).images, render(scene, rig).images
        assert a.tobytes() == b.tobytes()
        assert a.shape == (4, 16, 32, 3)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_default_rig_yaws(self):
        rig = default_rig()
        fwd = np.stack([c.rotation[2] for c in rig])
        np.testing.assert_allclose(fwd, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-12)


class TestContainers:
    def test_image_round_trip(self, tmp_path):
        imgs = np.random.default_rng(0).random((3, 5, 7, 3)).astype(np.float32)
        write_images(tmp_path / "a.img", imgs)
        raw = (tmp_path / "a.img").read_bytes()
        assert raw[:5] == b"IMGS1" and len(raw) == 16 + imgs.nbytes
        np.testing.assert_array_equal(read_images(tmp_path / "a.img"), imgs)

    def test_image_bad_magic(self, tmp_path):
        (tmp_path / "b.img").write_bytes(bytes(32))
        with pytest.raises(ContractError, match="b.img"):
            read_images(tmp_path / "b.img")

    def test_manifest_round_trip(self, tmp_path):
        entries = [ManifestEntry(3, "train", "g/3.occ", "i/3.img"), ManifestEntry(100000, "val", "g.occ", "i.img")]
        write_manifest(tmp_path / "m.txt", entries)
        assert read_manifest(tmp_path / "m.txt") == entries
