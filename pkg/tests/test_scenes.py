import filecmp

import numpy as np
import pytest

from semscene.geometry import (VIS_FREE, VIS_OCCLUDED, VIS_OUTSIDE,
                               VIS_VISIBLE, DepthImage, VoxelGrid,
                               compute_projection_map, estimate_normals)
from semscene.scenes import (CATEGORY_NAMES, LABEL_CEILING, LABEL_FLOOR,
                             LABEL_WALL, NUM_CATEGORIES, SceneConfig,
                             _camera_from_pose, carve_visibility,
                             generate_scene, load_scene, render_depth,
                             save_scene, validate_sample, voxelize)

from oracles import segment_hits_box_loops

TEST_CONFIG = SceneConfig(grid_dims=(16, 12, 16), voxel_size=0.3)
SMALL_CONFIG = SceneConfig(grid_dims=(10, 8, 10), voxel_size=0.3,
                           image_width=24, image_height=18)


def test_category_palette():
    assert len(CATEGORY_NAMES) == 12
    assert NUM_CATEGORIES == 11
    assert CATEGORY_NAMES[0] == "empty"
    assert CATEGORY_NAMES[LABEL_FLOOR] == "floor"


def test_empty_room_has_only_shell_labels():
    cfg = SceneConfig(grid_dims=(12, 10, 12), voxel_size=0.3,
                      object_count=(0, 0))
    sample = generate_scene(cfg, 7)
    labels = sample.grid_gt.labels
    assert set(np.unique(labels)) <= {0, LABEL_CEILING, LABEL_FLOOR, LABEL_WALL}
    # Every interior non-shell voxel is empty and observed (free or occluded).
    vis = sample.grid_gt.visibility
    interior_empty = labels == 0
    assert np.all(np.isin(vis[interior_empty],
                          [VIS_FREE, VIS_OCCLUDED, VIS_OUTSIDE]))
    assert not np.any(vis[interior_empty] == VIS_VISIBLE)


def test_same_seed_is_byte_identical():
    a = generate_scene(TEST_CONFIG, 99)
    b = generate_scene(TEST_CONFIG, 99)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth.values, b.depth.values)
    assert np.array_equal(a.seg2d_gt, b.seg2d_gt)
    assert np.array_equal(a.grid_gt.labels, b.grid_gt.labels)
    assert np.array_equal(a.grid_gt.visibility, b.grid_gt.visibility)
    assert np.array_equal(a.camera.extrinsic, b.camera.extrinsic)


def test_different_seeds_differ():
    a = generate_scene(TEST_CONFIG, 0)
    b = generate_scene(TEST_CONFIG, 1)
    assert not np.array_equal(a.depth.values, b.depth.values)


@pytest.mark.parametrize("seed", range(100))
def test_self_consistency_over_seeds(seed):
    validate_sample(generate_scene(SMALL_CONFIG, seed))


def test_visibility_partition_and_masks():
    sample = generate_scene(TEST_CONFIG, 3)
    vis = sample.grid_gt.visibility
    counts = np.bincount(vis.reshape(-1), minlength=4)
    assert counts.sum() == sample.grid_gt.n_voxels  # exactly one class each
    assert counts[VIS_VISIBLE] > 0 and counts[VIS_FREE] > 0
    assert counts[VIS_OCCLUDED] > 0


def _visibility_oracle(grid, camera, depth, pmap, max_range):
    """Classify every voxel by brute force, independently of the DDA:
    a voxel is free when some pixel's open segment (camera, hit) intersects
    its box; visible when mapped; occluded when its center is in-frustum."""
    dims = grid.dims
    vs = grid.voxel_size
    origin = grid.origin
    dirs = camera.pixel_dirs().reshape(-1, 3)
    t_hit = depth.values.reshape(-1)
    n_vox = grid.n_voxels

    visible = np.zeros(n_vox, dtype=bool)
    mapped = pmap.pixel_to_voxel[pmap.pixel_to_voxel >= 0]
    visible[mapped] = True

    centers = grid.voxel_centers().reshape(-1, 3)
    pix, z = camera.project_points(centers)
    in_view = ((z > 1e-9) & (z <= max_range)
               & (pix[..., 0] >= -0.5) & (pix[..., 0] <= camera.image_width - 0.5)
               & (pix[..., 1] >= -0.5) & (pix[..., 1] <= camera.image_height - 0.5))

    free = np.zeros(n_vox, dtype=bool)
    for v in range(n_vox):
        k, rem = divmod(v, dims[2])
        i, j = divmod(k, dims[1])
        lo = origin + np.array([i, j, rem]) * vs
        hi = lo + vs
        for p in range(dirs.shape[0]):
            if t_hit[p] <= 0:
                continue
            if segment_hits_box_loops(camera.position, dirs[p], t_hit[p], lo, hi):
                free[v] = True
                break

    vis = np.full(n_vox, VIS_OUTSIDE, dtype=np.uint8)
    vis[in_view] = VIS_OCCLUDED
    vis[free] = VIS_FREE
    vis[visible] = VIS_VISIBLE
    return vis.reshape(dims)


def test_carving_matches_slab_test_oracle():
    cfg = SceneConfig(grid_dims=(8, 6, 8), voxel_size=0.35,
                      image_width=16, image_height=12, object_count=(1, 2))
    sample = generate_scene(cfg, 11)
    grid = sample.grid_gt
    pmap = compute_projection_map(sample.depth, sample.camera, grid)
    expected = _visibility_oracle(grid, sample.camera, sample.depth, pmap,
                                  cfg.max_range)
    assert np.array_equal(grid.visibility, expected)


def test_single_box_frustum_shadow():
    # One box directly in front of the camera; occluded voxels must lie
    # exactly in its shadow per the brute-force oracle.
    cfg = SceneConfig(grid_dims=(10, 10, 8), voxel_size=0.4,
                      image_width=16, image_height=12, object_count=(0, 0))
    camera = _camera_from_pose(cfg, position=np.array([2.0, 0.8, 1.7]),
                               target=np.array([2.0, 3.0, 1.2]))
    box = (5, np.array([1.55, 1.83, 0.42]), np.array([2.45, 2.61, 1.37]))
    depth = render_depth(camera, cfg, [box])
    labels = voxelize(cfg, [box])
    grid = VoxelGrid(cfg.grid_dims, cfg.voxel_size, np.zeros(3), labels,
                     np.full(cfg.grid_dims, VIS_OUTSIDE, dtype=np.uint8))
    pmap = compute_projection_map(depth, camera, grid)
    carve_visibility(grid, camera, depth, pmap, cfg.max_range)
    expected = _visibility_oracle(grid, camera, depth, pmap, cfg.max_range)
    assert np.array_equal(grid.visibility, expected)
    assert (grid.visibility == VIS_OCCLUDED).sum() > 0


def _analytic_face_normals(sample, config):
    """Per-pixel face normal of the generating geometry: for each hit point,
    identify which axis-aligned face it lies on and return that face's
    outward (camera-side) normal.  Pixels on face seams are ambiguous."""
    points = sample.camera.backproject(sample.depth.values)
    h, w = sample.depth.values.shape
    lo, hi = config.interior
    faces = []  # (axis, coordinate, normal sign, rect lo, rect hi)
    for a in range(3):
        faces.append((a, lo[a], +1.0, lo, hi))   # room walls face inward
        faces.append((a, hi[a], -1.0, lo, hi))
    for rec in sample.metadata["boxes"]:
        blo, bhi = np.asarray(rec["lo"]), np.asarray(rec["hi"])
        for a in range(3):
            faces.append((a, blo[a], -1.0, blo, bhi))  # boxes face outward
            faces.append((a, bhi[a], +1.0, blo, bhi))

    normal = np.zeros((h, w, 3))
    face_id = np.full((h, w), -1, dtype=int)
    n_matches = np.zeros((h, w), dtype=int)
    eps = 1e-7
    for fid, (axis, coord, sign, rect_lo, rect_hi) in enumerate(faces):
        on_plane = np.abs(points[..., axis] - coord) < eps
        in_rect = np.ones((h, w), dtype=bool)
        for other in range(3):
            if other == axis:
                continue
            in_rect &= (points[..., other] >= rect_lo[other] - eps)
            in_rect &= (points[..., other] <= rect_hi[other] + eps)
        match = on_plane & in_rect
        n_matches += match
        face_id[match] = fid
        normal[match] = 0.0
        normal[match, axis] = sign
    face_id[n_matches != 1] = -1
    return normal, face_id


def test_box_scene_normals_match_analytic_faces():
    # Central-difference normals must agree with the generating geometry's
    # face normals to within 5 degrees, away from a 2 px edge band (edges =
    # pixels whose analytic face assignment changes or is ambiguous).
    sample = generate_scene(TEST_CONFIG, 21)
    points = sample.camera.backproject(sample.depth.values)
    normals, ok = estimate_normals(points, sample.depth.valid,
                                   sample.camera.position)
    analytic, face_id = _analytic_face_normals(sample, TEST_CONFIG)

    edge = face_id < 0
    changes = np.zeros_like(edge)
    changes[:, :-1] |= face_id[:, 1:] != face_id[:, :-1]
    changes[:-1, :] |= face_id[1:] != face_id[:-1]
    edge |= changes
    band = edge.copy()
    for _ in range(2):
        grown = band.copy()
        grown[1:, :] |= band[:-1, :]
        grown[:-1, :] |= band[1:, :]
        grown[:, 1:] |= band[:, :-1]
        grown[:, :-1] |= band[:, 1:]
        band = grown
    keep = ok & ~band
    keep[:1, :] = keep[-1:, :] = keep[:, :1] = keep[:, -1:] = False
    assert keep.sum() > 200  # the comparison must not be vacuous
    cos = np.sum(normals[keep] * analytic[keep], axis=-1)
    worst_deg = np.degrees(np.arccos(np.clip(cos, -1, 1))).max()
    assert worst_deg < 5.0


def test_unplaceable_objects_are_recorded():
    # A room too small for any furniture: retries exhaust, objects skipped.
    cfg = SceneConfig(grid_dims=(6, 5, 6), voxel_size=0.12,
                      image_width=16, image_height=12, object_count=(3, 3),
                      categories=(6,), placement_retries=2)
    sample = generate_scene(cfg, 5)
    assert sample.metadata["n_objects"] + sample.metadata["skipped_objects"] == 3


class TestSceneIo:
    def test_round_trip_preserves_everything(self, tmp_path):
        sample = generate_scene(TEST_CONFIG, 17)
        prefix = str(tmp_path / "scene_0017")
        save_scene(sample, prefix)
        loaded = load_scene(prefix)
        assert loaded.scene_id == sample.scene_id
        assert np.array_equal(loaded.rgb, sample.rgb)
        assert np.array_equal(loaded.depth.values, sample.depth.values)
        assert np.array_equal(loaded.seg2d_gt, sample.seg2d_gt)
        assert np.array_equal(loaded.grid_gt.labels, sample.grid_gt.labels)
        assert np.array_equal(loaded.grid_gt.visibility,
                              sample.grid_gt.visibility)
        assert np.array_equal(loaded.camera.extrinsic, sample.camera.extrinsic)
        assert loaded.grid_gt.voxel_size == sample.grid_gt.voxel_size

    def test_round_trip_is_byte_exact(self, tmp_path):
        sample = generate_scene(TEST_CONFIG, 23)
        save_scene(sample, str(tmp_path / "a"))
        save_scene(load_scene(str(tmp_path / "a")), str(tmp_path / "b"))
        assert filecmp.cmp(tmp_path / "a.json", tmp_path / "b.json",
                           shallow=False)
        assert filecmp.cmp(tmp_path / "a.bin", tmp_path / "b.bin",
                           shallow=False)
