"""Procedural synthetic indoor scenes with self-consistent 2D/3D ground truth.

A scene is an axis-aligned room shell plus a few axis-aligned labeled boxes.
Depth is rendered analytically per pixel (ray/box slab intersections), the
grid is labeled by positive-volume overlap against half-open voxel cells, and
visibility comes from exact voxel traversal (Amanatides-Woo) of every pixel
ray up to its hit.

Box faces are placed at generic (non-voxel-aligned) coordinates, so surface
hit points land strictly inside voxel cells and the floor-indexing convention
of the projection layer assigns them to the voxel the surface occupies.  The
2D segmentation ground truth is then *defined* as the projected grid label of
each pixel, which makes every sample self-consistent by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import (VIS_FREE, VIS_OCCLUDED, VIS_OUTSIDE, VIS_VISIBLE,
                       CameraModel, DepthImage, HhaConfig, ProjectionMap,
                       VoxelGrid, compute_projection_map, estimate_normals,
                       lookat_extrinsic)

CATEGORY_NAMES = ("empty", "ceil.", "floor", "wall", "win.", "chair", "bed",
                  "sofa", "table", "tvs", "furn.", "objs.")
NUM_CATEGORIES = len(CATEGORY_NAMES) - 1  # semantic categories, excluding empty

LABEL_CEILING, LABEL_FLOOR, LABEL_WALL = 1, 2, 3
OBJECT_CATEGORIES = tuple(range(4, NUM_CATEGORIES + 1))  # win. .. objs.

# Fixed display palette, one RGB triple in [0, 1] per label id.
PALETTE = np.array([
    [0.50, 0.50, 0.50],  # empty
    [0.90, 0.87, 0.79],  # ceil.
    [0.66, 0.52, 0.36],  # floor
    [0.82, 0.80, 0.74],  # wall
    [0.53, 0.81, 0.92],  # win.
    [0.85, 0.33, 0.31],  # chair
    [0.35, 0.55, 0.85],  # bed
    [0.55, 0.38, 0.64],  # sofa
    [0.93, 0.69, 0.23],  # table
    [0.20, 0.20, 0.25],  # tvs
    [0.42, 0.62, 0.40],  # furn.
    [0.89, 0.47, 0.66],  # objs.
])

# Per-category (min, max) box extents in meters, (footprint, footprint, height).
_OBJECT_SIZES = {
    4: ((0.6, 1.4), (0.08, 0.18), (0.5, 1.0)),   # win. - thin slab
    5: ((0.35, 0.6), (0.35, 0.6), (0.4, 0.9)),   # chair
    6: ((1.0, 1.8), (0.8, 1.6), (0.4, 0.7)),     # bed
    7: ((0.9, 1.7), (0.6, 0.9), (0.5, 0.8)),     # sofa
    8: ((0.6, 1.2), (0.5, 1.0), (0.4, 0.8)),     # table
    9: ((0.5, 0.9), (0.08, 0.18), (0.3, 0.6)),   # tvs - thin slab
    10: ((0.5, 1.2), (0.4, 0.8), (0.8, 1.6)),    # furn.
    11: ((0.2, 0.5), (0.2, 0.5), (0.2, 0.5)),    # objs.
}


@dataclass
class SceneConfig:
    grid_dims: tuple[int, int, int] = (60, 36, 60)
    voxel_size: float = 0.08
    image_width: int = 64
    image_height: int = 48
    hfov_deg: float = 75.0
    shell_voxels: float = 1.4          # inner wall surfaces sit at this depth
    object_count: tuple[int, int] = (3, 6)
    categories: tuple[int, ...] = OBJECT_CATEGORIES
    placement_retries: int = 20
    min_range: float = 0.2
    camera_margin: float = 0.12        # fraction of interior extent kept clear

    @property
    def extents(self) -> np.ndarray:
        return np.asarray(self.grid_dims, dtype=np.float64) * self.voxel_size

    @property
    def interior(self) -> tuple[np.ndarray, np.ndarray]:
        inset = self.shell_voxels * self.voxel_size
        return (np.full(3, inset), self.extents - inset)

    @property
    def max_range(self) -> float:
        return float(np.linalg.norm(self.extents)) + 1.0

    def hha_config(self) -> HhaConfig:
        return HhaConfig(self.min_range, self.max_range, float(self.extents[2]))


@dataclass
class SceneSample:
    rgb: np.ndarray            # [3, H, W], values in [0, 1]
    depth: DepthImage
    camera: CameraModel
    seg2d_gt: np.ndarray       # [H, W] uint8 category ids
    grid_gt: VoxelGrid
    scene_id: str
    metadata: dict = field(default_factory=dict)


def _camera_from_pose(config: SceneConfig, position, target) -> CameraModel:
    fx = (config.image_width / 2.0) / math.tan(math.radians(config.hfov_deg) / 2.0)
    return CameraModel(fx=fx, fy=fx,
                       cx=(config.image_width - 1) / 2.0,
                       cy=(config.image_height - 1) / 2.0,
                       extrinsic=lookat_extrinsic(position, target),
                       image_width=config.image_width,
                       image_height=config.image_height)


def _ray_box_entry(origin, dirs, lo, hi):
    """Entry parameter of rays into an axis-aligned box (inf when missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    near = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)).max(axis=-1)
    far = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)).min(axis=-1)
    hit = (near <= far) & (far > 0.0) & (near > 1e-9)
    return np.where(hit, near, np.inf)


def _ray_box_exit(origin, dirs, lo, hi):
    """Exit parameter of rays out of a box containing the origin."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    return np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)).min(axis=-1)


def render_depth(camera: CameraModel, config: SceneConfig,
                 boxes: list[tuple[int, np.ndarray, np.ndarray]]) -> DepthImage:
    """Per-pixel z-depth of the first surface: object boxes from outside,
    falling back to the interior shell seen from inside."""
    dirs = camera.pixel_dirs()
    lo, hi = config.interior
    depth = _ray_box_exit(camera.position, dirs, lo, hi)
    for _, blo, bhi in boxes:
        depth = np.minimum(depth, _ray_box_entry(camera.position, dirs, blo, bhi))
    return DepthImage(depth)


def voxelize(config: SceneConfig,
             boxes: list[tuple[int, np.ndarray, np.ndarray]]) -> np.ndarray:
    """Label volume: shell first, then boxes painted in placement order.
    A voxel takes a label whenever its half-open cell overlaps the solid
    with positive volume."""
    dims = config.grid_dims
    vs = config.voxel_size
    lo, hi = config.interior
    labels = np.zeros(dims, dtype=np.uint8)

    cell_lo = [np.arange(dims[a]) * vs for a in range(3)]
    cell_hi = [(np.arange(dims[a]) + 1) * vs for a in range(3)]
    inside = [
        (cell_lo[a] >= lo[a]) & (cell_hi[a] <= hi[a]) for a in range(3)]
    shell = ~(inside[0][:, None, None] & inside[1][None, :, None]
              & inside[2][None, None, :])
    labels[shell] = LABEL_WALL
    pokes_up = cell_hi[2] > hi[2]
    pokes_down = cell_lo[2] < lo[2]
    labels[:, :, pokes_up] = LABEL_CEILING
    labels[:, :, pokes_down] = LABEL_FLOOR

    for category, blo, bhi in boxes:
        sel = []
        for a in range(3):
            overlap = (cell_lo[a] < bhi[a]) & (cell_hi[a] > blo[a])
            sel.append(overlap)
        region = (sel[0][:, None, None] & sel[1][None, :, None]
                  & sel[2][None, None, :])
        labels[region] = category
    return labels


def carve_visibility(grid: VoxelGrid, camera: CameraModel, depth: DepthImage,
                     pmap: ProjectionMap, max_range: float) -> None:
    """Classify every voxel in place: visible-surface voxels are exactly the
    projection map's targets, free voxels are traversed by a ray strictly
    before its hit, the in-frustum remainder is occluded."""
    dims = grid.dims
    vis = np.full(dims, VIS_OUTSIDE, dtype=np.uint8)

    # In-frustum: voxel center projects inside the image at positive depth.
    centers = grid.voxel_centers().reshape(-1, 3)
    pix, z = camera.project_points(centers)
    in_view = ((z > 1e-9) & (z <= max_range)
               & (pix[..., 0] >= -0.5) & (pix[..., 0] <= camera.image_width - 0.5)
               & (pix[..., 1] >= -0.5) & (pix[..., 1] <= camera.image_height - 0.5))
    vis.reshape(-1)[in_view] = VIS_OCCLUDED

    # Exact voxel traversal of every pixel ray, stopping at the hit voxel.
    valid = depth.valid.reshape(-1)
    dirs = camera.pixel_dirs().reshape(-1, 3)[valid]
    t_hit = depth.values.reshape(-1)[valid]
    hit_lin = pmap.pixel_to_voxel[valid]
    origin = camera.position
    vs = grid.voxel_size
    dims_arr = np.asarray(dims)

    current = np.floor((origin - grid.origin) / vs).astype(np.int64)
    current = np.broadcast_to(current, dirs.shape).copy()
    step = np.where(dirs > 0, 1, np.where(dirs < 0, -1, 0)).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(step != 0, vs / np.abs(dirs), np.inf)
        next_boundary = grid.origin + (current + (step > 0)) * vs
        t_max = np.where(step != 0, (next_boundary - origin) / dirs, np.inf)

    vis_flat = vis.reshape(-1)
    active = np.ones(dirs.shape[0], dtype=bool)
    fuse = int(dims_arr.sum()) * 3 + 8
    for _ in range(fuse):
        if not active.any():
            break
        t_next = t_max.min(axis=1)
        inside = np.all((current >= 0) & (current < dims_arr), axis=1)
        crosses = active & inside & (t_next < t_hit)
        cur_lin = ((current[:, 0] * dims_arr[1] + current[:, 1]) * dims_arr[2]
                   + current[:, 2])
        mark = crosses & (cur_lin != hit_lin)
        vis_flat[cur_lin[mark]] = VIS_FREE
        active &= crosses
        axis = np.argmin(t_max, axis=1)
        rows = np.nonzero(active)[0]
        current[rows, axis[rows]] += step[rows, axis[rows]]
        t_max[rows, axis[rows]] += t_delta[rows, axis[rows]]

    mapped = pmap.pixel_to_voxel[pmap.pixel_to_voxel >= 0]
    vis_flat[mapped] = VIS_VISIBLE
    grid.visibility[...] = vis


def _place_boxes(config: SceneConfig, rng: np.random.Generator):
    lo, hi = config.interior
    span = hi - lo
    n_target = int(rng.integers(config.object_count[0],
                                config.object_count[1] + 1))
    boxes: list[tuple[int, np.ndarray, np.ndarray]] = []
    skipped = 0
    for _ in range(n_target):
        category = int(rng.choice(config.categories))
        placed = False
        for _ in range(config.placement_retries):
            # Category size ranges are capped by the room so small test rooms
            # still hold scaled-down furniture.
            size = np.empty(3)
            for a, (s_min, s_max) in enumerate(_OBJECT_SIZES[category]):
                s_hi = min(s_max, 0.8 * span[a])
                size[a] = rng.uniform(min(s_min, s_hi), s_hi)
            if np.any(size <= 0):
                break
            floating = category in (4, 9)  # windows and screens float
            base_z = (lo[2] + rng.uniform(0.2, 0.6) * (span[2] - size[2])
                      if floating else lo[2])
            blo = np.array([
                lo[0] + rng.uniform(0.0, span[0] - size[0]),
                lo[1] + rng.uniform(0.0, span[1] - size[1]),
                base_z])
            bhi = blo + size
            overlap = any(np.all(blo < obhi) and np.all(bhi > oblo)
                          for _, oblo, obhi in boxes)
            if not overlap:
                boxes.append((category, blo, bhi))
                placed = True
                break
        if not placed:
            skipped += 1
    return boxes, skipped


def _sample_camera(config: SceneConfig, rng: np.random.Generator,
                   boxes) -> CameraModel:
    lo, hi = config.interior
    span = hi - lo
    margin = config.camera_margin * span
    for _ in range(50):
        position = np.array([
            rng.uniform(lo[0] + margin[0], hi[0] - margin[0]),
            rng.uniform(lo[1] + margin[1], hi[1] - margin[1]),
            lo[2] + rng.uniform(0.55, 0.85) * span[2]])
        inside_box = any(np.all(position > blo) and np.all(position < bhi)
                         for _, blo, bhi in boxes)
        if inside_box:
            continue
        center = (lo + hi) / 2.0
        target = center + np.array([
            rng.uniform(-0.25, 0.25) * span[0],
            rng.uniform(-0.25, 0.25) * span[1],
            (rng.uniform(0.15, 0.45) - 0.5) * span[2]])
        if np.linalg.norm((target - position)[:2]) < 0.2 * min(span[0], span[1]):
            continue
        return _camera_from_pose(config, position, target)
    raise ContractViolation("could not place a camera outside all objects")


def _render_rgb(seg2d: np.ndarray, depth: DepthImage, camera: CameraModel,
                config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    base = PALETTE[seg2d].transpose(2, 0, 1)
    points = camera.backproject(depth.values)
    normals, ok = estimate_normals(points, depth.valid, camera.position)
    light = np.array([0.35, 0.25, 0.9])
    light = light / np.linalg.norm(light)
    lambert = np.clip((normals * light).sum(axis=-1), 0.0, 1.0)
    shade = np.where(ok, 0.75 + 0.25 * lambert, 0.85)
    noise = rng.normal(scale=0.015, size=base.shape)
    return np.clip(base * shade[None] + noise, 0.0, 1.0)


def generate_scene(config: SceneConfig, seed: int) -> SceneSample:
    """Deterministically generate one self-consistent RGB-D sample."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    boxes, skipped = _place_boxes(config, rng)
    camera = _sample_camera(config, rng, boxes)
    depth = render_depth(camera, config, boxes)
    labels = voxelize(config, boxes)
    grid = VoxelGrid(config.grid_dims, config.voxel_size, np.zeros(3), labels,
                     np.full(config.grid_dims, VIS_OUTSIDE, dtype=np.uint8))
    pmap = compute_projection_map(depth, camera, grid)
    carve_visibility(grid, camera, depth, pmap, config.max_range)

    seg2d = np.zeros(depth.values.shape, dtype=np.uint8)
    mapped = pmap.pixel_to_voxel >= 0
    seg2d.reshape(-1)[mapped] = grid.labels.reshape(-1)[
        pmap.pixel_to_voxel[mapped]]
    rgb = _render_rgb(seg2d, depth, camera, config, rng)
    box_records = [{"category": int(c), "lo": [float(v) for v in blo],
                    "hi": [float(v) for v in bhi]} for c, blo, bhi in boxes]
    return SceneSample(rgb=rgb, depth=depth, camera=camera, seg2d_gt=seg2d,
                       grid_gt=grid, scene_id=f"scene_{seed:08d}",
                       metadata={"seed": int(seed), "skipped_objects": skipped,
                                 "n_objects": len(boxes),
                                 "boxes": box_records})


def validate_sample(sample: SceneSample) -> None:
    """Check the self-consistency contract of a sample; raises on violation."""
    grid = sample.grid_gt
    pmap = compute_projection_map(sample.depth, sample.camera, grid)
    mapped = pmap.pixel_to_voxel >= 0
    expected = np.zeros_like(sample.seg2d_gt).reshape(-1)
    expected[mapped] = grid.labels.reshape(-1)[pmap.pixel_to_voxel[mapped]]
    if not np.array_equal(expected, sample.seg2d_gt.reshape(-1)):
        raise ContractViolation(
            f"{sample.scene_id}: seg2d_gt disagrees with projected grid labels")
    vis_of_mapped = grid.visibility.reshape(-1)[pmap.pixel_to_voxel[mapped]]
    if not np.all(vis_of_mapped == VIS_VISIBLE):
        raise ContractViolation(
            f"{sample.scene_id}: mapped voxel without visible-surface class")
    visible = np.nonzero(grid.visibility.reshape(-1) == VIS_VISIBLE)[0]
    if not np.array_equal(np.unique(pmap.pixel_to_voxel[mapped]), visible):
        raise ContractViolation(
            f"{sample.scene_id}: visible-surface set differs from mapped set")
    if not np.all(grid.visibility <= VIS_OUTSIDE):
        raise ContractViolation(f"{sample.scene_id}: invalid visibility class")
    if np.any(grid.labels.reshape(-1)[visible] == 0):
        raise ContractViolation(
            f"{sample.scene_id}: empty voxel classified visible-surface")


_BLOB_ORDER = ("depth", "rgb", "seg2d_gt", "labels", "visibility")


def save_scene(sample: SceneSample, prefix: str) -> None:
    """Write ``prefix.json`` (manifest) and ``prefix.bin`` (raw blobs)."""
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    arrays = {
        "depth": sample.depth.values.astype("<f8"),
        "rgb": sample.rgb.astype("<f8"),
        "seg2d_gt": sample.seg2d_gt.astype("u1"),
        "labels": sample.grid_gt.labels.astype("u1"),
        "visibility": sample.grid_gt.visibility.astype("u1"),
    }
    blobs = {}
    offset = 0
    with open(prefix + ".bin", "wb") as bf:
        for name in _BLOB_ORDER:
            raw = arrays[name].tobytes()
            blobs[name] = {"dtype": str(arrays[name].dtype),
                           "shape": list(arrays[name].shape),
                           "offset": offset}
            bf.write(raw)
            offset += len(raw)
    manifest = {
        "scene_id": sample.scene_id,
        "metadata": sample.metadata,
        "camera": {
            "fx": sample.camera.fx, "fy": sample.camera.fy,
            "cx": sample.camera.cx, "cy": sample.camera.cy,
            "image_width": sample.camera.image_width,
            "image_height": sample.camera.image_height,
            "extrinsic": [float(v) for v in sample.camera.extrinsic.reshape(-1)],
        },
        "grid": {"dims": list(sample.grid_gt.dims),
                 "voxel_size": sample.grid_gt.voxel_size,
                 "origin": [float(v) for v in sample.grid_gt.origin]},
        "categories": list(CATEGORY_NAMES),
        "blobs": blobs,
    }
    with open(prefix + ".json", "w") as mf:
        json.dump(manifest, mf, sort_keys=True, indent=2)
        mf.write("\n")


def load_scene(prefix: str) -> SceneSample:
    with open(prefix + ".json") as mf:
        manifest = json.load(mf)
    with open(prefix + ".bin", "rb") as bf:
        blob = bf.read()

    def read(name):
        meta = manifest["blobs"][name]
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"]))
        arr = np.frombuffer(blob, dtype=dtype, count=count,
                            offset=meta["offset"])
        return arr.reshape(meta["shape"]).copy()

    cam = manifest["camera"]
    camera = CameraModel(
        fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"],
        extrinsic=np.asarray(cam["extrinsic"]).reshape(4, 4),
        image_width=cam["image_width"], image_height=cam["image_height"])
    g = manifest["grid"]
    grid = VoxelGrid(tuple(g["dims"]), g["voxel_size"],
                     np.asarray(g["origin"]), read("labels"),
                     read("visibility"))
    return SceneSample(rgb=read("rgb").astype(np.float64),
                       depth=DepthImage(read("depth").astype(np.float64)),
                       camera=camera, seg2d_gt=read("seg2d_gt"),
                       grid_gt=grid, scene_id=manifest["scene_id"],
                       metadata=manifest.get("metadata", {}))
