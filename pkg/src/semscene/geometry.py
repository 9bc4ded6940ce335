"""Camera model, depth geometry, HHA encoding, and the 2D-3D projection layer.

Conventions, fixed across the package:

* World frame: +z is up (gravity points -z); rooms are axis-aligned.
* Camera frame: +z forward, +x right, +y down.  A pixel at (row r, col c)
  back-projects along ((c - cx)/fx, (r - cy)/fy, 1), so stored depth is the
  camera-frame z coordinate, not ray length.
* Voxel cells are half-open boxes [i*vs, (i+1)*vs) from the grid origin;
  a world point indexes via floor((X - origin) / vs), so points exactly on
  a cell boundary belong to the higher-index cell.

The projection layer scatters per-pixel features into the voxel grid along
back-projected depth.  Pixels landing in the same voxel are averaged, so the
backward rule is the exact adjoint: each pixel receives its voxel's gradient
scaled by 1/k, and gradients of voxels no pixel maps to are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, make_op

VIS_VISIBLE = 0   # first-hit voxel of at least one pixel ray
VIS_OCCLUDED = 1  # inside the view frustum, behind a surface
VIS_FREE = 2      # traversed by a ray in front of its hit
VIS_OUTSIDE = 3   # outside the view frustum

VISIBILITY_NAMES = {VIS_VISIBLE: "visible-surface", VIS_OCCLUDED: "occluded",
                    VIS_FREE: "free", VIS_OUTSIDE: "outside-view"}


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray  # 4x4 rigid transform, camera -> world
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation(f"focal lengths must be positive, got "
                                    f"fx={self.fx} fy={self.fy}")
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.extrinsic.shape != (4, 4):
            raise ContractViolation("extrinsic must be a 4x4 matrix")
        r = self.extrinsic[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) >= 1e-9:
            raise ContractViolation("extrinsic rotation block is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    def pixel_dirs(self) -> np.ndarray:
        """World-frame ray directions per pixel, [H, W, 3], scaled so that the
        ray parameter equals camera-frame z depth."""
        h, w = self.image_height, self.image_width
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        xbar = (cols - self.cx) / self.fx
        ybar = (rows - self.cy) / self.fy
        dirs_cam = np.stack([xbar, ybar, np.ones_like(xbar)], axis=-1)
        return dirs_cam @ self.rotation.T

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """World points of every pixel at the given z-depths, [H, W, 3]."""
        return self.position + depth[..., None] * self.pixel_dirs()

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(pixel coords [..., 2] as (col, row), camera z) for world points."""
        local = (points - self.position) @ self.rotation
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.fx * local[..., 0] / z + self.cx
            row = self.fy * local[..., 1] / z + self.cy
        return np.stack([col, row], axis=-1), z


def lookat_extrinsic(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform looking from ``position`` toward ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ContractViolation("camera target coincides with its position")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ContractViolation("camera forward direction is parallel to up")
    right /= rnorm
    down = np.cross(forward, right)
    ext = np.eye(4)
    ext[:3, 0] = right
    ext[:3, 1] = down
    ext[:3, 2] = forward
    ext[:3, 3] = position
    return ext


@dataclass
class DepthImage:
    values: np.ndarray  # [H, W] metric z-depth; <= 0 marks invalid pixels

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractViolation("depth image must be 2-D")

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0.0


@dataclass
class HhaImage:
    """Disparity / height / gravity-angle channels, each in [0, 1]."""
    channels: np.ndarray  # [3, H, W]
    all_invalid: bool = False


@dataclass
class VoxelGrid:
    dims: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    labels: np.ndarray       # uint8, 0 = empty, 1..N = categories
    visibility: np.ndarray   # uint8, one VIS_* class per voxel

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.visibility = np.asarray(self.visibility, dtype=np.uint8)
        if self.labels.shape != self.dims or self.visibility.shape != self.dims:
            raise ContractViolation(
                f"grid arrays must have shape {self.dims}, got labels "
                f"{self.labels.shape}, visibility {self.visibility.shape}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @classmethod
    def empty(cls, dims, voxel_size, origin=(0.0, 0.0, 0.0)) -> "VoxelGrid":
        dims = tuple(int(d) for d in dims)
        return cls(dims, float(voxel_size), np.asarray(origin, dtype=np.float64),
                   np.zeros(dims, dtype=np.uint8),
                   np.full(dims, VIS_OUTSIDE, dtype=np.uint8))

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Floor voxel indices of world points (may fall outside the grid)."""
        return np.floor((points - self.origin) / self.voxel_size).astype(np.int64)

    def index_inside(self, idx: np.ndarray) -> np.ndarray:
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def voxel_centers(self) -> np.ndarray:
        """World-frame centers of every voxel, [Dx, Dy, Dz, 3]."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
                for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass
class ProjectionMap:
    """Precomputed pixel -> voxel correspondence for one depth image.

    ``pixel_to_voxel`` holds a linear voxel index per pixel (row-major over
    the image), -1 where the pixel is invalid or falls outside the grid.
    The inverse index is stored CSR-style: ``pixel_order`` lists mapped
    pixels grouped by voxel, ``voxel_starts`` delimits groups, and
    ``voxel_ids`` names each group's voxel.
    """

    grid_dims: tuple[int, int, int]
    image_shape: tuple[int, int]
    pixel_to_voxel: np.ndarray
    voxel_ids: np.ndarray
    voxel_starts: np.ndarray
    pixel_order: np.ndarray
    counts: np.ndarray = field(init=False)
    pixel_weight: np.ndarray = field(init=False)

    def __post_init__(self):
        n_vox = int(np.prod(self.grid_dims))
        if self.pixel_to_voxel.max(initial=-1) >= n_vox:
            raise ContractViolation("projection map holds out-of-range voxel index")
        self.counts = np.diff(self.voxel_starts)
        # Per-pixel averaging weight 1/k of its target voxel (0 if unmapped).
        count_of = np.zeros(n_vox, dtype=np.float64)
        count_of[self.voxel_ids] = self.counts
        self.pixel_weight = np.where(
            self.pixel_to_voxel >= 0,
            1.0 / np.maximum(count_of[self.pixel_to_voxel], 1.0), 0.0)

    @property
    def mapped_pixels(self) -> np.ndarray:
        return np.nonzero(self.pixel_to_voxel >= 0)[0]


def compute_projection_map(depth: DepthImage, camera: CameraModel,
                           grid: VoxelGrid) -> ProjectionMap:
    """Back-project every valid pixel and record its floor-indexed voxel."""
    h, w = depth.values.shape
    if (camera.image_height, camera.image_width) != (h, w):
        raise ContractViolation(
            f"depth image {h}x{w} does not match camera "
            f"{camera.image_height}x{camera.image_width}")
    points = camera.backproject(depth.values)
    idx = grid.world_to_index(points.reshape(-1, 3))
    inside = grid.index_inside(idx) & depth.valid.reshape(-1)
    pixel_to_voxel = np.full(h * w, -1, dtype=np.int64)
    lin = (idx[inside, 0] * grid.dims[1] + idx[inside, 1]) * grid.dims[2] \
        + idx[inside, 2]
    pixel_to_voxel[inside] = lin

    mapped = np.nonzero(pixel_to_voxel >= 0)[0]
    order = mapped[np.argsort(pixel_to_voxel[mapped], kind="stable")]
    grouped = pixel_to_voxel[order]
    voxel_ids, starts = np.unique(grouped, return_index=True)
    voxel_starts = np.append(starts, grouped.size).astype(np.int64)
    return ProjectionMap((grid.dims[0], grid.dims[1], grid.dims[2]), (h, w),
                         pixel_to_voxel, voxel_ids.astype(np.int64),
                         voxel_starts, order.astype(np.int64))


def scatter_features(features: np.ndarray, pmap: ProjectionMap) -> np.ndarray:
    """Average per-pixel features into their voxels; unmapped voxels are zero."""
    c = features.shape[0]
    n_vox = int(np.prod(pmap.grid_dims))
    flat = features.reshape(c, -1)
    vol = np.zeros((c, n_vox))
    if pmap.voxel_ids.size:
        sums = np.add.reduceat(flat[:, pmap.pixel_order],
                               pmap.voxel_starts[:-1], axis=1)
        vol[:, pmap.voxel_ids] = sums / pmap.counts
    return vol.reshape((c,) + pmap.grid_dims)


def backproject_gradients(volume_grad: np.ndarray,
                          pmap: ProjectionMap) -> np.ndarray:
    """Adjoint of :func:`scatter_features`: each pixel receives its target
    voxel's gradient scaled by the forward averaging weight 1/k; gradients of
    unmapped voxels are discarded and unmapped pixels get zero."""
    c = volume_grad.shape[0]
    flat = volume_grad.reshape(c, -1)
    grad = np.zeros((c,) + pmap.image_shape).reshape(c, -1)
    mapped = pmap.mapped_pixels
    grad[:, mapped] = flat[:, pmap.pixel_to_voxel[mapped]] \
        * pmap.pixel_weight[mapped]
    return grad.reshape((c,) + pmap.image_shape)


def scatter_labels(labels: np.ndarray, pmap: ProjectionMap) -> np.ndarray:
    """Majority label per mapped voxel (ties go to the smallest category id);
    unmapped voxels stay empty (0)."""
    flat = labels.reshape(-1)
    out = np.zeros(int(np.prod(pmap.grid_dims)), dtype=np.uint8)
    ordered = flat[pmap.pixel_order]
    for i, voxel in enumerate(pmap.voxel_ids):
        group = ordered[pmap.voxel_starts[i]:pmap.voxel_starts[i + 1]]
        out[voxel] = np.argmax(np.bincount(group))
    return out.reshape(pmap.grid_dims)


def project_2d_to_3d(features: Tensor, labels: np.ndarray,
                     pmap: ProjectionMap) -> tuple[Tensor, np.ndarray]:
    """Differentiable feature scatter plus label majority vote.

    Returns (feature volume [C, Dx, Dy, Dz], label volume [Dx, Dy, Dz]).
    The feature path is a tape node whose backward is
    :func:`backproject_gradients`.
    """
    if features.shape[1:] != pmap.image_shape:
        raise ContractViolation(
            f"features spatial extent {features.shape[1:]} does not match the "
            f"projection map image {pmap.image_shape}")
    if labels.shape != pmap.image_shape:
        raise ContractViolation(
            f"labels shape {labels.shape} does not match the projection map "
            f"image {pmap.image_shape}")
    out_data = scatter_features(features.data, pmap)

    def backward(g):
        features.accumulate_grad(backproject_gradients(g, pmap))

    volume = make_op(out_data, (features,), backward)
    return volume, scatter_labels(labels, pmap)


@dataclass
class HhaConfig:
    """Fixed normalization ranges for the three HHA channels."""
    min_range: float
    max_range: float
    ceiling: float  # world z spanned by the height channel


def estimate_normals(points: np.ndarray, valid: np.ndarray,
                     camera_position: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel surface normals from central differences on the point cloud,
    oriented toward the camera.  Returns (normals [H, W, 3], ok mask)."""
    h, w = valid.shape
    # Neighbor differences; borders fall back to one-sided.
    right = np.clip(np.arange(w) + 1, 0, w - 1)
    left = np.clip(np.arange(w) - 1, 0, w - 1)
    down = np.clip(np.arange(h) + 1, 0, h - 1)
    up = np.clip(np.arange(h) - 1, 0, h - 1)
    du = points[:, right, :] - points[:, left, :]
    dv = points[down, :, :] - points[up, :, :]
    ok = valid & valid[:, right] & valid[:, left] & valid[down, :] & valid[up, :]
    normals = np.cross(du, dv)
    norms = np.linalg.norm(normals, axis=-1)
    ok &= norms > 1e-12
    normals = np.where(ok[..., None], normals / np.maximum(norms, 1e-12)[..., None],
                       0.0)
    toward = camera_position - points
    flip = (normals * toward).sum(axis=-1) < 0.0
    normals[flip] *= -1.0
    return normals, ok


def hha_encode(depth: DepthImage, camera: CameraModel,
               config: HhaConfig) -> HhaImage:
    """Three-channel geocentric encoding of a depth image.

    Channel 0: normalized inverse depth over [1/max_range, 1/min_range].
    Channel 1: world height of the back-projected point over [0, ceiling].
    Channel 2: angle between the surface normal and +z (gravity) over [0, pi].
    Invalid pixels are zero in all channels.
    """
    valid = depth.valid
    out = np.zeros((3,) + depth.values.shape)
    if not valid.any():
        return HhaImage(out, all_invalid=True)

    inv_lo, inv_hi = 1.0 / config.max_range, 1.0 / config.min_range
    with np.errstate(divide="ignore"):
        disparity = np.where(valid, 1.0 / np.maximum(depth.values, 1e-12), 0.0)
    out[0] = np.where(valid,
                      np.clip((disparity - inv_lo) / (inv_hi - inv_lo), 0.0, 1.0),
                      0.0)

    points = camera.backproject(depth.values)
    height = np.clip(points[..., 2], 0.0, config.ceiling)
    out[1] = np.where(valid, height / config.ceiling, 0.0)

    normals, ok = estimate_normals(points, valid, camera.position)
    angle = np.arccos(np.clip(normals[..., 2], -1.0, 1.0))
    out[2] = np.where(ok, angle / np.pi, 0.0)
    return HhaImage(out, all_invalid=False)
