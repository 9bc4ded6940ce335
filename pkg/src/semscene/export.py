"""Static voxel exports for external viewing.

Surface-mesh export writes one axis-aligned quad per exposed face of every
non-empty voxel as ASCII PLY with per-vertex category colors (no vertex
deduplication, so a lone voxel yields 24 vertices and 6 quads).  Point-list
export writes one ``i j k label`` record per non-empty voxel.  Both iterate
voxels in row-major order with a fixed face order, so outputs are
deterministic.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractViolation
from .scenes import NUM_CATEGORIES, PALETTE

# Fixed face order: -x, +x, -y, +y, -z, +z.
_FACE_DIRS = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))

# Corner offsets of the quad for each face, counter-clockwise seen from
# outside the voxel.
_FACE_CORNERS = {
    (-1, 0, 0): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (1, 0, 0): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (0, -1, 0): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (0, 1, 0): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (0, 0, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
    (0, 0, 1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
}


def exposed_faces(labels: np.ndarray) -> list[tuple[tuple[int, int, int],
                                                    tuple[int, int, int]]]:
    """(voxel index, face direction) pairs for every non-empty voxel face
    whose neighbor is empty or outside the grid, in deterministic order."""
    dims = labels.shape
    faces = []
    for idx in np.argwhere(labels > 0):
        i, j, k = (int(v) for v in idx)
        for d in _FACE_DIRS:
            ni, nj, nk = i + d[0], j + d[1], k + d[2]
            inside = 0 <= ni < dims[0] and 0 <= nj < dims[1] and 0 <= nk < dims[2]
            if not inside or labels[ni, nj, nk] == 0:
                faces.append(((i, j, k), d))
    return faces


def _validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ContractViolation(f"label volume must be 3-D, got {labels.shape}")
    if labels.max(initial=0) > NUM_CATEGORIES:
        raise ContractViolation("label volume holds out-of-range category ids")
    return labels


def export_surface_mesh(labels: np.ndarray, path: str, voxel_size: float = 1.0,
                        origin=(0.0, 0.0, 0.0)) -> int:
    """Write an ASCII PLY of exposed voxel faces; returns the face count."""
    labels = _validate_labels(labels)
    origin = np.asarray(origin, dtype=np.float64)
    faces = exposed_faces(labels)
    colors = (PALETTE * 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as out:
        out.write("ply\nformat ascii 1.0\n")
        out.write(f"element vertex {4 * len(faces)}\n")
        out.write("property float x\nproperty float y\nproperty float z\n")
        out.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        out.write(f"element face {len(faces)}\n")
        out.write("property list uchar int vertex_indices\nend_header\n")
        for (i, j, k), d in faces:
            r, g, b = colors[labels[i, j, k]]
            for c in _FACE_CORNERS[d]:
                x, y, z = (origin + (np.array([i, j, k]) + c) * voxel_size)
                out.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
        for n in range(len(faces)):
            base = 4 * n
            out.write(f"4 {base} {base + 1} {base + 2} {base + 3}\n")
    return len(faces)


def export_point_list(labels: np.ndarray, path: str) -> int:
    """Write one ``i j k label`` line per non-empty voxel; returns the count."""
    labels = _validate_labels(labels)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "w") as out:
        out.write("# i j k label\n")
        for idx in np.argwhere(labels > 0):
            i, j, k = (int(v) for v in idx)
            out.write(f"{i} {j} {k} {int(labels[i, j, k])}\n")
            count += 1
    return count


def export_voxels(labels: np.ndarray, path: str, fmt: str,
                  voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> int:
    if fmt == "surface-mesh":
        return export_surface_mesh(labels, path, voxel_size, origin)
    if fmt == "point-list":
        return export_point_list(labels, path)
    raise ContractViolation(f"unknown export format {fmt!r}")
