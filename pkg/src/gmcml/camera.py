"""Camera placement on a subdivided icosphere.

Cameras sit on the vertices of a recursively subdivided icosahedron, clipped
to an elevation band, and look either at a jittered object centre or at a
focal point pushed towards the camera's offset from the front-view axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

MAX_LEVEL = 6
BAND_LOW = -0.1
BAND_HIGH = 0.6
FOCAL_SHIFT = 0.2
FOCAL_JITTER = 0.05
LIGHT_RANGE = (0.5, 1.5)


class CameraMode(str, Enum):
    CENTERED = "centered"
    SHIFTED = "shifted"


@dataclass(frozen=True)
class CameraRig:
    position: np.ndarray
    focal: np.ndarray
    light: float
    mode: CameraMode
    radius: float

    def __post_init__(self):
        norm = float(np.linalg.norm(self.position))
        if abs(norm - self.radius) > 1e-9 * self.radius:
            raise ValueError(f"camera position has norm {norm}, expected {self.radius}")
        if not LIGHT_RANGE[0] <= self.light <= LIGHT_RANGE[1]:
            raise ValueError(f"light {self.light} outside the supported range")

    @property
    def pose(self) -> np.ndarray:
        """Unit direction from the object centre to the camera."""
        return self.position / self.radius


def _icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def subdivide_icosahedron(level: int, radius: float = 1.0) -> np.ndarray:
    """Vertices of an icosphere after ``level`` 4-way subdivisions.

    Shared edge midpoints are merged, so the result has ``10 * 4**level + 2``
    rows, each scaled to ``radius``.
    """
    if level < 0:
        raise ValueError("level must be non-negative")
    if level > MAX_LEVEL:
        raise ValueError(f"level {level} exceeds the maximum of {MAX_LEVEL}")
    verts, faces = _icosahedron()
    points = [v for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                m = points[a] + points[b]
                points.append(m / np.linalg.norm(m))
                idx = len(points) - 1
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    out = np.asarray(points)
    out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return out * radius


def clip_band(vertices: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Keep vertices whose height lies in ``[-0.1 R, 0.6 R]``."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    z = v[:, 2]
    keep = (z >= BAND_LOW * radius) & (z <= BAND_HIGH * radius)
    if not keep.any():
        raise ValueError(
            f"elevation band [{BAND_LOW * radius:g}, {BAND_HIGH * radius:g}] excludes all {len(v)} cameras"
        )
    return v[keep]


def front_axis_point(radius: float) -> np.ndarray:
    """Where the +x (front view) axis meets the camera sphere."""
    return np.array([radius, 0.0, 0.0])


def shift_focal(focal, camera, axis_point) -> np.ndarray:
    """Focal point moved by 0.2 of the camera's offset from the front-view point."""
    f = np.asarray(focal, dtype=np.float64)
    c = np.asarray(camera, dtype=np.float64)
    p = np.asarray(axis_point, dtype=np.float64)
    return f + FOCAL_SHIFT * (c - p)


def pose_distance(a, b) -> float:
    """Angle in radians between two pose directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("pose_distance is undefined for a zero vector")
    cos = float(np.dot(a, b) / (na * nb))
    return float(np.arccos(min(1.0, max(-1.0, cos))))


def pose_distance_matrix(poses: np.ndarray) -> np.ndarray:
    p = np.asarray(poses, dtype=np.float64)
    norms = np.linalg.norm(p, axis=1)
    if np.any(norms == 0):
        raise ValueError("pose_distance is undefined for a zero vector")
    u = p / norms[:, None]
    return np.arccos(np.clip(u @ u.T, -1.0, 1.0))


def camera_positions(level: int, radius: float) -> np.ndarray:
    return clip_band(subdivide_icosahedron(level, radius), radius)


def sample_rig(
    positions: np.ndarray,
    radius: float,
    mode: CameraMode | str,
    rng: np.random.Generator,
) -> CameraRig:
    """Draw a camera vertex, jittered focal point and light level."""
    mode = CameraMode(mode)
    c = positions[rng.integers(len(positions))]
    # uniform in a ball: direction times cube-root radius
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    focal = d * FOCAL_JITTER * radius * rng.random() ** (1.0 / 3.0)
    if mode is CameraMode.SHIFTED:
        focal = shift_focal(focal, c, front_axis_point(radius))
    light = float(rng.uniform(*LIGHT_RANGE))
    return CameraRig(position=c.copy(), focal=focal, light=light, mode=mode, radius=radius)
