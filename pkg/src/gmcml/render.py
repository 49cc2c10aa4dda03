"""Procedural stand-ins for textured CAD renders.

Each category is a parametric solid described by a signed distance function.
A pinhole camera sphere-traces the solid, shades it with a Lambertian model
scaled by the rig's light level, and composites it over a value-noise
background. The paired mask paints covered pixels with the category colour
scaled by normalised depth and leaves everything else black.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .camera import CameraMode, CameraRig, camera_positions, sample_rig

SOLID_KINDS = (
    "sphere",
    "box",
    "cylinder",
    "cone",
    "torus",
    "capsule",
    "octahedron",
    "hexprism",
    "ellipsoid",
    "triprism",
    "slab",
    "dumbbell",
)

# RGB cube corners without black, then face centres (one dropped to make 12)
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 0.5, 0.5],
        [0.5, 1.0, 0.5],
        [0.5, 0.5, 1.0],
        [0.5, 0.0, 0.5],
        [0.0, 0.5, 0.5],
    ]
)

CAMERA_RADIUS = 3.0
FIELD_OF_VIEW = np.deg2rad(36.0)
MIN_RES, MAX_RES = 16, 128
DEPTH_FLOOR = 0.25
_MARCH_STEPS = 96
_HIT_EPS = 1e-4


def category_color(category: int) -> np.ndarray:
    if not 0 <= category < len(PALETTE):
        raise ValueError(f"category {category} outside palette of {len(PALETTE)} colours")
    return PALETTE[category].copy()


def _check_classes(num_classes: int) -> None:
    if not 1 <= num_classes <= len(PALETTE):
        raise ValueError(f"palette has {len(PALETTE)} colours; cannot render {num_classes} classes")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    category: int
    scale: tuple[float, float, float]
    texture_seed: int
    background_seed: int

    def sdf(self, p: np.ndarray) -> np.ndarray:
        s = np.asarray(self.scale)
        return _SDF[self.kind](p / s) * s.min()


def make_scene(category: int, rng_seed: int, num_classes: int = len(SOLID_KINDS)) -> SceneSpec:
    """Deterministic scene for a category and seed."""
    _check_classes(num_classes)
    if not 0 <= category < num_classes:
        raise ValueError(f"category {category} outside [0, {num_classes})")
    rng = np.random.default_rng([category, rng_seed & 0xFFFFFFFFFFFFFFFF])
    scale = tuple(float(v) for v in rng.uniform(0.85, 1.1, size=3))
    tex, bg = (int(v) for v in rng.integers(0, 2**63 - 1, size=2))
    return SceneSpec(SOLID_KINDS[category], category, scale, tex, bg)


# ---------------------------------------------------------------------------
# signed distance functions, all inside a ball of radius ~0.8
# ---------------------------------------------------------------------------


def _length(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v * v).sum(axis=-1))


def _box(p, b):
    q = np.abs(p) - b
    return _length(np.maximum(q, 0.0)) + np.minimum(q.max(axis=-1), 0.0)


def _capped_cylinder(p, r, h):
    d = np.stack([np.hypot(p[..., 0], p[..., 1]) - r, np.abs(p[..., 2]) - h], axis=-1)
    return np.minimum(d.max(axis=-1), 0.0) + _length(np.maximum(d, 0.0))


def _cone(p):
    # apex at z=+0.55, base radius 0.5 at z=-0.55
    h, r = 1.1, 0.5
    q = np.stack([np.hypot(p[..., 0], p[..., 1]), p[..., 2] + 0.55], axis=-1)
    # distance in the (radial, height) half-plane to a triangle
    a = np.array([r, 0.0])
    b = np.array([0.0, h])
    e = b - a
    w = q - a
    t = np.clip((w @ e) / (e @ e), 0.0, 1.0)
    d_side = _length(w - t[..., None] * e)
    d_base = _length(np.stack([np.maximum(q[..., 0] - r, 0.0), q[..., 1]], axis=-1))
    inside = (q[..., 1] > 0) & (q[..., 1] < h) & (q[..., 0] < r * (1 - q[..., 1] / h))
    d = np.minimum(d_side, np.where(q[..., 0] <= r, np.abs(q[..., 1]), d_base))
    return np.where(inside, -d, d)


def _torus(p):
    q = np.stack([np.hypot(p[..., 0], p[..., 1]) - 0.5, p[..., 2]], axis=-1)
    return _length(q) - 0.2


def _capsule(p):
    z = np.clip(p[..., 2], -0.35, 0.35)
    d = p.copy()
    d[..., 2] = p[..., 2] - z
    return _length(d) - 0.3


def _octahedron(p):
    return (np.abs(p).sum(axis=-1) - 0.75) * 0.57735027


def _hexprism(p):
    k = np.array([-0.8660254, 0.5, 0.57735])
    q = np.abs(p)
    xy = q[..., :2]
    dot = np.minimum(xy @ k[:2], 0.0)
    xy = xy - 2.0 * dot[..., None] * k[:2]
    h = np.array([0.5, 0.5])
    dx = _length(
        np.stack([xy[..., 0] - np.clip(xy[..., 0], -k[2] * h[0], k[2] * h[0]), xy[..., 1] - h[0]], axis=-1)
    ) * np.sign(xy[..., 1] - h[0])
    dz = q[..., 2] - h[1]
    d = np.stack([dx, dz], axis=-1)
    return np.minimum(d.max(axis=-1), 0.0) + _length(np.maximum(d, 0.0))


def _ellipsoid(p):
    r = np.array([0.72, 0.36, 0.36])
    k0 = _length(p / r)
    k1 = _length(p / (r * r))
    return np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12), -r.min())


def _triprism(p):
    q = np.abs(p)
    h = (0.6, 0.45)
    return np.maximum(q[..., 1] - h[1], np.maximum(q[..., 0] * 0.866025 + p[..., 2] * 0.5, -p[..., 2]) - h[0] * 0.5)


def _slab(p):
    return _box(p, np.array([0.6, 0.6, 0.12])) - 0.04


def _dumbbell(p):
    a = _length(p - np.array([0.0, 0.0, 0.42])) - 0.28
    b = _length(p + np.array([0.0, 0.0, 0.42])) - 0.28
    rod = _capped_cylinder(p, 0.1, 0.45)
    return np.minimum(np.minimum(a, b), rod)


_SDF: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sphere": lambda p: _length(p) - 0.6,
    "box": lambda p: _box(p, np.array([0.42, 0.42, 0.42])),
    "cylinder": lambda p: _capped_cylinder(p, 0.38, 0.55),
    "cone": _cone,
    "torus": _torus,
    "capsule": _capsule,
    "octahedron": _octahedron,
    "hexprism": _hexprism,
    "ellipsoid": _ellipsoid,
    "triprism": _triprism,
    "slab": _slab,
    "dumbbell": _dumbbell,
}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _camera_rays(rig: CameraRig, resolution: int) -> np.ndarray:
    forward = rig.focal - rig.position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    half = np.tan(FIELD_OF_VIEW / 2.0)
    coords = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u = coords[None, :] * half  # columns -> right
    v = -coords[:, None] * half  # rows -> down
    dirs = forward + u[..., None] * right + v[..., None] * true_up
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _texture(scene: SceneSpec, points: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(scene.texture_seed)
    base = rng.uniform(0.25, 0.9, size=3)
    accent = rng.uniform(0.25, 0.9, size=3)
    freq = rng.uniform(4.0, 9.0)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phase = rng.uniform(0, 2 * np.pi)
    t = 0.5 + 0.5 * np.sin(freq * (points @ axis) + phase)
    return base * (1 - t[..., None]) + accent * t[..., None]


def rasterize(scene: SceneSpec, rig: CameraRig, resolution: int):
    """Sphere-trace ``scene`` from ``rig``.

    Returns ``(rgb, depth, coverage)`` as (S, S, 3), (S, S) and (S, S) arrays.
    ``rgb`` is Lambertian shading times ``rig.light`` clamped to [0, 1];
    ``depth`` is 1 at the nearest covered pixel, falls linearly to
    ``DEPTH_FLOOR`` at the farthest and is 0 off the object.
    """
    if not MIN_RES <= resolution <= MAX_RES:
        raise ValueError(f"resolution {resolution} outside [{MIN_RES}, {MAX_RES}]")
    origin = np.asarray(rig.position, dtype=np.float64)
    if scene.sdf(origin[None])[0] <= 0:
        raise ValueError("camera lies inside the solid")
    dirs = _camera_rays(rig, resolution).reshape(-1, 3)
    t = np.zeros(len(dirs))
    hit = np.zeros(len(dirs), dtype=bool)
    alive = np.ones(len(dirs), dtype=bool)
    far = np.linalg.norm(origin) + 2.0
    for _ in range(_MARCH_STEPS):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        d = scene.sdf(origin + t[idx, None] * dirs[idx])
        t[idx] += d
        done = d < _HIT_EPS
        hit[idx[done]] = True
        gone = t[idx] > far
        alive[idx[done | gone]] = False
    pts = origin + t[:, None] * dirs
    surface = pts[hit]
    nh = np.zeros_like(surface)
    for axis in range(3):
        off = np.zeros(3)
        off[axis] = 1e-4
        nh[:, axis] = scene.sdf(surface + off) - scene.sdf(surface - off)
    nh /= np.maximum(np.linalg.norm(nh, axis=1, keepdims=True), 1e-12)
    light_dir = origin + np.array([0.0, 0.0, CAMERA_RADIUS])
    light_dir /= np.linalg.norm(light_dir)
    shade = 0.35 + 0.65 * np.clip(nh @ light_dir, 0.0, None)

    rgb = np.zeros((len(dirs), 3))
    rgb[hit] = np.clip(rig.light * _texture(scene, surface) * shade[:, None], 0.0, 1.0)
    depth = np.zeros(len(dirs))
    if hit.any():
        th = t[hit]
        lo, hi = th.min(), th.max()
        span = hi - lo
        depth[hit] = 1.0 - (1.0 - DEPTH_FLOOR) * ((th - lo) / span if span > 0 else 0.0)
    s = resolution
    return rgb.reshape(s, s, 3), depth.reshape(s, s), hit.reshape(s, s)


def _value_noise(rng: np.random.Generator, resolution: int, cells: int) -> np.ndarray:
    lattice = rng.random((cells + 1, cells + 1))
    x = np.linspace(0, cells, resolution, endpoint=False) + cells / (2 * resolution)
    i = np.floor(x).astype(int)
    f = x - i
    f = f * f * (3 - 2 * f)
    a = lattice[np.ix_(i, i)]
    b = lattice[np.ix_(i, i + 1)]
    c = lattice[np.ix_(i + 1, i)]
    d = lattice[np.ix_(i + 1, i + 1)]
    fy, fx = f[:, None], f[None, :]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def background(seed: int, resolution: int) -> np.ndarray:
    """Multi-octave value noise mapped through a random three-colour palette."""
    rng = np.random.default_rng(seed)
    total = np.zeros((resolution, resolution))
    amp, weight = 1.0, 0.0
    for cells in (2, 4, 8, 16):
        total += amp * _value_noise(rng, resolution, cells)
        weight += amp
        amp *= 0.6
    t = total / weight
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    palette = rng.random((3, 3))
    lo = np.clip(1 - 2 * t, 0, 1)[..., None]
    hi = np.clip(2 * t - 1, 0, 1)[..., None]
    mid = 1 - lo - hi
    return lo * palette[0] + mid * palette[1] + hi * palette[2]


def _sig9(x: float) -> float:
    return float(f"{float(x):.9g}")


@dataclass
class SamplePair:
    """Realistic image ``o`` and semantic-depth mask ``m``, both (3, S, S) in [0, 1]."""

    o: np.ndarray
    m: np.ndarray
    category: int
    pose: tuple[float, float, float]
    light: float
    mode: CameraMode
    seed: int
    id: str = ""

    @property
    def resolution(self) -> int:
        return self.o.shape[-1]


def compose_pair(
    scene: SceneSpec,
    rig: CameraRig,
    category: int,
    resolution: int,
    seed: int = 0,
    pair_id: str = "",
) -> SamplePair:
    """Render the realistic image and its mask; empty coverage is rejected."""
    rgb, depth, cov = rasterize(scene, rig, resolution)
    if not cov.any():
        raise ValueError("object not visible: coverage is empty")
    bg = background(scene.background_seed, resolution)
    o = np.where(cov[..., None], rgb, bg)
    m = np.where(cov[..., None], category_color(category) * depth[..., None], 0.0)
    pose = tuple(_sig9(v) for v in rig.pose)
    return SamplePair(
        o=o.transpose(2, 0, 1).copy(),
        m=m.transpose(2, 0, 1).copy(),
        category=int(category),
        pose=pose,
        light=_sig9(rig.light),
        mode=CameraMode(rig.mode),
        seed=int(seed),
        id=pair_id,
    )


def _sample_seed(global_seed: int, mode: CameraMode, category: int, index: int, attempt: int) -> int:
    ss = np.random.SeedSequence([global_seed, 0 if mode is CameraMode.CENTERED else 1, category, index, attempt])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def render_one(
    global_seed: int,
    mode: CameraMode | str,
    category: int,
    index: int,
    num_classes: int,
    resolution: int,
    positions: np.ndarray,
    max_attempts: int = 20,
) -> SamplePair:
    mode = CameraMode(mode)
    if not MIN_RES <= resolution <= MAX_RES:
        raise ValueError(f"resolution {resolution} outside [{MIN_RES}, {MAX_RES}]")
    for attempt in range(max_attempts):
        seed = _sample_seed(global_seed, mode, category, index, attempt)
        scene = make_scene(category, seed, num_classes)
        rig = sample_rig(positions, CAMERA_RADIUS, mode, np.random.default_rng(seed))
        try:
            pair = compose_pair(scene, rig, category, resolution, seed=seed)
        except ValueError:
            continue
        pair.id = f"{mode.value[0]}{category:02d}_{index:05d}"
        return pair
    raise RuntimeError(f"could not render a visible object for category {category}, index {index}")


def worker_count() -> int:
    raw = os.environ.get("GMCML_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"GMCML_THREADS must be an integer, got {raw!r}") from None


def generate_dataset(
    seed: int,
    num_classes: int,
    per_class: int,
    resolution: int = 32,
    level: int = 2,
    modes: Sequence[CameraMode | str] = (CameraMode.CENTERED,),
    offset: int = 0,
) -> list[SamplePair]:
    """Render ``per_class`` pairs per category and mode.

    Fully determined by the arguments; ``offset`` shifts sample indices so
    disjoint splits can share a seed.
    """
    _check_classes(num_classes)
    positions = camera_positions(level, CAMERA_RADIUS)
    jobs = [
        (CameraMode(mode), k, offset + i)
        for mode in modes
        for k in range(num_classes)
        for i in range(per_class)
    ]

    def run(job):
        mode, k, i = job
        return render_one(seed, mode, k, i, num_classes, resolution, positions)

    workers = worker_count()
    if workers == 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

META = "meta.jsonl"


def _to_png(img: np.ndarray, path: Path) -> None:
    hwc = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(hwc, mode="RGB").save(path)


def _from_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(pairs: Sequence[SamplePair], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for n, p in enumerate(pairs):
        pid = p.id or f"{n:06d}"
        o_file, m_file = f"{pid}_o.png", f"{pid}_m.png"
        _to_png(p.o, d / o_file)
        _to_png(p.m, d / m_file)
        rec = {
            "id": pid,
            "category": p.category,
            "pose": [_sig9(v) for v in p.pose],
            "light": _sig9(p.light),
            "mode": CameraMode(p.mode).value,
            "seed": p.seed,
            "o_file": o_file,
            "m_file": m_file,
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    (d / META).write_text("".join(line + "\n" for line in lines))


def read_dataset(directory) -> list[SamplePair]:
    d = Path(directory)
    meta = d / META
    if not meta.exists():
        if d.is_dir() and not any(d.iterdir()):
            return []
        if not d.exists():
            raise FileNotFoundError(f"dataset directory {d} does not exist")
        raise FileNotFoundError(f"{meta} not found")
    pairs = []
    for lineno, line in enumerate(meta.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pose = tuple(float(v) for v in rec["pose"])
            if len(pose) != 3:
                raise ValueError("pose must have three components")
            fields = (str(rec["id"]), int(rec["category"]), float(rec["light"]), CameraMode(rec["mode"]),
                      int(rec["seed"]), str(rec["o_file"]), str(rec["m_file"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{meta}: corrupt metadata on line {lineno}: {exc}") from None
        pid, category, light, mode, seed, o_file, m_file = fields
        imgs = []
        for name in (o_file, m_file):
            path = d / name
            if not path.exists():
                raise FileNotFoundError(f"missing image file {name} (line {lineno} of {meta})")
            imgs.append(_from_png(path))
        pairs.append(SamplePair(imgs[0], imgs[1], category, pose, light, mode, seed, pid))
    return pairs
