"""Point cloud ingestion, range cropping, voxelization and synthetic scenes."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "PointCloud", "VoxelGridSpec", "Box3D", "SceneSpec",
    "FormatError", "EmptyCloudError", "RangeError", "GenerationError",
    "read_kitti_bin", "write_kitti_bin", "read_text_points", "write_text_points",
    "read_points", "read_labels", "write_labels", "load_scene_spec", "scene_spec_to_text",
    "crop_range", "voxelize", "local_coords", "points_in_box", "gen_synthetic_scene",
    "boxes_to_array", "array_to_boxes",
]


class FormatError(ValueError):
    pass


class EmptyCloudError(ValueError):
    pass


class RangeError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class PointCloud:
    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("xyz and intensity lengths differ")
        if not np.isfinite(self.xyz).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.xyz)

    @property
    def n(self) -> int:
        return len(self.xyz)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.intensity[idx])

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.xyz, self.intensity])


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple
    extent: tuple
    voxel_size: tuple

    def __post_init__(self):
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(e <= 0 for e in self.extent):
            raise ValueError(f"extent must be positive, got {self.extent}")

    @classmethod
    def from_range(cls, point_range, voxel_size) -> "VoxelGridSpec":
        lo = tuple(float(v) for v in point_range[:3])
        hi = tuple(float(v) for v in point_range[3:])
        return cls(lo, tuple(h - l for l, h in zip(lo, hi)), tuple(float(v) for v in voxel_size))

    @property
    def grid_shape(self) -> tuple:
        return tuple(int(math.ceil(e / s - 1e-9)) for e, s in zip(self.extent, self.voxel_size))


@dataclass
class Box3D:
    center: tuple
    dims: tuple
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.dims = tuple(float(v) for v in self.dims)
        if any(v <= 0 for v in self.dims):
            raise ValueError(f"box dims must be positive, got {self.dims}")
        self.yaw = _wrap_yaw(float(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.dims, self.yaw], dtype=np.float64)


def _wrap_yaw(yaw: float) -> float:
    # into (-pi, pi]
    w = math.remainder(yaw, 2 * math.pi)
    return math.pi if w == -math.pi else w


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def array_to_boxes(arr, class_id: int = 0) -> list:
    return [Box3D(r[:3], r[3:6], r[6], class_id) for r in np.asarray(arr).reshape(-1, 7)]


def read_kitti_bin(path) -> PointCloud:
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise OSError(f"cannot read point file {path}: {exc}") from exc
    if len(raw) == 0:
        raise FormatError(f"{path}: empty point file")
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts[:, :3].astype(np.float64), pts[:, 3].astype(np.float64))


def write_kitti_bin(path, pc: PointCloud) -> None:
    arr = np.column_stack([pc.xyz, pc.intensity]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def read_text_points(path) -> PointCloud:
    """Whitespace separated ``x y z intensity`` rows; ``#`` starts a comment."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    arr = np.asarray(rows)
    return PointCloud(arr[:, :3], arr[:, 3])


def write_text_points(path, pc: PointCloud) -> None:
    with open(path, "w") as fh:
        for p, i in zip(pc.xyz, pc.intensity):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(i)!r}\n")


def read_points(path) -> PointCloud:
    """Dispatch on extension: ``.bin`` is KITTI binary, anything else is text."""
    if str(path).endswith(".bin"):
        return read_kitti_bin(path)
    return read_text_points(path)


def write_labels(path, boxes) -> None:
    """One box per line: ``x y z l w h yaw class_id``."""
    with open(path, "w") as fh:
        for b in boxes:
            fh.write(" ".join(repr(float(v)) for v in b.as_array()) + f" {b.class_id}\n")


def read_labels(path) -> list:
    boxes = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) not in (7, 8):
                raise FormatError(f"{path}: expected 7 or 8 fields, got {len(parts)}")
            vals = [float(v) for v in parts[:7]]
            cls = int(parts[7]) if len(parts) == 8 else 0
            boxes.append(Box3D(vals[:3], vals[3:6], vals[6], cls))
    return boxes


def _inside(xyz: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    lo = np.asarray(spec.origin)
    hi = lo + np.asarray(spec.extent)
    return np.all((xyz >= lo) & (xyz < hi), axis=1)


def crop_range(pc: PointCloud, spec: VoxelGridSpec) -> PointCloud:
    keep = _inside(pc.xyz, spec)
    if not keep.any():
        raise EmptyCloudError("no points inside the grid range")
    return pc.subset(np.flatnonzero(keep))


def _scaled(pc, spec: VoxelGridSpec) -> np.ndarray:
    xyz = pc.xyz if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    bad = np.flatnonzero(~_inside(xyz, spec))
    if len(bad):
        raise RangeError(f"point {bad[0]} at {xyz[bad[0]].tolist()} lies outside the grid range")
    return (xyz - np.asarray(spec.origin)) / np.asarray(spec.voxel_size)


def voxelize(pc, spec: VoxelGridSpec) -> np.ndarray:
    """Integer voxel index per point, counted from the range minimum."""
    return np.floor(_scaled(pc, spec)).astype(np.int64)


def local_coords(pc, spec: VoxelGridSpec) -> np.ndarray:
    """Position of each point inside its voxel, in [0, 1) per axis."""
    s = _scaled(pc, spec)
    return s - np.floor(s)


def points_in_box(xyz: np.ndarray, box, tol: float = 1e-9) -> np.ndarray:
    arr = box.as_array() if isinstance(box, Box3D) else np.asarray(box)
    d = np.asarray(xyz) - arr[:3]
    c, s = math.cos(arr[6]), math.sin(arr[6])
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    return ((np.abs(lx) <= arr[3] / 2 + tol) & (np.abs(ly) <= arr[4] / 2 + tol)
            & (np.abs(d[:, 2]) <= arr[5] / 2 + tol))


@dataclass(frozen=True)
class SceneSpec:
    """Settings for synthetic labelled scenes (single car-like class)."""

    point_range: tuple = (0.0, -11.52, -3.0, 23.04, 11.52, 1.0)
    box_count: tuple = (1, 3)
    length: tuple = (3.4, 4.4)
    width: tuple = (1.5, 1.9)
    height: tuple = (1.4, 1.7)
    # yaw = one of ``headings`` plus a uniform draw from ``yaw_range``;
    # an empty ``headings`` means yaw is uniform over ``yaw_range`` alone
    headings: tuple = (0.0, math.pi / 2, math.pi, -math.pi / 2)
    yaw_range: tuple = (-math.pi / 12, math.pi / 12)
    ground_z: float = -1.6
    ground_noise: float = 0.03
    points_per_box: tuple = (200, 300)
    clutter_points: int = 500
    clutter_max_height: float = 0.6
    margin: float = 1.0
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.box_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid box_count {self.box_count}")


def _box_corners_xy(arr: np.ndarray) -> np.ndarray:
    c, s = math.cos(arr[6]), math.sin(arr[6])
    hl, hw = arr[3] / 2, arr[4] / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + arr[:2]


def _sample_surface(rng: np.random.Generator, arr: np.ndarray, count: int) -> np.ndarray:
    l, w, h = arr[3:6]
    # 5 faces (no bottom), chosen by area
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(count, 3)) * np.array([l, w, h])
    inset = 0.999
    u[face == 0, 0] = l / 2 * inset
    u[face == 1, 0] = -l / 2 * inset
    u[face == 2, 1] = w / 2 * inset
    u[face == 3, 1] = -w / 2 * inset
    u[face == 4, 2] = h / 2 * inset
    c, s = math.cos(arr[6]), math.sin(arr[6])
    x = u[:, 0] * c - u[:, 1] * s + arr[0]
    y = u[:, 0] * s + u[:, 1] * c + arr[1]
    return np.column_stack([x, y, u[:, 2] + arr[2]])


def gen_synthetic_scene(seed, scene_spec: SceneSpec | None = None):
    """Return ``(PointCloud, boxes)`` for one deterministic synthetic scene."""
    spec = scene_spec or SceneSpec()
    rng = np.random.default_rng(seed)
    lo = np.asarray(spec.point_range[:3], dtype=np.float64)
    hi = np.asarray(spec.point_range[3:], dtype=np.float64)
    n_boxes = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    boxes = []
    tries = 0
    while len(boxes) < n_boxes:
        tries += 1
        if tries > spec.max_retries:
            raise GenerationError(f"could not place {n_boxes} boxes in {spec.max_retries} tries")
        l = rng.uniform(*spec.length)
        w = rng.uniform(*spec.width)
        h = rng.uniform(*spec.height)
        yaw = rng.uniform(*spec.yaw_range)
        if spec.headings:
            yaw += spec.headings[int(rng.integers(len(spec.headings)))]
        r = math.hypot(l, w) / 2 + spec.margin
        if hi[0] - lo[0] <= 2 * r or hi[1] - lo[1] <= 2 * r:
            raise GenerationError("grid range too small for the configured box sizes")
        cx = rng.uniform(lo[0] + r, hi[0] - r)
        cy = rng.uniform(lo[1] + r, hi[1] - r)
        cand = np.array([cx, cy, spec.ground_z + h / 2, l, w, h, yaw])
        if any(math.hypot(cx - b.center[0], cy - b.center[1])
               < math.hypot(l, w) / 2 + math.hypot(*b.dims[:2]) / 2 + 0.3 for b in boxes):
            continue
        boxes.append(Box3D(cand[:3], cand[3:6], cand[6]))

    chunks = []
    for b in boxes:
        cnt = int(rng.integers(spec.points_per_box[0], spec.points_per_box[1] + 1))
        chunks.append(_sample_surface(rng, b.as_array(), cnt))

    clutter = np.zeros((0, 3))
    need = spec.clutter_points
    budget = 0
    while len(clutter) < need:
        budget += 1
        if budget > spec.max_retries:
            raise GenerationError("clutter could not be placed outside the boxes")
        k = (need - len(clutter)) * 2
        xy = rng.uniform(lo[:2], hi[:2], size=(k, 2))
        ground = rng.random(k) < 0.7
        z = np.where(ground, spec.ground_z + rng.normal(0, spec.ground_noise, k),
                     spec.ground_z + rng.uniform(0, spec.clutter_max_height, k))
        pts = np.column_stack([xy, z])
        ok = (pts[:, 2] >= lo[2]) & (pts[:, 2] < hi[2])
        for b in boxes:
            grown = b.as_array().copy()
            grown[3:6] += 0.2
            ok &= ~points_in_box(pts, grown)
        clutter = np.concatenate([clutter, pts[ok]])[:need]
    chunks.append(clutter)

    xyz = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    intensity = rng.uniform(0.0, 1.0, size=len(xyz))
    perm = rng.permutation(len(xyz))
    return PointCloud(xyz[perm], intensity[perm]), boxes


_SPEC_KEYS = ("box_count", "points_per_box", "clutter_points", "dims_min", "dims_max",
              "yaw_range", "headings", "z_jitter", "seed")


def load_scene_spec(path_or_text, base: SceneSpec | None = None):
    """Parse a ``key = value`` scene file; returns ``(SceneSpec, seed or None)``.

    Keys: box_count (lo hi), points_per_box (lo hi), clutter_points, dims_min
    and dims_max (l w h each), yaw_range (lo hi, radians), headings (radians
    added to the yaw draw; empty for none), z_jitter (ground
    noise std, m), seed. Unknown keys raise ValueError.
    """
    text = path_or_text
    if os.path.exists(str(path_or_text)):
        with open(path_or_text) as fh:
            text = fh.read()
    vals = {}
    for lineno, line in enumerate(str(text).splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in _SPEC_KEYS:
            raise ValueError(f"line {lineno}: unknown scene key {key!r}")
        vals[key] = [float(v) for v in val.replace(",", " ").split()]
    spec = base or SceneSpec()
    upd = {}
    if "box_count" in vals:
        upd["box_count"] = tuple(int(v) for v in vals["box_count"])
    if "points_per_box" in vals:
        upd["points_per_box"] = tuple(int(v) for v in vals["points_per_box"])
    if "clutter_points" in vals:
        upd["clutter_points"] = int(vals["clutter_points"][0])
    if "yaw_range" in vals:
        upd["yaw_range"] = tuple(vals["yaw_range"])
    if "headings" in vals:
        upd["headings"] = tuple(vals["headings"])
    if "z_jitter" in vals:
        upd["ground_noise"] = vals["z_jitter"][0]
    lo = vals.get("dims_min", [spec.length[0], spec.width[0], spec.height[0]])
    hi = vals.get("dims_max", [spec.length[1], spec.width[1], spec.height[1]])
    upd["length"], upd["width"], upd["height"] = ((lo[i], hi[i]) for i in range(3))
    seed = int(vals["seed"][0]) if "seed" in vals else None
    return replace(spec, **upd), seed


def scene_spec_to_text(spec: SceneSpec, seed=None) -> str:
    lines = [
        f"box_count = {spec.box_count[0]} {spec.box_count[1]}",
        f"points_per_box = {spec.points_per_box[0]} {spec.points_per_box[1]}",
        f"clutter_points = {spec.clutter_points}",
        f"dims_min = {spec.length[0]} {spec.width[0]} {spec.height[0]}",
        f"dims_max = {spec.length[1]} {spec.width[1]} {spec.height[1]}",
        f"yaw_range = {spec.yaw_range[0]!r} {spec.yaw_range[1]!r}",
        "headings = " + " ".join(repr(float(h)) for h in spec.headings),
        f"z_jitter = {spec.ground_noise}",
    ]
    if seed is not None:
        lines.append(f"seed = {seed}")
    return "\n".join(lines) + "\n"
