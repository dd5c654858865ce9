"""Datasets: point-cloud file formats, dataset directories, synthetic shapes.

Text cloud format (``.pts``)::

    class 3            # optional header, instance class id
    0.1 0.2 0.3 1      # x y z [part_label], one point per line

Blank lines and lines starting with ``#`` are ignored.

Binary cloud format (``.pcb``), little-endian::

    offset  size  field
    0       4     magic b"PSPC"
    4       2     version (uint16, currently 1)
    6       2     flags (uint16): bit0 point labels present,
                  bit1 class label present, bit2 float64 coordinates
    8       4     N (uint32)
    12      4     class label (int32, -1 when absent)
    16      ...   N*3 coordinates (float32 or float64), row-major
    ...     ...   N part labels (int32), when bit0 is set

Dataset directory::

    dataset.ini        [dataset] task / classes / num_parts, optional [parts]
    train/*.pcb|*.pts
    test/*.pcb|*.pts
"""
from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import PointCloud

MAGIC = b"PSPC"
VERSION = 1
_HEADER = struct.Struct("<4sHHIi")
FLAG_LABELS, FLAG_CLASS, FLAG_F64 = 1, 2, 4


class FormatError(ValueError):
    """Malformed or truncated point-cloud file."""


# ---------------------------------------------------------------- file formats


def load_point_cloud_file(path, format: str | None = None) -> PointCloud:
    path = Path(path)
    fmt = format or ("binary" if path.suffix == ".pcb" else "text")
    if fmt == "binary":
        return _read_binary(path.read_bytes(), str(path))
    if fmt == "text":
        return _read_text(path.read_text().splitlines(), str(path))
    raise ValueError(f"unknown point-cloud format {fmt!r}")


def _read_text(lines: list[str], where: str) -> PointCloud:
    class_label = None
    rows, labels = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "class":
            if rows or class_label is not None or len(tok) != 2:
                raise FormatError(f"{where}:{lineno}: misplaced or malformed class header")
            try:
                class_label = int(tok[1])
            except ValueError:
                raise FormatError(f"{where}:{lineno}: class id must be an integer") from None
            continue
        if len(tok) not in (3, 4):
            raise FormatError(f"{where}:{lineno}: expected 'x y z [label]', got {len(tok)} fields")
        try:
            rows.append([float(t) for t in tok[:3]])
            if len(tok) == 4:
                labels.append(int(tok[3]))
        except ValueError:
            raise FormatError(f"{where}:{lineno}: cannot parse {line!r}") from None
        if labels and len(labels) != len(rows):
            raise FormatError(f"{where}:{lineno}: part labels must be given for every point or none")
    if not rows:
        raise FormatError(f"{where}: no points")
    return PointCloud(np.array(rows), np.array(labels) if labels else None, class_label)


def _read_binary(buf: bytes, where: str) -> PointCloud:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{where}: truncated header ({len(buf)} bytes)")
    magic, version, flags, n, cls = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{where}: unsupported version {version}")
    ftype = np.dtype("<f8") if flags & FLAG_F64 else np.dtype("<f4")
    need = _HEADER.size + n * 3 * ftype.itemsize + (n * 4 if flags & FLAG_LABELS else 0)
    if len(buf) < need:
        raise FormatError(f"{where}: truncated payload, expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{where}: {len(buf) - need} trailing bytes after {n} points")
    off = _HEADER.size
    pts = np.frombuffer(buf, dtype=ftype, count=n * 3, offset=off).reshape(n, 3).astype(ftype.newbyteorder("="))
    off += n * 3 * ftype.itemsize
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off).astype(np.int64)
    return PointCloud(pts, labels, cls if flags & FLAG_CLASS else None)


def save_point_cloud_file(cloud: PointCloud, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or ("binary" if path.suffix == ".pcb" else "text")
    if fmt == "text":
        lines = [] if cloud.class_label is None else [f"class {cloud.class_label}"]
        for i, p in enumerate(cloud.points):
            tail = f" {cloud.point_labels[i]}" if cloud.point_labels is not None else ""
            x, y, z = (repr(float(v)) for v in p)
            lines.append(f"{x} {y} {z}{tail}")
        path.write_text("\n".join(lines) + "\n")
        return
    f64 = cloud.points.dtype == np.float64
    flags = (FLAG_LABELS if cloud.point_labels is not None else 0) | (
        FLAG_CLASS if cloud.class_label is not None else 0) | (FLAG_F64 if f64 else 0)
    n = len(cloud)
    cls = -1 if cloud.class_label is None else cloud.class_label
    out = [_HEADER.pack(MAGIC, VERSION, flags, n, cls),
           np.ascontiguousarray(cloud.points, dtype="<f8" if f64 else "<f4").tobytes()]
    if cloud.point_labels is not None:
        out.append(np.asarray(cloud.point_labels, dtype="<i4").tobytes())
    path.write_bytes(b"".join(out))


# -------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    samples: list[PointCloud]
    splits: list[str]
    class_names: list[str]
    task: str = "classification"
    num_parts: int = 0
    # object class -> admissible part ids (segmentation)
    parts_of_class: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.splits) != len(self.samples):
            raise ValueError("every sample needs a split tag")
        n = len(self.class_names)
        for s in self.samples:
            if s.class_label is not None and not 0 <= s.class_label < n:
                raise ValueError(f"class id {s.class_label} out of range for {n} classes")
            if self.task == "segmentation" and s.point_labels is None:
                raise ValueError("segmentation samples need point labels")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.splits) if s == name]
        return self.subset(keep)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], [self.splits[i] for i in indices],
                       list(self.class_names), self.task, self.num_parts, dict(self.parts_of_class))

    def labels(self) -> np.ndarray:
        return np.array([s.class_label for s in self.samples])


def save_dataset_dir(ds: Dataset, root, format: str = "binary") -> None:
    root = Path(root)
    cp = configparser.ConfigParser()
    cp["dataset"] = {"task": ds.task, "classes": ",".join(ds.class_names), "num_parts": str(ds.num_parts)}
    if ds.parts_of_class:
        cp["parts"] = {ds.class_names[c]: ",".join(map(str, p)) for c, p in ds.parts_of_class.items()}
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "dataset.ini", "w") as fh:
        cp.write(fh)
    ext = ".pcb" if format == "binary" else ".pts"
    counters: dict[str, int] = {}
    for s, sp in zip(ds.samples, ds.splits):
        (root / sp).mkdir(exist_ok=True)
        i = counters.get(sp, 0)
        counters[sp] = i + 1
        save_point_cloud_file(s, root / sp / f"{i:06d}{ext}", format)


def load_dataset_dir(root) -> Dataset:
    root = Path(root)
    ini = root / "dataset.ini"
    if not ini.exists():
        raise FileNotFoundError(f"{ini} not found")
    cp = configparser.ConfigParser()
    cp.read(ini)
    meta = cp["dataset"]
    names = [c.strip() for c in meta["classes"].split(",") if c.strip()]
    parts = {}
    if cp.has_section("parts"):
        for name, ids in cp["parts"].items():
            parts[names.index(name)] = [int(x) for x in ids.split(",")]
    samples, splits = [], []
    for sp in ("train", "test"):
        for f in sorted((root / sp).glob("*")) if (root / sp).is_dir() else []:
            if f.suffix in (".pcb", ".pts"):
                samples.append(load_point_cloud_file(f))
                splits.append(sp)
    return Dataset(samples, splits, names, meta.get("task", "classification"),
                   meta.getint("num_parts", 0), parts)


# ------------------------------------------------------------------ synthetic


def _area_choice(rng, areas, n):
    areas = np.asarray(areas, dtype=float)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def sample_sphere(rng, n, radius=1.0):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v, np.zeros(n, dtype=np.int64)


def sample_box(rng, n, size=(1.6, 1.2, 1.0)):
    """Box surface; label 0 for side faces, 1 for top/bottom faces."""
    a, b, c = (s / 2 for s in size)
    areas = [b * c, b * c, a * c, a * c, a * b, a * b]
    face = _area_choice(rng, areas, n)
    u = rng.uniform(-1, 1, size=(n, 3)) * np.array([a, b, c])
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    u[np.arange(n), axis] = sign * np.array([a, b, c])[axis]
    return u, (axis == 2).astype(np.int64)


def sample_cylinder(rng, n, radius=0.6, height=1.6, caps=True):
    """Cylinder surface about z; label 0 barrel, 1 caps (|z| == height/2)."""
    barrel = 2 * np.pi * radius * height
    cap = np.pi * radius**2 if caps else 0.0
    part = _area_choice(rng, [barrel, cap, cap], n)
    th = rng.uniform(0, 2 * np.pi, n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n),
                 np.where(part == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(th), r * np.sin(th), z], 1), (part > 0).astype(np.int64)


def sample_torus(rng, n, major=0.8, minor=0.3):
    """Torus about z; label 0 outer half (farther than ``major`` from the axis), 1 inner."""
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, 1, 2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], 1)])
    pts = out[:n]
    return pts, (np.hypot(pts[:, 0], pts[:, 1]) < major).astype(np.int64)


def sample_cone(rng, n, radius=0.7, height=1.4):
    """Cone about z with apex up; label 0 lateral surface, 1 base disc."""
    slant = np.hypot(radius, height)
    part = _area_choice(rng, [np.pi * radius * slant, np.pi * radius**2], n)
    th = rng.uniform(0, 2 * np.pi, n)
    t = np.sqrt(rng.uniform(0, 1, n))  # area-uniform along the slant / disc radius
    r = radius * t
    z = np.where(part == 0, height / 2 - height * t, -height / 2)
    return np.stack([r * np.cos(th), r * np.sin(th), z], 1), part.astype(np.int64)


SHAPES = {
    "sphere": sample_sphere,
    "box": sample_box,
    "cylinder": sample_cylinder,
    "torus": sample_torus,
    "cone": sample_cone,
}


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic dataset.

    ``classes`` maps to shape generator names (a name may be suffixed with
    ``:key=value,...`` keyword overrides, e.g. ``cylinder:caps=False``).
    """

    classes: list[str] = field(default_factory=lambda: ["sphere", "box", "cylinder", "torus"])
    task: str = "classification"
    samples_per_class: int = 50
    test_per_class: int = 0
    n_points: int = 512
    scale_jitter: float = 0.0  # per-axis relative scale noise
    noise: float = 0.0  # gaussian coordinate noise
    rotate: bool = False  # random rotation about z


def _parse_shape(entry: str):
    name, _, opts = entry.partition(":")
    kw = {}
    for item in filter(None, opts.split(",")):
        k, _, v = item.partition("=")
        kw[k.strip()] = {"True": True, "False": False}.get(v.strip(), None)
        if kw[k.strip()] is None:
            kw[k.strip()] = float(v)
    if name not in SHAPES:
        raise ValueError(f"unknown shape generator {name!r}")
    return SHAPES[name], kw


def generate_synthetic_dataset(spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    """Sample clouds from analytic surfaces; segmentation labels are exact by construction."""
    if not spec.classes:
        raise ValueError("synthetic dataset needs at least one class")
    samples, splits = [], []
    parts_of_class = {}
    seg = spec.task == "segmentation"
    for c, entry in enumerate(spec.classes):
        fn, kw = _parse_shape(entry)
        if seg:
            parts_of_class[c] = [2 * c, 2 * c + 1]
        for j in range(spec.samples_per_class + spec.test_per_class):
            pts, part = fn(rng, spec.n_points, **kw)
            if spec.scale_jitter:
                pts = pts * (1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter, 3))
            if spec.rotate:
                pts = rotate_z(pts, rng.uniform(0, 2 * np.pi))
            if spec.noise:
                pts = pts + rng.normal(0, spec.noise, pts.shape)
            labels = part + 2 * c if seg else None
            samples.append(PointCloud(pts, labels, c))
            splits.append("train" if j < spec.samples_per_class else "test")
    names = [e.replace(":", "_").replace("=", "").replace(",", "_") for e in spec.classes]
    return Dataset(samples, splits, names, spec.task, 2 * len(spec.classes) if seg else 0, parts_of_class)


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def batch_points(clouds: list[PointCloud], n_points: Optional[int] = None) -> np.ndarray:
    """Stack clouds into ``(B, N, 3)``; all clouds must share ``N`` unless resampled."""
    arrs = [c.points if n_points is None else resample(c, n_points).points for c in clouds]
    if len({a.shape[0] for a in arrs}) != 1:
        raise ValueError("clouds in a batch must have the same number of points")
    return np.stack(arrs)


def resample(cloud: PointCloud, n: int) -> PointCloud:
    """Deterministically take the first ``n`` points, or cycle them when short."""
    if len(cloud) == n:
        return cloud
    idx = np.arange(n) % len(cloud)
    labels = None if cloud.point_labels is None else cloud.point_labels[idx]
    return PointCloud(cloud.points[idx], labels, cloud.class_label)
