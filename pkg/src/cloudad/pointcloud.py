"""Point-cloud representation, IO, normalization, and adaptive grouping.

A cloud is sampled down to `n` centers by farthest-point sampling, each
center gets a radius proportional to its mean distance to all centers,
and neighborhoods of fixed size `g` are cut out of the cloud relative to
each center. Groups are what the token embedder consumes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CloudParseError, DegenerateCloudError

log = logging.getLogger("cloudad.pointcloud")

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"


@dataclass
class PointCloud:
    """N xyz points with an object-level label and optional per-point flags.

    `points` is an (N, 3) float array. `point_labels`, when present, is a
    boolean array of length N marking anomalous points.
    """

    points: np.ndarray
    label: str = LABEL_NORMAL
    point_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("cloud must contain at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("cloud contains non-finite coordinates")
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ValueError(f"unknown label {self.label!r}")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=bool)
            if self.point_labels.shape != (self.points.shape[0],):
                raise ValueError("point_labels length must equal point count")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class GroupedCloud:
    """Fixed-size neighborhoods around sampled centers.

    `groups[i]` holds g points relative to `centers[i]`; `radii[i]` is the
    neighborhood radius used to build it. `fallback` flags centers that were
    grouped by plain k-nearest-neighbors because their radius degenerated.
    """

    centers: np.ndarray   # (n, 3)
    radii: np.ndarray     # (n,)
    groups: np.ndarray    # (n, g, 3), center-relative
    fallback: np.ndarray  # (n,) bool

    @property
    def n(self):
        return self.centers.shape[0]

    @property
    def group_size(self):
        return self.groups.shape[1]


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Translate the centroid to the origin and scale the max norm to 1.

    Pure similarity transform; labels are carried through unchanged.
    Raises DegenerateCloudError when all points coincide.
    """
    pts = cloud.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = np.linalg.norm(centered, axis=1).max()
    if scale <= 0.0:
        raise DegenerateCloudError(
            f"cannot normalize a zero-extent cloud of {len(cloud)} identical points"
        )
    return replace(cloud, points=centered / scale)


def fps_sample(cloud: PointCloud, n: int, seed: int) -> np.ndarray:
    """Farthest-point sampling of `n` centers, deterministic per seed.

    The first center is a seeded uniform draw; each later center is the
    point with the largest distance to the already-chosen set (first index
    wins ties). Returns the selected coordinates, shape (n, 3).
    """
    pts = cloud.points
    total = pts.shape[0]
    if not 2 <= n <= total:
        raise ValueError(f"need 2 <= n <= N, got n={n} for a cloud of {total} points")
    rng = np.random.default_rng(seed)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(total)
    min_d = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, n):
        idx = int(np.argmax(min_d))
        chosen[i] = idx
        np.minimum(min_d, np.linalg.norm(pts - pts[idx], axis=1), out=min_d)
    return pts[chosen].copy()


def adaptive_radius(centers: np.ndarray, eta: float, mode: str = "per_center") -> np.ndarray:
    """Radius per center: eta/n times the sum of distances to all centers.

    The self term (distance zero) is part of the sum. `mode="global"`
    replaces every per-center value with their common mean, for comparing
    against the pooled-radius reading of the same rule.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise ValueError("need at least two centers")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    radii = (eta / centers.shape[0]) * dist.sum(axis=1)
    if mode == "global":
        radii = np.full_like(radii, radii.mean())
    elif mode != "per_center":
        raise ValueError(f"unknown radius mode {mode!r}")
    return radii


def group_points(
    cloud: PointCloud,
    centers: np.ndarray,
    radii: np.ndarray,
    g: int,
    seed: int = 0,
) -> GroupedCloud:
    """Cut a fixed-size neighborhood of g points out of the cloud per center.

    All points within radius r_i qualify; the g nearest are kept (ties by
    input index) and short groups are padded by cycling through the members
    nearest the center. A zero radius (or an empty in-radius set) falls back
    to plain g-nearest-neighbors for that center and logs a warning record.
    Group points are stored relative to their center. `seed` is accepted for
    interface symmetry; grouping itself is deterministic.
    """
    del seed
    if g < 1:
        raise ValueError("group size must be >= 1")
    pts = cloud.points
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    n = centers.shape[0]
    if radii.shape != (n,):
        raise ValueError("radii must match centers one-to-one")

    # (n, N) distances; desk-scale sizes keep this comfortably in memory
    dist = np.linalg.norm(pts[None, :, :] - centers[:, None, :], axis=-1)
    order = np.argsort(dist, axis=1, kind="stable")

    groups = np.empty((n, g, 3), dtype=np.float64)
    fallback = np.zeros(n, dtype=bool)
    for i in range(n):
        members = order[i][dist[i, order[i]] <= radii[i]]
        if members.size == 0:
            fallback[i] = True
            log.warning(
                "grouping_fallback center=%d radius=%.6g reason=%s",
                i,
                radii[i],
                "zero_radius" if radii[i] <= 0 else "empty_neighborhood",
            )
            members = order[i][:g]
        if members.size >= g:
            sel = members[:g]
        else:
            reps = np.arange(g) % members.size
            sel = members[reps]
        groups[i] = pts[sel] - centers[i]
    return GroupedCloud(centers=centers.copy(), radii=radii, groups=groups, fallback=fallback)


# ---------------------------------------------------------------------------
# File IO: XYZ text and binary little-endian PLY (float32 x, y, z)
# ---------------------------------------------------------------------------

def read_cloud(path, fmt: Optional[str] = None) -> PointCloud:
    """Read a cloud from an XYZ text file or a binary little-endian PLY."""
    path = Path(path)
    if fmt is None:
        fmt = "ply" if path.suffix.lower() == ".ply" else "xyz"
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "ply":
        return _read_ply(path)
    raise ValueError(f"unknown format {fmt!r}")


def write_cloud(cloud: PointCloud, path, fmt: Optional[str] = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "ply" if path.suffix.lower() == ".ply" else "xyz"
    if fmt == "xyz":
        _write_xyz(cloud, path)
    elif fmt == "ply":
        _write_ply(cloud, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise CloudParseError(
                    f"expected 3 coordinates, got {len(parts)}", line=lineno
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise CloudParseError(f"non-numeric coordinate in {text!r}", line=lineno)
    if not rows:
        raise CloudParseError(f"{path} contains no points")
    return PointCloud(points=np.array(rows, dtype=np.float64))


def _write_xyz(cloud: PointCloud, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {len(cloud)} points\n")
        for x, y, z in cloud.points.astype(np.float32):
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


_PLY_FLOAT_NAMES = {"float", "float32"}


def _read_ply(path: Path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise CloudParseError("not a PLY file (missing ply/end_header)", offset=0)
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body_off = end + len(b"end_header\n")

    vertex_count = None
    props = []
    fmt_ok = False
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt_ok = tok[1:] == ["binary_little_endian", "1.0"]
        elif tok[0] == "element":
            if tok[1] == "vertex":
                vertex_count = int(tok[2])
            elif vertex_count is not None:
                break  # only the vertex element is read
        elif tok[0] == "property" and vertex_count is not None:
            props.append((tok[1], tok[2]))
    if not fmt_ok:
        raise CloudParseError("PLY must be format binary_little_endian 1.0", offset=0)
    if vertex_count is None:
        raise CloudParseError("PLY has no vertex element", offset=0)
    if vertex_count == 0:
        raise CloudParseError("PLY vertex element is empty", offset=body_off)
    names = [name for _, name in props]
    if names[:3] != ["x", "y", "z"] or any(
        t not in _PLY_FLOAT_NAMES for t, _ in props[:3]
    ):
        raise CloudParseError(
            f"unsupported PLY property layout {props!r}; need float32 x, y, z first",
            offset=0,
        )
    stride = 0
    sizes = {"char": 1, "uchar": 1, "int8": 1, "uint8": 1, "short": 2, "ushort": 2,
             "int16": 2, "uint16": 2, "int": 4, "uint": 4, "int32": 4, "uint32": 4,
             "float": 4, "float32": 4, "double": 8, "float64": 8}
    for t, _ in props:
        if t not in sizes:
            raise CloudParseError(f"unsupported PLY property type {t!r}", offset=0)
        stride += sizes[t]
    need = vertex_count * stride
    if len(blob) - body_off < need:
        raise CloudParseError(
            f"PLY truncated: need {need} payload bytes, have {len(blob) - body_off}",
            offset=len(blob),
        )
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=body_off)
    raw = raw.reshape(vertex_count, stride)[:, :12].copy()
    pts = raw.view("<f4").astype(np.float64)
    if not np.isfinite(pts).all():
        raise CloudParseError("PLY contains non-finite coordinates", offset=body_off)
    return PointCloud(points=pts)


def _write_ply(cloud: PointCloud, path: Path) -> None:
    pts = cloud.points.astype("<f4")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float32 x\n"
        "property float32 y\n"
        "property float32 z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def cloud_diameter(cloud: PointCloud) -> float:
    """Cheap diameter bound: twice the max distance from the centroid."""
    centered = cloud.points - cloud.points.mean(axis=0)
    return 2.0 * float(np.linalg.norm(centered, axis=1).max())
