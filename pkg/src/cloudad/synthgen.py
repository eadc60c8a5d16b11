"""Synthetic category generator and defect injector.

Six geometric primitives stand in for dataset categories. Normal clouds are
uniform-ish surface samples with small jitter; anomalous clouds are normal
clouds with one localized defect injected: a smooth bump or dent along the
outward radial direction, a hole (points removed), or a patch of uniform
noise. Everything is deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InjectionError
from .pointcloud import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    PointCloud,
    read_cloud,
    write_cloud,
)
from .taskstream import Sample, Task, TaskStream, verify_stream

SHAPES = ("sphere", "box", "cylinder", "torus", "cone", "ellipsoid")
DEFECT_KINDS = ("bump", "dent", "hole", "noise_patch")


@dataclass
class CategorySpec:
    shape: str
    points_per_cloud: int = 8192
    jitter_sigma: float = 0.002
    pose_randomization: bool = False
    name: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.points_per_cloud < 64:
            raise ValueError("points_per_cloud must be >= 64")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not self.name:
            self.name = self.shape


@dataclass
class DefectSpec:
    kind: str
    amplitude: float = 0.3   # fraction of object radius
    extent: float = 0.12     # fraction of diameter affected

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}; choose from {DEFECT_KINDS}")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be > 0")
        if not 0 < self.extent < 0.5:
            raise ValueError("extent must lie in (0, 0.5)")


def _sample_sphere(rng, n):
    u = rng.standard_normal((n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _sample_box(rng, n, half=(0.8, 0.6, 0.4)):
    a, b, c = half
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for ax, (h, o1, o2) in enumerate([(a, 1, 2), (b, 0, 2), (c, 0, 1)]):
        sel = axis == ax
        pts[sel, ax] = sign[sel] * h
        pts[sel, o1] = uv[sel, 0] * half[o1]
        pts[sel, o2] = uv[sel, 1] * half[o2]
    return pts


def _sample_cylinder(rng, n, radius=0.5, height=1.6):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    region = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    on_side = region == 0
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-height / 2, height / 2, size=on_side.sum())
    for which, z in ((1, height / 2), (2, -height / 2)):
        sel = region == which
        r = radius * np.sqrt(rng.uniform(size=sel.sum()))
        pts[sel, 0] = r * np.cos(theta[sel])
        pts[sel, 1] = r * np.sin(theta[sel])
        pts[sel, 2] = z
    return pts


def _sample_torus(rng, n, major=0.7, minor=0.25):
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        k = 2 * (n - filled) + 16
        theta = rng.uniform(0, 2 * np.pi, size=k)
        phi = rng.uniform(0, 2 * np.pi, size=k)
        # area element scales with major + minor*cos(phi); rejection keeps it uniform
        keep = rng.uniform(size=k) < (major + minor * np.cos(phi)) / (major + minor)
        theta, phi = theta[keep], phi[keep]
        take = min(theta.size, n - filled)
        ring = major + minor * np.cos(phi[:take])
        pts[filled : filled + take, 0] = ring * np.cos(theta[:take])
        pts[filled : filled + take, 1] = ring * np.sin(theta[:take])
        pts[filled : filled + take, 2] = minor * np.sin(phi[:take])
        filled += take
    return pts


def _sample_cone(rng, n, radius=0.6, height=1.4):
    lateral = np.pi * radius * np.hypot(radius, height)
    base = np.pi * radius**2
    on_base = rng.uniform(size=n) < base / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    lat = ~on_base
    t = np.sqrt(rng.uniform(size=lat.sum()))  # fraction of the way from apex
    pts[lat, 0] = t * radius * np.cos(theta[lat])
    pts[lat, 1] = t * radius * np.sin(theta[lat])
    pts[lat, 2] = height / 2 - t * height
    r = radius * np.sqrt(rng.uniform(size=on_base.sum()))
    pts[on_base, 0] = r * np.cos(theta[on_base])
    pts[on_base, 1] = r * np.sin(theta[on_base])
    pts[on_base, 2] = -height / 2
    return pts


def _sample_ellipsoid(rng, n, semi=(0.9, 0.6, 0.45)):
    a, b, c = semi
    gmax = max(b * c, a * c, a * b)
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        k = 2 * (n - filled) + 16
        u = _sample_sphere(rng, k)
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = rng.uniform(size=k) < g / gmax
        u = u[keep]
        take = min(u.shape[0], n - filled)
        pts[filled : filled + take] = u[:take] * np.array(semi)
        filled += take
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cone": _sample_cone,
    "ellipsoid": _sample_ellipsoid,
}


def _random_rotation(rng) -> np.ndarray:
    # uniform rotation from a random quaternion
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def generate_normal(spec: CategorySpec, seed: int) -> PointCloud:
    """Sample one normal cloud of the category; deterministic per seed."""
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[spec.shape](rng, spec.points_per_cloud)
    if spec.pose_randomization:
        pts = pts @ _random_rotation(rng).T
    if spec.jitter_sigma > 0:
        radius = np.linalg.norm(pts, axis=1).max()
        pts = pts + rng.normal(0.0, spec.jitter_sigma * radius, size=pts.shape)
    return PointCloud(points=pts, label=LABEL_NORMAL)


def inject_defect(cloud: PointCloud, defect: DefectSpec, seed: int) -> PointCloud:
    """Apply one localized defect; returns a new anomalous cloud.

    The defect region is the ball of radius extent * diameter around a random
    direction's surface-distance point. Points outside the region are carried
    over bit-exactly. Raises InjectionError when the region catches no points.
    """
    if cloud.label != LABEL_NORMAL:
        raise ValueError("defects are injected into normal clouds only")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    centroid = pts.mean(axis=0)
    rel = pts - centroid
    radius = np.linalg.norm(rel, axis=1).max()
    diameter = 2.0 * radius

    anchor = pts[rng.integers(len(cloud))]

    t = defect.extent * diameter
    dist = np.linalg.norm(pts - anchor, axis=1)
    region = dist <= t
    if region.sum() < 3:
        raise InjectionError(
            f"defect region (radius {t:.4g}) caught only {int(region.sum())} points; "
            "extent too small for the sampling density"
        )

    if defect.kind in ("bump", "dent"):
        falloff = 0.5 * (1.0 + np.cos(np.pi * dist[region] / t))
        outward = rel[region] / np.linalg.norm(rel[region], axis=1, keepdims=True)
        sign = 1.0 if defect.kind == "bump" else -1.0
        new_pts = pts.copy()
        new_pts[region] += sign * defect.amplitude * radius * falloff[:, None] * outward
        labels = region.copy()
    elif defect.kind == "noise_patch":
        amp = defect.amplitude * radius
        new_pts = pts.copy()
        new_pts[region] += rng.uniform(-amp, amp, size=(int(region.sum()), 3))
        labels = region.copy()
    elif defect.kind == "hole":
        keep = ~region
        if keep.sum() < 4:
            raise InjectionError("hole would remove nearly the whole cloud")
        new_pts = pts[keep].copy()
        # the removed region itself is gone; mark the boundary ring instead
        ring = dist[keep] <= 1.25 * t
        labels = ring
    else:  # pragma: no cover - DefectSpec validates kinds
        raise InjectionError(f"unhandled defect kind {defect.kind!r}")

    return PointCloud(points=new_pts, label=LABEL_ANOMALOUS, point_labels=labels)


@dataclass
class SplitSizes:
    train_per_category: int = 20
    test_normal_per_category: int = 10
    test_anomalous_per_category: int = 10


def build_task_stream(
    categories: list[CategorySpec],
    tasks: list[list[int]],
    sizes: SplitSizes,
    defects: list[DefectSpec],
    seed: int,
) -> TaskStream:
    """Assemble a class-incremental stream from a partition of categories.

    `tasks` lists category indices per task; it must be a disjoint cover of
    `categories`. Train sets hold only normal clouds of the task's own
    categories; test sets grow cumulatively and mix normal and anomalous
    clouds. Defects cycle through `defects` per anomalous sample.
    """
    flat = [i for group in tasks for i in group]
    if sorted(flat) != list(range(len(categories))):
        raise ValueError("tasks must be a disjoint partition covering all categories")
    if any(len(group) == 0 for group in tasks):
        raise ValueError("every task needs at least one category")
    if not defects and sizes.test_anomalous_per_category > 0:
        raise ValueError("anomalous test samples requested but no defects given")

    built: list[Task] = []
    cumulative: list[Sample] = []
    for t, group in enumerate(tasks, start=1):
        train: list[Sample] = []
        fresh_test: list[Sample] = []
        for ci in group:
            spec = categories[ci]
            for i in range(sizes.train_per_category):
                cloud = generate_normal(spec, _child_seed(seed, t, ci, 0, i))
                train.append(Sample(cloud, spec.name, f"t{t}_{spec.name}_train{i:03d}", t))
            for i in range(sizes.test_normal_per_category):
                cloud = generate_normal(spec, _child_seed(seed, t, ci, 1, i))
                fresh_test.append(Sample(cloud, spec.name, f"t{t}_{spec.name}_good{i:03d}", t))
            for i in range(sizes.test_anomalous_per_category):
                base = generate_normal(spec, _child_seed(seed, t, ci, 2, i))
                defect = defects[i % len(defects)]
                dseed = _child_seed(seed, t, ci, 3, i)
                cloud = inject_defect(base, defect, dseed)
                fresh_test.append(
                    Sample(
                        cloud,
                        spec.name,
                        f"t{t}_{spec.name}_bad{i:03d}",
                        t,
                        defect={**asdict(defect), "seed": dseed},
                    )
                )
        cumulative = cumulative + fresh_test
        built.append(
            Task(
                task_id=t,
                categories=[categories[ci].name for ci in group],
                train=train,
                test=list(cumulative),
            )
        )
    stream = TaskStream(tasks=built)
    verify_stream(stream)
    return stream


def _child_seed(seed: int, *path: int) -> int:
    ss = np.random.SeedSequence([int(seed), *[int(p) for p in path]])
    return int(ss.generate_state(1, np.uint64)[0])


def default_categories(
    points_per_cloud: int = 8192,
    jitter_sigma: float = 0.002,
    pose_randomization: bool = False,
) -> list[CategorySpec]:
    return [
        CategorySpec(shape, points_per_cloud, jitter_sigma, pose_randomization)
        for shape in SHAPES
    ]


# ---------------------------------------------------------------------------
# Dataset directory layout: <root>/task_<t>/{train,test}/<category>/<uid>.ply
# plus manifest.json describing every file.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_stream(stream: TaskStream, root) -> Path:
    """Write the PLY tree and manifest; returns the manifest path."""
    root = Path(root)
    manifest = {"format": 1, "tasks": []}
    for task in stream.tasks:
        entry = {"task_id": task.task_id, "categories": task.categories,
                 "train": [], "test": []}
        for kind, samples in (("train", task.train), ("test", task.test)):
            for s in samples:
                if kind == "test" and s.origin_task != task.task_id:
                    continue  # cumulative repeats live under their origin task
                relpath = Path(f"task_{s.origin_task}") / kind / s.category / f"{s.uid}.ply"
                (root / relpath.parent).mkdir(parents=True, exist_ok=True)
                write_cloud(s.cloud, root / relpath)
                entry[kind].append(
                    {
                        "file": str(relpath),
                        "uid": s.uid,
                        "category": s.category,
                        "label": s.cloud.label,
                        "defect": s.defect,
                    }
                )
        manifest["tasks"].append(entry)
    path = root / MANIFEST_NAME
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_task_stream(root) -> TaskStream:
    """Rebuild a TaskStream from a gen-data directory."""
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != 1:
        raise DataError(f"unsupported manifest format {manifest.get('format')!r}")

    tasks: list[Task] = []
    cumulative: list[Sample] = []
    for entry in manifest["tasks"]:
        tid = entry["task_id"]
        train = [_load_sample(root, rec, tid) for rec in entry["train"]]
        fresh = [_load_sample(root, rec, tid) for rec in entry["test"]]
        for s in train:
            if s.cloud.label != LABEL_NORMAL:
                raise DataError(f"manifest lists non-normal train sample {s.uid}")
        cumulative = cumulative + fresh
        tasks.append(
            Task(task_id=tid, categories=list(entry["categories"]),
                 train=train, test=list(cumulative))
        )
    stream = TaskStream(tasks=tasks)
    try:
        verify_stream(stream)
    except ValueError as exc:
        raise DataError(f"dataset fails stream validation: {exc}") from exc
    return stream


def _load_sample(root: Path, rec: dict, task_id: int) -> Sample:
    path = root / rec["file"]
    if not path.is_file():
        raise DataError(f"manifest entry {rec['uid']} points at missing file {path}")
    cloud = read_cloud(path)
    cloud.label = rec["label"]
    return Sample(
        cloud=cloud,
        category=rec["category"],
        uid=rec["uid"],
        origin_task=task_id,
        defect=rec.get("defect"),
    )
