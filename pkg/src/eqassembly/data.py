"""Synthetic assembly datasets, point-cloud files, downsampling, and metrics.

A dataset record pairs a set of centered piece clouds with the ground-truth
poses that reassemble them.  The synthetic generator samples the surface of
a deliberately lopsided composite solid (so the assembled shape has no
rotational symmetry and a unique solution up to a global rigid motion),
partitions the cloud with random half-space cuts, and centers every piece,
folding the removed offsets into the ground-truth poses.

Evaluation uses the averaged pairwise pose error: for every ordered pair of
pieces the predicted pose of one piece is compared against the pose it would
need for its ground-truth relation to the other piece to hold, yielding a
rotation error in degrees and a translation error in length units.  The
metric only ever sees relative poses, so it is blind to any global rigid
motion of a prediction.

Files use a plain text format: one ``x y z`` triple per line per piece, plus
a JSON manifest that is the single source of truth for the piece files,
their counts, the ground-truth poses (unit quaternion w-x-y-z plus
translation), and units.  Dataset layout on disk is
``<root>/<split>/<shape_id>/{piece_<i>.xyz, manifest.json}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .equinet import farthest_point_indices
from .lie import (
    GroupElementN,
    LengthMismatch,
    quat_to_rot,
    rot_to_quat,
)

__all__ = [
    "CENTER_TOL",
    "DegenerateCut",
    "ParseError",
    "PieceSet",
    "AssemblyRecord",
    "MetricResult",
    "sample_shape_surface",
    "cut_cloud",
    "generate_synthetic",
    "grid_downsample",
    "fps",
    "pairwise_error",
    "write_xyz",
    "read_xyz",
    "write_dataset",
    "read_dataset",
    "as_training_pairs",
    "SHAPE_FAMILIES",
]

CENTER_TOL = 1e-9

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "eqassembly-dataset"
MANIFEST_VERSION = 1


class DegenerateCut(RuntimeError):
    """A half-space cut could not produce pieces of the required size."""


class ParseError(ValueError):
    """A point-cloud file or manifest is malformed; carries the location."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = int(line)
        super().__init__(f"{self.path}:{self.line}: {message}")


def _frozen_cloud(points, what: str) -> np.ndarray:
    arr = np.array(points, dtype=np.float64, order="C")
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{what} must have shape (M, 3), got {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"{what} needs at least 2 points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite coordinates")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PieceSet:
    """Two or more centered point clouds, one per piece.

    Every piece must have its centroid at the origin (within ``CENTER_TOL``);
    use :meth:`from_raw` to center arbitrary clouds and recover the removed
    offsets for pose bookkeeping.
    """

    pieces: tuple[np.ndarray, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        pieces = tuple(
            _frozen_cloud(p, f"piece {i}") for i, p in enumerate(self.pieces)
        )
        object.__setattr__(self, "pieces", pieces)
        if len(pieces) < 2:
            raise ValueError(f"a piece set needs >= 2 pieces, got {len(pieces)}")
        for i, p in enumerate(pieces):
            offset = np.abs(p.mean(axis=0)).max()
            if offset > CENTER_TOL:
                raise ValueError(
                    f"piece {i} is not centered: centroid magnitude {offset:.3e}"
                )
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != len(pieces):
                raise ValueError(
                    f"{len(labels)} labels for {len(pieces)} pieces"
                )
            object.__setattr__(self, "labels", labels)

    @classmethod
    def from_raw(cls, clouds: Sequence, labels=None) -> tuple["PieceSet", np.ndarray]:
        """Center arbitrary clouds; returns (piece set, removed centroids)."""
        arrays = [np.asarray(c, dtype=np.float64) for c in clouds]
        offsets = np.stack([a.mean(axis=0) for a in arrays])
        centered = tuple(a - o for a, o in zip(arrays, offsets))
        return cls(pieces=centered, labels=labels), offsets

    @property
    def n(self) -> int:
        return len(self.pieces)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.pieces)


def _safe_name(value: str, what: str) -> str:
    value = str(value)
    if not value or any(c in value for c in "/\\") or value in (".", ".."):
        raise ValueError(f"{what} must be a filesystem-safe name, got {value!r}")
    return value


@dataclass(frozen=True)
class AssemblyRecord:
    """A piece set plus the ground-truth poses that reassemble it.

    The posed per-piece centroids must sum to zero, pinning the assembled
    state's global translation.
    """

    pieces: PieceSet
    poses: GroupElementN
    shape_id: str
    split: str

    def __post_init__(self):
        object.__setattr__(self, "shape_id", _safe_name(self.shape_id, "shape_id"))
        object.__setattr__(self, "split", _safe_name(self.split, "split"))
        if self.poses.n != self.pieces.n:
            raise LengthMismatch(
                f"{self.poses.n} poses for {self.pieces.n} pieces"
            )
        total = np.zeros(3)
        for i, x in enumerate(self.pieces.pieces):
            total += x.mean(axis=0) @ self.poses.rot[i].T + self.poses.trans[i]
        drift = np.abs(total).max()
        if drift > CENTER_TOL:
            raise ValueError(
                f"posed centroids sum to {drift:.3e}, expected 0 within {CENTER_TOL}"
            )

    @property
    def n(self) -> int:
        return self.pieces.n

    def assembled(self) -> np.ndarray:
        """All pieces posed by the ground truth, concatenated."""
        return np.concatenate(
            [
                x @ self.poses.rot[i].T + self.poses.trans[i]
                for i, x in enumerate(self.pieces.pieces)
            ]
        )


@dataclass(frozen=True)
class MetricResult:
    """Averaged pairwise pose error: rotation in degrees, translation in length units."""

    delta_r: float
    delta_t: float

    def __post_init__(self):
        if not (0.0 <= self.delta_r <= 180.0) or not math.isfinite(self.delta_r):
            raise ValueError(f"delta_r must be in [0, 180], got {self.delta_r}")
        if self.delta_t < 0.0 or not math.isfinite(self.delta_t):
            raise ValueError(f"delta_t must be >= 0, got {self.delta_t}")


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------


def _box_surface(rng, half, n: int) -> np.ndarray:
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    for f, (fixed_axis, sign) in enumerate(
        [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    ):
        m = face == f
        if not m.any():
            continue
        axes = [a for a in range(3) if a != fixed_axis]
        extents = [half[a] for a in axes]
        pts[m, fixed_axis] = sign * half[fixed_axis]
        pts[m, axes[0]] = u[m] * extents[0]
        pts[m, axes[1]] = v[m] * extents[1]
    return pts


def _cylinder_surface(rng, radius: float, height: float, n: int) -> np.ndarray:
    """Cylinder with axis +z, base at z=0, top at z=height."""
    lateral = 2.0 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(0.0, height, size=side.sum())
    for p, z in ((1, 0.0), (2, height)):
        m = part == p
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=m.sum()))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _sphere_surface(rng, radius: float, n: int) -> np.ndarray:
    raw = rng.normal(size=(n, 3))
    return radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _allocate(weights, total: int) -> list[int]:
    weights = np.asarray(weights, dtype=np.float64)
    counts = np.maximum(8, np.floor(total * weights / weights.sum()).astype(int))
    while counts.sum() > total:
        counts[np.argmax(counts)] -= 1
    counts[np.argmax(counts)] += total - counts.sum()
    return counts.tolist()


def _composite_cloud(rng, n_points: int) -> np.ndarray:
    """A box with a protruding cylinder and an off-center spherical boss.

    The three primitives have pairwise-distinct shapes and sit at generic
    offsets, so the composite has no rotational symmetry and is chiral.
    """
    hx = rng.uniform(0.45, 0.60)
    hy = rng.uniform(0.30, 0.42)
    hz = rng.uniform(0.18, 0.28)
    cyl_r = rng.uniform(0.10, 0.16)
    cyl_h = rng.uniform(0.30, 0.50)
    sph_r = rng.uniform(0.08, 0.14)
    cyl_center = np.array(
        [0.0, 0.35 * hy + rng.uniform(-0.03, 0.03), -0.3 * hz + rng.uniform(-0.02, 0.02)]
    )
    sph_center = np.array(
        [-0.5 * hx + rng.uniform(-0.03, 0.03), -0.4 * hy + rng.uniform(-0.03, 0.03), hz]
    )
    areas = [
        8.0 * (hx * hy + hy * hz + hx * hz),
        2.0 * np.pi * cyl_r * (cyl_h + cyl_r),
        4.0 * np.pi * sph_r**2,
    ]
    n_box, n_cyl, n_sph = _allocate(areas, n_points)
    box = _box_surface(rng, (hx, hy, hz), n_box)
    cyl = _cylinder_surface(rng, cyl_r, cyl_h, n_cyl)
    # stand the cylinder on the +x face: its +z axis becomes +x
    cyl = cyl[:, [2, 0, 1]] + np.array([hx, 0.0, 0.0]) + cyl_center
    sph = _sphere_surface(rng, sph_r, n_sph) + sph_center
    return np.concatenate([box, cyl, sph])


def _marked_cube_cloud(rng, n_points: int) -> np.ndarray:
    """A cube with a single off-center spherical mark on one face."""
    half = 0.5
    mark_r = 0.1
    mark_center = np.array(
        [
            0.25 + rng.uniform(-0.05, 0.05),
            half,
            0.15 + rng.uniform(-0.05, 0.05),
        ]
    )
    areas = [6.0 * (2 * half) ** 2, 4.0 * np.pi * mark_r**2]
    n_cube, n_mark = _allocate(areas, n_points)
    cube = _box_surface(rng, (half, half, half), n_cube)
    mark = _sphere_surface(rng, mark_r, n_mark) + mark_center
    return np.concatenate([cube, mark])


SHAPE_FAMILIES = {
    "composite": _composite_cloud,
    "marked_cube": _marked_cube_cloud,
}


def sample_shape_surface(shape_family: str, rng, n_points: int = 512) -> np.ndarray:
    """Sample a surface point cloud of one randomly proportioned shape."""
    if shape_family not in SHAPE_FAMILIES:
        raise ValueError(
            f"unknown shape family {shape_family!r}; choose from {sorted(SHAPE_FAMILIES)}"
        )
    if n_points < 16:
        raise ValueError(f"n_points must be >= 16, got {n_points}")
    return SHAPE_FAMILIES[shape_family](rng, n_points)


# ---------------------------------------------------------------------------
# Cutting and generation
# ---------------------------------------------------------------------------


def cut_cloud(
    points,
    n_pieces: int,
    rng,
    min_piece_points: int = 20,
    max_attempts: int = 200,
):
    """Partition a cloud into pieces with random half-space cuts.

    Repeatedly splits the largest current piece by a random plane through one
    of its points, rejecting planes that leave either side with fewer than
    ``min_piece_points`` points (each rejection re-cuts with a fresh plane).
    Returns (centered pieces, ground-truth poses, index partition); posing
    each piece by its ground truth reproduces the input cloud shifted so the
    per-piece centroids sum to zero.

    Raises DegenerateCut when no valid plane is found, or when the point
    budget cannot support the requested piece count at all.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (M, 3), got {pts.shape}")
    if n_pieces < 2:
        raise ValueError(f"n_pieces must be >= 2, got {n_pieces}")
    if min_piece_points < 2:
        raise ValueError(f"min_piece_points must be >= 2, got {min_piece_points}")
    if n_pieces * min_piece_points > len(pts):
        raise DegenerateCut(
            f"{len(pts)} points cannot make {n_pieces} pieces of >= {min_piece_points}"
        )
    parts = [np.arange(len(pts))]
    while len(parts) < n_pieces:
        parts.sort(key=len)
        target = parts.pop()
        for _ in range(max_attempts):
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            pivot = pts[target[rng.integers(len(target))]]
            side = (pts[target] - pivot) @ normal > 0.0
            n_pos = int(side.sum())
            if min(n_pos, len(target) - n_pos) >= min_piece_points:
                parts.extend([target[side], target[~side]])
                break
        else:
            raise DegenerateCut(
                f"no valid plane split a piece of {len(target)} points "
                f"after {max_attempts} attempts"
            )
    parts.sort(key=lambda idx: int(idx[0]))
    centroids = np.stack([pts[p].mean(axis=0) for p in parts])
    shift = centroids.mean(axis=0)
    pieces = [pts[p] - c for p, c in zip(parts, centroids)]
    poses = GroupElementN(
        rot=np.broadcast_to(np.eye(3), (n_pieces, 3, 3)).copy(),
        trans=centroids - shift,
    )
    return pieces, poses, parts


def _random_rotation_matrix(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_rot(q[None])[0]


def generate_synthetic(
    shape_family: str,
    n_pieces: int,
    count: int,
    rng,
    n_points: int = 512,
    min_piece_points: int = 20,
    randomize_frames: bool = True,
    split: str = "train",
) -> list[AssemblyRecord]:
    """Generate assembly records from randomly cut synthetic shapes.

    Each shape is produced from its own child generator spawned off ``rng``,
    so the records are independent of generation order and the work can be
    distributed.  ``randomize_frames`` stores every piece in a random body
    frame (folding the rotation into its ground-truth pose) instead of the
    assembled orientation.
    """
    if shape_family not in SHAPE_FAMILIES:
        raise ValueError(
            f"unknown shape family {shape_family!r}; choose from {sorted(SHAPE_FAMILIES)}"
        )
    if not 2 <= n_pieces <= 8:
        raise ValueError(f"n_pieces must be in [2, 8], got {n_pieces}")
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    records = []
    for k, child in enumerate(rng.spawn(count)):
        cloud = sample_shape_surface(shape_family, child, n_points)
        last_error = None
        for _ in range(10):
            try:
                pieces, poses, _ = cut_cloud(
                    cloud, n_pieces, child, min_piece_points
                )
                break
            except DegenerateCut as err:
                last_error = err
        else:
            raise DegenerateCut(
                f"shape {k}: {last_error}"
            ) from last_error
        rot = poses.rot.copy()
        if randomize_frames:
            for i in range(n_pieces):
                frame = _random_rotation_matrix(child)
                pieces[i] = pieces[i] @ frame.T
                rot[i] = frame.T
        records.append(
            AssemblyRecord(
                pieces=PieceSet(pieces=tuple(pieces)),
                poses=GroupElementN(rot=rot, trans=poses.trans),
                shape_id=f"{shape_family}_{n_pieces:02d}_{k:05d}",
                split=split,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------


def grid_downsample(points, cell: float) -> np.ndarray:
    """One centroid per occupied cubic grid cell of edge length ``cell``.

    The grid is anchored at the cloud's minimum corner, so the result does
    not depend on where the cloud sits in space.  A non-positive cell keeps
    the cloud unchanged; a cell larger than the bounding box collapses it to
    the single overall centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (M, 3), got {pts.shape}")
    if len(pts) == 0:
        raise ValueError("points must be nonempty")
    if cell <= 0.0:
        return pts.copy()
    keys = np.floor((pts - pts.min(axis=0)) / cell).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse.ravel(), pts)
    counts = np.bincount(inverse.ravel(), minlength=len(uniq))
    return sums / counts[:, None]


def fps(points, ratio: float) -> np.ndarray:
    """Indices of a farthest-point subset covering ``ratio`` of the cloud."""
    pts = np.asarray(points, dtype=np.float64)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    count = max(1, int(np.ceil(ratio * len(pts))))
    return farthest_point_indices(pts, count)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def pairwise_error(pred: GroupElementN, gt: GroupElementN) -> MetricResult:
    """Averaged pairwise pose error between predicted and true assemblies.

    For each ordered pair (i, j), the pose the prediction gives piece j is
    composed with the true relative pose from i to j, and the result is
    compared against the predicted pose of piece i: rotation error as the
    angle between the two rotations (degrees), translation error as the
    distance between the two translations.  Averaging over all ordered pairs
    makes the metric invariant to any global rigid motion of the prediction.
    """
    if pred.n != gt.n:
        raise LengthMismatch(f"pred has {pred.n} poses, gt has {gt.n}")
    n = pred.n
    if n < 2:
        raise ValueError(f"pairwise error needs >= 2 pieces, got {n}")
    r_sum = 0.0
    t_sum = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            rel_rot = gt.rot[j].T @ gt.rot[i]
            rel_trans = gt.rot[j].T @ (gt.trans[i] - gt.trans[j])
            comp_rot = pred.rot[j] @ rel_rot
            comp_trans = pred.rot[j] @ rel_trans + pred.trans[j]
            cos_angle = 0.5 * (np.trace(pred.rot[i] @ comp_rot.T) - 1.0)
            r_sum += np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0)))
            t_sum += float(np.linalg.norm(comp_trans - pred.trans[i]))
    pairs = n * (n - 1)
    return MetricResult(delta_r=min(r_sum / pairs, 180.0), delta_t=t_sum / pairs)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _format_floats(values) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64)]


def write_xyz(directory, record: AssemblyRecord) -> Path:
    """Write one ``piece_<i>.xyz`` per piece plus the JSON manifest.

    Coordinates are written with 17 significant digits, so reading them back
    reproduces the doubles bit for bit.  Returns the directory path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    quats = rot_to_quat(record.poses.rot)
    entries = []
    for i, piece in enumerate(record.pieces.pieces):
        name = f"piece_{i}.xyz"
        with open(d / name, "w") as fh:
            for x, y, z in piece:
                fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        entry = {
            "file": name,
            "count": int(len(piece)),
            "quat": _format_floats(quats[i]),
            "trans": _format_floats(record.poses.trans[i]),
        }
        if record.pieces.labels is not None:
            entry["label"] = record.pieces.labels[i]
        entries.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "shape_id": record.shape_id,
        "split": record.split,
        "units": "length",
        "n_pieces": record.n,
        "pieces": entries,
    }
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def _read_piece_file(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            tokens = stripped.split()
            if len(tokens) != 3:
                raise ParseError(
                    path, lineno, f"expected 3 coordinates, got {len(tokens)}"
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise ParseError(path, lineno, f"bad coordinate in {stripped!r}")
    if not rows:
        raise ParseError(path, 0, "file contains no points")
    return np.array(rows, dtype=np.float64)


def read_xyz(directory) -> AssemblyRecord:
    """Read a record directory written by :func:`write_xyz`."""
    d = Path(directory)
    manifest_path = d / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ParseError(manifest_path, 0, "manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise ParseError(manifest_path, err.lineno, f"invalid JSON: {err.msg}")
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise ParseError(manifest_path, 0, "not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(
            manifest_path, 0, f"unsupported manifest version {manifest.get('version')!r}"
        )
    entries = manifest.get("pieces")
    if not isinstance(entries, list) or not entries:
        raise ParseError(manifest_path, 0, "manifest lists no pieces")
    if manifest.get("n_pieces") != len(entries):
        raise LengthMismatch(
            f"manifest declares {manifest.get('n_pieces')} pieces "
            f"but lists {len(entries)}"
        )
    pieces = []
    quats = []
    trans = []
    labels = []
    for entry in entries:
        if not isinstance(entry, dict) or not {"file", "count", "quat", "trans"} <= set(entry):
            raise ParseError(
                manifest_path, 0, "piece entry missing file/count/quat/trans"
            )
        piece = _read_piece_file(d / entry["file"])
        if len(piece) != entry["count"]:
            raise ParseError(
                d / entry["file"],
                0,
                f"manifest declares {entry['count']} points, file has {len(piece)}",
            )
        quat = np.asarray(entry["quat"], dtype=np.float64)
        if quat.shape != (4,) or abs(np.linalg.norm(quat) - 1.0) > 1e-6:
            raise ParseError(manifest_path, 0, f"bad quaternion for {entry['file']}")
        shift = np.asarray(entry["trans"], dtype=np.float64)
        if shift.shape != (3,):
            raise ParseError(manifest_path, 0, f"bad translation for {entry['file']}")
        pieces.append(piece)
        quats.append(quat)
        trans.append(shift)
        labels.append(entry.get("label"))
    has_labels = all(s is not None for s in labels)
    return AssemblyRecord(
        pieces=PieceSet(
            pieces=tuple(pieces), labels=tuple(labels) if has_labels else None
        ),
        poses=GroupElementN(rot=quat_to_rot(np.stack(quats)), trans=np.stack(trans)),
        shape_id=manifest["shape_id"],
        split=manifest["split"],
    )


def as_training_pairs(records: Sequence[AssemblyRecord]) -> list[tuple]:
    """Convert records to the (pieces, poses) pairs the trainer consumes."""
    return [(record.pieces.pieces, record.poses) for record in records]


def write_dataset(root, records: Sequence[AssemblyRecord]) -> list[Path]:
    """Write records under ``<root>/<split>/<shape_id>/``; returns the dirs."""
    seen = set()
    for record in records:
        key = (record.split, record.shape_id)
        if key in seen:
            raise ValueError(f"duplicate record {record.split}/{record.shape_id}")
        seen.add(key)
    return [
        write_xyz(Path(root) / record.split / record.shape_id, record)
        for record in records
    ]


def read_dataset(root, split: str | None = None) -> list[AssemblyRecord]:
    """Read every record under ``root`` (optionally one split), sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    splits = [root / split] if split is not None else sorted(
        p for p in root.iterdir() if p.is_dir()
    )
    records = []
    for split_dir in splits:
        if not split_dir.is_dir():
            raise FileNotFoundError(f"split directory {split_dir} not found")
        for shape_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            records.append(read_xyz(shape_dir))
    return records
