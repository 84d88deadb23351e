"""Point-cloud ingestion, poses, voxel downsampling, k-NN search and ICP.

Scans are stored as flat float64 arrays (one row per point) rather than
per-point objects; everything here is a pure function of its inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class MalformedFileError(ValueError):
    """Raised when a scan or pose file cannot be parsed as a whole."""


class AlignmentError(RuntimeError):
    """Raised when ICP cannot establish enough correspondences."""


@dataclass(frozen=True)
class Scan:
    """A single LiDAR scan: point coordinates plus per-point reflectivity.

    xyz          : (n, 3) float64, meters
    reflectivity : (n,) float64, non-negative, sensor units
    timestamp    : seconds
    id           : opaque identifier (file stem, sequence index, ...)
    """

    xyz: np.ndarray
    reflectivity: np.ndarray
    timestamp: float = 0.0
    id: str = ""

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        refl = np.asarray(self.reflectivity, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {xyz.shape}")
        if refl.shape != (xyz.shape[0],):
            raise ValueError("reflectivity must be (n,) matching xyz")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("scan contains non-finite coordinates")
        if not np.all(np.isfinite(refl)) or np.any(refl < 0):
            raise ValueError("reflectivity must be finite and non-negative")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "reflectivity", refl)

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass(frozen=True)
class Pose:
    """Sensor pose: unit quaternion (x, y, z, w) plus translation, world frame."""

    quaternion: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("quaternion is not unit-norm")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> "RigidTransform":
        """Rotation/translation of this pose as a rigid transform."""
        return RigidTransform(quaternion_to_matrix(self.quaternion), self.translation)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p -> R p + t with R a proper rotation matrix."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (x, y, z, w)."""
    x, y, z, w = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def yaw_rotation(angle: float) -> RigidTransform:
    """Rotation about +z by `angle` radians, zero translation."""
    c, s = np.cos(angle), np.sin(angle)
    return RigidTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))


def relative_transform(pose_src: Pose, pose_dst: Pose) -> RigidTransform:
    """Transform mapping points from `pose_src`'s frame into `pose_dst`'s frame."""
    return pose_dst.matrix().inverse().compose(pose_src.matrix())


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------

def load_scan(path, format: str = "xyzr-bin", timestamp: float = 0.0, id: str = "") -> Scan:
    """Load a scan from disk.

    xyzr-bin : headerless little-endian float32 quadruples (x, y, z, reflectivity)
    csv      : header row ``x,y,z,reflectivity``, one point per line

    The whole file is rejected on any truncated record or non-finite value.
    """
    if format == "xyzr-bin":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % 16 != 0:
            raise MalformedFileError(f"{path}: byte length {len(raw)} is not a positive multiple of 16")
        rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    elif format == "csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["x", "y", "z", "reflectivity"]:
                raise MalformedFileError(f"{path}: expected header 'x,y,z,reflectivity'")
            rows = []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise MalformedFileError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise MalformedFileError(f"{path}:{line_no}: {exc}") from exc
        if not rows:
            raise MalformedFileError(f"{path}: no points")
        rec = np.asarray(rows, dtype=np.float64)
    else:
        raise ValueError(f"unknown scan format {format!r}")

    if not np.all(np.isfinite(rec)):
        raise MalformedFileError(f"{path}: non-finite value in scan")
    if np.any(rec[:, 3] < 0):
        raise MalformedFileError(f"{path}: negative reflectivity")
    if not id:
        id = str(path)
    return Scan(rec[:, :3], rec[:, 3], timestamp=timestamp, id=id)


def save_scan(path, scan: Scan, format: str = "xyzr-bin") -> None:
    """Inverse of :func:`load_scan`; reflectivity written verbatim."""
    if format == "xyzr-bin":
        rec = np.hstack([scan.xyz, scan.reflectivity[:, None]]).astype("<f4")
        with open(path, "wb") as fh:
            fh.write(rec.tobytes())
    elif format == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("x,y,z,reflectivity\n")
            for (x, y, z), r in zip(scan.xyz, scan.reflectivity):
                fh.write(f"{float(x)!r},{float(y)!r},{float(z)!r},{float(r)!r}\n")
    else:
        raise ValueError(f"unknown scan format {format!r}")


def load_poses(path) -> list[Pose]:
    """Parse a trajectory file: one ``timestamp tx ty tz qx qy qz qw`` per line.

    Blank lines and lines starting with ``#`` are ignored.
    """
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MalformedFileError(f"{path}:{line_no}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise MalformedFileError(f"{path}:{line_no}: {exc}") from exc
            q = np.array(vals[4:8])
            n = np.linalg.norm(q)
            if n == 0 or not np.all(np.isfinite(vals)):
                raise MalformedFileError(f"{path}:{line_no}: bad quaternion")
            poses.append(Pose(q / n, np.array(vals[1:4]), timestamp=vals[0]))
    return poses


def save_poses(path, poses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for p in poses:
            vals = [p.timestamp, *p.translation, *p.quaternion]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# Geometry operations
# ---------------------------------------------------------------------------

def voxel_downsample(scan: Scan, cell: float) -> Scan:
    """Collapse every occupied voxel to the centroid of its member points.

    Reflectivity is averaged alongside coordinates.  Output points are ordered
    by ascending voxel key, which makes the operation idempotent: centroids
    stay inside their own voxel, so a second pass is a no-op.
    """
    if cell <= 0:
        raise ValueError("voxel cell size must be positive")
    keys = np.floor(scan.xyz / cell).astype(np.int64)
    # Lexicographic voxel key -> single sortable scalar is unsafe for huge
    # coordinates, so sort on the structured triple directly.
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    boundaries = np.ones(len(keys_sorted), dtype=bool)
    boundaries[1:] = np.any(keys_sorted[1:] != keys_sorted[:-1], axis=1)
    group_ids = np.cumsum(boundaries) - 1
    n_groups = group_ids[-1] + 1 if len(group_ids) else 0
    xyz_sorted = scan.xyz[order]
    refl_sorted = scan.reflectivity[order]
    counts = np.bincount(group_ids, minlength=n_groups).astype(np.float64)
    cx = np.bincount(group_ids, weights=xyz_sorted[:, 0], minlength=n_groups)
    cy = np.bincount(group_ids, weights=xyz_sorted[:, 1], minlength=n_groups)
    cz = np.bincount(group_ids, weights=xyz_sorted[:, 2], minlength=n_groups)
    cr = np.bincount(group_ids, weights=refl_sorted, minlength=n_groups)
    xyz = np.stack([cx, cy, cz], axis=1) / counts[:, None]
    refl = cr / counts
    return Scan(xyz, refl, timestamp=scan.timestamp, id=scan.id)


def knn(scan: Scan, query, k: int) -> np.ndarray:
    """Indices of the k points nearest to `query`, nearest first.

    Exact search; ties broken toward the lower point index.  When the scan
    holds fewer than k points all indices are returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(scan) == 0:
        raise ValueError("knn on empty scan")
    query = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((scan.xyz - query) ** 2, axis=1)
    k_eff = min(k, len(scan))
    # stable sort keeps lower indices first among exact-distance ties
    return np.argsort(d2, kind="stable")[:k_eff]


def knn_batch(scan: Scan, queries: np.ndarray, k: int) -> np.ndarray:
    """k nearest scan-point indices for each query row, via a KD-tree.

    Same exact-distance semantics as :func:`knn` except that ties may be
    ordered arbitrarily; intended for bulk per-point neighborhood queries.
    """
    k_eff = min(k, len(scan))
    tree = cKDTree(scan.xyz)
    _, idx = tree.query(np.asarray(queries, dtype=np.float64), k=k_eff, workers=-1)
    if k_eff == 1:
        idx = idx[:, None]
    return idx


def icp_align(
    source: Scan,
    target: Scan,
    init: RigidTransform | None = None,
    max_iter: int = 50,
    tol: float = 1e-4,
) -> RigidTransform:
    """Point-to-point ICP returning the transform mapping `source` onto `target`.

    Each iteration matches every source point to its nearest target point,
    drops pairs farther than 3x the current mean correspondence distance, and
    solves the least-squares rigid motion in closed form (SVD).  Terminates
    when the mean correspondence distance improves by less than `tol` meters.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("icp_align requires non-empty scans")
    if init is None:
        init = RigidTransform.identity()
    tree = cKDTree(target.xyz)
    T = init
    prev_mean = np.inf
    for _ in range(max_iter):
        moved = T.apply(source.xyz)
        dist, idx = tree.query(moved, workers=-1)
        mean_d = float(dist.mean())
        keep = dist <= 3.0 * mean_d if mean_d > 0 else np.ones(len(dist), dtype=bool)
        if keep.sum() < 3:
            raise AlignmentError(f"only {int(keep.sum())} correspondences survive rejection")
        src = moved[keep]
        dst = target.xyz[idx[keep]]
        delta = _kabsch(src, dst)
        T = delta.compose(T)
        if prev_mean - mean_d < tol:
            break
        prev_mean = mean_d
    return T


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid motion taking paired rows of src onto dst."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    H = (src - c_src).T @ (dst - c_dst)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    # re-orthonormalize to keep RigidTransform invariants tight
    Uq, _, Vtq = np.linalg.svd(R)
    R = Uq @ Vtq
    t = c_dst - R @ c_src
    return RigidTransform(R, t)


def mean_nn_distance(source: Scan, target: Scan, transform: RigidTransform) -> float:
    """Mean nearest-neighbor distance from transformed source to target."""
    tree = cKDTree(target.xyz)
    dist, _ = tree.query(transform.apply(source.xyz), workers=-1)
    return float(dist.mean())
