"""Point clouds, proximity queries, and the geometric contact/penetration
machinery used for both dataset annotation and evaluation.

Contacts are found by a pure geometric proximity test against the hand's
link capsules: a link is in contact when the smallest point-to-capsule
signed distance over the object cloud is at or below a threshold
(1 mm by default). This replaces a physics engine's contact buffer with a
deterministic, dependency-free equivalent that produces the same kind of
(link, surface position) records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput
from .hand import GraspPose, HandModel, LinkPoseSet, forward_kinematics

DEFAULT_CONTACT_THRESHOLD = 0.001  # meters
DEFAULT_CONTACT_MAP_TAU = 0.005  # meters


@dataclass(frozen=True)
class PointCloud:
    """N x 3 points in meters, with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).copy()
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (N, 3) with N >= 1, "
                             f"got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).copy()
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points shape")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must be unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class ContactRecord:
    """One hand link touching the object: the contacted link, the contact
    position (an element of the object cloud), and the signed
    point-to-capsule distance (negative means penetrating)."""

    link: str
    position: np.ndarray
    signed_distance: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).copy()
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class ContactSet:
    """Contact records sorted by the hand's canonical link order, at most
    one record per link."""

    records: tuple

    def __post_init__(self):
        links = [r.link for r in self.records]
        if len(set(links)) != len(links):
            raise ValueError("at most one contact record per link")

    @staticmethod
    def from_records(records, model: HandModel) -> "ContactSet":
        order = {name: i for i, name in enumerate(model.canonical_link_order)}
        for r in records:
            if r.link not in order:
                raise ValueError(f"unknown link {r.link!r}")
        return ContactSet(tuple(sorted(records, key=lambda r: order[r.link])))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def links(self):
        return [r.link for r in self.records]

    def link_set(self) -> set:
        return {r.link for r in self.records}


# ---------------------------------------------------------------------------
# nearest neighbors and chamfer distance


def nearest_neighbor_index(cloud: PointCloud) -> cKDTree:
    """Exact nearest-neighbor index over the cloud (immutable after build,
    safe for concurrent read-only queries)."""
    return cKDTree(cloud.points)


def chamfer_distance(a, b) -> float:
    """Symmetric-sum Chamfer distance between two point sets (meters).

    ``mean_a min_b ||a-b|| + mean_b min_a ||a-b||`` — the symmetric sum of
    means, not halved and not squared. Multiply by 1000 for the mm values
    used in reports.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptyInput("chamfer_distance requires two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(d_ab.mean() + d_ba.mean())


# ---------------------------------------------------------------------------
# point-to-capsule distances


def point_segment_distance(points: np.ndarray, a: np.ndarray,
                           b: np.ndarray) -> np.ndarray:
    """Distance from each point to the segment [a, b]."""
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-24:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def capsule_signed_distances(model: HandModel, poses: LinkPoseSet,
                             points: np.ndarray) -> np.ndarray:
    """Signed distance from every point to every link capsule.

    Returns an ``(n_points, n_links)`` array: distance to the capsule core
    segment minus the capsule radius (negative inside the capsule).
    """
    points = np.atleast_2d(points)
    out = np.empty((points.shape[0], len(model.links)))
    for i, link in enumerate(model.links):
        r, t = poses.rotations[i], poses.translations[i]
        a = r @ link.capsule.a + t
        b = r @ link.capsule.b + t
        out[:, i] = point_segment_distance(points, a, b) - link.capsule.radius
    return out


def extract_contacts(model: HandModel, pose: GraspPose, obj: PointCloud,
                     threshold: float = DEFAULT_CONTACT_THRESHOLD,
                     ) -> ContactSet:
    """Contact set of a grasp against an object cloud.

    For each link, the object point with the smallest signed distance to
    that link's capsule becomes a contact record iff the distance is at or
    below ``threshold``. One record per link at most; records are sorted
    by the model's canonical link order. An empty result is a valid
    non-grasp.
    """
    if not threshold > 0:
        raise ValueError("contact threshold must be positive")
    poses = forward_kinematics(model, pose)
    sd = capsule_signed_distances(model, poses, obj.points)
    records = []
    for i, link in enumerate(model.links):
        j = int(np.argmin(sd[:, i]))
        if sd[j, i] <= threshold:
            records.append(
                ContactRecord(link.name, obj.points[j], float(sd[j, i])))
    return ContactSet.from_records(records, model)


def penetration_depth(model: HandModel, pose: GraspPose,
                      obj: PointCloud) -> float:
    """Maximum depth any object point sits inside the hand's capsules
    (meters, 0 when nothing penetrates)."""
    poses = forward_kinematics(model, pose)
    sd = capsule_signed_distances(model, poses, obj.points)
    nearest = sd.min(axis=1)
    return float(max(0.0, -nearest.min()))


# ---------------------------------------------------------------------------
# contact maps


def contact_map(obj: PointCloud, hand_points: np.ndarray,
                tau: float = DEFAULT_CONTACT_MAP_TAU) -> np.ndarray:
    """Per-object-point proximity field ``exp(-d / tau)`` where ``d`` is
    the distance to the nearest hand surface point. Values lie in (0, 1];
    1 means a hand point coincides with the object point."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    hand_points = np.asarray(hand_points, dtype=np.float64)
    if hand_points.size == 0:
        raise EmptyInput("contact_map requires hand surface points")
    d, _ = cKDTree(hand_points).query(obj.points)
    return np.exp(-d / tau)


def contact_map_difference(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Root-mean-square difference between two contact maps over the same
    object cloud (the Con. metric)."""
    map_a = np.asarray(map_a, dtype=np.float64)
    map_b = np.asarray(map_b, dtype=np.float64)
    if map_a.shape != map_b.shape:
        raise ValueError("contact maps must share the same object cloud")
    return float(np.sqrt(np.mean((map_a - map_b) ** 2)))


# ---------------------------------------------------------------------------
# xyz file I/O


def save_xyz(cloud: PointCloud, path: str) -> None:
    """Write a plain-text cloud: one ``x y z`` triple per line, meters;
    six columns ``x y z nx ny nz`` when normals are present."""
    with open(path, "w") as fh:
        if cloud.normals is None:
            for p in cloud.points:
                fh.write("%.17g %.17g %.17g\n" % tuple(p))
        else:
            for p, n in zip(cloud.points, cloud.normals):
                fh.write("%.17g %.17g %.17g %.17g %.17g %.17g\n"
                         % (tuple(p) + tuple(n)))


def load_xyz(path: str) -> PointCloud:
    """Load a plain-text cloud (3 or 6 columns). Rejects non-finite values
    and malformed rows."""
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 6):
                raise ValueError(f"{path}:{line_no}: expected 3 or 6 columns,"
                                 f" got {len(parts)}")
            rows.append([float(x) for x in parts])
    if not rows:
        raise EmptyInput(f"{path}: no points")
    data = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    if data.shape[1] == 6:
        return PointCloud(data[:, :3], data[:, 3:])
    return PointCloud(data)
