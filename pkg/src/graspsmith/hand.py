"""Articulated multi-finger hand: kinematic tree, forward kinematics, and
per-link capsule collision geometry.

Conventions
-----------
* All lengths are meters, all angles radians.
* The kinematic tree is rooted at the palm (link 0). A link's frame is its
  parent frame translated by ``origin_offset`` and rotated by that link's
  joints (applied in joint-list order). Link specs carry no fixed rotation;
  any directionality lives in the capsule endpoints and joint axes.
* The palm pose comes from the grasp vector: XYZ Euler angles (extrinsic,
  ``R = Rz(c) @ Ry(b) @ Rx(a)``) plus a translation. With the default
  22-dof hand the full grasp vector has ``6 + 22 = 28`` dimensions.
* Palm frame of the default hand: +z points from wrist to fingertips,
  +y is the palmar normal (the side that faces a held object), +x runs
  across the palm from little finger to first finger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import InvalidPose

HAND_FORMAT_VERSION = 1

_GOLDEN = 0.6180339887498949  # golden ratio conjugate, for spiral sampling


def _as_readonly(a, shape=None):
    out = np.asarray(a, dtype=np.float64).copy()
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Capsule:
    """Collision capsule: segment from ``a`` to ``b`` swept by ``radius``,
    in the owning link's frame."""

    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", _as_readonly(self.a, (3,)))
        object.__setattr__(self, "b", _as_readonly(self.b, (3,)))
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")


@dataclass(frozen=True)
class LinkSpec:
    name: str
    parent: int  # -1 for the root
    origin_offset: np.ndarray  # translation from parent frame, meters
    capsule: Capsule

    def __post_init__(self):
        object.__setattr__(self, "origin_offset",
                           _as_readonly(self.origin_offset, (3,)))


@dataclass(frozen=True)
class JointSpec:
    child_link: int
    axis: np.ndarray  # unit rotation axis in the child link frame
    limits: tuple  # (lo, hi) radians

    def __post_init__(self):
        axis = _as_readonly(self.axis, (3,))
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("joint axis must be unit length")
        object.__setattr__(self, "axis", axis)
        lo, hi = float(self.limits[0]), float(self.limits[1])
        if lo > hi:
            raise ValueError("joint limits must satisfy lo <= hi")
        object.__setattr__(self, "limits", (lo, hi))


@dataclass(frozen=True)
class HandModel:
    """Immutable hand description: links, joints, and the canonical link
    order used when serializing contact sets."""

    links: tuple
    joints: tuple
    canonical_link_order: tuple

    def __post_init__(self):
        names = [l.name for l in self.links]
        if len(set(names)) != len(names):
            raise ValueError("link names must be unique")
        if self.links[0].parent != -1:
            raise ValueError("link 0 must be the root (parent -1)")
        for i, link in enumerate(self.links):
            if i == 0:
                continue
            if not 0 <= link.parent < i:
                raise ValueError(
                    f"link {link.name}: parent index must precede the link")
        for joint in self.joints:
            if not 0 < joint.child_link < len(self.links):
                raise ValueError("joint child_link out of range")
        if sorted(self.canonical_link_order) != sorted(names):
            raise ValueError("canonical_link_order must permute link names")
        joints_of = tuple(
            tuple(j for j, joint in enumerate(self.joints)
                  if joint.child_link == i) for i in range(len(self.links)))
        object.__setattr__(self, "_joints_of", joints_of)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def grasp_dim(self) -> int:
        """Dimension of the full grasp vector (palm pose + joint angles)."""
        return 6 + self.dof

    @property
    def link_names(self):
        return [l.name for l in self.links]

    def link_index(self, name: str) -> int:
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise KeyError(name)

    def joint_limits(self) -> np.ndarray:
        """(dof, 2) array of [lo, hi] per joint, in joint-list order."""
        return np.array([j.limits for j in self.joints], dtype=np.float64)


@dataclass(frozen=True)
class GraspPose:
    """Grasp vector split into palm translation, palm XYZ Euler rotation,
    and joint angles (joint-list order)."""

    translation: np.ndarray
    rotation: np.ndarray
    joint_angles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           _as_readonly(self.translation, (3,)))
        object.__setattr__(self, "rotation", _as_readonly(self.rotation, (3,)))
        object.__setattr__(self, "joint_angles",
                           _as_readonly(self.joint_angles))

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.translation, self.rotation, self.joint_angles])

    @staticmethod
    def from_vector(v) -> "GraspPose":
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size < 7:
            raise InvalidPose(f"grasp vector must be 1-D with >= 7 entries, "
                              f"got shape {v.shape}")
        return GraspPose(v[:3], v[3:6], v[6:])

    @property
    def dim(self) -> int:
        return 6 + self.joint_angles.size


@dataclass(frozen=True)
class LinkPoseSet:
    """World-frame rigid transform per link: rotations (L,3,3) and
    translations (L,3), indexed like ``HandModel.links``."""

    rotations: np.ndarray
    translations: np.ndarray
    link_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "rotations", _as_readonly(self.rotations))
        object.__setattr__(self, "translations",
                           _as_readonly(self.translations))

    def transform_of(self, name: str):
        i = list(self.link_names).index(name)
        return self.rotations[i], self.translations[i]


def euler_xyz_to_matrix(angles) -> np.ndarray:
    """Rotation matrix for extrinsic XYZ Euler angles (a, b, c):
    ``R = Rz(c) @ Ry(b) @ Rx(a)``."""
    a, b, c = (float(x) for x in angles)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


_EYE3 = np.eye(3)
_EYE3.setflags(write=False)


def axis_angle_to_matrix(axis, theta: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=np.float64)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]],
                   [-k[1], k[0], 0.0]])
    return _EYE3 + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def clamp_joint_angles(model: HandModel, angles) -> np.ndarray:
    """Clip joint angles to the model's limits. Idempotent."""
    limits = model.joint_limits()
    return np.clip(np.asarray(angles, dtype=np.float64),
                   limits[:, 0], limits[:, 1])


def forward_kinematics(model: HandModel, pose: GraspPose,
                       strict: bool = False) -> LinkPoseSet:
    """World transforms for every link of ``model`` under ``pose``.

    Joint angles outside their limits are clamped; with ``strict=True``
    they raise :class:`InvalidPose` instead. The palm (root) transform is
    exactly ``(euler_xyz_to_matrix(pose.rotation), pose.translation)``.
    """
    if pose.dim != model.grasp_dim:
        raise InvalidPose(
            f"pose dimension {pose.dim} does not match model "
            f"dimension {model.grasp_dim}")
    vec = pose.as_vector()
    if not np.all(np.isfinite(vec)):
        raise InvalidPose("pose contains non-finite values")

    angles = np.asarray(pose.joint_angles, dtype=np.float64)
    limits = model.joint_limits()
    if strict:
        lo_bad = angles < limits[:, 0] - 1e-12
        hi_bad = angles > limits[:, 1] + 1e-12
        if np.any(lo_bad | hi_bad):
            bad = int(np.flatnonzero(lo_bad | hi_bad)[0])
            raise InvalidPose(f"joint {bad} angle {angles[bad]:.6f} outside "
                              f"limits {model.joints[bad].limits}")
    angles = np.clip(angles, limits[:, 0], limits[:, 1])

    joints_of = model._joints_of  # joints grouped by child link
    n = len(model.links)
    rot = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    rot[0] = euler_xyz_to_matrix(pose.rotation)
    trans[0] = pose.translation
    for i in range(1, n):
        link = model.links[i]
        r_local = None
        for j_idx in joints_of[i]:
            joint = model.joints[j_idx]
            r_j = axis_angle_to_matrix(joint.axis, angles[j_idx])
            r_local = r_j if r_local is None else r_local @ r_j
        if r_local is None:
            rot[i] = rot[link.parent]
        else:
            rot[i] = rot[link.parent] @ r_local
        trans[i] = rot[link.parent] @ link.origin_offset + trans[link.parent]
    return LinkPoseSet(rot, trans, tuple(model.link_names))


def _perpendicular_frame(w: np.ndarray):
    """Deterministic orthonormal (u, v) perpendicular to unit vector w."""
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(w)))] = 1.0
    u = np.cross(w, ref)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    return u, v


def sample_capsule_surface(capsule: Capsule, n: int) -> np.ndarray:
    """Deterministic quasi-uniform samples on a capsule surface (link frame).

    Sample count is split between the cylindrical side and the two
    spherical caps proportionally to surface area; golden-angle spirals
    keep the layout quasi-uniform. Every returned point lies at distance
    exactly ``radius`` from the core segment.
    """
    if n < 1:
        raise ValueError("samples_per_link must be >= 1")
    a, b, r = capsule.a, capsule.b, capsule.radius
    seg = b - a
    length = float(np.linalg.norm(seg))
    if length < 1e-12:
        # degenerate capsule: a sphere
        i = np.arange(n)
        h = 1.0 - 2.0 * (i + 0.5) / n
        phi = 2.0 * np.pi * np.mod(i * _GOLDEN, 1.0)
        s = np.sqrt(1.0 - h * h)
        dirs = np.stack([s * np.cos(phi), s * np.sin(phi), h], axis=1)
        return a + r * dirs

    w = seg / length
    u, v = _perpendicular_frame(w)
    area_side = 2.0 * np.pi * r * length
    area_caps = 4.0 * np.pi * r * r
    n_side = int(round(n * area_side / (area_side + area_caps)))
    n_side = min(max(n_side, 0), n)
    n_caps = n - n_side
    n_cap_b = n_caps // 2
    n_cap_a = n_caps - n_cap_b

    pts = []
    if n_side:
        i = np.arange(n_side)
        z = (i + 0.5) / n_side * length
        phi = 2.0 * np.pi * np.mod(i * _GOLDEN, 1.0)
        ring = r * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v)
        pts.append(a + z[:, None] * w + ring)
    for endpoint, sign, m in ((a, -1.0, n_cap_a), (b, 1.0, n_cap_b)):
        if not m:
            continue
        i = np.arange(m)
        h = (i + 0.5) / m  # height above the cap equator, in (0, 1)
        phi = 2.0 * np.pi * np.mod(i * _GOLDEN, 1.0)
        s = np.sqrt(1.0 - h * h)
        dirs = (s * np.cos(phi))[:, None] * u + (s * np.sin(phi))[:, None] * v
        dirs = dirs + (sign * h)[:, None] * w
        pts.append(endpoint + r * dirs)
    return np.concatenate(pts, axis=0)


def link_surface_points(model: HandModel, poses: LinkPoseSet,
                        samples_per_link: int) -> np.ndarray:
    """World-frame surface samples of every link capsule.

    Returns an ``(n_links * samples_per_link, 3)`` array; sampling is
    deterministic, so identical inputs give bitwise-identical outputs.
    """
    out = np.empty((len(model.links) * samples_per_link, 3))
    for i, link in enumerate(model.links):
        local = sample_capsule_surface(link.capsule, samples_per_link)
        world = local @ poses.rotations[i].T + poses.translations[i]
        out[i * samples_per_link:(i + 1) * samples_per_link] = world
    return out


# ---------------------------------------------------------------------------
# default hand


_FINGERS = ("ff", "mf", "rf", "lf")
_FINGER_X = {"ff": 0.033, "mf": 0.011, "rf": -0.011, "lf": -0.033}
_SEGMENTS = (("proximal", 0.045, 0.0100), ("middle", 0.025, 0.0090),
             ("distal", 0.020, 0.0085))
_FLEX_AXIS = (-1.0, 0.0, 0.0)  # positive flexion curls toward +y (palmar)
_PALM_TOP = 0.095

_THUMB_DIR = np.array([0.35, 0.60, 0.50])
_THUMB_DIR = _THUMB_DIR / np.linalg.norm(_THUMB_DIR)
_THUMB_SEGMENTS = (("proximal", 0.040, 0.0110), ("middle", 0.034, 0.0100),
                   ("distal", 0.028, 0.0090))


def _thumb_flex_axis() -> np.ndarray:
    # perpendicular to the thumb direction; positive flexion curls the tip
    # across the palm toward the opposing fingers (-x side)
    axis = np.cross(_THUMB_DIR, np.array([-1.0, 0.0, 0.0]))
    return axis / np.linalg.norm(axis)


def default_hand() -> HandModel:
    """The built-in five-finger, 22-dof hand (grasp vector dimension 28).

    Links: palm, wrist, four fingers with {knuckle, proximal, middle,
    distal} segments, and a thumb with {thbase, thproximal, thmiddle,
    thdistal}. Joints: two wrist joints, a knuckle abduction plus three
    flexion joints per finger, and four thumb joints.
    """
    links = [
        LinkSpec("palm", -1, (0, 0, 0),
                 Capsule((0, 0, 0.010), (0, 0, _PALM_TOP), 0.030)),
        LinkSpec("wrist", 0, (0, 0, -0.010),
                 Capsule((0, 0, 0), (0, 0, -0.040), 0.025)),
    ]
    joints = [
        JointSpec(1, (1, 0, 0), (-0.489, 0.140)),
        JointSpec(1, (0, 1, 0), (-0.489, 0.489)),
    ]

    for f in _FINGERS:
        knuckle_idx = len(links)
        links.append(
            LinkSpec(f + "knuckle", 0, (_FINGER_X[f], 0.0, _PALM_TOP),
                     Capsule((0, 0, 0), (0, 0, 0.012), 0.0110)))
        joints.append(JointSpec(knuckle_idx, (0, 1, 0), (-0.349, 0.349)))
        parent = knuckle_idx
        offset_z = 0.012
        for seg_name, seg_len, seg_r in _SEGMENTS:
            idx = len(links)
            links.append(
                LinkSpec(f + seg_name, parent, (0, 0, offset_z),
                         Capsule((0, 0, 0), (0, 0, seg_len), seg_r)))
            joints.append(JointSpec(idx, _FLEX_AXIS, (0.0, 1.571)))
            parent = idx
            offset_z = seg_len

    # thumb: base swivels about the palm normal plane, segments run along
    # _THUMB_DIR and flex about an axis perpendicular to it
    th_axis = _thumb_flex_axis()
    thbase_idx = len(links)
    links.append(
        LinkSpec("thbase", 0, (0.042, 0.010, 0.025),
                 Capsule((0, 0, 0), 0.012 * _THUMB_DIR, 0.0120)))
    joints.append(JointSpec(thbase_idx, (0, 0, 1), (-1.047, 1.047)))
    parent = thbase_idx
    offset = 0.012 * _THUMB_DIR
    for seg_name, seg_len, seg_r in _THUMB_SEGMENTS:
        idx = len(links)
        links.append(
            LinkSpec("th" + seg_name, parent, offset,
                     Capsule((0, 0, 0), seg_len * _THUMB_DIR, seg_r)))
        joints.append(JointSpec(idx, th_axis, (0.0, 1.222)))
        parent = idx
        offset = seg_len * _THUMB_DIR

    names = tuple(l.name for l in links)
    return HandModel(tuple(links), tuple(joints), names)


# ---------------------------------------------------------------------------
# hand description file (YAML, versioned)


def save_hand(model: HandModel, path: str) -> None:
    """Write a hand description file (``hand_format_version: 1``)."""
    doc = {
        "hand_format_version": HAND_FORMAT_VERSION,
        "links": [{
            "name": l.name,
            "parent": None if l.parent < 0 else model.links[l.parent].name,
            "offset": [float(x) for x in l.origin_offset],
            "capsule": {
                "a": [float(x) for x in l.capsule.a],
                "b": [float(x) for x in l.capsule.b],
                "radius": float(l.capsule.radius),
            },
        } for l in model.links],
        "joints": [{
            "child": model.links[j.child_link].name,
            "axis": [float(x) for x in j.axis],
            "limits": [float(j.limits[0]), float(j.limits[1])],
        } for j in model.joints],
        "canonical_link_order": list(model.canonical_link_order),
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_hand(path: str) -> HandModel:
    """Load a hand description file written by :func:`save_hand` (or by
    hand, e.g. converted from a real robot description)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    version = doc.get("hand_format_version")
    if version != HAND_FORMAT_VERSION:
        raise ValueError(f"unsupported hand_format_version: {version!r}")
    name_to_idx = {spec["name"]: i for i, spec in enumerate(doc["links"])}
    links = []
    for spec in doc["links"]:
        parent = spec["parent"]
        if parent is None or parent == -1:
            p_idx = -1
        elif isinstance(parent, int):
            p_idx = parent
        else:
            p_idx = name_to_idx[parent]
        cap = spec["capsule"]
        links.append(
            LinkSpec(spec["name"], p_idx, spec["offset"],
                     Capsule(cap["a"], cap["b"], float(cap["radius"]))))
    joints = []
    for spec in doc["joints"]:
        child = spec["child"]
        c_idx = child if isinstance(child, int) else name_to_idx[child]
        joints.append(JointSpec(c_idx, spec["axis"], tuple(spec["limits"])))
    order = tuple(doc.get("canonical_link_order",
                          [l.name for l in links]))
    return HandModel(tuple(links), tuple(joints), order)
