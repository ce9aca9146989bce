"""Procedural desk-scale dataset: parametric objects with exact normals,
an analytic close-until-contact grasp oracle, templated instructions, and
split-aware dataset files.

The oracle is deliberately simple: drop the palm at a random orientation
with the object centered in front of it, then bisect each active finger's
flexion closure until the distal capsule first touches the surface. It
only needs to produce *consistent* contact/pose pairs, not optimal
grasps; stability is enforced loosely by requiring at least two contacts
and bounded penetration.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import OracleFailure
from .geometry import (ContactRecord, ContactSet, PointCloud,
                       capsule_signed_distances, extract_contacts,
                       load_xyz, penetration_depth, save_xyz,
                       DEFAULT_CONTACT_THRESHOLD)
from .hand import (GraspPose, HandModel, default_hand, euler_xyz_to_matrix,
                   forward_kinematics)

SHAPES = ("box", "cylinder", "sphere", "capsule")

GRASP_FAMILIES = ("power_wrap", "tripod", "tip_pinch", "quadpod")
SEEN_FAMILIES = ("power_wrap", "tripod", "tip_pinch")
UNSEEN_FAMILIES = ("quadpod",)

_FAMILY_FINGERS = {
    "power_wrap": ("th", "ff", "mf", "rf", "lf"),
    "tripod": ("th", "ff", "mf"),
    "tip_pinch": ("th", "ff"),
    "quadpod": ("th", "ff", "mf", "rf"),
}
_FAMILY_ABDUCTION = {
    "power_wrap": {"ff": 0.17, "mf": 0.06, "rf": -0.06, "lf": -0.17,
                   "th": 0.20},
    "tripod": {"ff": 0.10, "mf": -0.10, "th": 0.35},
    "tip_pinch": {"ff": 0.00, "th": 0.45},
    "quadpod": {"ff": 0.15, "mf": 0.00, "rf": -0.15, "th": 0.30},
}
_FLEX_FRACTIONS = (0.95, 0.75, 0.60)  # proximal, middle, distal
_THUMB_FRACTIONS = (1.00, 0.85, 0.70)

_NUMBER_WORDS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five"}
_FAMILY_WORDS = {
    "power_wrap": "power wrap",
    "tripod": "tripod",
    "tip_pinch": "tip pinch",
    "quadpod": "quadpod",
}

_TEMPLATES = (
    "grasp the {shape} with {count} {finger} using a {family} grip .",
    "hold the {shape} securely in a {family} grasp with {count} {finger} .",
    "use {count} {finger} in a {family} grip to pick up the {shape} .",
    "pick up the {shape} by applying a {family} grasp with {count} "
    "{finger} .",
)

# size pools (meters); seen and unseen draw from disjoint scale ranges
SEEN_SCALE_RANGE = (0.030, 0.055)
UNSEEN_SCALE_RANGE = (0.060, 0.085)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    dims: tuple  # semantic per shape, see generate_object
    n_points: int = 1024

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.n_points < 512:
            raise ValueError("n_points must be >= 512")
        for d in self.dims:
            if not 0.02 <= d <= 0.3:
                raise ValueError(f"dimension {d} outside [0.02, 0.3] m")


def spec_from_scale(shape: str, scale: float,
                    n_points: int = 1024) -> ObjectSpec:
    """Map a single scale parameter to per-shape dimensions."""
    if shape == "sphere":
        dims = (scale,)
    elif shape == "box":
        dims = (1.4 * scale, 1.0 * scale, 1.8 * scale)
    elif shape == "cylinder":
        dims = (0.7 * scale, 2.4 * scale)  # radius, height
    elif shape == "capsule":
        dims = (0.7 * scale, 2.0 * scale)  # radius, core length
    else:
        raise ValueError(shape)
    return ObjectSpec(shape, dims, n_points)


def generate_object(spec: ObjectSpec, seed) -> PointCloud:
    """Uniform surface samples with exact analytic outward normals,
    deterministic per seed. Objects are centered on the origin."""
    rng = np.random.default_rng(seed)
    n = spec.n_points
    if spec.shape == "sphere":
        (r,) = spec.dims
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return PointCloud(r * d, d)
    if spec.shape == "box":
        lx, ly, lz = spec.dims
        half = np.array([lx, ly, lz]) / 2.0
        areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz,
                          lx * ly, lx * ly])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        others = np.array([[1, 2], [0, 2], [0, 1]])
        for i in range(n):
            ax = axis[i]
            pts[i, ax] = sign[i] * half[ax]
            pts[i, others[ax]] = uv[i] * half[others[ax]]
            nrm[i, ax] = sign[i]
        return PointCloud(pts, nrm)
    if spec.shape == "cylinder":
        r, h = spec.dims
        area_side = 2.0 * np.pi * r * h
        area_caps = 2.0 * np.pi * r * r
        on_side = rng.random(n) < area_side / (area_side + area_caps)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        pts = np.empty((n, 3))
        nrm = np.empty((n, 3))
        z = rng.uniform(-h / 2.0, h / 2.0, size=n)
        rad = r * np.sqrt(rng.random(n))
        cap_sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        for i in range(n):
            c, s = np.cos(phi[i]), np.sin(phi[i])
            if on_side[i]:
                pts[i] = (r * c, r * s, z[i])
                nrm[i] = (c, s, 0.0)
            else:
                pts[i] = (rad[i] * c, rad[i] * s, cap_sign[i] * h / 2.0)
                nrm[i] = (0.0, 0.0, cap_sign[i])
        return PointCloud(pts, nrm)
    # capsule
    r, core = spec.dims
    area_side = 2.0 * np.pi * r * core
    area_caps = 4.0 * np.pi * r * r
    on_side = rng.random(n) < area_side / (area_side + area_caps)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-core / 2.0, core / 2.0, size=n)
    hemi = rng.normal(size=(n, 3))
    hemi /= np.linalg.norm(hemi, axis=1, keepdims=True)
    for i in range(n):
        if on_side[i]:
            c, s = np.cos(phi[i]), np.sin(phi[i])
            pts[i] = (r * c, r * s, z[i])
            nrm[i] = (c, s, 0.0)
        else:
            d = hemi[i]
            end = core / 2.0 if d[2] >= 0 else -core / 2.0
            pts[i] = (r * d[0], r * d[1], end + r * d[2])
            nrm[i] = d
    return PointCloud(pts, nrm)


# ---------------------------------------------------------------------------
# grasp oracle


def _matrix_to_euler_xyz(r: np.ndarray) -> np.ndarray:
    b = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    if abs(np.cos(b)) > 1e-9:
        a = np.arctan2(r[2, 1], r[2, 2])
        c = np.arctan2(r[1, 0], r[0, 0])
    else:
        a = np.arctan2(-r[1, 2], r[1, 1])
        c = 0.0
    return np.array([a, b, c])


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _approach_rotation(rng, spread: float) -> np.ndarray:
    """Grasp approach orientation: a rotation-vector perturbation of the
    canonical palm-facing-the-object pose.

    Real grasp corpora concentrate around a few approach directions, and
    a single ground-truth pose per sample only supports distance-based
    metrics when the conditional pose distribution is reasonably narrow;
    ``spread`` (radians) controls that width. Values of about pi or more
    effectively give uniformly random orientations.
    """
    if spread >= np.pi:
        return _random_rotation(rng)
    w = rng.normal(0.0, spread, 3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3)
    from .hand import axis_angle_to_matrix

    return axis_angle_to_matrix(w / theta, theta)


def _joints_by_child(model: HandModel):
    table = {}
    for idx, joint in enumerate(model.joints):
        table.setdefault(model.links[joint.child_link].name,
                         []).append(idx)
    return table


def _finger_closing_indices(model: HandModel, finger: str):
    child_joints = _joints_by_child(model)
    if finger == "th":
        names = ("thproximal", "thmiddle", "thdistal")
        fractions = _THUMB_FRACTIONS
    else:
        names = tuple(finger + seg for seg in ("proximal", "middle",
                                               "distal"))
        fractions = _FLEX_FRACTIONS
    return [child_joints[n][0] for n in names], fractions


def _finger_link_indices(model: HandModel, finger: str):
    if finger == "th":
        names = ("thbase", "thproximal", "thmiddle", "thdistal")
    else:
        names = tuple(finger + seg for seg in ("knuckle", "proximal",
                                               "middle", "distal"))
    return [model.link_index(n) for n in names]


class _FingerChain:
    """Partial forward kinematics down one finger, for the closing search.

    Evaluates the same transform composition as full FK but touches only
    the palm-to-distal chain, and returns the minimum signed distance of
    the chain's capsules to the object points.
    """

    def __init__(self, model: HandModel, finger: str):
        from .hand import axis_angle_to_matrix  # noqa: F401 (used below)

        self.model = model
        self.links = _finger_link_indices(model, finger)
        self.joints_of = [model._joints_of[i] for i in self.links]

    def min_gap(self, palm_rot, palm_trans, angles, points):
        from .hand import axis_angle_to_matrix

        model = self.model
        rot, trans = palm_rot, palm_trans
        best = np.inf
        for link_idx, joint_idxs in zip(self.links, self.joints_of):
            link = model.links[link_idx]
            trans = rot @ link.origin_offset + trans
            r_local = None
            for j in joint_idxs:
                r_j = axis_angle_to_matrix(model.joints[j].axis, angles[j])
                r_local = r_j if r_local is None else r_local @ r_j
            if r_local is not None:
                rot = rot @ r_local
            a = rot @ link.capsule.a + trans
            b = rot @ link.capsule.b + trans
            ab = b - a
            denom = float(ab @ ab)
            if denom < 1e-24:
                d = np.linalg.norm(points - a, axis=1).min()
            else:
                t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
                closest = a + t[:, None] * ab
                diff = points - closest
                d = np.sqrt(np.einsum("nd,nd->n", diff, diff).min())
            d -= link.capsule.radius
            if d < best:
                best = float(d)
        return best


DEFAULT_APPROACH_SPREAD = 0.35  # radians


def oracle_grasp(obj: PointCloud, grasp_family: str, seed,
                 model: HandModel | None = None,
                 max_retries: int = 25,
                 contact_threshold: float = DEFAULT_CONTACT_THRESHOLD,
                 approach_spread: float = DEFAULT_APPROACH_SPREAD):
    """Analytic grasp for an origin-centered object.

    Places the palm at a random orientation with the object centered in
    front of it, closes each of the family's fingers by scan-and-bisect
    until the finger first sits within half a millimeter of the surface
    (or the joint limits stop it), and keeps the configuration only when
    it produces at least two contacts with penetration below 2 mm.
    Raises :class:`OracleFailure` after ``max_retries`` rejected attempts.
    """
    if grasp_family not in GRASP_FAMILIES:
        raise ValueError(f"unknown grasp family {grasp_family!r}")
    if model is None:
        model = default_hand()
    radius = float(np.linalg.norm(obj.points - obj.centroid,
                                  axis=1).max())
    if radius > 0.15:
        raise ValueError(f"object bounding radius {radius:.3f} m exceeds "
                         "hand reach (0.15 m)")
    rng = np.random.default_rng(seed)
    child_joints = _joints_by_child(model)
    limits = model.joint_limits()
    fingers = _FAMILY_FINGERS[grasp_family]

    for _ in range(max_retries):
        rot = _approach_rotation(rng, approach_spread)
        angles = _matrix_to_euler_xyz(rot)
        rot = euler_xyz_to_matrix(angles)  # exact FK-consistent rotation
        target = np.array([
            rng.uniform(-0.008, 0.008),
            radius + 0.035 + rng.uniform(0.0, 0.008),
            0.095 + rng.uniform(-0.010, 0.010),
        ])
        translation = obj.centroid - rot @ target

        joint_angles = np.zeros(model.dof)
        for finger, abd in _FAMILY_ABDUCTION[grasp_family].items():
            link = "thbase" if finger == "th" else finger + "knuckle"
            j = child_joints[link][0]
            lo, hi = limits[j]
            joint_angles[j] = float(
                np.clip(abd + rng.uniform(-0.05, 0.05), lo, hi))

        closing = {f: _finger_closing_indices(model, f) for f in fingers}

        def pose_at(closures):
            q = joint_angles.copy()
            for finger, s in closures.items():
                idxs, fracs = closing[finger]
                for j, frac in zip(idxs, fracs):
                    q[j] = s * frac * limits[j][1]
            return GraspPose(translation, angles, q)

        closures = {}
        for finger in fingers:
            chain = _FingerChain(model, finger)

            def gap(s):
                trial = dict(closures)
                trial[finger] = s
                q = joint_angles.copy()
                for f_, s_ in trial.items():
                    idxs, fracs = closing[f_]
                    for j, frac in zip(idxs, fracs):
                        q[j] = s_ * frac * limits[j][1]
                return chain.min_gap(rot, translation, q, obj.points)

            # first touch of ANY link of the closing finger (on large
            # objects a middle phalanx pad-contacts before the distal
            # can); the gap along the arc is not monotone, so scan for
            # the first crossing and only then bisect the bracket
            target_gap = 2e-4
            if gap(0.0) <= target_gap:
                closures[finger] = 0.0
                continue
            lo_s, hi_s = 0.0, None
            for step in range(1, 41):
                s = step / 40.0
                if gap(s) <= target_gap:
                    hi_s = s
                    break
                lo_s = s
            if hi_s is None:
                closures[finger] = 1.0  # limits hit before touching
                continue
            for _ in range(16):
                mid = 0.5 * (lo_s + hi_s)
                if gap(mid) > target_gap:
                    lo_s = mid
                else:
                    hi_s = mid
            closures[finger] = hi_s

        pose = pose_at(closures)
        contacts = extract_contacts(model, pose, obj, contact_threshold)
        if len(contacts) < 2:
            continue
        if penetration_depth(model, pose, obj) > 0.002:
            continue
        return pose, contacts
    raise OracleFailure(f"no valid {grasp_family} grasp after "
                        f"{max_retries} attempts")


# ---------------------------------------------------------------------------
# instructions


def contacted_finger_count(contacts: ContactSet) -> int:
    fingers = set()
    for record in contacts:
        for prefix in ("th", "ff", "mf", "rf", "lf"):
            if record.link.startswith(prefix):
                fingers.add(prefix)
                break
    return len(fingers)


def generate_instruction(shape: str, family: str, contacts: ContactSet,
                         seed) -> str:
    """One sentence from the closed template grammar, mentioning the true
    contacted-finger count and the grasp family."""
    rng = np.random.default_rng(seed)
    count = contacted_finger_count(contacts)
    count_word = _NUMBER_WORDS.get(count, "five")
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    return template.format(shape=shape, count=count_word,
                           finger="finger" if count == 1 else "fingers",
                           family=_FAMILY_WORDS[family])


def instruction_word_inventory():
    """Every word the instruction grammar can emit (vocabulary closure)."""
    words = set()
    for template in _TEMPLATES:
        for token in template.replace("{shape}", "").replace(
                "{count}", "").replace("{finger}", "").replace(
                "{family}", "").split():
            words.add(token)
    words.update(SHAPES)
    words.update(_NUMBER_WORDS.values())
    words.update(("finger", "fingers"))
    for family_phrase in _FAMILY_WORDS.values():
        words.update(family_phrase.split())
    return sorted(words)


# ---------------------------------------------------------------------------
# dataset build


SPLITS = ("train", "seen", "unseen_object", "unseen_grasp", "unseen_both")

_SPLIT_POOLS = {
    # (scale range, family pool)
    "train": (SEEN_SCALE_RANGE, SEEN_FAMILIES),
    "seen": (SEEN_SCALE_RANGE, SEEN_FAMILIES),
    "unseen_object": (UNSEEN_SCALE_RANGE, SEEN_FAMILIES),
    "unseen_grasp": (SEEN_SCALE_RANGE, UNSEEN_FAMILIES),
    "unseen_both": (UNSEEN_SCALE_RANGE, UNSEEN_FAMILIES),
}


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_val: int = 200  # per validation split
    n_points: int = 1024
    contact_threshold: float = DEFAULT_CONTACT_THRESHOLD
    max_retries: int = 25
    approach_spread: float = DEFAULT_APPROACH_SPREAD

    def count_for(self, split: str) -> int:
        return self.n_train if split == "train" else self.n_val


@dataclass
class SyntheticSample:
    sample_id: str
    split: str
    shape: str
    dims: tuple
    cloud_file: str
    cloud: PointCloud
    instruction: str
    contacts: ContactSet
    pose: GraspPose
    seed: int
    family: str


def _record_to_json(sample: SyntheticSample) -> str:
    record = {
        "id": sample.sample_id,
        "split": sample.split,
        "object": {
            "shape": sample.shape,
            "dims": list(sample.dims),
            "cloud_file": sample.cloud_file,
        },
        "instruction": sample.instruction,
        "contacts": [{"link": r.link, "pos": [float(x) for x in r.position]}
                     for r in sample.contacts],
        "pose": [float(x) for x in sample.pose.as_vector()],
        "seed": sample.seed,
        "family": sample.family,
    }
    return json.dumps(record, separators=(", ", ": "))


def build_dataset(out_dir: str, config: DatasetConfig | None = None,
                  seed: int = 0, model: HandModel | None = None,
                  verbose: bool = False) -> dict:
    """Generate every split into ``out_dir`` (JSONL records + .xyz clouds +
    manifest). Rebuilding with the same seed is byte-identical. Returns
    the manifest dict."""
    if config is None:
        config = DatasetConfig()
    if model is None:
        model = default_hand()
    os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)

    manifest = {
        "dataset_format_version": 1,
        "seed": seed,
        "config": {
            "n_train": config.n_train, "n_val": config.n_val,
            "n_points": config.n_points,
            "contact_threshold": config.contact_threshold,
            "approach_spread": config.approach_spread,
        },
        "splits": {},
    }
    for split_index, split in enumerate(SPLITS):
        scale_range, families = _SPLIT_POOLS[split]
        count = config.count_for(split)
        lines = []
        failures = 0
        contact_hist = {}
        produced = 0
        attempt = 0
        while produced < count:
            sample_seq = np.random.SeedSequence(
                [seed, split_index, attempt])
            sample_seed = int(sample_seq.generate_state(1)[0])
            rng = np.random.default_rng(sample_seq)
            attempt += 1

            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            scale = float(rng.uniform(*scale_range))
            family = families[int(rng.integers(len(families)))]
            spec = spec_from_scale(shape, scale, config.n_points)
            cloud = generate_object(spec, rng)
            try:
                pose, contacts = oracle_grasp(
                    cloud, family, rng, model,
                    max_retries=config.max_retries,
                    contact_threshold=config.contact_threshold,
                    approach_spread=config.approach_spread)
            except OracleFailure:
                failures += 1
                continue
            sample_id = f"{split}_{produced:06d}"
            cloud_file = os.path.join("clouds", sample_id + ".xyz")
            instruction = generate_instruction(shape, family, contacts, rng)
            sample = SyntheticSample(
                sample_id, split, shape, spec.dims, cloud_file, cloud,
                instruction, contacts, pose, sample_seed, family)
            save_xyz(cloud, os.path.join(out_dir, cloud_file))
            lines.append(_record_to_json(sample))
            contact_hist[len(contacts)] = \
                contact_hist.get(len(contacts), 0) + 1
            produced += 1
            if verbose and produced % 200 == 0:
                print(f"  {split}: {produced}/{count}")
        path = os.path.join(out_dir, split + ".jsonl")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        manifest["splits"][split] = {
            "file": split + ".jsonl",
            "count": count,
            "families": list(families),
            "scale_range": list(scale_range),
            "oracle_failures": failures,
            "contact_count_histogram": {
                str(k): v for k, v in sorted(contact_hist.items())},
        }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def load_split(dataset_dir: str, split: str, model: HandModel | None = None):
    """Read one split's records (clouds included) back into memory."""
    if model is None:
        model = default_hand()
    path = os.path.join(dataset_dir, split + ".jsonl")
    samples = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            cloud = load_xyz(os.path.join(dataset_dir,
                                          rec["object"]["cloud_file"]))
            contacts = ContactSet.from_records(
                [ContactRecord(c["link"], np.array(c["pos"]), 0.0)
                 for c in rec["contacts"]], model)
            samples.append(SyntheticSample(
                rec["id"], rec["split"], rec["object"]["shape"],
                tuple(rec["object"]["dims"]), rec["object"]["cloud_file"],
                cloud, rec["instruction"], contacts,
                GraspPose.from_vector(np.array(rec["pose"])),
                int(rec["seed"]), rec.get("family", "")))
    return samples
