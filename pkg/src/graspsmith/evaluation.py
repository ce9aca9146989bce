"""Evaluation harness: contact-prediction quality, geometric grasp
metrics over model outputs, steering sweeps, and report assembly.

Grammar-invalid generations are never silently dropped: they are counted
in ``invalid_rate`` and excluded from the geometric aggregates only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import (PositionBounds, QuantileNormalizer, Vocabulary,
                    build_steering_prefix, decode_action,
                    decode_parsed_contacts, load_meta_prompts,
                    validate_grammar)
from .errors import UnknownLink
from .geometry import (PointCloud, chamfer_distance, contact_map,
                       contact_map_difference, extract_contacts,
                       penetration_depth)
from .hand import HandModel, default_hand, forward_kinematics, \
    link_surface_points
from .quality import (build_wrench_set, diversity, q1_metric,
                      stability_proxy)
from .reasoning.model import ContactReasoningModel
from .reasoning.sampling import generate


@dataclass(frozen=True)
class ContactQuality:
    """Contact link-set prediction quality plus position accuracy."""

    iou: float
    precision: float
    recall: float
    f1: float
    pos_acc: float


def contact_link_quality(pred_links, gt_links, model: HandModel):
    """Set metrics (IoU, precision, recall, F1) between predicted and
    ground-truth contact link sets.

    Conventions: empty vs empty scores 1.0 everywhere; an empty prediction
    against a nonempty ground truth scores 0 precision (and an empty
    ground truth against a nonempty prediction 0 recall).
    """
    known = set(model.link_names)
    pred, gt = set(pred_links), set(gt_links)
    for name in pred | gt:
        if name not in known:
            raise UnknownLink(f"link {name!r} not in the hand model")
    if not pred and not gt:
        return 1.0, 1.0, 1.0, 1.0
    inter = len(pred & gt)
    union = len(pred | gt)
    iou = inter / union
    precision = inter / len(pred) if pred else 0.0
    recall = inter / len(gt) if gt else 0.0
    f1 = (2.0 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return iou, precision, recall, f1


def contact_position_accuracy(pred_contacts, pred_pose, model: HandModel,
                              threshold: float = 0.01,
                              reference: str = "surface"):
    """Fraction of predicted contact positions within ``threshold`` of the
    predicted link under forward kinematics of the predicted pose.

    ``pred_contacts`` holds (link_name, position-or-None) pairs; contacts
    without positions are excluded from the denominator. ``reference``
    measures against the link capsule surface (default) or the link frame
    origin. Returns None when no contact carries a position.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if reference not in ("surface", "origin"):
        raise ValueError("reference must be 'surface' or 'origin'")
    known = set(model.link_names)
    positioned = [(l, p) for l, p in pred_contacts if p is not None]
    for link, _ in pred_contacts:
        if link not in known:
            raise UnknownLink(f"link {link!r} not in the hand model")
    if not positioned:
        return None
    poses = forward_kinematics(model, pred_pose)
    hits = 0
    for link, pos in positioned:
        i = model.link_index(link)
        rot, trans = poses.rotations[i], poses.translations[i]
        if reference == "origin":
            d = float(np.linalg.norm(np.asarray(pos) - trans))
        else:
            cap = model.links[i].capsule
            a = rot @ cap.a + trans
            b = rot @ cap.b + trans
            ab = b - a
            denom = float(ab @ ab)
            t = 0.0 if denom < 1e-24 else float(
                np.clip((np.asarray(pos) - a) @ ab / denom, 0.0, 1.0))
            seg_d = float(np.linalg.norm(np.asarray(pos) - (a + t * ab)))
            d = abs(seg_d - cap.radius)
        if d < threshold:
            hits += 1
    return hits / len(positioned)


@dataclass
class EvalConfig:
    contact_threshold: float = 0.001
    pos_acc_threshold: float = 0.01
    pos_acc_reference: str = "surface"
    samples_per_link: int = 64
    tau: float = 0.005
    mu: float = 0.5
    pyramid_edges: int = 8
    n_directions: int = 4096
    q1_min: float = 0.0
    pen_max: float = 0.005
    constrain: bool = False
    mode: str = "greedy"
    temperature: float = 1.0
    invalid_rate_ceiling: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


_ROW_METRICS = ("cd_mm", "con", "q1", "pen_m", "iou", "precision",
                "recall", "f1")


@dataclass
class EvalReport:
    rows: list
    aggregates: dict
    config: dict

    def to_json_lines(self) -> str:
        out = [json.dumps({"aggregates": self.aggregates,
                           "config": self.config})]
        out += [json.dumps(r) for r in self.rows]
        return "\n".join(out) + "\n"

    def to_table(self) -> str:
        agg = self.aggregates
        lines = [
            "metric            value",
            "----------------  ----------",
            f"samples           {agg['n']}",
            f"invalid_rate      {agg['invalid_rate']:.4f}",
            f"P-FID             {agg['p_fid']}",
            f"CD (mm)           {_fmt(agg['cd_mm'])}",
            f"Con.              {_fmt(agg['con'])}",
            f"Q1                {_fmt(agg['q1'])}",
            f"Pen. (m)          {_fmt(agg['pen_m'])}",
            f"proxy stable      {_fmt(agg['proxy_rate'])}   "
            "(geometric proxy, not a simulated success rate)",
            f"IoU               {_fmt(agg['iou'])}",
            f"precision         {_fmt(agg['precision'])}",
            f"recall            {_fmt(agg['recall'])}",
            f"F1                {_fmt(agg['f1'])}",
            f"pos_acc           {_fmt(agg['pos_acc'])}",
            f"delta_t (cm)      {_fmt(agg['delta_t_cm'])}",
            f"delta_r (deg)     {_fmt(agg['delta_r_deg'])}",
            f"delta_q (deg)     {_fmt(agg['delta_q_deg'])}",
        ]
        return "\n".join(lines)


def _fmt(v):
    if v is None:
        return "n/a"
    return f"{v:.4f}"


class Evaluator:
    """Frozen-checkpoint evaluation over dataset samples; a pure function
    of (model, codec state, samples, seed, config)."""

    def __init__(self, model: ContactReasoningModel, vocab: Vocabulary,
                 norm: QuantileNormalizer, bounds: PositionBounds,
                 hand: HandModel | None = None,
                 cfg: EvalConfig | None = None, meta_prompts=None):
        self.model = model
        self.vocab = vocab
        self.norm = norm
        self.bounds = bounds
        self.hand = hand if hand is not None else default_hand()
        self.cfg = cfg if cfg is not None else EvalConfig()
        self.meta_prompts = (meta_prompts if meta_prompts is not None
                             else load_meta_prompts())

    # -- per-sample ---------------------------------------------------------

    def _surface(self, pose):
        poses = forward_kinematics(self.hand, pose)
        return link_surface_points(self.hand, poses,
                                   self.cfg.samples_per_link)

    def _geometric_row(self, sample, pred_pose, pred_links,
                       pred_contacts):
        """Metrics of a decoded pose against the sample's ground truth."""
        cfg = self.cfg
        gt_pts = self._surface(sample.pose)
        gen_pts = self._surface(pred_pose)
        cd_mm = chamfer_distance(gen_pts, gt_pts) * 1000.0
        con = contact_map_difference(
            contact_map(sample.cloud, gen_pts, cfg.tau),
            contact_map(sample.cloud, gt_pts, cfg.tau))
        geo_contacts = extract_contacts(self.hand, pred_pose, sample.cloud,
                                        cfg.contact_threshold)
        if len(geo_contacts) > 0:
            ws = build_wrench_set(geo_contacts, sample.cloud, cfg.mu,
                                  cfg.pyramid_edges)
            q1 = q1_metric(ws, cfg.n_directions)
        else:
            q1 = 0.0
        pen = penetration_depth(self.hand, pred_pose, sample.cloud)
        iou, precision, recall, f1 = contact_link_quality(
            pred_links, sample.contacts.link_set(), self.hand)
        pos_acc = contact_position_accuracy(
            pred_contacts, pred_pose, self.hand, cfg.pos_acc_threshold,
            cfg.pos_acc_reference)
        return {
            "cd_mm": cd_mm, "con": con, "q1": q1, "pen_m": pen,
            "proxy_stable": stability_proxy(q1, pen, cfg.q1_min,
                                            cfg.pen_max),
            "iou": iou, "precision": precision, "recall": recall, "f1": f1,
            "pos_acc": pos_acc,
        }

    def evaluate_sample(self, sample, index: int, seed: int,
                        steering_k: int | None = None):
        """Generate for one sample and score it. ``steering_k`` pins the
        first k ground-truth contacts as a decoding prefix (0 or None
        means plain generation)."""
        prefix = None
        if steering_k:
            prefix = build_steering_prefix(sample.contacts, steering_k,
                                           self.bounds, self.vocab)
        gen_seed = int(np.random.SeedSequence(
            [seed, index]).generate_state(1)[0])
        result = generate(
            self.model, self.vocab, sample.cloud.points,
            sample.instruction, self.norm.dim,
            steering_prefix=prefix, mode=self.cfg.mode,
            temperature=self.cfg.temperature, constrain=self.cfg.constrain,
            seed=gen_seed,
            meta_prompt_id=index % len(self.meta_prompts),
            meta_prompts=self.meta_prompts)
        row = {"id": sample.sample_id, "index": index,
               "steering_k": steering_k or 0, "valid": False}
        parse = validate_grammar(result.assistant_ids, self.vocab,
                                 self.norm.dim)
        if result.status != "complete" or not parse.ok:
            row["violations"] = list(parse.violations) or ["incomplete"]
            return row, None
        pred_pose = decode_action(
            [self.vocab.action_bin_id(b) for b in parse.action_bins],
            self.norm, self.vocab)
        pred_contacts = decode_parsed_contacts(parse, self.bounds,
                                               self.vocab)
        pred_links = {l for l, _ in pred_contacts}
        row.update(self._geometric_row(sample, pred_pose, pred_links,
                                       pred_contacts))
        row["valid"] = True
        return row, pred_pose

    # -- reports ------------------------------------------------------------

    def full_report(self, samples, seed: int = 0) -> EvalReport:
        rows, poses = [], []
        for i, sample in enumerate(samples):
            row, pose = self.evaluate_sample(sample, i, seed)
            rows.append(row)
            if pose is not None:
                poses.append(pose)
        return self._assemble(rows, poses, seed)

    def evaluate_ground_truth(self, samples, seed: int = 0) -> EvalReport:
        """Score the stored annotations as if they were predictions (a
        self-consistency check: perfect link sets, zero Chamfer)."""
        rows, poses = [], []
        for i, sample in enumerate(samples):
            pred_contacts = [(r.link, np.array(r.position))
                             for r in sample.contacts]
            row = {"id": sample.sample_id, "index": i, "steering_k": 0,
                   "valid": True}
            row.update(self._geometric_row(
                sample, sample.pose, sample.contacts.link_set(),
                pred_contacts))
            rows.append(row)
            poses.append(sample.pose)
        return self._assemble(rows, poses, seed)

    def _assemble(self, rows, poses, seed) -> EvalReport:
        valid = [r for r in rows if r["valid"]]
        agg = {"n": len(rows), "n_valid": len(valid),
               "invalid_rate": (len(rows) - len(valid)) / len(rows)
               if rows else 0.0,
               "p_fid": "n/a"}
        for key in _ROW_METRICS:
            vals = [r[key] for r in valid]
            agg[key] = float(np.mean(vals)) if vals else None
        pos_vals = [r["pos_acc"] for r in valid
                    if r.get("pos_acc") is not None]
        agg["pos_acc"] = float(np.mean(pos_vals)) if pos_vals else None
        agg["proxy_rate"] = (float(np.mean([r["proxy_stable"]
                                            for r in valid]))
                             if valid else None)
        if len(poses) >= 2:
            stats = diversity(poses)
            agg["delta_t_cm"] = stats.delta_t
            agg["delta_r_deg"] = stats.delta_r
            agg["delta_q_deg"] = stats.delta_q
        else:
            agg["delta_t_cm"] = agg["delta_r_deg"] = agg["delta_q_deg"] \
                = None
        config = dict(self.cfg.to_dict())
        config["seed"] = seed
        config["vocab_hash"] = self.vocab.hash()
        return EvalReport(rows, agg, config)

    def steering_sweep(self, samples, k_values, seed: int = 0):
        """Mean CD / Q1 / proxy rate per steering depth k.

        Samples with fewer ground-truth contacts than max(k) are skipped
        and counted. The same per-sample generation seed is reused across
        k so columns are comparable.
        """
        k_values = sorted(int(k) for k in k_values)
        need = max(k_values) if k_values else 0
        eligible = [(i, s) for i, s in enumerate(samples)
                    if len(s.contacts) >= need]
        skipped = len(samples) - len(eligible)
        table = []
        for k in k_values:
            rows = []
            for i, sample in eligible:
                row, _ = self.evaluate_sample(sample, i, seed,
                                              steering_k=k or None)
                rows.append(row)
            valid = [r for r in rows if r["valid"]]
            table.append({
                "k": k,
                "n": len(rows),
                "n_valid": len(valid),
                "cd_mm": float(np.mean([r["cd_mm"] for r in valid]))
                if valid else None,
                "q1": float(np.mean([r["q1"] for r in valid]))
                if valid else None,
                "proxy_rate": float(np.mean([r["proxy_stable"]
                                             for r in valid]))
                if valid else None,
            })
        return table, skipped


def format_sweep_table(table, skipped: int) -> str:
    lines = ["  k   n_valid   CD (mm)      Q1        proxy",
             "  --  --------  -----------  --------  -----"]
    for row in table:
        lines.append(f"  {row['k']:<3d} {row['n_valid']:<9d} "
                     f"{_fmt(row['cd_mm']):<12} {_fmt(row['q1']):<9} "
                     f"{_fmt(row['proxy_rate'])}")
    lines.append(f"  (skipped {skipped} samples with too few contacts)")
    return "\n".join(lines)
