"""Trajectory and map metrics against the ground-truth sidecar, plus the
ablation harness.

APE is the mean Euclidean translation error over timestamp-paired samples.
No alignment is applied when the reference frame is absolute; an optional
planar rigid alignment exists for relative-odometry runs and reports which
mode was used.

Map precision/recall are map-level: an estimated landmark is correct only
if it sits within the match radius of a true object AND the majority of its
accepted observations (from the decision log joined with the sidecar's true
detection ids) belong to that object. Matching is greedy by ascending
distance, each true object claimed at most once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .geometry import Pose3


@dataclass
class TrajectoryPair:
    pairs: list[tuple[float, np.ndarray, np.ndarray]]   # (t, estimate, reference)
    aligned: bool

    def __post_init__(self):
        if not self.pairs:
            raise InputError("no timestamp pairs within the allowed skew")


def pair_trajectories(estimate: list[tuple[float, Pose3]],
                      reference: list[tuple[float, Pose3]],
                      max_skew: float = 0.05) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """Nearest-timestamp pairing within `max_skew`; each reference sample is
    used at most once."""
    ref = sorted(((t, p) for t, p in reference), key=lambda x: x[0])
    ref_t = np.array([t for t, _ in ref])
    used = set()
    pairs = []
    for t, pose in sorted(estimate, key=lambda x: x[0]):
        i = int(np.searchsorted(ref_t, t))
        best = None
        for k in (i - 1, i):
            if 0 <= k < len(ref) and k not in used:
                dt = abs(ref_t[k] - t)
                if dt <= max_skew and (best is None or dt < best[0]):
                    best = (dt, k)
        if best is not None:
            used.add(best[1])
            pairs.append((t, np.asarray(pose.t, dtype=float),
                          np.asarray(ref[best[1]][1].t, dtype=float)))
    return pairs


def align_2d(pairs):
    """Planar rigid alignment (rotation + translation, no scale) of the
    estimate onto the reference, least squares over the paired xy."""
    est = np.array([e[:2] for _, e, _ in pairs])
    ref = np.array([r[:2] for _, _, r in pairs])
    ce, cr = est.mean(axis=0), ref.mean(axis=0)
    h = (est - ce).T @ (ref - cr)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, d]) @ u.T
    out = []
    for t, e, rr in pairs:
        exy = r @ (e[:2] - ce) + cr
        out.append((t, np.array([exy[0], exy[1], e[2]]), rr))
    return out


def ape(estimate: list[tuple[float, Pose3]],
        reference: list[tuple[float, Pose3]],
        max_skew: float = 0.05,
        align: bool = False) -> tuple[float, int]:
    """(average pose error in meters, number of paired samples)."""
    pairs = pair_trajectories(estimate, reference, max_skew)
    if not pairs:
        raise InputError("no timestamp pairs within the allowed skew")
    if align:
        pairs = align_2d(pairs)
    errs = [float(np.linalg.norm(e - r)) for _, e, r in pairs]
    return float(np.mean(errs)), len(pairs)


# ---------------------------------------------------------------------------
# map accuracy
# ---------------------------------------------------------------------------

@dataclass
class MapMatchReport:
    matches: list[tuple[int, int]]          # (landmark id, true object id)
    false_positives: list[int]              # unmatched landmark ids
    false_negatives: list[int]              # unmatched true object ids
    precision: float
    recall: float
    empty_map: bool = False
    radius: float = 1.0
    majority: dict = field(default_factory=dict)   # landmark id -> majority object


def landmark_majority(decisions: list[dict], sidecar: list[dict]) -> dict[int, int]:
    """Majority-supporting true object per landmark, from the decision log
    joined with the sidecar's detection-to-object records. Ties break on the
    lower object id."""
    truth = {(r["frame"], r["det_index"]): r["object_id"]
             for r in sidecar if r.get("type") == "true_detection"}
    votes: dict[int, dict[int, int]] = {}
    for rec in decisions:
        if rec.get("type") != "association":
            continue
        key = (rec["frame"], rec["det_index"])
        if key not in truth:
            continue
        lid = rec["landmark"]
        votes.setdefault(lid, {})
        obj = truth[key]
        votes[lid][obj] = votes[lid].get(obj, 0) + 1
    majority = {}
    for lid, v in votes.items():
        best = sorted(v.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        majority[lid] = best[0]
    return majority


def map_precision_recall(landmarks: list, truth_objects: list[dict],
                         radius: float = 1.0,
                         majority: dict[int, int] | None = None) -> MapMatchReport:
    """Greedy map-level matching.

    `landmarks` carry .id and .position; `truth_objects` are sidecar records
    with id and position. When `majority` is given (landmark id -> true
    object id), a candidate pair only counts if the landmark's majority
    object is the matched object.
    """
    if radius <= 0:
        raise InputError("match radius must be positive")
    true_pos = {int(o["id"]): np.asarray(o["position"], dtype=float)
                for o in truth_objects}
    if not landmarks:
        return MapMatchReport([], [], sorted(true_pos), 0.0, 0.0,
                              empty_map=True, radius=radius,
                              majority=dict(majority or {}))
    candidates = []
    for lm in landmarks:
        for oid, pos in true_pos.items():
            d = float(np.linalg.norm(np.asarray(lm.position) - pos))
            if d > radius:
                continue
            if majority is not None and majority.get(lm.id) != oid:
                continue
            candidates.append((d, lm.id, oid))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    matched_lm: dict[int, int] = {}
    matched_obj: set[int] = set()
    for d, lid, oid in candidates:
        if lid in matched_lm or oid in matched_obj:
            continue
        matched_lm[lid] = oid
        matched_obj.add(oid)
    tp = len(matched_lm)
    fp = [lm.id for lm in landmarks if lm.id not in matched_lm]
    fn = [oid for oid in sorted(true_pos) if oid not in matched_obj]
    precision = tp / (tp + len(fp)) if (tp + len(fp)) else 0.0
    recall = tp / (tp + len(fn)) if (tp + len(fn)) else 0.0
    return MapMatchReport(sorted(matched_lm.items()), sorted(fp), fn,
                          precision, recall, radius=radius,
                          majority=dict(majority or {}))


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = ("odometry", "geometric", "geometric_uncertainty", "full")


def ablation_variant(cfg, name: str):
    """Derive one ablation configuration from a base run config."""
    import copy
    out = copy.deepcopy(cfg)
    if name == "odometry":
        out.pipeline.mode = "odometry_only"
    elif name == "geometric":
        out.association.cosine_threshold = -1.0
        out.association.use_mahalanobis = False
    elif name == "geometric_uncertainty":
        out.association.cosine_threshold = -1.0
        out.association.use_mahalanobis = True
    elif name == "full":
        pass
    else:
        raise InputError(f"unknown ablation variant {name!r}")
    return out


def run_ablation(events, cfg, sidecar: list[dict],
                 variants=ABLATION_CONFIGS) -> list[dict]:
    """Run each association variant on the same dataset; one row per variant
    with APE, precision and recall."""
    from .slam import Pipeline  # local import to avoid a cycle

    reference = [(r["t"], Pose3(np.asarray(r["q"]), np.asarray(r["p"])))
                 for r in sidecar if r.get("type") == "true_pose"]
    truth_objects = [r for r in sidecar if r.get("type") == "true_object"]
    rows = []
    for name in variants:
        vcfg = ablation_variant(cfg, name)
        result = Pipeline(vcfg).run(list(events))
        err, paired = ape(result.map.trajectory, reference,
                          max_skew=cfg.eval.pairing_max_skew,
                          align=cfg.eval.align_2d)
        majority = landmark_majority(result.decisions, sidecar)
        report = map_precision_recall(result.map.landmarks, truth_objects,
                                      radius=cfg.eval.match_radius,
                                      majority=majority)
        rows.append({
            "config": name,
            "ape": err,
            "paired_samples": paired,
            "precision": report.precision,
            "recall": report.recall,
            "landmarks": len(result.map.landmarks),
        })
    return rows
