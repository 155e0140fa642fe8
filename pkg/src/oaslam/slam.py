"""End-to-end pipeline: time-merged sensor events in, semantic map out.

Flow per camera frame: pair the nearest sonar ping, localize each detection
(opti-acoustic fix), transform fixes into the world through the current
odometry-propagated pose, associate against the landmark registry, then add
the keyframe node, its composed odometry factor, and the landmark
observation factors to the graph and re-optimize (warm-started, equivalent
to a batch solve).

Keyframe policy: every camera frame with at least one fused detection
becomes a keyframe; odometry between graph nodes is composed into a single
relative factor whose sigma scales with sqrt(step count). Depth/pitch/roll
and absolute (x, y, heading) measurements create graph nodes of their own,
so their unary factors attach at the right time.

The output trajectory carries one pose per odometry timestamp and per graph
node: samples between nodes are dead-reckoned deltas re-anchored on the
optimized node that precedes them. Dropped frames and detections are logged
as decisions, never fatal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .association import (
    MATCHED,
    NEW_LANDMARK,
    AssociationConfig,
    LandmarkView,
    associate_frame,
)
from .beacons import BeaconSet, RangeObservation, circular_mean, heading_from_array, trilaterate
from .config import RunConfig
from .dataio import (
    AbsoluteFixEvent,
    BeaconRangesEvent,
    CameraFrameEvent,
    Detection,
    OdometryEvent,
    PartialPoseEvent,
    SonarPingEvent,
)
from .embedding import aggregate_embedding, validate_embedding
from .errors import ConfigError, EmptyDatasetError, InputError, SolverError
from .fusion import NoFix, ObjectFix, localize_object, range_from_depth
from .geometry import Pose3
from .graph import (
    ABSOLUTE_POSE,
    LANDMARK_OBS,
    ODOMETRY,
    PARTIAL_POSE,
    PRIOR,
    Factor,
    FactorGraph,
    OptimizeSettings,
    VariableId,
)


@dataclass
class LandmarkState:
    embedding: np.ndarray
    count: int
    founding_frame: int


@dataclass
class MapLandmark:
    id: int
    position: np.ndarray
    embedding: np.ndarray
    observation_count: int


@dataclass
class SemanticMap:
    landmarks: list[MapLandmark]
    trajectory: list[tuple[float, Pose3]]


@dataclass
class RunResult:
    map: SemanticMap
    decisions: list[dict]
    report: dict
    graph: FactorGraph | None


@dataclass
class _TrajectorySample:
    anchor: VariableId | None
    delta: Pose3


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.camera = cfg.camera.build()
        self.sonar = cfg.sonar.build()
        self.extrinsics = cfg.extrinsics.build()
        self.assoc_cfg = AssociationConfig(
            cosine_threshold=cfg.association.cosine_threshold,
            chi2_confidence=cfg.association.chi2_confidence,
            chi2_dof=cfg.association.chi2_dof,
            use_mahalanobis=cfg.association.use_mahalanobis,
            nn_radius=cfg.association.nn_radius,
            gate_position_sigma=cfg.association.gate_position_sigma,
        )
        self.solver = OptimizeSettings(
            max_iterations=cfg.solver.max_iterations,
            relative_cost_tol=cfg.solver.relative_cost_tol,
            step_tol=cfg.solver.step_tol,
            initial_lambda=cfg.solver.initial_lambda,
            lambda_factor=cfg.solver.lambda_factor,
            max_lambda=cfg.solver.max_lambda,
        )
        s = cfg.factor_sigmas
        self.sigma_odometry = np.array([s.odometry_translation] * 3
                                       + [s.odometry_rotation] * 3)
        self.sigma_landmark = np.array([s.landmark_bearing, s.landmark_elevation,
                                        s.landmark_range])
        self.sigma_partial = np.array([s.partial_depth, s.partial_pitch, s.partial_roll])
        self.sigma_absolute = np.array([s.absolute_xy, s.absolute_xy, s.absolute_yaw])
        self.sigma_prior = np.array([s.prior_translation] * 3 + [s.prior_rotation] * 3)

    # -- main entry ----------------------------------------------------------

    def run(self, events) -> RunResult:
        events = list(events)
        if not events:
            raise EmptyDatasetError("dataset contains no events")
        if self.cfg.pipeline.mode == "odometry_only":
            return self._run_odometry_only(events)
        return self._run_full(events)

    # -- odometry-only bypass -------------------------------------------------

    def _run_odometry_only(self, events) -> RunResult:
        pose = self.cfg.pipeline.build_initial_pose()
        trajectory: list[tuple[float, Pose3]] = []
        skipped = 0
        for ev in events:
            if isinstance(ev, OdometryEvent):
                pose = pose.compose(ev.delta)
                trajectory.append((ev.t, pose))
            else:
                skipped += 1
        report = {
            "mode": "odometry_only",
            "poses": len(trajectory),
            "keyframes": 0,
            "landmarks_total": 0,
            "landmarks_mapped": 0,
            "factors": 0,
            "final_cost": 0.0,
            "iterations_total": 0,
            "skipped_events": skipped,
        }
        return RunResult(SemanticMap([], trajectory), [], report, None)

    # -- full pipeline ---------------------------------------------------------

    def _run_full(self, events) -> RunResult:
        cfg = self.cfg
        graph = FactorGraph(camera_from_body=self.extrinsics.camera_from_body,
                            slant_range=cfg.fusion.slant_correction)
        initial_pose = cfg.pipeline.build_initial_pose()
        beacon_set = (BeaconSet(np.asarray(cfg.beacons.positions, dtype=float))
                      if cfg.beacons.positions else None)
        beacon_guess = np.asarray(cfg.beacons.initial_guess, dtype=float)

        node_count = 0
        last_node: VariableId | None = None
        pending = Pose3.identity()
        pending_steps = 0
        trajectory: dict[float, _TrajectorySample] = {}
        ping_buffer: list = []
        landmarks: dict[int, LandmarkState] = {}
        decisions: list[dict] = []
        embedding_dim: int | None = None
        frame_index = -1
        anchored = cfg.pipeline.add_initial_prior
        stats = {"frames": 0, "keyframes": 0, "detections": 0, "fixes": 0,
                 "iterations_total": 0, "updates": 0, "drops": {}}
        last_report = None
        dirty = False

        def drop(reason: str, t: float, det_index=None):
            stats["drops"][reason] = stats["drops"].get(reason, 0) + 1
            rec = {"type": "drop", "frame": frame_index, "t": t, "reason": reason}
            if det_index is not None:
                rec["det_index"] = det_index
            decisions.append(rec)

        node_times: dict[VariableId, float] = {}

        def node_at(t: float) -> VariableId:
            nonlocal node_count, last_node, pending, pending_steps
            if last_node is not None and node_times[last_node] == t:
                return last_node
            vid = VariableId.pose(node_count)
            node_count += 1
            if last_node is None:
                estimate = initial_pose.compose(pending)
                graph.add_variable(vid, estimate)
                if cfg.pipeline.add_initial_prior:
                    graph.add_factor(Factor(PRIOR, (vid,), estimate, self.sigma_prior))
            else:
                estimate = graph.estimate(last_node).compose(pending)
                graph.add_variable(vid, estimate)
                steps = max(pending_steps, 1)
                graph.add_factor(Factor(ODOMETRY, (last_node, vid), pending,
                                        self.sigma_odometry * math.sqrt(steps)))
            node_times[vid] = t
            trajectory[t] = _TrajectorySample(vid, Pose3.identity())
            last_node = vid
            pending = Pose3.identity()
            pending_steps = 0
            return vid

        for ev in events:
            if isinstance(ev, OdometryEvent):
                pending = pending.compose(ev.delta)
                pending_steps += 1
                if ev.t not in trajectory:
                    trajectory[ev.t] = _TrajectorySample(last_node, pending)
                continue
            if isinstance(ev, SonarPingEvent):
                ev.ping.validate_against(self.sonar)
                ping_buffer.append(ev)
                if len(ping_buffer) > 32:
                    ping_buffer.pop(0)
                continue
            if isinstance(ev, PartialPoseEvent):
                if not cfg.pipeline.use_partial_factors:
                    continue
                vid = node_at(ev.t)
                graph.add_factor(Factor(
                    PARTIAL_POSE, (vid,),
                    np.array([ev.depth, ev.pitch, ev.roll]), self.sigma_partial))
                dirty = True
                continue
            if isinstance(ev, BeaconRangesEvent):
                if beacon_set is None or not cfg.pipeline.use_beacon_ranges:
                    continue
                obs = RangeObservation(ev.t, ev.ranges, ev.array_bearings)
                present = [r for r in ev.ranges if r is not None]
                if len(present) < 2:
                    drop("beacon_gap", ev.t)
                    continue
                try:
                    xy, _res = trilaterate(obs, beacon_set, beacon_guess)
                except SolverError:
                    drop("beacon_solve_failed", ev.t)
                    continue
                beacon_guess = xy
                headings = [heading_from_array(phi, xy, beacon_set.positions[k])
                            for k, phi in enumerate(ev.array_bearings)
                            if phi is not None and ev.ranges[k] is not None]
                if not headings:
                    drop("beacon_no_heading", ev.t)
                    continue
                ev = AbsoluteFixEvent(ev.t, float(xy[0]), float(xy[1]),
                                      circular_mean(headings))
                # falls through to absolute handling below
            if isinstance(ev, AbsoluteFixEvent):
                if not cfg.pipeline.use_absolute_factors:
                    continue
                vid = node_at(ev.t)
                graph.add_factor(Factor(
                    ABSOLUTE_POSE, (vid,),
                    np.array([ev.x, ev.y, ev.heading]), self.sigma_absolute))
                anchored = True
                dirty = True
                continue
            if isinstance(ev, CameraFrameEvent):
                frame_index += 1
                stats["frames"] += 1
                stats["detections"] += len(ev.detections)
                if not ev.detections:
                    continue
                ping_ev = pair_camera_sonar(ev.t, ping_buffer, cfg.pipeline.max_skew)
                if ping_ev is None:
                    drop("no_ping_within_skew", ev.t)
                    continue
                fixes: list[tuple[int, Detection, ObjectFix]] = []
                for di, det in enumerate(ev.detections):
                    if embedding_dim is None:
                        embedding_dim = det.embedding.shape[0]
                    validate_embedding(det.embedding, dim=embedding_dim)
                    fix = localize_object(det.centroid, ping_ev.ping, self.camera,
                                          self.sonar, cfg.fusion.slant_correction)
                    if isinstance(fix, NoFix):
                        drop(fix.reason, ev.t, det_index=di)
                        continue
                    fixes.append((di, det, fix))
                stats["fixes"] += len(fixes)
                if not fixes:
                    continue
                if not anchored:
                    raise ConfigError(
                        "graph is unanchored: no prior or absolute fix arrived "
                        "before the first keyframe")

                predicted = (graph.estimate(last_node).compose(pending)
                             if last_node is not None else initial_pose.compose(pending))
                cam_inv = self.extrinsics.camera_from_body.inverse()
                obs_worlds = [predicted.transform(cam_inv.transform(fix.point_camera))
                              for _, _, fix in fixes]
                views = [LandmarkView(lid, np.asarray(graph.estimate(VariableId.landmark(lid)),
                                                      dtype=float),
                                      st.embedding, st.count)
                         for lid, st in landmarks.items()]
                gate_log: list = []
                cov_provider = (lambda lid: graph.gating_covariance(VariableId.landmark(lid))) \
                    if self.assoc_cfg.use_mahalanobis else (lambda lid: np.eye(3))
                frame_decisions = associate_frame(
                    [(w, det.embedding) for w, (_, det, _) in zip(obs_worlds, fixes)],
                    views, cov_provider, self.assoc_cfg, log=gate_log)

                vid = node_at(ev.t)
                stats["keyframes"] += 1
                new_factors: list[Factor] = []
                for (di, det, fix), world, decision in zip(fixes, obs_worlds, frame_decisions):
                    measurement = np.array([
                        fix.bearing, fix.elevation,
                        range_from_depth(fix.point_camera[2], fix.bearing,
                                         fix.elevation, cfg.fusion.slant_correction)])
                    if decision.outcome == MATCHED:
                        lid = decision.landmark_id
                        st = landmarks[lid]
                        st.embedding = aggregate_embedding(st.embedding, st.count,
                                                           det.embedding)
                        st.count += 1
                    else:
                        lid = len(landmarks)
                        landmarks[lid] = LandmarkState(
                            embedding=np.asarray(det.embedding, dtype=float),
                            count=1, founding_frame=frame_index)
                        graph.add_variable(VariableId.landmark(lid), world)
                    new_factors.append(Factor(LANDMARK_OBS,
                                              (vid, VariableId.landmark(lid)),
                                              measurement, self.sigma_landmark))
                    decisions.append({
                        "type": "association", "frame": frame_index, "t": ev.t,
                        "det_index": di, "outcome": decision.outcome,
                        "landmark": lid,
                        "scores": [{"landmark": s.landmark_id,
                                    "cosine": s.cosine, "d2": s.d2}
                                   for s in decision.scores],
                    })
                for ge in gate_log:
                    decisions.append({"type": "gating_error", "frame": frame_index,
                                      "t": ev.t, **ge})
                for f in new_factors:
                    graph.add_factor(f)
                last_report = graph.optimize(self.solver)
                stats["iterations_total"] += last_report.iterations
                stats["updates"] += 1
                dirty = False
                continue
            raise InputError(f"unhandled event type {type(ev).__name__}")

        if dirty and graph.factors:
            last_report = graph.optimize(self.solver)
            stats["iterations_total"] += last_report.iterations
            stats["updates"] += 1

        sem_map = self._build_map(graph, landmarks, trajectory, initial_pose)
        report = {
            "mode": "full",
            "poses": graph.num_poses(),
            "keyframes": stats["keyframes"],
            "frames": stats["frames"],
            "detections": stats["detections"],
            "fixes": stats["fixes"],
            "landmarks_total": len(landmarks),
            "landmarks_mapped": len(sem_map.landmarks),
            "factors": len(graph.factors),
            "final_cost": last_report.final_cost if last_report else 0.0,
            "iterations_total": stats["iterations_total"],
            "updates": stats["updates"],
            "drops": stats["drops"],
            "trajectory_samples": len(sem_map.trajectory),
        }
        return RunResult(sem_map, decisions, report, graph)

    # -- helpers ---------------------------------------------------------------

    def _build_map(self, graph: FactorGraph, landmarks: dict[int, LandmarkState],
                   trajectory: dict[float, _TrajectorySample],
                   initial_pose: Pose3) -> SemanticMap:
        min_obs = self.cfg.pipeline.min_landmark_observations
        out = []
        for lid in sorted(landmarks):
            st = landmarks[lid]
            if st.count < min_obs:
                continue
            pos = np.asarray(graph.estimate(VariableId.landmark(lid)), dtype=float)
            out.append(MapLandmark(lid, pos, st.embedding, st.count))
        traj = []
        for t in sorted(trajectory):
            s = trajectory[t]
            base = graph.estimate(s.anchor) if s.anchor is not None else initial_pose
            traj.append((t, base.compose(s.delta)))
        return SemanticMap(out, traj)


def pair_camera_sonar(t: float, ping_buffer: list, max_skew: float = 0.15):
    """Nearest ping within `max_skew` of t; equidistant ties take the earlier."""
    best = None
    best_key = None
    for ev in ping_buffer:
        dt = abs(ev.t - t)
        if dt > max_skew:
            continue
        key = (dt, ev.t)
        if best_key is None or key < best_key:
            best = ev
            best_key = key
    return best
