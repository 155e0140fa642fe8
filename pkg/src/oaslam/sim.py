"""Deterministic synthetic world and sensor generator.

Produces the same NDJSON event stream the pipeline ingests, plus a
ground-truth sidecar (true poses, true objects, true detection-to-object
ids). All randomness comes from counter-based streams keyed by
(seed, stream, event indices), so datasets are byte-reproducible and
per-event noise does not depend on generation order.

Modeling notes:

- Object appearance is a unit-sphere class prototype plus isotropic jitter
  of total norm `embedding_sigma` (per-component std sigma/sqrt(D)),
  renormalized. Prototype geometry, not vision, controls task difficulty.
- Multipath is a multiplicative range inflation with factor in
  [multipath_factor_min, multipath_factor_max]; a reflected path is never
  shorter than the direct one. Returns that fall beyond the last range bin
  are dropped (the echo lands outside the recorded window).
- The ping peak for an object is written at bin floor(r / resolution) on
  the beam nearest its bearing, where r is the range the configured fusion
  model expects for the object's optical-frame depth. Occlusion is not
  modeled; detection dropout stands in for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .config import RunConfig
from .dataio import (
    BeaconRangesEvent,
    CameraFrameEvent,
    Detection,
    Event,
    OdometryEvent,
    PartialPoseEvent,
    SonarPingEvent,
    pose_to_json,
)
from .errors import InputError
from .fusion import SonarPing, range_from_depth
from .geometry import CameraIntrinsics, Pose3, SonarConfig, project_point
from .beacons import BeaconSet


@dataclass(frozen=True)
class World:
    positions: np.ndarray            # (N, 3)
    class_ids: np.ndarray            # (N,)
    prototypes: dict[int, np.ndarray]


def build_world(cfg: RunConfig) -> World:
    """Object layout plus deterministic class prototypes on the unit sphere."""
    objects = cfg.world.objects
    if not objects:
        return World(np.zeros((0, 3)), np.zeros(0, dtype=int), {})
    positions = np.array([o["position"] for o in objects], dtype=float)
    class_ids = np.array([o["class_id"] for o in objects], dtype=int)
    bounds = cfg.world.tank_bounds
    for axis in range(3):
        lo, hi = bounds[axis]
        if np.any(positions[:, axis] < lo) or np.any(positions[:, axis] > hi):
            raise InputError(f"object outside tank bounds on axis {axis}")
    dim = cfg.world.embedding_dim
    prototypes: dict[int, np.ndarray] = {}
    for cid in sorted(set(int(c) for c in class_ids)):
        v = rng.stream(cfg.seed, rng.PROTOTYPE, cid).standard_normal(dim)
        prototypes[cid] = v / np.linalg.norm(v)
    confusable = {}
    for a, b, cos in cfg.world.confusable_pairs:
        confusable[(int(a), int(b))] = float(cos)
        if int(a) not in prototypes or int(b) not in prototypes:
            raise InputError(f"confusable pair ({a}, {b}) names an unused class")
    # steer requested pairs to the target cosine: b <- cos*a + sqrt(1-cos^2)*b_perp
    for (a, b), cos in confusable.items():
        pa, pb = prototypes[a], prototypes[b]
        perp = pb - np.dot(pb, pa) * pa
        perp /= np.linalg.norm(perp)
        prototypes[b] = cos * pa + math.sqrt(max(0.0, 1.0 - cos * cos)) * perp
    # every non-requested pair must stay under the configured ceiling
    cids = sorted(prototypes)
    for i, a in enumerate(cids):
        for b in cids[i + 1:]:
            if (a, b) in confusable or (b, a) in confusable:
                continue
            cos = float(np.dot(prototypes[a], prototypes[b]))
            if cos > cfg.world.prototype_max_cosine:
                raise InputError(
                    f"prototypes for classes {a} and {b} come out at cosine "
                    f"{cos:.3f} > {cfg.world.prototype_max_cosine}; change the seed "
                    f"or declare the pair confusable")
    return World(positions, class_ids, prototypes)


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def _polyline(waypoints: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Closed polyline segments: vertices, cumulative lengths, total length."""
    pts = np.asarray(waypoints, dtype=float)
    closed = np.vstack([pts, pts[0]])
    seg = np.diff(closed, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    if np.any(lengths < 1e-12):
        raise InputError("degenerate waypoints: repeated consecutive points")
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    return closed, cum, float(cum[-1])


def _point_at(s: float, closed: np.ndarray, cum: np.ndarray, total: float) -> np.ndarray:
    s = s % total
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(i, len(cum) - 2)
    frac = (s - cum[i]) / (cum[i + 1] - cum[i])
    return closed[i] + frac * (closed[i + 1] - closed[i])


def generate_trajectory(traj_cfg) -> list[tuple[float, Pose3]]:
    """Ground-truth poses along the closed waypoint loop.

    Samples are equally spaced in arc length (ds = speed / rate, adjusted so
    a lap divides evenly); the final sample closes the loop exactly on the
    start point. Heading points along the chord to the next sample; pitch
    and roll are zero; depth is constant.
    """
    wps = np.asarray(traj_cfg.waypoints, dtype=float)
    if wps.ndim != 2 or wps.shape[0] < 2 or wps.shape[1] != 2:
        raise InputError("waypoints must be a list of >= 2 planar points")
    closed, cum, total = _polyline(wps)
    ds_target = traj_cfg.speed / traj_cfg.rate
    per_lap = max(8, int(round(total / ds_target)))
    n = traj_cfg.laps * per_lap
    s_values = [i * total / per_lap for i in range(n + 1)]
    xy = [_point_at(s, closed, cum, total) for s in s_values]
    poses: list[tuple[float, Pose3]] = []
    for i in range(n + 1):
        nxt = xy[(i + 1) % len(xy)] if i == n else xy[i + 1]
        if i == n:
            # closing sample: keep the heading of the first sample of a lap
            nxt = xy[1] if n >= 1 else xy[0]
        d = nxt - xy[i]
        heading = math.atan2(d[1], d[0]) if np.linalg.norm(d) > 1e-12 else 0.0
        pose = Pose3.from_euler(heading, 0.0, 0.0,
                                np.array([xy[i][0], xy[i][1], traj_cfg.depth]))
        poses.append((i / traj_cfg.rate, pose))
    return poses


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------

def visible(obj_world: np.ndarray, pose: Pose3, cam: CameraIntrinsics,
            sonar: SonarConfig, extrinsics, slant_correction: bool) -> bool:
    """True when the object is inside the camera fov, the sonar horizontal
    fov, and the sonar range window."""
    p_cam = extrinsics.camera_from_body.transform(pose.inverse().transform(obj_world))
    if p_cam[2] <= 1e-6:
        return False
    bearing = math.atan(p_cam[0] / p_cam[2])
    elevation = math.atan(p_cam[1] / p_cam[2])
    half_h = math.atan(cam.cx / cam.fx)
    half_v = math.atan(cam.cy / cam.fy)
    if abs(bearing) > half_h or abs(elevation) > half_v:
        return False
    p_son = extrinsics.sonar_from_body.transform(pose.inverse().transform(obj_world))
    if p_son[2] <= 1e-6:
        return False
    s_bearing = math.atan(p_son[0] / p_son[2])
    if abs(s_bearing) > 0.5 * sonar.horizontal_fov:
        return False
    r = range_from_depth(p_son[2], s_bearing,
                         math.atan(p_son[1] / p_son[2]), slant_correction)
    return 0.0 < r < sonar.max_range


def _noisy_unit_embedding(prototype: np.ndarray, sigma: float,
                          gen: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return prototype.copy()
    noise = gen.standard_normal(prototype.shape[0]) * (sigma / math.sqrt(prototype.shape[0]))
    v = prototype + noise
    return v / np.linalg.norm(v)


def render_sensors(trajectory: list[tuple[float, Pose3]], world: World,
                   cfg: RunConfig) -> tuple[list[Event], list[dict]]:
    """Sensor event stream plus ground-truth sidecar records."""
    cam = cfg.camera.build()
    sonar = cfg.sonar.build()
    extr = cfg.extrinsics.build()
    noise = cfg.noise
    seed = cfg.seed
    slant = cfg.fusion.slant_correction
    bias_t = np.asarray(noise.odometry_bias_translation, dtype=float)
    bias_r = np.asarray(noise.odometry_bias_rotation, dtype=float)
    beam_bearings = sonar.beam_bearings()

    events: list[Event] = []
    sidecar: list[dict] = [{
        "type": "meta", "seed": seed,
        "num_objects": int(world.positions.shape[0]),
        "embedding_dim": int(cfg.world.embedding_dim),
    }]
    for oid in range(world.positions.shape[0]):
        sidecar.append({"type": "true_object", "id": oid,
                        "position": [float(v) for v in world.positions[oid]],
                        "class_id": int(world.class_ids[oid])})

    frame_index = 0
    for i, (t, pose) in enumerate(trajectory):
        sidecar.append({"type": "true_pose", "t": t, **pose_to_json(pose)})
        if i > 0:
            true_delta = trajectory[i - 1][1].inverse().compose(pose)
            if (noise.odometry_sigma_translation or noise.odometry_sigma_rotation
                    or np.any(bias_t) or np.any(bias_r)):
                gen = rng.stream(seed, rng.ODOMETRY, i)
                eps_t = gen.standard_normal(3) * noise.odometry_sigma_translation + bias_t
                eps_r = gen.standard_normal(3) * noise.odometry_sigma_rotation + bias_r
                delta = true_delta.retract(np.concatenate([eps_t, eps_r]))
            else:
                delta = true_delta
            events.append(OdometryEvent(t, delta))

        if i % cfg.trajectory.camera_every != 0:
            continue

        # partial pose (depth/pitch/roll) rides along with every camera sample
        yaw, pitch, roll = pose.euler_zyx()
        events.append(PartialPoseEvent(t, float(pose.t[2]), pitch, roll))

        detections: list[Detection] = []
        det_records: list[dict] = []
        intensities = np.zeros((sonar.num_beams, sonar.num_bins))
        if noise.background_density > 0:
            bg = rng.stream(seed, rng.BACKGROUND, i)
            per_beam = max(1, int(round(noise.background_density * sonar.num_bins)))
            cols = bg.integers(0, sonar.num_bins, size=(sonar.num_beams, per_beam))
            vals = bg.uniform(0.0, 0.8 * sonar.intensity_threshold,
                              size=(sonar.num_beams, per_beam))
            for b in range(sonar.num_beams):
                intensities[b, cols[b]] = np.maximum(intensities[b, cols[b]], vals[b])

        for oid in range(world.positions.shape[0]):
            obj = world.positions[oid]
            if not visible(obj, pose, cam, sonar, extr, slant):
                continue
            # sonar return: written for every visible object, independent of
            # whether the camera detection below survives
            p_son = extr.sonar_from_body.transform(pose.inverse().transform(obj))
            s_bearing = math.atan(p_son[0] / p_son[2])
            s_elev = math.atan(p_son[1] / p_son[2])
            r_model = range_from_depth(p_son[2], s_bearing, s_elev, slant)
            sgen = rng.stream(seed, rng.RANGE, i, oid)
            mp = sgen.uniform()
            factor = sgen.uniform(noise.multipath_factor_min, noise.multipath_factor_max)
            range_noise = sgen.standard_normal() * noise.range_sigma
            amplitude = sgen.uniform(max(sonar.intensity_threshold, 0.9), 1.0)
            if noise.multipath_probability > 0 and mp < noise.multipath_probability:
                r_meas = factor * r_model
            else:
                r_meas = r_model + range_noise
            beam = int(np.argmin(np.abs(beam_bearings - s_bearing)))
            bin_idx = int(math.floor(r_meas / sonar.range_resolution))
            if 0 <= bin_idx < sonar.num_bins:
                intensities[beam, bin_idx] = max(intensities[beam, bin_idx], amplitude)

            if noise.dropout_probability > 0:
                if rng.stream(seed, rng.DROPOUT, i, oid).uniform() < noise.dropout_probability:
                    continue
            p_cam = extr.camera_from_body.transform(pose.inverse().transform(obj))
            pixel = project_point(p_cam, cam)
            if noise.pixel_sigma > 0:
                pixel = pixel + rng.stream(seed, rng.PIXEL, i, oid).standard_normal(2) \
                    * noise.pixel_sigma
                if not (0 <= pixel[0] <= cam.width and 0 <= pixel[1] <= cam.height):
                    continue
            emb = _noisy_unit_embedding(world.prototypes[int(world.class_ids[oid])],
                                        noise.embedding_sigma,
                                        rng.stream(seed, rng.EMBEDDING, i, oid))
            area = 0.25 * math.pi * (cam.fx * 0.3 / p_cam[2]) * (cam.fy * 0.3 / p_cam[2])
            detections.append(Detection(np.asarray(pixel, dtype=float), emb, round(area, 1)))
            det_records.append({"type": "true_detection", "frame": frame_index, "t": t,
                                "det_index": len(detections) - 1, "object_id": oid})

        events.append(SonarPingEvent(t, SonarPing(t, beam_bearings, intensities)))
        events.append(CameraFrameEvent(t, tuple(detections)))
        sidecar.extend(det_records)
        frame_index += 1

    if cfg.beacons.positions:
        events.extend(render_beacon_ranges(trajectory, cfg))
    return events, sidecar


def render_beacon_ranges(trajectory: list[tuple[float, Pose3]],
                         cfg: RunConfig) -> list[BeaconRangesEvent]:
    """One-way-travel-time style ranges plus array bearings at the beacon rate.

    Array bearings are the exact inversion of the heading equation at the
    true heading, so heading recovery round-trips on noiseless data.
    """
    beacons = BeaconSet(np.asarray(cfg.beacons.positions, dtype=float))
    every = max(1, int(round(cfg.trajectory.rate / cfg.beacons.rate)))
    out: list[BeaconRangesEvent] = []
    for i, (t, pose) in enumerate(trajectory):
        if i % every != 0:
            continue
        x, y = float(pose.t[0]), float(pose.t[1])
        heading = pose.euler_zyx()[0]
        gen = rng.stream(cfg.seed, rng.BEACON, i)
        ranges = []
        bearings = []
        for k in range(len(beacons)):
            bx, by = beacons.positions[k]
            dist = math.hypot(x - bx, y - by)
            ranges.append(dist + float(gen.standard_normal()) * cfg.beacons.range_sigma)
            bearings.append((heading + math.atan2(y - by, x - bx) + 0.5 * math.pi)
                            % (2.0 * math.pi))
        out.append(BeaconRangesEvent(t, tuple(ranges), tuple(bearings)))
    return out


_EVENT_ORDER = {
    OdometryEvent: 0, PartialPoseEvent: 1, BeaconRangesEvent: 3,
    SonarPingEvent: 4, CameraFrameEvent: 5,
}


def start_pose(cfg: RunConfig) -> Pose3:
    """The dataset's true pose at stream start (anchors the SLAM world frame)."""
    return generate_trajectory(cfg.trajectory)[0][1]


def simulate_dataset(cfg: RunConfig) -> tuple[list[Event], list[dict]]:
    """Full dataset build: trajectory -> sensors -> time-merged stream.

    The sidecar meta record carries the start pose; runs that consume the
    dataset must anchor `pipeline.initial_pose` there (the simulate command
    bakes it into the effective config it writes).
    """
    world = build_world(cfg)
    trajectory = generate_trajectory(cfg.trajectory)
    events, sidecar = render_sensors(trajectory, world, cfg)
    sidecar[0]["initial_pose"] = pose_to_json(trajectory[0][1])
    events.sort(key=lambda e: (e.t, _EVENT_ORDER[type(e)]))
    return events, sidecar


def anchored_config(cfg: RunConfig) -> RunConfig:
    """Copy of cfg with pipeline.initial_pose set to the dataset start pose."""
    import copy
    out = copy.deepcopy(cfg)
    out.pipeline.initial_pose = pose_to_json(start_pose(cfg))
    return out
