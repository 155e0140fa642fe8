"""Opti-acoustic localization: image bearing -> sonar beam -> range -> 3D fix.

The range lookup walks the beam fan in bearing order and stops at the first
beam whose center lies within half an angular resolution of the query
bearing. If that beam's peak intensity clears the detection threshold, the
range of the peak bin (bin center, i.e. (index + 0.5) * resolution) is
returned; otherwise the lookup reports a no-return. A bearing outside the
fan is an error, not a no-return.

Beam matching assumes the camera and sonar boresights are aligned (the
co-located mounting of the target vehicle); extrinsics only matter once a
fix is transformed out of the optical frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, OutOfFovError
from .geometry import CameraIntrinsics, SonarConfig, pixel_to_bearing, pixel_to_elevation

NO_RETURN = "no_return"
OUT_OF_FOV = "out_of_fov"


@dataclass(frozen=True)
class SonarPing:
    """One fan of beams: per-beam bearing and intensity profile over range bins."""

    timestamp: float
    bearings: np.ndarray          # (B,) radians, strictly increasing
    intensities: np.ndarray       # (B, num_bins) in [0, 1]

    def __post_init__(self):
        b = np.asarray(self.bearings, dtype=float)
        i = np.asarray(self.intensities, dtype=float)
        if b.ndim != 1 or i.ndim != 2 or i.shape[0] != b.shape[0]:
            raise InputError("ping needs one intensity row per beam")
        if np.any(np.diff(b) <= 0):
            raise InputError("beam bearings must be strictly increasing")
        object.__setattr__(self, "bearings", b)
        object.__setattr__(self, "intensities", i)

    def validate_against(self, cfg: SonarConfig) -> None:
        half = 0.5 * cfg.horizontal_fov + 1e-12
        if np.any(np.abs(self.bearings) > half):
            raise InputError("beam bearing outside the sonar field of view")
        if self.intensities.shape[1] != cfg.num_bins:
            raise InputError(
                f"ping has {self.intensities.shape[1]} bins, config expects {cfg.num_bins}")


@dataclass(frozen=True)
class ObjectFix:
    """3D object position in the optical frame plus the angles that produced it."""

    point_camera: np.ndarray
    bearing: float
    elevation: float
    range_source_beam: int


@dataclass(frozen=True)
class NoFix:
    reason: str


def bearing_to_range(theta: float, ping: SonarPing, cfg: SonarConfig) -> tuple[float, int] | None:
    """Range (meters) and beam index for an image bearing, or None on no-return.

    Raises OutOfFovError when |theta| exceeds half the sonar field of view.
    """
    if abs(theta) > 0.5 * cfg.horizontal_fov:
        raise OutOfFovError(
            f"bearing {theta:.4f} rad outside sonar fov {cfg.horizontal_fov:.4f} rad")
    half_res = 0.5 * cfg.angular_resolution
    for beam, bearing in enumerate(ping.bearings):
        if abs(bearing - theta) <= half_res:
            profile = ping.intensities[beam]
            peak_bin = int(np.argmax(profile))
            if profile[peak_bin] >= cfg.intensity_threshold:
                return (peak_bin + 0.5) * cfg.range_resolution, beam
            return None
    return None


def localize_object(
    centroid,
    ping: SonarPing,
    cam: CameraIntrinsics,
    cfg: SonarConfig,
    slant_correction: bool = False,
) -> ObjectFix | NoFix:
    """Full opti-acoustic fix for one detection centroid.

    Bearing and elevation come from the pixel offsets; the range comes from
    the matched sonar beam. By default the along-beam range is used directly
    as the optical-frame depth Z; with `slant_correction` the range is first
    flattened by cos(bearing) * cos(elevation).
    """
    theta = pixel_to_bearing(centroid, cam)
    phi = pixel_to_elevation(centroid, cam)
    try:
        hit = bearing_to_range(theta, ping, cfg)
    except OutOfFovError:
        return NoFix(OUT_OF_FOV)
    if hit is None:
        return NoFix(NO_RETURN)
    r, beam = hit
    z = r * math.cos(theta) * math.cos(phi) if slant_correction else r
    point = np.array([z * math.tan(theta), z * math.tan(phi), z])
    return ObjectFix(point_camera=point, bearing=theta, elevation=phi,
                     range_source_beam=beam)


def range_from_depth(z: float, theta: float, phi: float, slant_correction: bool) -> float:
    """Along-beam range that `localize_object` would need to report depth z."""
    if slant_correction:
        return z / (math.cos(theta) * math.cos(phi))
    return z
