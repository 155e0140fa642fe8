"""Factor graph over SE(3) poses and 3D landmarks, with Levenberg-Marquardt
optimization on sparse normal equations and marginal covariance recovery.

Residual conventions (all residuals are whitened by the per-component sigma,
angular components wrapped to (-pi, pi]):

- prior (1 pose):           r = log(X^-1 * m)             6-vector
- odometry (2 poses):       r = log((Xi^-1 Xj)^-1 * m)    6-vector
- partial_pose (1 pose):    r = measured (depth, pitch, roll) - pose's
- absolute_pose (1 pose):   r = measured (x, y, yaw) - pose's
- landmark_obs (pose+lmk):  r = measured (bearing, elevation, range)
                                - predicted from the landmark in the
                                  observing optical frame

With this convention a prior evaluated at its own measurement has Jacobian
-I. Pose local coordinates are the right perturbation [dt; dtheta]
(see geometry.Pose3.retract); landmarks perturb additively in R^3.

The "incremental" update is relinearize-and-resolve with a warm start: it
adds the new variables and factors and re-runs the batch optimizer from the
current estimates, so incremental and batch answers agree to solver
tolerance by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CovarianceUnavailable, ConfigError, InputError, OptimizationFailure
from .fusion import range_from_depth
from .geometry import (
    Pose3,
    euler_zyx_from_matrix_batch,
    optical_from_body,
    quat_conjugate_batch,
    quat_multiply_batch,
    quat_to_matrix_batch,
    rotvec_from_quat_batch,
    skew,
    skew_batch,
    so3_left_jacobian_inverse,
    so3_right_jacobian_inverse,
    so3_right_jacobian_inverse_batch,
    wrap_angle,
)

POSE = "pose"
LANDMARK = "landmark"

PRIOR = "prior"
ODOMETRY = "odometry"
PARTIAL_POSE = "partial_pose"
ABSOLUTE_POSE = "absolute_pose"
LANDMARK_OBS = "landmark_obs"

_FACTOR_ARITY = {
    PRIOR: (POSE,),
    ODOMETRY: (POSE, POSE),
    PARTIAL_POSE: (POSE,),
    ABSOLUTE_POSE: (POSE,),
    LANDMARK_OBS: (POSE, LANDMARK),
}

_RESIDUAL_DIM = {
    PRIOR: 6,
    ODOMETRY: 6,
    PARTIAL_POSE: 3,
    ABSOLUTE_POSE: 3,
    LANDMARK_OBS: 3,
}


@dataclass(frozen=True)
class VariableId:
    kind: str
    index: int

    @staticmethod
    def pose(index: int) -> "VariableId":
        return VariableId(POSE, index)

    @staticmethod
    def landmark(index: int) -> "VariableId":
        return VariableId(LANDMARK, index)

    @property
    def dim(self) -> int:
        return 6 if self.kind == POSE else 3

    def __repr__(self):
        return f"{'x' if self.kind == POSE else 'l'}{self.index}"


@dataclass(frozen=True)
class Factor:
    """A measurement constraint. `measurement` is kind-specific:

    prior/odometry: Pose3; partial_pose: (depth, pitch, roll);
    absolute_pose: (x, y, yaw); landmark_obs: (bearing, elevation, range).
    `sigma` is the per-component noise standard deviation.
    """

    kind: str
    variables: tuple[VariableId, ...]
    measurement: object
    sigma: np.ndarray

    def __post_init__(self):
        if self.kind not in _FACTOR_ARITY:
            raise InputError(f"unknown factor kind {self.kind!r}")
        expect = _FACTOR_ARITY[self.kind]
        kinds = tuple(v.kind for v in self.variables)
        if kinds != expect:
            raise InputError(f"{self.kind} factor expects variables {expect}, got {kinds}")
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (_RESIDUAL_DIM[self.kind],):
            raise InputError(f"{self.kind} factor needs {_RESIDUAL_DIM[self.kind]} sigmas")
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise InputError("factor sigmas must be positive and finite")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "variables", tuple(self.variables))

    @property
    def dim(self) -> int:
        return _RESIDUAL_DIM[self.kind]


class LandmarkBehindCamera(Exception):
    """Raised by residual evaluation when a landmark sits at or behind the
    observing camera; the optimizer deactivates the factor for that pass."""


@dataclass
class OptimizeSettings:
    max_iterations: int = 100
    relative_cost_tol: float = 1e-9
    step_tol: float = 1e-10
    initial_lambda: float = 1e-6
    lambda_factor: float = 10.0
    max_lambda: float = 1e12


@dataclass
class ConvergenceReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    reason: str
    cost_trace: list[float] = field(default_factory=list)
    inactive_factors: int = 0


# ---------------------------------------------------------------------------
# Residuals and Jacobians
# ---------------------------------------------------------------------------

def _pose_log_residual(pred: Pose3, meas: Pose3) -> np.ndarray:
    return pred.inverse().compose(meas).log()


def residual(factor: Factor, estimates: dict, camera_from_body: Pose3,
             slant_range: bool = False) -> np.ndarray:
    """Whitened residual of one factor at the given estimates."""
    r = _raw_residual(factor, estimates, camera_from_body, slant_range)
    return r / factor.sigma


def _raw_residual(factor: Factor, estimates: dict, camera_from_body: Pose3,
                  slant_range: bool) -> np.ndarray:
    kind = factor.kind
    if kind == PRIOR:
        x = estimates[factor.variables[0]]
        return _pose_log_residual(x, factor.measurement)
    if kind == ODOMETRY:
        xi = estimates[factor.variables[0]]
        xj = estimates[factor.variables[1]]
        return _pose_log_residual(xi.inverse().compose(xj), factor.measurement)
    if kind == PARTIAL_POSE:
        x = estimates[factor.variables[0]]
        _, pitch, roll = x.euler_zyx()
        m = np.asarray(factor.measurement, dtype=float)
        return np.array([
            m[0] - x.t[2],
            wrap_angle(m[1] - pitch),
            wrap_angle(m[2] - roll),
        ])
    if kind == ABSOLUTE_POSE:
        x = estimates[factor.variables[0]]
        yaw = x.euler_zyx()[0]
        m = np.asarray(factor.measurement, dtype=float)
        return np.array([
            m[0] - x.t[0],
            m[1] - x.t[1],
            wrap_angle(m[2] - yaw),
        ])
    if kind == LANDMARK_OBS:
        x = estimates[factor.variables[0]]
        lmk = np.asarray(estimates[factor.variables[1]], dtype=float)
        p_cam = camera_from_body.transform(x.inverse().transform(lmk))
        if p_cam[2] <= 1e-9:
            raise LandmarkBehindCamera(str(factor.variables[1]))
        theta = math.atan(p_cam[0] / p_cam[2])
        phi = math.atan(p_cam[1] / p_cam[2])
        rng = range_from_depth(p_cam[2], theta, phi, slant_range)
        m = np.asarray(factor.measurement, dtype=float)
        return np.array([
            wrap_angle(m[0] - theta),
            wrap_angle(m[1] - phi),
            m[2] - rng,
        ])
    raise InputError(f"unknown factor kind {kind!r}")


def _euler_rate_rows(x: Pose3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d(yaw)/d(dtheta), d(pitch)/d(dtheta), d(roll)/d(dtheta) for a body-frame
    rotation perturbation (ZYX Euler kinematics)."""
    _, pitch, roll = x.euler_zyx()
    sr, cr = math.sin(roll), math.cos(roll)
    ct = math.cos(pitch)
    tt = math.tan(pitch)
    d_yaw = np.array([0.0, sr / ct, cr / ct])
    d_pitch = np.array([0.0, cr, -sr])
    d_roll = np.array([1.0, sr * tt, cr * tt])
    return d_yaw, d_pitch, d_roll


def jacobians(factor: Factor, estimates: dict, camera_from_body: Pose3,
              slant_range: bool = False) -> dict[VariableId, np.ndarray]:
    """Whitened analytic Jacobians of the residual w.r.t. each variable's
    local coordinates (pose: right perturbation; landmark: additive)."""
    kind = factor.kind
    out: dict[VariableId, np.ndarray] = {}
    if kind == PRIOR:
        x = estimates[factor.variables[0]]
        b = x.inverse().compose(factor.measurement)
        out[factor.variables[0]] = _log_wrt_left_inverse_perturbation(b)
    elif kind == ODOMETRY:
        xi = estimates[factor.variables[0]]
        xj = estimates[factor.variables[1]]
        m = factor.measurement
        c = xj.inverse().compose(xi)
        b = c.compose(m)
        # w.r.t. Xj: r(d) = log(E(d)^-1 * B) with B = Xj^-1 Xi m
        out[factor.variables[1]] = _log_wrt_left_inverse_perturbation(b)
        # w.r.t. Xi: r(d) = log(C * E(d) * m) with C = Xj^-1 Xi
        rc = c.rotation_matrix()
        rm = m.rotation_matrix()
        phi_d = b.rotvec()
        j = np.zeros((6, 6))
        j[0:3, 0:3] = rc
        j[0:3, 3:6] = -rc @ skew(m.t)
        j[3:6, 3:6] = so3_right_jacobian_inverse(phi_d) @ rm.T
        out[factor.variables[0]] = j
    elif kind == PARTIAL_POSE:
        x = estimates[factor.variables[0]]
        r = x.rotation_matrix()
        _, d_pitch, d_roll = _euler_rate_rows(x)
        j = np.zeros((3, 6))
        j[0, 0:3] = -r[2, :]       # depth row: z of t + R*dt
        j[1, 3:6] = -d_pitch
        j[2, 3:6] = -d_roll
        out[factor.variables[0]] = j
    elif kind == ABSOLUTE_POSE:
        x = estimates[factor.variables[0]]
        r = x.rotation_matrix()
        d_yaw = _euler_rate_rows(x)[0]
        j = np.zeros((3, 6))
        j[0, 0:3] = -r[0, :]
        j[1, 0:3] = -r[1, :]
        j[2, 3:6] = -d_yaw
        out[factor.variables[0]] = j
    elif kind == LANDMARK_OBS:
        x = estimates[factor.variables[0]]
        lmk = np.asarray(estimates[factor.variables[1]], dtype=float)
        q_body = x.inverse().transform(lmk)
        rk = camera_from_body.rotation_matrix()
        p = rk @ q_body + camera_from_body.t
        if p[2] <= 1e-9:
            raise LandmarkBehindCamera(str(factor.variables[1]))
        dh = _obs_prediction_jacobian(p, slant_range)     # 3x3 w.r.t. p_cam
        dp_drho = -rk
        dp_dtheta = rk @ skew(q_body)
        dp_dl = rk @ x.rotation_matrix().T
        j_pose = np.zeros((3, 6))
        j_pose[:, 0:3] = -dh @ dp_drho
        j_pose[:, 3:6] = -dh @ dp_dtheta
        out[factor.variables[0]] = j_pose
        out[factor.variables[1]] = -dh @ dp_dl
    else:
        raise InputError(f"unknown factor kind {kind!r}")
    w = 1.0 / factor.sigma
    return {v: w[:, None] * j for v, j in out.items()}


def _log_wrt_left_inverse_perturbation(b: Pose3) -> np.ndarray:
    """d/dd log(E(d)^-1 * B) at d = 0, for the right perturbation E(d)."""
    j = np.zeros((6, 6))
    j[0:3, 0:3] = -np.eye(3)
    j[0:3, 3:6] = skew(b.t)
    j[3:6, 3:6] = -so3_left_jacobian_inverse(b.rotvec())
    return j


def _obs_prediction_jacobian(p: np.ndarray, slant_range: bool) -> np.ndarray:
    """d(bearing, elevation, range)/d(p_cam)."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    xz = x * x + z * z
    yz = y * y + z * z
    d_theta = np.array([z / xz, 0.0, -x / xz])
    d_phi = np.array([0.0, z / yz, -y / yz])
    if not slant_range:
        d_rng = np.array([0.0, 0.0, 1.0])
    else:
        a = math.sqrt(xz)
        b = math.sqrt(yz)
        d_rng = np.array([x * b / (a * z), y * a / (b * z),
                          b / a + a / b - a * b / (z * z)])
    return np.vstack([d_theta, d_phi, d_rng])


# ---------------------------------------------------------------------------
# Vectorized evaluation
# ---------------------------------------------------------------------------

class _BatchEvaluator:
    """Evaluates all factors of a graph with batched numpy kernels.

    Produces the same stacked residual vector and Jacobian as the per-factor
    reference path (same factor order, same whitening, same wrapping); the
    reference implementations above remain the semantic definition and the
    equality is asserted in the test suite.
    """

    _EPS_Z = 1e-9

    def __init__(self, graph: "FactorGraph"):
        self.offsets = graph._offsets()
        pose_ids = [v for v in graph.variables if v.kind == POSE]
        lmk_ids = [v for v in graph.variables if v.kind == LANDMARK]
        self.pose_ids = pose_ids
        self.lmk_ids = lmk_ids
        pose_row = {v: k for k, v in enumerate(pose_ids)}
        lmk_row = {v: k for k, v in enumerate(lmk_ids)}
        self.total_dim = sum(v.dim for v in graph.variables)
        self.factor_dims = np.array([f.dim for f in graph.factors], dtype=np.int64)
        self.num_factors = len(graph.factors)
        self.rk = graph.camera_from_body.rotation_matrix()
        self.tk = graph.camera_from_body.t
        self.slant = graph.slant_range

        groups: dict[str, list[tuple[int, Factor]]] = {}
        for idx, f in enumerate(graph.factors):
            groups.setdefault(f.kind, []).append((idx, f))
        self.kinds: dict[str, dict] = {}
        for kind, items in groups.items():
            idxs = np.array([i for i, _ in items], dtype=np.int64)
            fs = [f for _, f in items]
            g: dict = {"fidx": idxs, "sigma": np.array([f.sigma for f in fs])}
            g["col0"] = [np.array([self.offsets[f.variables[s]] for f in fs],
                         dtype=np.int64) for s in range(len(fs[0].variables))]
            if kind in (PRIOR, ODOMETRY):
                g["mq"] = np.array([f.measurement.q for f in fs])
                g["mt"] = np.array([f.measurement.t for f in fs])
                g["mR"] = quat_to_matrix_batch(g["mq"])
                g["m_skew_t"] = skew_batch(g["mt"])
            else:
                g["m"] = np.array([np.asarray(f.measurement, dtype=float) for f in fs])
            if kind == ODOMETRY:
                g["pi"] = np.array([pose_row[f.variables[0]] for f in fs], dtype=np.int64)
                g["pj"] = np.array([pose_row[f.variables[1]] for f in fs], dtype=np.int64)
            else:
                g["pi"] = np.array([pose_row[f.variables[0]] for f in fs], dtype=np.int64)
            if kind == LANDMARK_OBS:
                g["pl"] = np.array([lmk_row[f.variables[1]] for f in fs], dtype=np.int64)
            self.kinds[kind] = g

    def pack(self, estimates: dict):
        q = np.array([estimates[v].q for v in self.pose_ids]) \
            if self.pose_ids else np.zeros((0, 4))
        t = np.array([estimates[v].t for v in self.pose_ids]) \
            if self.pose_ids else np.zeros((0, 3))
        r = quat_to_matrix_batch(q)
        lmk = np.array([estimates[v] for v in self.lmk_ids]) \
            if self.lmk_ids else np.zeros((0, 3))
        return q, t, r, lmk

    # -- per-kind residuals (whitened) and optional jacobian blocks ---------

    def _eval_kind(self, kind: str, g: dict, q, t, r, lmk, want_jac: bool):
        if kind in (PRIOR, ODOMETRY):
            if kind == PRIOR:
                qi = q[g["pi"]]
                ri = r[g["pi"]]
                ti = t[g["pi"]]
                q_b = quat_multiply_batch(quat_conjugate_batch(qi), g["mq"])
                t_b = np.einsum("nji,nj->ni", ri, g["mt"] - ti)
            else:
                ri, rj = r[g["pi"]], r[g["pj"]]
                qi, qj = q[g["pi"]], q[g["pj"]]
                ti, tj = t[g["pi"]], t[g["pj"]]
                q_pred = quat_multiply_batch(quat_conjugate_batch(qi), qj)
                r_pred = np.einsum("nji,njk->nik", ri, rj)
                t_pred = np.einsum("nji,nj->ni", ri, tj - ti)
                q_b = quat_multiply_batch(quat_conjugate_batch(q_pred), g["mq"])
                t_b = np.einsum("nji,nj->ni", r_pred, g["mt"] - t_pred)
            phi_b = rotvec_from_quat_batch(q_b)
            res = np.concatenate([t_b, phi_b], axis=1) / g["sigma"]
            if not want_jac:
                return res, None, None
            n = len(g["fidx"])
            jl_inv = so3_right_jacobian_inverse_batch(-phi_b)
            j_u = np.zeros((n, 6, 6))
            j_u[:, 0:3, 0:3] = -np.eye(3)
            j_u[:, 0:3, 3:6] = skew_batch(t_b)
            j_u[:, 3:6, 3:6] = -jl_inv
            j_u /= g["sigma"][:, :, None]
            if kind == PRIOR:
                return res, [j_u], None
            rc = np.transpose(r_pred, (0, 2, 1))
            j_i = np.zeros((n, 6, 6))
            j_i[:, 0:3, 0:3] = rc
            j_i[:, 0:3, 3:6] = -np.einsum("nij,njk->nik", rc, g["m_skew_t"])
            j_i[:, 3:6, 3:6] = np.einsum(
                "nij,nkj->nik", so3_right_jacobian_inverse_batch(phi_b), g["mR"])
            j_i /= g["sigma"][:, :, None]
            return res, [j_i, j_u], None
        if kind in (PARTIAL_POSE, ABSOLUTE_POSE):
            ri = r[g["pi"]]
            ti = t[g["pi"]]
            yaw, pitch, roll = euler_zyx_from_matrix_batch(ri)
            m = g["m"]
            if kind == PARTIAL_POSE:
                res = np.stack([m[:, 0] - ti[:, 2],
                                wrap_angle(m[:, 1] - pitch),
                                wrap_angle(m[:, 2] - roll)], axis=1) / g["sigma"]
            else:
                res = np.stack([m[:, 0] - ti[:, 0],
                                m[:, 1] - ti[:, 1],
                                wrap_angle(m[:, 2] - yaw)], axis=1) / g["sigma"]
            if not want_jac:
                return res, None, None
            n = len(g["fidx"])
            sr, cr = np.sin(roll), np.cos(roll)
            ct, tt = np.cos(pitch), np.tan(pitch)
            j = np.zeros((n, 3, 6))
            if kind == PARTIAL_POSE:
                j[:, 0, 0:3] = -ri[:, 2, :]
                j[:, 1, 4] = -cr
                j[:, 1, 5] = sr
                j[:, 2, 3] = -1.0
                j[:, 2, 4] = -sr * tt
                j[:, 2, 5] = -cr * tt
            else:
                j[:, 0, 0:3] = -ri[:, 0, :]
                j[:, 1, 0:3] = -ri[:, 1, :]
                j[:, 2, 4] = -sr / ct
                j[:, 2, 5] = -cr / ct
            j /= g["sigma"][:, :, None]
            return res, [j], None
        if kind == LANDMARK_OBS:
            ri = r[g["pi"]]
            ti = t[g["pi"]]
            l = lmk[g["pl"]]
            q_b = np.einsum("nji,nj->ni", ri, l - ti)
            p = np.einsum("ij,nj->ni", self.rk, q_b) + self.tk
            ok = p[:, 2] > self._EPS_Z
            pz = np.where(ok, p[:, 2], 1.0)
            px, py = p[:, 0], p[:, 1]
            theta = np.arctan(px / pz)
            phi = np.arctan(py / pz)
            if self.slant:
                a = np.sqrt(px * px + pz * pz)
                b = np.sqrt(py * py + pz * pz)
                rng = a * b / pz
            else:
                rng = pz
            m = g["m"]
            res = np.stack([wrap_angle(m[:, 0] - theta),
                            wrap_angle(m[:, 1] - phi),
                            m[:, 2] - rng], axis=1) / g["sigma"]
            if not want_jac:
                return res, None, ok
            n = len(g["fidx"])
            xz = px * px + pz * pz
            yz = py * py + pz * pz
            dh = np.zeros((n, 3, 3))
            dh[:, 0, 0] = pz / xz
            dh[:, 0, 2] = -px / xz
            dh[:, 1, 1] = pz / yz
            dh[:, 1, 2] = -py / yz
            if self.slant:
                dh[:, 2, 0] = px * b / (a * pz)
                dh[:, 2, 1] = py * a / (b * pz)
                dh[:, 2, 2] = b / a + a / b - a * b / (pz * pz)
            else:
                dh[:, 2, 2] = 1.0
            dp_dtheta = np.einsum("ij,njk->nik", self.rk, skew_batch(q_b))
            dp_dl = np.einsum("ij,nkj->nik", self.rk, ri)
            j_pose = np.empty((n, 3, 6))
            j_pose[:, :, 0:3] = np.einsum("nij,jk->nik", dh, self.rk)
            j_pose[:, :, 3:6] = -np.einsum("nij,njk->nik", dh, dp_dtheta)
            j_lmk = -np.einsum("nij,njk->nik", dh, dp_dl)
            j_pose /= g["sigma"][:, :, None]
            j_lmk /= g["sigma"][:, :, None]
            return res, [j_pose, j_lmk], ok
        raise InputError(f"unknown factor kind {kind!r}")

    # -- public sweeps -------------------------------------------------------

    def active_mask(self, estimates: dict) -> np.ndarray:
        mask = np.ones(self.num_factors, dtype=bool)
        g = self.kinds.get(LANDMARK_OBS)
        if g is not None:
            _, t, r, lmk = self.pack(estimates)
            ri = r[g["pi"]]
            ti = t[g["pi"]]
            q_b = np.einsum("nji,nj->ni", ri, lmk[g["pl"]] - ti)
            pz = np.einsum("j,nj->n", self.rk[2], q_b) + self.tk[2]
            mask[g["fidx"]] = pz > self._EPS_Z
        return mask

    def _row_base(self, mask: np.ndarray) -> tuple[np.ndarray, int]:
        active_dims = np.where(mask, self.factor_dims, 0)
        base = np.concatenate([[0], np.cumsum(active_dims)])
        return base[:-1], int(base[-1])

    def residual_vector(self, estimates: dict, mask: np.ndarray) -> np.ndarray:
        q, t, r, lmk = self.pack(estimates)
        base, total = self._row_base(mask)
        out = np.zeros(total)
        for kind, g in self.kinds.items():
            res, _, _ = self._eval_kind(kind, g, q, t, r, lmk, want_jac=False)
            keep = mask[g["fidx"]]
            if not np.any(keep):
                continue
            dim = res.shape[1]
            rows = base[g["fidx"][keep]][:, None] + np.arange(dim)[None, :]
            out[rows.ravel()] = res[keep].ravel()
        return out

    def cost(self, estimates: dict, mask: np.ndarray) -> float | None:
        """Whitened squared-residual sum over masked-in factors; None when a
        masked-in landmark falls behind its camera (trial must be rejected)."""
        q, t, r, lmk = self.pack(estimates)
        total = 0.0
        for kind, g in self.kinds.items():
            res, _, ok = self._eval_kind(kind, g, q, t, r, lmk, want_jac=False)
            keep = mask[g["fidx"]]
            if ok is not None and np.any(keep & ~ok):
                return None
            if np.any(keep):
                total += float(np.einsum("ni,ni->", res[keep], res[keep]))
        return total

    def linearize(self, estimates: dict, mask: np.ndarray):
        q, t, r, lmk = self.pack(estimates)
        base, total = self._row_base(mask)
        res_out = np.zeros(total)
        rows_all: list[np.ndarray] = []
        cols_all: list[np.ndarray] = []
        vals_all: list[np.ndarray] = []
        for kind, g in self.kinds.items():
            res, jacs, _ = self._eval_kind(kind, g, q, t, r, lmk, want_jac=True)
            keep = mask[g["fidx"]]
            if not np.any(keep):
                continue
            dim = res.shape[1]
            rb = base[g["fidx"][keep]]
            rows = rb[:, None] + np.arange(dim)[None, :]
            res_out[rows.ravel()] = res[keep].ravel()
            for slot, jac in enumerate(jacs):
                vdim = jac.shape[2]
                c0 = g["col0"][slot][keep]
                rr = np.broadcast_to(rows[:, :, None], (rows.shape[0], dim, vdim))
                cc = np.broadcast_to((c0[:, None] + np.arange(vdim)[None, :])[:, None, :],
                                     (rows.shape[0], dim, vdim))
                rows_all.append(rr.ravel())
                cols_all.append(cc.ravel())
                vals_all.append(jac[keep].ravel())
        if not rows_all:
            return sp.csr_matrix((0, self.total_dim)), res_out
        j = sp.coo_matrix(
            (np.concatenate(vals_all),
             (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(total, self.total_dim)).tocsr()
        return j, res_out


# ---------------------------------------------------------------------------
# The graph
# ---------------------------------------------------------------------------

class FactorGraph:
    """Variables (poses, landmarks), factors, and the optimizer over them."""

    def __init__(self, camera_from_body: Pose3 | None = None, slant_range: bool = False):
        self.camera_from_body = camera_from_body or optical_from_body()
        self.slant_range = slant_range
        self.variables: dict[VariableId, object] = {}
        self.initial_values: dict[VariableId, object] = {}
        self.factors: list[Factor] = []
        self._linearization_dirty = True
        self._cached_H = None
        self._cached_splu = None
        self._cached_offsets = None
        self._version = 0
        self._batch: _BatchEvaluator | None = None
        self._batch_version = -1

    def _evaluator(self) -> _BatchEvaluator:
        if self._batch is None or self._batch_version != self._version:
            self._batch = _BatchEvaluator(self)
            self._batch_version = self._version
        return self._batch

    # -- construction -------------------------------------------------------

    def add_variable(self, vid: VariableId, value) -> None:
        if vid in self.variables:
            raise InputError(f"variable {vid} already exists")
        if vid.kind == POSE and not isinstance(value, Pose3):
            raise InputError("pose variables take Pose3 values")
        if vid.kind == LANDMARK:
            value = np.asarray(value, dtype=float)
            if value.shape != (3,):
                raise InputError("landmark variables take 3-vectors")
        self.variables[vid] = value
        self.initial_values[vid] = value
        self._linearization_dirty = True
        self._version += 1

    def add_factor(self, factor: Factor) -> None:
        for v in factor.variables:
            if v not in self.variables:
                raise InputError(f"factor references missing variable {v}")
        self.factors.append(factor)
        self._linearization_dirty = True
        self._version += 1

    def set_estimate(self, vid: VariableId, value) -> None:
        if vid not in self.variables:
            raise InputError(f"unknown variable {vid}")
        self.variables[vid] = value
        self._linearization_dirty = True

    def estimate(self, vid: VariableId):
        return self.variables[vid]

    def num_poses(self) -> int:
        return sum(1 for v in self.variables if v.kind == POSE)

    def num_landmarks(self) -> int:
        return sum(1 for v in self.variables if v.kind == LANDMARK)

    # -- evaluation ---------------------------------------------------------

    def residual(self, factor: Factor, estimates: dict | None = None) -> np.ndarray:
        return residual(factor, estimates or self.variables,
                        self.camera_from_body, self.slant_range)

    def jacobians(self, factor: Factor, estimates: dict | None = None) -> dict:
        return jacobians(factor, estimates or self.variables,
                         self.camera_from_body, self.slant_range)

    def _offsets(self) -> dict[VariableId, int]:
        off: dict[VariableId, int] = {}
        pos = 0
        for vid in self.variables:
            off[vid] = pos
            pos += vid.dim
        return off

    def _local_dim(self) -> int:
        return sum(v.dim for v in self.variables)

    def _residual_vector(self, estimates: dict) -> tuple[np.ndarray, list[int]]:
        """Stacked whitened residuals; returns (r, active factor indices).

        Factors whose landmark falls behind the camera at these estimates
        are skipped for the pass (robustness against transient excursions).
        """
        blocks: list[np.ndarray] = []
        active: list[int] = []
        for idx, f in enumerate(self.factors):
            try:
                blocks.append(residual(f, estimates, self.camera_from_body, self.slant_range))
            except LandmarkBehindCamera:
                continue
            active.append(idx)
        if blocks:
            return np.concatenate(blocks), active
        return np.zeros(0), active

    def _cost_for(self, estimates: dict, active: list[int]) -> float | None:
        total = 0.0
        cam = self.camera_from_body
        slant = self.slant_range
        factors = self.factors
        for idx in active:
            try:
                r = residual(factors[idx], estimates, cam, slant)
            except LandmarkBehindCamera:
                return None
            total += float(np.dot(r, r))
        return total

    def _linearize(self, estimates: dict, active: list[int],
                   offsets: dict[VariableId, int]) -> tuple[sp.csr_matrix, np.ndarray]:
        rows_i: list[np.ndarray] = []
        cols_i: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        res_blocks: list[np.ndarray] = []
        row0 = 0
        for idx in active:
            f = self.factors[idx]
            r = residual(f, estimates, self.camera_from_body, self.slant_range)
            jac = jacobians(f, estimates, self.camera_from_body, self.slant_range)
            for vid, block in jac.items():
                c0 = offsets[vid]
                rows_i.append(np.repeat(np.arange(row0, row0 + f.dim), vid.dim))
                cols_i.append(np.tile(np.arange(c0, c0 + vid.dim), f.dim))
                vals.append(block.ravel())
            res_blocks.append(r)
            row0 += f.dim
        n = self._local_dim()
        if not res_blocks:
            return sp.csr_matrix((0, n)), np.zeros(0)
        j = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows_i), np.concatenate(cols_i))),
            shape=(row0, n),
        ).tocsr()
        return j, np.concatenate(res_blocks)

    @staticmethod
    def _retract_all(estimates: dict, delta: np.ndarray,
                     offsets: dict[VariableId, int]) -> dict:
        out = {}
        for vid, value in estimates.items():
            d = delta[offsets[vid]:offsets[vid] + vid.dim]
            if vid.kind == POSE:
                out[vid] = value.retract(d)
            else:
                out[vid] = value + d
        return out

    # -- optimization -------------------------------------------------------

    def _check_anchored(self) -> None:
        if not any(f.kind in (PRIOR, ABSOLUTE_POSE) for f in self.factors):
            raise ConfigError(
                "graph has no prior or absolute factor to anchor gauge freedom")

    def optimize(self, settings: OptimizeSettings | None = None) -> ConvergenceReport:
        """Levenberg-Marquardt over all variables, in place."""
        s = settings or OptimizeSettings()
        if any(v.kind == POSE for v in self.variables):
            self._check_anchored()
        estimates = dict(self.variables)
        ev = self._evaluator()
        mask = ev.active_mask(estimates)
        r = ev.residual_vector(estimates, mask)
        inactive = int(len(self.factors) - mask.sum())
        cost = float(np.dot(r, r))
        report = ConvergenceReport(initial_cost=cost, final_cost=cost, iterations=0,
                                   converged=False, reason="", cost_trace=[cost],
                                   inactive_factors=inactive)
        if cost == 0.0:
            report.converged = True
            report.reason = "zero_cost"
            self._commit(estimates)
            return report
        lam = s.initial_lambda
        offsets = self._offsets()
        for _ in range(s.max_iterations):
            j, r = ev.linearize(estimates, mask)
            h = (j.T @ j).tocsc()
            g = j.T @ r
            d = h.diagonal()
            scale = np.maximum(d, 1e-12)
            accepted = False
            while True:
                damped = h + sp.diags(lam * scale)
                try:
                    delta = spla.spsolve(damped, -g)
                except RuntimeError:
                    delta = np.full(self._local_dim(), np.nan)
                if not np.all(np.isfinite(delta)):
                    lam *= s.lambda_factor
                    if lam > s.max_lambda:
                        raise OptimizationFailure(
                            f"normal equations singular at lambda={lam:.1e}, "
                            f"cost={cost:.3e}, {int(mask.sum())} active factors")
                    continue
                if float(np.linalg.norm(delta)) < s.step_tol:
                    report.converged = True
                    report.reason = "step_tol"
                    self._commit(estimates)
                    report.final_cost = cost
                    return report
                trial = self._retract_all(estimates, delta, offsets)
                trial_cost = ev.cost(trial, mask)
                if trial_cost is not None and trial_cost < cost:
                    accepted = True
                    break
                lam *= s.lambda_factor
                if lam > s.max_lambda:
                    # no descent direction improves: treat as converged at a
                    # stationary point rather than erroring out
                    report.converged = True
                    report.reason = "lambda_max"
                    self._commit(estimates)
                    report.final_cost = cost
                    return report
            if accepted:
                estimates = trial
                prev_cost = cost
                if report.inactive_factors:
                    # some factors were deactivated: refresh the active set
                    mask = ev.active_mask(estimates)
                    r_new = ev.residual_vector(estimates, mask)
                    report.inactive_factors = int(len(self.factors) - mask.sum())
                    cost = float(np.dot(r_new, r_new))
                else:
                    cost = trial_cost
                report.iterations += 1
                report.cost_trace.append(cost)
                lam = max(lam / s.lambda_factor, 1e-12)
                if prev_cost - cost < s.relative_cost_tol * max(prev_cost, 1e-300):
                    report.converged = True
                    report.reason = "relative_cost"
                    break
        else:
            report.reason = "max_iterations"
        self._commit(estimates)
        report.final_cost = cost
        return report

    def _commit(self, estimates: dict) -> None:
        self.variables = dict(estimates)
        self._linearization_dirty = True
        # leave a fresh factorization at the converged estimates so that
        # covariance queries right after a solve reuse it
        try:
            self._information()
        except CovarianceUnavailable:
            pass

    def incremental_update(self, new_variables: dict[VariableId, object] | None = None,
                           new_factors: list[Factor] | None = None,
                           settings: OptimizeSettings | None = None) -> ConvergenceReport:
        """Add variables/factors and re-solve, warm-started at current estimates."""
        for vid, value in (new_variables or {}).items():
            self.add_variable(vid, value)
        for f in new_factors or []:
            self.add_factor(f)
        return self.optimize(settings)

    # -- covariance ---------------------------------------------------------

    def _information(self):
        if self._linearization_dirty or self._cached_splu is None:
            estimates = self.variables
            ev = self._evaluator()
            mask = ev.active_mask(estimates)
            offsets = self._offsets()
            j, _ = ev.linearize(estimates, mask)
            h = (j.T @ j).tocsc()
            try:
                lu = spla.splu(h)
            except RuntimeError as e:
                raise CovarianceUnavailable(f"information matrix not invertible: {e}")
            self._cached_H = h
            self._cached_splu = lu
            self._cached_offsets = offsets
            self._linearization_dirty = False
        return self._cached_splu, self._cached_offsets

    def marginal_covariance(self, vid: VariableId) -> np.ndarray:
        """Block of the inverse Gauss-Newton information matrix for one variable,
        linearized at the current estimates."""
        lu, offsets = self._information()
        return self._covariance_block(vid, lu, offsets)

    def gating_covariance(self, vid: VariableId) -> np.ndarray:
        """Marginal covariance from the factorization left by the last solve.

        During a pipeline update the graph has already grown by the current
        keyframe's node and unary factors; the gate wants the covariance
        recovered at the last optimization, so this reuses that factorization
        instead of relinearizing (falls back to an exact computation when no
        solve has happened yet)."""
        if self._cached_splu is not None and vid in (self._cached_offsets or {}):
            return self._covariance_block(vid, self._cached_splu, self._cached_offsets)
        return self.marginal_covariance(vid)

    def _covariance_block(self, vid: VariableId, lu, offsets) -> np.ndarray:
        if vid not in self.variables:
            raise InputError(f"unknown variable {vid}")
        n = sum(v.dim for v in offsets)
        c0, d = offsets[vid], vid.dim
        rhs = np.zeros((n, d))
        rhs[c0:c0 + d, :] = np.eye(d)
        try:
            cols = lu.solve(rhs)
        except RuntimeError as e:
            raise CovarianceUnavailable(f"information matrix not invertible: {e}")
        block = cols[c0:c0 + d, :]
        if not np.all(np.isfinite(block)):
            raise CovarianceUnavailable("information matrix is rank deficient")
        return 0.5 * (block + block.T)

    # -- export -------------------------------------------------------------

    def snapshot_records(self) -> list[dict]:
        """NDJSON-ready dump of variables and factors for debugging fixtures."""
        records: list[dict] = []
        for vid, value in self.variables.items():
            if vid.kind == POSE:
                est = {"q": list(map(float, value.q)), "t": list(map(float, value.t))}
            else:
                est = {"p": list(map(float, value))}
            records.append({"type": "variable", "kind": vid.kind,
                            "index": vid.index, "estimate": est})
        for f in self.factors:
            m = f.measurement
            if isinstance(m, Pose3):
                meas = {"q": list(map(float, m.q)), "t": list(map(float, m.t))}
            else:
                meas = list(map(float, np.asarray(m, dtype=float)))
            records.append({
                "type": "factor",
                "kind": f.kind,
                "variables": [{"kind": v.kind, "index": v.index} for v in f.variables],
                "measurement": meas,
                "sigma": list(map(float, f.sigma)),
            })
        return records

    def save_snapshot(self, path: str) -> None:
        with open(path, "w") as fh:
            for rec in self.snapshot_records():
                fh.write(json.dumps(rec) + "\n")
