"""Rigid-motion algebra: 3x3 SVD, closed-form alignment, rotation metrics.

All computations run in float64. Euler angles use the intrinsic Z-Y-X
convention throughout: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``, angles in
radians internally and degrees only in error metrics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegeneracyWarning,
    InsufficientDataError,
    InvalidInputError,
)

ORTHOGONALITY_TOL = 1e-9

# Relative singular-value floor below which a column direction is treated as
# numerically undetermined and rebuilt by orthogonal completion.
_RANK_TOL = 1e-12


def _as_points(points) -> np.ndarray:
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected an (N, 3) point array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {rot.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tra))):
            raise InvalidInputError("transform entries must be finite")
        ortho = np.linalg.norm(rot.T @ rot - np.eye(3))
        if ortho > ORTHOGONALITY_TOL:
            raise InvalidInputError(f"rotation not orthogonal (residual {ortho:.3e})")
        det = float(np.linalg.det(rot))
        if abs(det - 1.0) > ORTHOGONALITY_TOL:
            raise InvalidInputError(f"rotation must be proper (det {det:.12f})")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class ProcrustesWork:
    """Intermediate quantities of a closed-form alignment solve."""

    centroid_x: np.ndarray
    centroid_y: np.ndarray
    cross_cov: np.ndarray
    svd_u: np.ndarray
    svd_s: np.ndarray
    svd_v: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-Y-X angles in radians; pitch canonical in [-pi/2, pi/2]."""

    yaw: float
    pitch: float
    roll: float
    gimbal_lock: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll])


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def euler_zyx_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    ca, sa = math.cos(yaw), math.sin(yaw)
    cb, sb = math.cos(pitch), math.sin(pitch)
    cc, sc = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    )


GIMBAL_TOL = 1e-6


def matrix_to_euler_zyx(rotation: np.ndarray) -> EulerAngles:
    """Decompose a rotation into intrinsic Z-Y-X angles.

    Near pitch = +-pi/2 (gimbal lock) only yaw + roll is determined; roll is
    pinned to 0 there and the result is flagged.
    """
    r = np.asarray(rotation, dtype=np.float64)
    sb = -r[2, 0]
    sb = min(1.0, max(-1.0, sb))
    pitch = math.asin(sb)
    if abs(abs(pitch) - math.pi / 2.0) < GIMBAL_TOL:
        # cos(pitch) ~ 0: fold roll into yaw deterministically.
        yaw = math.atan2(-r[0, 1], r[1, 1])
        roll = 0.0
        return EulerAngles(wrap_angle(yaw), pitch, roll, gimbal_lock=True)
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    return EulerAngles(wrap_angle(yaw), pitch, wrap_angle(roll))


def _complete_orthonormal(u: np.ndarray, have: int) -> np.ndarray:
    """Fill columns ``have..2`` of ``u`` so its columns are orthonormal."""
    u = u.copy()
    if have == 0:
        return np.eye(3)
    if have == 1:
        seed = np.zeros(3)
        seed[int(np.argmin(np.abs(u[:, 0])))] = 1.0
        v = seed - (seed @ u[:, 0]) * u[:, 0]
        u[:, 1] = v / np.linalg.norm(v)
    u[:, 2] = np.cross(u[:, 0], u[:, 1])
    return u


def svd3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Signed SVD of a 3x3 matrix: ``m = u @ diag(s) @ v.T``.

    One-sided Jacobi on the columns of ``m``. Convention: ``u`` and ``v``
    are proper rotations (det = +1); any reflection sign is absorbed into
    the last entry of ``s``, so ``s`` is descending with ``s[2]`` possibly
    negative.
    """
    a = np.array(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise InvalidInputError(f"expected a 3x3 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix entries must be finite")

    v = np.eye(3)
    for _ in range(60):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            app = a[:, p] @ a[:, p]
            aqq = a[:, q] @ a[:, q]
            apq = a[:, p] @ a[:, q]
            if abs(apq) <= 1e-16 * math.sqrt(app * aqq) or apq == 0.0:
                continue
            rotated = True
            tau = (aqq - app) / (2.0 * apq)
            t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            for mat in (a, v):
                col_p = mat[:, p].copy()
                mat[:, p] = c * col_p - s * mat[:, q]
                mat[:, q] = s * col_p + c * mat[:, q]
        if not rotated:
            break

    norms = np.linalg.norm(a, axis=0)
    order = np.argsort(-norms, kind="stable")
    a = a[:, order]
    v = v[:, order]
    sigma = norms[order]

    u = np.zeros((3, 3))
    have = 0
    smax = sigma[0]
    for i in range(3):
        if smax > 0.0 and sigma[i] > _RANK_TOL * smax:
            u[:, i] = a[:, i] / sigma[i]
            have = i + 1
        else:
            break
    if have < 3:
        u = _complete_orthonormal(u, have)

    if np.linalg.det(u) < 0.0:
        u[:, 2] = -u[:, 2]
        sigma[2] = -sigma[2]
    if np.linalg.det(v) < 0.0:
        v[:, 2] = -v[:, 2]
        sigma[2] = -sigma[2]
    return u, sigma, v


def procrustes_work(src, dst) -> tuple[RigidTransform, ProcrustesWork]:
    """Closed-form least-squares rigid alignment of matched point lists.

    Returns the transform minimizing the mean squared residual
    ``|R x_i + t - y_i|^2`` together with its intermediate quantities.
    Rank-deficient cross-covariance (collinear points) still yields a
    proper rotation and emits a :class:`DegeneracyWarning`.
    """
    x = _as_points(src)
    y = _as_points(dst)
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"matched lists differ in length: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 3:
        raise InsufficientDataError(f"alignment needs at least 3 point pairs, got {x.shape[0]}")

    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    h = (x - cx).T @ (y - cy)
    u, s, v = svd3(h)

    degenerate = bool(abs(s[0]) == 0.0 or abs(s[1]) <= 1e-12 * abs(s[0]))
    if degenerate:
        warnings.warn(
            "cross-covariance is rank-deficient; rotation is not uniquely determined",
            DegeneracyWarning,
            stacklevel=2,
        )

    rotation = v @ u.T
    translation = cy - rotation @ cx
    transform = RigidTransform(rotation, translation)
    work = ProcrustesWork(cx, cy, h, u, s, v, degenerate=degenerate)
    return transform, work


def procrustes_solve(src, dst) -> RigidTransform:
    """Closed-form rigid alignment; see :func:`procrustes_work`."""
    transform, _ = procrustes_work(src, dst)
    return transform


def apply_transform(transform: RigidTransform, points) -> np.ndarray:
    pts = _as_points(points)
    return pts @ transform.rotation.T + transform.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition acting as ``a(b(x))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: RigidTransform) -> RigidTransform:
    rot = a.rotation.T
    return RigidTransform(rot, -rot @ a.translation)


def alignment_mse(src, dst, transform: RigidTransform) -> float:
    """Mean squared residual of ``transform`` mapping src onto dst, index-matched."""
    x = _as_points(src)
    y = _as_points(dst)
    diff = apply_transform(transform, x) - y
    return float(np.mean(np.sum(diff * diff, axis=1)))


@dataclass(frozen=True)
class TransformErrors:
    """Per-axis rotation errors (degrees) and per-component translation errors."""

    rot_sq_deg: np.ndarray
    rot_abs_deg: np.ndarray
    trans_sq: np.ndarray
    trans_abs: np.ndarray
    gimbal_lock: bool = False


def rotation_metrics(pred: RigidTransform, gt: RigidTransform) -> TransformErrors:
    """Per-axis Euler-angle and translation errors between two transforms.

    Angle differences are wrapped into (-180, 180] degrees before squaring.
    A gimbal flag marks pitch within ~1e-6 of +-pi/2 on either input; the
    values are still returned.
    """
    ep = matrix_to_euler_zyx(pred.rotation)
    eg = matrix_to_euler_zyx(gt.rotation)
    diff = np.array(
        [
            wrap_angle(ep.yaw - eg.yaw),
            wrap_angle(ep.pitch - eg.pitch),
            wrap_angle(ep.roll - eg.roll),
        ]
    )
    deg = np.degrees(diff)
    tdiff = pred.translation - gt.translation
    return TransformErrors(
        rot_sq_deg=deg**2,
        rot_abs_deg=np.abs(deg),
        trans_sq=tdiff**2,
        trans_abs=np.abs(tdiff),
        gimbal_lock=ep.gimbal_lock or eg.gimbal_lock,
    )
