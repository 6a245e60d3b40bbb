"""Pinhole camera and SE(3) pose algebra.

Poses map world points into the camera frame (``X_cam = R X_world + t``).
Rotations are stored as unit quaternions ``(w, x, y, z)``. The tangent vector
is ordered ``(omega, rho)``: rotation first, translation second, and
increments are applied on the left, ``pose <- exp(delta) o pose``.

Most functions come in a batched form operating on ``(..., 4)`` quaternion
and ``(..., 3)`` translation arrays; :class:`PoseSE3` wraps a single pose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

Z_MIN = 1e-6


# --------------------------------------------------------------------------
# batched quaternion / rotation helpers
# --------------------------------------------------------------------------

def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_to_rotmat(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Shepperd's method; returns quaternions with non-negative ``w``."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        diag = (tr, m[0, 0], m[1, 1], m[2, 2])
        k = int(np.argmax(diag))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[n] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1
    return q


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def so3_exp(omega):
    """Rotation vector -> unit quaternion."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    # sin(theta/2) / theta
    k = np.where(small, 0.5 - th2 / 48.0 + th2 * th2 / 3840.0, np.sin(0.5 * safe) / safe)
    q = np.empty(omega.shape[:-1] + (4,))
    q[..., 0] = np.cos(0.5 * theta)
    q[..., 1:] = k[..., None] * omega
    return q


def so3_log(q):
    """Unit quaternion -> rotation vector with norm in [0, pi]."""
    q = normalize_quat(q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < 1e-8
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    k = np.where(small,
                 2.0 / safe_w * (1.0 - n * n / (3.0 * safe_w * safe_w)),
                 2.0 * np.arctan2(n, w) / safe_n)
    return k[..., None] * v


def _v_coeffs(theta):
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    b = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0,
                 (safe - np.sin(safe)) / (safe * safe * safe))
    return b, c


def _v_matrix(omega):
    theta = np.linalg.norm(omega, axis=-1)
    b, c = _v_coeffs(theta)
    K = skew(omega)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def _v_inverse(omega):
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    half = 0.5 * safe
    # (1 - (theta/2) cot(theta/2)) / theta^2
    d = np.where(small, 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0,
                 (1.0 - half * np.cos(half) / np.sin(half)) / (safe * safe))
    K = skew(omega)
    return np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)


def se3_exp_batch(xi):
    """Tangent ``(..., 6)`` -> (quaternions ``(..., 4)``, translations ``(..., 3)``)."""
    xi = np.asarray(xi, dtype=float)
    omega, rho = xi[..., :3], xi[..., 3:]
    q = so3_exp(omega)
    t = np.einsum("...ij,...j->...i", _v_matrix(omega), rho)
    return q, t


def se3_log_batch(q, t):
    omega = so3_log(q)
    rho = np.einsum("...ij,...j->...i", _v_inverse(omega), np.asarray(t, dtype=float))
    return np.concatenate([omega, rho], axis=-1)


def compose_batch(qa, ta, qb, tb):
    """``a o b``: apply ``b`` first, then ``a``."""
    q = normalize_quat(quat_mul(qa, qb))
    t = np.einsum("...ij,...j->...i", quat_to_rotmat(qa), tb) + ta
    return q, t


def inverse_batch(q, t):
    qi = quat_conj(q)
    ti = -np.einsum("...ij,...j->...i", quat_to_rotmat(qi), t)
    return normalize_quat(qi), ti


def retract_batch(q, t, delta):
    """``pose <- exp(delta) o pose``, quaternion renormalized."""
    dq, dt = se3_exp_batch(delta)
    return compose_batch(dq, dt, q, t)


def transform_points(R, t, X):
    return np.einsum("...ij,...j->...i", R, X) + t


def camera_centers(q, t):
    R = quat_to_rotmat(q)
    return -np.einsum("...ji,...j->...i", R, t)


def adjoint_transpose(q, t, g):
    """Pull a left-perturbation gradient back through a left factor.

    If ``P = L o exp(d) o B`` then ``dL/dd = Ad_L^T dL/dd'`` where ``d'`` is the
    left perturbation of ``P``. ``g`` is ``(..., 6)`` in ``(omega, rho)`` order.
    """
    R = quat_to_rotmat(q)
    g = np.asarray(g, dtype=float)
    gw, gr = g[..., :3], g[..., 3:]
    out = np.empty_like(g)
    out[..., :3] = np.einsum("...ji,...j->...i", R, gw + np.cross(gr, t))
    out[..., 3:] = np.einsum("...ji,...j->...i", R, gr)
    return out


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_matrix(cls, K):
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, uv):
        """Camera-frame rays with unit z for pixel coordinates ``(..., 2)``."""
        uv = np.asarray(uv, dtype=float)
        out = np.ones(uv.shape[:-1] + (3,))
        out[..., 0] = (uv[..., 0] - self.cx) / self.fx
        out[..., 1] = (uv[..., 1] - self.cy) / self.fy
        return out


@dataclass(frozen=True)
class PoseSE3:
    """World-to-camera rigid transform."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", normalize_quat(np.asarray(self.q, dtype=float).reshape(4)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(rotmat_to_quat(M[:3, :3]), M[:3, 3])

    @property
    def R(self):
        return quat_to_rotmat(self.q)

    def matrix(self):
        """3x4 ``[R | t]``."""
        return np.hstack([self.R, self.t[:, None]])

    def apply(self, X):
        return transform_points(self.R, self.t, np.asarray(X, dtype=float))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(*compose_batch(self.q, self.t, other.q, other.t))

    def inverse(self) -> "PoseSE3":
        return PoseSE3(*inverse_batch(self.q, self.t))

    def retract(self, delta) -> "PoseSE3":
        return PoseSE3(*retract_batch(self.q, self.t, np.asarray(delta, dtype=float)))

    def center(self):
        return camera_centers(self.q, self.t)


def se3_exp(xi) -> PoseSE3:
    return PoseSE3(*se3_exp_batch(np.asarray(xi, dtype=float)))


def se3_log(pose: PoseSE3):
    return se3_log_batch(pose.q, pose.t)


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def project(pose: PoseSE3, cam: CameraModel, X):
    """Project world point(s) ``X`` into pixel coordinates."""
    Xc = pose.apply(X)
    z = Xc[..., 2]
    if np.any(z <= Z_MIN):
        raise BehindCamera(f"camera-frame depth {np.min(z):.3g} <= {Z_MIN}")
    u = cam.fx * Xc[..., 0] / z + cam.cx
    v = cam.fy * Xc[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def unproject(pose: PoseSE3, cam: CameraModel, p, depth):
    """Back-project pixel(s) ``p`` at camera depth ``depth`` into world coordinates."""
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    Xc = cam.rays(p) * depth[..., None]
    R = pose.R
    return np.einsum("ji,...j->...i", R, Xc - pose.t)


def cam_depth(pose: PoseSE3, X):
    X = np.asarray(X, dtype=float)
    return X @ pose.R[2] + pose.t[2]


def project_jacobians(pose: PoseSE3, cam: CameraModel, X):
    """Jacobians of :func:`project` w.r.t. the left pose increment (2x6) and X (2x3)."""
    Xc = pose.apply(X)
    x, y, z = Xc
    if z <= Z_MIN:
        raise BehindCamera("point behind camera")
    d_proj = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                       [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    # dXc/d(omega) = -[Xc]x, dXc/d(rho) = I
    J_pose = np.hstack([d_proj @ -skew(Xc), d_proj])
    J_point = d_proj @ pose.R
    return J_pose, J_point


def cam_depth_jacobians(pose: PoseSE3, X):
    Xc = pose.apply(X)
    J_pose = np.concatenate([-skew(Xc)[2], [0.0, 0.0, 1.0]])
    return J_pose, pose.R[2].copy()


def poses_to_arrays(poses):
    q = np.stack([p.q for p in poses])
    t = np.stack([p.t for p in poses])
    return q, t


def arrays_to_poses(q, t):
    return [PoseSE3(qi, ti) for qi, ti in zip(q, t)]


def identity_arrays(n):
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q, np.zeros((n, 3))
