"""Quaternion and dual-quaternion helpers on plain numpy arrays.

Quaternions are stored as ``(w, x, y, z)``. A dual quaternion is an array
with a trailing dimension of 8: the real part ``[:4]`` followed by the dual
part ``[4:]``. All functions broadcast over leading dimensions.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0, 0, 0, 0, 0, 0, 0])


def qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def qconj(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) * np.array([1.0, -1.0, -1.0, -1.0])


def pure(v: np.ndarray) -> np.ndarray:
    """Embed 3-vectors as pure quaternions."""
    v = np.asarray(v, dtype=float)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def quat_from_axis_angle(rotvec: np.ndarray) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x, with its series near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion with non-negative ``w``."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, r in enumerate(flat):
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[n] = q if q[0] >= 0 else -q
    return out.reshape(m.shape[:-2] + (4,))


def dq_from_rt(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Dual quaternion of ``x -> rot x + trans``; ``rot`` is a unit quaternion."""
    rot = np.asarray(rot, dtype=float)
    dual = 0.5 * qmul(pure(trans), rot)
    return np.concatenate([rot, dual], axis=-1)


def dq_from_matrix(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    return dq_from_rt(quat_from_matrix(mat[..., :3, :3]), mat[..., :3, 3])


def dq_translation(dq: np.ndarray) -> np.ndarray:
    """Translation of a (possibly unnormalized) dual quaternion."""
    dq = np.asarray(dq, dtype=float)
    r, d = dq[..., :4], dq[..., 4:]
    rho = np.sum(r * r, axis=-1, keepdims=True)
    return 2.0 * qmul(d, qconj(r))[..., 1:] / rho


def dq_rotation(dq: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (possibly unnormalized) dual quaternion."""
    return quat_to_matrix(np.asarray(dq, dtype=float)[..., :4])


def dq_to_matrix(dq: np.ndarray) -> np.ndarray:
    dq = np.asarray(dq, dtype=float)
    out = np.zeros(dq.shape[:-1] + (4, 4))
    out[..., :3, :3] = dq_rotation(dq)
    out[..., :3, 3] = dq_translation(dq)
    out[..., 3, 3] = 1.0
    return out


def dq_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Composition: applying the result equals applying ``b`` then ``a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    real = qmul(a[..., :4], b[..., :4])
    dual = qmul(a[..., :4], b[..., 4:]) + qmul(a[..., 4:], b[..., :4])
    return np.concatenate([real, dual], axis=-1)


def dq_normalize(dq: np.ndarray) -> np.ndarray:
    """Project onto unit dual quaternions.

    The real part is scaled to unit norm and the dual part made orthogonal to
    it. The rigid transform represented is unchanged.

    Raises:
        ValueError: if a real part has zero norm.
    """
    dq = np.asarray(dq, dtype=float)
    r, d = dq[..., :4], dq[..., 4:]
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("cannot normalize a dual quaternion with zero real part")
    r = r / norm
    d = d / norm
    d = d - np.sum(r * d, axis=-1, keepdims=True) * r
    return np.concatenate([r, d], axis=-1)


def dq_transform_points(dq: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply (possibly unnormalized) dual quaternions to points."""
    dq = np.asarray(dq, dtype=float)
    pts = np.asarray(pts, dtype=float)
    r = dq[..., :4]
    rho = np.sum(r * r, axis=-1, keepdims=True)
    rotated = qmul(qmul(r, pure(pts)), qconj(r))[..., 1:] / rho
    return rotated + dq_translation(dq)


def dq_rotate_vectors(dq: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    dq = np.asarray(dq, dtype=float)
    r = dq[..., :4]
    rho = np.sum(r * r, axis=-1, keepdims=True)
    return qmul(qmul(r, pure(vecs)), qconj(r))[..., 1:] / rho


def point_jacobian(dq: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Jacobian of ``dq_transform_points`` with respect to the 8 dq entries.

    Exact for unnormalized input, so it can be chained through a normalized
    blend. Returns an array of shape ``(..., 3, 8)``.
    """
    dq = np.asarray(dq, dtype=float)
    pts = np.asarray(pts, dtype=float)
    r, d = dq[..., :4], dq[..., 4:]
    rc = qconj(r)
    p = pure(pts)
    rho = np.sum(r * r, axis=-1)[..., None]
    rotated = qmul(qmul(r, p), rc)[..., 1:] / rho
    trans = 2.0 * qmul(d, rc)[..., 1:] / rho
    rp = qmul(r, p)
    pr = qmul(p, rc)
    jac = np.zeros(dq.shape[:-1] + (3, 8))
    for k in range(4):
        e = np.zeros(4)
        e[k] = 1.0
        ec = qconj(e)
        drho = 2.0 * r[..., k][..., None]
        d_rot = (qmul(e, pr) + qmul(rp, ec))[..., 1:] / rho - rotated * drho / rho
        d_trans = 2.0 * qmul(d, ec)[..., 1:] / rho - trans * drho / rho
        jac[..., :, k] = d_rot + d_trans
        jac[..., :, 4 + k] = 2.0 * qmul(e, rc)[..., 1:] / rho
    return jac


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    x, y, z = np.moveaxis(v, -1, 0)
    zero = np.zeros_like(x)
    return np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(v.shape[:-1] + (3, 3))


def local_increment(xi: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Dual quaternion of ``x -> R(w)(x - c) + c + t`` for ``xi = (w, t)``."""
    xi = np.asarray(xi, dtype=float)
    center = np.asarray(center, dtype=float)
    rot = quat_from_axis_angle(xi[..., :3])
    moved = qmul(qmul(rot, pure(center)), qconj(rot))[..., 1:]
    return dq_from_rt(rot, center - moved + xi[..., 3:])


def increment_jacobian(dq: np.ndarray, center: np.ndarray) -> np.ndarray:
    """d(local_increment(xi, c) * dq)/d xi at xi = 0, shape ``(..., 8, 6)``."""
    dq = np.asarray(dq, dtype=float)
    center = np.asarray(center, dtype=float)
    r, d = dq[..., :4], dq[..., 4:]
    jac = np.zeros(dq.shape[:-1] + (8, 6))
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        dr = pure(0.5 * e)
        dd = pure(0.5 * np.cross(center, e))
        jac[..., :4, j] = qmul(dr, r)
        jac[..., 4:, j] = qmul(dr, d) + qmul(dd, r)
        jac[..., 4:, 3 + j] = qmul(pure(0.5 * e), r)
    return jac
