"""SO(3) / SE(3) / SE(3)^N group operations for rigid multi-piece assembly.

Conventions used throughout the package:

* Rotations are 3x3 matrices acting on column vectors from the left.
* A rigid transform g = (r, t) acts as x -> r @ x + t.
* A twist xi = (w, t) is the algebra coordinate pair of the 4x4 matrix
  [[skew(w), t], [0, 0]]; exp/log are closed-form (Rodrigues plus the
  standard V-matrix for the translation block).
* Tuples of N transforms act componentwise on N point clouds.
* All group math runs in float64; explicit rng streams everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import numpy as np

# Principal-branch guard: logs are rejected this close to angle pi because the
# axis becomes ill-conditioned and the path construction needs a unique branch.
ANGLE_PI_MARGIN = 1e-6

# Below this angle the trig coefficient ratios switch to series expansions.
SMALL_ANGLE = 1e-4

# Singular-value gap under which the rotation correction is ambiguous.
DEGENERATE_GAP = 1e-9


class AngleNearPi(ValueError):
    """Rotation angle within ANGLE_PI_MARGIN of pi: log branch not unique."""


class LengthMismatch(ValueError):
    """Componentwise operation on tuples of different length."""


class TauOutOfRange(ValueError):
    """Path parameter outside [0, 1]."""


class DegenerateCovariance(ValueError):
    """sigma_2 - sigma_3 gap of the stacked covariance too small; the
    rotation correction has no unique minimizer.  Caller should resample."""


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    """Proper rotation matrix."""

    m: np.ndarray  # (3, 3)

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        object.__setattr__(self, "m", m)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")

    def check(self, tol: float = 1e-9) -> "Rotation":
        if np.abs(self.m.T @ self.m - np.eye(3)).max() > tol:
            raise ValueError("matrix is not orthogonal")
        if abs(np.linalg.det(self.m) - 1.0) > tol:
            raise ValueError("matrix determinant is not +1")
        return self


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion g = (r, t) acting as x -> r x + t."""

    r: Rotation
    t: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class GroupElementN:
    """Ordered tuple of N rigid transforms, stored stacked for speed.

    rot: (N, 3, 3), trans: (N, 3).  The ``parts`` property exposes the
    componentwise view.
    """

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rot, dtype=np.float64)
        trans = np.asarray(self.trans, dtype=np.float64)
        if rot.ndim != 3 or rot.shape[1:] != (3, 3) or trans.shape != (rot.shape[0], 3):
            raise ValueError(f"bad shapes rot={rot.shape} trans={trans.shape}")
        if rot.shape[0] < 1:
            raise ValueError("empty tuple")
        object.__setattr__(self, "rot", rot)
        object.__setattr__(self, "trans", trans)

    @classmethod
    def from_parts(cls, parts) -> "GroupElementN":
        rot = np.stack([p.r.m for p in parts])
        trans = np.stack([p.t for p in parts])
        return cls(rot, trans)

    @classmethod
    def identity(cls, n: int) -> "GroupElementN":
        return cls(np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros((n, 3)))

    @property
    def n(self) -> int:
        return self.rot.shape[0]

    @property
    def parts(self):
        return [RigidTransform(Rotation(self.rot[i]), self.trans[i]) for i in range(self.n)]


@dataclass(frozen=True)
class Twist:
    """Algebra coordinates (w, t): rotation rate vector and translation rate."""

    w: np.ndarray  # (3,)
    t: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64).reshape(3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class TwistN:
    """Stacked twists for N pieces: w (N, 3), t (N, 3)."""

    w: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 3 or t.shape != w.shape:
            raise ValueError(f"bad shapes w={w.shape} t={t.shape}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_parts(cls, parts) -> "TwistN":
        return cls(np.stack([p.w for p in parts]), np.stack([p.t for p in parts]))

    @classmethod
    def zero(cls, n: int) -> "TwistN":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)))

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def parts(self):
        return [Twist(self.w[i], self.t[i]) for i in range(self.n)]

    def scaled(self, s: float) -> "TwistN":
        return TwistN(s * self.w, s * self.t)


@dataclass(frozen=True)
class NoiseParams:
    """Noise law per piece: Haar-uniform rotation, translation ~ N(0, omega I)."""

    omega: float = 1.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")


# ---------------------------------------------------------------------------
# batched array kernels
# ---------------------------------------------------------------------------

def _skew(w):
    """(..., 3) -> (..., 3, 3) cross-product matrix."""
    w = np.asarray(w, dtype=np.float64)
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    return K


def _unskew(K):
    return np.stack([K[..., 2, 1], K[..., 0, 2], K[..., 1, 0]], axis=-1)


def _sincos_coeffs(theta):
    """A = sin/theta, B = (1-cos)/theta^2, C = (theta-sin)/theta^3, batched,
    with series switch below SMALL_ANGLE."""
    th2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    A = np.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0, np.sin(safe) / safe)
    B = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    C = np.where(small, 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0,
                 (safe - np.sin(safe)) / (safe ** 3))
    return A, B, C


def _exp_so3(w):
    """Rodrigues, batched (..., 3) -> (..., 3, 3)."""
    theta = np.linalg.norm(w, axis=-1)
    A, B, _ = _sincos_coeffs(theta)
    K = _skew(w)
    K2 = K @ K
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * K2


def _rot_to_quat(R):
    """Rotation matrices to unit quaternions (w, x, y, z), batched, stable.

    Uses the four-branch construction keyed on the largest diagonal
    combination so no branch divides by a small number.
    """
    R = np.asarray(R, dtype=np.float64)
    b = R.shape[:-2]
    q = np.empty(b + (4,))
    t0 = 1.0 + R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    t1 = 1.0 + R[..., 0, 0] - R[..., 1, 1] - R[..., 2, 2]
    t2 = 1.0 - R[..., 0, 0] + R[..., 1, 1] - R[..., 2, 2]
    t3 = 1.0 - R[..., 0, 0] - R[..., 1, 1] + R[..., 2, 2]
    choice = np.argmax(np.stack([t0, t1, t2, t3], axis=-1), axis=-1)

    # branch 0: w largest
    s0 = np.sqrt(np.maximum(t0, 0.0))
    q0 = np.stack([s0,
                   np.divide(R[..., 2, 1] - R[..., 1, 2], s0, out=np.zeros_like(s0), where=s0 > 0),
                   np.divide(R[..., 0, 2] - R[..., 2, 0], s0, out=np.zeros_like(s0), where=s0 > 0),
                   np.divide(R[..., 1, 0] - R[..., 0, 1], s0, out=np.zeros_like(s0), where=s0 > 0)],
                  axis=-1)
    s1 = np.sqrt(np.maximum(t1, 0.0))
    q1 = np.stack([np.divide(R[..., 2, 1] - R[..., 1, 2], s1, out=np.zeros_like(s1), where=s1 > 0),
                   s1,
                   np.divide(R[..., 0, 1] + R[..., 1, 0], s1, out=np.zeros_like(s1), where=s1 > 0),
                   np.divide(R[..., 0, 2] + R[..., 2, 0], s1, out=np.zeros_like(s1), where=s1 > 0)],
                  axis=-1)
    s2 = np.sqrt(np.maximum(t2, 0.0))
    q2 = np.stack([np.divide(R[..., 0, 2] - R[..., 2, 0], s2, out=np.zeros_like(s2), where=s2 > 0),
                   np.divide(R[..., 0, 1] + R[..., 1, 0], s2, out=np.zeros_like(s2), where=s2 > 0),
                   s2,
                   np.divide(R[..., 1, 2] + R[..., 2, 1], s2, out=np.zeros_like(s2), where=s2 > 0)],
                  axis=-1)
    s3 = np.sqrt(np.maximum(t3, 0.0))
    q3 = np.stack([np.divide(R[..., 1, 0] - R[..., 0, 1], s3, out=np.zeros_like(s3), where=s3 > 0),
                   np.divide(R[..., 0, 2] + R[..., 2, 0], s3, out=np.zeros_like(s3), where=s3 > 0),
                   np.divide(R[..., 1, 2] + R[..., 2, 1], s3, out=np.zeros_like(s3), where=s3 > 0),
                   s3],
                  axis=-1)
    stacked = np.stack([q0, q1, q2, q3], axis=-2)  # (..., 4 branch, 4 comp)
    q = np.take_along_axis(stacked, choice[..., None, None], axis=-2)[..., 0, :]
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q


def _quat_to_rot(q):
    """(..., 4) wxyz unit quaternions -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
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


def _log_so3(R):
    """Principal axis-angle vector, batched, via the quaternion chart.

    Stable arbitrarily close to pi; raises AngleNearPi inside the guard band.
    """
    q = _rot_to_quat(R)
    # map to the q_w >= 0 hemisphere so the angle lands in [0, pi]
    q = np.where(q[..., :1] < 0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    theta = 2.0 * np.arctan2(s, q[..., 0])
    if np.any(theta >= np.pi - ANGLE_PI_MARGIN):
        raise AngleNearPi(f"rotation angle {theta.max():.9f} within guard band of pi")
    factor = np.where(s > 1e-12, theta / np.where(s > 1e-12, s, 1.0), 2.0)
    return factor[..., None] * q[..., 1:]


def _exp_se3(w, v):
    """(w, v) (..., 3) each -> (R, t): R = exp(skew(w)), t = V(w) v."""
    theta = np.linalg.norm(w, axis=-1)
    A, B, C = _sincos_coeffs(theta)
    K = _skew(w)
    K2 = K @ K
    R = np.eye(3) + A[..., None, None] * K + B[..., None, None] * K2
    V = np.eye(3) + B[..., None, None] * K + C[..., None, None] * K2
    t = (V @ v[..., None])[..., 0]
    return R, t


def _log_se3(R, t):
    """Inverse of _exp_se3: w = log(R), v = V(w)^-1 t."""
    w = _log_so3(R)
    theta = np.linalg.norm(w, axis=-1)
    K = _skew(w)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    th2 = theta * theta
    safe = np.where(small, 1.0, theta)
    # D = 1/theta^2 - cot(theta/2)/(2 theta); series 1/12 + th^2/720 + th^4/30240
    D = np.where(small,
                 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0,
                 1.0 / (safe * safe) - np.cos(safe / 2) / (2.0 * safe * np.sin(safe / 2)))
    v = (np.eye(3) - 0.5 * K + D[..., None, None] * K2) @ t[..., None]
    return w, v[..., 0]


def _compose(Ra, ta, Rb, tb):
    """(a compose b): x -> a(b(x))."""
    return Ra @ Rb, (Ra @ tb[..., None])[..., 0] + ta


def _inverse(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -(Rt @ t[..., None])[..., 0]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def so3_exp(w) -> Rotation:
    """Rodrigues rotation about axis w/|w| by angle |w| (series near zero)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite rotation vector")
    return Rotation(_exp_so3(w))


def so3_log(r: Rotation) -> np.ndarray:
    """Principal axis-angle vector of a rotation; angle must stay clear of pi."""
    return _log_so3(np.asarray(r.m if isinstance(r, Rotation) else r))


def se3_exp(x: Twist) -> RigidTransform:
    """Closed-form exponential of the 4x4 twist matrix."""
    R, t = _exp_se3(x.w, x.t)
    return RigidTransform(Rotation(R), t)


def se3_log(g: RigidTransform) -> Twist:
    """Closed-form logarithm; raises AngleNearPi inside the guard band."""
    w, v = _log_se3(g.r.m, g.t)
    return Twist(w, v)


def compose(a: GroupElementN, b: GroupElementN) -> GroupElementN:
    """Componentwise composition (a_i o b_i)."""
    if a.n != b.n:
        raise LengthMismatch(f"{a.n} vs {b.n}")
    R, t = _compose(a.rot, a.trans, b.rot, b.trans)
    return GroupElementN(R, t)


def inverse(a: GroupElementN) -> GroupElementN:
    """Componentwise inverse."""
    R, t = _inverse(a.rot, a.trans)
    return GroupElementN(R, t)


def act_on_pieces(g: GroupElementN, X):
    """Apply g_i to every point of piece i.

    X may be a PieceSet-like object exposing ``pieces`` or a plain sequence
    of (M_i, 3) arrays; the same container kind is returned.
    """
    pieces = getattr(X, "pieces", X)
    if g.n != len(pieces):
        raise LengthMismatch(f"{g.n} transforms vs {len(pieces)} pieces")
    moved = tuple(p @ g.rot[i].T + g.trans[i] for i, p in enumerate(pieces))
    if hasattr(X, "pieces"):
        return replace(X, pieces=moved)
    return type(X)(moved) if isinstance(X, (list, tuple)) else moved


def sample_noise(n: int, params: NoiseParams, rng: np.random.Generator) -> GroupElementN:
    """Independent per-piece noise: Haar rotation, translation ~ N(0, omega I).

    Haar uniformity comes from normalized 4D Gaussian quaternions, which is
    exact and branch-free.
    """
    if n < 1:
        raise ValueError("need at least one piece")
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    trans = rng.normal(scale=np.sqrt(params.omega), size=(n, 3))
    return GroupElementN(_quat_to_rot(q), trans)


def stacked_covariance(g0: GroupElementN, g1_tilde: GroupElementN) -> np.ndarray:
    """M = sum_i [R1_i | t1_i] [R0_i | t0_i]^T over the stacked 3x4 blocks."""
    if g0.n != g1_tilde.n:
        raise LengthMismatch(f"{g0.n} vs {g1_tilde.n}")
    A = np.concatenate([g1_tilde.rot, g1_tilde.trans[..., None]], axis=-1)
    B = np.concatenate([g0.rot, g0.trans[..., None]], axis=-1)
    return np.einsum("nij,nkj->ik", A, B)


def rotation_correction(g0: GroupElementN, g1_tilde: GroupElementN) -> Rotation:
    """The rotation r* minimizing || r g1_tilde - g0 ||_F^2 over the stacked
    3x4 blocks, by SVD with determinant sign correction.

    Raises DegenerateCovariance when the second singular-value gap of the
    stacked covariance closes; the minimizer is then not unique and the
    caller should resample.
    """
    M = stacked_covariance(g0, g1_tilde)
    # maximize tr(r M): r* = V diag(1, 1, det(V U^T)) U^T for M = U S V^T
    U, S, Vt = np.linalg.svd(M)
    if S[1] - S[2] < DEGENERATE_GAP:
        raise DegenerateCovariance(f"singular value gap {S[1] - S[2]:.3e}")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    r = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Rotation(r)


def left_multiply(r: Rotation, g: GroupElementN) -> GroupElementN:
    """Apply one rotation diagonally on the left of every part: (r R_i, r t_i)."""
    return GroupElementN(r.m @ g.rot, g.trans @ r.m.T)


def make_path_pair(g0: GroupElementN, g1_tilde: GroupElementN):
    """Corrected endpoint and its connecting twists.

    Returns (g1, xi) with g1 = r* g1_tilde and xi_i = log(g1_i g0_i^-1), so
    that eval_path(g0, xi, 0) = g0 and eval_path(g0, xi, 1) = g1.
    Raises AngleNearPi when any relative rotation falls in the guard band;
    callers resample the noise (measure-zero event for continuous noise).
    """
    r_star = rotation_correction(g0, g1_tilde)
    g1 = left_multiply(r_star, g1_tilde)
    Rinv, tinv = _inverse(g0.rot, g0.trans)
    Rrel, trel = _compose(g1.rot, g1.trans, Rinv, tinv)
    w, v = _log_se3(Rrel, trel)
    return g1, TwistN(w, v)


def eval_path(g0: GroupElementN, xi: TwistN, tau: float) -> GroupElementN:
    """Geodesic-style interpolant exp(tau xi_i) g0_i, componentwise."""
    if not 0.0 <= tau <= 1.0:
        raise TauOutOfRange(f"tau = {tau}")
    if g0.n != xi.n:
        raise LengthMismatch(f"{g0.n} vs {xi.n}")
    Re, te = _exp_se3(tau * xi.w, tau * xi.t)
    R, t = _compose(Re, te, g0.rot, g0.trans)
    return GroupElementN(R, t)


def exp_step(xi: TwistN, g: GroupElementN, scale: float = 1.0) -> GroupElementN:
    """exp(scale xi_i) g_i, the basic integrator move."""
    if g.n != xi.n:
        raise LengthMismatch(f"{g.n} vs {xi.n}")
    Re, te = _exp_se3(scale * xi.w, scale * xi.t)
    R, t = _compose(Re, te, g.rot, g.trans)
    return GroupElementN(R, t)


def rot_to_quat(R) -> np.ndarray:
    """Batched rotation matrices to wxyz unit quaternions."""
    return _rot_to_quat(R)


def quat_to_rot(q) -> np.ndarray:
    """Batched wxyz unit quaternions to rotation matrices."""
    return _quat_to_rot(q)
