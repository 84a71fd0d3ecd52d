"""Real-basis rotation representations and equivariant message kernels.

This module provides the representation-theory layer used by the equivariant
network: Wigner matrices for the real spherical-harmonic basis, real spherical
harmonics, Clebsch-Gordan coupling tensors, and the two interchangeable
edge-message kernels (a direct tensor-product form and an edge-aligned reduced
form that exploits the banded structure of couplings evaluated on the y-axis).

Conventions (fixed throughout the package):

* Degree-l features live in the real harmonic basis with components indexed by
  m = -l..l (array index m + l).
* The degree-1 basis is ordered so that ``wigner_d(1, r)`` is the rotation
  matrix ``r`` itself and ``sph_harm(1, v) = sqrt(3/4pi) * v``.  The zenith
  direction of the harmonics is the y-axis: ``sph_harm(l, e_y)`` is nonzero
  only at m = 0.
* Features transform as column vectors on the m index: a feature block
  ``F`` of shape (..., channels, 2l+1) rotates to ``F @ wigner_d(l, r).T``.

All coupling tables are built once, validated numerically, and cached;
afterwards every operation is a pure function of its arguments and reentrant.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from math import factorial, pi, sqrt
from typing import Mapping

import numpy as np

from .lie import Rotation

__all__ = [
    "SelectionRuleViolation",
    "ZeroDirection",
    "SpecMismatch",
    "IrrepsSpec",
    "IrrepsFeature",
    "EdgeFrame",
    "wigner_d",
    "sph_harm",
    "clebsch_gordan",
    "message_paths",
    "tp_message",
    "so2_reduced_message",
    "embed_tp_weights",
    "identity_so2_weights",
    "apply_rotation",
]


class SelectionRuleViolation(ValueError):
    """Requested coupling (l_e, l_f, l_out) violates the triangle inequality."""


class ZeroDirection(ValueError):
    """A direction vector has (near-)zero length and cannot be normalized."""


class SpecMismatch(ValueError):
    """Feature blocks, edge frames, and weights disagree on shape or degree."""


# --------------------------------------------------------------------------
# Complex Clebsch-Gordan coefficients and the complex-to-real basis change.
# --------------------------------------------------------------------------


def _cg_complex(j1: int, j2: int, j: int, m1: int, m2: int, m: int) -> float:
    """Complex-basis coupling coefficient <j1 m1; j2 m2 | j m> (Racah form)."""
    if m1 + m2 != m:
        return 0.0
    if not (abs(j1 - j2) <= j <= j1 + j2):
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m) > j:
        return 0.0
    pref = (
        (2 * j + 1)
        * factorial(j1 + j2 - j)
        * factorial(j1 - j2 + j)
        * factorial(-j1 + j2 + j)
        / factorial(j1 + j2 + j + 1)
    )
    pref *= (
        factorial(j + m)
        * factorial(j - m)
        * factorial(j1 - m1)
        * factorial(j1 + m1)
        * factorial(j2 - m2)
        * factorial(j2 + m2)
    )
    total = 0.0
    kmin = max(0, j2 - j - m1, j1 + m2 - j)
    kmax = min(j1 + j2 - j, j1 - m1, j2 + m2)
    for k in range(kmin, kmax + 1):
        total += (-1) ** k / (
            factorial(k)
            * factorial(j1 + j2 - j - k)
            * factorial(j1 - m1 - k)
            * factorial(j2 + m2 - k)
            * factorial(j - j2 + m1 + k)
            * factorial(j - j1 - m2 + k)
        )
    return sqrt(pref) * total


def _u_matrix(l: int) -> np.ndarray:
    """Unitary change of basis from complex to real harmonics of degree l.

    Rows are indexed by the real component m' = -l..l, columns by the complex
    component m = -l..l (both offset by +l).
    """
    U = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    U[l, l] = 1.0
    for m in range(1, l + 1):
        U[l + m, l + m] = (-1) ** m / sqrt(2)
        U[l + m, l - m] = 1 / sqrt(2)
        U[l - m, l + m] = -1j * (-1) ** m / sqrt(2)
        U[l - m, l - m] = 1j / sqrt(2)
    return U


# Raw coupling tensors keyed by (l_e, l_f, l_out); guarded by _TABLE_LOCK while
# being built, read-only afterwards.
_COUPLING_CACHE: dict[tuple[int, int, int], np.ndarray] = {}
_VALIDATED: set[tuple[int, int, int]] = set()
_TABLE_LOCK = threading.Lock()


def _build_coupling(le: int, lf: int, lo: int) -> np.ndarray:
    """Real-basis coupling tensor C[a, b, c], a=m_e+le, b=m_f+lf, c=m_out+lo.

    The complex tensor conjugated into the real basis equals a global
    unimodular phase times a real tensor (the coupling space has multiplicity
    one); the phase is stripped and the residual imaginary part is required to
    vanish to near machine precision.
    """
    Ue, Uf, Uo = _u_matrix(le), _u_matrix(lf), _u_matrix(lo)
    Cc = np.zeros((2 * le + 1, 2 * lf + 1, 2 * lo + 1), dtype=complex)
    for me in range(-le, le + 1):
        for mf in range(-lf, lf + 1):
            for mo in range(-lo, lo + 1):
                Cc[le + me, lf + mf, lo + mo] = _cg_complex(le, lf, lo, me, mf, mo)
    T = np.einsum("cw,uvw,au,bv->abc", Uo, Cc, Ue.conj(), Uf.conj())
    flat = T.ravel()
    k = int(np.argmax(np.abs(flat)))
    T = T / (flat[k] / abs(flat[k]))
    residue = float(np.abs(T.imag).max())
    if residue > 1e-12:
        raise RuntimeError(
            f"coupling tensor ({le},{lf},{lo}) is not a phase times a real "
            f"tensor (imaginary residue {residue:.3e})"
        )
    out = np.ascontiguousarray(T.real)
    out.setflags(write=False)
    return out


def _coupling(le: int, lf: int, lo: int) -> np.ndarray:
    """Fetch (building and caching if needed) the raw coupling tensor."""
    key = (le, lf, lo)
    hit = _COUPLING_CACHE.get(key)
    if hit is not None:
        return hit
    with _TABLE_LOCK:
        hit = _COUPLING_CACHE.get(key)
        if hit is None:
            hit = _build_coupling(le, lf, lo)
            _COUPLING_CACHE[key] = hit
    return hit


# A fixed, arbitrary test rotation used for one-time validation of cached
# tables (axis-angle (0.3, -0.7, 0.5); nothing special about the values
# beyond being far from all symmetry axes of the bases involved).
_VALIDATION_ROTATION: np.ndarray | None = None


def _validation_rotation() -> np.ndarray:
    global _VALIDATION_ROTATION
    if _VALIDATION_ROTATION is None:
        w = np.array([0.3, -0.7, 0.5])
        theta = np.linalg.norm(w)
        k = w / theta
        K = np.array(
            [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
        )
        _VALIDATION_ROTATION = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)
    return _VALIDATION_ROTATION


def clebsch_gordan(l_e: int, l_f: int, l_out: int) -> np.ndarray:
    """Real-basis coupling tensor of shape (2l_e+1, 2l_f+1, 2l_out+1).

    Contracting two equivariant inputs against the first two axes yields an
    equivariant output on the third:
    ``einsum('a,b,abc->c', D_e x, D_f y, C) == D_out @ einsum('a,b,abc->c', x, y, C)``.

    Raises SelectionRuleViolation when (l_e, l_f, l_out) violates the triangle
    inequality or any degree is negative.  The returned array is a read-only
    cached table; each distinct tensor is validated once against the
    equivariance identity at a fixed rotation before being served.
    """
    for l in (l_e, l_f, l_out):
        if not isinstance(l, (int, np.integer)) or l < 0:
            raise SelectionRuleViolation(f"degrees must be nonnegative ints, got {l!r}")
    if not (abs(l_e - l_f) <= l_out <= l_e + l_f):
        raise SelectionRuleViolation(
            f"(l_e={l_e}, l_f={l_f}, l_out={l_out}) violates "
            f"|l_e-l_f| <= l_out <= l_e+l_f"
        )
    C = _coupling(l_e, l_f, l_out)
    key = (l_e, l_f, l_out)
    if key not in _VALIDATED:
        r = _validation_rotation()
        De, Df, Do = wigner_d(l_e, r), wigner_d(l_f, r), wigner_d(l_out, r)
        lhs = np.einsum("abc,au,bv->uvc", C, De, Df)
        rhs = np.einsum("abw,cw->abc", C, Do)
        err = float(np.abs(lhs - rhs).max())
        if err > 1e-10:
            raise RuntimeError(
                f"cached coupling ({l_e},{l_f},{l_out}) failed the "
                f"equivariance identity (max abs error {err:.3e})"
            )
        flat = C.reshape(-1, 2 * l_out + 1)
        gram = flat.T @ flat
        if float(np.abs(gram - gram[0, 0] * np.eye(2 * l_out + 1)).max()) > 1e-12:
            raise RuntimeError(
                f"cached coupling ({l_e},{l_f},{l_out}) does not have "
                f"orthogonal output columns"
            )
        with _TABLE_LOCK:
            _VALIDATED.add(key)
    return C


# --------------------------------------------------------------------------
# Wigner matrices and real spherical harmonics.
# --------------------------------------------------------------------------


def _as_matrix(r) -> np.ndarray:
    if isinstance(r, Rotation):
        return r.m
    m = np.asarray(r, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise SpecMismatch(f"rotation input must have shape (..., 3, 3), got {m.shape}")
    return m


def wigner_d(l: int, r) -> np.ndarray:
    """Degree-l rotation matrix in the real harmonic basis.

    ``r`` may be a Rotation or an array of shape (..., 3, 3); the result has
    shape (..., 2l+1, 2l+1).  The map is a homomorphism — ``wigner_d(l, r1 @ r2)
    == wigner_d(l, r1) @ wigner_d(l, r2)`` — and every output is orthogonal.
    Degree 0 is the trivial representation; degree 1 returns ``r`` itself.

    Higher degrees are assembled recursively by coupling degree l-1 with
    degree 1 through the (l-1, 1, l) coupling tensor, whose reshaped form is an
    orthonormal projector onto the degree-l subspace of the product.
    """
    if not isinstance(l, (int, np.integer)) or l < 0:
        raise SelectionRuleViolation(f"degree must be a nonnegative int, got {l!r}")
    m = _as_matrix(r)
    if l == 0:
        return np.ones(m.shape[:-2] + (1, 1))
    if l == 1:
        return m
    Dp = wigner_d(l - 1, m)
    Q = _coupling(l - 1, 1, l)  # (2l-1, 3, 2l+1)
    return np.einsum("abM,...ac,...bd,cdN->...MN", Q, Dp, m, Q, optimize=True)


def sph_harm(l: int, direction) -> np.ndarray:
    """Real spherical harmonics of degree l, batched over leading axes.

    ``direction`` has shape (..., 3) and should be unit length (inputs are
    normalized defensively; vectors with norm below 1e-12 raise
    ZeroDirection).  The result has shape (..., 2l+1) and satisfies the
    equivariance identity ``sph_harm(l, r @ v) == wigner_d(l, r) @ sph_harm(l, v)``
    and the constant-sum-of-squares identity
    ``sum_m sph_harm(l, v)[m]**2 == (2l+1)/(4 pi)``.
    """
    if not isinstance(l, (int, np.integer)) or l < 0:
        raise SelectionRuleViolation(f"degree must be a nonnegative int, got {l!r}")
    v = np.asarray(direction, dtype=float)
    if v.shape[-1:] != (3,):
        raise SpecMismatch(f"direction must have shape (..., 3), got {v.shape}")
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm < 1e-12):
        raise ZeroDirection("direction vector has near-zero length")
    x = v[..., 0] / norm
    y = v[..., 1] / norm
    z = v[..., 2] / norm

    # Associated-Legendre-style table Q[(deg, m)] = P_deg^m(y) / sin^m(theta),
    # a polynomial in y = cos(theta) (zenith along the y-axis), with the
    # Condon-Shortley sign folded in.
    Q: dict[tuple[int, int], np.ndarray] = {(0, 0): np.ones_like(y)}
    for m in range(0, l + 1):
        if m > 0:
            Q[(m, m)] = -(2 * m - 1) * Q[(m - 1, m - 1)]
        if m + 1 <= l:
            Q[(m + 1, m)] = (2 * m + 1) * y * Q[(m, m)]
        for deg in range(m + 2, l + 1):
            Q[(deg, m)] = (
                (2 * deg - 1) * y * Q[(deg - 1, m)] - (deg - 1 + m) * Q[(deg - 2, m)]
            ) / (deg - m)

    # Azimuthal factors: cos_m + i sin_m = (z + i x)^m, so that the azimuth is
    # measured from the z-axis toward the x-axis around the y zenith.
    cos_m = [np.ones_like(y)]
    sin_m = [np.zeros_like(y)]
    for m in range(1, l + 1):
        cos_m.append(cos_m[-1] * z - sin_m[-1] * x)
        sin_m.append(sin_m[-1] * z + cos_m[-2] * x)

    out = np.zeros(v.shape[:-1] + (2 * l + 1,))
    for m in range(0, l + 1):
        scale = sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m))
        if m == 0:
            out[..., l] = scale * Q[(l, 0)]
        else:
            base = (-1) ** m * sqrt(2) * scale * Q[(l, m)]
            out[..., l + m] = base * cos_m[m]
            out[..., l - m] = base * sin_m[m]
    return out


# --------------------------------------------------------------------------
# Feature containers and edge frames.
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IrrepsSpec:
    """Shape declaration for a stack of rotation-equivariant features.

    ``l_max`` is the highest retained degree and ``channels`` the channel
    count per degree; every degree carries the same number of channels.
    """

    l_max: int = 2
    channels: int = 1

    def __post_init__(self):
        if not isinstance(self.l_max, (int, np.integer)) or self.l_max < 0:
            raise SpecMismatch(f"l_max must be a nonnegative int, got {self.l_max!r}")
        if not isinstance(self.channels, (int, np.integer)) or self.channels < 1:
            raise SpecMismatch(f"channels must be a positive int, got {self.channels!r}")

    @property
    def dim(self) -> int:
        """Total flattened length: channels * sum_l (2l+1)."""
        return self.channels * (self.l_max + 1) ** 2

    def zeros(self, leading: tuple[int, ...] = ()) -> "IrrepsFeature":
        blocks = tuple(
            np.zeros(tuple(leading) + (self.channels, 2 * l + 1))
            for l in range(self.l_max + 1)
        )
        return IrrepsFeature(blocks)


@dataclass(frozen=True)
class IrrepsFeature:
    """A tuple of per-degree feature blocks sharing leading (batch) axes.

    Block l has shape ``leading + (channels, 2l+1)``.  Under a rotation ``r``
    the container transforms blockwise as ``block @ wigner_d(l, r).T``
    (see :func:`apply_rotation`).
    """

    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=float) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise SpecMismatch("IrrepsFeature needs at least the degree-0 block")
        lead = blocks[0].shape[:-2]
        ch = blocks[0].shape[-2] if blocks[0].ndim >= 2 else None
        for l, b in enumerate(blocks):
            if b.ndim < 2 or b.shape[-1] != 2 * l + 1:
                raise SpecMismatch(
                    f"degree-{l} block must have shape (..., channels, {2*l+1}), "
                    f"got {b.shape}"
                )
            if b.shape[:-2] != lead or b.shape[-2] != ch:
                raise SpecMismatch(
                    f"degree-{l} block shape {b.shape} disagrees with degree-0 "
                    f"shape {blocks[0].shape} on leading/channel axes"
                )

    @property
    def l_max(self) -> int:
        return len(self.blocks) - 1

    @property
    def channels(self) -> int:
        return self.blocks[0].shape[-2]

    @property
    def leading_shape(self) -> tuple[int, ...]:
        return self.blocks[0].shape[:-2]

    @property
    def spec(self) -> IrrepsSpec:
        return IrrepsSpec(self.l_max, self.channels)

    def validate(self) -> "IrrepsFeature":
        """Check all entries are finite; returns self for chaining."""
        for l, b in enumerate(self.blocks):
            if not np.all(np.isfinite(b)):
                raise SpecMismatch(f"degree-{l} block contains non-finite entries")
        return self


def apply_rotation(feature: IrrepsFeature, r) -> IrrepsFeature:
    """Rotate every block of ``feature``: block_l -> block_l @ wigner_d(l, r).T.

    ``r`` is a Rotation or an array broadcastable against the feature's
    leading axes (shape (..., 3, 3)).
    """
    m = _as_matrix(r)
    out = []
    for l, b in enumerate(feature.blocks):
        D = wigner_d(l, m)
        out.append(np.matmul(b, np.swapaxes(D, -1, -2)))
    return IrrepsFeature(tuple(out))


def _align_to_y(direction: np.ndarray) -> np.ndarray:
    """Rotation matrices mapping each unit vector in ``direction`` to (0,1,0).

    Rotates about the axis perpendicular to the vector and the y-axis; inputs
    already along +y map to the identity and inputs along -y map to a half
    turn about the x-axis.
    """
    d = direction
    cos_a = d[..., 1]
    y_axis = np.zeros_like(d)
    y_axis[..., 1] = 1.0
    axis = np.cross(d, y_axis)
    sin_a = np.linalg.norm(axis, axis=-1)
    unit_axis = np.zeros_like(d)
    regular = sin_a > 1e-12
    unit_axis[regular] = axis[regular] / sin_a[regular][..., None]
    K = np.zeros(d.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -unit_axis[..., 2], unit_axis[..., 1]
    K[..., 1, 0], K[..., 1, 2] = unit_axis[..., 2], -unit_axis[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -unit_axis[..., 1], unit_axis[..., 0]
    out = (
        np.broadcast_to(np.eye(3), K.shape).copy()
        + sin_a[..., None, None] * K
        + (1 - cos_a)[..., None, None] * (K @ K)
    )
    antipodal = (~regular) & (cos_a < 0)
    out[antipodal] = np.diag([1.0, -1.0, -1.0])
    return out


@dataclass(frozen=True)
class EdgeFrame:
    """Per-edge geometry: an aligning rotation plus cached representation data.

    For each edge displacement v the frame stores the rotation ``r_align``
    with ``r_align @ (v/|v|) = (0, 1, 0)`` and the length ``dist = |v| > 0``.
    Construction precomputes, per degree up to ``l_max``, the Wigner matrices
    of ``r_align`` and the spherical harmonics of the edge direction, so that
    repeated message passes over the same edge set pay for geometry only once.

    Arrays are batched: ``r_align`` has shape (..., 3, 3) and ``dist`` (...,).
    """

    r_align: np.ndarray
    dist: np.ndarray
    rot_blocks: tuple[np.ndarray, ...] = field(repr=False)
    harmonics: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_displacements(cls, displacement, l_max: int = 2) -> "EdgeFrame":
        """Build frames from displacement vectors of shape (..., 3).

        Raises ZeroDirection if any displacement has near-zero length.
        """
        v = np.asarray(displacement, dtype=float)
        if v.shape[-1:] != (3,):
            raise SpecMismatch(f"displacement must have shape (..., 3), got {v.shape}")
        dist = np.linalg.norm(v, axis=-1)
        if np.any(dist < 1e-12):
            raise ZeroDirection("edge displacement has near-zero length")
        direction = v / dist[..., None]
        r_align = _align_to_y(direction)
        rot_blocks = tuple(
            np.ascontiguousarray(wigner_d(l, r_align)) for l in range(l_max + 1)
        )
        harmonics = tuple(sph_harm(l, direction) for l in range(l_max + 1))
        for arr in rot_blocks + harmonics:
            arr.setflags(write=False)
        r_align = np.ascontiguousarray(r_align)
        r_align.setflags(write=False)
        dist = np.ascontiguousarray(dist)
        dist.setflags(write=False)
        return cls(r_align=r_align, dist=dist, rot_blocks=rot_blocks, harmonics=harmonics)

    @property
    def l_max(self) -> int:
        return len(self.rot_blocks) - 1

    @property
    def direction(self) -> np.ndarray:
        """Unit edge direction; the middle row of r_align (r_align.T @ e_y)."""
        return self.r_align[..., 1, :]

    @property
    def leading_shape(self) -> tuple[int, ...]:
        return self.dist.shape

    def check(self, tol: float = 1e-9) -> "EdgeFrame":
        """Verify r_align maps the stored direction to (0,1,0) within tol."""
        mapped = np.einsum("...ij,...j->...i", self.r_align, self.direction)
        target = np.zeros_like(mapped)
        target[..., 1] = 1.0
        err = float(np.abs(mapped - target).max())
        if err > tol:
            raise SpecMismatch(f"r_align misaligns direction by {err:.3e} > {tol:g}")
        if np.any(self.dist <= 0):
            raise SpecMismatch("edge distances must be positive")
        return self


# --------------------------------------------------------------------------
# Message kernels.
# --------------------------------------------------------------------------


def message_paths(l_max: int) -> tuple[tuple[int, int, int], ...]:
    """All coupling paths (l_out, l_e, l_f) with every degree at most l_max.

    l_e ranges over the triangle-compatible degrees |l_out - l_f| .. l_out + l_f,
    capped at l_max.
    """
    return tuple(
        (lo, le, lf)
        for lo in range(l_max + 1)
        for lf in range(l_max + 1)
        for le in range(abs(lo - lf), min(lo + lf, l_max) + 1)
    )


def _check_message_inputs(feature: IrrepsFeature, edge: EdgeFrame) -> None:
    if feature.l_max > edge.l_max:
        raise SpecMismatch(
            f"edge frame caches degrees up to {edge.l_max} but the feature has "
            f"degree {feature.l_max}; rebuild the frame with a larger l_max"
        )
    if feature.leading_shape != edge.leading_shape:
        raise SpecMismatch(
            f"feature leading shape {feature.leading_shape} does not match the "
            f"edge batch shape {edge.leading_shape}"
        )


def _coeff_array(coeffs: Mapping, key: tuple[int, int, int], feature: IrrepsFeature) -> np.ndarray:
    try:
        c = np.asarray(coeffs[key], dtype=float)
    except KeyError:
        raise SpecMismatch(f"missing radial coefficient for path {key}") from None
    want = feature.leading_shape + (feature.channels,)
    try:
        return np.broadcast_to(c, want)
    except ValueError:
        raise SpecMismatch(
            f"coefficient for path {key} has shape {c.shape}, not broadcastable "
            f"to {want}"
        ) from None


def tp_message(feature: IrrepsFeature, edge: EdgeFrame, coeffs: Mapping) -> IrrepsFeature:
    """Direct tensor-product edge message.

    For every path (l_out, l_e, l_f) the degree-l_f feature block is coupled
    with the degree-l_e harmonics of the edge direction through the coupling
    tensor and scaled per channel by the radial coefficient for that path:

        out[l_out] = sum_paths coeff * einsum(Y_le(dir), F_lf, C)

    ``coeffs`` maps each path triple from :func:`message_paths` (over the
    feature's degree range) to an array broadcastable to
    ``leading + (channels,)``.  Missing paths raise SpecMismatch.
    """
    _check_message_inputs(feature, edge)
    L = feature.l_max
    out = []
    for lo in range(L + 1):
        acc = np.zeros(feature.leading_shape + (feature.channels, 2 * lo + 1))
        for (lo2, le, lf) in message_paths(L):
            if lo2 != lo:
                continue
            C = clebsch_gordan(le, lf, lo)
            coupled = np.einsum(
                "...a,...cb,abm->...cm",
                edge.harmonics[le],
                feature.blocks[lf],
                C,
                optimize=True,
            )
            acc += _coeff_array(coeffs, (lo, le, lf), feature)[..., None] * coupled
        out.append(acc)
    return IrrepsFeature(tuple(out))


def _pair_band_sizes(l_out: int, l_f: int) -> int:
    return min(l_out, l_f)


def embed_tp_weights(coeffs: Mapping, feature: IrrepsFeature) -> dict:
    """Convert per-path radial coefficients into banded per-pair weights.

    Evaluated in the edge-aligned frame the harmonics collapse to their m=0
    component and each coupling tensor's m_e = 0 slice is banded: output
    component l_out + m mixes only with input components l_f ± m.  The
    returned dict maps (l_out, l_f) to a pair (a, b) where
    ``a[..., channels, m]`` (m = 0..min(l_out,l_f)) scales the co-rotating
    combination and ``b[..., channels, m-1]`` (m = 1..min) the counter-rotating
    one, accumulated over all l_e paths:

        a_m = sum_le Y_le(e_y)[0] * coeff[(l_out, le, l_f)] * C_le[l_f+m, l_out+m]
        b_m = sum_le Y_le(e_y)[0] * coeff[(l_out, le, l_f)] * C_le[l_f-m, l_out+m]
    """
    L = feature.l_max
    lead = feature.leading_shape
    ch = feature.channels
    y_axis_value = {
        le: sqrt((2 * le + 1) / (4 * pi)) for le in range(L + 1)
    }
    weights: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for lo in range(L + 1):
        for lf in range(L + 1):
            mmin = _pair_band_sizes(lo, lf)
            a = np.zeros(lead + (ch, mmin + 1))
            b = np.zeros(lead + (ch, mmin))
            for le in range(abs(lo - lf), min(lo + lf, L) + 1):
                C = clebsch_gordan(le, lf, lo)[le]  # m_e = 0 slice
                w = y_axis_value[le] * _coeff_array(coeffs, (lo, le, lf), feature)
                for m in range(mmin + 1):
                    a[..., m] += w * C[lf + m, lo + m]
                for m in range(1, mmin + 1):
                    b[..., m - 1] += w * C[lf - m, lo + m]
            weights[(lo, lf)] = (a, b)
    return weights


def identity_so2_weights(feature: IrrepsFeature) -> dict:
    """Banded weights that make so2_reduced_message the identity map.

    Diagonal pairs (l, l) carry a = 1 for every m and b = 0; off-diagonal
    pairs carry zeros.
    """
    L = feature.l_max
    lead = feature.leading_shape
    ch = feature.channels
    weights = {}
    for lo in range(L + 1):
        for lf in range(L + 1):
            mmin = _pair_band_sizes(lo, lf)
            a = np.zeros(lead + (ch, mmin + 1))
            if lo == lf:
                a[...] = 1.0
            b = np.zeros(lead + (ch, mmin))
            weights[(lo, lf)] = (a, b)
    return weights


def _check_so2_weights(weights: Mapping, feature: IrrepsFeature) -> None:
    L = feature.l_max
    lead = feature.leading_shape
    ch = feature.channels
    for lo in range(L + 1):
        for lf in range(L + 1):
            if (lo, lf) not in weights:
                raise SpecMismatch(f"missing banded weights for pair {(lo, lf)}")
            a, b = weights[(lo, lf)]
            mmin = _pair_band_sizes(lo, lf)
            if np.shape(a)[-1] != mmin + 1 or np.shape(a)[:-1] != lead + (ch,):
                raise SpecMismatch(
                    f"pair {(lo, lf)}: co-rotating weights have shape "
                    f"{np.shape(a)}, expected {lead + (ch, mmin + 1)}"
                )
            if np.shape(b)[-1] != mmin or np.shape(b)[:-1] != lead + (ch,):
                raise SpecMismatch(
                    f"pair {(lo, lf)}: counter-rotating weights have shape "
                    f"{np.shape(b)}, expected {lead + (ch, mmin)}"
                )


def so2_reduced_message(feature: IrrepsFeature, edge: EdgeFrame, weights: Mapping) -> IrrepsFeature:
    """Edge-aligned reduced message, numerically equal to :func:`tp_message`.

    The feature is rotated into the frame where the edge direction is the
    y-axis; there the coupling acts independently on each |m| pair through
    2x2 rotation-like blocks (the banded weights), and the result is rotated
    back.  ``weights`` maps (l_out, l_f) to the (a, b) band arrays produced by
    :func:`embed_tp_weights` (or learned directly in that parametrization).

    The per-edge Wigner matrices are cached in the EdgeFrame, so each call
    performs only batched matrix products and banded channel mixing, which is
    substantially faster than the per-path tensor contraction of tp_message.
    """
    _check_message_inputs(feature, edge)
    _check_so2_weights(weights, feature)
    L = feature.l_max
    aligned = [
        np.matmul(feature.blocks[lf], np.swapaxes(edge.rot_blocks[lf], -1, -2))
        for lf in range(L + 1)
    ]
    out = []
    for lo in range(L + 1):
        acc = np.zeros(feature.leading_shape + (feature.channels, 2 * lo + 1))
        for lf in range(L + 1):
            a, b = weights[(lo, lf)]
            src = aligned[lf]
            acc[..., lo] += a[..., 0] * src[..., lf]
            for m in range(1, _pair_band_sizes(lo, lf) + 1):
                am = a[..., m]
                bm = b[..., m - 1]
                acc[..., lo + m] += am * src[..., lf + m] + bm * src[..., lf - m]
                acc[..., lo - m] += -bm * src[..., lf + m] + am * src[..., lf - m]
        out.append(np.matmul(acc, edge.rot_blocks[lo]))
    return IrrepsFeature(tuple(out))
