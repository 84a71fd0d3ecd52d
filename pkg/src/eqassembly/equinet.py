"""Rotation- and permutation-equivariant point network predicting per-piece twists.

The network consumes a multi-piece point cloud in its current pose together
with a scalar progress variable, and returns one body-frame velocity (a
rotation generator and a translation rate) per piece.  It is built from:

* farthest-point downsampling blocks (subsample, then attend from the full
  set onto the subset),
* paired self/cross attention blocks that exchange information within and
  across pieces,
* an equivariant gated nonlinearity and an adaptive normalization layer that
  injects the progress variable through learned channel scales,
* a per-piece mean-pool head mapping pooled degree-1 features to the two
  output vectors.

Every layer commutes with global rotations (features transform by the
degree-wise rotation matrices) and with permutations of the pieces; all
positions enter only through relative displacements, so a global translation
of the whole scene leaves the prediction unchanged.

Attention messages use the edge-aligned banded kernel: neighbor features are
rotated so the edge lies on the y-axis, mixed per |m| band by radially
learned 2x2 rotation-style weights, channel-mixed, and rotated back — the
fast equivalent of the direct tensor-product message (see irreps).

Checkpoints are a single file: a human-readable JSON header line describing
the configuration and a named-array manifest, followed by raw little-endian
float32 buffers.  Reloading restores every parameter bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .irreps import EdgeFrame, IrrepsFeature
from .lie import GroupElementN, TwistN
from .tensorcore import Tensor

__all__ = [
    "EmptyNeighborhood",
    "PieceTooSmall",
    "CheckpointError",
    "ModelConfig",
    "TimeEmbedding",
    "GraphBatch",
    "EquivariantNet",
    "farthest_point_indices",
    "feature_sigma",
    "write_checkpoint",
    "read_checkpoint",
]


class EmptyNeighborhood(ValueError):
    """A query point has no valid attention neighbors (piece with < 2 points)."""


class PieceTooSmall(ValueError):
    """Downsampling would shrink a piece below the 2 points attention needs."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with the model."""


# ---------------------------------------------------------------------------
# Configuration and time embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the equivariant network.

    ``channels`` must be divisible by ``heads``; ``dtype`` selects the
    parameter/feature precision ("float32" for training, "float64" for
    tight numerical property checks).
    """

    n_croco_blocks: int = 2
    n_downsample: int = 4
    downsample_ratio: float = 0.25
    k_neighbors: int = 10
    l_max: int = 2
    channels: int = 64
    heads: int = 4
    radial_basis: int = 8
    radial_hidden: int = 16
    time_features: int = 16
    radial_cutoff: float = 2.0
    elu_degree0_literal: bool = False
    eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        positive = {
            "n_croco_blocks": self.n_croco_blocks,
            "n_downsample": self.n_downsample,
            "k_neighbors": self.k_neighbors,
            "l_max": self.l_max,
            "channels": self.channels,
            "heads": self.heads,
            "radial_basis": self.radial_basis,
            "radial_hidden": self.radial_hidden,
            "time_features": self.time_features,
        }
        for name, value in positive.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                if name == "n_downsample" and value == 0:
                    continue
                raise ValueError(f"{name} must be a positive int, got {value!r}")
        if not (0.0 < self.downsample_ratio <= 1.0):
            raise ValueError(f"downsample_ratio must be in (0, 1], got {self.downsample_ratio}")
        if self.channels % self.heads != 0:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})"
            )
        if self.time_features % 2 != 0:
            raise ValueError("time_features must be even (sin/cos pairs)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if self.radial_cutoff <= 0 or self.eps <= 0:
            raise ValueError("radial_cutoff and eps must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "n_croco_blocks": self.n_croco_blocks,
            "n_downsample": self.n_downsample,
            "downsample_ratio": self.downsample_ratio,
            "k_neighbors": self.k_neighbors,
            "l_max": self.l_max,
            "channels": self.channels,
            "heads": self.heads,
            "radial_basis": self.radial_basis,
            "radial_hidden": self.radial_hidden,
            "time_features": self.time_features,
            "radial_cutoff": self.radial_cutoff,
            "elu_degree0_literal": self.elu_degree0_literal,
            "eps": self.eps,
            "dtype": self.dtype,
        }


@dataclass(frozen=True)
class TimeEmbedding:
    """Invariant features of the progress variable, one row per sample.

    ``tau`` holds the raw values in [0, 1] with shape (samples,); ``vector``
    holds sinusoidal features of geometrically spaced frequencies, shape
    (samples, time_features).  Both are invariant under every spatial action
    on the point clouds.
    """

    tau: np.ndarray
    vector: np.ndarray

    @classmethod
    def build(cls, tau, n_features: int, dtype=np.float64) -> "TimeEmbedding":
        t = np.atleast_1d(np.asarray(tau, dtype=np.float64))
        if t.ndim != 1:
            raise ValueError(f"tau must be scalar or 1-d, got shape {t.shape}")
        half = n_features // 2
        freqs = np.pi * (2.0 ** np.arange(half))
        angles = t[:, None] * freqs[None, :]
        vec = np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)
        return cls(tau=t, vector=vec)


# ---------------------------------------------------------------------------
# Graph construction: KNN tables and farthest-point sampling
# ---------------------------------------------------------------------------


def _stable_knn(dist_row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries, ties broken by position."""
    order = np.argsort(dist_row, kind="stable")
    return order[:k]


@dataclass
class GraphBatch:
    """A flat multi-sample point set with features and neighbor tables.

    ``points`` (n, 3) are current-pose coordinates (float64 geometry);
    ``piece_id`` numbers pieces globally across the batch (so each
    (sample, piece) pair has a unique id); ``sample_id`` says which assembly
    a point belongs to.  ``features`` holds one tensor per degree, shape
    (n, channels, 2l+1).  Neighbor tables are dense: ``idx`` (n_q, width)
    indexes source rows, ``mask`` (n_q, width) adds 0 for valid slots and
    -inf for padding.  Self tables never contain the query point itself and
    never cross piece boundaries; cross tables only connect distinct pieces
    of the same sample.
    """

    points: np.ndarray
    piece_id: np.ndarray
    sample_id: np.ndarray
    features: list[Tensor]
    n_pieces: int
    n_samples: int
    tables: dict = field(default_factory=dict, repr=False)

    def piece_sizes(self) -> np.ndarray:
        return np.bincount(self.piece_id, minlength=self.n_pieces)


def _neighbor_tables(
    points: np.ndarray,
    piece_id: np.ndarray,
    sample_id: np.ndarray,
    k: int,
    mode: str,
    query_rows: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense (idx, mask) tables for the given queries.

    mode 'self': up to k nearest points of the query's own piece, excluding
    the query row itself.  mode 'cross': up to k nearest points in each other
    piece of the same sample.  Raises EmptyNeighborhood if any query ends up
    with zero valid slots.
    """
    n_q = len(query_rows)
    if mode == "self":
        width = k
    elif mode == "cross":
        max_other = 0
        for s in np.unique(sample_id):
            pieces = np.unique(piece_id[sample_id == s])
            max_other = max(max_other, len(pieces) - 1)
        width = k * max(max_other, 1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    idx = np.zeros((n_q, width), dtype=np.int64)
    mask = np.full((n_q, width), -np.inf)

    q_piece = piece_id[query_rows]
    q_sample = sample_id[query_rows]
    for s in np.unique(q_sample):
        sample_pieces = np.unique(piece_id[sample_id == s])
        for p in sample_pieces:
            q_sel = np.flatnonzero((q_piece == p) & (q_sample == s))
            if q_sel.size == 0:
                continue
            q_pts = points[query_rows[q_sel]]
            if mode == "self":
                src_rows = np.flatnonzero(piece_id == p)
                d = np.linalg.norm(q_pts[:, None, :] - points[src_rows][None, :, :], axis=-1)
                # exclude the query row itself wherever it appears as a source
                same = query_rows[q_sel][:, None] == src_rows[None, :]
                d[same] = np.inf
                for row, qi in enumerate(q_sel):
                    take = min(k, src_rows.size - int(same[row].sum()))
                    if take <= 0:
                        raise EmptyNeighborhood(
                            f"piece {p} has no valid self-attention neighbors "
                            f"(needs at least 2 points)"
                        )
                    near = _stable_knn(d[row], take)
                    idx[qi, :take] = src_rows[near]
                    mask[qi, :take] = 0.0
            else:
                col = 0
                others = [pp for pp in sample_pieces if pp != p]
                if not others:
                    raise EmptyNeighborhood(
                        f"sample {s} has a single piece; cross attention "
                        f"needs at least 2 pieces"
                    )
                for pp in others:
                    src_rows = np.flatnonzero(piece_id == pp)
                    take = min(k, src_rows.size)
                    d = np.linalg.norm(
                        q_pts[:, None, :] - points[src_rows][None, :, :], axis=-1
                    )
                    for row, qi in enumerate(q_sel):
                        near = _stable_knn(d[row], take)
                        idx[qi, col : col + take] = src_rows[near]
                        mask[qi, col : col + take] = 0.0
                    col += take
    if np.any(np.all(mask == -np.inf, axis=1)):
        raise EmptyNeighborhood("a query point has no valid neighbors")
    return idx, mask


def farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point subset of ``points``; deterministic.

    Starts from the first point, then repeatedly adds the point with the
    largest distance to the selected set, ties broken by the smallest index.
    Returns ``count`` indices in selection order.
    """
    n = len(points)
    if count < 1 or count > n:
        raise ValueError(f"cannot select {count} of {n} points")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = 0
    best = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(best))  # argmax takes the first maximum: index tiebreak
        chosen[i] = nxt
        best = np.minimum(best, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def _band_sizes(l_max: int) -> list[tuple[int, int, int]]:
    """(l_out, l_f, mmin) for every degree pair."""
    return [
        (lo, lf, min(lo, lf)) for lo in range(l_max + 1) for lf in range(l_max + 1)
    ]


def _band_patterns(l_max: int, dtype) -> dict:
    """Constant expansion matrices for the banded mixing.

    For each degree pair (l_out, l_f), EA[m, o] spreads the co-rotating
    coefficient a_m onto output slots o = l_out ± m, and EB[m-1, o] spreads
    the counter-rotating coefficient b_m with + at l_out + m and - at
    l_out - m.  Together with a center-aligned resize of the source block
    (and of its m-reversed copy) they realize the edge-aligned band rule
    out[l_out ± m] = a_m * src[l_f ± m] ± b_m * src[l_f ∓ m].
    """
    out = {}
    for lo, lf, mmin in _band_sizes(l_max):
        ea = np.zeros((mmin + 1, 2 * lo + 1), dtype=dtype)
        ea[0, lo] = 1.0
        eb = np.zeros((mmin, 2 * lo + 1), dtype=dtype) if mmin else None
        for m in range(1, mmin + 1):
            ea[m, lo + m] = 1.0
            ea[m, lo - m] = 1.0
            eb[m - 1, lo + m] = 1.0
            eb[m - 1, lo - m] = -1.0
        out[(lo, lf)] = (ea, eb)
    return out


class EquivariantNet:
    """The twist-prediction network: parameters, layers, and persistence."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._patterns = _band_patterns(config.l_max, config.np_dtype)

    # -- construction --------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "EquivariantNet":
        """Randomly initialized network (deterministic in ``seed``)."""
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        c, h = config.channels, config.radial_hidden
        L = config.l_max
        params: dict[str, Tensor] = {}

        def par(name, arr):
            params[name] = tc.parameter(arr.astype(dt), name=name)

        def linear_block(prefix, zero_out=False):
            """One attention unit: norm scales, Q/K/V/O maps, radial nets."""
            par(f"{prefix}/an/w", np.zeros((config.time_features, c)))
            par(f"{prefix}/an/b", np.ones(c))
            d_total = c // config.heads * (L + 1) ** 2
            for l in range(L + 1):
                par(
                    f"{prefix}/q/l{l}",
                    rng.normal(size=(c, c)) / math.sqrt(c) / d_total**0.25,
                )
                par(
                    f"{prefix}/o/l{l}",
                    np.zeros((c, c)) if zero_out else rng.normal(size=(c, c)) / math.sqrt(c),
                )
            for side in ("k", "v"):
                par(f"{prefix}/{side}/w1", rng.normal(size=(config.radial_basis, h)) / math.sqrt(config.radial_basis))
                par(f"{prefix}/{side}/b1", np.zeros(h))
                scl = 1.0 / math.sqrt(h) / (d_total**0.25 if side == "k" else 1.0)
                for lo, lf, mmin in _band_sizes(L):
                    par(
                        f"{prefix}/{side}/a/{lo}{lf}",
                        rng.normal(size=(h, c, mmin + 1)) * scl,
                    )
                    if mmin:
                        par(
                            f"{prefix}/{side}/b/{lo}{lf}",
                            rng.normal(size=(h, c, mmin)) * scl,
                        )
                for l in range(L + 1):
                    par(f"{prefix}/{side}/cmix/l{l}", rng.normal(size=(c, c)) / math.sqrt(c))

        def ff_block(prefix):
            par(f"{prefix}/an/w", np.zeros((config.time_features, c)))
            par(f"{prefix}/an/b", np.ones(c))
            for l in range(L + 1):
                par(f"{prefix}/lin1/l{l}", rng.normal(size=(c, c)) / math.sqrt(c))
                par(f"{prefix}/lin2/l{l}", np.zeros((c, c)))
            par(f"{prefix}/elu_w", rng.normal(size=(c, c)) / math.sqrt(c))

        par("embed/deg0", rng.normal(size=(1, c)))
        par("embed/deg1", rng.normal(size=(1, c)))
        for i in range(config.n_downsample):
            linear_block(f"down{i}/attn", zero_out=True)
        for i in range(config.n_croco_blocks):
            linear_block(f"croco{i}/self", zero_out=True)
            ff_block(f"croco{i}/ff1")
            linear_block(f"croco{i}/cross", zero_out=True)
            ff_block(f"croco{i}/ff2")
        # the head must not start at zero: with zero-initialized residual
        # output maps the pooled degree-1 feature is the per-piece mean of
        # centroid offsets, which is exactly zero, and a zero head would make
        # every gradient in the network vanish at the first step
        par("head/w", rng.normal(size=(c,)) / math.sqrt(c))
        par("head/t", rng.normal(size=(c,)) / math.sqrt(c))
        return cls(config, params)

    # -- parameter access ------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise CheckpointError(
                f"parameter names mismatch (missing {sorted(missing)[:3]}..., "
                f"unexpected {sorted(extra)[:3]}...)"
                if missing or extra
                else "parameter mismatch"
            )
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.config.np_dtype)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"array {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()

    # -- small layer pieces -----------------------------------------------

    def _per_degree_linear(self, blocks: list[Tensor], prefix: str) -> list[Tensor]:
        return [
            tc.batch_contract("ncm,cd->ndm", blocks[l], self.params[f"{prefix}/l{l}"])
            for l in range(len(blocks))
        ]

    def _time_scale(self, temb: TimeEmbedding, sample_id: np.ndarray, prefix: str) -> Tensor:
        """Per-point channel scales from the progress embedding, shape (n, c, 1)."""
        vec = tc.constant(temb.vector.astype(self.config.np_dtype))
        scales = tc.add(
            tc.matmul(vec, self.params[f"{prefix}/an/w"]), self.params[f"{prefix}/an/b"]
        )
        per_point = tc.gather(scales, sample_id)
        return tc.reshape(per_point, (len(sample_id), self.config.channels, 1))

    def adaptive_norm(
        self, blocks: list[Tensor], temb: TimeEmbedding, sample_id: np.ndarray, prefix: str
    ) -> list[Tensor]:
        """Normalize by the invariant spread of degrees >= 1, then apply the
        learned per-channel progress scales.

        Degree 0 is normalized by its own channel RMS instead, so that the
        layer has defined behavior when only scalars are present.
        """
        eps = self.config.eps
        scale = self._time_scale(temb, sample_id, prefix)
        sigma = feature_sigma(blocks, eps)
        out = []
        for l, b in enumerate(blocks):
            if l == 0:
                ms = tc.reduce_mean(tc.mul(b, b), axis=(1, 2), keepdims=True)
                rms = tc.maximum_scalar(tc.power(tc.shift(ms, eps * eps), 0.5), eps)
                normed = tc.div(b, rms)
            else:
                normed = tc.div(b, sigma)
            out.append(tc.mul(normed, scale))
        return out

    def elu(self, blocks: list[Tensor], w_name: str) -> list[Tensor]:
        """Equivariant gated nonlinearity.

        Per degree and channel, an invariant scalar s is the inner product of
        the feature with the channel-mixed, per-channel-normalized feature;
        the block is scaled by GELU(s)/max(|s|, eps), so the gate approaches
        1 for strongly aligned features and 0 for anti-aligned ones.  With
        ``elu_degree0_literal`` the degree-0 block is replaced by GELU(s)
        itself (the scalar reading of the construction).
        """
        W = self.params[w_name]
        eps = self.config.eps
        out = []
        for l, b in enumerate(blocks):
            mixed = tc.batch_contract("ncm,cd->ndm", b, W)
            norm = tc.power(
                tc.shift(tc.reduce_sum(tc.mul(mixed, mixed), axis=2, keepdims=True), eps * eps),
                0.5,
            )
            unit = tc.div(mixed, norm)
            s = tc.reduce_sum(tc.mul(b, unit), axis=2, keepdims=True)
            if l == 0 and self.config.elu_degree0_literal:
                out.append(tc.gelu(s))
                continue
            gate = tc.div(tc.gelu(s), tc.maximum_scalar(tc.abs_val(s), eps))
            out.append(tc.mul(b, gate))
        return out

    # -- edge messages ------------------------------------------------------

    def _radial_features(self, dist: np.ndarray) -> np.ndarray:
        """Fixed radial basis: a constant plus Gaussians spread over the cutoff."""
        B = self.config.radial_basis
        centers = np.linspace(0.0, self.config.radial_cutoff, B - 1)
        width = self.config.radial_cutoff / max(B - 2, 1)
        feats = np.empty(dist.shape + (B,))
        feats[..., 0] = 1.0
        feats[..., 1:] = np.exp(-(((dist[..., None] - centers) / width) ** 2))
        return feats.astype(self.config.np_dtype)

    def _edge_message(
        self,
        source_blocks: list[Tensor],
        idx: np.ndarray,
        frame: EdgeFrame,
        prefix: str,
    ) -> list[Tensor]:
        """Banded edge-aligned message for every (query, slot) edge.

        Gathers source features onto edges, rotates them into the frame where
        the edge direction is the y-axis, mixes each |m| band with radially
        predicted 2x2 rotation-style weights (the fast equivalent of the
        tensor-product message), applies the per-degree channel mix, and
        rotates back.  Returns per-degree tensors of shape
        (n_q, width, channels, 2l+1).
        """
        dt = self.config.np_dtype
        L = self.config.l_max
        rot = [tc.constant(frame.rot_blocks[l].astype(dt)) for l in range(L + 1)]
        rot_t = [
            tc.constant(np.ascontiguousarray(frame.rot_blocks[l].swapaxes(-1, -2)).astype(dt))
            for l in range(L + 1)
        ]
        basis = tc.constant(self._radial_features(frame.dist))
        hidden = tc.gelu(
            tc.add(tc.matmul(basis, self.params[f"{prefix}/w1"]), self.params[f"{prefix}/b1"])
        )
        gathered = [tc.gather(b, idx) for b in source_blocks]
        aligned = [tc.matmul(gathered[l], rot_t[l]) for l in range(L + 1)]
        flipped = [tc.flip_last(al) for al in aligned]
        out = []
        for lo in range(L + 1):
            width = 2 * lo + 1
            acc = None
            for lf in range(L + 1):
                ea, eb = self._patterns[(lo, lf)]
                a = tc.batch_contract("qwh,hcm->qwcm", hidden, self.params[f"{prefix}/a/{lo}{lf}"])
                spread_a = tc.batch_contract("qwcm,mo->qwco", a, tc.constant(ea))
                term = tc.mul(spread_a, tc.pad_crop_last(aligned[lf], width))
                if eb is not None:
                    b = tc.batch_contract(
                        "qwh,hcm->qwcm", hidden, self.params[f"{prefix}/b/{lo}{lf}"]
                    )
                    spread_b = tc.batch_contract("qwcm,mo->qwco", b, tc.constant(eb))
                    term = tc.add(term, tc.mul(spread_b, tc.pad_crop_last(flipped[lf], width)))
                acc = term if acc is None else tc.add(acc, term)
            mixed = tc.batch_contract("qwcm,cd->qwdm", acc, self.params[f"{prefix}/cmix/l{lo}"])
            out.append(tc.matmul(mixed, rot[lo]))
        return out

    # -- attention -----------------------------------------------------------

    def _attend(
        self,
        query_blocks: list[Tensor],
        key_blocks: list[Tensor],
        value_blocks: list[Tensor],
        mask: np.ndarray,
    ) -> tuple[list[Tensor], Tensor]:
        """Masked multi-head dot-product aggregation.

        Returns the per-degree aggregated values (n_q, channels, 2l+1) and
        the attention weights (n_q, width, heads).
        """
        H = self.config.heads
        ch = self.config.channels // H
        logits = None
        for l in range(self.config.l_max + 1):
            n_q = query_blocks[l].shape[0]
            width = key_blocks[l].shape[1]
            q = tc.reshape(query_blocks[l], (n_q, H, ch, 2 * l + 1))
            k = tc.reshape(key_blocks[l], (n_q, width, H, ch, 2 * l + 1))
            term = tc.batch_contract("qhcm,qwhcm->qwh", q, k)
            logits = term if logits is None else tc.add(logits, term)
        masked = tc.add(logits, tc.constant(mask[:, :, None].astype(self.config.np_dtype)))
        attn = tc.softmax(masked, axis=1)
        aggregated = []
        for l in range(self.config.l_max + 1):
            n_q = value_blocks[l].shape[0]
            width = value_blocks[l].shape[1]
            v = tc.reshape(value_blocks[l], (n_q, width, H, ch, 2 * l + 1))
            pooled = tc.batch_contract("qwh,qwhcm->qhcm", attn, v)
            aggregated.append(tc.reshape(pooled, (n_q, H * ch, 2 * l + 1)))
        return aggregated, attn

    def attention_layer(
        self,
        batch: GraphBatch,
        temb: TimeEmbedding,
        mode: str,
        prefix: str,
        query_rows: np.ndarray | None = None,
    ) -> GraphBatch:
        """One attention unit: pre-normalization, messages, softmax mix, residual.

        mode 'self' attends within each piece (never to the query itself);
        mode 'cross' attends to the nearest points of every other piece in the
        same sample.  With ``query_rows`` the output batch is restricted to
        that subset (used by downsampling); keys and values always come from
        the full batch.
        """
        full = query_rows is None
        if full:
            query_rows = np.arange(len(batch.points))
        cache_key = (mode, self.config.k_neighbors) if full else None
        if cache_key is not None and cache_key in batch.tables:
            idx, mask = batch.tables[cache_key]
        else:
            idx, mask = _neighbor_tables(
                batch.points,
                batch.piece_id,
                batch.sample_id,
                self.config.k_neighbors,
                mode,
                query_rows,
            )
            if cache_key is not None:
                batch.tables[cache_key] = (idx, mask)
        normed = self.adaptive_norm(batch.features, temb, batch.sample_id, prefix)
        q_in = [tc.gather(b, query_rows) for b in normed]
        query_blocks = [
            tc.batch_contract("qcm,cd->qdm", q_in[l], self.params[f"{prefix}/q/l{l}"])
            for l in range(self.config.l_max + 1)
        ]
        # displacements point from source toward query; padded slots get a
        # dummy unit direction (their weights are exactly zero after masking)
        disp = batch.points[query_rows][:, None, :] - batch.points[idx]
        dead = mask == -np.inf
        disp[dead] = np.array([0.0, 1.0, 0.0])
        zero_len = np.linalg.norm(disp, axis=-1) < 1e-9
        disp[zero_len] = np.array([0.0, 1.0, 0.0])
        frame = EdgeFrame.from_displacements(disp, l_max=self.config.l_max)
        keys = self._edge_message(normed, idx, frame, f"{prefix}/k")
        values = self._edge_message(normed, idx, frame, f"{prefix}/v")
        aggregated, _ = self._attend(query_blocks, keys, values, mask)
        projected = [
            tc.batch_contract("qcm,cd->qdm", aggregated[l], self.params[f"{prefix}/o/l{l}"])
            for l in range(self.config.l_max + 1)
        ]
        residual = (
            batch.features if full else [tc.gather(b, query_rows) for b in batch.features]
        )
        new_features = [tc.add(residual[l], projected[l]) for l in range(len(projected))]
        return GraphBatch(
            points=batch.points if full else batch.points[query_rows],
            piece_id=batch.piece_id if full else batch.piece_id[query_rows],
            sample_id=batch.sample_id if full else batch.sample_id[query_rows],
            features=new_features,
            n_pieces=batch.n_pieces,
            n_samples=batch.n_samples,
            tables=batch.tables if full else {},
        )

    def feed_forward(self, batch: GraphBatch, temb: TimeEmbedding, prefix: str) -> GraphBatch:
        """Pointwise sublayer: norm, per-degree linear, gate, linear, residual."""
        normed = self.adaptive_norm(batch.features, temb, batch.sample_id, f"{prefix}")
        h = self._per_degree_linear(normed, f"{prefix}/lin1")
        h = self.elu(h, f"{prefix}/elu_w")
        h = self._per_degree_linear(h, f"{prefix}/lin2")
        feats = [tc.add(batch.features[l], h[l]) for l in range(len(h))]
        return GraphBatch(
            points=batch.points,
            piece_id=batch.piece_id,
            sample_id=batch.sample_id,
            features=feats,
            n_pieces=batch.n_pieces,
            n_samples=batch.n_samples,
            tables=batch.tables,
        )

    def downsample_block(self, batch: GraphBatch, temb: TimeEmbedding, prefix: str) -> GraphBatch:
        """Farthest-point subset per piece, then attention from the full set
        onto the subset.  Raises PieceTooSmall when a piece would drop below
        2 points."""
        keep: list[np.ndarray] = []
        for p in range(batch.n_pieces):
            rows = np.flatnonzero(batch.piece_id == p)
            if rows.size == 0:
                continue
            target = max(1, math.ceil(self.config.downsample_ratio * rows.size))
            if target < 2:
                raise PieceTooSmall(
                    f"piece {p} would downsample from {rows.size} to {target} "
                    f"point(s); need at least 2"
                )
            sel = farthest_point_indices(batch.points[rows], target)
            keep.append(rows[np.sort(sel)])
        query_rows = np.concatenate(keep)
        return self.attention_layer(batch, temb, "self", f"{prefix}/attn", query_rows)

    # -- embedding and forward ------------------------------------------------

    def embed(
        self,
        points: np.ndarray,
        piece_id: np.ndarray,
        sample_id: np.ndarray,
        n_pieces: int,
        n_samples: int,
    ) -> GraphBatch:
        """Initial features: learned constants on degree 0, scaled offsets to
        the piece centroid on degree 1, zeros above."""
        dt = self.config.np_dtype
        n = len(points)
        c = self.config.channels
        counts = np.bincount(piece_id, minlength=n_pieces).astype(np.float64)
        sums = np.zeros((n_pieces, 3))
        np.add.at(sums, piece_id, points)
        centroids = sums / counts[:, None]
        offsets = (points - centroids[piece_id]).astype(dt)

        ones = tc.constant(np.ones((n, 1), dtype=dt))
        deg0 = tc.reshape(tc.matmul(ones, self.params["embed/deg0"]), (n, c, 1))
        off = tc.constant(offsets[:, None, :])
        deg1 = tc.batch_contract("nom,oc->ncm", off, self.params["embed/deg1"])
        feats = [deg0, deg1]
        for l in range(2, self.config.l_max + 1):
            feats.append(tc.constant(np.zeros((n, c, 2 * l + 1), dtype=dt)))
        return GraphBatch(
            points=points,
            piece_id=piece_id,
            sample_id=sample_id,
            features=feats[: self.config.l_max + 1],
            n_pieces=n_pieces,
            n_samples=n_samples,
        )

    def forward_core(
        self,
        points: np.ndarray,
        piece_id: np.ndarray,
        sample_id: np.ndarray,
        n_pieces: int,
        n_samples: int,
        temb: TimeEmbedding,
    ) -> Tensor:
        """Run the trunk and head on a flat batch; returns (n_pieces, 2, 3)
        with row 0 the rotation generator and row 1 the translation rate."""
        batch = self.embed(points, piece_id, sample_id, n_pieces, n_samples)
        for i in range(self.config.n_downsample):
            batch = self.downsample_block(batch, temb, f"down{i}")
        for i in range(self.config.n_croco_blocks):
            batch = self.attention_layer(batch, temb, "self", f"croco{i}/self")
            batch = self.feed_forward(batch, temb, f"croco{i}/ff1")
            batch = self.attention_layer(batch, temb, "cross", f"croco{i}/cross")
            batch = self.feed_forward(batch, temb, f"croco{i}/ff2")
        deg1 = batch.features[1]
        pooled = tc.scatter_add(deg1, batch.piece_id, n_pieces)
        counts = np.bincount(batch.piece_id, minlength=n_pieces).astype(self.config.np_dtype)
        mean = tc.mul(pooled, tc.constant((1.0 / counts)[:, None, None]))
        w = tc.batch_contract("pcm,c->pm", mean, self.params["head/w"])
        t = tc.batch_contract("pcm,c->pm", mean, self.params["head/t"])
        stacked = tc.concat(
            [tc.reshape(w, (n_pieces, 1, 3)), tc.reshape(t, (n_pieces, 1, 3))], axis=1
        )
        return stacked

    def forward(self, pieces: Sequence[np.ndarray], g: GroupElementN, tau: float) -> TwistN:
        """Predict per-piece twists for one assembly state.

        ``pieces`` is the list of piece point arrays in their body frames;
        ``g`` poses them; ``tau`` is the progress variable in [0, 1].
        """
        arrays = [np.asarray(p, dtype=np.float64) for p in pieces]
        if len(arrays) != g.n:
            raise ValueError(f"{len(arrays)} pieces but {g.n} poses")
        posed = [x @ g.rot[i].T + g.trans[i] for i, x in enumerate(arrays)]
        points = np.concatenate(posed, axis=0)
        piece_id = np.concatenate(
            [np.full(len(x), i, dtype=np.int64) for i, x in enumerate(arrays)]
        )
        sample_id = np.zeros(len(points), dtype=np.int64)
        temb = TimeEmbedding.build(float(tau), self.config.time_features)
        out = self.forward_core(points, piece_id, sample_id, g.n, 1, temb)
        data = np.asarray(out.data, dtype=np.float64)
        return TwistN(w=data[:, 0, :].copy(), t=data[:, 1, :].copy())

    # -- persistence ------------------------------------------------------

    def save(self, path, meta: dict | None = None, extra_arrays: Mapping[str, np.ndarray] | None = None) -> None:
        arrays = dict(self.state_arrays())
        if extra_arrays:
            overlap = set(arrays) & set(extra_arrays)
            if overlap:
                raise CheckpointError(f"extra arrays collide with parameters: {sorted(overlap)[:3]}")
            arrays.update(extra_arrays)
        write_checkpoint(path, self.config.to_dict(), arrays, meta or {})

    @classmethod
    def load(cls, path) -> tuple["EquivariantNet", dict[str, np.ndarray], dict]:
        """Restore a network; returns (net, non-parameter arrays, metadata)."""
        config_dict, arrays, meta = read_checkpoint(path)
        config = ModelConfig(**config_dict)
        net = cls.init(config, seed=0)
        param_arrays = {k: v for k, v in arrays.items() if k in net.params}
        net.load_state_arrays(param_arrays)
        rest = {k: v for k, v in arrays.items() if k not in net.params}
        return net, rest, meta


def feature_sigma(blocks: list[Tensor], eps: float) -> Tensor:
    """Invariant per-point spread over degrees >= 1, shape (n, 1, 1).

    The squared norms of each degree block are averaged per component count
    and over channels and degrees, floored at ``eps`` after the square root.
    """
    L = len(blocks) - 1
    c = blocks[0].shape[-2]
    if L < 1:
        raise ValueError("feature_sigma needs at least one degree above 0")
    total = None
    for l in range(1, L + 1):
        sq = tc.reduce_sum(tc.mul(blocks[l], blocks[l]), axis=(1, 2), keepdims=True)
        sq = tc.scale(sq, 1.0 / (2 * l + 1))
        total = sq if total is None else tc.add(total, sq)
    var = tc.scale(total, 1.0 / (c * L))
    # the tiny shift keeps the square root differentiable at exactly zero
    return tc.maximum_scalar(tc.power(tc.shift(var, eps * eps), 0.5), eps)


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

_MAGIC = "eqassembly-checkpoint"


def write_checkpoint(path, config: dict, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    """Write a single-file checkpoint: one JSON header line, then raw buffers.

    The header is human-readable and lists every array's name, shape, dtype
    and byte offset (relative to the end of the header line).  Array data is
    converted to little-endian float32 and written back-to-back, so reloading
    reproduces stored values bit-exactly.
    """
    manifest = []
    offset = 0
    buffers = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float32).astype("<f4"))
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset}
        )
        buffers.append(arr.tobytes())
        offset += len(buffers[-1])
    header = {
        "format": _MAGIC,
        "version": 1,
        "config": config,
        "meta": meta,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`write_checkpoint`."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
        if header.get("format") != _MAGIC:
            raise CheckpointError(f"not a checkpoint file: format={header.get('format')!r}")
        data = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise CheckpointError(f"array {entry['name']!r} extends past end of file")
        arrays[entry["name"]] = np.frombuffer(
            data[start:end], dtype="<f4", count=count
        ).reshape(shape).copy()
    return header["config"], arrays, header["meta"]
