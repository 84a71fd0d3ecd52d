"""Tests for the equivariant twist-prediction network."""

import json

import numpy as np
import pytest

from eqassembly import equinet as eq
from eqassembly import irreps, lie
from eqassembly import tensorcore as tc
from eqassembly.equinet import (
    CheckpointError,
    EmptyNeighborhood,
    EquivariantNet,
    GraphBatch,
    ModelConfig,
    PieceTooSmall,
    TimeEmbedding,
    farthest_point_indices,
    feature_sigma,
    read_checkpoint,
    write_checkpoint,
)

RNG = np.random.default_rng(20240817)


def small_config(**kw):
    base = dict(
        n_croco_blocks=1,
        n_downsample=1,
        downsample_ratio=0.5,
        k_neighbors=5,
        l_max=2,
        channels=8,
        heads=2,
        radial_basis=4,
        radial_hidden=8,
        dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def random_rotation(rng):
    return lie.so3_exp(rng.normal(size=3))


def two_pieces(rng, n0=24, n1=20):
    return [rng.normal(size=(n0, 3)), rng.normal(size=(n1, 3)) + 2.0]


def random_pose(rng, n):
    rot = np.stack([lie.so3_exp(rng.normal(size=3)).m for _ in range(n)])
    return lie.GroupElementN(rot=rot, trans=rng.normal(size=(n, 3)))


# ---------------------------------------------------------------------------
# Configuration and time embedding
# ---------------------------------------------------------------------------


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.channels == 64 and cfg.heads == 4 and cfg.l_max == 2

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            ModelConfig(downsample_ratio=0.0)
        with pytest.raises(ValueError):
            ModelConfig(downsample_ratio=1.5)
        ModelConfig(downsample_ratio=1.0)  # boundary allowed

    def test_positivity(self):
        with pytest.raises(ValueError):
            ModelConfig(channels=0)
        with pytest.raises(ValueError):
            ModelConfig(k_neighbors=-1)

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(channels=10, heads=4)

    def test_round_trips_through_dict(self):
        cfg = small_config()
        assert ModelConfig(**cfg.to_dict()) == cfg


class TestTimeEmbedding:
    def test_shape_and_range(self):
        temb = TimeEmbedding.build([0.0, 0.5, 1.0], 16)
        assert temb.vector.shape == (3, 16)
        assert np.all(np.abs(temb.vector) <= 1.0 + 1e-12)

    def test_scalar_input(self):
        temb = TimeEmbedding.build(0.25, 8)
        assert temb.tau.shape == (1,) and temb.vector.shape == (1, 8)

    def test_distinct_times_distinct_rows(self):
        temb = TimeEmbedding.build([0.1, 0.9], 16)
        assert np.abs(temb.vector[0] - temb.vector[1]).max() > 0.1


# ---------------------------------------------------------------------------
# Farthest-point sampling
# ---------------------------------------------------------------------------


class TestFarthestPoint:
    def test_full_ratio_is_identity(self):
        pts = RNG.normal(size=(12, 3))
        sel = farthest_point_indices(pts, 12)
        assert sorted(sel.tolist()) == list(range(12))

    def test_line_selects_endpoints_first(self):
        pts = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
        sel = farthest_point_indices(pts, 3)
        assert sel[0] == 0 and sel[1] == 9
        assert sel[2] in (4, 5)

    def test_spread_beats_random_subsets(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(40, 3))
        sel = farthest_point_indices(pts, 8)

        def min_pairwise(idx):
            sub = pts[idx]
            d = np.linalg.norm(sub[:, None] - sub[None, :], axis=-1)
            return d[np.triu_indices(len(idx), 1)].min()

        fps_quality = min_pairwise(sel)
        for _ in range(1000):
            rand = rng.choice(40, size=8, replace=False)
            assert min_pairwise(rand) <= fps_quality + 1e-12

    def test_count_validation(self):
        pts = RNG.normal(size=(5, 3))
        with pytest.raises(ValueError):
            farthest_point_indices(pts, 0)
        with pytest.raises(ValueError):
            farthest_point_indices(pts, 6)


# ---------------------------------------------------------------------------
# Neighbor tables
# ---------------------------------------------------------------------------


class TestNeighborTables:
    def build(self, rng, sizes, k=3, mode="self", samples=None):
        pts = np.concatenate([rng.normal(size=(s, 3)) for s in sizes])
        piece_id = np.concatenate(
            [np.full(s, i, dtype=np.int64) for i, s in enumerate(sizes)]
        )
        if samples is None:
            sample_id = np.zeros(len(pts), dtype=np.int64)
        else:
            sample_id = np.concatenate(
                [np.full(s, g, dtype=np.int64) for s, g in zip(sizes, samples)]
            )
        rows = np.arange(len(pts))
        idx, mask = eq._neighbor_tables(pts, piece_id, sample_id, k, mode, rows)
        return pts, piece_id, sample_id, idx, mask

    def test_self_excludes_query_and_other_pieces(self):
        rng = np.random.default_rng(0)
        pts, piece_id, _, idx, mask = self.build(rng, [6, 5], k=3)
        for u in range(len(pts)):
            valid = idx[u][mask[u] == 0]
            assert u not in valid
            assert np.all(piece_id[valid] == piece_id[u])
            assert len(valid) == 3

    def test_self_matches_brute_force(self):
        rng = np.random.default_rng(1)
        pts, piece_id, _, idx, mask = self.build(rng, [8], k=3)
        for u in range(8):
            d = np.linalg.norm(pts - pts[u], axis=1)
            d[u] = np.inf
            want = set(np.argsort(d, kind="stable")[:3].tolist())
            got = set(idx[u][mask[u] == 0].tolist())
            assert got == want

    def test_cross_connects_distinct_pieces_same_sample(self):
        rng = np.random.default_rng(2)
        pts, piece_id, sample_id, idx, mask = self.build(
            rng, [5, 5, 5, 5], k=2, mode="cross", samples=[0, 0, 1, 1]
        )
        for u in range(len(pts)):
            valid = idx[u][mask[u] == 0]
            assert np.all(piece_id[valid] != piece_id[u])
            assert np.all(sample_id[valid] == sample_id[u])

    def test_small_piece_pads_with_mask(self):
        rng = np.random.default_rng(3)
        _, _, _, idx, mask = self.build(rng, [2, 6], k=4)
        # the 2-point piece has only 1 valid neighbor per query
        assert (mask[0] == 0).sum() == 1
        assert (mask[2] == 0).sum() == 4

    def test_single_point_piece_raises(self):
        rng = np.random.default_rng(4)
        with pytest.raises(EmptyNeighborhood):
            self.build(rng, [1, 5], k=3)

    def test_single_piece_cross_raises(self):
        rng = np.random.default_rng(5)
        with pytest.raises(EmptyNeighborhood):
            self.build(rng, [6], k=3, mode="cross")

    def test_knn_ties_broken_by_index(self):
        # four source points at exactly equal distance from the query
        pts = np.array(
            [
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
            ]
        )
        piece_id = np.zeros(5, dtype=np.int64)
        sample_id = np.zeros(5, dtype=np.int64)
        idx, mask = eq._neighbor_tables(
            pts, piece_id, sample_id, 2, "self", np.array([0])
        )
        assert idx[0].tolist()[:2] == [1, 2]


# ---------------------------------------------------------------------------
# Layer pieces: gated nonlinearity, adaptive norm, attention math
# ---------------------------------------------------------------------------


def random_blocks(rng, n, cfg, scale=1.0):
    return [
        tc.constant(
            (rng.normal(size=(n, cfg.channels, 2 * l + 1)) * scale).astype(cfg.np_dtype)
        )
        for l in range(cfg.l_max + 1)
    ]


class TestElu:
    def test_zero_maps_to_zero(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=0)
        blocks = [
            tc.constant(np.zeros((4, cfg.channels, 2 * l + 1)))
            for l in range(cfg.l_max + 1)
        ]
        out = net.elu(blocks, "croco0/ff1/elu_w")
        for b in out:
            assert np.all(b.data == 0.0)

    def test_equivariance(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=1)
        rng = np.random.default_rng(6)
        blocks = random_blocks(rng, 5, cfg)
        r = random_rotation(rng)
        out_then_rot = [
            b.data @ irreps.wigner_d(l, r).T
            for l, b in enumerate(net.elu(blocks, "croco0/ff1/elu_w"))
        ]
        rotated = [
            tc.constant(b.data @ irreps.wigner_d(l, r).T) for l, b in enumerate(blocks)
        ]
        rot_then_out = net.elu(rotated, "croco0/ff1/elu_w")
        for a, b in zip(out_then_rot, rot_then_out):
            assert np.abs(a - b.data).max() < 1e-7

    def test_strong_alignment_gate_near_one(self):
        # make the channel mix the identity so s = ||F|| exactly
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=2)
        net.params["croco0/ff1/elu_w"].data = np.eye(cfg.channels)
        rng = np.random.default_rng(7)
        blocks = random_blocks(rng, 4, cfg, scale=50.0)
        out = net.elu(blocks, "croco0/ff1/elu_w")
        for l in range(1, cfg.l_max + 1):
            rel = np.abs(out[l].data - blocks[l].data).max() / np.abs(blocks[l].data).max()
            assert rel < 1e-6

    def test_degree0_literal_mode(self):
        cfg = small_config(elu_degree0_literal=True)
        net = EquivariantNet.init(cfg, seed=3)
        net.params["croco0/ff1/elu_w"].data = np.eye(cfg.channels)
        rng = np.random.default_rng(8)
        blocks = random_blocks(rng, 4, cfg)
        out = net.elu(blocks, "croco0/ff1/elu_w")
        f0 = blocks[0].data
        sign = np.sign(f0)
        want = tc.gelu(tc.constant(sign * f0)).data  # GELU of +/- the scalar
        assert np.abs(out[0].data - want).max() < 1e-12


class TestAdaptiveNorm:
    def test_unit_spread_after_normalization(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=4)
        rng = np.random.default_rng(9)
        blocks = random_blocks(rng, 6, cfg, scale=3.7)
        temb = TimeEmbedding.build(0.4, cfg.time_features)
        sample_id = np.zeros(6, dtype=np.int64)
        # fresh init keeps the learned scale at exactly one
        out = net.adaptive_norm(blocks, temb, sample_id, "croco0/self")
        sigma = feature_sigma(out, cfg.eps)
        assert np.abs(sigma.data - 1.0).max() < 1e-6

    def test_scale_injects_time(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=5)
        net.params["croco0/self/an/w"].data = (
            np.ones((cfg.time_features, cfg.channels)) * 0.01
        )
        rng = np.random.default_rng(10)
        blocks = random_blocks(rng, 3, cfg)
        sample_id = np.zeros(3, dtype=np.int64)
        a = net.adaptive_norm(blocks, TimeEmbedding.build(0.1, cfg.time_features), sample_id, "croco0/self")
        b = net.adaptive_norm(blocks, TimeEmbedding.build(0.9, cfg.time_features), sample_id, "croco0/self")
        assert np.abs(a[1].data - b[1].data).max() > 1e-6

    def test_degree0_rms(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=6)
        rng = np.random.default_rng(11)
        blocks = random_blocks(rng, 5, cfg, scale=2.0)
        temb = TimeEmbedding.build(0.5, cfg.time_features)
        out = net.adaptive_norm(blocks, temb, np.zeros(5, dtype=np.int64), "croco0/self")
        rms = np.sqrt((out[0].data ** 2).mean(axis=(1, 2)))
        assert np.abs(rms - 1.0).max() < 1e-6


class TestAttendMath:
    def test_single_valid_neighbor_is_passthrough(self):
        cfg = small_config(channels=4, heads=2)
        net = EquivariantNet.init(cfg, seed=7)
        rng = np.random.default_rng(12)
        n_q, width = 3, 4
        qb = [
            tc.constant(rng.normal(size=(n_q, 4, 2 * l + 1))) for l in range(cfg.l_max + 1)
        ]
        kb = [
            tc.constant(rng.normal(size=(n_q, width, 4, 2 * l + 1)))
            for l in range(cfg.l_max + 1)
        ]
        vb = [
            tc.constant(rng.normal(size=(n_q, width, 4, 2 * l + 1)))
            for l in range(cfg.l_max + 1)
        ]
        mask = np.full((n_q, width), -np.inf)
        keep = [2, 0, 3]
        for q, slot in enumerate(keep):
            mask[q, slot] = 0.0
        aggregated, attn = net._attend(qb, kb, vb, mask)
        for q, slot in enumerate(keep):
            assert np.abs(attn.data[q, slot] - 1.0).max() < 1e-12
            for l in range(cfg.l_max + 1):
                assert np.abs(aggregated[l].data[q] - vb[l].data[q, slot]).max() < 1e-12

    def test_weights_sum_to_one(self):
        cfg = small_config(channels=4, heads=2)
        net = EquivariantNet.init(cfg, seed=8)
        rng = np.random.default_rng(13)
        qb = [tc.constant(rng.normal(size=(2, 4, 2 * l + 1))) for l in range(3)]
        kb = [tc.constant(rng.normal(size=(2, 5, 4, 2 * l + 1))) for l in range(3)]
        vb = [tc.constant(rng.normal(size=(2, 5, 4, 2 * l + 1))) for l in range(3)]
        mask = np.zeros((2, 5))
        mask[:, 4] = -np.inf
        _, attn = net._attend(qb, kb, vb, mask)
        assert np.abs(attn.data.sum(axis=1) - 1.0).max() < 1e-12
        assert np.all(attn.data[:, 4] == 0.0)


# ---------------------------------------------------------------------------
# Layer-level equivariance
# ---------------------------------------------------------------------------


def make_batch(net, rng, sizes, rotate=None):
    """Posed random pieces with random features; optionally rotated globally."""
    cfg = net.config
    pts = np.concatenate([rng.normal(size=(s, 3)) + 3.0 * i for i, s in enumerate(sizes)])
    if rotate is not None:
        pts = pts @ rotate.m.T
    piece_id = np.concatenate([np.full(s, i, dtype=np.int64) for i, s in enumerate(sizes)])
    sample_id = np.zeros(len(pts), dtype=np.int64)
    return GraphBatch(
        points=pts,
        piece_id=piece_id,
        sample_id=sample_id,
        features=[],
        n_pieces=len(sizes),
        n_samples=1,
    )


class TestAttentionLayerEquivariance:
    @pytest.mark.parametrize("mode", ["self", "cross"])
    def test_rotation_equivariance(self, mode):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=9)
        rng = np.random.default_rng(14)
        r = random_rotation(rng)
        batch = make_batch(net, rng, [8, 7])
        feats = random_blocks(rng, 15, cfg)
        batch.features = feats
        temb = TimeEmbedding.build(0.3, cfg.time_features)
        out = net.attention_layer(batch, temb, mode, "croco0/self")

        rotated = make_batch(net, rng, [8, 7])
        rotated.points = batch.points @ r.m.T
        rotated.features = [
            tc.constant(b.data @ irreps.wigner_d(l, r).T) for l, b in enumerate(feats)
        ]
        out_rot = net.attention_layer(rotated, temb, mode, "croco0/self")
        for l in range(cfg.l_max + 1):
            want = out.features[l].data @ irreps.wigner_d(l, r).T
            got = out_rot.features[l].data
            rel = np.abs(want - got).max() / max(np.abs(want).max(), 1e-12)
            assert rel < 1e-10

    def test_downsample_equivariance_and_size(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=10)
        rng = np.random.default_rng(15)
        r = random_rotation(rng)
        batch = make_batch(net, rng, [12, 10])
        batch.features = random_blocks(rng, 22, cfg)
        temb = TimeEmbedding.build(0.6, cfg.time_features)
        out = net.downsample_block(batch, temb, "down0")
        assert len(out.points) == 6 + 5

        rotated = make_batch(net, rng, [12, 10])
        rotated.points = batch.points @ r.m.T
        rotated.features = [
            tc.constant(b.data @ irreps.wigner_d(l, r).T)
            for l, b in enumerate(batch.features)
        ]
        out_rot = net.downsample_block(rotated, temb, "down0")
        assert np.array_equal(out.piece_id, out_rot.piece_id)
        for l in range(cfg.l_max + 1):
            want = out.features[l].data @ irreps.wigner_d(l, r).T
            rel = np.abs(want - out_rot.features[l].data).max() / np.abs(want).max()
            assert rel < 1e-10

    def test_piece_too_small(self):
        cfg = small_config(downsample_ratio=0.25)
        net = EquivariantNet.init(cfg, seed=11)
        rng = np.random.default_rng(16)
        batch = make_batch(net, rng, [4, 30])
        batch.features = random_blocks(rng, 34, cfg)
        temb = TimeEmbedding.build(0.2, cfg.time_features)
        with pytest.raises(PieceTooSmall):
            net.downsample_block(batch, temb, "down0")

    def test_empty_neighborhood_through_layer(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=12)
        rng = np.random.default_rng(17)
        batch = make_batch(net, rng, [1, 9])
        batch.features = random_blocks(rng, 10, cfg)
        temb = TimeEmbedding.build(0.2, cfg.time_features)
        with pytest.raises(EmptyNeighborhood):
            net.attention_layer(batch, temb, "self", "croco0/self")


# ---------------------------------------------------------------------------
# Full forward pass
# ---------------------------------------------------------------------------


class TestForward:
    def test_shapes_and_finiteness(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=13)
        rng = np.random.default_rng(18)
        pieces = two_pieces(rng)
        g = random_pose(rng, 2)
        tw = net.forward(pieces, g, 0.3)
        assert tw.w.shape == (2, 3) and tw.t.shape == (2, 3)
        assert np.isfinite(tw.w).all() and np.isfinite(tw.t).all()

    def test_rotation_equivariance(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=14)
        rng = np.random.default_rng(19)
        for _ in range(3):
            pieces = two_pieces(rng)
            g = random_pose(rng, 2)
            r = random_rotation(rng)
            tw = net.forward(pieces, g, 0.4)
            g_rot = lie.GroupElementN(
                rot=np.einsum("ab,nbc->nac", r.m, g.rot), trans=g.trans @ r.m.T
            )
            tw_rot = net.forward(pieces, g_rot, 0.4)
            scale = max(np.abs(tw.w).max(), np.abs(tw.t).max(), 1e-12)
            assert np.abs(tw_rot.w - tw.w @ r.m.T).max() / scale < 1e-5
            assert np.abs(tw_rot.t - tw.t @ r.m.T).max() / scale < 1e-5

    def test_permutation_equivariance(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=15)
        rng = np.random.default_rng(20)
        pieces = [rng.normal(size=(14, 3)), rng.normal(size=(11, 3)) + 1.5,
                  rng.normal(size=(9, 3)) - 1.5]
        g = random_pose(rng, 3)
        perm = np.array([2, 0, 1])
        tw = net.forward(pieces, g, 0.7)
        tw_p = net.forward(
            [pieces[i] for i in perm],
            lie.GroupElementN(rot=g.rot[perm].copy(), trans=g.trans[perm].copy()),
            0.7,
        )
        assert np.abs(tw_p.w - tw.w[perm]).max() < 1e-6
        assert np.abs(tw_p.t - tw.t[perm]).max() < 1e-6

    def test_translation_invariance(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=16)
        rng = np.random.default_rng(21)
        pieces = two_pieces(rng)
        g = random_pose(rng, 2)
        shift = np.array([5.0, -3.0, 2.0])
        g_shift = lie.GroupElementN(rot=g.rot.copy(), trans=g.trans + shift)
        tw = net.forward(pieces, g, 0.2)
        tw_s = net.forward(pieces, g_shift, 0.2)
        assert np.abs(tw_s.w - tw.w).max() < 1e-9
        assert np.abs(tw_s.t - tw.t).max() < 1e-9

    def test_state_relatedness(self):
        # posing the clouds first and evaluating at the identity gives the
        # same twists as evaluating the original clouds at the pose
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=17)
        rng = np.random.default_rng(22)
        pieces = two_pieces(rng)
        g = random_pose(rng, 2)
        posed = [p @ g.rot[i].T + g.trans[i] for i, p in enumerate(pieces)]
        tw = net.forward(pieces, g, 0.55)
        tw_pre = net.forward(posed, lie.GroupElementN.identity(2), 0.55)
        assert np.abs(tw_pre.w - tw.w).max() < 1e-6
        assert np.abs(tw_pre.t - tw.t).max() < 1e-6

    def test_per_piece_right_rotation_relatedness(self):
        # rotating body frames and composing the pose on the right describe
        # the same spatial state, so the prediction must agree
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=18)
        rng = np.random.default_rng(23)
        pieces = two_pieces(rng)
        g = random_pose(rng, 2)
        rots = [random_rotation(rng) for _ in range(2)]
        rotated_pieces = [p @ rots[i].m.T for i, p in enumerate(pieces)]
        g_right = lie.GroupElementN(
            rot=np.stack([g.rot[i] @ rots[i].m for i in range(2)]),
            trans=g.trans.copy(),
        )
        tw_a = net.forward(rotated_pieces, g, 0.35)
        tw_b = net.forward(pieces, g_right, 0.35)
        assert np.abs(tw_a.w - tw_b.w).max() < 1e-9
        assert np.abs(tw_a.t - tw_b.t).max() < 1e-9

    def test_deterministic_replay(self):
        cfg = small_config(dtype="float32")
        net = EquivariantNet.init(cfg, seed=19)
        rng = np.random.default_rng(24)
        pieces = two_pieces(rng)
        g = random_pose(rng, 2)
        tw1 = net.forward(pieces, g, 0.6)
        tw2 = net.forward(pieces, g, 0.6)
        assert np.array_equal(tw1.w, tw2.w) and np.array_equal(tw1.t, tw2.t)
        net_again = EquivariantNet.init(cfg, seed=19)
        tw3 = net_again.forward(pieces, g, 0.6)
        assert np.array_equal(tw1.w, tw3.w) and np.array_equal(tw1.t, tw3.t)

    def test_piece_pose_count_mismatch(self):
        cfg = small_config()
        net = EquivariantNet.init(cfg, seed=20)
        rng = np.random.default_rng(25)
        with pytest.raises(ValueError):
            net.forward(two_pieces(rng), random_pose(rng, 3), 0.1)


class TestGradientFlow:
    def test_loss_gradient_matches_finite_differences(self):
        cfg = small_config(
            channels=4, heads=2, l_max=1, k_neighbors=3, radial_basis=3, radial_hidden=4
        )
        net = EquivariantNet.init(cfg, seed=21)
        rng = np.random.default_rng(26)
        pts = np.concatenate([rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + 2.0])
        piece_id = np.array([0] * 6 + [1] * 5)
        sample_id = np.zeros(11, dtype=np.int64)
        temb = TimeEmbedding.build(0.3, cfg.time_features)
        target = tc.constant(rng.normal(size=(2, 2, 3)))

        checked = [
            "croco0/self/q/l1",
            "croco0/self/k/a/11",
            "croco0/self/v/b/11",
            "croco0/self/o/l0",
            "croco0/ff1/elu_w",
            "croco0/self/an/w",
            "head/w",
            "embed/deg1",
        ]
        for name in checked:
            param = net.params[name]

            def loss_fn(p):
                net.params[name] = p
                out = net.forward_core(pts, piece_id, sample_id, 2, 1, temb)
                diff = tc.sub(out, target)
                return tc.reduce_mean(tc.mul(diff, diff))

            worst = tc.gradient_check(loss_fn, param, eps=1e-6, rel_tol=1e-4)
            assert worst < 1e-4


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = small_config(dtype="float32")
        net = EquivariantNet.init(cfg, seed=22)
        path = tmp_path / "model.ckpt"
        meta = {"step": 17, "note": "unit test"}
        extra = {"ema/head/w": np.arange(cfg.channels, dtype=np.float32)}
        net.save(path, meta=meta, extra_arrays=extra)

        net2, rest, meta2 = EquivariantNet.load(path)
        assert meta2["step"] == 17 and meta2["note"] == "unit test"
        assert net2.config == cfg
        for name, p in net.params.items():
            assert np.array_equal(p.data, net2.params[name].data), name
        assert np.array_equal(rest["ema/head/w"], extra["ema/head/w"])

    def test_reload_reproduces_forward_bitwise(self, tmp_path):
        cfg = small_config(dtype="float32")
        net = EquivariantNet.init(cfg, seed=23)
        rng = np.random.default_rng(27)
        pieces = two_pieces(rng)
        g = random_pose(rng, 2)
        tw = net.forward(pieces, g, 0.45)
        path = tmp_path / "model.ckpt"
        net.save(path)
        net2, _, _ = EquivariantNet.load(path)
        tw2 = net2.forward(pieces, g, 0.45)
        assert np.array_equal(tw.w, tw2.w) and np.array_equal(tw.t, tw2.t)

    def test_header_is_human_readable_json(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_checkpoint(
            path, {"channels": 4}, {"w": np.ones((2, 2), dtype=np.float32)}, {"step": 1}
        )
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
        assert header["format"] == "eqassembly-checkpoint"
        assert header["arrays"][0]["name"] == "w"
        assert header["arrays"][0]["shape"] == [2, 2]

    def test_rng_state_survives(self, tmp_path):
        rng = np.random.default_rng(99)
        rng.normal(size=10)
        state = rng.bit_generator.state
        path = tmp_path / "c.ckpt"
        write_checkpoint(path, {}, {}, {"rng_state": state})
        _, _, meta = read_checkpoint(path)
        restored = np.random.default_rng(0)
        restored.bit_generator.state = meta["rng_state"]
        assert np.array_equal(rng.normal(size=5), restored.normal(size=5))

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_garbage_raises(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"\x00\x01\x02 not json at all\n")
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_truncated_data_raises(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        write_checkpoint(path, {}, {"w": np.ones(8, dtype=np.float32)}, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_extra_array_name_collision(self, tmp_path):
        cfg = small_config(dtype="float32")
        net = EquivariantNet.init(cfg, seed=24)
        with pytest.raises(CheckpointError):
            net.save(tmp_path / "x.ckpt", extra_arrays={"head/w": np.zeros(1, np.float32)})
