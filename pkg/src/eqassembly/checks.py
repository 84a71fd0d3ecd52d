"""Runnable numerical property suites behind the ``check`` subcommand.

Each suite probes one structural guarantee of the library on random inputs
and an untrained network: the guarantees hold by construction, not by
training, so everything here runs without any dataset or checkpoint.  A
suite reports its largest observed error and the tolerance it must meet.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import lie
from .equinet import EquivariantNet, ModelConfig
from .flowmatch import TrainConfig, batch_loss, build_sample, random_rotation
from .irreps import (
    EdgeFrame,
    IrrepsFeature,
    embed_tp_weights,
    message_paths,
    so2_reduced_message,
    tp_message,
)
from .sampler import SamplerConfig, field_from_net, integrate

__all__ = ["CheckResult", "run_property_suites", "SUITES"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return np.isfinite(self.error) and self.error <= self.tol


def _haar_rotation(rng) -> np.ndarray:
    return random_rotation(rng).m


def _random_poses(rng, n) -> lie.GroupElementN:
    return lie.GroupElementN(
        rot=np.stack([_haar_rotation(rng) for _ in range(n)]),
        trans=rng.normal(size=(n, 3)),
    )


def _small_net(seed: int, dtype: str = "float64") -> EquivariantNet:
    config = ModelConfig(
        n_croco_blocks=1,
        n_downsample=1,
        downsample_ratio=0.5,
        k_neighbors=4,
        l_max=2,
        channels=8,
        heads=2,
        radial_basis=4,
        radial_hidden=8,
        dtype=dtype,
    )
    return EquivariantNet.init(config, seed=seed)


def _pieces(rng, sizes=(9, 8, 7)) -> list[np.ndarray]:
    out = []
    for m in sizes:
        x = rng.normal(size=(m, 3))
        out.append(x - x.mean(axis=0))
    return out


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_group_round_trips(seed: int, trials: int) -> CheckResult:
    """exp/log round trips on rotations and rigid motions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(max(trials * 50, 100)):
        w = rng.normal(size=3)
        w *= rng.uniform(0.0, 3.0) / np.linalg.norm(w)
        t = rng.normal(size=3)
        back = lie.so3_log(lie.so3_exp(w))
        worst = max(worst, float(np.abs(back - w).max()))
        tw = lie.se3_log(lie.se3_exp(lie.Twist(w=w, t=t)))
        worst = max(worst, float(np.abs(tw.w - w).max()), float(np.abs(tw.t - t).max()))
    return CheckResult("group exp/log round trips", worst, 1e-9)


def suite_rotation_correction(seed: int, trials: int) -> CheckResult:
    """The least-squares correction ignores per-piece right rotations and
    relabeling, and conjugates under a shared left rotation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        g0 = _random_poses(rng, 4)
        g1t = _random_poses(rng, 4)
        r = lie.rotation_correction(g0, g1t).m

        rbar = np.stack([_haar_rotation(rng) for _ in range(4)])
        right = lie.rotation_correction(
            lie.GroupElementN(g0.rot @ rbar, g0.trans),
            lie.GroupElementN(g1t.rot @ rbar, g1t.trans),
        ).m
        worst = max(worst, float(np.abs(right - r).max()))

        perm = rng.permutation(4)
        shuffled = lie.rotation_correction(
            lie.GroupElementN(g0.rot[perm], g0.trans[perm]),
            lie.GroupElementN(g1t.rot[perm], g1t.trans[perm]),
        ).m
        worst = max(worst, float(np.abs(shuffled - r).max()))

        q = _haar_rotation(rng)
        rotated = lie.rotation_correction(
            lie.left_multiply(lie.Rotation(q), g0),
            lie.left_multiply(lie.Rotation(q), g1t),
        ).m
        worst = max(worst, float(np.abs(rotated - q @ r @ q.T).max()))
    return CheckResult("rotation correction symmetries", worst, 1e-9)


def suite_interpolation_path(seed: int, trials: int) -> CheckResult:
    """The pose path hits both endpoints, and its twists ignore per-piece
    right rotations of the endpoints."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        g0 = _random_poses(rng, 3)
        g1t = _random_poses(rng, 3)
        g1, xi = lie.make_path_pair(g0, g1t)
        start = lie.eval_path(g0, xi, 0.0)
        end = lie.eval_path(g0, xi, 1.0)
        worst = max(
            worst,
            float(np.abs(start.rot - g0.rot).max()),
            float(np.abs(start.trans - g0.trans).max()),
            float(np.abs(end.rot - g1.rot).max()),
            float(np.abs(end.trans - g1.trans).max()),
        )
        rbar = np.stack([_haar_rotation(rng) for _ in range(3)])
        _, xi_r = lie.make_path_pair(
            lie.GroupElementN(g0.rot @ rbar, g0.trans),
            lie.GroupElementN(g1t.rot @ rbar, g1t.trans),
        )
        worst = max(
            worst,
            float(np.abs(xi_r.w - xi.w).max()),
            float(np.abs(xi_r.t - xi.t).max()),
        )
    return CheckResult("interpolation path endpoints", worst, 1e-9)


def suite_field_rotation_equivariance(seed: int, trials: int) -> CheckResult:
    """Rotating the whole input state rotates the predicted twists."""
    rng = np.random.default_rng(seed)
    net = _small_net(seed)
    worst = 0.0
    for _ in range(trials):
        pieces = _pieces(rng)
        g = _random_poses(rng, 3)
        tw = net.forward(pieces, g, 0.4)
        q = _haar_rotation(rng)
        tw_rot = net.forward(pieces, lie.left_multiply(lie.Rotation(q), g), 0.4)
        scale = max(np.abs(tw.w).max(), np.abs(tw.t).max(), 1e-12)
        worst = max(
            worst,
            float(np.abs(tw_rot.w - tw.w @ q.T).max()) / scale,
            float(np.abs(tw_rot.t - tw.t @ q.T).max()) / scale,
        )
    return CheckResult("field rotation equivariance", worst, 1e-5)


def suite_field_permutation_equivariance(seed: int, trials: int) -> CheckResult:
    """Relabeling the pieces relabels the predicted twists."""
    rng = np.random.default_rng(seed)
    net = _small_net(seed + 1)
    worst = 0.0
    for _ in range(trials):
        pieces = _pieces(rng)
        g = _random_poses(rng, 3)
        tw = net.forward(pieces, g, 0.6)
        perm = rng.permutation(3)
        tw_p = net.forward(
            [pieces[i] for i in perm],
            lie.GroupElementN(g.rot[perm], g.trans[perm]),
            0.6,
        )
        worst = max(
            worst,
            float(np.abs(tw_p.w - tw.w[perm]).max()),
            float(np.abs(tw_p.t - tw.t[perm]).max()),
        )
    return CheckResult("field permutation equivariance", worst, 1e-6)


def suite_field_frame_relatedness(seed: int, trials: int) -> CheckResult:
    """Equal spatial states give equal twists: storing a piece in a rotated
    body frame (with the pose composed to compensate) or translating the
    whole state changes nothing."""
    rng = np.random.default_rng(seed)
    net = _small_net(seed + 2)
    worst = 0.0
    for _ in range(trials):
        pieces = _pieces(rng, sizes=(8, 7))
        g = _random_poses(rng, 2)
        tw = net.forward(pieces, g, 0.3)

        frames = [_haar_rotation(rng) for _ in range(2)]
        rotated_pieces = [p @ frames[i].T for i, p in enumerate(pieces)]
        g_right = lie.GroupElementN(
            rot=np.stack([g.rot[i] @ frames[i].T for i in range(2)]),
            trans=g.trans,
        )
        tw_frame = net.forward(rotated_pieces, g_right, 0.3)
        worst = max(
            worst,
            float(np.abs(tw_frame.w - tw.w).max()),
            float(np.abs(tw_frame.t - tw.t).max()),
        )

        shift = rng.normal(size=3) * 5.0
        tw_shift = net.forward(
            pieces, lie.GroupElementN(g.rot, g.trans + shift), 0.3
        )
        worst = max(
            worst,
            float(np.abs(tw_shift.w - tw.w).max()),
            float(np.abs(tw_shift.t - tw.t).max()),
        )
    return CheckResult("field frame relatedness", worst, 1e-9)


def suite_loss_symmetry(seed: int, trials: int) -> CheckResult:
    """The regression loss is unchanged when the same shared rotation or
    relabeling is applied to a training draw."""
    rng = np.random.default_rng(seed)
    net = _small_net(seed + 3)
    config = TrainConfig()
    worst = 0.0
    for _ in range(trials):
        pieces = _pieces(rng)
        g0 = lie.sample_noise(3, lie.NoiseParams(), rng)
        g1t = _random_poses(rng, 3)
        tau = rng.uniform(0.2, 0.8)
        sample = build_sample(pieces, g0, g1t, tau)
        base = float(batch_loss(net, [sample], config).data)

        q = lie.Rotation(_haar_rotation(rng))
        rotated = build_sample(
            pieces, lie.left_multiply(q, g0), lie.left_multiply(q, g1t), tau
        )
        loss_rot = float(batch_loss(net, [rotated], config).data)

        perm = rng.permutation(3)
        shuffled = build_sample(
            [pieces[i] for i in perm],
            lie.GroupElementN(g0.rot[perm], g0.trans[perm]),
            lie.GroupElementN(g1t.rot[perm], g1t.trans[perm]),
            tau,
        )
        loss_perm = float(batch_loss(net, [shuffled], config).data)
        scale = max(abs(base), 1e-12)
        worst = max(
            worst, abs(loss_rot - base) / scale, abs(loss_perm - base) / scale
        )
    return CheckResult("loss symmetry", worst, 1e-6)


def suite_trajectory_pushforward(seed: int, trials: int) -> CheckResult:
    """Integrated trajectories commute with the three group actions: shared
    left rotations, per-piece body-frame rotations, and relabeling."""
    rng = np.random.default_rng(seed)
    net = _small_net(seed + 4)
    config = SamplerConfig(order=4, steps=3)
    worst = 0.0
    for _ in range(max(trials - 1, 1)):
        pieces = _pieces(rng, sizes=(8, 7))
        g0 = _random_poses(rng, 2)
        base, _ = integrate(field_from_net(net, pieces), g0, config, record=False)

        q = lie.Rotation(_haar_rotation(rng))
        left, _ = integrate(
            field_from_net(net, pieces), lie.left_multiply(q, g0), config,
            record=False,
        )
        want = lie.left_multiply(q, base)
        worst = max(
            worst,
            float(np.abs(left.rot - want.rot).max()),
            float(np.abs(left.trans - want.trans).max()),
        )

        frames = [_haar_rotation(rng) for _ in range(2)]
        moved, _ = integrate(
            field_from_net(net, [p @ frames[i].T for i, p in enumerate(pieces)]),
            lie.GroupElementN(
                rot=np.stack([g0.rot[i] @ frames[i].T for i in range(2)]),
                trans=g0.trans,
            ),
            config,
            record=False,
        )
        want_rot = np.stack([base.rot[i] @ frames[i].T for i in range(2)])
        worst = max(
            worst,
            float(np.abs(moved.rot - want_rot).max()),
            float(np.abs(moved.trans - base.trans).max()),
        )

        perm = np.array([1, 0])
        swapped, _ = integrate(
            field_from_net(net, [pieces[i] for i in perm]),
            lie.GroupElementN(g0.rot[perm], g0.trans[perm]),
            config,
            record=False,
        )
        worst = max(
            worst,
            float(np.abs(swapped.rot - base.rot[perm]).max()),
            float(np.abs(swapped.trans - base.trans[perm]).max()),
        )
    return CheckResult("trajectory pushforward equivariance", worst, 1e-4)


def suite_message_kernels_agree(seed: int, trials: int) -> CheckResult:
    """The edge-aligned reduced kernel reproduces the tensor-product kernel."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        l_max, channels, edges = 2, 8, 64
        frame = EdgeFrame.from_displacements(rng.normal(size=(edges, 3)), l_max=l_max)
        feature = IrrepsFeature(
            tuple(
                rng.normal(size=(edges, channels, 2 * l + 1))
                for l in range(l_max + 1)
            )
        )
        coeffs = {p: rng.normal(size=(edges, channels)) for p in message_paths(l_max)}
        out_tp = tp_message(feature, frame, coeffs)
        out_so2 = so2_reduced_message(feature, frame, embed_tp_weights(coeffs, feature))
        worst = max(
            worst,
            max(
                float(np.abs(a - b).max())
                for a, b in zip(out_tp.blocks, out_so2.blocks)
            ),
        )
    return CheckResult("message kernels agree", worst, 1e-6)


SUITES: tuple[Callable[[int, int], CheckResult], ...] = (
    suite_group_round_trips,
    suite_rotation_correction,
    suite_interpolation_path,
    suite_field_rotation_equivariance,
    suite_field_permutation_equivariance,
    suite_field_frame_relatedness,
    suite_loss_symmetry,
    suite_trajectory_pushforward,
    suite_message_kernels_agree,
)


def run_property_suites(seed: int = 0, trials: int = 3) -> list[CheckResult]:
    """Run every suite; each draws its own generator from ``seed``."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    return [suite(seed, trials) for suite in SUITES]
