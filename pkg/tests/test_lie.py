"""Group-operation tests: exp/log round trips, noise law, rotation correction,
and the interpolating path."""
import numpy as np
import pytest
from scipy import stats

from eqassembly import lie


def haar_rotations(n, rng):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return lie.quat_to_rot(q)


def random_group_element(n, rng, omega=1.0):
    return lie.sample_noise(n, lie.NoiseParams(omega), rng)


# ---------------------------------------------------------------------------
# exp / log
# ---------------------------------------------------------------------------

def test_so3_exp_identity():
    assert np.allclose(lie.so3_exp(np.zeros(3)).m, np.eye(3))


def test_so3_exp_quarter_turn_z():
    r = lie.so3_exp([0.0, 0.0, np.pi / 2])
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(r.m - expected).max() < 1e-12


def test_so3_log_identity():
    assert np.allclose(lie.so3_log(lie.Rotation(np.eye(3))), 0.0)


def test_so3_log_quarter_turn_z():
    r = lie.Rotation(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    assert np.abs(lie.so3_log(r) - [0, 0, np.pi / 2]).max() < 1e-12


def test_so3_round_trip_bulk():
    rng = np.random.default_rng(11)
    # uniform direction, radius spread over the whole principal ball
    w = rng.normal(size=(10_000, 3))
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    w *= rng.uniform(0.0, np.pi - 2e-6, size=(10_000, 1))
    R = lie._exp_so3(w)
    back = lie._log_so3(R)
    assert np.abs(back - w).max() < 1e-9


def test_so3_round_trip_near_pi():
    rng = np.random.default_rng(12)
    w = rng.normal(size=(1000, 3))
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    w *= np.pi - 10 ** rng.uniform(-5.5, -1, size=(1000, 1))
    back = lie._log_so3(lie._exp_so3(w))
    assert np.abs(back - w).max() < 1e-9


def test_so3_log_raises_near_pi():
    w = np.array([0.0, 0.0, np.pi - 1e-8])
    with pytest.raises(lie.AngleNearPi):
        lie.so3_log(lie.so3_exp(w))


def test_se3_exp_zero_twist():
    g = lie.se3_exp(lie.Twist(np.zeros(3), np.zeros(3)))
    assert np.allclose(g.r.m, np.eye(3)) and np.allclose(g.t, 0.0)


def test_se3_exp_pure_translation():
    v = np.array([0.3, -1.2, 2.0])
    g = lie.se3_exp(lie.Twist(np.zeros(3), v))
    assert np.allclose(g.r.m, np.eye(3)) and np.abs(g.t - v).max() < 1e-15


def test_se3_round_trip_bulk():
    rng = np.random.default_rng(13)
    w = rng.normal(size=(10_000, 3))
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    w *= rng.uniform(0.0, np.pi - 2e-6, size=(10_000, 1))
    v = rng.normal(scale=2.0, size=(10_000, 3))
    R, t = lie._exp_se3(w, v)
    wb, vb = lie._log_se3(R, t)
    assert np.abs(wb - w).max() < 1e-9
    assert np.abs(vb - v).max() < 1e-9


def test_se3_exp_matches_matrix_exponential():
    from scipy.linalg import expm
    rng = np.random.default_rng(14)
    for _ in range(20):
        w = rng.normal(size=3)
        v = rng.normal(size=3)
        M = np.zeros((4, 4))
        M[:3, :3] = lie._skew(w)
        M[:3, 3] = v
        G = expm(M)
        R, t = lie._exp_se3(w[None], v[None])
        assert np.abs(R[0] - G[:3, :3]).max() < 1e-12
        assert np.abs(t[0] - G[:3, 3]).max() < 1e-12


# ---------------------------------------------------------------------------
# group structure
# ---------------------------------------------------------------------------

def test_compose_inverse_is_identity():
    rng = np.random.default_rng(15)
    g = random_group_element(5, rng)
    e = lie.compose(g, lie.inverse(g))
    assert np.abs(e.rot - np.eye(3)).max() < 1e-12
    assert np.abs(e.trans).max() < 1e-12


def test_compose_associative():
    rng = np.random.default_rng(16)
    for _ in range(10):
        a, b, c = (random_group_element(4, rng) for _ in range(3))
        ab_c = lie.compose(lie.compose(a, b), c)
        a_bc = lie.compose(a, lie.compose(b, c))
        assert np.abs(ab_c.rot - a_bc.rot).max() < 1e-10
        assert np.abs(ab_c.trans - a_bc.trans).max() < 1e-10


def test_act_identity_and_composition():
    rng = np.random.default_rng(17)
    X = [rng.normal(size=(7, 3)) for _ in range(3)]
    e = lie.GroupElementN.identity(3)
    Xe = lie.act_on_pieces(e, X)
    for a, b in zip(X, Xe):
        assert np.allclose(a, b)
    g, h = random_group_element(3, rng), random_group_element(3, rng)
    via_compose = lie.act_on_pieces(lie.compose(g, h), X)
    via_seq = lie.act_on_pieces(g, lie.act_on_pieces(h, X))
    for a, b in zip(via_compose, via_seq):
        assert np.abs(a - b).max() < 1e-10


def test_length_mismatch():
    rng = np.random.default_rng(18)
    with pytest.raises(lie.LengthMismatch):
        lie.compose(random_group_element(3, rng), random_group_element(4, rng))
    with pytest.raises(lie.LengthMismatch):
        lie.act_on_pieces(lie.GroupElementN.identity(2), [np.zeros((4, 3))] * 3)


# ---------------------------------------------------------------------------
# noise law
# ---------------------------------------------------------------------------

def test_sample_noise_deterministic():
    a = lie.sample_noise(4, lie.NoiseParams(1.0), np.random.default_rng(99))
    b = lie.sample_noise(4, lie.NoiseParams(1.0), np.random.default_rng(99))
    assert np.array_equal(a.rot, b.rot) and np.array_equal(a.trans, b.trans)


def test_sample_noise_rotations_valid():
    g = lie.sample_noise(1000, lie.NoiseParams(1.0), np.random.default_rng(20))
    err = np.abs(np.swapaxes(g.rot, -1, -2) @ g.rot - np.eye(3)).max()
    assert err < 1e-12
    assert np.abs(np.linalg.det(g.rot) - 1.0).max() < 1e-12


def test_sample_noise_haar_mean():
    # Haar expectation of every matrix entry is 0 with variance 1/3; at 1e5
    # samples the 3 sigma band is 3*sqrt(1/3/1e5) ~ 0.0055
    g = lie.sample_noise(100_000, lie.NoiseParams(1.0), np.random.default_rng(21))
    assert np.abs(g.rot.mean(axis=0)).max() < 3 * np.sqrt(1 / 3 / 100_000)


def test_sample_noise_translation_variance():
    omega = 0.7
    g = lie.sample_noise(100_000, lie.NoiseParams(omega), np.random.default_rng(22))
    var = g.trans.var(axis=0)
    assert np.abs(var - omega).max() < 0.05 * omega


def test_sample_noise_angle_distribution():
    # Haar angle density (1 - cos theta)/pi: compare against inverse-cdf draws
    g = lie.sample_noise(50_000, lie.NoiseParams(1.0), np.random.default_rng(23))
    tr = np.trace(g.rot, axis1=-2, axis2=-1)
    ang = np.arccos(np.clip((tr - 1) / 2, -1, 1))
    grid = np.linspace(0, np.pi, 20_001)
    cdf = (grid - np.sin(grid)) / np.pi
    draws = np.interp(np.random.default_rng(24).uniform(size=50_000), cdf, grid)
    assert stats.ks_2samp(ang, draws).pvalue > 0.01


def test_sample_noise_invariance_statistics():
    """Pushing the noise through right-translation, permutation, or a diagonal
    left rotation leaves marginal statistics unchanged (two-sample tests)."""
    rng = np.random.default_rng(25)
    n = 6
    draws = 4000
    base = [lie.sample_noise(n, lie.NoiseParams(1.0), rng) for _ in range(draws)]
    other = [lie.sample_noise(n, lie.NoiseParams(1.0), rng) for _ in range(draws)]
    r_fix = lie.sample_noise(n, lie.NoiseParams(1.0), np.random.default_rng(7))
    q_fix = lie.Rotation(haar_rotations(1, np.random.default_rng(8))[0])
    perm = np.random.default_rng(9).permutation(n)

    def stats_of(gs):
        # rotation angle of part 0 and translation coordinates of part 0
        tr = np.array([np.trace(g.rot[0]) for g in gs])
        ang = np.arccos(np.clip((tr - 1) / 2, -1, 1))
        t0 = np.array([g.trans[0] for g in gs])
        return ang, t0

    pushed = []
    for g in other:
        mode = len(pushed) % 3
        if mode == 0:
            # right action by a fixed rotation tuple: (R_i, t_i) -> (R_i rbar_i, t_i)
            h = lie.GroupElementN(g.rot @ r_fix.rot, g.trans)
        elif mode == 1:
            h = lie.GroupElementN(g.rot[perm], g.trans[perm])
        else:
            h = lie.left_multiply(q_fix, g)
        pushed.append(h)

    ang_a, t_a = stats_of(base)
    ang_b, t_b = stats_of(pushed)
    assert stats.ks_2samp(ang_a, ang_b).pvalue > 0.01
    for k in range(3):
        assert stats.ks_2samp(t_a[:, k], t_b[:, k]).pvalue > 0.005


# ---------------------------------------------------------------------------
# rotation correction
# ---------------------------------------------------------------------------

def stacked_objective(r, g0, g1t):
    A = np.concatenate([g1t.rot, g1t.trans[..., None]], axis=-1)
    B = np.concatenate([g0.rot, g0.trans[..., None]], axis=-1)
    return float(((r @ A - B) ** 2).sum())


def test_rotation_correction_exact_match_identity():
    rng = np.random.default_rng(26)
    g = random_group_element(4, rng)
    r = lie.rotation_correction(g, g)
    assert np.abs(r.m - np.eye(3)).max() < 1e-9


def test_rotation_correction_recovers_planted_rotation():
    rng = np.random.default_rng(27)
    for _ in range(20):
        g1t = random_group_element(4, rng)
        rbar = haar_rotations(1, rng)[0]
        g0 = lie.left_multiply(lie.Rotation(rbar), g1t)
        r = lie.rotation_correction(g0, g1t)
        assert np.abs(r.m - rbar).max() < 1e-9


def test_rotation_correction_beats_brute_force():
    rng = np.random.default_rng(28)
    pool = haar_rotations(100_000, np.random.default_rng(29))
    for _ in range(100):
        g0 = random_group_element(3, rng)
        g1t = random_group_element(3, rng)
        r = lie.rotation_correction(g0, g1t)
        obj = stacked_objective(r.m, g0, g1t)
        # parts stacked side by side into 3 x 4N so one matmul covers the pool
        A = np.hstack(list(np.concatenate([g1t.rot, g1t.trans[..., None]], axis=-1)))
        B = np.hstack(list(np.concatenate([g0.rot, g0.trans[..., None]], axis=-1)))
        objs = ((pool @ A - B) ** 2).sum(axis=(1, 2))
        assert obj <= objs.min() + 1e-12


def test_rotation_correction_equivariances():
    rng = np.random.default_rng(30)
    for _ in range(20):
        g0 = random_group_element(4, rng)
        g1t = random_group_element(4, rng)
        r = lie.rotation_correction(g0, g1t).m

        # right action by rbar in SO(3)^N: multiply each part on the right
        rbar = haar_rotations(4, rng)
        g0_r = lie.GroupElementN(g0.rot @ rbar, g0.trans)
        g1_r = lie.GroupElementN(g1t.rot @ rbar, g1t.trans)
        assert np.abs(lie.rotation_correction(g0_r, g1_r).m - r).max() < 1e-9

        # permutation of the pieces
        perm = rng.permutation(4)
        g0_p = lie.GroupElementN(g0.rot[perm], g0.trans[perm])
        g1_p = lie.GroupElementN(g1t.rot[perm], g1t.trans[perm])
        assert np.abs(lie.rotation_correction(g0_p, g1_p).m - r).max() < 1e-9

        # diagonal left rotation q conjugates the correction
        q = haar_rotations(1, rng)[0]
        g0_q = lie.left_multiply(lie.Rotation(q), g0)
        g1_q = lie.left_multiply(lie.Rotation(q), g1t)
        assert np.abs(lie.rotation_correction(g0_q, g1_q).m - q @ r @ q.T).max() < 1e-9


def test_rotation_correction_degenerate_raises():
    # rank deficient stacked covariance: both tuples concentrated on one axis
    rot = np.broadcast_to(np.eye(3), (2, 3, 3)).copy()
    t = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    g = lie.GroupElementN(rot * 0 + np.diag([1.0, 0.0, 0.0]), t)
    # matrices here are not rotations; build the covariance directly instead
    M = lie.stacked_covariance(g, g)
    s = np.linalg.svd(M, compute_uv=False)
    assert s[1] - s[2] < 1e-9
    with pytest.raises(lie.DegenerateCovariance):
        lie.rotation_correction(g, g)


def test_corrected_endpoint_distribution_unchanged():
    """Two-sample check: with rotation-invariant synthetic targets, the
    corrected endpoint r* g1_tilde has the same quaternion marginals as
    g1_tilde itself."""
    rng = np.random.default_rng(31)
    n = 3
    draws = 10_000
    q_raw = np.empty((draws, 4))
    q_cor = np.empty((draws, 4))
    for i in range(draws):
        while True:
            g0 = random_group_element(n, rng)
            g1t = random_group_element(n, rng)  # rotation-invariant target law
            try:
                g1, _ = lie.make_path_pair(g0, g1t)
                break
            except lie.AngleNearPi:
                continue  # resample, as the training loop does
        qa = lie.rot_to_quat(g1t.rot[0])
        qb = lie.rot_to_quat(g1.rot[0])
        q_raw[i] = np.where(qa[0] < 0, -qa, qa)
        q_cor[i] = np.where(qb[0] < 0, -qb, qb)
    # Bonferroni over 4 coordinates at family level 0.01
    for k in range(4):
        assert stats.ks_2samp(q_raw[:, k], q_cor[:, k]).pvalue > 0.01 / 4


# ---------------------------------------------------------------------------
# interpolating path
# ---------------------------------------------------------------------------

def test_path_endpoints():
    rng = np.random.default_rng(32)
    for _ in range(10):
        g0 = random_group_element(4, rng)
        g1t = random_group_element(4, rng)
        g1, xi = lie.make_path_pair(g0, g1t)
        h0 = lie.eval_path(g0, xi, 0.0)
        h1 = lie.eval_path(g0, xi, 1.0)
        assert np.abs(h0.rot - g0.rot).max() < 1e-10
        assert np.abs(h0.trans - g0.trans).max() < 1e-10
        assert np.abs(h1.rot - g1.rot).max() < 1e-10
        assert np.abs(h1.trans - g1.trans).max() < 1e-10


def test_path_constant_when_endpoints_match():
    rng = np.random.default_rng(33)
    g = random_group_element(3, rng)
    g1, xi = lie.make_path_pair(g, g)
    assert np.abs(xi.w).max() < 1e-9 and np.abs(xi.t).max() < 1e-9


def test_path_pure_translation_midpoint():
    n = 2
    g0 = lie.GroupElementN.identity(n)
    g1 = lie.GroupElementN(np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
                           np.array([[2.0, 0.0, 0.0], [0.0, 4.0, 0.0]]))
    # bypass the correction: logs of pure translations are the translations
    xi = lie.TwistN(np.zeros((n, 3)), g1.trans.copy())
    mid = lie.eval_path(g0, xi, 0.5)
    assert np.abs(mid.trans - g1.trans / 2).max() < 1e-12


def test_path_derivative_matches_twist_field():
    """Central difference of h(tau) in matrix form equals xi_hat @ h(tau)."""
    rng = np.random.default_rng(34)
    g0 = random_group_element(3, rng)
    g1t = random_group_element(3, rng)
    _, xi = lie.make_path_pair(g0, g1t)
    eps = 1e-6
    for tau in (0.21, 0.5, 0.83):
        hp = lie.eval_path(g0, xi, tau + eps)
        hm = lie.eval_path(g0, xi, tau - eps)
        h = lie.eval_path(g0, xi, tau)
        dR = (hp.rot - hm.rot) / (2 * eps)
        dt = (hp.trans - hm.trans) / (2 * eps)
        K = lie._skew(xi.w)
        assert np.abs(dR - K @ h.rot).max() < 1e-6
        assert np.abs(dt - ((K @ h.trans[..., None])[..., 0] + xi.t)).max() < 1e-6


def test_path_right_translation_coupling():
    """Path built from right-rotated inputs equals the right-rotated path:
    the construction commutes with the rotation-tuple right action.  (Full
    right translations do not commute with the rotation correction; the
    acting group here is the per-piece rotation tuple.)"""
    rng = np.random.default_rng(35)
    g0 = random_group_element(4, rng)
    g1t = random_group_element(4, rng)
    rbar = haar_rotations(4, rng)
    rr = lie.GroupElementN(rbar, np.zeros((4, 3)))

    _, xi = lie.make_path_pair(g0, g1t)
    _, xi_r = lie.make_path_pair(lie.compose(g0, rr), lie.compose(g1t, rr))
    assert np.abs(xi.w - xi_r.w).max() < 1e-9
    assert np.abs(xi.t - xi_r.t).max() < 1e-9
    for tau in (0.0, 0.37, 1.0):
        a = lie.eval_path(lie.compose(g0, rr), xi_r, tau)
        b = lie.compose(lie.eval_path(g0, xi, tau), rr)
        assert np.abs(a.rot - b.rot).max() < 1e-9
        assert np.abs(a.trans - b.trans).max() < 1e-9


def test_eval_path_tau_out_of_range():
    g0 = lie.GroupElementN.identity(2)
    xi = lie.TwistN.zero(2)
    with pytest.raises(lie.TauOutOfRange):
        lie.eval_path(g0, xi, 1.5)
    with pytest.raises(lie.TauOutOfRange):
        lie.eval_path(g0, xi, -0.1)
