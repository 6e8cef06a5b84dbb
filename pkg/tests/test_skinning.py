import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synth import axis_angle, known_rig, random_rotation
from vbones.skinning import (BoneTracks, DecompositionResult, SkinModel, SSDRError, lbs_pose,
                             lbs_sequence, residual, ssdr_decompose, ssdr_init, ssdr_solve_transforms, ssdr_solve_weights,
                             weighted_procrustes)


def _rest(n=20, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3))


def test_lbs_identity_is_rest():
    skin, _, _ = known_rig(50, 3, 2)
    id_ = BoneTracks.identity(1, 3)
    assert np.allclose(lbs_pose(skin, id_.rotations[0], id_.translations[0]), skin.rest_pose)


def test_lbs_single_bone_translation():
    P = _rest()
    skin = SkinModel(P, np.ones((20, 1)))
    t = np.array([0.1, -0.2, 0.3])
    assert np.allclose(lbs_pose(skin, np.eye(3)[None], t[None]), P + t)


def test_lbs_two_bone_hand_value():
    skin = SkinModel(np.zeros((1, 3)), np.array([[0.5, 0.5]]))
    out = lbs_pose(skin, np.stack([np.eye(3)] * 2), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    assert np.allclose(out[0], [0.5, 0.5, 0.0])


def test_lbs_dimension_mismatch():
    skin = SkinModel(_rest(), np.ones((20, 1)))
    with pytest.raises(ValueError):
        lbs_pose(skin, np.stack([np.eye(3)] * 2), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_lbs_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    skin, tracks, _ = known_rig(40, 3, 2, seed=seed % 7)
    Rs, ts = tracks.rotations[1], tracks.translations[1]
    G, g = random_rotation(rng), rng.normal(size=3)
    base = lbs_pose(skin, Rs, ts)
    moved = lbs_pose(skin, G @ Rs, ts @ G.T + g)
    assert np.max(np.abs(moved - (base @ G.T + g))) <= 1e-9


def test_procrustes_recovers_rotation():
    rng = np.random.default_rng(1)
    P = _rest(30)
    R = random_rotation(rng)
    Rh, th = weighted_procrustes(P, P @ R.T)
    assert np.max(np.abs(Rh - R)) < 1e-6 and np.max(np.abs(th)) < 1e-6


def test_init_rigid_translation_single_cluster():
    P = _rest()
    shifts = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0.1, 0], [0.3, 0.1, -0.2]])
    frames = P[None] + shifts[:, None]
    labels, tracks = ssdr_init(frames, 1)
    assert np.all(labels == 0)
    assert np.allclose(tracks.rotations, np.eye(3), atol=1e-9)
    assert np.allclose(tracks.translations[:, 0], shifts, atol=1e-9)


def test_init_two_rigid_halves():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(40, 3)) * 0.2 + [-1, 0, 0]
    B = rng.normal(size=(40, 3)) * 0.2 + [1, 0, 0]
    frames = []
    for f in range(8):
        Ra = axis_angle([0, 0, 1], 0.1 * f)
        Rb = axis_angle([1, 0, 0], -0.15 * f)
        frames.append(np.vstack([A @ Ra.T - [0.1 * f, 0, 0], B @ Rb.T + [0.1 * f, 0, 0]]))
    labels, _ = ssdr_init(np.array(frames), 2)
    truth = np.repeat([0, 1], 40)
    purity = max(np.mean(labels == truth), np.mean(labels == 1 - truth))
    assert purity >= 0.95


def test_init_one_bone_per_vertex():
    skin, tracks, frames = known_rig(12, 3, 5)
    labels, tr = ssdr_init(frames, 12)
    assert sorted(labels.tolist()) == list(range(12))
    W = np.zeros((12, 12))
    W[np.arange(12), labels] = 1
    assert np.max(np.abs(lbs_sequence(SkinModel(frames[0], W, 1), tr.matrices()) - frames)) < 1e-9


def test_weights_single_bone():
    skin, tracks, frames = known_rig(30, 1, 4)
    W = ssdr_solve_weights(frames, tracks, skin.rest_pose, 4)
    assert np.array_equal(W, np.ones((30, 1)))


def test_weights_vertex_follows_one_bone():
    rng = np.random.default_rng(4)
    T, B = 10, 5
    R = np.stack([[random_rotation(rng, 0.5) for _ in range(B)] for _ in range(T)])
    t = rng.normal(size=(T, B, 3)) * 0.1
    tracks = BoneTracks(R, t)
    P = _rest(5)
    Wtrue = np.eye(5)
    frames = lbs_sequence(SkinModel(P, Wtrue, 1), tracks.matrices())
    W = ssdr_solve_weights(frames, tracks, P, 4)
    assert np.all(np.diag(W) >= 0.99)


def test_weights_recover_blend():
    rng = np.random.default_rng(5)
    T, B = 12, 3
    R = np.stack([[random_rotation(rng, 0.7) for _ in range(B)] for _ in range(T)])
    tracks = BoneTracks(R, rng.normal(size=(T, B, 3)) * 0.2)
    P = _rest(1)
    Wtrue = np.array([[0.3, 0.0, 0.7]])
    frames = lbs_sequence(SkinModel(P, Wtrue, 2), tracks.matrices())
    W = ssdr_solve_weights(frames, tracks, P, 4)
    assert np.max(np.abs(W - Wtrue)) <= 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 4))
def test_weights_simplex_and_sparse(seed, K):
    rng = np.random.default_rng(seed)
    skin, tracks, frames = known_rig(40, 6, 5, seed=seed % 5)
    noisy = frames + rng.normal(scale=0.01, size=frames.shape)
    W = ssdr_solve_weights(noisy, tracks, skin.rest_pose, K)
    assert np.all(W >= 0)
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-9)
    assert np.max((W > 0).sum(axis=1)) <= K


def test_transforms_pure_translation():
    P = _rest()
    shifts = np.array([[0, 0, 0], [0.3, -0.1, 0.2]])
    frames = P[None] + shifts[:, None]
    tracks, dormant = ssdr_solve_transforms(frames, np.ones((20, 1)), P, BoneTracks.identity(2, 1))
    assert not dormant
    assert np.allclose(tracks.rotations, np.eye(3), atol=1e-9)
    assert np.allclose(tracks.translations[:, 0], shifts, atol=1e-9)


def test_transforms_known_rotation():
    rng = np.random.default_rng(6)
    P = _rest()
    R = random_rotation(rng)
    tracks, _ = ssdr_solve_transforms((P @ R.T)[None], np.ones((20, 1)), P, BoneTracks.identity(1, 1))
    assert np.max(np.abs(tracks.rotations[0, 0] - R)) <= 1e-6


def test_transforms_two_bone_recovery():
    skin, truth, frames = known_rig(200, 2, 8, sparseness=2, seed=3)
    tracks = BoneTracks.identity(8, 2)
    for _ in range(60):
        tracks, _ = ssdr_solve_transforms(frames, skin.weights, skin.rest_pose, tracks)
    err = np.linalg.norm(tracks.rotations - truth.rotations, axis=(-2, -1)).max()
    assert err <= 1e-4


def test_transforms_dormant_bone_kept():
    skin, tracks, frames = known_rig(30, 2, 3, sparseness=2)
    W = np.zeros((30, 3))
    W[:, :2] = skin.weights
    start = BoneTracks.from_matrices(np.concatenate(
        [tracks.matrices(), np.broadcast_to(np.eye(3, 4), (3, 1, 3, 4))], axis=1))
    start.translations[:, 2] = 7.0
    out, dormant = ssdr_solve_transforms(frames, W, skin.rest_pose, start)
    assert dormant == [2]
    assert np.all(out.translations[:, 2] == 7.0)


def test_decompose_reseeds_dormant_bones(caplog):
    skin, tracks, frames = known_rig(60, 2, 12, sparseness=2, seed=2)
    frames = frames + np.random.default_rng(2).normal(scale=0.01, size=frames.shape)
    frames[0] = skin.rest_pose
    W = np.zeros((60, 3))
    W[:, :2] = skin.weights
    M = np.concatenate([tracks.matrices(), np.broadcast_to(np.eye(3, 4), (12, 1, 3, 4))], axis=1)
    M[:, 2, :, 3] = 1000.0  # a bone no vertex will choose
    start = DecompositionResult(SkinModel(skin.rest_pose, W, 2), BoneTracks.from_matrices(M), 0.0, 0.0)
    with caplog.at_level("INFO", logger="vbones.skinning"):
        res = ssdr_decompose(frames, 3, max_iters=6, tol=-1.0, sparseness=2, init=start)
    assert "re-seeded 1 dormant bones at iteration 5" in caplog.text
    assert np.max(np.diff(res.objective_history)) <= 1e-9
    assert np.all(np.abs(res.tracks.translations[:, 2]) < 10.0)
    R = res.tracks.rotations[:, 2]
    assert np.allclose(R @ R.transpose(0, 2, 1), np.eye(3), atol=1e-9)


def test_decompose_rigid_one_bone():
    rng = np.random.default_rng(7)
    P = _rest(50)
    frames = np.stack([P @ random_rotation(rng, 0.5).T + rng.normal(size=3) for _ in range(6)])
    frames[0] = P
    res = ssdr_decompose(frames, 1, 10)
    assert res.residual_rmse <= 1e-6


def test_decompose_known_rig_and_monotone():
    skin, _, frames = known_rig()
    res = ssdr_decompose(frames, 6, max_iters=30, sparseness=4)
    assert res.residual_relative <= 0.01
    assert np.max(np.diff(res.objective_history)) <= 1e-9
    res.skin_model.check()
    assert res.tracks.orthonormality_error() <= 1e-6
    assert np.all(np.linalg.det(res.tracks.rotations) > 0)


def test_residual_rmse_recomputable():
    skin, _, frames = known_rig(100, 4, 10)
    res = ssdr_decompose(frames, 3, max_iters=5)
    r = residual(frames, res)
    assert np.isclose(np.sqrt(np.mean(np.sum(r**2, -1))), res.residual_rmse, rtol=1e-12)


def test_nested_init_never_worse():
    skin, _, frames = known_rig(200, 6, 20, seed=2)
    small = ssdr_decompose(frames, 2, max_iters=8)
    big = ssdr_decompose(frames, 5, max_iters=8, init=small)
    assert big.residual_rmse <= small.residual_rmse
    with pytest.raises(ValueError):
        ssdr_decompose(frames, 1, init=small)


def test_decompose_needs_two_frames():
    with pytest.raises(ValueError):
        ssdr_decompose(np.zeros((1, 5, 3)), 1)


def test_decompose_deterministic():
    _, _, frames = known_rig(80, 3, 10, seed=1)
    a = ssdr_decompose(frames, 3, 5)
    b = ssdr_decompose(frames, 3, 5)
    assert np.array_equal(a.skin_model.weights, b.skin_model.weights)
    assert np.array_equal(a.tracks.matrices(), b.tracks.matrices())


def test_ssdr_error_is_runtime_error():
    assert issubclass(SSDRError, RuntimeError)
