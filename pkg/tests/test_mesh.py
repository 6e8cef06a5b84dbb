import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vbones.mesh import (AnimSequence, Mesh, MeshError, build_adjacency, frequency_split, grid_mesh,
                         icosphere, laplacian_smooth, uniform_laplacian)


def test_single_triangle_neighbors():
    m = Mesh(np.array([[0, 1, 2]]), np.eye(3))
    adj = build_adjacency(m)
    assert [a.tolist() for a in adj] == [[1, 2], [0, 2], [0, 1]]


def test_shared_edge_neighbors():
    m = Mesh(np.array([[0, 1, 2], [1, 3, 2]]), np.random.default_rng(0).normal(size=(4, 3)))
    adj = build_adjacency(m)
    assert len(adj[1]) == 3 and len(adj[2]) == 3
    assert len(adj[0]) == 2 and len(adj[3]) == 2


def test_icosphere_valence():
    adj = build_adjacency(icosphere(1))
    assert {len(a) for a in adj} == {5, 6}
    # 12 original vertices keep valence 5, the 30 edge midpoints get 6
    assert sum(len(a) == 5 for a in adj) == 12
    assert sum(len(a) == 6 for a in adj) == 30


def test_adjacency_symmetric_and_sorted():
    adj = build_adjacency(icosphere(2))
    for i, a in enumerate(adj):
        assert np.all(np.diff(a) > 0)
        for j in a:
            assert i in adj[j]


def test_duplicate_faces_dropped(caplog):
    m = Mesh(np.array([[0, 1, 2], [2, 0, 1]]), np.eye(3))
    adj = build_adjacency(m)
    assert [len(a) for a in adj] == [2, 2, 2]
    assert "duplicate" in caplog.text


def test_mesh_rejects_bad_faces():
    with pytest.raises(MeshError):
        Mesh(np.array([[0, 1, 3]]), np.eye(3))
    with pytest.raises(MeshError):
        Mesh(np.array([[0, 1, 1]]), np.eye(3))


def test_sequence_rejects_nan():
    m = grid_mesh(3, 3)
    frames = np.zeros((2, 9, 3))
    frames[1, 4, 0] = np.nan
    with pytest.raises(MeshError):
        AnimSequence(m, frames)


def _star(neighbors):
    pos = np.vstack([np.zeros(3), neighbors])
    adj = [np.arange(1, len(pos))] + [np.array([0]) for _ in neighbors]
    return pos, adj


def test_laplacian_hexagon_center_is_zero():
    ang = np.arange(6) * np.pi / 3
    pos, adj = _star(np.stack([np.cos(ang), np.sin(ang), np.zeros(6)], 1))
    assert np.allclose(uniform_laplacian(pos, adj)[0], 0.0, atol=1e-15)


def test_laplacian_opposite_neighbors():
    pos, adj = _star(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    assert np.array_equal(uniform_laplacian(pos, adj)[0], np.zeros(3))


def test_laplacian_two_neighbors_hand_value():
    pos, adj = _star(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    assert np.allclose(uniform_laplacian(pos, adj)[0], [0.5, 0.5, 0.0])


def test_laplacian_isolated_vertex_named():
    adj = [np.array([1]), np.array([0]), np.array([], dtype=np.int64)]
    with pytest.raises(MeshError, match="vertex 2"):
        uniform_laplacian(np.zeros((3, 3)), adj)


def test_smooth_zero_iterations_identity():
    m = icosphere(1)
    p = m.rest_positions + 0.1
    assert np.array_equal(laplacian_smooth(p, m.adjacency(), 0, 0.5), p)


def test_smooth_step_bounds():
    m = icosphere(0)
    for step in (0.0, 1.5, -0.1):
        with pytest.raises(MeshError):
            laplacian_smooth(m.rest_positions, m.adjacency(), 1, step)


def test_smooth_flat_interior_unchanged():
    m = grid_mesh(6, 5)
    out = laplacian_smooth(m.rest_positions, m.adjacency(), 10, 0.5)
    assert np.allclose(out[:, 1], 0.0)
    # interior vertices stay at neighbor centroids only in the plane; the flat grid stays flat
    assert np.max(np.abs(out[:, 1] - m.rest_positions[:, 1])) == 0.0


def test_smooth_flat_regular_patch_unchanged():
    # a closed flat configuration where every vertex is already the centroid of its neighbors
    pos, adj = _star(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    pos[1:] = 0.0
    assert np.array_equal(laplacian_smooth(pos, adj, 5, 0.5), pos)


def test_smooth_icosphere_shrinks():
    m = icosphere(2)
    out = laplacian_smooth(m.rest_positions, m.adjacency(), 10, 0.5)
    assert np.linalg.norm(out, axis=1).max() < np.linalg.norm(m.rest_positions, axis=1).max()


def test_split_constant_flat_grid():
    m = grid_mesh(5, 5)
    seq = AnimSequence(m, np.repeat(m.rest_positions[None], 3, axis=0))
    sp = frequency_split(seq, 20, 0.5)
    # the flat grid only shrinks inside its plane, so the out-of-plane residual is zero
    assert np.array_equal(sp.high.frames[..., 1], np.zeros((3, 25)))


def test_split_constant_grid_high_is_zero_when_already_smooth():
    m = icosphere(0)
    frames = np.zeros((2, m.vertex_count, 3)) + 0.25
    sp = frequency_split(AnimSequence(m, frames), 20, 0.5)
    assert np.max(np.abs(sp.high.frames)) < 1e-14


def test_noisy_sphere_high_frequency():
    rng = np.random.default_rng(3)
    m = icosphere(5)
    n = m.rest_positions / np.linalg.norm(m.rest_positions, axis=1, keepdims=True)
    noisy = n * (1.0 + 0.01 * rng.normal(size=(m.vertex_count, 1)))
    seq = AnimSequence(m, noisy[None])
    radial = np.linalg.norm(noisy, axis=1)
    fit_err = np.sqrt(np.mean((radial - radial.mean()) ** 2))
    rms = []
    for it in (5, 10, 20):
        high = frequency_split(seq, it, 0.5).high.frames[0]
        rms.append(np.sqrt(np.mean(np.sum(high**2, axis=1))))
    assert rms[-1] < fit_err + 0.01
    assert rms[0] < rms[1] < rms[2]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 12, 3), elements=st.floats(-10, 10)),
       st.integers(0, 25), st.floats(0.05, 1.0))
def test_split_reconstructs(frames, iterations, step):
    m = icosphere(0)
    sp = frequency_split(AnimSequence(m, frames), iterations, step)
    assert np.allclose(sp.low.frames + sp.high.frames, frames, rtol=1e-6, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (12, 3), elements=st.floats(-1, 1)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_laplacian_linear(p, q, a, b):
    adj = icosphere(0).adjacency()
    lhs = uniform_laplacian(a * p + b * q, adj)
    rhs = a * uniform_laplacian(p, adj) + b * uniform_laplacian(q, adj)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (3,), elements=st.floats(-5, 5)), st.integers(0, 10))
def test_smoothing_translation_equivariant(p, t, iterations):
    adj = icosphere(0).adjacency()
    a = laplacian_smooth(p + t, adj, iterations, 0.5)
    b = laplacian_smooth(p, adj, iterations, 0.5) + t
    assert np.allclose(a, b, atol=1e-9)


def test_smoothing_frames_independent():
    m = icosphere(1)
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(4, m.vertex_count, 3))
    batch = laplacian_smooth(frames, m.adjacency(), 7, 0.3)
    single = np.stack([laplacian_smooth(f, m.adjacency(), 7, 0.3) for f in frames])
    assert np.allclose(batch, single, atol=1e-14)
