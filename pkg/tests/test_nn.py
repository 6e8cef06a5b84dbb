import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synth import known_rig
from vbones import autodiff as ad
from vbones import nn
from vbones.mesh import grid_mesh, icosphere
from vbones.skinning import SkinModel, lbs_sequence

TOL = 1e-6


def _gru(n_in=3, hidden=4, seed=1):
    p = nn.ParameterSet(seed)
    nn.add_gru(p, "g", n_in, hidden)
    return p


def test_parameter_set_unique_names_and_seeded():
    p = nn.ParameterSet(3)
    p.add("a", (2, 3))
    with pytest.raises(KeyError):
        p.add("a", (2, 3))
    q = nn.ParameterSet(3)
    q.add("a", (2, 3))
    assert np.array_equal(p["a"].data, q["a"].data)
    with pytest.raises(ValueError):
        p.load_state({"a": np.zeros((3, 2))})


def test_orthogonal_recurrent_init():
    p = _gru(3, 5)
    w = p["g.whc"].data
    assert np.allclose(w.T @ w, np.eye(5), atol=1e-12)


def test_gru_hand_values():
    p = _gru(2, 3)
    for _, t in p.items():
        t.data[:] = 0.0
    h = nn.gru_cell(np.zeros((1, 2)), np.ones((1, 3)), p, "g")
    assert np.allclose(h.data, 0.5)


def test_gru_ignores_decoupled_input():
    p = _gru(3, 4)
    p["g.wx"].data[:] = 0.0
    h = np.random.default_rng(0).normal(size=(1, 4))
    a = nn.gru_cell(np.zeros((1, 3)), h, p, "g").data
    b = nn.gru_cell(np.full((1, 3), 5.0), h, p, "g").data
    assert np.array_equal(a, b)


def test_gru_gradcheck():
    rng = np.random.default_rng(2)
    p = _gru(3, 4)
    for _, t in p.items():
        t.data[:] = rng.normal(scale=0.5, size=t.shape)
    x = ad.Tensor(rng.normal(size=(2, 3)))
    h = ad.Tensor(rng.normal(size=(2, 4)))
    w = rng.normal(size=(2, 4))
    err = ad.gradcheck(lambda: ad.sum_(nn.gru_cell(x, h, p, "g") * w),
                       [x, h] + [t for _, t in p.items()])
    assert err <= TOL


def test_gru_projected_input_matches():
    rng = np.random.default_rng(3)
    p = _gru(3, 4)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    a = nn.gru_cell(x, h, p, "g").data
    b = nn.gru_cell(None, h, p, "g", projected=nn.gru_input_projection(x, p, "g")).data
    assert np.array_equal(a, b)


def _conv(f_in, f_out, seed=0):
    p = nn.ParameterSet(seed)
    nn.add_mlp(p, "e", [2 * f_in, f_out])
    return p


def test_edgeconv_uniform_features():
    m = icosphere(1)
    g = nn.Graph(m.adjacency())
    p = _conv(3, 5)
    x = np.tile([0.3, -0.2, 0.7], (m.vertex_count, 1))
    out = nn.edgeconv(x, g, p, "e").data
    assert np.allclose(out, out[0], atol=1e-15)


def test_edgeconv_isolated_node():
    g = nn.Graph([np.zeros(0, dtype=np.int64)])
    p = _conv(2, 3)
    x = np.array([[0.5, -1.0]])
    want = np.maximum(np.concatenate([x, np.zeros((1, 2))], 1) @ p["e.0.w"].data + p["e.0.b"].data, 0)
    assert np.allclose(nn.edgeconv(x, g, p, "e").data, want)


def test_edgeconv_path_hand_values():
    g = nn.Graph([np.array([1]), np.array([0, 2]), np.array([1])])
    p = _conv(1, 2)
    p["e.0.w"].data[:] = np.eye(2)
    x = np.array([[1.0], [2.0], [4.0]])
    out = nn.edgeconv(x, g, p, "e").data
    assert np.array_equal(out, [[1.0, 1.0], [2.0, 2.0], [4.0, 0.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_edgeconv_matches_edge_level(seed):
    rng = np.random.default_rng(seed)
    g = nn.Graph(grid_mesh(4, 3).adjacency())
    p = _conv(3, 6, seed % 100)
    p["e.0.b"].data[:] = rng.normal(size=6)
    x = rng.normal(size=(12, 3))
    a = nn.edgeconv(x, g, p, "e").data
    b = nn.edgeconv_direct(x, g, p, "e").data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_edgeconv_gradcheck():
    rng = np.random.default_rng(4)
    g = nn.Graph(grid_mesh(4, 3).adjacency())
    p = _conv(3, 5)
    p["e.0.b"].data[:] = rng.normal(scale=0.3, size=5)
    x = ad.Tensor(rng.normal(size=(12, 3)))
    w = rng.normal(size=(12, 5))
    err = ad.gradcheck(lambda: ad.sum_(nn.edgeconv(x, g, p, "e") * w),
                       [x] + [t for _, t in p.items()])
    assert err <= TOL


def test_edgeconv_multilayer_gradcheck():
    rng = np.random.default_rng(5)
    g = nn.Graph(grid_mesh(3, 3).adjacency())
    p = nn.ParameterSet(1)
    nn.add_mlp(p, "e", [4, 5, 3])
    x = ad.Tensor(rng.normal(size=(9, 2)))
    w = rng.normal(size=(9, 3))
    err = ad.gradcheck(lambda: ad.sum_(nn.edgeconv(x, g, p, "e", layers=2) * w),
                       [x] + [t for _, t in p.items()])
    assert err <= TOL


def test_graph_batched_matches_per_frame():
    rng = np.random.default_rng(6)
    g = nn.Graph(grid_mesh(3, 4).adjacency())
    p = _conv(3, 4)
    frames = rng.normal(size=(3, 12, 3))
    batch = nn.edgeconv(frames.reshape(-1, 3), g.batched(3), p, "e").data.reshape(3, 12, 4)
    single = np.stack([nn.edgeconv(f, g, p, "e").data for f in frames])
    assert np.array_equal(batch, single)


def test_rot6d_identity():
    R = nn.rotation_from_6d(np.array([1.0, 0, 0, 0, 1.0, 0])).data
    assert np.allclose(R, np.eye(3), atol=1e-6)
    assert np.allclose(nn.rotation_from_6d(np.zeros(6)).data, np.eye(3))


def test_rot6d_orthonormal_random():
    six = np.random.default_rng(7).normal(size=(1000, 6))
    R = nn.rotation_from_6d(six).data
    RtR = np.einsum("nji,njk->nik", R, R)
    assert np.max(np.abs(RtR - np.eye(3))) <= 1e-9
    assert np.all(np.linalg.det(R) > 0)


def test_rot6d_gradcheck():
    rng = np.random.default_rng(8)
    six = ad.Tensor(rng.normal(size=(5, 6)))
    w = rng.normal(size=(5, 3, 3))
    assert ad.gradcheck(lambda: ad.sum_(nn.rotation_from_6d(six) * w), [six]) <= TOL


def test_lbs_layer_matches_lbs():
    skin, tracks, frames = known_rig(30, 3, 4)
    out = nn.lbs_layer(skin, tracks.rotations, tracks.translations).data
    assert np.allclose(out, frames, atol=1e-12)


def test_lbs_layer_identity_and_translation_gradient():
    rng = np.random.default_rng(9)
    P = rng.normal(size=(6, 3))
    skin = SkinModel(P, np.ones((6, 1)))
    R = ad.Tensor(np.eye(3)[None, None])
    t = ad.Tensor(np.zeros((1, 1, 3)), requires_grad=True)
    v = nn.lbs_layer(skin, R, t)
    assert np.allclose(v.data[0], P)
    ad.sum_(ad.square(v)).backward()
    assert np.allclose(t.grad[0, 0], 2 * P.sum(axis=0))


def test_lbs_layer_gradcheck():
    rng = np.random.default_rng(10)
    W = rng.uniform(size=(4, 2))
    W /= W.sum(1, keepdims=True)
    skin = SkinModel(rng.normal(size=(4, 3)), W, 2)
    R = ad.Tensor(rng.normal(size=(2, 2, 3, 3)))
    t = ad.Tensor(rng.normal(size=(2, 2, 3)))
    w = rng.normal(size=(2, 4, 3))
    assert ad.gradcheck(lambda: ad.sum_(nn.lbs_layer(skin, R, t) * w), [R, t]) <= TOL


def test_lbs_layer_zero_weight_bone_gets_no_gradient():
    rng = np.random.default_rng(11)
    W = np.zeros((5, 3))
    W[:, 0], W[:, 2] = 0.4, 0.6
    skin = SkinModel(rng.normal(size=(5, 3)), W, 2)
    R = ad.Tensor(np.broadcast_to(np.eye(3), (1, 3, 3, 3)).copy(), requires_grad=True)
    t = ad.Tensor(rng.normal(size=(1, 3, 3)), requires_grad=True)
    ad.sum_(ad.square(nn.lbs_layer(skin, R, t))).backward()
    assert np.all(R.grad[0, 1] == 0) and np.all(t.grad[0, 1] == 0)
    assert np.any(t.grad[0, 0] != 0)


def test_adam_zero_gradient_keeps_params():
    p = nn.ParameterSet(0)
    p.add("x", (3,))
    before = p["x"].data.copy()
    p["x"].grad = np.zeros(3)
    nn.Adam(p, lr=0.1).step()
    assert np.array_equal(p["x"].data, before)


def test_adam_first_step_is_signed_lr():
    value, g = np.array([1.0, -2.0]), np.array([0.3, -5.0])
    new, _, _ = nn.adam_step(value, g, 0.0, 0.0, 0.01, 0.9, 0.999, 1e-8, 1)
    assert np.allclose(new - value, -0.01 * np.sign(g), atol=1e-9)
    with pytest.raises(ValueError):
        nn.adam_step(value, g, 0.0, 0.0, 0.01, 0.9, 0.999, 1e-8, 0)


def test_adam_quadratic_bowl():
    p = nn.ParameterSet(0)
    x = p.add("x", (2,), "zeros")
    target = np.array([0.7, -0.4])
    opt = nn.Adam(p, lr=0.05)
    for _ in range(500):
        p.zero_grad()
        ad.sum_(ad.square(x - target)).backward()
        opt.step()
    assert np.max(np.abs(x.data - target)) <= 1e-4


def test_adam_skips_non_finite():
    p = nn.ParameterSet(0)
    p.add("x", (2,))
    before = p["x"].data.copy()
    p["x"].grad = np.array([np.nan, 1.0])
    opt = nn.Adam(p)
    assert opt.step() is False
    assert opt.skipped == 1 and opt.t == 0
    assert np.array_equal(p["x"].data, before)


def test_parameters_roundtrip(tmp_path):
    p = _gru(3, 4)
    opt = nn.Adam(p)
    for _, t in p.items():
        t.grad = np.ones_like(t.data)
    opt.step()
    nn.save_parameters(tmp_path / "c.vbnn", p, opt, {"scale": np.array([2.0])})
    q = _gru(3, 4, seed=99)
    opt2 = nn.Adam(q)
    buffers = nn.load_parameters(tmp_path / "c.vbnn", q, opt2)
    assert np.array_equal(buffers["scale"], [2.0])
    for n, t in p.items():
        assert np.array_equal(q[n].data, t.data)
    assert opt2.t == 1
