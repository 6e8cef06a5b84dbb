import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbones.body import body_surface, generate_body_motion
from vbones.clothsim import SimParams, simulate, skirt_template
from vbones.formats import read_obj
from vbones.mesh import AnimSequence, grid_mesh
from vbones.metrics import (EvalReport, MetricError, evaluate, export_map_csv, export_map_obj,
                            format_table, hausdorff, hausdorff_brute, hausdorff_frame,
                            looseness_map, per_vertex_error_map, rmse, sted)

MESH = grid_mesh(4, 4, 0.3)


def moving(T=6, seed=0):
    rng = np.random.default_rng(seed)
    drift = np.cumsum(rng.normal(scale=0.01, size=(T, 16, 3)), axis=0)
    return MESH.rest_positions[None] + drift


def test_rmse_examples():
    truth = moving()
    assert rmse(truth, truth) == 0.0
    assert np.isclose(rmse(truth + [0.003, 0, 0], truth), 3.0, atol=1e-9)
    t = np.zeros((1, 2, 3))
    p = np.array([[[0.001, 0, 0], [0, 0.007, 0]]])
    assert np.isclose(rmse(p, t), 5.0, atol=1e-12)


def test_rmse_accepts_sequences():
    truth = moving()
    a = AnimSequence(MESH, truth + 0.001)
    assert np.isclose(rmse(a, AnimSequence(MESH, truth)), np.sqrt(3.0), atol=1e-9)


def test_shape_mismatch():
    with pytest.raises(MetricError):
        rmse(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(MetricError):
        sted(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)), [[0, 1]])


def test_hausdorff_examples():
    truth = moving()
    assert hausdorff(truth, truth) == 0.0
    assert np.isclose(hausdorff(truth + [0, 0, 0.004], truth), 4.0, atol=1e-9)
    with pytest.raises(MetricError):
        hausdorff_frame(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(MetricError):
        hausdorff_brute(np.zeros((2, 3)), np.zeros((0, 3)))


def test_hausdorff_directed_parts():
    a = np.array([[0.0, 0, 0], [0.01, 0, 0]])
    b = np.array([[0.0, 0, 0]])
    assert np.isclose(hausdorff_frame(a, b), 10.0)
    assert np.isclose(hausdorff_frame(b, a), 10.0)


@pytest.mark.parametrize("seed", range(50))
def test_hausdorff_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3)) * 1.2 + 0.1
    assert np.isclose(hausdorff_frame(a, b), hausdorff_brute(a, b), rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 10, 3)), rng.normal(size=(3, 10, 3))
    assert rmse(a, b) == rmse(b, a) >= 0
    assert hausdorff(a, b) == hausdorff(b, a) >= 0
    for fa, fb in zip(a, b):
        worst = np.max(np.linalg.norm(fa - fb, axis=1)) * 1000.0
        assert rmse(fa[None], fb[None]) <= worst + 1e-9
    assert sted(a, b, MESH.edges()[:5] % 10) >= 0


def test_vertex_set_hausdorff_can_undercut_rmse():
    a = np.array([[0.0, 0, 0], [0.01, 0, 0]])
    assert hausdorff_frame(a[::-1], a) == 0.0
    assert rmse(a[None, ::-1], a[None]) == pytest.approx(10.0)


def test_sted_examples():
    truth = moving()
    edges = MESH.edges()
    assert sted(truth, truth, edges) == 0.0
    assert sted(truth + [0.1, -0.2, 0.05], truth, edges) <= 1e-12
    static = np.repeat(MESH.rest_positions[None] + [0.1, 0.2, 0.3], 4, axis=0)
    total, spatial, temporal = sted(1.1 * static, static, edges, parts=True)
    assert np.isclose(spatial, 0.1, atol=1e-12)
    assert temporal == 0.0
    assert np.isclose(total, 0.1, atol=1e-12)


def test_sted_temporal_weight():
    truth = moving()
    pred = moving(seed=1)
    total, s, t = sted(pred, truth, MESH.edges(), parts=True)
    assert t > 0
    assert np.isclose(sted(pred, truth, MESH.edges(), temporal_weight=2.5), s + 2.5 * t)


def test_sted_is_asymmetric():
    static = np.repeat(MESH.rest_positions[None], 2, axis=0)
    edges = MESH.edges()
    assert not np.isclose(sted(1.5 * static, static, edges), sted(static, 1.5 * static, edges))


def test_sted_skips_zero_length_edges(caplog):
    truth = np.zeros((2, 3, 3))
    truth[:, 1] = [1.0, 0, 0]
    pred = truth.copy()
    pred[:, 1] = [1.2, 0, 0]
    val = sted(pred, truth, [[0, 1], [0, 2]])
    assert np.isclose(val, 0.2)
    assert "skipped 2" in caplog.text


def test_per_vertex_map():
    truth = moving(T=4)
    assert np.array_equal(per_vertex_error_map(truth, truth), np.zeros(16))
    pred = truth.copy()
    pred[:2, 5, 1] += 0.002
    m = per_vertex_error_map(pred, truth)
    assert np.isclose(m[5], 1.0, atol=1e-9)
    assert np.all(np.delete(m, 5) == 0)


def test_looseness_on_body_sample_is_zero():
    m = generate_body_motion(2, 3)
    bodies = np.stack([body_surface(m, f).positions for f in range(3)])
    on_body = bodies[:, :7]
    mean, std = looseness_map(on_body, bodies)
    assert np.all(mean == 0) and np.all(std == 0)
    with pytest.raises(MetricError):
        looseness_map(on_body, bodies[:2])


def test_looseness_hem_exceeds_waistband():
    tpl = skirt_template(16, 8)
    m = generate_body_motion(3, 40)
    seq = simulate(tpl, m, SimParams(1e-5, 0.04, 1.0))
    bodies = np.stack([body_surface(m, f).positions for f in range(40)])
    mean, std = looseness_map(seq, bodies)
    waist, hem = slice(0, 16), slice(-16, None)
    assert mean[hem].mean() > mean[waist].mean()
    assert std[hem].mean() > std[waist].mean()
    # pinned ring moves rigidly with the pelvis, so its distance never changes
    assert np.max(std[waist]) <= 1e-6


def test_eval_report_and_table(tmp_path):
    truth = moving()
    pred = truth + [0.002, 0, 0]
    rep = evaluate(pred, truth, MESH.edges(), label="lf")
    assert np.isclose(rep.rmse, 2.0) and np.isclose(rep.hausdorff, 2.0) and rep.sted <= 1e-12
    rep.save(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["units"]["rmse"] == "mm" and len(d["per_vertex_mean_error"]) == 16
    table = format_table([rep, evaluate(truth, truth, MESH.edges())])
    lines = table.splitlines()
    assert len(lines) == 4 and lines[2].startswith("lf") and lines[3].startswith("#1")
    assert "2.000" in lines[2]
    with pytest.raises(MetricError):
        EvalReport(-1.0, 0.0, 0.0, np.zeros(1))


def test_map_exports(tmp_path):
    values = np.linspace(0.0, 3.0, 16)
    export_map_obj(tmp_path / "m.obj", MESH.rest_positions, MESH.faces, values)
    back = read_obj(tmp_path / "m.obj")
    assert np.allclose(back.rest_positions, MESH.rest_positions, atol=1e-6)
    text = (tmp_path / "m.obj").read_text().splitlines()
    first = [float(x) for x in text[0].split()[4:]]
    assert np.allclose(first, [0.1, 0.2, 0.9], atol=1e-6)
    export_map_csv(tmp_path / "m.csv", values)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["vertex", "error_mm"] and len(rows) == 17
    assert float(rows[-1][1]) == 3.0
