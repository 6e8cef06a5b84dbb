import json

import numpy as np
import pytest

from vbones.cli import build_parser, main
from vbones.config import ConfigError, ProjectConfig
from vbones.formats import read_sequence_frames

TINY = {
    "seed": 11,
    "simulation": {"grid": [[1e-7, 0.04, 1.0], [1e-5, 0.04, 1.0], [1e-3, 0.04, 1.0]],
                   "frames": 16, "train_sequences": 2, "validation_sequences": 1,
                   "substeps": 4, "iterations": 1},
    "ssdr": {"bone_count": 6, "max_iters": 5},
    "train": {"lf_hidden": 8, "hf_hidden": 6, "global_features": 4,
              "edgeconv_widths": [4, 4, 4], "fusion_widths": [4], "epochs": 2, "chunk": 8},
    "ensemble": {"pivots": 2, "kernel_steps": 5},
}


def write_config(d, data=TINY):
    path = d / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    d = tmp_path_factory.mktemp("proj")
    cfg = write_config(d)
    grid = TINY["simulation"]["grid"]
    assert main(["simulate", "-c", cfg]) == 0
    assert main(["decompose", "-c", cfg]) == 0
    for p in grid:
        text = ",".join(str(x) for x in p)
        assert main(["train-lf", "-c", cfg, "--params", text]) == 0
        assert main(["train-hf", "-c", cfg, "--params", text]) == 0
    assert main(["select-pivots", "-c", cfg]) == 0
    assert main(["fit-kernel", "-c", cfg]) == 0
    return d, cfg


def test_pipeline_artifacts(project):
    d, _ = project
    manifest = json.loads((d / "data" / "manifest.json").read_text())
    assert len(manifest["sequences"]) == 9
    assert len(list((d / "data").rglob("*.vbsq"))) == 9
    assert (d / "models" / "rig.vbrig").exists()
    bank = json.loads((d / "models" / "bank.json").read_text())
    assert len(bank["pivots"]) == 2
    names = ["simulate", "decompose", "select-pivots", "fit-kernel"]
    names += [f"train-{m}-b1e-07_m0.04_t1" for m in ("lf", "hf")]
    for name in names:
        rec = json.loads((d / "reports" / "runs" / f"{name}.json").read_text())
        assert name.startswith(rec["command"]) and "seed" in rec and rec["versions"]["numpy"]
        assert rec["outputs"] and rec["config"]["seed"] == 11, name


def test_pivots_are_the_sweep_endpoints(project):
    d, _ = project
    bank = json.loads((d / "models" / "bank.json").read_text())
    bending = sorted(p["params"]["bending_stiffness"] for p in bank["pivots"])
    assert bending == [1e-7, 1e-3]
    assert bank["sigma"] > 0


def test_infer_and_eval(project, capsys):
    d, cfg = project
    out = d / "pred.vbsq"
    assert main(["infer", "-c", cfg, "--params", "3e-6,0.04,1.0", "--out", str(out)]) == 0
    frames, rate = read_sequence_frames(out)
    assert frames.shape == (16, 480, 3) and rate == 30.0
    truth = d / "data" / "b1e-07_m0.04_t1" / "val_002.vbsq"
    assert main(["eval", "-c", cfg, "--pred", str(out), "--truth", str(truth), "--label", "ens",
                 "--map-obj", str(d / "map.obj"), "--map-csv", str(d / "map.csv")]) == 0
    assert "ens" in capsys.readouterr().out
    rep = json.loads((d / "reports" / "eval_pred.json").read_text())
    assert rep["rmse"] >= 0 and (d / "map.obj").exists() and (d / "map.csv").exists()


def test_single_pivot_bank_equals_direct_bundle(project):
    d, cfg = project
    bank = json.loads((d / "models" / "bank.json").read_text())
    bundle = (d / "models" / bank["pivots"][0]["bundle"]).resolve()
    one = dict(bank, pivots=[{**bank["pivots"][0], "bundle": str(bundle)}])
    (d / "one.json").write_text(json.dumps(one))
    a, b = d / "a.vbsq", d / "b.vbsq"
    assert main(["infer", "-c", cfg, "--bank", str(d / "one.json"), "--params", "1e-5,0.04,1",
                 "--out", str(a)]) == 0
    assert main(["infer", "-c", cfg, "--bundle", str(bundle), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_bones_non_increasing(project, capsys):
    d, cfg = project
    assert main(["sweep-bones", "-c", cfg, "--counts", "2,4,8"]) == 0
    rows = json.loads((d / "reports" / "sweep_bones.json").read_text())["rows"]
    assert [r["bones"] for r in rows] == [2, 4, 8]
    res = [r["residual_rmse_mm"] for r in rows]
    assert all(b <= a + 1e-9 for a, b in zip(res, res[1:]))
    assert len((d / "reports" / "sweep_bones.txt").read_text().splitlines()) == 4


def test_missing_artifacts_name_the_command(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["decompose", "-c", cfg]) == 2
    assert "vbones simulate" in capsys.readouterr().err
    assert main(["simulate", "-c", cfg, "--set", "simulation.grid=[[1e-7,0.04,1.0]]",
                 "--set", "simulation.frames=4"]) == 0
    assert main(["train-lf", "-c", cfg]) == 2
    assert "vbones decompose" in capsys.readouterr().err
    assert main(["fit-kernel", "-c", cfg]) == 2
    assert "vbones select-pivots" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["simulate", "-c", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "-c", str(bad)]) == 2
    cfg = write_config(tmp_path)
    assert main(["simulate", "-c", cfg, "--set", "ssdr.bone_count=0"]) == 2
    assert main(["simulate", "-c", cfg, "--set", "nope.key=1"]) == 2
    assert main(["infer", "-c", cfg, "--params", "abc"]) == 2
    err = capsys.readouterr().err
    assert "bone_count" in err and "nope.key" in err


def test_simulation_failure_exits_3(tmp_path, capsys, monkeypatch):
    import vbones.pipeline
    from vbones.clothsim import SimulationError

    def explode(template, motion, params, settings=None):
        raise SimulationError("velocity blew up", frame=7)

    monkeypatch.setattr(vbones.pipeline, "simulate", explode)
    assert main(["simulate", "-c", write_config(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert "numerical failure" in err and "b1e-07_m0.04_t1/train_000" in err


def test_defaults_and_overrides():
    cfg = ProjectConfig()
    assert cfg.data["ssdr"]["bone_count"] == 80
    assert cfg.data["ensemble"]["pivots"] == 8
    assert cfg.grid[0].as_tuple() == (1e-7, 0.04, 1.0)
    cfg.override("ssdr.bone_count", 40)
    assert cfg.data["ssdr"]["bone_count"] == 40
    with pytest.raises(ConfigError):
        cfg.override("ssdr.bone_count", 0)
    with pytest.raises(ConfigError):
        ProjectConfig({"train": {"bogus": 1}})


def test_parser_lists_every_command():
    parser = build_parser()
    for name in ("simulate", "decompose", "train-lf", "train-hf", "select-pivots", "fit-kernel",
                 "infer", "eval", "sweep-bones"):
        assert parser.parse_args([name] + (["--pred", "a", "--truth", "b"] if name == "eval" else []))
