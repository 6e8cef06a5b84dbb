"""Command-line entry point: ``vbones <command> [options]``.

Every command reads the project config (JSON, ``--config``), applies flag
overrides, writes its artifacts and a JSON run record under
``<reports>/runs``. Log verbosity comes from the ``VBONES_LOG`` environment
variable (DEBUG, INFO, WARNING, ...).

Exit codes: 0 success, 2 configuration or missing-input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .body import BodyMotion, generate_body_motion
from .clothsim import SimParams, SimSettings, SimulationError
from .config import ConfigError, ProjectConfig
from .ensemble import (EnsembleError, PivotBank, ensemble_infer, fit_kernel, load_bank, save_bank,
                       select_pivots)
from .formats import FormatError, read_sequence_frames, write_sequence
from .metrics import evaluate, export_map_csv, export_map_obj, format_table
from .motion import ModelBundle, TrainingError, load_bundle, save_bundle, train_hf, train_lf
from .pipeline import (MissingArtifact, decompose_sequences, fit_tracks, generate_dataset,
                       load_dataset, load_rig, low_frequency, make_template, params_tag,
                       save_rig_set, stage_seed, training_sequences)
from .skinning import SSDRError, ssdr_decompose

logger = logging.getLogger("vbones")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# -- run records ------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(paths, base: Path) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            out[os.path.relpath(f, base)] = _sha256(f)
    return dict(sorted(out.items()))


def _versions() -> dict[str, str]:
    import numba
    import scipy

    return {"vbones": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_run_record(cfg: ProjectConfig, name: str, args: dict, seed: int, inputs, outputs) -> Path:
    """Replay information for one command; no timestamps so reruns compare equal."""
    runs = cfg.path("reports") / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    record = {
        "command": name, "arguments": args, "seed": seed, "config": cfg.to_json(),
        "inputs": _hash_tree(inputs, cfg.base_dir), "outputs": _hash_tree(outputs, cfg.base_dir),
        "versions": _versions(),
    }
    path = runs / f"{name}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


# -- helpers ------------------------------------------------------------------------------


def _params_arg(cfg: ProjectConfig, text: str | None) -> SimParams:
    if text is None:
        return cfg.grid[0]
    try:
        return SimParams.parse(text)
    except ValueError as exc:
        raise ConfigError(f"--params {text!r}: {exc}") from None


def _bundle_dir(cfg: ProjectConfig, p: SimParams) -> Path:
    return cfg.path("models") / "pivots" / params_tag(p)


def _smoothing(cfg: ProjectConfig) -> tuple[int, float]:
    s = cfg.data["smoothing"]
    return int(s["iterations"]), float(s["step"])


def _train_entries(ds, p: SimParams):
    entries = ds.select(p, "train")
    if not entries:
        raise MissingArtifact(f"training sequences for {params_tag(p)}", "simulate")
    return entries


def _validation(ds):
    entries = ds.select(split="val")
    if not entries:
        raise ConfigError("no validation sequences; set simulation.validation_sequences >= 1")
    return entries


def _validation_motions(ds) -> tuple[list, list[BodyMotion]]:
    seen, names, motions = set(), [], []
    for e in _validation(ds):
        if e.motion not in seen:
            seen.add(e.motion)
            names.append(ds.root / e.motion)
            motions.append(ds.motion(e))
    return names, motions


def _available_bundles(cfg: ProjectConfig, ds) -> list[tuple[SimParams, Path]]:
    out = []
    for p in ds.param_sets():
        d = _bundle_dir(cfg, p)
        if (d / "manifest.json").exists():
            out.append((p, d))
    return out


# -- commands -----------------------------------------------------------------------------


def cmd_simulate(cfg: ProjectConfig, args) -> int:
    sim = cfg.data["simulation"]
    if args.params:
        cfg.override("simulation.grid", [list(_params_arg(cfg, args.params).as_tuple())])
    if args.frames:
        cfg.override("simulation.frames", args.frames)
    settings = SimSettings(substeps=int(sim["substeps"]), iterations=int(sim["iterations"]))
    seed = stage_seed(cfg.seed, "simulate")
    out = cfg.path("dataset")
    generate_dataset(out, cfg.data["garment"]["template"], cfg.grid, int(sim["frames"]),
                     float(sim["frame_rate"]), int(sim["train_sequences"]),
                     int(sim["validation_sequences"]), list(sim["styles"]), seed, settings)
    write_run_record(cfg, "simulate", {"params": args.params, "frames": args.frames}, seed, [], [out])
    print(f"wrote {len(cfg.grid)} parameter set(s) to {out}")
    return EXIT_OK


def cmd_decompose(cfg: ProjectConfig, args) -> int:
    if args.bones:
        cfg.override("ssdr.bone_count", args.bones)
    ds = load_dataset(cfg.path("dataset"))
    s = cfg.data["ssdr"]
    it, step = _smoothing(cfg)
    entries = ds.select(split="train")
    lows = [low_frequency(ds.mesh, ds.frames(e), it, step) for e in entries]
    res, tracks = decompose_sequences(ds.mesh, lows, int(s["bone_count"]), int(s["sparseness"]),
                                      int(s["max_iters"]), float(s["tol"]))
    # validation clips get tracks from a transform-only fit on the shared rig
    val = ds.select(split="val")
    for e in val:
        tracks.append(fit_tracks(low_frequency(ds.mesh, ds.frames(e), it, step), res.skin_model))
    models = cfg.path("models")
    summary = {"bone_count": res.skin_model.bone_count, "sparseness": res.skin_model.sparseness,
               "iterations": res.iterations, "residual_rmse": res.residual_rmse,
               "residual_relative": res.residual_relative,
               "sequences": [e.id for e in entries + val]}
    save_rig_set(models, res.skin_model, entries + val, tracks, summary)
    write_run_record(cfg, "decompose", {"bones": args.bones}, cfg.seed,
                     [ds.root], [models / "rig.vbrig", models / "rig.json", models / "tracks"])
    print(f"{res.skin_model.bone_count} bones, residual {res.residual_rmse * 1000:.3f} mm "
          f"({res.residual_relative:.4%} of bbox diagonal), {res.iterations} iterations")
    return EXIT_OK


def _train_config(cfg: ProjectConfig, args, stage: str, p: SimParams):
    tc = cfg.train
    if args.epochs is not None:
        tc.epochs = args.epochs
    tc.seed = stage_seed(cfg.seed, f"{stage}:{params_tag(p)}")
    return tc


def cmd_train_lf(cfg: ProjectConfig, args) -> int:
    p = _params_arg(cfg, args.params)
    ds = load_dataset(cfg.path("dataset"))
    models = cfg.path("models")
    skin = load_rig(models)
    tc = _train_config(cfg, args, "train-lf", p)
    it, step = _smoothing(cfg)
    data = training_sequences(ds, _train_entries(ds, p), it, step, models)
    net, hist = train_lf(data, skin, ds.mesh, tc, log_every=max(1, tc.epochs // 10))
    out = _bundle_dir(cfg, p)
    manifest = {"sim_params": p.to_json(), "train": tc.to_json(), "lf_loss": hist}
    save_bundle(out, ModelBundle(ds.mesh, skin, net, None, manifest))
    write_run_record(cfg, f"train-lf-{params_tag(p)}", {"params": args.params, "epochs": args.epochs},
                     tc.seed, [ds.root, models / "rig.vbrig", models / "tracks"], [out])
    print(f"LF net for {params_tag(p)}: final loss {hist[-1] if hist else float('nan'):.6f}")
    return EXIT_OK


def cmd_train_hf(cfg: ProjectConfig, args) -> int:
    p = _params_arg(cfg, args.params)
    ds = load_dataset(cfg.path("dataset"))
    models = cfg.path("models")
    out = _bundle_dir(cfg, p)
    if not (out / "manifest.json").exists():
        raise MissingArtifact(f"LF bundle {out}", "train-lf")
    bundle = load_bundle(out)
    tc = _train_config(cfg, args, "train-hf", p)
    it, step = _smoothing(cfg)
    data = training_sequences(ds, _train_entries(ds, p), it, step, models)
    net, hist = train_hf(data, bundle.skin_model, ds.mesh, tc, log_every=max(1, tc.epochs // 10))
    bundle.hf_net = net
    bundle.manifest["hf_loss"] = hist
    bundle.manifest["hf_train"] = tc.to_json()
    save_bundle(out, bundle)
    write_run_record(cfg, f"train-hf-{params_tag(p)}", {"params": args.params, "epochs": args.epochs},
                     tc.seed, [ds.root, models / "tracks"], [out])
    print(f"HF net for {params_tag(p)}: final loss {hist[-1] if hist else float('nan'):.6f}")
    return EXIT_OK


def cmd_select_pivots(cfg: ProjectConfig, args) -> int:
    count = args.count or int(cfg.data["ensemble"]["pivots"])
    ds = load_dataset(cfg.path("dataset"))
    cands = _available_bundles(cfg, ds)
    if not cands:
        raise MissingArtifact("trained bundles", "train-lf")
    count = min(count, len(cands))
    bundles = [load_bundle(d) for _, d in cands]
    names, motions = _validation_motions(ds)
    chosen = select_pivots([(p, b) for (p, _), b in zip(cands, bundles)], count, motions)
    bank_path = cfg.path("models") / "bank.json"
    rel = [os.path.relpath(cands[i][1], bank_path.parent) for i in chosen]
    bank = PivotBank([cands[i][0] for i in chosen], [bundles[i] for i in chosen], paths=rel)
    save_bank(bank_path, bank)
    write_run_record(cfg, "select-pivots", {"count": count}, cfg.seed,
                     [d for _, d in cands] + names, [bank_path])
    for k, i in enumerate(chosen):
        print(f"pivot {k}: {params_tag(cands[i][0])}")
    return EXIT_OK


def cmd_fit_kernel(cfg: ProjectConfig, args) -> int:
    bank_path = cfg.path("models") / "bank.json"
    if not bank_path.exists():
        raise MissingArtifact("pivot bank", "select-pivots")
    ds = load_dataset(cfg.path("dataset"))
    bank = load_bank(bank_path, load_bundle)
    pivots = set(p.as_tuple() for p in bank.params)
    held = [p for p in ds.param_sets() if p.as_tuple() not in pivots]
    if not held:
        raise ConfigError("every simulated parameter set is a pivot; nothing to calibrate against")
    val = _validation(ds)
    motions = [ds.motion(e) for e in val if e.params == held[0]]
    held_out = [(p, [ds.frames(e) for e in val if e.params == p]) for p in held]
    steps = args.steps if args.steps is not None else int(cfg.data["ensemble"]["kernel_steps"])
    bank, hist = fit_kernel(bank, held_out, motions, steps, float(cfg.data["ensemble"]["kernel_lr"]))
    save_bank(bank_path, bank)
    write_run_record(cfg, "fit-kernel", {"steps": steps}, cfg.seed, [ds.root], [bank_path])
    print(f"kernel objective {hist[0] * 1000:.3f} mm -> {min(hist) * 1000:.3f} mm, sigma {bank.kernel.sigma:.4g}")
    return EXIT_OK


def cmd_infer(cfg: ProjectConfig, args) -> int:
    p = _params_arg(cfg, args.params)
    if args.motion:
        motion = BodyMotion.load(args.motion)
        inputs = [Path(args.motion)]
    else:
        sim = cfg.data["simulation"]
        motion = generate_body_motion(args.motion_seed, int(sim["frames"]), float(sim["frame_rate"]),
                                      args.style)
        inputs = []
    bank_path = cfg.path("models") / "bank.json"
    if args.bundle:
        bundle = load_bundle(args.bundle)
        seq = bundle.infer(motion, use_hf=not args.lf_only)
        inputs.append(Path(args.bundle))
    elif args.bank or bank_path.exists():
        bank_path = Path(args.bank) if args.bank else bank_path
        bank = load_bank(bank_path, load_bundle)
        if args.lf_only:
            for b in bank.bundles:
                b.hf_net = None
        seq = ensemble_infer(bank, p, motion)
        inputs.append(bank_path)
    else:
        d = _bundle_dir(cfg, p)
        if not (d / "manifest.json").exists():
            raise MissingArtifact(f"bundle for {params_tag(p)}", "train-lf")
        seq = load_bundle(d).infer(motion, use_hf=not args.lf_only)
        inputs.append(d)
    out = Path(args.out) if args.out else cfg.path("reports") / f"infer_{params_tag(p)}.vbsq"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sequence(out, seq.frames, motion.frame_rate)
    write_run_record(cfg, "infer", {"params": params_tag(p), "lf_only": args.lf_only}, cfg.seed,
                     inputs, [out])
    print(f"wrote {seq.frame_count} frames to {out}")
    return EXIT_OK


def cmd_eval(cfg: ProjectConfig, args) -> int:
    pred, _ = read_sequence_frames(args.pred)
    truth, _ = read_sequence_frames(args.truth)
    ds_root = cfg.path("dataset")
    if (ds_root / "manifest.json").exists():
        ds_template = load_dataset(ds_root).mesh
    else:
        ds_template = make_template(cfg.data["garment"]["template"]).mesh
    report = evaluate(pred, truth, ds_template.edges(), label=args.label or Path(args.pred).stem)
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    out = Path(args.out) if args.out else reports / f"eval_{Path(args.pred).stem}.json"
    report.save(out)
    outputs = [out]
    if args.map_obj:
        export_map_obj(args.map_obj, truth[0], ds_template.faces, report.per_vertex_mean_error)
        outputs.append(Path(args.map_obj))
    if args.map_csv:
        export_map_csv(args.map_csv, report.per_vertex_mean_error)
        outputs.append(Path(args.map_csv))
    write_run_record(cfg, "eval", {"label": report.label}, cfg.seed,
                     [Path(args.pred), Path(args.truth)], outputs)
    print(format_table([report]))
    return EXIT_OK


def cmd_sweep_bones(cfg: ProjectConfig, args) -> int:
    try:
        counts = sorted(int(c) for c in args.counts.split(","))
    except ValueError:
        raise ConfigError(f"--counts {args.counts!r}: expected comma-separated integers") from None
    ds = load_dataset(cfg.path("dataset"))
    entries = ds.select(split="train")
    if args.sequence:
        entries = [e for e in ds.entries if e.id == args.sequence]
        if not entries:
            raise ConfigError(f"no sequence {args.sequence!r} in the dataset")
    e = entries[0]
    it, step = _smoothing(cfg)
    low = low_frequency(ds.mesh, ds.frames(e), it, step)
    s = cfg.data["ssdr"]
    rows, prev = [], None
    for c in counts:
        prev = ssdr_decompose(low, c, int(s["max_iters"]), float(s["tol"]), int(s["sparseness"]),
                              init=prev)
        rows.append({"bones": c, "residual_rmse_mm": prev.residual_rmse * 1000,
                     "residual_relative": prev.residual_relative})
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "sweep_bones.json").write_text(json.dumps({"sequence": e.id, "rows": rows}, indent=2))
    table = ["bones  residual RMSE (mm)  relative"]
    table += [f"{r['bones']:5d}  {r['residual_rmse_mm']:18.4f}  {r['residual_relative']:8.5f}" for r in rows]
    (reports / "sweep_bones.txt").write_text("\n".join(table) + "\n")
    write_run_record(cfg, "sweep-bones", {"counts": counts, "sequence": e.id}, cfg.seed,
                     [ds.root / e.sequence], [reports / "sweep_bones.json", reports / "sweep_bones.txt"])
    print("\n".join(table))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "decompose": cmd_decompose,
    "train-lf": cmd_train_lf,
    "train-hf": cmd_train_hf,
    "select-pivots": cmd_select_pivots,
    "fit-kernel": cmd_fit_kernel,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep-bones": cmd_sweep_bones,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default=None, help="project config JSON")
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override any config value, e.g. --set ssdr.max_iters=10")

    parser = argparse.ArgumentParser(prog="vbones", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate the cloth dataset")
    p.add_argument("--params", help="single parameter set 'bending,density,timescale'")
    p.add_argument("--frames", type=int)

    p = sub.add_parser("decompose", parents=[common], help="extract the shared skin rig")
    p.add_argument("--bones", type=int)

    for name in ("train-lf", "train-hf"):
        p = sub.add_parser(name, parents=[common], help=f"train the {name[-2:].upper()} module")
        p.add_argument("--params")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("select-pivots", parents=[common], help="greedy pivot selection")
    p.add_argument("--count", type=int)

    p = sub.add_parser("fit-kernel", parents=[common], help="calibrate the blending kernel")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("infer", parents=[common], help="predict a garment sequence")
    p.add_argument("--params")
    p.add_argument("--motion", help="body motion JSON")
    p.add_argument("--motion-seed", type=int, default=0)
    p.add_argument("--style", default="sway", choices=["sway", "spin", "walk"])
    p.add_argument("--bundle", help="use one model bundle directly")
    p.add_argument("--bank", help="bank manifest (default: <models>/bank.json when present)")
    p.add_argument("--lf-only", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="compare two sequences")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--label")
    p.add_argument("--out")
    p.add_argument("--map-obj")
    p.add_argument("--map-csv")

    p = sub.add_parser("sweep-bones", parents=[common], help="SSDR residual against bone count")
    p.add_argument("--counts", default="20,40,80")
    p.add_argument("--sequence")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("VBONES_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def load_config(args) -> ProjectConfig:
    cfg = ProjectConfig.load(args.config) if args.config else ProjectConfig()
    if args.seed is not None:
        cfg.override("seed", args.seed)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        cfg.override(key, parsed)
    return cfg


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, MissingArtifact, FileNotFoundError, FormatError, EnsembleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, SSDRError, TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
