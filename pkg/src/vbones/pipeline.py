"""Dataset layout on disk and the glue between simulation, decomposition and training."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyMotion, generate_body_motion
from .clothsim import (TEMPLATES, GarmentTemplate, SimParams, SimSettings, SimulationError,
                       simulate)
from .formats import read_rig, read_sequence_frames, write_obj, write_rig, write_sequence
from .mesh import AnimSequence, Mesh, frequency_split
from .motion import TrainSequence
from .skinning import (BoneTracks, DecompositionResult, SkinModel, ssdr_decompose,
                       ssdr_solve_transforms)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not been run yet."""

    def __init__(self, what: str, command: str):
        super().__init__(f"{what} not found; run `vbones {command}` first")
        self.command = command


def stage_seed(root: int, stage: str) -> int:
    """Independent, reproducible seed for a named pipeline stage."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def params_tag(p: SimParams) -> str:
    return "b{:.3g}_m{:.3g}_t{:.3g}".format(*p.as_tuple()).replace("+", "")


def make_template(name: str) -> GarmentTemplate:
    if name not in TEMPLATES:
        raise ValueError(f"unknown garment template {name!r}; choose from {sorted(TEMPLATES)}")
    return TEMPLATES[name]()


@dataclass
class SequenceEntry:
    id: str
    params: SimParams
    motion_seed: int
    style: str
    split: str
    sequence: str
    motion: str

    def to_json(self) -> dict:
        return {"id": self.id, "params": self.params.to_json(), "motion_seed": self.motion_seed,
                "style": self.style, "split": self.split, "sequence": self.sequence,
                "motion": self.motion}

    @classmethod
    def from_json(cls, d: dict) -> "SequenceEntry":
        return cls(d["id"], SimParams.from_json(d["params"]), int(d["motion_seed"]), d["style"],
                   d["split"], d["sequence"], d["motion"])


@dataclass
class Dataset:
    root: Path
    template: GarmentTemplate
    entries: list[SequenceEntry]
    frame_rate: float

    @property
    def mesh(self) -> Mesh:
        return self.template.mesh

    def select(self, params: SimParams | None = None, split: str | None = None) -> list[SequenceEntry]:
        return [e for e in self.entries
                if (params is None or e.params == params) and (split is None or e.split == split)]

    def param_sets(self) -> list[SimParams]:
        seen = []
        for e in self.entries:
            if e.params not in seen:
                seen.append(e.params)
        return seen

    def frames(self, entry: SequenceEntry) -> np.ndarray:
        return read_sequence_frames(self.root / entry.sequence)[0]

    def motion(self, entry: SequenceEntry) -> BodyMotion:
        return BodyMotion.load(self.root / entry.motion)


def motion_plan(seed: int, train: int, validation: int, styles: list[str]) -> list[tuple[str, int, str]]:
    """(split, motion seed, style) for every clip; shared by all parameter sets."""
    base = stage_seed(seed, "motions")
    plan = []
    for k in range(train + validation):
        split = "train" if k < train else "val"
        plan.append((split, (base + k) % 2**31, styles[k % len(styles)]))
    return plan


def generate_dataset(root, template_name: str, grid: list[SimParams], frames: int, frame_rate: float,
                     train: int, validation: int, styles: list[str], seed: int,
                     settings: SimSettings | None = None) -> Dataset:
    """Simulate every (parameter set, motion) pair and write sequences plus a manifest.

    Output is a pure function of the arguments, so re-running overwrites
    files with identical bytes.
    """
    root = Path(root)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    template = make_template(template_name)
    write_obj(root / "template.obj", template.mesh.rest_positions, template.mesh.faces)
    entries = []
    plan = motion_plan(seed, train, validation, styles)
    motions = {}
    for split, mseed, style in plan:
        name = f"motions/{split}_{mseed}_{style}.json"
        m = generate_body_motion(mseed, frames, frame_rate, style)
        m.save(root / name)
        motions[(mseed, style)] = (m, name)
    for p in grid:
        tag = params_tag(p)
        (root / tag).mkdir(exist_ok=True)
        for k, (split, mseed, style) in enumerate(plan):
            m, mname = motions[(mseed, style)]
            sid = f"{tag}/{split}_{k:03d}"
            logger.info("simulating %s (%s, seed %d)", sid, style, mseed)
            try:
                seq = simulate(template, m, p, settings=settings)
            except SimulationError as exc:
                raise SimulationError(f"sequence {sid} (frame {exc.frame}): {exc}", exc.frame) from exc
            write_sequence(root / f"{sid}.vbsq", seq.frames, frame_rate)
            entries.append(SequenceEntry(sid, p, mseed, style, split, f"{sid}.vbsq", mname))
    manifest = {"template": template_name, "frame_rate": frame_rate, "frames": frames,
                "sequences": [e.to_json() for e in entries]}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Dataset(root, template, entries, frame_rate)


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise MissingArtifact(f"dataset manifest in {root}", "simulate")
    d = json.loads((root / MANIFEST).read_text())
    template = make_template(d["template"])
    return Dataset(root, template, [SequenceEntry.from_json(e) for e in d["sequences"]],
                   float(d["frame_rate"]))


# -- decomposition --------------------------------------------------------------------


def low_frequency(mesh: Mesh, frames: np.ndarray, iterations: int, step: float) -> np.ndarray:
    return frequency_split(AnimSequence(mesh, frames), iterations, step).low.frames


def decompose_sequences(mesh: Mesh, lows: list[np.ndarray], bone_count: int, sparseness: int,
                        max_iters: int, tol: float, init: DecompositionResult | None = None):
    """One shared rig for several clips; returns (result, per-clip tracks)."""
    allframes = np.concatenate(lows)
    res = ssdr_decompose(AnimSequence(mesh, allframes), bone_count, max_iters, tol, sparseness,
                         init=init)
    tracks, start = [], 0
    for low in lows:
        stop = start + len(low)
        tracks.append(BoneTracks(res.tracks.rotations[start:stop],
                                 res.tracks.translations[start:stop]))
        start = stop
    return res, tracks


def fit_tracks(frames: np.ndarray, skin: SkinModel, passes: int = 5) -> BoneTracks:
    """Bone transforms for new frames with the rig held fixed."""
    tracks = BoneTracks.identity(len(frames), skin.bone_count)
    for _ in range(passes):
        tracks, _ = ssdr_solve_transforms(frames, skin.weights, skin.rest_pose, tracks)
    return tracks


def save_rig_set(models: Path, skin: SkinModel, entries: list[SequenceEntry],
                 tracks: list[BoneTracks], summary: dict) -> None:
    models.mkdir(parents=True, exist_ok=True)
    write_rig(models / "rig.vbrig", skin)
    (models / "tracks").mkdir(exist_ok=True)
    for e, t in zip(entries, tracks):
        name = e.id.replace("/", "__")
        write_rig(models / "tracks" / f"{name}.vbrig", skin, t)
    (models / "rig.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def load_rig(models: Path) -> SkinModel:
    if not (models / "rig.vbrig").exists():
        raise MissingArtifact(f"skin rig in {models}", "decompose")
    return read_rig(models / "rig.vbrig")[0]


def load_tracks(models: Path, entry: SequenceEntry) -> BoneTracks:
    path = models / "tracks" / (entry.id.replace("/", "__") + ".vbrig")
    if not path.exists():
        raise MissingArtifact(f"bone tracks for {entry.id}", "decompose")
    return read_rig(path)[1]


def training_sequences(ds: Dataset, entries: list[SequenceEntry], iterations: int, step: float,
                       models: Path | None = None) -> list[TrainSequence]:
    out = []
    for e in entries:
        frames = ds.frames(e)
        low = low_frequency(ds.mesh, frames, iterations, step)
        tracks = load_tracks(models, e) if models is not None else None
        out.append(TrainSequence(ds.motion(e), frames, low, tracks))
    return out
