"""Project configuration: one JSON file, with command-line overrides applied on top."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .clothsim import SimParams
from .motion import TrainConfig

DEFAULTS = {
    "seed": 0,
    "paths": {"dataset": "data", "models": "models", "reports": "reports"},
    "garment": {"template": "skirt"},
    "simulation": {
        "grid": [[1e-7, 0.04, 1.0]],
        "frames": 300,
        "frame_rate": 30.0,
        "train_sequences": 7,
        "validation_sequences": 1,
        "styles": ["sway", "spin", "walk"],
        "substeps": 10,
        "iterations": 2,
    },
    "smoothing": {"iterations": 20, "step": 0.5},
    "ssdr": {"bone_count": 80, "sparseness": 4, "max_iters": 30, "tol": 1e-4},
    "train": TrainConfig().to_json(),
    "ensemble": {"pivots": 8, "kernel_steps": 200, "kernel_lr": 0.02},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


class ProjectConfig:
    """Resolved configuration. Relative paths are taken from the config file's directory."""

    def __init__(self, data: dict | None = None, base_dir: Path | str = "."):
        self.data = _merge(DEFAULTS, data or {})
        self.base_dir = Path(base_dir)
        self.validate()

    @classmethod
    def load(cls, path) -> "ProjectConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls(data, path.parent)

    def override(self, dotted: str, value) -> None:
        """Set ``section.key`` (flags win over the file)."""
        keys = dotted.split(".")
        node = self.data
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
        self.validate()

    def validate(self) -> None:
        d = self.data
        try:
            for p in self.grid:
                SimParams(*p.as_tuple())
            TrainConfig.from_json(d["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        sim, ssdr, sm = d["simulation"], d["ssdr"], d["smoothing"]
        checks = [
            (sim["frames"] >= 2, "simulation.frames must be >= 2"),
            (sim["frame_rate"] > 0, "simulation.frame_rate must be positive"),
            (sim["train_sequences"] >= 1, "simulation.train_sequences must be >= 1"),
            (sim["validation_sequences"] >= 0, "simulation.validation_sequences must be >= 0"),
            (sim["substeps"] >= 1 and sim["iterations"] >= 1, "substeps and iterations must be >= 1"),
            (len(sim["styles"]) >= 1, "simulation.styles must not be empty"),
            (ssdr["bone_count"] >= 1, "ssdr.bone_count must be >= 1"),
            (ssdr["sparseness"] >= 1, "ssdr.sparseness must be >= 1"),
            (ssdr["max_iters"] >= 1 and ssdr["tol"] >= 0, "ssdr.max_iters >= 1 and tol >= 0"),
            (sm["iterations"] >= 0 and 0 < sm["step"] <= 1, "smoothing needs iterations >= 0, 0 < step <= 1"),
            (d["ensemble"]["pivots"] >= 1, "ensemble.pivots must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def path(self, name: str) -> Path:
        return self.base_dir / self.data["paths"][name]

    @property
    def grid(self) -> list[SimParams]:
        try:
            return [SimParams(*map(float, p)) for p in self.data["simulation"]["grid"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"simulation.grid: {exc}") from None

    @property
    def train(self) -> TrainConfig:
        return TrainConfig.from_json(self.data["train"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def to_json(self) -> dict:
        return copy.deepcopy(self.data)
