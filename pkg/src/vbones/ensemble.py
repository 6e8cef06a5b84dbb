"""Blending pivot motion networks across simulation parameters.

Each pivot is a model bundle trained at one parameter set. A query parameter
set is embedded with a small map ``g`` and every pivot output is weighted by
a normalized Gaussian kernel on the embedded distance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .body import BodyMotion
from .clothsim import SimParams
from .mesh import AnimSequence

logger = logging.getLogger(__name__)

KERNEL_HIDDEN = 8


class EnsembleError(ValueError):
    pass


def _param_array(params) -> np.ndarray:
    rows = [p.as_tuple() if isinstance(p, SimParams) else tuple(p) for p in params]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _log_scaled(theta: np.ndarray) -> np.ndarray:
    out = np.array(theta, dtype=np.float64, copy=True)
    out[..., 0] = np.log10(np.maximum(out[..., 0], 1e-12))
    return out


@dataclass
class ParamScaler:
    """log10 on bending stiffness, then a z-score fitted on a reference set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, params) -> "ParamScaler":
        x = _log_scaled(_param_array(params))
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, params) -> np.ndarray:
        return (_log_scaled(_param_array(params)) - self.mean) / self.std


class Kernel:
    """Embedding ``g(z) = A z + W2 tanh(W1 z + b1)`` plus a log bandwidth.

    Initialised to the identity map (``A = I``, ``W2 = 0``) so an uncalibrated
    kernel measures plain standardized distances.
    """

    def __init__(self, sigma: float = 1.0, hidden: int = KERNEL_HIDDEN, seed: int = 0):
        if not sigma > 0:
            raise EnsembleError("kernel bandwidth must be positive")
        p = self.params = nn.ParameterSet(seed)
        p.add("A", (3, 3), "identity")
        p.add("W1", (3, hidden), "uniform", fan_in=3)
        p.add("b1", (hidden,), "zeros")
        p.add("W2", (hidden, 3), "zeros")
        p.add("log_sigma", (1,), "zeros")
        p["log_sigma"].data[:] = np.log(sigma)

    @property
    def sigma(self) -> float:
        return float(np.exp(self.params["log_sigma"].data[0]))

    @sigma.setter
    def sigma(self, value: float) -> None:
        if not value > 0:
            raise EnsembleError("kernel bandwidth must be positive")
        self.params["log_sigma"].data[:] = np.log(value)

    def embed_tensor(self, z) -> ad.Tensor:
        p = self.params
        return ad.matmul(z, p["A"]) + ad.matmul(ad.tanh(ad.matmul(z, p["W1"]) + p["b1"]), p["W2"])

    def embed(self, z: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.embed_tensor(np.atleast_2d(z)).data

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.params.state().items()}

    @classmethod
    def from_json(cls, d: dict) -> "Kernel":
        k = cls(hidden=np.shape(d["W1"])[1])
        k.params.load_state({n: np.asarray(v, dtype=np.float64) for n, v in d.items()})
        return k


@dataclass
class BlendWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = self.weights = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise EnsembleError(f"blend weights must lie on the probability simplex: {w}")

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class PivotBank:
    """Pivot parameter sets with their model bundles, a scaler and a kernel.

    A bundle is anything with ``infer(motion) -> AnimSequence``; bundles
    carrying a ``skin_model`` must all share the same rig.
    """

    params: list
    bundles: list
    scaler: ParamScaler | None = None
    kernel: Kernel | None = None
    paths: list = field(default_factory=list)

    def __post_init__(self):
        if not self.params:
            raise EnsembleError("a pivot bank needs at least one pivot")
        if len(self.params) != len(self.bundles):
            raise EnsembleError("one bundle per pivot parameter set is required")
        self.params = [p if isinstance(p, SimParams) else SimParams(*p) for p in self.params]
        _check_shared_rig(self.bundles)
        if self.scaler is None:
            self.scaler = ParamScaler.fit(self.params)
        if self.kernel is None:
            self.kernel = Kernel(heuristic_sigma(self.latents(Kernel())))

    def __len__(self) -> int:
        return len(self.params)

    def latents(self, kernel: Kernel | None = None) -> np.ndarray:
        return (kernel or self.kernel).embed(self.scaler.transform(self.params))

    def subset(self, idx) -> "PivotBank":
        idx = list(idx)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return PivotBank([self.params[i] for i in idx], [self.bundles[i] for i in idx],
                         self.scaler, self.kernel, paths)


def _check_shared_rig(bundles) -> None:
    rigs = [getattr(b, "skin_model", None) for b in bundles]
    rigs = [r for r in rigs if r is not None]
    for r in rigs[1:]:
        if r.weights.shape != rigs[0].weights.shape:
            raise EnsembleError("pivots disagree in vertex or bone count")
        if not (np.array_equal(r.weights, rigs[0].weights)
                and np.array_equal(r.rest_pose, rigs[0].rest_pose)):
            raise EnsembleError("pivots must share one skin rig")


def heuristic_sigma(latents: np.ndarray) -> float:
    """Median pairwise distance between pivot latents (1 for a single pivot)."""
    n = len(latents)
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    d = np.linalg.norm(latents[:, None] - latents[None], axis=-1)[iu]
    med = float(np.median(d))
    return med if med > 0 else 1.0


def kernel_weights(latents: np.ndarray, query: np.ndarray, sigma: float) -> BlendWeights:
    """Normalized Gaussian weights; falls back to the nearest pivot if all kernels underflow."""
    if not sigma > 0:
        raise EnsembleError("kernel bandwidth must be positive")
    d2 = np.sum((latents - query) ** 2, axis=-1)
    raw = np.exp(-d2 / (2.0 * sigma * sigma))
    total = raw.sum()
    if not total > 0 or not np.isfinite(total):
        logger.warning("all RBF kernels underflowed (sigma=%g); using the nearest pivot", sigma)
        w = np.zeros(len(latents))
        w[int(np.argmin(d2))] = 1.0
        return BlendWeights(w)
    return BlendWeights(raw / total)


def rbf_weights(bank: PivotBank, theta) -> BlendWeights:
    q = bank.kernel.embed(bank.scaler.transform([theta]))[0]
    return kernel_weights(bank.latents(), q, bank.kernel.sigma)


def nearest_pivot(bank: PivotBank, theta) -> int:
    """Index of the pivot closest to ``theta`` in standardized parameter space."""
    z = bank.scaler.transform(bank.params)
    q = bank.scaler.transform([theta])[0]
    return int(np.argmin(np.sum((z - q) ** 2, axis=1)))


def blend(weights: BlendWeights, outputs: list[np.ndarray]) -> np.ndarray:
    """Fixed-order weighted sum of pivot outputs."""
    if len(outputs) != len(weights):
        raise EnsembleError(f"{len(outputs)} outputs for {len(weights)} weights")
    shape = outputs[0].shape
    if any(o.shape != shape for o in outputs):
        raise EnsembleError("pivot outputs disagree in topology or frame count")
    out = np.zeros(shape)
    for w, o in zip(weights.weights, outputs):
        out += w * o
    return out


def ensemble_infer(bank: PivotBank, theta, motion: BodyMotion) -> AnimSequence:
    outputs = [b.infer(motion) for b in bank.bundles]
    mesh = outputs[0].mesh
    if any(o.mesh.vertex_count != mesh.vertex_count for o in outputs):
        raise EnsembleError("pivot topology mismatch")
    frames = blend(rbf_weights(bank, theta), [o.frames for o in outputs])
    return AnimSequence(mesh, frames, motion.frame_rate)


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))


# -- pivot selection ----------------------------------------------------------------


def extreme_candidates(params) -> list[int]:
    """Candidates holding a min or max of some parameter that varies across candidates."""
    x = _param_array(params)
    out = set()
    for c in range(x.shape[1]):
        col = x[:, c]
        if col.max() == col.min():
            continue
        out.update(np.flatnonzero(col == col.min()).tolist())
        out.update(np.flatnonzero(col == col.max()).tolist())
    return sorted(out)


def select_pivots(candidates: list, count: int, motions: list[BodyMotion],
                  outputs: list[list[np.ndarray]] | None = None) -> list[int]:
    """Greedy pivot selection.

    Starts from every extreme-parameter candidate, then repeatedly blends the
    current pivots at each remaining candidate's parameters and adds the one
    the blend reproduces worst (RMSE against that candidate's own output on
    the validation motions). Candidates are canonically sorted by parameter
    tuple first, so the result does not depend on input order; ties go to
    the lower canonical position.

    Args:
        candidates: list of ``(SimParams, bundle)``.
        count: number of pivots to select.
        motions: validation motions.
        outputs: optional precomputed ``outputs[i][m]`` frames.

    Returns:
        indices into ``candidates`` in selection order.
    """
    n = len(candidates)
    if count > n:
        raise EnsembleError(f"cannot select {count} pivots from {n} candidates")
    params = [c[0] if isinstance(c[0], SimParams) else SimParams(*c[0]) for c in candidates]
    order = sorted(range(n), key=lambda i: (params[i].as_tuple(), i))
    sorted_params = [params[i] for i in order]
    extreme = extreme_candidates(sorted_params)
    if count < len(extreme):
        raise EnsembleError(
            f"{count} pivots requested but {len(extreme)} candidates hold extreme parameters; "
            f"at least {len(extreme)} are required")
    if outputs is None:
        outputs = [[c[1].infer(m).frames for m in motions] for c in candidates]
    outs = [outputs[i] for i in order]
    scaler = ParamScaler.fit(sorted_params)
    z = scaler.transform(sorted_params)
    chosen = list(extreme)
    while len(chosen) < count:
        sigma = heuristic_sigma(z[chosen])
        worst, worst_err = None, -np.inf
        for j in range(n):
            if j in chosen:
                continue
            w = kernel_weights(z[chosen], z[j], sigma)
            err = np.mean([_rmse(blend(w, [outs[c][m] for c in chosen]), outs[j][m])
                           for m in range(len(motions))])
            logger.debug("candidate %s blended RMSE %.6g", sorted_params[j].as_tuple(), err)
            if err > worst_err:
                worst, worst_err = j, err
        chosen.append(worst)
    return [order[j] for j in chosen]


# -- kernel calibration ---------------------------------------------------------------


def _blended_rmse(kernel: Kernel, zp: np.ndarray, zq: np.ndarray, pivots: np.ndarray,
                  truth: np.ndarray):
    """Mean over held-out sets of the blended RMSE; pivots (P, S, D), truth (H, S, D)."""
    lp = kernel.embed_tensor(zp)
    lq = kernel.embed_tensor(zq)
    P = len(zp)
    d2 = ad.sum_(ad.square(ad.reshape(lq, (-1, 1, 3)) - ad.reshape(lp, (1, P, 3))), axis=-1)
    inv = ad.exp(kernel.params["log_sigma"] * -2.0) * -0.5
    logits = d2 * inv
    shift = np.max(logits.data, axis=1, keepdims=True)
    raw = ad.exp(logits - shift)
    w = raw / ad.sum_(raw, axis=1, keepdims=True)
    flat = pivots.reshape(P, -1)
    pred = ad.matmul(w, flat)
    err = ad.reshape(pred - truth.reshape(len(zq), -1), (len(zq), -1, 3))
    per_set = ad.sqrt(ad.mean(ad.sum_(ad.square(err), axis=-1), axis=1))
    return ad.mean(per_set)


def fit_kernel(bank: PivotBank, held_out: list, motions: list[BodyMotion], steps: int = 200,
               lr: float = 0.02, pivot_outputs: list[list[np.ndarray]] | None = None):
    """Calibrate the embedding map and bandwidth on held-out simulations.

    Args:
        bank: pivots to blend; its kernel is the starting point.
        held_out: list of ``(SimParams, [frames per motion])``.
        motions: the body motions the held-out frames were simulated with.
        pivot_outputs: optional precomputed ``pivot_outputs[i][m]``.

    Returns:
        (calibrated bank, objective history). The best parameters seen are
        kept, so the calibrated objective never exceeds the starting one.
    """
    if not held_out:
        raise EnsembleError("kernel fitting needs at least one held-out parameter set")
    if pivot_outputs is None:
        pivot_outputs = [[b.infer(m).frames for m in motions] for b in bank.bundles]
    pivots = np.stack([np.concatenate(po) for po in pivot_outputs])
    truth = np.stack([np.concatenate(list(frames)) for _, frames in held_out])
    if truth.shape[1:] != pivots.shape[1:]:
        raise EnsembleError("held-out frames do not match pivot outputs")
    zp = bank.scaler.transform(bank.params)
    zq = bank.scaler.transform([p for p, _ in held_out])
    kernel = Kernel.from_json(bank.kernel.to_json())
    opt = nn.Adam(kernel.params, lr=lr)
    best_state, best = kernel.params.state(), np.inf
    history = []
    for step in range(steps + 1):
        kernel.params.zero_grad()
        obj = _blended_rmse(kernel, zp, zq, pivots, truth)
        value = float(obj.data)
        if not np.isfinite(value):
            raise EnsembleError(f"non-finite kernel objective at step {step}")
        history.append(value)
        if value < best:
            best, best_state = value, kernel.params.state()
        if step == steps:
            break
        obj.backward()
        opt.step()
    kernel.params.load_state(best_state)
    return PivotBank(bank.params, bank.bundles, bank.scaler, kernel, bank.paths), history


def blended_rmse(bank: PivotBank, theta, pivot_outputs: list[np.ndarray], truth: np.ndarray) -> float:
    """RMSE of the RBF blend at ``theta`` against ``truth`` (same layout as the outputs)."""
    return _rmse(blend(rbf_weights(bank, theta), pivot_outputs), truth)


# -- manifest -------------------------------------------------------------------------


def save_bank(path, bank: PivotBank) -> None:
    if len(bank.paths) != len(bank):
        raise EnsembleError("bank pivots need bundle paths to be saved")
    manifest = {
        "pivots": [{"bundle": str(p), "params": prm.to_json()}
                   for p, prm in zip(bank.paths, bank.params)],
        "scaler": {"mean": bank.scaler.mean.tolist(), "std": bank.scaler.std.tolist(),
                   "transform": "log10 bending stiffness, then z-score"},
        "kernel": bank.kernel.to_json(),
        "sigma": bank.kernel.sigma,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bank(path, loader) -> PivotBank:
    """Read a bank manifest; ``loader(bundle_path)`` returns each pivot's bundle."""
    path = Path(path)
    d = json.loads(path.read_text())
    paths = [p["bundle"] for p in d["pivots"]]
    bundles = [loader(path.parent / p if not Path(p).is_absolute() else p) for p in paths]
    params = [SimParams.from_json(p["params"]) for p in d["pivots"]]
    scaler = ParamScaler(np.asarray(d["scaler"]["mean"]), np.asarray(d["scaler"]["std"]))
    return PivotBank(params, bundles, scaler, Kernel.from_json(d["kernel"]), paths)
