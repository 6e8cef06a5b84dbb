"""Two-stage garment motion network.

The low-frequency net maps body motion to virtual-bone transforms that drive
the skin rig; the high-frequency net adds per-vertex displacements computed
from the bone motion (global stream) and the skinned mesh (local stream).

Both nets work in the body's heading frame (root position, yaw only), so
they never see where the body stands or which way it faces; predictions are
mapped back to world space at the end.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .body import BodyMotion, BodySurface, body_surface, heading_frames
from .formats import read_obj, read_rig, write_obj, write_rig
from .mesh import AnimSequence, Mesh
from .skinning import BoneTracks, SkinModel, lbs_sequence

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, chunk: int):
        super().__init__(message)
        self.epoch, self.chunk = epoch, chunk


@dataclass
class TrainConfig:
    lf_hidden: int = 256
    hf_hidden: int = 128
    global_features: int = 32
    edgeconv_widths: tuple = (32, 64, 128)
    fusion_widths: tuple = (128, 64)
    lambda_lap: float = 1.0
    lambda_collision: float = 10.0
    lr: float = 1e-3
    epochs: int = 50
    chunk: int = 30
    seed: int = 0

    def __post_init__(self):
        self.edgeconv_widths = tuple(int(w) for w in self.edgeconv_widths)
        self.fusion_widths = tuple(int(w) for w in self.fusion_widths)
        if self.lambda_lap < 0 or self.lambda_collision < 0:
            raise ValueError("loss weights must be non-negative")
        if self.chunk < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("chunk >= 1, epochs >= 0 and lr > 0 are required")
        if len(self.edgeconv_widths) != 3:
            raise ValueError("the local stream uses exactly three EdgeConv layers")

    def to_json(self) -> dict:
        d = asdict(self)
        d["edgeconv_widths"] = list(self.edgeconv_widths)
        d["fusion_widths"] = list(self.fusion_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# -- networks ----------------------------------------------------------------------


def _standardizer(x: np.ndarray, axis=0) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=axis)
    std = x.std(axis=axis)
    return mean, np.where(std > 1e-8, std, 1.0)


def tracks_to_6d(tracks: BoneTracks) -> np.ndarray:
    """(T, B, 9): the two leading rotation columns followed by the translation."""
    R = tracks.rotations
    return np.concatenate([R[..., :, 0], R[..., :, 1], tracks.translations], axis=-1)


class LowFreqNet:
    """GRU over body-pose features followed by a linear head (6D rotation + translation per bone).

    The head output is de-standardized with ``out_mean``/``out_std`` buffers;
    with default buffers and a zero head it emits identity transforms.
    """

    def __init__(self, input_size: int, bone_count: int, hidden: int = 256, seed: int = 0):
        self.input_size, self.bone_count, self.hidden = input_size, bone_count, hidden
        self.params = nn.ParameterSet(seed)
        nn.add_gru(self.params, "gru", input_size, hidden)
        nn.add_dense(self.params, "head", hidden, bone_count * 9)
        self.buffers = {
            "in_mean": np.zeros(input_size), "in_std": np.ones(input_size),
            "out_mean": np.zeros(bone_count * 9), "out_std": np.ones(bone_count * 9),
        }

    def initial_state(self, batch: int | None = None) -> np.ndarray:
        return np.zeros((self.hidden,) if batch is None else (batch, self.hidden))

    def fit_normalization(self, features: np.ndarray, tracks: np.ndarray) -> None:
        """Input and output statistics from (N, F) features and (N, B, 9) targets."""
        self.buffers["in_mean"], self.buffers["in_std"] = _standardizer(features)
        self.buffers["out_mean"], self.buffers["out_std"] = _standardizer(
            tracks.reshape(len(tracks), -1))


class HighFreqNet:
    """Per-vertex displacement from bone motion (GRU) and the skinned mesh (EdgeConv)."""

    def __init__(self, mesh: Mesh, bone_count: int, hidden: int = 128, global_features: int = 32,
                 edgeconv_widths=(32, 64, 128), fusion_widths=(128, 64), seed: int = 0):
        self.mesh, self.bone_count, self.hidden = mesh, bone_count, hidden
        self.global_features = global_features
        self.edgeconv_widths = tuple(edgeconv_widths)
        self.fusion_widths = tuple(fusion_widths)
        self.graph = nn.Graph(mesh.adjacency())
        p = self.params = nn.ParameterSet(seed)
        nn.add_gru(p, "gru", bone_count * 12, hidden)
        nn.add_dense(p, "global", hidden, global_features)
        width = 6
        for k, w in enumerate(self.edgeconv_widths):
            nn.add_mlp(p, f"ec{k}", [2 * width, w])
            width = w
        nn.add_mlp(p, "fuse", [width + global_features, *self.fusion_widths, 3])
        V = mesh.vertex_count
        self.buffers = {
            "track_mean": np.zeros(bone_count * 12), "track_std": np.ones(bone_count * 12),
            "pos_scale": np.ones(1), "out_scale": np.ones(1),
            "rest": mesh.rest_positions - mesh.rest_positions.mean(axis=0),
        }
        assert self.buffers["rest"].shape == (V, 3)

    def initial_state(self, batch: int | None = None) -> np.ndarray:
        return np.zeros((self.hidden,) if batch is None else (batch, self.hidden))

    def zero_output(self) -> None:
        """Zero the last fusion layer so the net predicts no displacement."""
        last = len(self.fusion_widths)
        self.params[f"fuse.{last}.w"].data[:] = 0.0
        self.params[f"fuse.{last}.b"].data[:] = 0.0

    def fit_normalization(self, tracks: np.ndarray, lf_frames: np.ndarray, residual: np.ndarray) -> None:
        """Statistics from flattened (N, B*12) tracks, (N, V, 3) skinned frames and targets."""
        self.buffers["track_mean"], self.buffers["track_std"] = _standardizer(tracks)
        centred = lf_frames - lf_frames.mean(axis=1, keepdims=True)
        self.buffers["pos_scale"] = np.array([max(float(np.sqrt(np.mean(centred**2))), 1e-6)])
        self.buffers["out_scale"] = np.array([max(float(np.sqrt(np.mean(residual**2))), 1e-6)])


# -- heading frame ----------------------------------------------------------------


def points_to_heading(x: np.ndarray, R: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """(T, N, 3) world points to heading-frame coordinates."""
    return np.einsum("tvj,tjk->tvk", x - origin[:, None], R)


def points_from_heading(x: np.ndarray, R: np.ndarray, origin: np.ndarray) -> np.ndarray:
    return np.einsum("tvk,tjk->tvj", x, R) + origin[:, None]


def tracks_to_heading(tracks: BoneTracks, R: np.ndarray, origin: np.ndarray) -> BoneTracks:
    return BoneTracks(np.einsum("tji,tbjk->tbik", R, tracks.rotations),
                      np.einsum("tji,tbj->tbi", R, tracks.translations - origin[:, None]))


def tracks_from_heading(tracks: BoneTracks, R: np.ndarray, origin: np.ndarray) -> BoneTracks:
    return BoneTracks(np.einsum("tij,tbjk->tbik", R, tracks.rotations),
                      np.einsum("tij,tbj->tbi", R, tracks.translations) + origin[:, None])


# -- low-frequency stream ---------------------------------------------------------


def _run_gru(params, prefix, feats: Tensor, h0) -> tuple[Tensor, Tensor]:
    """Unroll over axis 1 of (N, T, F) features; returns (N, T, H) states and the last one."""
    xp = nn.gru_input_projection(feats, params, prefix)
    h = ad.as_tensor(h0)
    states = []
    for t in range(feats.shape[1]):
        h = nn.gru_cell(None, h, params, prefix, projected=xp[:, t])
        states.append(h)
    return ad.stack(states, axis=1), h


def _lf_run(net: LowFreqNet, feats: np.ndarray, h0: np.ndarray):
    """(N, T, F) raw features -> rotations (N, T, B, 3, 3), translations (N, T, B, 3), hidden."""
    b = net.buffers
    x = Tensor((feats - b["in_mean"]) / b["in_std"])
    hs, h = _run_gru(net.params, "gru", x, h0)
    raw = nn.dense(hs, net.params, "head") * b["out_std"] + b["out_mean"]
    N, T = feats.shape[:2]
    raw = ad.reshape(raw, (N, T, net.bone_count, 9))
    R = nn.rotation_from_6d(raw[..., :6])
    return R, raw[..., 6:], h


def _lf_predict(net: LowFreqNet, feats: np.ndarray, hidden: np.ndarray | None):
    """Heading-frame tracks for (T, F) features; returns (tracks, final hidden)."""
    if feats.shape[1] != net.input_size:
        raise ad.ShapeError(f"motion features have {feats.shape[1]} columns, net expects {net.input_size}")
    h0 = net.initial_state(1) if hidden is None else np.asarray(hidden).reshape(1, -1)
    with ad.no_grad():
        R, t, h = _lf_run(net, feats[None], h0)
    return BoneTracks(R.data[0], t.data[0]), h.data[0]


def lf_forward(net: LowFreqNet, motion: BodyMotion, hidden: np.ndarray | None = None):
    """Predict world-space bone tracks for a whole motion; returns (tracks, final hidden)."""
    local, h = _lf_predict(net, motion.features(), hidden)
    return tracks_from_heading(local, *heading_frames(motion)), h


def _tensor_tracks(tracks):
    if isinstance(tracks, BoneTracks):
        return Tensor(tracks.rotations), Tensor(tracks.translations)
    R, t = tracks
    return ad.as_tensor(R), ad.as_tensor(t)


def lf_loss(tracks, target: np.ndarray, skin_model: SkinModel, lambda_lap: float,
            laplacian=None, operator: np.ndarray | None = None) -> Tensor:
    """Mean per-vertex distance plus ``lambda_lap`` times the mean Laplacian-difference norm.

    Args:
        tracks: BoneTracks or a (rotations, translations) pair of tensors shaped
            (T, B, 3, 3) and (T, B, 3).
        target: (T, V, 3) low-frequency frames.
        laplacian: optional precomputed sparse uniform Laplacian of the garment.
    """
    R, t = _tensor_tracks(tracks)
    target = np.asarray(target, dtype=np.float64)
    T, V = target.shape[:2]
    pred = nn.lbs_layer(skin_model, R, t, operator)
    loss = ad.mean(ad.norm(pred - target))
    if lambda_lap > 0:
        if laplacian is None:
            raise ValueError("a Laplacian is required when lambda_lap > 0")
        flat = ad.reshape(ad.transpose(pred, (1, 0, 2)), (V, T * 3))
        lap_pred = ad.spmm(laplacian, flat)
        lap_true = np.asarray(laplacian @ target.transpose(1, 0, 2).reshape(V, T * 3))
        diff = ad.reshape(lap_pred - lap_true, (V, T, 3))
        loss = loss + lambda_lap * ad.mean(ad.norm(diff))
    return loss


# -- high-frequency stream ----------------------------------------------------------


def _track_features(tracks: BoneTracks) -> np.ndarray:
    return tracks.matrices().reshape(tracks.frame_count, -1)


def _hf_run(net: HighFreqNet, track_feats: np.ndarray, lf: np.ndarray, h0: np.ndarray):
    """(N, T, B*12) track features and (N, T, V, 3) skinned frames -> (N, T, V, 3) displacements."""
    b = net.buffers
    N, T, V = lf.shape[:3]
    x = Tensor((track_feats - b["track_mean"]) / b["track_std"])
    hs, h = _run_gru(net.params, "gru", x, h0)
    g = nn.dense(ad.reshape(hs, (N * T, net.hidden)), net.params, "global")
    g = ad.gather(g, np.repeat(np.arange(N * T), V))

    centred = (lf - lf.mean(axis=2, keepdims=True)) / b["pos_scale"]
    rest = np.broadcast_to(b["rest"] / b["pos_scale"], centred.shape)
    node = Tensor(np.concatenate([centred, rest], axis=-1).reshape(N * T * V, 6))
    graph = net.graph.batched(N * T)
    for k in range(len(net.edgeconv_widths)):
        node = nn.edgeconv(node, graph, net.params, f"ec{k}")
    fused = ad.concat([node, g], axis=-1)
    out = nn.mlp(fused, net.params, "fuse", len(net.fusion_widths) + 1) * b["out_scale"]
    return ad.reshape(out, (N, T, V, 3)), h


def hf_forward(net: HighFreqNet, tracks: BoneTracks, lf_frames: np.ndarray,
               hidden: np.ndarray | None = None):
    """Per-frame (T, V, 3) displacements for the given bone tracks and skinned frames.

    Inputs and outputs are in the body's heading frame.
    """
    lf_frames = np.asarray(lf_frames, dtype=np.float64)
    if tracks.bone_count != net.bone_count:
        raise ad.ShapeError(f"{tracks.bone_count} bone tracks for a net built for {net.bone_count}")
    if lf_frames.shape[1] != net.mesh.vertex_count:
        raise ad.ShapeError(f"{lf_frames.shape[1]} vertices for a net built for {net.mesh.vertex_count}")
    h0 = net.initial_state(1) if hidden is None else np.asarray(hidden).reshape(1, -1)
    with ad.no_grad():
        d, h = _hf_run(net, _track_features(tracks)[None], lf_frames[None], h0)
    return d.data[0], h.data[0]


def _surface_arrays(bodies) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(bodies, BodySurface):
        bodies = [bodies]
    if isinstance(bodies, (list, tuple)) and (not bodies or isinstance(bodies[0], BodySurface)):
        if not bodies:
            return np.zeros((0, 0, 3)), np.zeros((0, 0, 3))
        return (np.stack([b.positions for b in bodies]), np.stack([b.normals for b in bodies]))
    pos, nrm = bodies
    return np.asarray(pos), np.asarray(nrm)


def nearest_samples(points: np.ndarray, samples: np.ndarray, brute: bool = False) -> np.ndarray:
    """Index of the nearest body sample for every point (ties go to the lower index)."""
    if brute:
        d = np.linalg.norm(points[:, None, :] - samples[None], axis=2)
        return np.argmin(d, axis=1)
    return cKDTree(samples).query(points)[1]


def collision_depths(frames: np.ndarray, bodies, brute: bool = False) -> np.ndarray:
    """(T, V) penetration ``max(-n . (v - v_B), 0)`` against the nearest body sample."""
    frames = np.asarray(frames, dtype=np.float64)
    pos, nrm = _surface_arrays(bodies)
    if pos.size == 0:
        logger.warning("empty body surface; collision term is zero")
        return np.zeros(frames.shape[:2])
    out = np.empty(frames.shape[:2])
    for f in range(len(frames)):
        k = nearest_samples(frames[f], pos[f], brute)
        out[f] = np.maximum(-np.einsum("ij,ij->i", nrm[f][k], frames[f] - pos[f][k]), 0.0)
    return out


def hf_loss(pred, target: np.ndarray, bodies, lambda_collision: float) -> Tensor:
    """Mean per-vertex distance plus ``lambda_collision`` times the mean penetration depth.

    ``pred`` and ``target`` are (T, V, 3); ``bodies`` is a list of BodySurface
    (one per frame) or a pair of (T, K, 3) position and normal arrays.
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    loss = ad.mean(ad.norm(pred - target))
    if lambda_collision <= 0:
        return loss
    pos, nrm = _surface_arrays(bodies)
    if pos.size == 0:
        logger.warning("empty body surface; collision term is zero")
        return loss
    T, V = pred.shape[:2]
    idx = np.stack([nearest_samples(pred.data[f], pos[f]) for f in range(T)])
    fr = np.arange(T)[:, None]
    vb, nb = pos[fr, idx], nrm[fr, idx]
    depth = ad.relu(ad.sum_((vb - pred) * nb, axis=-1))
    return loss + lambda_collision * ad.mean(depth)


# -- datasets and training ------------------------------------------------------------


@dataclass
class TrainSequence:
    """One simulated clip with everything the two training stages need."""

    motion: BodyMotion
    frames: np.ndarray
    low: np.ndarray
    tracks: BoneTracks | None = None
    body_positions: np.ndarray | None = None
    body_normals: np.ndarray | None = None

    def __post_init__(self):
        if len(self.frames) != self.motion.frame_count or len(self.low) != len(self.frames):
            raise ValueError("motion, frames and low-frequency frames disagree in length")
        if self.body_positions is None:
            surf = [body_surface(self.motion, f) for f in range(self.motion.frame_count)]
            self.body_positions = np.stack([s.positions for s in surf])
            self.body_normals = np.stack([s.normals for s in surf])

    # heading-frame views used for training
    @cached_property
    def heading(self) -> tuple[np.ndarray, np.ndarray]:
        return heading_frames(self.motion)

    @cached_property
    def local_frames(self) -> np.ndarray:
        return points_to_heading(self.frames, *self.heading)

    @cached_property
    def local_low(self) -> np.ndarray:
        return points_to_heading(self.low, *self.heading)

    @cached_property
    def local_tracks(self) -> BoneTracks:
        if self.tracks is None:
            raise ValueError("sequence has no decomposed bone tracks")
        return tracks_to_heading(self.tracks, *self.heading)

    @cached_property
    def local_body(self) -> tuple[np.ndarray, np.ndarray]:
        R, origin = self.heading
        return (points_to_heading(self.body_positions, R, origin),
                points_to_heading(self.body_normals, R, np.zeros_like(origin)))


def _groups(data: list[TrainSequence]) -> list[list[int]]:
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(data):
        by_len.setdefault(len(s.frames), []).append(i)
    return [by_len[k] for k in sorted(by_len)]


def _chunks(length: int, chunk: int):
    return [(s, min(s + chunk, length)) for s in range(0, length, chunk)]


def _check_loss(value: float, epoch: int, chunk: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, chunk {chunk}", epoch, chunk)


def train_lf(data: list[TrainSequence], skin_model: SkinModel, mesh: Mesh, config: TrainConfig,
             net: LowFreqNet | None = None, log_every: int = 0):
    """Chunked truncated back-propagation through time with Adam.

    Sequences of equal length are batched. The hidden state is carried
    across chunks of a sequence and detached at chunk boundaries.

    Returns:
        (net, per-epoch mean loss list)
    """
    if net is None:
        net = LowFreqNet(data[0].motion.features().shape[1], skin_model.bone_count,
                         config.lf_hidden, seed=config.seed)
        feats = np.concatenate([s.motion.features() for s in data])
        if all(s.tracks is not None for s in data):
            net.fit_normalization(feats, np.concatenate([tracks_to_6d(s.local_tracks) for s in data]))
        else:
            net.buffers["in_mean"], net.buffers["in_std"] = _standardizer(feats)
    if net.bone_count != skin_model.bone_count:
        raise ad.ShapeError(f"net has {net.bone_count} bones, rig has {skin_model.bone_count}")
    L = mesh.laplacian_matrix() if config.lambda_lap > 0 else None
    Q = nn.lbs_operator(skin_model)
    opt = nn.Adam(net.params, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        total, count, ci = 0.0, 0, 0
        for group in _groups(data):
            feats = np.stack([data[i].motion.features() for i in group])
            low = np.stack([data[i].local_low for i in group])
            h = net.initial_state(len(group))
            for s, e in _chunks(feats.shape[1], config.chunk):
                net.params.zero_grad()
                R, t, hT = _lf_run(net, feats[:, s:e], h)
                n = len(group) * (e - s)
                loss = lf_loss((ad.reshape(R, (n, -1, 3, 3)), ad.reshape(t, (n, -1, 3))),
                               low[:, s:e].reshape(n, -1, 3), skin_model, config.lambda_lap, L, Q)
                _check_loss(float(loss.data), epoch, ci)
                loss.backward()
                opt.step()
                h = hT.data
                total += float(loss.data) * n
                count += n
                ci += 1
        history.append(total / count)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("lf epoch %d loss %.6f", epoch, history[-1])
    return net, history


def train_hf(data: list[TrainSequence], skin_model: SkinModel, mesh: Mesh, config: TrainConfig,
             net: HighFreqNet | None = None, log_every: int = 0):
    """Train the displacement net on ground-truth bone tracks.

    The prediction for a frame is ``LBS(tracks) + displacement`` and it is
    compared against the full simulated frame, so the net learns the
    smoothing residual together with whatever the rig could not reproduce.

    Returns:
        (net, per-epoch mean loss list)
    """
    if any(s.tracks is None for s in data):
        raise ValueError("every training sequence needs its decomposed bone tracks")
    Q = nn.lbs_operator(skin_model)
    lbs = [Q @ np.swapaxes(s.local_tracks.matrices(), 2, 3).reshape(s.tracks.frame_count, -1, 3)
           for s in data]
    if net is None:
        net = HighFreqNet(mesh, skin_model.bone_count, config.hf_hidden, config.global_features,
                          config.edgeconv_widths, config.fusion_widths, seed=config.seed)
        net.fit_normalization(np.concatenate([_track_features(s.local_tracks) for s in data]),
                              np.concatenate(lbs),
                              np.concatenate([s.local_frames - g for s, g in zip(data, lbs)]))
    opt = nn.Adam(net.params, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        total, count, ci = 0.0, 0, 0
        for group in _groups(data):
            tf = np.stack([_track_features(data[i].local_tracks) for i in group])
            lf = np.stack([lbs[i] for i in group])
            gt = np.stack([data[i].local_frames for i in group])
            bp = np.stack([data[i].local_body[0] for i in group])
            bn = np.stack([data[i].local_body[1] for i in group])
            h = net.initial_state(len(group))
            for s, e in _chunks(tf.shape[1], config.chunk):
                net.params.zero_grad()
                disp, hT = _hf_run(net, tf[:, s:e], lf[:, s:e], h)
                n = len(group) * (e - s)
                pred = ad.reshape(disp, (n, -1, 3)) + lf[:, s:e].reshape(n, -1, 3)
                loss = hf_loss(pred, gt[:, s:e].reshape(n, -1, 3),
                               (bp[:, s:e].reshape(n, -1, 3), bn[:, s:e].reshape(n, -1, 3)),
                               config.lambda_collision)
                _check_loss(float(loss.data), epoch, ci)
                loss.backward()
                opt.step()
                h = hT.data
                total += float(loss.data) * n
                count += n
                ci += 1
        history.append(total / count)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("hf epoch %d loss %.6f", epoch, history[-1])
    return net, history


# -- inference ------------------------------------------------------------------------


def infer_sequence(lf_net: LowFreqNet, hf_net: HighFreqNet | None, skin_model: SkinModel,
                   motion: BodyMotion, streaming: bool = False, mesh: Mesh | None = None) -> AnimSequence:
    """Predict garment frames: skinned low-frequency mesh plus high-frequency displacement.

    With ``streaming`` the frames are produced one at a time with carried
    hidden states, as an online consumer would; the result matches the
    whole-sequence evaluation. ``hf_net=None`` gives the low-frequency-only output.
    """
    if lf_net.bone_count != skin_model.bone_count:
        raise ad.ShapeError(f"LF net has {lf_net.bone_count} bones, rig has {skin_model.bone_count}")
    if hf_net is not None and hf_net.bone_count != skin_model.bone_count:
        raise ad.ShapeError(f"HF net has {hf_net.bone_count} bones, rig has {skin_model.bone_count}")
    mesh = mesh or (hf_net.mesh if hf_net is not None else None)
    if mesh is None:
        raise ValueError("a mesh is required when no HF net is given")
    def step(local: BoneTracks, R, origin, h_hf):
        low = lbs_sequence(skin_model, local.matrices())
        if hf_net is not None:
            d, h_hf = hf_forward(hf_net, local, low, h_hf)
            low = low + d
        return points_from_heading(low, R, origin), h_hf

    R, origin = heading_frames(motion)
    if not streaming:
        local, _ = _lf_predict(lf_net, motion.features(), None)
        out, _ = step(local, R, origin, None)
        return AnimSequence(mesh, out, motion.frame_rate)
    out = np.empty((motion.frame_count, skin_model.vertex_count, 3))
    h_lf = h_hf = None
    for f in range(motion.frame_count):
        # rate features need the previous frame only
        window = motion.slice(max(f - 1, 0), f + 1)
        local, h_lf = _lf_predict(lf_net, window.features()[-1:], h_lf)
        frame, h_hf = step(local, R[f:f + 1], origin[f:f + 1], h_hf)
        out[f] = frame[0]
    return AnimSequence(mesh, out, motion.frame_rate)


# -- bundles --------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """A rig plus trained LF/HF nets for one set of simulation parameters."""

    mesh: Mesh
    skin_model: SkinModel
    lf_net: LowFreqNet
    hf_net: HighFreqNet | None
    manifest: dict = field(default_factory=dict)

    def infer(self, motion: BodyMotion, streaming: bool = False, use_hf: bool = True) -> AnimSequence:
        return infer_sequence(self.lf_net, self.hf_net if use_hf else None, self.skin_model,
                              motion, streaming, self.mesh)


def save_bundle(path, bundle: ModelBundle) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_obj(path / "template.obj", bundle.mesh.rest_positions, bundle.mesh.faces)
    write_rig(path / "rig.vbrig", bundle.skin_model)
    nn.save_parameters(path / "lf.vbnn", bundle.lf_net.params, extra=bundle.lf_net.buffers)
    manifest = dict(bundle.manifest)
    manifest.update({
        "bone_count": bundle.skin_model.bone_count,
        "sparseness": bundle.skin_model.sparseness,
        "lf": {"input_size": bundle.lf_net.input_size, "hidden": bundle.lf_net.hidden},
        "hf": None,
    })
    if bundle.hf_net is not None:
        h = bundle.hf_net
        nn.save_parameters(path / "hf.vbnn", h.params, extra=h.buffers)
        manifest["hf"] = {"hidden": h.hidden, "global_features": h.global_features,
                          "edgeconv_widths": list(h.edgeconv_widths),
                          "fusion_widths": list(h.fusion_widths)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path}: no model bundle (run train-lf first)")
    manifest = json.loads((path / "manifest.json").read_text())
    mesh = read_obj(path / "template.obj")
    skin, _ = read_rig(path / "rig.vbrig")
    lf = LowFreqNet(manifest["lf"]["input_size"], manifest["bone_count"], manifest["lf"]["hidden"])
    lf.buffers.update(nn.load_parameters(path / "lf.vbnn", lf.params))
    hf = None
    if manifest.get("hf"):
        c = manifest["hf"]
        hf = HighFreqNet(mesh, manifest["bone_count"], c["hidden"], c["global_features"],
                         c["edgeconv_widths"], c["fusion_widths"])
        hf.buffers.update(nn.load_parameters(path / "hf.vbnn", hf.params))
    return ModelBundle(mesh, skin, lf, hf, manifest)
