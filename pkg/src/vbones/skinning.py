"""Linear blend skinning and rigid-bone skinning decomposition (SSDR).

The decomposition alternates two exact block updates on the squared
reconstruction error of a fixed rest pose:

* weights: per vertex, a simplex-constrained least-squares fit restricted to
  the ``K`` bones that individually explain the vertex trajectory best;
* transforms: per bone and frame, a weighted absolute-orientation (Procrustes)
  solve with every other bone held fixed.

Both steps are evaluated through per-vertex normal equations so that nothing
of size ``V x B x T`` is ever materialised.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SPARSENESS = 4
DORMANT_MASS = 1e-8
RESEED_EVERY = 5
MONOTONE_SLACK = 1e-9


class SSDRError(RuntimeError):
    pass


@dataclass
class SkinModel:
    """LBS rig: rest pose ``P`` (V, 3) and dense-stored weights ``W`` (V, B)."""

    rest_pose: np.ndarray
    weights: np.ndarray
    sparseness: int = DEFAULT_SPARSENESS

    def __post_init__(self):
        self.rest_pose = np.asarray(self.rest_pose, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.rest_pose):
            raise ValueError(
                f"weights shape {self.weights.shape} does not match {len(self.rest_pose)} vertices"
            )
        if self.bone_count < 1:
            raise ValueError("bone_count must be >= 1")

    @property
    def bone_count(self) -> int:
        return self.weights.shape[1]

    @property
    def vertex_count(self) -> int:
        return self.weights.shape[0]

    def check(self, atol: float = 1e-6) -> None:
        W = self.weights
        if np.any(W < 0):
            raise ValueError("negative skin weight")
        if np.max(np.abs(W.sum(axis=1) - 1.0)) > atol:
            raise ValueError("skin weight rows do not sum to 1")
        if np.max((W > 0).sum(axis=1)) > self.sparseness:
            raise ValueError(f"more than {self.sparseness} influences on a vertex")


@dataclass
class BoneTracks:
    """Per-frame rigid transforms: rotations (T, B, 3, 3), translations (T, B, 3)."""

    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if self.rotations.shape[:2] != self.translations.shape[:2]:
            raise ValueError("rotation and translation tracks disagree in (T, B)")

    @property
    def frame_count(self) -> int:
        return self.rotations.shape[0]

    @property
    def bone_count(self) -> int:
        return self.rotations.shape[1]

    def matrices(self) -> np.ndarray:
        """(T, B, 3, 4) stacked ``[R | t]``."""
        return np.concatenate([self.rotations, self.translations[..., None]], axis=-1)

    @classmethod
    def from_matrices(cls, M: np.ndarray) -> "BoneTracks":
        return cls(M[..., :3], M[..., 3])

    @classmethod
    def identity(cls, frames: int, bones: int) -> "BoneTracks":
        R = np.broadcast_to(np.eye(3), (frames, bones, 3, 3)).copy()
        return cls(R, np.zeros((frames, bones, 3)))

    def orthonormality_error(self) -> float:
        R = self.rotations
        RtR = np.einsum("...ji,...jk->...ik", R, R)
        return float(np.max(np.abs(RtR - np.eye(3)))) if R.size else 0.0


@dataclass
class DecompositionResult:
    skin_model: SkinModel
    tracks: BoneTracks
    residual_rmse: float
    residual_relative: float
    objective_history: list = field(default_factory=list)
    iterations: int = 0
    dormant: list = field(default_factory=list)


def _homogeneous(P: np.ndarray) -> np.ndarray:
    return np.concatenate([P, np.ones((len(P), 1))], axis=1)


def lbs_pose(skin_model: SkinModel, rotations: np.ndarray, translations: np.ndarray) -> np.ndarray:
    """Blend rest-pose vertices by one frame of bone transforms.

    ``v_i = sum_j w_ij (R_j p_i + t_j)``.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    translations = np.asarray(translations, dtype=np.float64)
    B = skin_model.bone_count
    if rotations.shape != (B, 3, 3) or translations.shape != (B, 3):
        raise ValueError(
            f"expected {B} bone transforms, got rotations {rotations.shape}, "
            f"translations {translations.shape}"
        )
    M = np.concatenate([rotations, translations[..., None]], axis=-1)
    return lbs_sequence(skin_model, M[None])[0]


def lbs_sequence(skin_model: SkinModel, mats: np.ndarray) -> np.ndarray:
    """LBS for stacked (T, B, 3, 4) transforms, returning (T, V, 3)."""
    W = skin_model.weights
    if mats.shape[1] != W.shape[1]:
        raise ValueError(f"{mats.shape[1]} transforms for {W.shape[1]} bones")
    Ph = _homogeneous(skin_model.rest_pose)
    # Q[i, j*4 + a] = w_ij * ph_ia; LBS is then one matmul per frame
    Q = (W[:, :, None] * Ph[:, None, :]).reshape(len(W), -1)
    Mt = mats.transpose(0, 1, 3, 2).reshape(mats.shape[0], -1, 3)
    return np.matmul(Q, Mt)


def _sse(frames: np.ndarray, skin: SkinModel, tracks: BoneTracks) -> float:
    r = frames - lbs_sequence(skin, tracks.matrices())
    return float(np.sum(r * r))


# -- rigid fitting -----------------------------------------------------------


def weighted_procrustes(P: np.ndarray, Y: np.ndarray, a: np.ndarray | None = None):
    """Rigid (R, t) minimising ``sum_i a_i |R p_i + t - y_i|^2``.

    ``P`` is (N, 3); ``Y`` is (N, 3) or (T, N, 3) for a batch of frames.
    Returns rotations (..., 3, 3) and translations (..., 3).
    """
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    a = np.ones(len(P)) if a is None else np.asarray(a, dtype=np.float64)
    s = a.sum()
    pc = a @ P / s
    yc = np.einsum("i,...ij->...j", a, Y) / s
    H = np.einsum("i,ia,...ib->...ab", a, P - pc, Y - yc[..., None, :])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.matmul(U, Vt)))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(H.shape[:-2] + (3,))
    D[..., 2] = d
    R = np.einsum("...ji,...j,...kj->...ik", Vt, D, U)
    t = yc - np.einsum("...ij,j->...i", R, pc)
    return R, t


# -- normal-equation terms -----------------------------------------------------


def _flat_mats(tracks: BoneTracks) -> np.ndarray:
    """(T*3, B*4) view of the transform stack."""
    M = tracks.matrices()
    T, B = M.shape[:2]
    return M.transpose(0, 2, 1, 3).reshape(T * 3, B * 4)


def _single_bone_errors(frames, Ph, tracks, c=None):
    """e_ij = sum_t |M_j^t p_i - v_i^t|^2 for every vertex/bone pair."""
    M = tracks.matrices()
    T, B = M.shape[:2]
    S = np.einsum("tjab,tjac->jbc", M, M)
    quad = np.einsum("ia,jab,ib->ij", Ph, S, Ph)
    V = frames.shape[1]
    U = frames.transpose(1, 0, 2).reshape(V, -1) @ _flat_mats(tracks)
    h = np.einsum("ijb,ib->ij", U.reshape(V, B, 4), Ph)
    if c is None:
        c = np.einsum("tia,tia->i", frames, frames)
    return quad - 2.0 * h + c[:, None]


def _normal_equations(frames, Ph, tracks):
    Mf = _flat_mats(tracks)
    B = Mf.shape[1] // 4
    V = frames.shape[1]
    S = (Mf.T @ Mf).reshape(B, 4, B, 4)
    G = np.einsum("ia,jakb,ib->ijk", Ph, S, Ph, optimize=True)
    U = frames.transpose(1, 0, 2).reshape(V, -1) @ Mf
    h = np.einsum("ijb,ib->ij", U.reshape(V, B, 4), Ph)
    c = np.einsum("tia,tia->i", frames, frames)
    return G, h, c


def _simplex_lsq(G: np.ndarray, h: np.ndarray, c: np.ndarray):
    """Minimise ``w'Gw - 2h'w + c`` over the simplex, batched over the first axis.

    Enumerates active sets: every nonempty support gets its equality
    constrained optimum, infeasible ones are discarded. Exact for the small
    supports used here.
    """
    n, k = h.shape
    best_w = np.zeros((n, k))
    best_f = np.full(n, np.inf)
    ridge = 1e-12 * np.maximum(np.trace(G, axis1=1, axis2=2), 1e-30)
    for m in range(1, k + 1):
        for sub in itertools.combinations(range(k), m):
            sub = list(sub)
            if m == 1:
                w = np.ones((n, 1))
            else:
                Gs = G[:, sub][:, :, sub] + ridge[:, None, None] * np.eye(m)
                hs = h[:, sub]
                ones = np.ones((n, m))
                try:
                    X = np.linalg.solve(Gs, np.stack([hs, ones], axis=2))
                except np.linalg.LinAlgError:
                    X = np.matmul(np.linalg.pinv(Gs), np.stack([hs, ones], axis=2))
                a, b = X[..., 0], X[..., 1]
                mu = (1.0 - a.sum(1)) / np.where(np.abs(b.sum(1)) > 0, b.sum(1), 1.0)
                w = a + mu[:, None] * b
            ok = np.all(w >= -1e-12, axis=1) & np.all(np.isfinite(w), axis=1)
            w = np.clip(w, 0.0, None)
            w = w / np.where(w.sum(1, keepdims=True) > 0, w.sum(1, keepdims=True), 1.0)
            Gs = G[:, sub][:, :, sub]
            f = np.einsum("ni,nij,nj->n", w, Gs, w) - 2 * np.einsum("ni,ni->n", h[:, sub], w) + c
            take = ok & (f < best_f)
            if take.any():
                full = np.zeros((n, k))
                full[:, sub] = w
                best_w[take] = full[take]
                best_f[take] = f[take]
    return best_w, best_f


def _objective_rows(G, h, c, W):
    return np.einsum("ni,nij,nj->n", W, G, W) - 2 * np.einsum("ni,ni->n", h, W) + c


def ssdr_solve_weights(
    frames: np.ndarray,
    tracks: BoneTracks,
    rest_pose: np.ndarray,
    sparseness: int = DEFAULT_SPARSENESS,
    previous: np.ndarray | None = None,
) -> np.ndarray:
    """Per-vertex simplex-constrained, K-sparse weight fit for fixed transforms.

    Candidate bones are the ``sparseness`` bones with lowest individual fit
    error (ties go to the lower index). When ``previous`` weights are given a
    vertex keeps its previous row unless the new one is at least as good.
    """
    if sparseness < 1:
        raise ValueError("sparseness must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    Ph = _homogeneous(np.asarray(rest_pose, dtype=np.float64))
    V = len(Ph)
    B = tracks.bone_count
    G, h, c = _normal_equations(frames, Ph, tracks)
    single = np.einsum("ijj->ij", G) - 2.0 * h + c[:, None]
    k = min(sparseness, B)
    cand = np.argsort(single, axis=1, kind="stable")[:, :k]
    rows = np.arange(V)[:, None]
    Gc = G[rows[:, :, None], cand[:, :, None], cand[:, None, :]]
    w, f = _simplex_lsq(Gc, h[rows, cand], c)
    W = np.zeros((V, B))
    W[rows, cand] = w
    if previous is not None and previous.shape == W.shape:
        f_old = _objective_rows(G, h, c, previous)
        keep = f_old <= f
        W[keep] = previous[keep]
    return W


def ssdr_solve_transforms(
    frames: np.ndarray,
    weights: np.ndarray,
    rest_pose: np.ndarray,
    tracks: BoneTracks,
) -> tuple[BoneTracks, list[int]]:
    """One pass of per-bone weighted Procrustes updates in ascending bone order.

    Returns the updated tracks and the list of dormant bones (total weight
    below ``DORMANT_MASS``), whose transforms are left untouched.
    """
    frames = np.asarray(frames, dtype=np.float64)
    P = np.asarray(rest_pose, dtype=np.float64)
    Ph = _homogeneous(P)
    skin = SkinModel(P, weights, sparseness=max(1, int((weights > 0).sum(1).max())))
    M = tracks.matrices().copy()
    recon = lbs_sequence(skin, M)
    dormant = []
    for j in range(weights.shape[1]):
        wj = weights[:, j]
        if wj.sum() < DORMANT_MASS:
            dormant.append(j)
            continue
        idx = np.flatnonzero(wj > 0)
        w = wj[idx]
        Pj = P[idx]
        own = np.einsum("tab,ib->tia", M[:, j], Ph[idx])
        # target for bone j alone, everything else held fixed
        Q = frames[:, idx] - recon[:, idx] + w[None, :, None] * own
        a = w * w
        s = a.sum()
        pc = a @ Pj / s
        yc = np.einsum("i,tia->ta", w, Q) / s
        H = np.einsum("i,ia,tib->tab", w, Pj - pc, Q - w[None, :, None] * yc[:, None, :])
        U, _, Vt = np.linalg.svd(H)
        d = np.sign(np.linalg.det(np.matmul(U, Vt)))
        d = np.where(d == 0, 1.0, d)
        D = np.ones((len(H), 3))
        D[:, 2] = d
        R = np.einsum("tji,tj,tkj->tik", Vt, D, U)
        t = yc - R @ pc
        M[:, j, :, :3] = R
        M[:, j, :, 3] = t
        new = np.einsum("tab,ib->tia", M[:, j], Ph[idx])
        recon[:, idx] += w[None, :, None] * (new - own)
    return BoneTracks.from_matrices(M), dormant


# -- initialisation ------------------------------------------------------------


def _farthest_point_seeds(P: np.ndarray, k: int) -> np.ndarray:
    seeds = [0]
    d = np.linalg.norm(P - P[0], axis=1)
    for _ in range(1, k):
        i = int(np.argmax(d))
        seeds.append(i)
        d = np.minimum(d, np.linalg.norm(P - P[i], axis=1))
    return np.array(seeds)


def _cluster_tracks(frames, P, labels, B):
    T = frames.shape[0]
    R = np.empty((T, B, 3, 3))
    t = np.empty((T, B, 3))
    for j in range(B):
        idx = np.flatnonzero(labels == j)
        R[:, j], t[:, j] = weighted_procrustes(P[idx], frames[:, idx])
    return BoneTracks(R, t)


def ssdr_init(
    frames: np.ndarray,
    bone_count: int,
    rest_pose: np.ndarray | None = None,
    iterations: int = 10,
) -> tuple[np.ndarray, BoneTracks]:
    """Rigid k-means on vertex trajectories.

    Seeds by farthest-point sampling in the rest pose, then alternates per
    cluster rigid fits with reassignment of every vertex to the cluster whose
    rigid track reproduces its trajectory best. Empty clusters are re-seeded
    at the worst-fit vertex.

    Returns integer labels (V,) and per-cluster tracks.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T, V, _ = frames.shape
    if T < 2:
        raise ValueError("need at least 2 frames")
    if not 1 <= bone_count <= V:
        raise ValueError(f"bone_count must be in [1, {V}], got {bone_count}")
    P = frames[0] if rest_pose is None else np.asarray(rest_pose, dtype=np.float64)
    Ph = _homogeneous(P)
    if bone_count == V:
        labels = np.arange(V)
        return labels, _cluster_tracks(frames, P, labels, V)
    seeds = _farthest_point_seeds(P, bone_count)
    d = np.linalg.norm(P[:, None, :] - P[seeds][None], axis=2)
    labels = np.argmin(d, axis=1)
    labels[seeds] = np.arange(bone_count)
    c = np.einsum("tia,tia->i", frames, frames)
    for _ in range(iterations):
        tracks = _cluster_tracks(frames, P, labels, bone_count)
        e = _single_bone_errors(frames, Ph, tracks, c)
        new = np.argmin(e, axis=1)
        current = e[np.arange(V), labels]
        new = np.where(current <= e[np.arange(V), new], labels, new)
        for _ in range(bone_count):
            empty = np.setdiff1d(np.arange(bone_count), new)
            if not len(empty):
                break
            fit = e[np.arange(V), new]
            sizes = np.bincount(new, minlength=bone_count)
            movable = sizes[new] > 1
            worst = int(np.argmax(np.where(movable, fit, -np.inf)))
            new[worst] = empty[0]
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, _cluster_tracks(frames, P, labels, bone_count)


def _seed_bones(frames, P, recon, taken, count, cluster_size):
    """Rigid tracks fitted on neighbourhoods of the highest-residual vertices."""
    res = np.einsum("tia,tia->i", frames - recon, frames - recon)
    order = np.argsort(-res, kind="stable")
    used = np.zeros(len(P), dtype=bool)
    used[taken] = True
    R, t = [], []
    for _ in range(count):
        free = order[~used[order]]
        centre = free[0] if len(free) else order[0]
        nn = np.argsort(np.linalg.norm(P - P[centre], axis=1), kind="stable")[:cluster_size]
        used[nn] = True
        Rj, tj = weighted_procrustes(P[nn], frames[:, nn])
        R.append(Rj)
        t.append(tj)
    return np.stack(R, axis=1), np.stack(t, axis=1)


# -- driver ------------------------------------------------------------------


def _as_frames(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "frames", seq), dtype=np.float64)


def ssdr_decompose(
    seq,
    bone_count: int,
    max_iters: int = 30,
    tol: float = 1e-4,
    sparseness: int = DEFAULT_SPARSENESS,
    rest_frame: int = 0,
    init: DecompositionResult | None = None,
) -> DecompositionResult:
    """Extract ``bone_count`` rigid bones and sparse skin weights from a sequence.

    Args:
        seq: AnimSequence or (T, V, 3) array, usually the low-frequency part.
        bone_count: number of virtual bones.
        max_iters: outer iterations (one weight step + one transform step each).
        tol: stop once the relative objective improvement of an outer
            iteration drops below this.
        sparseness: maximum influences per vertex.
        rest_frame: frame used as the fixed rest pose.
        init: a decomposition with fewer bones to extend (nested
            initialisation). Its bones are kept and the extra ones are seeded
            at the worst-reconstructed regions with zero weight, so the result
            is never worse than ``init``.

    Raises:
        SSDRError: if the objective increases by more than the slack.
    """
    frames = _as_frames(seq)
    T, V, _ = frames.shape
    if T < 2:
        raise ValueError("need at least 2 frames")
    P = frames[rest_frame].copy()
    cluster_size = max(1, int(np.ceil(V / bone_count)))

    if init is not None:
        B0 = init.skin_model.bone_count
        if bone_count < B0:
            raise ValueError("nested initialisation needs bone_count >= init bone count")
        if not np.allclose(init.skin_model.rest_pose, P):
            raise ValueError("nested initialisation must share the rest pose")
        W = np.zeros((V, bone_count))
        W[:, :B0] = init.skin_model.weights
        M = np.zeros((T, bone_count, 3, 4))
        M[:, :B0] = init.tracks.matrices()
        if bone_count > B0:
            recon = lbs_sequence(init.skin_model, init.tracks.matrices())
            R, t = _seed_bones(frames, P, recon, [], bone_count - B0, cluster_size)
            M[:, B0:, :, :3] = R
            M[:, B0:, :, 3] = t
        tracks = BoneTracks.from_matrices(M)
    else:
        labels, tracks = ssdr_init(frames, bone_count, P)
        W = np.zeros((V, bone_count))
        W[np.arange(V), labels] = 1.0

    skin = SkinModel(P, W, sparseness)
    obj = _sse(frames, skin, tracks)
    history = [obj]
    dormant: list[int] = []
    it = 0
    for it in range(1, max_iters + 1):
        start = obj
        W = ssdr_solve_weights(frames, tracks, P, sparseness, previous=W)
        skin = SkinModel(P, W, sparseness)
        obj = _check_step(frames, skin, tracks, history, "weights", it)
        tracks, dormant = ssdr_solve_transforms(frames, W, P, tracks)
        obj = _check_step(frames, skin, tracks, history, "transforms", it)
        if dormant and it % RESEED_EVERY == 0:
            recon = lbs_sequence(skin, tracks.matrices())
            R, t = _seed_bones(frames, P, recon, [], len(dormant), cluster_size)
            M = tracks.matrices()
            M[:, dormant, :, :3] = R
            M[:, dormant, :, 3:] = t[..., None]
            tracks = BoneTracks.from_matrices(M)
            logger.info("re-seeded %d dormant bones at iteration %d", len(dormant), it)
        if start - obj <= tol * max(start, 1e-300):
            break

    rmse = float(np.sqrt(obj / (T * V)))
    lo = frames.reshape(-1, 3).min(0)
    hi = frames.reshape(-1, 3).max(0)
    diag = float(np.linalg.norm(hi - lo))
    rel = rmse / diag if diag > 0 else 0.0
    logger.info("SSDR %d bones: rmse %.3e (%.3f%% of bbox) after %d iterations",
                bone_count, rmse, 100 * rel, it)
    return DecompositionResult(skin, tracks, rmse, rel, history, it, dormant)


def _check_step(frames, skin, tracks, history, label, it):
    obj = _sse(frames, skin, tracks)
    if obj > history[-1] + MONOTONE_SLACK:
        raise SSDRError(
            f"objective increased in {label} step of iteration {it}: "
            f"{history[-1]:.12e} -> {obj:.12e}"
        )
    history.append(obj)
    return obj


def residual(seq, result: DecompositionResult) -> np.ndarray:
    """The per-vertex SSDR residual (T, V, 3), recomputed on demand."""
    frames = _as_frames(seq)
    return frames - lbs_sequence(result.skin_model, result.tracks.matrices())
