"""Fixed-topology triangle meshes, uniform Laplacian and frequency splitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

DEFAULT_SMOOTH_ITERATIONS = 20
DEFAULT_SMOOTH_STEP = 0.5


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    """Triangle mesh with fixed connectivity.

    Attributes:
        faces: (F, 3) int array of vertex indices.
        rest_positions: (V, 3) float array in meters.
    """

    faces: np.ndarray
    rest_positions: np.ndarray
    _adjacency: list | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.rest_positions)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise MeshError(f"face index out of range for {n} vertices")
        f = self.faces
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate face at index {int(np.flatnonzero(degenerate)[0])}")

    @property
    def vertex_count(self) -> int:
        return len(self.rest_positions)

    def adjacency(self) -> list[np.ndarray]:
        if self._adjacency is None:
            self._adjacency = build_adjacency(self)
        return self._adjacency

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with i < j, sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def laplacian_matrix(self) -> sp.csr_matrix:
        return laplacian_matrix(self.adjacency())


@dataclass
class AnimSequence:
    """Time series of vertex positions on a fixed topology.

    ``frames`` has shape (T, V, 3) and is kept in float64.
    """

    mesh: Mesh
    frames: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise MeshError(f"frames must be (T, V, 3), got {self.frames.shape}")
        if self.frames.shape[1] != self.mesh.vertex_count:
            raise MeshError(
                f"frames have {self.frames.shape[1]} vertices, mesh has {self.mesh.vertex_count}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise MeshError("sequence contains non-finite positions")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "AnimSequence":
        return AnimSequence(self.mesh, frames, self.frame_rate)


@dataclass
class FrequencySplit:
    low: AnimSequence
    high: AnimSequence


def build_adjacency(mesh: Mesh) -> list[np.ndarray]:
    """Per-vertex sorted neighbor arrays derived from the face list.

    Duplicate faces (same vertex set) are dropped with a warning.
    """
    faces = mesh.faces
    keys = np.sort(faces, axis=1)
    _, first = np.unique(keys, axis=0, return_index=True)
    if len(first) != len(faces):
        logger.warning("dropping %d duplicate faces", len(faces) - len(first))
        faces = faces[np.sort(first)]
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    e = np.unique(e, axis=0)
    counts = np.bincount(e[:, 0], minlength=mesh.vertex_count)
    return np.split(e[:, 1], np.cumsum(counts)[:-1])


def adjacency_to_edges(adjacency: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Directed edge arrays (src, dst), grouped by ascending dst."""
    dst = np.repeat(np.arange(len(adjacency)), [len(a) for a in adjacency])
    src = np.concatenate(adjacency) if adjacency else np.zeros(0, dtype=np.int64)
    return src.astype(np.int64), dst.astype(np.int64)


def laplacian_matrix(adjacency: list[np.ndarray]) -> sp.csr_matrix:
    """Sparse uniform Laplacian L with (L p)_i = mean(p_N(i)) - p_i."""
    n = len(adjacency)
    deg = np.array([len(a) for a in adjacency])
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbors")
    src, dst = adjacency_to_edges(adjacency)
    vals = 1.0 / deg[dst]
    L = sp.csr_matrix((vals, (dst, src)), shape=(n, n))
    return (L - sp.identity(n, format="csr")).tocsr()


def uniform_laplacian(positions: np.ndarray, adjacency: list[np.ndarray]) -> np.ndarray:
    """Delta vectors: neighbor centroid minus the vertex, for (V, 3) or (T, V, 3) input."""
    L = laplacian_matrix(adjacency)
    return _apply(L, np.asarray(positions, dtype=np.float64))


def _apply(L: sp.csr_matrix, positions: np.ndarray) -> np.ndarray:
    if positions.ndim == 2:
        return L @ positions
    T, V, _ = positions.shape
    flat = positions.transpose(1, 0, 2).reshape(V, -1)
    return (L @ flat).reshape(V, T, 3).transpose(1, 0, 2)


def laplacian_smooth(
    positions: np.ndarray,
    adjacency: list[np.ndarray],
    iterations: int = DEFAULT_SMOOTH_ITERATIONS,
    step: float = DEFAULT_SMOOTH_STEP,
) -> np.ndarray:
    """Explicit umbrella smoothing ``p <- p + step * delta(p)``.

    Works on a single frame (V, 3) or a stack of frames (T, V, 3); frames are
    smoothed independently. Boundary vertices are not pinned.
    """
    if iterations < 0:
        raise MeshError("iterations must be >= 0")
    if not 0.0 < step <= 1.0:
        raise MeshError(f"smoothing step must lie in (0, 1], got {step}")
    p = np.array(positions, dtype=np.float64)
    if iterations == 0:
        return p
    L = laplacian_matrix(adjacency)
    # (I + step L)^k applied as a sparse operator
    S = (sp.identity(L.shape[0], format="csr") + step * L).tocsr()
    for _ in range(iterations):
        p = _apply(S, p)
    return p


def frequency_split(
    seq: AnimSequence,
    iterations: int = DEFAULT_SMOOTH_ITERATIONS,
    step: float = DEFAULT_SMOOTH_STEP,
) -> FrequencySplit:
    low = laplacian_smooth(seq.frames, seq.mesh.adjacency(), iterations, step)
    high = seq.frames - low
    return FrequencySplit(seq.with_frames(low), seq.with_frames(high))


# -- procedural meshes -------------------------------------------------------


def grid_mesh(nx: int, ny: int, size: float = 1.0) -> Mesh:
    """Flat (nx x ny vertex) grid in the xz-plane, two triangles per quad."""
    xs = np.linspace(-size / 2, size / 2, nx)
    zs = np.linspace(-size / 2, size / 2, ny)
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    pos = np.stack([X.ravel(), np.zeros(nx * ny), Z.ravel()], axis=1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(faces, pos)


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> Mesh:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(faces), radius * np.array(verts))
