"""On-disk formats: OBJ templates, VBSQ sequences, VBRIG rigs, VBNN checkpoints.

All binary containers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import AnimSequence, Mesh
from .skinning import BoneTracks, SkinModel

SEQ_MAGIC = b"VBSQ"
RIG_MAGIC = b"VBRIG"
NN_MAGIC = b"VBNN"
VERSION = 1


class FormatError(ValueError):
    pass


# -- OBJ -------------------------------------------------------------------------


def read_obj(path) -> Mesh:
    """Vertices and triangular faces only; polygons with more than three corners are rejected."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise FormatError(f"{path}:{lineno}: only triangles are supported, got {len(idx)}-gon")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return Mesh(np.array(faces, dtype=np.int64).reshape(-1, 3), np.array(verts).reshape(-1, 3))


def write_obj(path, positions: np.ndarray, faces: np.ndarray, colors: np.ndarray | None = None) -> None:
    lines = []
    for k, p in enumerate(positions):
        if colors is None:
            lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}")
        else:
            c = colors[k]
            lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}")
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


# -- VBSQ --------------------------------------------------------------------------

_SEQ_HEADER = struct.Struct("<4sIIIf")


def write_sequence(path, frames: np.ndarray, frame_rate: float) -> None:
    frames = np.asarray(frames)
    T, V, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(_SEQ_HEADER.pack(SEQ_MAGIC, VERSION, T, V, frame_rate))
        fh.write(frames.astype("<f4").tobytes())


def read_sequence_frames(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    if len(data) < _SEQ_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, T, V, rate = _SEQ_HEADER.unpack_from(data)
    if magic != SEQ_MAGIC:
        raise FormatError(f"{path}: not a VBSQ file")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = np.frombuffer(data, dtype="<f4", offset=_SEQ_HEADER.size)
    if body.size != T * V * 3:
        raise FormatError(f"{path}: expected {T * V * 3} floats, found {body.size}")
    return body.reshape(T, V, 3).astype(np.float64), float(rate)


def read_sequence(path, mesh: Mesh) -> AnimSequence:
    frames, rate = read_sequence_frames(path)
    return AnimSequence(mesh, frames, rate)


# -- VBRIG -------------------------------------------------------------------------

_RIG_HEADER = struct.Struct("<5sIIIII")
_TRIPLET = np.dtype([("vertex", "<u4"), ("bone", "<u2"), ("weight", "<f4")])


def write_rig(path, skin: SkinModel, tracks: BoneTracks | None = None) -> None:
    """Rest pose, sparse weights and (optionally) per-frame bone transforms."""
    V, B = skin.weights.shape
    if B > np.iinfo(np.uint16).max:
        raise FormatError("too many bones for a u16 bone index")
    T = 0 if tracks is None else tracks.frame_count
    vi, bi = np.nonzero(skin.weights)
    trip = np.empty(len(vi), dtype=_TRIPLET)
    trip["vertex"], trip["bone"], trip["weight"] = vi, bi, skin.weights[vi, bi]
    with open(path, "wb") as fh:
        fh.write(_RIG_HEADER.pack(RIG_MAGIC, VERSION, V, B, T, skin.sparseness))
        fh.write(skin.rest_pose.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(trip)))
        fh.write(trip.tobytes())
        if tracks is not None:
            fh.write(tracks.matrices().astype("<f4").tobytes())


def read_rig(path) -> tuple[SkinModel, BoneTracks | None]:
    data = Path(path).read_bytes()
    magic, version, V, B, T, K = _RIG_HEADER.unpack_from(data)
    if magic != RIG_MAGIC:
        raise FormatError(f"{path}: not a VBRIG file")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _RIG_HEADER.size
    rest = np.frombuffer(data, "<f4", V * 3, off).reshape(V, 3).astype(np.float64)
    off += V * 3 * 4
    (nnz,) = struct.unpack_from("<I", data, off)
    off += 4
    trip = np.frombuffer(data, _TRIPLET, nnz, off)
    off += nnz * _TRIPLET.itemsize
    W = np.zeros((V, B))
    W[trip["vertex"], trip["bone"]] = trip["weight"]
    W /= W.sum(axis=1, keepdims=True)
    tracks = None
    if T:
        M = np.frombuffer(data, "<f4", T * B * 12, off).reshape(T, B, 3, 4).astype(np.float64)
        tracks = BoneTracks.from_matrices(M)
    return SkinModel(rest, W, K), tracks


# -- VBNN --------------------------------------------------------------------------


def _write_str(fh, s: str) -> None:
    b = s.encode()
    fh.write(struct.pack("<H", len(b)))
    fh.write(b)


def _read_str(data: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", data, off)
    return data[off + 2: off + 2 + n].decode(), off + 2 + n


def write_checkpoint(path, arrays: dict[str, np.ndarray], optimizer: dict[str, np.ndarray] | None = None) -> None:
    """Name table, shape table, then f64 payloads; optimizer state follows as a second table."""
    sections = [arrays, optimizer or {}]
    with open(path, "wb") as fh:
        fh.write(NN_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for table in sections:
            names = list(table)
            fh.write(struct.pack("<I", len(names)))
            for n in names:
                _write_str(fh, n)
            for n in names:
                shape = np.shape(table[n])
                fh.write(struct.pack("<I", len(shape)))
                fh.write(struct.pack(f"<{len(shape)}I", *shape))
            for n in names:
                fh.write(np.asarray(table[n], dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != NN_MAGIC:
        raise FormatError(f"{path}: not a VBNN file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 8
    tables = []
    for _ in range(2):
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        names = []
        for _ in range(count):
            name, off = _read_str(data, off)
            names.append(name)
        shapes = []
        for _ in range(count):
            (nd,) = struct.unpack_from("<I", data, off)
            off += 4
            shapes.append(struct.unpack_from(f"<{nd}I", data, off))
            off += 4 * nd
        table = {}
        for name, shape in zip(names, shapes):
            n = int(np.prod(shape)) if shape else 1
            table[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
        tables.append(table)
    return tables[0], tables[1]
