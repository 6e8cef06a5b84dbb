"""Desk-scale XPBD cloth simulator driven by the capsule body.

Per substep: explicit gravity prediction, Gauss-Seidel projection of edge
length and dihedral bending constraints (compliance-based), pinned vertices
snapped to their attachment joint, and capsule collision projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .body import (
    BodyMotion,
    J,
    capsule_radii,
    capsule_segments,
    joint_transform,
)
from .mesh import AnimSequence, Mesh

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, -9.81, 0.0])
MAX_SPEED = 50.0


class SimulationError(RuntimeError):
    def __init__(self, message: str, frame: int):
        super().__init__(message)
        self.frame = frame


@dataclass(frozen=True)
class SimParams:
    bending_stiffness: float = 1e-7
    mass_density: float = 0.04
    timescale: float = 1.0

    BOUNDS = {
        "bending_stiffness": (0.0, 1e3),
        "mass_density": (1e-4, 10.0),
        "timescale": (1e-3, 10.0),
    }

    def __post_init__(self):
        for name, (lo, hi) in self.BOUNDS.items():
            v = getattr(self, name)
            if not math.isfinite(v) or not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        if self.mass_density <= 0 or self.timescale <= 0:
            raise ValueError("mass_density and timescale must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.bending_stiffness, self.mass_density, self.timescale)

    def to_json(self) -> dict:
        return {"bending_stiffness": self.bending_stiffness,
                "mass_density": self.mass_density, "timescale": self.timescale}

    @classmethod
    def from_json(cls, d: dict) -> "SimParams":
        return cls(float(d["bending_stiffness"]), float(d["mass_density"]), float(d["timescale"]))

    @classmethod
    def parse(cls, text: str) -> "SimParams":
        b, m, t = (float(x) for x in text.split(","))
        return cls(b, m, t)


@dataclass
class SimSettings:
    substeps: int = 10
    iterations: int = 2
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    damping: float = 0.5
    stretch_compliance: float = 0.0
    collide: bool = True
    thickness: float = 0.005


@dataclass
class GarmentTemplate:
    mesh: Mesh
    pinned: np.ndarray
    attach_joint: int = 0
    name: str = "garment"
    edges: np.ndarray = field(init=False)
    rest_lengths: np.ndarray = field(init=False)
    hinges: np.ndarray = field(init=False)
    rest_dihedrals: np.ndarray = field(init=False)
    areas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pinned = np.asarray(self.pinned, dtype=np.int64)
        if self.pinned.size and (self.pinned.min() < 0 or self.pinned.max() >= self.mesh.vertex_count):
            raise ValueError("pinned vertex index out of range")
        P = self.mesh.rest_positions
        self.edges = self.mesh.edges()
        self.rest_lengths = np.linalg.norm(P[self.edges[:, 1]] - P[self.edges[:, 0]], axis=1)
        self.hinges = _hinges(self.mesh.faces)
        self.rest_dihedrals = np.array(
            [_dihedral(P[h[0]], P[h[1]], P[h[2]], P[h[3]]) for h in self.hinges]
        ) if len(self.hinges) else np.zeros(0)
        f = self.mesh.faces
        cr = np.cross(P[f[:, 1]] - P[f[:, 0]], P[f[:, 2]] - P[f[:, 0]])
        fa = 0.5 * np.linalg.norm(cr, axis=1)
        self.areas = np.zeros(self.mesh.vertex_count)
        np.add.at(self.areas, f.ravel(), np.repeat(fa / 3.0, 3))


def _hinges(faces: np.ndarray) -> np.ndarray:
    """Interior edges as (edge_a, edge_b, opposite_1, opposite_2)."""
    seen: dict[tuple[int, int], int] = {}
    out = []
    for f in faces:
        for k in range(3):
            a, b, c = int(f[k]), int(f[(k + 1) % 3]), int(f[(k + 2) % 3])
            key = (min(a, b), max(a, b))
            if key in seen:
                out.append((key[0], key[1], seen.pop(key), c))
            else:
                seen[key] = c
    return np.array(out, dtype=np.int64).reshape(-1, 4)


@numba.njit(cache=True, inline="always")
def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


@numba.njit(cache=True, inline="always")
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@numba.njit(cache=True, inline="always")
def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@numba.njit(cache=True)
def _dihedral_grad(x0, x1, x2, x3, g):
    """Signed dihedral angle of hinge (x0, x1) with opposite vertices x2, x3.

    Writes d(angle)/dx into ``g`` (4, 3) and returns (angle, valid).
    """
    e = _sub(x1, x0)
    elen = math.sqrt(_dot(e, e))
    n1 = _cross(_sub(x2, x0), _sub(x2, x1))
    n2 = _cross(_sub(x3, x1), _sub(x3, x0))
    l1 = _dot(n1, n1)
    l2 = _dot(n2, n2)
    if elen < 1e-12 or l1 < 1e-24 or l2 < 1e-24:
        return 0.0, False
    s1 = math.sqrt(l1)
    s2 = math.sqrt(l2)
    m1 = (n1[0] / s1, n1[1] / s1, n1[2] / s1)
    m2 = (n2[0] / s2, n2[1] / s2, n2[2] / s2)
    theta = math.atan2(_dot(_cross(m1, m2), e) / elen, _dot(m1, m2))
    a2 = -elen / l1
    a3 = -elen / l2
    c1 = _dot(_sub(x2, x1), e) / elen
    c2 = _dot(_sub(x3, x1), e) / elen
    d1 = _dot(_sub(x2, x0), e) / elen
    d2 = _dot(_sub(x3, x0), e) / elen
    for k in range(3):
        g[2, k] = a2 * n1[k]
        g[3, k] = a3 * n2[k]
        g[0, k] = -(c1 * n1[k] / l1 + c2 * n2[k] / l2)
        g[1, k] = d1 * n1[k] / l1 + d2 * n2[k] / l2
    return theta, True


def _dihedral(x0, x1, x2, x3) -> float:
    g = np.zeros((4, 3))
    return float(_dihedral_grad(x0, x1, x2, x3, g)[0])


@numba.njit(cache=True)
def _capsule_project(p, inv_mass, seg, radii, thickness):
    for i in range(p.shape[0]):
        if inv_mass[i] == 0.0:
            continue
        for c in range(seg.shape[0]):
            ab = _sub(seg[c, 1], seg[c, 0])
            ap = _sub(p[i], seg[c, 0])
            denom = _dot(ab, ab)
            s = 0.0
            if denom > 0.0:
                s = min(1.0, max(0.0, _dot(ap, ab) / denom))
            d0 = ap[0] - s * ab[0]
            d1 = ap[1] - s * ab[1]
            d2 = ap[2] - s * ab[2]
            dist = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            r = radii[c] + thickness
            if dist < r:
                if dist > 1e-12:
                    k = r / dist - 1.0
                    p[i, 0] += k * d0
                    p[i, 1] += k * d1
                    p[i, 2] += k * d2
                else:
                    p[i, 2] += r


@numba.njit(cache=True)
def _substep(x, v, inv_mass, pinned, target, edges, rest_len, hinges, rest_dih,
             h, gravity, iterations, stretch_alpha, bend_alpha, use_bend,
             collide, seg, radii, thickness, damping):
    n = x.shape[0]
    p = np.empty_like(x)
    for i in range(n):
        for k in range(3):
            if inv_mass[i] > 0.0:
                v[i, k] += h * gravity[k]
                p[i, k] = x[i, k] + h * v[i, k]
            else:
                p[i, k] = x[i, k]
    for j in range(pinned.shape[0]):
        for k in range(3):
            p[pinned[j], k] = target[j, k]
    lam_s = np.zeros(edges.shape[0])
    lam_b = np.zeros(hinges.shape[0])
    g = np.zeros((4, 3))
    sa = stretch_alpha / (h * h)
    ba = bend_alpha / (h * h)
    for _ in range(iterations):
        for e in range(edges.shape[0]):
            a = edges[e, 0]
            b = edges[e, 1]
            wa = inv_mass[a]
            wb = inv_mass[b]
            if wa + wb == 0.0:
                continue
            d = _sub(p[a], p[b])
            ln = math.sqrt(_dot(d, d))
            if ln < 1e-12:
                continue
            C = ln - rest_len[e]
            dl = (-C - sa * lam_s[e]) / (wa + wb + sa)
            lam_s[e] += dl
            for k in range(3):
                p[a, k] += wa * dl * d[k] / ln
                p[b, k] -= wb * dl * d[k] / ln
        if use_bend:
            for e in range(hinges.shape[0]):
                i0 = hinges[e, 0]
                i1 = hinges[e, 1]
                i2 = hinges[e, 2]
                i3 = hinges[e, 3]
                theta, ok = _dihedral_grad(p[i0], p[i1], p[i2], p[i3], g)
                if not ok:
                    continue
                C = theta - rest_dih[e]
                if C > np.pi:
                    C -= 2 * np.pi
                elif C < -np.pi:
                    C += 2 * np.pi
                w0 = inv_mass[i0]
                w1 = inv_mass[i1]
                w2 = inv_mass[i2]
                w3 = inv_mass[i3]
                den = ba
                for k in range(3):
                    den += (w0 * g[0, k] * g[0, k] + w1 * g[1, k] * g[1, k]
                            + w2 * g[2, k] * g[2, k] + w3 * g[3, k] * g[3, k])
                if den < 1e-30:
                    continue
                dl = (-C - ba * lam_b[e]) / den
                lam_b[e] += dl
                for k in range(3):
                    p[i0, k] += w0 * dl * g[0, k]
                    p[i1, k] += w1 * dl * g[1, k]
                    p[i2, k] += w2 * dl * g[2, k]
                    p[i3, k] += w3 * dl * g[3, k]
        if collide:
            _capsule_project(p, inv_mass, seg, radii, thickness)
    fade = math.exp(-damping * h)
    vmax = 0.0
    for i in range(n):
        s2 = 0.0
        for k in range(3):
            vk = (p[i, k] - x[i, k]) / h
            if inv_mass[i] > 0.0:
                vk *= fade
            v[i, k] = vk
            s2 += vk * vk
            x[i, k] = p[i, k]
        if s2 > vmax:
            vmax = s2
    return math.sqrt(vmax)


def _attachment_targets(template: GarmentTemplate, motion: BodyMotion, frame: int) -> np.ndarray:
    R, t = joint_transform(motion, frame, template.attach_joint)
    return template.mesh.rest_positions[template.pinned] @ R.T + t


def simulate(
    template: GarmentTemplate,
    motion: BodyMotion,
    params: SimParams,
    substeps: int | None = None,
    settings: SimSettings | None = None,
    dt: float | None = None,
) -> AnimSequence:
    """Simulate the garment over every frame of ``motion``.

    Output frame ``k`` is the cloth state when the body is at motion frame
    ``k``; frame 0 is the template posed rigidly by the attachment joint.
    Physical time per frame is ``dt * timescale`` with ``dt`` defaulting to
    the motion's frame period.

    Raises:
        SimulationError: if any particle exceeds 50 m/s.
    """
    settings = settings or SimSettings()
    substeps = settings.substeps if substeps is None else substeps
    dt = 1.0 / motion.frame_rate if dt is None else dt
    h = dt * params.timescale / substeps
    mesh = template.mesh
    V = mesh.vertex_count

    mass = params.mass_density * template.areas
    inv_mass = np.where(mass > 0, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
    inv_mass[template.pinned] = 0.0
    bend_alpha = 1.0 / params.bending_stiffness if params.bending_stiffness > 0 else 0.0
    use_bend = params.bending_stiffness > 0 and len(template.hinges) > 0
    radii = capsule_radii()
    gravity = np.asarray(settings.gravity, dtype=np.float64)

    R0, t0 = joint_transform(motion, 0, template.attach_joint)
    x = mesh.rest_positions @ R0.T + t0
    v = np.zeros((V, 3))
    out = np.empty((motion.frame_count, V, 3))
    out[0] = x
    prev_target = _attachment_targets(template, motion, 0)
    prev_seg = capsule_segments(motion, 0)
    for f in range(1, motion.frame_count):
        target = _attachment_targets(template, motion, f)
        seg = capsule_segments(motion, f)
        for s in range(1, substeps + 1):
            a = s / substeps
            tgt = (1.0 - a) * prev_target + a * target
            sg = (1.0 - a) * prev_seg + a * seg
            vmax = _substep(
                x, v, inv_mass, template.pinned, tgt, template.edges, template.rest_lengths,
                template.hinges, template.rest_dihedrals, h, gravity, settings.iterations,
                settings.stretch_compliance, bend_alpha, use_bend, settings.collide, sg, radii,
                settings.thickness, settings.damping,
            )
            if not np.isfinite(vmax) or vmax > MAX_SPEED:
                raise SimulationError(f"simulation exploded at frame {f} (speed {vmax:.1f} m/s)", f)
        out[f] = x
        prev_target, prev_seg = target, seg
    return AnimSequence(mesh, out, motion.frame_rate)


def penetration_depth(frames: np.ndarray, motion: BodyMotion, exclude=()) -> np.ndarray:
    """Per-frame maximum capsule penetration depth of the garment vertices."""
    radii = capsule_radii()
    keep = np.setdiff1d(np.arange(frames.shape[1]), np.asarray(exclude, dtype=np.int64))
    out = np.zeros(len(frames))
    for f in range(len(frames)):
        seg = capsule_segments(motion, f)
        p = frames[f, keep]
        a, b = seg[:, 0], seg[:, 1]
        ab = b - a
        s = np.einsum("ncj,cj->nc", p[:, None, :] - a[None], ab) / np.einsum("cj,cj->c", ab, ab)
        s = np.clip(s, 0.0, 1.0)
        q = a[None] + s[..., None] * ab[None]
        d = np.linalg.norm(p[:, None, :] - q, axis=2)
        out[f] = max(0.0, float(np.max(radii[None] - d)))
    return out


def mean_dihedral_deviation(template: GarmentTemplate, frames: np.ndarray) -> float:
    h = template.hinges
    dev = []
    for x in frames:
        th = np.array([_dihedral(x[a], x[b], x[c], x[d]) for a, b, c, d in h])
        dd = np.abs(th - template.rest_dihedrals)
        dev.append(np.minimum(dd, 2 * np.pi - dd).mean())
    return float(np.mean(dev))


# -- templates -----------------------------------------------------------------


def _cone_grid(around: int, rows: int, top_y: float, bottom_y: float,
               top_r: float, bottom_r: float) -> Mesh:
    ys = np.linspace(top_y, bottom_y, rows)
    rs = np.linspace(top_r, bottom_r, rows)
    ang = 2 * np.pi * np.arange(around) / around
    pos = np.array([[r * np.sin(a), y, r * np.cos(a)] for y, r in zip(ys, rs) for a in ang])
    faces = []
    for i in range(rows - 1):
        for j in range(around):
            a = i * around + j
            b = i * around + (j + 1) % around
            c = (i + 1) * around + (j + 1) % around
            d = (i + 1) * around + j
            # alternate the diagonal for a less anisotropic triangulation
            if (i + j) % 2:
                faces += [(a, d, b), (b, d, c)]
            else:
                faces += [(a, d, c), (a, c, b)]
    return Mesh(np.array(faces), pos)


def skirt_template(around: int = 32, rows: int = 15, length: float = 0.55,
                   waist_radius: float = 0.18, hem_radius: float = 0.32) -> GarmentTemplate:
    """Flared tube skirt whose top ring is pinned to the pelvis."""
    mesh = _cone_grid(around, rows, 0.0, -length, waist_radius, hem_radius)
    return GarmentTemplate(mesh, np.arange(around), J["root"], "skirt")


def dress_template(around: int = 32, rows: int = 26, top_y: float = 0.34,
                   length: float = 1.02, top_radius: float = 0.175,
                   hem_radius: float = 0.40) -> GarmentTemplate:
    """A-line dress pinned at the chest ring."""
    mesh = _cone_grid(around, rows, top_y, top_y - length, top_radius, hem_radius)
    return GarmentTemplate(mesh, np.arange(around), J["chest"], "dress")


TEMPLATES = {"skirt": skirt_template, "dress": dress_template}
