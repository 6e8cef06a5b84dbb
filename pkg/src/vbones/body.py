"""Articulated capsule body: procedural motions, forward kinematics, surface samples."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

JOINT_NAMES = (
    "root", "spine", "chest", "neck",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
    "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
)
JOINT_PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 2, 10, 2, 12])
JOINT_COUNT = len(JOINT_NAMES)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

# rest-pose joint positions, meters, y up, root at the waist
JOINT_REST = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.08, 0.0],
    [0.0, 0.28, 0.0],
    [0.0, 0.50, 0.0],
    [0.09, -0.08, 0.0],
    [0.09, -0.50, 0.0],
    [0.09, -0.90, 0.0],
    [-0.09, -0.08, 0.0],
    [-0.09, -0.50, 0.0],
    [-0.09, -0.90, 0.0],
    [0.18, 0.45, 0.0],
    [0.42, 0.22, 0.0],
    [-0.18, 0.45, 0.0],
    [-0.42, 0.22, 0.0],
])


@dataclass(frozen=True)
class Capsule:
    name: str
    joint: int
    a: tuple
    b: tuple
    radius: float
    samples: int


# endpoints are rest-pose world positions; each capsule moves rigidly with `joint`
CAPSULES = (
    Capsule("torso", J["spine"], (0.0, 0.10, 0.0), (0.0, 0.45, 0.0), 0.13, 120),
    Capsule("pelvis", J["root"], (-0.05, -0.03, 0.0), (0.05, -0.03, 0.0), 0.12, 72),
    Capsule("l_leg", J["l_hip"], (0.09, -0.10, 0.0), (0.09, -0.90, 0.0), 0.065, 96),
    Capsule("r_leg", J["r_hip"], (-0.09, -0.10, 0.0), (-0.09, -0.90, 0.0), 0.065, 96),
    Capsule("l_arm", J["l_shoulder"], (0.20, 0.43, 0.0), (0.42, 0.22, 0.0), 0.045, 64),
    Capsule("r_arm", J["r_shoulder"], (-0.20, 0.43, 0.0), (-0.42, 0.22, 0.0), 0.045, 64),
)
SURFACE_SAMPLES = sum(c.samples for c in CAPSULES)
# height, heading-frame velocity, yaw rate, root tilt, other joints
FEATURE_SIZE = 1 + 3 + 1 + 4 + 4 * (JOINT_COUNT - 1)


@dataclass
class BodyMotion:
    """Root translation (T, 3) and local joint quaternions (T, J, 4), scalar-last."""

    root_translation: np.ndarray
    joint_rotations: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        if self.joint_rotations.shape[:1] != self.root_translation.shape[:1]:
            raise ValueError("root translation and joint rotations disagree in frame count")
        n = np.linalg.norm(self.joint_rotations, axis=-1)
        if np.max(np.abs(n - 1.0), initial=0.0) > 1e-6:
            raise ValueError("joint quaternions must be unit norm")

    @property
    def frame_count(self) -> int:
        return len(self.root_translation)

    @property
    def joint_count(self) -> int:
        return self.joint_rotations.shape[1]

    def features(self) -> np.ndarray:
        """Per-frame network input that ignores where the body stands and which way it faces.

        Columns: root height, root velocity in the heading frame (m/s), yaw
        rate (rad/s), the root quaternion with its heading removed, then the
        local quaternions of the remaining joints. Rates are backward
        differences (zero at frame 0), so row f depends on frames f-1 and f only.
        """
        T = self.frame_count
        yaw = root_yaw(self)
        Rh, origin = heading_frames(self)
        vel = np.zeros((T, 3))
        yaw_rate = np.zeros((T, 1))
        if T > 1:
            step = np.diff(origin, axis=0) * self.frame_rate
            vel[1:] = np.einsum("tji,tj->ti", Rh[1:], step)
            yaw_rate[1:, 0] = np.angle(np.exp(1j * np.diff(yaw))) * self.frame_rate
        half = -0.5 * yaw
        unyaw = np.stack([np.zeros(T), np.sin(half), np.zeros(T), np.cos(half)], axis=1)
        tilt = quat_mul(unyaw, self.joint_rotations[:, 0])
        tilt *= np.where(tilt[:, 3:4] < 0, -1.0, 1.0)
        return np.concatenate([origin[:, 1:2], vel, yaw_rate, tilt,
                               self.joint_rotations[:, 1:].reshape(T, -1)], axis=1)

    def slice(self, start: int, stop: int) -> "BodyMotion":
        return BodyMotion(self.root_translation[start:stop], self.joint_rotations[start:stop],
                          self.frame_rate)

    def to_json(self) -> dict:
        return {
            "frame_rate": self.frame_rate,
            "quaternion_order": "xyzw",
            "frames": [
                {"root_translation": t.tolist(), "joint_rotations": q.tolist()}
                for t, q in zip(self.root_translation, self.joint_rotations)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "BodyMotion":
        frames = data["frames"]
        return cls(
            np.array([f["root_translation"] for f in frames], dtype=np.float64).reshape(-1, 3),
            np.array([f["joint_rotations"] for f in frames], dtype=np.float64).reshape(
                len(frames), -1, 4),
            float(data.get("frame_rate", 30.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "BodyMotion":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class BodySurface:
    positions: np.ndarray
    normals: np.ndarray


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _ramp_integral(t, rise):
    """Integral of the smoothstep ramp, so ramped angular speeds integrate smoothly."""
    s = np.clip(t / rise, 0.0, 1.0)
    inside = rise * (s**3 - 0.5 * s**4)
    return np.where(t < rise, inside, rise * 0.5 + (t - rise))


def _sines(rng, t, amplitude, n=3, fmin=0.2, fmax=1.2):
    out = np.zeros_like(t)
    amps = rng.uniform(0.3, 1.0, n)
    amps *= amplitude / amps.sum()
    for a in amps:
        f = rng.uniform(fmin, fmax)
        out += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) scalar-last quaternions."""
    av, aw = a[..., :3], a[..., 3:]
    bv, bw = b[..., :3], b[..., 3:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    return np.concatenate([aw * bv + bw * av + np.cross(av, bv), w], axis=-1)


def root_yaw(motion: BodyMotion) -> np.ndarray:
    """Heading angle (T,) of the root about +y, from where it maps +z."""
    R = Rotation.from_quat(motion.joint_rotations[:, 0]).as_matrix()
    return np.arctan2(R[:, 0, 2], R[:, 2, 2])


def heading_frames(motion: BodyMotion) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame yaw-only rotation (T, 3, 3) and origin (T, 3) that follow the root.

    World point x has heading-frame coordinates ``R.T @ (x - origin)``.
    """
    yaw = root_yaw(motion)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.zeros((motion.frame_count, 3, 3))
    R[:, 0, 0], R[:, 0, 2], R[:, 1, 1], R[:, 2, 0], R[:, 2, 2] = c, s, 1.0, -s, c
    return R, motion.root_translation + JOINT_REST[0]


def generate_body_motion(seed: int, frame_count: int, frame_rate: float = 30.0,
                         style: str = "sway") -> BodyMotion:
    """Deterministic smooth dance-like motion built from seeded sinusoids.

    Every style starts from the rest pose and fades in over the first second so
    simulations can begin from the undeformed garment.
    """
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if style not in ("sway", "spin", "walk"):
        raise ValueError(f"unknown motion style {style!r}")
    rng = np.random.default_rng(seed)
    t = np.arange(frame_count) / frame_rate
    ramp = _smoothstep(t / 1.0)
    euler = np.zeros((frame_count, JOINT_COUNT, 3))  # intrinsic xyz angles
    trans = np.zeros((frame_count, 3))

    trans[:, 0] = _sines(rng, t, 0.10)
    trans[:, 1] = _sines(rng, t, 0.02)
    trans[:, 2] = _sines(rng, t, 0.10)
    yaw = _sines(rng, t, 0.6)
    euler[:, J["root"], 0] = _sines(rng, t, 0.08)
    euler[:, J["root"], 2] = _sines(rng, t, 0.08)
    euler[:, J["spine"], 0] = _sines(rng, t, 0.12)
    euler[:, J["chest"], 2] = _sines(rng, t, 0.10)
    for side in ("l", "r"):
        euler[:, J[f"{side}_hip"], 0] = _sines(rng, t, 0.35)
        euler[:, J[f"{side}_hip"], 2] = _sines(rng, t, 0.12)
        euler[:, J[f"{side}_knee"], 0] = 0.25 + _sines(rng, t, 0.25)
        euler[:, J[f"{side}_shoulder"], 2] = _sines(rng, t, 0.35)
        euler[:, J[f"{side}_elbow"], 1] = _sines(rng, t, 0.3)

    if style == "spin":
        speed = rng.uniform(1.5, 3.0)
        yaw = speed * _ramp_integral(t, 1.0) + 0.1 * yaw * ramp
    elif style == "walk":
        f = rng.uniform(0.8, 1.1)
        swing = np.sin(2 * np.pi * f * t)
        euler[:, J["l_hip"], 0] = 0.4 * swing
        euler[:, J["r_hip"], 0] = -0.4 * swing
        euler[:, J["l_shoulder"], 0] = -0.3 * swing
        euler[:, J["r_shoulder"], 0] = 0.3 * swing
        radius, speed = 1.0, rng.uniform(0.6, 1.0)
        phi = speed * _ramp_integral(t, 1.0) / radius
        trans[:, 0] = radius * np.sin(phi)
        trans[:, 2] = radius * (np.cos(phi) - 1.0)
        trans[:, 1] = 0.02 * np.sin(4 * np.pi * f * t) * ramp
        yaw = phi
    else:
        trans *= ramp[:, None]
    if style == "sway":
        yaw = yaw * ramp
    euler *= ramp[:, None, None]
    euler[:, J["root"], 1] = yaw

    quats = Rotation.from_euler("xyz", euler.reshape(-1, 3)).as_quat().reshape(
        frame_count, JOINT_COUNT, 4)
    # canonical hemisphere at frame 0, then sign-continuous in time
    quats[0] = np.where(quats[0, :, 3:4] < 0, -quats[0], quats[0])
    for f in range(1, frame_count):
        flip = np.sum(quats[f] * quats[f - 1], axis=-1) < 0
        quats[f, flip] *= -1.0
    return BodyMotion(trans, quats, float(frame_rate))


def forward_kinematics(motion: BodyMotion, frame: int):
    """World rotations (J, 3, 3) and joint positions (J, 3) for one frame."""
    local = Rotation.from_quat(motion.joint_rotations[frame]).as_matrix()
    R = np.empty((JOINT_COUNT, 3, 3))
    X = np.empty((JOINT_COUNT, 3))
    for k in range(JOINT_COUNT):
        p = JOINT_PARENTS[k]
        if p < 0:
            R[k] = local[k]
            X[k] = JOINT_REST[k] + motion.root_translation[frame]
        else:
            R[k] = R[p] @ local[k]
            X[k] = X[p] + R[p] @ (JOINT_REST[k] - JOINT_REST[p])
    return R, X


def joint_transform(motion: BodyMotion, frame: int, joint: int):
    """(R, t) mapping rest-pose world points rigidly attached to ``joint``."""
    R, X = forward_kinematics(motion, frame)
    return R[joint], X[joint] - R[joint] @ JOINT_REST[joint]


def capsule_segments(motion: BodyMotion, frame: int) -> np.ndarray:
    """(6, 2, 3) posed capsule endpoints."""
    R, X = forward_kinematics(motion, frame)
    out = np.empty((len(CAPSULES), 2, 3))
    for c, cap in enumerate(CAPSULES):
        Rj, Xj, rest = R[cap.joint], X[cap.joint], JOINT_REST[cap.joint]
        out[c, 0] = Rj @ (np.asarray(cap.a) - rest) + Xj
        out[c, 1] = Rj @ (np.asarray(cap.b) - rest) + Xj
    return out


def capsule_radii() -> np.ndarray:
    return np.array([c.radius for c in CAPSULES])


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def _frame_from_axis(axis):
    z = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    return np.stack([x, np.cross(z, x), z], axis=1)


def rest_surface_samples():
    """Rest-pose sample points, outward normals and owning-capsule index."""
    pts, nrm, owner = [], [], []
    for c, cap in enumerate(CAPSULES):
        a, b = np.asarray(cap.a), np.asarray(cap.b)
        F = _frame_from_axis(b - a)
        L = np.linalg.norm(b - a)
        n_caps = cap.samples // 3
        d = _fibonacci_sphere(n_caps)
        n_cyl = cap.samples - n_caps
        rings = max(2, int(round(np.sqrt(n_cyl * L / (2 * np.pi * cap.radius)))))
        per = int(np.ceil(n_cyl / rings))
        k = np.arange(n_cyl)
        h = (k // per + 0.5) / rings * L
        ang = 2 * np.pi * (k % per) / per + (k // per) * 0.5
        cyl_n = np.stack([np.cos(ang), np.sin(ang), np.zeros(n_cyl)], 1)
        cyl_p = cap.radius * cyl_n + np.stack([np.zeros(n_cyl), np.zeros(n_cyl), h], 1)
        cap_p = cap.radius * d + np.where(d[:, 2:3] >= 0, L, 0.0) * np.array([0, 0, 1.0])
        local_p = np.concatenate([cyl_p, cap_p])
        local_n = np.concatenate([cyl_n, d])
        pts.append(local_p @ F.T + a)
        nrm.append(local_n @ F.T)
        owner.append(np.full(cap.samples, c))
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(owner)


_REST_SAMPLES = None


def body_surface(motion: BodyMotion, frame: int) -> BodySurface:
    """Posed surface samples (512 points) with unit outward normals."""
    global _REST_SAMPLES
    if not 0 <= frame < motion.frame_count:
        raise IndexError(f"frame {frame} out of range for {motion.frame_count} frames")
    if _REST_SAMPLES is None:
        _REST_SAMPLES = rest_surface_samples()
    P, N, owner = _REST_SAMPLES
    R, X = forward_kinematics(motion, frame)
    joints = np.array([cap.joint for cap in CAPSULES])[owner]
    Rj = R[joints]
    pos = np.einsum("nij,nj->ni", Rj, P - JOINT_REST[joints]) + X[joints]
    nrm = np.einsum("nij,nj->ni", Rj, N)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return BodySurface(pos, nrm)


def rest_motion(frame_count: int = 1, frame_rate: float = 30.0) -> BodyMotion:
    q = np.zeros((frame_count, JOINT_COUNT, 4))
    q[..., 3] = 1.0
    return BodyMotion(np.zeros((frame_count, 3)), q, frame_rate)
