"""Fixed geometric transform (quarter-turn rotations), 6-DoF poses, and
pose-error arithmetic.

The training constraint uses a predefined image-space transform; here it is
the 90-degree clockwise rotation group, parameterized by the number of
quarter turns so the full group law is testable. Poses attach ground truth
to database/query images and feed the localization scorer.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, ShapeError, ValidationError

QUATERNION_NORM_TOL = 1e-6


@dataclass(frozen=True)
class GeometricTransform:
    """Rotation by `quarter_turns` * 90 degrees clockwise."""

    quarter_turns: int

    def __post_init__(self):
        if self.quarter_turns not in (0, 1, 2, 3):
            raise ValidationError(
                f"quarter_turns must be in {{0,1,2,3}}, got {self.quarter_turns}"
            )

    def compose(self, other: "GeometricTransform") -> "GeometricTransform":
        return GeometricTransform((self.quarter_turns + other.quarter_turns) % 4)


IDENTITY_TRANSFORM = GeometricTransform(0)


def inverse_transform(t: GeometricTransform) -> GeometricTransform:
    """Inverse rotation: (4 - k) mod 4 quarter turns."""
    return GeometricTransform((4 - t.quarter_turns) % 4)


def rotate_pixels(pixels: torch.Tensor, quarter_turns: int) -> torch.Tensor:
    """Rotate ...xHxW tensors clockwise by 90-degree steps.

    Pixel (r, c) moves to (c, H-1-r) per turn. Requires H == W so the
    shape is preserved; a bare index permutation, hence bit-exact.
    """
    if pixels.shape[-1] != pixels.shape[-2]:
        raise ShapeError(
            f"rotation requires square images, got {pixels.shape[-2]}x{pixels.shape[-1]}"
        )
    k = quarter_turns % 4
    if k == 0:
        return pixels
    # torch.rot90 rotates counterclockwise for positive k
    return torch.rot90(pixels, k=-k, dims=(-2, -1))


def apply_transform(img, t: GeometricTransform):
    """Apply the transform to an image batch (or raw pixel tensor).

    Accepts either a tensor of shape ...xHxW or any object with a
    `pixels` field plus domain labels (labels pass through unchanged).
    """
    if isinstance(img, torch.Tensor):
        return rotate_pixels(img, t.quarter_turns)
    rotated = rotate_pixels(img.pixels, t.quarter_turns)
    return type(img)(
        pixels=rotated,
        appearance_domain=img.appearance_domain,
        occlusion_flag=img.occlusion_flag,
    )


def _as_unit_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValidationError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUATERNION_NORM_TOL:
        raise ValidationError(f"quaternion norm {norm} deviates from 1 beyond tolerance")
    return q


@dataclass(frozen=True)
class Pose6DoF:
    """Translation in meters plus a unit quaternion (w, x, y, z)."""

    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValidationError(f"translation must be a 3-vector, got shape {t.shape}")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", _as_unit_quaternion(self.rotation))


def pose_error(a: Pose6DoF, b: Pose6DoF) -> tuple[float, float]:
    """Translation error in meters and rotation error in degrees.

    The angle uses the quaternion double cover: 2*arccos(|<q_a, q_b>|),
    which is sign-invariant and lands in [0, 180].
    """
    qa = _as_unit_quaternion(a.rotation)
    qb = _as_unit_quaternion(b.rotation)
    meters = float(np.linalg.norm(a.translation - b.translation))
    dot = min(1.0, abs(float(np.dot(qa, qb))))
    degrees = math.degrees(2.0 * math.acos(dot))
    return meters, degrees


def yaw_quaternion(degrees: float) -> np.ndarray:
    """Unit quaternion for a rotation of `degrees` about the z axis."""
    half = math.radians(degrees) / 2.0
    return np.array([math.cos(half), 0.0, 0.0, math.sin(half)])


def read_pose_manifest(path: str) -> dict[str, Pose6DoF]:
    """Read the plain-text pose file: one record per line,
    `relpath tx ty tz qw qx qy qz`, whitespace-separated."""
    if not os.path.exists(path):
        raise DataError(f"pose manifest not found: {path}")
    poses: dict[str, Pose6DoF] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                numbers = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed pose numbers") from exc
            try:
                poses[parts[0]] = Pose6DoF(
                    translation=np.array(numbers[:3]), rotation=np.array(numbers[3:])
                )
            except ValidationError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return poses


def format_pose_line(relpath: str, pose: Pose6DoF) -> str:
    values = list(pose.translation) + list(pose.rotation)
    return relpath + " " + " ".join(f"{v:.9f}" for v in values)
