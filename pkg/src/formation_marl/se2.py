"""Planar rigid-motion (SE(2)) algebra.

Poses are stored as (x, y, theta) scalars with theta normalized to
(-pi, pi]; homogeneous 3x3 matrices are materialized on demand so that
repeated composition never has to re-orthonormalize a stored rotation.
All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Point2:
    """A point (or free vector) in the world plane, in meters."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """Agent pose: position in meters, heading in radians.

    The heading is wrapped to (-pi, pi] on construction, so two poses
    that differ by a full turn compare equal through their transforms.
    """

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> Point2:
        return Point2(self.x, self.y)


@dataclass(frozen=True)
class Transform:
    """A homogeneous 3x3 planar rigid motion.

    Invariants checked on construction: the rotation block is orthonormal
    with determinant +1 (tolerance 1e-9) and the bottom row is exactly
    [0, 0, 1]. The wrapped array is made read-only.
    """

    matrix: np.ndarray = field()

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"transform must be 3x3, got {m.shape}")
        r = m[:2, :2]
        if not np.allclose(r.T @ r, np.eye(2), atol=_ORTHO_TOL):
            raise ValueError("rotation block is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=_ORTHO_TOL):
            raise ValueError("rotation block determinant is not +1")
        if m[2, 0] != 0.0 or m[2, 1] != 0.0 or m[2, 2] != 1.0:
            raise ValueError("bottom row must be exactly [0, 0, 1]")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:2, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:2, 2]


def pose_to_transform(p: Pose) -> Transform:
    """World-from-local transform of a pose: columns are the pose's axes."""
    c = math.cos(p.theta)
    s = math.sin(p.theta)
    return Transform(
        np.array(
            [
                [c, -s, p.x],
                [s, c, p.y],
                [0.0, 0.0, 1.0],
            ]
        )
    )


def invert(t: Transform) -> Transform:
    """Inverse rigid motion, computed in closed form (R^T, -R^T t)."""
    r_t = t.rotation.T
    out = np.eye(3)
    out[:2, :2] = r_t
    out[:2, 2] = -r_t @ t.translation
    return Transform(out)


def compose(a: Transform, b: Transform) -> Transform:
    """Homogeneous matrix product a * b (apply b first, then a)."""
    return Transform(a.matrix @ b.matrix)


def transform_point(t: Transform, p: Point2) -> Point2:
    """Apply a rigid motion to a point."""
    v = t.rotation @ p.as_array() + t.translation
    return Point2(float(v[0]), float(v[1]))


def relative_transform(from_pose: Pose, to_pose: Pose) -> Transform:
    """Frame-change map taking coordinates in `from_pose`'s frame to
    coordinates in `to_pose`'s frame.

    A world point q with local coordinates q_from in the frame of
    `from_pose` satisfies q_to = relative_transform(from_pose, to_pose)
    applied to q_from.
    """
    return compose(invert(pose_to_transform(to_pose)), pose_to_transform(from_pose))


def to_local(observer: Pose, world_point: Point2) -> Point2:
    """Express a world point in the observer's local frame: R(theta)^T (p - t)."""
    c = math.cos(observer.theta)
    s = math.sin(observer.theta)
    dx = world_point.x - observer.x
    dy = world_point.y - observer.y
    return Point2(c * dx + s * dy, -s * dx + c * dy)


def to_world(observer: Pose, local_point: Point2) -> Point2:
    """Inverse of to_local: map a local-frame point back to the world."""
    return transform_point(pose_to_transform(observer), local_point)
