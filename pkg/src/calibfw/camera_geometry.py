"""Pinhole camera model, rotations, horizon line and target normalization.

Conventions shared by the whole package:

* World frame: x right, y up, z forward (yaw 0, level camera).
* Camera frame: x right, y up, z along the optical axis.
* Pixels: u rightward, v downward, origin at the top-left corner, principal
  point at exactly ``(width / 2, height / 2)``.
* Image units: y up, top edge = +1, bottom edge = -1 (scaled by half height).

Angles are radians everywhere in this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FOCAL_RANGE_PX = (50.0, 500.0)
PITCH_RANGE_DEG = (-90.0, 0.0)
ROLL_RANGE_DEG = (-45.0, 45.0)

FOCAL_SCALE = 500.0
PITCH_SCALE_DEG = 90.0
ROLL_SCALE_DEG = 45.0

_RANGE_SLACK = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    f_px: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not self.f_px > 0:
            raise ValueError(f"focal length must be positive, got {self.f_px}")
        if self.width_px < 2 or self.height_px < 2:
            raise ValueError("image must be at least 2x2 pixels")

    @property
    def center(self) -> tuple[float, float]:
        return self.width_px / 2.0, self.height_px / 2.0

    def matrix(self) -> np.ndarray:
        """K with the principal point folded in and a flipped v axis."""
        cx, cy = self.center
        return np.array([[self.f_px, 0.0, cx], [0.0, -self.f_px, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Extrinsics:
    pitch_rad: float = 0.0
    roll_rad: float = 0.0
    yaw_rad: float = 0.0

    def __post_init__(self):
        if not (-math.pi / 2 < self.pitch_rad <= _RANGE_SLACK):
            raise ValueError(f"pitch must lie in (-pi/2, 0], got {self.pitch_rad}")
        if abs(self.roll_rad) > math.pi / 4 + _RANGE_SLACK:
            raise ValueError(f"roll must lie in [-pi/4, pi/4], got {self.roll_rad}")
        if not (-_RANGE_SLACK <= self.yaw_rad < 2 * math.pi + _RANGE_SLACK):
            raise ValueError(f"yaw must lie in [0, 2pi), got {self.yaw_rad}")


@dataclass(frozen=True)
class CalibrationTarget:
    focal_n: float
    pitch_n: float
    roll_n: float

    def as_array(self) -> np.ndarray:
        return np.array([self.focal_n, self.pitch_n, self.roll_n])


@dataclass(frozen=True)
class HorizonLine:
    midpoint_units: float
    roll_rad: float


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(ext: Extrinsics) -> np.ndarray:
    """World-to-camera rotation ``Rz(roll) @ Rx(pitch) @ Ry(yaw)``.

    Yaw only turns the scene in front of the camera; it is applied first.
    """
    return rot_z(ext.roll_rad) @ rot_x(ext.pitch_rad) @ rot_y(ext.yaw_rad)


def project_point(intr: Intrinsics, ext: Extrinsics, p_w) -> tuple[float, float] | None:
    """Project a world point to pixel coordinates.

    Returns ``None`` when the point is on or behind the camera plane.
    """
    p_w = np.asarray(p_w, dtype=float)
    if p_w.shape != (3,) or not np.all(np.isfinite(p_w)):
        raise ValueError("p_w must be a finite 3-vector")
    lu, lv, lam = intr.matrix() @ (rotation_matrix(ext) @ p_w)
    if lam <= 0:
        return None
    return lu / lam, lv / lam


def horizon_midpoint(f_px: float, pitch_rad: float, height_px: int) -> float:
    """Horizon offset from the image center in image units (y up).

    For a level-roll camera this is where the horizon crosses the central
    column; a downward pitch gives a positive value.
    """
    if height_px < 2:
        raise ValueError("height_px must be >= 2")
    return -2.0 * f_px * math.tan(pitch_rad) / height_px


def horizon_line(f_px: float, pitch_rad: float, roll_rad: float, height_px: int) -> HorizonLine:
    return HorizonLine(horizon_midpoint(f_px, pitch_rad, height_px), roll_rad)


def units_to_row(y_units: float, height_px: int) -> float:
    return height_px * (1.0 - y_units) / 2.0


def row_to_units(v: float, height_px: int) -> float:
    return 1.0 - 2.0 * v / height_px


def horizon_endpoints(f_px, pitch_rad, roll_rad, width_px, height_px):
    """Pixel endpoints ``((0, v_left), (width, v_right))`` of the horizon.

    The horizon is the image of the world's level plane. Rolling the camera
    rotates it about the image center, so it crosses the central column at
    ``midpoint / cos(roll)`` and rises with slope ``tan(roll)`` (y up).
    """
    if width_px < 2 or height_px < 2:
        raise ValueError("image must be at least 2x2 pixels")
    bp = horizon_midpoint(f_px, pitch_rad, height_px)
    v_mid = units_to_row(bp / math.cos(roll_rad), height_px)
    half = width_px / 2.0
    dv = half * math.tan(roll_rad)
    return (0.0, v_mid + dv), (float(width_px), v_mid - dv)


def _check_range(name, value, lo, hi):
    if not (lo - _RANGE_SLACK <= value <= hi + _RANGE_SLACK):
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


def normalize_target(intr: Intrinsics, ext: Extrinsics) -> CalibrationTarget:
    return normalize_values(intr.f_px, math.degrees(ext.pitch_rad), math.degrees(ext.roll_rad))


def normalize_values(f_px: float, pitch_deg: float, roll_deg: float) -> CalibrationTarget:
    """Scale raw (focal px, pitch deg, roll deg) by their max absolute values."""
    _check_range("f_px", f_px, 0.0, FOCAL_RANGE_PX[1])
    _check_range("pitch_deg", pitch_deg, *PITCH_RANGE_DEG)
    _check_range("roll_deg", roll_deg, *ROLL_RANGE_DEG)
    return CalibrationTarget(
        f_px / FOCAL_SCALE, pitch_deg / PITCH_SCALE_DEG, roll_deg / ROLL_SCALE_DEG
    )


def denormalize_target(t) -> tuple[float, float, float]:
    """Inverse of :func:`normalize_target`: ``(f_px, pitch_rad, roll_rad)``.

    Accepts a :class:`CalibrationTarget` or any length-3 sequence.
    """
    if isinstance(t, CalibrationTarget):
        fn, pn, rn = t.focal_n, t.pitch_n, t.roll_n
    else:
        fn, pn, rn = (float(x) for x in t)
    return (
        fn * FOCAL_SCALE,
        math.radians(pn * PITCH_SCALE_DEG),
        math.radians(rn * ROLL_SCALE_DEG),
    )


def denormalize_array(y: np.ndarray) -> np.ndarray:
    """Vectorized inverse for network outputs: columns (f_px, pitch_deg, roll_deg)."""
    y = np.asarray(y, dtype=float)
    return y * np.array([FOCAL_SCALE, PITCH_SCALE_DEG, ROLL_SCALE_DEG])
