"""Analytic bench surfaces and measurement synthesis.

A surface maps grid arc-length coordinates (s_u, s_v) in mm to a world pose:
a position and an orthonormal tangent frame whose columns are the local
x (along increasing u), y (along increasing v) and z (surface normal) axes
expressed in world coordinates. Grid coordinates are arc lengths measured
along the surface, so rods of nominal length p always span p of surface,
never p of horizontal projection.

An accelerometer aligned with the local frame and at rest reads the world
up direction in body coordinates, i.e. the bottom row of the frame matrix;
for a tangent tilted by alpha that gives a_x = sin(alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

_EZ = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray  # (3,) mm
    frame: np.ndarray     # (3, 3), columns = body axes in world coordinates

    @property
    def gravity_body(self) -> np.ndarray:
        """World up expressed in body axes; what a resting accelerometer reads (g)."""
        return self.frame.T @ _EZ


class SurfaceModel(Protocol):
    def pose(self, s_u: float, s_v: float) -> Pose: ...


def _rot_x(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(beta: float) -> np.ndarray:
    c, s = math.cos(beta), math.sin(beta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Flat:
    """Rigid plane, optionally pitched along u and rolled along v.

    Positive pitch means height increases with s_u, positive roll with s_v.
    """

    pitch_deg: float = 0.0
    roll_deg: float = 0.0

    def pose(self, s_u: float, s_v: float) -> Pose:
        frame = _rot_y(-math.radians(self.pitch_deg)) @ _rot_x(math.radians(self.roll_deg))
        position = s_u * frame[:, 0] + s_v * frame[:, 1]
        return Pose(position=position, frame=frame)


@dataclass(frozen=True)
class CylinderBend:
    """Surface rolled onto a cylinder of the given radius along one grid axis.

    Arc length wraps onto the circle, so a coordinate s along the bent axis
    sits at angle theta = s / radius with position components
    (radius*sin(theta), radius*(1 - cos(theta))) in the bending plane. The
    other axis stays straight.
    """

    radius_mm: float
    axis: str = "u"

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("radius_mm must be positive")
        if self.axis not in ("u", "v"):
            raise ValueError("axis must be 'u' or 'v'")

    def pose(self, s_u: float, s_v: float) -> Pose:
        r = self.radius_mm
        if self.axis == "u":
            theta = s_u / r
            position = np.array([r * math.sin(theta), s_v, r * (1.0 - math.cos(theta))])
            x = np.array([math.cos(theta), 0.0, math.sin(theta)])
            y = np.array([0.0, 1.0, 0.0])
        else:
            theta = s_v / r
            position = np.array([s_u, r * math.sin(theta), r * (1.0 - math.cos(theta))])
            x = np.array([1.0, 0.0, 0.0])
            y = np.array([0.0, math.cos(theta), math.sin(theta)])
        z = np.cross(x, y)
        return Pose(position=position, frame=np.column_stack([x, y, z]))


@dataclass(frozen=True)
class Sinusoid:
    """Surface draped over z = A*sin(2*pi*x/L) along one grid axis.

    The grid coordinate along the waved axis is arc length measured along
    the curve, recovered by inverting the arc-length integral numerically.
    """

    amplitude_mm: float
    wavelength_mm: float
    axis: str = "u"

    def __post_init__(self):
        if self.wavelength_mm <= 0:
            raise ValueError("wavelength_mm must be positive")
        if self.axis not in ("u", "v"):
            raise ValueError("axis must be 'u' or 'v'")

    def _slope(self, x: float) -> float:
        k = 2.0 * math.pi / self.wavelength_mm
        return self.amplitude_mm * k * math.cos(k * x)

    def _arc_length(self, x: float) -> float:
        value, _ = quad(lambda t: math.hypot(1.0, self._slope(t)), 0.0, x,
                        epsabs=1e-12, epsrel=1e-12, limit=200)
        return value

    def _x_of_arc(self, s: float) -> float:
        if s == 0.0:
            return 0.0
        if s < 0.0:
            return -self._x_of_arc(-s)  # integrand is even so arc length is odd
        k = 2.0 * math.pi / self.wavelength_mm
        slope_max = abs(self.amplitude_mm) * k
        lo = s / math.hypot(1.0, slope_max)
        if self._arc_length(lo) >= s:
            return lo
        return brentq(lambda x: self._arc_length(x) - s, lo, s, xtol=1e-12, rtol=1e-14)

    def pose(self, s_u: float, s_v: float) -> Pose:
        k = 2.0 * math.pi / self.wavelength_mm
        s_wave, s_straight = (s_u, s_v) if self.axis == "u" else (s_v, s_u)
        x = self._x_of_arc(s_wave)
        height = self.amplitude_mm * math.sin(k * x)
        slope = self._slope(x)
        norm = math.hypot(1.0, slope)
        tangent = np.array([1.0 / norm, 0.0, slope / norm])
        if self.axis == "u":
            position = np.array([x, s_straight, height])
            xv = tangent
            yv = np.array([0.0, 1.0, 0.0])
        else:
            position = np.array([s_straight, x, height])
            xv = np.array([1.0, 0.0, 0.0])
            yv = np.array([0.0, tangent[0], tangent[2]])
        z = np.cross(xv, yv)
        return Pose(position=position, frame=np.column_stack([xv, yv, z]))


def sample_rod_pose(pose_a: Pose, pose_b: Pose) -> Pose:
    """Pose of a rigid rod joining two node poses.

    The rod x axis points along the chord from a to b; z is the world up
    direction projected off the chord (falling back to world y for a near
    vertical chord, which bench surfaces never produce).
    """
    chord = pose_b.position - pose_a.position
    length = np.linalg.norm(chord)
    if length == 0.0:
        raise ValueError("rod endpoints coincide")
    x = chord / length
    z = _EZ - (x @ _EZ) * x
    if np.linalg.norm(z) < 1e-9:
        ref = np.array([0.0, 1.0, 0.0])
        z = ref - (x @ ref) * x
    z = z / np.linalg.norm(z)
    y = np.cross(z, x)
    return Pose(position=(pose_a.position + pose_b.position) / 2.0,
                frame=np.column_stack([x, y, z]))


@dataclass(frozen=True)
class NoiseModel:
    """Additive measurement corruption, all zero by default."""

    accel_sigma_g: float = 0.0
    distance_sigma_mm: float = 0.0
    accel_bias_g: tuple[float, float, float] = (0.0, 0.0, 0.0)


def synth_accel(pose: Pose, noise: NoiseModel, rng: np.random.Generator) -> tuple[float, float, float]:
    """Noisy 3-axis accelerometer sample for a resting node at the pose (g)."""
    value = pose.gravity_body + np.asarray(noise.accel_bias_g)
    if noise.accel_sigma_g > 0.0:
        value = value + noise.accel_sigma_g * rng.standard_normal(3)
    return (float(value[0]), float(value[1]), float(value[2]))


def synth_distance(pose_a: Pose, pose_b: Pose, noise: NoiseModel,
                   rng: np.random.Generator) -> float:
    """Noisy chord length between two node poses (mm)."""
    value = float(np.linalg.norm(pose_b.position - pose_a.position))
    if noise.distance_sigma_mm > 0.0:
        value += noise.distance_sigma_mm * float(rng.standard_normal())
    return value


def parse_surface_spec(text: str) -> SurfaceModel:
    """Build a surface from its command-line form.

    Accepted forms: "flat", "flat:<pitch_deg>,<roll_deg>",
    "cylinder:<radius_mm>[,<axis>]", "sinusoid:<amplitude_mm>,<wavelength_mm>[,<axis>]".
    """
    kind, _, argstr = text.partition(":")
    args = [a.strip() for a in argstr.split(",")] if argstr else []
    try:
        if kind == "flat":
            if not args:
                return Flat()
            if len(args) != 2:
                raise ValueError
            return Flat(pitch_deg=float(args[0]), roll_deg=float(args[1]))
        if kind == "cylinder":
            if len(args) == 1:
                return CylinderBend(radius_mm=float(args[0]))
            if len(args) == 2:
                return CylinderBend(radius_mm=float(args[0]), axis=args[1])
            raise ValueError
        if kind == "sinusoid":
            if len(args) == 2:
                return Sinusoid(amplitude_mm=float(args[0]), wavelength_mm=float(args[1]))
            if len(args) == 3:
                return Sinusoid(amplitude_mm=float(args[0]),
                                wavelength_mm=float(args[1]), axis=args[2])
            raise ValueError
    except ValueError as exc:
        raise ValueError(f"bad surface spec '{text}'") from exc
    raise ValueError(f"unknown surface kind '{kind}'")
