"""Pinhole camera model and pose helpers.

Camera space looks down -z with +y up; pixel ``(u, v)`` maps to the
camera-space direction ``((u - cx) / fx, -(v - cy) / fy, -1)``. Pixel
centers sit at half-integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (3, 4) camera-to-world

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(3, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def rotation(self):
        return self.c2w[:, :3]

    @property
    def position(self):
        return self.c2w[:, 3]

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(self.c2w)):
            raise ValueError("camera pose contains non-finite values")
        r = self.rotation
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHO_TOL or np.linalg.det(r) < 0:
            raise ValueError(f"camera rotation is not orthonormal (max error {err:.3g})")
        return self

    def pixel_directions(self):
        """World-space unit directions for every pixel center, ``(H, W, 3)``."""
        v, u = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        d = np.stack([(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -np.ones_like(u)], axis=-1)
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "c2w": [float(v) for v in self.c2w.ravel()]}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]),
                   c2w=np.asarray(d["c2w"], dtype=np.float64).reshape(3, 4))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix placing the camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    rot = np.stack([right, true_up, -forward], axis=1)
    return np.concatenate([rot, eye[:, None]], axis=1)


def make_camera(eye, target, image_size, fov_deg):
    f = 0.5 * image_size / np.tan(np.radians(fov_deg) / 2)
    return CameraModel(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2,
                       width=image_size, height=image_size, c2w=look_at(eye, target))


def hemisphere_eye(center, radius, azimuth, elevation):
    ce = np.cos(elevation)
    return np.asarray(center, dtype=np.float64) + radius * np.array(
        [ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])


def orbit_cameras(center, radius, n_frames, image_size, fov_deg, elevation_deg=30.0):
    """Evenly spaced cameras on a circle at fixed elevation."""
    return [make_camera(hemisphere_eye(center, radius, 2 * np.pi * k / n_frames, np.radians(elevation_deg)),
                        center, image_size, fov_deg)
            for k in range(n_frames)]
