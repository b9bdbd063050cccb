"""Pinhole cameras with a timestamp, plus JSON IO and simple rig builders."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .scene import TimeSample


@dataclass
class CameraPose:
    """World-to-camera rotation/translation and pinhole intrinsics in pixels.

    Pixel (row i, col j) samples the image plane at (x=j, y=i); the viewport
    spans [-0.5, width-0.5] x [-0.5, height-0.5].
    """

    rotation: np.ndarray     # (3, 3), world -> camera
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    time: TimeSample

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera viewport must be at least 1x1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")

    def key(self) -> str:
        """Stable identity for dataset bookkeeping."""
        return f"{self.translation.tolist()}|{self.time.t}"


def look_at(
    eye,
    target=(0.0, 0.0, 0.0),
    up=(0.0, 1.0, 0.0),
    fov_deg: float = 50.0,
    width: int = 64,
    height: int = 64,
    time: float = 0.0,
) -> CameraPose:
    """Camera at ``eye`` looking toward ``target`` (camera +z axis)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    fy = fx
    return CameraPose(
        rotation=rot,
        translation=-rot @ eye,
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        time=TimeSample(time),
    )


def orbit_rig(
    count: int,
    radius: float = 5.0,
    elevation: float = 0.35,
    target=(0.0, 0.0, 0.0),
    width: int = 64,
    height: int = 64,
    fov_deg: float = 50.0,
    times=None,
) -> list[CameraPose]:
    """Evenly spaced cameras circling ``target``; times default to all zero."""
    cams = []
    for i in range(count):
        ang = 2 * math.pi * i / count
        eye = np.array([
            target[0] + radius * math.sin(ang),
            target[1] + radius * elevation,
            target[2] - radius * math.cos(ang),
        ])
        t = 0.0 if times is None else float(times[i])
        cams.append(look_at(eye, target=target, width=width, height=height,
                            fov_deg=fov_deg, time=t))
    return cams


def camera_to_dict(cam: CameraPose) -> dict:
    return {
        "rotation": [float(x) for x in cam.rotation.reshape(-1)],
        "translation": [float(x) for x in cam.translation],
        "fx": float(cam.fx),
        "fy": float(cam.fy),
        "cx": float(cam.cx),
        "cy": float(cam.cy),
        "width": int(cam.width),
        "height": int(cam.height),
        "time": float(cam.time.t),
    }


def camera_from_dict(doc: dict) -> CameraPose:
    return CameraPose(
        rotation=np.array(doc["rotation"], dtype=np.float64).reshape(3, 3),
        translation=np.array(doc["translation"], dtype=np.float64),
        fx=float(doc["fx"]),
        fy=float(doc["fy"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        width=int(doc["width"]),
        height=int(doc["height"]),
        time=TimeSample(float(doc["time"])),
    )


def save_camera(path: str | os.PathLike, cam: CameraPose) -> None:
    with open(path, "w") as f:
        json.dump(camera_to_dict(cam), f, indent=1)
        f.write("\n")


def load_camera(path: str | os.PathLike) -> CameraPose:
    with open(path) as f:
        return camera_from_dict(json.load(f))


def load_camera_dir(path: str | os.PathLike) -> list[tuple[str, CameraPose]]:
    """All ``*.json`` cameras in a directory, sorted by stem."""
    names = sorted(n for n in os.listdir(path) if n.endswith(".json"))
    return [(os.path.splitext(n)[0], load_camera(os.path.join(path, n))) for n in names]
