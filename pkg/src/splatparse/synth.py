"""Procedural Gaussian scenes with exact instance labels.

Objects are surface shells of isotropic splats sampled on primitive shapes.
Layouts are plain dicts (JSON-serialisable)::

    {"objects": [{"id": 0, "shape": "sphere", "center": [0, 0, 0],
                  "size": [0.3, 0.3, 0.3], "color": [0.8, 0.2, 0.2], "n": 400}],
     "background_color": [1, 1, 1]}

``size`` holds half-extents (radii for spheres and ellipsoids).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .gaussians import GaussianScene

SHAPES = ("sphere", "ellipsoid", "box", "cylinder")
_PALETTE = np.array([
    [0.85, 0.25, 0.2], [0.2, 0.55, 0.85], [0.3, 0.75, 0.3], [0.9, 0.75, 0.2],
    [0.6, 0.35, 0.75], [0.2, 0.75, 0.75], [0.9, 0.5, 0.6], [0.5, 0.5, 0.5],
])


def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, half):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, (n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return pts, float(8 * areas.sum())


def _cylinder_surface(rng, n, half):
    rx, ry, hz = half
    r = 0.5 * (rx + ry)
    side, cap = 2 * math.pi * r * 2 * hz, math.pi * r * r
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, n)
    rad = np.where(which == 0, 1.0, np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(which == 0, rng.uniform(-1, 1, n), np.where(which == 1, 1.0, -1.0))
    pts = np.stack([rx * rad * np.cos(theta), ry * rad * np.sin(theta), hz * z], axis=1)
    return pts, side + 2 * cap


def surface_points(shape: str, size: Sequence[float], n: int, rng) -> tuple[np.ndarray, float]:
    """``n`` points on the shape's surface (centred at the origin) and its area."""
    half = np.asarray(size, dtype=np.float64) * np.ones(3)
    if shape in ("sphere", "ellipsoid"):
        pts = _unit_sphere(rng, n) * half
        p = 1.6075
        a, b, c = half
        area = 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
        return pts, area
    if shape == "box":
        return _box_surface(rng, n, half)
    if shape == "cylinder":
        return _cylinder_surface(rng, n, half)
    raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def make_shape(shape: str, center=(0.0, 0.0, 0.0), size=(0.3, 0.3, 0.3), *, n: int = 400, rng=None,
               color=None, opacity: float = 0.8, label: int = 0, splat_factor: float = 0.6,
               color_jitter: float = 0.03, yaw: float = 0.0) -> GaussianScene:
    rng = np.random.default_rng(rng)
    pts, area = surface_points(shape, size, n, rng)
    if yaw:
        c, s = math.cos(yaw), math.sin(yaw)
        pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    spacing = math.sqrt(area / n)
    base = _PALETTE[label % len(_PALETTE)] if color is None else np.asarray(color, dtype=np.float64)
    colors = np.clip(base + color_jitter * rng.normal(size=(n, 3)), 0.0, 1.0)
    return GaussianScene(
        pts + np.asarray(center, dtype=np.float64),
        np.full((n, 3), splat_factor * spacing),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, opacity),
        colors,
        instance_ids=np.full(n, label),
    )


def synth_scene(layout: dict, rng=None) -> GaussianScene:
    """Build a labelled scene from a layout dict (see module docstring)."""
    rng = np.random.default_rng(rng)
    objs = layout.get("objects", [])
    if not objs:
        raise ValueError("layout needs at least one object")
    ids = [int(o.get("id", i)) for i, o in enumerate(objs)]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate object ids in layout: {ids}")
    parts = []
    for oid, o in zip(ids, objs):
        parts.append(make_shape(
            o.get("shape", "sphere"), o.get("center", (0, 0, 0)), o.get("size", (0.3, 0.3, 0.3)),
            n=int(o.get("n", 400)), rng=rng, color=o.get("color"), opacity=float(o.get("opacity", 0.8)),
            label=-1 if o.get("unlabeled") else oid, yaw=float(o.get("yaw", 0.0)),
        ))
    scene = GaussianScene.concat(parts, background_color=layout.get("background_color", (1.0, 1.0, 1.0)))
    return scene


def preset_layout(name: str, **params) -> dict:
    """Named layouts used by tests and the ``synth`` CLI command."""
    if name == "single_sphere":
        return {"objects": [{"id": 0, "shape": "sphere", "size": [0.4] * 3, "n": params.get("n", 400)}]}
    if name == "two_blobs":
        n = params.get("n", 300)
        return {"objects": [
            {"id": 0, "shape": "sphere", "center": [0.0, -0.5, 0.0], "size": [0.3] * 3, "n": n},
            {"id": 1, "shape": "sphere", "center": [0.0, 0.5, 0.0], "size": [0.3] * 3, "n": n},
        ]}
    if name == "three_objects":
        n = params.get("n", 300)
        return {"objects": [
            {"id": 0, "shape": "box", "center": [0.0, -0.75, 0.0], "size": [0.25, 0.25, 0.3], "n": n},
            {"id": 1, "shape": "sphere", "center": [0.0, 0.0, 0.1], "size": [0.25] * 3, "n": n},
            {"id": 2, "shape": "cylinder", "center": [0.0, 0.75, 0.0], "size": [0.2, 0.2, 0.3], "n": n},
        ]}
    if name == "room4":
        n = params.get("n", 400)
        return {"objects": [
            {"id": 0, "shape": "box", "center": [-0.45, -0.45, -0.1], "size": [0.3, 0.25, 0.2], "n": n},
            {"id": 1, "shape": "sphere", "center": [0.45, -0.4, 0.0], "size": [0.25] * 3, "n": n},
            {"id": 2, "shape": "cylinder", "center": [-0.4, 0.45, 0.0], "size": [0.2, 0.2, 0.3], "n": n},
            {"id": 3, "shape": "ellipsoid", "center": [0.45, 0.45, -0.05], "size": [0.3, 0.2, 0.22], "n": n},
        ]}
    if name == "tabletop":
        n = params.get("n", 300)
        return {"objects": [
            {"id": 0, "shape": "box", "center": [0.0, 0.0, -0.35], "size": [0.9, 0.9, 0.05],
             "n": 3 * n, "color": [0.55, 0.4, 0.3]},
            {"id": 1, "shape": "box", "center": [-0.3, -0.3, -0.1], "size": [0.2, 0.2, 0.2], "n": n},
            {"id": 2, "shape": "sphere", "center": [0.3, 0.0, -0.1], "size": [0.2] * 3, "n": n},
            {"id": 3, "shape": "cylinder", "center": [-0.2, 0.35, -0.1], "size": [0.15, 0.15, 0.2], "n": n},
        ]}
    if name == "occlusion_sweep":
        # occluder sits in front of the target along +x; ``overlap`` in [0, 1]
        # slides it sideways from clear (0) to centred (1)
        overlap = float(params.get("overlap", 0.5))
        n = params.get("n", 600)
        y = (1.0 - overlap) * 0.7
        return {"objects": [
            {"id": 0, "shape": "box", "center": [0.0, 0.0, 0.0], "size": [0.1, 0.3, 0.3], "n": n},
            {"id": 1, "shape": "box", "center": [0.6, y, 0.0], "size": [0.05, 0.2, 0.35], "n": n},
        ]}
    raise ValueError(f"unknown preset {name!r}")
