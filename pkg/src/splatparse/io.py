"""File formats: 3DGS-layout PLY, PNG planes and raw arrays with JSON headers."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import FEATURE_DIM, UNLABELED, GaussianScene

SH_C0 = 0.28209479177387814
PNG16_UNLABELED = 65535
PNG16_MAX = 65534

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

GS_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + [f"feature_{i}" for i in range(FEATURE_DIM)]
)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def write_ply(path, scene: GaussianScene) -> Path:
    """Binary little-endian PLY with the standard 3DGS fields plus features and labels."""
    path = Path(path)
    n = len(scene)
    dtype = [(name, "<f4") for name in GS_PROPERTIES] + [("instance_id", "<i4")]
    data = np.zeros(n, dtype=dtype)
    for i, axis in enumerate("xyz"):
        data[axis] = scene.positions[:, i]
    for i in range(3):
        data[f"f_dc_{i}"] = (scene.colors[:, i] - 0.5) / SH_C0
        data[f"scale_{i}"] = np.log(scene.scales[:, i])
    with np.errstate(divide="ignore"):
        data["opacity"] = np.log(scene.opacities) - np.log1p(-scene.opacities)
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    for i in range(FEATURE_DIM):
        data[f"feature_{i}"] = scene.features[:, i]
    data["instance_id"] = scene.instance_ids
    bg = " ".join(repr(float(v)) for v in scene.background_color)
    header = ["ply", "format binary_little_endian 1.0", f"comment background_color {bg}",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in GS_PROPERTIES]
    header += ["property int instance_id", "end_header"]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
    return path


def _read_ply_vertices(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        elements: list[tuple[str, int, list]] = []
        comments = []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "comment":
                comments.append(" ".join(tok[1:]))
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    raise ValueError(f"{path}: list properties are not supported")
                if tok[1] not in _PLY_TYPES:
                    raise ValueError(f"{path}: unknown property type {tok[1]}")
                elements[-1][2].append((tok[2], "<" + _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
        for name, count, props in elements:
            dt = np.dtype(props)
            block = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
            if name == "vertex":
                return block, comments
    raise ValueError(f"{path}: no vertex element")


def read_ply(path) -> GaussianScene:
    """Load a 3DGS-layout PLY. Missing feature/instance fields default to zero / unlabeled."""
    v, comments = _read_ply_vertices(path)
    names = v.dtype.names
    for req in ("x", "y", "z", "opacity", "scale_0", "rot_0", "f_dc_0"):
        if req not in names:
            raise ValueError(f"{path}: missing property {req}")
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = np.clip(0.5 + SH_C0 * np.stack([v[f"f_dc_{i}"] for i in range(3)], axis=1).astype(np.float64), 0, 1)
    scales = np.exp(np.stack([v[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64))
    rots = np.stack([v[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    opac = _sigmoid(v["opacity"].astype(np.float64))
    feats = None
    if "feature_0" in names:
        feats = np.stack([v[f"feature_{i}"] for i in range(FEATURE_DIM)], axis=1).astype(np.float64)
    ids = v["instance_id"].astype(np.int64) if "instance_id" in names else None
    if ids is not None:
        ids[ids < 0] = UNLABELED
    bg = (0.0, 0.0, 0.0)
    for c in comments:
        if c.startswith("background_color"):
            bg = tuple(float(x) for x in c.split()[1:4])
    return GaussianScene(pos, scales, rots, opac, colors, feats, ids, bg, normalize_rotations=True)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_raw(path, array: np.ndarray, **meta) -> Path:
    """Write ``array`` as little-endian bytes to ``path`` plus ``path.json`` header."""
    path = Path(path)
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = {"shape": list(arr.shape), "dtype": dt.str}
    header.update(meta)
    write_json(path.with_name(path.name + ".json"), header)
    return path


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = read_json(path.with_name(path.name + ".json"))
    arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(header["dtype"])).reshape(header["shape"])
    return arr.copy(), header


def write_png(path, image: np.ndarray) -> Path:
    """8-bit PNG from a float image in [0, 1] (H x W or H x W x 3) or a bool mask."""
    path = Path(path)
    img = np.asarray(image)
    if img.dtype == bool:
        img8 = img.astype(np.uint8) * 255
    elif img.dtype == np.uint8:
        img8 = img
    else:
        img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img8).save(path)
    return path


def read_png(path) -> np.ndarray:
    return np.array(Image.open(path))


def write_depth_png(path, depth: np.ndarray, scale: float | None = None) -> Path:
    """16-bit depth PNG; ``path.json`` gives ``depth = offset + scale * value``."""
    path = Path(path)
    d = np.asarray(depth, dtype=np.float64)
    fin = np.isfinite(d)
    offset = float(d[fin].min()) if fin.any() else 0.0
    if scale is None:
        span = float(d[fin].max()) - offset if fin.any() else 0.0
        scale = span / PNG16_MAX if span > 0 else 1.0
    q = np.full(d.shape, PNG16_UNLABELED, dtype=np.uint16)
    q[fin] = np.clip(np.round((d[fin] - offset) / scale), 0, PNG16_MAX).astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)
    write_json(path.with_name(path.name + ".json"),
               {"scale": scale, "offset": offset, "invalid": PNG16_UNLABELED})
    return path


def read_depth_png(path) -> np.ndarray:
    path = Path(path)
    meta = read_json(path.with_name(path.name + ".json"))
    q = np.array(Image.open(path)).astype(np.int64)
    d = meta["offset"] + meta["scale"] * q.astype(np.float64)
    d[q == meta["invalid"]] = np.inf
    return d


def write_label_png(path, labels: np.ndarray) -> Path:
    """16-bit label map; negative labels are stored as 65535 (unlabeled)."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.max(initial=-1) > PNG16_MAX:
        raise ValueError("label values above 65534 do not fit a 16-bit PNG")
    q = np.where(lab < 0, PNG16_UNLABELED, lab).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)
    return path


def read_label_map(path) -> np.ndarray:
    """Label map from a 16-bit PNG or a raw int32 grid (``.json`` header alongside).

    Unlabeled pixels come back as -1.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        q = np.array(Image.open(path)).astype(np.int64)
        if q.ndim != 2:
            raise ValueError(f"{path}: label PNG must be single channel")
        q[q == PNG16_UNLABELED] = -1
        return q
    arr, _ = read_raw(path)
    lab = arr.astype(np.int64)
    lab[lab < 0] = -1
    return lab
