"""PLY reading/writing for Gaussian scenes and plain point clouds.

Gaussian populations use a 3DGS-compatible binary-little-endian layout with
per-vertex properties, in order::

    x y z rot_0..rot_3 scale_0..scale_2 opacity f_dc_0..f_dc_2 f_rest_0..f_rest_44

All stored values are the raw optimizable parameters (quaternion not yet
normalized, log scales, opacity logit). ``f_rest`` is channel-major: the 15
higher-order coefficients of R, then of G, then of B.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .scene import SH_COEFFS, Scene
from ._util import atomic_write_bytes

_PLY_TYPES = {
    "char": "i1",
    "uchar": "u1",
    "short": "i2",
    "ushort": "u2",
    "int": "i4",
    "uint": "u4",
    "float": "f4",
    "double": "f8",
    "int8": "i1",
    "uint8": "u1",
    "int16": "i2",
    "uint16": "u2",
    "int32": "i4",
    "uint32": "u4",
    "float32": "f4",
    "float64": "f8",
}

GAUSSIAN_PROPERTIES = (
    ["x", "y", "z"]
    + [f"rot_{i}" for i in range(4)]
    + [f"scale_{i}" for i in range(3)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
)


def _parse_header(stream) -> tuple[str, int, list[tuple[str, str]]]:
    """Returns (format, vertex_count, [(name, numpy dtype)]) for element vertex."""
    magic = stream.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file (missing 'ply' magic)")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = stream.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise ValueError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise ValueError(f"unsupported PLY property type {tokens[1]!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("binary_little_endian", "ascii"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise ValueError("PLY has no vertex element")
    return fmt, count, props


def _read_vertices(path) -> np.ndarray:
    with open(path, "rb") as f:
        fmt, count, props = _parse_header(f)
        dtype = np.dtype([(name, "<" + dt) for name, dt in props])
        if fmt == "binary_little_endian":
            data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype, count=count)
        else:
            text = f.read().decode("ascii")
            if count == 0:
                flat = np.zeros((0, len(props)))
            else:
                flat = np.loadtxt(io.StringIO(text), ndmin=2)
            if flat.shape[0] != count or flat.shape[1] != len(props):
                raise ValueError("ascii PLY vertex data does not match header")
            data = np.zeros(count, dtype=dtype)
            for i, (name, _) in enumerate(props):
                data[name] = flat[:, i]
    return data


def save_gaussian_ply(scene: Scene, path) -> None:
    """Write the scene's raw parameters as a binary PLY (atomic)."""
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in GAUSSIAN_PROPERTIES]
    header.append("end_header")
    rest = scene.sh_coeffs[:, 1:, :]  # (N, 15, 3)
    rest_cm = np.transpose(rest, (0, 2, 1)).reshape(n, 45)  # channel-major
    table = np.concatenate(
        [
            scene.mu,
            scene.rot,
            scene.log_scale,
            scene.opacity_logit[:, None],
            scene.sh_coeffs[:, 0, :],
            rest_cm,
        ],
        axis=1,
    ).astype("<f4")
    payload = ("\n".join(header) + "\n").encode("ascii") + table.tobytes()
    atomic_write_bytes(path, payload)


def load_gaussian_ply(path, extent: float = 1.0, active_sh_degree: int = 0) -> Scene:
    """Read a Gaussian PLY written by :func:`save_gaussian_ply` (or 3DGS-style)."""
    data = _read_vertices(path)
    names = set(data.dtype.names or ())
    missing = [p for p in GAUSSIAN_PROPERTIES if p not in names]
    if missing:
        raise ValueError(f"PLY lacks Gaussian properties (first missing: {missing[0]})")
    n = data.shape[0]

    def cols(keys):
        return np.stack([data[k].astype(np.float32) for k in keys], axis=1)

    sh = np.zeros((n, SH_COEFFS, 3), dtype=np.float32)
    sh[:, 0, :] = cols([f"f_dc_{i}" for i in range(3)])
    rest = cols([f"f_rest_{i}" for i in range(45)]).reshape(n, 3, 15)
    sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    return Scene(
        mu=cols(["x", "y", "z"]),
        rot=cols([f"rot_{i}" for i in range(4)]),
        log_scale=cols([f"scale_{i}" for i in range(3)]),
        opacity_logit=data["opacity"].astype(np.float32),
        sh_coeffs=sh,
        active_sh_degree=active_sh_degree,
        extent=extent,
    )


def save_point_ply(points: np.ndarray, colors: np.ndarray, path) -> None:
    """Write a point cloud (positions float32, colors in [0,1] stored as uint8)."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    rgb8 = np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255.0, 0, 255)
    rgb8 = np.round(rgb8).astype(np.uint8)
    if rgb8.shape[0] != points.shape[0]:
        raise ValueError("points and colors must have equal length")
    n = points.shape[0]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    dtype = np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    )
    rec = np.zeros(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["red"], rec["green"], rec["blue"] = rgb8[:, 0], rgb8[:, 1], rgb8[:, 2]
    atomic_write_bytes(path, ("\n".join(header) + "\n").encode("ascii") + rec.tobytes())


def load_point_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read positions (N,3 float64) and colors (N,3 float in [0,1]).

    Missing color properties default to mid-gray.
    """
    data = _read_vertices(path)
    names = set(data.dtype.names or ())
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"point PLY lacks property {axis!r}")
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    n = pts.shape[0]
    if {"red", "green", "blue"} <= names:
        rgb = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float64)
        if rgb.max(initial=0.0) > 1.0:
            rgb = rgb / 255.0
    else:
        rgb = np.full((n, 3), 0.5)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite positions")
    return pts, np.clip(rgb, 0.0, 1.0)


def ply_paths_equal(a, b) -> bool:
    """Bitwise file comparison helper used by determinism checks."""
    return Path(a).read_bytes() == Path(b).read_bytes()
