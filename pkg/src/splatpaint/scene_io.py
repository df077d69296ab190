"""Persistence: scene-directory parsing (cameras, images, masks, point
clouds), checkpoint serialization, and config files.

Scene directory layout:

    cameras.json                 intrinsics + world-to-camera per frame
    images/frame_0000.png        8-bit RGB
    masks/frame_0000.png         16-bit grayscale object IDs (optional)
    points.ply                   initial point cloud (optional)

Mask semantics: pixel value = object ID, 0 = background, 65535 = ignore.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
from PIL import Image

from .core import Camera, GaussianSet, sh_coeff_count
from .errors import DataError, ValidationError

BACKGROUND_ID = 0
IGNORE_ID = 65535

CHECKPOINT_MAGIC = b"SSPL"
CHECKPOINT_VERSION = 1

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class Frame:
    name: str
    camera: Camera
    image_path: Path
    mask_path: Optional[Path]


@dataclass
class SceneData:
    name: str
    width: int
    height: int
    frames: list
    points: Optional[np.ndarray] = None        # (P,3) float32
    point_colors: Optional[np.ndarray] = None  # (P,3) float32 in [0,1]

    @property
    def has_masks(self) -> bool:
        return any(f.mask_path is not None for f in self.frames)

    def image(self, index: int) -> np.ndarray:
        return load_image(self.frames[index].image_path)

    def mask(self, index: int) -> Optional[np.ndarray]:
        path = self.frames[index].mask_path
        return None if path is None else load_masks(path)


@dataclass
class Checkpoint:
    gaussians: GaussianSet
    classifier_weight: np.ndarray  # (num_classes, 16)
    classifier_bias: np.ndarray    # (num_classes,)
    iterations: int = 0
    seed: int = 0
    config_hash: int = 0

    def __post_init__(self):
        self.classifier_weight = np.ascontiguousarray(self.classifier_weight,
                                                      dtype=np.float32)
        self.classifier_bias = np.ascontiguousarray(self.classifier_bias,
                                                    dtype=np.float32)

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[0]


def load_image(path) -> np.ndarray:
    """8-bit image file to float32 H×W×3 in [0,1]."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    return rgb / np.float32(255.0)


def save_image(path, image: np.ndarray) -> None:
    """Write H×W×3 values in [0,1] as an 8-bit PNG (round(255·clamp))."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected H×W×3 image, got {image.shape}")
    data = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_masks(path) -> np.ndarray:
    """Single-channel ID mask to int32 H×W.  16-bit preferred; 8-bit files
    are widened; multi-channel files are rejected."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.int32)
        elif img.mode == "L":
            arr = np.asarray(img, dtype=np.int32)
        else:
            raise DataError(
                f"{path}: mask must be single-channel, got mode {img.mode}")
    return arr


def save_mask(path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValidationError(f"expected H×W id map, got {ids.shape}")
    if ids.min() < 0 or ids.max() > 65535:
        raise ValidationError("mask IDs must fit in 16 bits")
    Image.fromarray(ids.astype(np.uint16)).save(path)


def _parse_ply_header(handle):
    """Returns (format, vertex count, property list, header line count)."""
    line_no = 0

    def next_line():
        nonlocal line_no
        raw = handle.readline()
        if not raw:
            raise DataError(f"PLY line {line_no + 1}: unexpected end of header")
        line_no += 1
        return raw.decode("latin-1").strip()

    if next_line() != "ply":
        raise DataError("PLY line 1: missing 'ply' magic")
    fmt_parts = next_line().split()
    if (len(fmt_parts) != 3 or fmt_parts[0] != "format"
            or fmt_parts[1] not in ("ascii", "binary_little_endian")):
        raise DataError(f"PLY line {line_no}: unsupported format line")
    fmt = fmt_parts[1]

    count = None
    props = []
    in_vertex = False
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if count is not None:
                break  # later elements are ignored; vertex data comes first
            if len(parts) != 3 or parts[1] != "vertex":
                raise DataError(
                    f"PLY line {line_no}: expected 'element vertex', "
                    f"got {line!r}")
            count = int(parts[2])
            in_vertex = True
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DataError(
                    f"PLY line {line_no}: list properties are not supported "
                    f"in the vertex element")
            if len(parts) != 3 or parts[1] not in PLY_TYPES:
                raise DataError(f"PLY line {line_no}: bad property {line!r}")
            props.append((parts[2], parts[1]))
    if line == "end_header":
        pass
    else:  # hit a second element; consume lines until end_header
        while next_line() != "end_header":
            pass
    if count is None:
        raise DataError("PLY header: no vertex element")
    for axis in ("x", "y", "z"):
        if axis not in [p[0] for p in props]:
            raise DataError(f"PLY header: missing vertex property {axis!r}")
    return fmt, count, props


def load_ply(path):
    """Point cloud positions (float32 P×3) and colors (float32 P×3 in [0,1]
    or None when the file stores no color)."""
    with open(path, "rb") as handle:
        fmt, count, props = _parse_ply_header(handle)
        names = [p[0] for p in props]
        if fmt == "ascii":
            rows = []
            for i in range(count):
                raw = handle.readline()
                if not raw:
                    raise DataError(
                        f"PLY: expected {count} vertex rows, got {i}")
                rows.append(raw.split())
            table = {name: np.array([r[k] for r in rows], dtype=np.float64)
                     for k, (name, _) in enumerate(props)}
        else:
            dtype = np.dtype([(name, "<" + PLY_TYPES[typ])
                              for name, typ in props])
            raw = handle.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise DataError(
                    f"PLY: expected {count * dtype.itemsize} bytes of vertex "
                    f"data, got {len(raw)}")
            rec = np.frombuffer(raw, dtype=dtype)
            table = {name: rec[name].astype(np.float64) for name, _ in props}

    positions = np.stack([table["x"], table["y"], table["z"]],
                         axis=-1).astype(np.float32)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([table["red"], table["green"], table["blue"]],
                          axis=-1).astype(np.float32)
        typ = dict(props)["red"]
        if typ in ("uchar", "uint8"):
            colors /= np.float32(255.0)
    return positions, colors


def save_ply(path, positions: np.ndarray, colors=None,
             binary: bool = False) -> None:
    """Write a point cloud; colors (values in [0,1]) stored as uchar."""
    positions = np.ascontiguousarray(positions, dtype=np.float32)
    n = positions.shape[0]
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.round(255.0 * np.clip(colors, 0.0, 1.0)).astype(np.uint8)
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as handle:
        handle.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if colors is None:
                handle.write(positions.tobytes())
            else:
                dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                  ("red", "u1"), ("green", "u1"),
                                  ("blue", "u1")])
                rec = np.empty(n, dtype=dtype)
                rec["x"], rec["y"], rec["z"] = positions.T
                rec["red"], rec["green"], rec["blue"] = colors.T
                handle.write(rec.tobytes())
        else:
            for i in range(n):
                row = "%.9g %.9g %.9g" % tuple(positions[i])
                if colors is not None:
                    row += " %d %d %d" % tuple(colors[i])
                handle.write((row + "\n").encode("ascii"))


def load_scene(directory) -> SceneData:
    """Parse and validate a scene directory; frames ordered by name."""
    directory = Path(directory)
    cameras_path = directory / "cameras.json"
    if not cameras_path.is_file():
        raise DataError(f"{directory}: missing cameras.json")
    with open(cameras_path) as handle:
        try:
            meta = json.load(handle)
        except json.JSONDecodeError as exc:
            raise DataError(f"{cameras_path}: invalid JSON: {exc}") from exc
    for key in ("width", "height", "frames"):
        if key not in meta:
            raise DataError(f"{cameras_path}: missing key {key!r}")
    width, height = int(meta["width"]), int(meta["height"])

    frames = []
    for entry in sorted(meta["frames"], key=lambda e: e["name"]):
        name = entry["name"]
        w2c = np.array(entry["world_to_camera"],
                       dtype=np.float32).reshape(4, 4)
        camera = Camera(width=width, height=height,
                        fx=float(entry["fx"]), fy=float(entry["fy"]),
                        cx=float(entry["cx"]), cy=float(entry["cy"]),
                        world_to_camera=w2c)
        rot = camera.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-3):
            raise DataError(f"{name}: world_to_camera rotation is not "
                            f"orthonormal")
        image_path = directory / "images" / f"{name}.png"
        if not image_path.is_file():
            raise DataError(f"{name}: missing image {image_path}")
        with Image.open(image_path) as img:
            if img.size != (width, height):
                raise DataError(f"{name}: image {img.size[0]}×{img.size[1]} "
                                f"vs dataset {width}×{height}")
        mask_path = directory / "masks" / f"{name}.png"
        if mask_path.is_file():
            with Image.open(mask_path) as img:
                if img.size != (width, height):
                    raise DataError(
                        f"{name}: mask {img.size[0]}×{img.size[1]} vs image "
                        f"{width}×{height}")
        else:
            mask_path = None
        frames.append(Frame(name=name, camera=camera, image_path=image_path,
                            mask_path=mask_path))
    if not frames:
        raise DataError(f"{directory}: no frames listed in cameras.json")

    points = colors = None
    ply_path = directory / "points.ply"
    if ply_path.is_file():
        points, colors = load_ply(ply_path)
    return SceneData(name=directory.name, width=width, height=height,
                     frames=frames, points=points, point_colors=colors)


def _read_exact(handle, nbytes: int, what: str) -> bytes:
    buf = handle.read(nbytes)
    if len(buf) != nbytes:
        raise DataError(f"truncated checkpoint: expected {nbytes} bytes for "
                        f"{what}, got {len(buf)}")
    return buf


def _write_array(handle, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    handle.write(struct.pack("<Q", arr.size))
    handle.write(arr.tobytes())


def _read_array(handle, expected: int, shape, what: str) -> np.ndarray:
    (count,) = struct.unpack("<Q", _read_exact(handle, 8, f"{what} count"))
    if count != expected:
        raise DataError(f"checkpoint {what}: element count {count}, "
                        f"expected {expected}")
    buf = _read_exact(handle, 4 * count, what)
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    gs = checkpoint.gaussians
    gs.validate()
    with open(path, "wb") as handle:
        handle.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        handle.write(struct.pack("<QII", len(gs), gs.sh_degree,
                                 checkpoint.num_classes))
        handle.write(struct.pack("<QQQ", checkpoint.iterations,
                                 checkpoint.seed, checkpoint.config_hash))
        for arr in (gs.positions, gs.rotations, gs.log_scales,
                    gs.opacity_logits, gs.sh_coeffs, gs.id_features,
                    checkpoint.classifier_weight, checkpoint.classifier_bias):
            _write_array(handle, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        magic, version = struct.unpack("<4sI", _read_exact(handle, 8, "header"))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        if version > CHECKPOINT_VERSION:
            raise DataError(f"{path}: checkpoint version {version} is newer "
                            f"than supported ({CHECKPOINT_VERSION})")
        n, sh_degree, num_classes = struct.unpack(
            "<QII", _read_exact(handle, 16, "dimensions"))
        iterations, seed, config_hash = struct.unpack(
            "<QQQ", _read_exact(handle, 24, "metadata"))
        k = sh_coeff_count(sh_degree)
        gaussians = GaussianSet(
            positions=_read_array(handle, n * 3, (n, 3), "positions"),
            rotations=_read_array(handle, n * 4, (n, 4), "rotations"),
            log_scales=_read_array(handle, n * 3, (n, 3), "log_scales"),
            opacity_logits=_read_array(handle, n, (n,), "opacity_logits"),
            sh_coeffs=_read_array(handle, n * k * 3, (n, k, 3), "sh_coeffs"),
            id_features=_read_array(handle, n * 16, (n, 16), "id_features"),
        )
        weight = _read_array(handle, num_classes * 16, (num_classes, 16),
                             "classifier weight")
        bias = _read_array(handle, num_classes, (num_classes,),
                           "classifier bias")
    return Checkpoint(gaussians=gaussians, classifier_weight=weight,
                      classifier_bias=bias, iterations=iterations, seed=seed,
                      config_hash=config_hash)


def load_config(path) -> dict:
    """TOML config file to a nested dict."""
    try:
        with open(path, "rb") as handle:
            return tomli.load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise DataError(f"{path}: invalid TOML: {exc}") from exc
