"""Binary tensor files and scene-directory ingestion.

File layout (all integers little-endian)::

    offset  size       field
    0       8          magic b"WTRKTNSR"
    8       1          dtype code (0 = f32, 1 = u8)
    9       1          rank (0..4)
    10      4 * rank   dims, uint32
    ...     prod*size  payload, row-major

See ``docs/tensor_format.md``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import (BadMagic, DimMismatch, InvalidConfig, InvalidTracks, MissingFile,
                     ShapeMismatch, UnsupportedDtype)
from .geometry import CameraModel

MAGIC = b"WTRKTNSR"
MAX_RANK = 4
_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_OF = {"float32": 0, "uint8": 1}

SCENE_FILES = ("tracks.wt", "visibility.wt", "depth.wt", "masks.wt", "intrinsics.wt", "config.json")


@dataclass
class TensorFile:
    dtype: str
    dims: tuple
    data: np.ndarray

    @property
    def rank(self):
        return len(self.dims)


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f" and arr.dtype != np.float32:
        raise UnsupportedDtype(f"refusing implicit cast from {arr.dtype}; convert to float32 first")
    if arr.dtype.name not in _CODE_OF:
        raise UnsupportedDtype(f"dtype {arr.dtype} not supported")
    if arr.ndim > MAX_RANK:
        raise DimMismatch(f"rank {arr.ndim} > {MAX_RANK}")
    if any(d < 1 for d in arr.shape):
        raise DimMismatch(f"all dims must be >= 1, got {arr.shape}")
    code = _CODE_OF[arr.dtype.name]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_tensor(buf: bytes) -> TensorFile:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(buf[:8])!r}")
    if len(buf) < 10:
        raise DimMismatch("truncated header")
    code, rank = struct.unpack_from("<BB", buf, 8)
    if code not in _CODES:
        raise UnsupportedDtype(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise DimMismatch(f"rank {rank} > {MAX_RANK}")
    head = 10 + 4 * rank
    if len(buf) < head:
        raise DimMismatch("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 10)
    if any(d < 1 for d in dims):
        raise DimMismatch(f"all dims must be >= 1, got {dims}")
    dtype = _CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - head != expected:
        raise DimMismatch(f"payload has {len(buf) - head} bytes, dims {dims} need {expected}")
    data = np.frombuffer(buf, dtype=dtype, offset=head).reshape(dims).copy()
    return TensorFile(dtype="f32" if code == 0 else "u8", dims=tuple(dims), data=data)


def write_tensor(path, array):
    path = Path(path)
    blob = encode_tensor(array)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_tensor(path) -> TensorFile:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} not found")
    return decode_tensor(path.read_bytes())


# --------------------------------------------------------------------------
# scene bundle
# --------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """Everything the optimizer consumes, in float64 working precision."""

    tracks: np.ndarray          # (N, T, 2) pixel coords
    visible: np.ndarray         # (N, T) bool
    depth: np.ndarray           # (T, H, W) raw depth maps
    masks: np.ndarray           # (T, H, W) bool dynamic-foreground masks
    cam: CameraModel
    config: PipelineConfig = field(default_factory=PipelineConfig)
    track_depth: np.ndarray | None = None  # (N, T); sampled from ``depth`` when absent

    def __post_init__(self):
        self.tracks = np.asarray(self.tracks, dtype=float)
        self.visible = np.asarray(self.visible, dtype=bool)
        self.depth = np.asarray(self.depth, dtype=float)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.track_depth is None:
            self.track_depth = sample_track_depths(self.depth, self.tracks)
        else:
            self.track_depth = np.asarray(self.track_depth, dtype=float)

    @property
    def n_tracks(self):
        return self.tracks.shape[0]

    @property
    def n_frames(self):
        return self.depth.shape[0]

    @property
    def height(self):
        return self.depth.shape[1]

    @property
    def width(self):
        return self.depth.shape[2]

    @property
    def diagonal(self):
        return float(np.hypot(self.height, self.width))

    @property
    def spawn_frame(self):
        return np.argmax(self.visible, axis=1)


def bilinear_sample(image, uv):
    """Sample ``image`` (H, W) at float pixel coords ``uv`` (..., 2), edge-clamped."""
    H, W = image.shape
    u = np.clip(np.asarray(uv[..., 0], dtype=float), 0, W - 1)
    v = np.clip(np.asarray(uv[..., 1], dtype=float), 0, H - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), W - 2) if W > 1 else np.zeros(u.shape, np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), H - 2) if H > 1 else np.zeros(v.shape, np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = u - u0
    b = v - v0
    return ((1 - a) * (1 - b) * image[v0, u0] + a * (1 - b) * image[v0, u1]
            + (1 - a) * b * image[v1, u0] + a * b * image[v1, u1])


def sample_track_depths(depth, tracks):
    T = depth.shape[0]
    out = np.empty(tracks.shape[:2])
    for t in range(T):
        out[:, t] = bilinear_sample(depth[t], tracks[:, t])
    return out


def _load(directory, name, dtype, rank):
    tf = read_tensor(directory / name)
    if tf.dtype != dtype:
        raise ShapeMismatch(f"{name}: expected {dtype}, got {tf.dtype}")
    if tf.rank != rank:
        raise ShapeMismatch(f"{name}: expected rank {rank}, got dims {tf.dims}")
    return tf.data


def load_scene(directory) -> SceneBundle:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"{directory} is not a directory")
    for name in SCENE_FILES:
        if not (directory / name).exists():
            raise MissingFile(f"{directory / name} not found")
    cfg = PipelineConfig.from_json(directory / "config.json")
    tracks = _load(directory, "tracks.wt", "f32", 3)
    vis = _load(directory, "visibility.wt", "u8", 2)
    depth = _load(directory, "depth.wt", "f32", 3)
    masks = _load(directory, "masks.wt", "u8", 3)
    K = _load(directory, "intrinsics.wt", "f32", 2)

    N, T, two = tracks.shape
    if two != 2:
        raise ShapeMismatch(f"tracks.wt last dim must be 2, got {two}")
    if vis.shape != (N, T):
        raise ShapeMismatch(f"visibility.wt {vis.shape} != {(N, T)}")
    if depth.shape[0] != T:
        raise ShapeMismatch(f"depth.wt has {depth.shape[0]} frames, tracks have {T}")
    if masks.shape != depth.shape:
        raise ShapeMismatch(f"masks.wt {masks.shape} != depth.wt {depth.shape}")
    if K.shape != (3, 3):
        raise ShapeMismatch(f"intrinsics.wt must be 3x3, got {K.shape}")
    if np.any(vis > 1) or np.any(masks > 1):
        raise InvalidTracks("visibility and mask values must be 0 or 1")
    if not np.all(np.isfinite(tracks)):
        raise InvalidTracks("tracks contain non-finite coordinates")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise InvalidTracks("depth maps must be finite and non-negative")
    if not np.all(np.isfinite(K)) or not (K[0, 0] > 0 and K[1, 1] > 0):
        raise InvalidConfig("intrinsics must have positive focal lengths")
    H, W = depth.shape[1:]
    visible = vis.astype(bool)
    if N and not visible.any(axis=1).all():
        bad = int(np.flatnonzero(~visible.any(axis=1))[0])
        raise InvalidTracks(f"track {bad} is never visible")
    if N:
        p = tracks[visible]
        if (p[:, 0] < -0.5).any() or (p[:, 0] > W - 0.5).any() or (p[:, 1] < -0.5).any() or (p[:, 1] > H - 0.5).any():
            raise InvalidTracks("visible track position outside the image")

    track_depth = None
    if (directory / "track_depth.wt").exists():
        track_depth = _load(directory, "track_depth.wt", "f32", 2)
        if track_depth.shape != (N, T):
            raise ShapeMismatch(f"track_depth.wt {track_depth.shape} != {(N, T)}")
        if not np.all(np.isfinite(track_depth)):
            raise InvalidTracks("track_depth.wt contains non-finite values")
    return SceneBundle(tracks=tracks, visible=visible, depth=depth, masks=masks.astype(bool),
                       cam=CameraModel.from_matrix(K), config=cfg, track_depth=track_depth)


def write_scene(directory, scene: SceneBundle, config_overrides=None, track_depth=True):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "tracks.wt", scene.tracks.astype(np.float32))
    write_tensor(directory / "visibility.wt", scene.visible.astype(np.uint8))
    write_tensor(directory / "depth.wt", scene.depth.astype(np.float32))
    write_tensor(directory / "masks.wt", scene.masks.astype(np.uint8))
    write_tensor(directory / "intrinsics.wt", scene.cam.K.astype(np.float32))
    if track_depth:
        write_tensor(directory / "track_depth.wt", scene.track_depth.astype(np.float32))
    data = dict(config_overrides or {})
    with open(directory / "config.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
