"""Synthetic point-set scenes with exact ground truth.

A scene is a set of world points (static background plus rigid or deforming
objects) seen by a moving pinhole camera. The world frame is the first
camera's frame, so the first ground-truth pose is the identity.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .errors import EmptyScene, InvalidConfig
from .geometry import (CameraModel, quat_to_rotmat, rotmat_to_quat, so3_exp)
from .tensorio import SceneBundle, bilinear_sample, write_scene, write_tensor

LABEL_STATIC = 0
LABEL_DYNAMIC = 1
LABEL_HIDDEN = 2


@dataclass
class ObjectSpec:
    kind: str = "rigid"                  # rigid | deforming
    n_points: int = 50
    center_px: tuple = (0.7, 0.5)        # spawn-frame center, fraction of (W, H)
    center_depth: float = 3.0
    radius: float = 0.3
    velocity: tuple = (0.02, 0.0, 0.0)   # m / frame, world
    angular: tuple = (0.0, 0.0, 0.0)     # rad / frame about the object center
    deform: float = 0.2                  # relative amplitude for kind="deforming"
    hidden: bool = False                 # moves but left out of the masks


@dataclass
class SynthConfig:
    n_frames: int = 20
    height: int = 96
    width: int = 128
    focal: float = 100.0
    camera: str = "orbit"                # orbit | dolly | random-smooth
    camera_amount: float = 1.0
    n_static: int = 500
    static_layout: str = "random"        # random | dense
    dense_spacing: float = 2.0
    depth_range: tuple = (2.0, 6.0)
    objects: list = field(default_factory=list)
    mask_radius: float = 1.5
    track_sigma: float = 0.0
    depth_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_step: float = 0.1            # fraction of the image diagonal per frame
    seed: int = 0

    def validate(self):
        if self.n_frames < 1 or self.height < 2 or self.width < 2:
            raise InvalidConfig("need n_frames >= 1 and an image of at least 2x2")
        if self.n_static < 0 or any(o.n_points < 0 for o in self.objects):
            raise InvalidConfig("point counts must be >= 0")
        if self.camera not in ("orbit", "dolly", "random-smooth"):
            raise InvalidConfig(f"unknown camera path {self.camera!r}")
        if self.static_layout not in ("random", "dense"):
            raise InvalidConfig(f"unknown static layout {self.static_layout!r}")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvalidConfig("outlier_fraction must be in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        objs = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in data.pop("objects", [])]
        for key in ("depth_range",):
            if key in data:
                data[key] = tuple(data[key])
        return cls(objects=objs, **data).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    quats: np.ndarray        # (T, 4) world-to-camera
    trans: np.ndarray        # (T, 3)
    world: np.ndarray        # (N, T, 3)
    labels: np.ndarray       # (N,) LABEL_*
    outliers: np.ndarray     # (N,) bool
    tracks: np.ndarray       # (N, T, 2) clean projections
    visible: np.ndarray      # (N, T) bool
    track_depth: np.ndarray  # (N, T) clean camera depths
    depth: np.ndarray        # (T, H, W) clean depth maps
    scene_scale: float

    @property
    def cam_points(self):
        R = quat_to_rotmat(self.quats)
        return np.einsum("tij,ntj->nti", R, self.world) + self.trans[None]


# --------------------------------------------------------------------------
# camera paths
# --------------------------------------------------------------------------

def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def camera_path(cfg: SynthConfig, rng):
    """World-to-camera (quats, trans) with the first pose at the identity."""
    T = cfg.n_frames
    u = np.linspace(0.0, 1.0, T)
    amt = cfg.camera_amount
    Rcw = np.empty((T, 3, 3))   # camera-to-world rotations
    C = np.empty((T, 3))        # camera centers
    if cfg.camera == "orbit":
        target = np.array([0.0, 0.0, np.mean(cfg.depth_range)])
        for k in range(T):
            R = _rot_y(0.35 * amt * u[k]) @ _rot_x(0.05 * amt * np.sin(np.pi * u[k]))
            Rcw[k] = R
            C[k] = target - R @ np.array([0.0, 0.0, target[2]])
    elif cfg.camera == "dolly":
        for k in range(T):
            Rcw[k] = _rot_y(0.08 * amt * u[k])
            C[k] = np.array([0.1 * amt * u[k], 0.0, 0.6 * amt * u[k]])
    else:
        freq = rng.uniform(0.5, 1.5, size=(2, 3))
        phase = rng.uniform(0, 2 * np.pi, size=(2, 3))
        for k in range(T):
            w = 0.08 * amt * (np.sin(2 * np.pi * freq[0] * u[k] + phase[0]) - np.sin(phase[0]))
            Rcw[k] = quat_to_rotmat(so3_exp(w))
            C[k] = 0.4 * amt * (np.sin(2 * np.pi * freq[1] * u[k] + phase[1]) - np.sin(phase[1]))
    # express everything relative to the first camera
    R0, C0 = Rcw[0].copy(), C[0].copy()
    Rcw = np.einsum("ji,tjk->tik", R0, Rcw)
    C = (C - C0) @ R0
    Rwc = np.transpose(Rcw, (0, 2, 1))
    t = -np.einsum("tij,tj->ti", Rwc, C)
    q = rotmat_to_quat(Rwc)
    t[0] = 0.0
    q[0] = [1.0, 0.0, 0.0, 0.0]
    return q, t


# --------------------------------------------------------------------------
# scene content
# --------------------------------------------------------------------------

def _project(R, t, cam, X):
    Xc = np.einsum("tij,ntj->nti", R, X) + t[None]
    z = Xc[..., 2]
    zs = np.where(z > 1e-6, z, 1e-6)
    uv = np.stack([cam.fx * Xc[..., 0] / zs + cam.cx, cam.fy * Xc[..., 1] / zs + cam.cy], axis=-1)
    return uv, z


def _lift(cam, uv, z):
    return cam.rays(uv) * np.asarray(z)[..., None]


def _object_world(spec: ObjectSpec, cam, cfg, rng):
    W, H, T = cfg.width, cfg.height, cfg.n_frames
    center_uv = np.array([spec.center_px[0] * (W - 1), spec.center_px[1] * (H - 1)])
    c0 = _lift(cam, center_uv, spec.center_depth)
    d = rng.normal(size=(4 * spec.n_points + 8, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    local = d * spec.radius * rng.uniform(0.3, 1.0, size=(len(d), 1)) ** (1 / 3)
    steps = np.arange(T)
    centers = c0 + np.outer(steps, np.asarray(spec.velocity, dtype=float))
    R = quat_to_rotmat(so3_exp(np.outer(steps, np.asarray(spec.angular, dtype=float))))
    shaped = np.repeat(local[:, None, :], T, axis=1)
    if spec.kind == "deforming":
        s = 1.0 + spec.deform * np.sin(2 * np.pi * steps / max(T, 2))
        shaped = shaped * np.stack([s, 1.0 / s, np.ones(T)], axis=-1)[None]
    elif spec.kind != "rigid":
        raise InvalidConfig(f"unknown object kind {spec.kind!r}")
    return np.einsum("tij,ntj->nti", R, shaped) + centers[None]


def _static_world(cfg, cam, rng, n_want):
    W, H = cfg.width, cfg.height
    lo, hi = cfg.depth_range
    if cfg.static_layout == "dense":
        sp = cfg.dense_spacing
        xs = np.arange(sp / 2, W - 0.5, sp)
        ys = np.arange(sp / 2, H - 0.5, sp)
        gx, gy = np.meshgrid(xs, ys)
        uv = np.stack([gx.ravel(), gy.ravel()], axis=1)
        # smooth surface: gentle slope plus a low-frequency bump
        z = 0.5 * (lo + hi) + 0.3 * np.sin(2 * np.pi * uv[:, 0] / W) + 0.2 * (uv[:, 1] / H - 0.5)
    else:
        m = 3 * n_want + 16
        uv = np.stack([rng.uniform(2, W - 3, m), rng.uniform(2, H - 3, m)], axis=1)
        z = rng.uniform(lo, hi, m)
    return _lift(cam, uv, z)


def _visibility(uv, z, W, H):
    """Out-of-frame, behind-camera, and 0.5 px z-buffer occlusion."""
    N, T = z.shape
    vis = ((z > 1e-3) & (uv[..., 0] >= -0.5) & (uv[..., 0] <= W - 0.5)
           & (uv[..., 1] >= -0.5) & (uv[..., 1] <= H - 0.5))
    for t in range(T):
        idx = np.flatnonzero(vis[:, t])
        if len(idx) < 2:
            continue
        pairs = cKDTree(uv[idx, t]).query_pairs(0.5, output_type="ndarray")
        if len(pairs):
            a, b = idx[pairs[:, 0]], idx[pairs[:, 1]]
            far = np.where(z[a, t] > z[b, t], a, b)
            vis[far, t] = False
    return vis


def render_depth(uv, z, visible, height, width, fallback=1.0):
    """Nearest-pixel splat of visible points (closest wins), nearest-filled."""
    T = z.shape[1]
    out = np.empty((T, height, width))
    for t in range(T):
        sel = visible[:, t]
        img = np.full((height, width), np.inf)
        if sel.any():
            col = np.clip(np.round(uv[sel, t, 0]).astype(int), 0, width - 1)
            row = np.clip(np.round(uv[sel, t, 1]).astype(int), 0, height - 1)
            np.minimum.at(img, (row, col), z[sel, t])
        empty = ~np.isfinite(img)
        if empty.all():
            out[t] = fallback
            continue
        if empty.any():
            _, (ri, ci) = ndimage.distance_transform_edt(empty, return_indices=True)
            img = img[ri, ci]
        out[t] = img
    return out


def _masks(uv, in_mask, visible_any, T, H, W, radius):
    masks = np.zeros((T, H, W), dtype=bool)
    r = int(np.ceil(radius))
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d)
    for t in range(T):
        pts = uv[in_mask, t]
        for dxx, dyy in zip(dx.ravel(), dy.ravel()):
            col = np.round(pts[:, 0]).astype(int) + dxx
            row = np.round(pts[:, 1]).astype(int) + dyy
            ok = ((col - pts[:, 0]) ** 2 + (row - pts[:, 1]) ** 2 <= radius ** 2)
            ok &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
            masks[t, row[ok], col[ok]] = True
    return masks


def generate(cfg: SynthConfig):
    """Build ``(SceneBundle, GroundTruth)`` in float64; noise/outliers via :func:`perturb`."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    T, H, W = cfg.n_frames, cfg.height, cfg.width
    cam = CameraModel(cfg.focal, cfg.focal, (W - 1) / 2.0, (H - 1) / 2.0)
    q, t = camera_path(cfg, rng)
    R = quat_to_rotmat(q)

    obj_world, obj_labels = [], []
    for spec in cfg.objects:
        X = _object_world(spec, cam, cfg, rng)
        obj_world.append(X)
        obj_labels.append(np.full(len(X), LABEL_HIDDEN if spec.hidden else LABEL_DYNAMIC))
    Xo = np.concatenate(obj_world) if obj_world else np.zeros((0, T, 3))
    lo = np.concatenate(obj_labels) if obj_labels else np.zeros(0, int)

    # static candidates, rejected where a masked object covers them
    Xs = _static_world(cfg, cam, rng, cfg.n_static)
    Xs = np.repeat(Xs[:, None, :], T, axis=1)
    if len(Xs) and (lo == LABEL_DYNAMIC).any():
        uvs, _ = _project(R, t, cam, Xs)
        uvo, zo = _project(R, t, cam, Xo[lo == LABEL_DYNAMIC])
        margin = cfg.mask_radius + 2.0
        bad = np.zeros(len(Xs), dtype=bool)
        for k in range(T):
            front = zo[:, k] > 1e-3
            if not front.any():
                continue
            lo_uv = uvo[front, k].min(axis=0) - margin
            hi_uv = uvo[front, k].max(axis=0) + margin
            bad |= np.all((uvs[:, k] >= lo_uv) & (uvs[:, k] <= hi_uv), axis=1)
        Xs = Xs[~bad]

    X = np.concatenate([Xs, Xo])
    labels = np.concatenate([np.zeros(len(Xs), int), lo])
    uv, z = _project(R, t, cam, X)
    vis = _visibility(uv, z, W, H)
    seen = vis.any(axis=1)

    # take the requested number of visible points of each group, in order
    keep = np.zeros(len(X), dtype=bool)
    static_idx = np.flatnonzero(seen & (labels == LABEL_STATIC))
    keep[static_idx[:cfg.n_static]] = True
    start = len(Xs)
    for spec, Xk in zip(cfg.objects, obj_world):
        idx = start + np.flatnonzero(seen[start:start + len(Xk)])
        keep[idx[:spec.n_points]] = True
        start += len(Xk)
    if not keep.any():
        raise EmptyScene("no point is visible in any frame")
    X, labels = X[keep], labels[keep]
    # visibility must be recomputed: dropped points no longer occlude
    uv, z = _project(R, t, cam, X)
    vis = _visibility(uv, z, W, H)
    seen = vis.any(axis=1)
    X, labels, uv, z, vis = X[seen], labels[seen], uv[seen], z[seen], vis[seen]

    depth = render_depth(uv, z, vis, H, W, fallback=float(np.mean(cfg.depth_range)))
    masks = _masks(uv, labels == LABEL_DYNAMIC, vis.any(axis=1), T, H, W, cfg.mask_radius)
    s0 = (labels == LABEL_STATIC) & vis[:, 0]
    scene_scale = float(np.median(z[s0, 0])) if s0.any() else float(np.median(z[vis]))

    pcfg = PipelineConfig()
    scene = SceneBundle(tracks=uv.copy(), visible=vis.copy(), depth=depth.copy(), masks=masks,
                        cam=cam, config=pcfg, track_depth=z.copy())
    gt = GroundTruth(quats=q, trans=t, world=X, labels=labels, outliers=np.zeros(len(X), bool),
                     tracks=uv, visible=vis, track_depth=z, depth=depth, scene_scale=scene_scale)
    if cfg.track_sigma or cfg.depth_sigma or cfg.outlier_fraction:
        scene, out = perturb(scene, cfg.track_sigma, cfg.depth_sigma, cfg.outlier_fraction,
                             seed=cfg.seed + 1, outlier_step=cfg.outlier_step)
        gt.outliers = out
    return scene, gt


def perturb(scene: SceneBundle, track_sigma=0.0, depth_sigma=0.0, outlier_fraction=0.0,
            seed=0, outlier_step=0.1):
    """Noisy copy of ``scene`` and the boolean outlier mask.

    Outlier tracks are replaced by reflected random walks (step
    ``outlier_step * diagonal`` per frame, uniform random start); their depths
    are read from the input depth maps. Gaussian pixel noise is then added to
    every track and relative Gaussian noise to every depth value.
    """
    rng = np.random.default_rng(seed)
    N, T = scene.visible.shape
    H, W = scene.height, scene.width
    tracks = scene.tracks.copy()
    track_depth = scene.track_depth.copy()
    depth = scene.depth.copy()
    outliers = np.zeros(N, dtype=bool)
    n_out = int(round(outlier_fraction * N))
    if n_out:
        idx = np.sort(rng.choice(N, n_out, replace=False))
        outliers[idx] = True
        step = outlier_step * scene.diagonal
        lo = np.array([0.0, 0.0])
        hi = np.array([W - 1.0, H - 1.0])
        for i in idx:
            p = rng.uniform(lo, hi)
            walk = np.empty((T, 2))
            for k in range(T):
                if k:
                    ang = rng.uniform(0, 2 * np.pi)
                    p = p + step * np.array([np.cos(ang), np.sin(ang)])
                    p = np.where(p < lo, 2 * lo - p, p)
                    p = np.where(p > hi, 2 * hi - p, p)
                    p = np.clip(p, lo, hi)
                walk[k] = p
            tracks[i] = walk
            for k in range(T):
                track_depth[i, k] = bilinear_sample(depth[k], walk[k])
    if track_sigma:
        tracks = tracks + rng.normal(0.0, track_sigma, size=tracks.shape)
        tracks[..., 0] = np.clip(tracks[..., 0], -0.5, W - 0.5)
        tracks[..., 1] = np.clip(tracks[..., 1], -0.5, H - 0.5)
    if depth_sigma:
        track_depth = track_depth * (1.0 + rng.normal(0.0, depth_sigma, size=track_depth.shape))
        depth = depth * (1.0 + rng.normal(0.0, depth_sigma, size=depth.shape))
        track_depth = np.maximum(track_depth, 1e-3)
        depth = np.maximum(depth, 1e-3)
    out = SceneBundle(tracks=tracks, visible=scene.visible.copy(), depth=depth,
                      masks=scene.masks.copy(), cam=scene.cam, config=scene.config,
                      track_depth=track_depth)
    return out, outliers


def write_synth(directory, scene: SceneBundle, gt: GroundTruth, cfg: SynthConfig | None = None,
                config_overrides=None):
    """Write the scene directory plus ground-truth sidecar files."""
    directory = Path(directory)
    write_scene(directory, scene, config_overrides=config_overrides)
    poses = [np.hstack([quat_to_rotmat(q), tr[:, None]]).ravel().tolist()
             for q, tr in zip(gt.quats, gt.trans)]
    with open(directory / "gt_poses.json", "w") as fh:
        json.dump({"convention": "world_to_camera", "layout": "3x4 row-major", "poses": poses}, fh)
    write_tensor(directory / "gt_traj.wt", gt.world.astype(np.float32))
    write_tensor(directory / "gt_tracks.wt", gt.tracks.astype(np.float32))
    write_tensor(directory / "gt_visibility.wt", gt.visible.astype(np.uint8))
    write_tensor(directory / "gt_depth.wt", gt.depth.astype(np.float32))
    write_tensor(directory / "labels.wt", gt.labels.astype(np.uint8))
    write_tensor(directory / "outliers.wt", gt.outliers.astype(np.uint8))
    meta = {"scene_scale": gt.scene_scale, "n_points": int(len(gt.labels)),
            "n_static": int((gt.labels == LABEL_STATIC).sum()),
            "n_dynamic": int((gt.labels == LABEL_DYNAMIC).sum()),
            "n_hidden": int((gt.labels == LABEL_HIDDEN).sum()),
            "n_outliers": int(gt.outliers.sum()),
            "synth_config": cfg.to_dict() if cfg is not None else None}
    with open(directory / "gt_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
