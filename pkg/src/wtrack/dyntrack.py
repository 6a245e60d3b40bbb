"""Stage 3 and its helpers.

* free per-frame world positions for dynamic points, fitted with reprojection
  and depth terms at visible frames plus rigidity (ARAP over a fixed KNN
  graph) and temporal smoothness;
* static-track downsampling by quantized spawn position and inverse-distance
  upsampling of the coarse solution;
* propagation of per-point depth scale ratios into dense aligned depth maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .config import PipelineConfig, SolverConfig
from .errors import NoVisibleCoarseNeighbors, NoVisibleFrames, ZeroRawDepth
from .geometry import CameraModel
from .kernels import arap_terms
from .refine import Observations, backproject_world
from .solver import ParamBlocks, SolveResult, minimize
from .tensorio import bilinear_sample
from .trackset import TrackSet2D


@dataclass
class DynamicTrackSet:
    positions: np.ndarray    # (N, T, 3) world
    visible: np.ndarray      # (N, T) bool
    knn: np.ndarray          # (N, r) neighbor indices

    def copy(self):
        return DynamicTrackSet(self.positions.copy(), self.visible.copy(), self.knn.copy())


def build_knn(points, r):
    """``r`` nearest other points per point (ties: lower index first).

    With fewer than ``r + 1`` points every other point is a neighbor.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    r = min(int(r), max(n - 1, 0))
    if r == 0:
        return np.zeros((n, 0), dtype=np.int64)
    tree = cKDTree(points)
    # a few spare candidates so ties at the cut-off can be ordered by index
    k = min(n, r + 1 + 4)
    dist, idx = tree.query(points, k=k)
    out = np.empty((n, r), dtype=np.int64)
    for i in range(n):
        d, j = dist[i], idx[i]
        keep = j != i
        d, j = d[keep], j[keep]
        order = np.lexsort((j, d))
        out[i] = j[order[:r]]
    return out


def interpolate_invisible(X, visible):
    """Fill invisible frames linearly between visible ones, constant at the ends."""
    X = X.copy()
    T = X.shape[1]
    steps = np.arange(T)
    for i in range(X.shape[0]):
        v = np.flatnonzero(visible[i])
        if len(v) == T:
            continue
        if len(v) == 0:
            raise NoVisibleFrames(i)
        for c in range(3):
            X[i, :, c] = np.interp(steps, v, X[i, v, c])
    return X


def init_dynamic(tracks: TrackSet2D, depths, quats, trans, cam: CameraModel, r) -> DynamicTrackSet:
    """Back-project visible observations; interpolate the rest; spawn-frame KNN graph."""
    depths = np.asarray(depths, dtype=float)
    N, T = tracks.visible.shape
    ok = tracks.visible & (depths > 0)
    if N and not ok.any(axis=1).all():
        raise NoVisibleFrames(int(np.flatnonzero(~ok.any(axis=1))[0]))
    X = np.zeros((N, T, 3))
    ii, tt = np.nonzero(ok)
    X[ii, tt] = backproject_world(quats, trans, cam, tracks.positions[ii, tt], depths[ii, tt], tt)
    X = interpolate_invisible(X, ok)
    spawn = np.argmax(ok, axis=1)
    knn = build_knn(X[np.arange(N), spawn], r)
    return DynamicTrackSet(X, tracks.visible.copy(), knn)


def loss_arap(dyn: DynamicTrackSet):
    return float(arap_terms(dyn.positions, dyn.knn)[0])


def ts_terms(X):
    d = X[:, 1:] - X[:, :-1]
    g = np.zeros_like(X)
    g[:, 1:] += 2.0 * d
    g[:, :-1] -= 2.0 * d
    return float(np.sum(d * d)), g


def loss_ts(dyn: DynamicTrackSet):
    return ts_terms(dyn.positions)[0]


class DynamicObjective:
    """Weighted Stage-3 objective over block ``traj`` (N, T, 3); poses fixed."""

    def __init__(self, obs: Observations, cam: CameraModel, knn, w_ba=1.0, w_dc=1.0,
                 w_arap=100.0, w_ts=10.0, clamp=1e3):
        self.obs = obs
        self.cam = cam
        self.knn = np.asarray(knn, dtype=np.int64)
        self.w_ba, self.w_dc, self.w_arap, self.w_ts = w_ba, w_dc, w_arap, w_ts
        self.clamp = clamp
        self.last_diag = None
        n = len(self.knn)
        deg = np.full(n, self.knn.shape[1], dtype=float)
        if self.knn.size:
            deg += np.bincount(self.knn.ravel(), minlength=n)
        self._reg_diag = 4.0 * w_arap * deg + 4.0 * w_ts

    def __call__(self, params: ParamBlocks):
        X = params.points["traj"]
        o = self.obs
        loss, gX, gpose, dX, _ = o.terms(params.quats, params.trans, X[o.i, o.t], self.cam,
                                         self.w_ba, self.w_dc, self.clamp)
        grad = np.zeros_like(X)
        grad[o.i, o.t] = gX
        diag = np.zeros_like(X)
        diag[o.i, o.t] = dX
        if self.w_arap:
            la, ga = arap_terms(X, self.knn)
            loss += self.w_arap * la
            grad += self.w_arap * ga
        if self.w_ts:
            lt, gt = ts_terms(X)
            loss += self.w_ts * lt
            grad += self.w_ts * gt
        diag += self._reg_diag[:, None, None]
        self.last_diag = (np.zeros_like(gpose), {"traj": diag})
        return loss, gpose, {"traj": grad}

    def precond(self, params):
        return self.last_diag


@dataclass
class DynamicResult:
    dyn: DynamicTrackSet
    solve: SolveResult
    losses: dict


def optimize_dynamic(dyn: DynamicTrackSet, tracks: TrackSet2D, depths, quats, trans,
                     cam: CameraModel, cfg: PipelineConfig, diagonal,
                     solver_cfg: SolverConfig | None = None, callback=None) -> DynamicResult:
    obs = Observations(tracks, depths)
    obj = DynamicObjective(obs, cam, dyn.knn, cfg.lambda_ba, cfg.lambda_dc, cfg.lambda_arap,
                           cfg.lambda_ts, 10.0 * diagonal)
    init = ParamBlocks(quats, trans, {"traj": dyn.positions},
                       frozen_poses=np.ones(len(quats), dtype=bool))
    res = minimize(obj, init, solver_cfg or cfg.solver, precond=obj.precond, callback=callback)
    out = DynamicTrackSet(res.params.points["traj"], dyn.visible.copy(), dyn.knn.copy())
    parts = DynamicObjective(obs, cam, dyn.knn, 1.0, 0.0, 0.0, 0.0, 10.0 * diagonal)
    ba = parts(res.params)[0]
    parts = DynamicObjective(obs, cam, dyn.knn, 0.0, 1.0, 0.0, 0.0, 10.0 * diagonal)
    dc = parts(res.params)[0]
    losses = {"ba": ba, "dc": dc, "arap": loss_arap(out), "ts": loss_ts(out), "total": res.loss}
    return DynamicResult(out, res, losses)


# --------------------------------------------------------------------------
# speed-up: quantized downsampling and inverse-distance upsampling
# --------------------------------------------------------------------------

@dataclass
class DownsampleIndex:
    retained: np.ndarray     # (Nc,) indices into the full set, ascending
    group: np.ndarray        # (N,) position in ``retained`` of each track's key representative
    keys: np.ndarray         # (N, 3) (spawn frame, qx, qy)


def downsample_keys(tracks: TrackSet2D, varpi):
    p = tracks.spawn_positions()
    qx = np.round(p[:, 0] / varpi).astype(np.int64)
    qy = np.round(p[:, 1] / varpi).astype(np.int64)
    return np.stack([tracks.spawn_frame, qx, qy], axis=1)


def downsample_static(tracks: TrackSet2D, varpi):
    """First track (lowest index) per unique (spawn frame, round(x/varpi), round(y/varpi))."""
    keys = downsample_keys(tracks, varpi)
    if len(keys) == 0:
        z = np.zeros(0, dtype=np.int64)
        return tracks.subset(z), DownsampleIndex(z, z, keys)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    retained = first[order]
    index = DownsampleIndex(retained, rank[inverse], keys)
    return tracks.subset(retained), index


def camera_points(cam: CameraModel, uv, depth):
    return cam.rays(uv) * np.asarray(depth, dtype=float)[..., None]


def upsample_weights_idw(query, coarse_tracks: TrackSet2D, coarse_depths, frames, cam, r, eps):
    """Neighbors and normalized inverse-distance weights per query point.

    ``query`` holds camera-centric 3D points (M, 3) in frames ``frames`` (M,);
    candidates are the coarse tracks visible in that frame, back-projected
    with their own depth there. Returns ``(idx (M, k), w (M, k))``, padded
    with weight 0 where fewer than ``r + 1`` candidates exist. A query that
    coincides with a candidate takes that candidate with weight 1.
    """
    query = np.asarray(query, dtype=float)
    coarse_depths = np.asarray(coarse_depths, dtype=float)
    k = int(r) + 1
    M = len(query)
    idx = np.zeros((M, k), dtype=np.int64)
    w = np.zeros((M, k))
    for t in np.unique(frames):
        rows = np.flatnonzero(frames == t)
        cand = np.flatnonzero(coarse_tracks.visible[:, t] & (coarse_depths[:, t] > 0))
        if len(cand) == 0:
            raise NoVisibleCoarseNeighbors(f"no coarse track visible in frame {t}")
        pts = camera_points(cam, coarse_tracks.positions[cand, t], coarse_depths[cand, t])
        kk = min(k, len(cand))
        dist, nn = cKDTree(pts).query(query[rows], k=kk)
        dist = dist.reshape(len(rows), kk)
        nn = nn.reshape(len(rows), kk)
        ww = 1.0 / (dist + eps)
        exact = dist[:, 0] == 0.0
        ww[exact] = 0.0
        ww[exact, 0] = 1.0
        ww /= ww.sum(axis=1, keepdims=True)
        idx[rows, :kk] = cand[nn]
        w[rows, :kk] = ww
    return idx, w


def upsample_trajectories(coarse_values, coarse_tracks: TrackSet2D, coarse_depths,
                          full_tracks: TrackSet2D, full_depths, cam: CameraModel, r, eps=1e-8):
    """Interpolate per-track coarse quantities (anchors, offsets, ...) to the full set.

    ``coarse_values`` is ``(Nc, ...)``; the result is ``(N, ...)``. Each full
    track is matched in its spawn frame, in camera-centric 3D.
    """
    full_depths = np.asarray(full_depths, dtype=float)
    n = len(full_tracks)
    spawn = full_tracks.spawn_frame
    q = camera_points(cam, full_tracks.spawn_positions(), full_depths[np.arange(n), spawn])
    idx, w = upsample_weights_idw(q, coarse_tracks, coarse_depths, spawn, cam, r, eps)
    vals = np.asarray(coarse_values, dtype=float)
    return np.einsum("mk,mk...->m...", w, vals[idx]), (idx, w)


# --------------------------------------------------------------------------
# dense depth alignment
# --------------------------------------------------------------------------

def propagate_depth(raw_depth, track_uv, track_depth, cam: CameraModel, k, eps=1e-8):
    """Raw depth map rescaled by IDW-interpolated per-track ratios.

    For each pixel, the ``k`` tracked points nearest in the image plane are
    weighted by the inverse 3D distance between raw-depth-lifted points.
    Tracked points where the raw depth is zero are skipped.
    """
    raw = np.asarray(raw_depth, dtype=float)
    H, W = raw.shape
    uv = np.asarray(track_uv, dtype=float).reshape(-1, 2)
    d = np.asarray(track_depth, dtype=float).reshape(-1)
    raw_at = bilinear_sample(raw, uv)
    ok = raw_at != 0
    if not ok.any():
        raise ZeroRawDepth("raw depth is zero at every tracked point")
    uv, d, raw_at = uv[ok], d[ok], raw_at[ok]
    ratio = d / raw_at
    kk = min(int(k), len(uv))
    py, px = np.mgrid[0:H, 0:W]
    pix = np.stack([px.ravel(), py.ravel()], axis=1).astype(float)
    _, nn = cKDTree(uv).query(pix, k=kk)
    nn = nn.reshape(len(pix), kk)
    P = camera_points(cam, pix, raw.ravel())
    Q = camera_points(cam, uv, raw_at)
    dist = np.linalg.norm(P[:, None, :] - Q[nn], axis=-1)
    w = 1.0 / (dist + eps)
    w /= w.sum(axis=1, keepdims=True)
    r_pix = np.sum(w * ratio[nn], axis=1)
    return (r_pix * raw.ravel()).reshape(H, W)
