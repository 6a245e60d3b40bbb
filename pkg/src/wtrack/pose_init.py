"""Stage 1: per-clip camera poses from static tracks and depths, then merging.

Within a clip every ordered pair of visible frames ``(t1, t2)`` of a track
contributes ``|| pi_t2 pi_t1^-1 (p_t1, d_t1) - p_t2 ||^2``. Clips are
solved independently with the first frame pinned to the identity, and
tracks are re-gated between solves. Consecutive clips are then chained by one
rigid transform per boundary, fitted on the same pairwise residual across
the boundary.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig, SolverConfig
from .errors import DegenerateGeometry, InsufficientOverlap, InsufficientTracks
from .geometry import (Z_MIN, CameraModel, adjoint_transpose, compose_batch, identity_arrays,
                       inverse_batch, quat_to_rotmat, rotmat_to_quat, transform_points)
from .kernels import pair_terms
from .solver import ParamBlocks, minimize
from .trackset import TrackSet2D

log = logging.getLogger(__name__)


@dataclass
class Clip:
    start: int                 # first frame (inclusive)
    stop: int                  # last frame (inclusive)
    quats: np.ndarray          # (F, 4) local poses, first is identity
    trans: np.ndarray          # (F, 3)
    inliers: np.ndarray        # (N,) bool over the static track set
    candidates: np.ndarray     # (N,) bool, tracks usable in this clip
    loss: float = 0.0
    rounds: int = 0
    degenerate: bool = False
    history: list = field(default_factory=list)

    @property
    def n_frames(self):
        return self.stop - self.start + 1


@dataclass
class PoseEstimate:
    quats: np.ndarray          # (T, 4) world-to-camera
    trans: np.ndarray          # (T, 3)
    inliers: np.ndarray        # (N,) bool
    clips: list
    warnings: list


def kabsch(src, dst, weights=None):
    """Rigid ``(R, t)`` minimizing ``sum w |R src + t - dst|^2``; ``None`` if rank < 2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    if len(src) < 3:
        return None
    w = w / w.sum()
    ms = w @ src
    md = w @ dst
    A = (src - ms) * w[:, None]
    H = A.T @ (dst - md)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        return None
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, md - R @ ms


def backproject_cam(cam: CameraModel, uv, depth):
    return cam.rays(uv) * np.asarray(depth, dtype=float)[..., None]


def gate_inliers(residuals, tau, diagonal, min_keep=6):
    """``residual < tau * diagonal``, always keeping the ``min_keep`` lowest residuals."""
    residuals = np.asarray(residuals, dtype=float)
    mask = residuals < tau * diagonal
    if mask.sum() < min_keep:
        order = np.argsort(residuals, kind="stable")
        mask[order[:min_keep]] = True
    return mask


# --------------------------------------------------------------------------
# pair construction
# --------------------------------------------------------------------------

@dataclass
class _Pairs:
    f1: np.ndarray
    f2: np.ndarray
    uv1: np.ndarray
    d1: np.ndarray
    uv2: np.ndarray
    track: np.ndarray          # row -> local track index

    def take(self, rows):
        return _Pairs(self.f1[rows], self.f2[rows], self.uv1[rows], self.d1[rows],
                      self.uv2[rows], self.track[rows])

    def __len__(self):
        return len(self.f1)


def _build_pairs(pos, vis, dep, frames_a, frames_b, local_a, local_b):
    """All (t1 in frames_a, t2 in frames_b, t1 != t2) pairs per track.

    ``pos``/``vis``/``dep`` are indexed by global frame; ``local_*`` map the
    frames to pose slots.
    """
    rows = {k: [] for k in ("f1", "f2", "uv1", "d1", "uv2", "track")}
    for ta, la in zip(frames_a, local_a):
        src = vis[:, ta] & (dep[:, ta] > Z_MIN)
        for tb, lb in zip(frames_b, local_b):
            if ta == tb:
                continue
            sel = np.flatnonzero(src & vis[:, tb])
            if not len(sel):
                continue
            rows["f1"].append(np.full(len(sel), la))
            rows["f2"].append(np.full(len(sel), lb))
            rows["uv1"].append(pos[sel, ta])
            rows["d1"].append(dep[sel, ta])
            rows["uv2"].append(pos[sel, tb])
            rows["track"].append(sel)
    if not rows["f1"]:
        z = np.zeros(0, dtype=np.int64)
        return _Pairs(z, z, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), z)
    return _Pairs(*(np.concatenate(rows[k]) for k in ("f1", "f2", "uv1", "d1", "uv2", "track")))


class PairObjective:
    """Sum of squared pairwise reprojection errors over a set of pose slots."""

    def __init__(self, pairs: _Pairs, cam: CameraModel, clamp):
        self.pairs = pairs
        self.cam = cam
        self.clamp = clamp
        self.last_diag = None

    def errors(self, quats, trans):
        p = self.pairs
        return pair_terms(quat_to_rotmat(quats), trans, p.f1, p.f2, p.uv1, p.d1, p.uv2,
                          self.cam, Z_MIN, self.clamp)

    def __call__(self, params: ParamBlocks):
        loss, g, diag, _ = self.errors(params.quats, params.trans)
        self.last_diag = diag
        return loss, g, {}

    def precond(self, params):
        return self.last_diag, {}


def _per_track_max(errs, track, n):
    out = np.zeros(n)
    np.maximum.at(out, track, errs)
    return out


# --------------------------------------------------------------------------
# clip estimation
# --------------------------------------------------------------------------

def _init_clip_poses(pos, vis, dep, cam, frames, use):
    """Chain frame-to-frame rigid fits of back-projected tracks."""
    F = len(frames)
    q, t = identity_arrays(F)
    degenerate = False
    for k in range(1, F):
        a, b = frames[k - 1], frames[k]
        sel = use & vis[:, a] & vis[:, b] & (dep[:, a] > Z_MIN) & (dep[:, b] > Z_MIN)
        fit = None
        if sel.sum() >= 3:
            Xa = backproject_cam(cam, pos[sel, a], dep[sel, a])
            Xb = backproject_cam(cam, pos[sel, b], dep[sel, b])
            fit = kabsch(Xa, Xb)
        if fit is None:
            degenerate = degenerate or sel.sum() >= 3
            q[k], t[k] = q[k - 1], t[k - 1]
            continue
        R, tr = fit
        q[k], t[k] = compose_batch(rotmat_to_quat(R), tr, q[k - 1], t[k - 1])
    return q, t, degenerate


def _geometry_rank(pos, vis, dep, cam, frames, use):
    pts = []
    for t in frames:
        sel = use & vis[:, t] & (dep[:, t] > Z_MIN)
        pts.append(backproject_cam(cam, pos[sel, t], dep[sel, t]))
    X = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(X) < 3:
        return 0
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    return int(np.sum(s > 1e-9 * max(s[0], 1e-300)))


def estimate_clip_poses(tracks: TrackSet2D, depths, cam: CameraModel, cfg: PipelineConfig,
                        start, stop, diagonal, gating=True) -> Clip:
    """Poses for frames ``start..stop`` (inclusive) relative to frame ``start``."""
    frames = np.arange(start, stop + 1)
    F = len(frames)
    n = len(tracks)
    pos, vis, dep = tracks.positions, tracks.visible, np.asarray(depths, dtype=float)
    q, t = identity_arrays(F)
    nvis = vis[:, frames].sum(axis=1) if n else np.zeros(0, int)
    if F == 1:
        inl = vis[:, start].copy()
        return Clip(start, stop, q, t, inl, inl.copy())

    candidates = (nvis >= 2) & ((dep[:, frames] > Z_MIN) & vis[:, frames]).any(axis=1)
    if candidates.sum() < cfg.min_inliers:
        raise InsufficientTracks(
            f"clip {start}-{stop}: {int(candidates.sum())} usable static tracks, need {cfg.min_inliers}")
    if _geometry_rank(pos, vis, dep, cam, frames, candidates) < 2:
        log.warning("clip %d-%d: degenerate track geometry, poses left at identity", start, stop)
        return Clip(start, stop, q, t, candidates.copy(), candidates, degenerate=True)

    local = np.arange(F)
    pairs = _build_pairs(pos, vis, dep, frames, frames, local, local)
    q, t, _ = _init_clip_poses(pos, vis, dep, cam, frames, candidates)
    clamp = 10.0 * diagonal
    inl = candidates.copy()
    history = []
    rounds = 0
    loss = 0.0
    scfg = cfg.solver
    for rounds in range(1, cfg.gating_rounds + 1):
        rows = inl[pairs.track]
        obj = PairObjective(pairs.take(rows), cam, clamp)
        init = ParamBlocks(q, t, frozen_poses=np.arange(F) == 0)
        res = minimize(obj, init, scfg, precond=obj.precond)
        q, t, loss = res.params.quats, res.params.trans, res.loss
        history.extend(res.history)
        if not gating:
            break
        full = PairObjective(pairs, cam, clamp)
        errs = full.errors(q, t)[3]
        worst = _per_track_max(errs, pairs.track, n)
        new = gate_inliers(np.where(candidates, worst, np.inf), cfg.inlier_tau, diagonal,
                           cfg.min_inliers) & candidates
        if np.array_equal(new, inl):
            break
        inl = new
    return Clip(start, stop, q, t, inl, candidates, loss, rounds, False, history)


# --------------------------------------------------------------------------
# merging
# --------------------------------------------------------------------------

def _mean_world(pos, vis, dep, cam, frames, qs, ts, sel):
    """Mean back-projection in the clip's local world for tracks ``sel``."""
    acc = np.zeros((len(sel), 3))
    cnt = np.zeros(len(sel))
    for k, f in enumerate(frames):
        ok = vis[sel, f] & (dep[sel, f] > Z_MIN)
        if not ok.any():
            continue
        Xc = backproject_cam(cam, pos[sel[ok], f], dep[sel[ok], f])
        qi, ti = inverse_batch(qs[k], ts[k])
        acc[ok] += transform_points(quat_to_rotmat(qi), ti, Xc)
        cnt[ok] += 1
    good = cnt > 0
    acc[good] /= cnt[good, None]
    return acc, good


class _BoundaryObjective:
    """Pairwise residuals across one clip boundary, as a function of the
    relative transform ``M`` (local world of clip a -> local world of clip b)."""

    def __init__(self, pairs, cam, clamp, qa, ta, qb, tb):
        self.pairs = pairs
        self.cam = cam
        self.clamp = clamp
        self.qa, self.ta, self.qb, self.tb = qa, ta, qb, tb
        self.last_diag = None

    def slots(self, qm, tm):
        qb, tb = compose_batch(self.qb, self.tb, qm[None], tm[None])
        return np.concatenate([self.qa, qb]), np.concatenate([self.ta, tb])

    def __call__(self, params: ParamBlocks):
        qm, tm = params.quats[0], params.trans[0]
        qs, ts = self.slots(qm, tm)
        p = self.pairs
        loss, g, diag, _ = pair_terms(quat_to_rotmat(qs), ts, p.f1, p.f2, p.uv1, p.d1, p.uv2,
                                      self.cam, Z_MIN, self.clamp)
        nb = len(self.qb)
        gm = adjoint_transpose(self.qb, self.tb, g[-nb:]).sum(axis=0)
        # magnitude-only curvature estimate: good enough for scaling the first step
        dm = diag[-nb:].sum(axis=0)
        self.last_diag = dm[None]
        return loss, gm[None], {}

    def precond(self, params):
        return self.last_diag, {}


def merge_clips(clips, tracks: TrackSet2D, depths, cam: CameraModel, cfg: PipelineConfig,
                diagonal, solver_cfg: SolverConfig | None = None):
    """Chain clip-local poses into one trajectory with ``pi_0 = identity``."""
    pos, vis, dep = tracks.positions, tracks.visible, np.asarray(depths, dtype=float)
    T = clips[-1].stop + 1
    quats, trans = identity_arrays(T)
    qg, tg = identity_arrays(1)
    qg, tg = qg[0], tg[0]
    clamp = 10.0 * diagonal
    scfg = solver_cfg or cfg.solver
    for k, clip in enumerate(clips):
        if k > 0:
            prev = clips[k - 1]
            shared = np.flatnonzero(prev.inliers & clip.inliers)
            fa = np.arange(prev.start, prev.stop + 1)
            fb = np.arange(clip.start, clip.stop + 1)
            Xa, ga = _mean_world(pos, vis, dep, cam, fa, prev.quats, prev.trans, shared)
            Xb, gb = _mean_world(pos, vis, dep, cam, fb, clip.quats, clip.trans, shared)
            both = ga & gb
            if both.sum() < cfg.min_inliers:
                raise InsufficientOverlap(
                    f"clips {prev.start}-{prev.stop} and {clip.start}-{clip.stop} share "
                    f"{int(both.sum())} tracks, need {cfg.min_inliers}")
            sel = shared[both]
            fit = kabsch(Xa[both], Xb[both])
            if fit is None:
                qm, tm = identity_arrays(1)
                qm, tm = qm[0], tm[0]
            else:
                qm, tm = rotmat_to_quat(fit[0]), fit[1]
            mask = np.zeros(len(tracks), dtype=bool)
            mask[sel] = True
            la, lb = np.arange(len(fa)), len(fa) + np.arange(len(fb))
            sub_vis = vis & mask[:, None]
            fwd = _build_pairs(pos, sub_vis, dep, fa, fb, la, lb)
            bwd = _build_pairs(pos, sub_vis, dep, fb, fa, lb, la)
            pairs = _Pairs(*(np.concatenate([getattr(fwd, a), getattr(bwd, a)])
                             for a in ("f1", "f2", "uv1", "d1", "uv2", "track")))
            obj = _BoundaryObjective(pairs, cam, clamp, prev.quats, prev.trans,
                                     clip.quats, clip.trans)
            res = minimize(obj, ParamBlocks(qm[None], tm[None]), scfg, precond=obj.precond)
            qm, tm = res.params.quats[0], res.params.trans[0]
            qg, tg = compose_batch(qm, tm, qg, tg)
        q, t = compose_batch(clip.quats, clip.trans, qg[None], tg[None])
        quats[clip.start:clip.stop + 1] = q
        trans[clip.start:clip.stop + 1] = t
    quats[0], trans[0] = identity_arrays(1)[0][0], np.zeros(3)
    return quats, trans


def clip_ranges(n_frames, clip_len):
    return [(a, min(a + clip_len, n_frames) - 1) for a in range(0, n_frames, clip_len)]


def estimate_poses(tracks: TrackSet2D, depths, cam: CameraModel, cfg: PipelineConfig,
                   diagonal, threads=1, gating=True) -> PoseEstimate:
    """Stage 1 over the whole sequence; clips run on ``threads`` workers."""
    ranges = clip_ranges(tracks.n_frames, cfg.clip_len)

    def work(r):
        return estimate_clip_poses(tracks, depths, cam, cfg, r[0], r[1], diagonal, gating=gating)

    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            clips = list(pool.map(work, ranges))
    else:
        clips = [work(r) for r in ranges]
    warnings = [f"DegenerateGeometry: clip {c.start}-{c.stop}" for c in clips if c.degenerate]
    quats, trans = merge_clips(clips, tracks, depths, cam, cfg, diagonal)
    inliers = np.ones(len(tracks), dtype=bool)
    for c in clips:
        inliers &= ~(c.candidates & ~c.inliers)
    return PoseEstimate(quats, trans, inliers, clips, warnings)


__all__ = ["Clip", "PoseEstimate", "kabsch", "gate_inliers", "estimate_clip_poses",
           "merge_clips", "estimate_poses", "clip_ranges", "DegenerateGeometry"]
