"""Stage 2: joint refinement of poses, static anchors and per-frame offsets.

Each background track ``i`` is modelled as ``anchor_i + offset_i(t)``. The
objective is

    lambda_ba * L_ba + lambda_dc * L_dc + lambda_asap * sum |offset|_1

with reprojection (``L_ba``) and depth (``L_dc``) residuals taken at visible
frames only. Tracks whose offsets still exceed ``epsilon`` afterwards are
moving background and are handed to the dynamic stage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig, SolverConfig
from .errors import NoVisibleFrames
from .geometry import Z_MIN, CameraModel, quat_to_rotmat
from .kernels import obs_terms
from .solver import ParamBlocks, SolveResult, minimize
from .trackset import TrackSet2D


@dataclass
class StaticModel:
    anchors: np.ndarray      # (N, 3) world
    offsets: np.ndarray      # (N, T, 3) world

    @property
    def positions(self):
        return self.anchors[:, None, :] + self.offsets

    def copy(self):
        return StaticModel(self.anchors.copy(), self.offsets.copy())


def backproject_world(quats, trans, cam: CameraModel, uv, depth, frames):
    """World points for pixels ``uv`` (M, 2) at ``depth`` seen from ``frames``."""
    R = quat_to_rotmat(quats)[frames]
    Xc = cam.rays(uv) * np.asarray(depth, dtype=float)[:, None]
    return np.einsum("mji,mj->mi", R, Xc - trans[frames])


def init_static_anchors(tracks: TrackSet2D, depths, quats, trans, cam: CameraModel) -> StaticModel:
    """Anchors = mean back-projection over visible frames with positive depth."""
    depths = np.asarray(depths, dtype=float)
    N, T = tracks.visible.shape
    ok = tracks.visible & (depths > 0)
    counts = ok.sum(axis=1)
    if N and (counts == 0).any():
        bad = int(np.flatnonzero(counts == 0)[0])
        raise NoVisibleFrames(bad)
    ii, tt = np.nonzero(ok)
    X = backproject_world(quats, trans, cam, tracks.positions[ii, tt], depths[ii, tt], tt)
    anchors = np.zeros((N, 3))
    for k in range(3):
        anchors[:, k] = np.bincount(ii, weights=X[:, k], minlength=N)
    anchors /= np.maximum(counts, 1)[:, None]
    return StaticModel(anchors, np.zeros((N, T, 3)))


class Observations:
    """Flattened visible (track, frame) observations."""

    def __init__(self, tracks: TrackSet2D, depths):
        depths = np.asarray(depths, dtype=float)
        self.n_tracks, self.n_frames = tracks.visible.shape
        self.i, self.t = np.nonzero(tracks.visible)
        self.uv = tracks.positions[self.i, self.t]
        self.dep = depths[self.i, self.t]
        self.has_depth = self.dep > 0

    def terms(self, quats, trans, X, cam, w_ba, w_dc, clamp):
        """Sum of weighted data terms at rows' world points ``X`` (M, 3)."""
        R = quat_to_rotmat(quats)
        hd = self.has_depth
        if hd.all():
            return obs_terms(R, trans, X, self.t, self.uv, self.dep, cam, w_ba, w_dc, Z_MIN, clamp)
        parts = []
        for sel, wdc in ((hd, w_dc), (~hd, 0.0)):
            idx = np.flatnonzero(sel)
            parts.append((idx, obs_terms(R, trans, X[idx], self.t[idx], self.uv[idx],
                                         np.where(sel, self.dep, 0.0)[idx], cam, w_ba, wdc,
                                         Z_MIN, clamp)))
        loss = 0.0
        gX = np.zeros_like(X)
        dX = np.zeros_like(X)
        gpose = np.zeros((len(quats), 6))
        dpose = np.zeros((len(quats), 6))
        for idx, (l, g, gp, dx, dp) in parts:
            loss += l
            gX[idx] = g
            dX[idx] = dx
            gpose += gp
            dpose += dp
        return loss, gX, gpose, dX, dpose


def _scatter_rows(values, i, n):
    out = np.zeros((n, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = np.bincount(i, weights=values[:, k], minlength=n)
    return out


class StaticObjective:
    """Smooth part of the Stage-2 objective over blocks ``anchors``/``offsets``.

    With ``asap_in_loss`` the L1 term (and its sign sub-gradient) is added to
    the returned value; otherwise the solver is expected to handle it through
    its ``l1`` argument.
    """

    def __init__(self, obs: Observations, cam: CameraModel, w_ba=1.0, w_dc=1.0, w_asap=0.0,
                 clamp=1e3, asap_in_loss=False):
        self.obs = obs
        self.cam = cam
        self.w_ba, self.w_dc, self.w_asap = w_ba, w_dc, w_asap
        self.clamp = clamp
        self.asap_in_loss = asap_in_loss
        self.last_diag = None

    def __call__(self, params: ParamBlocks):
        o = self.obs
        A = params.points["anchors"]
        O = params.points.get("offsets")
        X = A[o.i] + (O[o.i, o.t] if O is not None else 0.0)
        loss, gX, gpose, dX, dpose = o.terms(params.quats, params.trans, X, self.cam,
                                            self.w_ba, self.w_dc, self.clamp)
        grads = {"anchors": _scatter_rows(gX, o.i, len(A))}
        diag = {"anchors": _scatter_rows(dX, o.i, len(A))}
        if O is not None:
            gO = np.zeros_like(O)
            gO[o.i, o.t] = gX
            dO = np.zeros_like(O)
            dO[o.i, o.t] = dX
            if self.asap_in_loss and self.w_asap:
                loss += self.w_asap * float(np.abs(O).sum())
                gO += self.w_asap * np.sign(O)
            grads["offsets"] = gO
            diag["offsets"] = dO
        self.last_diag = (dpose, diag)
        return loss, gpose, grads

    def precond(self, params):
        return self.last_diag


# --------------------------------------------------------------------------
# individual losses (unweighted)
# --------------------------------------------------------------------------

def _eval(model, quats, trans, cam, tracks, depths, w_ba, w_dc, clamp):
    obs = Observations(tracks, depths if depths is not None else np.ones(tracks.visible.shape))
    X = model.anchors[obs.i] + model.offsets[obs.i, obs.t]
    return obs.terms(quats, trans, X, cam, w_ba, w_dc, clamp)[0]


def loss_ba(model: StaticModel, quats, trans, cam: CameraModel, tracks: TrackSet2D, clamp=1e3):
    """Sum of squared pixel reprojection errors over visible observations."""
    return _eval(model, quats, trans, cam, tracks, None, 1.0, 0.0, clamp)


def loss_dc(model: StaticModel, quats, trans, tracks: TrackSet2D, depths):
    """Sum of squared camera-depth errors over visible observations with depth."""
    R = quat_to_rotmat(quats)
    ii, tt = np.nonzero(tracks.visible & (np.asarray(depths) > 0))
    X = model.anchors[ii] + model.offsets[ii, tt]
    z = np.einsum("mj,mj->m", R[tt, 2], X) + trans[tt, 2]
    return float(np.sum((z - np.asarray(depths)[ii, tt]) ** 2))


def loss_asap(model: StaticModel):
    return float(np.abs(model.offsets).sum())


# --------------------------------------------------------------------------
# stage driver
# --------------------------------------------------------------------------

@dataclass
class RefineResult:
    quats: np.ndarray
    trans: np.ndarray
    model: StaticModel
    solve: SolveResult
    losses: dict


def refine_static(model: StaticModel, quats, trans, tracks: TrackSet2D, depths, cam: CameraModel,
                  cfg: PipelineConfig, diagonal, freeze_offsets=False,
                  solver_cfg: SolverConfig | None = None, callback=None) -> RefineResult:
    """Minimize the Stage-2 objective; the first pose stays fixed."""
    obs = Observations(tracks, depths)
    clamp = 10.0 * diagonal
    obj = StaticObjective(obs, cam, cfg.lambda_ba, cfg.lambda_dc, cfg.lambda_asap, clamp)
    N, T = tracks.visible.shape
    frozen_poses = np.zeros(len(quats), dtype=bool)
    frozen_poses[0] = True
    # offsets where nothing is observed only feel the L1 term, which pins them at 0
    frozen_off = ~tracks.visible if not freeze_offsets else np.ones((N, T), dtype=bool)
    init = ParamBlocks(quats, trans, {"anchors": model.anchors, "offsets": model.offsets},
                       frozen_poses, {"offsets": frozen_off})
    res = minimize(obj, init, solver_cfg or cfg.solver, l1={"offsets": cfg.lambda_asap},
                   precond=obj.precond, callback=callback)
    p = res.params
    out = StaticModel(p.points["anchors"], p.points["offsets"])
    losses = {"ba": loss_ba(out, p.quats, p.trans, cam, tracks, clamp),
              "dc": loss_dc(out, p.quats, p.trans, tracks, depths),
              "asap": loss_asap(out), "total": res.loss}
    return RefineResult(p.quats, p.trans, out, res, losses)


def classify_dynamic_background(model: StaticModel, epsilon):
    """Tracks whose largest per-frame offset norm reaches ``epsilon``."""
    if model.offsets.size == 0:
        return np.zeros(len(model.anchors), dtype=bool)
    return np.linalg.norm(model.offsets, axis=-1).max(axis=1) >= epsilon
