"""Evaluation metrics: trajectories, depth, 3D tracking, long-range flow.

Percentages are in [0, 100]; distances in scene units; angles in degrees.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateFit, LengthMismatch, ShapeMismatch
from .geometry import quat_to_rotmat

APD_FRACTIONS = (0.01, 0.02, 0.04, 0.08, 0.16)


@dataclass
class EvalReport:
    ate: float | None = None
    rte: float | None = None
    rre: float | None = None
    abs_rel: float | None = None
    delta_125: float | None = None
    aj: float | None = None
    apd3d: float | None = None
    oa: float | None = None
    epe: float | None = None
    iou: float | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def umeyama(src, dst, with_scale=True):
    """Similarity ``(s, R, t)`` minimizing ``sum |s R src + t - dst|^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var_s = np.sum(xs * xs) / n
    s = float(np.trace(np.diag(S) @ D) / var_s) if (with_scale and var_s > 0) else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def camera_to_world(quats, trans):
    """Rotations (camera-to-world) and camera centers for world-to-camera poses."""
    R = quat_to_rotmat(np.asarray(quats, dtype=float))
    Rt = np.transpose(R, (0, 2, 1))
    c = -np.einsum("tij,tj->ti", Rt, np.asarray(trans, dtype=float))
    return Rt, c


def rotation_angle_deg(R):
    # atan2 form stays accurate near 0 where arccos of the trace loses half the digits
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    v = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = np.linalg.norm(v, axis=-1) / 2.0
    return np.degrees(np.arctan2(s, c))


def traj_metrics(est_quats, est_trans, gt_quats, gt_trans):
    """``(ATE, RTE, RRE)`` after aligning camera centers with a similarity transform."""
    if len(est_quats) != len(gt_quats) or len(est_trans) != len(gt_trans):
        raise LengthMismatch(f"{len(est_quats)} estimated vs {len(gt_quats)} ground-truth poses")
    if len(gt_quats) < 2:
        raise LengthMismatch("need at least two poses")
    Re, ce = camera_to_world(est_quats, est_trans)
    Rg, cg = camera_to_world(gt_quats, gt_trans)
    s, Ra, ta = umeyama(ce, cg)
    ca = s * ce @ Ra.T + ta
    Rea = np.einsum("ij,tjk->tik", Ra, Re)
    ate = float(np.sqrt(np.mean(np.sum((ca - cg) ** 2, axis=1))))
    rte, rre = [], []
    for k in range(len(cg) - 1):
        de_R = Rea[k].T @ Rea[k + 1]
        de_t = Rea[k].T @ (ca[k + 1] - ca[k])
        dg_R = Rg[k].T @ Rg[k + 1]
        dg_t = Rg[k].T @ (cg[k + 1] - cg[k])
        err_R = dg_R.T @ de_R
        err_t = dg_R.T @ (de_t - dg_t)
        rte.append(np.linalg.norm(err_t))
        rre.append(rotation_angle_deg(err_R))
    return ate, float(np.mean(rte)), float(np.mean(rre))


# --------------------------------------------------------------------------
# depth
# --------------------------------------------------------------------------

def rasterize_min_depth(uv, depth, height, width):
    """Depth image from points; nearest pixel, smaller depth wins, NaN elsewhere."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    depth = np.asarray(depth, dtype=float).reshape(-1)
    col = np.round(uv[:, 0]).astype(np.int64)
    row = np.round(uv[:, 1]).astype(np.int64)
    ok = (col >= 0) & (col < width) & (row >= 0) & (row < height) & np.isfinite(depth)
    img = np.full((height, width), np.inf)
    np.minimum.at(img, (row[ok], col[ok]), depth[ok])
    img[~np.isfinite(img)] = np.nan
    return img


def align_scale_shift(est, gt):
    """Least-squares ``(a, b)`` with ``a * est + b ~ gt``."""
    est = np.asarray(est, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    if len(est) < 2:
        raise DegenerateFit("need at least two valid depths")
    if np.ptp(est) == 0 or np.ptp(gt) == 0:
        raise DegenerateFit("constant depth cannot be scale/shift aligned")
    A = np.stack([est, np.ones_like(est)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, gt, rcond=None)
    return float(a), float(b)


def depth_metrics(est, gt, valid=None):
    """``(Abs Rel, delta < 1.25 in %)`` after a single scale+shift alignment."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise ShapeMismatch(f"{est.shape} vs {gt.shape}")
    mask = np.isfinite(est) & np.isfinite(gt) & (gt > 0)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    e, g = est[mask], gt[mask]
    a, b = align_scale_shift(e, g)
    pred = a * e + b
    abs_rel = float(np.mean(np.abs(pred - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(pred / g, g / pred)
    good = (pred > 0) & (ratio < 1.25)
    return abs_rel, float(100.0 * np.mean(good))


# --------------------------------------------------------------------------
# 3D tracking and flow
# --------------------------------------------------------------------------

def tracking3d_metrics(est, est_vis, gt, gt_vis, scene_scale=1.0, fractions=APD_FRACTIONS):
    """``(AJ, APD_3D, OA)`` in percent, pooled over all tracks and frames."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    est_vis = np.asarray(est_vis, dtype=bool)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if est.shape != gt.shape or est_vis.shape != gt_vis.shape or est.shape[:-1] != gt_vis.shape:
        raise LengthMismatch(f"shapes {est.shape}/{est_vis.shape} vs {gt.shape}/{gt_vis.shape}")
    dist = np.linalg.norm(est - gt, axis=-1)
    dist = np.where(np.isfinite(dist), dist, np.inf)
    n_vis = gt_vis.sum()
    apd, aj = [], []
    for f in fractions:
        within = dist < f * scene_scale
        apd.append(np.sum(within & gt_vis) / n_vis if n_vis else 0.0)
        tp = np.sum(within & gt_vis & est_vis)
        fp = np.sum(est_vis & ~(gt_vis & within))
        fn = np.sum(gt_vis & ~(est_vis & within))
        denom = tp + fp + fn
        aj.append(tp / denom if denom else 1.0)
    oa = float(np.mean(est_vis == gt_vis)) if gt_vis.size else 1.0
    return 100.0 * float(np.mean(aj)), 100.0 * float(np.mean(apd)), 100.0 * oa


def flow_metrics(est_flow, gt_flow, est_vis, gt_vis):
    """``(EPE, IoU of occluded regions in %)``; IoU is 100 when neither side has occlusion."""
    est_flow = np.asarray(est_flow, dtype=float)
    gt_flow = np.asarray(gt_flow, dtype=float)
    est_vis = np.asarray(est_vis, dtype=bool)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if est_flow.shape != gt_flow.shape or est_vis.shape != gt_vis.shape:
        raise ShapeMismatch(f"{est_flow.shape}/{est_vis.shape} vs {gt_flow.shape}/{gt_vis.shape}")
    epe = float(np.mean(np.linalg.norm(est_flow - gt_flow, axis=-1)))
    occ_e, occ_g = ~est_vis, ~gt_vis
    union = np.sum(occ_e | occ_g)
    iou = 100.0 * np.sum(occ_e & occ_g) / union if union else 100.0
    return epe, float(iou)
